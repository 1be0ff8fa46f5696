//! The five batch commands. Each writes its artifacts and the resolved
//! configuration into `cfg.out`; progress goes to stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use volflow::data::{
    generate_phantom, load_image, load_manifest, load_volume, make_drr_pair, rescale_external_cxr, save_image,
    save_manifest, save_slice_sheet, save_volume, split_for_seed, DrrStats, ManifestEntry, Split,
};
use volflow::glow::{from_flow_space, load_checkpoint, save_checkpoint};
use volflow::metrics::{psnr, ssim, MetricReport};
use volflow::solver::{reconstruct, reconstruct_family, trajectory_tsv};
use volflow::train::train_with;
use volflow::{Error, FlowModel, ModelConfig, Plane, Projection, ReconConfig, ReconResult, Tensor, Volume};

use crate::config::{Mode, RunConfig};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const MANIFEST: &str = "manifest.tsv";

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join(RESOLVED_CONFIG), cfg.resolved())?;
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes `count` phantoms, their manifest and the resolved config.
pub fn phantoms(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.phantom()?;
    prepare_out(cfg)?;
    let seeds: Vec<u64> = (0..cfg.phantom_count).map(|i| cfg.phantom_first_seed + i).collect();
    let entries = seeds
        .par_iter()
        .map(|&seed| {
            let v = generate_phantom(&spec.with_seed(seed))?;
            let name = PathBuf::from(format!("phantom_{seed:05}.vol3"));
            save_volume(&cfg.out.join(&name), &v)?;
            Ok(ManifestEntry { path: name, split: split_for_seed(seed), seed })
        })
        .collect::<volflow::Result<Vec<_>>>()?;
    save_manifest(&cfg.out.join(MANIFEST), &entries)?;
    let test = entries.iter().filter(|e| e.split == Split::Test).count();
    eprintln!(
        "wrote {} phantoms ({} train, {test} test) to {}",
        entries.len(),
        entries.len() - test,
        cfg.out.display()
    );
    Ok(())
}

/// Manifest entries of one split with paths resolved against the data
/// directory, at most `limit` of them (0: all).
fn split_entries(cfg: &RunConfig, split: Split, limit: usize) -> Result<Vec<ManifestEntry>> {
    let manifest = cfg.data_dir.join(MANIFEST);
    let mut entries: Vec<ManifestEntry> = load_manifest(&manifest)
        .with_context(|| format!("reading {}", manifest.display()))?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| ManifestEntry { path: cfg.data_dir.join(&e.path), ..e })
        .collect();
    if limit > 0 {
        entries.truncate(limit);
    }
    if entries.is_empty() {
        bail!(Error::Config(format!("no {} volumes in {}", split.as_str(), manifest.display())));
    }
    Ok(entries)
}

fn load_volumes(entries: &[ManifestEntry], model: &ModelConfig) -> Result<Vec<Volume>> {
    entries
        .iter()
        .map(|e| {
            let v = load_volume(&e.path).with_context(|| format!("reading {}", e.path.display()))?;
            if v.shape() != model.input_shape {
                bail!(Error::Shape(format!(
                    "{} is {:?}, the model expects {:?}",
                    e.path.display(),
                    v.shape(),
                    model.input_shape
                )));
            }
            Ok(v)
        })
        .collect()
}

fn load_model(cfg: &RunConfig) -> Result<FlowModel> {
    let model = cfg.model()?;
    load_checkpoint(&cfg.checkpoint, Some(&model)).with_context(|| format!("loading {}", cfg.checkpoint.display()))
}

/// Training log without wall-clock time, so reruns are byte-identical.
pub fn train_log(records: &[volflow::train::EpochRecord]) -> String {
    let mut out = String::from("epoch\tmean_nll\tbits_per_dim\n");
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}", r.epoch, r.mean_nll, r.bits_per_dim);
    }
    out
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let model_cfg = cfg.model()?;
    let mut train_cfg = cfg.train()?;
    train_cfg.checkpoint_path = Some(cfg.checkpoint.clone());
    let entries = split_entries(cfg, Split::Train, cfg.train_count)?;
    let data = load_volumes(&entries, &model_cfg)?;
    prepare_out(cfg)?;
    if let Some(parent) = cfg.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut model = FlowModel::new(model_cfg, cfg.seed)?;
    eprintln!("training {} parameters on {} volumes", model.num_params(), data.len());
    let report = train_with(&mut model, &data, &train_cfg, |r, _| {
        eprintln!(
            "epoch {:>4}/{}  nll {:.2}  bits/dim {:.4}  ({:.1} s)",
            r.epoch + 1,
            train_cfg.epochs,
            r.mean_nll,
            r.bits_per_dim,
            r.seconds
        );
        Ok(())
    })?;
    if train_cfg.epochs == 0 {
        save_checkpoint(&model, &cfg.checkpoint)?;
    }
    write(&cfg.out.join("train_log.tsv"), &train_log(&report.epochs))?;
    eprintln!("checkpoint {} (checksum {:016x})", cfg.checkpoint.display(), report.checksum);
    Ok(())
}

pub fn sample(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    prepare_out(cfg)?;
    let rows = (0..cfg.sample_count)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let x = model.sample(cfg.temperature, seed)?;
            let lp = model.log_prob_volume(&x)?;
            let v = Volume::new(from_flow_space(&x))?.clamped();
            save_volume(&cfg.out.join(format!("sample_{i:03}.vol3")), &v)?;
            save_slice_sheet(&cfg.out.join(format!("sample_{i:03}.pgm")), &v)?;
            Ok(format!("{i}\t{seed}\t{}\t{}\n", lp.nats, lp.bits_per_dim))
        })
        .collect::<volflow::Result<Vec<_>>>()?;
    let mut table = String::from("index\tseed\tlog_p_y\tbits_per_dim\n");
    table.extend(rows);
    write(&cfg.out.join("samples.tsv"), &table)?;
    eprintln!("wrote {} samples at T = {}", cfg.sample_count, cfg.temperature);
    Ok(())
}

/// Axial slices `y[:, h, :]` side by side with one blank column between.
fn axial_montage(v: &Volume) -> Result<Tensor> {
    let [d, h, w, c] = v.shape();
    let cols = h * w + h.saturating_sub(1);
    let mut out = vec![0.0; d * cols];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mean = (0..c).map(|k| v.at(z, y, x, k)).sum::<f64>() / c as f64;
                out[z * cols + y * (w + 1) + x] = mean;
            }
        }
    }
    Ok(Tensor::new(&[d, cols], out)?)
}

/// Recovered-volume artifacts of one run.
fn write_result(dir: &Path, r: &ReconResult, truth: Option<&Volume>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let v = r.volume.clamped();
    save_volume(&dir.join("recon.vol3"), &v)?;
    save_slice_sheet(&dir.join("recon.pgm"), &v)?;
    save_image(&dir.join("recon_axial.pgm"), &axial_montage(&v)?)?;
    write(&dir.join("trajectory.tsv"), &trajectory_tsv(&r.trajectory))?;
    let mut summary = String::from("key\tvalue\n");
    let mse_w = r.mse_w.map_or_else(|| "-".to_string(), |m| m.to_string());
    for (k, val) in [
        ("converged", r.converged.to_string()),
        ("iterations", r.iterations.to_string()),
        ("mse_coronal", r.mse_d.to_string()),
        ("mse_sagittal", mse_w),
        ("log_p_top", r.log_p_top.to_string()),
        ("log_p_y", r.log_p_y.to_string()),
        ("alpha", r.alpha.to_string()),
    ] {
        let _ = writeln!(summary, "{k}\t{val}");
    }
    if let Some(t) = truth {
        let diff = Volume::new(v.tensor().zip_map(t.tensor(), |a, b| (a - b).abs().min(255.0))?)?;
        save_slice_sheet(&dir.join("diff.pgm"), &diff)?;
        save_image(&dir.join("diff_axial.pgm"), &axial_montage(&diff)?)?;
        let _ = writeln!(summary, "ssim\t{}", ssim(t, &v)?);
        let _ = writeln!(summary, "psnr_db\t{}", psnr(t, &v)?);
    }
    write(&dir.join("summary.tsv"), &summary)
}

/// Population statistics of the training DRRs (coronal).
fn training_drr_stats(cfg: &RunConfig, model: &ModelConfig) -> Result<DrrStats> {
    let entries = split_entries(cfg, Split::Train, cfg.train_count)?;
    let drrs: Vec<Projection> = load_volumes(&entries, model)?.iter().map(|v| make_drr_pair(v).0).collect();
    Ok(DrrStats::from_projections(&drrs)?)
}

fn read_projection(path: &Path, plane: Plane, shape: [usize; 2]) -> Result<Projection> {
    let img = load_image(path).with_context(|| format!("reading {}", path.display()))?;
    let t = img.to_tensor()?;
    if t.shape() != shape {
        bail!(Error::Shape(format!(
            "{} is {}x{}, the model's {plane} plane is {}x{}",
            path.display(),
            img.rows,
            img.cols,
            shape[0],
            shape[1]
        )));
    }
    Ok(Projection::new(t, plane)?)
}

type Inputs = (Projection, Option<Projection>, Option<Volume>);

fn recon_inputs(cfg: &RunConfig, model: &ModelConfig) -> Result<Inputs> {
    let [d, h, w, _] = model.input_shape;
    if let Some(path) = &cfg.target {
        let truth = load_volume(path).with_context(|| format!("reading {}", path.display()))?;
        if truth.shape() != model.input_shape {
            bail!(Error::Shape(format!("{} is {:?}, the model expects {:?}", path.display(), truth.shape(), model.input_shape)));
        }
        let (x_d, x_w) = make_drr_pair(&truth);
        return Ok((x_d, Some(x_w), Some(truth)));
    }
    let Some(coronal) = &cfg.coronal else {
        bail!(Error::Config("reconstruct needs `target` or `coronal`".into()));
    };
    let x_d = if cfg.cxr_rescale {
        let img = load_image(coronal).with_context(|| format!("reading {}", coronal.display()))?;
        rescale_external_cxr(&img, [h, w], &training_drr_stats(cfg, model)?)?
    } else {
        read_projection(coronal, Plane::Coronal, [h, w])?
    };
    let x_w = cfg
        .sagittal
        .as_ref()
        .map(|p| read_projection(p, Plane::Sagittal, [d, h]))
        .transpose()?;
    Ok((x_d, x_w, None))
}

pub fn reconstruct_cmd(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let recon = cfg.recon(model.config())?;
    let (x_d, x_w, truth) = recon_inputs(cfg, model.config())?;
    if cfg.mode == Mode::Biplanar && x_w.is_none() {
        bail!(Error::Config("biplanar reconstruction needs a sagittal image (`sagittal` or `target`)".into()));
    }
    let x_w = if cfg.mode == Mode::Biplanar { x_w } else { None };
    prepare_out(cfg)?;
    if cfg.logp0_list.is_empty() {
        let r = reconstruct(&model, &x_d, x_w.as_ref(), &recon)?;
        report_run("", &r);
        return write_result(&cfg.out, &r, truth.as_ref());
    }
    let targets = cfg.family_targets(model.config());
    let results = reconstruct_family(&model, &x_d, x_w.as_ref(), &recon, &targets)?;
    let mut table = String::from("index\tlog_p0\tconverged\titerations\tlog_p_top\tmse_coronal\tmse_sagittal\tdir\n");
    let mut first_err = None;
    for (i, (res, t)) in results.into_iter().zip(&targets).enumerate() {
        let name = format!("family_{i:02}");
        match res {
            Ok(r) => {
                report_run(&name, &r);
                write_result(&cfg.out.join(&name), &r, truth.as_ref())?;
                let mse_w = r.mse_w.map_or_else(|| "-".to_string(), |m| m.to_string());
                let _ = writeln!(
                    table,
                    "{i}\t{t}\t{}\t{}\t{}\t{}\t{mse_w}\t{name}",
                    r.converged, r.iterations, r.log_p_top, r.mse_d
                );
            }
            Err(e) => {
                eprintln!("{name}: {e}");
                let _ = writeln!(table, "{i}\t{t}\tfailed\t-\t-\t-\t-\t-");
                first_err.get_or_insert(e);
            }
        }
    }
    write(&cfg.out.join("family.tsv"), &table)?;
    match first_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn report_run(name: &str, r: &ReconResult) {
    let label = if name.is_empty() { String::new() } else { format!("{name}: ") };
    let status = if r.converged { "converged" } else { "did not converge" };
    eprintln!(
        "{label}{status} after {} iterations, MSE coronal {:.3}{}, log p(z_L) {:.2}",
        r.iterations,
        r.mse_d,
        r.mse_w.map_or_else(String::new, |m| format!(", sagittal {m:.3}")),
        r.log_p_top
    );
}

struct Case {
    name: String,
    ssim: f64,
    psnr: f64,
    converged: bool,
    iterations: usize,
}

fn score(model: &FlowModel, truth: &Volume, cfg: &ReconConfig, name: &str) -> Result<(Case, Volume)> {
    let (x_d, x_w) = make_drr_pair(truth);
    let r = reconstruct(model, &x_d, cfg.biplanar_active().then_some(&x_w), cfg)?;
    let v = r.volume.clamped();
    Ok((
        Case {
            name: name.to_string(),
            ssim: ssim(truth, &v)?,
            psnr: psnr(truth, &v)?,
            converged: r.converged,
            iterations: r.iterations,
        },
        v,
    ))
}

fn case_table(cases: &[Case]) -> String {
    let mut out = String::from("case\tssim\tpsnr_db\tconverged\titerations\n");
    for c in cases {
        let _ = writeln!(out, "{}\t{:.6}\t{:.4}\t{}\t{}", c.name, c.ssim, c.psnr, c.converged, c.iterations);
    }
    out
}

/// Uniplanar and biplanar reconstructions (no likelihood targeting) of every
/// test volume, scored against the truth.
pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let entries = split_entries(cfg, Split::Test, cfg.eval_count)?;
    let truths = load_volumes(&entries, model.config())?;
    let names: Vec<String> = entries
        .iter()
        .map(|e| e.path.file_stem().map_or_else(|| e.seed.to_string(), |s| s.to_string_lossy().into_owned()))
        .collect();
    let mut uni_cfg = cfg.clone();
    uni_cfg.mode = Mode::Uniplanar;
    uni_cfg.lambda_l = 0.0;
    let mut bi_cfg = uni_cfg.clone();
    bi_cfg.mode = Mode::Biplanar;
    let methods = [("uniplanar", uni_cfg.recon(model.config())?), ("biplanar", bi_cfg.recon(model.config())?)];
    prepare_out(cfg)?;
    let mut summary = String::from("method\tssim_mean (std)\tpsnr_db_mean (std)\n");
    for (label, recon) in &methods {
        let scored = truths
            .par_iter()
            .zip(&names)
            .map(|(t, n)| score(&model, t, recon, n))
            .collect::<Result<Vec<_>>>()?;
        let mut report = MetricReport::default();
        let mut cases = Vec::with_capacity(scored.len());
        for ((case, v), truth) in scored.into_iter().zip(&truths) {
            report.push(case.name.clone(), truth, &v)?;
            cases.push(case);
        }
        write(&cfg.out.join(format!("{label}.tsv")), &case_table(&cases))?;
        let converged = cases.iter().filter(|c| c.converged).count();
        eprintln!("{label}: {converged}/{} converged", cases.len());
        let line = report.summary_line(label);
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
    }
    write(&cfg.out.join("summary.tsv"), &summary)
}
