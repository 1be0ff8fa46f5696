//! Windowing, phantoms, projections, file formats and image-quality metrics.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volflow::data::{
    generate_phantom, load_image, load_manifest, load_volume, make_drr_pair, save_image, save_manifest,
    save_slice_sheet, save_volume, split_for_seed, window_ct, ManifestEntry, PhantomSpec, Split, VOL3_HEADER_LEN,
};
use volflow::metrics::{mse, psnr, psnr_from_mse, ssim, ssim_axial_slices, MetricReport};
use volflow::projection::{projector, DepthAverage, Projector, WidthAverage};
use volflow::{Error, Plane, Tensor, Volume};

fn random_volume(seed: u64, shape: [usize; 4]) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Volume::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
}

#[test]
fn lung_window_formula_points() {
    let hu = Tensor::new(&[5], vec![-1000.0, -200.0, 600.0, 3000.0, -2000.0]).unwrap();
    assert_eq!(window_ct(&hu).data(), &[0.0, 127.5, 255.0, 255.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_is_monotone(a in -3000.0f64..3000.0, b in -3000.0f64..3000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let w = window_ct(&Tensor::new(&[2], vec![lo, hi]).unwrap());
        prop_assert!(w.data()[0] <= w.data()[1]);
    }

    // Inside the unclipped band the window is an affine bijection.
    #[test]
    fn window_inverts_within_band(hu in -999.0f64..599.0) {
        let v = window_ct(&Tensor::scalar(hu)).item();
        let back = v * 1600.0 / 255.0 - 1000.0;
        prop_assert!((back - hu).abs() < 1e-9);
        prop_assert!((window_ct(&Tensor::scalar(back)).item() - v).abs() < 1e-12);
    }

    #[test]
    fn projections_are_linear_and_mean_preserving(
        seed in 0u64..500,
        d in 1usize..6, h in 1usize..6, w in 1usize..6, c in 1usize..3,
        a in -3.0f64..3.0,
    ) {
        let shape = [d, h, w, c];
        let x = random_volume(seed, shape);
        let y = random_volume(seed + 1, shape);
        let combo = Volume::new(x.tensor().zip_map(y.tensor(), |p, q| a * p + q).unwrap()).unwrap();
        for proj in [&DepthAverage as &dyn Projector, &WidthAverage] {
            let (px, py, pc) = (proj.project(&x).unwrap(), proj.project(&y).unwrap(), proj.project(&combo).unwrap());
            prop_assert_eq!(pc.shape(), proj.output_shape(shape));
            for i in 0..pc.data().len() {
                let want = a * px.data()[i] + py.data()[i];
                prop_assert!((pc.data()[i] - want).abs() <= 1e-9 * (1.0 + want.abs()));
            }
            // Averages of averages: the image mean is the volume mean.
            prop_assert!((px.pixels().mean() - x.tensor().mean()).abs() < 1e-9);
        }
    }

    // <P y, x> = <y, P^T x>
    #[test]
    fn adjoint_identity(seed in 0u64..500, d in 1usize..6, h in 1usize..6, w in 1usize..6, c in 1usize..3) {
        let shape = [d, h, w, c];
        let y = random_volume(seed, shape);
        for plane in [Plane::Coronal, Plane::Sagittal] {
            let p = projector(plane);
            let [r, k] = p.output_shape(shape);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let x = Tensor::new(&[r, k], (0..r * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let py = p.project(&y).unwrap();
            let lhs: f64 = py.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let pt = p.adjoint(&x, shape).unwrap();
            let rhs: f64 = y.data().iter().zip(pt.data()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn metrics_are_symmetric(seed in 0u64..1000) {
        let a = random_volume(seed, [7, 8, 9, 1]);
        let b = random_volume(seed + 1, [7, 8, 9, 1]);
        prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..1.0).contains(&s));
    }

    #[test]
    fn any_difference_lowers_ssim(seed in 0u64..1000, idx in 0usize..343, delta in 1.0f64..50.0) {
        let a = random_volume(seed, [7, 7, 7, 1]);
        let mut data = a.data().to_vec();
        data[idx] = if data[idx] > 128.0 { data[idx] - delta } else { data[idx] + delta };
        let b = Volume::from_vec([7, 7, 7, 1], data).unwrap();
        prop_assert!(ssim(&a, &b).unwrap() < 1.0 - 1e-12);
    }

    #[test]
    fn psnr_decreases_with_mse(m1 in 1e-3f64..1e5, m2 in 1e-3f64..1e5) {
        prop_assume!(m1 != m2);
        let (lo, hi) = if m1 < m2 { (m1, m2) } else { (m2, m1) };
        prop_assert!(psnr_from_mse(lo) > psnr_from_mse(hi));
    }
}

#[test]
fn metric_closed_forms() {
    let zero = Volume::constant([8, 8, 8, 1], 0.0);
    let full = Volume::constant([8, 8, 8, 1], 255.0);
    let c1 = (0.01f64 * 255.0).powi(2);
    let s = ssim(&zero, &full).unwrap();
    assert!((s - c1 / (255.0f64.powi(2) + c1)).abs() < 1e-15);
    assert!((s - 1.0e-4).abs() < 1e-6);
    assert_eq!(psnr(&zero, &full).unwrap(), 0.0);
    assert!((psnr_from_mse(255.0f64.powi(2) / 10.0) - 10.0).abs() < 1e-12);
    assert_eq!(psnr(&full, &full).unwrap(), f64::INFINITY);
    assert_eq!(ssim(&full, &full).unwrap(), 1.0);
    assert_eq!(mse(&zero, &full).unwrap(), 255.0f64.powi(2));

    let small = Volume::constant([6, 8, 8, 1], 1.0);
    assert!(matches!(ssim(&small, &small), Err(Error::Shape(_))));
    assert!(ssim(&zero, &Volume::constant([8, 8, 9, 1], 0.0)).is_err());
    assert!(ssim_axial_slices(&zero, &full).unwrap() < 1e-3);
}

#[test]
fn metric_report_layout() {
    let truth = random_volume(1, [8, 8, 8, 1]);
    let mut report = MetricReport::default();
    for k in 0..3 {
        let noisy = Volume::new(truth.tensor().map(|v| (v + 5.0 * (k + 1) as f64).min(255.0))).unwrap();
        report.push(format!("case{k}"), &truth, &noisy).unwrap();
    }
    assert_eq!(report.len(), 3);
    let tsv = report.to_tsv();
    assert_eq!(tsv.lines().next(), Some("case\tssim\tpsnr_db"));
    assert_eq!(tsv.lines().count(), 4);
    let line = report.summary_line("biplanar");
    let cols: Vec<&str> = line.split('\t').collect();
    assert_eq!(cols.len(), 3);
    assert_eq!(cols[0], "biplanar");
    assert!(cols[1].contains(" (") && cols[2].ends_with(')'));
    let (m, sd) = report.psnr_mean_std();
    let vals: Vec<f64> = report.cases.iter().map(|c| c.psnr).collect();
    let mean = vals.iter().sum::<f64>() / 3.0;
    assert!((m - mean).abs() < 1e-12);
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!((sd - var.sqrt()).abs() < 1e-12);
}

#[test]
fn lungs_are_darker_than_the_body() {
    for seed in 0..100 {
        let spec = PhantomSpec::default().with_seed(seed);
        let v = generate_phantom(&spec).unwrap();
        // Same seed, same body draw: lung voxels are those the cavities change.
        let plain = |lungs| PhantomSpec { lung_count: lungs, nodule_count: (0, 0), smoothing: 0.0, ..spec.clone() };
        let body_only = generate_phantom(&plain(0)).unwrap();
        let with_lungs = generate_phantom(&plain(2)).unwrap();
        let (mut lung, mut body) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..v.len() {
            if body_only.data()[i] == 0.0 {
                continue;
            }
            let acc = if with_lungs.data()[i] != body_only.data()[i] { &mut lung } else { &mut body };
            acc.0 += v.data()[i];
            acc.1 += 1;
        }
        assert!(lung.1 > 0 && body.1 > 0, "seed {seed}");
        assert!(lung.0 / lung.1 as f64 + 20.0 < body.0 / body.1 as f64, "seed {seed}");
    }
}

#[test]
fn phantoms_and_drrs_stay_in_range() {
    for seed in 0..20 {
        let v = generate_phantom(&PhantomSpec::default().with_seed(seed)).unwrap();
        assert_eq!(v.shape(), [16, 16, 16, 1]);
        assert!(v.data().iter().all(|x| (0.0..=255.0).contains(x)));
        let (d, w) = make_drr_pair(&v);
        assert_eq!((d.plane(), w.plane()), (Plane::Coronal, Plane::Sagittal));
        assert!(d.data().iter().chain(w.data()).all(|x| (0.0..=255.0).contains(x)));
        let other = generate_phantom(&PhantomSpec::default().with_seed(seed + 1000)).unwrap();
        assert!(d.mse(&make_drr_pair(&other).0).unwrap() > 0.0);
    }
    let c = Volume::constant([16, 16, 16, 1], 77.0);
    let (d, w) = make_drr_pair(&c);
    assert!(d.data().iter().chain(w.data()).all(|&x| x == 77.0));
}

#[test]
fn volume_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.vol3");
    let v = generate_phantom(&PhantomSpec::default().with_seed(5)).unwrap();
    save_volume(&path, &v).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, VOL3_HEADER_LEN + 16 * 16 * 16 * 4);
    assert_eq!(VOL3_HEADER_LEN, 24);
    assert_eq!(load_volume(&path).unwrap(), v);

    let bytes = std::fs::read(&path).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(load_volume(&path), Err(Error::Format(_))));
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_volume(&path), Err(Error::Format(_))));
    let mut huge = bytes[..VOL3_HEADER_LEN].to_vec();
    huge[8..24].copy_from_slice(&[0xff; 16]);
    std::fs::write(&path, &huge).unwrap();
    assert!(matches!(load_volume(&path), Err(Error::Format(_))));
    let out_of_range = Volume::constant([2, 2, 2, 1], 300.0);
    assert!(save_volume(&path, &out_of_range).is_err());
}

#[test]
fn images_round_trip_within_rounding() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zero.pgm");
    save_image(&path, &Tensor::zeros(&[16, 16])).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
    assert!(bytes[13..].iter().all(|&b| b == 0));
    assert_eq!(bytes.len(), 13 + 256);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Tensor::new(&[5, 7], (0..35).map(|_| rng.random_range(-20.0..280.0)).collect()).unwrap();
    save_image(&path, &t).unwrap();
    let img = load_image(&path).unwrap();
    assert_eq!((img.rows, img.cols, img.channels), (5, 7, 1));
    for (a, b) in t.data().iter().zip(&img.data) {
        assert!((a.clamp(0.0, 255.0) - b).abs() <= 0.5);
    }

    let sheet = dir.path().join("sheet.pgm");
    save_slice_sheet(&sheet, &Volume::constant([4, 5, 6, 1], 9.0)).unwrap();
    let img = load_image(&sheet).unwrap();
    // coronal (5x6), sagittal (4x5), axial (4x6) with two separators
    assert_eq!((img.rows, img.cols), (5, 6 + 5 + 6 + 2));
}

#[test]
fn manifest_round_trip_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.tsv");
    let entries: Vec<ManifestEntry> = (0..10)
        .map(|seed| ManifestEntry {
            path: format!("phantom_{seed:04}.vol3").into(),
            split: split_for_seed(seed),
            seed,
        })
        .collect();
    save_manifest(&path, &entries).unwrap();
    assert_eq!(load_manifest(&path).unwrap(), entries);
    let test = (0..1000).filter(|&s| split_for_seed(s) == Split::Test).count();
    assert_eq!(test, 200);
    std::fs::write(&path, "path\tsplit\tseed\nx\tvalidation\t3\n").unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Format(_))));
}
