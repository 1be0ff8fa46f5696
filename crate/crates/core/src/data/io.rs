use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{View, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOL3_MAGIC: &[u8; 4] = b"VOL3";
pub const VOL3_VERSION: u32 = 1;
/// Magic, version and four dimensions.
pub const VOL3_HEADER_LEN: usize = 24;

/// Writes a volume as VOL3: magic, u32 version, u32 `D, H, W, C`, then
/// `f32` voxels, all little-endian. Voxels must lie in `[0, 255]`.
pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    if let Some(x) = v.data().iter().find(|x| !(0.0..=255.0).contains(*x)) {
        return Err(Error::Format(format!("voxel {x} is outside [0, 255]")));
    }
    let mut buf = Vec::with_capacity(VOL3_HEADER_LEN + 4 * v.len());
    buf.extend_from_slice(VOL3_MAGIC);
    buf.extend(VOL3_VERSION.to_le_bytes());
    for d in v.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} overflows u32")))?;
        buf.extend(d.to_le_bytes());
    }
    for &x in v.data() {
        buf.extend((x as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    if bytes.len() < VOL3_HEADER_LEN || &bytes[..4] != VOL3_MAGIC {
        return Err(Error::Format(format!("{}: bad VOL3 magic", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != VOL3_VERSION {
        return Err(Error::Format(format!("{}: unsupported VOL3 version {}", path.display(), word(1))));
    }
    let dims = [word(2), word(3), word(4), word(5)].map(|d| d as usize);
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::Format(format!("{}: dimensions {dims:?} overflow", path.display())))?;
    let payload = &bytes[VOL3_HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "{}: payload holds {} bytes, dimensions {dims:?} need {}",
            path.display(),
            payload.len(),
            count * 4
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(x) = data.iter().find(|x| !(0.0..=255.0).contains(*x)) {
        return Err(Error::Format(format!("{}: voxel {x} is outside [0, 255]", path.display())));
    }
    Volume::from_vec(dims, data)
}

/// A raster image read from a PGM (gray) or PPM (colour) file, values on the
/// 0-255 scale, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    /// Gray image from a 2-axis tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [rows, cols] => Ok(Self { rows, cols, channels: 1, data: t.data().to_vec() }),
            ref s => Err(Error::Shape(format!("an image needs 2 axes, got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.channels != 1 {
            return Err(Error::Format(format!("expected a grayscale image, got {} channels", self.channels)));
        }
        Tensor::new(&[self.rows, self.cols], self.data.clone())
    }
}

/// Writes a 2-axis tensor as binary PGM (maxval 255), values clipped to
/// `[0, 255]` and rounded to nearest.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let img = Image::from_tensor(t)?;
    let mut buf = format!("P5\n{} {}\n255\n", img.cols, img.rows).into_bytes();
    buf.extend(img.data.iter().map(|v| v.clamp(0.0, 255.0).round() as u8));
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads binary PGM (`P5`) or PPM (`P6`) with maxval up to 255.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?.to_string());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported image magic `{m}`"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field `{s}`")));
    let (cols, rows, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("maxval {maxval} is not supported")));
    }
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| bad("dimensions overflow"))?;
    if bytes.len() < pos + n {
        return Err(bad("truncated pixel data"));
    }
    let scale = 255.0 / maxval as f64;
    let data = bytes[pos..pos + n].iter().map(|&b| b as f64 * scale).collect();
    Ok(Image { rows, cols, channels, data })
}

/// Mid-coronal, mid-sagittal and mid-axial slices side by side (one blank
/// column between panels) as one PGM.
pub fn save_slice_sheet(path: &Path, v: &Volume) -> Result<()> {
    let panels: Vec<Tensor> = View::ALL.iter().map(|&view| v.mid_slice(view)).collect();
    let rows = panels.iter().map(|p| p.shape()[0]).max().unwrap();
    let cols = panels.iter().map(|p| p.shape()[1]).sum::<usize>() + panels.len() - 1;
    let mut sheet = vec![0.0; rows * cols];
    let mut x0 = 0;
    for p in &panels {
        let (r, c) = (p.shape()[0], p.shape()[1]);
        for i in 0..r {
            sheet[i * cols + x0..i * cols + x0 + c].copy_from_slice(&p.data()[i * c..(i + 1) * c]);
        }
        x0 += c + 1;
    }
    save_image(path, &Tensor::new(&[rows, cols], sheet)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// 80/20 partition by seed: every fifth seed is held out.
pub fn split_for_seed(seed: u64) -> Split {
    if seed % 5 == 4 {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
    pub seed: u64,
}

/// Tab-separated `path, split, seed` with a header row. Paths are stored as
/// given (relative to the manifest's directory when relative).
pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from("path\tsplit\tseed\n");
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\n", e.path.display(), e.split.as_str(), e.seed));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("path\tsplit\tseed") {
        return Err(Error::Format(format!("{}: missing manifest header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::Format(format!("{}:{}: malformed manifest row", path.display(), i + 2));
            let cols: Vec<&str> = line.split('\t').collect();
            let [p, split, seed] = cols.as_slice() else {
                return Err(bad());
            };
            let split = match *split {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad()),
            };
            Ok(ManifestEntry {
                path: PathBuf::from(p),
                split,
                seed: seed.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
