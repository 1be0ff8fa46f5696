use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Volume;
use crate::error::{Error, Result};

/// Parameters of the synthetic chest phantom: a soft-tissue body ellipsoid
/// holding two low-intensity lungs with a few bright nodules, smoothed by a
/// Gaussian. Ranges are sampled uniformly per phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Grid `(D, H, W)`; one channel.
    pub shape: [usize; 3],
    pub body_intensity: (f64, f64),
    /// Body semi-axes as fractions of the grid extent along each axis.
    pub body_extent: (f64, f64),
    /// Number of lung cavities, 0 to 2.
    pub lung_count: usize,
    pub lung_intensity: (f64, f64),
    /// Inclusive range of nodule counts.
    pub nodule_count: (usize, usize),
    /// Nodule radius in voxels.
    pub nodule_radius: (f64, f64),
    pub nodule_intensity: (f64, f64),
    /// Gaussian smoothing sigma in voxels; 0 disables smoothing.
    pub smoothing: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            shape: [16, 16, 16],
            body_intensity: (140.0, 190.0),
            body_extent: (0.36, 0.46),
            lung_count: 2,
            lung_intensity: (15.0, 45.0),
            nodule_count: (1, 3),
            nodule_radius: (1.0, 2.2),
            nodule_intensity: (150.0, 230.0),
            smoothing: 0.7,
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        for (name, r) in [
            ("body_intensity", self.body_intensity),
            ("lung_intensity", self.lung_intensity),
            ("nodule_intensity", self.nodule_intensity),
        ] {
            if !range_ok(r) || r.0 < 0.0 || r.1 > 255.0 {
                return Err(Error::Config(format!("{name} {r:?} must be an ordered range within [0, 255]")));
            }
        }
        if self.shape.iter().any(|&n| n < 4) {
            return Err(Error::Config(format!("phantom grid {:?} is too small", self.shape)));
        }
        let (lo, hi) = self.body_extent;
        if !range_ok(self.body_extent) || lo <= 0.0 || hi > 0.5 {
            return Err(Error::Config(format!(
                "body extent {:?} must lie in (0, 0.5] so the body stays inside the grid",
                self.body_extent
            )));
        }
        let (rlo, rhi) = self.nodule_radius;
        let min_dim = *self.shape.iter().min().unwrap() as f64;
        if !range_ok(self.nodule_radius) || rlo <= 0.0 || rhi >= min_dim / 2.0 {
            return Err(Error::Config(format!(
                "nodule radius {:?} must be positive and below half the grid",
                self.nodule_radius
            )));
        }
        if self.lung_count > 2 {
            return Err(Error::Config(format!("lung count {} exceeds 2", self.lung_count)));
        }
        if self.nodule_count.0 > self.nodule_count.1 {
            return Err(Error::Config(format!("nodule count {:?} is not ordered", self.nodule_count)));
        }
        if !(self.smoothing >= 0.0) || !self.smoothing.is_finite() {
            return Err(Error::Config(format!("smoothing {} must be >= 0", self.smoothing)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.axes[i]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generates one phantom. Deterministic per `spec.seed`; voxels are rounded
/// to `f32` precision so they survive a VOL3 round trip unchanged.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = spec.shape.map(|n| n as f64);
    let center = dims.map(|n| n / 2.0);
    let body = Ellipsoid {
        center,
        axes: dims.map(|n| n * uniform(&mut rng, spec.body_extent)),
    };
    let body_value = uniform(&mut rng, spec.body_intensity);

    let mut lungs = Vec::new();
    for side in 0..spec.lung_count {
        let sign = if side == 0 { -1.0 } else { 1.0 };
        let c = [
            center[0] + dims[0] * uniform(&mut rng, (-0.04, 0.04)),
            center[1] + dims[1] * uniform(&mut rng, (-0.05, 0.05)),
            center[2] + sign * dims[2] * uniform(&mut rng, (0.17, 0.22)),
        ];
        let axes = [
            body.axes[0] * uniform(&mut rng, (0.55, 0.75)),
            body.axes[1] * uniform(&mut rng, (0.6, 0.8)),
            dims[2] * uniform(&mut rng, (0.11, 0.15)),
        ];
        lungs.push((Ellipsoid { center: c, axes }, uniform(&mut rng, spec.lung_intensity)));
    }

    let mut nodules = Vec::new();
    if !lungs.is_empty() {
        let count = rng.random_range(spec.nodule_count.0..=spec.nodule_count.1);
        for _ in 0..count {
            let (lung, _) = lungs[rng.random_range(0..lungs.len())];
            let mut p = lung.center;
            for _ in 0..100 {
                let q: [f64; 3] = std::array::from_fn(|i| {
                    lung.center[i] + lung.axes[i] * rng.random_range(-1.0..1.0)
                });
                if lung.contains(q) {
                    p = q;
                    break;
                }
            }
            let radius = uniform(&mut rng, spec.nodule_radius);
            let value = uniform(&mut rng, spec.nodule_intensity);
            nodules.push((Ellipsoid { center: p, axes: [radius; 3] }, value));
        }
    }

    let [d, h, w] = spec.shape;
    let mut data = vec![0.0; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                if !body.contains(p) {
                    continue;
                }
                let mut v = body_value;
                for (lung, lv) in &lungs {
                    if lung.contains(p) {
                        v = *lv;
                    }
                }
                for (nod, nv) in &nodules {
                    if nod.contains(p) {
                        v = *nv;
                    }
                }
                data[(z * h + y) * w + x] = v;
            }
        }
    }
    if spec.smoothing > 0.0 {
        gaussian_smooth(&mut data, spec.shape, spec.smoothing);
    }
    let data = data.into_iter().map(|v| v.clamp(0.0, 255.0) as f32 as f64).collect();
    Volume::from_vec([d, h, w, 1], data)
}

/// Separable Gaussian blur with edge clamping; the kernel is normalised so
/// the value range is preserved.
fn gaussian_smooth(data: &mut [f64], shape: [usize; 3], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let [d, h, w] = shape;
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = shape[axis] as isize;
        let src = data.to_vec();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let idx = [z, y, x];
                    let base = z * strides[0] + y * strides[1] + x * strides[2] - idx[axis] * strides[axis];
                    let pos = idx[axis] as isize;
                    let mut acc = 0.0;
                    for (k, wk) in kernel.iter().enumerate() {
                        let j = (pos + k as isize - radius).clamp(0, n - 1) as usize;
                        acc += wk * src[base + j * strides[axis]];
                    }
                    data[z * strides[0] + y * strides[1] + x * strides[2]] = acc;
                }
            }
        }
    }
}
