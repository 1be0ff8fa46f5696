use rand::Rng;

use super::{normal_tensor, param_input, Direction, FlowLayer, Flowed};
use crate::error::{Error, Result};
use crate::tensor::linalg::{orthonormalize_rows, Lu};
use crate::tensor::{Graph, NodeId, Tensor};

/// Smallest admissible `|det W|` for the channel-mixing matrix.
pub const SINGULARITY_FLOOR: f64 = 1e-12;

/// Invertible 1x1x1 convolution: every voxel's channel vector is multiplied
/// by a dense `C x C` matrix `W`.
#[derive(Clone, Debug)]
pub struct InvConv1x1x1 {
    name: String,
    weight: Tensor,
}

impl InvConv1x1x1 {
    /// Random rotation, so the layer starts volume-preserving.
    pub fn random(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let mut w = normal_tensor(rng, &[channels, channels], 1.0).into_vec();
        orthonormalize_rows(&mut w, channels);
        Self {
            name: name.to_string(),
            weight: Tensor::from_raw(&[channels, channels], w),
        }
    }

    pub fn from_matrix(name: &str, weight: Tensor) -> Result<Self> {
        let layer = Self {
            name: name.to_string(),
            weight,
        };
        layer.check()?;
        Ok(layer)
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Fails if the matrix is not square or `|det W|` is below the floor.
    pub fn check(&self) -> Result<()> {
        let s = self.weight.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Shape(format!("1x1x1 conv weight {s:?} is not square")));
        }
        let det = match Lu::factor(self.weight.data(), s[0]) {
            Ok(lu) => lu.det().abs(),
            Err(_) => 0.0,
        };
        if !(det >= SINGULARITY_FLOOR) {
            return Err(Error::Singular(det));
        }
        Ok(())
    }
}

impl FlowLayer for InvConv1x1x1 {
    fn name(&self) -> &str {
        &self.name
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![(format!("{}.weight", self.name), &self.weight)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![(format!("{}.weight", self.name), &mut self.weight)]
    }

    fn build(&self, g: &mut Graph, x: NodeId, dir: Direction) -> Result<Flowed> {
        self.check()?;
        let shape = g.shape(x).to_vec();
        let c = self.channels();
        if shape.len() != 4 || shape[3] != c {
            return Err(Error::Shape(format!(
                "1x1x1 conv `{}` with {c} channels applied to {shape:?}",
                self.name
            )));
        }
        let prev = g.set_scope(&self.name);
        let voxels = shape[0] * shape[1] * shape[2];
        let w = param_input(g, &format!("{}.weight", self.name), &self.weight)?;
        let flat = g.reshape(x, &[voxels, c])?;
        let lad = g.log_abs_det(w)?;
        let (mixer, sign) = match dir {
            Direction::Forward => (w, 1.0),
            Direction::Inverse => (g.inverse(w)?, -1.0),
        };
        // Row-vector convention: y_v = M x_v  <=>  Y = X M^T.
        let mixer_t = g.transpose(mixer, &[1, 0])?;
        let mixed = g.matmul(flat, mixer_t)?;
        let value = g.reshape(mixed, &shape)?;
        let logdet = g.mul_scalar(lad, sign * voxels as f64);
        g.set_scope(&prev);
        Ok(Flowed {
            value,
            logdet: Some(logdet),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize, s: f64) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = s;
        }
        Tensor::new(&[n, n], d).unwrap()
    }

    #[test]
    fn identity_matrix_is_identity_map() {
        let layer = InvConv1x1x1::from_matrix("w", eye(3, 1.0)).unwrap();
        let x = Tensor::new(&[1, 1, 2, 3], (0..6).map(|i| i as f64 - 2.5).collect()).unwrap();
        let out = layer.apply(&x, Direction::Forward).unwrap();
        assert_eq!(out.value, x);
        assert_eq!(out.logdet, 0.0);
    }

    #[test]
    fn scaled_identity_logdet_closed_form() {
        let layer = InvConv1x1x1::from_matrix("w", eye(4, 2.0)).unwrap();
        let x = Tensor::full(&[2, 2, 2, 4], 0.5);
        let out = layer.apply(&x, Direction::Forward).unwrap();
        assert!((out.logdet - 32.0 * 2f64.ln()).abs() < 1e-12);
        assert!((out.logdet - 22.181).abs() < 1e-3);
    }

    #[test]
    fn random_rotation_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = InvConv1x1x1::random("w", 8, &mut rng);
        let x = normal_tensor(&mut rng, &[2, 2, 2, 8], 1.0);
        let fwd = layer.apply(&x, Direction::Forward).unwrap();
        assert!(fwd.logdet.abs() < 1e-10);
        let back = layer.apply(&fwd.value, Direction::Inverse).unwrap();
        assert!(back.value.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn singular_matrix_is_a_hard_error() {
        let w = Tensor::new(&[2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(InvConv1x1x1::from_matrix("w", w), Err(Error::Singular(_))));
        let tiny = eye(2, 1e-7);
        assert!(matches!(InvConv1x1x1::from_matrix("w", tiny), Err(Error::Singular(_))));
    }
}
