use crate::error::{Error, Result};

/// Architecture of a [`FlowModel`](super::FlowModel).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    /// Number of levels `L` (each one squeeze, `depth` steps, then a split
    /// except at the top).
    pub levels: usize,
    /// Flow steps per level `K`.
    pub depth: usize,
    /// Hidden width of the coupling networks.
    pub width: usize,
    /// Input shape `(D, H, W, C)`.
    pub input_shape: [usize; 4],
    /// Learned Gaussian over the top latent (otherwise standard normal).
    pub learn_top: bool,
    /// Conditional learned Gaussians at every split (otherwise standard normal).
    pub learn_split_prior: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small CPU configuration: 16^3 input, three levels of four steps.
    pub fn desk() -> Self {
        Self {
            levels: 3,
            depth: 4,
            width: 64,
            input_shape: [16, 16, 16, 1],
            learn_top: true,
            learn_split_prior: true,
        }
    }

    /// Full-size configuration: 32^3 input, five levels of eight steps,
    /// 512-wide couplings.
    pub fn full() -> Self {
        Self {
            levels: 5,
            depth: 8,
            width: 512,
            input_shape: [32, 32, 32, 1],
            learn_top: true,
            learn_split_prior: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.depth == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "levels, depth and width must be >= 1 (got {}, {}, {})",
                self.levels, self.depth, self.width
            )));
        }
        let factor = 1usize
            .checked_shl(self.levels as u32)
            .ok_or_else(|| Error::Config(format!("{} levels is too many", self.levels)))?;
        let [d, h, w, c] = self.input_shape;
        if c == 0 || [d, h, w].iter().any(|&n| n == 0 || n % factor != 0) {
            return Err(Error::Config(format!(
                "input shape {:?} must have spatial dims divisible by 2^{} = {factor}",
                self.input_shape, self.levels
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Shape of the tensor entering the flow steps of each level (after the
    /// squeeze).
    pub fn level_shapes(&self) -> Vec<[usize; 4]> {
        let [mut d, mut h, mut w, mut c] = self.input_shape;
        let mut out = Vec::with_capacity(self.levels);
        for l in 0..self.levels {
            d /= 2;
            h /= 2;
            w /= 2;
            c *= 8;
            out.push([d, h, w, c]);
            if l + 1 < self.levels {
                c /= 2;
            }
        }
        out
    }

    /// Shapes of the latents `z_1 .. z_L`.
    pub fn latent_shapes(&self) -> Vec<[usize; 4]> {
        let mut shapes = self.level_shapes();
        let last = shapes.len() - 1;
        for s in &mut shapes[..last] {
            s[3] /= 2;
        }
        shapes
    }

    pub fn latent_dims(&self) -> Vec<usize> {
        self.latent_shapes().iter().map(|s| s.iter().product()).collect()
    }

    /// Dimension of the top (deepest) latent.
    pub fn top_dim(&self) -> usize {
        *self.latent_dims().last().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_top_latent_is_2048() {
        let cfg = ModelConfig::full();
        cfg.validate().unwrap();
        assert_eq!(cfg.top_dim(), 2048);
        assert_eq!(cfg.latent_dims(), vec![16384, 8192, 4096, 2048, 2048]);
    }

    #[test]
    fn toy_config_bookkeeping() {
        let cfg = ModelConfig {
            levels: 2,
            depth: 1,
            width: 4,
            input_shape: [8, 8, 8, 1],
            ..ModelConfig::desk()
        };
        assert_eq!(cfg.latent_dims(), vec![256, 256]);
    }

    #[test]
    fn dimension_is_conserved_for_many_configs() {
        for levels in 1..=4 {
            for c in 1..=3 {
                let cfg = ModelConfig {
                    levels,
                    input_shape: [16, 32, 16, c],
                    ..ModelConfig::desk()
                };
                cfg.validate().unwrap();
                assert_eq!(cfg.latent_dims().iter().sum::<usize>(), cfg.dim());
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.levels = 5;
        assert!(cfg.validate().is_err());
        cfg.levels = 0;
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            input_shape: [12, 16, 16, 1],
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }
}
