use super::{Direction, FlowLayer, Flowed};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Space-to-channel reshuffle: `(D, H, W, C) -> (D/2, H/2, W/2, 8C)`, each
/// 2x2x2 block becoming the channel vector of one voxel. Volume-preserving.
#[derive(Clone, Debug, Default)]
pub struct Squeeze;

impl FlowLayer for Squeeze {
    fn name(&self) -> &str {
        "squeeze"
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        Vec::new()
    }

    fn build(&self, g: &mut Graph, x: NodeId, dir: Direction) -> Result<Flowed> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("squeeze of a rank-{} tensor", s.len())));
        }
        let value = match dir {
            Direction::Forward => {
                let (d, h, w, c) = (s[0], s[1], s[2], s[3]);
                if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Shape(format!("squeeze needs even spatial dims, got {s:?}")));
                }
                let split = g.reshape(x, &[d / 2, 2, h / 2, 2, w / 2, 2, c])?;
                let moved = g.transpose(split, &[0, 2, 4, 1, 3, 5, 6])?;
                g.reshape(moved, &[d / 2, h / 2, w / 2, 8 * c])?
            }
            Direction::Inverse => {
                let (d, h, w, c8) = (s[0], s[1], s[2], s[3]);
                if c8 % 8 != 0 {
                    return Err(Error::Shape(format!("unsqueeze needs channels divisible by 8, got {s:?}")));
                }
                let c = c8 / 8;
                let split = g.reshape(x, &[d, h, w, 2, 2, 2, c])?;
                let moved = g.transpose(split, &[0, 3, 1, 4, 2, 5, 6])?;
                g.reshape(moved, &[2 * d, 2 * h, 2 * w, c])?
            }
        };
        Ok(Flowed { value, logdet: None })
    }
}

/// Eager squeeze / unsqueeze.
pub fn squeeze3d(x: &Tensor, dir: Direction) -> Result<Tensor> {
    Ok(Squeeze.apply(x, dir)?.value)
}
