//! Axial 2D rotary position embedding.
//!
//! Each head vector of size `dh` is split in two: dims `0..dh/2` rotate with
//! the row index `i`, dims `dh/2..dh` with the column index `j`. Within a
//! half, adjacent pairs `(2k, 2k+1)` rotate by `pos · base^(-2k / (dh/2))`.

use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;

pub(crate) fn check_head_dim(head_dim: usize) -> Result<()> {
    if head_dim == 0 || head_dim % 4 != 0 {
        return Err(Error::Config(format!(
            "rotary head dimension must split into two even halves, got {head_dim}"
        )));
    }
    Ok(())
}

fn frequencies(head_dim: usize) -> Vec<f64> {
    let half = head_dim / 2;
    (0..half / 2)
        .map(|k| ROPE_BASE.powf(-2.0 * k as f64 / half as f64))
        .collect()
}

/// Precomputed `(cos, sin)` per token and rotation pair.
#[derive(Debug, Clone)]
pub(crate) struct RopeTable {
    head_dim: usize,
    // token-major, `head_dim / 2` pairs per token
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(head_dim: usize, positions: &[(usize, usize)]) -> Result<Self> {
        check_head_dim(head_dim)?;
        let freqs = frequencies(head_dim);
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &(i, j) in positions {
            for axis_pos in [i as f64, j as f64] {
                for f in &freqs {
                    let (s, c) = (axis_pos * f).sin_cos();
                    cos.push(c);
                    sin.push(s);
                }
            }
        }
        Ok(RopeTable { head_dim, cos, sin })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rotates `src` (one head of one token) into `dst`; `inverse` applies the
    /// transpose rotation, which is what back-propagation needs.
    #[inline]
    pub fn rotate(&self, token: usize, src: &[f64], dst: &mut [f64], inverse: bool) {
        let pairs = self.head_dim / 2;
        let base = token * pairs;
        for p in 0..pairs {
            let c = self.cos[base + p];
            let s = if inverse {
                -self.sin[base + p]
            } else {
                self.sin[base + p]
            };
            let (a, b) = (src[2 * p], src[2 * p + 1]);
            dst[2 * p] = a * c - b * s;
            dst[2 * p + 1] = a * s + b * c;
        }
    }
}

/// Rotates one head-sized vector by its 2D grid position.
pub fn rope_apply(vec: &[f64], position: (usize, usize)) -> Result<Vec<f64>> {
    let table = RopeTable::new(vec.len(), &[position])?;
    let mut out = vec![0.0; vec.len()];
    table.rotate(0, vec, &mut out, false);
    Ok(out)
}
