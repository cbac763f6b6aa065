//! Latent token grids, width-wise reference concatenation, the target-half
//! spatial mask and the linear noise-to-data path used by flow matching.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H × W × d` grid of latent tokens stored row-major as `[i][j][c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        LatentGrid {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn filled(height: usize, width: usize, dim: usize, value: f64) -> Self {
        LatentGrid {
            height,
            width,
            dim,
            data: vec![value; height * width * dim],
        }
    }

    pub fn from_vec(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::Dimension(format!(
                "latent grid {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite latent entry at index {bad}"
            )));
        }
        Ok(LatentGrid {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.width + j) * self.dim + c
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[self.index(i, j, c)]
    }

    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        let k = self.index(i, j, c);
        self.data[k] = v;
    }

    /// The `d` channels of cell `(i, j)`.
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let k = self.index(i, j, 0);
        &self.data[k..k + self.dim]
    }

    fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let k = self.index(i, j, 0);
        &mut self.data[k..k + self.dim]
    }

    /// Columns `start..start + len`.
    pub fn columns(&self, start: usize, len: usize) -> Result<LatentGrid> {
        if start + len > self.width {
            return Err(Error::Dimension(format!(
                "columns {start}..{} out of width {}",
                start + len,
                self.width
            )));
        }
        let mut out = LatentGrid::zeros(self.height, len, self.dim);
        for i in 0..self.height {
            for j in 0..len {
                out.cell_mut(i, j).copy_from_slice(self.cell(i, start + j));
            }
        }
        Ok(out)
    }

    /// Left (target) half of a concatenated grid.
    pub fn target_half(&self) -> Result<LatentGrid> {
        self.require_even_width()?;
        self.columns(0, self.width / 2)
    }

    /// Right (reference) half of a concatenated grid.
    pub fn reference_half(&self) -> Result<LatentGrid> {
        self.require_even_width()?;
        self.columns(self.width / 2, self.width / 2)
    }

    fn require_even_width(&self) -> Result<()> {
        if self.width % 2 != 0 {
            return Err(Error::Dimension(format!(
                "grid of width {} is not a width-wise concatenation",
                self.width
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self + s * other`, elementwise.
    pub fn axpy(&mut self, s: f64, other: &LatentGrid) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &LatentGrid) -> LatentGrid {
        assert_eq!(self.shape(), other.shape());
        LatentGrid {
            height: self.height,
            width: self.width,
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.dim)
    }
}

/// Binary per-cell mask over an `H × 2W` concatenated grid, broadcast over
/// channels. [`build_mask`] produces the canonical target-half mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl SpatialMask {
    /// A mask selecting every cell; the degenerate mask under which the
    /// masked objective coincides with the full one.
    pub fn ones(height: usize, width: usize) -> Self {
        SpatialMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Multiplies every masked-out cell of `grid` by zero.
    pub fn apply(&self, grid: &LatentGrid) -> Result<LatentGrid> {
        if grid.height() != self.height || grid.width() != self.width {
            return Err(Error::Dimension(format!(
                "mask {}x{} vs grid {}",
                self.height,
                self.width,
                grid.shape_str()
            )));
        }
        let mut out = grid.clone();
        for i in 0..self.height {
            for j in 0..self.width {
                if !self.get(i, j) {
                    out.cell_mut(i, j).iter_mut().for_each(|x| *x *= 0.0);
                }
            }
        }
        Ok(out)
    }
}

/// Whether the reference half of `z_t` is noised along with the target
/// during training, or held at the clean reference for every `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceNoising {
    #[default]
    Clean,
    Noised,
}

/// A point on the noise-to-data path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub z_t: LatentGrid,
    pub z0: LatentGrid,
    pub z1: LatentGrid,
}

/// Places `target` in columns `0..W` and `reference` in `W..2W`.
pub fn concat_width(target: &LatentGrid, reference: &LatentGrid) -> Result<LatentGrid> {
    if target.shape() != reference.shape() {
        return Err(Error::Dimension(format!(
            "target {} vs reference {}",
            target.shape_str(),
            reference.shape_str()
        )));
    }
    let (h, w, d) = target.shape();
    let mut out = LatentGrid::zeros(h, 2 * w, d);
    for i in 0..h {
        for j in 0..w {
            out.cell_mut(i, j).copy_from_slice(target.cell(i, j));
            out.cell_mut(i, w + j).copy_from_slice(reference.cell(i, j));
        }
    }
    Ok(out)
}

/// `μ[i][j] = 1` iff `j < W`, over an `H × 2W` grid.
pub fn build_mask(height: usize, width: usize) -> Result<SpatialMask> {
    if height == 0 || width == 0 {
        return Err(Error::Argument(format!(
            "mask dimensions must be positive, got H={height} W={width}"
        )));
    }
    let w2 = 2 * width;
    let bits = (0..height * w2).map(|k| k % w2 < width).collect();
    Ok(SpatialMask {
        height,
        width: w2,
        bits,
    })
}

/// I.i.d. standard-normal grid from a ChaCha8 stream keyed by `seed`.
pub fn sample_noise(height: usize, width: usize, dim: usize, seed: u64) -> Result<LatentGrid> {
    if height == 0 || width == 0 || dim == 0 {
        return Err(Error::Argument(format!(
            "noise dimensions must be positive, got {height}x{width}x{dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(LatentGrid {
        height,
        width,
        dim,
        data,
    })
}

/// `z_t = (1 − t)·z1 + t·z0`, so `t = 0` is pure noise and `dz_t/dt = z0 − z1`.
pub fn interpolate(z0: &LatentGrid, z1: &LatentGrid, t: f64) -> Result<FlowState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("t must lie in [0, 1], got {t}")));
    }
    if z0.shape() != z1.shape() {
        return Err(Error::Dimension(format!(
            "z0 {} vs z1 {}",
            z0.shape_str(),
            z1.shape_str()
        )));
    }
    let data = z0
        .data
        .iter()
        .zip(&z1.data)
        .map(|(a, b)| (1.0 - t) * b + t * a)
        .collect();
    let z_t = LatentGrid {
        height: z0.height,
        width: z0.width,
        dim: z0.dim,
        data,
    };
    Ok(FlowState {
        t,
        z_t,
        z0: z0.clone(),
        z1: z1.clone(),
    })
}

/// Overwrites columns `W..2W` of `z` with `reference`.
pub fn clamp_reference(z: &LatentGrid, reference: &LatentGrid) -> Result<LatentGrid> {
    let mut out = z.clone();
    clamp_reference_in_place(&mut out, reference)?;
    Ok(out)
}

pub(crate) fn clamp_reference_in_place(z: &mut LatentGrid, reference: &LatentGrid) -> Result<()> {
    if z.height != reference.height || z.dim != reference.dim || z.width != 2 * reference.width {
        return Err(Error::Dimension(format!(
            "grid {} cannot hold reference {} in its right half",
            z.shape_str(),
            reference.shape_str()
        )));
    }
    let w = reference.width;
    for i in 0..z.height {
        for j in 0..w {
            z.cell_mut(i, w + j).copy_from_slice(reference.cell(i, j));
        }
    }
    Ok(())
}

/// One training example in latent space: a reference and its target, each
/// `H × W × d`, with the target's prompt tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPair {
    pub pair_id: String,
    pub subject_id: String,
    pub reference: LatentGrid,
    pub target: LatentGrid,
    pub tokens: Vec<usize>,
}
