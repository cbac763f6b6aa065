use std::collections::HashSet;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Context, Pose, ShapeFamily, SubjectSpec};
use crate::charis::quantized_code;
use crate::error::{Error, Result};
use crate::latents::LatentGrid;

pub const IMAGE_SIZE: u32 = 64;
/// Sprite cells per side; also the latent grid side.
pub const CELLS: usize = 16;
/// RGB in [-1, 1] plus luminance.
pub const LATENT_CHANNELS: usize = 4;

const BODY: u8 = 0;
const HEAD: u8 = 1;
const ACCENT: u8 = 2;

const PLAIN: [u8; 3] = [200, 200, 200];
const GRADIENT_TOP: [u8; 3] = [110, 118, 135];
const GRADIENT_BOTTOM: [u8; 3] = [205, 205, 215];
const CHECKER: [[u8; 3]; 2] = [[160, 160, 160], [120, 120, 120]];

fn lerp_color(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    std::array::from_fn(|k| {
        (f64::from(a[k]) + (f64::from(b[k]) - f64::from(a[k])) * t).round() as u8
    })
}

fn background_pixel(context: Context, x: u32, y: u32, size: u32) -> [u8; 3] {
    match context {
        Context::Plain => PLAIN,
        Context::Gradient => lerp_color(
            GRADIENT_TOP,
            GRADIENT_BOTTOM,
            f64::from(y) / f64::from(size - 1),
        ),
        Context::Patterned => {
            let period = (size / 8).max(1);
            CHECKER[((x / period + y / period) % 2) as usize]
        }
    }
}

/// Quantisation codes of every colour any background can produce.
pub(crate) fn background_codes(levels: u32) -> HashSet<u32> {
    let mut out: HashSet<u32> = [PLAIN, CHECKER[0], CHECKER[1]]
        .iter()
        .map(|&c| quantized_code(c, levels))
        .collect();
    for k in 0..=1024 {
        out.insert(quantized_code(
            lerp_color(GRADIENT_TOP, GRADIENT_BOTTOM, f64::from(k) / 1024.0),
            levels,
        ));
    }
    out
}

type CellMap = [[Option<u8>; CELLS]; CELLS];

fn fill(map: &mut CellMap, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, label: u8) {
    for r in rows {
        for c in cols.clone() {
            map[r][c] = Some(label);
        }
    }
}

/// Region label per cell.
fn layout_cells(spec: &SubjectSpec, pose: Pose) -> CellMap {
    let mut m: CellMap = [[None; CELLS]; CELLS];
    let dy = if pose == Pose::Sit { 2 } else { 0 };
    let tw = spec.scale as usize;
    let (c0, c1) = ((CELLS - tw) / 2, (CELLS + tw) / 2);
    let head_top = 2 + dy;
    let (head_rows, head_cols) = match spec.shape {
        ShapeFamily::Boxy | ShapeFamily::Round => (head_top..head_top + 4, 6..10),
        ShapeFamily::Tall => (head_top..head_top + 3, 7..9),
    };
    let torso_top = head_rows.end;
    let hips = 10 + dy;

    fill(&mut m, torso_top..hips, c0..c1, BODY);
    match pose {
        Pose::Stand | Pose::Sit => {
            fill(&mut m, torso_top..torso_top + 4, c0 - 2..c0, BODY);
            fill(&mut m, torso_top..torso_top + 4, c1..c1 + 2, BODY);
        }
        Pose::Wave => {
            fill(&mut m, torso_top..torso_top + 4, c0 - 2..c0, BODY);
            fill(&mut m, torso_top - 4..torso_top + 1, c1..c1 + 2, BODY);
        }
        Pose::Run => {
            fill(&mut m, torso_top + 1..torso_top + 3, c0 - 3..c0, BODY);
            fill(&mut m, torso_top..torso_top + 2, c1..c1 + 3, BODY);
        }
    }

    fill(&mut m, hips..hips + 1, c0..c1, ACCENT);
    match pose {
        Pose::Stand | Pose::Wave => {
            fill(&mut m, hips + 1..hips + 5, c0..c0 + 2, ACCENT);
            fill(&mut m, hips + 1..hips + 5, c1 - 2..c1, ACCENT);
        }
        Pose::Sit => fill(&mut m, hips + 1..hips + 3, c0 - 2..c1 + 2, ACCENT),
        Pose::Run => {
            fill(&mut m, hips + 1..hips + 3, c0..c0 + 2, ACCENT);
            fill(&mut m, hips + 3..hips + 5, c0 - 1..c0 + 1, ACCENT);
            fill(&mut m, hips + 1..hips + 3, c1 - 2..c1, ACCENT);
            fill(&mut m, hips + 3..hips + 5, c1 - 1..c1 + 1, ACCENT);
        }
    }

    fill(&mut m, head_rows.clone(), head_cols.clone(), HEAD);
    if spec.shape == ShapeFamily::Round {
        for r in [head_rows.start, head_rows.end - 1] {
            for c in [head_cols.start, head_cols.end - 1] {
                m[r][c] = None;
            }
        }
    }
    if spec.hat {
        fill(
            &mut m,
            head_top - 1..head_top,
            head_cols.start - 1..head_cols.end + 1,
            HEAD,
        );
    }
    // Border cells stay background so border-colour segmentation is sound.
    debug_assert!(
        (0..CELLS).all(|k| [m[0][k], m[CELLS - 1][k], m[k][0], m[k][CELLS - 1]]
            .iter()
            .all(Option::is_none))
    );
    m
}

/// A rendered sprite and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: RgbImage,
    /// Pixel masks for body, head, accent.
    pub masks: [Vec<bool>; 3],
    /// Region label per latent cell (row-major, `CELLS²`).
    pub cells: Vec<Option<u8>>,
}

impl Rendered {
    /// Foreground pixel mask.
    pub fn foreground(&self) -> Vec<bool> {
        (0..self.masks[0].len())
            .map(|i| self.masks.iter().any(|m| m[i]))
            .collect()
    }
}

fn check_size(size: u32) -> Result<()> {
    if size == 0 || size as usize % CELLS != 0 {
        return Err(Error::Argument(format!(
            "sprite size must be a positive multiple of {CELLS}, got {size}"
        )));
    }
    Ok(())
}

pub fn render(spec: &SubjectSpec, pose: Pose, context: Context, size: u32) -> Result<Rendered> {
    spec.validate()?;
    check_size(size)?;
    let cell = size / CELLS as u32;
    let map = layout_cells(spec, pose);
    let colors = spec.palette.colors();
    let n = (size * size) as usize;
    let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
    let image = RgbImage::from_fn(size, size, |x, y| {
        match map[(y / cell) as usize][(x / cell) as usize] {
            Some(l) => {
                masks[l as usize][(y * size + x) as usize] = true;
                Rgb(colors[l as usize])
            }
            None => Rgb(background_pixel(context, x, y, size)),
        }
    });
    Ok(Rendered {
        image,
        masks,
        cells: map.iter().flatten().copied().collect(),
    })
}

/// Block-averages an image into a `CELLS × CELLS × 4` latent.
pub fn encode_latent(image: &RgbImage) -> Result<LatentGrid> {
    let size = image.width();
    if image.height() != size {
        return Err(Error::Argument(
            "latent encoding needs a square image".into(),
        ));
    }
    check_size(size)?;
    let cell = size / CELLS as u32;
    let area = f64::from(cell * cell);
    let mut g = LatentGrid::zeros(CELLS, CELLS, LATENT_CHANNELS);
    for i in 0..CELLS {
        for j in 0..CELLS {
            let mut sum = [0.0; 3];
            for y in 0..cell {
                for x in 0..cell {
                    let p = image.get_pixel(j as u32 * cell + x, i as u32 * cell + y).0;
                    for k in 0..3 {
                        sum[k] += f64::from(p[k]);
                    }
                }
            }
            let mean = sum.map(|s| s / area);
            for k in 0..3 {
                g.set(i, j, k, mean[k] / 127.5 - 1.0);
            }
            let lum = 0.299 * mean[0] + 0.587 * mean[1] + 0.114 * mean[2];
            g.set(i, j, 3, lum / 127.5 - 1.0);
        }
    }
    Ok(g)
}

/// Nearest-neighbour upsampling of the RGB channels.
pub fn decode_latent(latent: &LatentGrid, size: u32) -> Result<RgbImage> {
    check_size(size)?;
    let (h, w, c) = latent.shape();
    if h != CELLS || w != CELLS || c < 3 {
        return Err(Error::Dimension(format!(
            "cannot decode a {h}x{w}x{c} latent"
        )));
    }
    let cell = size / CELLS as u32;
    Ok(RgbImage::from_fn(size, size, |x, y| {
        let px = latent.cell((y / cell) as usize, (x / cell) as usize);
        Rgb(std::array::from_fn(|k| {
            ((px[k] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutRegion {
    pub x: u32,
    pub y: u32,
    /// Side of the square region.
    pub size: u32,
    pub pose: Pose,
    pub context: Context,
}

/// A canvas split into disjoint square regions that together cover it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionalLayout {
    pub width: u32,
    pub height: u32,
    pub regions: Vec<LayoutRegion>,
    pub base_prompt: String,
}

impl RegionalLayout {
    /// `rows × cols` tiles of side `size`, prompts in row-major order.
    pub fn grid(rows: u32, cols: u32, size: u32, prompts: &[(Pose, Context)]) -> Result<Self> {
        if prompts.len() != (rows * cols) as usize {
            return Err(Error::Layout(format!(
                "{} prompts for {rows}x{cols} tiles",
                prompts.len()
            )));
        }
        let regions = prompts
            .iter()
            .enumerate()
            .map(|(k, &(pose, context))| LayoutRegion {
                x: (k as u32 % cols) * size,
                y: (k as u32 / cols) * size,
                size,
                pose,
                context,
            })
            .collect();
        Ok(RegionalLayout {
            width: cols * size,
            height: rows * size,
            regions,
            base_prompt: "character sheet".into(),
        })
    }

    /// Checks bounds, pairwise disjointness and full coverage.
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::Layout("layout has no regions".into()));
        }
        let overlaps = |a: &LayoutRegion, b: &LayoutRegion| {
            a.x < b.x + b.size && b.x < a.x + a.size && a.y < b.y + b.size && b.y < a.y + a.size
        };
        for (i, r) in self.regions.iter().enumerate() {
            check_size(r.size).map_err(|e| Error::Layout(e.to_string()))?;
            if r.x + r.size > self.width || r.y + r.size > self.height {
                return Err(Error::Layout(format!("region {i} leaves the canvas")));
            }
            if let Some(j) = self.regions[..i].iter().position(|o| overlaps(o, r)) {
                return Err(Error::Layout(format!("regions {j} and {i} overlap")));
            }
        }
        let covered: u64 = self
            .regions
            .iter()
            .map(|r| u64::from(r.size) * u64::from(r.size))
            .sum();
        if covered != u64::from(self.width) * u64::from(self.height) {
            return Err(Error::Layout("regions do not cover the canvas".into()));
        }
        Ok(())
    }

    /// Pixel mask of region `r` over the canvas.
    pub fn mask(&self, r: usize) -> Vec<bool> {
        let reg = &self.regions[r];
        (0..self.width * self.height)
            .map(|i| {
                let (x, y) = (i % self.width, i / self.width);
                (reg.x..reg.x + reg.size).contains(&x) && (reg.y..reg.y + reg.size).contains(&y)
            })
            .collect()
    }
}

/// Renders every region of `layout` with the same subject.
pub fn gen_sheet(spec: &SubjectSpec, layout: &RegionalLayout) -> Result<RgbImage> {
    layout.validate()?;
    let mut canvas = RgbImage::new(layout.width, layout.height);
    for r in &layout.regions {
        let tile = render(spec, r.pose, r.context, r.size)?;
        image::imageops::replace(&mut canvas, &tile.image, i64::from(r.x), i64::from(r.y));
    }
    Ok(canvas)
}
