//! Colour-quantisation + 4-connected-components segmentation.

use std::collections::{BTreeMap, HashSet};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::color::mean_colors;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Every component is a region.
    #[default]
    Keep,
    /// Components whose quantised colour occurs on the image border are
    /// background.
    BorderColors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    /// Quantisation levels per channel.
    pub levels: u32,
    pub min_area: usize,
    pub background: Background,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            levels: 8,
            min_area: 16,
            background: Background::Keep,
        }
    }
}

impl SegmentConfig {
    pub fn foreground() -> Self {
        SegmentConfig {
            background: Background::BorderColors,
            ..SegmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.levels) {
            return Err(Error::Config(format!(
                "segment.levels must lie in 2..=256, got {}",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Inclusive pixel bounding box `(row0, col0, row1, col1)`.
pub type BBox = (usize, usize, usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub width: usize,
    pub height: usize,
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<usize>,
    pub bbox: BBox,
    /// Mean colour in RGB, HSV and LAB, indexed by [`super::ColorSpace`].
    pub mean: [[f64; 3]; 3],
    pub label: Option<String>,
}

impl Region {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.pixels.binary_search(&idx).is_ok()
    }

    /// A region from an explicit pixel mask over `image`.
    pub fn from_mask(image: &RgbImage, mask: &[bool], label: Option<String>) -> Result<Self> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if mask.len() != w * h {
            return Err(Error::Dimension(format!(
                "mask of {} pixels for a {w}x{h} image",
                mask.len()
            )));
        }
        let pixels: Vec<usize> = (0..w * h).filter(|&i| mask[i]).collect();
        Region::from_pixels(image, pixels, label)
    }

    fn from_pixels(image: &RgbImage, pixels: Vec<usize>, label: Option<String>) -> Result<Self> {
        let w = image.width() as usize;
        let mean = mean_colors(
            pixels
                .iter()
                .map(|&i| image.get_pixel((i % w) as u32, (i / w) as u32).0),
        )
        .ok_or_else(|| Error::Argument("region has no pixels".into()))?;
        let mut bbox = (usize::MAX, usize::MAX, 0, 0);
        for &i in &pixels {
            let (r, c) = (i / w, i % w);
            bbox = (bbox.0.min(r), bbox.1.min(c), bbox.2.max(r), bbox.3.max(c));
        }
        Ok(Region {
            width: w,
            height: image.height() as usize,
            pixels,
            bbox,
            mean,
            label,
        })
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index wins, so roots do not depend on visiting order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

fn quantize(p: [u8; 3], levels: u32) -> u32 {
    let q = |c: u8| u32::from(c) * levels / 256;
    (q(p[0]) * levels + q(p[1])) * levels + q(p[2])
}

/// Quantised colour code of a pixel, as used by [`segment`].
pub fn quantized_code(p: [u8; 3], levels: u32) -> u32 {
    quantize(p, levels)
}

/// Source of regions for colour scoring. The built-in quantising segmenter
/// is [`SegmentConfig`]; an external model can be plugged in here.
pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &RgbImage) -> Result<Vec<Region>>;
}

impl Segmenter for SegmentConfig {
    fn segment(&self, image: &RgbImage) -> Result<Vec<Region>> {
        segment(image, self)
    }
}

/// Regions ordered by their first pixel in row-major order.
pub fn segment(image: &RgbImage, cfg: &SegmentConfig) -> Result<Vec<Region>> {
    let rows: Vec<usize> = (0..image.height() as usize).collect();
    segment_in_order(image, cfg, &rows)
}

pub fn segment_in_order(
    image: &RgbImage,
    cfg: &SegmentConfig,
    row_order: &[usize],
) -> Result<Vec<Region>> {
    cfg.validate()?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Dimension("empty image".into()));
    }
    let codes: Vec<u32> = image.pixels().map(|p| quantize(p.0, cfg.levels)).collect();
    let mut uf = UnionFind::new(w * h);
    for &r in row_order {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w && codes[i] == codes[i + 1] {
                uf.union(i, i + 1);
            }
            if r + 1 < h && codes[i] == codes[i + w] {
                uf.union(i, i + w);
            }
        }
    }
    let background: HashSet<u32> = match cfg.background {
        Background::Keep => HashSet::new(),
        Background::BorderColors => (0..w * h)
            .filter(|&i| {
                let (r, c) = (i / w, i % w);
                r == 0 || c == 0 || r == h - 1 || c == w - 1
            })
            .map(|i| codes[i])
            .collect(),
    };
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..w * h {
        if !background.contains(&codes[i]) {
            groups.entry(uf.find(i)).or_default().push(i);
        }
    }
    // Roots are component minima, so BTreeMap order is first-pixel order.
    let regions: Vec<Region> = groups
        .into_values()
        .filter(|px| px.len() >= cfg.min_area)
        .map(|px| Region::from_pixels(image, px, None))
        .collect::<Result<_>>()?;
    if regions.is_empty() {
        return Err(Error::EmptySegmentation {
            min_area: cfg.min_area,
        });
    }
    Ok(regions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn two_color() -> RgbImage {
        RgbImage::from_fn(12, 10, |x, _| {
            if x < 5 {
                Rgb([200, 30, 30])
            } else {
                Rgb([20, 40, 220])
            }
        })
    }

    #[test]
    fn solid_two_color_image_has_two_regions() {
        let r = segment(&two_color(), &SegmentConfig::default()).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].area(), 50);
        assert_eq!(r[1].area(), 70);
        assert_eq!(r[0].mean[0], [200.0, 30.0, 30.0]);
    }

    #[test]
    fn border_colors_are_background() {
        let img = RgbImage::from_fn(16, 16, |x, y| {
            if (4..12).contains(&x) && (4..12).contains(&y) {
                Rgb([250, 200, 0])
            } else {
                Rgb([30, 30, 30])
            }
        });
        let r = segment(&img, &SegmentConfig::foreground()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].area(), 64);
        assert_eq!(r[0].bbox, (4, 4, 11, 11));
    }

    #[test]
    fn tiny_components_dropped_and_empty_is_error() {
        let img = RgbImage::from_fn(8, 8, |x, y| {
            if x == 3 && y == 3 {
                Rgb([255, 255, 255])
            } else {
                Rgb([0, 0, 0])
            }
        });
        let r = segment(&img, &SegmentConfig::default()).unwrap();
        assert_eq!(r.len(), 1);
        assert!(matches!(
            segment(&img, &SegmentConfig::foreground()),
            Err(Error::EmptySegmentation { min_area: 16 })
        ));
    }

    #[test]
    fn row_processing_order_is_irrelevant() {
        let img = RgbImage::from_fn(20, 20, |x, y| {
            let v = ((x / 5 + y / 4) % 3) as u8;
            Rgb([v * 100, 255 - v * 90, (x * y % 2) as u8 * 4])
        });
        let forward = segment(&img, &SegmentConfig::default()).unwrap();
        let reversed: Vec<usize> = (0..20).rev().collect();
        let shuffled = [
            7, 3, 19, 0, 12, 5, 1, 18, 2, 9, 11, 4, 16, 6, 14, 8, 17, 10, 13, 15,
        ];
        assert_eq!(
            segment_in_order(&img, &SegmentConfig::default(), &reversed).unwrap(),
            forward
        );
        assert_eq!(
            segment_in_order(&img, &SegmentConfig::default(), &shuffled).unwrap(),
            forward
        );
    }
}
