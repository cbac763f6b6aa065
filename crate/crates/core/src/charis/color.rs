//! sRGB (8-bit) to HSV and CIELAB (D65, 2° observer).

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Hsv,
    Lab,
}

impl ColorSpace {
    pub const ALL: [ColorSpace; 3] = [ColorSpace::Rgb, ColorSpace::Hsv, ColorSpace::Lab];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// `(hue in degrees [0, 360), saturation [0, 1], value [0, 1])`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| c / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let hue = if chroma == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / chroma + 2.0)
    } else {
        60.0 * ((r - g) / chroma + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { chroma / max };
    [hue, sat, max]
}

fn srgb_to_linear(c: f64) -> f64 {
    let c = c / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Linear sRGB to XYZ; rows sum to the D65 white point.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn white() -> [f64; 3] {
    RGB_TO_XYZ.map(|row| row.iter().sum())
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// `(L*, a*, b*)`.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let w = white();
    let xyz: [f64; 3] =
        std::array::from_fn(|i| (0..3).map(|k| RGB_TO_XYZ[i][k] * lin[k]).sum::<f64>() / w[i]);
    let [fx, fy, fz] = xyz.map(lab_f);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn convert(rgb: [f64; 3], space: ColorSpace) -> [f64; 3] {
    match space {
        ColorSpace::Rgb => rgb,
        ColorSpace::Hsv => rgb_to_hsv(rgb),
        ColorSpace::Lab => rgb_to_lab(rgb),
    }
}

/// Channel weights of the HSV distance `(hue, saturation, value)`.
pub const HSV_WEIGHTS: [f64; 3] = [2.0, 1.0, 1.0];

/// Distance between two colors expressed in `space`:
/// RGB Euclidean on 0–255; HSV weighted Euclidean with the angular hue
/// difference scaled to [0, 1]; LAB CIE76 ΔE.
pub fn distance(a: [f64; 3], b: [f64; 3], space: ColorSpace) -> f64 {
    match space {
        ColorSpace::Rgb | ColorSpace::Lab => a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        ColorSpace::Hsv => {
            let dh = (a[0] - b[0]).abs().rem_euclid(360.0);
            let dh = dh.min(360.0 - dh) / 180.0;
            let d = [dh, a[1] - b[1], a[2] - b[2]];
            d.iter()
                .zip(HSV_WEIGHTS)
                .map(|(x, w)| w * x * x)
                .sum::<f64>()
                .sqrt()
        }
    }
}

/// Per-space mean of a set of pixels. Hue is averaged on the circle.
pub fn mean_colors(pixels: impl IntoIterator<Item = [u8; 3]>) -> Option<[[f64; 3]; 3]> {
    let mut n = 0usize;
    let mut rgb = [0.0; 3];
    let mut lab = [0.0; 3];
    let (mut hx, mut hy, mut s, mut v) = (0.0, 0.0, 0.0, 0.0);
    for p in pixels {
        let c = p.map(f64::from);
        n += 1;
        for k in 0..3 {
            rgb[k] += c[k];
        }
        let l = rgb_to_lab(c);
        for k in 0..3 {
            lab[k] += l[k];
        }
        let h = rgb_to_hsv(c);
        // Hue of an achromatic pixel is undefined; weighting by saturation
        // keeps it out of the circular mean.
        let theta = h[0].to_radians();
        hx += h[1] * theta.cos();
        hy += h[1] * theta.sin();
        s += h[1];
        v += h[2];
    }
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let hue = if hx == 0.0 && hy == 0.0 {
        0.0
    } else {
        hy.atan2(hx).to_degrees().rem_euclid(360.0)
    };
    Some([
        rgb.map(|x| x / nf),
        [hue, s / nf, v / nf],
        lab.map(|x| x / nf),
    ])
}
