use serde::{Deserialize, Serialize};

use crate::raster::RgbdImage;

/// Hexcone RGB to HSV. Hue in degrees `[0, 360)`, zero when saturation is zero.
pub fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (if h < 0.0 { h + 360.0 } else { h }, s, v)
}

/// HSV acceptance region. A pixel matches when its hue falls in any window
/// and saturation and value fall inside their bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    /// Inclusive hue windows in degrees.
    pub hue: Vec<[f64; 2]>,
    pub sat_min: f64,
    #[serde(default = "one")]
    pub sat_max: f64,
    pub val_min: f64,
    #[serde(default = "one")]
    pub val_max: f64,
}

fn one() -> f64 {
    1.0
}

impl ColorSpec {
    pub fn red() -> Self {
        Self {
            hue: vec![[0.0, 10.0], [350.0, 360.0]],
            sat_min: 0.5,
            sat_max: 1.0,
            val_min: 0.3,
            val_max: 1.0,
        }
    }

    pub fn green() -> Self {
        Self {
            hue: vec![[90.0, 150.0]],
            sat_min: 0.5,
            sat_max: 1.0,
            val_min: 0.3,
            val_max: 1.0,
        }
    }

    /// Low-saturation bright pixels: a metallic can under studio lighting.
    pub fn silver() -> Self {
        Self {
            hue: vec![[0.0, 360.0]],
            sat_min: 0.0,
            sat_max: 0.15,
            val_min: 0.65,
            val_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hue.is_empty() {
            return Err("at least one hue window is required".into());
        }
        for w in &self.hue {
            if !(0.0..=360.0).contains(&w[0]) || !(0.0..=360.0).contains(&w[1]) || w[0] > w[1] {
                return Err(format!("hue window {w:?} must satisfy 0 <= lo <= hi <= 360"));
            }
        }
        for (name, x) in [
            ("sat_min", self.sat_min),
            ("sat_max", self.sat_max),
            ("val_min", self.val_min),
            ("val_max", self.val_max),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return Err(format!("{name} = {x} is outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn matches_hsv(&self, (h, s, v): (f64, f64, f64)) -> bool {
        s >= self.sat_min
            && s <= self.sat_max
            && v >= self.val_min
            && v <= self.val_max
            && self.hue.iter().any(|w| h >= w[0] && h <= w[1])
    }

    pub fn matches(&self, rgb: [u8; 3]) -> bool {
        self.matches_hsv(rgb_to_hsv(rgb))
    }
}

/// Binary mask over a stored raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, on: bool) {
        self.bits[row * self.width + col] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Binary PBM (P4), rows as stored.
    pub fn to_pbm(&self) -> Vec<u8> {
        let mut out = format!("P4\n{} {}\n", self.width, self.height).into_bytes();
        let stride = self.width.div_ceil(8);
        for row in 0..self.height {
            let mut line = vec![0u8; stride];
            for col in 0..self.width {
                if self.get(col, row) {
                    line[col / 8] |= 0x80 >> (col % 8);
                }
            }
            out.extend_from_slice(&line);
        }
        out
    }
}

pub fn segment_color(img: &RgbdImage, spec: &ColorSpec) -> Mask {
    let mut mask = Mask::new(img.width, img.height);
    for (i, px) in img.rgb.chunks_exact(3).enumerate() {
        mask.bits[i] = spec.matches([px[0], px[1], px[2]]);
    }
    mask
}

/// One mask per spec, converting each pixel to HSV once.
pub fn segment_many(img: &RgbdImage, specs: &[&ColorSpec]) -> Vec<Mask> {
    let mut masks: Vec<Mask> = specs.iter().map(|_| Mask::new(img.width, img.height)).collect();
    for (i, px) in img.rgb.chunks_exact(3).enumerate() {
        let hsv = rgb_to_hsv([px[0], px[1], px[2]]);
        for (m, spec) in masks.iter_mut().zip(specs) {
            m.bits[i] = spec.matches_hsv(hsv);
        }
    }
    masks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Convention;

    #[test]
    fn primaries_and_gray() {
        assert_eq!(rgb_to_hsv([255, 0, 0]), (0.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv([0, 255, 0]), (120.0, 1.0, 1.0));
        let (h, s, v) = rgb_to_hsv([128, 128, 128]);
        assert_eq!((h, s), (0.0, 0.0));
        assert!((v - 0.502).abs() < 1e-3);
    }

    #[test]
    fn red_wraps_around_zero() {
        let red = ColorSpec::red();
        assert!(red.matches([200, 30, 30]));
        assert!(red.matches([200, 30, 50]));
        assert!(!red.matches([120, 80, 50]));
        assert!(!red.matches([128, 128, 128]));
    }

    #[test]
    fn gray_image_red_spec_is_empty() {
        let img = RgbdImage::filled(16, 16, Convention::GlBottomUp, [128, 128, 128]);
        assert_eq!(segment_color(&img, &ColorSpec::red()).count(), 0);
    }

    #[test]
    fn segment_many_agrees_with_single() {
        let mut img = RgbdImage::filled(8, 8, Convention::GlBottomUp, [128, 128, 128]);
        img.set_rgb(1, 2, [200, 30, 30]);
        img.set_rgb(5, 5, [30, 160, 30]);
        let (r, g) = (ColorSpec::red(), ColorSpec::green());
        let many = segment_many(&img, &[&r, &g]);
        assert_eq!(many[0], segment_color(&img, &r));
        assert_eq!(many[1], segment_color(&img, &g));
    }

    #[test]
    fn bad_windows_are_rejected() {
        let mut spec = ColorSpec::red();
        spec.hue.push([20.0, 10.0]);
        assert!(spec.validate().is_err());
        let mut spec = ColorSpec::red();
        spec.sat_min = 1.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn pbm_packs_bits_msb_first() {
        let mut m = Mask::new(9, 1);
        m.set(0, 0, true);
        m.set(8, 0, true);
        let pbm = m.to_pbm();
        assert_eq!(&pbm[pbm.len() - 2..], &[0x80, 0x80]);
    }
}
