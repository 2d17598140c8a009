//! RGB-D rasters and their codec-free on-disk formats.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Storage order of image rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Convention {
    /// Row 0 is the bottom of the image (OpenGL readback).
    #[serde(rename = "GL_BOTTOM_UP")]
    GlBottomUp,
    /// Row 0 is the top of the image (OpenCV).
    #[serde(rename = "CV_TOP_DOWN")]
    CvTopDown,
}

impl Convention {
    pub fn as_str(&self) -> &'static str {
        match self {
            Convention::GlBottomUp => "GL_BOTTOM_UP",
            Convention::CvTopDown => "CV_TOP_DOWN",
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Convention {
    type Err = ImageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "GL_BOTTOM_UP" | "GL" => Ok(Convention::GlBottomUp),
            "CV_TOP_DOWN" | "CV" => Ok(Convention::CvTopDown),
            _ => Err(ImageError::Format(format!("unknown image convention `{s}`"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed image data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Colour plus depth raster. `depth` is metres along the camera's viewing axis, 0 where nothing was hit.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, 3 bytes per pixel, rows in `convention` order.
    pub rgb: Vec<u8>,
    pub depth: Vec<f64>,
    pub convention: Convention,
}

impl RgbdImage {
    pub fn new(width: usize, height: usize, convention: Convention) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
            depth: vec![0.0; width * height],
            convention,
        }
    }

    pub fn filled(width: usize, height: usize, convention: Convention, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height, convention);
        for px in img.rgb.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn rgb_at(&self, col: usize, row: usize) -> [u8; 3] {
        let i = self.index(col, row) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_rgb(&mut self, col: usize, row: usize, c: [u8; 3]) {
        let i = self.index(col, row) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn depth_at(&self, col: usize, row: usize) -> f64 {
        self.depth[self.index(col, row)]
    }

    /// Same picture stored in the other row order.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        out.convention = match self.convention {
            Convention::GlBottomUp => Convention::CvTopDown,
            Convention::CvTopDown => Convention::GlBottomUp,
        };
        let w = self.width;
        for row in 0..self.height {
            let src = self.height - 1 - row;
            out.rgb[row * w * 3..(row + 1) * w * 3].copy_from_slice(&self.rgb[src * w * 3..(src + 1) * w * 3]);
            out.depth[row * w..(row + 1) * w].copy_from_slice(&self.depth[src * w..(src + 1) * w]);
        }
        out
    }

    /// Rows ordered top to bottom, whatever the stored convention.
    pub fn to_top_down(&self) -> Self {
        match self.convention {
            Convention::CvTopDown => self.clone(),
            Convention::GlBottomUp => self.flipped(),
        }
    }

    /// Binary PPM (P6) of the raster exactly as stored.
    pub fn to_ppm(&self) -> Vec<u8> {
        encode_ppm(self.width, self.height, &self.rgb)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }

    /// Little-endian f32 depth raster.
    pub fn depth_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.depth.len() * 4);
        for d in &self.depth {
            out.extend_from_slice(&(*d as f32).to_le_bytes());
        }
        out
    }

    pub fn depth_header(&self) -> DepthHeader {
        DepthHeader {
            width: self.width,
            height: self.height,
            convention: self.convention,
            dtype: "f32le".into(),
        }
    }

    /// Writes `<stem>.depth` and its `<stem>.depth.json` header.
    pub fn write_depth(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.depth_le_bytes())?;
        let mut header = path.as_os_str().to_owned();
        header.push(".json");
        let json = serde_json::to_vec_pretty(&self.depth_header()).map_err(|e| ImageError::Format(e.to_string()))?;
        std::fs::File::create(header)?.write_all(&json)?;
        Ok(())
    }

    /// Rebuilds an image from a PPM colour raster and a little-endian f32 depth raster.
    pub fn from_parts(ppm: &[u8], depth_le: &[u8], convention: Convention) -> Result<Self, ImageError> {
        let (width, height, rgb) = decode_ppm(ppm)?;
        if depth_le.len() != width * height * 4 {
            return Err(ImageError::Format(format!(
                "depth raster has {} bytes, expected {} for {width}x{height}",
                depth_le.len(),
                width * height * 4
            )));
        }
        let depth: Vec<f64> = depth_le
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(ImageError::Format("depth must be finite and non-negative".into()));
        }
        Ok(Self {
            width,
            height,
            rgb,
            depth,
            convention,
        })
    }

    /// PNG of the top-down view, for backends that do not accept PPM.
    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let top = self.to_top_down();
        let img = ::image::RgbImage::from_raw(top.width as u32, top.height as u32, top.rgb)
            .ok_or_else(|| ImageError::Format("raster size mismatch".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, ::image::ImageFormat::Png)
            .map_err(|e| ImageError::Format(e.to_string()))?;
        Ok(out.into_inner())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthHeader {
    pub width: usize,
    pub height: usize,
    pub convention: Convention,
    pub dtype: String,
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Parses a binary PPM with maxval 255. Comments in the header are allowed.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Format("truncated PPM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| ImageError::Format("non-ascii PPM header".into()))?);
    }
    if fields[0] != "P6" {
        return Err(ImageError::Format(format!("expected P6, found `{}`", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| ImageError::Format(format!("bad PPM number `{s}`")));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(ImageError::Format(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(ImageError::Format(format!(
            "PPM raster truncated: {} of {need} bytes",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}
