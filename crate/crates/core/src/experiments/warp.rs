//! Rotation and shear of single-channel images.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpMode {
    Rotate,
    Shear,
}

impl WarpMode {
    pub fn name(self) -> &'static str {
        match self {
            WarpMode::Rotate => "rotate",
            WarpMode::Shear => "shear",
        }
    }
}

impl std::fmt::Display for WarpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for WarpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rotate" | "rotation" => Ok(WarpMode::Rotate),
            "shear" => Ok(WarpMode::Shear),
            other => Err(Error::Config(format!("unknown warp mode `{other}`"))),
        }
    }
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
fn sin_cos_deg(angle: f64) -> (f64, f64) {
    let q = angle / 90.0;
    if q == q.round() {
        match (q as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        angle.to_radians().sin_cos()
    }
}

/// Bilinear sample at fractional `(x, y)`; pixels outside the image read as 0.
fn sample(img: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            0.0
        } else {
            img[r as usize * w + c as usize] as f64
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let wt = wx * wy;
            if wt != 0.0 {
                v += wt * at(y0 + dy, x0 + dx);
            }
        }
    }
    v as f32
}

/// Warps an `h × w` image about its center by inverse mapping with bilinear
/// interpolation and zero fill. With `x` to the right and `y` downwards,
/// `Rotate` turns the content counter-clockwise on screen and `Shear` maps
/// `(x, y)` to `(x + tan(angle)·y, y)`.
pub fn warp_image(img: &[f32], h: usize, w: usize, angle: f64, mode: WarpMode) -> Result<Vec<f32>> {
    if img.len() != h * w {
        return Err(shape_err!("{} pixels for a {h}x{w} image", img.len()));
    }
    if !angle.is_finite() {
        return Err(Error::InvalidArgument(format!("warp angle must be finite, got {angle}")));
    }
    if mode == WarpMode::Shear && angle.abs() >= 90.0 {
        return Err(Error::InvalidArgument(format!("shear angle must lie in (-90, 90), got {angle}")));
    }
    if angle == 0.0 {
        return Ok(img.to_vec());
    }
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = sin_cos_deg(angle);
    let t = angle.to_radians().tan();
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for col in 0..w {
            let (x, y) = (col as f64 - cx, r as f64 - cy);
            let (sx, sy) = match mode {
                // Screen counter-clockwise is clockwise in y-down coordinates;
                // the inverse map turns the other way.
                WarpMode::Rotate => (c * x - s * y, s * x + c * y),
                WarpMode::Shear => (x - t * y, y),
            };
            out[r * w + col] = sample(img, h, w, sx + cx, sy + cy);
        }
    }
    Ok(out)
}
