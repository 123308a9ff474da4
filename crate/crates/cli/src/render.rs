//! Fixed colormaps and PNG output.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use fmap_core::{FmapError, Result};

pub type Rgb = [u8; 3];

/// An RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn filled(width: usize, height: usize, c: Rgb) -> Self {
        Image {
            width,
            height,
            pixels: vec![c; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Rgb) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Image { width, height, pixels }
    }

    pub fn at(&self, y: usize, x: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, s: usize) -> Image {
        let s = s.max(1);
        Image::from_fn(self.width * s, self.height * s, |y, x| self.at(y / s, x / s))
    }

    /// Places `self` and `other` side by side with a white `gap`, top aligned.
    pub fn beside(&self, other: &Image, gap: usize) -> Image {
        let height = self.height.max(other.height);
        let width = self.width + gap + other.width;
        let mut out = Image::filled(width, height, [255, 255, 255]);
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixels[y * width + x] = self.at(y, x);
            }
        }
        for y in 0..other.height {
            for x in 0..other.width {
                out.pixels[y * width + self.width + gap + x] = other.at(y, x);
            }
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut out), self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| FmapError::Format(e.to_string()))?;
            let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
            w.write_image_data(&raw).map_err(|e| FmapError::Format(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| FmapError::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
        fmap_core::interchange::npy::write_atomic(path, &bytes)
    }
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    let mix = |i: usize| (a[i] as f64 + (b[i] as f64 - a[i] as f64) * t).round() as u8;
    [mix(0), mix(1), mix(2)]
}

fn piecewise(stops: &[Rgb], t: f64) -> Rgb {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let segs = stops.len() - 1;
    let pos = t * segs as f64;
    let i = (pos.floor() as usize).min(segs - 1);
    lerp(stops[i], stops[i + 1], pos - i as f64)
}

/// Blue, white, red over `t ∈ [0, 1]`.
pub fn diverging(t: f64) -> Rgb {
    piecewise(&[[59, 76, 192], [255, 255, 255], [180, 4, 38]], t)
}

/// Black through purple and orange to pale yellow over `t ∈ [0, 1]`.
pub fn heat(t: f64) -> Rgb {
    piecewise(
        &[[0, 0, 4], [81, 18, 124], [183, 55, 121], [252, 137, 97], [252, 253, 191]],
        t,
    )
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Color of a position on an `h × w` grid: hue from `x`, saturation from `y`.
pub fn coordinate_color(x: f64, y: f64, h: usize, w: usize) -> Rgb {
    let fx = if w > 1 { (x / (w - 1) as f64).clamp(0.0, 1.0) } else { 0.0 };
    let fy = if h > 1 { (y / (h - 1) as f64).clamp(0.0, 1.0) } else { 0.0 };
    hsv(fx * 5.0 / 6.0, 0.25 + 0.75 * fy, 1.0)
}

/// The coordinate legend of an `h × w` grid.
pub fn rainbow_legend(h: usize, w: usize) -> Image {
    Image::from_fn(w, h, |y, x| coordinate_color(x as f64, y as f64, h, w))
}

/// Colors every source node by the coordinates of its target under the flow.
pub fn rainbow(flow: &[[f64; 2]], h: usize, w: usize, tgt: (usize, usize)) -> Image {
    Image::from_fn(w, h, |y, x| {
        let v = flow[y * w + x];
        coordinate_color(x as f64 + v[0], y as f64 + v[1], tgt.0, tgt.1)
    })
}

/// Values mapped linearly from `[lo, hi]` onto a colormap.
pub fn scalar_image(values: &[f64], h: usize, w: usize, lo: f64, hi: f64, cmap: fn(f64) -> Rgb) -> Image {
    let span = hi - lo;
    Image::from_fn(w, h, |y, x| {
        let v = values[y * w + x];
        cmap(if span > 0.0 { (v - lo) / span } else { 1.0 })
    })
}

/// Signed values on the diverging map, symmetric around zero.
pub fn signed_image(values: &[f64], h: usize, w: usize) -> Image {
    let m = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    scalar_image(values, h, w, -m, m, diverging)
}

/// `|c_ij|` of a `rows × cols` matrix, zero at the cold end.
pub fn matrix_image(entries: &[f64], rows: usize, cols: usize) -> Image {
    let abs: Vec<f64> = entries.iter().map(|v| v.abs()).collect();
    let m = abs.iter().copied().fold(0.0, f64::max);
    scalar_image(&abs, rows, cols, 0.0, m, diverging)
}

pub fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}
