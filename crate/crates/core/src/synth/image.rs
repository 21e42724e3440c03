//! Intensity images, depth maps and their file formats.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::raster::{Grid, Mask};

use super::SynthError;

/// Coordinates this far outside the image still sample the border; it
/// absorbs rounding in exact round trips such as identity rectification.
pub const BORDER_TOLERANCE: f64 = 1e-9;

pub(crate) fn samplable(width: usize, height: usize, u: f64, v: f64) -> bool {
    let t = BORDER_TOLERANCE;
    u >= -t && v >= -t && u <= (width - 1) as f64 + t && v <= (height - 1) as f64 + t
}

/// Interleaved intensities in `[0, 1]`, one or three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self, SynthError> {
        Self::from_vec(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, SynthError> {
        if width == 0 || height == 0 {
            return Err(SynthError::InvalidImage(format!("size {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(SynthError::InvalidImage(format!(
                "{channels} channels, expected 1 or 3"
            )));
        }
        if data.len() != width * height * channels {
            return Err(SynthError::InvalidImage(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SynthError::InvalidImage(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Single-channel image from `f(x, y)`, clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Clamps `value` into `[0, 1]`.
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value.clamp(0.0, 1.0);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
    }

    /// Mean over channels.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Whether `(u, v)` can be sampled without clamping by more than
    /// [`BORDER_TOLERANCE`].
    pub fn contains(&self, u: f64, v: f64) -> bool {
        samplable(self.width, self.height, u, v)
    }

    /// Bilinear sample with its derivatives along u and v. Coordinates that
    /// would need clamping return `None`.
    pub fn sample_with_gradient(&self, u: f64, v: f64, c: usize) -> Option<(f64, f64, f64)> {
        if !self.contains(u, v) {
            return None;
        }
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let a = u - x0 as f64;
        let b = v - y0 as f64;
        let i00 = self.get(x0, y0, c);
        let i10 = self.get(x1, y0, c);
        let i01 = self.get(x0, y1, c);
        let i11 = self.get(x1, y1, c);
        let top = i00 + a * (i10 - i00);
        let bottom = i01 + a * (i11 - i01);
        let value = top + b * (bottom - top);
        let du = (1.0 - b) * (i10 - i00) + b * (i11 - i01);
        let dv = bottom - top;
        Some((value, du, dv))
    }

    pub fn sample(&self, u: f64, v: f64, c: usize) -> Option<f64> {
        self.sample_with_gradient(u, v, c).map(|s| s.0)
    }

    /// Binary PGM (one channel) or PPM (three channels), 8 bits.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self, SynthError> {
        let bad = |msg: &str| SynthError::Format(format!("PNM: {msg}"));
        let mut pos = 0;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
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
                return Err(bad("truncated header"));
            }
            tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let channels = match tokens[0] {
            "P5" => 1,
            "P6" => 3,
            other => return Err(bad(&format!("unsupported magic {other}"))),
        };
        let parse = |t: &str| t.parse::<usize>().map_err(|_| bad(&format!("bad number {t}")));
        let (width, height, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
        if maxval != 255 {
            return Err(bad(&format!("only 8-bit images are supported (maxval {maxval})")));
        }
        let n = width * height * channels;
        let raster = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated raster"))?;
        Self::from_vec(
            width,
            height,
            channels,
            raster.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn read(path: &Path) -> Result<Self, SynthError> {
        Self::from_pnm(&fs::read(path).map_err(|e| io_err(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<(), SynthError> {
        fs::write(path, self.to_pnm()).map_err(|e| io_err(path, e))
    }
}

/// Per-pixel distance along the viewing ray, meters. Zero marks pixels
/// without a depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    depth: Grid<f64>,
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

impl DepthMap {
    /// Non-finite or non-positive values are stored as invalid.
    pub fn from_vec(width: usize, height: usize, values: Vec<f64>) -> Result<Self, SynthError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(SynthError::InvalidImage(format!(
                "{} depth values for {width}x{height}",
                values.len()
            )));
        }
        let values = values
            .into_iter()
            .map(|d| if d.is_finite() && d > 0.0 { d } else { 0.0 })
            .collect();
        Ok(Self {
            depth: Grid::from_vec(width, height, values),
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Self {
        Self {
            depth: Grid::from_fn(width, height, |x, y| match f(x, y) {
                Some(d) if d.is_finite() && d > 0.0 => d,
                _ => 0.0,
            }),
        }
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let d = *self.depth.get(x, y);
        (d > 0.0).then_some(d)
    }

    pub fn valid_mask(&self) -> Mask {
        self.depth.map(|&d| d > 0.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.depth.len());
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for &d in self.depth.iter() {
            out.extend_from_slice(&(d as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SynthError> {
        let bad = |msg: String| SynthError::Format(format!("depth map: {msg}"));
        if bytes.len() < 16 || &bytes[..4] != DEPTH_MAGIC {
            return Err(bad("missing DPTH header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (width, height) = (word(4), word(8));
        let body = &bytes[16..];
        if body.len() != 4 * width * height {
            return Err(bad(format!("{} data bytes for {width}x{height}", body.len())));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Self::from_vec(width, height, values)
    }

    pub fn read(path: &Path) -> Result<Self, SynthError> {
        Self::from_bytes(&fs::read(path).map_err(|e| io_err(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<(), SynthError> {
        fs::write(path, self.to_bytes()).map_err(|e| io_err(path, e))
    }

    /// The same map after a round trip through the 32-bit file format.
    pub fn quantized(&self) -> DepthMap {
        DepthMap {
            depth: self.depth.map(|&d| f64::from(d as f32)),
        }
    }
}

/// Points with optional 8-bit colors.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<nalgebra::Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// ASCII PLY with `x y z` and, when present, `red green blue`.
    pub fn to_ply(&self) -> String {
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\n");
        out.push_str(&format!("element vertex {}\n", self.points.len()));
        out.push_str("property float x\nproperty float y\nproperty float z\n");
        if self.colors.is_some() {
            out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        }
        out.push_str("end_header\n");
        for (i, p) in self.points.iter().enumerate() {
            out.push_str(&format!("{} {} {}", p.x, p.y, p.z));
            if let Some(colors) = &self.colors {
                let [r, g, b] = colors[i];
                out.push_str(&format!(" {r} {g} {b}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_ply(&self, path: &Path) -> Result<(), SynthError> {
        let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        file.write_all(self.to_ply().as_bytes()).map_err(|e| io_err(path, e))
    }
}
