//! Dense-tensor substrate: feature maps, convolution, pooling, bilinear
//! sampling, and the `CVFM` feature-map file format.
//!
//! All values are held as `f64` in memory; the binary formats store
//! float32. Every operation is a pure function with a fixed accumulation
//! order (row, then column, then channel), so results are bit-reproducible
//! regardless of threading.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::fileio::{Reader, Writer};
use crate::{Error, Result};

/// Dense H×W×C grid of real values in row-major (row, col, channel) order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    /// All-zero map.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height >= 1 && width >= 1 && channels >= 1, "empty map");
        FeatureMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Builds a map from row-major (row, col, channel) data.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height < 1 || width < 1 || channels < 1 {
            return Err(Error::Shape(format!(
                "feature map dims must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite feature value at flat index {i}"
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn idx(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.idx(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.idx(row, col, ch);
        self.data[i] = value;
    }

    /// Borrow of the channel vector at one cell.
    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    /// Same spatial/channel shape as `self`?
    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &FeatureMap) -> Result<FeatureMap> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "cannot add {}x{}x{} to {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Elementwise product; shapes must match.
    pub fn hadamard(&self, other: &FeatureMap) -> Result<FeatureMap> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{}x{} with {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }
}

/// Stacks maps along the channel axis; spatial sizes must agree.
pub fn concat_channels(maps: &[&FeatureMap]) -> Result<FeatureMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Shape("concat needs at least one map".into()))?;
    let (h, w) = (first.height, first.width);
    let mut channels = 0;
    for m in maps {
        if m.height != h || m.width != w {
            return Err(Error::Shape(format!(
                "concat spatial mismatch: {}x{} vs {}x{}",
                m.height, m.width, h, w
            )));
        }
        channels += m.channels;
    }
    let mut out = FeatureMap::zeros(h, w, channels);
    for row in 0..h {
        for col in 0..w {
            let mut ch = 0;
            for m in maps {
                for v in m.cell(row, col) {
                    out.set(row, col, ch, *v);
                    ch += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Per-cell (x, y) target coordinates for sampling, `height`×`width` cells.
///
/// Coordinates follow the pixel-center convention: coordinate `(c, r)`
/// addresses `data[r][c]` exactly. NaN coordinates are allowed and simply
/// sample as invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    height: usize,
    width: usize,
    coords: Vec<[f64; 2]>,
}

impl CoordGrid {
    pub fn from_vec(height: usize, width: usize, coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() != height * width {
            return Err(Error::Shape(format!(
                "coord grid {height}x{width} needs {} entries, got {}",
                height * width,
                coords.len()
            )));
        }
        Ok(CoordGrid {
            height,
            width,
            coords,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> [f64; 2] {
        self.coords[row * self.width + col]
    }
}

/// K×K×Cin×Cout convolution kernel, row-major (kr, kc, cin, cout).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    size: usize,
    in_channels: usize,
    out_channels: usize,
    data: Vec<f64>,
}

impl ConvKernel {
    pub fn from_vec(
        size: usize,
        in_channels: usize,
        out_channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if size < 1 || in_channels < 1 || out_channels < 1 {
            return Err(Error::Shape(format!(
                "kernel dims must be >= 1, got {size}x{size}x{in_channels}x{out_channels}"
            )));
        }
        if data.len() != size * size * in_channels * out_channels {
            return Err(Error::Shape(format!(
                "kernel {size}x{size}x{in_channels}x{out_channels} needs {} values, got {}",
                size * size * in_channels * out_channels,
                data.len()
            )));
        }
        Ok(ConvKernel {
            size,
            in_channels,
            out_channels,
            data,
        })
    }

    pub fn zeros(size: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvKernel {
            size,
            in_channels,
            out_channels,
            data: vec![0.0; size * size * in_channels * out_channels],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn get(&self, kr: usize, kc: usize, ci: usize, co: usize) -> f64 {
        self.data[((kr * self.size + kc) * self.in_channels + ci) * self.out_channels + co]
    }

    #[inline]
    pub fn set(&mut self, kr: usize, kc: usize, ci: usize, co: usize, value: f64) {
        let i = ((kr * self.size + kc) * self.in_channels + ci) * self.out_channels + co;
        self.data[i] = value;
    }
}

/// 2D cross-correlation (no kernel flip) with zero padding.
///
/// Output spatial size is `floor((H + 2*padding - K)/stride) + 1` per axis.
/// Accumulation per output cell runs over (kr, kc, cin) in that order.
pub fn conv2d(
    input: &FeatureMap,
    kernel: &ConvKernel,
    stride: usize,
    padding: usize,
    bias: Option<&[f64]>,
) -> Result<FeatureMap> {
    if kernel.in_channels != input.channels {
        return Err(Error::Shape(format!(
            "kernel expects {} input channels, feature map has {}",
            kernel.in_channels, input.channels
        )));
    }
    if stride < 1 {
        return Err(Error::Shape("stride must be >= 1".into()));
    }
    if let Some(b) = bias {
        if b.len() != kernel.out_channels {
            return Err(Error::Shape(format!(
                "bias has {} entries, kernel has {} output channels",
                b.len(),
                kernel.out_channels
            )));
        }
    }
    let out_h = conv_out_size(input.height, kernel.size, stride, padding)?;
    let out_w = conv_out_size(input.width, kernel.size, stride, padding)?;

    let mut out = FeatureMap::zeros(out_h, out_w, kernel.out_channels);
    for orow in 0..out_h {
        for ocol in 0..out_w {
            for co in 0..kernel.out_channels {
                let mut acc = 0.0f64;
                for kr in 0..kernel.size {
                    let irow = (orow * stride + kr) as isize - padding as isize;
                    if irow < 0 || irow >= input.height as isize {
                        continue;
                    }
                    for kc in 0..kernel.size {
                        let icol = (ocol * stride + kc) as isize - padding as isize;
                        if icol < 0 || icol >= input.width as isize {
                            continue;
                        }
                        let cell = input.cell(irow as usize, icol as usize);
                        for (ci, &v) in cell.iter().enumerate() {
                            acc += v * kernel.get(kr, kc, ci, co);
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b[co];
                }
                out.set(orow, ocol, co, acc);
            }
        }
    }
    Ok(out)
}

fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input as isize + 2 * padding as isize;
    let span = padded - kernel as isize;
    if span < 0 {
        return Err(Error::Geometry(format!(
            "kernel size {kernel} exceeds padded extent {padded}; output would be empty"
        )));
    }
    Ok((span / stride as isize) as usize + 1)
}

/// 2×2 average pooling over the spatial dimensions.
///
/// Odd heights/widths are replication-padded by one row/column on the
/// bottom/right before pooling, so the output is `ceil(H/2) x ceil(W/2)`.
pub fn avg_pool2x2(input: &FeatureMap) -> FeatureMap {
    let out_h = input.height.div_ceil(2);
    let out_w = input.width.div_ceil(2);
    let clamp_r = input.height - 1;
    let clamp_c = input.width - 1;
    let mut out = FeatureMap::zeros(out_h, out_w, input.channels);
    for orow in 0..out_h {
        let r0 = 2 * orow;
        let r1 = (2 * orow + 1).min(clamp_r);
        for ocol in 0..out_w {
            let c0 = 2 * ocol;
            let c1 = (2 * ocol + 1).min(clamp_c);
            for ch in 0..input.channels {
                let sum = input.get(r0, c0, ch)
                    + input.get(r0, c1, ch)
                    + input.get(r1, c0, ch)
                    + input.get(r1, c1, ch);
                out.set(orow, ocol, ch, sum * 0.25);
            }
        }
    }
    out
}

/// Bilinear sampling of `input` at the coordinates in `grid`.
///
/// Validity is 1 exactly when the sample point lies inside
/// `[0, W-1] x [0, H-1]` (so that all four interpolation neighbors exist);
/// invalid cells hold 0 in every channel. Integer coordinates reproduce
/// input values exactly.
pub fn bilinear_sample(input: &FeatureMap, grid: &CoordGrid) -> (FeatureMap, Vec<u8>) {
    let mut out = FeatureMap::zeros(grid.height, grid.width, input.channels);
    let mut validity = vec![0u8; grid.height * grid.width];
    for row in 0..grid.height {
        for col in 0..grid.width {
            let [x, y] = grid.at(row, col);
            if !in_sample_bounds(x, y, input.width, input.height) {
                continue;
            }
            validity[row * grid.width + col] = 1;
            let (c0, fx) = split_coord(x, input.width);
            let (r0, fy) = split_coord(y, input.height);
            let c1 = (c0 + 1).min(input.width - 1);
            let r1 = (r0 + 1).min(input.height - 1);
            for ch in 0..input.channels {
                let v00 = input.get(r0, c0, ch);
                let v01 = input.get(r0, c1, ch);
                let v10 = input.get(r1, c0, ch);
                let v11 = input.get(r1, c1, ch);
                let top = (1.0 - fx) * v00 + fx * v01;
                let bot = (1.0 - fx) * v10 + fx * v11;
                out.set(row, col, ch, (1.0 - fy) * top + fy * bot);
            }
        }
    }
    (out, validity)
}

#[inline]
pub(crate) fn in_sample_bounds(x: f64, y: f64, width: usize, height: usize) -> bool {
    x.is_finite()
        && y.is_finite()
        && x >= 0.0
        && y >= 0.0
        && x <= (width - 1) as f64
        && y <= (height - 1) as f64
}

/// Splits an in-bounds coordinate into a base index in `[0, n-2]` and a
/// fraction in `[0, 1]`, keeping lattice points exact at the far edge.
#[inline]
pub(crate) fn split_coord(v: f64, n: usize) -> (usize, f64) {
    let max_base = n.saturating_sub(2);
    let base = (v.floor() as usize).min(max_base);
    (base, v - base as f64)
}

/// Writes a feature map as a `CVFM` file (float32 little-endian).
pub fn save_feature_map(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(b"CVFM")?;
    w.u16(1)?;
    w.u32(map.height as u32)?;
    w.u32(map.width as u32)?;
    w.u32(map.channels as u32)?;
    w.f32_slice(&map.data)?;
    w.finish()
}

/// Reads a `CVFM` feature-map file.
pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(b"CVFM")?;
    let version = r.u16()?;
    if version != 1 {
        return Err(r.fail(format!("unsupported CVFM version {version}")));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    if h < 1 || w < 1 || c < 1 {
        return Err(r.fail(format!("degenerate CVFM dims {h}x{w}x{c}")));
    }
    let data = r.f32_vec(h * w * c)?;
    r.expect_eof()?;
    FeatureMap::from_vec(h, w, c, data)
}
