//! All-pairs similarity volumes between two feature maps, pooled pyramids
//! over the target dimensions, and windowed lookup around match estimates.
//!
//! The level-0 volume holds `vol[i,j,k,l] = <f1[i,j,:], f2[k,l,:]> / sqrt(C)`
//! for every source cell `(i,j)` and target cell `(k,l)`. Volumes are
//! materialized densely; construction parallelizes over source cells with
//! a fixed per-cell reduction order, so results do not depend on thread
//! count.

use rayon::prelude::*;

use crate::tensor::{in_sample_bounds, split_coord, CoordGrid, FeatureMap};
use crate::{Error, Result};

/// Default number of pyramid levels.
pub const DEFAULT_NUM_LEVELS: usize = 4;
/// Default lookup window radius.
pub const DEFAULT_RADIUS: usize = 4;

/// Dense 4D similarity volume with shape (src_h, src_w, tgt_h, tgt_w).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVolume {
    src_h: usize,
    src_w: usize,
    tgt_h: usize,
    tgt_w: usize,
    data: Vec<f64>,
}

impl CorrelationVolume {
    pub fn src_shape(&self) -> (usize, usize) {
        (self.src_h, self.src_w)
    }

    pub fn tgt_shape(&self) -> (usize, usize) {
        (self.tgt_h, self.tgt_w)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[((i * self.src_w + j) * self.tgt_h + k) * self.tgt_w + l]
    }

    /// Contiguous (tgt_h × tgt_w) slice of similarities for one source cell.
    #[inline]
    pub fn target_slice(&self, i: usize, j: usize) -> &[f64] {
        let n = self.tgt_h * self.tgt_w;
        let base = (i * self.src_w + j) * n;
        &self.data[base..base + n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Level-0 volume plus successively 2×2 average-pooled copies over the
/// target dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPyramid {
    levels: Vec<CorrelationVolume>,
    /// Divisor applied to every dot product at construction.
    normalization: f64,
}

impl CorrelationPyramid {
    /// Builds the full pyramid from two feature maps.
    pub fn from_features(
        f1: &FeatureMap,
        f2: &FeatureMap,
        num_levels: usize,
    ) -> Result<CorrelationPyramid> {
        let norm = (f1.channels() as f64).sqrt();
        let mut pyr = build_pyramid(build_correlation(f1, f2)?, num_levels)?;
        pyr.normalization = norm;
        Ok(pyr)
    }

    pub fn levels(&self) -> &[CorrelationVolume] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &CorrelationVolume {
        &self.levels[k]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn src_shape(&self) -> (usize, usize) {
        self.levels[0].src_shape()
    }
}

/// Builds the level-0 correlation volume between `f1` (source) and `f2`
/// (target): channel dot products divided by `sqrt(C)`.
pub fn build_correlation(f1: &FeatureMap, f2: &FeatureMap) -> Result<CorrelationVolume> {
    if f1.channels() != f2.channels() {
        return Err(Error::Shape(format!(
            "correlation needs equal channel counts, got {} and {}",
            f1.channels(),
            f2.channels()
        )));
    }
    let (src_h, src_w) = (f1.height(), f1.width());
    let (tgt_h, tgt_w) = (f2.height(), f2.width());
    let channels = f1.channels();
    let tgt_n = tgt_h * tgt_w;
    let inv_norm = 1.0 / (channels as f64).sqrt();

    // Channel-major copy of the target: per channel one contiguous plane,
    // so the accumulation below runs as stride-1 axpy sweeps. Each output
    // entry still receives its channel contributions in channel order, so
    // results are bit-identical to the direct per-cell dot product.
    let mut planes = vec![0.0f64; channels * tgt_n];
    for k in 0..tgt_h {
        for l in 0..tgt_w {
            let cell = f2.cell(k, l);
            for (ch, &v) in cell.iter().enumerate() {
                planes[ch * tgt_n + k * tgt_w + l] = v;
            }
        }
    }

    let mut data = vec![0.0f64; src_h * src_w * tgt_n];
    data.par_chunks_mut(tgt_n).enumerate().for_each(|(cell, out)| {
        let (i, j) = (cell / src_w, cell % src_w);
        let src = f1.cell(i, j);
        for (ch, &s) in src.iter().enumerate() {
            let plane = &planes[ch * tgt_n..(ch + 1) * tgt_n];
            for (o, &p) in out.iter_mut().zip(plane) {
                *o += s * p;
            }
        }
        for o in out.iter_mut() {
            *o *= inv_norm;
        }
    });
    Ok(CorrelationVolume {
        src_h,
        src_w,
        tgt_h,
        tgt_w,
        data,
    })
}

/// 2×2 mean over an (h × w) slice with bottom/right replication padding
/// for odd extents; same rule as `tensor::avg_pool2x2`.
fn pool_slice(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    let out_h = h.div_ceil(2);
    let out_w = w.div_ceil(2);
    for orow in 0..out_h {
        let r0 = 2 * orow;
        let r1 = (2 * orow + 1).min(h - 1);
        for ocol in 0..out_w {
            let c0 = 2 * ocol;
            let c1 = (2 * ocol + 1).min(w - 1);
            dst[orow * out_w + ocol] = (src[r0 * w + c0]
                + src[r0 * w + c1]
                + src[r1 * w + c0]
                + src[r1 * w + c1])
                * 0.25;
        }
    }
}

/// Stacks `num_levels` levels on top of `level0`, halving the target
/// dimensions by 2×2 average pooling at each step.
pub fn build_pyramid(level0: CorrelationVolume, num_levels: usize) -> Result<CorrelationPyramid> {
    if num_levels < 1 {
        return Err(Error::Shape("pyramid needs at least one level".into()));
    }
    let mut levels = Vec::with_capacity(num_levels);
    levels.push(level0);
    for _ in 1..num_levels {
        let prev = levels.last().unwrap();
        let (src_h, src_w) = prev.src_shape();
        let (h, w) = prev.tgt_shape();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut data = vec![0.0f64; src_h * src_w * oh * ow];
        data.par_chunks_mut(oh * ow).enumerate().for_each(|(cell, out)| {
            let (i, j) = (cell / src_w, cell % src_w);
            pool_slice(prev.target_slice(i, j), h, w, out);
        });
        levels.push(CorrelationVolume {
            src_h,
            src_w,
            tgt_h: oh,
            tgt_w: ow,
            data,
        });
    }
    Ok(CorrelationPyramid {
        levels,
        normalization: 1.0,
    })
}

/// Bilinear sample of one target slice with zero fill: positions whose
/// 2×2 neighborhood is not fully inside the slice read as 0.
#[inline]
fn sample_slice(slice: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    if !in_sample_bounds(x, y, w, h) {
        return 0.0;
    }
    let (c0, fx) = split_coord(x, w);
    let (r0, fy) = split_coord(y, h);
    let c1 = (c0 + 1).min(w - 1);
    let r1 = (r0 + 1).min(h - 1);
    let top = (1.0 - fx) * slice[r0 * w + c0] + fx * slice[r0 * w + c1];
    let bot = (1.0 - fx) * slice[r1 * w + c0] + fx * slice[r1 * w + c1];
    (1.0 - fy) * top + fy * bot
}

/// Samples every pyramid level in a `(2*radius+1)^2` window around
/// per-cell target coordinates.
///
/// For source cell `(i,j)` with coordinate `(x,y)`, level `k` is sampled
/// at `(x/2^k + dx, y/2^k + dy)` for every integer displacement
/// `(dx, dy)` in `[-radius, radius]^2`. Channels are ordered level-major,
/// then `dy`, then `dx`; out-of-bounds samples read 0.
pub fn lookup(pyr: &CorrelationPyramid, coords: &CoordGrid, radius: usize) -> Result<FeatureMap> {
    let (src_h, src_w) = pyr.src_shape();
    if coords.height() != src_h || coords.width() != src_w {
        return Err(Error::Shape(format!(
            "coords {}x{} do not match correlation source {}x{}",
            coords.height(),
            coords.width(),
            src_h,
            src_w
        )));
    }
    let window = 2 * radius + 1;
    let channels = pyr.num_levels() * window * window;
    let mut out = FeatureMap::zeros(src_h, src_w, channels);
    for i in 0..src_h {
        for j in 0..src_w {
            let [x, y] = coords.at(i, j);
            let mut ch = 0;
            for (k, level) in pyr.levels().iter().enumerate() {
                let (th, tw) = level.tgt_shape();
                let slice = level.target_slice(i, j);
                let scale = 1.0 / (1u64 << k) as f64;
                let (cx, cy) = (x * scale, y * scale);
                for dy in -(radius as isize)..=(radius as isize) {
                    for dx in -(radius as isize)..=(radius as isize) {
                        let v = sample_slice(slice, th, tw, cx + dx as f64, cy + dy as f64);
                        out.set(i, j, ch, v);
                        ch += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}
