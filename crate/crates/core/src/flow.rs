//! Iterative dense flow estimation between a BEV feature map and a
//! satellite feature map.
//!
//! A [`FlowField`] stores, per BEV cell `p = (x, y)`, the displacement to
//! its satellite correspondence (`p_hat = p + flow(p)`), a match score in
//! `[0, 1]`, and a visibility flag. Estimation builds a correlation
//! pyramid once and then applies an update operator for a fixed number of
//! iterations, recording every iterate. Two operators are provided:
//!
//! - [`ArgmaxOperator`] — a weight-free baseline that takes the level-0
//!   correlation argmax per cell, refines it to sub-pixel accuracy with a
//!   quadratic fit, and scores it by softmax peak mass. It needs no
//!   trained weights, so the full pipeline stays executable end to end.
//! - [`GruOperator`] — the forward pass of a convolutional gated
//!   recurrent unit whose weights (and channel configuration) come from a
//!   [`WeightStore`].
//!
//! Invisible cells are never touched by either operator.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;

use crate::correlation::{lookup, CorrelationPyramid};
use crate::fileio::{Reader, Writer};
use crate::tensor::{concat_channels, conv2d, ConvKernel, CoordGrid, FeatureMap};
use crate::weights::WeightStore;
use crate::{Error, Result};

/// Default number of update iterations.
pub const DEFAULT_ITERS: usize = 12;
/// Default softmax temperature for the argmax operator.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
/// Initial match score before any update has run.
pub const INITIAL_SCORE: f64 = 0.5;

/// Per-cell displacement, score, and visibility over a BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    flow: Vec<[f64; 2]>,
    score: Vec<f64>,
    visibility: Vec<u8>,
}

impl FlowField {
    /// Builds a field from raw per-cell arrays.
    ///
    /// Scores must lie in `[0, 1]`; flow must be finite wherever the cell
    /// is visible.
    pub fn from_parts(
        height: usize,
        width: usize,
        flow: Vec<[f64; 2]>,
        score: Vec<f64>,
        visibility: Vec<u8>,
    ) -> Result<Self> {
        let n = height * width;
        if flow.len() != n || score.len() != n || visibility.len() != n {
            return Err(Error::Shape(format!(
                "flow field {height}x{width} needs {n} entries, got flow {}, score {}, visibility {}",
                flow.len(),
                score.len(),
                visibility.len()
            )));
        }
        for i in 0..n {
            if !(0.0..=1.0).contains(&score[i]) {
                return Err(Error::Invalid(format!(
                    "score {} at cell {i} is outside [0, 1]",
                    score[i]
                )));
            }
            if visibility[i] != 0 && !(flow[i][0].is_finite() && flow[i][1].is_finite()) {
                return Err(Error::Invalid(format!("non-finite flow at visible cell {i}")));
            }
        }
        Ok(FlowField {
            height,
            width,
            flow,
            score,
            visibility,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn flow(&self) -> &[[f64; 2]] {
        &self.flow
    }

    pub fn scores(&self) -> &[f64] {
        &self.score
    }

    pub fn visibility(&self) -> &[u8] {
        &self.visibility
    }

    #[inline]
    pub fn flow_at(&self, row: usize, col: usize) -> [f64; 2] {
        self.flow[row * self.width + col]
    }

    #[inline]
    pub fn score_at(&self, row: usize, col: usize) -> f64 {
        self.score[row * self.width + col]
    }

    #[inline]
    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visibility[row * self.width + col] != 0
    }

    /// Current match coordinates `p + flow(p)` as a sampling grid.
    pub fn match_coords(&self) -> CoordGrid {
        let coords = (0..self.height * self.width)
            .map(|i| {
                let (r, c) = (i / self.width, i % self.width);
                [c as f64 + self.flow[i][0], r as f64 + self.flow[i][1]]
            })
            .collect();
        CoordGrid::from_vec(self.height, self.width, coords).expect("sizes agree")
    }

    /// Flow components as a 2-channel feature map (invisible cells read 0).
    pub fn flow_map(&self) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.height, self.width, 2);
        for i in 0..self.flow.len() {
            if self.visibility[i] == 0 {
                continue;
            }
            let (r, c) = (i / self.width, i % self.width);
            out.set(r, c, 0, self.flow[i][0]);
            out.set(r, c, 1, self.flow[i][1]);
        }
        out
    }
}

/// Zero flow, score 0.5, the given visibility.
pub fn init_flow(height: usize, width: usize, visibility: &[u8]) -> Result<FlowField> {
    let n = height * width;
    if visibility.len() != n {
        return Err(Error::Shape(format!(
            "visibility has {} entries for a {height}x{width} grid",
            visibility.len()
        )));
    }
    FlowField::from_parts(
        height,
        width,
        vec![[0.0, 0.0]; n],
        vec![INITIAL_SCORE; n],
        visibility.to_vec(),
    )
}

/// One flow field per update step, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    iterations: Vec<FlowField>,
}

impl FlowTrace {
    pub fn new(iterations: Vec<FlowField>) -> Result<Self> {
        if iterations.is_empty() {
            return Err(Error::Shape("flow trace cannot be empty".into()));
        }
        let (h, w) = (iterations[0].height, iterations[0].width);
        if iterations.iter().any(|f| f.height != h || f.width != w) {
            return Err(Error::Shape("flow trace entries disagree on shape".into()));
        }
        Ok(FlowTrace { iterations })
    }

    pub fn iterations(&self) -> &[FlowField] {
        &self.iterations
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn final_flow(&self) -> &FlowField {
        self.iterations.last().expect("trace is non-empty")
    }
}

/// One step of a flow update scheme.
pub trait UpdateOperator {
    fn update(&mut self, pyr: &CorrelationPyramid, flow: &FlowField) -> Result<FlowField>;

    /// True when one step already reaches the operator's fixed point
    /// (`update(update(f)) == update(f)` bit for bit), letting callers
    /// reuse the first iterate instead of recomputing identical ones.
    fn is_idempotent(&self) -> bool {
        false
    }
}

/// Weight-free matcher: per-cell level-0 argmax with quadratic sub-pixel
/// refinement; score is the softmax probability mass of the peak.
#[derive(Debug, Clone)]
pub struct ArgmaxOperator {
    pub temperature: f64,
}

impl Default for ArgmaxOperator {
    fn default() -> Self {
        ArgmaxOperator {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl UpdateOperator for ArgmaxOperator {
    fn update(&mut self, pyr: &CorrelationPyramid, flow: &FlowField) -> Result<FlowField> {
        argmax_update(pyr, flow, self.temperature)
    }

    fn is_idempotent(&self) -> bool {
        // The argmax is recomputed from the pyramid alone; the current
        // flow only passes through at invisible cells.
        true
    }
}

/// Sub-pixel offset of a quadratic through three samples around a peak,
/// clamped to half a pixel. Returns 0 for flat or border configurations.
fn quadratic_offset(before: f64, peak: f64, after: f64) -> f64 {
    let denom = 2.0 * (2.0 * peak - before - after);
    if denom <= 0.0 {
        return 0.0;
    }
    ((after - before) / denom).clamp(-0.5, 0.5)
}

/// One argmax update step: see [`ArgmaxOperator`].
pub fn argmax_update(
    pyr: &CorrelationPyramid,
    flow: &FlowField,
    temperature: f64,
) -> Result<FlowField> {
    let (src_h, src_w) = pyr.src_shape();
    if flow.height != src_h || flow.width != src_w {
        return Err(Error::Shape(format!(
            "flow {}x{} does not match correlation source {src_h}x{src_w}",
            flow.height, flow.width
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let level0 = pyr.level(0);
    let (tgt_h, tgt_w) = level0.tgt_shape();

    let results: Vec<Option<([f64; 2], f64)>> = (0..src_h * src_w)
        .into_par_iter()
        .map(|cell| {
            if flow.visibility[cell] == 0 {
                return None;
            }
            let (i, j) = (cell / src_w, cell % src_w);
            let slice = level0.target_slice(i, j);

            let mut best = 0usize;
            let mut best_v = slice[0];
            for (idx, &v) in slice.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = idx;
                }
            }
            let (pk, pl) = (best / tgt_w, best % tgt_w);

            let mut sum = 0.0f64;
            for &v in slice {
                sum += ((v - best_v) / temperature).exp();
            }
            let score = 1.0 / sum;

            let off_x = if pl > 0 && pl + 1 < tgt_w {
                quadratic_offset(slice[pk * tgt_w + pl - 1], best_v, slice[pk * tgt_w + pl + 1])
            } else {
                0.0
            };
            let off_y = if pk > 0 && pk + 1 < tgt_h {
                quadratic_offset(slice[(pk - 1) * tgt_w + pl], best_v, slice[(pk + 1) * tgt_w + pl])
            } else {
                0.0
            };

            let fx = pl as f64 + off_x - j as f64;
            let fy = pk as f64 + off_y - i as f64;
            Some(([fx, fy], score))
        })
        .collect();

    let mut out = flow.clone();
    for (cell, res) in results.into_iter().enumerate() {
        if let Some((f, s)) = res {
            out.flow[cell] = f;
            out.score[cell] = s;
        }
    }
    Ok(out)
}

/// Names and channel layout of a GRU weight set, inferred from the store.
#[derive(Debug, Clone, Copy)]
struct GruShapes {
    gate_kernel: usize,
    hidden_ch: usize,
    input_ch: usize,
    context_ch: usize,
    flow_kernel: usize,
    score_kernel: usize,
}

fn infer_gru_shapes(
    weights: &WeightStore,
    lookup_channels: usize,
) -> Result<GruShapes> {
    let convz = weights
        .shape("gru.convz.w")
        .ok_or_else(|| Error::MissingTensor("gru.convz.w".into()))?;
    if convz.len() != 4 || convz[0] != convz[1] || convz[0] % 2 == 0 {
        return Err(Error::Shape(format!(
            "gru.convz.w must be KxKxCinxCout with odd K, got {convz:?}"
        )));
    }
    let gate_kernel = convz[0];
    let hidden_ch = convz[3];
    let total_in = convz[2];
    if total_in <= hidden_ch {
        return Err(Error::Shape(format!(
            "gru.convz.w input channels {total_in} must exceed hidden channels {hidden_ch}"
        )));
    }
    let input_ch = total_in - hidden_ch;
    if input_ch < lookup_channels + 2 {
        return Err(Error::Shape(format!(
            "gru input channels {input_ch} cannot hold {lookup_channels} correlation channels plus 2 flow channels"
        )));
    }
    let context_ch = input_ch - lookup_channels - 2;

    let flow_shape = weights
        .shape("head.flow.w")
        .ok_or_else(|| Error::MissingTensor("head.flow.w".into()))?;
    if flow_shape.len() != 4
        || flow_shape[0] != flow_shape[1]
        || flow_shape[0] % 2 == 0
        || flow_shape[2] != hidden_ch
        || flow_shape[3] != 2
    {
        return Err(Error::Shape(format!(
            "head.flow.w must be KxKx{hidden_ch}x2 with odd K, got {flow_shape:?}"
        )));
    }
    let score_shape = weights
        .shape("head.score.w")
        .ok_or_else(|| Error::MissingTensor("head.score.w".into()))?;
    if score_shape.len() != 4
        || score_shape[0] != score_shape[1]
        || score_shape[0] % 2 == 0
        || score_shape[2] != hidden_ch
        || score_shape[3] != 1
    {
        return Err(Error::Shape(format!(
            "head.score.w must be KxKx{hidden_ch}x1 with odd K, got {score_shape:?}"
        )));
    }
    Ok(GruShapes {
        gate_kernel,
        hidden_ch,
        input_ch,
        context_ch,
        flow_kernel: flow_shape[0],
        score_kernel: score_shape[0],
    })
}

fn gru_conv(
    weights: &WeightStore,
    name: &str,
    input: &FeatureMap,
    kernel_size: usize,
    out_ch: usize,
) -> Result<FeatureMap> {
    let wname = format!("{name}.w");
    let bname = format!("{name}.b");
    let kdata = weights.get(&wname, &[kernel_size, kernel_size, input.channels(), out_ch])?;
    let bias = weights.get(&bname, &[out_ch])?;
    let kernel = ConvKernel::from_vec(kernel_size, input.channels(), out_ch, kdata.to_vec())?;
    conv2d(input, &kernel, 1, (kernel_size - 1) / 2, Some(bias))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One convolutional-GRU update step.
///
/// Input features are the concatenation of a correlation lookup around the
/// current match positions, the two flow channels, and an optional context
/// map. Gates `z` and `r` and the candidate state follow the standard GRU
/// equations; flow and score come from small convolution heads on the new
/// hidden state. Channel configuration is read from the weight shapes.
pub fn gru_update(
    pyr: &CorrelationPyramid,
    flow: &FlowField,
    hidden: &FeatureMap,
    context: Option<&FeatureMap>,
    weights: &WeightStore,
    radius: usize,
) -> Result<(FlowField, FeatureMap)> {
    let (src_h, src_w) = pyr.src_shape();
    if flow.height != src_h || flow.width != src_w {
        return Err(Error::Shape(format!(
            "flow {}x{} does not match correlation source {src_h}x{src_w}",
            flow.height, flow.width
        )));
    }
    let window = 2 * radius + 1;
    let lookup_ch = pyr.num_levels() * window * window;
    let shapes = infer_gru_shapes(weights, lookup_ch)?;

    if hidden.height() != src_h || hidden.width() != src_w || hidden.channels() != shapes.hidden_ch
    {
        return Err(Error::Shape(format!(
            "hidden state must be {src_h}x{src_w}x{}, got {}x{}x{}",
            shapes.hidden_ch,
            hidden.height(),
            hidden.width(),
            hidden.channels()
        )));
    }
    let corr = lookup(pyr, &flow.match_coords(), radius)?;
    let flow_map = flow.flow_map();
    let mut inputs: Vec<&FeatureMap> = vec![&corr, &flow_map];
    let zero_context;
    match context {
        Some(ctx) => {
            if ctx.height() != src_h
                || ctx.width() != src_w
                || ctx.channels() != shapes.context_ch
            {
                return Err(Error::Shape(format!(
                    "context must be {src_h}x{src_w}x{}, got {}x{}x{}",
                    shapes.context_ch,
                    ctx.height(),
                    ctx.width(),
                    ctx.channels()
                )));
            }
            inputs.push(ctx);
        }
        None if shapes.context_ch > 0 => {
            zero_context = FeatureMap::zeros(src_h, src_w, shapes.context_ch);
            inputs.push(&zero_context);
        }
        None => {}
    }
    let x = concat_channels(&inputs)?;
    debug_assert_eq!(x.channels(), shapes.input_ch);

    let hx = concat_channels(&[hidden, &x])?;
    let z = gru_conv(weights, "gru.convz", &hx, shapes.gate_kernel, shapes.hidden_ch)?
        .map(sigmoid);
    let r = gru_conv(weights, "gru.convr", &hx, shapes.gate_kernel, shapes.hidden_ch)?
        .map(sigmoid);
    let rh = r.hadamard(hidden)?;
    let rhx = concat_channels(&[&rh, &x])?;
    let candidate =
        gru_conv(weights, "gru.convh", &rhx, shapes.gate_kernel, shapes.hidden_ch)?.map(f64::tanh);

    // h' = (1 - z) ⊙ h + z ⊙ h~
    let keep = z.map(|v| 1.0 - v).hadamard(hidden)?;
    let new = z.hadamard(&candidate)?;
    let hidden_next = keep.add(&new)?;

    let delta = gru_conv(weights, "head.flow", &hidden_next, shapes.flow_kernel, 2)?;
    let score_logit = gru_conv(weights, "head.score", &hidden_next, shapes.score_kernel, 1)?;

    let mut out = flow.clone();
    for cell in 0..src_h * src_w {
        if out.visibility[cell] == 0 {
            continue;
        }
        let (i, j) = (cell / src_w, cell % src_w);
        out.flow[cell][0] += delta.get(i, j, 0);
        out.flow[cell][1] += delta.get(i, j, 1);
        out.score[cell] = sigmoid(score_logit.get(i, j, 0));
    }
    Ok((out, hidden_next))
}

/// GRU update operator holding its hidden state across iterations.
pub struct GruOperator<'a> {
    weights: &'a WeightStore,
    context: Option<&'a FeatureMap>,
    radius: usize,
    hidden: Option<FeatureMap>,
}

impl<'a> GruOperator<'a> {
    pub fn new(weights: &'a WeightStore, context: Option<&'a FeatureMap>, radius: usize) -> Self {
        GruOperator {
            weights,
            context,
            radius,
            hidden: None,
        }
    }

    pub fn hidden(&self) -> Option<&FeatureMap> {
        self.hidden.as_ref()
    }
}

impl UpdateOperator for GruOperator<'_> {
    fn update(&mut self, pyr: &CorrelationPyramid, flow: &FlowField) -> Result<FlowField> {
        let (src_h, src_w) = pyr.src_shape();
        if self.hidden.is_none() {
            let window = 2 * self.radius + 1;
            let lookup_ch = pyr.num_levels() * window * window;
            let shapes = infer_gru_shapes(self.weights, lookup_ch)?;
            self.hidden = Some(FeatureMap::zeros(src_h, src_w, shapes.hidden_ch));
        }
        let hidden = self.hidden.as_ref().expect("initialized above");
        let (next, hidden_next) =
            gru_update(pyr, flow, hidden, self.context, self.weights, self.radius)?;
        self.hidden = Some(hidden_next);
        Ok(next)
    }
}

/// Runs `iters` update steps from a zero-initialized flow, recording every
/// iterate. The correlation pyramid is built once up front.
pub fn estimate_flow(
    f_g2s: &FeatureMap,
    f_s: &FeatureMap,
    operator: &mut dyn UpdateOperator,
    iters: usize,
    visibility: &[u8],
    num_levels: usize,
) -> Result<FlowTrace> {
    if iters < 1 {
        return Err(Error::Shape("iteration count must be >= 1".into()));
    }
    let pyr = CorrelationPyramid::from_features(f_g2s, f_s, num_levels)?;
    let mut flow = init_flow(f_g2s.height(), f_g2s.width(), visibility)?;
    let mut iterations = Vec::with_capacity(iters);
    for step in 0..iters {
        if step > 0 && operator.is_idempotent() {
            iterations.push(flow.clone());
            continue;
        }
        flow = operator.update(&pyr, &flow)?;
        iterations.push(flow.clone());
    }
    FlowTrace::new(iterations)
}

/// Writes a flow field as a `CVFL` file: magic, u16 version = 1, u32 H and
/// W, then per cell four float32 values (fx, fy, score, visibility).
pub fn save_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(b"CVFL")?;
    w.u16(1)?;
    w.u32(flow.height as u32)?;
    w.u32(flow.width as u32)?;
    let mut cells = Vec::with_capacity(flow.flow.len() * 4);
    for i in 0..flow.flow.len() {
        cells.push(flow.flow[i][0]);
        cells.push(flow.flow[i][1]);
        cells.push(flow.score[i]);
        cells.push(flow.visibility[i] as f64);
    }
    w.f32_slice(&cells)?;
    w.finish()
}

/// Reads a `CVFL` flow file.
pub fn load_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(b"CVFL")?;
    let version = r.u16()?;
    if version != 1 {
        return Err(r.fail(format!("unsupported CVFL version {version}")));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if h < 1 || w < 1 {
        return Err(r.fail(format!("degenerate CVFL dims {h}x{w}")));
    }
    let raw = r.f32_vec(h * w * 4)?;
    r.expect_eof()?;
    let mut flow = Vec::with_capacity(h * w);
    let mut score = Vec::with_capacity(h * w);
    let mut visibility = Vec::with_capacity(h * w);
    for cell in raw.chunks_exact(4) {
        flow.push([cell[0], cell[1]]);
        score.push(cell[2]);
        visibility.push(if cell[3] != 0.0 { 1u8 } else { 0u8 });
    }
    FlowField::from_parts(h, w, flow, score, visibility)
}
