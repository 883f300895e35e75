//! Ground-truth flow generation and the three training losses with their
//! epoch schedules, computed as values for verification.
//!
//! Loss conventions: all losses are sums over cells, not means. The
//! confidence loss standardizes per-cell distances over the visible
//! population with an epsilon-guarded population standard deviation. The
//! position loss wraps its angular term to `(-pi, pi]`.

use serde::{Deserialize, Serialize};

use crate::flow::{FlowField, FlowTrace};
use crate::geometry::{wrap_angle, Se2Pose};
use crate::{Error, Result};

/// Epsilon guard for the distance standardization.
const STD_EPS: f64 = 1e-8;

/// Ground-truth flow induced by a pose: per visible cell `p`, the flow is
/// `(R p + t) - p` with score 1. Cells whose target falls outside the
/// satellite map bounds (`sat_size` as height × width) are additionally
/// marked invisible.
pub fn gt_flow(
    pose: &Se2Pose,
    grid_size: (usize, usize),
    sat_size: (usize, usize),
    visibility: &[u8],
) -> Result<FlowField> {
    let (h, w) = grid_size;
    if visibility.len() != h * w {
        return Err(Error::Shape(format!(
            "visibility has {} entries for a {h}x{w} grid",
            visibility.len()
        )));
    }
    let (sat_h, sat_w) = sat_size;
    let mut flow = vec![[0.0f64; 2]; h * w];
    let mut score = vec![0.0f64; h * w];
    let mut vis = vec![0u8; h * w];
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            if visibility[i] == 0 {
                continue;
            }
            let p = [col as f64, row as f64];
            let target = pose.apply(p);
            let inside = target[0] >= 0.0
                && target[1] >= 0.0
                && target[0] <= (sat_w - 1) as f64
                && target[1] <= (sat_h - 1) as f64;
            if !inside {
                continue;
            }
            flow[i] = [target[0] - p[0], target[1] - p[1]];
            score[i] = 1.0;
            vis[i] = 1;
        }
    }
    FlowField::from_parts(h, w, flow, score, vis)
}

/// L1 matching loss: sum over jointly-visible cells of
/// `|fx_gt - fx_pred| + |fy_gt - fy_pred|`.
pub fn matching_loss(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "flow shapes differ: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut loss = 0.0;
    for i in 0..pred.flow().len() {
        if pred.visibility()[i] == 0 || gt.visibility()[i] == 0 {
            continue;
        }
        let a = pred.flow()[i];
        let b = gt.flow()[i];
        loss += (b[0] - a[0]).abs() + (b[1] - a[1]).abs();
    }
    Ok(loss)
}

/// Confidence loss over visible cells.
///
/// Distances are standardized to `d~ = (d - mean) / max(std, 1e-8)` with
/// the population standard deviation; each cell then contributes
/// `| S / (1 + exp(-d~/kappa)) + (1 - S) / (1 + exp(d~/kappa)) |`.
/// `scores` and `distances` hold the visible cells only; at least two are
/// required for the standardization to be defined.
pub fn confidence_loss(scores: &[f64], distances: &[f64], kappa: f64) -> Result<f64> {
    if scores.len() != distances.len() {
        return Err(Error::Shape(format!(
            "scores ({}) and distances ({}) disagree",
            scores.len(),
            distances.len()
        )));
    }
    if scores.len() < 2 {
        return Err(Error::Degenerate(format!(
            "confidence loss needs at least 2 visible cells, got {}",
            scores.len()
        )));
    }
    if !(kappa > 0.0) {
        return Err(Error::Invalid(format!("kappa must be positive, got {kappa}")));
    }
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let var = distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_EPS);

    let mut loss = 0.0;
    for (&s, &d) in scores.iter().zip(distances) {
        let dn = (d - mean) / std;
        let term = s / (1.0 + (-dn / kappa).exp()) + (1.0 - s) / (1.0 + (dn / kappa).exp());
        loss += term.abs();
    }
    Ok(loss)
}

/// Position loss: wrapped absolute angle difference plus L1 translation
/// difference, in pixels.
pub fn position_loss(pred: &Se2Pose, gt: &Se2Pose) -> f64 {
    wrap_angle(gt.theta - pred.theta).abs()
        + (gt.t[0] - pred.t[0]).abs()
        + (gt.t[1] - pred.t[1]).abs()
}

/// Loss weights as functions of the training epoch: `kappa` drops from
/// 200 to 20 and `beta` rises from 1 to 10 at the switch epoch; `alpha`
/// stays constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub alpha: f64,
    pub switch_epoch: usize,
    pub kappa_before: f64,
    pub kappa_after: f64,
    pub beta_before: f64,
    pub beta_after: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            alpha: 100.0,
            switch_epoch: 15,
            kappa_before: 200.0,
            kappa_after: 20.0,
            beta_before: 1.0,
            beta_after: 10.0,
        }
    }
}

impl TrainSchedule {
    pub fn kappa(&self, epoch: usize) -> f64 {
        if epoch < self.switch_epoch {
            self.kappa_before
        } else {
            self.kappa_after
        }
    }

    pub fn beta(&self, epoch: usize) -> f64 {
        if epoch < self.switch_epoch {
            self.beta_before
        } else {
            self.beta_after
        }
    }
}

/// Every component of the total loss, with the parameters that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Per-iteration (matching, confidence) losses.
    pub per_iteration: Vec<(f64, f64)>,
    pub position: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl LossReport {
    /// Recomputes the total from the stored components; the stored total
    /// must equal this exactly.
    pub fn recompute_total(&self) -> f64 {
        let mut total = self.beta * self.position;
        for &(l_m, l_c) in &self.per_iteration {
            total += l_m + self.alpha * l_c;
        }
        total
    }
}

/// Total loss over a flow trace:
/// `beta * L_p + sum_l (L_m^l + alpha * L_c^l)`, with `beta` and `kappa`
/// selected from the schedule by epoch.
///
/// The per-cell distances feeding the confidence loss at iteration `l`
/// are that iterate's L1 flow errors against the ground truth, over
/// jointly-visible cells.
pub fn total_loss(
    trace: &FlowTrace,
    gt: &FlowField,
    pose_pred: &Se2Pose,
    pose_gt: &Se2Pose,
    schedule: &TrainSchedule,
    epoch: usize,
) -> Result<LossReport> {
    let kappa = schedule.kappa(epoch);
    let beta = schedule.beta(epoch);
    let mut per_iteration = Vec::with_capacity(trace.len());
    for iterate in trace.iterations() {
        let l_m = matching_loss(iterate, gt)?;
        let mut scores = Vec::new();
        let mut distances = Vec::new();
        for i in 0..iterate.flow().len() {
            if iterate.visibility()[i] == 0 || gt.visibility()[i] == 0 {
                continue;
            }
            let a = iterate.flow()[i];
            let b = gt.flow()[i];
            scores.push(iterate.scores()[i]);
            distances.push((b[0] - a[0]).abs() + (b[1] - a[1]).abs());
        }
        let l_c = confidence_loss(&scores, &distances, kappa)?;
        per_iteration.push((l_m, l_c));
    }
    let position = position_loss(pose_pred, pose_gt);
    let mut total = beta * position;
    for &(l_m, l_c) in &per_iteration {
        total += l_m + schedule.alpha * l_c;
    }
    Ok(LossReport {
        per_iteration,
        position,
        total,
        alpha: schedule.alpha,
        beta,
        kappa,
    })
}
