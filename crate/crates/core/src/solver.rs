//! Confidence-weighted least-squares SE(2) alignment.
//!
//! Given weighted correspondences `(p_i, p_hat_i, S_i)`, the solver finds
//! the rotation `theta` and translation `t` minimizing
//! `sum_i S_i * ||R p_i + t - p_hat_i||^2`. Two independent routes produce
//! the rotation:
//!
//! - [`solve_pose`] reduces the problem to the weighted cross-covariance
//!   `H = sum_i S_i q_i q_hat_i^T` of centroid-centered points,
//!   factorizes `H = U Λ V^T`, and takes
//!   `R = V diag(1, det(V U^T)) U^T`, which keeps `det(R) = +1` even for
//!   reflective configurations.
//! - [`solve_pose_closed_form`] maximizes the same trace objective
//!   directly in the angle: `theta = atan2(B, A)` with
//!   `A = sum_i S_i <q_i, q_hat_i>` and
//!   `B = sum_i S_i (q_ix q_hat_iy - q_iy q_hat_ix)`.
//!
//! Both use weight-aware centroids, under which the cross terms of the
//! centroid reduction vanish identically; `t = g_hat - R g`. The closed
//! form also yields compact analytic gradients of `(theta, t)` with
//! respect to every point coordinate and weight ([`pose_gradients`]),
//! including the dependence through the centroids.
//!
//! Reductions over matches run in index order, so results are
//! bit-reproducible and zero-weight matches are exactly inert.

use std::path::Path;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::flow::FlowField;
use crate::geometry::Se2Pose;
use crate::{Error, Result};

/// Spread below which the rotation is considered indeterminate (px).
const MIN_SPREAD: f64 = 1e-9;
/// Magnitude of (A, B) below which the optimal angle is indeterminate.
const MIN_CONDITIONING: f64 = 1e-9;

/// Weighted point correspondences between BEV pixels (`p_src`) and
/// satellite pixels (`p_dst`).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    p_src: Vec<[f64; 2]>,
    p_dst: Vec<[f64; 2]>,
    weights: Vec<f64>,
}

impl MatchSet {
    /// Validates congruent lengths, finite coordinates, and finite
    /// non-negative weights.
    pub fn new(p_src: Vec<[f64; 2]>, p_dst: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Self> {
        if p_src.len() != p_dst.len() || p_src.len() != weights.len() {
            return Err(Error::Shape(format!(
                "match set arrays disagree: {} src, {} dst, {} weights",
                p_src.len(),
                p_dst.len(),
                weights.len()
            )));
        }
        for (i, (s, d)) in p_src.iter().zip(&p_dst).enumerate() {
            if !(s[0].is_finite() && s[1].is_finite() && d[0].is_finite() && d[1].is_finite()) {
                return Err(Error::Invalid(format!("non-finite coordinates at match {i}")));
            }
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Invalid(format!(
                    "weight {w} at match {i} is not finite and non-negative"
                )));
            }
        }
        Ok(MatchSet {
            p_src,
            p_dst,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.p_src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_src.is_empty()
    }

    pub fn p_src(&self) -> &[[f64; 2]] {
        &self.p_src
    }

    pub fn p_dst(&self) -> &[[f64; 2]] {
        &self.p_dst
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// One match per flow cell: `p_src` is the cell coordinate, `p_dst` its
/// flow endpoint, and the weight is `visibility * score`.
pub fn flow_to_matches(flow: &FlowField) -> MatchSet {
    let (h, w) = (flow.height(), flow.width());
    let mut p_src = Vec::with_capacity(h * w);
    let mut p_dst = Vec::with_capacity(h * w);
    let mut weights = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let p = [col as f64, row as f64];
            let visible = flow.is_visible(row, col);
            let f = if visible { flow.flow_at(row, col) } else { [0.0, 0.0] };
            p_src.push(p);
            p_dst.push([p[0] + f[0], p[1] + f[1]]);
            weights.push(if visible { flow.score_at(row, col) } else { 0.0 });
        }
    }
    MatchSet {
        p_src,
        p_dst,
        weights,
    }
}

/// Intermediate quantities of the alignment solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    /// Weighted centroid of the source points.
    pub centroid_src: [f64; 2],
    /// Weighted centroid of the destination points.
    pub centroid_dst: [f64; 2],
    /// Weighted cross-covariance `H` (row-major 2×2).
    pub cross_covariance: [[f64; 2]; 2],
    /// Singular values of `H`, descending.
    pub singular_values: [f64; 2],
    /// Weighted sum of squared residuals at the solution (px^2).
    pub residual: f64,
    /// True when the unconstrained optimum was a reflection and the
    /// determinant sign correction was applied.
    pub det_correction: bool,
}

/// Pose plus solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSolution {
    pub pose: Se2Pose,
    pub diagnostics: SolverDiagnostics,
}

/// Camera placement derived from an alignment pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Camera position in satellite pixels: `R * anchor + t`.
    pub position_px: [f64; 2],
    /// Camera position in meters.
    pub position_m: [f64; 2],
    /// Heading in degrees, in `(-180, 180]`.
    pub azimuth_deg: f64,
}

/// Full localization output.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub pose: Se2Pose,
    pub camera: CameraPose,
    pub diagnostics: SolverDiagnostics,
}

/// Places the camera on the satellite map: the BEV `anchor` is carried
/// through the pose, pixels convert to meters by `meters_per_pixel`, and
/// the azimuth is the pose angle in degrees.
pub fn camera_pose_from_alignment(
    pose: &Se2Pose,
    anchor: [f64; 2],
    meters_per_pixel: f64,
) -> CameraPose {
    let position_px = pose.apply(anchor);
    CameraPose {
        position_px,
        position_m: [
            position_px[0] * meters_per_pixel,
            position_px[1] * meters_per_pixel,
        ],
        azimuth_deg: pose.theta.to_degrees(),
    }
}

impl PoseSolution {
    /// Attaches camera placement for the given BEV anchor and map scale.
    pub fn into_localization(self, anchor: [f64; 2], meters_per_pixel: f64) -> LocalizationResult {
        let camera = camera_pose_from_alignment(&self.pose, anchor, meters_per_pixel);
        LocalizationResult {
            pose: self.pose,
            camera,
            diagnostics: self.diagnostics,
        }
    }
}

/// Weighted centroids and support checks shared by both solver routes.
struct Centered {
    sum_w: f64,
    g_src: [f64; 2],
    g_dst: [f64; 2],
}

fn center(m: &MatchSet) -> Result<Centered> {
    let mut sum_w = 0.0;
    let mut gs = [0.0, 0.0];
    let mut gd = [0.0, 0.0];
    for i in 0..m.len() {
        let w = m.weights[i];
        sum_w += w;
        gs[0] += w * m.p_src[i][0];
        gs[1] += w * m.p_src[i][1];
        gd[0] += w * m.p_dst[i][0];
        gd[1] += w * m.p_dst[i][1];
    }
    if !(sum_w > 0.0) {
        return Err(Error::NoSupport);
    }
    let g_src = [gs[0] / sum_w, gs[1] / sum_w];
    let g_dst = [gd[0] / sum_w, gd[1] / sum_w];

    let mut spread = 0.0f64;
    for i in 0..m.len() {
        if m.weights[i] > 0.0 {
            let dx = m.p_src[i][0] - g_src[0];
            let dy = m.p_src[i][1] - g_src[1];
            spread = spread.max(dx.hypot(dy));
        }
    }
    if spread <= MIN_SPREAD {
        return Err(Error::RotationIndeterminate(format!(
            "weight-supported source points are coincident (spread {spread:.3e} px)"
        )));
    }
    Ok(Centered { sum_w, g_src, g_dst })
}

fn finish(
    m: &MatchSet,
    c: &Centered,
    theta: f64,
    h: [[f64; 2]; 2],
    singular_values: [f64; 2],
    det_correction: bool,
) -> PoseSolution {
    let (s, co) = (theta.sin(), theta.cos());
    let t = [
        c.g_dst[0] - (co * c.g_src[0] - s * c.g_src[1]),
        c.g_dst[1] - (s * c.g_src[0] + co * c.g_src[1]),
    ];
    let mut residual = 0.0;
    for i in 0..m.len() {
        let p = m.p_src[i];
        let rx = co * p[0] - s * p[1] + t[0] - m.p_dst[i][0];
        let ry = s * p[0] + co * p[1] + t[1] - m.p_dst[i][1];
        residual += m.weights[i] * (rx * rx + ry * ry);
    }
    PoseSolution {
        pose: Se2Pose::new(theta, t[0], t[1]),
        diagnostics: SolverDiagnostics {
            centroid_src: c.g_src,
            centroid_dst: c.g_dst,
            cross_covariance: h,
            singular_values,
            residual,
            det_correction,
        },
    }
}

/// Solves the weighted alignment via SVD of the cross-covariance.
///
/// Fails with [`Error::NoSupport`] when all weights are zero, and with
/// [`Error::RotationIndeterminate`] when the supported source points are
/// coincident or the trace objective is flat in the angle.
pub fn solve_pose(m: &MatchSet) -> Result<PoseSolution> {
    let c = center(m)?;
    let mut h = [[0.0f64; 2]; 2];
    for i in 0..m.len() {
        let w = m.weights[i];
        let q = [m.p_src[i][0] - c.g_src[0], m.p_src[i][1] - c.g_src[1]];
        let qh = [m.p_dst[i][0] - c.g_dst[0], m.p_dst[i][1] - c.g_dst[1]];
        h[0][0] += w * q[0] * qh[0];
        h[0][1] += w * q[0] * qh[1];
        h[1][0] += w * q[1] * qh[0];
        h[1][1] += w * q[1] * qh[1];
    }
    // Flatness of the trace objective: tr(R(θ)H) = A cos θ + B sin θ.
    let a = h[0][0] + h[1][1];
    let b = h[0][1] - h[1][0];
    if a.hypot(b) <= MIN_CONDITIONING {
        return Err(Error::RotationIndeterminate(format!(
            "trace objective is flat in the angle (|(A,B)| = {:.3e})",
            a.hypot(b)
        )));
    }

    let hm = Matrix2::new(h[0][0], h[0][1], h[1][0], h[1][1]);
    let svd = hm.svd(true, true);
    let mut u = svd.u.expect("requested U");
    let mut v_t = svd.v_t.expect("requested V^T");
    let mut sv = [svd.singular_values[0], svd.singular_values[1]];
    if sv[0] < sv[1] {
        sv.swap(0, 1);
        u = u * Matrix2::new(0.0, 1.0, 1.0, 0.0);
        v_t = Matrix2::new(0.0, 1.0, 1.0, 0.0) * v_t;
    }
    let det_vu = (v_t.transpose() * u.transpose()).determinant();
    let det_correction = det_vu < 0.0;
    let sign = if det_correction { -1.0 } else { 1.0 };
    let r = v_t.transpose() * Matrix2::new(1.0, 0.0, 0.0, sign) * u.transpose();
    let theta = r[(1, 0)].atan2(r[(0, 0)]);

    Ok(finish(m, &c, theta, h, sv, det_correction))
}

/// Singular values of a 2×2 matrix, descending, by the direct formula.
fn singular_values_2x2(h: &[[f64; 2]; 2]) -> [f64; 2] {
    let (a, b, c, d) = (h[0][0], h[0][1], h[1][0], h[1][1]);
    let q1 = (a + d).hypot(b - c);
    let q2 = (a - d).hypot(b + c);
    [(q1 + q2) / 2.0, (q1 - q2).abs() / 2.0]
}

/// Solves the weighted alignment by the closed-form angle
/// `theta = atan2(B, A)`; contract identical to [`solve_pose`].
pub fn solve_pose_closed_form(m: &MatchSet) -> Result<PoseSolution> {
    let c = center(m)?;
    let mut a = 0.0f64;
    let mut b = 0.0f64;
    let mut h = [[0.0f64; 2]; 2];
    for i in 0..m.len() {
        let w = m.weights[i];
        let q = [m.p_src[i][0] - c.g_src[0], m.p_src[i][1] - c.g_src[1]];
        let qh = [m.p_dst[i][0] - c.g_dst[0], m.p_dst[i][1] - c.g_dst[1]];
        a += w * (q[0] * qh[0] + q[1] * qh[1]);
        b += w * (q[0] * qh[1] - q[1] * qh[0]);
        h[0][0] += w * q[0] * qh[0];
        h[0][1] += w * q[0] * qh[1];
        h[1][0] += w * q[1] * qh[0];
        h[1][1] += w * q[1] * qh[1];
    }
    if a.hypot(b) <= MIN_CONDITIONING {
        return Err(Error::RotationIndeterminate(format!(
            "both atan2 arguments vanish (|(A,B)| = {:.3e})",
            a.hypot(b)
        )));
    }
    let theta = b.atan2(a);
    let det_h = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    Ok(finish(m, &c, theta, h, singular_values_2x2(&h), det_h < 0.0))
}

/// Partial derivatives of the optimal `(theta, t)` with respect to every
/// match coordinate and weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGradients {
    /// d theta / d p_src\[i\] = (d/dx, d/dy).
    pub theta_wrt_src: Vec<[f64; 2]>,
    /// d theta / d p_dst\[i\].
    pub theta_wrt_dst: Vec<[f64; 2]>,
    /// d theta / d S\[i\].
    pub theta_wrt_weight: Vec<f64>,
    /// d t\[k\] / d p_src\[i\]\[c\], indexed \[i\]\[k\]\[c\].
    pub t_wrt_src: Vec<[[f64; 2]; 2]>,
    /// d t\[k\] / d p_dst\[i\]\[c\], indexed \[i\]\[k\]\[c\].
    pub t_wrt_dst: Vec<[[f64; 2]; 2]>,
    /// d t\[k\] / d S\[i\], indexed \[i\]\[k\].
    pub t_wrt_weight: Vec<[f64; 2]>,
}

/// Differentiates the closed-form solution.
///
/// With weighted centroids the centered moments satisfy
/// `sum_i S_i q_i = sum_i S_i q_hat_i = 0`, which collapses the centroid
/// chain terms of `A` and `B` to zero; the remaining partials are
///
/// ```text
/// dA/dp_i    = S_i q_hat_i        dA/dp_hat_i = S_i q_i        dA/dS_i = <q_i, q_hat_i>
/// dB/dp_i    = S_i (q_hat_iy, -q_hat_ix)
/// dB/dp_hat_i= S_i (-q_iy, q_ix)
/// dB/dS_i    = q_ix q_hat_iy - q_iy q_hat_ix
/// dtheta     = (A dB - B dA) / (A^2 + B^2)
/// ```
///
/// and `t = g_hat - R g` differentiates through the centroids and the
/// angle.
pub fn pose_gradients(m: &MatchSet) -> Result<PoseGradients> {
    let c = center(m)?;
    let n = m.len();
    let mut a = 0.0f64;
    let mut b = 0.0f64;
    let mut q_src = Vec::with_capacity(n);
    let mut q_dst = Vec::with_capacity(n);
    for i in 0..n {
        let w = m.weights[i];
        let q = [m.p_src[i][0] - c.g_src[0], m.p_src[i][1] - c.g_src[1]];
        let qh = [m.p_dst[i][0] - c.g_dst[0], m.p_dst[i][1] - c.g_dst[1]];
        a += w * (q[0] * qh[0] + q[1] * qh[1]);
        b += w * (q[0] * qh[1] - q[1] * qh[0]);
        q_src.push(q);
        q_dst.push(qh);
    }
    let denom = a * a + b * b;
    if denom.sqrt() <= MIN_CONDITIONING {
        return Err(Error::IllConditioned(format!(
            "angle gradient denominator A^2 + B^2 = {denom:.3e} is too small"
        )));
    }
    let theta = b.atan2(a);
    let (s, co) = (theta.sin(), theta.cos());
    // dR/dtheta * g_src
    let rp_g = [
        -s * c.g_src[0] - co * c.g_src[1],
        co * c.g_src[0] - s * c.g_src[1],
    ];
    let inv_w = 1.0 / c.sum_w;

    let mut grads = PoseGradients {
        theta_wrt_src: Vec::with_capacity(n),
        theta_wrt_dst: Vec::with_capacity(n),
        theta_wrt_weight: Vec::with_capacity(n),
        t_wrt_src: Vec::with_capacity(n),
        t_wrt_dst: Vec::with_capacity(n),
        t_wrt_weight: Vec::with_capacity(n),
    };
    // Columns of R, for dt/dp_src.
    let r_col = [[co, s], [-s, co]];
    for i in 0..n {
        let w = m.weights[i];
        let q = q_src[i];
        let qh = q_dst[i];

        let da_src = [w * qh[0], w * qh[1]];
        let db_src = [w * qh[1], -w * qh[0]];
        let da_dst = [w * q[0], w * q[1]];
        let db_dst = [-w * q[1], w * q[0]];
        let da_w = q[0] * qh[0] + q[1] * qh[1];
        let db_w = q[0] * qh[1] - q[1] * qh[0];

        let th_src = [
            (a * db_src[0] - b * da_src[0]) / denom,
            (a * db_src[1] - b * da_src[1]) / denom,
        ];
        let th_dst = [
            (a * db_dst[0] - b * da_dst[0]) / denom,
            (a * db_dst[1] - b * da_dst[1]) / denom,
        ];
        let th_w = (a * db_w - b * da_w) / denom;

        // dt = dg_hat - R dg - (dR/dtheta g) dtheta
        let mut t_src = [[0.0; 2]; 2];
        let mut t_dst = [[0.0; 2]; 2];
        for comp in 0..2 {
            for coord in 0..2 {
                t_src[comp][coord] =
                    -w * inv_w * r_col[coord][comp] - rp_g[comp] * th_src[coord];
                let direct = if comp == coord { w * inv_w } else { 0.0 };
                t_dst[comp][coord] = direct - rp_g[comp] * th_dst[coord];
            }
        }
        let r_q = [co * q[0] - s * q[1], s * q[0] + co * q[1]];
        let t_w = [
            (qh[0] - r_q[0]) * inv_w - rp_g[0] * th_w,
            (qh[1] - r_q[1]) * inv_w - rp_g[1] * th_w,
        ];

        grads.theta_wrt_src.push(th_src);
        grads.theta_wrt_dst.push(th_dst);
        grads.theta_wrt_weight.push(th_w);
        grads.t_wrt_src.push(t_src);
        grads.t_wrt_dst.push(t_dst);
        grads.t_wrt_weight.push(t_w);
    }
    Ok(grads)
}

/// Writes matches as CSV with header `px,py,qx,qy,s`.
pub fn save_matches_csv(path: impl AsRef<Path>, m: &MatchSet) -> Result<()> {
    let mut text = String::from("px,py,qx,qy,s\n");
    for i in 0..m.len() {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            m.p_src[i][0], m.p_src[i][1], m.p_dst[i][0], m.p_dst[i][1], m.weights[i]
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a matches CSV (header `px,py,qx,qy,s`).
pub fn load_matches_csv(path: impl AsRef<Path>) -> Result<MatchSet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "px,py,qx,qy,s" => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                reason: format!("expected header `px,py,qx,qy,s`, got `{header}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                reason: "empty matches file".into(),
            })
        }
    }
    let mut p_src = Vec::new();
    let mut p_dst = Vec::new();
    let mut weights = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: idx + 1,
                reason: format!("expected 5 comma-separated values, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 5];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f.trim().parse().map_err(|_| Error::Parse {
                line: idx + 1,
                reason: format!("`{f}` is not a number"),
            })?;
        }
        p_src.push([vals[0], vals[1]]);
        p_dst.push([vals[2], vals[3]]);
        weights.push(vals[4]);
    }
    MatchSet::new(p_src, p_dst, weights)
}

/// JSON form of a localization result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseJson {
    pub theta_rad: f64,
    pub tu_px: f64,
    pub tv_px: f64,
    pub mpp: f64,
    pub azimuth_deg: f64,
    pub pos_m: [f64; 2],
    pub residual: f64,
}

impl PoseJson {
    pub fn from_localization(res: &LocalizationResult, meters_per_pixel: f64) -> Self {
        PoseJson {
            theta_rad: res.pose.theta,
            tu_px: res.pose.t[0],
            tv_px: res.pose.t[1],
            mpp: meters_per_pixel,
            azimuth_deg: res.camera.azimuth_deg,
            pos_m: res.camera.position_m,
            residual: res.diagnostics.residual,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            reason: e.to_string(),
        })
    }

    pub fn pose(&self) -> Se2Pose {
        Se2Pose::new(self.theta_rad, self.tu_px, self.tv_px)
    }
}
