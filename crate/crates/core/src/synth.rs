//! Seeded synthetic oracles: weighted correspondence sets with noise and
//! outliers, and rigid planar scenes whose ground-truth pose the full
//! pipeline must recover.
//!
//! Randomness is counter-based: every trial derives its own ChaCha stream
//! from `(seed, trial)`, so trials are reproducible in isolation and
//! parallelize without coordination.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::flow::{estimate_flow, ArgmaxOperator};
use crate::geometry::Se2Pose;
use crate::solver::{flow_to_matches, solve_pose, MatchSet, PoseSolution};
use crate::tensor::{bilinear_sample, conv2d, ConvKernel, CoordGrid, FeatureMap};
use crate::{Error, Result};

/// Generator configuration; every quantity is in pixels or degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Number of matches for [`gen_matches`].
    pub n: usize,
    /// BEV grid side length for [`gen_scene`].
    pub grid_size: usize,
    /// Feature channels for [`gen_scene`].
    pub channels: usize,
    /// Satellite map side length for [`gen_scene`].
    pub sat_size: usize,
    /// Standard deviation of inlier destination noise (px).
    pub noise_sigma: f64,
    /// Fraction of matches replaced by outliers, in `[0, 1)`.
    pub outlier_fraction: f64,
    /// Rotation prior half-width (degrees).
    pub rot_range_deg: f64,
    /// Translation prior half-width (px).
    pub trans_range_px: f64,
    /// Extent of the source/outlier sampling window (px).
    pub patch_px: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n: 100,
            grid_size: 64,
            channels: 8,
            sat_size: 128,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            rot_range_deg: 10.0,
            trans_range_px: 12.0,
            patch_px: 500.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Invalid(format!(
                "outlier fraction must be in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        if self.rot_range_deg < 0.0 || self.trans_range_px < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Invalid(
                "ranges and noise sigma must be non-negative".into(),
            ));
        }
        if self.patch_px <= 0.0 {
            return Err(Error::Invalid("patch extent must be positive".into()));
        }
        Ok(())
    }
}

/// Per-trial RNG: one ChaCha stream per `(seed, trial)` pair.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn uniform_sym(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..half_width)
    } else {
        0.0
    }
}

/// Uniform pose within the configured priors, deterministic per
/// `(cfg.seed, trial)`.
pub fn gen_pose(cfg: &SynthConfig, trial: u64) -> Se2Pose {
    let mut rng = trial_rng(cfg.seed, trial);
    gen_pose_with(cfg, &mut rng)
}

fn gen_pose_with(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Se2Pose {
    let theta = uniform_sym(rng, cfg.rot_range_deg.to_radians());
    let tu = uniform_sym(rng, cfg.trans_range_px);
    let tv = uniform_sym(rng, cfg.trans_range_px);
    Se2Pose::new(theta, tu, tv)
}

/// Weighted correspondences following a ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthMatches {
    pub gt: Se2Pose,
    pub matches: MatchSet,
    /// True per match when it follows the ground-truth transform.
    pub inlier_mask: Vec<bool>,
}

impl SynthMatches {
    /// Copy of the matches with every outlier weight forced to zero.
    pub fn with_zeroed_outliers(&self) -> MatchSet {
        let weights = self
            .matches
            .weights()
            .iter()
            .zip(&self.inlier_mask)
            .map(|(&w, &inlier)| if inlier { w } else { 0.0 })
            .collect();
        MatchSet::new(
            self.matches.p_src().to_vec(),
            self.matches.p_dst().to_vec(),
            weights,
        )
        .expect("weights stay valid")
    }
}

/// Draws a pose and `cfg.n` correspondences: inliers follow the pose with
/// Gaussian destination noise and weights in `(0.5, 1]`; the trailing
/// `round(n * outlier_fraction)` entries are uniform outliers with
/// weights in `[0, 0.1)`.
pub fn gen_matches(cfg: &SynthConfig, trial: u64) -> Result<SynthMatches> {
    cfg.validate()?;
    if cfg.n < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 matches, got {}",
            cfg.n
        )));
    }
    let mut rng = trial_rng(cfg.seed, trial);
    let gt = gen_pose_with(cfg, &mut rng);
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).expect("sigma validated"))
    } else {
        None
    };
    let num_outliers = (cfg.n as f64 * cfg.outlier_fraction).round() as usize;
    let first_outlier = cfg.n - num_outliers;

    let mut p_src = Vec::with_capacity(cfg.n);
    let mut p_dst = Vec::with_capacity(cfg.n);
    let mut weights = Vec::with_capacity(cfg.n);
    let mut inlier_mask = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let src = [
            rng.random_range(0.0..cfg.patch_px),
            rng.random_range(0.0..cfg.patch_px),
        ];
        p_src.push(src);
        if i < first_outlier {
            let mut dst = gt.apply(src);
            if let Some(n) = &noise {
                dst[0] += n.sample(&mut rng);
                dst[1] += n.sample(&mut rng);
            }
            p_dst.push(dst);
            weights.push(1.0 - rng.random_range(0.0..0.5));
            inlier_mask.push(true);
        } else {
            p_dst.push([
                rng.random_range(0.0..cfg.patch_px),
                rng.random_range(0.0..cfg.patch_px),
            ]);
            weights.push(rng.random_range(0.0..0.1));
            inlier_mask.push(false);
        }
    }
    Ok(SynthMatches {
        gt,
        matches: MatchSet::new(p_src, p_dst, weights)?,
        inlier_mask,
    })
}

/// Low-pass filtered white noise, normalized per cell to norm `sqrt(C)`.
///
/// Three passes of a per-channel 5×5 binomial kernel make the field
/// smooth at the few-pixel scale, so a bilinearly interpolated query
/// vector is close to the true field value and its correlation with the
/// correct cell approaches the self-correlation; random far-away cells
/// then almost never outscore it. Normalizing to norm `sqrt(C)` (rather
/// than 1) keeps the correlation values of order `sqrt(C)` after the
/// volume's `1/sqrt(C)` divisor, which gives the softmax match scores
/// usable margins between correct and colliding peaks. The factor 2 on
/// the norm widens those margins further, sharpening the scores.
pub fn smooth_unit_texture(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    channels: usize,
) -> FeatureMap {
    let noise = FeatureMap::from_vec(
        height,
        width,
        channels,
        (0..height * width * channels)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .expect("finite noise");
    let binomial = [1.0, 4.0, 6.0, 4.0, 1.0];
    let mut kernel = ConvKernel::zeros(5, channels, channels);
    for kr in 0..5 {
        for kc in 0..5 {
            for ch in 0..channels {
                kernel.set(kr, kc, ch, ch, binomial[kr] * binomial[kc] / 256.0);
            }
        }
    }
    let mut smooth = noise;
    for _ in 0..4 {
        smooth = conv2d(&smooth, &kernel, 1, 2, None).expect("same-padded smoothing");
    }
    let target = 2.0 * (channels as f64).sqrt();
    let mut out = smooth.clone();
    for r in 0..height {
        for c in 0..width {
            let norm: f64 = smooth.cell(r, c).iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = target / norm.max(1e-12);
            for ch in 0..channels {
                out.set(r, c, ch, smooth.get(r, c, ch) * scale);
            }
        }
    }
    out
}

/// A rigid planar scene: satellite features, their BEV view under the
/// ground-truth pose, and the visibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub gt: Se2Pose,
    pub f_s: FeatureMap,
    pub f_bev: FeatureMap,
    pub visibility: Vec<u8>,
}

/// Generates a scene: the satellite map is a smooth unit texture; the BEV
/// map samples it at `R p + t` for every grid cell. The pose rotates
/// about the grid center and lands the grid around the satellite center,
/// offset by the translation prior.
///
/// Fails with a geometry error when the grid cannot fit inside the
/// satellite patch under the pose prior.
pub fn gen_scene(cfg: &SynthConfig, trial: u64) -> Result<SynthScene> {
    cfg.validate()?;
    if cfg.grid_size < 2 || cfg.sat_size < 2 {
        return Err(Error::Geometry("scene grids need at least 2 cells per side".into()));
    }
    let half_diag = (cfg.grid_size - 1) as f64 / 2.0 * std::f64::consts::SQRT_2;
    let reach = half_diag + cfg.trans_range_px + 1.0;
    let sat_half = (cfg.sat_size - 1) as f64 / 2.0;
    if reach > sat_half {
        return Err(Error::Geometry(format!(
            "grid of size {} under a ±{} px prior needs a satellite patch of at least {} px, got {}",
            cfg.grid_size,
            cfg.trans_range_px,
            (2.0 * reach).ceil() + 1.0,
            cfg.sat_size
        )));
    }

    let mut rng = trial_rng(cfg.seed, trial);
    let theta = uniform_sym(&mut rng, cfg.rot_range_deg.to_radians());
    let delta = [
        uniform_sym(&mut rng, cfg.trans_range_px),
        uniform_sym(&mut rng, cfg.trans_range_px),
    ];
    let grid_center = [(cfg.grid_size - 1) as f64 / 2.0, (cfg.grid_size - 1) as f64 / 2.0];
    let sat_center = [sat_half, sat_half];
    // t = c_sat + delta - R c_grid, so the grid center maps near the
    // satellite center.
    let spin = Se2Pose::new(theta, 0.0, 0.0);
    let rc = spin.apply(grid_center);
    let gt = Se2Pose::new(
        theta,
        sat_center[0] + delta[0] - rc[0],
        sat_center[1] + delta[1] - rc[1],
    );

    let f_s = smooth_unit_texture(&mut rng, cfg.sat_size, cfg.sat_size, cfg.channels);
    let coords: Vec<[f64; 2]> = (0..cfg.grid_size * cfg.grid_size)
        .map(|i| {
            let (r, c) = (i / cfg.grid_size, i % cfg.grid_size);
            gt.apply([c as f64, r as f64])
        })
        .collect();
    let grid = CoordGrid::from_vec(cfg.grid_size, cfg.grid_size, coords)?;
    let (f_bev, visibility) = bilinear_sample(&f_s, &grid);
    Ok(SynthScene {
        gt,
        f_s,
        f_bev,
        visibility,
    })
}

/// Matching pipeline configuration for scene localization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub iters: usize,
    pub num_levels: usize,
    pub temperature: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            iters: crate::flow::DEFAULT_ITERS,
            num_levels: crate::correlation::DEFAULT_NUM_LEVELS,
            temperature: crate::flow::DEFAULT_TEMPERATURE,
        }
    }
}

/// Runs correlation → iterative argmax flow → weighted solve on a scene.
pub fn localize_scene(scene: &SynthScene, cfg: &PipelineConfig) -> Result<PoseSolution> {
    let mut operator = ArgmaxOperator {
        temperature: cfg.temperature,
    };
    let trace = estimate_flow(
        &scene.f_bev,
        &scene.f_s,
        &mut operator,
        cfg.iters,
        &scene.visibility,
        cfg.num_levels,
    )?;
    solve_pose(&flow_to_matches(trace.final_flow()))
}
