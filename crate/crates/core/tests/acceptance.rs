//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured values (visible with `--nocapture`).
//!
//! Run with `cargo test --test acceptance -- --nocapture`.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use bevloc::correlation::{build_correlation, build_pyramid, lookup, CorrelationPyramid};
use bevloc::eval::{aggregate, localization_errors, ErrorRecord, RecallThresholds};
use bevloc::flow::{load_flow, save_flow, FlowField, FlowTrace};
use bevloc::geometry::{wrap_angle, Se2Pose};
use bevloc::solver::{
    flow_to_matches, pose_gradients, solve_pose, solve_pose_closed_form, MatchSet,
};
use bevloc::supervision::{
    confidence_loss, gt_flow, matching_loss, position_loss, total_loss, TrainSchedule,
};
use bevloc::synth::{gen_matches, gen_scene, localize_scene, PipelineConfig, SynthConfig};
use bevloc::tensor::{
    avg_pool2x2, bilinear_sample, conv2d, load_feature_map, save_feature_map, ConvKernel,
    CoordGrid, FeatureMap,
};
use bevloc::weights::{load_weights, save_weights, TensorData, WeightStore};

fn random_points(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [rng.random_range(0.0..extent), rng.random_range(0.0..extent)])
        .collect()
}

fn random_map(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_vec(
        h,
        w,
        c,
        (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Seeded noiseless match set under a pose drawn within ±180°, ±200 px.
fn exact_case(seed: u64) -> (Se2Pose, MatchSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=500);
    let pose = Se2Pose::new(
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        rng.random_range(-200.0..200.0),
        rng.random_range(-200.0..200.0),
    );
    let p_src = random_points(&mut rng, n, 500.0);
    let p_dst = pose.apply_all(&p_src);
    let weights = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    (pose, MatchSet::new(p_src, p_dst, weights).unwrap())
}

#[test]
fn acceptance_1_solver_exactness() {
    let start = Instant::now();
    let mut max_theta = 0.0f64;
    let mut max_t = 0.0f64;
    let mut max_residual = 0.0f64;
    for seed in 0..1000 {
        let (pose, matches) = exact_case(seed);
        let sol = solve_pose(&matches).unwrap();
        max_theta = max_theta.max(wrap_angle(sol.pose.theta - pose.theta).abs());
        max_t = max_t
            .max((sol.pose.t[0] - pose.t[0]).abs())
            .max((sol.pose.t[1] - pose.t[1]).abs());
        max_residual = max_residual.max(sol.diagnostics.residual);
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(max_theta < 1e-9, "max theta error {max_theta}");
    assert!(max_t < 1e-9, "max translation error {max_t}");
    assert!(max_residual < 1e-12, "max residual {max_residual}");
    assert!(elapsed < 5.0, "solver exactness took {elapsed:.2} s");
    println!(
        "[PASS] criterion 1 solver exactness: max |dtheta| {max_theta:.2e} rad, \
         max |dt| {max_t:.2e} px, max residual {max_residual:.2e}, {elapsed:.2} s"
    );
}

#[test]
fn acceptance_2_oracle_agreement_and_reflections() {
    let mut max_dtheta = 0.0f64;
    let mut max_dt = 0.0f64;
    for seed in 0..1000 {
        let (_, matches) = exact_case(seed);
        let a = solve_pose(&matches).unwrap();
        let b = solve_pose_closed_form(&matches).unwrap();
        max_dtheta = max_dtheta.max(wrap_angle(a.pose.theta - b.pose.theta).abs());
        max_dt = max_dt
            .max((a.pose.t[0] - b.pose.t[0]).abs())
            .max((a.pose.t[1] - b.pose.t[1]).abs());
        let r = a.pose.rotation();
        assert!((r[0][0] * r[1][1] - r[0][1] * r[1][0] - 1.0).abs() < 1e-12);
    }

    // Constructed reflective-degenerate sets: mirrored anisotropic points.
    let mut corrections = 0usize;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let n = rng.random_range(10..80);
        let p_src: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(-40.0..40.0), rng.random_range(-2.0..2.0)])
            .collect();
        let p_dst: Vec<[f64; 2]> = p_src
            .iter()
            .map(|&[x, y]| [x + rng.random_range(-0.05..0.05), -y + rng.random_range(-0.05..0.05)])
            .collect();
        let weights = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let m = MatchSet::new(p_src, p_dst, weights).unwrap();
        let a = solve_pose(&m).unwrap();
        let b = solve_pose_closed_form(&m).unwrap();
        if a.diagnostics.det_correction {
            corrections += 1;
        }
        let r = a.pose.rotation();
        assert!((r[0][0] * r[1][1] - r[0][1] * r[1][0] - 1.0).abs() < 1e-12);
        assert!(wrap_angle(a.pose.theta - b.pose.theta).abs() < 1e-9);
        max_dtheta = max_dtheta.max(wrap_angle(a.pose.theta - b.pose.theta).abs());
    }
    assert!(max_dtheta < 1e-9, "max cross-path theta gap {max_dtheta}");
    assert!(max_dt < 1e-9, "max cross-path translation gap {max_dt}");
    assert!(corrections == 50, "det correction fired on {corrections}/50 reflective sets");
    println!(
        "[PASS] criterion 2 oracle agreement: max |dtheta| {max_dtheta:.2e} rad, \
         max |dt| {max_dt:.2e} px, det(R)=+1 on 1050 sets, {corrections}/50 reflective corrections"
    );
}

#[test]
fn acceptance_3_gradient_audit() {
    let step = 1e-6;
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(20_000 + seed);
        let n = rng.random_range(5..50);
        let p_src = random_points(&mut rng, n, 60.0);
        let p_dst = random_points(&mut rng, n, 60.0);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let m = MatchSet::new(p_src, p_dst, weights).unwrap();
        let g = pose_gradients(&m).unwrap();

        // Central differences through the closed-form solve, whose
        // evaluation noise (~1e-16) stays far below the FD step; the
        // SVD evaluator carries ~1e-14 factorization noise that h = 1e-6
        // would amplify to the tolerance floor.
        let eval = |m: &MatchSet| {
            let sol = solve_pose_closed_form(m).unwrap();
            (sol.pose.theta, sol.pose.t)
        };
        let mut audit = |analytic: f64, fd: f64| {
            let err = (analytic - fd).abs();
            let tol = 1e-8 + 1e-5 * fd.abs();
            assert!(err <= tol, "partial {analytic} vs fd {fd} (err {err:.3e})");
            if fd.abs() > 1e-8 {
                max_rel = max_rel.max(err / fd.abs());
            }
            checked += 1;
        };
        for i in 0..n {
            for coord in 0..2 {
                for src_side in [true, false] {
                    let mut plus = (m.p_src().to_vec(), m.p_dst().to_vec(), m.weights().to_vec());
                    let mut minus = plus.clone();
                    if src_side {
                        plus.0[i][coord] += step;
                        minus.0[i][coord] -= step;
                    } else {
                        plus.1[i][coord] += step;
                        minus.1[i][coord] -= step;
                    }
                    let mp = MatchSet::new(plus.0, plus.1, plus.2).unwrap();
                    let mm = MatchSet::new(minus.0, minus.1, minus.2).unwrap();
                    let (tp, ttp) = eval(&mp);
                    let (tm, ttm) = eval(&mm);
                    let fd_theta = wrap_angle(tp - tm) / (2.0 * step);
                    let (ga, gt_) = if src_side {
                        (&g.theta_wrt_src, &g.t_wrt_src)
                    } else {
                        (&g.theta_wrt_dst, &g.t_wrt_dst)
                    };
                    audit(ga[i][coord], fd_theta);
                    for comp in 0..2 {
                        audit(gt_[i][comp][coord], (ttp[comp] - ttm[comp]) / (2.0 * step));
                    }
                }
            }
            let mut wp = m.weights().to_vec();
            let mut wm = m.weights().to_vec();
            wp[i] += step;
            wm[i] -= step;
            let mp = MatchSet::new(m.p_src().to_vec(), m.p_dst().to_vec(), wp).unwrap();
            let mm = MatchSet::new(m.p_src().to_vec(), m.p_dst().to_vec(), wm).unwrap();
            let (tp, ttp) = eval(&mp);
            let (tm, ttm) = eval(&mm);
            audit(g.theta_wrt_weight[i], wrap_angle(tp - tm) / (2.0 * step));
            for comp in 0..2 {
                audit(g.t_wrt_weight[i][comp], (ttp[comp] - ttm[comp]) / (2.0 * step));
            }
        }
    }
    println!(
        "[PASS] criterion 3 gradient audit: {checked} partials on 100 sets, \
         max relative error {max_rel:.2e}"
    );
}

#[test]
fn acceptance_4_outlier_inertness() {
    let mut max_err = 0.0f64;
    for trial in 0..50 {
        let cfg = SynthConfig {
            seed: 40_000,
            n: 100,
            noise_sigma: 0.0,
            outlier_fraction: 0.3,
            rot_range_deg: 180.0,
            trans_range_px: 200.0,
            ..SynthConfig::default()
        };
        let sample = gen_matches(&cfg, trial).unwrap();
        let sol = solve_pose(&sample.with_zeroed_outliers()).unwrap();
        max_err = max_err
            .max(wrap_angle(sol.pose.theta - sample.gt.theta).abs())
            .max((sol.pose.t[0] - sample.gt.t[0]).abs())
            .max((sol.pose.t[1] - sample.gt.t[1]).abs());
    }
    assert!(max_err < 1e-9, "max recovery error {max_err}");
    println!(
        "[PASS] criterion 4 outlier inertness: 50 trials with 30% zero-weight outliers, \
         max pose error {max_err:.2e}"
    );
}

#[test]
fn acceptance_5_end_to_end_synthetic_localization() {
    let start = Instant::now();
    let cfg = SynthConfig {
        seed: 50_000,
        grid_size: 64,
        channels: 8,
        sat_size: 120,
        rot_range_deg: 10.0,
        trans_range_px: 12.0,
        ..SynthConfig::default()
    };
    let pipeline = PipelineConfig::default();
    assert_eq!(pipeline.iters, 12);

    let trials = 100usize;
    let mut position_errors = Vec::with_capacity(trials);
    let mut azimuth_errors = Vec::with_capacity(trials);
    for trial in 0..trials {
        let scene = gen_scene(&cfg, trial as u64).unwrap();
        let sol = localize_scene(&scene, &pipeline).unwrap();
        // Compare camera placements: the grid center carried through
        // both poses, in pixels.
        let anchor = [31.5, 31.5];
        let got = sol.pose.apply(anchor);
        let want = scene.gt.apply(anchor);
        position_errors.push((got[0] - want[0]).hypot(got[1] - want[1]));
        azimuth_errors.push(wrap_angle(sol.pose.theta - scene.gt.theta).abs().to_degrees());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    };
    let recall_1px =
        100.0 * position_errors.iter().filter(|&&e| e < 1.0).count() as f64 / trials as f64;
    let med_pos = median(&mut position_errors);
    let med_az = median(&mut azimuth_errors);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(med_pos < 1.0, "median position error {med_pos} px");
    assert!(med_az < 0.5, "median azimuth error {med_az} deg");
    assert!(recall_1px >= 90.0, "recall@1px {recall_1px}%");
    assert!(elapsed < 120.0, "end-to-end run took {elapsed:.1} s");
    println!(
        "[PASS] criterion 5 end-to-end localization: median position {med_pos:.3} px, \
         median azimuth {med_az:.3} deg, recall@1px {recall_1px:.1}%, {elapsed:.1} s"
    );
}

#[test]
fn acceptance_6_gt_flow_round_trip() {
    let mut max_err = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(60_000 + seed);
        let pose = Se2Pose::new(
            rng.random_range(-0.7..0.7),
            rng.random_range(40.0..80.0),
            rng.random_range(40.0..80.0),
        );
        let flow = gt_flow(&pose, (32, 32), (128, 128), &vec![1u8; 1024]).unwrap();
        let sol = solve_pose(&flow_to_matches(&flow)).unwrap();
        max_err = max_err
            .max(wrap_angle(sol.pose.theta - pose.theta).abs())
            .max((sol.pose.t[0] - pose.t[0]).abs())
            .max((sol.pose.t[1] - pose.t[1]).abs());
    }
    assert!(max_err < 1e-9, "max round-trip error {max_err}");
    println!(
        "[PASS] criterion 6 gt-flow round trip: 100 poses, max pose error {max_err:.2e}"
    );
}

#[test]
fn acceptance_7_loss_identities() {
    // matching_loss(gt, gt) = 0.
    let pose = Se2Pose::new(0.15, 2.0, -3.0);
    let gt = gt_flow(&pose, (8, 8), (32, 32), &vec![1u8; 64]).unwrap();
    assert_eq!(matching_loss(&gt, &gt).unwrap(), 0.0);

    // Equal distances give exactly n/2 (dyadic scores keep halves exact).
    let n = 64;
    let scores: Vec<f64> = (0..n).map(|i| (i % 17) as f64 / 16.0).collect();
    let distances = vec![2.5; n];
    assert_eq!(confidence_loss(&scores, &distances, 200.0).unwrap(), n as f64 / 2.0);

    // Linearity in alpha and beta.
    let noisy_flow: Vec<[f64; 2]> = gt
        .flow()
        .iter()
        .enumerate()
        .map(|(i, f)| [f[0] + 0.02 * i as f64, f[1] - 0.01 * i as f64])
        .collect();
    let noisy =
        FlowField::from_parts(8, 8, noisy_flow, vec![0.25; 64], gt.visibility().to_vec()).unwrap();
    let trace = FlowTrace::new(vec![noisy, gt.clone()]).unwrap();
    let pred = Se2Pose::new(0.1, 1.0, -2.0);
    let at = |alpha: f64, beta: f64| {
        let sched = TrainSchedule {
            alpha,
            beta_before: beta,
            ..TrainSchedule::default()
        };
        total_loss(&trace, &gt, &pred, &pose, &sched, 0).unwrap().total
    };
    let base = at(0.0, 0.0);
    let da = at(1.0, 0.0) - base;
    let db = at(0.0, 1.0) - base;
    for (alpha, beta) in [(100.0, 1.0), (100.0, 10.0), (3.5, 0.125), (17.0, 42.0)] {
        let want = base + alpha * da + beta * db;
        let got = at(alpha, beta);
        assert!(
            (got - want).abs() <= 1e-12 * (1.0 + want.abs()),
            "alpha {alpha} beta {beta}: {got} vs {want}"
        );
    }
    assert!((at(0.0, 1.0) - base - position_loss(&pred, &pose)).abs() < 1e-12);

    // Schedule switches exactly at epoch 15.
    let sched = TrainSchedule::default();
    assert_eq!((sched.kappa(14), sched.beta(14)), (200.0, 1.0));
    assert_eq!((sched.kappa(15), sched.beta(15)), (20.0, 10.0));

    println!(
        "[PASS] criterion 7 loss identities: zero self-loss, n/2 confidence, \
         exact (alpha, beta) linearity, schedule flip at epoch 15"
    );
}

#[test]
fn acceptance_8_numeric_kernel_oracles_and_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(80_000);
    let mut max_err = 0.0f64;

    // conv2d vs naive six-loop sum.
    for _ in 0..20 {
        let (h, w) = (rng.random_range(6..14), rng.random_range(6..14));
        let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = *[1usize, 3, 5].choose(&mut rng).unwrap();
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..3);
        if h + 2 * padding < k || w + 2 * padding < k {
            continue;
        }
        let input = random_map(&mut rng, h, w, ci);
        let kernel = ConvKernel::from_vec(
            k,
            ci,
            co,
            (0..k * k * ci * co).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let got = conv2d(&input, &kernel, stride, padding, None).unwrap();
        for orow in 0..got.height() {
            for ocol in 0..got.width() {
                for c in 0..co {
                    let mut want = 0.0;
                    for kr in 0..k {
                        for kc in 0..k {
                            for cin in 0..ci {
                                let ir = (orow * stride + kr) as isize - padding as isize;
                                let icl = (ocol * stride + kc) as isize - padding as isize;
                                if ir >= 0 && icl >= 0 && (ir as usize) < h && (icl as usize) < w {
                                    want += input.get(ir as usize, icl as usize, cin)
                                        * kernel.get(kr, kc, cin, c);
                                }
                            }
                        }
                    }
                    max_err = max_err.max((got.get(orow, ocol, c) - want).abs());
                }
            }
        }
    }

    // avg_pool2x2 vs block means.
    for _ in 0..20 {
        let (h, w) = (rng.random_range(2..11), rng.random_range(2..11));
        let input = random_map(&mut rng, h, w, 2);
        let got = avg_pool2x2(&input);
        for r in 0..got.height() {
            for c in 0..got.width() {
                for ch in 0..2 {
                    let r1 = (2 * r + 1).min(h - 1);
                    let c1 = (2 * c + 1).min(w - 1);
                    let want = (input.get(2 * r, 2 * c, ch)
                        + input.get(2 * r, c1, ch)
                        + input.get(r1, 2 * c, ch)
                        + input.get(r1, c1, ch))
                        / 4.0;
                    max_err = max_err.max((got.get(r, c, ch) - want).abs());
                }
            }
        }
    }

    // bilinear_sample vs the four-neighbor formula.
    for _ in 0..20 {
        let (h, w) = (rng.random_range(2..9), rng.random_range(2..9));
        let input = random_map(&mut rng, h, w, 2);
        let coords: Vec<[f64; 2]> = (0..12)
            .map(|_| {
                [
                    rng.random_range(-1.0..w as f64 + 1.0),
                    rng.random_range(-1.0..h as f64 + 1.0),
                ]
            })
            .collect();
        let grid = CoordGrid::from_vec(3, 4, coords.clone()).unwrap();
        let (got, validity) = bilinear_sample(&input, &grid);
        for (i, &[x, y]) in coords.iter().enumerate() {
            let inside = x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64;
            assert_eq!(validity[i] == 1, inside);
            for ch in 0..2 {
                let want = if inside {
                    let x0 = (x.floor() as usize).min(w - 2);
                    let y0 = (y.floor() as usize).min(h - 2);
                    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
                    (1.0 - fy)
                        * ((1.0 - fx) * input.get(y0, x0, ch) + fx * input.get(y0, x0 + 1, ch))
                        + fy * ((1.0 - fx) * input.get(y0 + 1, x0, ch)
                            + fx * input.get(y0 + 1, x0 + 1, ch))
                } else {
                    0.0
                };
                max_err = max_err.max((got.get(i / 4, i % 4, ch) - want).abs());
            }
        }
    }

    // Correlation volume, pyramid, lookup vs naive loops.
    for case in 0..20 {
        let c = rng.random_range(1..5);
        let f1 = random_map(&mut rng, 4, 5, c);
        let f2 = random_map(&mut rng, 6, 4, c);
        let vol = build_correlation(&f1, &f2).unwrap();
        let norm = (c as f64).sqrt();
        for i in 0..4 {
            for j in 0..5 {
                for k in 0..6 {
                    for l in 0..4 {
                        let want: f64 = (0..c)
                            .map(|ch| f1.get(i, j, ch) * f2.get(k, l, ch))
                            .sum::<f64>()
                            / norm;
                        max_err = max_err.max((vol.at(i, j, k, l) - want).abs());
                    }
                }
            }
        }
        let pyr = build_pyramid(vol, 3).unwrap();
        for lvl in 1..3 {
            let (prev, cur) = (pyr.level(lvl - 1), pyr.level(lvl));
            let (ph, pw) = prev.tgt_shape();
            let (ch_, cw_) = cur.tgt_shape();
            for i in 0..4 {
                for j in 0..5 {
                    for r in 0..ch_ {
                        for cc in 0..cw_ {
                            let r1 = (2 * r + 1).min(ph - 1);
                            let c1 = (2 * cc + 1).min(pw - 1);
                            let want = (prev.at(i, j, 2 * r, 2 * cc)
                                + prev.at(i, j, 2 * r, c1)
                                + prev.at(i, j, r1, 2 * cc)
                                + prev.at(i, j, r1, c1))
                                / 4.0;
                            max_err = max_err.max((cur.at(i, j, r, cc) - want).abs());
                        }
                    }
                }
            }
        }
        // Lookup against per-displacement sampling at radius 1.
        let coords: Vec<[f64; 2]> = (0..20)
            .map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..5.0)])
            .collect();
        let grid = CoordGrid::from_vec(4, 5, coords).unwrap();
        let out = lookup(&pyr, &grid, 1).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let [x, y] = grid.at(i, j);
                let mut chn = 0;
                for lvl in 0..3 {
                    let level = pyr.level(lvl);
                    let (th, tw) = level.tgt_shape();
                    let s = 1.0 / (1 << lvl) as f64;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let sx = x * s + dx as f64;
                            let sy = y * s + dy as f64;
                            let want = if sx >= 0.0
                                && sy >= 0.0
                                && sx <= (tw - 1) as f64
                                && sy <= (th - 1) as f64
                            {
                                let x0 = (sx.floor() as usize).min(tw - 2);
                                let y0 = (sy.floor() as usize).min(th - 2);
                                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                                (1.0 - fy)
                                    * ((1.0 - fx) * level.at(i, j, y0, x0)
                                        + fx * level.at(i, j, y0, x0 + 1))
                                    + fy * ((1.0 - fx) * level.at(i, j, y0 + 1, x0)
                                        + fx * level.at(i, j, y0 + 1, x0 + 1))
                            } else {
                                0.0
                            };
                            max_err = max_err.max((out.get(i, j, chn) - want).abs());
                            chn += 1;
                        }
                    }
                }
            }
        }
        let _ = case;
    }
    assert!(max_err < 1e-6, "max kernel-oracle deviation {max_err}");

    // Bit-exact file round trips (float32-representable payloads).
    let dir = tempfile::tempdir().unwrap();
    let f32vals = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-4.0f32..4.0) as f64).collect()
    };
    let mut store = WeightStore::new();
    store.insert(
        "k",
        TensorData::new(vec![3, 3, 2, 2], f32vals(&mut rng, 36)).unwrap(),
    );
    store.insert("b", TensorData::new(vec![2], f32vals(&mut rng, 2)).unwrap());
    let wpath = dir.path().join("w.cvwt");
    save_weights(&wpath, &store).unwrap();
    let store2 = load_weights(&wpath).unwrap();
    assert_eq!(store, store2);
    let wpath2 = dir.path().join("w2.cvwt");
    save_weights(&wpath2, &store2).unwrap();
    assert_eq!(std::fs::read(&wpath).unwrap(), std::fs::read(&wpath2).unwrap());

    let map = FeatureMap::from_vec(5, 4, 3, f32vals(&mut rng, 60)).unwrap();
    let mpath = dir.path().join("m.cvfm");
    save_feature_map(&mpath, &map).unwrap();
    assert_eq!(load_feature_map(&mpath).unwrap(), map);

    let flow = FlowField::from_parts(
        3,
        3,
        f32vals(&mut rng, 18).chunks(2).map(|c| [c[0], c[1]]).collect(),
        (0..9).map(|i| i as f64 / 16.0).collect(),
        (0..9).map(|i| (i % 2) as u8).collect(),
    )
    .unwrap();
    let fpath = dir.path().join("f.cvfl");
    save_flow(&fpath, &flow).unwrap();
    assert_eq!(load_flow(&fpath).unwrap(), flow);

    println!(
        "[PASS] criterion 8 numeric kernels: max oracle deviation {max_err:.2e}, \
         CVWT/CVFM/CVFL round trips bit-exact"
    );
}

#[test]
fn acceptance_9_metrics() {
    // 3-4-5 decomposition.
    let gt = Se2Pose::identity();
    let pred = Se2Pose::new(0.0, 3.0, 4.0);
    let rec = localization_errors("s", &pred, &gt, [0.0, 0.0], 1.0).unwrap();
    assert!((rec.location_m - 5.0).abs() < 1e-12);
    assert!((rec.lateral_m - 3.0).abs() < 1e-12);
    assert!((rec.longitudinal_m - 4.0).abs() < 1e-12);

    // Hand-computed recalls and median from [0.5, 2.0, 6.0].
    let mk = |loc: f64| ErrorRecord {
        id: String::new(),
        location_m: loc,
        lateral_m: loc,
        longitudinal_m: loc,
        azimuth_deg: loc,
    };
    let records = vec![mk(0.5), mk(2.0), mk(6.0)];
    let table = aggregate(&records, &RecallThresholds::default()).unwrap();
    assert!((table.recall_lateral_pct[0] - 33.333333333333336).abs() < 1e-9);
    assert!((table.recall_lateral_pct[1] - 66.66666666666667).abs() < 1e-9);
    assert_eq!(table.median_location_m, 2.0);

    // Permutation invariance over 1000 shuffles.
    let mut rng = ChaCha8Rng::seed_from_u64(90_000);
    let mut records: Vec<ErrorRecord> = (0..200)
        .map(|_| mk(rng.random_range(0.0..10.0)))
        .collect();
    let reference = aggregate(&records, &RecallThresholds::default()).unwrap();
    for _ in 0..1000 {
        records.shuffle(&mut rng);
        let shuffled = aggregate(&records, &RecallThresholds::default()).unwrap();
        assert_eq!(reference.median_location_m, shuffled.median_location_m);
        assert_eq!(reference.recall_lateral_pct, shuffled.recall_lateral_pct);
        assert_eq!(reference.recall_azimuth_pct, shuffled.recall_azimuth_pct);
        assert!((reference.mean_location_m - shuffled.mean_location_m).abs() < 1e-12);
    }
    println!(
        "[PASS] criterion 9 metrics: 3-4-5 decomposition, 33.33/66.67% recalls, \
         permutation-invariant over 1000 shuffles"
    );
}
