//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::time::Instant;

use common::{
    brute_force_min, max_abs_diff, naive_deformable, naive_standard, random_grid, OLS_ROWS,
};
use lanegraph::attention::{
    bda, bda_projected, count_ops, mpda, spda, spda_projected, standard_cross_attention,
    AttnConfig, DeformAttnParams, OpCounter, StandardAttnParams, Variant,
};
use lanegraph::bezier::{
    bernstein_basis, bernstein_matrix, binomial, fit_control_points, sample_curve, ControlPointSet,
    Polyline,
};
use lanegraph::decoder::{refine, Decoder, DecoderConfig, DecoderParams};
use lanegraph::fit::{fit_demo, mean_coordinate_error, perturbed, FitConfig};
use lanegraph::gradcheck::run_gradcheck;
use lanegraph::grid::{FeatureGrid, SamplePoint};
use lanegraph::io::{evaluate_predictions, PredictionFile};
use lanegraph::matching::hungarian;
use lanegraph::metrics::{
    chamfer_distance, detection_ap_per_threshold, frechet_distance, ols_l, DistanceKind,
    EvalConfig, ScoredPolyline,
};
use lanegraph::rng::{stream, uniform_vec};
use lanegraph::scene::{desk_scene, PAPER_CHANNELS};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_ols_rows() -> Outcome {
    let mut worst = 0.0f64;
    for &(d, c, t, want) in OLS_ROWS {
        let got = ols_l(d, c, t).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= 0.05, || {
            format!("({d}, {c}, {t}) -> {got:.3}, table {want}")
        })?;
    }
    Ok(format!("{} rows, max |Δ| = {worst:.4}", OLS_ROWS.len()))
}

fn c2_attention_oracles() -> Outcome {
    let mut worst = 0.0f64;
    let seeds = 100;
    for seed in 0..seeds {
        let mut r = stream(seed, 1000);
        let heads = r.random_range(2..=5);
        let d = heads * r.random_range(1..=4);
        let k = r.random_range(1..=5);
        let (h, w, c) = (
            r.random_range(2..=12),
            r.random_range(2..=12),
            r.random_range(1..=6),
        );
        let p = DeformAttnParams::random(d, heads, k, c, &mut r).map_err(|e| e.to_string())?;
        let grid = random_grid(&mut r, h, w, c);
        let q = uniform_vec(&mut r, d);
        let ctrl = ControlPointSet::new(
            (0..heads)
                .map(|_| [r.random(), r.random(), r.random()])
                .collect(),
        )
        .unwrap();
        let refp = [r.random::<f64>(), r.random::<f64>()];
        let poly = sample_curve(&ctrl, heads - 1).unwrap();
        let poly_xy: Vec<[f64; 2]> = poly.points().iter().map(|p| [p[0], p[1]]).collect();

        let pairs = [
            (
                bda(&q, &grid, &ctrl, &p).unwrap(),
                naive_deformable(&p, &grid, &q, &ctrl.xy()),
            ),
            (
                spda(&q, &grid, SamplePoint::new(refp[0], refp[1]), &p).unwrap(),
                naive_deformable(&p, &grid, &q, &vec![refp; heads]),
            ),
            (
                mpda(&q, &grid, &poly, &p).unwrap(),
                naive_deformable(&p, &grid, &q, &poly_xy),
            ),
        ];
        for (got, want) in pairs {
            worst = worst.max(max_abs_diff(&got, &want));
        }
        let sp = StandardAttnParams::random(d, c, &mut r);
        let got = standard_cross_attention(&q, &grid, &sp).unwrap();
        worst = worst.max(max_abs_diff(&got, &naive_standard(&sp, &grid, &q)));
    }
    check(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "{seeds} seeds × 4 variants, max deviation {worst:.1e}"
    ))
}

fn c3_anchor_collapse() -> Outcome {
    for seed in 0..50 {
        let mut r = stream(seed, 1001);
        let heads = r.random_range(2..=6);
        let d = heads * 2;
        let p = DeformAttnParams::random(d, heads, 3, 4, &mut r).unwrap();
        let grid = random_grid(&mut r, 10, 14, 4);
        let values = p.project(&grid).unwrap();
        let q = uniform_vec(&mut r, d);
        let pt = [r.random::<f64>(), r.random::<f64>(), 0.5];
        let collapsed = ControlPointSet::new(vec![pt; heads]).unwrap();
        let b = bda_projected(&q, &values, &collapsed, &p, &mut OpCounter::default()).unwrap();
        let s = spda_projected(
            &q,
            &values,
            SamplePoint::new(pt[0], pt[1]),
            &p,
            &mut OpCounter::default(),
        )
        .unwrap();
        check(b == s, || format!("seed {seed}: BDA(collapsed) ≠ SPDA"))?;

        let ctrl = ControlPointSet::new(
            (0..heads)
                .map(|_| [r.random(), r.random(), r.random()])
                .collect(),
        )
        .unwrap();
        let as_poly = Polyline::new(ctrl.points().to_vec()).unwrap();
        let m = mpda(&q, &grid, &as_poly, &p).unwrap();
        check(m == bda(&q, &grid, &ctrl, &p).unwrap(), || {
            format!("seed {seed}: MPDA(ctrl) ≠ BDA")
        })?;
    }
    Ok("50 seeds, bit-identical".into())
}

fn c4_op_counts() -> Outcome {
    let cfg = AttnConfig::default();
    let n = cfg.n_ctrl;
    let b = count_ops(Variant::Bezier, &cfg).multiply_accumulates;
    let s = count_ops(Variant::SinglePoint { heads: n }, &cfg).multiply_accumulates;
    let m = count_ops(Variant::MultiPoint { points: n }, &cfg).multiply_accumulates;
    let m16 = count_ops(Variant::MultiPoint { points: 16 }, &cfg).multiply_accumulates;
    check(b <= s && s < m && m < m16, || {
        format!("ordering broken: {b} {s} {m} {m16}")
    })?;
    let conversion = bernstein_matrix(n - 1, n - 1).unwrap().apply_macs(2);
    check(m - b == conversion, || {
        format!("gap {} ≠ conversion {conversion}", m - b)
    })?;
    Ok(format!(
        "BDA {b} ≤ SPDA {s} < MPDA{n} {m} < MPDA16 {m16}; gap {conversion}"
    ))
}

fn c5_gradients() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let r = run_gradcheck(seed).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
    }
    check(worst < 1e-5, || format!("max relative error {worst:e}"))?;
    Ok(format!("10 seeds, max relative error {worst:.1e}"))
}

fn c6_hungarian() -> Outcome {
    for seed in 0..200 {
        let mut r = stream(seed, 1002);
        let (n, m) = (r.random_range(1..=7), r.random_range(1..=7));
        let c: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| r.random_range(-5.0..5.0)).collect())
            .collect();
        let a = hungarian(&c).map_err(|e| e.to_string())?;
        let want = brute_force_min(&c);
        check(a.total_cost == want, || {
            format!("seed {seed}: {} vs {want}", a.total_cost)
        })?;
    }
    Ok("200 instances, exact".into())
}

fn c7_decoder() -> Outcome {
    // refinement round trip
    let mut r = stream(7, 1003);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let c = ControlPointSet::new(
            (0..4)
                .map(|_| {
                    [
                        r.random_range(0.001..0.999),
                        r.random_range(0.001..0.999),
                        r.random_range(0.001..0.999),
                    ]
                })
                .collect(),
        )
        .unwrap();
        let d = uniform_vec(&mut r, 12);
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        let back = refine(&refine(&c, &d).unwrap(), &neg).unwrap();
        for (a, b) in back
            .points()
            .iter()
            .flatten()
            .zip(c.points().iter().flatten())
        {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-9, || format!("refinement round trip {worst:e}"))?;

    // telescoping and slice equivalence at desk scale
    let scene = desk_scene(3, 4).unwrap();
    let cfg = DecoderConfig {
        one_to_many_r: 2,
        ..DecoderConfig::desk()
    };
    let p = DecoderParams::random(cfg.clone(), scene.features.channels(), 3).unwrap();
    let states = Decoder::new(p.clone())
        .unwrap()
        .run(&scene.features)
        .unwrap();
    let grid = &scene.features;
    let mut tele = 0.0f64;
    for (l, s) in states.iter().enumerate() {
        for q in 0..s.len() {
            for cell in 0..grid.cells() {
                let f = grid.cell_flat(cell);
                let want: f64 = states[..=l]
                    .iter()
                    .map(|st| {
                        f.iter()
                            .zip(&st.mask_embedding[q])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                    })
                    .sum();
                tele = tele.max((s.pre_mask[q][cell] - want).abs());
            }
        }
    }
    check(tele <= 1e-12, || format!("telescoping {tele:e}"))?;
    let plain = Decoder::new(p.without_one_to_many())
        .unwrap()
        .run(&scene.features)
        .unwrap();
    for (a, b) in states.iter().zip(&plain) {
        check(a.one_to_one() == *b, || {
            "one-to-one block differs from the R = 0 run".into()
        })?;
    }
    check(
        states.len() == cfg.n_layers + 1 && states.iter().all(|s| s.len() == cfg.n_queries * 3),
        || "desk shapes".into(),
    )?;

    // paper-scale shapes
    let pc = DecoderConfig::paper_scale();
    let (h, w) = (200, 104);
    let mut fr = stream(8, 1004);
    let feats = FeatureGrid::new(
        h,
        w,
        PAPER_CHANNELS,
        (0..h * w * PAPER_CHANNELS)
            .map(|_| fr.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let pp = DecoderParams::random(pc.clone(), PAPER_CHANNELS, 8).unwrap();
    let ps = Decoder::new(pp).unwrap().run(&feats).unwrap();
    check(ps.len() == pc.n_layers + 1, || {
        format!("{} paper-scale states", ps.len())
    })?;
    for s in &ps {
        let ok = s.len() == pc.n_queries
            && s.embeddings.iter().all(|e| e.len() == pc.d_model)
            && s.ctrl.iter().all(|c| c.len() == pc.n_ctrl)
            && s.pre_mask.iter().all(|m| m.len() == h * w)
            && s.mask_embedding.iter().all(|m| m.len() == PAPER_CHANNELS)
            && s.class_logits.iter().all(|c| c.len() == pc.n_classes);
        check(ok, || "paper-scale shape mismatch".into())?;
    }
    Ok(format!("round trip {worst:.1e}, telescoping {tele:.1e}, slices identical, shapes ok at desk and {h}×{w}×{PAPER_CHANNELS}"))
}

fn c8_bezier() -> Outcome {
    let mut r = stream(9, 1005);
    let (mut pou, mut direct, mut fit) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let order = r.random_range(1..=6);
        let t: f64 = r.random();
        let s: f64 = (0..=order)
            .map(|n| bernstein_basis(n, order, t).unwrap())
            .sum();
        pou = pou.max((s - 1.0).abs());

        let c = ControlPointSet::new(
            (0..=order)
                .map(|_| [r.random(), r.random(), r.random()])
                .collect(),
        )
        .unwrap();
        let samples = order + 1 + r.random_range(0..30);
        let poly = sample_curve(&c, samples).unwrap();
        check(
            poly.first() == c.points()[0] && poly.last() == *c.points().last().unwrap(),
            || "endpoint not interpolated".into(),
        )?;
        for (l, p) in poly.points().iter().enumerate() {
            let t = l as f64 / samples as f64;
            for k in 0..3 {
                let want: f64 = c
                    .points()
                    .iter()
                    .enumerate()
                    .map(|(n, q)| {
                        binomial(order, n)
                            * t.powi(n as i32)
                            * (1.0 - t).powi((order - n) as i32)
                            * q[k]
                    })
                    .sum();
                direct = direct.max((p[k] - want).abs());
            }
        }
        let back = fit_control_points(&poly, order).unwrap();
        for (a, b) in back
            .points()
            .iter()
            .flatten()
            .zip(c.points().iter().flatten())
        {
            fit = fit.max((a - b).abs());
        }
    }
    check(pou <= 1e-12, || format!("partition of unity {pou:e}"))?;
    check(direct <= 1e-12, || format!("direct summation {direct:e}"))?;
    check(fit <= 1e-9, || format!("fit round trip {fit:e}"))?;
    Ok(format!(
        "unity {pou:.1e}, direct {direct:.1e}, fit {fit:.1e}"
    ))
}

fn c9_metrics() -> Outcome {
    let mut r = stream(10, 1006);
    let rand_poly = |r: &mut rand_chacha::ChaCha8Rng| {
        let n = r.random_range(2..8);
        Polyline::new(
            (0..n)
                .map(|_| {
                    [
                        r.random_range(0.0..50.0),
                        r.random_range(0.0..50.0),
                        r.random_range(-2.0..2.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    };
    for _ in 0..300 {
        let (a, b) = (rand_poly(&mut r), rand_poly(&mut r));
        let (f, c) = (
            frechet_distance(&a, &b).unwrap(),
            chamfer_distance(&a, &b).unwrap(),
        );
        check(
            (f - frechet_distance(&b, &a).unwrap()).abs() <= 1e-12,
            || "Fréchet asymmetric".into(),
        )?;
        check(
            (c - chamfer_distance(&b, &a).unwrap()).abs() <= 1e-12,
            || "Chamfer asymmetric".into(),
        )?;
        check(
            (c - chamfer_distance(&a.reversed(), &b).unwrap()).abs() <= 1e-12,
            || "Chamfer depends on direction".into(),
        )?;
        check(f + 1e-12 >= c, || format!("Fréchet {f} < Chamfer {c}"))?;
        let ra = a.resample(11).unwrap();
        check(
            frechet_distance(&ra, &ra).unwrap() == 0.0
                && chamfer_distance(&ra, &ra).unwrap() == 0.0,
            || "self distance".into(),
        )?;
        let rb = a.translated([0.5, 0.0, 0.0]).resample(11).unwrap();
        check(
            frechet_distance(&ra, &rb).unwrap() > 0.0 && chamfer_distance(&ra, &rb).unwrap() > 0.0,
            || "distinct inputs at zero distance".into(),
        )?;
    }
    // threshold monotonicity
    let line = |y: f64| Polyline::new((0..11).map(|i| [i as f64, y, 0.0]).collect()).unwrap();
    for _ in 0..50 {
        let n = r.random_range(1..6);
        let gts: Vec<Polyline> = (0..n).map(|i| line(10.0 * i as f64)).collect();
        let preds: Vec<ScoredPolyline> = (0..n)
            .map(|i| ScoredPolyline {
                polyline: line(10.0 * i as f64 + r.random_range(0.0..4.0)),
                score: r.random(),
            })
            .collect();
        for kind in [DistanceKind::Frechet, DistanceKind::Chamfer] {
            let aps =
                detection_ap_per_threshold(&preds, &gts, kind, &[0.5, 1.0, 1.5, 2.0, 3.0]).unwrap();
            check(aps.windows(2).all(|w| w[0] <= w[1]), || {
                format!("AP not monotone: {aps:?}")
            })?;
        }
    }
    // GT against itself
    for seed in 0..20 {
        let scene = desk_scene(seed, 6).unwrap();
        let rep = evaluate_predictions(
            &PredictionFile::from_ground_truth(&scene.gt).unwrap(),
            &scene,
            &EvalConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let all = [rep.det_l, rep.det_l_ch, rep.top_ll, rep.ols_l];
        check(
            all.iter()
                .chain(rep.per_threshold_ap.values())
                .all(|&v| v == 100.0),
            || format!("seed {seed}: {all:?}"),
        )?;
    }
    Ok("axioms on 300 random pairs, monotone AP, self-evaluation 100 on 20 scenes".into())
}

fn c10_fit() -> Outcome {
    let mut worst_err = 0.0f64;
    let mut worst_det = 100.0f64;
    for seed in 0..5 {
        let scene = desk_scene(seed, 6).unwrap();
        let gt: Vec<ControlPointSet> = scene.gt.instances.iter().map(|i| i.ctrl.clone()).collect();
        let res = fit_demo(&gt, perturbed(&gt, 0.05), &FitConfig::default())
            .map_err(|e| e.to_string())?;
        let err = mean_coordinate_error(&res.ctrl, &gt, &res.final_assignment).unwrap();
        let pred = PredictionFile::from_ctrl(&res.ctrl, 1.0, &scene.gt.adjacency).unwrap();
        let rep = evaluate_predictions(&pred, &scene, &EvalConfig::default())
            .map_err(|e| e.to_string())?;
        let det1 = rep.per_threshold_ap["frechet_1.0"];
        worst_err = worst_err.max(err);
        worst_det = worst_det.min(det1);
        check(err < 1e-3, || format!("seed {seed}: mean error {err:e}"))?;
        check(det1 >= 99.0, || format!("seed {seed}: DET_l@1m {det1}"))?;
    }
    Ok(format!(
        "5 scenes, worst mean error {worst_err:.1e}, worst DET_l@1m {worst_det:.1}"
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("OLS_l table aggregation", c1_ols_rows),
        ("attention oracle equivalence", c2_attention_oracles),
        ("anchor-collapse identity", c3_anchor_collapse),
        ("op-count ordering", c4_op_counts),
        ("gradient suite", c5_gradients),
        ("Hungarian exactness", c6_hungarian),
        ("decoder structure", c7_decoder),
        ("Bezier suite", c8_bezier),
        ("metric axioms", c9_metrics),
        ("end-to-end fit", c10_fit),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({secs:.2}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({secs:.2}s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
