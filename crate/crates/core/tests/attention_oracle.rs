mod common;

use common::{max_abs_diff, naive_deformable, naive_standard, random_grid};
use lanegraph::attention::{
    bda, bda_projected, count_ops, mpda, mpda_from_ctrl, spda, spda_projected,
    standard_cross_attention, AttnConfig, DeformAttnParams, OpCounter, StandardAttnParams, Variant,
};
use lanegraph::bezier::{bernstein_matrix, sample_curve, ControlPointSet};
use lanegraph::grid::SamplePoint;
use lanegraph::rng::{stream, uniform_vec};
use rand::Rng;

const TOL: f64 = 1e-12;

struct Case {
    params: DeformAttnParams,
    grid: lanegraph::grid::FeatureGrid,
    query: Vec<f64>,
    ctrl: ControlPointSet,
}

fn case(seed: u64) -> Case {
    let mut r = stream(seed, 7);
    let n_ctrl = r.random_range(2..=5);
    let head_dim = r.random_range(1..=4);
    let d = n_ctrl * head_dim;
    let k = r.random_range(1..=5);
    let (h, w, c) = (
        r.random_range(2..=12),
        r.random_range(2..=12),
        r.random_range(1..=6),
    );
    let params = DeformAttnParams::random(d, n_ctrl, k, c, &mut r).unwrap();
    let grid = random_grid(&mut r, h, w, c);
    let query = uniform_vec(&mut r, d);
    let ctrl = ControlPointSet::new(
        (0..n_ctrl)
            .map(|_| {
                [
                    r.random_range(0.0..1.0),
                    r.random_range(0.0..1.0),
                    r.random_range(0.0..1.0),
                ]
            })
            .collect(),
    )
    .unwrap();
    Case {
        params,
        grid,
        query,
        ctrl,
    }
}

#[test]
fn deformable_variants_match_naive_loops() {
    for seed in 0..120 {
        let c = case(seed);
        let anchors: Vec<[f64; 2]> = c.ctrl.xy();

        let got = bda(&c.query, &c.grid, &c.ctrl, &c.params).unwrap();
        let want = naive_deformable(&c.params, &c.grid, &c.query, &anchors);
        assert!(max_abs_diff(&got, &want) <= TOL, "bda seed {seed}");

        let reference = [
            0.3 + 0.01 * (seed % 40) as f64,
            0.7 - 0.01 * (seed % 30) as f64,
        ];
        let got = spda(
            &c.query,
            &c.grid,
            SamplePoint::new(reference[0], reference[1]),
            &c.params,
        )
        .unwrap();
        let want = naive_deformable(
            &c.params,
            &c.grid,
            &c.query,
            &vec![reference; c.params.n_heads],
        );
        assert!(max_abs_diff(&got, &want) <= TOL, "spda seed {seed}");

        // polyline with as many points as heads
        let poly = sample_curve(&c.ctrl, c.params.n_heads - 1).unwrap();
        let got = mpda(&c.query, &c.grid, &poly, &c.params).unwrap();
        let refs: Vec<[f64; 2]> = poly.points().iter().map(|p| [p[0], p[1]]).collect();
        let want = naive_deformable(&c.params, &c.grid, &c.query, &refs);
        assert!(max_abs_diff(&got, &want) <= TOL, "mpda seed {seed}");
    }
}

#[test]
fn standard_attention_matches_naive_loop() {
    for seed in 0..120 {
        let mut r = stream(seed, 8);
        let d = r.random_range(1..=8);
        let (h, w, c) = (
            r.random_range(1..=8),
            r.random_range(1..=8),
            r.random_range(1..=5),
        );
        let p = StandardAttnParams::random(d, c, &mut r);
        let grid = random_grid(&mut r, h, w, c);
        let q = uniform_vec(&mut r, d);
        let got = standard_cross_attention(&q, &grid, &p).unwrap();
        assert!(
            max_abs_diff(&got, &naive_standard(&p, &grid, &q)) <= TOL,
            "seed {seed}"
        );
    }
}

#[test]
fn collapsed_control_points_reduce_bda_to_spda() {
    for seed in 0..50 {
        let c = case(seed);
        let p = [0.41, 0.63, 0.2];
        let collapsed = ControlPointSet::new(vec![p; c.params.n_heads]).unwrap();
        let values = c.params.project(&c.grid).unwrap();
        let b = bda_projected(
            &c.query,
            &values,
            &collapsed,
            &c.params,
            &mut OpCounter::default(),
        )
        .unwrap();
        let s = spda_projected(
            &c.query,
            &values,
            SamplePoint::new(p[0], p[1]),
            &c.params,
            &mut OpCounter::default(),
        )
        .unwrap();
        assert_eq!(b, s);
    }
}

#[test]
fn mpda_at_control_points_equals_bda() {
    for seed in 0..50 {
        let c = case(seed);
        let poly = lanegraph::bezier::Polyline::new(c.ctrl.points().to_vec()).unwrap();
        assert_eq!(
            mpda(&c.query, &c.grid, &poly, &c.params).unwrap(),
            bda(&c.query, &c.grid, &c.ctrl, &c.params).unwrap()
        );
    }
}

#[test]
fn mpda_from_ctrl_equals_mpda_on_converted_points() {
    let c = case(3);
    let basis = bernstein_matrix(c.ctrl.order(), c.params.n_heads - 1).unwrap();
    let values = c.params.project(&c.grid).unwrap();
    let mut counter = OpCounter::default();
    let a = mpda_from_ctrl(&c.query, &values, &c.ctrl, &basis, &c.params, &mut counter).unwrap();
    let b = mpda(&c.query, &c.grid, &basis.apply(&c.ctrl).unwrap(), &c.params).unwrap();
    assert_eq!(a, b);
}

#[test]
fn op_count_ordering() {
    for (d, n_ctrl, k) in [
        (32usize, 4usize, 4usize),
        (64, 4, 4),
        (256, 4, 8),
        (48, 6, 2),
    ] {
        let cfg = AttnConfig {
            d_model: d,
            n_ctrl,
            n_samples: k,
            ..Default::default()
        };
        let bda = count_ops(Variant::Bezier, &cfg).multiply_accumulates;
        let spda = count_ops(Variant::SinglePoint { heads: n_ctrl }, &cfg).multiply_accumulates;
        let mpda = count_ops(Variant::MultiPoint { points: n_ctrl }, &cfg).multiply_accumulates;
        let mpda16 = count_ops(Variant::MultiPoint { points: 16 }, &cfg).multiply_accumulates;
        assert!(
            bda <= spda && spda < mpda && mpda < mpda16,
            "{bda} {spda} {mpda} {mpda16}"
        );
        let conversion = bernstein_matrix(n_ctrl - 1, n_ctrl - 1)
            .unwrap()
            .apply_macs(2);
        assert_eq!(mpda - bda, conversion);
    }
}

#[test]
fn measured_counts_match_formula() {
    let c = case(11);
    let cfg = AttnConfig {
        d_model: c.params.d_model,
        n_ctrl: c.params.n_heads,
        n_samples: c.params.n_samples,
        grid_h: c.grid.height(),
        grid_w: c.grid.width(),
    };
    let values = c.params.project(&c.grid).unwrap();
    let mut counter = OpCounter::default();
    bda_projected(&c.query, &values, &c.ctrl, &c.params, &mut counter).unwrap();
    assert_eq!(counter, count_ops(Variant::Bezier, &cfg));

    let basis = bernstein_matrix(c.ctrl.order(), c.params.n_heads - 1).unwrap();
    let mut counter = OpCounter::default();
    mpda_from_ctrl(&c.query, &values, &c.ctrl, &basis, &c.params, &mut counter).unwrap();
    assert_eq!(
        counter,
        count_ops(
            Variant::MultiPoint {
                points: c.params.n_heads
            },
            &cfg
        )
    );
}
