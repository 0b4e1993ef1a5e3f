#![allow(clippy::needless_range_loop)]

use lanegraph::bezier::ControlPointSet;
use lanegraph::decoder::{
    one_to_many_mask, refine, Decoder, DecoderConfig, DecoderParams, QueryState,
};
use lanegraph::grid::FeatureGrid;
use lanegraph::rng::{stream, uniform_vec};
use lanegraph::scene::desk_scene;
use proptest::prelude::*;
use rand::Rng;

fn run(cfg: DecoderConfig, seed: u64) -> (Vec<QueryState>, FeatureGrid) {
    let scene = desk_scene(seed, 4).unwrap();
    let p = DecoderParams::random(cfg, scene.features.channels(), seed).unwrap();
    (
        Decoder::new(p).unwrap().run(&scene.features).unwrap(),
        scene.features,
    )
}

proptest! {
    #[test]
    fn refinement_round_trip(pts in prop::collection::vec((0.001f64..0.999, 0.001f64..0.999, 0.001f64..0.999), 4), seed in 0u64..1000) {
        let c = ControlPointSet::new(pts.into_iter().map(|(a, b, z)| [a, b, z]).collect()).unwrap();
        let d = uniform_vec(&mut stream(seed, 1), 12);
        let back = refine(&refine(&c, &d).unwrap(), &d.iter().map(|v| -v).collect::<Vec<_>>()).unwrap();
        for (a, b) in back.points().iter().flatten().zip(c.points().iter().flatten()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let same = refine(&c, &[0.0; 12]).unwrap();
        for (a, b) in same.points().iter().flatten().zip(c.points().iter().flatten()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn pre_mask_telescopes_to_the_sum_of_increments() {
    for seed in 0..5 {
        let (states, grid) = run(DecoderConfig::desk(), seed);
        let (h, w, ch) = (grid.height(), grid.width(), grid.channels());
        for (l, s) in states.iter().enumerate() {
            for q in 0..s.len() {
                for cell in 0..h * w {
                    let f = grid.cell_flat(cell);
                    let mut want = 0.0;
                    for prev in &states[..=l] {
                        let e = &prev.mask_embedding[q];
                        want += (0..ch).map(|c| f[c] * e[c]).sum::<f64>();
                    }
                    let got = s.pre_mask[q][cell];
                    assert!(
                        (got - want).abs() <= 1e-12 * (1.0 + want.abs()),
                        "seed {seed} layer {l} q {q}"
                    );
                }
            }
        }
    }
}

#[test]
fn one_to_one_outputs_ignore_the_extra_queries() {
    for r in [1, 2, 3] {
        let cfg = DecoderConfig {
            one_to_many_r: r,
            ..DecoderConfig::desk()
        };
        let scene = desk_scene(12, 4).unwrap();
        let p = DecoderParams::random(cfg, scene.features.channels(), 12).unwrap();
        let with = Decoder::new(p.clone())
            .unwrap()
            .run(&scene.features)
            .unwrap();
        let without = Decoder::new(p.without_one_to_many())
            .unwrap()
            .run(&scene.features)
            .unwrap();
        for (a, b) in with.iter().zip(&without) {
            assert_eq!(a.len(), 8 * (1 + r));
            assert_eq!(a.one_to_one(), *b);
        }
    }
}

#[test]
fn one_to_many_queries_never_see_each_others_blocks() {
    // perturbing the one-to-many queries leaves the one-to-one block untouched
    let cfg = DecoderConfig {
        one_to_many_r: 2,
        ..DecoderConfig::desk()
    };
    let scene = desk_scene(13, 3).unwrap();
    let p = DecoderParams::random(cfg, scene.features.channels(), 13).unwrap();
    let mut q = p.clone();
    let mut r = stream(99, 0);
    for row in q.queries.iter_mut().skip(8) {
        for v in row.iter_mut() {
            *v += r.random_range(-0.5..0.5);
        }
    }
    let a = Decoder::new(p).unwrap().run(&scene.features).unwrap();
    let b = Decoder::new(q).unwrap().run(&scene.features).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.one_to_one(), y.one_to_one());
        assert_ne!(x.one_to_many(), y.one_to_many());
    }
}

#[test]
fn mask_is_block_diagonal_over_q_blocks() {
    let m = one_to_many_mask(3, 2);
    assert_eq!(m.len(), 9);
    for i in 0..9 {
        for j in 0..9 {
            let same = i / 3 == j / 3 || (i >= 3 && j >= 3);
            assert_eq!(m[i][j] == 0.0, same, "({i},{j})");
        }
    }
}

#[test]
fn truncated_decoder_reproduces_the_prefix() {
    let (full, _) = run(DecoderConfig::desk(), 21);
    let scene = desk_scene(21, 4).unwrap();
    let p = DecoderParams::random(DecoderConfig::desk(), scene.features.channels(), 21).unwrap();
    let short = Decoder::new(p.truncated(1))
        .unwrap()
        .run(&scene.features)
        .unwrap();
    assert_eq!(short.len(), 2);
    assert_eq!(short[..], full[..2]);
}

#[test]
fn desk_shapes() {
    let cfg = DecoderConfig {
        one_to_many_r: 2,
        ..DecoderConfig::desk()
    };
    let (states, grid) = run(cfg.clone(), 3);
    assert_eq!(states.len(), cfg.n_layers + 1);
    let n = cfg.n_queries * 3;
    for s in &states {
        assert_eq!(s.len(), n);
        assert_eq!(s.n_one_to_one, cfg.n_queries);
        assert!(s.embeddings.iter().all(|e| e.len() == cfg.d_model));
        assert!(s.ctrl.iter().all(|c| c.len() == cfg.n_ctrl));
        assert!(s
            .ctrl
            .iter()
            .all(|c| c.points().iter().flatten().all(|&v| v > 0.0 && v < 1.0)));
        assert!(s
            .pre_mask
            .iter()
            .all(|m| m.len() == grid.height() * grid.width()));
        assert!(s.mask_embedding.iter().all(|m| m.len() == grid.channels()));
        assert!(s.class_logits.iter().all(|c| c.len() == cfg.n_classes));
    }
}

#[test]
fn decoder_is_deterministic() {
    assert_eq!(
        run(DecoderConfig::desk(), 4).0,
        run(DecoderConfig::desk(), 4).0
    );
}
