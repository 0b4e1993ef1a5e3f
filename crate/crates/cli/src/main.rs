//! `lanegraph` command-line harness.
//!
//! Exit codes: 0 success, 1 validation error or bad usage, 2 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use lanegraph::attention::{
    count_ops, AttnConfig, DeformAttnParams, OpCounter, ReferenceHead, StandardAttnParams, Variant,
};
use lanegraph::bezier::{bernstein_matrix, ControlPointSet, DEFAULT_ORDER};
use lanegraph::decoder::{run_decoder, DecoderConfig, DecoderParams, QueryState};
use lanegraph::fit::{fit_demo, mean_coordinate_error, perturbed, FitConfig};
use lanegraph::gradcheck::run_gradcheck;
use lanegraph::grid::FeatureGrid;
use lanegraph::io::{
    self, evaluate_predictions, load_scene, save_scene, PredictionFile, SCHEMA_VERSION,
};
use lanegraph::losses::{total_loss, LossWeights, MaskSampling};
use lanegraph::matching::{hungarian, pairwise_cost, MaskCostMode, MatchCost};
use lanegraph::metrics::EvalConfig;
use lanegraph::scene::{generate_scene_with, SceneConfig};
use lanegraph::{Error, Result};
use serde_json::json;

/// Gradient entries above this relative error fail `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(
    name = "lanegraph",
    version,
    about = "Bezier centerline decoding laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene.
    Gen(GenArgs),
    /// Run the decoder on a scene and write per-layer predictions.
    Forward(ForwardArgs),
    /// Match predictions to GT with the Mask-L1 mix cost.
    Match(MatchArgs),
    /// Evaluate predictions against a scene's GT.
    Eval(EvalArgs),
    /// Finite-difference check of all analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Attention op counts and wall times.
    Bench(BenchArgs),
    /// Fit control points to a scene's GT from a perturbed start.
    Fit(FitArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output file; relative paths resolve against $LANEGRAPH_OUT_DIR. Prints to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    instances: usize,
    /// Bezier order N (N + 1 control points).
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    order: usize,
    /// 200×104 grid with 256 channels instead of 32×32 with 16.
    #[arg(long)]
    paper_scale: bool,
    /// Also write the GT as a prediction file.
    #[arg(long)]
    gt_pred: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct ForwardArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Parameter seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full-size decoder (10 layers, 256 channels, 200 queries, 32 offsets).
    #[arg(long)]
    paper_scale: bool,
    /// One-to-many repetition factor R.
    #[arg(long, default_value_t = 0)]
    one_to_many: usize,
    /// Also compute the deep-supervised loss breakdown.
    #[arg(long)]
    with_loss: bool,
    /// Include per-query mask logits in the predictions.
    #[arg(long)]
    with_masks: bool,
    #[arg(long)]
    dense_mask_cost: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Evaluate the mask cost on every cell instead of sampled points.
    #[arg(long)]
    dense_mask_cost: bool,
    /// Seed of the mask-cost point sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Apply the literal `P + 1·[P > 0.05]` remap to edge scores.
    #[arg(long)]
    v11m: bool,
    /// Points per polyline after arc-length resampling.
    #[arg(long, default_value_t = lanegraph::metrics::DEFAULT_RESAMPLE)]
    resample: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    paper_scale: bool,
    /// Queries timed per variant.
    #[arg(long, default_value_t = 32)]
    queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    /// Offset added to every GT coordinate for the starting point.
    #[arg(long, default_value_t = 0.05)]
    offset: f64,
    /// Write the fitted curves as a prediction file.
    #[arg(long)]
    pred_out: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

/// Writes to stdout, ignoring a closed pipe (e.g. `| head`).
fn stdout(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn emit(out: &OutArg, value: &serde_json::Value) -> Result<()> {
    match &out.out {
        Some(p) => io::write_json(&io::resolve_out_path(p), value),
        None => {
            stdout(&io::to_json_pretty(value)?);
            Ok(())
        }
    }
}

fn read_predictions(path: &Path) -> Result<PredictionFile> {
    let f: PredictionFile = io::read_json(path)?;
    f.validate()?;
    Ok(f)
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let cfg = if a.paper_scale {
        SceneConfig::paper_scale()
    } else {
        SceneConfig::desk()
    };
    let scene = generate_scene_with(a.seed, a.instances, a.order, &cfg)?;
    if let Some(p) = &a.gt_pred {
        io::write_json(
            &io::resolve_out_path(p),
            &PredictionFile::from_ground_truth(&scene.gt)?,
        )?;
    }
    match &a.out.out {
        Some(p) => save_scene(&io::resolve_out_path(p), &scene),
        None => {
            stdout(&io::to_json_pretty(&io::SceneFile::from_scene(&scene))?);
            Ok(())
        }
    }
}

fn cmd_forward(a: &ForwardArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let mut cfg = if a.paper_scale {
        DecoderConfig::paper_scale()
    } else {
        DecoderConfig::desk()
    };
    cfg.one_to_many_r = a.one_to_many;
    let params = DecoderParams::random(cfg, scene.features.channels(), a.seed)?;
    let states = run_decoder(&params, &scene.features)?;
    let layers = states
        .iter()
        .map(|s| PredictionFile::from_state(s, a.with_masks))
        .collect::<Result<Vec<_>>>()?;
    let loss = if a.with_loss {
        let cost = match_cost(a.dense_mask_cost, a.seed);
        Some(total_loss(
            &states,
            &scene.gt,
            &LossWeights::default(),
            &cost,
            MaskSampling {
                seed: a.seed,
                ..Default::default()
            },
            a.one_to_many,
        )?)
    } else {
        None
    };
    emit(
        &a.out,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "layers": layers,
            "loss": loss,
        }),
    )
}

fn match_cost(dense: bool, seed: u64) -> MatchCost {
    MatchCost {
        mask_mode: if dense {
            MaskCostMode::Dense
        } else {
            MaskCostMode::Sampled(MaskSampling {
                seed,
                ..Default::default()
            })
        },
        ..Default::default()
    }
}

/// Rebuilds a query state from a prediction file. Class logits are
/// `[ln p, ln(1 − p)]` so the softmax recovers the confidence.
fn state_from_predictions(pred: &PredictionFile, h: usize, w: usize) -> Result<(QueryState, bool)> {
    let has_masks = pred.instances.iter().all(|i| i.mask_logits.is_some());
    let mut ctrl = Vec::with_capacity(pred.instances.len());
    let mut pre_mask = Vec::with_capacity(pred.instances.len());
    let mut class_logits = Vec::with_capacity(pred.instances.len());
    for inst in &pred.instances {
        ctrl.push(ControlPointSet::new(inst.ctrl.clone())?);
        let m = match (&inst.mask_logits, has_masks) {
            (Some(m), true) if m.len() == h * w => m.clone(),
            (Some(_), true) => {
                return Err(Error::Validation(
                    "mask_logits do not match the GT grid".into(),
                ))
            }
            _ => vec![0.0; h * w],
        };
        pre_mask.push(m);
        let p = inst.confidence.clamp(1e-12, 1.0 - 1e-12);
        class_logits.push(vec![p.ln(), (1.0 - p).ln()]);
    }
    let n = ctrl.len();
    Ok((
        QueryState {
            height: h,
            width: w,
            n_one_to_one: n,
            embeddings: vec![Vec::new(); n],
            ctrl,
            mask_embedding: vec![Vec::new(); n],
            pre_mask,
            class_logits,
        },
        has_masks,
    ))
}

fn cmd_match(a: &MatchArgs) -> Result<()> {
    let pred = read_predictions(&a.pred)?;
    let scene = load_scene(&a.gt)?;
    let (state, has_masks) = state_from_predictions(&pred, scene.grid.h, scene.grid.w)?;
    let mut cost = match_cost(a.dense_mask_cost, a.seed);
    if !has_masks {
        eprintln!("note: predictions carry no mask_logits; mask cost disabled");
        cost.lambda_mask_bce = 0.0;
        cost.lambda_mask_dice = 0.0;
    }
    let assignment = if scene.gt.is_empty() || state.is_empty() {
        lanegraph::matching::Assignment::empty()
    } else {
        hungarian(&pairwise_cost(&state, &scene.gt, &cost)?)?
    };
    emit(
        &a.out,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "pairs": assignment.pairs,
            "total_cost": assignment.total_cost,
            "mask_cost": if !has_masks { "disabled" } else if a.dense_mask_cost { "dense" } else { "sampled" },
        }),
    )
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.resample < 2 {
        return Err(Error::Validation("--resample must be at least 2".into()));
    }
    let pred = read_predictions(&a.pred)?;
    let scene = load_scene(&a.gt)?;
    let cfg = EvalConfig {
        resample: a.resample,
        v11m: a.v11m,
        ..Default::default()
    };
    let report = evaluate_predictions(&pred, &scene, &cfg)?;
    let value = serde_json::to_value(&report)?;
    match &a.out.out {
        Some(p) => {
            io::write_json(&io::resolve_out_path(p), &value)?;
            stdout(&report.table());
        }
        None => {
            stdout(&io::to_json_pretty(&value)?);
            eprint!("{}", report.table());
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let report = run_gradcheck(a.seed)?;
    for e in &report.entries {
        eprintln!(
            "{:<20} checked {:>3}  max rel err {:.3e}",
            e.name, e.checked, e.max_rel_error
        );
    }
    emit(&a.out, &serde_json::to_value(&report)?)?;
    if report.max_rel_error >= GRADCHECK_TOLERANCE {
        return Err(Error::Validation(format!(
            "max relative gradient error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn bench_config(paper: bool) -> AttnConfig {
    if paper {
        AttnConfig {
            d_model: 256,
            n_ctrl: 4,
            n_samples: 32,
            grid_h: 200,
            grid_w: 104,
        }
    } else {
        AttnConfig {
            grid_h: 32,
            grid_w: 32,
            ..Default::default()
        }
    }
}

fn time_variant(
    variant: Variant,
    cfg: &AttnConfig,
    queries: usize,
    seed: u64,
) -> Result<(f64, OpCounter)> {
    let mut r = lanegraph::rng::stream(seed, 0xbe7c);
    let grid = FeatureGrid::new(
        cfg.grid_h,
        cfg.grid_w,
        cfg.d_model,
        lanegraph::rng::uniform_vec(&mut r, cfg.grid_h * cfg.grid_w * cfg.d_model),
    )?;
    let qs: Vec<Vec<f64>> = (0..queries)
        .map(|_| lanegraph::rng::uniform_vec(&mut r, cfg.d_model))
        .collect();
    let pts: Vec<[f64; 3]> = (0..cfg.n_ctrl)
        .map(|n| {
            let t = 0.2 + 0.6 * n as f64 / (cfg.n_ctrl - 1) as f64;
            [t, 0.5 + 0.1 * (t - 0.5), 0.5]
        })
        .collect();
    let ctrl = ControlPointSet::new(pts)?;
    let mut counter = OpCounter::default();
    let start;
    match variant {
        Variant::Standard => {
            let p = StandardAttnParams::random(cfg.d_model, cfg.d_model, &mut r);
            let kv = p.project(&grid)?;
            start = Instant::now();
            for q in &qs {
                p.attend(q, &kv, &mut counter)?;
            }
        }
        Variant::SinglePoint { heads } => {
            let p =
                DeformAttnParams::random(cfg.d_model, heads, cfg.n_samples, cfg.d_model, &mut r)?;
            let head = ReferenceHead::random(cfg.n_ctrl, &mut r);
            let v = p.project(&grid)?;
            start = Instant::now();
            for q in &qs {
                lanegraph::attention::spda_from_ctrl(q, &v, &ctrl, &head, &p, &mut counter)?;
            }
        }
        Variant::MultiPoint { points } => {
            let p =
                DeformAttnParams::random(cfg.d_model, points, cfg.n_samples, cfg.d_model, &mut r)?;
            let basis = bernstein_matrix(ctrl.order(), points - 1)?;
            let v = p.project(&grid)?;
            start = Instant::now();
            for q in &qs {
                lanegraph::attention::mpda_from_ctrl(q, &v, &ctrl, &basis, &p, &mut counter)?;
            }
        }
        Variant::Bezier => {
            let p = DeformAttnParams::random(
                cfg.d_model,
                cfg.n_ctrl,
                cfg.n_samples,
                cfg.d_model,
                &mut r,
            )?;
            let v = p.project(&grid)?;
            start = Instant::now();
            for q in &qs {
                lanegraph::attention::bda_projected(q, &v, &ctrl, &p, &mut counter)?;
            }
        }
    }
    let micros = start.elapsed().as_secs_f64() * 1e6 / queries.max(1) as f64;
    Ok((micros, counter))
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let cfg = bench_config(a.paper_scale);
    let variants = [
        Variant::Bezier,
        Variant::SinglePoint { heads: cfg.n_ctrl },
        Variant::MultiPoint { points: cfg.n_ctrl },
        Variant::MultiPoint { points: 16 },
        Variant::Standard,
    ];
    let mut rows = Vec::new();
    eprintln!(
        "{:<8} {:>14} {:>10} {:>12}",
        "variant", "MACs/query", "samples", "µs/query"
    );
    for v in variants {
        let analytic = count_ops(v, &cfg);
        let (micros, measured) = time_variant(v, &cfg, a.queries, a.seed)?;
        let per_query = measured.multiply_accumulates / a.queries.max(1) as u64;
        eprintln!(
            "{:<8} {:>14} {:>10} {:>12.1}",
            v.label(),
            analytic.multiply_accumulates,
            analytic.sample_calls,
            micros
        );
        rows.push(json!({
            "variant": v.label(),
            "macs": analytic.multiply_accumulates,
            "measured_macs": per_query,
            "sample_calls": analytic.sample_calls,
            "matmul_calls": analytic.matmul_calls,
            "micros_per_query": micros,
        }));
    }
    let macs: Vec<u64> = variants
        .iter()
        .map(|&v| count_ops(v, &cfg).multiply_accumulates)
        .collect();
    let ordering = macs[0] <= macs[1] && macs[1] < macs[2] && macs[2] < macs[3];
    emit(
        &a.out,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "config": cfg,
            "variants": rows,
            "ordering_holds": ordering,
        }),
    )
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let gt: Vec<ControlPointSet> = scene.gt.instances.iter().map(|i| i.ctrl.clone()).collect();
    let cfg = FitConfig {
        iterations: a.iterations,
        step_size: a.step,
        ..Default::default()
    };
    let result = fit_demo(&gt, perturbed(&gt, a.offset), &cfg)?;
    let err = mean_coordinate_error(&result.ctrl, &gt, &result.final_assignment)?;
    let pred = PredictionFile::from_ctrl(&result.ctrl, 1.0, &scene.gt.adjacency)?;
    let report = evaluate_predictions(&pred, &scene, &EvalConfig::default())?;
    if let Some(p) = &a.pred_out {
        io::write_json(&io::resolve_out_path(p), &pred)?;
    }
    eprintln!(
        "final loss {:.3e}  mean coordinate error {:.3e}  DET_l {:.2}",
        result.final_loss(),
        err,
        report.det_l
    );
    emit(
        &a.out,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "ctrl": result.ctrl,
            "loss_trace": result.loss_trace,
            "initial_assignment": result.initial_assignment,
            "final_assignment": result.final_assignment,
            "mean_coordinate_error": err,
            "metrics": report,
        }),
    )
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Forward(a) => cmd_forward(a),
        Command::Match(a) => cmd_match(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Fit(a) => cmd_fit(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
