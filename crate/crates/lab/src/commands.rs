//! One function per CLI subcommand. Each writes its artifacts into a fresh
//! output directory and returns the run manifest plus a one-line summary.

use std::path::{Path, PathBuf};

use icl_core::analysis::{
    alignment, classify_strategy, extract_constants, grid_search, per_context, GridResult, GridSpec, GridVariant,
    PerContextMetrics, Predictor,
};
use icl_core::attention::{Checkpoint, Model, ModelKind};
use icl_core::baselines::BaselinePredictor;
use icl_core::numerics::{mix_seed, Rng};
use icl_core::taskgen::{
    draw_fixed_sets, generate_batch, generate_transience_batch, Context, Dataset, TaskConfig, TransienceConfig,
};
use icl_core::training::{
    batch_seed, evaluate, new_model, train, train_with, EvalMetrics, EvalRecord, TrainFailure, TrainOutcome,
};
use serde::Serialize;

use crate::config::{BaselineChoice, ExperimentConfig};
use crate::error::{LabError, LabResult};
use crate::output::{read_numeric_csv, unix_now, CsvTable, OutputDir, RunManifest};
use crate::plot::{render, PlotKind};

// Salts separating the random streams of a run.
const SALT_EVAL: u64 = 1;
const SALT_ALIGN: u64 = 2;
const SALT_GRID: u64 = 3;
const SALT_COMPARE: u64 = 4;
const SALT_FIXED_SETS: u64 = 5;
const SALT_ICL_EVAL: u64 = 6;
const SALT_IWL_EVAL: u64 = 7;

#[derive(Debug)]
pub struct CommandOutput {
    pub manifest: RunManifest,
    pub summary: String,
}

fn contexts(task: &TaskConfig, seed: u64, salt: u64, count: usize) -> LabResult<Vec<Context>> {
    Ok(generate_batch(task, mix_seed(seed, salt), count)?)
}

/// Evaluation contexts used by `train` and for scatter data in `align`.
pub fn eval_set(cfg: &ExperimentConfig) -> LabResult<Vec<Context>> {
    contexts(&cfg.task, cfg.seed, SALT_EVAL, cfg.eval.scatter)
}

pub fn alignment_set(cfg: &ExperimentConfig) -> LabResult<Vec<Context>> {
    contexts(&cfg.task, cfg.seed, SALT_ALIGN, cfg.eval.alignment)
}

pub fn grid_set(cfg: &ExperimentConfig) -> LabResult<Vec<Context>> {
    contexts(&cfg.task, cfg.seed, SALT_GRID, cfg.eval.grid)
}

pub fn compare_set(cfg: &ExperimentConfig, n: usize) -> LabResult<Vec<Context>> {
    let task = TaskConfig { n, ..cfg.task.clone() };
    contexts(&task, cfg.seed, SALT_COMPARE ^ ((n as u64) << 8), cfg.eval.grid)
}

fn finish(out: OutputDir, command: &str, cfg: &ExperimentConfig, started: u64, summary: String) -> LabResult<CommandOutput> {
    let manifest = out.finish(command, cfg.hash(), cfg.seed, started)?;
    Ok(CommandOutput { manifest, summary })
}

pub fn cmd_gen(cfg: &ExperimentConfig, out_dir: &Path) -> LabResult<CommandOutput> {
    let started = unix_now();
    let count = cfg
        .gen
        .as_ref()
        .ok_or_else(|| LabError::Validation("config has no 'gen' section".into()))?
        .count;
    let dataset = Dataset {
        config: cfg.task.clone(),
        seed: cfg.seed,
        contexts: generate_batch(&cfg.task, cfg.seed, count)?,
    };
    dataset.validate()?;
    let mut out = OutputDir::create(out_dir)?;
    out.write_json("dataset.json", &dataset)?;
    out.write("config.json", cfg.to_json().as_bytes())?;
    let t = &cfg.task;
    let summary = format!("d={} C={} n={} count={count} seed={}", t.d, t.classes, t.n, cfg.seed);
    finish(out, "gen", cfg, started, summary)
}

fn checkpoint_name(step: u64) -> String {
    format!("checkpoints/step_{step:010}.json")
}

fn trace_table(trace: &[EvalRecord], softmax: bool, record_timing: bool) -> CsvTable {
    let mut header = vec!["step", "eval_loss", "eval_accuracy"];
    if softmax {
        header.extend(["c_sigma_eff", "c_eta_eff"]);
    }
    header.push("wall_ms");
    let mut t = CsvTable::new(header);
    for r in trace {
        let m = r.metrics[0];
        let mut row = vec![r.step as f64, m.loss, m.accuracy];
        if let Some((cs, ce)) = r.constants.filter(|_| softmax) {
            row.extend([cs, ce]);
        }
        row.push(if record_timing { r.wall_ms as f64 } else { 0.0 });
        t.push_numbers(&row);
    }
    t
}

fn write_checkpoints(out: &mut OutputDir, checkpoints: &[Checkpoint]) -> LabResult<()> {
    for ck in checkpoints {
        out.write_json(&checkpoint_name(ck.step), ck)?;
    }
    Ok(())
}

/// Writes whatever a failed run produced, then returns the failure.
fn salvage(out: &mut OutputDir, failure: TrainFailure, softmax: bool, record_timing: bool) -> LabError {
    let _ = out.write_csv("trace.csv", &trace_table(&failure.trace, softmax, record_timing));
    if let Some(ck) = &failure.last_good {
        let _ = out.write_json("last_good.json", ck);
    }
    LabError::from(failure)
}

pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> LabResult<CommandOutput> {
    let started = unix_now();
    let kind = cfg.model_kind()?;
    let tc = cfg.train_config()?;
    let eval = eval_set(cfg)?;
    let mut out = OutputDir::create(out_dir)?;
    out.write("config.json", cfg.to_json().as_bytes())?;
    let softmax = kind.is_softmax();
    let outcome = match train(kind, &cfg.task, &tc, &eval) {
        Ok(o) => o,
        Err(f) => return Err(salvage(&mut out, f, softmax, cfg.record_timing)),
    };
    out.write_csv("trace.csv", &trace_table(&outcome.trace, softmax, cfg.record_timing))?;
    write_checkpoints(&mut out, &outcome.checkpoints)?;
    let last = outcome.checkpoints.last().expect("step-0 checkpoint");
    out.write_json("final.json", last)?;
    let summary = match outcome.trace.last() {
        Some(r) => format!(
            "{} steps, final eval loss {:.4}, accuracy {:.3}",
            outcome.state.step, r.metrics[0].loss, r.metrics[0].accuracy
        ),
        None => format!("{} steps, no evaluation step reached", outcome.state.step),
    };
    finish(out, "train", cfg, started, summary)
}

pub fn load_checkpoint(path: &Path) -> LabResult<Checkpoint> {
    if !path.is_file() {
        return Err(LabError::Missing(format!("checkpoint {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| LabError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    ck.validate()?;
    Ok(ck)
}

/// A checkpoint file, or every checkpoint of a `train` run directory in step
/// order.
pub fn load_checkpoints(path: &Path) -> LabResult<Vec<Checkpoint>> {
    if path.is_file() {
        return Ok(vec![load_checkpoint(path)?]);
    }
    let dir = path.join("checkpoints");
    if !dir.is_dir() {
        return Err(LabError::Missing(format!(
            "{} is neither a checkpoint file nor a run directory",
            path.display()
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| LabError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut cks = files.iter().map(|p| load_checkpoint(p)).collect::<LabResult<Vec<_>>>()?;
    cks.sort_by_key(|c| c.step);
    if cks.is_empty() {
        return Err(LabError::Missing(format!("no checkpoints in {}", dir.display())));
    }
    Ok(cks)
}

fn check_task(ck: &Checkpoint, task: &TaskConfig) -> LabResult<()> {
    if ck.d != task.d || ck.classes != task.classes {
        return Err(LabError::Validation(format!(
            "checkpoint has d={} C={} but the config task has d={} C={}",
            ck.d, ck.classes, task.d, task.classes
        )));
    }
    Ok(())
}

fn surface_table(result: &GridResult) -> CsvTable {
    let mut header: Vec<String> = result.variant.axis_names().iter().map(|s| s.to_string()).collect();
    header.push("loss".into());
    let mut t = CsvTable::new(header);
    for p in &result.surface {
        let mut row = p.params.clone();
        row.push(p.loss);
        t.push_numbers(&row);
    }
    t
}

#[derive(Serialize)]
struct FittedBaseline {
    predictor: BaselinePredictor,
    /// Mean loss at the optimum on the fitting contexts, when fitted.
    fit_loss: Option<f64>,
}

fn scatter_tables(a: &[PerContextMetrics], b: &[PerContextMetrics]) -> [(&'static str, CsvTable); 3] {
    let table = |f: fn(&PerContextMetrics) -> f64| {
        let mut t = CsvTable::new(["metric_a", "metric_b"]);
        for (x, y) in a.iter().zip(b) {
            t.push_numbers(&[f(x), f(y)]);
        }
        t
    };
    [
        ("scatter_loss.csv", table(|m| m.loss)),
        ("scatter_entropy.csv", table(|m| m.entropy)),
        ("scatter_p_correct.csv", table(|m| m.p_correct)),
    ]
}

/// Fits (or takes) the baseline, reports alignment at every checkpoint and
/// per-context scatter data at the last one.
pub fn cmd_align(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> LabResult<CommandOutput> {
    let started = unix_now();
    let settings = cfg
        .align
        .as_ref()
        .ok_or_else(|| LabError::Validation("config has no 'align' section".into()))?;
    let checkpoints = load_checkpoints(checkpoint)?;
    for ck in &checkpoints {
        check_task(ck, &cfg.task)?;
    }
    let fitted = match &settings.baseline {
        BaselineChoice::Fixed { predictor } => FittedBaseline {
            predictor: *predictor,
            fit_loss: None,
        },
        BaselineChoice::Fit { variant, spec } => {
            let r = grid_search(*variant, spec, &grid_set(cfg)?)?;
            FittedBaseline {
                predictor: r.best_predictor(),
                fit_loss: Some(r.best.loss),
            }
        }
    };
    let baseline = fitted.predictor;
    let align_ctx = alignment_set(cfg)?;
    let mut trace = CsvTable::new(["step", "preds_diff", "cos_sim", "model_diff", "excluded"]);
    let mut last_report = None;
    for ck in &checkpoints {
        let r = alignment(&ck.model(), &baseline, &align_ctx)?;
        trace.push_numbers(&[ck.step as f64, r.preds_diff, r.cos_sim, r.model_diff, r.excluded as f64]);
        last_report = Some(r);
    }
    let final_model = checkpoints.last().expect("non-empty").model();
    let scatter_ctx = eval_set(cfg)?;
    let ma = per_context(&final_model, &scatter_ctx)?;
    let mb = per_context(&baseline, &scatter_ctx)?;

    let mut out = OutputDir::create(out_dir)?;
    out.write("config.json", cfg.to_json().as_bytes())?;
    out.write_json("baseline.json", &fitted)?;
    out.write_csv("alignment.csv", &trace)?;
    for (name, table) in scatter_tables(&ma, &mb) {
        out.write_csv(name, &table)?;
    }
    let report = last_report.expect("non-empty");
    out.write_json("report.json", &report)?;
    let summary = format!(
        "{} checkpoint(s); final preds_diff {:.4}, cos_sim {:.4}, model_diff {:.4}",
        checkpoints.len(),
        report.preds_diff,
        report.cos_sim,
        report.model_diff
    );
    finish(out, "align", cfg, started, summary)
}

pub fn cmd_gridsearch(cfg: &ExperimentConfig, out_dir: &Path) -> LabResult<CommandOutput> {
    let started = unix_now();
    let g = cfg
        .grid
        .as_ref()
        .ok_or_else(|| LabError::Validation("config has no 'grid' section".into()))?;
    let result = grid_search(g.variant, &g.spec, &grid_set(cfg)?)?;
    let mut out = OutputDir::create(out_dir)?;
    out.write("config.json", cfg.to_json().as_bytes())?;
    out.write_csv("surface.csv", &surface_table(&result))?;
    out.write_json("best.json", &result.best)?;
    let summary = format!("best {:?} at {:?}, loss {:.5}", g.variant, result.best.params, result.best.loss);
    finish(out, "gridsearch", cfg, started, summary)
}

#[derive(Serialize)]
struct ExtractRow {
    step: u64,
    c_sigma_eff: f64,
    c_eta_eff: f64,
    residual: f64,
    strategy: icl_core::analysis::Strategy,
}

pub fn cmd_extract(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> LabResult<CommandOutput> {
    let started = unix_now();
    let checkpoints = load_checkpoints(checkpoint)?;
    let rows: Vec<ExtractRow> = checkpoints
        .iter()
        .map(|ck| {
            let w = ck.weights();
            let k = extract_constants(&w, ck.d, ck.classes);
            ExtractRow {
                step: ck.step,
                c_sigma_eff: k.c_sigma_eff,
                c_eta_eff: k.c_eta_eff,
                residual: k.residual,
                strategy: classify_strategy(&w, ck.d, ck.classes),
            }
        })
        .collect();
    let mut table = CsvTable::new(["step", "c_sigma_eff", "c_eta_eff", "residual"]);
    for r in &rows {
        table.push_numbers(&[r.step as f64, r.c_sigma_eff, r.c_eta_eff, r.residual]);
    }
    let mut out = OutputDir::create(out_dir)?;
    out.write_csv("constants.csv", &table)?;
    let last = rows.last().expect("non-empty");
    out.write_json("constants.json", last)?;
    let summary = format!(
        "c_sigma_eff {:.4}, c_eta_eff {:.4}, residual {:.4}, strategy {:?}",
        last.c_sigma_eff, last.c_eta_eff, last.residual, last.strategy
    );
    finish(out, "extract", cfg, started, summary)
}

fn mean_metrics<P: Predictor + ?Sized>(p: &P, ctxs: &[Context]) -> LabResult<EvalMetrics> {
    let m = per_context(p, ctxs)?;
    let n = m.len() as f64;
    let mut hits = 0usize;
    for ctx in ctxs {
        let probs = p.predict(ctx)?;
        hits += usize::from(icl_core::training::argmax(&probs) == ctx.y_query);
    }
    Ok(EvalMetrics {
        loss: m.iter().map(|x| x.loss).sum::<f64>() / n,
        accuracy: hits as f64 / n,
    })
}

#[derive(Serialize)]
struct CompareFit {
    n: usize,
    gd_step: Vec<f64>,
    kernel_gd: Vec<f64>,
    adaptive: Option<Vec<f64>>,
}

/// Evaluates fitted baselines and trained models across context lengths on
/// identical contexts per length. Baselines are fitted on those contexts.
pub fn cmd_compare(cfg: &ExperimentConfig, out_dir: &Path) -> LabResult<CommandOutput> {
    let started = unix_now();
    let c = cfg
        .compare
        .as_ref()
        .ok_or_else(|| LabError::Validation("config has no 'compare' section".into()))?;
    let mut trained: Vec<(&str, Model)> = Vec::new();
    for (name, path) in [("linear", &c.linear), ("frozen_qk", &c.frozen_qk), ("softmax", &c.softmax)] {
        if let Some(p) = path {
            let ck = load_checkpoint(p).map_err(|e| match e {
                LabError::Missing(m) => LabError::Missing(format!("trained {name} model: {m}")),
                other => other,
            })?;
            check_task(&ck, &cfg.task)?;
            trained.push((name, ck.model()));
        }
    }
    let mut names = vec!["gd_step", "kernel_gd"];
    if c.adaptive_grid.is_some() {
        names.push("adaptive");
    }
    names.extend(trained.iter().map(|(n, _)| *n));
    let mut header = vec!["n".to_string()];
    for n in &names {
        header.push(format!("{n}_loss"));
        header.push(format!("{n}_accuracy"));
    }
    let mut table = CsvTable::new(header);
    let mut fits = Vec::new();
    for &n in &c.lengths {
        let ctxs = compare_set(cfg, n)?;
        let fit = |variant, spec: &GridSpec| grid_search(variant, spec, &ctxs);
        let gd = fit(GridVariant::GdStep, &c.gd_grid)?;
        let kgd = fit(GridVariant::KernelGd, &c.kernel_grid)?;
        let adaptive = c
            .adaptive_grid
            .as_ref()
            .map(|g| fit(GridVariant::Adaptive { include_self: false }, g))
            .transpose()?;
        let mut row = vec![n as f64];
        let mut push = |m: EvalMetrics| row.extend([m.loss, m.accuracy]);
        push(mean_metrics(&gd.best_predictor(), &ctxs)?);
        push(mean_metrics(&kgd.best_predictor(), &ctxs)?);
        if let Some(a) = &adaptive {
            push(mean_metrics(&a.best_predictor(), &ctxs)?);
        }
        for (_, model) in &trained {
            push(evaluate(model, &ctxs)?);
        }
        table.push_numbers(&row);
        fits.push(CompareFit {
            n,
            gd_step: gd.best.params,
            kernel_gd: kgd.best.params,
            adaptive: adaptive.map(|a| a.best.params),
        });
    }
    let mut out = OutputDir::create(out_dir)?;
    out.write("config.json", cfg.to_json().as_bytes())?;
    out.write_csv("compare.csv", &table)?;
    out.write_json("fits.json", &fits)?;
    let summary = format!("{} models x {} context lengths", names.len(), c.lengths.len());
    finish(out, "compare", cfg, started, summary)
}

fn metrics_table(trace: &[EvalRecord], which: usize) -> CsvTable {
    let mut t = CsvTable::new(["step", "loss", "accuracy"]);
    for r in trace {
        let m = r.metrics[which];
        t.push_numbers(&[r.step as f64, m.loss, m.accuracy]);
    }
    t
}

/// Trains attention plus MLP on contexts whose class vectors come from `m`
/// fixed sets, evaluating on fresh class vectors (ICL) and on the fixed sets
/// (ICL+IWL).
pub fn cmd_transience(cfg: &ExperimentConfig, out_dir: &Path) -> LabResult<CommandOutput> {
    let started = unix_now();
    let s = cfg
        .transience
        .as_ref()
        .ok_or_else(|| LabError::Validation("config has no 'transience' section".into()))?;
    let tc = cfg.train_config()?;
    let kind = cfg.model.unwrap_or(ModelKind::Softmax);
    let tcfg = TransienceConfig {
        base: cfg.task.clone(),
        m: s.m,
    };
    tcfg.validate()?;
    let sets = draw_fixed_sets(&tcfg, &mut Rng::new(mix_seed(cfg.seed, SALT_FIXED_SETS)));
    let icl_eval = contexts(&cfg.task, cfg.seed, SALT_ICL_EVAL, s.eval_count)?;
    let iwl_count = s.eval_count.div_ceil(s.m) * s.m;
    let iwl_eval = generate_transience_batch(&tcfg, &sets, &mut Rng::new(mix_seed(cfg.seed, SALT_IWL_EVAL)), iwl_count)?;
    if tc.batch_size % s.m != 0 {
        return Err(LabError::Validation(format!(
            "batch_size ({}) must be a multiple of m ({})",
            tc.batch_size, s.m
        )));
    }
    let model = new_model(kind, cfg.task.d, cfg.task.classes, &tc, true);
    let mut out = OutputDir::create(out_dir)?;
    out.write("config.json", cfg.to_json().as_bytes())?;
    let result: Result<TrainOutcome, TrainFailure> = train_with(
        model,
        &tc,
        cfg.task.d,
        cfg.task.classes,
        |step| {
            let mut rng = Rng::new(batch_seed(tc.seed, step));
            generate_transience_batch(&tcfg, &sets, &mut rng, tc.batch_size)
        },
        &[&icl_eval, &iwl_eval],
    );
    let outcome = match result {
        Ok(o) => o,
        Err(f) => {
            if let Some(ck) = &f.last_good {
                let _ = out.write_json("last_good.json", ck);
            }
            return Err(LabError::from(f));
        }
    };
    out.write_csv("icl.csv", &metrics_table(&outcome.trace, 0))?;
    out.write_csv("iwl.csv", &metrics_table(&outcome.trace, 1))?;
    out.write_json("final.json", outcome.checkpoints.last().expect("step-0 checkpoint"))?;
    let summary = match outcome.trace.last() {
        Some(r) => format!(
            "final accuracy: ICL {:.3}, ICL+IWL {:.3}",
            r.metrics[0].accuracy, r.metrics[1].accuracy
        ),
        None => "no evaluation step reached".into(),
    };
    finish(out, "transience", cfg, started, summary)
}

/// Plot kind for a CSV when none is requested: files named `scatter*` are
/// scatter plots, everything else line plots.
pub fn auto_kind(path: &Path) -> PlotKind {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    if stem.starts_with("scatter") {
        PlotKind::Scatter
    } else {
        PlotKind::Line
    }
}

pub fn cmd_plot(inputs: &[PathBuf], kind: Option<PlotKind>, out_dir: &Path) -> LabResult<CommandOutput> {
    let started = unix_now();
    if inputs.is_empty() {
        return Err(LabError::Validation("plot needs at least one CSV".into()));
    }
    let mut rendered = Vec::new();
    for path in inputs {
        let data = read_numeric_csv(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
        let svg = render(&data, kind.unwrap_or_else(|| auto_kind(path)), &stem)?;
        rendered.push((format!("{stem}.svg"), svg));
    }
    let mut out = OutputDir::create(out_dir)?;
    for (name, svg) in &rendered {
        out.write(name, svg.as_bytes())?;
    }
    let manifest = out.finish("plot", String::new(), 0, started)?;
    let summary = format!("{} plot(s) written", rendered.len());
    Ok(CommandOutput { manifest, summary })
}

