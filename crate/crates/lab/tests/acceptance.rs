//! Acceptance suite. Every criterion prints one `criterion N: PASS|FAIL`
//! line (to stderr, bypassing the test harness's capture) and then asserts.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use icl_core::analysis::{
    adaptive_variability, dense_sparse_eta_fit, extract_constants, grid_search, pearson, GridAxis, GridSpec,
    GridVariant,
};
use icl_core::attention::{
    construct_kernel_gd_weights, construct_linear_gd_weights, construct_softmax_weights, AttentionWeights,
    KernelSpec, Model, ModelKind,
};
use icl_core::baselines::{
    adaptive_lr, adaptive_predict, gd_step_predict, kernel_gd_predict, sigma2_from_c_sigma, BaselinePredictor,
};
use icl_core::numerics::{mix_seed, sample_gaussian, Matrix, Rng};
use icl_core::taskgen::{generate_batch, generate_dense_sparse_pair, Context, DenseSparseParams, TaskConfig};
use icl_core::training::{evaluate, init_mlp, loss_and_grad, new_model, param_slices_mut, TrainConfig};
use icl_lab::commands::{alignment_set, cmd_align, cmd_compare, cmd_train, cmd_transience, eval_set};
use icl_lab::config::{AlignSettings, BaselineChoice, CompareSettings, TransienceSettings};
use icl_lab::output::read_numeric_csv;
use icl_lab::ExperimentConfig;

fn report(id: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id}: {verdict} ({detail})");
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_01_constructions_match_closed_forms() {
    let start = Instant::now();
    let (eta, sigma2, c_sigma, c_eta) = (4.0, 0.7, 3.0, 6.0);
    let mut worst = [0.0f64; 3];
    for d in [2, 3, 5] {
        for n in [10, 100] {
            let task = TaskConfig::new(d, 5, n);
            let linear = Model::new(ModelKind::Linear, construct_linear_gd_weights(eta, n, d, 5));
            let rbf = KernelSpec::Rbf { sigma2 };
            let kernel = Model::new(ModelKind::Kernel { kernel: rbf }, construct_kernel_gd_weights(eta, n, d, 5));
            let softmax = Model::new(ModelKind::Softmax, construct_softmax_weights(c_sigma, c_eta, d, 5));
            for ctx in generate_batch(&task, mix_seed(1, (d * 1000 + n) as u64), 1000).unwrap() {
                let devs = [
                    max_dev(&linear.predict(&ctx).unwrap(), &gd_step_predict(&ctx, eta).unwrap()),
                    max_dev(&kernel.predict(&ctx).unwrap(), &kernel_gd_predict(&ctx, eta, &rbf).unwrap()),
                    max_dev(
                        &softmax.predict(&ctx).unwrap(),
                        &adaptive_predict(&ctx, c_eta, c_sigma, true).unwrap(),
                    ),
                ];
                for (w, v) in worst.iter_mut().zip(devs) {
                    *w = w.max(v);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&w| w <= 1e-12) && secs < 10.0;
    report(
        1,
        pass,
        &format!(
            "max deviation linear {:.1e}, kernel {:.1e}, softmax {:.1e}; {secs:.1}s",
            worst[0], worst[1], worst[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_02_adaptive_is_kernel_gd_with_adaptive_rate() {
    let start = Instant::now();
    let task = TaskConfig::new(3, 5, 100);
    let (c_eta, c_sigma) = (8.0, 5.0);
    let sigma2 = sigma2_from_c_sigma(c_sigma, task.model_dim());
    let kernel = KernelSpec::Rbf { sigma2 };
    let mut worst = 0.0f64;
    for ctx in generate_batch(&task, 2, 10_000).unwrap() {
        let eta = adaptive_lr(&ctx, c_eta, sigma2, false).unwrap();
        let a = adaptive_predict(&ctx, c_eta, c_sigma, false).unwrap();
        let k = kernel_gd_predict(&ctx, eta, &kernel).unwrap();
        worst = worst.max(max_dev(&a, &k));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-12 && secs < 10.0;
    report(2, pass, &format!("max deviation {worst:.1e} over 10^4 contexts; {secs:.1}s"));
    assert!(pass);
}

fn random_model(kind: ModelKind, d: usize, c: usize, seed: u64, mlp: bool) -> Model {
    let mut rng = Rng::new(seed);
    let dim = d + c;
    let mut m = || Matrix::new(dim, dim, sample_gaussian(&mut rng, dim * dim)).unwrap().scale(0.5);
    let weights = AttentionWeights {
        w_q: m(),
        w_k: m(),
        w_v: m(),
        w_o: m(),
    };
    let mlp = mlp.then(|| init_mlp(d, c, 0.5, &mut Rng::new(seed ^ 0xff)));
    Model { kind, weights, mlp }
}

/// Worst `|fd - g| / (max(|fd|, |g|) + 1e-5)` over all parameters. The
/// relative tolerance is 1e-4; the floor keeps parameters whose gradient is
/// essentially zero from dividing by nothing.
fn worst_gradient_error(model: &Model, batch: &[Context]) -> f64 {
    const H: f64 = 1e-5;
    let (_, grads) = loss_and_grad(model, batch).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (block, values) in analytic.iter().enumerate() {
        if block < 2 && !model.kind.qk_trainable() {
            worst = worst.max(values.iter().fold(0.0, |a, g| a.max(g.abs())));
            continue;
        }
        for (i, &g) in values.iter().enumerate() {
            let x0 = param_slices_mut(&mut probe)[block][i];
            param_slices_mut(&mut probe)[block][i] = x0 + H;
            let up = loss_and_grad(&probe, batch).unwrap().0;
            param_slices_mut(&mut probe)[block][i] = x0 - H;
            let down = loss_and_grad(&probe, batch).unwrap().0;
            param_slices_mut(&mut probe)[block][i] = x0;
            let fd = (up - down) / (2.0 * H);
            worst = worst.max((fd - g).abs() / (fd.abs().max(g.abs()) + 1e-5));
        }
    }
    worst
}

#[test]
fn criterion_03_gradients_match_finite_differences() {
    let start = Instant::now();
    let task = TaskConfig::new(3, 5, 10);
    let kinds = [
        (ModelKind::Linear, false),
        (ModelKind::Kernel { kernel: KernelSpec::DotProduct }, false),
        (ModelKind::Kernel { kernel: KernelSpec::Rbf { sigma2: 2.0 } }, false),
        (ModelKind::Softmax, false),
        (ModelKind::SoftmaxFrozenQk { c_sigma: 8f64.sqrt() }, false),
        (ModelKind::Softmax, true),
    ];
    let mut worst = 0.0f64;
    let mut instances = 0;
    for (k, (kind, mlp)) in kinds.iter().enumerate() {
        for i in 0..20u64 {
            let model = random_model(*kind, 3, 5, 1000 * k as u64 + i, *mlp);
            let batch = generate_batch(&task, mix_seed(3, i), 2).unwrap();
            worst = worst.max(worst_gradient_error(&model, &batch));
            instances += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && secs < 60.0;
    report(
        3,
        pass,
        &format!("{instances} instances over 6 model kinds, worst relative error {worst:.1e}; {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_extraction_round_trip() {
    let start = Instant::now();
    let mut rng = Rng::new(4);
    let mut exact = true;
    let mut worst_shift = 0.0f64;
    for trial in 0..100 {
        let (d, c) = ([2, 3, 5][trial % 3], 5);
        let c_sigma = rng.gaussian() * 10.0;
        let c_eta = rng.gaussian() * 10.0;
        let w = construct_softmax_weights(c_sigma, c_eta, d, c);
        let k = extract_constants(&w, d, c);
        exact &= k.c_sigma_eff == c_sigma && k.c_eta_eff == c_eta && k.residual == 0.0;
        // arbitrary shift per column of the label block of W_O W_V
        let mut shifted = w.clone();
        for col in 0..c {
            let kappa = rng.gaussian() * 50.0;
            for j in 0..c {
                shifted.w_o[(d + j, d + col)] += kappa;
            }
        }
        let ks = extract_constants(&shifted, d, c);
        worst_shift = worst_shift.max((ks.c_eta_eff - c_eta).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = exact && worst_shift <= 1e-12 && secs < 1.0;
    report(
        4,
        pass,
        &format!("exact recovery {exact}, c_eta drift under column shifts {worst_shift:.1e}; {secs:.2}s"),
    );
    assert!(pass);
}

fn desk_config(kind: ModelKind, learning_rate: f64, iterations: u64, eval_every: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(TaskConfig::new(3, 5, 100));
    cfg.seed = 11;
    cfg.model = Some(kind);
    cfg.train = Some(TrainConfig {
        learning_rate,
        batch_size: 256,
        iterations,
        eval_every,
        init_scale: 0.002,
        clip: Some(1.0),
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        seed: 0,
    });
    cfg
}

fn last(path: &Path, column: &str) -> f64 {
    *read_numeric_csv(path).unwrap().column(column).unwrap().last().unwrap()
}

#[test]
fn criterion_05_linear_attention_aligns_with_one_step_gd() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = desk_config(ModelKind::Linear, 1e-3, 20_000, 2_000);
    cfg.align = Some(AlignSettings {
        baseline: BaselineChoice::Fit {
            variant: GridVariant::GdStep,
            spec: GridSpec {
                axes: vec![GridAxis::log(1.0, 1e3, 100)],
            },
        },
    });
    let run = tmp.path().join("train");
    cmd_train(&cfg, &run).unwrap();
    let align = tmp.path().join("align");
    cmd_align(&cfg, &run, &align).unwrap();
    let trace = align.join("alignment.csv");
    let cos = last(&trace, "cos_sim");
    let preds = last(&trace, "preds_diff");
    let cos0 = read_numeric_csv(&trace).unwrap().column("cos_sim").unwrap()[0];
    let scatter = read_numeric_csv(&align.join("scatter_loss.csv")).unwrap();
    let corr = pearson(scatter.column("metric_a").unwrap(), scatter.column("metric_b").unwrap());
    let secs = start.elapsed().as_secs_f64();
    let pass = cos >= 0.95 && preds <= 0.1 && corr >= 0.95 && secs <= 1800.0;
    report(
        5,
        pass,
        &format!(
            "cos_sim {cos:.4} (initial {cos0:.4}), preds_diff {preds:.4}, loss correlation {corr:.4}; {secs:.0}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_softmax_attention_matches_adaptive_kernel_gd() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = desk_config(ModelKind::Softmax, 1e-3, 20_000, 2_000);
    cfg.align = Some(AlignSettings {
        baseline: BaselineChoice::Fit {
            variant: GridVariant::Adaptive { include_self: true },
            spec: GridSpec {
                axes: vec![GridAxis::log(1.0, 1e3, 80), GridAxis::log(0.1, 1e3, 80)],
            },
        },
    });
    let run = tmp.path().join("train");
    cmd_train(&cfg, &run).unwrap();
    let align = tmp.path().join("align");
    cmd_align(&cfg, &run, &align).unwrap();
    let preds = last(&align.join("alignment.csv"), "preds_diff");

    let ck: icl_core::attention::Checkpoint =
        serde_json::from_str(&std::fs::read_to_string(run.join("final.json")).unwrap()).unwrap();
    let model = ck.model();
    let k = extract_constants(&model.weights, 3, 5);
    let eval = eval_set(&cfg).unwrap();
    let model_loss = evaluate(&model, &eval).unwrap().loss;
    let extracted = BaselinePredictor::Adaptive {
        c_eta: k.c_eta_eff,
        c_sigma: k.c_sigma_eff,
        include_self: true,
    };
    let extracted_loss = eval
        .iter()
        .map(|c| -extracted.predict(c).unwrap()[c.y_query].max(1e-300).ln())
        .sum::<f64>()
        / eval.len() as f64;
    let rel = (extracted_loss - model_loss).abs() / model_loss;
    let secs = start.elapsed().as_secs_f64();
    let pass = preds <= 0.15 && rel <= 0.10 && secs <= 4.0 * 3600.0;
    report(
        6,
        pass,
        &format!(
            "preds_diff {preds:.4}; extracted (c_sigma {:.3}, c_eta {:.3}) loss {extracted_loss:.4} vs model {model_loss:.4} (rel {rel:.3}); {secs:.0}s",
            k.c_sigma_eff, k.c_eta_eff
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_model_ordering() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(TaskConfig::new(2, 5, 100));
    cfg.seed = 7;
    cfg.eval.grid = 1000;
    cfg.compare = Some(CompareSettings {
        lengths: vec![100],
        linear: None,
        frozen_qk: None,
        softmax: None,
        gd_grid: GridSpec {
            axes: vec![GridAxis::log(1.0, 10f64.powf(2.5), 100)],
        },
        kernel_grid: GridSpec {
            axes: vec![GridAxis::log(1.0, 1e3, 100), GridAxis::log(1e-3, 1e2, 100)],
        },
        adaptive_grid: Some(GridSpec {
            axes: vec![GridAxis::log(0.1, 1e3, 100), GridAxis::log(1e-2, 1e4, 100)],
        }),
    });
    let out = tmp.path().join("compare");
    cmd_compare(&cfg, &out).unwrap();
    let t = read_numeric_csv(&out.join("compare.csv")).unwrap();
    let get = |c: &str| t.column(c).unwrap()[0];
    let (la, lk, lg) = (get("adaptive_loss"), get("kernel_gd_loss"), get("gd_step_loss"));
    let (ak, ag) = (get("kernel_gd_accuracy"), get("gd_step_accuracy"));
    let secs = start.elapsed().as_secs_f64();
    let pass = la <= lk && lk <= lg && ak >= ag && secs < 600.0;
    report(
        7,
        pass,
        &format!(
            "loss adaptive {la:.4} <= kernel {lk:.4} <= gd {lg:.4}; accuracy kernel {ak:.3} >= gd {ag:.3}; {secs:.1}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_dense_sparse_learning_rates() {
    let start = Instant::now();
    let task = TaskConfig::new(2, 5, 100);
    // a generally good width, fitted on ordinary contexts
    let fit_ctx = generate_batch(&task, 80, 1000).unwrap();
    let kgd = grid_search(
        GridVariant::KernelGd,
        &GridSpec {
            axes: vec![GridAxis::log(1.0, 1e3, 60), GridAxis::log(1e-3, 1e1, 60)],
        },
        &fit_ctx,
    )
    .unwrap();
    let sigma2 = kgd.best.params[1];
    let (dense, sparse) =
        generate_dense_sparse_pair(&task, &mut Rng::new(81), 4000, DenseSparseParams::default()).unwrap();
    let fit = dense_sparse_eta_fit(
        &dense,
        &sparse,
        sigma2,
        GridAxis::log(1e-1, 1e5, 300),
        GridAxis::log(1e-2, 1e4, 300),
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = fit.eta_dense < fit.eta_sparse
        && fit.mean_eta_dense < fit.mean_eta_sparse
        && fit.loss_sparse < fit.loss_dense
        && secs < 600.0;
    report(
        8,
        pass,
        &format!(
            "{} contexts per set, sigma2 {sigma2:.4}: eta* dense {:.2} < sparse {:.2}; mean eta(X) dense {:.2} < sparse {:.2}; loss sparse {:.4} < dense {:.4}; {secs:.1}s",
            dense.len(),
            fit.eta_dense,
            fit.eta_sparse,
            fit.mean_eta_dense,
            fit.mean_eta_sparse,
            fit.loss_sparse,
            fit.loss_dense
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_variability_vanishes_for_wide_kernels() {
    let start = Instant::now();
    let sigma2s: Vec<f64> = (0..=50).map(|k| 10f64.powf(-2.0 + k as f64 * 0.1)).collect();
    let mut details = Vec::new();
    let mut pass = true;
    for d in [2, 10] {
        let ctxs = generate_batch(&TaskConfig::new(d, 5, 100), 90 + d as u64, 100).unwrap();
        let table = adaptive_variability(&ctxs, &sigma2s).unwrap();
        let monotone = table.windows(2).all(|w| w[1].1 < w[0].1);
        let tail = table.last().unwrap().1;
        pass &= monotone && tail < 1e-2;
        details.push(format!(
            "d={d}: ratio {:.3} at sigma2={} down to {tail:.1e} at {}, monotone {monotone}",
            table[0].1,
            sigma2s[0],
            sigma2s.last().unwrap()
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    report(9, pass, &format!("{}; {secs:.2}s", details.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_10_transience_smoke() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(TaskConfig::new(3, 5, 30));
    cfg.seed = 10;
    cfg.train = Some(TrainConfig {
        learning_rate: 3e-3,
        batch_size: 64,
        iterations: 3000,
        eval_every: 500,
        init_scale: 0.002,
        clip: Some(1.0),
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        seed: 0,
    });
    cfg.transience = Some(TransienceSettings { m: 2, eval_count: 512 });
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cmd_transience(&cfg, &a).unwrap();
    cmd_transience(&cfg, &b).unwrap();
    let same = ["icl.csv", "iwl.csv", "final.json"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let icl = last(&a.join("icl.csv"), "accuracy");
    let iwl = last(&a.join("iwl.csv"), "accuracy");
    let secs = start.elapsed().as_secs_f64();
    let pass = iwl > icl && same && secs <= 900.0;
    report(
        10,
        pass,
        &format!("final accuracy ICL+IWL {iwl:.3} > ICL {icl:.3}; byte-identical rerun {same}; {secs:.0}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_11_untrained_models_are_at_chance() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(TaskConfig::new(3, 5, 100));
    cfg.seed = 12;
    cfg.eval.scatter = 512;
    let eval = eval_set(&cfg).unwrap();
    assert_eq!(alignment_set(&cfg).unwrap().len(), 100);
    let c = 5.0f64;
    let three_sigma = 3.0 * ((1.0 / c) * (1.0 - 1.0 / c) / 512.0).sqrt();
    let mut details = Vec::new();
    let mut pass = true;
    let kinds = [
        (ModelKind::Linear, false),
        (ModelKind::Kernel { kernel: KernelSpec::Rbf { sigma2: 1.0 } }, false),
        (ModelKind::Softmax, false),
        (ModelKind::SoftmaxFrozenQk { c_sigma: 8f64.sqrt() }, false),
        (ModelKind::Softmax, true),
    ];
    for (kind, mlp) in kinds {
        let tc = TrainConfig {
            seed: 12,
            ..TrainConfig::full_scale(3, 1)
        };
        let model = new_model(kind, 3, 5, &tc, mlp);
        let m = evaluate(&model, &eval).unwrap();
        let ok = (m.loss - c.ln()).abs() <= 0.02 && (m.accuracy - 1.0 / c).abs() <= three_sigma;
        pass &= ok;
        details.push(format!(
            "{}{}: loss {:.4}, accuracy {:.3}",
            kind.name(),
            if mlp { "+mlp" } else { "" },
            m.loss,
            m.accuracy
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 5.0;
    report(
        11,
        pass,
        &format!("ln C = {:.4}, 1/C +- {three_sigma:.3}; {}; {secs:.2}s", c.ln(), details.join("; ")),
    );
    assert!(pass);
}
