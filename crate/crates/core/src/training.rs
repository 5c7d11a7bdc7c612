//! Cross-entropy on the query prediction, exact gradients, and Adam.
//!
//! Gradients are derived by hand through the query-row computation
//! (`attention::attend`), which is the only path that reaches the loss.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::extract_constants;
use crate::attention::{
    attend, build_token_matrix, construct_softmax_weights, label_probs, mlp_forward, AttentionWeights, Checkpoint,
    KernelSpec, MlpWeights, Model, ModelKind, TokenMatrix,
};
use crate::error::{Error, Result};
use crate::numerics::{dot, mix_seed, Matrix, Rng};
use crate::taskgen::{generate_context, Context, TaskConfig};

pub fn ce_loss(pred: &[f64], y: usize) -> f64 {
    -pred[y].max(1e-300).ln()
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Gradient buffers shaped like a [`Model`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub attention: AttentionWeights,
    pub mlp: Option<MlpWeights>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        let dim = model.weights.dim();
        Self {
            attention: AttentionWeights::zeros(dim),
            mlp: model.mlp.as_ref().map(|_| MlpWeights::zeros(dim)),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let a = &self.attention;
        let mut out = vec![a.w_q.data(), a.w_k.data(), a.w_v.data(), a.w_o.data()];
        if let Some(m) = &self.mlp {
            out.extend([m.w1.data(), &m.b1[..], m.w2.data(), &m.b2[..]]);
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Mutable parameter slices in a fixed order: `W_Q, W_K, W_V, W_O`, then
/// `W1, b1, W2, b2` when the model has an MLP.
pub fn param_slices_mut(model: &mut Model) -> Vec<&mut [f64]> {
    let Model { weights, mlp, .. } = model;
    let AttentionWeights { w_q, w_k, w_v, w_o } = weights;
    let mut out = vec![w_q.data_mut(), w_k.data_mut(), w_v.data_mut(), w_o.data_mut()];
    if let Some(m) = mlp {
        let MlpWeights { w1, b1, w2, b2 } = m;
        out.extend([w1.data_mut(), &mut b1[..], w2.data_mut(), &mut b2[..]]);
    }
    out
}

/// Adds `scale * dL/dparams` for one context to `grads`; returns the loss.
fn backprop_one(model: &Model, x: &TokenMatrix, y: usize, scale: f64, grads: &mut Gradients) -> Result<f64> {
    let (d, dim) = (x.d(), x.dim());
    let w = &model.weights;
    let q_row = x.len() - 1;
    let trace = attend(&model.kind, w, x, q_row)?;

    let mlp_trace = match &model.mlp {
        Some(mlp) => Some(mlp_forward(mlp, &trace.out)?),
        None => None,
    };
    let final_token = mlp_trace.as_ref().map_or(&trace.out, |m| &m.out);
    let p = label_probs(final_token, d)?;
    let loss = ce_loss(&p, y);

    let mut d_out = vec![0.0; dim];
    for (j, &pj) in p.iter().enumerate() {
        d_out[d + j] = scale * (pj - if j == y { 1.0 } else { 0.0 });
    }

    let d_attn_out = match (&model.mlp, &mlp_trace, &mut grads.mlp) {
        (Some(mlp), Some(mt), Some(g)) => {
            for (b, &v) in g.b2.iter_mut().zip(&d_out) {
                *b += v;
            }
            g.w2.add_outer(1.0, &mt.hidden, &d_out);
            let d_hidden = mlp.w2.matvec(&d_out)?;
            let d_pre: Vec<f64> = d_hidden
                .iter()
                .zip(&mt.pre)
                .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
                .collect();
            g.w1.add_outer(1.0, &trace.out, &d_pre);
            for (b, &v) in g.b1.iter_mut().zip(&d_pre) {
                *b += v;
            }
            let through = mlp.w1.matvec(&d_pre)?;
            d_out.iter().zip(&through).map(|(a, b)| a + b).collect()
        }
        _ => d_out,
    };

    // out = t + W_O value, value = W_V mixed, mixed = sum_i attn_i t_i
    let ga = &mut grads.attention;
    ga.w_o.add_outer(1.0, &d_attn_out, &trace.value);
    let d_value = w.w_o.vecmat(&d_attn_out)?;
    ga.w_v.add_outer(1.0, &d_value, &trace.mixed);
    let d_mixed = w.w_v.vecmat(&d_value)?;
    let d_attn: Vec<f64> = (0..x.len()).map(|i| dot(&d_mixed, x.token(i))).collect();

    let query = x.token(q_row);
    match &model.kind {
        ModelKind::Kernel {
            kernel: KernelSpec::Rbf { sigma2 },
        } => {
            let mut d_query_proj = vec![0.0; dim];
            for (i, (&da, k)) in d_attn.iter().zip(&trace.key_proj).enumerate() {
                let coef = da * trace.attn[i] / sigma2;
                if coef == 0.0 {
                    continue;
                }
                let diff: Vec<f64> = trace.query_proj.iter().zip(k).map(|(a, b)| a - b).collect();
                ga.w_k.add_outer(coef, &diff, x.token(i));
                crate::numerics::axpy(-coef, &diff, &mut d_query_proj);
            }
            ga.w_q.add_outer(1.0, &d_query_proj, query);
        }
        ModelKind::Kernel {
            kernel: KernelSpec::Custom(k),
        } => {
            return Err(Error::Unsupported(format!(
                "custom kernel '{}' has no derivative; it cannot be trained",
                k.name
            )))
        }
        kind => {
            let (d_scores, score_scale) = if kind.is_softmax() {
                let mean: f64 = trace.attn.iter().zip(&d_attn).map(|(a, g)| a * g).sum();
                let ds = trace.attn.iter().zip(&d_attn).map(|(a, g)| a * (g - mean)).collect();
                (ds, 1.0 / (dim as f64).sqrt())
            } else {
                (d_attn, 1.0)
            };
            if kind.qk_trainable() {
                // s_i = c (W_Q t) . (W_K t_i)
                let mut g = vec![0.0; dim];
                for (i, &ds) in d_scores.iter().enumerate() {
                    crate::numerics::axpy(score_scale * ds, x.token(i), &mut g);
                }
                ga.w_k.add_outer(1.0, &trace.query_proj, &g);
                let d_query_proj = w.w_k.matvec(&g)?;
                ga.w_q.add_outer(1.0, &d_query_proj, query);
            }
        }
    }
    Ok(loss)
}

/// Mean cross-entropy over `batch` and its exact gradient. Contexts are
/// accumulated in index order.
pub fn loss_and_grad(model: &Model, batch: &[Context]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut grads = Gradients::zeros_like(model);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ctx in batch {
        loss += backprop_one(model, &build_token_matrix(ctx), ctx.y_query, scale, &mut grads)?;
    }
    loss *= scale;
    if !loss.is_finite() || !grads.slices().iter().all(|s| s.iter().all(|g| g.is_finite())) {
        return Err(Error::Diverged {
            step: 0,
            detail: format!("loss {loss}, gradient norm {}", grads.global_norm()),
        });
    }
    Ok((loss, grads))
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gaussian() * scale)
}

/// Standard normal entries times `init_scale`. The frozen-QK kind gets the
/// fixed `W_Q`, `W_K` of the softmax construction instead.
pub fn init_weights(kind: &ModelKind, d: usize, c: usize, init_scale: f64, rng: &mut Rng) -> AttentionWeights {
    let dim = d + c;
    let mut w = AttentionWeights {
        w_q: random_matrix(rng, dim, dim, init_scale),
        w_k: random_matrix(rng, dim, dim, init_scale),
        w_v: random_matrix(rng, dim, dim, init_scale),
        w_o: random_matrix(rng, dim, dim, init_scale),
    };
    if let ModelKind::SoftmaxFrozenQk { c_sigma } = kind {
        let fixed = construct_softmax_weights(*c_sigma, 1.0, d, c);
        w.w_q = fixed.w_q;
        w.w_k = fixed.w_k;
    }
    w
}

/// Normal weights times `init_scale`, zero biases.
pub fn init_mlp(d: usize, c: usize, init_scale: f64, rng: &mut Rng) -> MlpWeights {
    let dim = d + c;
    let h = MlpWeights::hidden_for(dim);
    MlpWeights {
        w1: random_matrix(rng, dim, h, init_scale),
        b1: vec![0.0; h],
        w2: random_matrix(rng, h, dim, init_scale),
        b2: vec![0.0; dim],
    }
}

fn default_init_scale() -> f64 {
    0.002
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub eval_every: u64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Cap on the global L2 norm of the gradient.
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// Batch 2048 and evaluation every 100 steps; the learning rate is the
    /// per-dimension softmax value (linear attention used 5e-5 throughout).
    pub fn full_scale(d: usize, iterations: u64) -> Self {
        let learning_rate = match d {
            2 => 6e-4,
            3 => 3e-5,
            5 => 1e-4,
            _ => 5e-4,
        };
        Self {
            learning_rate,
            batch_size: 2048,
            iterations,
            eval_every: 100,
            init_scale: 0.002,
            clip: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        if !(self.init_scale >= 0.0) {
            return bad("init_scale must be non-negative");
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return bad("clip must be positive when set");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(model: &Model, beta1: f64, beta2: f64, eps: f64) -> Self {
        let sizes: Vec<usize> = Gradients::zeros_like(model).slices().iter().map(|s| s.len()).collect();
        Self {
            beta1,
            beta2,
            eps,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Frozen `W_Q`/`W_K` are skipped.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let qk_trainable = model.kind.qk_trainable();
        let grad_slices = grads.slices();
        for (k, param) in param_slices_mut(model).into_iter().enumerate() {
            if k < 2 && !qk_trainable {
                continue;
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, (p, &g)) in param.iter_mut().zip(grad_slices[k]).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *p -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        let Gradients { attention, mlp } = grads;
        for (_, m) in attention.named_mut() {
            m.data_mut().iter_mut().for_each(|g| *g *= s);
        }
        if let Some(m) = mlp {
            for buf in [m.w1.data_mut(), &mut m.b1[..], m.w2.data_mut(), &mut m.b2[..]] {
                buf.iter_mut().for_each(|g| *g *= s);
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let optimizer = Adam::new(&model, cfg.beta1, cfg.beta2, cfg.eps);
        Self {
            model,
            optimizer,
            step: 0,
            seed: cfg.seed,
        }
    }

    /// [`loss_and_grad`] with divergence reported at the current step.
    pub fn loss_and_grad(&self, batch: &[Context]) -> Result<(f64, Gradients)> {
        loss_and_grad(&self.model, batch).map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged { step: self.step, detail },
            other => other,
        })
    }

    pub fn checkpoint(&self, d: usize, c: usize) -> Checkpoint {
        Checkpoint::from_model(&self.model, d, c, self.step, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(model: &Model, contexts: &[Context]) -> Result<EvalMetrics> {
    if contexts.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    let mut loss = 0.0;
    let mut hits = 0usize;
    for ctx in contexts {
        let p = model.predict(ctx)?;
        loss += ce_loss(&p, ctx.y_query);
        hits += usize::from(argmax(&p) == ctx.y_query);
    }
    let n = contexts.len() as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        accuracy: hits as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    /// One entry per evaluation set, in the order they were given.
    pub metrics: Vec<EvalMetrics>,
    /// Effective `(c_sigma, c_eta)` for softmax-attention models.
    pub constants: Option<(f64, f64)>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub trace: Vec<EvalRecord>,
    /// Snapshot at step 0 and at every evaluation step.
    pub checkpoints: Vec<Checkpoint>,
}

#[derive(Debug, Error)]
#[error("{error}")]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Checkpoint>,
    pub trace: Vec<EvalRecord>,
}

/// Seed of the contexts drawn for training step `step`.
pub fn batch_seed(run_seed: u64, step: u64) -> u64 {
    mix_seed(run_seed, step)
}

/// Fresh contexts for `step`; context `i` uses `Rng::for_index(batch_seed, i)`.
pub fn sample_batch(task: &TaskConfig, run_seed: u64, step: u64, size: usize) -> Result<Vec<Context>> {
    let seed = batch_seed(run_seed, step);
    (0..size)
        .map(|i| generate_context(task, &mut Rng::for_index(seed, i as u64)))
        .collect()
}

pub fn new_model(kind: ModelKind, d: usize, c: usize, cfg: &TrainConfig, with_mlp: bool) -> Model {
    let mut rng = Rng::new(mix_seed(cfg.seed, u64::MAX));
    let weights = init_weights(&kind, d, c, cfg.init_scale, &mut rng);
    let mlp = with_mlp.then(|| init_mlp(d, c, cfg.init_scale, &mut rng));
    Model { kind, weights, mlp }
}

/// The training loop: sample a batch, differentiate, clip, Adam step, and
/// every `eval_every` steps evaluate on each of `eval_sets`.
pub fn train_with(
    model: Model,
    cfg: &TrainConfig,
    d: usize,
    c: usize,
    mut next_batch: impl FnMut(u64) -> Result<Vec<Context>>,
    eval_sets: &[&[Context]],
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let fail = |error, last_good, trace| TrainFailure {
        error,
        last_good,
        trace,
    };
    if let Err(e) = cfg.validate().and_then(|_| model.kind.validate()) {
        return Err(fail(e, None, Vec::new()));
    }
    let start = Instant::now();
    let mut state = TrainState::new(model, cfg);
    let mut trace = Vec::new();
    let mut checkpoints = vec![state.checkpoint(d, c)];
    while state.step < cfg.iterations {
        let step_result = next_batch(state.step).and_then(|batch| state.loss_and_grad(&batch));
        let (_, mut grads) = match step_result {
            Ok(v) => v,
            Err(e) => return Err(fail(e, checkpoints.last().cloned(), trace)),
        };
        if let Some(max_norm) = cfg.clip {
            clip_global_norm(&mut grads, max_norm);
        }
        state.optimizer.step(&mut state.model, &grads, cfg.learning_rate);
        state.step += 1;
        if state.model.weights.validate(d + c).is_err() {
            let e = Error::Diverged {
                step: state.step,
                detail: "non-finite weights after update".into(),
            };
            return Err(fail(e, checkpoints.last().cloned(), trace));
        }

        if state.step.is_multiple_of(cfg.eval_every) {
            let metrics = match eval_sets
                .iter()
                .map(|set| evaluate(&state.model, set))
                .collect::<Result<Vec<_>>>()
            {
                Ok(m) => m,
                Err(e) => return Err(fail(e, checkpoints.last().cloned(), trace)),
            };
            let constants = state.model.kind.is_softmax().then(|| {
                let k = extract_constants(&state.model.weights, d, c);
                (k.c_sigma_eff, k.c_eta_eff)
            });
            trace.push(EvalRecord {
                step: state.step,
                metrics,
                constants,
                wall_ms: start.elapsed().as_millis() as u64,
            });
            checkpoints.push(state.checkpoint(d, c));
        }
    }
    Ok(TrainOutcome {
        state,
        trace,
        checkpoints,
    })
}

/// Trains a freshly initialised model of `kind` on contexts drawn from `task`.
pub fn train(
    kind: ModelKind,
    task: &TaskConfig,
    cfg: &TrainConfig,
    eval_set: &[Context],
) -> std::result::Result<TrainOutcome, TrainFailure> {
    if let Err(e) = task.validate() {
        return Err(TrainFailure {
            error: e,
            last_good: None,
            trace: Vec::new(),
        });
    }
    let model = new_model(kind, task.d, task.classes, cfg, false);
    train_with(
        model,
        cfg,
        task.d,
        task.classes,
        |step| sample_batch(task, cfg.seed, step, cfg.batch_size),
        &[eval_set],
    )
}
