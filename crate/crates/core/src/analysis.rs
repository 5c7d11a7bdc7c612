//! Comparing predictors: alignment metrics, per-context metrics, grid
//! searches over baseline parameters, and effective constants of trained
//! softmax attention.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionWeights, KernelSpec, Model};
use crate::baselines::{adaptive_lr, c_sigma_from_sigma2, BaselinePredictor, ContextCache};
use crate::error::{Error, Result};
use crate::numerics::{dot, shifted_mean, Matrix};
use crate::taskgen::Context;
use crate::training::ce_loss;

/// Anything that maps a context to a class distribution.
pub trait Predictor {
    fn predict(&self, ctx: &Context) -> Result<Vec<f64>>;
}

impl Predictor for Model {
    fn predict(&self, ctx: &Context) -> Result<Vec<f64>> {
        Model::predict(self, ctx)
    }
}

impl Predictor for BaselinePredictor {
    fn predict(&self, ctx: &Context) -> Result<Vec<f64>> {
        BaselinePredictor::predict(self, ctx)
    }
}

impl<F: Fn(&Context) -> Result<Vec<f64>>> Predictor for F {
    fn predict(&self, ctx: &Context) -> Result<Vec<f64>> {
        self(ctx)
    }
}

pub const DEFAULT_SENSITIVITY_STEP: f64 = 1e-4;

fn is_instability(e: &Error) -> bool {
    matches!(e, Error::NonFiniteLogits | Error::NonFinite(_))
}

/// `C x d` central-difference Jacobian of the prediction with respect to
/// `x_query`, perturbed in the ambient space. `None` when any evaluation is
/// non-finite.
pub fn sensitivities<P: Predictor + ?Sized>(pred: &P, ctx: &Context, h: f64) -> Result<Option<Matrix>> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h must be positive, got {h}")));
    }
    let (d, c) = (ctx.d(), ctx.classes());
    let mut jac = Matrix::zeros(c, d);
    let mut probe = ctx.clone();
    for i in 0..d {
        let x0 = ctx.x_query[i];
        let mut eval = |x: f64| -> Result<Option<Vec<f64>>> {
            probe.x_query[i] = x;
            match pred.predict(&probe) {
                Ok(p) if p.iter().all(|v| v.is_finite()) => Ok(Some(p)),
                Ok(_) => Ok(None),
                Err(e) if is_instability(&e) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let (Some(plus), Some(minus)) = (eval(x0 + h)?, eval(x0 - h)?) else {
            return Ok(None);
        };
        probe.x_query[i] = x0;
        for j in 0..c {
            jac[(j, i)] = (plus[j] - minus[j]) / (2.0 * h);
        }
    }
    Ok(jac.is_finite().then_some(jac))
}

/// Gradient of the probability of class `j` with respect to `x_query`.
pub fn sensitivity<P: Predictor + ?Sized>(pred: &P, ctx: &Context, j: usize, h: f64) -> Result<Option<Vec<f64>>> {
    if j >= ctx.classes() {
        return Err(Error::InvalidConfig(format!("class {j} out of range")));
    }
    Ok(sensitivities(pred, ctx, h)?.map(|m| m.row(j).to_vec()))
}

/// `u.v / sqrt(|u|^2 |v|^2)`, exactly 1 for identical non-zero inputs. Two
/// zero vectors count as aligned; one zero vector as orthogonal.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (uu, vv) = (dot(u, u), dot(v, v));
    match (uu == 0.0, vv == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot(u, v) / (uu * vv).sqrt()).clamp(-1.0, 1.0),
    }
}

fn dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub preds_diff: f64,
    pub cos_sim: f64,
    pub model_diff: f64,
    /// Contexts that entered the averages.
    pub n_contexts: usize,
    /// Contexts dropped because a prediction or sensitivity was non-finite.
    pub excluded: usize,
}

pub fn alignment<A, B>(a: &A, b: &B, contexts: &[Context]) -> Result<AlignmentReport>
where
    A: Predictor + ?Sized,
    B: Predictor + ?Sized,
{
    alignment_with_step(a, b, contexts, DEFAULT_SENSITIVITY_STEP)
}

pub fn alignment_with_step<A, B>(a: &A, b: &B, contexts: &[Context], h: f64) -> Result<AlignmentReport>
where
    A: Predictor + ?Sized,
    B: Predictor + ?Sized,
{
    if contexts.is_empty() {
        return Err(Error::InvalidConfig("alignment needs at least one context".into()));
    }
    let (mut preds, mut cos, mut model) = (0.0, 0.0, 0.0);
    let mut used = 0usize;
    for ctx in contexts {
        let pa = match a.predict(ctx) {
            Ok(p) => p,
            Err(e) if is_instability(&e) => continue,
            Err(e) => return Err(e),
        };
        let pb = match b.predict(ctx) {
            Ok(p) => p,
            Err(e) if is_instability(&e) => continue,
            Err(e) => return Err(e),
        };
        let (Some(ja), Some(jb)) = (sensitivities(a, ctx, h)?, sensitivities(b, ctx, h)?) else {
            continue;
        };
        let c = ctx.classes() as f64;
        preds += dist(&pa, &pb);
        cos += (0..ctx.classes()).map(|j| cosine(ja.row(j), jb.row(j))).sum::<f64>() / c;
        model += (0..ctx.classes()).map(|j| dist(ja.row(j), jb.row(j))).sum::<f64>() / c;
        used += 1;
    }
    if used == 0 {
        return Err(Error::AllContextsExcluded(contexts.len()));
    }
    let n = used as f64;
    Ok(AlignmentReport {
        preds_diff: preds / n,
        cos_sim: cos / n,
        model_diff: model / n,
        n_contexts: used,
        excluded: contexts.len() - used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerContextMetrics {
    pub loss: f64,
    pub entropy: f64,
    pub p_correct: f64,
}

impl PerContextMetrics {
    pub fn from_probs(p: &[f64], y: usize) -> Self {
        let max_entropy = (p.len() as f64).ln();
        let entropy: f64 = -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
        Self {
            loss: ce_loss(p, y),
            entropy: entropy.clamp(0.0, max_entropy),
            p_correct: p[y],
        }
    }
}

pub fn per_context<P: Predictor + ?Sized>(pred: &P, contexts: &[Context]) -> Result<Vec<PerContextMetrics>> {
    contexts
        .iter()
        .map(|ctx| Ok(PerContextMetrics::from_probs(&pred.predict(ctx)?, ctx.y_query)))
        .collect()
}

/// Sample Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n < 2.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    #[serde(default)]
    pub log: bool,
}

impl GridAxis {
    pub fn linear(min: f64, max: f64, count: usize) -> Self {
        Self { min, max, count, log: false }
    }

    pub fn log(min: f64, max: f64, count: usize) -> Self {
        Self { min, max, count, log: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min < self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "grid axis needs finite min < max, got [{}, {}]",
                self.min, self.max
            )));
        }
        if self.count < 2 {
            return Err(Error::InvalidConfig("grid axis needs at least 2 points".into()));
        }
        if self.log && !(self.min > 0.0) {
            return Err(Error::InvalidConfig("log-scale axis needs min > 0".into()));
        }
        Ok(())
    }

    /// Ascending grid values; endpoints are exact.
    pub fn values(&self) -> Vec<f64> {
        let last = (self.count - 1) as f64;
        (0..self.count)
            .map(|i| {
                if i == 0 {
                    return self.min;
                }
                if i == self.count - 1 {
                    return self.max;
                }
                let t = i as f64 / last;
                if self.log {
                    let (a, b) = (self.min.log10(), self.max.log10());
                    10f64.powf(a + t * (b - a))
                } else {
                    self.min + t * (self.max - self.min)
                }
            })
            .collect()
    }
}

/// Baseline family searched by [`grid_search`]. Axes, in order:
/// `GdStep: [eta]`, `KernelGd: [eta, sigma2]` (RBF),
/// `Adaptive: [c_eta, c_sigma]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridVariant {
    GdStep,
    KernelGd,
    Adaptive {
        #[serde(default)]
        include_self: bool,
    },
}

impl GridVariant {
    pub fn axis_names(&self) -> &'static [&'static str] {
        match self {
            GridVariant::GdStep => &["eta"],
            GridVariant::KernelGd => &["eta", "sigma2"],
            GridVariant::Adaptive { .. } => &["c_eta", "c_sigma"],
        }
    }

    pub fn predictor(&self, params: &[f64]) -> BaselinePredictor {
        match *self {
            GridVariant::GdStep => BaselinePredictor::GdStep { eta: params[0] },
            GridVariant::KernelGd => BaselinePredictor::KernelGd {
                eta: params[0],
                kernel: KernelSpec::Rbf { sigma2: params[1] },
            },
            GridVariant::Adaptive { include_self } => BaselinePredictor::Adaptive {
                c_eta: params[0],
                c_sigma: params[1],
                include_self,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
}

impl GridSpec {
    pub fn validate(&self, variant: &GridVariant) -> Result<()> {
        let want = variant.axis_names().len();
        if self.axes.len() != want {
            return Err(Error::InvalidConfig(format!(
                "{variant:?} needs {want} grid axes, got {}",
                self.axes.len()
            )));
        }
        if matches!(variant, GridVariant::KernelGd) && !(self.axes[1].min > 0.0) {
            return Err(Error::InvalidConfig("sigma2 axis must be positive".into()));
        }
        self.axes.iter().try_for_each(GridAxis::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub params: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub variant: GridVariant,
    pub best: GridPoint,
    /// Every grid point in lexicographic order of the axes.
    pub surface: Vec<GridPoint>,
}

impl GridResult {
    pub fn best_predictor(&self) -> BaselinePredictor {
        self.variant.predictor(&self.best.params)
    }
}

/// Mean of `losses` summed in sorted order, so the result does not depend on
/// the order of the contexts.
fn order_free_mean(losses: &mut [f64]) -> f64 {
    losses.sort_by(f64::total_cmp);
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Exhaustive mean cross-entropy over the grid. The argmin prefers the
/// smallest parameters on ties (first axis first).
pub fn grid_search(variant: GridVariant, spec: &GridSpec, contexts: &[Context]) -> Result<GridResult> {
    spec.validate(&variant)?;
    let second = spec.axes.get(1).map(GridAxis::values);
    search_values(variant, &spec.axes[0].values(), second.as_deref(), contexts)
}

/// One-dimensional search over the first parameter with the second fixed.
pub fn line_search(variant: GridVariant, axis: GridAxis, fixed: Option<f64>, contexts: &[Context]) -> Result<GridResult> {
    axis.validate()?;
    if fixed.is_some() != (variant.axis_names().len() == 2) {
        return Err(Error::InvalidConfig(format!("{variant:?}: fixed parameter mismatch")));
    }
    let second = fixed.map(|v| vec![v]);
    search_values(variant, &axis.values(), second.as_deref(), contexts)
}

fn search_values(variant: GridVariant, first: &[f64], second: Option<&[f64]>, contexts: &[Context]) -> Result<GridResult> {
    if contexts.is_empty() {
        return Err(Error::InvalidConfig("grid search needs at least one context".into()));
    }
    let caches: Vec<ContextCache> = contexts.iter().map(ContextCache::new).collect();
    let second_values = second.unwrap_or(&[0.0]);
    let mut losses = vec![0.0; caches.len()];
    // loss[a][b], filled column by column so per-context work on the second
    // axis is shared across the first
    let mut table = vec![vec![0.0; second_values.len()]; first.len()];
    for (b, &p2) in second_values.iter().enumerate() {
        let shared: Vec<Vec<f64>> = match variant {
            GridVariant::GdStep => Vec::new(),
            GridVariant::KernelGd => caches.iter().map(|c| c.rbf_class_sums(p2)).collect(),
            GridVariant::Adaptive { include_self } => {
                caches.iter().map(|c| c.adaptive_label_mass(p2, include_self)).collect()
            }
        };
        for (a, &p1) in first.iter().enumerate() {
            for (k, cache) in caches.iter().enumerate() {
                let p = match variant {
                    GridVariant::GdStep => cache.gd_step(p1)?,
                    GridVariant::KernelGd => cache.kernel_gd_from_sums(p1, &shared[k])?,
                    GridVariant::Adaptive { .. } => cache.adaptive_from_mass(p1, &shared[k])?,
                };
                losses[k] = ce_loss(&p, cache.y_query);
            }
            table[a][b] = order_free_mean(&mut losses);
        }
    }
    let mut surface = Vec::with_capacity(first.len() * second_values.len());
    for (a, &p1) in first.iter().enumerate() {
        for (b, &p2) in second_values.iter().enumerate() {
            let params = if second.is_none() { vec![p1] } else { vec![p1, p2] };
            surface.push(GridPoint {
                params,
                loss: table[a][b],
            });
        }
    }
    let mut best = 0;
    for (i, pt) in surface.iter().enumerate() {
        if pt.loss < surface[best].loss {
            best = i;
        }
    }
    Ok(GridResult {
        variant,
        best: surface[best].clone(),
        surface,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractedConstants {
    pub c_sigma_eff: f64,
    pub c_eta_eff: f64,
    /// Frobenius norm of `W_Q^T W_K` outside its x-block plus that of
    /// `W_V^T W_O^T` outside its y-block.
    pub residual: f64,
}

/// Effective `(c_sigma, c_eta)` of softmax attention.
///
/// `c_sigma` is the mean of the x-block diagonal of `W_Q^T W_K`. For `c_eta`
/// the label block of `W_O W_V` is used: adding a constant to one of its
/// columns adds the same amount to every logit, so each column is first
/// shifted to have zero off-diagonal mean, then the diagonal is averaged.
pub fn extract_constants(w: &AttentionWeights, d: usize, c: usize) -> ExtractedConstants {
    let a = w.qk_product();
    let b = w.value_product();
    let dim = d + c;
    let diag_x: Vec<f64> = (0..d).map(|i| a[(i, i)]).collect();
    let c_sigma_eff = shifted_mean(&diag_x);

    // (W_O W_V)[d + j, d + k] = b[d + k, d + j]
    let m = |j: usize, k: usize| b[(d + k, d + j)];
    let diag_y: Vec<f64> = (0..c)
        .map(|k| {
            let off: Vec<f64> = (0..c).filter(|&j| j != k).map(|j| m(j, k)).collect();
            let shift = if off.is_empty() { 0.0 } else { shifted_mean(&off) };
            m(k, k) - shift
        })
        .collect();
    let c_eta_eff = shifted_mean(&diag_y);

    let mut off_energy = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            if !(i < d && j < d) {
                off_energy += a[(i, j)] * a[(i, j)];
            }
            if !(i >= d && j >= d) {
                off_energy += b[(i, j)] * b[(i, j)];
            }
        }
    }
    ExtractedConstants {
        c_sigma_eff,
        c_eta_eff,
        residual: off_energy.sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Attends to similar exemplars and copies their labels.
    Selection,
    /// Attends to dissimilar exemplars and subtracts their labels.
    Elimination,
    Indeterminate,
}

pub fn classify_strategy(w: &AttentionWeights, d: usize, c: usize) -> Strategy {
    let k = extract_constants(w, d, c);
    if k.c_sigma_eff > 0.0 && k.c_eta_eff > 0.0 {
        Strategy::Selection
    } else if k.c_sigma_eff < 0.0 && k.c_eta_eff < 0.0 {
        Strategy::Elimination
    } else {
        Strategy::Indeterminate
    }
}

/// `S = sum_i e^{x_i . x_query / sigma2} / e^{1 / sigma2}` for one context.
pub fn neighbour_mass(ctx: &Context, sigma2: f64) -> f64 {
    ctx.query_dots().iter().map(|s| ((s - 1.0) / sigma2).exp()).sum()
}

/// Population standard deviation over mean, computed on values shifted by
/// the first one so identical inputs give exactly 0.
pub fn std_over_mean(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let base = values[0];
    let shifted: Vec<f64> = values.iter().map(|v| v - base).collect();
    let mean_shift = shifted.iter().sum::<f64>() / n;
    let var = shifted.iter().map(|s| (s - mean_shift) * (s - mean_shift)).sum::<f64>() / n;
    var.sqrt() / (base + mean_shift)
}

/// `(sigma2, std(S) / mean(S))` over `contexts` for each width.
pub fn adaptive_variability(contexts: &[Context], sigma2s: &[f64]) -> Result<Vec<(f64, f64)>> {
    let Some(first) = contexts.first() else {
        return Err(Error::InvalidConfig("need at least one context".into()));
    };
    let shape = (first.d(), first.classes(), first.n());
    if contexts.iter().any(|c| (c.d(), c.classes(), c.n()) != shape) {
        return Err(Error::InvalidConfig("contexts must share (d, C, n)".into()));
    }
    sigma2s
        .iter()
        .map(|&s2| {
            if !(s2 > 0.0) {
                return Err(Error::InvalidConfig(format!("sigma2 must be positive, got {s2}")));
            }
            let s: Vec<f64> = contexts.iter().map(|c| neighbour_mass(c, s2)).collect();
            Ok((s2, std_over_mean(&s)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenseSparseFit {
    pub sigma2: f64,
    pub eta_dense: f64,
    pub eta_sparse: f64,
    /// Kernel-GD optimum on the union of both datasets.
    pub eta_joint: f64,
    pub loss_dense: f64,
    pub loss_sparse: f64,
    /// Adaptive `c_eta` fitted on the union, at the matching sharpness.
    pub c_eta_joint: f64,
    pub mean_eta_dense: f64,
    pub mean_eta_sparse: f64,
}

/// Fits kernel GD's learning rate separately on dense and sparse queries at
/// a fixed width, and the adaptive step scale jointly.
pub fn dense_sparse_eta_fit(
    dense: &[Context],
    sparse: &[Context],
    sigma2: f64,
    eta_axis: GridAxis,
    c_eta_axis: GridAxis,
) -> Result<DenseSparseFit> {
    if dense.is_empty() || sparse.is_empty() {
        return Err(Error::NoDenseSparseContexts);
    }
    let fit = |set: &[Context]| line_search(GridVariant::KernelGd, eta_axis, Some(sigma2), set).map(|r| r.best);
    let d = fit(dense)?;
    let s = fit(sparse)?;
    let joint: Vec<Context> = dense.iter().chain(sparse).cloned().collect();
    let j = fit(&joint)?;

    let c_sigma = c_sigma_from_sigma2(sigma2, joint[0].model_dim());
    let c_eta_joint = line_search(GridVariant::Adaptive { include_self: false }, c_eta_axis, Some(c_sigma), &joint)?
        .best
        .params[0];
    let mean_eta = |set: &[Context]| -> Result<f64> {
        let mut total = 0.0;
        for ctx in set {
            total += adaptive_lr(ctx, c_eta_joint, sigma2, false)?;
        }
        Ok(total / set.len() as f64)
    };
    Ok(DenseSparseFit {
        sigma2,
        eta_dense: d.params[0],
        eta_sparse: s.params[0],
        eta_joint: j.params[0],
        loss_dense: d.loss,
        loss_sparse: s.loss,
        c_eta_joint,
        mean_eta_dense: mean_eta(dense)?,
        mean_eta_sparse: mean_eta(sparse)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{construct_softmax_weights, ModelKind};
    use crate::baselines::{adaptive_predict, gd_step_predict};
    use crate::numerics::Rng;
    use crate::taskgen::{generate_batch, TaskConfig};
    use crate::training::{init_weights, new_model, TrainConfig};

    fn batch(d: usize, n: usize, count: usize, seed: u64) -> Vec<Context> {
        generate_batch(&TaskConfig::new(d, 5, n), seed, count).unwrap()
    }

    #[test]
    fn constant_predictor_has_zero_sensitivity() {
        let ctx = &batch(3, 10, 1, 0)[0];
        let flat = |_: &Context| Ok(vec![0.2; 5]);
        let s = sensitivities(&flat, ctx, 1e-4).unwrap().unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gd_step_sensitivity_matches_analytic_jacobian() {
        let eta = 7.0;
        for ctx in batch(3, 20, 20, 1) {
            let p = gd_step_predict(&ctx, eta).unwrap();
            let scale = eta / ctx.n() as f64;
            let mut dz = vec![vec![0.0; 3]; 5];
            for (i, &y) in ctx.labels.iter().enumerate() {
                for k in 0..3 {
                    dz[y][k] += scale * ctx.xs[(i, k)];
                }
            }
            let pred = move |c: &Context| gd_step_predict(c, eta);
            let fd = sensitivities(&pred, &ctx, 1e-4).unwrap().unwrap();
            for j in 0..5 {
                for k in 0..3 {
                    let mean: f64 = (0..5).map(|l| p[l] * dz[l][k]).sum();
                    let exact = p[j] * (dz[j][k] - mean);
                    let got = fd[(j, k)];
                    assert!((got - exact).abs() <= 1e-3 * exact.abs() + 1e-9, "{got} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn sensitivities_sum_to_zero_over_classes() {
        let model = Model::new(ModelKind::Softmax, construct_softmax_weights(4.0, 6.0, 3, 5));
        for ctx in batch(3, 10, 10, 2) {
            let s = sensitivities(&model, &ctx, 1e-4).unwrap().unwrap();
            for k in 0..3 {
                let total: f64 = (0..5).map(|j| s[(j, k)]).sum();
                assert!(total.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn alignment_with_itself_is_exact() {
        let ctxs = batch(3, 10, 20, 3);
        let p = BaselinePredictor::Adaptive {
            c_eta: 5.0,
            c_sigma: 3.0,
            include_self: true,
        };
        let r = alignment(&p, &p, &ctxs).unwrap();
        assert_eq!((r.preds_diff, r.cos_sim, r.model_diff), (0.0, 1.0, 0.0));
        assert_eq!((r.n_contexts, r.excluded), (20, 0));
    }

    #[test]
    fn softmax_construction_aligns_with_adaptive_baseline() {
        let ctxs = batch(3, 20, 20, 4);
        let model = Model::new(ModelKind::Softmax, construct_softmax_weights(3.0, 5.0, 3, 5));
        let base = BaselinePredictor::Adaptive {
            c_eta: 5.0,
            c_sigma: 3.0,
            include_self: true,
        };
        let r = alignment(&model, &base, &ctxs).unwrap();
        assert!(r.preds_diff <= 1e-10, "{}", r.preds_diff);
        assert!(r.cos_sim > 1.0 - 1e-6, "{r:?}");
    }

    #[test]
    fn untrained_models_agree_on_chance() {
        let ctxs = batch(3, 10, 20, 5);
        let cfg = |seed| TrainConfig {
            seed,
            ..TrainConfig::full_scale(3, 1)
        };
        let a = new_model(ModelKind::Softmax, 3, 5, &cfg(1), false);
        let b = new_model(ModelKind::Softmax, 3, 5, &cfg(2), false);
        assert_ne!(a.weights, b.weights);
        assert!(alignment(&a, &b, &ctxs).unwrap().preds_diff < 1e-3);
    }

    #[test]
    fn unstable_contexts_are_excluded_and_counted() {
        let ctxs = batch(2, 10, 6, 6);
        let stable = |_: &Context| Ok(vec![0.2; 5]);
        let flaky = |c: &Context| {
            if c.y_query == ctxs[0].y_query {
                Err(Error::NonFiniteLogits)
            } else {
                Ok(vec![0.2; 5])
            }
        };
        let r = alignment(&stable, &flaky, &ctxs).unwrap();
        let bad = ctxs.iter().filter(|c| c.y_query == ctxs[0].y_query).count();
        assert_eq!(r.excluded, bad);
        assert_eq!(r.n_contexts, ctxs.len() - bad);
        let broken = |_: &Context| Err(Error::NonFiniteLogits);
        assert!(matches!(alignment(&stable, &broken, &ctxs), Err(Error::AllContextsExcluded(6))));
    }

    #[test]
    fn per_context_examples() {
        let ctxs = batch(2, 10, 10, 7);
        let uniform = |_: &Context| Ok(vec![0.2; 5]);
        for m in per_context(&uniform, &ctxs).unwrap() {
            assert!((m.loss - 5f64.ln()).abs() < 1e-15);
            assert!((m.entropy - 5f64.ln()).abs() < 1e-15);
            assert!((m.p_correct - 0.2).abs() < 1e-15);
        }
        let oracle = |c: &Context| {
            let mut p = vec![0.0; 5];
            p[c.y_query] = 1.0;
            Ok(p)
        };
        for m in per_context(&oracle, &ctxs).unwrap() {
            assert_eq!((m.loss, m.entropy, m.p_correct), (0.0, 0.0, 1.0));
        }
        let model = Model::new(ModelKind::Softmax, construct_softmax_weights(8.0, 9.0, 2, 5));
        for m in per_context(&model, &ctxs).unwrap() {
            assert!(m.entropy <= 5f64.ln() && m.entropy >= 0.0);
            assert!((m.loss + m.p_correct.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_axis_values() {
        assert_eq!(GridAxis::linear(0.0, 1.0, 3).values(), vec![0.0, 0.5, 1.0]);
        let v = GridAxis::log(1.0, 100.0, 3).values();
        assert_eq!((v[0], v[2]), (1.0, 100.0));
        assert!((v[1] - 10.0).abs() < 1e-12);
        assert!(GridAxis::linear(1.0, 1.0, 3).validate().is_err());
        assert!(GridAxis::linear(0.0, 1.0, 1).validate().is_err());
        assert!(GridAxis::log(0.0, 1.0, 3).validate().is_err());
    }

    #[test]
    fn grid_search_examples() {
        let ctxs = batch(2, 20, 200, 8);
        let spec = GridSpec {
            axes: vec![GridAxis::log(1e-9, 1e3, 25)],
        };
        let r = grid_search(GridVariant::GdStep, &spec, &ctxs).unwrap();
        assert!((r.surface[0].loss - 5f64.ln()).abs() < 1e-8);
        assert!(r.best.loss < 5f64.ln());
        assert_eq!(r, grid_search(GridVariant::GdStep, &spec, &ctxs).unwrap());

        let mut shuffled = ctxs.clone();
        shuffled.reverse();
        shuffled.rotate_left(37);
        assert_eq!(r, grid_search(GridVariant::GdStep, &spec, &shuffled).unwrap());

        let bad = GridSpec {
            axes: vec![GridAxis::log(1.0, 10.0, 3)],
        };
        assert!(grid_search(GridVariant::KernelGd, &bad, &ctxs).is_err());
    }

    #[test]
    fn grid_surface_matches_direct_predictors() {
        let ctxs = batch(2, 20, 30, 9);
        for (variant, axes) in [
            (GridVariant::KernelGd, vec![GridAxis::log(1.0, 100.0, 4), GridAxis::log(0.1, 10.0, 3)]),
            (
                GridVariant::Adaptive { include_self: true },
                vec![GridAxis::log(1.0, 100.0, 4), GridAxis::linear(-2.0, 6.0, 3)],
            ),
        ] {
            let r = grid_search(variant, &GridSpec { axes }, &ctxs).unwrap();
            assert_eq!(r.surface.len(), 12);
            for pt in &r.surface {
                let p = variant.predictor(&pt.params);
                let direct: f64 = ctxs.iter().map(|c| ce_loss(&p.predict(c).unwrap(), c.y_query)).sum::<f64>()
                    / ctxs.len() as f64;
                assert!((direct - pt.loss).abs() < 1e-12);
            }
            assert!(r.surface.iter().all(|p| p.loss >= r.best.loss));
        }
    }

    #[test]
    fn grid_ties_prefer_smallest_parameters() {
        // every point of a constant predictor family ties
        let ctxs = batch(2, 20, 5, 10);
        let spec = GridSpec {
            axes: vec![GridAxis::log(1.0, 10.0, 3), GridAxis::linear(0.0, 1.0, 3)],
        };
        let mut flat = ctxs.clone();
        for c in &mut flat {
            c.xs = Matrix::zeros(c.n(), 2);
        }
        let r = grid_search(GridVariant::Adaptive { include_self: false }, &spec, &flat).unwrap();
        assert_eq!(r.best.params, vec![1.0, 0.0]);
    }

    #[test]
    fn extraction_round_trip() {
        let w = construct_softmax_weights(7.0, 3.0, 3, 5);
        let k = extract_constants(&w, 3, 5);
        assert_eq!((k.c_sigma_eff, k.c_eta_eff, k.residual), (7.0, 3.0, 0.0));
        assert_eq!(classify_strategy(&w, 3, 5), Strategy::Selection);
        assert_eq!(classify_strategy(&AttentionWeights::zeros(8), 3, 5), Strategy::Indeterminate);
    }

    #[test]
    fn extraction_ignores_column_shifts_that_leave_predictions_unchanged() {
        let (d, c) = (3, 5);
        let base = construct_softmax_weights(7.0, 3.0, d, c);
        let ctxs = batch(d, 10, 10, 11);
        for col in 0..c {
            let mut w = base.clone();
            // W_O = blockdiag(0, c_eta I) and W_V = blockdiag(0, I): adding kappa to
            // column `col` of W_O's label block adds kappa to column `col` of
            // the label block of W_O W_V
            for j in 0..c {
                w.w_o[(d + j, d + col)] += 2.5;
            }
            let k = extract_constants(&w, d, c);
            assert!((k.c_eta_eff - 3.0).abs() < 1e-12);
            let m0 = Model::new(ModelKind::Softmax, base.clone());
            let m1 = Model::new(ModelKind::Softmax, w);
            for ctx in &ctxs {
                let (p0, p1) = (m0.predict(ctx).unwrap(), m1.predict(ctx).unwrap());
                assert!(p0.iter().zip(&p1).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn elimination_still_favours_the_query_class() {
        let w = construct_softmax_weights(-6.0, -8.0, 2, 2);
        assert_eq!(classify_strategy(&w, 2, 2), Strategy::Elimination);
        // two clusters on opposite sides of the circle, query in cluster 0
        let at = |deg: f64| {
            let r = deg.to_radians();
            vec![r.cos(), r.sin()]
        };
        let rows: Vec<Vec<f64>> = [-10.0, 0.0, 10.0, 170.0, 180.0, 190.0].iter().map(|&a| at(a)).collect();
        let ctx = Context {
            class_vectors: Matrix::from_rows(&[at(0.0), at(180.0)]).unwrap(),
            xs: Matrix::from_rows(&rows).unwrap(),
            labels: vec![0, 0, 0, 1, 1, 1],
            x_query: at(5.0),
            y_query: 0,
        };
        let p = Model::new(ModelKind::Softmax, w).predict(&ctx).unwrap();
        // brute force: attention over tokens, subtracting label mass
        let sharp = -6.0 / 4f64.sqrt();
        let mut scores: Vec<f64> = (0..6).map(|i| sharp * dot(ctx.xs.row(i), &ctx.x_query)).collect();
        scores.push(sharp);
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let mass1: f64 = scores[3..6].iter().map(|s| s.exp()).sum::<f64>() / z;
        let mass0: f64 = scores[0..3].iter().map(|s| s.exp()).sum::<f64>() / z;
        let want0 = 1.0 / (1.0 + (-8.0 * (mass1 - mass0)).exp());
        assert!((p[0] - want0).abs() < 1e-12);
        assert!(p[0] > 0.5);
    }

    #[test]
    fn extracted_constants_of_random_weights_have_residual() {
        let w = init_weights(&ModelKind::Softmax, 3, 5, 1.0, &mut Rng::new(0));
        assert!(extract_constants(&w, 3, 5).residual > 0.0);
    }

    #[test]
    fn variability_examples() {
        let one = batch(2, 20, 1, 12);
        let same = vec![one[0].clone(); 10];
        for (_, r) in adaptive_variability(&same, &[0.01, 1.0, 100.0]).unwrap() {
            assert_eq!(r, 0.0);
        }
        let ctxs = batch(2, 20, 100, 13);
        let table = adaptive_variability(&ctxs, &[0.1, 1.0, 10.0, 1e6]).unwrap();
        assert!(table.windows(2).all(|w| w[1].1 < w[0].1));
        assert!(table[3].1 < 1e-5);
        // d = 2 varies more at the moderate widths where kernel GD is fitted;
        // at very small widths the d = 10 sum is dominated by a single point
        // and the order flips
        let (lo_d, hi_d) = (batch(2, 100, 100, 14), batch(10, 100, 100, 14));
        for s2 in [0.25, 1.0] {
            let r2 = adaptive_variability(&lo_d, &[s2]).unwrap()[0].1;
            let r10 = adaptive_variability(&hi_d, &[s2]).unwrap()[0].1;
            assert!(r2 > r10, "{s2}: {r2} vs {r10}");
        }
        let mixed: Vec<Context> = ctxs.iter().take(2).cloned().chain(hi_d.iter().take(1).cloned()).collect();
        assert!(adaptive_variability(&mixed, &[1.0]).is_err());
    }

    #[test]
    fn adaptive_baseline_matches_closure_wrapper() {
        let ctxs = batch(3, 10, 5, 15);
        let f = |c: &Context| adaptive_predict(c, 2.0, 1.0, false);
        let b = BaselinePredictor::Adaptive {
            c_eta: 2.0,
            c_sigma: 1.0,
            include_self: false,
        };
        assert_eq!(alignment(&f, &b, &ctxs).unwrap().preds_diff, 0.0);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 5.0]), 0.0);
    }
}
