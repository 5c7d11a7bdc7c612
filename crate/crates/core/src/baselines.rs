//! Closed-form in-context predictors, all one step from zero weights.
//!
//! - one-step GD: `softmax((eta/n) sum_i y_i (x_i . x_query))`
//! - kernel GD: the same step with `k(x_i, x_query)` in place of the dot
//!   product
//! - context-adaptive kernel GD: an RBF step whose learning rate
//!   `eta(X) = c_eta e^{1/sigma2} n / sum_i e^{x_i . x_query / sigma2}`
//!   shrinks when many points neighbour the query; algebraically this is a
//!   softmax-weighted average of the context labels.
//!
//! On the unit sphere `|x - x'|^2 = 2 - 2 x . x'`, so every RBF quantity is a
//! function of the dot products `x_i . x_query` alone. [`ContextCache`]
//! holds those so grid searches touch each context's points once.

use serde::{Deserialize, Serialize};

use crate::attention::KernelSpec;
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_in_place};
use crate::taskgen::Context;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselinePredictor {
    GdStep {
        eta: f64,
    },
    KernelGd {
        eta: f64,
        kernel: KernelSpec,
    },
    Adaptive {
        c_eta: f64,
        c_sigma: f64,
        #[serde(default)]
        include_self: bool,
    },
}

impl BaselinePredictor {
    pub fn predict(&self, ctx: &Context) -> Result<Vec<f64>> {
        match *self {
            BaselinePredictor::GdStep { eta } => gd_step_predict(ctx, eta),
            BaselinePredictor::KernelGd { eta, kernel } => kernel_gd_predict(ctx, eta, &kernel),
            BaselinePredictor::Adaptive {
                c_eta,
                c_sigma,
                include_self,
            } => adaptive_predict(ctx, c_eta, c_sigma, include_self),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            BaselinePredictor::GdStep { eta } => positive("eta", *eta),
            BaselinePredictor::KernelGd { eta, kernel } => {
                positive("eta", *eta)?;
                kernel.validate()
            }
            BaselinePredictor::Adaptive { c_eta, c_sigma, .. } => {
                positive("c_eta", *c_eta)?;
                if c_sigma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig("c_sigma must be finite".into()))
                }
            }
        }
    }
}

fn class_sums(ctx: &Context, weight: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut sums = vec![0.0; ctx.classes()];
    for (i, &y) in ctx.labels.iter().enumerate() {
        sums[y] += weight(i);
    }
    sums
}

fn finish(mut logits: Vec<f64>) -> Result<Vec<f64>> {
    softmax_in_place(&mut logits)?;
    Ok(logits)
}

pub fn gd_step_predict(ctx: &Context, eta: f64) -> Result<Vec<f64>> {
    let scale = eta / ctx.n() as f64;
    let logits = class_sums(ctx, |i| dot(ctx.xs.row(i), &ctx.x_query))
        .into_iter()
        .map(|s| scale * s)
        .collect();
    finish(logits)
}

pub fn kernel_gd_predict(ctx: &Context, eta: f64, kernel: &KernelSpec) -> Result<Vec<f64>> {
    kernel.validate()?;
    let scale = eta / ctx.n() as f64;
    let logits = class_sums(ctx, |i| kernel.eval(ctx.xs.row(i), &ctx.x_query))
        .into_iter()
        .map(|s| scale * s)
        .collect();
    finish(logits)
}

/// `eta(X)`, evaluated as `c_eta n / sum_i e^{(x_i . x_query - 1) / sigma2}`
/// so that small widths do not overflow.
pub fn adaptive_lr(ctx: &Context, c_eta: f64, sigma2: f64, include_self: bool) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma2 must be positive, got {sigma2}")));
    }
    let mut denom: f64 = ctx.query_dots().iter().map(|s| ((s - 1.0) / sigma2).exp()).sum();
    if include_self {
        denom += ((dot(&ctx.x_query, &ctx.x_query) - 1.0) / sigma2).exp();
    }
    Ok(c_eta * ctx.n() as f64 / denom)
}

/// Kernel width matching a softmax sharpness `c_sigma` at model width `dim`.
pub fn sigma2_from_c_sigma(c_sigma: f64, dim: usize) -> f64 {
    (dim as f64).sqrt() / c_sigma
}

pub fn c_sigma_from_sigma2(sigma2: f64, dim: usize) -> f64 {
    (dim as f64).sqrt() / sigma2
}

pub fn adaptive_predict(ctx: &Context, c_eta: f64, c_sigma: f64, include_self: bool) -> Result<Vec<f64>> {
    let sharp = c_sigma / (ctx.model_dim() as f64).sqrt();
    let self_dot = include_self.then(|| dot(&ctx.x_query, &ctx.x_query));
    let mass = attention_label_mass(&ctx.query_dots(), &ctx.labels, ctx.classes(), sharp, self_dot);
    finish(mass.into_iter().map(|m| c_eta * m).collect())
}

/// Per-class mass of `softmax(sharp * x_i . x_query)` over the context. With
/// `self_dot = Some(x_query . x_query)` the query's own score joins the
/// normaliser, as in unmasked attention. Sums to one without the self term.
fn attention_label_mass(dots: &[f64], labels: &[usize], classes: usize, sharp: f64, self_dot: Option<f64>) -> Vec<f64> {
    let mut max = dots.iter().map(|s| sharp * s).fold(f64::NEG_INFINITY, f64::max);
    if let Some(q) = self_dot {
        max = max.max(sharp * q);
    }
    let mut sums = vec![0.0; classes];
    let mut denom = 0.0;
    for (&s, &y) in dots.iter().zip(labels) {
        let w = (sharp * s - max).exp();
        sums[y] += w;
        denom += w;
    }
    if let Some(q) = self_dot {
        denom += (sharp * q - max).exp();
    }
    sums.iter_mut().for_each(|s| *s /= denom);
    sums
}

/// Per-context data every baseline needs: dot products to the query and
/// labels.
#[derive(Debug, Clone)]
pub struct ContextCache {
    pub dots: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub dim: usize,
    pub y_query: usize,
    pub query_sq_norm: f64,
    /// `sum_{i: y_i = j} x_i . x_query`
    dot_sums: Vec<f64>,
}

impl ContextCache {
    pub fn new(ctx: &Context) -> Self {
        let dots = ctx.query_dots();
        let mut dot_sums = vec![0.0; ctx.classes()];
        for (&s, &y) in dots.iter().zip(&ctx.labels) {
            dot_sums[y] += s;
        }
        Self {
            dots,
            labels: ctx.labels.clone(),
            classes: ctx.classes(),
            dim: ctx.model_dim(),
            y_query: ctx.y_query,
            query_sq_norm: dot(&ctx.x_query, &ctx.x_query),
            dot_sums,
        }
    }

    pub fn n(&self) -> usize {
        self.dots.len()
    }

    pub fn gd_step(&self, eta: f64) -> Result<Vec<f64>> {
        let scale = eta / self.n() as f64;
        finish(self.dot_sums.iter().map(|s| scale * s).collect())
    }

    /// Per-class sums of `exp((x_i . x_query - 1) / sigma2)`, the RBF
    /// kernel values on the sphere.
    pub fn rbf_class_sums(&self, sigma2: f64) -> Vec<f64> {
        let mut sums = vec![0.0; self.classes];
        for (&s, &y) in self.dots.iter().zip(&self.labels) {
            sums[y] += ((s - 1.0) / sigma2).exp();
        }
        sums
    }

    pub fn kernel_gd_from_sums(&self, eta: f64, rbf_sums: &[f64]) -> Result<Vec<f64>> {
        let scale = eta / self.n() as f64;
        finish(rbf_sums.iter().map(|s| scale * s).collect())
    }

    /// Attention-normalised label mass per class for sharpness `c_sigma`.
    /// Scaling by `c_eta` gives the adaptive logits.
    pub fn adaptive_label_mass(&self, c_sigma: f64, include_self: bool) -> Vec<f64> {
        let sharp = c_sigma / (self.dim as f64).sqrt();
        let self_dot = include_self.then_some(self.query_sq_norm);
        attention_label_mass(&self.dots, &self.labels, self.classes, sharp, self_dot)
    }

    pub fn adaptive_from_mass(&self, c_eta: f64, mass: &[f64]) -> Result<Vec<f64>> {
        finish(mass.iter().map(|m| c_eta * m).collect())
    }
}
