//! Single-layer, single-head self-attention over input-label tokens.
//!
//! Tokens are rows `[x_i | onehot(y_i)]`; the query token is `[x_query | 0]`
//! and sits in the last row. The layer computes
//! `SA(X) = X + f(X W_Q^T W_K X^T) X W_V^T W_O^T` and the prediction is the
//! softmax of the label block of the updated query row. Attention is
//! unmasked: the query attends to every token including itself.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, softmax_in_place, Matrix};
use crate::taskgen::Context;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    tokens: Matrix,
    d: usize,
    classes: usize,
}

impl TokenMatrix {
    pub fn new(tokens: Matrix, d: usize, classes: usize) -> Result<Self> {
        if tokens.cols() != d + classes || tokens.rows() == 0 {
            return Err(shape_err(
                "TokenMatrix",
                format!("(n+1) x {}", d + classes),
                format!("{:?}", tokens.shape()),
            ));
        }
        Ok(Self { tokens, d, classes })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.tokens
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.d + self.classes
    }

    /// Number of tokens, context plus query.
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.tokens.row(i)
    }

    pub fn query(&self) -> &[f64] {
        self.tokens.row(self.tokens.rows() - 1)
    }
}

pub fn build_token_matrix(ctx: &Context) -> TokenMatrix {
    let (d, c, n) = (ctx.d(), ctx.classes(), ctx.n());
    let mut tokens = Matrix::zeros(n + 1, d + c);
    for i in 0..n {
        let row = tokens.row_mut(i);
        row[..d].copy_from_slice(ctx.xs.row(i));
        row[d + ctx.labels[i]] = 1.0;
    }
    tokens.row_mut(n)[..d].copy_from_slice(&ctx.x_query);
    TokenMatrix {
        tokens,
        d,
        classes: c,
    }
}

/// A kernel supplied by the caller. It has no derivative, so models using it
/// can be evaluated but not trained.
#[derive(Clone, Copy)]
pub struct CustomKernel {
    pub name: &'static str,
    pub eval: fn(&[f64], &[f64]) -> f64,
}

impl std::fmt::Debug for CustomKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CustomKernel({})", self.name)
    }
}

impl PartialEq for CustomKernel {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && std::ptr::fn_addr_eq(self.eval, other.eval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    DotProduct,
    /// `exp(-|a - b|^2 / (2 sigma2))`
    Rbf { sigma2: f64 },
    #[serde(skip)]
    Custom(CustomKernel),
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf { sigma2 } if !(sigma2 > 0.0 && sigma2.is_finite()) => Err(
                Error::InvalidConfig(format!("rbf kernel width must be positive, got {sigma2}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            KernelSpec::DotProduct => dot(a, b),
            KernelSpec::Rbf { sigma2 } => {
                let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-sq / (2.0 * sigma2)).exp()
            }
            KernelSpec::Custom(k) => (k.eval)(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    Linear,
    Kernel { kernel: KernelSpec },
    Softmax,
    /// Softmax attention with `W_Q^T W_K` pinned to `blockdiag(c_sigma I_d, 0)`.
    SoftmaxFrozenQk { c_sigma: f64 },
}

impl ModelKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelKind::Kernel { kernel } => kernel.validate(),
            ModelKind::SoftmaxFrozenQk { c_sigma } if !c_sigma.is_finite() => {
                Err(Error::InvalidConfig("frozen c_sigma must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_softmax(&self) -> bool {
        matches!(self, ModelKind::Softmax | ModelKind::SoftmaxFrozenQk { .. })
    }

    pub fn qk_trainable(&self) -> bool {
        !matches!(self, ModelKind::SoftmaxFrozenQk { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Kernel { .. } => "kernel",
            ModelKind::Softmax => "softmax",
            ModelKind::SoftmaxFrozenQk { .. } => "softmax_frozen_qk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionWeights {
    #[serde(rename = "W_Q")]
    pub w_q: Matrix,
    #[serde(rename = "W_K")]
    pub w_k: Matrix,
    #[serde(rename = "W_V")]
    pub w_v: Matrix,
    #[serde(rename = "W_O")]
    pub w_o: Matrix,
}

impl AttentionWeights {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_q: Matrix::zeros(dim, dim),
            w_k: Matrix::zeros(dim, dim),
            w_v: Matrix::zeros(dim, dim),
            w_o: Matrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for (name, m) in self.named() {
            if m.shape() != (dim, dim) {
                return Err(shape_err("AttentionWeights", format!("{name} {dim}x{dim}"), format!("{:?}", m.shape())));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, &Matrix); 4] {
        [("W_Q", &self.w_q), ("W_K", &self.w_k), ("W_V", &self.w_v), ("W_O", &self.w_o)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 4] {
        [
            ("W_Q", &mut self.w_q),
            ("W_K", &mut self.w_k),
            ("W_V", &mut self.w_v),
            ("W_O", &mut self.w_o),
        ]
    }

    /// `W_Q^T W_K`, the bilinear form scoring query against key tokens.
    pub fn qk_product(&self) -> Matrix {
        self.w_q.transpose().matmul(&self.w_k).expect("square weights")
    }

    /// `W_V^T W_O^T`, mapping an attended token (as a row) to its update.
    pub fn value_product(&self) -> Matrix {
        self.w_v
            .transpose()
            .matmul(&self.w_o.transpose())
            .expect("square weights")
    }
}

/// Two-layer rectifier MLP applied to the post-attention query token, with
/// a residual connection. Row-vector convention: `h W1 + b1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpWeights {
    #[serde(rename = "W1")]
    pub w1: Matrix,
    pub b1: Vec<f64>,
    #[serde(rename = "W2")]
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl MlpWeights {
    pub fn hidden_for(dim: usize) -> usize {
        2 * dim
    }

    pub fn zeros(dim: usize) -> Self {
        let h = Self::hidden_for(dim);
        Self {
            w1: Matrix::zeros(dim, h),
            b1: vec![0.0; h],
            w2: Matrix::zeros(h, dim),
            b2: vec![0.0; dim],
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let h = Self::hidden_for(dim);
        if self.w1.shape() != (dim, h) || self.b1.len() != h || self.w2.shape() != (h, dim) || self.b2.len() != dim {
            return Err(shape_err(
                "MlpWeights",
                format!("W1 {dim}x{h}, b1 {h}, W2 {h}x{dim}, b2 {dim}"),
                format!(
                    "W1 {:?}, b1 {}, W2 {:?}, b2 {}",
                    self.w1.shape(),
                    self.b1.len(),
                    self.w2.shape(),
                    self.b2.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Intermediates of one token's attention update, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct TokenTrace {
    /// `W_Q t` for the attending token.
    pub query_proj: Vec<f64>,
    /// `W_K t_i` for every token; only filled for RBF kernels.
    pub key_proj: Vec<Vec<f64>>,
    /// Activated attention weights `f(s)_i`.
    pub attn: Vec<f64>,
    /// `sum_i attn_i t_i`
    pub mixed: Vec<f64>,
    /// `W_V mixed`
    pub value: Vec<f64>,
    /// Updated token `t + W_O value`.
    pub out: Vec<f64>,
}

/// Attention update of token `row` against all tokens of `x`.
pub(crate) fn attend(kind: &ModelKind, w: &AttentionWeights, x: &TokenMatrix, row: usize) -> Result<TokenTrace> {
    let dim = x.dim();
    w.validate(dim)?;
    let t = x.token(row);
    let query_proj = w.w_q.matvec(t)?;
    let len = x.len();
    let mut key_proj = Vec::new();
    let mut attn = vec![0.0; len];
    match kind {
        ModelKind::Kernel {
            kernel: kernel @ (KernelSpec::Rbf { .. } | KernelSpec::Custom(_)),
        } => {
            kernel.validate()?;
            key_proj = (0..len).map(|i| w.w_k.matvec(x.token(i))).collect::<Result<_>>()?;
            for (a, k) in attn.iter_mut().zip(&key_proj) {
                *a = kernel.eval(&query_proj, k);
            }
        }
        _ => {
            // s_i = (W_Q t) . (W_K t_i) = (W_K^T W_Q t) . t_i
            let probe = w.w_k.vecmat(&query_proj)?;
            for (i, a) in attn.iter_mut().enumerate() {
                *a = dot(&probe, x.token(i));
            }
            if kind.is_softmax() {
                let scale = 1.0 / (dim as f64).sqrt();
                attn.iter_mut().for_each(|a| *a *= scale);
                softmax_in_place(&mut attn)?;
            }
        }
    }
    let mut mixed = vec![0.0; dim];
    for (i, &a) in attn.iter().enumerate() {
        crate::numerics::axpy(a, x.token(i), &mut mixed);
    }
    let value = w.w_v.matvec(&mixed)?;
    let update = w.w_o.matvec(&value)?;
    let out = t.iter().zip(&update).map(|(a, b)| a + b).collect();
    Ok(TokenTrace {
        query_proj,
        key_proj,
        attn,
        mixed,
        value,
        out,
    })
}

/// Intermediates of the MLP block.
#[derive(Debug, Clone)]
pub(crate) struct MlpTrace {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

pub(crate) fn mlp_forward(mlp: &MlpWeights, h: &[f64]) -> Result<MlpTrace> {
    mlp.validate(h.len())?;
    let mut pre = mlp.w1.vecmat(h)?;
    pre.iter_mut().zip(&mlp.b1).for_each(|(p, b)| *p += b);
    let hidden: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
    let proj = mlp.w2.vecmat(&hidden)?;
    let out = h
        .iter()
        .zip(&proj)
        .zip(&mlp.b2)
        .map(|((a, b), c)| a + b + c)
        .collect();
    Ok(MlpTrace { pre, hidden, out })
}

pub(crate) fn label_probs(token: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut p = token[d..].to_vec();
    softmax_in_place(&mut p)?;
    Ok(p)
}

fn check_width(w: &AttentionWeights, x: &TokenMatrix) -> Result<()> {
    if w.dim() != x.dim() {
        return Err(shape_err("forward", format!("weights {}x{}", x.dim(), x.dim()), w.dim()));
    }
    Ok(())
}

/// Class probabilities read from the updated query token.
pub fn forward_predict(kind: &ModelKind, w: &AttentionWeights, x: &TokenMatrix) -> Result<Vec<f64>> {
    check_width(w, x)?;
    let trace = attend(kind, w, x, x.len() - 1)?;
    label_probs(&trace.out, x.d())
}

/// Softmax attention followed by the residual MLP, read out like
/// [`forward_predict`].
pub fn forward_transience(w: &AttentionWeights, mlp: &MlpWeights, x: &TokenMatrix) -> Result<Vec<f64>> {
    check_width(w, x)?;
    let trace = attend(&ModelKind::Softmax, w, x, x.len() - 1)?;
    let m = mlp_forward(mlp, &trace.out)?;
    label_probs(&m.out, x.d())
}

/// Every row of `SA(X)`, for inspection. Predictions only use the last row.
pub fn self_attention_full(kind: &ModelKind, w: &AttentionWeights, x: &TokenMatrix) -> Result<Matrix> {
    check_width(w, x)?;
    let mut out = Matrix::zeros(x.len(), x.dim());
    for r in 0..x.len() {
        let trace = attend(kind, w, x, r)?;
        out.row_mut(r).copy_from_slice(&trace.out);
    }
    Ok(out)
}

fn block_diag(d: usize, c: usize, x_block: f64, y_block: f64) -> Matrix {
    Matrix::from_fn(d + c, d + c, |i, j| match (i == j, i < d) {
        (true, true) => x_block,
        (true, false) => y_block,
        _ => 0.0,
    })
}

fn gd_weights(scale: f64, d: usize, c: usize) -> AttentionWeights {
    AttentionWeights {
        w_q: block_diag(d, c, 1.0, 0.0),
        w_k: block_diag(d, c, 1.0, 0.0),
        w_v: block_diag(d, c, 0.0, 1.0),
        w_o: block_diag(d, c, 0.0, scale),
    }
}

/// Weights under which linear attention computes one gradient step with
/// learning rate `eta` from zero weights on an `n`-point context.
pub fn construct_linear_gd_weights(eta: f64, n: usize, d: usize, c: usize) -> AttentionWeights {
    assert!(n >= 1, "context length must be positive");
    gd_weights(eta / n as f64, d, c)
}

/// Same factors as the linear construction; with a kernel activation they
/// compute one kernel gradient step.
pub fn construct_kernel_gd_weights(eta: f64, n: usize, d: usize, c: usize) -> AttentionWeights {
    construct_linear_gd_weights(eta, n, d, c)
}

/// `W_Q^T W_K = blockdiag(c_sigma I_d, 0)`, `W_V^T W_O^T = blockdiag(0, c_eta I_C)`.
pub fn construct_softmax_weights(c_sigma: f64, c_eta: f64, d: usize, c: usize) -> AttentionWeights {
    AttentionWeights {
        w_q: block_diag(d, c, 1.0, 0.0),
        w_k: block_diag(d, c, c_sigma, 0.0),
        w_v: block_diag(d, c, 0.0, 1.0),
        w_o: block_diag(d, c, 0.0, c_eta),
    }
}

/// A trainable model: attention weights plus the optional MLP of the
/// transience experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub weights: AttentionWeights,
    pub mlp: Option<MlpWeights>,
}

impl Model {
    pub fn new(kind: ModelKind, weights: AttentionWeights) -> Self {
        Self {
            kind,
            weights,
            mlp: None,
        }
    }

    pub fn predict_tokens(&self, x: &TokenMatrix) -> Result<Vec<f64>> {
        match &self.mlp {
            None => forward_predict(&self.kind, &self.weights, x),
            Some(mlp) => {
                check_width(&self.weights, x)?;
                let trace = attend(&self.kind, &self.weights, x, x.len() - 1)?;
                let m = mlp_forward(mlp, &trace.out)?;
                label_probs(&m.out, x.d())
            }
        }
    }

    pub fn predict(&self, ctx: &Context) -> Result<Vec<f64>> {
        self.predict_tokens(&build_token_matrix(ctx))
    }
}

/// On-disk checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub d: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub step: u64,
    pub seed: u64,
    #[serde(rename = "W_Q")]
    pub w_q: Matrix,
    #[serde(rename = "W_K")]
    pub w_k: Matrix,
    #[serde(rename = "W_V")]
    pub w_v: Matrix,
    #[serde(rename = "W_O")]
    pub w_o: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<MlpWeights>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, d: usize, classes: usize, step: u64, seed: u64) -> Self {
        Self {
            kind: model.kind,
            d,
            classes,
            step,
            seed,
            w_q: model.weights.w_q.clone(),
            w_k: model.weights.w_k.clone(),
            w_v: model.weights.w_v.clone(),
            w_o: model.weights.w_o.clone(),
            mlp: model.mlp.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        let dim = self.d + self.classes;
        self.weights().validate(dim)?;
        if let Some(mlp) = &self.mlp {
            mlp.validate(dim)?;
        }
        Ok(())
    }

    pub fn weights(&self) -> AttentionWeights {
        AttentionWeights {
            w_q: self.w_q.clone(),
            w_k: self.w_k.clone(),
            w_v: self.w_v.clone(),
            w_o: self.w_o.clone(),
        }
    }

    pub fn model(&self) -> Model {
        Model {
            kind: self.kind,
            weights: self.weights(),
            mlp: self.mlp.clone(),
        }
    }
}
