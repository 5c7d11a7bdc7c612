//! Synthetic classification contexts on the unit sphere.
//!
//! A context draws `C` class vectors uniformly on `S^{d-1}`, then `n / C`
//! labelled points from each class region (a point belongs to the class of
//! its nearest class vector), then a query: its class uniformly first, then
//! a point from that class's region.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, norm, Matrix, Rng};

pub const DEFAULT_MAX_REJECT: usize = 100_000;

fn default_max_reject() -> usize {
    DEFAULT_MAX_REJECT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Input dimension.
    pub d: usize,
    /// Number of classes `C`.
    pub classes: usize,
    /// Context length; must be a multiple of `classes`.
    pub n: usize,
    /// Consecutive rejected draws tolerated before giving up on a sample.
    #[serde(default = "default_max_reject")]
    pub max_reject: usize,
}

impl TaskConfig {
    pub fn new(d: usize, classes: usize, n: usize) -> Self {
        Self {
            d,
            classes,
            n,
            max_reject: DEFAULT_MAX_REJECT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidConfig(format!("d must be >= 2, got {}", self.d)));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "C must be >= 2, got {}",
                self.classes
            )));
        }
        if self.n < self.classes {
            return Err(Error::InvalidConfig(format!(
                "n ({}) must be >= C ({})",
                self.n, self.classes
            )));
        }
        if !self.n.is_multiple_of(self.classes) {
            return Err(Error::InvalidConfig(format!(
                "n not divisible by C (n = {}, C = {})",
                self.n, self.classes
            )));
        }
        if self.max_reject == 0 {
            return Err(Error::InvalidConfig("max_reject must be positive".into()));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.n / self.classes
    }

    /// Token width `d + C`.
    pub fn model_dim(&self) -> usize {
        self.d + self.classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Context {
    /// `C x d`, unit rows.
    pub class_vectors: Matrix,
    /// `n x d`, unit rows.
    pub xs: Matrix,
    pub labels: Vec<usize>,
    pub x_query: Vec<f64>,
    pub y_query: usize,
}

impl Context {
    pub fn d(&self) -> usize {
        self.xs.cols()
    }

    pub fn classes(&self) -> usize {
        self.class_vectors.rows()
    }

    pub fn n(&self) -> usize {
        self.xs.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.d() + self.classes()
    }

    /// Dot products `x_i . x_query` for every context point.
    pub fn query_dots(&self) -> Vec<f64> {
        (0..self.n()).map(|i| dot(self.xs.row(i), &self.x_query)).collect()
    }

    /// Checks every structural invariant of a generated context.
    pub fn check_invariants(&self) -> Result<()> {
        let (c, d) = self.class_vectors.shape();
        let n = self.xs.rows();
        if self.xs.cols() != d || self.x_query.len() != d || self.labels.len() != n {
            return Err(shape_err(
                "Context",
                format!("xs n x {d}, x_query {d}, labels {n}"),
                format!(
                    "xs {:?}, x_query {}, labels {}",
                    self.xs.shape(),
                    self.x_query.len(),
                    self.labels.len()
                ),
            ));
        }
        let unit = |v: &[f64]| (norm(v) - 1.0).abs() <= 1e-12;
        if !(0..c).all(|j| unit(self.class_vectors.row(j)))
            || !(0..n).all(|i| unit(self.xs.row(i)))
            || !unit(&self.x_query)
        {
            return Err(Error::InvalidConfig("context vector is not unit-norm".into()));
        }
        if c == 0 || !n.is_multiple_of(c) {
            return Err(Error::InvalidConfig("context is not class-balanced".into()));
        }
        let mut counts = vec![0usize; c];
        for (i, &y) in self.labels.iter().enumerate() {
            if y >= c || assign_class(self.xs.row(i), &self.class_vectors) != y {
                return Err(Error::InvalidConfig(format!("label {i} inconsistent with class vectors")));
            }
            counts[y] += 1;
        }
        if counts.iter().any(|&k| k != n / c) {
            return Err(Error::InvalidConfig(format!("unbalanced labels {counts:?}")));
        }
        if assign_class(&self.x_query, &self.class_vectors) != self.y_query {
            return Err(Error::InvalidConfig("query label inconsistent with class vectors".into()));
        }
        Ok(())
    }
}

/// Gaussian draw normalised onto the sphere; all-zero draws are redrawn.
pub fn sample_unit_sphere(rng: &mut Rng, d: usize) -> Vec<f64> {
    assert!(d >= 1, "sphere dimension must be positive");
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let r = norm(&v);
        if r > 0.0 {
            v.iter_mut().for_each(|x| *x /= r);
            return v;
        }
    }
}

/// Index of the class vector with the largest dot product (nearest on the
/// sphere). Ties go to the lowest index.
pub fn assign_class(x: &[f64], class_vectors: &Matrix) -> usize {
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for j in 0..class_vectors.rows() {
        let s = dot(x, class_vectors.row(j));
        if s > best_dot {
            best = j;
            best_dot = s;
        }
    }
    best
}

pub fn sample_class_vectors(cfg: &TaskConfig, rng: &mut Rng) -> Matrix {
    let rows: Vec<f64> = (0..cfg.classes)
        .flat_map(|_| sample_unit_sphere(rng, cfg.d))
        .collect();
    Matrix::new(cfg.classes, cfg.d, rows).expect("unit vectors are finite")
}

pub fn generate_context(cfg: &TaskConfig, rng: &mut Rng) -> Result<Context> {
    cfg.validate()?;
    let class_vectors = sample_class_vectors(cfg, rng);
    context_for_classes(cfg, class_vectors, rng)
}

/// Fills a context for fixed class vectors.
///
/// Uniform sphere draws are routed to their class; a draw whose class
/// already holds `n / C` points is rejected. Every accepted point is thus a
/// uniform draw from its class region, exactly as per-class rejection
/// sampling, without discarding draws another class still needs.
pub fn context_for_classes(cfg: &TaskConfig, class_vectors: Matrix, rng: &mut Rng) -> Result<Context> {
    cfg.validate()?;
    if class_vectors.shape() != (cfg.classes, cfg.d) {
        return Err(shape_err(
            "context_for_classes",
            format!("{}x{}", cfg.classes, cfg.d),
            format!("{:?}", class_vectors.shape()),
        ));
    }
    let target = cfg.per_class();
    let mut counts = vec![0usize; cfg.classes];
    let mut xs = Vec::with_capacity(cfg.n * cfg.d);
    let mut labels = Vec::with_capacity(cfg.n);
    let mut misses = 0usize;
    while labels.len() < cfg.n {
        let x = sample_unit_sphere(rng, cfg.d);
        let y = assign_class(&x, &class_vectors);
        if counts[y] < target {
            counts[y] += 1;
            xs.extend_from_slice(&x);
            labels.push(y);
            misses = 0;
        } else {
            misses += 1;
            if misses > cfg.max_reject {
                let class = counts.iter().position(|&k| k < target).unwrap_or(0);
                return Err(Error::RejectionCap {
                    class,
                    attempts: misses,
                });
            }
        }
    }

    let y_query = rng.below(cfg.classes);
    let x_query = sample_from_class(cfg, &class_vectors, y_query, rng)?;
    Ok(Context {
        class_vectors,
        xs: Matrix::new(cfg.n, cfg.d, xs)?,
        labels,
        x_query,
        y_query,
    })
}

fn sample_from_class(cfg: &TaskConfig, class_vectors: &Matrix, class: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    for _ in 0..cfg.max_reject {
        let x = sample_unit_sphere(rng, cfg.d);
        if assign_class(&x, class_vectors) == class {
            return Ok(x);
        }
    }
    Err(Error::RejectionCap {
        class,
        attempts: cfg.max_reject,
    })
}

/// `count` contexts, context `i` drawn from `Rng::for_index(seed, i)`.
pub fn generate_batch(cfg: &TaskConfig, seed: u64, count: usize) -> Result<Vec<Context>> {
    (0..count)
        .map(|i| generate_context(cfg, &mut Rng::for_index(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseSparseParams {
    /// Keep contexts whose mean point has at least this norm.
    pub mean_threshold: f64,
    /// Candidate query positions: vertices of a regular polygon.
    pub vertices: usize,
    /// A point neighbours the query when `x_i . x_query` exceeds this.
    pub near_threshold: f64,
}

impl Default for DenseSparseParams {
    fn default() -> Self {
        Self {
            mean_threshold: 0.3,
            vertices: 50,
            near_threshold: 0.3,
        }
    }
}

pub fn neighbor_count(ctx: &Context, q: &[f64], near_threshold: f64) -> usize {
    (0..ctx.n())
        .filter(|&i| dot(ctx.xs.row(i), q) > near_threshold)
        .count()
}

/// Polygon vertex with the most (`dense`) or fewest neighbours; ties go to
/// the lowest vertex index.
pub fn place_query(ctx: &Context, vertices: usize, near_threshold: f64, dense: bool) -> Vec<f64> {
    let mut best: Option<(usize, Vec<f64>)> = None;
    for k in 0..vertices {
        let angle = std::f64::consts::TAU * k as f64 / vertices as f64;
        let q = vec![angle.cos(), angle.sin()];
        let count = neighbor_count(ctx, &q, near_threshold);
        let better = match &best {
            None => true,
            Some((c, _)) if dense => count > *c,
            Some((c, _)) => count < *c,
        };
        if better {
            best = Some((count, q));
        }
    }
    best.map(|(_, q)| q).expect("at least one vertex")
}

/// Draws `count` contexts on the circle, keeps those whose mean point is far
/// from the origin, and returns the same kept contexts twice: once with the
/// query moved to the densest polygon vertex, once to the sparsest. Query
/// labels are recomputed from the class vectors.
pub fn generate_dense_sparse_pair(
    cfg: &TaskConfig,
    rng: &mut Rng,
    count: usize,
    params: DenseSparseParams,
) -> Result<(Vec<Context>, Vec<Context>)> {
    cfg.validate()?;
    if cfg.d != 2 {
        return Err(Error::InvalidConfig(format!(
            "dense/sparse placement needs d = 2, got {}",
            cfg.d
        )));
    }
    if params.vertices == 0 {
        return Err(Error::InvalidConfig("need at least one polygon vertex".into()));
    }
    let mut dense = Vec::new();
    let mut sparse = Vec::new();
    for _ in 0..count {
        let ctx = generate_context(cfg, rng)?;
        let mut mean = [0.0; 2];
        for i in 0..ctx.n() {
            mean[0] += ctx.xs[(i, 0)];
            mean[1] += ctx.xs[(i, 1)];
        }
        let mean_norm = norm(&mean) / ctx.n() as f64;
        if mean_norm < params.mean_threshold {
            continue;
        }
        for (is_dense, out) in [(true, &mut dense), (false, &mut sparse)] {
            let mut placed = ctx.clone();
            placed.x_query = place_query(&ctx, params.vertices, params.near_threshold, is_dense);
            placed.y_query = assign_class(&placed.x_query, &placed.class_vectors);
            out.push(placed);
        }
    }
    if dense.is_empty() {
        return Err(Error::NoDenseSparseContexts);
    }
    Ok((dense, sparse))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransienceConfig {
    pub base: TaskConfig,
    /// Number of fixed class-vector sets used for training.
    pub m: usize,
}

impl TransienceConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn draw_fixed_sets(cfg: &TransienceConfig, rng: &mut Rng) -> Vec<Matrix> {
    (0..cfg.m).map(|_| sample_class_vectors(&cfg.base, rng)).collect()
}

/// `batch / m` contexts per fixed class-vector set, interleaved by set.
/// Points and queries are fresh for every context.
pub fn generate_transience_batch(
    cfg: &TransienceConfig,
    fixed_sets: &[Matrix],
    rng: &mut Rng,
    batch: usize,
) -> Result<Vec<Context>> {
    cfg.validate()?;
    if fixed_sets.len() != cfg.m {
        return Err(shape_err("generate_transience_batch", format!("{} sets", cfg.m), fixed_sets.len()));
    }
    if !batch.is_multiple_of(cfg.m) {
        return Err(Error::InvalidConfig(format!(
            "batch ({batch}) not divisible by m ({})",
            cfg.m
        )));
    }
    (0..batch)
        .map(|k| context_for_classes(&cfg.base, fixed_sets[k % cfg.m].clone(), rng))
        .collect()
}

/// On-disk dataset: `{config, seed, contexts}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub config: TaskConfig,
    pub seed: u64,
    pub contexts: Vec<Context>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (i, ctx) in self.contexts.iter().enumerate() {
            if ctx.d() != self.config.d || ctx.classes() != self.config.classes || ctx.n() != self.config.n {
                return Err(Error::InvalidConfig(format!("context {i} does not match the dataset config")));
            }
            ctx.check_invariants()
                .map_err(|e| Error::InvalidConfig(format!("context {i}: {e}")))?;
        }
        Ok(())
    }
}
