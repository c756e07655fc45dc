//! Oracles, batches, fitness, and gradient-descent refinement of a single tree.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::error::{Result, SmpfError};
use crate::expr::Expr;
use crate::scalar::Scalar;
use crate::tree::MetamodelTree;

/// Per-coordinate bound on the loss gradient.
pub const GRAD_CLIP: f64 = 1e3;

pub type BlackBox<T> = Arc<dyn Fn(&[T]) -> T + Send + Sync>;

/// The source of ground truth for fitting.
#[derive(Clone)]
pub enum Oracle<T> {
    /// A function that can be queried anywhere inside an axis-aligned box.
    Synthetic {
        func: BlackBox<T>,
        domain: Vec<(T, T)>,
    },
    /// A fixed table of labelled rows.
    Dataset(Dataset<T>),
}

impl<T: Scalar> fmt::Debug for Oracle<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Oracle::Synthetic { domain, .. } => f
                .debug_struct("Synthetic")
                .field("domain", domain)
                .finish_non_exhaustive(),
            Oracle::Dataset(d) => f
                .debug_struct("Dataset")
                .field("rows", &d.len())
                .field("dim", &d.dim())
                .finish(),
        }
    }
}

impl<T: Scalar> Oracle<T> {
    pub fn synthetic(
        func: impl Fn(&[T]) -> T + Send + Sync + 'static,
        domain: Vec<(T, T)>,
    ) -> Result<Self> {
        if domain.is_empty() {
            return Err(SmpfError::Config("domain must have at least one axis".into()));
        }
        for (i, (lo, hi)) in domain.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(SmpfError::Config(format!(
                    "domain axis {i} is not a proper interval: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Oracle::Synthetic {
            func: Arc::new(func),
            domain,
        })
    }

    /// Synthetic oracle from an expression in the shared grammar.
    pub fn from_expr(expr: Expr, domain: Vec<(T, T)>) -> Result<Self> {
        if expr.dim() > domain.len() {
            return Err(SmpfError::DimensionMismatch {
                expected: domain.len(),
                got: expr.dim(),
            });
        }
        Self::synthetic(move |x| expr.eval(x), domain)
    }

    pub fn dim(&self) -> usize {
        match self {
            Oracle::Synthetic { domain, .. } => domain.len(),
            Oracle::Dataset(d) => d.dim(),
        }
    }

    pub fn query(&self, x: &[T]) -> Option<T> {
        match self {
            Oracle::Synthetic { func, .. } => Some(func(x)),
            Oracle::Dataset(_) => None,
        }
    }
}

/// Row-major feature matrix with one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    dim: usize,
    xs: Vec<T>,
    ys: Vec<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(dim: usize, xs: Vec<T>, ys: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(SmpfError::Shape("dataset needs at least one feature".into()));
        }
        if ys.is_empty() {
            return Err(SmpfError::Shape("dataset has no rows".into()));
        }
        if xs.len() != dim * ys.len() {
            return Err(SmpfError::Shape(format!(
                "{} feature values do not form {} rows of width {dim}",
                xs.len(),
                ys.len()
            )));
        }
        for (r, y) in ys.iter().enumerate() {
            if !y.is_finite() || xs[r * dim..(r + 1) * dim].iter().any(|v| !v.is_finite()) {
                return Err(SmpfError::Dataset {
                    row: r + 1,
                    message: "non-finite value".into(),
                });
            }
        }
        Ok(Dataset { dim, xs, ys })
    }

    pub fn from_rows(rows: &[Vec<T>], ys: Vec<T>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != dim) {
            return Err(SmpfError::Dataset {
                row: r + 1,
                message: format!("expected {dim} features, found {}", rows[r].len()),
            });
        }
        Self::new(dim, rows.concat(), ys)
    }

    /// Reads a CSV with a header naming feature columns `x_0..x_{d-1}` and a target
    /// column `y`. Row numbers in errors count data rows from 1.
    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| csv_error(0, e))?
            .iter()
            .map(str::to_string)
            .collect::<Vec<_>>();
        let (feature_cols, target_col) = locate_columns(&headers)?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let row = r + 1;
            let record = record.map_err(|e| csv_error(row, e))?;
            let cell = |col: usize| -> Result<T> {
                let text = record.get(col).unwrap_or("");
                let v: f64 = text.parse().map_err(|_| SmpfError::Dataset {
                    row,
                    message: format!("cannot parse `{text}` in column `{}`", headers[col]),
                })?;
                if !v.is_finite() {
                    return Err(SmpfError::Dataset {
                        row,
                        message: format!("non-finite value in column `{}`", headers[col]),
                    });
                }
                Ok(T::of(v))
            };
            for &c in &feature_cols {
                xs.push(cell(c)?);
            }
            ys.push(cell(target_col)?);
        }
        Self::new(feature_cols.len(), xs, ys)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> T {
        self.ys[i]
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut xs = Vec::with_capacity(indices.len() * self.dim);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            xs.extend_from_slice(self.row(i));
            ys.push(self.ys[i]);
        }
        Self::new(self.dim, xs, ys)
    }

    pub fn as_batch(&self) -> Batch<T> {
        Batch {
            dim: self.dim,
            xs: self.xs.clone(),
            ys: self.ys.clone(),
        }
    }
}

fn csv_error(row: usize, e: csv::Error) -> SmpfError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SmpfError::Io(io),
        other => SmpfError::Dataset {
            row,
            message: format!("{other:?}"),
        },
    }
}

fn locate_columns(headers: &[String]) -> Result<(Vec<usize>, usize)> {
    let mut features: Vec<(usize, usize)> = Vec::new();
    let mut target = None;
    for (col, h) in headers.iter().enumerate() {
        if h == "y" {
            target = Some(col);
        } else if let Some(idx) = h.strip_prefix("x_").and_then(|s| s.parse::<usize>().ok()) {
            features.push((idx, col));
        } else {
            return Err(SmpfError::Dataset {
                row: 0,
                message: format!("unexpected column `{h}` (expected x_<i> or y)"),
            });
        }
    }
    let target = target.ok_or_else(|| SmpfError::Dataset {
        row: 0,
        message: "missing target column `y`".into(),
    })?;
    features.sort_unstable();
    for (expected, (idx, _)) in features.iter().enumerate() {
        if *idx != expected {
            return Err(SmpfError::Dataset {
                row: 0,
                message: format!("feature columns must be x_0..x_{{d-1}}; missing x_{expected}"),
            });
        }
    }
    Ok((features.into_iter().map(|(_, c)| c).collect(), target))
}

/// A set of points with their target values.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    dim: usize,
    xs: Vec<T>,
    ys: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(dim: usize, xs: Vec<T>, ys: Vec<T>) -> Result<Self> {
        if xs.len() != dim * ys.len() {
            return Err(SmpfError::Shape(format!(
                "{} feature values do not form {} rows of width {dim}",
                xs.len(),
                ys.len()
            )));
        }
        Ok(Batch { dim, xs, ys })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.xs.chunks_exact(self.dim.max(1)).take(self.ys.len())
    }

    pub fn targets(&self) -> &[T] {
        &self.ys
    }
}

/// Draws `m` points. Synthetic oracles sample uniformly in their box; datasets
/// sample rows without replacement, or return every row when `m >= n`.
pub fn sample_batch<T: Scalar, R: Rng + ?Sized>(oracle: &Oracle<T>, m: usize, rng: &mut R) -> Batch<T> {
    match oracle {
        Oracle::Synthetic { func, domain } => {
            let dim = domain.len();
            let mut xs = Vec::with_capacity(m * dim);
            let mut ys = Vec::with_capacity(m);
            for _ in 0..m {
                let start = xs.len();
                for (lo, hi) in domain {
                    let u: f64 = rng.random();
                    xs.push(*lo + (*hi - *lo) * T::of(u));
                }
                ys.push(func(&xs[start..]));
            }
            Batch { dim, xs, ys }
        }
        Oracle::Dataset(data) => {
            if m >= data.len() {
                return data.as_batch();
            }
            let picks = index::sample(rng, data.len(), m);
            let mut xs = Vec::with_capacity(m * data.dim);
            let mut ys = Vec::with_capacity(m);
            for i in picks.iter() {
                xs.extend_from_slice(data.row(i));
                ys.push(data.target(i));
            }
            Batch {
                dim: data.dim,
                xs,
                ys,
            }
        }
    }
}

fn check_batch<T: Scalar>(tree: &MetamodelTree<T>, batch: &Batch<T>) -> Result<()> {
    if tree.dim() != batch.dim() {
        return Err(SmpfError::DimensionMismatch {
            expected: tree.dim(),
            got: batch.dim(),
        });
    }
    if batch.is_empty() {
        return Err(SmpfError::Shape("empty batch".into()));
    }
    Ok(())
}

/// Mean squared error; `+inf` if any residual is not finite.
pub fn mse<T: Scalar>(tree: &MetamodelTree<T>, batch: &Batch<T>) -> Result<T> {
    check_batch(tree, batch)?;
    let mut acc = T::zero();
    for (x, y) in batch.rows().zip(batch.targets()) {
        let r = tree.eval_unchecked(x) - *y;
        if !r.is_finite() {
            return Ok(T::infinity());
        }
        acc += r * r;
    }
    let v = acc / T::of(batch.len() as f64);
    Ok(if v.is_finite() { v } else { T::infinity() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitnessRecord<T> {
    pub mse: T,
    pub edges: usize,
    /// `mse + lambda * edges`
    pub fitness: T,
}

pub fn fitness<T: Scalar>(tree: &MetamodelTree<T>, batch: &Batch<T>, lambda: T) -> Result<FitnessRecord<T>> {
    let err = mse(tree, batch)?;
    Ok(make_record(err, tree.edge_count(), lambda))
}

pub(crate) fn make_record<T: Scalar>(mse: T, edges: usize, lambda: T) -> FitnessRecord<T> {
    FitnessRecord {
        mse,
        edges,
        fitness: mse + lambda * T::of(edges as f64),
    }
}

/// Runs `k` full-batch gradient-descent steps on one batch drawn at entry.
/// Topology and classes are never touched.
pub fn train_tree<T: Scalar, R: Rng + ?Sized>(
    tree: &MetamodelTree<T>,
    oracle: &Oracle<T>,
    k: usize,
    lr: T,
    m: usize,
    rng: &mut R,
) -> Result<MetamodelTree<T>> {
    let mut out = tree.clone();
    if k == 0 {
        return Ok(out);
    }
    let batch = sample_batch(oracle, m, rng);
    descend(&mut out, &batch, k, lr)?;
    Ok(out)
}

/// `k` gradient steps on a fixed batch, in place. Returns the number of steps applied;
/// a step whose update would produce a non-finite parameter is skipped.
pub fn descend<T: Scalar>(tree: &mut MetamodelTree<T>, batch: &Batch<T>, k: usize, lr: T) -> Result<usize> {
    check_batch(tree, batch)?;
    let clip = T::of(GRAD_CLIP);
    let two = T::of(2.0);
    let n = T::of(batch.len() as f64);
    let mut grad = vec![T::zero(); tree.param_count()];
    let mut params = tree.params();
    let mut applied = 0;
    for _ in 0..k {
        grad.iter_mut().for_each(|g| *g = T::zero());
        for (x, y) in batch.rows().zip(batch.targets()) {
            let (value, tape) = tree.backward_unchecked(x);
            let r = value - *y;
            for (g, t) in grad.iter_mut().zip(&tape.params) {
                *g += r * *t;
            }
        }
        let next: Vec<T> = params
            .iter()
            .zip(&grad)
            .map(|(p, g)| {
                let g = (*g * two / n).max(-clip).min(clip);
                *p - lr * g
            })
            .collect();
        if next.iter().all(|p| p.is_finite()) {
            tree.set_params(&next);
            params = next;
            applied += 1;
        }
    }
    Ok(applied)
}
