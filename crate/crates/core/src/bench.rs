//! Synthetic target registry, regression metrics and the multi-seed experiment runner.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, SmpfError};
use crate::evolve::{run_smpf, stream_rng, SmpfConfig, Stream};
use crate::expr::Expr;
use crate::optimize::{sample_batch, Batch, Dataset, Oracle};
use crate::scalar::Scalar;
use crate::tree::MetamodelTree;

/// Points in the held-out set of a synthetic target.
pub const TEST_POINTS: usize = 1000;
/// Fraction of dataset rows used for training.
pub const TRAIN_FRACTION: f64 = 0.8;

/// A named closed-form target over a box.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub name: String,
    pub dim: usize,
    pub expression: String,
    pub expr: Expr,
    pub domain: Vec<(f64, f64)>,
}

impl TargetSpec {
    /// Parses `expression`; the domain defaults to the unit box.
    pub fn new(name: &str, dim: usize, expression: &str) -> Result<Self> {
        let expr = Expr::parse(expression)?;
        if expr.dim() > dim {
            return Err(SmpfError::DimensionMismatch {
                expected: dim,
                got: expr.dim(),
            });
        }
        Ok(TargetSpec {
            name: name.to_string(),
            dim,
            expression: expression.to_string(),
            expr,
            domain: vec![(0.0, 1.0); dim],
        })
    }

    pub fn with_domain(mut self, domain: Vec<(f64, f64)>) -> Result<Self> {
        if domain.len() != self.dim {
            return Err(SmpfError::DimensionMismatch {
                expected: self.dim,
                got: domain.len(),
            });
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn eval<T: Scalar>(&self, x: &[T]) -> T {
        self.expr.eval(x)
    }

    pub fn oracle<T: Scalar>(&self) -> Result<Oracle<T>> {
        let domain = self.domain.iter().map(|&(lo, hi)| (T::of(lo), T::of(hi))).collect();
        Oracle::from_expr(self.expr.clone(), domain)
    }
}

const E4: &str = "-2*x_0 + x_1 + 3*x_2 - 3*x_3";
const S4: &str = "x_0*x_1 + x_2 + 2*x_3";
const R4: &str = "x_0^2 + x_1 + x_2^2 + 2*x_3";

fn definitions() -> Vec<(&'static str, usize, String)> {
    let s6 = format!("{S4} + 3*x_4 - x_5");
    let r6 = format!("{R4} + x_4^3 + x_5");
    vec![
        ("exp2d", 2, "exp(-3*x_0 + x_1)".into()),
        ("sin2d", 2, "sin(x_0*x_1)".into()),
        ("ratio2d", 2, "x_0*x_1/(x_0^2 + x_1)".into()),
        ("sinc2d", 2, "sinc(x_0^2 + x_1)".into()),
        ("exp3d", 3, "exp(-3*x_0 + x_1 + x_2^2)".into()),
        ("sin3d", 3, "sin(x_0*x_1 + x_2)".into()),
        ("e_4", 4, format!("exp({E4})")),
        ("e_6", 6, format!("exp({E4})*exp(-2*x_4 + x_5)")),
        ("e_8", 8, format!("exp({E4})*exp(-2*x_4 + x_5)*exp(-x_6*x_7)")),
        ("s_4", 4, format!("sin({S4})")),
        ("s_6", 6, format!("sin({s6})")),
        ("s_8", 8, format!("sin({s6} + sqrt(x_6)*x_7)")),
        ("r_4", 4, format!("x_0*x_1/({R4})")),
        ("r_6", 6, format!("x_0*x_1/({r6})")),
        ("r_8", 8, format!("(x_0*x_1 + sqrt(x_6)*x_7)/({r6})")),
    ]
}

/// All built-in targets, each on `[0, 1]^d`.
pub fn registry() -> &'static [TargetSpec] {
    static REGISTRY: OnceLock<Vec<TargetSpec>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        definitions()
            .into_iter()
            .map(|(name, dim, src)| TargetSpec::new(name, dim, &src).expect("built-in target parses"))
            .collect()
    })
}

pub fn target_names() -> Vec<&'static str> {
    registry().iter().map(|t| t.name.as_str()).collect()
}

pub fn find_target(name: &str) -> Result<&'static TargetSpec> {
    registry()
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| SmpfError::UnknownTarget {
            name: name.to_string(),
            available: target_names().join(", "),
        })
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T> {
    if pred.len() != truth.len() {
        return Err(SmpfError::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(SmpfError::Shape("r2 needs at least one point".into()));
    }
    let mean = truth.iter().copied().sum::<T>() / T::of(truth.len() as f64);
    let ss_tot: T = truth.iter().map(|&t| (t - mean) * (t - mean)).sum();
    if ss_tot == T::zero() {
        return Err(SmpfError::DegenerateTruth);
    }
    let ss_res: T = pred.iter().zip(truth).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok(T::one() - ss_res / ss_tot)
}

fn mse_of<T: Scalar>(pred: &[T], truth: &[T]) -> T {
    let acc: T = pred.iter().zip(truth).map(|(&p, &t)| (p - t) * (p - t)).sum();
    acc / T::of(truth.len() as f64)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRow {
    pub seed: u64,
    pub train_mse: f64,
    pub test_mse: f64,
    pub train_r2: f64,
    pub test_r2: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub target: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SeedRow>,
    pub train_mse: Summary,
    pub test_mse: Summary,
    pub train_r2: Summary,
    pub test_r2: Summary,
    /// Seed whose tree scored the highest test R² (first one on ties).
    pub best_seed: u64,
    pub best_expression: String,
    pub seconds: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(|e| SmpfError::Shape(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// One line of the aggregate table written by [`write_table`].
    pub fn table_line(&self) -> String {
        format!(
            "{:<8} {:>3}  {:.4} ± {:.4}  {:.3} ± {:.3}",
            self.target,
            self.seeds.len(),
            self.test_mse.mean,
            self.test_mse.std,
            self.test_r2.mean,
            self.test_r2.std
        )
    }
}

/// Human-readable table of several reports.
pub fn write_table<W: Write>(reports: &[RunReport], mut out: W) -> Result<()> {
    writeln!(out, "{:<8} {:>3}  {:<17}  {}", "target", "n", "test MSE", "test R²")?;
    for r in reports {
        writeln!(out, "{}", r.table_line())?;
    }
    Ok(())
}

/// Aggregate CSV with one row per report.
pub fn write_table_csv<W: Write>(reports: &[RunReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header = [
        "target", "seeds", "train_mse_mean", "train_mse_std", "test_mse_mean", "test_mse_std",
        "train_r2_mean", "train_r2_std", "test_r2_mean", "test_r2_std",
    ];
    let err = |e: csv::Error| SmpfError::Shape(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in reports {
        let mut rec = vec![r.target.clone(), r.seeds.len().to_string()];
        for s in [r.train_mse, r.test_mse, r.train_r2, r.test_r2] {
            rec.push(s.mean.to_string());
            rec.push(s.std.to_string());
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

/// What an experiment fits.
#[derive(Debug, Clone)]
pub enum Source<T> {
    Target(TargetSpec),
    Dataset { name: String, data: Dataset<T> },
}

impl<T: Scalar> Source<T> {
    pub fn name(&self) -> &str {
        match self {
            Source::Target(t) => &t.name,
            Source::Dataset { name, .. } => name,
        }
    }
}

/// Train and test partition of a dataset for one seed.
pub fn split_dataset<T: Scalar>(data: &Dataset<T>, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = data.len();
    if n < 2 {
        return Err(SmpfError::Shape(format!("dataset needs at least 2 rows to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Split, 0, 0));
    let n_train = ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

pub struct SeedOutcome<T> {
    pub row: SeedRow,
    pub tree: MetamodelTree<T>,
}

fn predict<T: Scalar>(tree: &MetamodelTree<T>, batch: &Batch<T>) -> Vec<T> {
    batch.rows().map(|x| tree.eval_unchecked(x)).collect()
}

fn metrics<T: Scalar>(tree: &MetamodelTree<T>, batch: &Batch<T>) -> Result<(f64, f64)> {
    let pred = predict(tree, batch);
    let err = mse_of(&pred, batch.targets()).as_f64();
    Ok((err, r2(&pred, batch.targets())?.as_f64()))
}

/// Single-seed run: fit on the training side, score both sides.
pub fn run_seed<T: Scalar>(source: &Source<T>, cfg: &SmpfConfig, seed: u64) -> Result<SeedOutcome<T>> {
    let start = Instant::now();
    let cfg = SmpfConfig {
        seed,
        ..cfg.clone()
    };
    let (oracle, train, test) = match source {
        Source::Target(spec) => {
            let oracle = spec.oracle::<T>()?;
            let train = sample_batch(&oracle, TEST_POINTS, &mut stream_rng(seed, Stream::TrainEval, 0, 0));
            let test = sample_batch(&oracle, TEST_POINTS, &mut stream_rng(seed, Stream::TestSet, 0, 0));
            (oracle, train, test)
        }
        Source::Dataset { data, .. } => {
            let (tr, te) = split_dataset(data, seed)?;
            let train = data.subset(&tr)?;
            let test = data.subset(&te)?.as_batch();
            let train_batch = train.as_batch();
            (Oracle::Dataset(train), train_batch, test)
        }
    };
    let result = run_smpf(&oracle, &cfg)?;
    let (train_mse, train_r2) = metrics(&result.best, &train)?;
    let (test_mse, test_r2) = metrics(&result.best, &test)?;
    Ok(SeedOutcome {
        row: SeedRow {
            seed,
            train_mse,
            test_mse,
            train_r2,
            test_r2,
            seconds: start.elapsed().as_secs_f64(),
        },
        tree: result.best,
    })
}

/// Runs every seed (concurrently) and aggregates. Returns the report and the best tree.
pub fn run_experiment<T: Scalar>(
    source: &Source<T>,
    cfg: &SmpfConfig,
    seeds: &[u64],
    precision: usize,
) -> Result<(RunReport, MetamodelTree<T>)> {
    if seeds.is_empty() {
        return Err(SmpfError::Config("at least one seed is required".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let outcomes: Vec<SeedOutcome<T>> = seeds
        .par_iter()
        .map(|&s| run_seed(source, cfg, s))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, o) in outcomes.iter().enumerate() {
        if o.row.test_r2 > outcomes[best].row.test_r2 {
            best = i;
        }
    }
    let rows: Vec<SeedRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let column = |f: fn(&SeedRow) -> f64| Summary::of(&rows.iter().map(f).collect::<Vec<_>>());
    let report = RunReport {
        target: source.name().to_string(),
        seeds: seeds.to_vec(),
        train_mse: column(|r| r.train_mse),
        test_mse: column(|r| r.test_mse),
        train_r2: column(|r| r.train_r2),
        test_r2: column(|r| r.test_r2),
        best_seed: rows[best].seed,
        best_expression: outcomes[best].tree.render(precision),
        seconds: start.elapsed().as_secs_f64(),
        rows,
    };
    let tree = outcomes.into_iter().nth(best).expect("best index in range").tree;
    Ok((report, tree))
}
