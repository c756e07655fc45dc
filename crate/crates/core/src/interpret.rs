//! Instance-wise feature importance from a fitted tree.

use std::io::Write;

use serde::Serialize;

use crate::error::{Result, SmpfError};
use crate::scalar::Scalar;
use crate::tree::MetamodelTree;

/// Exact input gradient of the tree at `x`.
pub fn gradient_at<T: Scalar>(tree: &MetamodelTree<T>, x: &[T]) -> Result<Vec<T>> {
    Ok(tree.backward(x)?.1.inputs)
}

/// Central-difference Hessian of the tree at `x`, symmetrized.
/// Step per axis is `1e-4 * (1 + |x_j|)`.
pub fn hessian_at<T: Scalar>(tree: &MetamodelTree<T>, x: &[T]) -> Result<Vec<Vec<T>>> {
    let d = tree.dim();
    if x.len() != d {
        return Err(SmpfError::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    let mut h = vec![vec![T::zero(); d]; d];
    let mut probe = x.to_vec();
    for j in 0..d {
        let step = T::of(1e-4) * (T::one() + x[j].abs());
        probe[j] = x[j] + step;
        let up = gradient_at(tree, &probe)?;
        probe[j] = x[j] - step;
        let down = gradient_at(tree, &probe)?;
        probe[j] = x[j];
        for i in 0..d {
            h[i][j] = (up[i] - down[i]) / (step + step);
        }
    }
    let half = T::of(0.5);
    for i in 0..d {
        for j in i + 1..d {
            let s = (h[i][j] + h[j][i]) * half;
            h[i][j] = s;
            h[j][i] = s;
        }
    }
    Ok(h)
}

/// Features ordered by decreasing `|gradient|`, ties by index.
pub fn importance_order<T: Scalar>(gradient: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gradient.len()).collect();
    order.sort_by(|&a, &b| {
        gradient[b]
            .abs()
            .partial_cmp(&gradient[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// 1-based rank of every feature (1 is most important).
pub fn ranks<T: Scalar>(gradient: &[T]) -> Vec<usize> {
    let mut rank = vec![0; gradient.len()];
    for (pos, &j) in importance_order(gradient).iter().enumerate() {
        rank[j] = pos + 1;
    }
    rank
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceReport<T> {
    pub point: Vec<T>,
    pub gradient: Vec<T>,
    /// Feature indices, most important first.
    pub ranking: Vec<usize>,
    pub hessian: Option<Vec<Vec<T>>>,
}

pub fn rank_features<T: Scalar>(tree: &MetamodelTree<T>, x: &[T], with_hessian: bool) -> Result<ImportanceReport<T>> {
    let gradient = gradient_at(tree, x)?;
    let hessian = if with_hessian {
        Some(hessian_at(tree, x)?)
    } else {
        None
    };
    Ok(ImportanceReport {
        point: x.to_vec(),
        ranking: importance_order(&gradient),
        gradient,
        hessian,
    })
}

impl<T: Scalar> ImportanceReport<T> {
    pub fn rank_of(&self, feature: usize) -> usize {
        self.ranking.iter().position(|&j| j == feature).map_or(0, |p| p + 1)
    }

    /// Appends rows `point,feature,gradient,rank` for this report.
    pub fn write_csv_rows<W: Write>(&self, point: usize, out: &mut csv::Writer<W>) -> Result<()> {
        for (j, g) in self.gradient.iter().enumerate() {
            out.write_record([
                point.to_string(),
                j.to_string(),
                g.to_string(),
                self.rank_of(j).to_string(),
            ])
            .map_err(csv_err)?;
        }
        Ok(())
    }
}

/// Writes a full importance table with header for several points.
pub fn write_importance_csv<T: Scalar, W: Write>(reports: &[ImportanceReport<T>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["point", "feature", "gradient", "rank"]).map_err(csv_err)?;
    for (i, r) in reports.iter().enumerate() {
        r.write_csv_rows(i, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> SmpfError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SmpfError::Io(io),
        other => SmpfError::Shape(format!("{other:?}")),
    }
}

/// Median 1-based rank per feature across points.
pub fn median_ranks<T: Scalar>(reports: &[ImportanceReport<T>]) -> Vec<f64> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    (0..first.gradient.len())
        .map(|j| {
            let mut r: Vec<usize> = reports.iter().map(|rep| rep.rank_of(j)).collect();
            r.sort_unstable();
            let n = r.len();
            if n % 2 == 1 {
                r[n / 2] as f64
            } else {
                (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
            }
        })
        .collect()
}
