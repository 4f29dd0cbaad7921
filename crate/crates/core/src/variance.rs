//! Variance analytics for composite rewards.
//!
//! Two tools: the law-of-total-variance split of a per-row statistic into
//! within-group (intra-trajectory) and between-group (inter-trajectory)
//! parts, and the variance of a weighted sum of correlated reward channels,
//! which shows how mixing channels with correlation below one lowers the
//! variance of the total. Population (plug-in) moments are used throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{mean, Scalar};

/// Dense symmetric matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct SymMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> SymMatrix<T> {
    /// Builds from rows; rejects non-square or asymmetric input.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("covariance matrix must be square".into()));
        }
        let data: Vec<T> = rows.iter().flatten().copied().collect();
        let m = SymMatrix { n, data };
        let tol = T::simplex_tolerance();
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (m.get(i, j), m.get(j, i));
                if (a - b).abs() > tol * (T::one() + a.abs().max(b.abs())) {
                    return Err(Error::DimensionMismatch(format!("matrix is not symmetric at ({i},{j}): {a} vs {b}")));
                }
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        self.data.chunks(self.n.max(1)).map(<[T]>::to_vec).collect()
    }
}

/// Per-rollout reward channels with optional group labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct RewardSampleMatrix<T> {
    rows: Vec<Vec<T>>,
    groups: Option<Vec<String>>,
}

impl<T: Scalar> RewardSampleMatrix<T> {
    pub fn new(rows: Vec<Vec<T>>, groups: Option<Vec<String>>) -> Result<Self> {
        let k = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::DimensionMismatch("ragged reward rows".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch("non-finite reward sample".into()));
        }
        if let Some(g) = &groups {
            if g.len() != rows.len() {
                return Err(Error::DimensionMismatch(format!("{} group labels for {} rows", g.len(), rows.len())));
            }
        }
        Ok(RewardSampleMatrix { rows, groups })
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    pub fn groups(&self) -> Option<&[String]> {
        self.groups.as_deref()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_components(&self) -> usize {
        self.rows.first().map(Vec::len).unwrap_or(0)
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Weighted total per row.
    pub fn composite(&self, weights: &[T]) -> Vec<T> {
        self.rows
            .iter()
            .map(|r| r.iter().zip(weights).map(|(&x, &w)| x * w).sum())
            .collect()
    }
}

/// `Σ β_i² Var_i + 2 Σ_{i<j} β_i β_j Cov_ij`.
pub fn weighted_variance<T: Scalar>(vars: &[T], cov: &SymMatrix<T>, weights: &[T]) -> Result<T> {
    let n = cov.dim();
    if vars.len() != n || weights.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} variances, {} weights for a {n}x{n} covariance",
            vars.len(),
            weights.len()
        )));
    }
    let tol = T::simplex_tolerance();
    for (i, &v) in vars.iter().enumerate() {
        if !(v >= T::zero()) || (cov.get(i, i) - v).abs() > tol * (T::one() + v.abs()) {
            return Err(Error::DimensionMismatch(format!(
                "variance {i} = {v} disagrees with covariance diagonal {}",
                cov.get(i, i)
            )));
        }
    }
    let mut total = T::zero();
    for i in 0..n {
        total += weights[i] * weights[i] * vars[i];
        for j in (i + 1)..n {
            total += T::lit(2.0) * weights[i] * weights[j] * cov.get(i, j);
        }
    }
    Ok(total.max(T::zero()))
}

/// Population covariance of the columns.
pub fn empirical_cov<T: Scalar>(samples: &RewardSampleMatrix<T>) -> Result<SymMatrix<T>> {
    if samples.num_rows() < 2 {
        return Err(Error::Degenerate(format!(
            "need >= 2 rows for covariance, got {}",
            samples.num_rows()
        )));
    }
    let k = samples.num_components();
    let n = T::from_usize_lossy(samples.num_rows());
    let means: Vec<T> = (0..k).map(|j| mean(&samples.column(j))).collect();
    let mut data = vec![T::zero(); k * k];
    for r in samples.rows() {
        for i in 0..k {
            let di = r[i] - means[i];
            for j in i..k {
                data[i * k + j] += di * (r[j] - means[j]);
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            let v = data[i * k + j] / n;
            data[i * k + j] = v;
            data[j * k + i] = v;
        }
    }
    Ok(SymMatrix { n: k, data })
}

/// Law-of-total-variance split of a per-row statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct VarianceSplit<T> {
    pub total: T,
    /// Size-weighted mean of within-group variances.
    pub intra: T,
    /// Size-weighted variance of group means.
    pub inter: T,
    pub groups: usize,
}

/// Splits the population variance of `values` by group label. Groups are
/// taken in order of first appearance.
pub fn total_variance_decomposition<T: Scalar, L: PartialEq>(values: &[T], labels: &[L]) -> Result<VarianceSplit<T>> {
    if values.is_empty() {
        return Err(Error::Degenerate("no samples to decompose".into()));
    }
    if values.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} values, {} labels", values.len(), labels.len())));
    }
    let mut groups: Vec<(&L, Vec<T>)> = Vec::new();
    for (v, l) in values.iter().zip(labels) {
        match groups.iter_mut().find(|(g, _)| *g == l) {
            Some((_, members)) => members.push(*v),
            None => groups.push((l, vec![*v])),
        }
    }
    let n = T::from_usize_lossy(values.len());
    let grand = mean(values);
    let total = values.iter().map(|&v| (v - grand) * (v - grand)).sum::<T>() / n;
    let (mut intra, mut inter) = (T::zero(), T::zero());
    for (_, members) in &groups {
        let share = T::from_usize_lossy(members.len()) / n;
        let m = mean(members);
        let within = members.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::from_usize_lossy(members.len());
        intra += share * within;
        inter += share * (m - grand) * (m - grand);
    }
    Ok(VarianceSplit {
        total,
        intra,
        inter,
        groups: groups.len(),
    })
}

/// Channel moments, composite variance and reduction against one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct DecompositionReport<T> {
    pub component_variances: Vec<T>,
    pub covariance: Vec<Vec<T>>,
    pub weights: Vec<T>,
    pub composite_variance: T,
    pub baseline_component: usize,
    pub baseline_variance: T,
    /// `1 - Var(composite) / Var(baseline)`.
    pub reduction_ratio: T,
    /// Split of the composite reward by group, when labels are present.
    pub split: Option<VarianceSplit<T>>,
}

/// Compares the variance of the weighted composite with that of a single
/// baseline channel.
pub fn diversification_report<T: Scalar>(
    samples: &RewardSampleMatrix<T>,
    weights: &[T],
    baseline_component: usize,
) -> Result<DecompositionReport<T>> {
    let k = samples.num_components();
    if weights.len() != k {
        return Err(Error::DimensionMismatch(format!("{} weights for {k} components", weights.len())));
    }
    if baseline_component >= k {
        return Err(Error::DimensionMismatch(format!(
            "baseline component {baseline_component} out of range for {k} components"
        )));
    }
    let cov = empirical_cov(samples)?;
    let vars = cov.diagonal();
    let baseline_variance = vars[baseline_component];
    if !(baseline_variance > T::zero()) {
        return Err(Error::Degenerate(format!(
            "baseline component {baseline_component} has zero variance"
        )));
    }
    let composite_variance = weighted_variance(&vars, &cov, weights)?;
    let split = match samples.groups() {
        Some(labels) => Some(total_variance_decomposition(&samples.composite(weights), labels)?),
        None => None,
    };
    Ok(DecompositionReport {
        component_variances: vars,
        covariance: cov.rows(),
        weights: weights.to_vec(),
        composite_variance,
        baseline_component,
        baseline_variance,
        reduction_ratio: T::one() - composite_variance / baseline_variance,
        split,
    })
}
