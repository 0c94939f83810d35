//! Linear nano models and the least-squares trainer.
//!
//! A [`LinearModel`] maps named inputs to a sparse feature row through a
//! [`FeatureMap`], takes a dot product with its coefficient vector (entry 0
//! is the intercept), and applies its [`Link`]. [`train_nano`] fits the
//! coefficients by ridge-floored least squares.

use crate::canonical::Digest;
use crate::lineage::Seed;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

/// Ridge floor, scaled by the largest diagonal of the normal matrix.
pub const RIDGE_FLOOR: f64 = 1e-12;
/// Widest system solved by dense Cholesky; wider fits use conjugate gradients.
pub const DENSE_LIMIT: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("non-finite value in row {0}")]
    NonFinite(usize),
    #[error("feature index {index} out of range for dimension {dim}")]
    BadIndex { index: usize, dim: usize },
    #[error("dataset dimension {dataset} does not match feature map dimension {features}")]
    DimensionMismatch { dataset: usize, features: usize },
    #[error("log-link target must be positive, row {0}")]
    NonPositiveTarget(usize),
}

/// Output transform applied to the linear score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    /// Output is `exp(score)`; targets are fitted in log space.
    Log,
}

/// How named inputs become a feature row (intercept excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "snake_case")]
pub enum FeatureMap {
    /// One feature per named input, taken as is.
    Raw { fields: Vec<String> },
    /// `ln(x / reference)` per named input, followed by `tiles` one-hot
    /// features selected by a hash of the quantized log inputs.
    LogRatio {
        fields: Vec<String>,
        references: Vec<f64>,
        tiles: usize,
    },
    /// Inputs named `x0 .. x{dim-1}`; absent inputs are zero.
    Sparse { dim: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("missing input `{0}`")]
    Missing(String),
    #[error("unexpected input `{0}`")]
    Unexpected(String),
    #[error("input `{0}` out of the model's domain")]
    Domain(String),
}

impl FeatureMap {
    /// Number of features, excluding the intercept.
    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::Raw { fields } => fields.len(),
            FeatureMap::LogRatio { fields, tiles, .. } => fields.len() + tiles,
            FeatureMap::Sparse { dim } => *dim,
        }
    }

    /// Named inputs the map reads; empty for sparse maps.
    pub fn input_names(&self) -> Vec<String> {
        match self {
            FeatureMap::Raw { fields } | FeatureMap::LogRatio { fields, .. } => fields.clone(),
            FeatureMap::Sparse { .. } => Vec::new(),
        }
    }

    /// Sparse feature row for one input record, indices ascending.
    pub fn row(&self, inputs: &BTreeMap<String, f64>) -> Result<Vec<(usize, f64)>, FeatureError> {
        match self {
            FeatureMap::Raw { fields } => {
                reject_unknown(inputs, fields)?;
                fields
                    .iter()
                    .enumerate()
                    .map(|(i, f)| Ok((i, lookup(inputs, f)?)))
                    .collect()
            }
            FeatureMap::LogRatio {
                fields,
                references,
                tiles,
            } => {
                reject_unknown(inputs, fields)?;
                let mut row = Vec::with_capacity(fields.len() + 1);
                let mut h = 0x243f_6a88_85a3_08d3u64;
                for (i, (f, r)) in fields.iter().zip(references).enumerate() {
                    let x = lookup(inputs, f)?;
                    if !(x > 0.0) {
                        return Err(FeatureError::Domain(f.clone()));
                    }
                    let z = (x / r).ln();
                    row.push((i, z));
                    h = splitmix(h ^ ((z * 4.0).round() as i64 as u64));
                }
                if *tiles > 0 {
                    row.push((fields.len() + (h % *tiles as u64) as usize, 1.0));
                }
                Ok(row)
            }
            FeatureMap::Sparse { dim } => {
                let mut row = Vec::with_capacity(inputs.len());
                for (name, &v) in inputs {
                    let idx = name
                        .strip_prefix('x')
                        .and_then(|s| s.parse::<usize>().ok())
                        .filter(|&i| i < *dim)
                        .ok_or_else(|| FeatureError::Unexpected(name.clone()))?;
                    if !v.is_finite() {
                        return Err(FeatureError::Domain(name.clone()));
                    }
                    row.push((idx, v));
                }
                row.sort_by_key(|&(i, _)| i);
                Ok(row)
            }
        }
    }
}

fn lookup(inputs: &BTreeMap<String, f64>, name: &str) -> Result<f64, FeatureError> {
    let v = *inputs
        .get(name)
        .ok_or_else(|| FeatureError::Missing(name.to_string()))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FeatureError::Domain(name.to_string()))
    }
}

fn reject_unknown(inputs: &BTreeMap<String, f64>, fields: &[String]) -> Result<(), FeatureError> {
    for k in inputs.keys() {
        if !fields.iter().any(|f| f == k) {
            return Err(FeatureError::Unexpected(k.clone()));
        }
    }
    Ok(())
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A linear model: intercept plus one coefficient per feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub features: FeatureMap,
    pub link: Link,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn param_count(&self) -> usize {
        self.coefficients.len()
    }

    pub fn score(&self, row: &[(usize, f64)]) -> f64 {
        let mut s = self.coefficients[0];
        for &(i, v) in row {
            s += self.coefficients[i + 1] * v;
        }
        s
    }

    pub fn predict(&self, inputs: &BTreeMap<String, f64>) -> Result<f64, FeatureError> {
        let s = self.score(&self.features.row(inputs)?);
        Ok(match self.link {
            Link::Identity => s,
            Link::Log => s.exp(),
        })
    }
}

/// Training rows in compressed sparse row form. The intercept column is
/// implicit and never stored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            indptr: vec![0],
            ..Default::default()
        }
    }

    pub fn with_capacity(dim: usize, rows: usize, nnz: usize) -> Self {
        let mut indptr = Vec::with_capacity(rows + 1);
        indptr.push(0);
        Self {
            dim,
            indptr,
            indices: Vec::with_capacity(nnz),
            values: Vec::with_capacity(nnz),
            targets: Vec::with_capacity(rows),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Append a sparse row; entries need not be sorted.
    pub fn push_sparse(&mut self, row: &[(usize, f64)], target: f64) {
        let start = self.indices.len();
        for &(i, v) in row {
            self.indices.push(i as u32);
            self.values.push(v);
        }
        let mut pairs: Vec<(u32, f64)> = self.indices[start..]
            .iter()
            .copied()
            .zip(self.values[start..].iter().copied())
            .collect();
        pairs.sort_by_key(|p| p.0);
        for (k, (i, v)) in pairs.into_iter().enumerate() {
            self.indices[start + k] = i;
            self.values[start + k] = v;
        }
        self.indptr.push(self.indices.len());
        self.targets.push(target);
    }

    pub fn push_dense(&mut self, row: &[f64], target: f64) {
        let sparse: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
        self.push_sparse(&sparse, target);
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// Build from named samples through a feature map and link.
    pub fn from_samples(
        features: &FeatureMap,
        link: Link,
        samples: &[(BTreeMap<String, f64>, f64)],
    ) -> Result<Self, TrainError> {
        let mut ds = Dataset::new(features.dim());
        for (r, (inputs, y)) in samples.iter().enumerate() {
            let row = features.row(inputs).map_err(|_| TrainError::NonFinite(r))?;
            let t = match link {
                Link::Identity => *y,
                Link::Log if *y > 0.0 => y.ln(),
                Link::Log => return Err(TrainError::NonPositiveTarget(r)),
            };
            ds.push_sparse(&row, t);
        }
        Ok(ds)
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if self.len() < 2 {
            return Err(TrainError::TooFewRows(self.len()));
        }
        for r in 0..self.len() {
            let (idx, val) = self.row(r);
            if !self.targets[r].is_finite() || val.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite(r));
            }
            if let Some(&i) = idx.iter().find(|&&i| i as usize >= self.dim) {
                return Err(TrainError::BadIndex {
                    index: i as usize,
                    dim: self.dim,
                });
            }
        }
        Ok(())
    }

    /// Row order sorted by (indices, value bits, target bits).
    fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let (ia, va) = self.row(a);
            let (ib, vb) = self.row(b);
            ia.cmp(ib)
                .then_with(|| {
                    va.iter()
                        .map(|v| v.to_bits())
                        .cmp(vb.iter().map(|v| v.to_bits()))
                })
                .then_with(|| self.targets[a].to_bits().cmp(&self.targets[b].to_bits()))
        });
        order
    }

    fn reorder(&self, order: &[usize]) -> Dataset {
        let mut out = Dataset::with_capacity(self.dim, self.len(), self.indices.len());
        for &r in order {
            let (a, b) = (self.indptr[r], self.indptr[r + 1]);
            out.indices.extend_from_slice(&self.indices[a..b]);
            out.values.extend_from_slice(&self.values[a..b]);
            out.indptr.push(out.indices.len());
            out.targets.push(self.targets[r]);
        }
        out
    }

    fn digest(&self, seed: Seed) -> Digest {
        let mut h = Sha256::new();
        h.update(b"nanoworld/dataset/v1");
        h.update(seed.0.to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for r in 0..self.len() {
            let (idx, val) = self.row(r);
            h.update((idx.len() as u64).to_le_bytes());
            for (&i, &v) in idx.iter().zip(val) {
                h.update(i.to_le_bytes());
                h.update(v.to_bits().to_le_bytes());
            }
            h.update(self.targets[r].to_bits().to_le_bytes());
        }
        Digest(h.finalize().into())
    }
}

/// Result of a least-squares fit.
#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    /// Intercept first, then one coefficient per feature.
    pub coefficients: Vec<f64>,
    /// Digest of the canonicalized dataset and seed.
    pub training_digest: Digest,
    pub iterations: usize,
}

/// Fit `targets ≈ intercept + X·w` by ridge-floored least squares.
///
/// Rows are first sorted into a canonical order, so the result depends only
/// on the multiset of rows. The seed takes no part in the arithmetic (the
/// fit is deterministic); it is folded into the training digest so that the
/// artifact records how it was produced.
pub fn train_nano(dataset: &Dataset, seed: Seed) -> Result<Fit, TrainError> {
    dataset.validate()?;
    let ds = dataset.reorder(&dataset.canonical_order());
    let digest = ds.digest(seed);
    let p = ds.dim + 1;
    let (coefficients, iterations) = if p <= DENSE_LIMIT {
        (solve_dense(&ds), 0)
    } else {
        solve_cg(&ds)
    };
    Ok(Fit {
        coefficients,
        training_digest: digest,
        iterations,
    })
}

/// Normal equations with the intercept as column 0.
fn solve_dense(ds: &Dataset) -> Vec<f64> {
    let p = ds.dim + 1;
    let mut g = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    let mut x = vec![0.0; p];
    for r in 0..ds.len() {
        x.iter_mut().for_each(|v| *v = 0.0);
        x[0] = 1.0;
        let (idx, val) = ds.row(r);
        for (&i, &v) in idx.iter().zip(val) {
            x[i as usize + 1] += v;
        }
        let y = ds.targets[r];
        for i in 0..p {
            if x[i] == 0.0 {
                continue;
            }
            rhs[i] += x[i] * y;
            for j in 0..=i {
                g[i * p + j] += x[i] * x[j];
            }
        }
    }
    let max_diag = (0..p).map(|i| g[i * p + i]).fold(1.0f64, f64::max);
    let lambda = RIDGE_FLOOR * max_diag;
    for i in 0..p {
        g[i * p + i] += lambda;
    }
    // Cholesky, lower triangle in place
    for j in 0..p {
        let mut d = g[j * p + j];
        for k in 0..j {
            d -= g[j * p + k] * g[j * p + k];
        }
        let d = d.max(lambda).sqrt();
        g[j * p + j] = d;
        for i in j + 1..p {
            let mut s = g[i * p + j];
            for k in 0..j {
                s -= g[i * p + k] * g[j * p + k];
            }
            g[i * p + j] = s / d;
        }
    }
    let mut z = rhs;
    for i in 0..p {
        for k in 0..i {
            z[i] -= g[i * p + k] * z[k];
        }
        z[i] /= g[i * p + i];
    }
    for i in (0..p).rev() {
        for k in i + 1..p {
            z[i] -= g[k * p + i] * z[k];
        }
        z[i] /= g[i * p + i];
    }
    z
}

/// Jacobi-preconditioned conjugate gradients on the normal equations.
fn solve_cg(ds: &Dataset) -> (Vec<f64>, usize) {
    let p = ds.dim + 1;
    let n = ds.len();
    let apply_x = |w: &[f64], out: &mut Vec<f64>| {
        out.clear();
        for r in 0..n {
            let (idx, val) = ds.row(r);
            let mut s = w[0];
            for (&i, &v) in idx.iter().zip(val) {
                s += w[i as usize + 1] * v;
            }
            out.push(s);
        }
    };
    let apply_xt = |t: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, &tr) in t.iter().enumerate() {
            out[0] += tr;
            let (idx, val) = ds.row(r);
            for (&i, &v) in idx.iter().zip(val) {
                out[i as usize + 1] += v * tr;
            }
        }
    };
    let mut diag = vec![0.0; p];
    diag[0] = n as f64;
    for (&i, &v) in ds.indices.iter().zip(&ds.values) {
        diag[i as usize + 1] += v * v;
    }
    let lambda = RIDGE_FLOOR * diag.iter().copied().fold(1.0f64, f64::max);
    let precond: Vec<f64> = diag.iter().map(|d| 1.0 / (d + lambda)).collect();

    let mut w = vec![0.0; p];
    let mut r = vec![0.0; p];
    apply_xt(&ds.targets, &mut r);
    let b_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(a, m)| a * m).collect();
    let mut d = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut t = Vec::with_capacity(n);
    let mut q = vec![0.0; p];
    let max_iter = (10 * p).clamp(100, 5000);
    let mut it = 0;
    while it < max_iter {
        let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r_norm <= 1e-12 * b_norm {
            break;
        }
        apply_x(&d, &mut t);
        apply_xt(&t, &mut q);
        for (qi, di) in q.iter_mut().zip(&d) {
            *qi += lambda * di;
        }
        let dq: f64 = d.iter().zip(&q).map(|(a, b)| a * b).sum();
        if !(dq > 0.0) {
            break;
        }
        let alpha = rz / dq;
        for i in 0..p {
            w[i] += alpha * d[i];
            r[i] -= alpha * q[i];
        }
        for i in 0..p {
            z[i] = r[i] * precond[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..p {
            d[i] = z[i] + beta * d[i];
        }
        it += 1;
    }
    (w, it)
}
