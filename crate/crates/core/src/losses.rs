//! Clustering and location objectives, plus the two training diagnostics.
//!
//! Everything here works in `f64` on row-per-patch matrices: embeddings are
//! `(n·m·m, c)` and location logits `(n·m·m, m·m)`, ordered montage-major then
//! slot row-major, matching the labels produced by the pipeline.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "yes")]
    pub clustering_enabled: bool,
    #[serde(default = "yes")]
    pub location_enabled: bool,
}

fn default_tau() -> f64 {
    0.2
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.2,
            alpha: 1.0,
            beta: 1.0,
            clustering_enabled: true,
            location_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("loss.alpha and loss.beta must be non-negative".into()));
        }
        if !self.clustering_enabled && !self.location_enabled {
            return Err(Error::Config("at least one of the clustering and location branches must be enabled".into()));
        }
        Ok(())
    }
}

/// Source-image label per patch with the derived same-cluster sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTargets {
    ids: Vec<usize>,
    members: Vec<Vec<usize>>,
    cluster_size: usize,
}

impl ClusterTargets {
    /// Every cluster must contain exactly `cluster_size` (= m·m) patches.
    pub fn new(ids: Vec<usize>, cluster_size: usize) -> Result<Self> {
        if cluster_size < 2 {
            return Err(Error::Invalid("clusters need at least two members".into()));
        }
        let mut by_cluster: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &c) in ids.iter().enumerate() {
            by_cluster.entry(c).or_default().push(i);
        }
        if let Some((c, v)) = by_cluster.iter().find(|(_, v)| v.len() != cluster_size) {
            return Err(Error::Invalid(format!(
                "cluster {c} has {} members, expected {cluster_size}",
                v.len()
            )));
        }
        let members = ids
            .iter()
            .enumerate()
            .map(|(i, c)| by_cluster[c].iter().copied().filter(|&j| j != i).collect())
            .collect();
        Ok(ClusterTargets {
            ids,
            members,
            cluster_size,
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indices `j ≠ i` sharing `i`'s cluster.
    pub fn members(&self, i: usize) -> &[usize] {
        &self.members[i]
    }

    pub fn cluster_size(&self) -> usize {
        self.cluster_size
    }
}

/// Original-location label per patch; every class occurs equally often.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationTargets {
    ids: Vec<usize>,
    classes: usize,
}

impl LocationTargets {
    pub fn new(ids: Vec<usize>, classes: usize) -> Result<Self> {
        let mut hist = vec![0usize; classes];
        for &l in &ids {
            if l >= classes {
                return Err(Error::Invalid(format!("location {l} outside 0..{classes}")));
            }
            hist[l] += 1;
        }
        if hist.iter().any(|&c| c != hist[0]) {
            return Err(Error::Invalid(format!("location histogram is not flat: {hist:?}")));
        }
        Ok(LocationTargets { ids, classes })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// Rows scaled to unit length; a zero row is an error.
pub fn normalize_rows(z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(index) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::ZeroNorm { index });
    }
    let u = &z / &norms.view().insert_axis(Axis(1));
    Ok((u, norms))
}

/// Log-sum-exp of row `i` of `s` over all columns except `i`.
fn lse_excluding_self(row: ndarray::ArrayView1<'_, f64>, i: usize) -> f64 {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + sum.ln()
}

/// `−log( exp(cos(z_i, z_j)/τ) / Σ_{k≠i} exp(cos(z_i, z_k)/τ) )`.
pub fn pair_loss(z: ArrayView2<'_, f64>, i: usize, j: usize, tau: f64) -> Result<f64> {
    if i == j {
        return Err(Error::Invalid("pair loss needs two distinct patches".into()));
    }
    let n = z.nrows();
    if i >= n || j >= n {
        return Err(Error::Invalid(format!("patch index out of range for {n} embeddings")));
    }
    let (u, _) = normalize_rows(z)?;
    let row = u.dot(&u.row(i)) / tau;
    Ok(lse_excluding_self(row.view(), i) - row[j])
}

fn check_rows(z: ArrayView2<'_, f64>, targets: &ClusterTargets) -> Result<()> {
    if z.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} cluster labels",
            z.nrows(),
            targets.len()
        )));
    }
    Ok(())
}

/// Mean over anchors of the mean pair loss against the anchor's cluster mates.
pub fn cluster_loss(z: ArrayView2<'_, f64>, targets: &ClusterTargets, tau: f64) -> Result<f64> {
    cluster_loss_grad(z, targets, tau).map(|(l, _)| l)
}

/// Clustering loss and its gradient with respect to the raw embeddings.
pub fn cluster_loss_grad(z: ArrayView2<'_, f64>, targets: &ClusterTargets, tau: f64) -> Result<(f64, Array2<f64>)> {
    check_rows(z, targets)?;
    let n = z.nrows();
    let mates = (targets.cluster_size() - 1) as f64;
    let (u, norms) = normalize_rows(z)?;
    let s = u.dot(&u.t()) / tau;
    // g[i,k] = ∂L/∂s[i,k]
    let mut g = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    for i in 0..n {
        let row = s.row(i);
        let lse = lse_excluding_self(row, i);
        let members = targets.members(i);
        let mut anchor = 0.0;
        for &j in members {
            anchor += lse - row[j];
        }
        loss += anchor / mates;
        for k in 0..n {
            if k != i {
                g[[i, k]] = (row[k] - lse).exp() / n as f64;
            }
        }
        for &j in members {
            g[[i, j]] -= 1.0 / (mates * n as f64);
        }
    }
    loss /= n as f64;
    // s = U·Uᵀ/τ  ⇒  ∂L/∂U = (G + Gᵀ)·U/τ
    let du = (&g + &g.t()).dot(&u) / tau;
    // u = z/|z|  ⇒  ∂L/∂z = (du − u·(u·du)) / |z|
    let radial = (&u * &du).sum_axis(Axis(1));
    let dz = (&du - &(&u * &radial.insert_axis(Axis(1)))) / &norms.insert_axis(Axis(1));
    Ok((loss, dz))
}

fn check_logits(logits: ArrayView2<'_, f64>, targets: &LocationTargets) -> Result<()> {
    if logits.nrows() != targets.ids().len() || logits.ncols() != targets.classes() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} targets over {} classes",
            logits.dim(),
            targets.ids().len(),
            targets.classes()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("location logits must be finite".into()));
    }
    Ok(())
}

/// Mean softmax cross-entropy over all patches.
pub fn location_loss(logits: ArrayView2<'_, f64>, targets: &LocationTargets) -> Result<f64> {
    location_loss_grad(logits, targets).map(|(l, _)| l)
}

pub fn location_loss_grad(logits: ArrayView2<'_, f64>, targets: &LocationTargets) -> Result<(f64, Array2<f64>)> {
    check_logits(logits, targets)?;
    let n = logits.nrows() as f64;
    let mut grad = Array2::<f64>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, (row, &t)) in logits.rows().into_iter().zip(targets.ids()).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[t];
        for (k, &v) in row.iter().enumerate() {
            grad[[i, k]] = (v - lse).exp() / n;
        }
        grad[[i, t]] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clustering: f64,
    pub location: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct LossGrads {
    pub breakdown: LossBreakdown,
    /// Present when the clustering branch is enabled.
    pub embeddings: Option<Array2<f64>>,
    /// Present when the location branch is enabled.
    pub logits: Option<Array2<f64>>,
}

/// `α·L_clu + β·L_loc` over the enabled branches. Disabled branches report 0.
pub fn total_loss(
    z: ArrayView2<'_, f64>,
    logits: ArrayView2<'_, f64>,
    clusters: &ClusterTargets,
    locations: &LocationTargets,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    total_loss_grad(z, logits, clusters, locations, cfg).map(|g| g.breakdown)
}

pub fn total_loss_grad(
    z: ArrayView2<'_, f64>,
    logits: ArrayView2<'_, f64>,
    clusters: &ClusterTargets,
    locations: &LocationTargets,
    cfg: &LossConfig,
) -> Result<LossGrads> {
    cfg.validate()?;
    let (clustering, dz) = if cfg.clustering_enabled {
        let (l, g) = cluster_loss_grad(z, clusters, cfg.tau)?;
        (l, Some(g * cfg.alpha))
    } else {
        (0.0, None)
    };
    let (location, dl) = if cfg.location_enabled {
        let (l, g) = location_loss_grad(logits, locations)?;
        (l, Some(g * cfg.beta))
    } else {
        (0.0, None)
    };
    let total = if cfg.clustering_enabled { cfg.alpha * clustering } else { 0.0 }
        + if cfg.location_enabled { cfg.beta * location } else { 0.0 };
    Ok(LossGrads {
        breakdown: LossBreakdown {
            clustering,
            location,
            total,
        },
        embeddings: dz,
        logits: dl,
    })
}

const TIE_TOL: f64 = 1e-12;

/// Fraction of patches whose cosine-nearest other patch shares their cluster.
///
/// Ties are resolved by fractional credit: a patch with `t` equally near
/// neighbours, `s` of them in its cluster, scores `s / t`. This is the
/// expectation under uniform random tie-breaking, so identical embeddings
/// score exactly chance, `(m·m − 1)/(n·m·m − 1)`.
pub fn retrieval_accuracy(z: ArrayView2<'_, f64>, targets: &ClusterTargets) -> Result<f64> {
    check_rows(z, targets)?;
    let (u, _) = normalize_rows(z)?;
    let s = u.dot(&u.t());
    let n = z.nrows();
    let ids = targets.ids();
    let mut score = 0.0;
    for i in 0..n {
        let row = s.row(i);
        let best = (0..n).filter(|&k| k != i).map(|k| row[k]).fold(f64::NEG_INFINITY, f64::max);
        let (mut tied, mut hits) = (0usize, 0usize);
        for k in (0..n).filter(|&k| k != i) {
            if best - row[k] <= TIE_TOL {
                tied += 1;
                hits += usize::from(ids[k] == ids[i]);
            }
        }
        score += hits as f64 / tied as f64;
    }
    Ok(score / n as f64)
}

/// Top-1 accuracy of the location logits, with the same fractional tie rule
/// as [`retrieval_accuracy`] (uniform logits score exactly `1/(m·m)`).
pub fn location_accuracy(logits: ArrayView2<'_, f64>, targets: &LocationTargets) -> Result<f64> {
    check_logits(logits, targets)?;
    let mut score = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(targets.ids()) {
        let best = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let tied = row.iter().filter(|&&v| best - v <= TIE_TOL).count();
        if best - row[t] <= TIE_TOL {
            score += 1.0 / tied as f64;
        }
    }
    Ok(score / logits.nrows() as f64)
}

/// Chance level of [`retrieval_accuracy`].
pub fn retrieval_chance(n: usize, m: usize) -> f64 {
    let mm = (m * m) as f64;
    (mm - 1.0) / (n as f64 * mm - 1.0)
}
