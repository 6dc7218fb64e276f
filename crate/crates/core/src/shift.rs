//! Feature-space domain shift and accuracy margins.

use serde::Serialize;

use crate::error::{shape_err, Error, Result};

/// Softmax of a domain's mean feature vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainDistribution {
    probs: Vec<f64>,
}

impl DomainDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Builds the distribution from one domain's feature vectors.
pub fn domain_distribution<V: AsRef<[f64]>>(features: &[V]) -> Result<DomainDistribution> {
    let first = features.first().ok_or_else(|| Error::EmptyDomain("no feature vectors".into()))?;
    let dim = first.as_ref().len();
    if dim == 0 {
        return Err(shape_err("feature vectors are empty"));
    }
    let mut mean = vec![0.0; dim];
    for f in features {
        let f = f.as_ref();
        if f.len() != dim {
            return Err(shape_err(format!("feature of length {}, expected {dim}", f.len())));
        }
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    let n = features.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    if mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::Numeric("non-finite mean feature".into()));
    }
    let max = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = mean.iter().map(|m| (m - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(DomainDistribution {
        probs: exps.into_iter().map(|e| e / sum).collect(),
    })
}

/// `Σ p ln(p/q)` in nats.
pub fn kld(p: &DomainDistribution, q: &DomainDistribution) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(shape_err(format!(
            "distributions of dimension {} and {}",
            p.probs.len(),
            q.probs.len()
        )));
    }
    let d: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum();
    // Rounding can leave tiny negatives when p ≈ q.
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftReport {
    pub d_shift: f64,
    /// `kld[i][j]` between source `i` and target `j`.
    pub kld: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
}

/// Size-weighted mean KLD from every source to every target domain.
pub fn domain_shift<V: AsRef<[f64]>>(sources: &[Vec<V>], targets: &[Vec<V>]) -> Result<ShiftReport> {
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::EmptyDomain("need at least one source and one target domain".into()));
    }
    let src = sources.iter().map(|f| domain_distribution(f)).collect::<Result<Vec<_>>>()?;
    let tgt = targets.iter().map(|f| domain_distribution(f)).collect::<Result<Vec<_>>>()?;
    let n = sources.len() as f64;
    let m = targets.len() as f64;
    let total: usize = sources.iter().map(Vec::len).sum();
    let lambda: Vec<f64> = sources.iter().map(|f| n * f.len() as f64 / total as f64).collect();
    let kld = src
        .iter()
        .map(|p| tgt.iter().map(|q| kld(p, q)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let weighted: f64 = kld.iter().zip(&lambda).map(|(row, l)| l * row.iter().sum::<f64>()).sum();
    Ok(ShiftReport {
        d_shift: weighted / (m * n),
        kld,
        lambda,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginReport {
    pub margins: Vec<f64>,
    pub mean: f64,
}

/// Within-domain minus cross-domain accuracy per domain.
pub fn accuracy_margin(within: &[f64], cross: &[f64]) -> Result<MarginReport> {
    if within.len() != cross.len() {
        return Err(shape_err(format!(
            "{} within-domain and {} cross-domain accuracies",
            within.len(),
            cross.len()
        )));
    }
    if within.is_empty() {
        return Err(Error::EmptyDomain("no accuracies".into()));
    }
    let margins: Vec<f64> = within.iter().zip(cross).map(|(w, c)| w - c).collect();
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    Ok(MarginReport { margins, mean })
}
