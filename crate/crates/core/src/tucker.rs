//! Tucker factorization: HO-SVD, error-budgeted rank selection,
//! reconstruction, parameter counting and initialization from a stack of
//! per-domain models.
//!
//! Factor matrices are stored `D_m × K_m`, so `reconstruct` applies them
//! directly (`core ×_m U_m`) and HO-SVD projects with their transposes.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{extend_orthonormal, svd, Matrix, Tensor};

/// Core tensor `K_1 × … × K_M` plus one `D_m × K_m` factor per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerFactors {
    core: Tensor,
    factors: Vec<Matrix>,
}

impl TuckerFactors {
    pub fn new(core: Tensor, factors: Vec<Matrix>) -> Result<Self> {
        if core.order() != factors.len() {
            return Err(shape_err(format!(
                "order-{} core with {} factors",
                core.order(),
                factors.len()
            )));
        }
        for (m, (f, &k)) in factors.iter().zip(core.shape()).enumerate() {
            if f.cols() != k {
                return Err(shape_err(format!("factor {m} has {} columns, core rank {k}", f.cols())));
            }
            if f.rows() < k {
                return Err(Error::InvalidRank {
                    mode: m,
                    rank: k,
                    extent: f.rows(),
                });
            }
        }
        Ok(Self { core, factors })
    }

    pub fn core(&self) -> &Tensor {
        &self.core
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    /// Mutable views of the core followed by each factor.
    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.core.data_mut()];
        out.extend(self.factors.iter_mut().map(Matrix::data_mut));
        out
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.core.shape().to_vec()
    }

    /// Extents `D_1..D_M` of the represented tensor.
    pub fn full_shape(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }

    /// Number of learnable scalars held by the factorization.
    pub fn parameter_count(&self) -> usize {
        self.core.len() + self.factors.iter().map(|f| f.data().len()).sum::<usize>()
    }

    /// `core ×_1 U_1 … ×_M U_M`.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let mut t = self.core.clone();
        for (m, f) in self.factors.iter().enumerate() {
            t = t.mode_product(f, m)?;
        }
        Ok(t)
    }
}

/// Outcome of [`select_ranks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    pub ranks: Vec<usize>,
    pub achieved_error: f64,
    pub budget: f64,
}

fn check_ranks(shape: &[usize], ranks: &[usize]) -> Result<()> {
    if ranks.len() != shape.len() {
        return Err(shape_err(format!(
            "{} ranks for an order-{} tensor",
            ranks.len(),
            shape.len()
        )));
    }
    for (m, (&k, &d)) in ranks.iter().zip(shape).enumerate() {
        if k == 0 || k > d {
            return Err(Error::InvalidRank {
                mode: m,
                rank: k,
                extent: d,
            });
        }
    }
    Ok(())
}

/// Leading left singular vectors of every unfolding, padded to `D_m` columns,
/// together with the singular values (zero-padded to `D_m`).
fn mode_bases(t: &Tensor) -> Result<Vec<(Matrix, Vec<f64>)>> {
    (0..t.order())
        .map(|m| {
            let r = svd(&t.unfold(m)?)?;
            let d = t.shape()[m];
            let mut s = r.s;
            s.resize(d, 0.0);
            Ok((extend_orthonormal(&r.u, d), s))
        })
        .collect()
}

fn project(t: &Tensor, bases: &[(Matrix, Vec<f64>)], ranks: &[usize]) -> Result<TuckerFactors> {
    let factors: Vec<Matrix> = bases
        .iter()
        .zip(ranks)
        .map(|((u, _), &k)| u.leading_columns(k))
        .collect::<Result<_>>()?;
    let mut core = t.clone();
    for (m, f) in factors.iter().enumerate() {
        core = core.mode_product(&f.transpose(), m)?;
    }
    TuckerFactors::new(core, factors)
}

/// Truncated HO-SVD at the given ranks.
pub fn hosvd(t: &Tensor, ranks: &[usize]) -> Result<TuckerFactors> {
    check_ranks(t.shape(), ranks)?;
    let bases = mode_bases(t)?;
    project(t, &bases, ranks)
}

/// Chooses per-mode ranks so the HO-SVD reconstruction error stays within
/// `epsilon` (relative Frobenius).
///
/// Each mode first keeps the smallest rank whose discarded squared singular
/// values fit in `ε²/M` of the total energy. Boundary ties keep the extra
/// component. If the actual reconstruction still misses the budget, the mode
/// with the largest next singular value grows by one until it fits.
pub fn select_ranks(t: &Tensor, epsilon: f64) -> Result<RankSelection> {
    Ok(select_with_factors(t, epsilon)?.1)
}

fn select_with_factors(t: &Tensor, epsilon: f64) -> Result<(TuckerFactors, RankSelection)> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let bases = mode_bases(t)?;
    let total: f64 = t.data().iter().map(|v| v * v).sum();
    let per_mode = epsilon * epsilon / t.order() as f64 * total;

    let mut ranks: Vec<usize> = bases
        .iter()
        .map(|(_, s)| {
            let d = s.len();
            // tail[k] = Σ_{j >= k} σ_j²
            let mut tail = vec![0.0; d + 1];
            for j in (0..d).rev() {
                tail[j] = tail[j + 1] + s[j] * s[j];
            }
            let mut k = (1..=d).find(|&k| tail[k] <= per_mode).unwrap_or(d);
            while k < d && s[k] == s[k - 1] && s[k] > 0.0 {
                k += 1;
            }
            k
        })
        .collect();

    loop {
        let factors = project(t, &bases, &ranks)?;
        let err = t.relative_error(&factors.reconstruct()?)?;
        if err <= epsilon {
            let sel = RankSelection {
                ranks,
                achieved_error: err,
                budget: epsilon,
            };
            return Ok((factors, sel));
        }
        let grow = bases
            .iter()
            .zip(&ranks)
            .enumerate()
            .filter(|(_, ((_, s), &k))| k < s.len())
            .max_by(|(i, ((_, a), &ka)), (j, ((_, b), &kb))| {
                a[ka].total_cmp(&b[kb]).then(j.cmp(i))
            })
            .map(|(m, _)| m);
        match grow {
            Some(m) => ranks[m] += 1,
            // Full rank everywhere; only round-off can exceed the budget here.
            None => {
                return Err(Error::Numeric(format!(
                    "full-rank reconstruction error {err} exceeds {epsilon}"
                )))
            }
        }
    }
}

/// Scalars in an uncompressed parameter tensor `D_1 × … × D_{M−1} × (S+1)`.
pub fn param_count_full(dims: &[usize], domains: usize) -> usize {
    dims.iter().product::<usize>() * (domains + 1)
}

/// Scalars in its Tucker form: `∏ K_m + Σ_{m<M} D_m K_m + K_M (S+1)`.
pub fn param_count_tucker(dims: &[usize], ranks: &[usize], domains: usize) -> Result<usize> {
    if ranks.len() != dims.len() + 1 {
        return Err(shape_err(format!(
            "{} dims need {} ranks, got {}",
            dims.len(),
            dims.len() + 1,
            ranks.len()
        )));
    }
    let core: usize = ranks.iter().product();
    let factors: usize = dims.iter().zip(ranks).map(|(d, k)| d * k).sum();
    let last = ranks[dims.len()] * (domains + 1);
    Ok(core + factors + last)
}

/// Stacks `S` per-domain weight tensors and one agnostic tensor along a new
/// trailing mode (agnostic slice last), selects ranks under `epsilon` and
/// returns the HO-SVD at those ranks.
pub fn init_from_stack(
    per_domain: &[Tensor],
    agnostic: &Tensor,
    epsilon: f64,
) -> Result<(TuckerFactors, RankSelection)> {
    if per_domain.is_empty() {
        return Err(shape_err("need at least one per-domain tensor"));
    }
    let mut slices: Vec<&Tensor> = per_domain.iter().collect();
    slices.push(agnostic);
    let stacked = Tensor::stack_last(&slices)?;
    select_with_factors(&stacked, epsilon)
}
