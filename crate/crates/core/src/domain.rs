//! Domain descriptors and weight generators.
//!
//! A generator holds a parameter tensor whose trailing mode has one slice per
//! source domain plus a final shared slice. Contracting that mode with a
//! descriptor `z` yields the concrete layer weights for the described domain.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Matrix, Tensor};
use crate::tucker::{init_from_stack, RankSelection, TuckerFactors};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DescriptorKind {
    /// `z[domain] = rho`, `z[S] = 1`.
    TwoHot { domain: usize, rho: f64 },
    /// `z = [0, …, 0, 1]`.
    AgnosticOnly,
    /// Any other vector, e.g. a linear combination of descriptors.
    Custom,
}

/// Encoding `z` of length `S + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDescriptor {
    values: Vec<f64>,
    kind: DescriptorKind,
}

impl DomainDescriptor {
    pub fn from_values(values: Vec<f64>) -> Self {
        Self {
            values,
            kind: DescriptorKind::Custom,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> DescriptorKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Two-hot descriptor for source domain `index` (zero-based) of `domains`.
pub fn encode_domain(index: usize, domains: usize, rho: f64) -> Result<DomainDescriptor> {
    if index >= domains {
        return Err(Error::InvalidDomain {
            index,
            count: domains,
        });
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!("rho must be positive, got {rho}")));
    }
    let mut values = vec![0.0; domains + 1];
    values[index] = rho;
    values[domains] = 1.0;
    Ok(DomainDescriptor {
        values,
        kind: DescriptorKind::TwoHot { domain: index, rho },
    })
}

/// Bias-only descriptor selecting the shared slice.
pub fn agnostic_descriptor(domains: usize) -> DomainDescriptor {
    let mut values = vec![0.0; domains + 1];
    values[domains] = 1.0;
    DomainDescriptor {
        values,
        kind: DescriptorKind::AgnosticOnly,
    }
}

/// `Θ z` for a column-stacked linear model `Θ = [Δ_1, …, Δ_S, Θ_0]`.
pub fn undo_bias_linear(stacked: &Matrix, z: &DomainDescriptor) -> Result<Vec<f64>> {
    stacked.matvec(z.values())
}

/// Geometry of a weight-bearing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerShape {
    /// Weight `inputs × outputs`.
    Fc { inputs: usize, outputs: usize },
    /// Weight `height × width × depth × filters`.
    Conv {
        height: usize,
        width: usize,
        depth: usize,
        filters: usize,
    },
}

impl LayerShape {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerShape::Fc { inputs, outputs } => vec![inputs, outputs],
            LayerShape::Conv {
                height,
                width,
                depth,
                filters,
            } => vec![height, width, depth, filters],
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            LayerShape::Fc { outputs, .. } => outputs,
            LayerShape::Conv { filters, .. } => filters,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerShape::Fc { inputs, .. } => inputs,
            LayerShape::Conv {
                height,
                width,
                depth,
                ..
            } => height * width * depth,
        }
    }
}

/// How the layer parameters are stored.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightForm {
    /// One weight set used for every domain; the descriptor is ignored.
    Shared(Tensor),
    /// Full tensor with a trailing mode of extent `S + 1`.
    Full(Tensor),
    /// Tucker factors of the full tensor.
    Factored(TuckerFactors),
}

impl WeightForm {
    pub fn name(&self) -> &'static str {
        match self {
            WeightForm::Shared(_) => "shared",
            WeightForm::Full(_) => "full",
            WeightForm::Factored(_) => "factored",
        }
    }
}

/// Concrete layer weights for one descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteWeights {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// Parameters of one layer plus its bias table.
///
/// The bias table has `S + 1` rows (one for `Shared`) and is contracted with
/// `z` exactly like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGenerator {
    shape: LayerShape,
    domains: usize,
    form: WeightForm,
    bias_table: Matrix,
}

impl WeightGenerator {
    pub fn new(shape: LayerShape, domains: usize, form: WeightForm, bias_table: Matrix) -> Result<Self> {
        let ws = shape.weight_shape();
        let mut full = ws.clone();
        full.push(domains + 1);
        let (found, bias_rows) = match &form {
            WeightForm::Shared(t) => (t.shape().to_vec(), 1),
            WeightForm::Full(t) => (t.shape().to_vec(), domains + 1),
            WeightForm::Factored(f) => (f.full_shape(), domains + 1),
        };
        let expected = if matches!(form, WeightForm::Shared(_)) { ws } else { full };
        if found != expected {
            return Err(shape_err(format!(
                "{} parameters of shape {found:?}, layer needs {expected:?}",
                form.name()
            )));
        }
        if bias_table.rows() != bias_rows || bias_table.cols() != shape.outputs() {
            return Err(shape_err(format!(
                "bias table {}x{}, expected {bias_rows}x{}",
                bias_table.rows(),
                bias_table.cols(),
                shape.outputs()
            )));
        }
        Ok(Self {
            shape,
            domains,
            form,
            bias_table,
        })
    }

    /// Fan-in scaled uniform initialization, zero biases.
    ///
    /// Every slice draws from `±√(6/fan_in)`; domain-specific slices are
    /// further scaled by `domain_scale` so the shared slice dominates early.
    pub fn init_full<R: Rng>(shape: LayerShape, domains: usize, domain_scale: f64, rng: &mut R) -> Self {
        let ws = shape.weight_shape();
        let bound = (6.0 / shape.fan_in() as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let slices: Vec<Tensor> = (0..=domains)
            .map(|d| {
                let scale = if d < domains { domain_scale } else { 1.0 };
                Tensor::from_fn(&ws, |_| scale * dist.sample(rng)).expect("valid layer shape")
            })
            .collect();
        let refs: Vec<&Tensor> = slices.iter().collect();
        let full = Tensor::stack_last(&refs).expect("equal slice shapes");
        Self {
            shape,
            domains,
            form: WeightForm::Full(full),
            bias_table: Matrix::zeros(domains + 1, shape.outputs()),
        }
    }

    pub fn init_shared<R: Rng>(shape: LayerShape, domains: usize, rng: &mut R) -> Self {
        let bound = (6.0 / shape.fan_in() as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = Tensor::from_fn(&shape.weight_shape(), |_| dist.sample(rng)).expect("valid layer shape");
        Self {
            shape,
            domains,
            form: WeightForm::Shared(w),
            bias_table: Matrix::zeros(1, shape.outputs()),
        }
    }

    /// A full-form generator whose every slice is `w` (biases likewise).
    pub fn full_from_concrete(shape: LayerShape, domains: usize, w: &ConcreteWeights) -> Result<Self> {
        Self::full_from_stack(shape, &vec![w.clone(); domains], w)
    }

    /// Full form whose domain slices are `per_domain` and shared slice `agnostic`.
    pub fn full_from_stack(shape: LayerShape, per_domain: &[ConcreteWeights], agnostic: &ConcreteWeights) -> Result<Self> {
        let mut slices: Vec<&Tensor> = per_domain.iter().map(|w| &w.weight).collect();
        slices.push(&agnostic.weight);
        let full = Tensor::stack_last(&slices)?;
        let bias = stack_bias(per_domain, agnostic)?;
        Self::new(shape, per_domain.len(), WeightForm::Full(full), bias)
    }

    /// Tucker-factorized form initialized from per-domain and agnostic
    /// weights under reconstruction budget `epsilon`.
    pub fn factored_from_stack(
        shape: LayerShape,
        per_domain: &[ConcreteWeights],
        agnostic: &ConcreteWeights,
        epsilon: f64,
    ) -> Result<(Self, RankSelection)> {
        let weights: Vec<Tensor> = per_domain.iter().map(|w| w.weight.clone()).collect();
        let (factors, sel) = init_from_stack(&weights, &agnostic.weight, epsilon)?;
        let bias = stack_bias(per_domain, agnostic)?;
        let gen = Self::new(shape, per_domain.len(), WeightForm::Factored(factors), bias)?;
        Ok((gen, sel))
    }

    /// Same generator with the full tensor replaced by the given factors.
    pub fn with_factors(&self, factors: TuckerFactors) -> Result<Self> {
        Self::new(self.shape, self.domains, WeightForm::Factored(factors), self.bias_table.clone())
    }

    pub fn shape(&self) -> LayerShape {
        self.shape
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn form(&self) -> &WeightForm {
        &self.form
    }

    pub fn bias_table(&self) -> &Matrix {
        &self.bias_table
    }

    /// The full parameter tensor (reconstructed when factored).
    pub fn full_tensor(&self) -> Result<Tensor> {
        match &self.form {
            WeightForm::Shared(w) => {
                let slices = vec![w; self.domains + 1];
                Tensor::stack_last(&slices)
            }
            WeightForm::Full(t) => Ok(t.clone()),
            WeightForm::Factored(f) => f.reconstruct(),
        }
    }

    fn check_descriptor(&self, z: &DomainDescriptor) -> Result<()> {
        if !matches!(self.form, WeightForm::Shared(_)) && z.len() != self.domains + 1 {
            return Err(shape_err(format!(
                "descriptor of length {} for a generator with {} domains",
                z.len(),
                self.domains
            )));
        }
        Ok(())
    }

    fn bias_for(&self, z: &DomainDescriptor) -> Vec<f64> {
        match self.form {
            WeightForm::Shared(_) => self.bias_table.row(0).to_vec(),
            _ => self
                .bias_table
                .transpose()
                .matvec(z.values())
                .expect("checked descriptor length"),
        }
    }

    /// Concrete weights for descriptor `z`.
    ///
    /// Factored generators contract `z` into the domain factor first and only
    /// then expand the remaining modes.
    pub fn generate(&self, z: &DomainDescriptor) -> Result<ConcreteWeights> {
        self.check_descriptor(z)?;
        let weight = match &self.form {
            WeightForm::Shared(w) => w.clone(),
            WeightForm::Full(t) => t.mode_vec_product(z.values(), t.order() - 1)?,
            WeightForm::Factored(f) => factor_first(f, z.values())?.0,
        };
        Ok(ConcreteWeights {
            weight,
            bias: self.bias_for(z),
        })
    }

    /// Reference path: reconstruct the full tensor, then contract with `z`.
    pub fn generate_reconstruct_first(&self, z: &DomainDescriptor) -> Result<ConcreteWeights> {
        self.check_descriptor(z)?;
        let weight = match &self.form {
            WeightForm::Shared(w) => w.clone(),
            _ => {
                let t = self.full_tensor()?;
                t.mode_vec_product(z.values(), t.order() - 1)?
            }
        };
        Ok(ConcreteWeights {
            weight,
            bias: self.bias_for(z),
        })
    }

    /// Learnable parameter blocks in a fixed order: form tensors, then bias table.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = match &self.form {
            WeightForm::Shared(t) | WeightForm::Full(t) => vec![t.data()],
            WeightForm::Factored(f) => {
                let mut v = vec![f.core().data()];
                v.extend(f.factors().iter().map(Matrix::data));
                v
            }
        };
        out.push(self.bias_table.data());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = match &mut self.form {
            WeightForm::Shared(t) | WeightForm::Full(t) => vec![t.data_mut()],
            WeightForm::Factored(f) => f.params_mut(),
        };
        out.push(self.bias_table.data_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Zeroed gradient buffers matching [`WeightGenerator::params`].
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Adds to `grads` the gradient of the loss with respect to this
    /// generator's parameters, given the gradient with respect to the weights
    /// and bias generated from `z`.
    pub fn accumulate_grads(
        &self,
        z: &DomainDescriptor,
        d_weight: &Tensor,
        d_bias: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Result<()> {
        self.check_descriptor(z)?;
        if d_weight.shape() != self.shape.weight_shape().as_slice() || d_bias.len() != self.shape.outputs() {
            return Err(shape_err("weight gradient does not match layer shape"));
        }
        let zv = z.values();
        let n_form = grads.len() - 1;
        match &self.form {
            WeightForm::Shared(_) => {
                add_into(&mut grads[0], d_weight.data(), 1.0);
                add_into(&mut grads[1], d_bias, 1.0);
                return Ok(());
            }
            WeightForm::Full(_) => {
                let n = zv.len();
                let g = &mut grads[0];
                for (i, &dw) in d_weight.data().iter().enumerate() {
                    for (k, &zk) in zv.iter().enumerate() {
                        g[i * n + k] += zk * dw;
                    }
                }
            }
            WeightForm::Factored(f) => factored_grads(f, zv, d_weight, &mut grads[..n_form])?,
        }
        let bias = &mut grads[n_form];
        let outs = d_bias.len();
        for (s, &zs) in zv.iter().enumerate() {
            if zs == 0.0 {
                continue;
            }
            for (o, &db) in d_bias.iter().enumerate() {
                bias[s * outs + o] += zs * db;
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn stack_bias(per_domain: &[ConcreteWeights], agnostic: &ConcreteWeights) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = per_domain
        .iter()
        .chain(std::iter::once(agnostic))
        .map(|w| w.bias.clone())
        .collect();
    Matrix::from_rows(&rows)
}

/// `W = (G ×_M (U_Mᵀ z)) ×_1 U_1 … ×_{M−1} U_{M−1}`; also returns the
/// contracted core.
fn factor_first(f: &TuckerFactors, z: &[f64]) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let last = f.factors().len() - 1;
    let mixing = f.factors()[last].transpose().matvec(z)?;
    let reduced = f.core().mode_vec_product(&mixing, last)?;
    let mut w = reduced.clone();
    for (m, u) in f.factors()[..last].iter().enumerate() {
        w = w.mode_product(u, m)?;
    }
    Ok((w, reduced, mixing))
}

fn factored_grads(f: &TuckerFactors, z: &[f64], d_weight: &Tensor, grads: &mut [Vec<f64>]) -> Result<()> {
    let last = f.factors().len() - 1;
    let (_, reduced, mixing) = factor_first(f, z)?;
    let body = &f.factors()[..last];

    // Gradient with respect to the contracted core.
    let mut d_reduced = d_weight.clone();
    for (m, u) in body.iter().enumerate() {
        d_reduced = d_reduced.mode_product(&u.transpose(), m)?;
    }

    // Body factors: W_(m) = U_m · Y_(m) with Y = reduced ×_{k≠m} U_k.
    for m in 0..last {
        let mut y = reduced.clone();
        for (k, u) in body.iter().enumerate() {
            if k != m {
                y = y.mode_product(u, k)?;
            }
        }
        let g = d_weight.unfold(m)?.matmul(&y.unfold(m)?.transpose())?;
        add_into(&mut grads[1 + m], g.data(), 1.0);
    }

    // Core: reduced = G ×_M mixing.
    let k_last = mixing.len();
    let core_grad = &mut grads[0];
    for (i, &dr) in d_reduced.data().iter().enumerate() {
        for (k, &c) in mixing.iter().enumerate() {
            core_grad[i * k_last + k] += dr * c;
        }
    }
    let mut d_mixing = vec![0.0; k_last];
    for (i, &dr) in d_reduced.data().iter().enumerate() {
        for (k, dm) in d_mixing.iter_mut().enumerate() {
            *dm += f.core().data()[i * k_last + k] * dr;
        }
    }

    // Domain factor: mixing = U_Mᵀ z.
    let g_last = &mut grads[1 + last];
    for (s, &zs) in z.iter().enumerate() {
        if zs == 0.0 {
            continue;
        }
        for (k, &dm) in d_mixing.iter().enumerate() {
            g_last[s * k_last + k] += zs * dm;
        }
    }
    Ok(())
}
