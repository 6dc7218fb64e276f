//! Trainable networks whose weight-bearing layers are generated from domain
//! descriptors, and their concrete (plain-weight) counterparts.
//!
//! Layout conventions: FC weights are `inputs × outputs` and compute
//! `y = Wᵀx + b`. Convolutions take `height × width × depth` inputs
//! (channels last), use stride 1 and valid padding, and produce
//! `(H − kh + 1) × (W − kw + 1) × filters`.

mod checkpoint;
mod concrete;
mod train;

pub use checkpoint::{
    load_any, load_checkpoint, load_concrete, save_checkpoint, save_concrete, Checkpoint, CHECKPOINT_VERSION,
};
pub use concrete::{ConcreteLayer, ConcreteNetwork};
pub use train::{evaluate, evaluate_domain, train, EvalPoint, LossPoint, Sgd, TrainConfig, TrainReport};

use rand::Rng;

use crate::domain::{agnostic_descriptor, encode_domain, DomainDescriptor, LayerShape, WeightGenerator};
use crate::error::{shape_err, Error, Result};

/// How freshly initialized weight layers are parameterized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Parameterization {
    /// One weight set for all domains.
    Shared,
    /// Full tensor with per-domain slices scaled by `domain_scale`.
    Full { domain_scale: f64 },
}

/// Spatial extent of a convolution's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvInput {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedLayer {
    pub generator: WeightGenerator,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Fc(GeneratedLayer),
    Conv(GeneratedLayer, ConvInput),
    Relu,
}

impl Layer {
    pub fn generated(&self) -> Option<&GeneratedLayer> {
        match self {
            Layer::Fc(g) | Layer::Conv(g, _) => Some(g),
            Layer::Relu => None,
        }
    }

    pub fn generated_mut(&mut self) -> Option<&mut GeneratedLayer> {
        match self {
            Layer::Fc(g) | Layer::Conv(g, _) => Some(g),
            Layer::Relu => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Fc(_) => "fc",
            Layer::Conv(..) => "conv",
            Layer::Relu => "relu",
        }
    }
}

/// Output shape of `layer` given its input shape, validating the chain.
pub(crate) fn layer_output_shape(layer_shape: Option<(LayerShape, Option<ConvInput>)>, input: &[usize]) -> Result<Vec<usize>> {
    match layer_shape {
        None => Ok(input.to_vec()),
        Some((LayerShape::Fc { inputs, outputs }, _)) => {
            let n: usize = input.iter().product();
            if n != inputs {
                return Err(shape_err(format!("fc layer expects {inputs} inputs, previous layer gives {n}")));
            }
            Ok(vec![outputs])
        }
        Some((
            LayerShape::Conv {
                height,
                width,
                depth,
                filters,
            },
            geom,
        )) => {
            let geom = geom.ok_or_else(|| shape_err("conv layer without input geometry"))?;
            if input != [geom.height, geom.width, depth] {
                return Err(shape_err(format!(
                    "conv layer expects input {:?}, previous layer gives {input:?}",
                    [geom.height, geom.width, depth]
                )));
            }
            if height > geom.height || width > geom.width {
                return Err(shape_err("conv kernel larger than its input"));
            }
            Ok(vec![geom.height - height + 1, geom.width - width + 1, filters])
        }
    }
}

/// A network whose weights are generated per domain descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    domains: usize,
    classes: usize,
}

/// One training instance.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub label: usize,
    pub domain: usize,
}

/// Per weight-bearing layer, per parameter block.
pub type Gradients = Vec<Vec<Vec<f64>>>;

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, domains: usize, classes: usize) -> Result<Self> {
        if domains == 0 {
            return Err(Error::Config("a network needs at least one source domain".into()));
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            if let Some(g) = layer.generated() {
                if g.generator.domains() != domains {
                    return Err(shape_err("generator domain count differs from the network's"));
                }
            }
            let ls = match layer {
                Layer::Fc(g) => Some((g.generator.shape(), None)),
                Layer::Conv(g, geom) => Some((g.generator.shape(), Some(*geom))),
                Layer::Relu => None,
            };
            shape = layer_output_shape(ls, &shape)?;
        }
        if shape != [classes] {
            return Err(shape_err(format!("network outputs {shape:?}, expected [{classes}]")));
        }
        Ok(Self {
            layers,
            input_shape,
            domains,
            classes,
        })
    }

    /// Fully connected ReLU network `input → hidden… → classes`.
    pub fn mlp<R: Rng>(
        input: usize,
        hidden: &[usize],
        classes: usize,
        domains: usize,
        param: Parameterization,
        rng: &mut R,
    ) -> Result<Self> {
        let mut b = NetworkBuilder::new(vec![input], domains, param);
        for &h in hidden {
            b = b.fc(h, rng)?.relu();
        }
        b.fc(classes, rng)?.build(classes)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn generators(&self) -> impl Iterator<Item = &GeneratedLayer> {
        self.layers.iter().filter_map(Layer::generated)
    }

    pub fn generators_mut(&mut self) -> impl Iterator<Item = &mut GeneratedLayer> {
        self.layers.iter_mut().filter_map(Layer::generated_mut)
    }

    pub fn parameter_count(&self) -> usize {
        self.generators().map(|g| g.generator.parameter_count()).sum()
    }

    pub fn agnostic(&self) -> DomainDescriptor {
        agnostic_descriptor(self.domains)
    }

    pub fn descriptor(&self, domain: usize, rho: f64) -> Result<DomainDescriptor> {
        encode_domain(domain, self.domains, rho)
    }

    /// Concrete network for descriptor `z`.
    pub fn concrete(&self, z: &DomainDescriptor) -> Result<ConcreteNetwork> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    Layer::Fc(g) => {
                        let w = g.generator.generate(z)?;
                        ConcreteLayer::Fc {
                            weight: w.weight,
                            bias: w.bias,
                        }
                    }
                    Layer::Conv(g, geom) => {
                        let w = g.generator.generate(z)?;
                        ConcreteLayer::Conv {
                            weight: w.weight,
                            bias: w.bias,
                            input: *geom,
                        }
                    }
                    Layer::Relu => ConcreteLayer::Relu,
                })
            })
            .collect::<Result<_>>()?;
        ConcreteNetwork::new(layers, self.input_shape.clone(), self.classes)
    }

    /// The domain-agnostic network obtained with the bias-only descriptor.
    pub fn extract_agnostic(&self) -> Result<ConcreteNetwork> {
        self.concrete(&self.agnostic())
    }

    pub fn forward(&self, x: &[f64], z: &DomainDescriptor) -> Result<Vec<f64>> {
        self.concrete(z)?.forward(x)
    }

    /// Multi-domain softmax cross-entropy and its exact gradient.
    ///
    /// The loss is the mean over the domains present in `batch` of each
    /// domain's mean per-instance loss; domain `i` is run with the two-hot
    /// descriptor of ratio `rho`.
    pub fn loss_and_grads(&self, batch: &[Sample<'_>], rho: f64) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut per_domain: Vec<Vec<&Sample<'_>>> = vec![Vec::new(); self.domains];
        for s in batch {
            if s.domain >= self.domains {
                return Err(Error::InvalidDomain {
                    index: s.domain,
                    count: self.domains,
                });
            }
            if s.label >= self.classes {
                return Err(Error::LabelSpace(format!("label {} outside 0..{}", s.label, self.classes)));
            }
            per_domain[s.domain].push(s);
        }
        let present = per_domain.iter().filter(|v| !v.is_empty()).count() as f64;

        let mut grads: Gradients = self.generators().map(|g| g.generator.zero_grads()).collect();
        let first_trainable = self
            .layers
            .iter()
            .position(|l| l.generated().is_some_and(|g| g.trainable));
        let mut total = 0.0;
        for (d, samples) in per_domain.iter().enumerate() {
            if samples.is_empty() {
                continue;
            }
            let z = self.descriptor(d, rho)?;
            let net = self.concrete(&z)?;
            let weight = 1.0 / (present * samples.len() as f64);
            let mut acc = net.zero_layer_grads();
            for s in samples {
                total += weight * net.accumulate(s.x, s.label, weight, first_trainable, &mut acc)?;
            }
            let mut gi = 0;
            for (layer, lg) in self.layers.iter().zip(&acc) {
                if let Some(g) = layer.generated() {
                    if let Some((dw, db)) = lg {
                        if g.trainable {
                            g.generator.accumulate_grads(&z, dw, db, &mut grads[gi])?;
                        }
                    }
                    gi += 1;
                }
            }
        }
        Ok((total, grads))
    }
}

/// Incremental construction with shape tracking.
pub struct NetworkBuilder {
    shape: Vec<usize>,
    input_shape: Vec<usize>,
    domains: usize,
    param: Parameterization,
    layers: Vec<Layer>,
}

impl NetworkBuilder {
    pub fn new(input_shape: Vec<usize>, domains: usize, param: Parameterization) -> Self {
        Self {
            shape: input_shape.clone(),
            input_shape,
            domains,
            param,
            layers: Vec::new(),
        }
    }

    fn make<R: Rng>(&self, shape: LayerShape, rng: &mut R) -> GeneratedLayer {
        let generator = match self.param {
            Parameterization::Shared => WeightGenerator::init_shared(shape, self.domains, rng),
            Parameterization::Full { domain_scale } => {
                WeightGenerator::init_full(shape, self.domains, domain_scale, rng)
            }
        };
        GeneratedLayer {
            generator,
            trainable: true,
        }
    }

    pub fn fc<R: Rng>(mut self, outputs: usize, rng: &mut R) -> Result<Self> {
        let shape = LayerShape::Fc {
            inputs: self.shape.iter().product(),
            outputs,
        };
        self.shape = layer_output_shape(Some((shape, None)), &self.shape)?;
        let g = self.make(shape, rng);
        self.layers.push(Layer::Fc(g));
        Ok(self)
    }

    pub fn conv<R: Rng>(mut self, kernel_h: usize, kernel_w: usize, filters: usize, rng: &mut R) -> Result<Self> {
        let [height, width, depth] = <[usize; 3]>::try_from(self.shape.as_slice())
            .map_err(|_| shape_err(format!("conv needs a 3-d input, got {:?}", self.shape)))?;
        let shape = LayerShape::Conv {
            height: kernel_h,
            width: kernel_w,
            depth,
            filters,
        };
        let geom = ConvInput { height, width };
        self.shape = layer_output_shape(Some((shape, Some(geom))), &self.shape)?;
        let g = self.make(shape, rng);
        self.layers.push(Layer::Conv(g, geom));
        Ok(self)
    }

    /// Parameterization used by layers added from now on.
    pub fn parameterization(mut self, param: Parameterization) -> Self {
        self.param = param;
        self
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn build(self, classes: usize) -> Result<Network> {
        Network::new(self.layers, self.input_shape, self.domains, classes)
    }
}

#[cfg(test)]
mod tests;
