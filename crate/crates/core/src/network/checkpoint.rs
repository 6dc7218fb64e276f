//! Checkpoint directories: `manifest.json` plus one DGT1 file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConcreteLayer, ConcreteNetwork, ConvInput, GeneratedLayer, Layer, Network};
use crate::domain::{LayerShape, WeightForm, WeightGenerator};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, Matrix, Tensor};
use crate::tucker::TuckerFactors;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    Generated,
    Concrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LayerKind {
    Fc,
    Conv,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FormName {
    Shared,
    Full,
    Factored,
    Concrete,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    kind: LayerKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    shape: Option<LayerShape>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    conv_input: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    form: Option<FormName>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    ranks: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    trainable: Option<bool>,
    #[serde(default)]
    tensors: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    model: ModelKind,
    input_shape: Vec<usize>,
    domains: usize,
    classes: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    rho: Option<f64>,
    layers: Vec<LayerEntry>,
}

fn write_all(dir: &Path, prefix: &str, tensors: &[(&str, Tensor)]) -> Result<Vec<String>> {
    tensors
        .iter()
        .map(|(name, t)| {
            let file = format!("{prefix}_{name}.dgt");
            write_tensor_file(dir.join(&file), t)?;
            Ok(file)
        })
        .collect()
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty vector")
}

fn write_manifest(dir: &Path, m: &CheckpointManifest) -> Result<()> {
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint format_version {}", m.format_version)));
    }
    Ok(m)
}

fn geometry(g: Option<[usize; 2]>) -> Result<ConvInput> {
    let [height, width] = g.ok_or_else(|| Error::Format("conv layer without conv_input".into()))?;
    Ok(ConvInput { height, width })
}

/// Writes a generated network; `rho` is recorded as training metadata.
pub fn save_checkpoint(net: &Network, rho: Option<f64>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let (g, conv_input) = match layer {
            Layer::Relu => {
                layers.push(LayerEntry {
                    kind: LayerKind::Relu,
                    shape: None,
                    conv_input: None,
                    form: None,
                    ranks: None,
                    trainable: None,
                    tensors: Vec::new(),
                });
                continue;
            }
            Layer::Fc(g) => (g, None),
            Layer::Conv(g, geom) => (g, Some([geom.height, geom.width])),
        };
        let gen = &g.generator;
        let bias: Tensor = gen.bias_table().clone().into();
        let (form, ranks, tensors) = match gen.form() {
            WeightForm::Shared(w) => (FormName::Shared, None, vec![("weight", w.clone()), ("bias", bias)]),
            WeightForm::Full(w) => (FormName::Full, None, vec![("weight", w.clone()), ("bias", bias)]),
            WeightForm::Factored(f) => {
                let mut ts = vec![("core".to_string(), f.core().clone())];
                for (m, u) in f.factors().iter().enumerate() {
                    ts.push((format!("factor{m}"), u.clone().into()));
                }
                ts.push(("bias".to_string(), bias));
                let named: Vec<(&str, Tensor)> = ts.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
                let files = write_all(dir, &format!("layer{i:02}"), &named)?;
                layers.push(LayerEntry {
                    kind: if conv_input.is_some() { LayerKind::Conv } else { LayerKind::Fc },
                    shape: Some(gen.shape()),
                    conv_input,
                    form: Some(FormName::Factored),
                    ranks: Some(f.ranks()),
                    trainable: Some(g.trainable),
                    tensors: files,
                });
                continue;
            }
        };
        let files = write_all(dir, &format!("layer{i:02}"), &tensors)?;
        layers.push(LayerEntry {
            kind: if conv_input.is_some() { LayerKind::Conv } else { LayerKind::Fc },
            shape: Some(gen.shape()),
            conv_input,
            form: Some(form),
            ranks,
            trainable: Some(g.trainable),
            tensors: files,
        });
    }
    write_manifest(
        dir,
        &CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            model: ModelKind::Generated,
            input_shape: net.input_shape().to_vec(),
            domains: net.domains(),
            classes: net.classes(),
            rho,
            layers,
        },
    )
}

/// Reads a generated network and its recorded `rho`.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Network, Option<f64>)> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    if m.model != ModelKind::Generated {
        return Err(Error::Format("checkpoint holds a concrete network".into()));
    }
    let mut layers = Vec::new();
    for entry in &m.layers {
        if entry.kind == LayerKind::Relu {
            layers.push(Layer::Relu);
            continue;
        }
        let shape = entry.shape.ok_or_else(|| Error::Format("weight layer without shape".into()))?;
        let tensors: Vec<Tensor> = entry
            .tensors
            .iter()
            .map(|f| read_tensor_file(dir.join(f)))
            .collect::<Result<_>>()?;
        let Some((bias, rest)) = tensors.split_last() else {
            return Err(Error::Format("weight layer without tensors".into()));
        };
        let bias = Matrix::try_from(bias.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let form = match entry.form {
            Some(FormName::Shared) | Some(FormName::Full) if rest.len() == 1 => {
                if entry.form == Some(FormName::Shared) {
                    WeightForm::Shared(rest[0].clone())
                } else {
                    WeightForm::Full(rest[0].clone())
                }
            }
            Some(FormName::Factored) if rest.len() >= 2 => {
                let factors = rest[1..]
                    .iter()
                    .map(|t| Matrix::try_from(t.clone()))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::Format(e.to_string()))?;
                let f = TuckerFactors::new(rest[0].clone(), factors).map_err(|e| Error::Format(e.to_string()))?;
                if entry.ranks.as_ref().is_some_and(|r| *r != f.ranks()) {
                    return Err(Error::Format("recorded ranks disagree with the stored core".into()));
                }
                WeightForm::Factored(f)
            }
            _ => return Err(Error::Format("unsupported layer form or tensor count".into())),
        };
        let generator =
            WeightGenerator::new(shape, m.domains, form, bias).map_err(|e| Error::Format(e.to_string()))?;
        let g = GeneratedLayer {
            generator,
            trainable: entry.trainable.unwrap_or(true),
        };
        layers.push(match entry.kind {
            LayerKind::Fc => Layer::Fc(g),
            LayerKind::Conv => Layer::Conv(g, geometry(entry.conv_input)?),
            LayerKind::Relu => unreachable!(),
        });
    }
    let net = Network::new(layers, m.input_shape, m.domains, m.classes).map_err(|e| Error::Format(e.to_string()))?;
    Ok((net, m.rho))
}

pub fn save_concrete(net: &ConcreteNetwork, domains: usize, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let (kind, weight, bias, conv_input) = match layer {
            ConcreteLayer::Fc { weight, bias } => (LayerKind::Fc, weight, bias, None),
            ConcreteLayer::Conv { weight, bias, input } => {
                (LayerKind::Conv, weight, bias, Some([input.height, input.width]))
            }
            ConcreteLayer::Relu => {
                layers.push(LayerEntry {
                    kind: LayerKind::Relu,
                    shape: None,
                    conv_input: None,
                    form: None,
                    ranks: None,
                    trainable: None,
                    tensors: Vec::new(),
                });
                continue;
            }
        };
        let files = write_all(dir, &format!("layer{i:02}"), &[("weight", weight.clone()), ("bias", vector(bias))])?;
        layers.push(LayerEntry {
            kind,
            shape: None,
            conv_input,
            form: Some(FormName::Concrete),
            ranks: None,
            trainable: None,
            tensors: files,
        });
    }
    write_manifest(
        dir,
        &CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            model: ModelKind::Concrete,
            input_shape: net.input_shape().to_vec(),
            domains,
            classes: net.classes(),
            rho: None,
            layers,
        },
    )
}

pub fn load_concrete(dir: impl AsRef<Path>) -> Result<ConcreteNetwork> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    if m.model != ModelKind::Concrete {
        return Err(Error::Format("checkpoint holds a generated network".into()));
    }
    let mut layers = Vec::new();
    for entry in &m.layers {
        if entry.kind == LayerKind::Relu {
            layers.push(ConcreteLayer::Relu);
            continue;
        }
        let [w, b] = <[String; 2]>::try_from(entry.tensors.clone())
            .map_err(|_| Error::Format("concrete layer needs weight and bias".into()))?;
        let weight = read_tensor_file(dir.join(w))?;
        let bias = read_tensor_file(dir.join(b))?.into_data();
        layers.push(match entry.kind {
            LayerKind::Fc => ConcreteLayer::Fc { weight, bias },
            LayerKind::Conv => ConcreteLayer::Conv {
                weight,
                bias,
                input: geometry(entry.conv_input)?,
            },
            LayerKind::Relu => unreachable!(),
        });
    }
    ConcreteNetwork::new(layers, m.input_shape, m.classes).map_err(|e| Error::Format(e.to_string()))
}

/// Either kind of checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Generated { network: Network, rho: Option<f64> },
    Concrete(ConcreteNetwork),
}

impl Checkpoint {
    /// The domain-agnostic concrete network.
    pub fn agnostic(&self) -> Result<ConcreteNetwork> {
        match self {
            Checkpoint::Generated { network, .. } => network.extract_agnostic(),
            Checkpoint::Concrete(c) => Ok(c.clone()),
        }
    }
}

pub fn load_any(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    match read_manifest(dir)?.model {
        ModelKind::Generated => {
            let (network, rho) = load_checkpoint(dir)?;
            Ok(Checkpoint::Generated { network, rho })
        }
        ModelKind::Concrete => Ok(Checkpoint::Concrete(load_concrete(dir)?)),
    }
}
