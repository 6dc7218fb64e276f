//! Multi-domain datasets: in-memory representation, on-disk format, seeded
//! train/validation splits and the synthetic benchmark generator.
//!
//! On disk a dataset is a directory holding `manifest.json` plus, per domain,
//! one DGT1 tensor stacking the instances along a leading mode and one label
//! file. A label file uses the DGT1 header (order 1, extent `N`) followed by
//! `N` little-endian u32 labels instead of f64 values.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor, DGT1_MAGIC};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// Stable identifier: originating domain index in the high 32 bits,
    /// position within that domain in the low 32 bits.
    pub id: u64,
    pub x: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub instances: Vec<Instance>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Source domains over a shared label space and input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainDataset {
    domains: Vec<Domain>,
    class_count: usize,
    input_shape: Vec<usize>,
}

impl MultiDomainDataset {
    pub fn new(domains: Vec<Domain>, class_count: usize, input_shape: Vec<usize>) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::LabelSpace("class count must be positive".into()));
        }
        let mut names = BTreeSet::new();
        for d in &domains {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Format(format!("duplicate domain name {:?}", d.name)));
            }
            for inst in &d.instances {
                if inst.label >= class_count {
                    return Err(Error::LabelSpace(format!(
                        "label {} in domain {:?} outside 0..{class_count}",
                        inst.label, d.name
                    )));
                }
                if inst.x.shape() != input_shape.as_slice() {
                    return Err(shape_err(format!(
                        "instance of shape {:?} in domain {:?}, expected {input_shape:?}",
                        inst.x.shape(),
                        d.name
                    )));
                }
            }
        }
        Ok(Self {
            domains,
            class_count,
            input_shape,
        })
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn domain(&self, name: &str) -> Option<&Domain> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// The domains named in `names`, in that order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let domains = names
            .iter()
            .map(|n| {
                self.domain(n)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown domain {n:?}")))
            })
            .collect::<Result<_>>()?;
        Self::new(domains, self.class_count, self.input_shape.clone())
    }

    /// Every domain except `held_out`.
    pub fn without(&self, held_out: &str) -> Result<Self> {
        if self.domain(held_out).is_none() {
            return Err(Error::Config(format!("unknown domain {held_out:?}")));
        }
        let names: Vec<String> = self
            .domain_names()
            .into_iter()
            .filter(|n| n != held_out)
            .collect();
        self.select(&names)
    }

    /// All instances pooled into one domain named `name`.
    pub fn pooled(&self, name: &str) -> Self {
        let instances = self.domains.iter().flat_map(|d| d.instances.iter().cloned()).collect();
        Self {
            domains: vec![Domain {
                name: name.to_string(),
                instances,
            }],
            class_count: self.class_count,
            input_shape: self.input_shape.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    class_count: usize,
    input_shape: Vec<usize>,
    domains: Vec<ManifestDomain>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDomain {
    name: String,
    count: usize,
    instances: String,
    labels: String,
}

fn safe_file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn save_dataset(dataset: &MultiDomainDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, d) in dataset.domains.iter().enumerate() {
        let stem = format!("{i:02}_{}", safe_file_stem(&d.name));
        let inst_file = format!("{stem}.dgt");
        let label_file = format!("{stem}.labels.dgt");
        let mut shape = vec![d.len()];
        shape.extend(&dataset.input_shape);
        let data: Vec<f64> = d.instances.iter().flat_map(|inst| inst.x.data().iter().copied()).collect();
        if d.is_empty() {
            return Err(Error::EmptyDomain(d.name.clone()));
        }
        write_tensor_file(dir.join(&inst_file), &Tensor::new(shape, data)?)?;
        let labels: Vec<u32> = d.instances.iter().map(|inst| inst.label as u32).collect();
        write_labels(dir.join(&label_file), &labels)?;
        entries.push(ManifestDomain {
            name: d.name.clone(),
            count: d.len(),
            instances: inst_file,
            labels: label_file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        class_count: dataset.class_count,
        input_shape: dataset.input_shape.clone(),
        domains: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<MultiDomainDataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join("manifest.json").display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format_version {}",
            manifest.format_version
        )));
    }
    let input_len: usize = manifest.input_shape.iter().product();
    if manifest.input_shape.is_empty() || input_len == 0 {
        return Err(Error::Format("input_shape must be non-empty with positive extents".into()));
    }
    let mut domains = Vec::with_capacity(manifest.domains.len());
    for (di, entry) in manifest.domains.iter().enumerate() {
        let stacked = read_tensor_file(dir.join(&entry.instances))?;
        let mut expected = vec![entry.count];
        expected.extend(&manifest.input_shape);
        if stacked.shape() != expected.as_slice() {
            return Err(shape_err(format!(
                "domain {:?} instances have shape {:?}, manifest implies {expected:?}",
                entry.name,
                stacked.shape()
            )));
        }
        let labels = read_labels(dir.join(&entry.labels))?;
        if labels.len() != entry.count {
            return Err(Error::Format(format!(
                "domain {:?} has {} labels for {} instances",
                entry.name,
                labels.len(),
                entry.count
            )));
        }
        let instances = stacked
            .data()
            .chunks_exact(input_len)
            .zip(labels)
            .enumerate()
            .map(|(j, (x, y))| {
                Ok(Instance {
                    id: instance_id(di, j),
                    x: Tensor::new(manifest.input_shape.clone(), x.to_vec())?,
                    label: y as usize,
                })
            })
            .collect::<Result<_>>()?;
        domains.push(Domain {
            name: entry.name.clone(),
            instances,
        });
    }
    MultiDomainDataset::new(domains, manifest.class_count, manifest.input_shape)
}

fn instance_id(domain: usize, position: usize) -> u64 {
    ((domain as u64) << 32) | position as u64
}

fn write_labels(path: impl AsRef<Path>, labels: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DGT1_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(labels.len() as u32).to_le_bytes())?;
    for &l in labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(f);
    let shape = crate::tensor::io_read_header(&mut r)?;
    if shape.len() != 1 {
        return Err(Error::Format("label file must have order 1".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != shape[0] * 4 {
        return Err(Error::Format(format!(
            "label payload holds {} bytes, expected {}",
            bytes.len(),
            shape[0] * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

/// Seeded per-domain split. Validation takes `ceil(fraction · N)` instances
/// of every domain; the rest is training data.
pub fn split_train_val(
    dataset: &MultiDomainDataset,
    fraction: f64,
    seed: u64,
) -> Result<(MultiDomainDataset, MultiDomainDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, d) in dataset.domains.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1)));
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.shuffle(&mut rng);
        let n_val = ((fraction * d.len() as f64).ceil() as usize).min(d.len());
        let pick = |idx: &[usize]| Domain {
            name: d.name.clone(),
            instances: idx.iter().map(|&j| d.instances[j].clone()).collect(),
        };
        val.push(pick(&order[..n_val]));
        train.push(pick(&order[n_val..]));
    }
    Ok((
        MultiDomainDataset {
            domains: train,
            ..dataset.clone()
        },
        MultiDomainDataset {
            domains: val,
            ..dataset.clone()
        },
    ))
}

/// Appearance transform applied to one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub name: String,
    /// Rotation angle in degrees within the dataset's rotation plane.
    pub rotation_deg: f64,
    #[serde(default = "one")]
    pub scale: f64,
    /// Length of the additive offset along a random per-domain direction.
    #[serde(default)]
    pub bias_shift: f64,
}

fn one() -> f64 {
    1.0
}

/// Parameters of the synthetic multi-domain benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub input_dim: usize,
    /// Standard deviation of the shared class prototypes.
    pub prototype_scale: f64,
    /// Radius of an extra prototype component inside the rotation plane.
    #[serde(default)]
    pub plane_radius: f64,
    /// Phase step between consecutive classes of that component, in degrees
    /// (the first phase is random).
    #[serde(default)]
    pub plane_phase_step_deg: f64,
    /// Per-instance isotropic Gaussian noise before the domain transform.
    pub noise_std: f64,
    pub label_noise: f64,
    pub instances_per_class: usize,
    pub domains: Vec<DomainTransform>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Reference benchmark: one domain per rotation angle. Most of the class
    /// separation lies inside the rotation plane, so rotating a domain moves
    /// its classes toward their neighbours' positions.
    pub fn reference(angles_deg: &[f64], seed: u64) -> Self {
        Self {
            class_count: 5,
            input_dim: 16,
            prototype_scale: 0.3,
            plane_radius: 4.0,
            plane_phase_step_deg: 30.0,
            noise_std: 0.6,
            label_noise: 0.0,
            instances_per_class: 200,
            domains: angles_deg
                .iter()
                .enumerate()
                .map(|(i, &a)| DomainTransform {
                    name: format!("d{i}"),
                    rotation_deg: a,
                    scale: 1.0,
                    bias_shift: 0.0,
                })
                .collect(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.input_dim < 2 || self.instances_per_class == 0 || self.domains.is_empty() {
            return Err(Error::Config(
                "synthetic spec needs ≥2 classes, ≥2 input dims, ≥1 instance per class and ≥1 domain".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config(format!("label noise {} outside [0, 0.5)", self.label_noise)));
        }
        if !(self.prototype_scale > 0.0) || !(self.noise_std >= 0.0) || !(self.plane_radius >= 0.0) {
            return Err(Error::Config(
                "prototype scale must be positive, noise and plane radius non-negative".into(),
            ));
        }
        if self.domains.iter().any(|d| !(d.scale > 0.0) || !d.rotation_deg.is_finite() || !d.bias_shift.is_finite())
            || !self.plane_phase_step_deg.is_finite()
        {
            return Err(Error::Config("domain transforms need positive scale and finite angle/shift".into()));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Deterministic synthetic dataset.
///
/// Class prototypes are drawn once and shared by every domain: an isotropic
/// Gaussian part plus, optionally, a point on a circle inside the rotation
/// plane. Domain `d` maps `prototype + noise` through a rotation by its angle
/// in that plane (one random 2-plane per dataset), scales it and adds its
/// offset.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultiDomainDataset> {
    spec.validate()?;
    let dim = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let proto = Normal::new(0.0, spec.prototype_scale).expect("positive scale");
    let mut prototypes: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| (0..dim).map(|_| proto.sample(&mut rng)).collect())
        .collect();

    // Orthonormal pair spanning the rotation plane.
    let u = unit_vector(&mut rng, dim);
    let mut v = unit_vector(&mut rng, dim);
    let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, y)| *x -= d * y);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    if spec.plane_radius > 0.0 {
        let phase0 = rng.gen_range(0.0..std::f64::consts::TAU);
        for (ci, p) in prototypes.iter_mut().enumerate() {
            let (s, c) = (phase0 + ci as f64 * spec.plane_phase_step_deg.to_radians()).sin_cos();
            for k in 0..dim {
                p[k] += spec.plane_radius * (c * u[k] + s * v[k]);
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite noise");
    let mut domains = Vec::with_capacity(spec.domains.len());
    for (di, t) in spec.domains.iter().enumerate() {
        let mut drng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5851_F42D_4C95_7F2D_u64.wrapping_mul(di as u64 + 1)));
        let offset: Vec<f64> = unit_vector(&mut drng, dim).into_iter().map(|x| x * t.bias_shift).collect();
        let (sin, cos) = t.rotation_deg.to_radians().sin_cos();
        let mut instances = Vec::with_capacity(spec.class_count * spec.instances_per_class);
        for j in 0..spec.instances_per_class {
            for (c, p) in prototypes.iter().enumerate() {
                let mut x: Vec<f64> = p.iter().map(|&pi| pi + noise.sample(&mut drng)).collect();
                let a: f64 = x.iter().zip(&u).map(|(p, q)| p * q).sum();
                let b: f64 = x.iter().zip(&v).map(|(p, q)| p * q).sum();
                let (ra, rb) = (cos * a - sin * b, sin * a + cos * b);
                for k in 0..dim {
                    x[k] += (ra - a) * u[k] + (rb - b) * v[k];
                    x[k] = t.scale * x[k] + offset[k];
                }
                let label = if spec.label_noise > 0.0 && drng.gen::<f64>() < spec.label_noise {
                    (c + drng.gen_range(1..spec.class_count)) % spec.class_count
                } else {
                    c
                };
                let pos = j * spec.class_count + c;
                instances.push(Instance {
                    id: instance_id(di, pos),
                    x: Tensor::new(vec![dim], x)?,
                    label,
                });
            }
        }
        domains.push(Domain {
            name: t.name.clone(),
            instances,
        });
    }
    MultiDomainDataset::new(domains, spec.class_count, vec![dim])
}
