use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{generate_synthetic, Domain, Instance, MultiDomainDataset, SyntheticSpec};
use crate::domain::{agnostic_descriptor, LayerShape, WeightForm, WeightGenerator};
use crate::tensor::{Matrix, Tensor};
use crate::tucker::hosvd;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randomize_biases(net: &mut Network, r: &mut ChaCha8Rng) {
    for g in net.generators_mut() {
        let params = g.generator.params_mut();
        for b in params.into_iter().last().unwrap() {
            *b = r.gen_range(-0.5..0.5);
        }
    }
}

/// Conv → ReLU → FC on a 4×4×2 input.
fn small_conv_net(param: Parameterization, domains: usize, r: &mut ChaCha8Rng) -> Network {
    NetworkBuilder::new(vec![4, 4, 2], domains, param)
        .conv(2, 2, 3, r)
        .unwrap()
        .relu()
        .fc(3, r)
        .unwrap()
        .build(3)
        .unwrap()
}

/// Replaces every full generator with its full-rank HO-SVD factors.
fn factorize_full_rank(net: &Network) -> Network {
    let mut out = net.clone();
    for g in out.generators_mut() {
        let t = g.generator.full_tensor().unwrap();
        let f = hosvd(&t, t.shape()).unwrap();
        g.generator = g.generator.with_factors(f).unwrap();
    }
    out
}

/// Independent forward pass: explicit index loops over the concrete weights.
fn naive_forward(net: &ConcreteNetwork, x: &[f64]) -> Vec<f64> {
    let mut shape = net.input_shape().to_vec();
    let mut a = x.to_vec();
    for layer in net.layers() {
        match layer {
            ConcreteLayer::Fc { weight, bias } => {
                let (inputs, outputs) = (weight.shape()[0], weight.shape()[1]);
                a = (0..outputs)
                    .map(|o| bias[o] + (0..inputs).map(|i| weight.get(&[i, o]) * a[i]).sum::<f64>())
                    .collect();
                shape = vec![outputs];
            }
            ConcreteLayer::Conv { weight, bias, input } => {
                let s = weight.shape();
                let (oh, ow) = (input.height - s[0] + 1, input.width - s[1] + 1);
                let xin = Tensor::new(shape.clone(), a.clone()).unwrap();
                let out = Tensor::from_fn(&[oh, ow, s[3]], |idx| {
                    let mut acc = bias[idx[2]];
                    for i in 0..s[0] {
                        for j in 0..s[1] {
                            for d in 0..s[2] {
                                acc += weight.get(&[i, j, d, idx[2]]) * xin.get(&[idx[0] + i, idx[1] + j, d]);
                            }
                        }
                    }
                    acc
                })
                .unwrap();
                shape = out.shape().to_vec();
                a = out.into_data();
            }
            ConcreteLayer::Relu => a = a.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect(),
        }
    }
    a
}

fn random_input(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

#[test]
fn identity_fc_layer_passes_input_through() {
    let c = 4;
    let mut w = Tensor::zeros(&[c, c, 3]).unwrap();
    for i in 0..c {
        w.set(&[i, i, 2], 1.0);
        w.set(&[i, (i + 1) % c, 0], 5.0);
    }
    let gen = WeightGenerator::new(LayerShape::Fc { inputs: c, outputs: c }, 2, WeightForm::Full(w), Matrix::zeros(3, c))
        .unwrap();
    let net = Network::new(
        vec![Layer::Fc(GeneratedLayer {
            generator: gen,
            trainable: true,
        })],
        vec![c],
        2,
        c,
    )
    .unwrap();
    let x = [0.5, -1.0, 2.0, 0.0];
    assert_eq!(net.forward(&x, &agnostic_descriptor(2)).unwrap(), x.to_vec());
}

#[test]
fn relu_only_network() {
    let net = Network::new(vec![Layer::Relu], vec![3], 1, 3).unwrap();
    let out = net.forward(&[-1.0, 0.0, 2.5], &agnostic_descriptor(1)).unwrap();
    assert_eq!(out, vec![0.0, 0.0, 2.5]);
}

#[test]
fn forward_matches_straight_line_oracle() {
    let mut r = rng(1);
    for param in [Parameterization::Shared, Parameterization::Full { domain_scale: 0.5 }] {
        let mut net = small_conv_net(param, 2, &mut r);
        randomize_biases(&mut net, &mut r);
        let mlp = Network::mlp(5, &[7, 4], 3, 2, param, &mut r).unwrap();
        for n in [&net, &mlp] {
            let z = n.descriptor(1, 0.3).unwrap();
            let c = n.concrete(&z).unwrap();
            for _ in 0..5 {
                let x = random_input(n.input_shape().iter().product(), &mut r);
                let fast = n.forward(&x, &z).unwrap();
                let slow = naive_forward(&c, &x);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                }
            }
        }
    }
}

#[test]
fn shape_chain_is_validated() {
    let mut r = rng(2);
    let g = WeightGenerator::init_shared(LayerShape::Fc { inputs: 3, outputs: 2 }, 1, &mut r);
    let layer = Layer::Fc(GeneratedLayer {
        generator: g,
        trainable: true,
    });
    assert!(Network::new(vec![layer.clone()], vec![4], 1, 2).is_err());
    assert!(Network::new(vec![layer.clone()], vec![3], 1, 3).is_err());
    assert!(Network::new(vec![layer], vec![3], 1, 2).is_ok());
    let net = Network::mlp(3, &[], 2, 1, Parameterization::Shared, &mut r).unwrap();
    assert!(matches!(net.forward(&[1.0], &agnostic_descriptor(1)), Err(crate::Error::Shape(_))));
}

#[test]
fn uniform_scores_give_log_class_count() {
    let mut r = rng(3);
    let mut net = Network::mlp(4, &[], 5, 2, Parameterization::Full { domain_scale: 1.0 }, &mut r).unwrap();
    for g in net.generators_mut() {
        for p in g.generator.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let x = [1.0, 2.0, 3.0, 4.0];
    let batch: Vec<Sample<'_>> = (0..6).map(|i| Sample { x: &x, label: i % 5, domain: i % 2 }).collect();
    let (loss, _) = net.loss_and_grads(&batch, 0.3).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn empty_batch_and_bad_labels() {
    let mut r = rng(4);
    let net = Network::mlp(2, &[], 2, 2, Parameterization::Shared, &mut r).unwrap();
    assert!(matches!(net.loss_and_grads(&[], 0.3), Err(crate::Error::EmptyBatch)));
    let x = [0.0, 1.0];
    let bad = [Sample { x: &x, label: 2, domain: 0 }];
    assert!(matches!(net.loss_and_grads(&bad, 0.3), Err(crate::Error::LabelSpace(_))));
    let bad = [Sample { x: &x, label: 0, domain: 2 }];
    assert!(net.loss_and_grads(&bad, 0.3).is_err());
}

fn batch_loss(net: &Network, batch: &[Sample<'_>], rho: f64) -> f64 {
    net.loss_and_grads(batch, rho).unwrap().0
}

/// Max relative error of analytic gradients against central differences.
pub(crate) fn max_gradient_error(net: &Network, batch: &[Sample<'_>], rho: f64, h: f64) -> f64 {
    let (_, grads) = net.loss_and_grads(batch, rho).unwrap();
    let mut worst: f64 = 0.0;
    let n_layers = grads.len();
    for li in 0..n_layers {
        for (bi, block) in grads[li].iter().enumerate() {
            for (pi, &g) in block.iter().enumerate() {
                let perturb = |delta: f64| {
                    let mut n = net.clone();
                    let gen = n.generators_mut().nth(li).unwrap();
                    gen.generator.params_mut()[bi][pi] += delta;
                    batch_loss(&n, batch, rho)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                let denom = fd.abs().max(g.abs()).max(1e-6);
                worst = worst.max((fd - g).abs() / denom);
            }
        }
    }
    worst
}

fn gradient_batch(n_in: usize, classes: usize, domains: usize, r: &mut ChaCha8Rng) -> Vec<(Vec<f64>, usize, usize)> {
    (0..6)
        .map(|i| (random_input(n_in, r), r.gen_range(0..classes), i % domains))
        .collect()
}

fn as_samples(raw: &[(Vec<f64>, usize, usize)]) -> Vec<Sample<'_>> {
    raw.iter().map(|(x, y, d)| Sample { x, label: *y, domain: *d }).collect()
}

#[test]
fn gradients_match_finite_differences_for_all_forms() {
    let mut r = rng(5);
    for param in [Parameterization::Shared, Parameterization::Full { domain_scale: 0.5 }] {
        let mut conv = small_conv_net(param, 2, &mut r);
        randomize_biases(&mut conv, &mut r);
        let mut mlp = Network::mlp(5, &[6], 3, 3, param, &mut r).unwrap();
        randomize_biases(&mut mlp, &mut r);
        let mut nets = vec![conv.clone(), mlp.clone()];
        if matches!(param, Parameterization::Full { .. }) {
            nets.push(factorize_full_rank(&conv));
            // Truncated ranks exercise non-square factors.
            let mut truncated = mlp.clone();
            for g in truncated.generators_mut() {
                let t = g.generator.full_tensor().unwrap();
                let ranks: Vec<usize> = t.shape().iter().map(|&d| (d + 1) / 2).collect();
                g.generator = g.generator.with_factors(hosvd(&t, &ranks).unwrap()).unwrap();
            }
            nets.push(truncated);
        }
        for net in &nets {
            assert!(net.parameter_count() <= 2000);
            let n_in = net.input_shape().iter().product();
            let raw = gradient_batch(n_in, net.classes(), net.domains(), &mut r);
            let err = max_gradient_error(net, &as_samples(&raw), 0.3, 1e-5);
            assert!(err <= 1e-4, "max relative gradient error {err}");
        }
    }
}

#[test]
fn frozen_layers_get_no_gradient() {
    let mut r = rng(6);
    let mut net = Network::mlp(4, &[5], 3, 2, Parameterization::Shared, &mut r).unwrap();
    net.generators_mut().next().unwrap().trainable = false;
    let raw = gradient_batch(4, 3, 2, &mut r);
    let (_, grads) = net.loss_and_grads(&as_samples(&raw), 0.3).unwrap();
    assert!(grads[0].iter().flatten().all(|&g| g == 0.0));
    assert!(grads[1].iter().flatten().any(|&g| g != 0.0));
}

#[test]
fn full_and_full_rank_factored_losses_agree() {
    let mut r = rng(7);
    let mut full = Network::mlp(6, &[5], 4, 3, Parameterization::Full { domain_scale: 0.3 }, &mut r).unwrap();
    randomize_biases(&mut full, &mut r);
    let factored = factorize_full_rank(&full);
    let raw = gradient_batch(6, 4, 3, &mut r);
    let a = batch_loss(&full, &as_samples(&raw), 0.3);
    let b = batch_loss(&factored, &as_samples(&raw), 0.3);
    assert!((a - b).abs() <= 1e-8 * a.abs());
}

#[test]
fn agnostic_extraction_agrees_with_conditioned_forward() {
    let mut r = rng(8);
    let mut net = small_conv_net(Parameterization::Full { domain_scale: 0.4 }, 3, &mut r);
    randomize_biases(&mut net, &mut r);
    let net = factorize_full_rank(&net);
    let concrete = net.extract_agnostic().unwrap();
    let z = agnostic_descriptor(3);
    for _ in 0..100 {
        let x = random_input(32, &mut r);
        let a = concrete.forward(&x).unwrap();
        let b = net.forward(&x, &z).unwrap();
        let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12);
    }
}

#[test]
fn full_form_extraction_uses_trailing_slices() {
    let mut r = rng(9);
    let net = Network::mlp(3, &[4], 2, 2, Parameterization::Full { domain_scale: 1.0 }, &mut r).unwrap();
    let c = net.extract_agnostic().unwrap();
    for (g, l) in net.generators().zip(c.layers().iter().filter(|l| !matches!(l, ConcreteLayer::Relu))) {
        let ConcreteLayer::Fc { weight, .. } = l else { panic!() };
        assert_eq!(*weight, g.generator.full_tensor().unwrap().last_slice(2).unwrap());
    }
}

#[test]
fn concrete_and_generated_checkpoints_round_trip() {
    let mut r = rng(10);
    let mut net = small_conv_net(Parameterization::Full { domain_scale: 0.4 }, 2, &mut r);
    randomize_biases(&mut net, &mut r);
    let factored = factorize_full_rank(&net);
    let dir = tempfile::tempdir().unwrap();
    for (i, n) in [net, factored].iter().enumerate() {
        let p = dir.path().join(format!("gen{i}"));
        save_checkpoint(n, Some(0.3), &p).unwrap();
        let (back, rho) = load_checkpoint(&p).unwrap();
        assert_eq!(&back, n);
        assert_eq!(rho, Some(0.3));

        let c = n.extract_agnostic().unwrap();
        let p = dir.path().join(format!("concrete{i}"));
        save_concrete(&c, 2, &p).unwrap();
        let back = load_concrete(&p).unwrap();
        for _ in 0..10 {
            let x = random_input(32, &mut r);
            assert_eq!(back.forward(&x).unwrap(), c.forward(&x).unwrap());
        }
        assert!(load_checkpoint(&p).is_err());
    }
}

#[test]
fn corrupted_checkpoint_is_format_error() {
    let mut r = rng(11);
    let net = Network::mlp(3, &[4], 2, 2, Parameterization::Shared, &mut r).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&net, None, dir.path()).unwrap();
    std::fs::write(dir.path().join("layer00_weight.dgt"), b"DGT1garbage").unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(crate::Error::Format(_))));
    std::fs::write(dir.path().join("manifest.json"), "{").unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(crate::Error::Format(_))));
}

fn fixture_net() -> ConcreteNetwork {
    // Scores are the input itself.
    let mut w = Tensor::zeros(&[3, 3]).unwrap();
    for i in 0..3 {
        w.set(&[i, i], 1.0);
    }
    ConcreteNetwork::new(vec![ConcreteLayer::Fc { weight: w, bias: vec![0.0; 3] }], vec![3], 3).unwrap()
}

fn inst(x: [f64; 3], label: usize) -> Instance {
    Instance {
        id: 0,
        x: Tensor::new(vec![3], x.to_vec()).unwrap(),
        label,
    }
}

#[test]
fn evaluate_counts_by_hand() {
    let net = fixture_net();
    let data = vec![
        inst([1.0, 0.0, 0.0], 0),
        inst([0.0, 2.0, 0.0], 1),
        inst([0.0, 0.0, 3.0], 2),
        inst([0.0, 0.0, 3.0], 0),
        inst([1.0, 1.0, 0.0], 0), // tie → class 0
        inst([1.0, 1.0, 0.0], 1),
        inst([0.0, 5.0, 5.0], 1), // tie → class 1
        inst([-1.0, -2.0, -3.0], 0),
        inst([0.0, 0.0, 0.0], 2),
        inst([2.0, 3.0, 1.0], 1),
    ];
    // Correct: 0,1,2,4,6,7,9 → 7 of 10.
    assert_eq!(evaluate(&net, &data).unwrap(), 0.7);
    assert_eq!(train::argmax_for_tests(&[1.0, 1.0]), 0);
}

#[test]
fn evaluate_perfect_and_constant() {
    let net = fixture_net();
    let perfect: Vec<Instance> = (0..3).map(|c| {
        let mut x = [0.0; 3];
        x[c] = 1.0;
        inst(x, c)
    }).collect();
    assert_eq!(evaluate(&net, &perfect).unwrap(), 1.0);
    let constant: Vec<Instance> = (0..30).map(|i| inst([1.0, 0.0, 0.0], i % 3)).collect();
    assert!((evaluate(&net, &constant).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

fn separable(seed: u64) -> MultiDomainDataset {
    let mut r = rng(seed);
    let domains = (0..2)
        .map(|d| Domain {
            name: format!("d{d}"),
            instances: (0..200)
                .map(|j| {
                    let label = j % 2;
                    let sign = if label == 0 { -1.0 } else { 1.0 };
                    let x = vec![sign * r.gen_range(0.5..2.0) + 0.3 * d as f64, r.gen_range(-1.0..1.0)];
                    Instance {
                        id: ((d as u64) << 32) | j as u64,
                        x: Tensor::new(vec![2], x).unwrap(),
                        label,
                    }
                })
                .collect(),
        })
        .collect();
    MultiDomainDataset::new(domains, 2, vec![2]).unwrap()
}

#[test]
fn learns_linearly_separable_two_domain_data() {
    let data = separable(12);
    let mut r = rng(12);
    let mut net = Network::mlp(2, &[8], 2, 2, Parameterization::Full { domain_scale: 0.1 }, &mut r).unwrap();
    let cfg = TrainConfig {
        max_iterations: 2000,
        batch_size: 16,
        seed: 3,
        ..TrainConfig::default()
    };
    let report = train(&mut net, &data, &cfg).unwrap();
    assert!(report.best_val_accuracy >= 0.95, "{}", report.best_val_accuracy);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = separable(13);
    let mut r = rng(13);
    let mut net = Network::mlp(2, &[4], 2, 2, Parameterization::Full { domain_scale: 0.1 }, &mut r).unwrap();
    let before = net.clone();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        max_iterations: 20,
        batch_size: 8,
        eval_every: 5,
        ..TrainConfig::default()
    };
    train(&mut net, &data, &cfg).unwrap();
    for (a, b) in net.generators().zip(before.generators()) {
        for (p, q) in a.generator.params().iter().zip(b.generator.params()) {
            let pa: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
            let qa: Vec<u64> = q.iter().map(|v| v.to_bits()).collect();
            assert_eq!(pa, qa);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = separable(14);
    let cfg = TrainConfig {
        max_iterations: 60,
        batch_size: 8,
        eval_every: 20,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut r = rng(14);
        let mut net = Network::mlp(2, &[4], 2, 2, Parameterization::Full { domain_scale: 0.1 }, &mut r).unwrap();
        let rep = train(&mut net, &data, &cfg).unwrap();
        (serde_json::to_string(&rep).unwrap(), net)
    };
    let (a, na) = run();
    let (b, nb) = run();
    assert_eq!(a, b);
    assert_eq!(na, nb);
}

#[test]
fn repeated_small_steps_decrease_loss() {
    let mut r = rng(15);
    let mut net = Network::mlp(5, &[6], 3, 2, Parameterization::Full { domain_scale: 0.3 }, &mut r).unwrap();
    let net0 = factorize_full_rank(&net);
    let raw = gradient_batch(5, 3, 2, &mut r);
    let batch = as_samples(&raw);
    for n in [&mut net, &mut net0.clone()] {
        let mut opt = Sgd::new(n, 1e-4, 0.0, 0.0);
        let mut prev = batch_loss(n, &batch, 0.3);
        for _ in 0..10 {
            let (_, g) = n.loss_and_grads(&batch, 0.3).unwrap();
            opt.step(n, &g);
            let now = batch_loss(n, &batch, 0.3);
            assert!(now < prev);
            prev = now;
        }
    }
}

#[test]
fn domain_permutation_leaves_loss_unchanged() {
    let mut r = rng(16);
    let mut net = Network::mlp(4, &[5], 3, 3, Parameterization::Full { domain_scale: 0.5 }, &mut r).unwrap();
    randomize_biases(&mut net, &mut r);
    let perm = [2usize, 0, 1];
    // Permute the trailing-mode slices consistently with the domain relabeling.
    let mut permuted = net.clone();
    for g in permuted.generators_mut() {
        let t = g.generator.full_tensor().unwrap();
        let mut slices: Vec<Tensor> = (0..4).map(|k| t.last_slice(k).unwrap()).collect();
        let orig = slices.clone();
        for (old, &new) in perm.iter().enumerate() {
            slices[new] = orig[old].clone();
        }
        let refs: Vec<&Tensor> = slices.iter().collect();
        let stacked = Tensor::stack_last(&refs).unwrap();
        let bias = g.generator.bias_table().clone();
        let mut rows: Vec<Vec<f64>> = (0..4).map(|k| bias.row(k).to_vec()).collect();
        let orig_rows = rows.clone();
        for (old, &new) in perm.iter().enumerate() {
            rows[new] = orig_rows[old].clone();
        }
        g.generator = WeightGenerator::new(
            g.generator.shape(),
            3,
            WeightForm::Full(stacked),
            Matrix::from_rows(&rows).unwrap(),
        )
        .unwrap();
    }
    let raw = gradient_batch(4, 3, 3, &mut r);
    let moved: Vec<(Vec<f64>, usize, usize)> = raw.iter().map(|(x, y, d)| (x.clone(), *y, perm[*d])).collect();
    let a = batch_loss(&net, &as_samples(&raw), 0.3);
    let b = batch_loss(&permuted, &as_samples(&moved), 0.3);
    assert!((a - b).abs() <= 1e-12 * a.abs());
}

#[test]
fn train_rejects_mismatched_data() {
    let spec = SyntheticSpec::reference(&[0.0, 10.0], 1);
    let data = generate_synthetic(&spec).unwrap();
    let mut r = rng(17);
    let mut net = Network::mlp(16, &[], 4, 2, Parameterization::Shared, &mut r).unwrap();
    assert!(matches!(train(&mut net, &data, &TrainConfig::default()), Err(crate::Error::LabelSpace(_))));
}
