use std::collections::HashSet;

use domaingen::dataset::{generate_synthetic, load_dataset, save_dataset, split_train_val, SyntheticSpec};
use domaingen::domain::{encode_domain, DomainDescriptor, LayerShape, WeightForm, WeightGenerator};
use domaingen::experiment::held_out_split;
use domaingen::shift::{domain_distribution, domain_shift, kld};
use domaingen::tensor::{read_tensor, write_tensor, Matrix, Tensor};
use domaingen::tucker::{hosvd, select_ranks};
use proptest::prelude::*;

fn shape(orders: std::ops::RangeInclusive<usize>, max: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1..=max, orders)
}

fn tensor(orders: std::ops::RangeInclusive<usize>, max: usize) -> impl Strategy<Value = Tensor> {
    shape(orders, max).prop_flat_map(|s| {
        let n: usize = s.iter().product();
        prop::collection::vec(-1.0..1.0f64, n).prop_map(move |d| Tensor::new(s.clone(), d).unwrap())
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0..1.0f64, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn features(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, dim), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fold_inverts_unfold(t in tensor(1..=5, 5)) {
        for m in 0..t.order() {
            let u = t.unfold(m).unwrap();
            prop_assert_eq!(u.rows(), t.shape()[m]);
            prop_assert_eq!(Tensor::fold(&u, m, t.shape()).unwrap(), t.clone());
        }
    }

    #[test]
    fn tensor_file_round_trip(t in tensor(1..=4, 5)) {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        prop_assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn mode_product_is_linear(
        (t, a, b, m) in tensor(2..=4, 4).prop_flat_map(|t| {
            let order = t.order();
            (Just(t), 0..order)
        }).prop_flat_map(|(t, m)| {
            let d = t.shape()[m];
            (Just(t), matrix(3, d), matrix(3, d), Just(m))
        }),
        alpha in -2.0..2.0f64,
    ) {
        let sum = Matrix::new(3, a.cols(), a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + y).collect()).unwrap();
        let lhs = t.mode_product(&sum, m).unwrap();
        let ta = t.mode_product(&a, m).unwrap();
        let tb = t.mode_product(&b, m).unwrap();
        let rhs = Tensor::new(ta.shape().to_vec(), ta.data().iter().zip(tb.data()).map(|(x, y)| alpha * x + y).collect()).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn mode_products_on_distinct_modes_commute(
        (t, a, b) in tensor(3..=3, 4).prop_flat_map(|t| {
            let s = t.shape().to_vec();
            (Just(t), matrix(2, s[0]), matrix(3, s[2]))
        }),
    ) {
        let ab = t.mode_product(&a, 0).unwrap().mode_product(&b, 2).unwrap();
        let ba = t.mode_product(&b, 2).unwrap().mode_product(&a, 0).unwrap();
        prop_assert!(max_abs_diff(&ab, &ba) <= 1e-12);
    }

    #[test]
    fn hosvd_factors_are_orthonormal_and_error_matches_core(
        (t, ranks) in tensor(2..=4, 5).prop_flat_map(|t| {
            let r: Vec<_> = t.shape().iter().map(|&d| 1..=d).collect();
            (Just(t), r)
        }),
    ) {
        let f = hosvd(&t, &ranks).unwrap();
        prop_assert_eq!(f.ranks(), ranks);
        for u in f.factors() {
            let g = u.transpose().matmul(u).unwrap();
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((g.get(i, j) - want).abs() <= 1e-10);
                }
            }
        }
        let norm = t.frobenius_norm();
        prop_assume!(norm > 1e-6);
        let err = t.relative_error(&f.reconstruct().unwrap()).unwrap();
        let implied = (1.0 - (f.core().frobenius_norm() / norm).powi(2)).max(0.0).sqrt();
        prop_assert!((err - implied).abs() <= 1e-7, "{} vs {}", err, implied);
    }

    #[test]
    fn selected_ranks_meet_budget_and_shrink_with_epsilon(
        t in tensor(3..=4, 5),
        lo in 0.001..0.5f64,
        hi in 0.5..0.99f64,
    ) {
        prop_assume!(t.frobenius_norm() > 1e-6);
        let tight = select_ranks(&t, lo).unwrap();
        let loose = select_ranks(&t, hi).unwrap();
        prop_assert!(tight.achieved_error <= lo);
        prop_assert!(loose.achieved_error <= hi);
        let tp: usize = tight.ranks.iter().product();
        let lp: usize = loose.ranks.iter().product();
        prop_assert!(lp <= tp, "{:?} vs {:?}", loose.ranks, tight.ranks);
        for (k, d) in tight.ranks.iter().zip(t.shape()) {
            prop_assert!(*k >= 1 && k <= d);
        }
    }

    #[test]
    fn generation_is_linear_in_descriptor(
        (inputs, outputs, domains) in (1..5usize, 1..5usize, 1..4usize),
        seed in any::<u64>(),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
        factored in any::<bool>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&[inputs, outputs, domains + 1], |_| r.gen_range(-1.0..1.0)).unwrap();
        let bias = Matrix::new(domains + 1, outputs, (0..(domains + 1) * outputs).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut g = WeightGenerator::new(LayerShape::Fc { inputs, outputs }, domains, WeightForm::Full(t.clone()), bias).unwrap();
        if factored {
            g = g.with_factors(hosvd(&t, t.shape()).unwrap()).unwrap();
        }
        let z1: Vec<f64> = (0..=domains).map(|_| r.gen_range(-1.0..1.0)).collect();
        let z2: Vec<f64> = (0..=domains).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| a * x + b * y).collect();
        let w = |z: &[f64]| g.generate(&DomainDescriptor::from_values(z.to_vec())).unwrap();
        let (w1, w2, wm) = (w(&z1), w(&z2), w(&mix));
        for ((p, q), m) in w1.weight.data().iter().zip(w2.weight.data()).zip(wm.weight.data()) {
            prop_assert!((a * p + b * q - m).abs() <= 1e-10);
        }
        for ((p, q), m) in w1.bias.iter().zip(&w2.bias).zip(&wm.bias) {
            prop_assert!((a * p + b * q - m).abs() <= 1e-10);
        }
        // Factor-first and reconstruct-first generation agree.
        let z = encode_domain(r.gen_range(0..domains), domains, 0.3).unwrap();
        let fast = g.generate(&z).unwrap();
        let slow = g.generate_reconstruct_first(&z).unwrap();
        prop_assert!(max_abs_diff(&fast.weight, &slow.weight) <= 1e-10);
    }

    #[test]
    fn kld_is_non_negative_and_zero_on_self(f in features(4, 3), g in features(5, 3)) {
        let p = domain_distribution(&f).unwrap();
        let q = domain_distribution(&g).unwrap();
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(kld(&p, &q).unwrap() >= 0.0);
        prop_assert!(kld(&p, &p).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn shift_ignores_instance_order_and_common_offsets(
        a in features(6, 4),
        b in features(5, 4),
        c in features(7, 4),
        offset in -5.0..5.0f64,
        rot in 0..6usize,
    ) {
        let base = domain_shift(&[a.clone(), b.clone()], std::slice::from_ref(&c)).unwrap();
        let mut shuffled = a.clone();
        shuffled.rotate_left(rot);
        shuffled.reverse();
        let reordered = domain_shift(&[shuffled, b.clone()], std::slice::from_ref(&c)).unwrap();
        prop_assert!((base.d_shift - reordered.d_shift).abs() <= 1e-12);
        // Softmax is invariant to adding the same constant to every feature.
        let shift = |v: &Vec<Vec<f64>>| v.iter().map(|x| x.iter().map(|e| e + offset).collect()).collect::<Vec<Vec<f64>>>();
        let moved = domain_shift(&[shift(&a), shift(&b)], &[shift(&c)]).unwrap();
        prop_assert!((base.d_shift - moved.d_shift).abs() <= 1e-9);
        prop_assert!(base.d_shift >= 0.0);
        let same = domain_shift(&[a.clone(), a.clone()], std::slice::from_ref(&a)).unwrap();
        prop_assert!(same.d_shift.abs() <= 1e-12);
    }
}

fn small_spec(seed: u64, domains: usize) -> SyntheticSpec {
    let angles: Vec<f64> = (0..domains).map(|d| 20.0 * d as f64).collect();
    let mut spec = SyntheticSpec::reference(&angles, seed);
    spec.instances_per_class = 6;
    spec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_data_is_deterministic_and_well_formed(seed in any::<u64>(), domains in 1..5usize) {
        let spec = small_spec(seed, domains);
        let d = generate_synthetic(&spec).unwrap();
        prop_assert_eq!(&d, &generate_synthetic(&spec).unwrap());
        prop_assert_eq!(d.domain_count(), domains);
        let mut ids = HashSet::new();
        for dom in d.domains() {
            prop_assert_eq!(dom.len(), spec.class_count * spec.instances_per_class);
            for inst in &dom.instances {
                prop_assert!(inst.label < spec.class_count);
                prop_assert_eq!(inst.x.shape(), d.input_shape());
                prop_assert!(inst.x.data().iter().all(|v| v.is_finite()));
                prop_assert!(ids.insert(inst.id));
            }
        }
    }

    #[test]
    fn held_out_instances_never_reach_the_sources(seed in any::<u64>(), domains in 2..5usize, pick in any::<prop::sample::Index>()) {
        let d = generate_synthetic(&small_spec(seed, domains)).unwrap();
        let names = d.domain_names();
        let held = &names[pick.index(names.len())];
        let (sources, target) = held_out_split(&d, held).unwrap();
        prop_assert!(sources.domain(held).is_none());
        let source_ids: HashSet<u64> = sources.domains().iter().flat_map(|x| &x.instances).map(|i| i.id).collect();
        prop_assert!(target.instances.iter().all(|i| !source_ids.contains(&i.id)));
        prop_assert_eq!(source_ids.len() + target.len(), d.domains().iter().map(|x| x.len()).sum::<usize>());
        // The train/validation split inside training partitions each source domain.
        let (train, val) = split_train_val(&sources, 0.25, seed).unwrap();
        for ((s, t), v) in sources.domains().iter().zip(train.domains()).zip(val.domains()) {
            let mut ids: Vec<u64> = t.instances.iter().chain(&v.instances).map(|i| i.id).collect();
            ids.sort_unstable();
            let mut want: Vec<u64> = s.instances.iter().map(|i| i.id).collect();
            want.sort_unstable();
            prop_assert_eq!(ids, want);
            prop_assert!(!v.is_empty() && !t.is_empty());
        }
    }

    #[test]
    fn dataset_round_trips_through_disk(seed in any::<u64>(), domains in 1..4usize) {
        let d = generate_synthetic(&small_spec(seed, domains)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        prop_assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }
}

#[test]
fn identical_domains_have_negligible_shift() {
    for seed in 1..=5 {
        let d = generate_synthetic(&SyntheticSpec::reference(&[0.0, 0.0, 0.0, 0.0], seed)).unwrap();
        let feats: Vec<Vec<Vec<f64>>> = d
            .domains()
            .iter()
            .map(|x| x.instances.iter().map(|i| i.x.data().to_vec()).collect())
            .collect();
        let r = domain_shift(&feats[..3], &feats[3..]).unwrap();
        assert!(r.d_shift < 0.01, "seed {seed}: {}", r.d_shift);
    }
}

#[test]
fn larger_rotations_shift_more() {
    for seed in 1..=5 {
        let mut prev = f64::NEG_INFINITY;
        for angle in [0.0, 15.0, 30.0, 60.0, 90.0] {
            let d = generate_synthetic(&SyntheticSpec::reference(&[0.0, angle], seed)).unwrap();
            let feats: Vec<Vec<Vec<f64>>> = d
                .domains()
                .iter()
                .map(|x| x.instances.iter().map(|i| i.x.data().to_vec()).collect())
                .collect();
            let s = domain_shift(&feats[..1], &feats[1..]).unwrap().d_shift;
            assert!(s >= prev, "seed {seed} angle {angle}: {s} < {prev}");
            prev = s;
        }
    }
}
