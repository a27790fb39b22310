use mtlam::gradcheck::{self, Coordinates};
use mtlam::mtlam::{fuse, AddressingScore, MemoryBank, MemoryConfig};
use mtlam::params::ParamStore;
use mtlam::{Graph, Tensor};
use proptest::prelude::*;

fn bank(h: usize, n: usize, d: usize, alpha: f64) -> (MemoryBank, ParamStore) {
    let b = MemoryBank::new(2, d, MemoryConfig { heads: h, slots: n, alpha }).unwrap();
    let mut p = ParamStore::new();
    b.init_params(&mut p, 42).unwrap();
    (b, p)
}

fn run_recall(b: &MemoryBank, p: &ParamStore, a: Tensor) -> Tensor {
    let mut g = Graph::<f32>::new();
    let bound = p.bind(&mut g, false);
    let a = g.constant(a);
    let r = b.recall(&mut g, &bound, a).unwrap();
    g.value(r).clone()
}

fn run_aggregate(b: &MemoryBank, p: &ParamStore, r: Tensor) -> Tensor {
    let mut g = Graph::<f32>::new();
    let bound = p.bind(&mut g, false);
    let r = g.constant(r);
    let out = b.aggregate(&mut g, &bound, r).unwrap();
    g.value(out).clone()
}

#[test]
fn identical_keys_give_uniform_scores() {
    let (b, mut p) = bank(2, 5, 4, 8.0);
    let slot = Tensor::randn(vec![4], 3, 1.0).unwrap();
    let keys: Vec<f32> = (0..10).flat_map(|_| slot.data().to_vec()).collect();
    p.insert(b.keys_name(), Tensor::new(vec![2, 5, 4], keys).unwrap());
    let a = b.address_sequence(&p, &Tensor::randn(vec![6, 4], 9, 1.0).unwrap()).unwrap();
    assert!(a.tensor().data().iter().all(|&v| (v - 0.2).abs() < 1e-6));
}

#[test]
fn sharp_alpha_selects_matching_slot() {
    let d = 8;
    let (b, mut p) = bank(1, 8, d, 50.0);
    p.insert(b.query_name(), Tensor::identity(d).unwrap());
    p.insert(b.keys_name(), Tensor::identity(d).unwrap().reshape(vec![1, 8, d]).unwrap());
    let mut q = vec![0.0f32; d];
    q[3] = 2.5;
    let a = b.address_sequence(&p, &Tensor::new(vec![1, d], q).unwrap()).unwrap();
    // Closed form: e^50 / (e^50 + 7).
    let expected = 1.0 / (1.0 + 7.0 * (-50.0f64).exp());
    assert!((a.get(0, 0, 3) as f64 - expected).abs() < 1e-3);
    assert!(a.get(0, 0, 3) > 1.0 - 1e-3);
    assert_eq!(a.argmax(0, 0), 3);
}

#[test]
fn scaling_the_query_leaves_scores_unchanged() {
    let (b, p) = bank(4, 16, 8, 8.0);
    let x = Tensor::randn(vec![5, 8], 1, 1.0).unwrap();
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v *= 3.7);
    let a = b.address_sequence(&p, &x).unwrap();
    let c = b.address_sequence(&p, &y).unwrap();
    for (u, v) in a.tensor().data().iter().zip(c.tensor().data()) {
        assert!((u - v).abs() < 1e-6);
    }
}

#[test]
fn address_rejects_wrong_width() {
    let (b, p) = bank(2, 4, 8, 8.0);
    assert!(b.address_sequence(&p, &Tensor::zeros(vec![3, 7]).unwrap()).is_err());
}

#[test]
fn one_hot_recall_selects_value_slot() {
    let (b, p) = bank(2, 4, 3, 8.0);
    let mut a = vec![0.0f32; 2 * 4];
    a[2] = 1.0; // head 0 → slot 2
    a[4] = 1.0; // head 1 → slot 0
    let r = run_recall(&b, &p, Tensor::new(vec![1, 2, 4], a).unwrap());
    let values = p.get(&b.values_name()).unwrap();
    assert_eq!(&r.data()[0..3], values.row(2));
    assert_eq!(&r.data()[3..6], values.row(0));
}

#[test]
fn uniform_recall_is_slot_mean() {
    let (b, p) = bank(1, 4, 3, 8.0);
    let r = run_recall(&b, &p, Tensor::full(vec![1, 1, 4], 0.25f32).unwrap());
    let values = p.get(&b.values_name()).unwrap();
    for j in 0..3 {
        let mean: f64 = (0..4).map(|s| values.row(s)[j] as f64).sum::<f64>() / 4.0;
        assert!((r.data()[j] as f64 - mean).abs() < 1e-6);
    }
}

#[test]
fn recall_matches_naive_loop() {
    let (b, p) = bank(3, 6, 5, 8.0);
    let a = b
        .address_sequence(&p, &Tensor::randn(vec![7, 5], 17, 1.0).unwrap())
        .unwrap();
    let r = run_recall(&b, &p, a.tensor().clone());
    let values = p.get(&b.values_name()).unwrap();
    for t in 0..7 {
        for h in 0..3 {
            for j in 0..5 {
                let mut s = 0.0f64;
                for slot in 0..6 {
                    s += a.get(t, h, slot) as f64 * values.row(slot)[j] as f64;
                }
                assert!((r.data()[(t * 3 + h) * 5 + j] as f64 - s).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn aggregate_identity_and_zero() {
    let (b, mut p) = bank(1, 4, 3, 8.0);
    p.insert(b.aggregate_name(), Tensor::identity(3).unwrap());
    let r = Tensor::randn(vec![5, 1, 3], 2, 1.0).unwrap();
    let out = run_aggregate(&b, &p, r.clone());
    assert_eq!(out.shape(), [5, 3]);
    assert_eq!(out.data(), r.data());
    p.insert(b.aggregate_name(), Tensor::zeros(vec![3, 3]).unwrap());
    let out = run_aggregate(&b, &p, r);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn aggregate_concatenates_heads_in_order() {
    let (b, p) = bank(2, 4, 3, 8.0);
    let r = Tensor::randn(vec![4, 2, 3], 8, 1.0).unwrap();
    let out = run_aggregate(&b, &p, r.clone());
    let w = p.get(&b.aggregate_name()).unwrap();
    for t in 0..4 {
        for o in 0..3 {
            let mut s = 0.0f64;
            for i in 0..6 {
                s += r.data()[t * 6 + i] as f64 * w.data()[i * 3 + o] as f64;
            }
            assert!((out.data()[t * 3 + o] as f64 - s).abs() < 1e-5);
        }
    }
}

#[test]
fn fuse_examples() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::randn(vec![4, 3], 1, 1.0).unwrap());
    let b = g.constant(Tensor::randn(vec![4, 3], 2, 1.0).unwrap());
    let z = g.constant(Tensor::zeros(vec![4, 3]).unwrap());
    let az = fuse(&mut g, a, z).unwrap();
    assert_eq!(g.value(az), g.value(a));
    let ab = fuse(&mut g, a, b).unwrap();
    let ba = fuse(&mut g, b, a).unwrap();
    assert_eq!(g.value(ab), g.value(ba));
    for i in 0..12 {
        let expected = g.value(a).data()[i] + g.value(b).data()[i];
        assert!((g.value(ab).data()[i] - expected).abs() < 1e-7);
    }
    let c = g.constant(Tensor::zeros(vec![3, 4]).unwrap());
    assert!(fuse(&mut g, a, c).is_err());
}

#[test]
fn parameter_count_matches_shapes() {
    let (b, p) = bank(4, 32, 16, 8.0);
    assert_eq!(b.num_params(), p.num_scalars());
    assert_eq!(b.num_params(), 4 * 32 * 16 + 32 * 16 + 16 * 64 + 64 * 16);
}

#[test]
fn batched_read_equals_per_sequence_read() {
    let (b, p) = bank(2, 5, 4, 6.0);
    let x = Tensor::randn(vec![3, 6, 4], 5, 1.0).unwrap();
    let mut g = Graph::<f32>::new();
    let bound = p.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let (a, out) = b.read(&mut g, &bound, xv).unwrap();
    assert_eq!(g.shape(a), [3, 6, 2, 5]);
    assert_eq!(g.shape(out), [3, 6, 4]);
    for i in 0..3 {
        let xi = Tensor::new(vec![6, 4], x.row(i).to_vec()).unwrap();
        let ai = b.address_sequence(&p, &xi).unwrap();
        assert_eq!(ai.tensor().data(), g.value(a).row(i));
    }
}

#[test]
fn csv_has_one_row_per_score() {
    let (b, p) = bank(2, 3, 4, 8.0);
    let a = b.address_sequence(&p, &Tensor::randn(vec![5, 4], 1, 1.0).unwrap()).unwrap();
    let csv = a.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,head,slot,score");
    assert_eq!(lines.len(), 1 + 5 * 2 * 3);
    assert!(lines[1].starts_with("0,0,0,"));
    assert!(lines[4].starts_with("0,1,0,"));
    assert!(lines.last().unwrap().starts_with("4,1,2,"));
    // Scores are written in full so they read back exactly.
    for (line, t_head_slot) in lines[1..].iter().zip(0..) {
        let value: f32 = line.rsplit(',').next().unwrap().parse().unwrap();
        let (t, head, slot) = (t_head_slot / 6, (t_head_slot / 3) % 2, t_head_slot % 3);
        assert_eq!(value, a.get(t, head, slot));
    }
}

#[test]
fn composite_read_gradient() {
    let (b, p) = bank(2, 4, 3, 4.0);
    let names = [b.keys_name(), b.values_name(), b.query_name(), b.aggregate_name()];
    let mut inputs: Vec<Tensor<f64>> = vec![Tensor::randn(vec![5, 3], 77, 1.0).unwrap().cast()];
    inputs.extend(names.iter().map(|n| p.get(n).unwrap().cast()));
    let report = gradcheck::check(
        &inputs,
        |g, v| {
            let bound = bind_vars(&names, &v[1..]);
            let (_, out) = b.read(g, &bound, v[0])?;
            Ok(out)
        },
        1e-3,
        Coordinates::All,
        5,
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-2, "max rel error {}", report.max_rel_error());
}

fn bind_vars(names: &[String], vars: &[mtlam::Var]) -> mtlam::params::Bound {
    mtlam::params::Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_are_distributions(seed in 0u64..10_000, alpha in 0.1f64..100.0, scale in 0.01f32..100.0) {
        let (b, p) = bank(3, 7, 6, alpha);
        let x = Tensor::randn(vec![4, 6], seed, scale).unwrap();
        let a = b.address_sequence(&p, &x).unwrap();
        for row in a.tensor().data().chunks(7) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn argmax_is_scale_invariant(seed in 0u64..10_000, c in 0.001f32..1000.0) {
        let (b, p) = bank(3, 7, 6, 8.0);
        let x = Tensor::randn(vec![4, 6], seed, 1.0).unwrap();
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v *= c);
        let a = b.address_sequence(&p, &x).unwrap();
        let s = b.address_sequence(&p, &y).unwrap();
        for t in 0..4 {
            for h in 0..3 {
                prop_assert_eq!(a.argmax(t, h), s.argmax(t, h));
            }
        }
    }

    #[test]
    fn recall_stays_in_value_hull(seed in 0u64..10_000) {
        let (b, p) = bank(2, 6, 5, 8.0);
        let a = b.address_sequence(&p, &Tensor::randn(vec![3, 5], seed, 1.0).unwrap()).unwrap();
        let r = run_recall(&b, &p, a.tensor().clone());
        let values = p.get(&b.values_name()).unwrap();
        for row in r.data().chunks(5) {
            for j in 0..5 {
                let col = (0..6).map(|s| values.row(s)[j]);
                let lo = col.clone().fold(f32::INFINITY, f32::min);
                let hi = col.fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(row[j] >= lo - 1e-6 && row[j] <= hi + 1e-6);
            }
        }
    }
}

#[test]
fn score_tensor_validation_round_trip() {
    let t = Tensor::full(vec![2, 1, 4], 0.25f32).unwrap();
    assert!(AddressingScore::new(t).is_ok());
}
