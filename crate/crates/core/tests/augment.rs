use gatevit::augment::*;
use gatevit::{RngState, Tensor};
use proptest::prelude::*;

fn strategy() -> impl Strategy<Value = GroupStrategy> {
    prop_oneof![
        Just(GroupStrategy::Sample),
        Just(GroupStrategy::Batch),
        Just(GroupStrategy::Recursive),
        Just(GroupStrategy::Random),
        (1usize..40).prop_map(GroupStrategy::Avg),
    ]
}

/// Logits whose entries are small dyadic rationals, so group means are
/// exact and equality can be tested bit for bit.
fn logits(b: usize, seed: u64) -> Tensor<f64> {
    let mut rng = RngState::new(seed);
    Tensor::from_fn(&[b, 4], |_| (rng.below(17) as f64 - 8.0) / 4.0)
}

fn column_means(t: &Tensor<f64>) -> Vec<f64> {
    let b = t.shape()[0];
    (0..4).map(|j| (0..b).map(|i| t.data()[i * 4 + j]).sum::<f64>() / b as f64).collect()
}

proptest! {
    #[test]
    fn plans_partition_the_batch(b in 1usize..200, s in strategy(), seed in any::<u64>()) {
        let plan = build_plan(b, s, &mut RngState::new(seed)).unwrap();
        let mut seen = plan.permutation.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..b).collect::<Vec<_>>());
        prop_assert_eq!(plan.group_sizes.iter().sum::<usize>(), b);
        prop_assert!(plan.group_sizes.iter().all(|&g| g >= 1));
    }

    #[test]
    fn apply_is_idempotent(b in 1usize..70, s in strategy(), seed in any::<u64>()) {
        let plan = build_plan(b, s, &mut RngState::new(seed)).unwrap();
        let mut rng = RngState::new(seed ^ 1);
        let x = Tensor::<f64>::from_fn(&[b, 4], |_| rng.normal());
        let once = apply_plan_tensor(&x, &plan).unwrap();
        let twice = apply_plan_tensor(&once, &plan).unwrap();
        prop_assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn apply_preserves_the_batch_mean(b in 1usize..70, s in strategy(), seed in any::<u64>()) {
        // Power-of-two group sizes keep every mean exact.
        let b2 = b.next_power_of_two();
        let plan = build_plan(b2, s, &mut RngState::new(seed)).unwrap();
        let x = logits(b2, seed);
        let y = apply_plan_tensor(&x, &plan).unwrap();
        let all_pow2 = plan.group_sizes.iter().all(|g| g.is_power_of_two());
        for (a, c) in column_means(&x).iter().zip(column_means(&y)) {
            if all_pow2 {
                prop_assert_eq!(*a, c);
            } else {
                prop_assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_is_identity_and_batch_is_column_mean(b in 1usize..70, seed in any::<u64>()) {
        let x = logits(b, seed);
        let mut rng = RngState::new(seed);
        let s = apply_plan_tensor(&x, &build_plan(b, GroupStrategy::Sample, &mut rng).unwrap()).unwrap();
        prop_assert_eq!(s.data(), x.data());
        let y = apply_plan_tensor(&x, &build_plan(b, GroupStrategy::Batch, &mut rng).unwrap()).unwrap();
        let m = column_means(&x);
        for r in 0..b {
            for j in 0..4 {
                prop_assert!((y.data()[r * 4 + j] - m[j]).abs() < 1e-12);
            }
        }
        for r in 1..b {
            prop_assert_eq!(&y.data()[r * 4..r * 4 + 4], &y.data()[..4]);
        }
    }
}

#[test]
fn recursive_split_examples() {
    assert_eq!(recursive_log2_split(1).unwrap(), vec![1]);
    assert_eq!(recursive_log2_split(8).unwrap(), vec![4, 2, 1, 1]);
    assert_eq!(recursive_log2_split(6).unwrap(), vec![3, 2, 1]);
    assert_eq!(recursive_log2_split(64).unwrap(), vec![32, 16, 8, 4, 2, 1, 1]);
    assert!(recursive_log2_split(0).is_err());
    for b in 1..300 {
        let s = recursive_log2_split(b).unwrap();
        assert_eq!(s.iter().sum::<usize>(), b, "{b}");
        assert_eq!(*s.last().unwrap(), 1);
    }
}

#[test]
fn plan_examples() {
    let mut rng = RngState::new(0);
    let p = build_plan(32, GroupStrategy::Batch, &mut rng).unwrap();
    assert_eq!(p.group_sizes, vec![32]);
    assert_eq!(p.permutation, (0..32).collect::<Vec<_>>());
    assert_eq!(build_plan(3, GroupStrategy::Sample, &mut rng).unwrap().group_sizes, vec![1, 1, 1]);
    assert_eq!(build_plan(20, GroupStrategy::Avg(8), &mut rng).unwrap().group_sizes, vec![8, 8, 4]);
    assert!(build_plan(0, GroupStrategy::Batch, &mut rng).is_err());
    let r = build_plan(500, GroupStrategy::Random, &mut rng).unwrap();
    assert!(r.group_sizes.iter().all(|&s| (1..=RANDOM_MAX_GROUP).contains(&s)));
}

#[test]
fn constant_groups_are_unchanged() {
    let plan = GroupPlan { permutation: vec![0, 1, 2, 3], group_sizes: vec![2, 2], strategy: GroupStrategy::Avg(2) };
    let a = [0.5, -1.0, 2.0, 3.0];
    let b = [1.0, 1.0, -4.0, 0.25];
    let x = Tensor::<f64>::from_f64(&[4, 4], &[a, a, b, b].concat()).unwrap();
    assert_eq!(apply_plan_tensor(&x, &plan).unwrap(), x);
}

#[test]
fn strategy_names_round_trip() {
    for s in ["sample", "batch", "recursive", "random", "avg-8", "avg-32"] {
        let g: GroupStrategy = s.parse().unwrap();
        assert_eq!(g.to_string(), s);
    }
    assert!("avg-0".parse::<GroupStrategy>().is_err());
    assert!("halves".parse::<GroupStrategy>().is_err());
}
