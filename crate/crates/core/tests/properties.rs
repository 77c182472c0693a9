use proptest::prelude::*;

use mmot_core::dc::{mmotdc_objective, GradientMode};
use mmot_core::sinkhorn::{sinkhorn_mmot, SinkhornConfig};
use mmot_core::tensor::{
    dematricize, factored_projection, kl_divergence, marginalize, matricize, tensor_sum,
    DenseTensor, MarginalFamily, ProbabilityTensor, TuplePartition,
};

fn shape_strategy(max_rank: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, 1..=max_rank)
}

/// A shape together with positive entries of matching length.
fn tensor_strategy(max_rank: usize) -> impl Strategy<Value = DenseTensor> {
    shape_strategy(max_rank).prop_flat_map(|shape| {
        let len: usize = shape.iter().product();
        prop::collection::vec(0.01f64..1.0, len)
            .prop_map(move |data| DenseTensor::new(shape.clone(), data).unwrap())
    })
}

fn normalized(t: &DenseTensor) -> DenseTensor {
    let s = t.sum();
    t.map(|v| v / s).unwrap()
}

/// Sizes of a random contiguous partition of `n` axes.
fn sizes_for(n: usize, cuts: &[bool]) -> Vec<usize> {
    let mut sizes = vec![1];
    for a in 1..n {
        if cuts[a - 1] {
            sizes.push(1);
        } else {
            *sizes.last_mut().unwrap() += 1;
        }
    }
    sizes
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn marginalization_conserves_mass(t in tensor_strategy(4), a in 0usize..4, b in 1usize..=4) {
        let n = t.ndim();
        let start = a % n;
        let end = (start + b).min(n).max(start + 1);
        let m = marginalize(&t, start..end).unwrap();
        prop_assert!((m.sum() - t.sum()).abs() <= 1e-12 * t.sum());
        prop_assert_eq!(m.shape(), &t.shape()[start..end]);
    }

    #[test]
    fn matricization_round_trips(dims in prop::array::uniform4(1usize..=4), seed in any::<u64>()) {
        let len = dims.iter().product::<usize>();
        let data: Vec<f64> = (0..len).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0).collect();
        let t = DenseTensor::new(dims.to_vec(), data).unwrap();
        let back = dematricize(&matricize(&t).unwrap(), dims).unwrap();
        prop_assert!(back.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(back.shape(), t.shape());
    }

    #[test]
    fn tensor_sum_matches_loops(a in prop::collection::vec(-2.0f64..2.0, 1..5),
                                b in prop::collection::vec(-2.0f64..2.0, 1..5),
                                c in prop::collection::vec(-2.0f64..2.0, 1..5)) {
        let blocks = [a.clone(), b.clone(), c.clone()].map(|v| DenseTensor::vector(v).unwrap());
        let s = tensor_sum(&blocks, &[a.len(), b.len(), c.len()]).unwrap();
        for i in 0..a.len() {
            for j in 0..b.len() {
                for k in 0..c.len() {
                    prop_assert_eq!(s.get(&[i, j, k]), a[i] + b[j] + c[k]);
                }
            }
        }
    }

    #[test]
    fn factored_kl_is_nonnegative_and_vanishes_on_products(t in tensor_strategy(4),
                                                            cuts in prop::collection::vec(any::<bool>(), 3)) {
        let p = normalized(&t);
        let sizes = sizes_for(p.ndim(), &cuts);
        let partition = TuplePartition::from_sizes(&sizes).unwrap();
        let prob = ProbabilityTensor::new(p.clone()).unwrap();
        let q = factored_projection(&prob, &partition).unwrap();
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        // the projection is a fixed point: its own penalty is zero
        let q_prob = ProbabilityTensor::new(q.clone()).unwrap();
        let qq = factored_projection(&q_prob, &partition).unwrap();
        prop_assert!(kl_divergence(&q, &qq).unwrap().abs() <= 1e-12);
        let zero = DenseTensor::zeros(p.shape().to_vec());
        prop_assert!(mmotdc_objective(&zero, &q_prob, &partition, 1.0).unwrap().abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sinkhorn_plan_ignores_separable_cost_shifts(t in tensor_strategy(3),
                                                   shift_seed in 0u64..1000,
                                                   eps in prop::sample::select(vec![0.1, 0.5, 2.0])) {
        let shape = t.shape().to_vec();
        let shifts: Vec<DenseTensor> = shape
            .iter()
            .enumerate()
            .map(|(n, &a)| {
                DenseTensor::vector((0..a).map(|i| ((shift_seed + 31 * n as u64 + 7 * i as u64) % 13) as f64 / 4.0).collect())
                    .unwrap()
            })
            .collect();
        let shifted = tensor_sum(&shifts, &shape).unwrap();
        let c2 = DenseTensor::new(shape.clone(), t.data().iter().zip(shifted.data()).map(|(x, y)| x + y).collect()).unwrap();
        let mu = MarginalFamily::uniform(&shape).unwrap();
        let cfg = SinkhornConfig { epsilon: eps, tol: 1e-13, max_iters: 100_000, check_every: 1 };
        let a = sinkhorn_mmot(&t, &mu, &cfg, None).unwrap();
        let b = sinkhorn_mmot(&c2, &mu, &cfg, None).unwrap();
        prop_assert!(a.converged && b.converged);
        prop_assert!(a.plan.max_abs_diff(&b.plan).unwrap() <= 1e-10);
    }
}

#[test]
fn gradient_modes_parse_from_kebab_case() {
    let m: GradientMode = serde_json::from_str("\"full-tensor\"").unwrap();
    assert_eq!(m, GradientMode::FullTensor);
    let m: GradientMode = serde_json::from_str("\"v1-corrected\"").unwrap();
    assert_eq!(m, GradientMode::V1Corrected);
}
