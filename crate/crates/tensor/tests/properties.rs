//! Property-based invariants over randomized shapes and values.

mod common;

use adapt_tensor::{Graph, Tensor};
use common::{grad_check, GradCheck};
use proptest::prelude::*;

fn shape_strategy(max_rank: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=8, 1..=max_rank)
}

fn tensor_strategy(max_rank: usize) -> impl Strategy<Value = Tensor<f64>> {
    shape_strategy(max_rank).prop_flat_map(|shape| {
        let numel: usize = shape.iter().product();
        prop::collection::vec(-3.0f64..3.0, numel)
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(t in tensor_strategy(3), axis_pick in 0usize..3) {
        let axis = axis_pick % t.rank();
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t.clone());
        let y = g.softmax(x, axis).unwrap();
        let out = g.value(y);
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shape = out.shape();
        let extent = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..extent)
                    .map(|j| out.data()[o * extent * inner + j * inner + i])
                    .sum();
                prop_assert!((s - 1.0).abs() < 1e-6, "slice sum {s}");
            }
        }
    }

    #[test]
    fn smooth_chain_gradcheck_random_shapes(t in tensor_strategy(3)) {
        // softmax → layer_norm → weighted mean is smooth everywhere, so it is
        // safe to finite-difference at arbitrary sampled points.
        let n = *t.shape().last().unwrap();
        grad_check(&GradCheck::default(), &[t], &|g, ids| {
            let last_axis = g.shape(ids[0]).len() - 1;
            let sm = g.softmax(ids[0], last_axis).unwrap();
            let gain = g.constant(Tensor::filled(vec![n], 1.3));
            let bias = g.constant(Tensor::filled(vec![n], -0.2));
            let ln = g.layer_norm(sm, gain, bias).unwrap();
            g.mean(ln)
        });
    }

    #[test]
    fn add_commutes_and_mul_distributes(t in tensor_strategy(2)) {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t.clone());
        let y = g.constant(t.map_data(|v| v * 0.5 + 1.0));
        let xy = g.add(x, y).unwrap();
        let yx = g.add(y, x).unwrap();
        prop_assert_eq!(g.value(xy), g.value(yx));
        let two_x = g.scale(x, 2.0);
        let xx = g.add(x, x).unwrap();
        prop_assert_eq!(g.value(two_x), g.value(xx));
    }

    #[test]
    fn max_axis_bounds_the_slice(t in tensor_strategy(3), axis_pick in 0usize..3) {
        let axis = axis_pick % t.rank();
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t.clone());
        let m = g.max_axis(x, axis).unwrap();
        let mx = g.value(m).data().iter().cloned().fold(f64::MIN, f64::max);
        let overall = t.data().iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!((mx - overall).abs() < 1e-15);
    }

    #[test]
    fn reshape_preserves_data(t in tensor_strategy(2)) {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t.clone());
        let flat = g.reshape(x, vec![t.numel()]).unwrap();
        prop_assert_eq!(g.value(flat).data(), t.data());
    }

    #[test]
    fn detach_never_leaks_gradient(t in tensor_strategy(2)) {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t.clone());
        let w = g.leaf(t.map_data(|v| v + 0.25));
        let d = g.detach(x);
        let prod = g.mul(d, w).unwrap();
        let live = g.mul(x, w).unwrap();
        let both = g.add(prod, live).unwrap();
        let loss = g.sum(both);
        g.backward(loss).unwrap();
        // x's gradient must equal w exactly: only the live branch reaches it.
        let gx = g.grad(x).unwrap();
        let wv = g.value(w);
        prop_assert_eq!(gx.data(), wv.data());
    }
}
