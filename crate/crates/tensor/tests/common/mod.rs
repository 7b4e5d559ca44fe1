//! Shared helpers for the oracle tests: seeded tensors and a central
//! finite-difference gradient checker that is independent of the tape's own
//! backward rules.
#![allow(dead_code)] // each test binary uses a different subset

use adapt_tensor::{Graph, Tensor, TensorId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor_in(r, shape, -2.0, 2.0)
}

pub fn rand_tensor_in(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Absolute floor below which an analytic/numeric pair counts as equal,
    /// guarding the relative test against finite-difference noise at zero.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            tol: 1e-3,
            floor: 1e-8,
        }
    }
}

/// Check every element of every leaf gradient against central differences.
/// `build` must construct the same scalar loss from the given leaves on each
/// call (any internal randomness must be re-seeded identically).
pub fn grad_check(
    cfg: &GradCheck,
    leaves: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[TensorId]) -> TensorId,
) {
    let mut g: Graph<f64> = Graph::new();
    let ids: Vec<TensorId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(leaves)
        .map(|(&id, t)| {
            g.grad(id)
                .map(|t| t.into_data())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let ids: Vec<TensorId> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).item()
    };

    #[allow(clippy::needless_range_loop)] // perturbation is index-centric
    for li in 0..leaves.len() {
        for ei in 0..leaves[li].numel() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[ei] += cfg.eps;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[ei] -= cfg.eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * cfg.eps);
            let a = analytic[li][ei];
            let diff = (a - numeric).abs();
            if diff <= cfg.floor {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs());
            assert!(
                rel <= cfg.tol,
                "leaf {li} element {ei}: analytic {a} vs numeric {numeric} (rel {rel:.3e})"
            );
        }
    }
}
