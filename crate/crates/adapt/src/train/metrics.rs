//! Displacement metrics over multi-modal predictions.
//!
//! For a budget of `k` modes, the candidates are the top-`k` by score
//! (descending, index-ascending on ties) and the evaluated mode is the
//! candidate whose endpoint is closest to the ground-truth endpoint. The
//! report carries the metrics at k=1 and at the model's full mode count,
//! averaged per agent.

use serde::Serialize;

use crate::scene::Point;

fn l2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Miss-rate displacement threshold in meters.
pub const MISS_THRESHOLD: f64 = 2.0;

/// Metrics for a single agent at a fixed mode budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentMetrics {
    pub ade: f64,
    pub fde: f64,
    pub miss: f64,
    pub brier_fde: f64,
}

/// Evaluate one agent: `trajectories` is `K × T` points, `scores` length `K`,
/// `gt` length `T`, and `k ≤ K` is the mode budget.
pub fn agent_metrics(
    trajectories: &[Vec<Point>],
    scores: &[f64],
    gt: &[Point],
    k: usize,
) -> AgentMetrics {
    let modes = trajectories.len();
    assert!(modes >= 1 && scores.len() == modes, "scores must match modes");
    assert!((1..=modes).contains(&k), "mode budget out of range");
    assert!(!gt.is_empty(), "ground truth must be non-empty");

    let mut order: Vec<usize> = (0..modes).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let gt_end = *gt.last().unwrap();
    let mut best = order[0];
    let mut best_d = f64::INFINITY;
    for &cand in order.iter().take(k) {
        let end = *trajectories[cand].last().unwrap();
        let d = l2(end, gt_end);
        if d < best_d {
            best_d = d;
            best = cand;
        }
    }

    let traj = &trajectories[best];
    assert_eq!(traj.len(), gt.len(), "prediction horizon must match gt");
    let ade = traj
        .iter()
        .zip(gt)
        .map(|(p, q)| l2(*p, *q))
        .sum::<f64>()
        / gt.len() as f64;
    let fde = l2(*traj.last().unwrap(), gt_end);
    let miss = if fde > MISS_THRESHOLD { 1.0 } else { 0.0 };
    let p = scores[best];
    let brier_fde = fde + (1.0 - p) * (1.0 - p);
    AgentMetrics {
        ade,
        fde,
        miss,
        brier_fde,
    }
}

/// Aggregated report: per-agent averages at k=1 and at the full mode count.
#[derive(Debug, Clone, Copy, Serialize, Default, PartialEq)]
pub struct MetricReport {
    pub n_agents: usize,
    pub k_full: usize,
    #[serde(rename = "mADE_1")]
    pub made_1: f64,
    #[serde(rename = "mFDE_1")]
    pub mfde_1: f64,
    #[serde(rename = "MR_1")]
    pub mr_1: f64,
    #[serde(rename = "brier_mFDE_1")]
    pub brier_mfde_1: f64,
    #[serde(rename = "mADE_k")]
    pub made_k: f64,
    #[serde(rename = "mFDE_k")]
    pub mfde_k: f64,
    #[serde(rename = "MR_k")]
    pub mr_k: f64,
    #[serde(rename = "brier_mFDE_k")]
    pub brier_mfde_k: f64,
}

/// Streaming accumulator: feed one (agent, gt) pair at a time.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    n: usize,
    k_full: usize,
    sums_1: [f64; 4],
    sums_k: [f64; 4],
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, trajectories: &[Vec<Point>], scores: &[f64], gt: &[Point]) {
        let k_full = trajectories.len();
        if self.n == 0 {
            self.k_full = k_full;
        }
        assert_eq!(self.k_full, k_full, "mode count must be consistent");
        let at_1 = agent_metrics(trajectories, scores, gt, 1);
        let at_k = agent_metrics(trajectories, scores, gt, k_full);
        for (sums, m) in [(&mut self.sums_1, at_1), (&mut self.sums_k, at_k)] {
            sums[0] += m.ade;
            sums[1] += m.fde;
            sums[2] += m.miss;
            sums[3] += m.brier_fde;
        }
        self.n += 1;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn report(&self) -> MetricReport {
        assert!(self.n > 0, "no agents accumulated");
        let n = self.n as f64;
        MetricReport {
            n_agents: self.n,
            k_full: self.k_full,
            made_1: self.sums_1[0] / n,
            mfde_1: self.sums_1[1] / n,
            mr_1: self.sums_1[2] / n,
            brier_mfde_1: self.sums_1[3] / n,
            made_k: self.sums_k[0] / n,
            mfde_k: self.sums_k[1] / n,
            mr_k: self.sums_k[2] / n,
            brier_mfde_k: self.sums_k[3] / n,
        }
    }
}
