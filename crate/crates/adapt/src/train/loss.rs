//! Variety-of-K mode selection and the combined training loss.
//!
//! Per target agent the loss supervises only the mode whose refined endpoint
//! is closest to the ground-truth endpoint: smooth-L1 on the refined endpoint
//! (summed over both coordinates), time-averaged smooth-L1 over the full
//! trajectory, and per-mode binary cross-entropy of the scores against a
//! one-hot vector at the selected mode. The scene loss averages over targets.

use adapt_tensor::{Real, Tensor, TensorId};

use crate::model::{BuiltForward, ModelError, Result};
use crate::scene::Point;

/// Tape handles for the scene loss and its components (all scalars).
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: TensorId,
    pub l_end: TensorId,
    pub l_traj: TensorId,
    pub l_cls: TensorId,
}

/// Component values, read off the tape for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossValues {
    pub total: f64,
    pub l_end: f64,
    pub l_traj: f64,
    pub l_cls: f64,
}

/// Index of the mode whose endpoint is closest (L2) to the ground-truth
/// endpoint; ties go to the lowest index.
pub fn variety_select(endpoints: &[Point], gt_end: Point) -> usize {
    assert!(!endpoints.is_empty(), "need at least one mode");
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, e) in endpoints.iter().enumerate() {
        let d = (e[0] - gt_end[0]).hypot(e[1] - gt_end[1]);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Run variety selection for every target of a built forward pass, in
/// group/target order. Requires every target to carry a ground-truth future.
pub fn select_modes<T: Real>(bf: &BuiltForward<T>) -> Result<Vec<usize>> {
    let mut selection = Vec::new();
    for group in &bf.groups {
        let k = group.out.k;
        let ends = bf.graph.value(group.out.endpoints).data();
        for target in &group.targets {
            let gt = target.gt_future.as_ref().ok_or_else(|| {
                ModelError::Config(format!(
                    "target {} has no ground-truth future",
                    target.agent_id
                ))
            })?;
            let gt_end = *gt.last().expect("validated futures are non-empty");
            let endpoints: Vec<Point> = (0..k)
                .map(|m| {
                    let row = (target.row * k + m) * 2;
                    [Real::to_f64(ends[row]), Real::to_f64(ends[row + 1])]
                })
                .collect();
            selection.push(variety_select(&endpoints, gt_end));
        }
    }
    Ok(selection)
}

/// Build the scene loss with variety selection recomputed from the current
/// endpoint values.
pub fn scene_loss<T: Real>(bf: &mut BuiltForward<T>) -> Result<(LossNodes, LossValues)> {
    let selection = select_modes(bf)?;
    scene_loss_with_selection(bf, &selection)
}

/// Build the scene loss holding a caller-provided mode selection fixed (one
/// entry per target, in group/target order). Finite-difference probes use
/// this to keep the piecewise structure constant across evaluations.
pub fn scene_loss_with_selection<T: Real>(
    bf: &mut BuiltForward<T>,
    selection: &[usize],
) -> Result<(LossNodes, LossValues)> {
    let n_targets: usize = bf.groups.iter().map(|g| g.targets.len()).sum();
    assert_eq!(selection.len(), n_targets, "one selected mode per target");
    let g = &mut bf.graph;
    let mut ends = Vec::with_capacity(n_targets);
    let mut trajs = Vec::with_capacity(n_targets);
    let mut clss = Vec::with_capacity(n_targets);
    let mut sel = selection.iter();
    for group in &bf.groups {
        let k = group.out.k;
        let t_f = group.out.t_future;
        for target in &group.targets {
            let k_star = *sel.next().expect("length checked above");
            assert!(k_star < k, "selected mode out of range");
            let gt = target.gt_future.as_ref().ok_or_else(|| {
                ModelError::Config(format!(
                    "target {} has no ground-truth future",
                    target.agent_id
                ))
            })?;
            let row = target.row * k + k_star;

            let pred_end = g.slice(group.out.endpoints, 0, row, 1)?;
            let gt_end = *gt.last().unwrap();
            let gt_end_t = g.constant(
                Tensor::new(vec![1, 2], vec![T::from_f64(gt_end[0]), T::from_f64(gt_end[1])])
                    .unwrap(),
            );
            let sl = g.smooth_l1(pred_end, gt_end_t)?;
            ends.push(g.sum(sl));

            let pred_traj = g.slice(group.out.trajectories, 0, row, 1)?;
            let gt_data: Vec<T> = gt
                .iter()
                .flat_map(|p| [T::from_f64(p[0]), T::from_f64(p[1])])
                .collect();
            let gt_traj = g.constant(Tensor::new(vec![1, t_f, 2], gt_data).unwrap());
            let sl = g.smooth_l1(pred_traj, gt_traj)?;
            let total = g.sum(sl);
            trajs.push(g.scale(total, T::from_f64(1.0 / t_f as f64)));

            let scores_row = g.slice(group.out.scores, 0, target.row, 1)?;
            let mut onehot = vec![T::zero(); k];
            onehot[k_star] = T::one();
            let target_t = g.constant(Tensor::new(vec![1, k], onehot).unwrap());
            let b = g.bce(scores_row, target_t)?;
            clss.push(g.mean(b));
        }
    }

    let mean_of = |g: &mut adapt_tensor::Graph<T>, parts: &[TensorId]| -> Result<TensorId> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p)?;
        }
        Ok(g.scale(acc, T::from_f64(1.0 / parts.len() as f64)))
    };
    let l_end = mean_of(g, &ends)?;
    let l_traj = mean_of(g, &trajs)?;
    let l_cls = mean_of(g, &clss)?;
    let partial = g.add(l_end, l_traj)?;
    let total = g.add(partial, l_cls)?;
    let values = LossValues {
        total: Real::to_f64(g.value(total).item()),
        l_end: Real::to_f64(g.value(l_end).item()),
        l_traj: Real::to_f64(g.value(l_traj).item()),
        l_cls: Real::to_f64(g.value(l_cls).item()),
    };
    Ok((
        LossNodes {
            total,
            l_end,
            l_traj,
            l_cls,
        },
        values,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_mode_selects_zero() {
        assert_eq!(variety_select(&[[5.0, 5.0]], [0.0, 0.0]), 0);
    }

    #[test]
    fn closest_endpoint_wins() {
        let ends = [[3.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        assert_eq!(variety_select(&ends, [0.0, 0.0]), 1);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let ends = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]];
        assert_eq!(variety_select(&ends, [0.0, 0.0]), 0);
    }
}
