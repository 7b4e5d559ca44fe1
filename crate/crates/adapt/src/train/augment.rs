//! Training-time scene augmentation: global coordinate scaling and random
//! removal of non-target agents.

use rand::Rng;

use crate::scene::Scene;

/// Scale every coordinate (histories, futures, lanes) by a factor drawn
/// uniformly from `scale_range`, then drop each non-target agent with
/// probability `drop_prob`. Target agents are never dropped. Draws exactly
/// one scale sample plus one sample per non-target agent, in agent order.
pub fn augment_scene(
    scene: &Scene,
    rng: &mut impl Rng,
    scale_range: [f64; 2],
    drop_prob: f64,
) -> Scene {
    let [lo, hi] = scale_range;
    debug_assert!(lo > 0.0 && lo <= hi, "invalid scale range");
    let scale = if lo == hi { lo } else { rng.gen_range(lo..hi) };

    let mut out = scene.clone();
    for agent in &mut out.agents {
        for p in &mut agent.positions {
            p[0] *= scale;
            p[1] *= scale;
        }
    }
    for lane in &mut out.lanes {
        for p in &mut lane.points {
            p[0] *= scale;
            p[1] *= scale;
        }
    }
    for future in out.future.values_mut() {
        for p in future.iter_mut() {
            p[0] *= scale;
            p[1] *= scale;
        }
    }

    if drop_prob > 0.0 {
        let keep: Vec<bool> = out
            .agents
            .iter()
            .map(|a| a.is_target || rng.gen::<f64>() >= drop_prob)
            .collect();
        let mut it = keep.iter();
        out.agents.retain(|_| *it.next().unwrap());
        out.future.retain(|id, _| out.agents.iter().any(|a| &a.id == id));
    }
    out
}
