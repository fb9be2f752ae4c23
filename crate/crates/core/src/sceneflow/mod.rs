//! The scene-flow field: positional encoding, the coordinate MLP, its
//! recursive unrolling, and the analytic scene flow derived from depth and
//! optical flow.

mod analytic;
mod encoding;
mod net;

pub use analytic::{analytic_scene_flow, analytic_scene_flow_var};
pub use encoding::EncodingConfig;
pub use net::{MlpWeights, NetConfig, SceneFlowNet};

use std::sync::Arc;

use crate::autodiff::{Tape, Var3};

/// Taped unrolling of a batch of points from frame `i` to frame `j > i`.
///
/// Returns `(S_{i->j}, S_{i->i+1})` per point. The total displacement is the
/// running sum of the per-step outputs, and each step queries the network
/// at the point displaced by all previous steps.
pub fn unroll_var(
    weights: &Arc<MlpWeights>,
    tape: &mut Tape,
    points: &[Var3],
    i: usize,
    j: usize,
) -> (Vec<Var3>, Vec<Var3>) {
    assert!(j > i, "unroll needs i < j");
    let first = weights.step_var(tape, points, i);
    let mut total = first.clone();
    let mut pos: Vec<Var3> = points
        .iter()
        .zip(&first)
        .map(|(p, s)| tape.add3(*p, *s))
        .collect();
    for k in i + 1..j {
        let step = weights.step_var(tape, &pos, k);
        for b in 0..points.len() {
            total[b] = tape.add3(total[b], step[b]);
            if k + 1 < j {
                pos[b] = tape.add3(pos[b], step[b]);
            }
        }
    }
    (total, first)
}
