use nalgebra::Vector3;

use crate::autodiff::{ParamStore, Tape, Var3};
use crate::depth::DepthModel;
use crate::error::Result;
use crate::flow::FlowField;
use crate::geometry::{CameraFrame, Pixel};

/// `S^_{i->j}(x) = X_j(p_{i->j}(x)) - X_i(x)` from the current depth maps,
/// camera poses and optical flow. `x` is an integer pixel of frame `i`.
pub fn analytic_scene_flow(
    depths: &DepthModel,
    store: &ParamStore,
    frames: &[CameraFrame],
    flow: &FlowField,
    x: (usize, usize),
) -> Result<Vector3<f64>> {
    let (i, j) = (flow.source, flow.target);
    let px = Pixel::new(x.0 as f64, x.1 as f64);
    let p = flow.corresponding(x.0, x.1);
    let d_j = depths.depth_at(store, j, p)?;
    let d_i = depths.depth_at_pixel(store, i, x.0, x.1);
    let xi = frames[i].unproject(px, d_i)?;
    let xj = frames[j].unproject(p, d_j)?;
    Ok(xj - xi)
}

/// Taped analytic scene flow between pixel `x` of frame `i` and its
/// (possibly fractional) correspondence `p` in frame `j`. Also returns the
/// unprojected `X_i(x)`. `None` when `p` falls outside frame `j`.
#[allow(clippy::too_many_arguments)]
pub fn analytic_scene_flow_var(
    tape: &mut Tape,
    depths: &DepthModel,
    store: &ParamStore,
    frames: &[CameraFrame],
    i: usize,
    x: Pixel,
    j: usize,
    p: Pixel,
    trainable: bool,
) -> Option<(Var3, Var3)> {
    let d_i = depths.depth_var(tape, store, i, x, trainable)?;
    let d_j = depths.depth_var(tape, store, j, p, trainable)?;
    let xi = frames[i].unproject_var(tape, x, d_i);
    let xj = frames[j].unproject_var(tape, p, d_j);
    Some((tape.sub3(xj, xi), xi))
}
