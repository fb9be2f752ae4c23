#![allow(dead_code)]

use flowdepth::autodiff::ParamStore;
use flowdepth::losses::{LossContext, LossSettings, Objective, Term};
use flowdepth::parallel::Execution;
use flowdepth::sceneflow::NetConfig;
use flowdepth::sequence::Sequence;
use flowdepth::synthetic::{CubeScene, CubeSceneSpec};
use flowdepth::trainer::{TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_spec(frames: usize, size: usize) -> CubeSceneSpec {
    CubeSceneSpec {
        frames,
        width: size,
        height: size,
        focal: size as f64,
        cube_edge: 0.5,
        ..Default::default()
    }
}

pub fn tiny_scene(frames: usize, size: usize) -> (CubeScene, Sequence) {
    let scene = CubeScene::generate(&tiny_spec(frames, size)).unwrap();
    let seq = scene.to_sequence(Execution::default()).unwrap();
    (scene, seq)
}

pub fn small_net() -> NetConfig {
    NetConfig {
        bands: 2,
        hidden_layers: 2,
        hidden_width: 8,
    }
}

pub fn state(seq: &Sequence, config: &TrainConfig) -> TrainState {
    TrainState::init(seq, config).unwrap()
}

/// Overwrites every network block with values of magnitude `scale`.
pub fn randomize_net(state: &mut TrainState, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<usize> = state.net.as_ref().unwrap().blocks().collect();
    for b in blocks {
        for v in state.store.block_mut(b) {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

pub fn block_by_name(store: &ParamStore, name: &str) -> usize {
    store.find(name).unwrap_or_else(|| panic!("no block {name}"))
}

/// The first `n` frames of a cube scene, with masks and ground truth.
pub fn truncated(scene: &CubeScene, n: usize) -> Sequence {
    let flows = scene
        .flows
        .values()
        .filter(|f| f.source < n && f.target < n)
        .cloned()
        .collect();
    Sequence::new(
        scene.frames[..n].to_vec(),
        flows,
        scene.init_depth[..n].to_vec(),
        Execution::default(),
    )
    .unwrap()
    .with_motion_masks(scene.motion_masks[..n].to_vec())
    .unwrap()
    .with_gt_depth(scene.gt_depth[..n].to_vec())
    .unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    pub worst: (usize, usize),
    /// Reverse-mode and finite-difference values at `worst`.
    pub worst_values: (f64, f64),
}

/// Compares reverse-mode gradients of `term` (or the weighted total) with
/// central differences of step `h` over every parameter. Coordinates where
/// both estimates are at most `floor` in magnitude are not compared.
pub fn gradient_check(
    ctx: &LossContext,
    store: &ParamStore,
    obj: &Objective,
    s: &LossSettings,
    term: Option<Term>,
    h: f64,
    floor: f64,
) -> GradCheck {
    // the total is differenced term by term and recombined, which keeps the
    // roundoff of a large term out of coordinates it does not depend on
    let terms: Vec<(Term, f64)> = match term {
        Some(t) => vec![(t, 1.0)],
        None => Term::ALL
            .iter()
            .zip([1.0, s.weights.alpha, s.weights.beta, s.weights.gamma])
            .map(|(&t, w)| (t, w))
            .collect(),
    };
    let value = |st: &ParamStore| {
        let b = ctx.evaluate(st, obj, s).unwrap();
        terms.iter().map(|&(t, _)| b.term(t)).collect::<Vec<f64>>()
    };
    let grads = match term {
        Some(t) => ctx.term_with_grad(store, obj, s, t).unwrap().1,
        None => ctx.evaluate_with_grad(store, obj, s).unwrap().1,
    };
    let mut probe = store.clone();
    let mut out = GradCheck {
        max_rel: 0.0,
        checked: 0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
    };
    for b in 0..store.num_blocks() {
        let analytic = grads.dense(b, store.block(b).len());
        for k in 0..store.block(b).len() {
            let x = store.block(b)[k];
            probe.block_mut(b)[k] = x + h;
            let up = value(&probe);
            probe.block_mut(b)[k] = x - h;
            let down = value(&probe);
            probe.block_mut(b)[k] = x;
            let fd = terms
                .iter()
                .zip(up.iter().zip(&down))
                .map(|(&(_, w), (u, d))| w * ((u - d) / (2.0 * h)))
                .sum::<f64>();
            let g = analytic[k];
            let scale = g.abs().max(fd.abs());
            if scale <= floor {
                continue;
            }
            out.checked += 1;
            let rel = (g - fd).abs() / scale;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = (b, k);
                out.worst_values = (g, fd);
            }
        }
    }
    out
}
