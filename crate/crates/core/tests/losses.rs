mod common;

use flowdepth::flow::BinaryMask;
use flowdepth::geometry::Pixel;
use flowdepth::losses::{FlowModel, LossBreakdown, LossContext, LossSettings, LossWeights, Objective, Term};
use flowdepth::parallel::Execution;
use flowdepth::trainer::{Mode, TrainConfig, TrainState};
use flowdepth::Error;
use nalgebra::Vector3;

use common::*;

fn config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        net: small_net(),
        ..Default::default()
    }
}

fn unnormalized() -> LossSettings {
    LossSettings {
        normalize: false,
        ..Default::default()
    }
}

fn ctx<'a>(seq: &'a flowdepth::sequence::Sequence, st: &'a TrainState) -> LossContext<'a> {
    let model = match &st.net {
        Some(n) => FlowModel::Network(n),
        None => FlowModel::Analytic,
    };
    LossContext::new(seq, &st.depths, model)
}

/// Direct per-pixel 2D and disparity residuals of a forward pair.
fn pair_oracle(seq: &flowdepth::sequence::Sequence, st: &TrainState, i: usize, j: usize) -> (f64, f64, usize) {
    let net = st.net.as_ref().unwrap();
    let flow = seq.flow(i, j).unwrap();
    let mask = seq.mask(i, j).unwrap();
    let (mut l2d, mut ldisp, mut n) = (0.0, 0.0, 0);
    for y in 0..seq.height() {
        for x in 0..seq.width() {
            let p = flow.corresponding(x, y);
            if mask.is_occluded(x, y) || !seq.frames[j].contains(p) {
                continue;
            }
            let d = st.depths.depth_at_pixel(&st.store, i, x, y);
            let xi = seq.frames[i].unproject(Pixel::new(x as f64, y as f64), d).unwrap();
            let s = net.unroll(&st.store, [xi.x, xi.y, xi.z], i, j).unwrap();
            let moved = xi + Vector3::from(s);
            let q = seq.frames[j].project(&moved).unwrap();
            let z = seq.frames[j].to_camera(&moved).z;
            let dj = st.depths.depth_at(&st.store, j, p).unwrap();
            l2d += (q.u - p.u).abs() + (q.v - p.v).abs();
            ldisp += (1.0 / z - 1.0 / dj).abs();
            n += 1;
        }
    }
    (l2d, ldisp, n)
}

#[test]
fn weighted_total_is_exact() {
    let w = LossWeights::default();
    assert_eq!(LossBreakdown::compose(1.0, 2.0, 3.0, 5.0, &w), 4.2);
    assert_eq!(LossBreakdown::compose(0.0, 0.0, 0.0, 0.0, &w), 0.0);
}

#[test]
fn pair_terms_match_direct_oracle() {
    let (_, seq) = tiny_scene(5, 12);
    let mut st = state(&seq, &config(Mode::Full));
    randomize_net(&mut st, 3, 0.3);
    for (i, j) in [(0, 1), (1, 3), (0, 4)] {
        let b = ctx(&seq, &st)
            .evaluate(&st.store, &Objective::pairs_only(vec![(i, j)]), &unnormalized())
            .unwrap();
        let (l2d, ldisp, n) = pair_oracle(&seq, &st, i, j);
        assert_eq!(b.count_2d, n);
        assert!((b.l2d - l2d).abs() < 1e-9 * l2d.max(1.0), "{} vs {l2d}", b.l2d);
        assert!((b.ldisp - ldisp).abs() < 1e-9 * ldisp.max(1.0));
    }
}

#[test]
fn recomposition_matches_independent_terms_exactly() {
    let (_, seq) = tiny_scene(5, 12);
    let st = state(&seq, &config(Mode::Full));
    let s = LossSettings::default();
    let c = ctx(&seq, &st);
    let obj = Objective::full(&seq);
    let b = c.evaluate(&st.store, &obj, &s).unwrap();
    let w = s.weights;
    assert_eq!(b.total, b.l2d + w.alpha * b.ldisp + w.beta * b.lprior + w.gamma * b.lstatic);
    let again = c.evaluate(&st.store, &obj, &s).unwrap();
    assert_eq!(b, again);
}

#[test]
fn masking_a_pixel_removes_exactly_its_contribution() {
    let (_, mut seq) = tiny_scene(4, 12);
    let mut st = state(&seq, &config(Mode::Full));
    randomize_net(&mut st, 9, 0.2);
    let pair = (0, 2);
    let obj = Objective::pairs_only(vec![pair]);
    let before = ctx(&seq, &st).evaluate(&st.store, &obj, &unnormalized()).unwrap();
    let (x, y) = (5, 6);
    assert!(!seq.mask(0, 2).unwrap().is_occluded(x, y));
    // the single-pixel contribution, by the direct oracle
    let p = seq.flow(0, 2).unwrap().corresponding(x, y);
    let net = st.net.as_ref().unwrap();
    let d = st.depths.depth_at_pixel(&st.store, 0, x, y);
    let xi = seq.frames[0].unproject(Pixel::new(x as f64, y as f64), d).unwrap();
    let moved = xi + Vector3::from(net.unroll(&st.store, [xi.x, xi.y, xi.z], 0, 2).unwrap());
    let q = seq.frames[2].project(&moved).unwrap();
    let own = (q.u - p.u).abs() + (q.v - p.v).abs();

    seq.occlusion.get_mut(&pair).unwrap().mask.set(x, y, true);
    let after = ctx(&seq, &st).evaluate(&st.store, &obj, &unnormalized()).unwrap();
    assert_eq!(after.count_2d + 1, before.count_2d);
    assert!((before.l2d - after.l2d - own).abs() < 1e-9);
}

#[test]
fn analytic_flow_satisfies_pair_terms() {
    let (_, seq) = tiny_scene(6, 16);
    let st = state(&seq, &config(Mode::AnalyticBaseline));
    let c = ctx(&seq, &st);
    let b = c
        .evaluate(&st.store, &Objective::pairs_only(seq.pairs()), &LossSettings::default())
        .unwrap();
    assert!(b.count_2d > 0);
    assert!(b.l2d < 1e-9, "{}", b.l2d);
    assert!(b.ldisp < 1e-9, "{}", b.ldisp);
}

#[test]
fn zero_network_on_ground_truth_static_scene_is_free() {
    let spec = flowdepth::synthetic::CubeSceneSpec {
        cube: false,
        depth_noise: 0.0,
        ..tiny_spec(5, 12)
    };
    let scene = flowdepth::synthetic::CubeScene::generate(&spec).unwrap();
    let seq = scene.to_sequence(Execution::default()).unwrap();
    let st = state(&seq, &config(Mode::StaticMask));
    let s = LossSettings {
        weights: LossWeights::new(0.1, 1.0, 100.0).unwrap(),
        ..Default::default()
    };
    let b = ctx(&seq, &st).evaluate(&st.store, &Objective::full(&seq), &s).unwrap();
    assert!(b.total < 1e-9, "{b:?}");
    assert!(b.count_static > 0);
}

#[test]
fn static_term_counts_static_pixels() {
    let (_, mut seq) = tiny_scene(4, 8);
    let mut st = state(&seq, &config(Mode::StaticMask));
    // output layer: zero weights, bias (1, 0, 0)
    let last = st.net.as_ref().unwrap().config.hidden_layers;
    let wb = block_by_name(&st.store, &format!("sceneflow.w{last}"));
    let bb = block_by_name(&st.store, &format!("sceneflow.b{last}"));
    st.store.block_mut(wb).fill(0.0);
    st.store.block_mut(bb).copy_from_slice(&[1.0, 0.0, 0.0]);
    let mut mask = BinaryMask::filled(8, 8, false);
    for k in 0..10 {
        mask.set(k % 8, k / 8, true);
    }
    for m in seq.motion_masks.as_mut().unwrap() {
        m.mask = mask.clone();
    }
    let c = ctx(&seq, &st);
    assert_eq!(c.loss_static(&st.store, 1, &unnormalized()).unwrap(), 10.0);
    for m in seq.motion_masks.as_mut().unwrap() {
        m.mask = BinaryMask::filled(8, 8, false);
    }
    let c = ctx(&seq, &st);
    assert_eq!(c.loss_static(&st.store, 1, &unnormalized()).unwrap(), 0.0);
}

#[test]
fn static_term_without_masks_is_a_configuration_error() {
    let (_, mut seq) = tiny_scene(4, 8);
    seq.motion_masks = None;
    let st = state(&seq, &config(Mode::Full));
    let s = LossSettings {
        weights: LossWeights::new(0.1, 1.0, 100.0).unwrap(),
        ..Default::default()
    };
    let obj = Objective::for_step((0, 1), true, true);
    assert!(matches!(ctx(&seq, &st).evaluate(&st.store, &obj, &s), Err(Error::Config(_))));
}

#[test]
fn prior_matches_direct_oracle_and_skips_last_frames() {
    let (_, seq) = tiny_scene(5, 10);
    let mut st = state(&seq, &config(Mode::Full));
    randomize_net(&mut st, 21, 0.3);
    let net = st.net.as_ref().unwrap();
    let c = ctx(&seq, &st);
    let got = c.loss_prior(&st.store, 1, &unnormalized()).unwrap();
    let mut want = 0.0;
    for y in 0..10 {
        for x in 0..10 {
            let d = st.depths.depth_at_pixel(&st.store, 1, x, y);
            let p = seq.frames[1].unproject(Pixel::new(x as f64, y as f64), d).unwrap();
            let s1 = net.scene_flow_step(&st.store, [p.x, p.y, p.z], 1).unwrap();
            let s2 = net
                .scene_flow_step(&st.store, [p.x + s1[0], p.y + s1[1], p.z + s1[2]], 2)
                .unwrap();
            want += (0..3).map(|a| (s1[a] - s2[a]).abs()).sum::<f64>();
        }
    }
    assert!((got - want).abs() < 1e-9 * want.max(1.0));
    assert_eq!(c.loss_prior(&st.store, 3, &unnormalized()).unwrap(), 0.0);
}

#[test]
fn execution_modes_agree_bitwise() {
    let (_, seq) = tiny_scene(5, 12);
    let mut st = state(&seq, &config(Mode::Full));
    randomize_net(&mut st, 5, 0.2);
    let obj = Objective::for_step((4, 0), true, false);
    let run = |exec| {
        let s = LossSettings {
            exec,
            rows_per_chunk: 3,
            ..Default::default()
        };
        ctx(&seq, &st).evaluate_with_grad(&st.store, &obj, &s).unwrap()
    };
    let (a, ga) = run(Execution::Sequential);
    let (b, gb) = run(Execution::Parallel);
    assert_eq!(a, b);
    for ((_, x), (_, y)) in ga.iter().zip(gb.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn term_gradient_seeds_only_that_term() {
    let (_, seq) = tiny_scene(4, 8);
    let mut st = state(&seq, &config(Mode::Full));
    randomize_net(&mut st, 8, 0.2);
    let obj = Objective::for_step((0, 1), true, false);
    let s = LossSettings::default();
    let c = ctx(&seq, &st);
    let (v, _) = c.term_with_grad(&st.store, &obj, &s, Term::Prior).unwrap();
    assert_eq!(v, c.evaluate(&st.store, &obj, &s).unwrap().lprior);
}
