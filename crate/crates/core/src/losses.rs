//! Loss terms for joint depth and scene-flow optimization.
//!
//! For a frame pair `(i, j)` every unmasked pixel `x` of frame `i` is
//! unprojected with the current depth, displaced by the scene flow to time
//! `j`, and compared against the optical-flow correspondence `p = x + v(x)`:
//!
//! * 2D term: `|M_j(X_i(x) + S_ij(x)) - p|_1`
//! * disparity term: `|1 / D_ij(x) - 1 / D_j(p)|`
//! * prior term (per frame): `|S_{i,i+1}(x) - G(X_i(x) + S_{i,i+1}(x), i+1)|_1`
//! * static term (per frame, static pixels): `|S_{i,i+1}(x)|_1`
//!
//! Pairs running backward in time (`i > j`) swap roles: the point starts at
//! `p` in frame `j`, is unrolled forward to time `i`, and is compared with
//! `x` and `D_i(x)`.
//!
//! The scene flow comes either from the network or, for the baseline, from
//! two depth maps and the optical flow.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Tape, Var, Var3};
use crate::depth::DepthModel;
use crate::error::{Error, Result};
use crate::geometry::{CameraFrame, Pixel};
use crate::parallel::Execution;
use crate::sceneflow::{analytic_scene_flow_var, unroll_var, MlpWeights, SceneFlowNet};
use crate::sequence::Sequence;

/// Relative weights of the disparity, prior and static terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 1.0,
            gamma: 0.0,
        }
    }
}

impl LossWeights {
    /// Weight on the static term when motion masks are used.
    pub const STATIC_GAMMA: f64 = 100.0;

    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if [alpha, beta, gamma].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got ({alpha}, {beta}, {gamma})"
            )));
        }
        Ok(LossWeights { alpha, beta, gamma })
    }

    fn per_term(&self) -> [f64; 4] {
        [1.0, self.alpha, self.beta, self.gamma]
    }
}

/// Loss term selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    TwoD,
    Disp,
    Prior,
    Static,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::TwoD, Term::Disp, Term::Prior, Term::Static];

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-term values, their weighted total and contributing pixel counts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2d: f64,
    pub ldisp: f64,
    pub lprior: f64,
    pub lstatic: f64,
    pub total: f64,
    pub count_2d: usize,
    pub count_disp: usize,
    pub count_prior: usize,
    pub count_static: usize,
    /// Pixels dropped because their contribution was not finite.
    pub dropped: usize,
}

impl LossBreakdown {
    /// `l2d + alpha ldisp + beta lprior + gamma lstatic`, in that order.
    pub fn compose(l2d: f64, ldisp: f64, lprior: f64, lstatic: f64, w: &LossWeights) -> f64 {
        l2d + w.alpha * ldisp + w.beta * lprior + w.gamma * lstatic
    }

    pub fn term(&self, t: Term) -> f64 {
        match t {
            Term::TwoD => self.l2d,
            Term::Disp => self.ldisp,
            Term::Prior => self.lprior,
            Term::Static => self.lstatic,
        }
    }
}

/// Which pairs and frames contribute to an objective.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Objective {
    pub pairs: Vec<(usize, usize)>,
    pub prior_frames: Vec<usize>,
    pub static_frames: Vec<usize>,
}

impl Objective {
    /// Every schedule pair and every frame.
    pub fn full(seq: &Sequence) -> Self {
        let frames: Vec<usize> = (0..seq.num_frames()).collect();
        Objective {
            pairs: seq.pairs(),
            prior_frames: frames.clone(),
            static_frames: frames,
        }
    }

    pub fn pairs_only(pairs: Vec<(usize, usize)>) -> Self {
        Objective {
            pairs,
            ..Default::default()
        }
    }

    /// One optimization step: the pair's consistency terms plus the prior
    /// and static terms of its source frame.
    pub fn for_step(pair: (usize, usize), with_prior: bool, with_static: bool) -> Self {
        Objective {
            pairs: vec![pair],
            prior_frames: if with_prior { vec![pair.0] } else { vec![] },
            static_frames: if with_static { vec![pair.0] } else { vec![] },
        }
    }
}

/// Where scene flow comes from.
#[derive(Clone, Copy)]
pub enum FlowModel<'a> {
    Network(&'a SceneFlowNet),
    /// Derived from depth maps and optical flow; has no parameters.
    Analytic,
}

/// How an objective is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    /// Divide each term by its contributing-pixel count.
    pub normalize: bool,
    /// Evaluate every `stride`-th pixel in each direction.
    pub stride: usize,
    pub rows_per_chunk: usize,
    /// Depth values are parameters (otherwise constants).
    pub train_depth: bool,
    pub exec: Execution,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            weights: LossWeights::default(),
            normalize: true,
            stride: 1,
            rows_per_chunk: 8,
            train_depth: true,
            exec: Execution::default(),
        }
    }
}

/// Inputs shared by every loss evaluation.
#[derive(Clone, Copy)]
pub struct LossContext<'a> {
    pub seq: &'a Sequence,
    pub depths: &'a DepthModel,
    pub model: FlowModel<'a>,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    source: usize,
    target: Option<usize>,
    prior: bool,
    statics: bool,
}

struct Chunk {
    unit: Unit,
    rows: (usize, usize),
}

struct ChunkOut {
    tape: Option<Tape>,
    vars: [Option<Var>; 4],
    sums: [f64; 4],
    counts: [usize; 4],
    dropped: usize,
}

// Per-pixel contributions collected while building a chunk.
#[derive(Default)]
struct Terms {
    parts: [Vec<Var>; 4],
    dropped: usize,
}

impl Terms {
    fn push(&mut self, tape: &Tape, term: Term, v: Var) {
        if tape.value(v).is_finite() {
            self.parts[term.index()].push(v);
        } else {
            self.dropped += 1;
        }
    }
}

impl<'a> LossContext<'a> {
    pub fn new(seq: &'a Sequence, depths: &'a DepthModel, model: FlowModel<'a>) -> Self {
        LossContext { seq, depths, model }
    }

    /// Loss value without gradients.
    pub fn evaluate(&self, store: &ParamStore, obj: &Objective, s: &LossSettings) -> Result<LossBreakdown> {
        let (b, _) = self.run(store, obj, s, None)?;
        Ok(b)
    }

    /// Loss value and the gradient of its weighted total.
    pub fn evaluate_with_grad(
        &self,
        store: &ParamStore,
        obj: &Objective,
        s: &LossSettings,
    ) -> Result<(LossBreakdown, Gradients)> {
        let (b, g) = self.run(store, obj, s, Some(s.weights.per_term()))?;
        Ok((b, g.expect("gradients requested")))
    }

    /// Loss value and the gradient of a single (normalized, unweighted) term.
    pub fn term_with_grad(
        &self,
        store: &ParamStore,
        obj: &Objective,
        s: &LossSettings,
        term: Term,
    ) -> Result<(f64, Gradients)> {
        let mut seeds = [0.0; 4];
        seeds[term.index()] = 1.0;
        let (b, g) = self.run(store, obj, s, Some(seeds))?;
        Ok((b.term(term), g.expect("gradients requested")))
    }

    /// 2D consistency of one pair.
    pub fn loss_2d(&self, store: &ParamStore, pair: (usize, usize), s: &LossSettings) -> Result<f64> {
        self.require_pair(pair)?;
        Ok(self.evaluate(store, &Objective::pairs_only(vec![pair]), s)?.l2d)
    }

    /// Disparity consistency of one pair.
    pub fn loss_disp(&self, store: &ParamStore, pair: (usize, usize), s: &LossSettings) -> Result<f64> {
        self.require_pair(pair)?;
        Ok(self.evaluate(store, &Objective::pairs_only(vec![pair]), s)?.ldisp)
    }

    /// Constant-velocity prior of one frame; zero when out of range.
    pub fn loss_prior(&self, store: &ParamStore, frame: usize, s: &LossSettings) -> Result<f64> {
        let obj = Objective {
            prior_frames: vec![frame],
            ..Default::default()
        };
        Ok(self.evaluate(store, &obj, s)?.lprior)
    }

    /// Static-region velocity penalty of one frame.
    pub fn loss_static(&self, store: &ParamStore, frame: usize, s: &LossSettings) -> Result<f64> {
        if self.seq.motion_masks.is_none() {
            return Err(Error::Config("static loss needs motion masks".into()));
        }
        let obj = Objective {
            static_frames: vec![frame],
            ..Default::default()
        };
        Ok(self.evaluate(store, &obj, s)?.lstatic)
    }

    fn require_pair(&self, (i, j): (usize, usize)) -> Result<()> {
        self.seq.flow(i, j)?;
        self.seq.mask(i, j)?;
        Ok(())
    }

    fn units(&self, obj: &Objective, s: &LossSettings) -> Result<Vec<Unit>> {
        let t = self.seq.num_frames();
        for &pair in &obj.pairs {
            self.require_pair(pair)?;
        }
        let analytic = matches!(self.model, FlowModel::Analytic);
        let prior_ok = |f: usize| {
            f + 2 < t
                && (!analytic
                    || (self.seq.occlusion.contains_key(&(f, f + 1))
                        && self.seq.occlusion.contains_key(&(f + 1, f + 2))))
        };
        let static_ok = |f: usize| f + 1 < t && (!analytic || self.seq.occlusion.contains_key(&(f, f + 1)));
        let mut prior: BTreeSet<usize> = obj.prior_frames.iter().copied().filter(|&f| prior_ok(f)).collect();
        let mut statics: BTreeSet<usize> = obj.static_frames.iter().copied().filter(|&f| static_ok(f)).collect();
        if !statics.is_empty() && s.weights.gamma > 0.0 && self.seq.motion_masks.is_none() {
            return Err(Error::Config("static term requested without motion masks".into()));
        }
        if self.seq.motion_masks.is_none() {
            statics.clear();
        }
        let mut units = Vec::new();
        for &(i, j) in &obj.pairs {
            let merge = i < j && !analytic;
            units.push(Unit {
                source: i,
                target: Some(j),
                prior: merge && prior.remove(&i),
                statics: merge && statics.remove(&i),
            });
        }
        let rest: BTreeSet<usize> = prior.union(&statics).copied().collect();
        for f in rest {
            units.push(Unit {
                source: f,
                target: None,
                prior: prior.contains(&f),
                statics: statics.contains(&f),
            });
        }
        Ok(units)
    }

    fn run(
        &self,
        store: &ParamStore,
        obj: &Objective,
        s: &LossSettings,
        seeds: Option<[f64; 4]>,
    ) -> Result<(LossBreakdown, Option<Gradients>)> {
        if s.stride == 0 || s.rows_per_chunk == 0 {
            return Err(Error::Config("stride and chunk height must be positive".into()));
        }
        let units = self.units(obj, s)?;
        let h = self.seq.height();
        let mut chunks = Vec::new();
        for u in &units {
            let mut r = 0;
            while r < h {
                let end = (r + s.rows_per_chunk).min(h);
                chunks.push(Chunk { unit: *u, rows: (r, end) });
                r = end;
            }
        }
        let weights = match self.model {
            FlowModel::Network(net) => Some(net.snapshot(store)),
            FlowModel::Analytic => None,
        };
        let keep = seeds.is_some();
        let outs = s.exec.map(&chunks, |c| self.build_chunk(store, weights.as_ref(), c, s, keep));
        let mut outs = outs.into_iter().collect::<Result<Vec<_>>>()?;

        let mut sums = [0.0; 4];
        let mut counts = [0usize; 4];
        let mut dropped = 0;
        for o in &outs {
            for t in 0..4 {
                sums[t] += o.sums[t];
                counts[t] += o.counts[t];
            }
            dropped += o.dropped;
        }
        let scale = |t: usize| -> f64 {
            if !s.normalize {
                1.0
            } else if counts[t] > 0 {
                1.0 / counts[t] as f64
            } else {
                0.0
            }
        };
        let value = |t: usize| sums[t] * scale(t);
        let breakdown = LossBreakdown {
            l2d: value(0),
            ldisp: value(1),
            lprior: value(2),
            lstatic: value(3),
            total: LossBreakdown::compose(value(0), value(1), value(2), value(3), &s.weights),
            count_2d: counts[0],
            count_disp: counts[1],
            count_prior: counts[2],
            count_static: counts[3],
            dropped,
        };
        let Some(seeds) = seeds else {
            return Ok((breakdown, None));
        };
        let factors = [0, 1, 2, 3].map(|t| seeds[t] * scale(t));
        let mut results: Vec<Option<Result<Gradients>>> = (0..outs.len()).map(|_| None).collect();
        let mut paired: Vec<(&mut ChunkOut, &mut Option<Result<Gradients>>)> =
            outs.iter_mut().zip(results.iter_mut()).collect();
        s.exec.for_each_mut(&mut paired, |_, (o, slot)| {
            let tape = o.tape.as_mut().expect("tape kept for backward");
            let seeds: Vec<(Var, f64)> = (0..4)
                .filter_map(|t| o.vars[t].map(|v| (v, factors[t])))
                .filter(|&(_, f)| f != 0.0)
                .collect();
            **slot = Some(tape.backward_seeded(&seeds));
        });
        drop(paired);
        let mut grads = Gradients::empty(store.num_blocks());
        for r in results {
            grads.accumulate(&r.expect("every chunk ran")?, 1.0);
        }
        Ok((breakdown, Some(grads)))
    }

    fn build_chunk(
        &self,
        store: &ParamStore,
        weights: Option<&Arc<MlpWeights>>,
        chunk: &Chunk,
        s: &LossSettings,
        keep_tape: bool,
    ) -> Result<ChunkOut> {
        let w = self.seq.width();
        let rows = chunk.rows.1 - chunk.rows.0;
        let mut tape = Tape::with_capacity(rows * w * 64);
        let mut terms = Terms::default();
        let pixels: Vec<(usize, usize)> = (chunk.rows.0..chunk.rows.1)
            .filter(|y| y % s.stride == 0)
            .flat_map(|y| (0..w).step_by(s.stride).map(move |x| (x, y)))
            .collect();
        match weights {
            Some(wts) => self.network_chunk(&mut tape, &mut terms, store, wts, chunk.unit, &pixels, s)?,
            None => self.analytic_chunk(&mut tape, &mut terms, store, chunk.unit, &pixels, s)?,
        }
        let mut vars = [None; 4];
        let mut sums = [0.0; 4];
        let mut counts = [0; 4];
        for t in 0..4 {
            let parts = &terms.parts[t];
            counts[t] = parts.len();
            if !parts.is_empty() {
                let v = tape.sum(parts);
                sums[t] = tape.value(v);
                vars[t] = Some(v);
            }
        }
        tape.evaluate(store)?;
        Ok(ChunkOut {
            tape: keep_tape.then_some(tape),
            vars,
            sums,
            counts,
            dropped: terms.dropped,
        })
    }

    /// 2D and disparity residuals of a displaced point against the target
    /// pixel `p` and depth `target_depth` in `frame`.
    fn pair_residuals(
        tape: &mut Tape,
        terms: &mut Terms,
        frame: &CameraFrame,
        displaced: Var3,
        p: Pixel,
        target_depth: Var,
    ) {
        let Some(([u, v], z)) = frame.project_with_depth_var(tape, displaced) else {
            return;
        };
        let du = tape.offset(u, -p.u);
        let dv = tape.offset(v, -p.v);
        let au = tape.abs(du);
        let av = tape.abs(dv);
        let l2d = tape.add(au, av);
        let inv_reproj = tape.recip(z);
        let inv_target = tape.recip(target_depth);
        let diff = tape.sub(inv_reproj, inv_target);
        let ldisp = tape.abs(diff);
        if tape.value(l2d).is_finite() && tape.value(ldisp).is_finite() {
            terms.push(tape, Term::TwoD, l2d);
            terms.push(tape, Term::Disp, ldisp);
        } else {
            terms.dropped += 1;
        }
    }

    fn is_static(&self, frame: usize, x: usize, y: usize) -> bool {
        self.seq
            .motion_masks
            .as_ref()
            .is_some_and(|m| m[frame].is_static(x, y))
    }

    #[allow(clippy::too_many_arguments)]
    fn network_chunk(
        &self,
        tape: &mut Tape,
        terms: &mut Terms,
        store: &ParamStore,
        wts: &Arc<MlpWeights>,
        unit: Unit,
        pixels: &[(usize, usize)],
        s: &LossSettings,
    ) -> Result<()> {
        let src = unit.source;
        let frames = &self.seq.frames;
        match unit.target {
            Some(dst) if dst < src => {
                // role swap: start at p in the earlier frame, unroll forward
                let flow = self.seq.flow(src, dst)?;
                let mask = self.seq.mask(src, dst)?;
                let mut starts = Vec::new();
                let mut meta = Vec::new();
                for &(x, y) in pixels {
                    if mask.is_occluded(x, y) {
                        continue;
                    }
                    let p = flow.corresponding(x, y);
                    let Some(d) = self.depths.depth_var(tape, store, dst, p, s.train_depth) else {
                        continue;
                    };
                    starts.push(frames[dst].unproject_var(tape, p, d));
                    meta.push((x, y));
                }
                if starts.is_empty() {
                    return Ok(());
                }
                let (total, _) = unroll_var(wts, tape, &starts, dst, src);
                for ((start, sflow), &(x, y)) in starts.iter().zip(&total).zip(&meta) {
                    let displaced = tape.add3(*start, *sflow);
                    let px = Pixel::new(x as f64, y as f64);
                    let d_src = self
                        .depths
                        .depth_var(tape, store, src, px, s.train_depth)
                        .expect("integer pixel in bounds");
                    Self::pair_residuals(tape, terms, &frames[src], displaced, px, d_src);
                }
            }
            target => {
                let pair = match target {
                    Some(dst) => Some((dst, self.seq.flow(src, dst)?, self.seq.mask(src, dst)?)),
                    None => None,
                };
                let frame = &frames[src];
                let mut points = Vec::new();
                // (x, y, in_pair, p, is_static)
                let mut meta = Vec::new();
                for &(x, y) in pixels {
                    let (in_pair, p) = match &pair {
                        Some((_, flow, mask)) => {
                            let p = flow.corresponding(x, y);
                            (!mask.is_occluded(x, y) && frames[0].contains(p), p)
                        }
                        None => (false, Pixel::new(0.0, 0.0)),
                    };
                    let stat = unit.statics && self.is_static(src, x, y);
                    if !(in_pair || unit.prior || stat) {
                        continue;
                    }
                    let px = Pixel::new(x as f64, y as f64);
                    let d = self
                        .depths
                        .depth_var(tape, store, src, px, s.train_depth)
                        .expect("integer pixel in bounds");
                    points.push(frame.unproject_var(tape, px, d));
                    meta.push((in_pair, p, stat));
                }
                if points.is_empty() {
                    return Ok(());
                }
                let (total, first) = match &pair {
                    Some((dst, _, _)) => unroll_var(wts, tape, &points, src, *dst),
                    None => {
                        let first = wts.step_var(tape, &points, src);
                        (first.clone(), first)
                    }
                };
                if let Some((dst, _, _)) = &pair {
                    for (b, &(in_pair, p, _)) in meta.iter().enumerate() {
                        if !in_pair {
                            continue;
                        }
                        let displaced = tape.add3(points[b], total[b]);
                        let d_dst = self
                            .depths
                            .depth_var(tape, store, *dst, p, s.train_depth)
                            .expect("target checked in bounds");
                        Self::pair_residuals(tape, terms, &frames[*dst], displaced, p, d_dst);
                    }
                }
                if unit.prior {
                    let moved: Vec<Var3> = points
                        .iter()
                        .zip(&first)
                        .map(|(p, f)| tape.add3(*p, *f))
                        .collect();
                    let next = wts.step_var(tape, &moved, src + 1);
                    for (f, n) in first.iter().zip(&next) {
                        let d = tape.sub3(*f, *n);
                        let l = tape.l1_norm3(d);
                        terms.push(tape, Term::Prior, l);
                    }
                }
                if unit.statics {
                    for (b, &(_, _, stat)) in meta.iter().enumerate() {
                        if stat {
                            let l = tape.l1_norm3(first[b]);
                            terms.push(tape, Term::Static, l);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn analytic_chunk(
        &self,
        tape: &mut Tape,
        terms: &mut Terms,
        store: &ParamStore,
        unit: Unit,
        pixels: &[(usize, usize)],
        s: &LossSettings,
    ) -> Result<()> {
        let src = unit.source;
        let frames = &self.seq.frames;
        let train = s.train_depth;
        if let Some(dst) = unit.target {
            let flow = self.seq.flow(src, dst)?;
            let mask = self.seq.mask(src, dst)?;
            for &(x, y) in pixels {
                if mask.is_occluded(x, y) {
                    continue;
                }
                let px = Pixel::new(x as f64, y as f64);
                let p = flow.corresponding(x, y);
                if src < dst {
                    let Some((sflow, xi)) =
                        analytic_scene_flow_var(tape, self.depths, store, frames, src, px, dst, p, train)
                    else {
                        continue;
                    };
                    let displaced = tape.add3(xi, sflow);
                    let d_dst = self.depths.depth_var(tape, store, dst, p, train).expect("in bounds");
                    Self::pair_residuals(tape, terms, &frames[dst], displaced, p, d_dst);
                } else {
                    let Some((sflow, xj)) =
                        analytic_scene_flow_var(tape, self.depths, store, frames, dst, p, src, px, train)
                    else {
                        continue;
                    };
                    let displaced = tape.add3(xj, sflow);
                    let d_src = self.depths.depth_var(tape, store, src, px, train).expect("in bounds");
                    Self::pair_residuals(tape, terms, &frames[src], displaced, px, d_src);
                }
            }
        }
        if !(unit.prior || unit.statics) {
            return Ok(());
        }
        let f01 = self.seq.flow(src, src + 1)?;
        let m01 = self.seq.mask(src, src + 1)?;
        let chain = if unit.prior {
            Some((self.seq.flow(src + 1, src + 2)?, self.seq.mask(src + 1, src + 2)?))
        } else {
            None
        };
        for &(x, y) in pixels {
            if m01.is_occluded(x, y) {
                continue;
            }
            let px = Pixel::new(x as f64, y as f64);
            let x1 = f01.corresponding(x, y);
            let Some((s01, _)) = analytic_scene_flow_var(tape, self.depths, store, frames, src, px, src + 1, x1, train)
            else {
                continue;
            };
            if unit.statics && self.is_static(src, x, y) {
                let l = tape.l1_norm3(s01);
                terms.push(tape, Term::Static, l);
            }
            let Some((f12, m12)) = chain else { continue };
            if !frames[src + 1].contains(x1) {
                continue;
            }
            let (rx, ry) = (x1.u.round() as usize, x1.v.round() as usize);
            if m12.is_occluded(rx, ry) {
                continue;
            }
            let Ok(v12) = f12.vectors.sample(x1) else { continue };
            let x2 = Pixel::new(x1.u + v12[0], x1.v + v12[1]);
            let Some((s12, _)) =
                analytic_scene_flow_var(tape, self.depths, store, frames, src + 1, x1, src + 2, x2, train)
            else {
                continue;
            };
            let d = tape.sub3(s01, s12);
            let l = tape.l1_norm3(d);
            terms.push(tape, Term::Prior, l);
        }
        Ok(())
    }
}
