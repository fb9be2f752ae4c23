//! Two-phase optimization: scene-flow warm-up against frozen depth, then
//! joint refinement of depth and scene flow, one frame pair per step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, ParamStore};
use crate::depth::DepthModel;
use crate::error::{Error, Result};
use crate::losses::{FlowModel, LossBreakdown, LossContext, LossSettings, LossWeights, Objective};
use crate::parallel::Execution;
use crate::sceneflow::{EncodingConfig, NetConfig, SceneFlowNet};
use crate::sequence::Sequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    /// No network: scene flow is recomputed from the current depths.
    AnalyticBaseline,
    NoPrior,
    /// Adds the static-region penalty; needs motion masks.
    StaticMask,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "analytic_baseline" => Ok(Mode::AnalyticBaseline),
            "no_prior" => Ok(Mode::NoPrior),
            "static_mask" => Ok(Mode::StaticMask),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    /// Includes the warm-up epochs.
    pub total_epochs: usize,
    pub lr_depth: f64,
    pub lr_sceneflow: f64,
    pub weights: LossWeights,
    pub mode: Mode,
    pub seed: u64,
    pub normalize: bool,
    pub stride: usize,
    pub net: NetConfig,
    /// Abort when a step's loss exceeds this multiple of the epoch's first.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 5,
            total_epochs: 20,
            lr_depth: 1e-4,
            lr_sceneflow: 1e-3,
            weights: LossWeights::default(),
            mode: Mode::Full,
            seed: 0,
            normalize: true,
            stride: 1,
            net: NetConfig::default(),
            divergence_factor: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warm-up epochs ({}) exceed total epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        for (name, lr) in [("depth", self.lr_depth), ("scene flow", self.lr_sceneflow)] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} learning rate must be finite and non-negative")));
            }
        }
        LossWeights::new(self.weights.alpha, self.weights.beta, self.weights.gamma)?;
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence factor must exceed 1".into()));
        }
        Ok(())
    }

    /// Loss weights after applying the mode.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.mode {
            Mode::StaticMask => {}
            Mode::NoPrior => {
                w.beta = 0.0;
                w.gamma = 0.0;
            }
            Mode::Full | Mode::AnalyticBaseline => w.gamma = 0.0,
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub pair: (usize, usize),
    pub loss: LossBreakdown,
}

/// Parameters and progress of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub store: ParamStore,
    pub depths: DepthModel,
    pub net: Option<SceneFlowNet>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    /// Steps skipped because no pixel contributed or gradients were not finite.
    pub skipped_steps: usize,
    pub nonfinite_events: usize,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    /// Fresh parameters: depth from the sequence's initial maps and, unless
    /// the mode has no network, a scene-flow MLP whose encoding box is fit
    /// to the initial point cloud.
    pub fn init(seq: &Sequence, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let depths = DepthModel::init_from_maps(&mut store, &seq.init_depth)?;
        let net = if cfg.mode == Mode::AnalyticBaseline {
            None
        } else {
            let enc = fit_encoding(seq, cfg.net.bands)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Some(SceneFlowNet::init(&mut store, enc, cfg.net, &mut rng)?)
        };
        Ok(TrainState {
            store,
            depths,
            net,
            epoch: 0,
            step: 0,
            skipped_steps: 0,
            nonfinite_events: 0,
            history: Vec::new(),
        })
    }

    pub fn depth_checksum(&self) -> u64 {
        self.store.checksum(self.depths.blocks())
    }

    pub fn depth_maps(&self) -> Vec<crate::raster::Raster<f64>> {
        (0..self.depths.num_frames())
            .map(|f| self.depths.depth_map(&self.store, f))
            .collect()
    }
}

/// Encoding box around the unprojected initial depth of every frame.
pub fn fit_encoding(seq: &Sequence, bands: usize) -> Result<EncodingConfig> {
    let mut pts = Vec::with_capacity(seq.num_frames() * seq.width() * seq.height());
    for (f, d) in seq.frames.iter().zip(&seq.init_depth) {
        for y in 0..d.height() {
            for x in 0..d.width() {
                let p = f.unproject(crate::geometry::Pixel::new(x as f64, y as f64), d.get(x, y))?;
                pts.push([p.x, p.y, p.z]);
            }
        }
    }
    EncodingConfig::fit(bands, pts, seq.num_frames())
}

/// Smallest reference loss for the divergence check.
pub const DIVERGENCE_FLOOR: f64 = 1e-3;

pub struct Trainer<'a> {
    pub seq: &'a Sequence,
    pub config: TrainConfig,
    pub exec: Execution,
}

impl<'a> Trainer<'a> {
    pub fn new(seq: &'a Sequence, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.mode == Mode::StaticMask && seq.motion_masks.is_none() {
            return Err(Error::Config("static_mask mode needs motion masks".into()));
        }
        Ok(Trainer {
            seq,
            config,
            exec: Execution::default(),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    fn settings(&self, weights: LossWeights, train_depth: bool) -> LossSettings {
        LossSettings {
            weights,
            normalize: self.config.normalize,
            stride: self.config.stride,
            train_depth,
            exec: self.exec,
            ..Default::default()
        }
    }

    fn context<'s>(&'s self, state: &'s TrainState) -> LossContext<'s> {
        let model = match &state.net {
            Some(n) => FlowModel::Network(n),
            None => FlowModel::Analytic,
        };
        LossContext::new(self.seq, &state.depths, model)
    }

    /// Pair order of an epoch; depends only on the seed and epoch index.
    pub fn epoch_order(&self, epoch: usize) -> Vec<(usize, usize)> {
        let mut pairs = self.seq.pairs();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ ((epoch as u64 + 1) << 32));
        pairs.shuffle(&mut rng);
        pairs
    }

    /// Runs the remaining epochs. `on_epoch` sees the state after each one.
    pub fn run(
        &self,
        state: &mut TrainState,
        mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        while state.epoch < self.config.total_epochs {
            let warm = state.epoch < self.config.warmup_epochs && state.net.is_some();
            self.epoch(state, if warm { Phase::Warmup } else { Phase::Joint })?;
            on_epoch(state)?;
        }
        Ok(())
    }

    /// Warm-up epochs only: the network learns against frozen depth with
    /// the prior switched off.
    pub fn warmup(&self, state: &mut TrainState) -> Result<()> {
        while state.epoch < self.config.warmup_epochs && state.net.is_some() {
            self.epoch(state, Phase::Warmup)?;
        }
        Ok(())
    }

    /// One pass over the pair schedule.
    pub fn epoch(&self, state: &mut TrainState, phase: Phase) -> Result<()> {
        let mut weights = self.config.effective_weights();
        let train_depth = phase == Phase::Joint;
        if phase == Phase::Warmup {
            weights.beta = 0.0;
        }
        let settings = self.settings(weights, train_depth);
        let lr_depth = if train_depth { self.config.lr_depth } else { 0.0 };
        let lr_net = self.config.lr_sceneflow;
        let with_prior = weights.beta > 0.0;
        let with_static = weights.gamma > 0.0;
        let mut peak: Option<f64> = None;
        for pair in self.epoch_order(state.epoch) {
            let obj = Objective::for_step(pair, with_prior, with_static);
            let (loss, mut grads) = self.context(state).evaluate_with_grad(&state.store, &obj, &settings)?;
            state.step += 1;
            state.history.push(StepRecord {
                step: state.step,
                epoch: state.epoch,
                phase,
                pair,
                loss,
            });
            // largest loss of the epoch so far, floored so that a pair the
            // model already satisfies exactly does not set a zero reference
            let base = peak.map_or(f64::INFINITY, |s: f64| s.max(DIVERGENCE_FLOOR));
            peak = Some(peak.map_or(loss.total, |s| s.max(loss.total)));
            if !loss.total.is_finite() || loss.total > self.config.divergence_factor * base {
                return Err(Error::Divergence {
                    epoch: state.epoch,
                    step: state.step,
                    loss: loss.total,
                    limit: self.config.divergence_factor * base,
                });
            }
            if loss.dropped > 0 {
                state.nonfinite_events += loss.dropped;
            }
            let contributing = loss.count_2d + loss.count_prior + loss.count_static;
            if contributing == 0 {
                state.skipped_steps += 1;
                continue;
            }
            if !grads.all_finite() {
                if state.net.is_some() {
                    return Err(Error::Numeric(format!("non-finite gradient at step {}", state.step)));
                }
                state.nonfinite_events += 1;
                state.skipped_steps += 1;
                continue;
            }
            if !train_depth {
                let depths = &state.depths;
                grads.retain(|b| !depths.is_depth_block(b));
            }
            let depths = &state.depths;
            let lr_of = |b: usize| if depths.is_depth_block(b) { lr_depth } else { lr_net };
            state.store.adam_step_with(&grads, AdamConfig::default(), lr_of)?;
        }
        state.epoch += 1;
        Ok(())
    }

    /// Loss over the whole schedule with the run's weights.
    pub fn full_loss(&self, state: &TrainState, phase: Phase) -> Result<LossBreakdown> {
        let mut w = self.config.effective_weights();
        if phase == Phase::Warmup {
            w.beta = 0.0;
        }
        let mut obj = Objective::full(self.seq);
        if w.beta == 0.0 {
            obj.prior_frames.clear();
        }
        if w.gamma == 0.0 {
            obj.static_frames.clear();
        }
        self.context(state)
            .evaluate(&state.store, &obj, &self.settings(w, phase == Phase::Joint))
    }
}
