use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Block {
    name: String,
    values: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Named flat parameter blocks with Adam moment accumulators.
///
/// Moments and step counts are tracked per block. A block that receives no
/// gradient in a step keeps its moments and step count untouched, which is
/// how a per-frame depth grid behaves when its frame is not in the sampled
/// pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    blocks: Vec<Block>,
    step: u64,
}

/// Hyperparameters of the Adam update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block and returns its id.
    pub fn add_block(&mut self, name: impl Into<String>, values: Vec<f64>) -> usize {
        let n = values.len();
        self.blocks.push(Block {
            name: name.into(),
            values,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        });
        self.blocks.len() - 1
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_lens(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.values.len()).collect()
    }

    pub fn block(&self, id: usize) -> &[f64] {
        &self.blocks[id].values
    }

    pub fn block_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.blocks[id].values
    }

    pub fn name(&self, id: usize) -> &str {
        &self.blocks[id].name
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    /// Number of optimizer steps taken on this store.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn block_steps(&self, id: usize) -> u64 {
        self.blocks[id].steps
    }

    /// First and second moment accumulators of a block.
    pub fn moments(&self, id: usize) -> (&[f64], &[f64]) {
        let b = &self.blocks[id];
        (&b.m, &b.v)
    }

    /// Restores optimizer state (checkpoint resume).
    pub fn set_moments(&mut self, id: usize, m: Vec<f64>, v: Vec<f64>, steps: u64) -> Result<()> {
        let b = &mut self.blocks[id];
        if m.len() != b.values.len() || v.len() != b.values.len() {
            return Err(Error::Structural(format!("moment length mismatch for block {}", b.name)));
        }
        b.m = m;
        b.v = v;
        b.steps = steps;
        Ok(())
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Order-sensitive FNV-1a hash over the bit patterns of a block range.
    pub fn checksum(&self, ids: impl IntoIterator<Item = usize>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in ids {
            for x in &self.blocks[id].values {
                for byte in x.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// One Adam step with a single learning rate for every block.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        self.adam_step_with(grads, AdamConfig::default(), |_| lr)
    }

    /// One Adam step with a per-block learning rate. Blocks without a
    /// gradient entry are skipped.
    pub fn adam_step_with(
        &mut self,
        grads: &Gradients,
        cfg: AdamConfig,
        lr_of: impl Fn(usize) -> f64,
    ) -> Result<()> {
        if grads.blocks.len() > self.blocks.len() {
            return Err(Error::Structural(format!(
                "gradient has {} blocks, store has {}",
                grads.blocks.len(),
                self.blocks.len()
            )));
        }
        for (id, g) in grads.blocks.iter().enumerate() {
            let Some(g) = g else { continue };
            let b = &self.blocks[id];
            if g.len() != b.values.len() {
                return Err(Error::Structural(format!(
                    "gradient for block {} has length {}, expected {}",
                    b.name,
                    g.len(),
                    b.values.len()
                )));
            }
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} at {}[{k}]",
                    g[k], b.name
                )));
            }
            let lr = lr_of(id);
            if !(lr >= 0.0) {
                return Err(Error::Config(format!("learning rate {lr} for block {}", b.name)));
            }
        }
        for (id, g) in grads.blocks.iter().enumerate() {
            let Some(g) = g else { continue };
            let lr = lr_of(id);
            let b = &mut self.blocks[id];
            b.steps += 1;
            let bc1 = 1.0 - cfg.beta1.powi(b.steps as i32);
            let bc2 = 1.0 - cfg.beta2.powi(b.steps as i32);
            for k in 0..g.len() {
                b.m[k] = cfg.beta1 * b.m[k] + (1.0 - cfg.beta1) * g[k];
                b.v[k] = cfg.beta2 * b.v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let m_hat = b.m[k] / bc1;
                let v_hat = b.v[k] / bc2;
                b.values[k] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Sparse per-block gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    blocks: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn empty(num_blocks: usize) -> Self {
        Gradients {
            blocks: vec![None; num_blocks],
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.blocks.get(id).and_then(|b| b.as_deref())
    }

    /// Gradient of block `id`, zero-filled when absent.
    pub fn dense(&self, id: usize, len: usize) -> Vec<f64> {
        self.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    /// Mutable access, allocating a zero block of `len` on first use.
    pub fn block_mut(&mut self, id: usize, len: usize) -> &mut [f64] {
        if id >= self.blocks.len() {
            self.blocks.resize(id + 1, None);
        }
        self.blocks[id].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn set(&mut self, id: usize, g: Vec<f64>) {
        if id >= self.blocks.len() {
            self.blocks.resize(id + 1, None);
        }
        self.blocks[id] = Some(g);
    }

    /// Drops every block whose id fails `keep`.
    pub fn retain(&mut self, keep: impl Fn(usize) -> bool) {
        for (id, b) in self.blocks.iter_mut().enumerate() {
            if !keep(id) {
                *b = None;
            }
        }
    }

    /// `self += scale * other`, in block then index order.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in other.blocks.iter().enumerate() {
            if let Some(g) = g {
                let dst = self.block_mut(id, g.len());
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += scale * s;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(id, g)| g.as_deref().map(|g| (id, g)))
    }
}
