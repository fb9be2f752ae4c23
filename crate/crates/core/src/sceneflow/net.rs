use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EncodingConfig;
use crate::autodiff::{CustomOp, Gradients, ParamStore, Tape, Var3};
use crate::error::{Error, Result};

/// Shape of the scene-flow MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Positional-encoding frequency bands per input scalar.
    pub bands: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            bands: 16,
            hidden_layers: 4,
            hidden_width: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    weight: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Coordinate MLP mapping an encoded `(X, t)` to the world-space
/// displacement of `X` from frame `t` to `t + 1`.
///
/// Parameters live in a [`ParamStore`] as blocks `sceneflow.wK` (stored
/// `fan_in x fan_out`, row-major) and `sceneflow.bK`. Hidden layers use a
/// rectifier; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlowNet {
    pub encoding: EncodingConfig,
    pub config: NetConfig,
    layers: Vec<Layer>,
}

fn layer_dims(encoding: &EncodingConfig, config: &NetConfig) -> Vec<(usize, usize)> {
    let mut dims = Vec::new();
    let mut fan_in = encoding.dim();
    for _ in 0..config.hidden_layers {
        dims.push((fan_in, config.hidden_width));
        fan_in = config.hidden_width;
    }
    dims.push((fan_in, 3));
    dims
}

impl SceneFlowNet {
    /// Registers freshly initialized parameters. Hidden layers draw weights
    /// and biases from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; the output
    /// layer starts at zero so the initial scene flow is exactly zero.
    pub fn init(
        store: &mut ParamStore,
        encoding: EncodingConfig,
        config: NetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if encoding.bands != config.bands {
            return Err(Error::Config(format!(
                "encoding has {} bands, network expects {}",
                encoding.bands, config.bands
            )));
        }
        let dims = layer_dims(&encoding, &config);
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, fan_out))| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    if l == last {
                        vec![0.0; n]
                    } else {
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                };
                let w = draw(fan_in * fan_out);
                let b = draw(fan_out);
                Layer {
                    weight: store.add_block(format!("sceneflow.w{l}"), w),
                    bias: store.add_block(format!("sceneflow.b{l}"), b),
                    fan_in,
                    fan_out,
                }
            })
            .collect();
        Ok(SceneFlowNet {
            encoding,
            config,
            layers,
        })
    }

    /// Re-attaches to parameter blocks already in `store`.
    pub fn from_store(store: &ParamStore, encoding: EncodingConfig, config: NetConfig) -> Result<Self> {
        let layers = layer_dims(&encoding, &config)
            .into_iter()
            .enumerate()
            .map(|(l, (fan_in, fan_out))| {
                let find = |name: String, len: usize| -> Result<usize> {
                    let id = store
                        .find(&name)
                        .ok_or_else(|| Error::Structural(format!("missing block {name}")))?;
                    if store.block(id).len() != len {
                        return Err(Error::Structural(format!("block {name} has the wrong size")));
                    }
                    Ok(id)
                };
                Ok(Layer {
                    weight: find(format!("sceneflow.w{l}"), fan_in * fan_out)?,
                    bias: find(format!("sceneflow.b{l}"), fan_out)?,
                    fan_in,
                    fan_out,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SceneFlowNet {
            encoding,
            config,
            layers,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    pub fn is_net_block(&self, block: usize) -> bool {
        self.layers.iter().any(|l| l.weight == block || l.bias == block)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.fan_in * l.fan_out + l.fan_out).sum()
    }

    pub fn num_frames(&self) -> usize {
        self.encoding.num_frames
    }

    /// Copies the current weights into dense matrices for batched use.
    pub fn snapshot(&self, store: &ParamStore) -> Arc<MlpWeights> {
        let weights = self
            .layers
            .iter()
            .map(|l| {
                Array2::from_shape_vec((l.fan_in, l.fan_out), store.block(l.weight).to_vec())
                    .expect("block size checked at construction")
            })
            .collect();
        let biases = self
            .layers
            .iter()
            .map(|l| Array1::from_vec(store.block(l.bias).to_vec()))
            .collect();
        Arc::new(MlpWeights {
            encoding: self.encoding.clone(),
            weights,
            biases,
            blocks: self.layers.iter().map(|l| (l.weight, l.bias)).collect(),
        })
    }

    fn check_time(&self, i: usize) -> Result<()> {
        if i + 1 >= self.num_frames() {
            return Err(Error::Domain(format!(
                "scene flow step from frame {i} needs i <= {}",
                self.num_frames() as isize - 2
            )));
        }
        Ok(())
    }

    /// `G(X, i)`: displacement of `X` from frame `i` to `i + 1`.
    pub fn scene_flow_step(&self, store: &ParamStore, x: [f64; 3], i: usize) -> Result<[f64; 3]> {
        self.check_time(i)?;
        Ok(self.snapshot(store).eval(&[x], i)[0])
    }

    /// `S_{i->j}(X)`: the network applied `j - i` times, each step starting
    /// from the displaced point of the previous one.
    pub fn unroll(&self, store: &ParamStore, x: [f64; 3], i: usize, j: usize) -> Result<[f64; 3]> {
        if j <= i {
            return Err(Error::Domain(format!("unroll needs i < j, got {i} -> {j}")));
        }
        self.check_time(j - 1)?;
        let w = self.snapshot(store);
        let mut pos = x;
        let mut total = [0.0; 3];
        for k in i..j {
            let s = w.eval(&[pos], k)[0];
            for a in 0..3 {
                total[a] = if k == i { s[a] } else { total[a] + s[a] };
                pos[a] += s[a];
            }
        }
        Ok(total)
    }
}

/// Dense copy of the MLP weights used for one optimization step.
#[derive(Debug)]
pub struct MlpWeights {
    encoding: EncodingConfig,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    blocks: Vec<(usize, usize)>,
}

struct Activations {
    features: Array2<f64>,
    // post-rectifier outputs of each hidden layer
    hidden: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl MlpWeights {
    fn forward(&self, points: &[[f64; 3]], time: usize) -> Activations {
        let dim = self.encoding.dim();
        let mut features = Array2::<f64>::zeros((points.len(), dim));
        for (row, p) in features.outer_iter_mut().zip(points) {
            let u = self.encoding.normalize(*p, time);
            self.encoding
                .encode_normalized(u, row.into_slice().expect("row-major features"));
        }
        let last = self.weights.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        for l in 0..last {
            let input = if l == 0 { &features } else { &hidden[l - 1] };
            let mut z = input.dot(&self.weights[l]);
            z += &self.biases[l];
            z.mapv_inplace(|v| v.max(0.0));
            hidden.push(z);
        }
        let input = if last == 0 { &features } else { &hidden[last - 1] };
        let mut output = input.dot(&self.weights[last]);
        output += &self.biases[last];
        Activations {
            features,
            hidden,
            output,
        }
    }

    /// Plain batched evaluation `G(X_b, time)`.
    pub fn eval(&self, points: &[[f64; 3]], time: usize) -> Vec<[f64; 3]> {
        let act = self.forward(points, time);
        act.output
            .outer_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect()
    }

    /// Records one batched query `G(X_b, time)` on the tape. Gradients flow
    /// to the points and, through [`Gradients`], to the network blocks.
    pub fn step_var(self: &Arc<Self>, tape: &mut Tape, points: &[Var3], time: usize) -> Vec<Var3> {
        let plain: Vec<[f64; 3]> = points.iter().map(|p| tape.value3(*p)).collect();
        let act = self.forward(&plain, time);
        let outputs: Vec<f64> = act.output.iter().copied().collect();
        let inputs: Vec<_> = points.iter().flat_map(|p| p.iter().copied()).collect();
        let op = MlpQuery {
            weights: Arc::clone(self),
            act,
        };
        let outs = tape.custom(inputs, &outputs, Box::new(op));
        outs.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }
}

struct MlpQuery {
    weights: Arc<MlpWeights>,
    act: Activations,
}

impl CustomOp for MlpQuery {
    fn backward(&self, out_adj: &[f64], in_adj: &mut [f64], grads: &mut Gradients) {
        let w = &self.weights;
        let n = self.act.output.nrows();
        let mut dz = Array2::from_shape_vec((n, 3), out_adj.to_vec()).expect("3 outputs per point");
        for l in (0..w.weights.len()).rev() {
            let input = if l == 0 {
                &self.act.features
            } else {
                &self.act.hidden[l - 1]
            };
            let (wb, bb) = w.blocks[l];
            let gw = input.t().dot(&dz);
            let dst = grads.block_mut(wb, gw.len());
            for (d, s) in dst.iter_mut().zip(gw.iter()) {
                *d += s;
            }
            let gb = dz.sum_axis(Axis(0));
            let dst = grads.block_mut(bb, gb.len());
            for (d, s) in dst.iter_mut().zip(gb.iter()) {
                *d += s;
            }
            let mut da = dz.dot(&w.weights[l].t());
            if l > 0 {
                ndarray::Zip::from(&mut da)
                    .and(&self.act.hidden[l - 1])
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            dz = da;
        }
        // dz now holds d loss / d features
        let bands = w.encoding.bands;
        let scale = w.encoding.axis_scale();
        for (b, (drow, frow)) in dz.outer_iter().zip(self.act.features.outer_iter()).enumerate() {
            for c in 0..3 {
                let mut du = 0.0;
                for k in 1..=bands {
                    let f = c * 2 * bands + 2 * (k - 1);
                    let wk = k as f64 * std::f64::consts::PI;
                    // d sin(wu) = w cos(wu), d cos(wu) = -w sin(wu)
                    du += drow[f] * wk * frow[f + 1] - drow[f + 1] * wk * frow[f];
                }
                in_adj[3 * b + c] += du * scale[c];
            }
        }
    }
}
