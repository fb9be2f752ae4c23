//! Scalar reverse-mode tape.
//!
//! Values are computed eagerly as nodes are recorded, so the builder can
//! branch on them (visibility checks, raster cells). [`Tape::forward_eval`]
//! then validates the recorded graph against the parameter store and fixes
//! the output; only after that may [`Tape::backward`] run.

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Builds a handle from a raw node index. Only meaningful for the tape
    /// that issued the index; see [`Tape::push`].
    pub fn from_index(index: usize) -> Self {
        Var(index as u32)
    }
}

/// Primitive operations. Operands always refer to earlier nodes.
#[derive(Debug, Clone, Copy)]
pub enum Op {
    Const,
    /// Leaf reading `store[block][index]`.
    Param {
        block: u32,
        index: u32,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Recip(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    /// `a * c` for a constant `c`.
    Scale(Var, f64),
    /// `a + c` for a constant `c`.
    Offset(Var, f64),
    /// Output `slot` of custom node `id`.
    Custom {
        id: u32,
        slot: u32,
    },
}

/// A vector-valued operation with a hand-written vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    /// Accumulates `d loss / d input` into `in_adj` (zeroed by the caller)
    /// and parameter gradients into `grads`, given `d loss / d output`.
    fn backward(&self, out_adj: &[f64], in_adj: &mut [f64], grads: &mut Gradients);
}

struct CustomNode {
    op: Box<dyn CustomOp>,
    inputs: Vec<Var>,
    first_output: u32,
    num_outputs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Recording,
    Evaluated,
}

/// Dynamic computation graph over 64-bit scalars.
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<f64>,
    adjoints: Vec<f64>,
    customs: Vec<CustomNode>,
    block_lens: Vec<usize>,
    state: State,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(0)
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            ops: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            adjoints: Vec::new(),
            customs: Vec::new(),
            block_lens: Vec::new(),
            state: State::Recording,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    /// Adjoint of each node after the last backward pass.
    pub fn adjoints(&self) -> &[f64] {
        &self.adjoints
    }

    fn operand(&self, v: Var) -> f64 {
        self.values.get(v.index()).copied().unwrap_or(f64::NAN)
    }

    /// Records a raw primitive. Operand indices are not checked here;
    /// [`Tape::forward_eval`] rejects dangling operands.
    pub fn push(&mut self, op: Op) -> Var {
        let value = match op {
            Op::Const | Op::Param { .. } | Op::Custom { .. } => f64::NAN,
            Op::Add(a, b) => self.operand(a) + self.operand(b),
            Op::Sub(a, b) => self.operand(a) - self.operand(b),
            Op::Mul(a, b) => self.operand(a) * self.operand(b),
            Op::Div(a, b) => self.operand(a) / self.operand(b),
            Op::Neg(a) => -self.operand(a),
            Op::Recip(a) => 1.0 / self.operand(a),
            Op::Exp(a) => self.operand(a).exp(),
            Op::Ln(a) => self.operand(a).ln(),
            Op::Abs(a) => self.operand(a).abs(),
            Op::Sqrt(a) => self.operand(a).sqrt(),
            Op::Sin(a) => self.operand(a).sin(),
            Op::Cos(a) => self.operand(a).cos(),
            Op::Scale(a, c) => self.operand(a) * c,
            Op::Offset(a, c) => self.operand(a) + c,
        };
        self.push_with_value(op, value)
    }

    fn push_with_value(&mut self, op: Op, value: f64) -> Var {
        self.state = State::Recording;
        let v = Var(self.ops.len() as u32);
        self.ops.push(op);
        self.values.push(value);
        v
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push_with_value(Op::Const, value)
    }

    /// Parameter leaf. `value` must be the current store value.
    pub fn param(&mut self, block: usize, index: usize, value: f64) -> Var {
        self.push_with_value(
            Op::Param {
                block: block as u32,
                index: index as u32,
            },
            value,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a, b))
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a))
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.push(Op::Recip(a))
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.push(Op::Ln(a))
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.push(Op::Abs(a))
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt(a))
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.push(Op::Sin(a))
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.push(Op::Cos(a))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Offset(a, c))
    }

    /// Left-to-right sum. Returns a zero constant for an empty slice.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        match xs.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &x| self.add(acc, x)),
        }
    }

    /// Registers a custom node whose forward values were computed by the
    /// caller. Returns the output handles, which are contiguous.
    pub fn custom(&mut self, inputs: Vec<Var>, outputs: &[f64], op: Box<dyn CustomOp>) -> Vec<Var> {
        let id = self.customs.len() as u32;
        let first_output = self.ops.len() as u32;
        self.customs.push(CustomNode {
            op,
            inputs,
            first_output,
            num_outputs: outputs.len() as u32,
        });
        outputs
            .iter()
            .enumerate()
            .map(|(slot, &v)| {
                self.push_with_value(
                    Op::Custom {
                        id,
                        slot: slot as u32,
                    },
                    v,
                )
            })
            .collect()
    }

    /// Validates the graph against `params`, checks every value for
    /// finiteness, and returns the value of `root`.
    pub fn forward_eval(&mut self, root: Var, params: &ParamStore) -> Result<f64> {
        self.evaluate(params)?;
        if root.index() >= self.ops.len() {
            self.state = State::Recording;
            return Err(Error::Structural(format!(
                "root node {} does not exist",
                root.index()
            )));
        }
        Ok(self.values[root.index()])
    }

    /// Like [`Tape::forward_eval`] without selecting a root; use with
    /// [`Tape::backward_seeded`].
    pub fn evaluate(&mut self, params: &ParamStore) -> Result<()> {
        self.state = State::Recording;
        let lens = params.block_lens();
        for (i, op) in self.ops.iter().enumerate() {
            let dangling = |v: &Var| v.index() >= i;
            let bad = match op {
                Op::Const => false,
                Op::Param { block, index } => match lens.get(*block as usize) {
                    Some(&n) => *index as usize >= n,
                    None => true,
                },
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    dangling(a) || dangling(b)
                }
                Op::Neg(a)
                | Op::Recip(a)
                | Op::Exp(a)
                | Op::Ln(a)
                | Op::Abs(a)
                | Op::Sqrt(a)
                | Op::Sin(a)
                | Op::Cos(a)
                | Op::Scale(a, _)
                | Op::Offset(a, _) => dangling(a),
                Op::Custom { id, slot } => match self.customs.get(*id as usize) {
                    Some(node) => {
                        *slot == 0 && node.inputs.iter().any(|v| v.index() >= node.first_output as usize)
                    }
                    None => true,
                },
            };
            if bad {
                return Err(Error::Structural(format!(
                    "node {i} ({op:?}) references a missing operand or parameter"
                )));
            }
            if !self.values[i].is_finite() {
                return Err(Error::Numeric(format!(
                    "node {i} ({op:?}) has non-finite value {}",
                    self.values[i]
                )));
            }
        }
        self.block_lens = lens;
        self.state = State::Evaluated;
        Ok(())
    }

    /// Gradient of `root` with respect to every parameter block.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.backward_seeded(&[(root, 1.0)])
    }

    /// Gradient of `sum_k seed_k * node_k`.
    pub fn backward_seeded(&mut self, seeds: &[(Var, f64)]) -> Result<Gradients> {
        if self.state != State::Evaluated {
            return Err(Error::State("backward called before forward_eval".into()));
        }
        let n = self.ops.len();
        self.adjoints.clear();
        self.adjoints.resize(n, 0.0);
        for &(v, s) in seeds {
            if v.index() >= n {
                return Err(Error::Structural(format!("seed node {} does not exist", v.index())));
            }
            self.adjoints[v.index()] += s;
        }
        let mut grads = Gradients::empty(self.block_lens.len());
        let mut in_adj = Vec::new();
        for i in (0..n).rev() {
            let g = self.adjoints[i];
            let op = self.ops[i];
            if let Op::Custom { id, slot } = op {
                if slot == 0 {
                    let node = &self.customs[id as usize];
                    let first = node.first_output as usize;
                    let out = &self.adjoints[first..first + node.num_outputs as usize];
                    in_adj.clear();
                    in_adj.resize(node.inputs.len(), 0.0);
                    node.op.backward(out, &mut in_adj, &mut grads);
                    for (k, &v) in node.inputs.iter().enumerate() {
                        self.adjoints[v.index()] += in_adj[k];
                    }
                }
                continue;
            }
            if g == 0.0 {
                continue;
            }
            let val = |v: Var| self.values[v.index()];
            match op {
                Op::Const | Op::Custom { .. } => {}
                Op::Param { block, index } => {
                    let b = block as usize;
                    grads.block_mut(b, self.block_lens[b])[index as usize] += g;
                }
                Op::Add(a, b) => {
                    self.adjoints[a.index()] += g;
                    self.adjoints[b.index()] += g;
                }
                Op::Sub(a, b) => {
                    self.adjoints[a.index()] += g;
                    self.adjoints[b.index()] -= g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    self.adjoints[a.index()] += g * vb;
                    self.adjoints[b.index()] += g * va;
                }
                Op::Div(a, b) => {
                    let vb = val(b);
                    let out = self.values[i];
                    self.adjoints[a.index()] += g / vb;
                    self.adjoints[b.index()] -= g * out / vb;
                }
                Op::Neg(a) => self.adjoints[a.index()] -= g,
                Op::Recip(a) => {
                    let out = self.values[i];
                    self.adjoints[a.index()] -= g * out * out;
                }
                Op::Exp(a) => self.adjoints[a.index()] += g * self.values[i],
                Op::Ln(a) => self.adjoints[a.index()] += g / val(a),
                Op::Abs(a) => {
                    let va = val(a);
                    // sign(0) = 0
                    if va > 0.0 {
                        self.adjoints[a.index()] += g;
                    } else if va < 0.0 {
                        self.adjoints[a.index()] -= g;
                    }
                }
                Op::Sqrt(a) => self.adjoints[a.index()] += g * 0.5 / self.values[i],
                Op::Sin(a) => self.adjoints[a.index()] += g * val(a).cos(),
                Op::Cos(a) => self.adjoints[a.index()] -= g * val(a).sin(),
                Op::Scale(a, c) => self.adjoints[a.index()] += g * c,
                Op::Offset(a, _) => self.adjoints[a.index()] += g,
            }
        }
        Ok(grads)
    }
}

/// Three scalar nodes forming a vector.
pub type Var3 = [Var; 3];

/// Vector helpers on a tape.
impl Tape {
    pub fn constant3(&mut self, v: [f64; 3]) -> Var3 {
        [self.constant(v[0]), self.constant(v[1]), self.constant(v[2])]
    }

    pub fn value3(&self, v: Var3) -> [f64; 3] {
        [self.value(v[0]), self.value(v[1]), self.value(v[2])]
    }

    pub fn add3(&mut self, a: Var3, b: Var3) -> Var3 {
        [self.add(a[0], b[0]), self.add(a[1], b[1]), self.add(a[2], b[2])]
    }

    pub fn sub3(&mut self, a: Var3, b: Var3) -> Var3 {
        [self.sub(a[0], b[0]), self.sub(a[1], b[1]), self.sub(a[2], b[2])]
    }

    pub fn offset3(&mut self, a: Var3, c: [f64; 3]) -> Var3 {
        [self.offset(a[0], c[0]), self.offset(a[1], c[1]), self.offset(a[2], c[2])]
    }

    /// `m * v` for a constant row-major 3x3 matrix. Zero coefficients are
    /// skipped and unit coefficients are not multiplied.
    pub fn mat3_mul(&mut self, m: &[[f64; 3]; 3], v: Var3) -> Var3 {
        let mut out = [v[0]; 3];
        for (r, row) in m.iter().enumerate() {
            let mut acc: Option<Var> = None;
            for (c, &coef) in row.iter().enumerate() {
                if coef == 0.0 {
                    continue;
                }
                let term = if coef == 1.0 { v[c] } else { self.scale(v[c], coef) };
                acc = Some(match acc {
                    None => term,
                    Some(a) => self.add(a, term),
                });
            }
            out[r] = match acc {
                Some(a) => a,
                None => self.constant(0.0),
            };
        }
        out
    }

    /// `|a|_1` of a 3-vector.
    pub fn l1_norm3(&mut self, a: Var3) -> Var {
        let x = self.abs(a[0]);
        let y = self.abs(a[1]);
        let z = self.abs(a[2]);
        let xy = self.add(x, y);
        self.add(xy, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add_block("a", values.to_vec());
        s
    }

    #[test]
    fn square_value_and_gradient() {
        let store = store_with(&[3.0]);
        let mut t = Tape::new();
        let a = t.param(0, 0, store.block(0)[0]);
        let y = t.mul(a, a);
        assert_eq!(t.forward_eval(y, &store).unwrap(), 9.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(0).unwrap()[0], 6.0);
        assert_eq!(t.adjoints().len(), t.len());
    }

    #[test]
    fn additive_identity() {
        let store = store_with(&[1.0, -1.0]);
        let mut t = Tape::new();
        let a = t.param(0, 0, 1.0);
        let b = t.param(0, 1, -1.0);
        let y = t.add(a, b);
        assert_eq!(t.forward_eval(y, &store).unwrap(), 0.0);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let store = store_with(&[2.0]);
        let mut t = Tape::new();
        let _a = t.param(0, 0, 2.0);
        let c = t.constant(7.0);
        t.forward_eval(c, &store).unwrap();
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(0), None);
        assert_eq!(g.dense(0, 1), vec![0.0]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut t = Tape::new();
        let a = t.constant(1.0);
        assert!(matches!(t.backward(a), Err(Error::State(_))));
    }

    #[test]
    fn dangling_operand_is_structural_error() {
        let store = store_with(&[1.0]);
        let mut t = Tape::new();
        let a = t.constant(1.0);
        let bad = t.push(Op::Add(a, Var::from_index(10)));
        assert!(matches!(t.forward_eval(bad, &store), Err(Error::Structural(_))));
    }

    #[test]
    fn missing_param_block_is_structural_error() {
        let store = store_with(&[1.0]);
        let mut t = Tape::new();
        let a = t.param(3, 0, 1.0);
        assert!(matches!(t.forward_eval(a, &store), Err(Error::Structural(_))));
    }

    #[test]
    fn non_finite_value_names_node() {
        let store = store_with(&[0.0]);
        let mut t = Tape::new();
        let a = t.param(0, 0, 0.0);
        let y = t.ln(a);
        let err = t.forward_eval(y, &store).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("node 1")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unary_derivatives_match_finite_differences() {
        type Build = fn(&mut Tape, Var) -> Var;
        let cases: [(Build, f64); 9] = [
            (|t, a| t.exp(a), 0.3),
            (|t, a| t.ln(a), 1.7),
            (|t, a| t.recip(a), 0.8),
            (|t, a| t.sqrt(a), 2.5),
            (|t, a| t.sin(a), 0.4),
            (|t, a| t.cos(a), 0.4),
            (|t, a| t.abs(a), -1.2),
            (|t, a| t.neg(a), 0.5),
            (|t, a| {
                let b = t.scale(a, 3.0);
                let c = t.offset(b, 1.0);
                t.div(c, a)
            }, 1.3),
        ];
        for (f, x) in cases {
            let eval = |x: f64| {
                let mut t = Tape::new();
                let a = t.param(0, 0, x);
                let y = f(&mut t, a);
                (t, y)
            };
            let store = store_with(&[x]);
            let (mut t, y) = eval(x);
            t.forward_eval(y, &store).unwrap();
            let g = t.backward(y).unwrap().get(0).unwrap()[0];
            let h = 1e-6;
            let fd = (eval(x + h).0.value(y) - eval(x - h).0.value(y)) / (2.0 * h);
            assert!((g - fd).abs() <= 1e-7 * (1.0 + g.abs()), "{g} vs {fd}");
        }
    }

    struct Doubler;
    impl CustomOp for Doubler {
        fn backward(&self, out_adj: &[f64], in_adj: &mut [f64], _g: &mut Gradients) {
            for (i, o) in in_adj.iter_mut().zip(out_adj) {
                *i += 2.0 * o;
            }
        }
    }

    #[test]
    fn custom_op_chains_adjoints() {
        let store = store_with(&[1.5, -2.0]);
        let mut t = Tape::new();
        let a = t.param(0, 0, 1.5);
        let b = t.param(0, 1, -2.0);
        let outs = t.custom(vec![a, b], &[3.0, -4.0], Box::new(Doubler));
        let y = t.mul(outs[0], outs[1]);
        assert_eq!(t.forward_eval(y, &store).unwrap(), -12.0);
        let g = t.backward(y).unwrap();
        // y = 4ab
        assert_eq!(g.get(0).unwrap(), &[-8.0, 6.0]);
    }

    #[test]
    fn mat3_mul_matches_direct_product() {
        let m = [[1.0, 0.0, 2.0], [0.0, 0.0, 0.0], [-1.0, 0.5, 1.0]];
        let mut t = Tape::new();
        let v = t.constant3([1.0, 2.0, 3.0]);
        let out = t.mat3_mul(&m, v);
        assert_eq!(t.value3(out), [7.0, 0.0, 3.0]);
    }
}
