//! Dense and GRU building blocks. Weights are Glorot-uniform
//! (±sqrt(6/(fan_in+fan_out))), biases start at zero.

use rand::Rng;

use crate::error::Result;
use crate::nn::graph::{Activation, Graph, Value};
use crate::nn::params::{ParamId, ParamSet};

fn glorot<R: Rng>(set: &mut ParamSet, name: &str, out_dim: usize, in_dim: usize, rng: &mut R) -> ParamId {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data = (0..out_dim * in_dim).map(|_| rng.gen_range(-bound..bound)).collect();
    set.add(name, vec![out_dim, in_dim], data)
}

fn zeros(set: &mut ParamSet, name: &str, dim: usize) -> ParamId {
    set.add(name, vec![dim], vec![0.0; dim])
}

/// Fully connected layer `act(W x + b)`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn init<R: Rng>(
        set: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let w = glorot(set, &format!("{name}/w"), out_dim, in_dim, rng);
        let b = zeros(set, &format!("{name}/b"), out_dim);
        DenseLayer { w, b, in_dim, out_dim, activation }
    }

    pub fn forward(&self, g: &mut Graph, set: &ParamSet, x: Value) -> Result<Value> {
        self.forward_blocks(g, set, x, 1)
    }

    /// Apply the layer independently to `blocks` contiguous chunks of `x`.
    pub fn forward_blocks(&self, g: &mut Graph, set: &ParamSet, x: Value, blocks: usize) -> Result<Value> {
        let w = g.param(set, self.w);
        let b = g.param(set, self.b);
        g.dense(w, Some(b), x, self.activation, blocks, self.in_dim, self.out_dim)
    }
}

/// Gated recurrent unit in the original formulation: the reset gate
/// multiplies the previous hidden state inside the candidate, and the update
/// gate mixes `h' = (1 - z) h + z n`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wn: ParamId,
    pub un: ParamId,
    pub bn: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn init<R: Rng>(
        set: &mut ParamSet,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let gate = |set: &mut ParamSet, tag: &str, rng: &mut R| {
            (
                glorot(set, &format!("{name}/{tag}_w"), hidden_size, input_size, rng),
                glorot(set, &format!("{name}/{tag}_u"), hidden_size, hidden_size, rng),
                zeros(set, &format!("{name}/{tag}_b"), hidden_size),
            )
        };
        let (wz, uz, bz) = gate(set, "update", rng);
        let (wr, ur, br) = gate(set, "reset", rng);
        let (wn, un, bn) = gate(set, "candidate", rng);
        GruCell { wz, uz, bz, wr, ur, br, wn, un, bn, input_size, hidden_size }
    }

    /// One recurrence step; returns the new hidden state.
    pub fn step(&self, g: &mut Graph, set: &ParamSet, input: Value, hidden: Value) -> Result<Value> {
        let hs = self.hidden_size;
        let is = self.input_size;
        let gate_pre = |g: &mut Graph, w: ParamId, u: ParamId, b: ParamId, x: Value, h: Value| -> Result<Value> {
            let wn = g.param(set, w);
            let un = g.param(set, u);
            let bn = g.param(set, b);
            let wx = g.dense(wn, Some(bn), x, Activation::None, 1, is, hs)?;
            let uh = g.dense(un, None, h, Activation::None, 1, hs, hs)?;
            g.add(wx, uh)
        };
        let z_pre = gate_pre(g, self.wz, self.uz, self.bz, input, hidden)?;
        let z = g.sigmoid(z_pre);
        let r_pre = gate_pre(g, self.wr, self.ur, self.br, input, hidden)?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, hidden)?;
        let n_pre = gate_pre(g, self.wn, self.un, self.bn, input, rh)?;
        let n = g.tanh(n_pre);
        let one_minus_z = g.affine(z, -1.0, 1.0);
        let keep = g.mul(one_minus_z, hidden)?;
        let take = g.mul(z, n)?;
        g.add(keep, take)
    }
}
