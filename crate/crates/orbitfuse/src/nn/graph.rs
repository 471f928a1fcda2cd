//! The computation tape. Nodes are created eagerly (forward values computed
//! at construction), provenance is the op plus input indices, and `backward`
//! walks the tape in reverse, which is a valid topological order because an
//! op can only reference earlier nodes.

use crate::camera::{project, CameraConfig};
use crate::dynamics::{self, BodyState, SceneConfig, SimMode, Vec3};
use crate::error::{Error, Result};
use crate::nn::params::{ParamGrads, ParamId, ParamSet};

/// Handle to one node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    /// Elementwise `mul * x + add`; only the slope matters to the adjoint.
    Affine { src: Value, mul: f64 },
    Sigmoid(Value),
    Tanh(Value),
    /// `act(W x + b)` applied independently to `blocks` contiguous chunks of
    /// the input, sharing the same weights.
    Dense { w: Value, b: Option<Value>, x: Value, act: Activation, blocks: usize, in_dim: usize, out_dim: usize },
    Concat(Vec<Value>),
    Slice { src: Value, start: usize },
    /// Mean of squared differences, reduced to a scalar.
    MseLoss(Value, Value),
    /// Elementwise weighted sum of equal-length nodes.
    SumScaled(Vec<(Value, f64)>),
    /// Per-coordinate `pred + k * (obs - pred)`, exact at k == 0 and k == 1.
    Fuse { pred: Value, obs: Value, gain: Value },
    /// One symplectic-Euler dynamics step over the flat state layout
    /// [positions (3N) | velocities (3N)].
    NBodyStep { state: Value, cfg: SceneConfig },
    /// Screen-space reprojection loss of flat positions against observed
    /// pixel coordinates; objects whose observation is missing are excluded,
    /// predictions behind the near plane contribute a fixed penalty.
    ReprojLoss { positions: Value, targets: Vec<(f64, f64)>, target_visible: Vec<bool>, cam: CameraConfig },
}

struct Node {
    data: Vec<f64>,
    /// Empty until touched by backward.
    grad: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Eager tape of [`Node`]s.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_lookup: Vec<Option<Value>>,
    /// When set, parameters are registered without gradient tracking.
    inference: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let off = i * 8;
        let ca = &a[off..off + 8];
        let cb = &b[off..off + 8];
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_activation(act: Activation, pre: f64) -> f64 {
    match act {
        Activation::None => pre,
        Activation::Relu => pre.max(0.0),
        Activation::Sigmoid => stable_sigmoid(pre),
    }
}

/// Derivative of the activation expressed through the activation output.
fn activation_grad_from_output(act: Activation, y: f64) -> f64 {
    match act {
        Activation::None => 1.0,
        Activation::Relu => {
            if y > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => y * (1.0 - y),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph that skips all gradient bookkeeping; `backward` on it is an
    /// error because nothing requires gradients.
    pub fn inference() -> Self {
        Graph { inference: true, ..Graph::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: Value) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient accumulated at `v`; `None` if backward never touched it.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        let g = &self.nodes[v.0].grad;
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }

    fn push(&mut self, data: Vec<f64>, op: Op, needs_grad: bool) -> Value {
        self.nodes.push(Node { data, grad: Vec::new(), op, needs_grad: needs_grad && !self.inference });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, data: Vec<f64>) -> Value {
        self.push(data, Op::Const, false)
    }

    pub fn scalar_const(&mut self, x: f64) -> Value {
        self.constant(vec![x])
    }

    /// Register a parameter tensor; repeated registration of the same id
    /// returns the original node so gradients accumulate in one place.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Value {
        if self.param_lookup.len() < set.len() {
            self.param_lookup.resize(set.len(), None);
        }
        if let Some(v) = self.param_lookup[id.0] {
            return v;
        }
        let v = self.push(set.data(id).to_vec(), Op::Param(id.0), true);
        self.param_lookup[id.0] = Some(v);
        v
    }

    fn check_same_len(&self, a: Value, b: Value, what: &str) -> Result<()> {
        if self.nodes[a.0].data.len() != self.nodes[b.0].data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {} vs {}",
                self.nodes[a.0].data.len(),
                self.nodes[b.0].data.len()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_same_len(a, b, "add")?;
        let data = self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_same_len(a, b, "sub")?;
        let data = self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_same_len(a, b, "mul")?;
        let data = self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, Op::Mul(a, b), ng))
    }

    pub fn affine(&mut self, src: Value, mul: f64, add: f64) -> Value {
        let data = self.nodes[src.0].data.iter().map(|x| mul * x + add).collect();
        let ng = self.needs(src);
        self.push(data, Op::Affine { src, mul }, ng)
    }

    pub fn sigmoid(&mut self, src: Value) -> Value {
        let data = self.nodes[src.0].data.iter().map(|&x| stable_sigmoid(x)).collect();
        let ng = self.needs(src);
        self.push(data, Op::Sigmoid(src), ng)
    }

    pub fn tanh(&mut self, src: Value) -> Value {
        let data = self.nodes[src.0].data.iter().map(|x| x.tanh()).collect();
        let ng = self.needs(src);
        self.push(data, Op::Tanh(src), ng)
    }

    /// `act(W x + b)` per block. `w` is row-major `[out_dim, in_dim]`,
    /// `x` has length `blocks * in_dim`.
    pub fn dense(
        &mut self,
        w: Value,
        b: Option<Value>,
        x: Value,
        act: Activation,
        blocks: usize,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Value> {
        if self.nodes[w.0].data.len() != in_dim * out_dim {
            return Err(Error::ShapeMismatch(format!(
                "dense weights: expected {}x{}={}, got {}",
                out_dim,
                in_dim,
                in_dim * out_dim,
                self.nodes[w.0].data.len()
            )));
        }
        if let Some(b) = b {
            if self.nodes[b.0].data.len() != out_dim {
                return Err(Error::ShapeMismatch(format!(
                    "dense bias: expected {out_dim}, got {}",
                    self.nodes[b.0].data.len()
                )));
            }
        }
        if self.nodes[x.0].data.len() != blocks * in_dim {
            return Err(Error::ShapeMismatch(format!(
                "dense input: expected {} blocks of {in_dim}, got length {}",
                blocks,
                self.nodes[x.0].data.len()
            )));
        }
        let mut data = vec![0.0; blocks * out_dim];
        {
            let wd = &self.nodes[w.0].data;
            let xd = &self.nodes[x.0].data;
            let bd = b.map(|b| &self.nodes[b.0].data);
            for blk in 0..blocks {
                let xb = &xd[blk * in_dim..(blk + 1) * in_dim];
                let ob = &mut data[blk * out_dim..(blk + 1) * out_dim];
                for (r, o) in ob.iter_mut().enumerate() {
                    let pre = dot(&wd[r * in_dim..(r + 1) * in_dim], xb)
                        + bd.map_or(0.0, |bd| bd[r]);
                    *o = apply_activation(act, pre);
                }
            }
        }
        let ng = self.needs(w) || self.needs(x) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(data, Op::Dense { w, b, x, act, blocks, in_dim, out_dim }, ng))
    }

    pub fn concat(&mut self, parts: &[Value]) -> Value {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(data, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice(&mut self, src: Value, start: usize, len: usize) -> Result<Value> {
        if start + len > self.nodes[src.0].data.len() {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{} of node length {}",
                start + len,
                self.nodes[src.0].data.len()
            )));
        }
        let data = self.nodes[src.0].data[start..start + len].to_vec();
        let ng = self.needs(src);
        Ok(self.push(data, Op::Slice { src, start }, ng))
    }

    pub fn mse(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_same_len(a, b, "mse")?;
        let n = self.nodes[a.0].data.len() as f64;
        let sum: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![sum / n], Op::MseLoss(a, b), ng))
    }

    pub fn sum_scaled(&mut self, parts: &[(Value, f64)]) -> Result<Value> {
        assert!(!parts.is_empty());
        let len = self.nodes[parts[0].0 .0].data.len();
        let mut data = vec![0.0; len];
        for &(v, w) in parts {
            if self.nodes[v.0].data.len() != len {
                return Err(Error::ShapeMismatch("sum_scaled: unequal lengths".into()));
            }
            axpy(w, &self.nodes[v.0].data, &mut data);
        }
        let ng = parts.iter().any(|(v, _)| self.needs(*v));
        Ok(self.push(data, Op::SumScaled(parts.to_vec()), ng))
    }

    /// Kalman-style blend `pred + k (obs - pred)`, endpoint-exact and clamped
    /// to the closed interval between the two inputs.
    pub fn fuse(&mut self, pred: Value, obs: Value, gain: Value) -> Result<Value> {
        self.check_same_len(pred, obs, "fuse")?;
        self.check_same_len(pred, gain, "fuse gain")?;
        let data = self.nodes[pred.0]
            .data
            .iter()
            .zip(&self.nodes[obs.0].data)
            .zip(&self.nodes[gain.0].data)
            .map(|((&a, &b), &k)| fuse_coord(a, b, k))
            .collect();
        let ng = self.needs(pred) || self.needs(obs) || self.needs(gain);
        Ok(self.push(data, Op::Fuse { pred, obs, gain }, ng))
    }

    /// One dynamics step over the flat [positions | velocities] layout.
    pub fn nbody_step(&mut self, state: Value, cfg: &SceneConfig) -> Result<Value> {
        let n = cfg.num_objects;
        if self.nodes[state.0].data.len() != 6 * n {
            return Err(Error::ShapeMismatch(format!(
                "nbody_step: expected state length {}, got {}",
                6 * n,
                self.nodes[state.0].data.len()
            )));
        }
        let bodies = flat_to_bodies(&self.nodes[state.0].data, n);
        let next = dynamics::step(&bodies, cfg)?;
        let data = bodies_to_flat(&next);
        let ng = self.needs(state);
        Ok(self.push(data, Op::NBodyStep { state, cfg: *cfg }, ng))
    }

    /// Mean screen-space squared error of projected positions against
    /// observed coordinates. Per object: ((du^2 + dv^2) / 2) when the
    /// prediction projects, the squared image diagonal when it does not;
    /// objects without a visible observation are left out of the mean.
    pub fn reproj_loss(
        &mut self,
        positions: Value,
        targets: &[(f64, f64)],
        target_visible: &[bool],
        cam: &CameraConfig,
    ) -> Result<Value> {
        let n = targets.len();
        if self.nodes[positions.0].data.len() != 3 * n || target_visible.len() != n {
            return Err(Error::ShapeMismatch("reproj_loss: positions/targets mismatch".into()));
        }
        let denom = target_visible.iter().filter(|v| **v).count().max(1) as f64;
        let mut total = 0.0;
        {
            let pd = &self.nodes[positions.0].data;
            for (o, &(tu, tv)) in targets.iter().enumerate() {
                if !target_visible[o] {
                    continue;
                }
                let p = Vec3::new(pd[3 * o], pd[3 * o + 1], pd[3 * o + 2]);
                total += match project(p, cam) {
                    Some(pr) => {
                        let du = pr.u - tu;
                        let dv = pr.v - tv;
                        (du * du + dv * dv) / 2.0
                    }
                    None => cam.diagonal_sq(),
                };
            }
        }
        let ng = self.needs(positions);
        Ok(self.push(
            vec![total / denom],
            Op::ReprojLoss {
                positions,
                targets: targets.to_vec(),
                target_visible: target_visible.to_vec(),
                cam: *cam,
            },
            ng,
        ))
    }

    fn take_grad(&mut self, v: Value) -> Option<Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].data.len();
        let mut g = std::mem::take(&mut self.nodes[v.0].grad);
        if g.is_empty() {
            g = vec![0.0; len];
        }
        Some(g)
    }

    fn put_grad(&mut self, v: Value, g: Vec<f64>) {
        self.nodes[v.0].grad = g;
    }

    fn add_grad(&mut self, v: Value, contrib: &[f64]) {
        if let Some(mut g) = self.take_grad(v) {
            axpy(1.0, contrib, &mut g);
            self.put_grad(v, g);
        }
    }

    /// Reverse-topological gradient accumulation from a scalar loss into every
    /// reachable parameter node. Each node is visited exactly once.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].data.len()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::InvalidConfig(
                "backward on a graph with no differentiable inputs".into(),
            ));
        }
        self.nodes[loss.0].grad = vec![1.0];
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_empty() || !self.nodes[idx].needs_grad {
                continue;
            }
            let gout = std::mem::take(&mut self.nodes[idx].grad);
            let op = self.nodes[idx].op.clone();
            self.backward_op(idx, &op, &gout);
            self.nodes[idx].grad = gout;
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Const | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.add_grad(*a, gout);
                self.add_grad(*b, gout);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, gout);
                if let Some(mut g) = self.take_grad(*b) {
                    axpy(-1.0, gout, &mut g);
                    self.put_grad(*b, g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(mut g) = self.take_grad(*a) {
                    for ((gi, go), bd) in g.iter_mut().zip(gout).zip(&self.nodes[b.0].data) {
                        *gi += go * bd;
                    }
                    self.put_grad(*a, g);
                }
                if let Some(mut g) = self.take_grad(*b) {
                    for ((gi, go), ad) in g.iter_mut().zip(gout).zip(&self.nodes[a.0].data) {
                        *gi += go * ad;
                    }
                    self.put_grad(*b, g);
                }
            }
            Op::Affine { src, mul } => {
                if let Some(mut g) = self.take_grad(*src) {
                    axpy(*mul, gout, &mut g);
                    self.put_grad(*src, g);
                }
            }
            Op::Sigmoid(src) => {
                if let Some(mut g) = self.take_grad(*src) {
                    for ((gi, go), y) in g.iter_mut().zip(gout).zip(&self.nodes[idx].data) {
                        *gi += go * y * (1.0 - y);
                    }
                    self.put_grad(*src, g);
                }
            }
            Op::Tanh(src) => {
                if let Some(mut g) = self.take_grad(*src) {
                    for ((gi, go), y) in g.iter_mut().zip(gout).zip(&self.nodes[idx].data) {
                        *gi += go * (1.0 - y * y);
                    }
                    self.put_grad(*src, g);
                }
            }
            Op::Dense { w, b, x, act, blocks, in_dim, out_dim } => {
                // Pre-activation gradient from the stored output.
                let mut gpre = vec![0.0; gout.len()];
                for ((gp, go), y) in gpre.iter_mut().zip(gout).zip(&self.nodes[idx].data) {
                    *gp = go * activation_grad_from_output(*act, *y);
                }
                let mut gw = self.take_grad(*w);
                let mut gb = b.and_then(|b| self.take_grad(b));
                let mut gx = self.take_grad(*x);
                {
                    let wd = &self.nodes[w.0].data;
                    let xd = &self.nodes[x.0].data;
                    for blk in 0..*blocks {
                        let gp = &gpre[blk * out_dim..(blk + 1) * out_dim];
                        let xb = &xd[blk * in_dim..(blk + 1) * in_dim];
                        if let Some(gw) = gw.as_mut() {
                            for (r, &gr) in gp.iter().enumerate() {
                                axpy(gr, xb, &mut gw[r * in_dim..(r + 1) * in_dim]);
                            }
                        }
                        if let Some(gb) = gb.as_mut() {
                            axpy(1.0, gp, gb);
                        }
                        if let Some(gx) = gx.as_mut() {
                            let gxb = &mut gx[blk * in_dim..(blk + 1) * in_dim];
                            for (r, &gr) in gp.iter().enumerate() {
                                axpy(gr, &wd[r * in_dim..(r + 1) * in_dim], gxb);
                            }
                        }
                    }
                }
                if let Some(gw) = gw {
                    self.put_grad(*w, gw);
                }
                if let (Some(b), Some(gb)) = (*b, gb) {
                    self.put_grad(b, gb);
                }
                if let Some(gx) = gx {
                    self.put_grad(*x, gx);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    self.add_grad(*p, &gout[off..off + len]);
                    off += len;
                }
            }
            Op::Slice { src, start } => {
                if let Some(mut g) = self.take_grad(*src) {
                    axpy(1.0, gout, &mut g[*start..*start + gout.len()]);
                    self.put_grad(*src, g);
                }
            }
            Op::MseLoss(a, b) => {
                let scale = 2.0 * gout[0] / self.nodes[a.0].data.len() as f64;
                if let Some(mut g) = self.take_grad(*a) {
                    for ((gi, x), y) in g.iter_mut().zip(&self.nodes[a.0].data).zip(&self.nodes[b.0].data) {
                        *gi += scale * (x - y);
                    }
                    self.put_grad(*a, g);
                }
                if let Some(mut g) = self.take_grad(*b) {
                    for ((gi, x), y) in g.iter_mut().zip(&self.nodes[a.0].data).zip(&self.nodes[b.0].data) {
                        *gi -= scale * (x - y);
                    }
                    self.put_grad(*b, g);
                }
            }
            Op::SumScaled(parts) => {
                for &(v, w) in parts {
                    if let Some(mut g) = self.take_grad(v) {
                        axpy(w, gout, &mut g);
                        self.put_grad(v, g);
                    }
                }
            }
            Op::Fuse { pred, obs, gain } => {
                let kd = self.nodes[gain.0].data.clone();
                if let Some(mut g) = self.take_grad(*pred) {
                    for ((gi, go), k) in g.iter_mut().zip(gout).zip(&kd) {
                        *gi += go * (1.0 - k);
                    }
                    self.put_grad(*pred, g);
                }
                if let Some(mut g) = self.take_grad(*obs) {
                    for ((gi, go), k) in g.iter_mut().zip(gout).zip(&kd) {
                        *gi += go * k;
                    }
                    self.put_grad(*obs, g);
                }
                if let Some(mut g) = self.take_grad(*gain) {
                    for (((gi, go), a), b) in g
                        .iter_mut()
                        .zip(gout)
                        .zip(&self.nodes[pred.0].data)
                        .zip(&self.nodes[obs.0].data)
                    {
                        *gi += go * (b - a);
                    }
                    self.put_grad(*gain, g);
                }
            }
            Op::NBodyStep { state, cfg } => {
                if let Some(mut g) = self.take_grad(*state) {
                    nbody_step_backward(&self.nodes[state.0].data, cfg, gout, &mut g);
                    self.put_grad(*state, g);
                }
            }
            Op::ReprojLoss { positions, targets, target_visible, cam } => {
                if let Some(mut g) = self.take_grad(*positions) {
                    let denom = target_visible.iter().filter(|v| **v).count().max(1) as f64;
                    let scale = gout[0] / denom;
                    let pd = &self.nodes[positions.0].data;
                    for (o, &(tu, tv)) in targets.iter().enumerate() {
                        if !target_visible[o] {
                            continue;
                        }
                        let p = Vec3::new(pd[3 * o], pd[3 * o + 1], pd[3 * o + 2]);
                        // Behind the near plane the penalty is constant, so
                        // no gradient flows.
                        if let Some(pr) = project(p, cam) {
                            let du = pr.u - tu;
                            let dv = pr.v - tv;
                            let rel = p - cam.position;
                            let f_over_d = cam.focal_length / pr.depth;
                            g[3 * o] += scale * du * f_over_d;
                            g[3 * o + 1] += scale * dv * f_over_d;
                            g[3 * o + 2] += scale
                                * (-(du * rel.x + dv * rel.y) * cam.focal_length
                                    / (pr.depth * pr.depth));
                        }
                    }
                    self.put_grad(*positions, g);
                }
            }
        }
    }

    /// Add this graph's parameter gradients into `sink` (indexed like the
    /// originating `ParamSet`).
    pub fn accumulate_param_grads(&self, sink: &mut ParamGrads) {
        for node in &self.nodes {
            if let Op::Param(pid) = node.op {
                if !node.grad.is_empty() {
                    axpy(1.0, &node.grad, &mut sink[pid]);
                }
            }
        }
    }
}

pub(crate) fn fuse_coord(pred: f64, obs: f64, k: f64) -> f64 {
    if k <= 0.0 {
        pred
    } else if k >= 1.0 {
        obs
    } else {
        let lo = pred.min(obs);
        let hi = pred.max(obs);
        (pred + k * (obs - pred)).clamp(lo, hi)
    }
}

pub fn flat_to_bodies(flat: &[f64], n: usize) -> Vec<BodyState> {
    debug_assert_eq!(flat.len(), 6 * n);
    (0..n)
        .map(|i| BodyState {
            position: Vec3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]),
            velocity: Vec3::new(flat[3 * n + 3 * i], flat[3 * n + 3 * i + 1], flat[3 * n + 3 * i + 2]),
        })
        .collect()
}

pub fn bodies_to_flat(bodies: &[BodyState]) -> Vec<f64> {
    let n = bodies.len();
    let mut flat = vec![0.0; 6 * n];
    for (i, b) in bodies.iter().enumerate() {
        flat[3 * i] = b.position.x;
        flat[3 * i + 1] = b.position.y;
        flat[3 * i + 2] = b.position.z;
        flat[3 * n + 3 * i] = b.velocity.x;
        flat[3 * n + 3 * i + 1] = b.velocity.y;
        flat[3 * n + 3 * i + 2] = b.velocity.z;
    }
    flat
}

/// 3x3 Jacobian of `gamma * d / soft(|d|)^3` with respect to `d`, where the
/// softened distance clamps at `eps`.
fn inverse_square_jacobian(d: Vec3, gamma: f64, eps: f64) -> [[f64; 3]; 3] {
    let r = d.norm();
    if eps > 0.0 && r < eps {
        let c = gamma / (eps * eps * eps);
        [[c, 0.0, 0.0], [0.0, c, 0.0], [0.0, 0.0, c]]
    } else {
        let r3 = r * r * r;
        let r5 = r3 * r * r;
        let da = [d.x, d.y, d.z];
        let mut j = [[0.0; 3]; 3];
        for (a, row) in j.iter_mut().enumerate() {
            for (b, cell) in row.iter_mut().enumerate() {
                let delta = if a == b { 1.0 / r3 } else { 0.0 };
                *cell = gamma * (delta - 3.0 * da[a] * da[b] / r5);
            }
        }
        j
    }
}

fn mat_vec3(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    Vec3::new(
        m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
        m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
        m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
    )
}

/// Hand-derived adjoint of the symplectic Euler step.
fn nbody_step_backward(state: &[f64], cfg: &SceneConfig, gout: &[f64], gstate: &mut [f64]) {
    let n = cfg.num_objects;
    let dt = cfg.dt;
    let bodies = flat_to_bodies(state, n);

    // v' = v + dt F/m, p' = p + dt v'.
    let mut g_vel = vec![Vec3::ZERO; n];
    let mut g_force = vec![Vec3::ZERO; n];
    let mut g_pos = vec![Vec3::ZERO; n];
    for i in 0..n {
        let gp = Vec3::new(gout[3 * i], gout[3 * i + 1], gout[3 * i + 2]);
        let gv = Vec3::new(gout[3 * n + 3 * i], gout[3 * n + 3 * i + 1], gout[3 * n + 3 * i + 2]);
        let gv_total = gv + gp * dt;
        g_vel[i] = gv_total;
        let mut gf = gv_total * (dt / cfg.object_mass);
        if cfg.mode == SimMode::TwoD {
            gf.z = 0.0;
        }
        g_force[i] = gf;
        g_pos[i] = gp;
    }

    // Mutual pair term T = gamma d/soft^3 with d = p_i - p_k: F_k += T,
    // F_i -= T, dT/dp_i = J, dT/dp_k = -J.
    let gamma_m = cfg.gravitational_constant * cfg.object_mass * cfg.object_mass;
    for k in 0..n {
        for i in (k + 1)..n {
            let d = bodies[i].position - bodies[k].position;
            let j = inverse_square_jacobian(d, gamma_m, cfg.softening_epsilon);
            let u = g_force[k] - g_force[i];
            let ju = mat_vec3(&j, u);
            g_pos[i] = g_pos[i] + ju;
            g_pos[k] = g_pos[k] - ju;
        }
    }

    // Guidance term.
    match cfg.mode {
        SimMode::TwoD => {
            let gamma_g =
                cfg.gravitational_constant * cfg.object_mass * cfg.guidance_mass;
            for i in 0..n {
                let d = cfg.guidance_point - bodies[i].position;
                let j = inverse_square_jacobian(d, gamma_g, cfg.softening_epsilon);
                g_pos[i] = g_pos[i] - mat_vec3(&j, g_force[i]);
            }
        }
        SimMode::ThreeD => {
            for i in 0..n {
                g_pos[i] = g_pos[i] - g_force[i] * cfg.guidance_coefficient_3d;
            }
        }
    }

    for i in 0..n {
        gstate[3 * i] += g_pos[i].x;
        gstate[3 * i + 1] += g_pos[i].y;
        gstate[3 * i + 2] += g_pos[i].z;
        gstate[3 * n + 3 * i] += g_vel[i].x;
        gstate[3 * n + 3 * i + 1] += g_vel[i].y;
        gstate[3 * n + 3 * i + 2] += g_vel[i].z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn add_and_backward_accumulate() {
        let mut set = ParamSet::new();
        let p = set.add("p", vec![2], vec![3.0, -1.0]);
        let mut g = Graph::new();
        let x = g.param(&set, p);
        // loss = mean((x + x)^2) = mean(4 x^2); d/dx = 8x/2 = 4x
        let two_x = g.add(x, x).unwrap();
        let zero = g.constant(vec![0.0, 0.0]);
        let loss = g.mse(two_x, zero).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert_abs_diff_eq!(grad[0], 4.0 * 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[1], 4.0 * -1.0, epsilon = 1e-12);
    }

    #[test]
    fn square_loss_gradient_is_two_x() {
        // loss = x^2 at x = 3 => dloss/dx = 6
        let mut set = ParamSet::new();
        let p = set.add("x", vec![1], vec![3.0]);
        let mut g = Graph::new();
        let x = g.param(&set, p);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_scaled(&[(sq, 1.0)]).unwrap();
        g.backward(loss).unwrap();
        assert_abs_diff_eq!(g.grad(x).unwrap()[0], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let mut set = ParamSet::new();
        let p = set.add("x", vec![1], vec![2.0]);
        let grad_of = |parts: &dyn Fn(&mut Graph, Value) -> Value| -> f64 {
            let mut g = Graph::new();
            let x = g.param(&set, p);
            let loss = parts(&mut g, x);
            g.backward(loss).unwrap();
            g.grad(x).unwrap()[0]
        };
        let g_a = grad_of(&|g, x| g.mul(x, x).unwrap());
        let g_b = grad_of(&|g, x| g.affine(x, 5.0, 1.0));
        let g_sum = grad_of(&|g, x| {
            let a = g.mul(x, x).unwrap();
            let b = g.affine(x, 5.0, 1.0);
            g.add(a, b).unwrap()
        });
        assert_abs_diff_eq!(g_sum, g_a + g_b, epsilon = 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut set = ParamSet::new();
        let p = set.add("x", vec![2], vec![1.0, 2.0]);
        let mut g = Graph::new();
        let x = g.param(&set, p);
        let y = g.add(x, x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(2))));
    }

    #[test]
    fn provenance_is_acyclic() {
        // Ops can only reference already-created nodes, so every input index
        // is strictly smaller than the node's own index.
        let mut set = ParamSet::new();
        let p = set.add("x", vec![6], vec![0.5; 6]);
        let mut g = Graph::new();
        let x = g.param(&set, p);
        let s = g.sigmoid(x);
        let t = g.tanh(s);
        let c = g.concat(&[s, t]);
        let sl = g.slice(c, 2, 4).unwrap();
        let m = g.mul(sl, sl).unwrap();
        let zero = g.constant(vec![0.0; 4]);
        let _ = g.mse(m, zero).unwrap();
        for (idx, node) in g.nodes.iter().enumerate() {
            let inputs: Vec<usize> = match &node.op {
                Op::Const | Op::Param(_) => vec![],
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MseLoss(a, b) => vec![a.0, b.0],
                Op::Affine { src, .. } | Op::Sigmoid(src) | Op::Tanh(src) => vec![src.0],
                Op::Slice { src, .. } => vec![src.0],
                Op::Dense { w, b, x, .. } => {
                    let mut v = vec![w.0, x.0];
                    if let Some(b) = b {
                        v.push(b.0);
                    }
                    v
                }
                Op::Concat(parts) => parts.iter().map(|p| p.0).collect(),
                Op::SumScaled(parts) => parts.iter().map(|(p, _)| p.0).collect(),
                Op::Fuse { pred, obs, gain } => vec![pred.0, obs.0, gain.0],
                Op::NBodyStep { state, .. } => vec![state.0],
                Op::ReprojLoss { positions, .. } => vec![positions.0],
            };
            assert!(inputs.iter().all(|&i| i < idx));
        }
    }

    #[test]
    fn nbody_step_node_matches_dynamics_step() {
        let cfg = SceneConfig { num_objects: 2, ..SceneConfig::orbits_2d() };
        let bodies = vec![
            BodyState::new(Vec3::new(-1.0, 0.3, 10.0), Vec3::new(0.4, 0.1, 0.0)),
            BodyState::new(Vec3::new(1.2, -0.7, 10.0), Vec3::new(-0.2, 0.3, 0.0)),
        ];
        let mut g = Graph::new();
        let state = g.constant(bodies_to_flat(&bodies));
        let next = g.nbody_step(state, &cfg).unwrap();
        let expect = dynamics::step(&bodies, &cfg).unwrap();
        assert_eq!(g.data(next), bodies_to_flat(&expect).as_slice());
    }

    #[test]
    fn fuse_is_endpoint_exact() {
        let mut g = Graph::new();
        let a = g.constant(vec![1e16, -3.0, 0.25]);
        let b = g.constant(vec![1.0, 7.0, 0.75]);
        let k0 = g.constant(vec![0.0; 3]);
        let k1 = g.constant(vec![1.0; 3]);
        let kh = g.constant(vec![0.5; 3]);
        let f0 = g.fuse(a, b, k0).unwrap();
        let f1 = g.fuse(a, b, k1).unwrap();
        let fh = g.fuse(a, b, kh).unwrap();
        assert_eq!(g.data(f0), g.data(a));
        assert_eq!(g.data(f1), g.data(b));
        assert_eq!(g.data(fh)[2], 0.5);
    }
}
