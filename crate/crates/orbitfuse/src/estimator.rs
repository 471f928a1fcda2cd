//! Recursive state estimation: burn-in frames fuse dynamics predictions with
//! lifted observations through a per-coordinate gain, rollout frames apply
//! the dynamics alone. The gain is either a constant or produced by a
//! recurrent network (dense -> GRU -> dense -> sigmoid) fed with the latent
//! encodings of observation and prediction, all objects joined into one
//! vector. Training backpropagates through the dynamics step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraConfig, Observation};
use crate::codec::{self, CodecParams, InitMode, InitNet, LatentState, SymbolicState, LATENT_DIM};
use crate::dynamics::{self, BodyState, SceneConfig, SimMode};
use crate::error::{Error, Result};
use crate::nn::{
    load_checkpoint, save_checkpoint, Activation, DenseLayer, Graph, GruCell, OptimizerState,
    ParamGrads, ParamSet, Value,
};

/// How the per-coordinate gain K is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GainStrategy {
    /// The same constant for every coordinate.
    ConstantK(f64),
    /// The recurrent gain network.
    Learned,
}

impl GainStrategy {
    pub fn validate(&self) -> Result<()> {
        match self {
            GainStrategy::ConstantK(k) if !(0.0..=1.0).contains(k) => Err(Error::InvalidConfig(
                format!("constant gain {k} outside [0, 1]"),
            )),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            GainStrategy::ConstantK(k) => format!("constant-k{k}"),
            GainStrategy::Learned => "learned".into(),
        }
    }
}

impl std::str::FromStr for GainStrategy {
    type Err = Error;

    /// Accepts `learned` or `constant:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "learned" {
            return Ok(GainStrategy::Learned);
        }
        if let Some(k) = s.strip_prefix("constant:") {
            let k: f64 = k
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad gain constant in {s:?}")))?;
            let strategy = GainStrategy::ConstantK(k);
            strategy.validate()?;
            return Ok(strategy);
        }
        Err(Error::InvalidConfig(format!(
            "gain strategy {s:?} is neither `learned` nor `constant:<k>`"
        )))
    }
}

/// Hidden width of the gain network's dense stacks and GRU.
pub const GAIN_HIDDEN: usize = 128;

/// The recurrent gain predictor. Input: per object, the concatenated latent
/// blocks [z_obs_p, z_obs_v, z_pred_p, z_pred_v], all objects joined into one
/// vector of width N * 4 * LATENT_DIM. Output rows follow the flat state
/// layout (positions first), squashed through a sigmoid downstream.
#[derive(Debug, Clone)]
pub struct GainNet {
    pub input: DenseLayer,
    pub gru: GruCell,
    pub output: DenseLayer,
    pub num_objects: usize,
}

impl GainNet {
    pub fn init<R: Rng>(set: &mut ParamSet, num_objects: usize, rng: &mut R) -> Self {
        let in_width = num_objects * 4 * LATENT_DIM;
        GainNet {
            input: DenseLayer::init(set, "gain/input", in_width, GAIN_HIDDEN, Activation::Relu, rng),
            gru: GruCell::init(set, "gain/gru", GAIN_HIDDEN, GAIN_HIDDEN, rng),
            output: DenseLayer::init(set, "gain/output", GAIN_HIDDEN, num_objects * 6, Activation::None, rng),
            num_objects,
        }
    }

    /// Join per-object latent blocks, run dense -> GRU -> dense -> sigmoid.
    /// Returns (K in state layout, new hidden).
    pub fn compute_graph(
        &self,
        g: &mut Graph,
        set: &ParamSet,
        z_obs: (Value, Value),
        z_pred: (Value, Value),
        hidden: Value,
    ) -> Result<(Value, Value)> {
        let n = self.num_objects;
        let mut parts = Vec::with_capacity(4 * n);
        for o in 0..n {
            for z in [z_obs.0, z_obs.1, z_pred.0, z_pred.1] {
                parts.push(g.slice(z, o * LATENT_DIM, LATENT_DIM)?);
            }
        }
        let joined = g.concat(&parts);
        let stem = self.input.forward(g, set, joined)?;
        let new_hidden = self.gru.step(g, set, stem, hidden)?;
        let raw = self.output.forward(g, set, new_hidden)?;
        Ok((g.sigmoid(raw), new_hidden))
    }
}

/// Iterated estimator state between frames.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub current_symbolic: SymbolicState,
    pub current_latent: LatentState,
    pub gru_hidden: Vec<f64>,
    pub frame_index: usize,
}

/// Per-frame burn-in record kept for loss computation and diagnostics.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub s_pred: SymbolicState,
    pub s_obs: SymbolicState,
    pub gain: Vec<f64>,
}

/// The trainable bundle: parameters plus the network handles into them.
#[derive(Debug, Clone)]
pub struct EstimatorModel {
    pub params: ParamSet,
    pub codec: CodecParams,
    pub init_net: InitNet,
    pub gain: Option<GainNet>,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub init_mode: InitMode,
}

fn init_mode_code(mode: InitMode) -> f64 {
    match mode {
        InitMode::ScreenOnly => 0.0,
        InitMode::ScreenPlusDepth => 1.0,
        InitMode::GroundtruthZ => 2.0,
    }
}

fn init_mode_from_code(code: f64) -> Result<InitMode> {
    match code as i64 {
        0 => Ok(InitMode::ScreenOnly),
        1 => Ok(InitMode::ScreenPlusDepth),
        2 => Ok(InitMode::GroundtruthZ),
        other => Err(Error::InvalidConfig(format!("unknown init mode code {other}"))),
    }
}

impl EstimatorModel {
    /// Deterministic construction: parameter registration order and the
    /// Glorot draws are fixed by (configuration, seed).
    pub fn new(
        scene: SceneConfig,
        camera: CameraConfig,
        init_mode: InitMode,
        strategy: &GainStrategy,
        seed: u64,
    ) -> Result<Self> {
        scene.validate()?;
        camera.validate()?;
        strategy.validate()?;
        let mut set = ParamSet::new();
        let (kind, k) = match strategy {
            GainStrategy::ConstantK(k) => (0.0, *k),
            GainStrategy::Learned => (1.0, 0.0),
        };
        let scene_mode = if scene.mode == SimMode::TwoD { 0.0 } else { 1.0 };
        set.add(
            "meta/model",
            vec![5],
            vec![init_mode_code(init_mode), kind, k, scene.num_objects as f64, scene_mode],
        );
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let codec = CodecParams::init(&mut set, &mut rng);
        let init_net = InitNet::init(&mut set, init_mode, &mut rng);
        let gain = match strategy {
            GainStrategy::Learned => Some(GainNet::init(&mut set, scene.num_objects, &mut rng)),
            GainStrategy::ConstantK(_) => None,
        };
        Ok(EstimatorModel { params: set, codec, init_net, gain, scene, camera, init_mode })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(&self.params, path)
    }

    /// Rebuild the model that produced a checkpoint (its stored meta entry
    /// carries init mode and gain strategy) and load the weights into it.
    pub fn load(
        path: &std::path::Path,
        scene: SceneConfig,
        camera: CameraConfig,
    ) -> Result<(Self, GainStrategy)> {
        let stored = load_checkpoint(path)?;
        let meta_id = stored.find("meta/model").ok_or_else(|| Error::MalformedFile {
            path: path.display().to_string(),
            detail: "missing meta/model entry".into(),
        })?;
        let meta = stored.data(meta_id).to_vec();
        if meta.len() != 5 {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                detail: "meta/model has wrong arity".into(),
            });
        }
        let init_mode = init_mode_from_code(meta[0])?;
        let strategy = if meta[1] == 0.0 { GainStrategy::ConstantK(meta[2]) } else { GainStrategy::Learned };
        if meta[3] as usize != scene.num_objects {
            return Err(Error::InvalidConfig(format!(
                "checkpoint was trained for {} objects, scene has {}",
                meta[3], scene.num_objects
            )));
        }
        let stored_mode = if meta[4] == 0.0 { SimMode::TwoD } else { SimMode::ThreeD };
        if stored_mode != scene.mode {
            return Err(Error::InvalidConfig("checkpoint/scene mode mismatch".into()));
        }
        let mut model = EstimatorModel::new(scene, camera, init_mode, &strategy, 0)?;
        model.params.load_values_from(&stored)?;
        Ok((model, strategy))
    }

    /// Frame-0 depth inputs carried forward for later lifts in
    /// depth-conditioned mode.
    fn carried_depth(&self, obs0: &Observation) -> Result<Option<Vec<f64>>> {
        if self.init_mode != InitMode::ScreenPlusDepth {
            return Ok(None);
        }
        let samples = obs0.depth_samples.as_ref().ok_or(Error::MissingDepth(0))?;
        let mut out = Vec::with_capacity(samples.len());
        for (o, s) in samples.iter().enumerate() {
            out.push(s.ok_or(Error::MissingDepth(o))?);
        }
        Ok(Some(out))
    }
}

/// Everything the estimator needs from one stored episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeView<'a> {
    pub observations: &'a [Observation],
    pub truth: &'a [Vec<BodyState>],
}

impl<'a> EpisodeView<'a> {
    fn gt_z(&self, frame: usize) -> Result<Vec<f64>> {
        let states = self.truth.get(frame).ok_or_else(|| {
            Error::LengthMismatch(format!("ground-truth z requested for missing frame {frame}"))
        })?;
        Ok(states.iter().map(|b| b.position.z).collect())
    }
}

struct BurnInNodes {
    /// Estimator state per burn-in frame (frame 0 is the lifted observation).
    states: Vec<Value>,
    /// s_pred for frames 1..n.
    s_preds: Vec<Value>,
    /// Masked s_obs for frames 1..n.
    s_obs: Vec<Value>,
    /// K for frames 1..n.
    gains: Vec<Value>,
    hidden: Option<Value>,
}

fn visibility_mask3(obs: &Observation) -> Vec<f64> {
    obs.visibility
        .iter()
        .flat_map(|&v| {
            let m = if v { 1.0 } else { 0.0 };
            [m, m, m]
        })
        .collect()
}

/// Build the burn-in recursion on a graph. Per frame t >= 1:
/// s_pred = step(state), s_obs = lift(obs_t) with invisible objects falling
/// back to the prediction, K from the strategy, state = fuse.
fn build_burn_in(
    g: &mut Graph,
    model: &EstimatorModel,
    strategy: &GainStrategy,
    view: &EpisodeView,
    burn_in: usize,
) -> Result<BurnInNodes> {
    if burn_in == 0 || view.observations.len() < burn_in {
        return Err(Error::LengthMismatch(format!(
            "burn-in {burn_in} over {} observations",
            view.observations.len()
        )));
    }
    let n = model.scene.num_objects;
    let set = &model.params;
    let dt = model.scene.dt;
    let carried = model.carried_depth(&view.observations[0])?;

    let gt_z0 = match model.init_mode {
        InitMode::GroundtruthZ => Some(view.gt_z(0)?),
        _ => None,
    };
    let pos0 = model.init_net.lift_positions_graph(
        g,
        set,
        &view.observations[0],
        model.init_mode,
        None,
        gt_z0.as_deref(),
    )?;
    let vel0 = g.constant(vec![0.0; 3 * n]);
    let state0 = g.concat(&[pos0, vel0]);

    let mut nodes = BurnInNodes {
        states: vec![state0],
        s_preds: Vec::new(),
        s_obs: Vec::new(),
        gains: Vec::new(),
        hidden: None,
    };
    if strategy == &GainStrategy::Learned {
        nodes.hidden = Some(g.constant(vec![0.0; GAIN_HIDDEN]));
    }

    for t in 1..burn_in {
        let prev = *nodes.states.last().unwrap();
        let s_pred = g.nbody_step(prev, &model.scene).map_err(|e| at_frame(e, t))?;

        let obs = &view.observations[t];
        let gt_z = match model.init_mode {
            InitMode::GroundtruthZ => Some(view.gt_z(t)?),
            _ => None,
        };
        let pos_net = model
            .init_net
            .lift_positions_graph(g, set, obs, model.init_mode, carried.as_deref(), gt_z.as_deref())
            .map_err(|e| at_frame(e, t))?;
        // Objects without a visible observation keep the predicted position,
        // which also reduces their finite-difference velocity to the
        // predicted velocity.
        let pred_pos = g.slice(s_pred, 0, 3 * n)?;
        let mask = g.constant(visibility_mask3(obs));
        let pos_obs = g.fuse(pred_pos, pos_net, mask)?;
        let prev_pos = g.slice(prev, 0, 3 * n)?;
        let delta = g.sub(pos_obs, prev_pos)?;
        let vel_obs = g.affine(delta, 1.0 / dt, 0.0);
        let s_obs = g.concat(&[pos_obs, vel_obs]);

        let gain = match strategy {
            GainStrategy::ConstantK(k) => g.constant(vec![*k; 6 * n]),
            GainStrategy::Learned => {
                let gain_net = model.gain.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("learned gain requested but the model has no gain network".into())
                })?;
                let z_obs = model.codec.encode_graph(g, set, s_obs, n)?;
                let z_pred = model.codec.encode_graph(g, set, s_pred, n)?;
                let hidden = nodes.hidden.unwrap();
                let (k, new_hidden) = gain_net.compute_graph(g, set, z_obs, z_pred, hidden)?;
                nodes.hidden = Some(new_hidden);
                k
            }
        };
        let fused = g.fuse(s_pred, s_obs, gain)?;
        nodes.states.push(fused);
        nodes.s_preds.push(s_pred);
        nodes.s_obs.push(s_obs);
        nodes.gains.push(gain);
    }
    Ok(nodes)
}

fn at_frame(e: Error, frame: usize) -> Error {
    match e {
        Error::DegenerateGeometry(msg) => Error::DegenerateGeometry(format!("frame {frame}: {msg}")),
        other => other,
    }
}

fn build_rollout(g: &mut Graph, scene: &SceneConfig, start: Value, frames: usize) -> Result<Vec<Value>> {
    let mut out = Vec::with_capacity(frames);
    let mut state = start;
    for k in 0..frames {
        state = g.nbody_step(state, scene).map_err(|e| at_frame(e, k))?;
        out.push(state);
    }
    Ok(out)
}

/// One dynamics step of the current state; this is s_pred for the next frame.
pub fn predict(state: &EstimatorState, config: &SceneConfig) -> Result<SymbolicState> {
    Ok(SymbolicState::new(dynamics::step(&state.current_symbolic.bodies, config)?))
}

/// Per-coordinate blend `s_pred + K (s_obs - s_pred)`; exact at the
/// endpoints K = 0 and K = 1.
pub fn fuse(s_pred: &SymbolicState, s_obs: &SymbolicState, gain: &[f64]) -> Result<SymbolicState> {
    let a = s_pred.to_flat();
    let b = s_obs.to_flat();
    if a.len() != b.len() || a.len() != gain.len() {
        return Err(Error::ShapeMismatch(format!(
            "fuse: pred {}, obs {}, gain {}",
            a.len(),
            b.len(),
            gain.len()
        )));
    }
    let fused: Vec<f64> = a
        .iter()
        .zip(&b)
        .zip(gain)
        .map(|((&x, &y), &k)| crate::nn::fuse_coord(x, y, k))
        .collect();
    Ok(SymbolicState::from_flat(&fused))
}

/// Gain for one frame. Constant strategies broadcast k and leave the hidden
/// state untouched; the learned strategy runs the gain network.
pub fn compute_gain(
    strategy: &GainStrategy,
    model: &EstimatorModel,
    z_obs: &LatentState,
    z_pred: &LatentState,
    gru_hidden: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    strategy.validate()?;
    let n = model.scene.num_objects;
    match strategy {
        GainStrategy::ConstantK(k) => Ok((vec![*k; 6 * n], gru_hidden.to_vec())),
        GainStrategy::Learned => {
            let gain_net = model
                .gain
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("model has no gain network".into()))?;
            if z_obs.z_position.len() != n * LATENT_DIM || z_pred.z_position.len() != n * LATENT_DIM {
                return Err(Error::ShapeMismatch("compute_gain: latent width".into()));
            }
            let mut g = Graph::inference();
            let zo = (g.constant(z_obs.z_position.clone()), g.constant(z_obs.z_velocity.clone()));
            let zp = (g.constant(z_pred.z_position.clone()), g.constant(z_pred.z_velocity.clone()));
            let h = g.constant(gru_hidden.to_vec());
            let (k, h2) = gain_net.compute_graph(&mut g, &model.params, zo, zp, h)?;
            Ok((g.data(k).to_vec(), g.data(h2).to_vec()))
        }
    }
}

/// Lift one observation to a full symbolic state: positions through the
/// lifting network, velocities by backward finite differences against the
/// previous fused position (zero when there is no previous state).
pub fn lift_observation(
    obs: &Observation,
    model: &EstimatorModel,
    prev_state: Option<&EstimatorState>,
    gt_z: Option<&[f64]>,
    carried_depth: Option<&[f64]>,
) -> Result<SymbolicState> {
    let n = model.scene.num_objects;
    let mut g = Graph::inference();
    let pos = model.init_net.lift_positions_graph(
        &mut g,
        &model.params,
        obs,
        model.init_mode,
        carried_depth,
        gt_z,
    )?;
    let pos = g.data(pos).to_vec();
    let mut flat = vec![0.0; 6 * n];
    flat[..3 * n].copy_from_slice(&pos);
    if let Some(prev) = prev_state {
        let prev_flat = prev.current_symbolic.to_flat();
        for i in 0..3 * n {
            flat[3 * n + i] = (pos[i] - prev_flat[i]) / model.scene.dt;
        }
    }
    Ok(SymbolicState::from_flat(&flat))
}

/// Run the burn-in recursion over `burn_in` observation frames. Returns the
/// final estimator state and the per-frame (s_pred, s_obs, K) records.
pub fn burn_in(
    model: &EstimatorModel,
    strategy: &GainStrategy,
    view: &EpisodeView,
    burn_in_frames: usize,
) -> Result<(EstimatorState, Vec<FrameRecord>)> {
    strategy.validate()?;
    let mut g = Graph::inference();
    let nodes = build_burn_in(&mut g, model, strategy, view, burn_in_frames)?;
    let final_state = SymbolicState::from_flat(g.data(*nodes.states.last().unwrap()));
    let latent = codec::encode(&final_state, &model.codec, &model.params)?;
    let hidden = nodes
        .hidden
        .map(|h| g.data(h).to_vec())
        .unwrap_or_else(|| vec![0.0; GAIN_HIDDEN]);
    let records = (1..burn_in_frames)
        .map(|t| FrameRecord {
            frame_index: t,
            s_pred: SymbolicState::from_flat(g.data(nodes.s_preds[t - 1])),
            s_obs: SymbolicState::from_flat(g.data(nodes.s_obs[t - 1])),
            gain: g.data(nodes.gains[t - 1]).to_vec(),
        })
        .collect();
    Ok((
        EstimatorState {
            current_symbolic: final_state,
            current_latent: latent,
            gru_hidden: hidden,
            frame_index: burn_in_frames - 1,
        },
        records,
    ))
}

/// Autoregressive continuation: `frames` successive dynamics steps with no
/// observations; identical to `dynamics::simulate` from the same state.
pub fn rollout(state: &EstimatorState, frames: usize, config: &SceneConfig) -> Result<Vec<SymbolicState>> {
    let mut out = Vec::with_capacity(frames);
    let mut bodies = state.current_symbolic.bodies.clone();
    for k in 0..frames {
        bodies = dynamics::step(&bodies, config).map_err(|e| at_frame(e, k))?;
        out.push(SymbolicState::new(bodies.clone()));
    }
    Ok(out)
}

/// Loss weights; the unweighted default matches the combined objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub ae: f64,
    pub obs: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rec: 1.0, ae: 1.0, obs: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub burn_in: usize,
    pub unroll: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub weights: LossWeights,
    /// Adds a direct MSE to ground-truth states over the burn-in frames.
    pub supervised: bool,
    /// Compute per-episode gradients of a batch in parallel (results are
    /// reduced in episode order either way).
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 16,
            burn_in: 6,
            unroll: 6,
            seed: 1,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            supervised: false,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub loss_curve: Vec<f64>,
}

/// Total training loss for one episode; also returns the scalar value.
fn build_training_loss(
    g: &mut Graph,
    model: &EstimatorModel,
    strategy: &GainStrategy,
    view: &EpisodeView,
    cfg: &TrainConfig,
) -> Result<Value> {
    let n = model.scene.num_objects;
    let total_frames = cfg.burn_in + cfg.unroll;
    if view.observations.len() < total_frames {
        return Err(Error::LengthMismatch(format!(
            "episode has {} observation frames, training needs {total_frames}",
            view.observations.len()
        )));
    }
    let nodes = build_burn_in(g, model, strategy, view, cfg.burn_in)?;
    let unrolled = build_rollout(g, &model.scene, *nodes.states.last().unwrap(), cfg.unroll)?;

    let mut terms: Vec<(Value, f64)> = Vec::new();

    // Reprojection on every frame's positions against its observation.
    if cfg.weights.rec != 0.0 {
        let mut rec_terms = Vec::with_capacity(total_frames);
        for (t, state) in nodes.states.iter().chain(&unrolled).enumerate() {
            let obs = &view.observations[t];
            let pos = g.slice(*state, 0, 3 * n)?;
            rec_terms.push((g.reproj_loss(pos, &obs.screen_coords, &obs.visibility, &model.camera)?, 1.0));
        }
        let scale = 1.0 / rec_terms.len() as f64;
        let rec_terms: Vec<(Value, f64)> = rec_terms.into_iter().map(|(v, _)| (v, scale)).collect();
        let l_rec = g.sum_scaled(&rec_terms)?;
        terms.push((l_rec, cfg.weights.rec));
    }

    // Observation alignment during burn-in.
    if cfg.weights.obs != 0.0 && cfg.burn_in > 1 {
        let mut obs_terms = Vec::new();
        for (sp, so) in nodes.s_preds.iter().zip(&nodes.s_obs) {
            obs_terms.push(g.mse(*sp, *so)?);
        }
        let scale = 1.0 / obs_terms.len() as f64;
        let obs_terms: Vec<(Value, f64)> = obs_terms.into_iter().map(|v| (v, scale)).collect();
        let l_obs = g.sum_scaled(&obs_terms)?;
        terms.push((l_obs, cfg.weights.obs));
    }

    // Auto-encoder round trip on the fused states.
    if cfg.weights.ae != 0.0 && cfg.burn_in > 1 {
        let mut ae_terms = Vec::new();
        for state in &nodes.states[1..] {
            ae_terms.push(model.codec.loss_ae_graph(g, &model.params, *state, n)?);
        }
        let scale = 1.0 / ae_terms.len() as f64;
        let ae_terms: Vec<(Value, f64)> = ae_terms.into_iter().map(|v| (v, scale)).collect();
        let l_ae = g.sum_scaled(&ae_terms)?;
        terms.push((l_ae, cfg.weights.ae));
    }

    // Optional direct state supervision over the burn-in frames.
    if cfg.supervised {
        if view.truth.len() < cfg.burn_in {
            return Err(Error::LengthMismatch("supervision needs ground-truth frames".into()));
        }
        let mut sup_terms = Vec::new();
        for (t, state) in nodes.states.iter().enumerate() {
            let target = g.constant(crate::nn::bodies_to_flat(&view.truth[t]));
            sup_terms.push(g.mse(*state, target)?);
        }
        let scale = 1.0 / sup_terms.len() as f64;
        let sup_terms: Vec<(Value, f64)> = sup_terms.into_iter().map(|v| (v, scale)).collect();
        let l_sup = g.sum_scaled(&sup_terms)?;
        terms.push((l_sup, 1.0));
    }

    g.sum_scaled(&terms)
}

fn episode_gradient(
    model: &EstimatorModel,
    strategy: &GainStrategy,
    view: &EpisodeView,
    cfg: &TrainConfig,
) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new();
    let loss = build_training_loss(&mut g, model, strategy, view, cfg)?;
    let value = g.scalar(loss);
    g.backward(loss)?;
    let mut grads = model.params.zero_grads();
    g.accumulate_param_grads(&mut grads);
    Ok((value, grads))
}

/// Mini-batch training loop. Batch episodes are sampled with replacement
/// from a seeded stream; per-episode gradients are averaged in episode order
/// so the result does not depend on the parallel execution schedule.
pub fn train(
    model: &mut EstimatorModel,
    strategy: &GainStrategy,
    episodes: &[EpisodeView],
    cfg: &TrainConfig,
) -> Result<TrainStats> {
    strategy.validate()?;
    if episodes.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one episode".into()));
    }
    if strategy == &GainStrategy::Learned && model.gain.is_none() {
        return Err(Error::InvalidConfig("learned gain requested but the model has no gain network".into()));
    }
    let mut opt = OptimizerState::adam(&model.params, cfg.learning_rate);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut loss_curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.gen_range(0..episodes.len())).collect();

        let results: Vec<Result<(f64, ParamGrads)>> = {
            #[cfg(feature = "parallel")]
            {
                if cfg.parallel {
                    use rayon::prelude::*;
                    batch
                        .par_iter()
                        .map(|&i| episode_gradient(model, strategy, &episodes[i], cfg))
                        .collect()
                } else {
                    batch.iter().map(|&i| episode_gradient(model, strategy, &episodes[i], cfg)).collect()
                }
            }
            #[cfg(not(feature = "parallel"))]
            {
                batch.iter().map(|&i| episode_gradient(model, strategy, &episodes[i], cfg)).collect()
            }
        };

        let mut grads = model.params.zero_grads();
        let mut loss_sum = 0.0;
        for r in results {
            let (loss, g) = r?;
            loss_sum += loss;
            for (acc, part) in grads.iter_mut().zip(&g) {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a += p;
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mean_loss = loss_sum * inv;
        if !mean_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        for tensor in grads.iter_mut() {
            for v in tensor.iter_mut() {
                *v *= inv;
            }
        }
        opt.step(&mut model.params, &grads)?;
        loss_curve.push(mean_loss);
    }
    Ok(TrainStats { loss_curve })
}

/// Burn-in plus rollout of one episode with frozen parameters.
#[derive(Debug, Clone)]
pub struct EpisodeEval {
    /// Estimator states during burn-in (length = burn-in frames).
    pub burn_in_states: Vec<SymbolicState>,
    /// Predicted states for the rollout frames.
    pub rollout_states: Vec<SymbolicState>,
    /// K per fusion frame.
    pub gains: Vec<Vec<f64>>,
}

pub fn run_episode(
    model: &EstimatorModel,
    strategy: &GainStrategy,
    view: &EpisodeView,
    burn_in_frames: usize,
    rollout_frames: usize,
) -> Result<EpisodeEval> {
    let mut g = Graph::inference();
    let nodes = build_burn_in(&mut g, model, strategy, view, burn_in_frames)?;
    let rolled = build_rollout(&mut g, &model.scene, *nodes.states.last().unwrap(), rollout_frames)?;
    Ok(EpisodeEval {
        burn_in_states: nodes.states.iter().map(|s| SymbolicState::from_flat(g.data(*s))).collect(),
        rollout_states: rolled.iter().map(|s| SymbolicState::from_flat(g.data(*s))).collect(),
        gains: nodes.gains.iter().map(|k| g.data(*k).to_vec()).collect(),
    })
}
