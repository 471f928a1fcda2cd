//! Symbolic <-> latent codecs and the training losses. Position and velocity
//! each get their own pair of single-hidden-layer MLPs (3 -> 64 -> 32 in,
//! 32 -> 64 -> 3 out) so the transformation of one variable can never leak
//! into the other. The lifting network maps per-object screen input
//! ((u, v) or (u, v, depth)) to a world-position estimate.

use rand::Rng;

use crate::camera::{CameraConfig, Observation};
use crate::dynamics::BodyState;
use crate::error::{Error, Result};
use crate::nn::{bodies_to_flat, flat_to_bodies, Activation, DenseLayer, Graph, ParamSet, Value};

/// Coordinates per state variable.
pub const SYMBOLIC_DIM: usize = 3;
/// Latent width per state variable.
pub const LATENT_DIM: usize = 32;
/// Hidden width of every codec MLP.
pub const CODEC_HIDDEN: usize = 64;
/// Hidden width of the lifting network.
pub const INIT_HIDDEN: usize = 64;

/// Per-object physical state in world units; the quantity the estimator
/// tracks and the metrics compare.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicState {
    pub bodies: Vec<BodyState>,
}

impl SymbolicState {
    pub fn new(bodies: Vec<BodyState>) -> Self {
        SymbolicState { bodies }
    }

    pub fn num_objects(&self) -> usize {
        self.bodies.len()
    }

    /// Flat layout [all positions (3N) | all velocities (3N)], the layout
    /// every graph-side state node uses.
    pub fn to_flat(&self) -> Vec<f64> {
        bodies_to_flat(&self.bodies)
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len() % 6, 0);
        SymbolicState { bodies: flat_to_bodies(flat, flat.len() / 6) }
    }
}

/// Latent encoding, one vector per variable per object (row-major over
/// objects: object 0's 32 values first).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z_position: Vec<f64>,
    pub z_velocity: Vec<f64>,
}

/// How observations are lifted to world space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InitMode {
    /// Lift from (u, v) alone.
    ScreenOnly,
    /// Lift from (u, v, depth sample).
    ScreenPlusDepth,
    /// Lift (x, y) from the network, overwrite z with the true value.
    GroundtruthZ,
}

impl InitMode {
    pub fn input_width(self) -> usize {
        match self {
            InitMode::ScreenOnly | InitMode::GroundtruthZ => 2,
            InitMode::ScreenPlusDepth => 3,
        }
    }
}

/// Single-hidden-layer MLP with ReLU on the hidden layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: DenseLayer,
    pub out: DenseLayer,
}

impl Mlp {
    fn init<R: Rng>(
        set: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            hidden: DenseLayer::init(set, &format!("{name}/hidden"), in_dim, hidden_dim, Activation::Relu, rng),
            out: DenseLayer::init(set, &format!("{name}/out"), hidden_dim, out_dim, Activation::None, rng),
        }
    }

    pub fn forward_blocks(&self, g: &mut Graph, set: &ParamSet, x: Value, blocks: usize) -> Result<Value> {
        let h = self.hidden.forward_blocks(g, set, x, blocks)?;
        self.out.forward_blocks(g, set, h, blocks)
    }
}

/// The four codec networks. Position and velocity networks share no
/// parameters.
#[derive(Debug, Clone)]
pub struct CodecParams {
    pub in_position: Mlp,
    pub in_velocity: Mlp,
    pub out_position: Mlp,
    pub out_velocity: Mlp,
}

impl CodecParams {
    pub fn init<R: Rng>(set: &mut ParamSet, rng: &mut R) -> Self {
        CodecParams {
            in_position: Mlp::init(set, "codec/in_p", SYMBOLIC_DIM, CODEC_HIDDEN, LATENT_DIM, rng),
            in_velocity: Mlp::init(set, "codec/in_v", SYMBOLIC_DIM, CODEC_HIDDEN, LATENT_DIM, rng),
            out_position: Mlp::init(set, "codec/out_p", LATENT_DIM, CODEC_HIDDEN, SYMBOLIC_DIM, rng),
            out_velocity: Mlp::init(set, "codec/out_v", LATENT_DIM, CODEC_HIDDEN, SYMBOLIC_DIM, rng),
        }
    }

    /// Encode a flat state node into (z_position, z_velocity) nodes of
    /// length N * LATENT_DIM each.
    pub fn encode_graph(&self, g: &mut Graph, set: &ParamSet, state: Value, n: usize) -> Result<(Value, Value)> {
        let pos = g.slice(state, 0, 3 * n)?;
        let vel = g.slice(state, 3 * n, 3 * n)?;
        let z_pos = self.in_position.forward_blocks(g, set, pos, n)?;
        let z_vel = self.in_velocity.forward_blocks(g, set, vel, n)?;
        Ok((z_pos, z_vel))
    }

    /// Decode latent nodes back to a flat state node.
    pub fn decode_graph(&self, g: &mut Graph, set: &ParamSet, z_pos: Value, z_vel: Value, n: usize) -> Result<Value> {
        let pos = self.out_position.forward_blocks(g, set, z_pos, n)?;
        let vel = self.out_velocity.forward_blocks(g, set, z_vel, n)?;
        Ok(g.concat(&[pos, vel]))
    }

    /// Round-trip penalty `mse(decode(encode(state)), state)` as a graph node.
    pub fn loss_ae_graph(&self, g: &mut Graph, set: &ParamSet, state: Value, n: usize) -> Result<Value> {
        let (z_pos, z_vel) = self.encode_graph(g, set, state, n)?;
        let rec = self.decode_graph(g, set, z_pos, z_vel, n)?;
        g.mse(rec, state)
    }
}

/// Observation-lifting network.
#[derive(Debug, Clone)]
pub struct InitNet {
    pub net: Mlp,
    pub input_width: usize,
}

impl InitNet {
    pub fn init<R: Rng>(set: &mut ParamSet, mode: InitMode, rng: &mut R) -> Self {
        let width = mode.input_width();
        InitNet {
            net: Mlp::init(set, "init/lift", width, INIT_HIDDEN, SYMBOLIC_DIM, rng),
            input_width: width,
        }
    }

    /// Lift one observation to per-object world positions (a 3N node).
    /// `carried_depth` supplies the per-object depth input on frames past the
    /// first, where no fresh depth samples exist; `gt_z` is required (and
    /// only used) in ground-truth-z mode.
    pub fn lift_positions_graph(
        &self,
        g: &mut Graph,
        set: &ParamSet,
        obs: &Observation,
        mode: InitMode,
        carried_depth: Option<&[f64]>,
        gt_z: Option<&[f64]>,
    ) -> Result<Value> {
        let n = obs.screen_coords.len();
        let mut input = Vec::with_capacity(n * self.input_width);
        for (o, &(u, v)) in obs.screen_coords.iter().enumerate() {
            input.push(u);
            input.push(v);
            if mode == InitMode::ScreenPlusDepth {
                let fresh = obs.depth_samples.as_ref().and_then(|d| d[o]);
                let carried = carried_depth.and_then(|c| c.get(o).copied());
                input.push(fresh.or(carried).ok_or(Error::MissingDepth(o))?);
            }
        }
        let x = g.constant(input);
        let raw = self.net.forward_blocks(g, set, x, n)?;
        if mode == InitMode::GroundtruthZ {
            let z = gt_z.ok_or(Error::MissingGroundtruthZ(0))?;
            if z.len() != n {
                return Err(Error::MissingGroundtruthZ(z.len().min(n)));
            }
            // Keep the network's (x, y), overwrite z.
            let mut mask = Vec::with_capacity(3 * n);
            let mut add = Vec::with_capacity(3 * n);
            for &zo in z {
                mask.extend_from_slice(&[1.0, 1.0, 0.0]);
                add.extend_from_slice(&[0.0, 0.0, zo]);
            }
            let mask = g.constant(mask);
            let add = g.constant(add);
            let masked = g.mul(raw, mask)?;
            return g.add(masked, add);
        }
        Ok(raw)
    }
}

/// Per-object independent encode.
pub fn encode(s: &SymbolicState, codec: &CodecParams, set: &ParamSet) -> Result<LatentState> {
    let n = s.num_objects();
    let mut g = Graph::inference();
    let state = g.constant(s.to_flat());
    let (z_pos, z_vel) = codec.encode_graph(&mut g, set, state, n)?;
    Ok(LatentState { z_position: g.data(z_pos).to_vec(), z_velocity: g.data(z_vel).to_vec() })
}

/// Per-object independent decode.
pub fn decode(z: &LatentState, codec: &CodecParams, set: &ParamSet) -> Result<SymbolicState> {
    assert_eq!(z.z_position.len(), z.z_velocity.len());
    let n = z.z_position.len() / LATENT_DIM;
    let mut g = Graph::inference();
    let z_pos = g.constant(z.z_position.clone());
    let z_vel = g.constant(z.z_velocity.clone());
    let state = codec.decode_graph(&mut g, set, z_pos, z_vel, n)?;
    Ok(SymbolicState::from_flat(g.data(state)))
}

/// Initial state from the first observation: lifted positions, zero
/// velocities.
pub fn init_state(
    obs0: &Observation,
    net: &InitNet,
    set: &ParamSet,
    mode: InitMode,
    gt_z: Option<&[f64]>,
) -> Result<SymbolicState> {
    let n = obs0.screen_coords.len();
    let mut g = Graph::inference();
    let pos = net.lift_positions_graph(&mut g, set, obs0, mode, None, gt_z)?;
    let mut flat = vec![0.0; 6 * n];
    flat[..3 * n].copy_from_slice(g.data(pos));
    Ok(SymbolicState::from_flat(&flat))
}

/// Mean squared difference over every coordinate of every object.
pub fn loss_obs(s_pred: &SymbolicState, s_obs: &SymbolicState) -> Result<f64> {
    if s_pred.num_objects() != s_obs.num_objects() {
        return Err(Error::LengthMismatch(format!(
            "loss_obs: {} vs {} objects",
            s_pred.num_objects(),
            s_obs.num_objects()
        )));
    }
    let a = s_pred.to_flat();
    let b = s_obs.to_flat();
    let n = a.len() as f64;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Auto-encoder round-trip penalty.
pub fn loss_ae(s: &SymbolicState, codec: &CodecParams, set: &ParamSet) -> Result<f64> {
    let mut g = Graph::inference();
    let state = g.constant(s.to_flat());
    let loss = codec.loss_ae_graph(&mut g, set, state, s.num_objects())?;
    Ok(g.scalar(loss))
}

/// Screen-space reprojection error of predicted positions against observed
/// coordinates; velocities never enter.
pub fn loss_rec(predicted: &SymbolicState, obs: &Observation, cam: &CameraConfig) -> Result<f64> {
    if predicted.num_objects() != obs.screen_coords.len() {
        return Err(Error::LengthMismatch(format!(
            "loss_rec: {} predicted vs {} observed objects",
            predicted.num_objects(),
            obs.screen_coords.len()
        )));
    }
    let mut g = Graph::inference();
    let flat = predicted.to_flat();
    let pos = g.constant(flat[..3 * predicted.num_objects()].to_vec());
    let loss = g.reproj_loss(pos, &obs.screen_coords, &obs.visibility, cam)?;
    Ok(g.scalar(loss))
}

/// Unweighted sum of the three loss terms.
pub fn loss_total(rec: f64, ae: f64, obs: f64) -> f64 {
    rec + ae + obs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Vec3;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn sample_state(n: usize, seed: u64) -> SymbolicState {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let bodies = (0..n)
            .map(|_| {
                BodyState::new(
                    Vec3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(6.0..14.0)),
                    Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)),
                )
            })
            .collect();
        SymbolicState::new(bodies)
    }

    fn fresh_codec(seed: u64) -> (ParamSet, CodecParams) {
        let mut set = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let codec = CodecParams::init(&mut set, &mut rng);
        (set, codec)
    }

    fn zero_params(set: &mut ParamSet) {
        for i in 0..set.len() {
            for v in set.data_mut(crate::nn::ParamId(i)) {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn permuting_objects_permutes_latents() {
        let (set, codec) = fresh_codec(1);
        let s = sample_state(3, 2);
        let mut permuted = s.clone();
        permuted.bodies.swap(0, 2);
        let z = encode(&s, &codec, &set).unwrap();
        let zp = encode(&permuted, &codec, &set).unwrap();
        assert_eq!(&z.z_position[0..32], &zp.z_position[64..96]);
        assert_eq!(&z.z_position[64..96], &zp.z_position[0..32]);
        assert_eq!(&z.z_velocity[32..64], &zp.z_velocity[32..64]);
    }

    #[test]
    fn velocity_perturbation_leaves_position_latent_bit_identical() {
        let (set, codec) = fresh_codec(3);
        let s = sample_state(2, 4);
        let mut perturbed = s.clone();
        perturbed.bodies[0].velocity.x += 10.0;
        perturbed.bodies[1].velocity.z -= 3.0;
        let z = encode(&s, &codec, &set).unwrap();
        let zp = encode(&perturbed, &codec, &set).unwrap();
        assert_eq!(z.z_position, zp.z_position);
        assert_ne!(z.z_velocity, zp.z_velocity);

        // Mirror on decode: perturbing z_velocity leaves positions alone.
        let mut z2 = z.clone();
        for v in z2.z_velocity.iter_mut() {
            *v += 0.5;
        }
        let d = decode(&z, &codec, &set).unwrap();
        let d2 = decode(&z2, &codec, &set).unwrap();
        for (a, b) in d.bodies.iter().zip(&d2.bodies) {
            assert_eq!(a.position, b.position);
        }
    }

    #[test]
    fn zero_parameter_codec_maps_everything_to_zero() {
        let (mut set, codec) = fresh_codec(5);
        zero_params(&mut set);
        let s = sample_state(2, 6);
        let z = encode(&s, &codec, &set).unwrap();
        assert!(z.z_position.iter().chain(&z.z_velocity).all(|&v| v == 0.0));
        let d = decode(&z, &codec, &set).unwrap();
        assert!(d.to_flat().iter().all(|&v| v == 0.0));
    }

    /// Hand-built exact identity codec. The encoder hidden layer splits x
    /// into [relu(x); relu(-x)] and its output layer copies those six lanes
    /// into the latent. The decoder hidden layer passes the (non-negative)
    /// latent through ReLU unchanged and its output layer recombines
    /// x = relu(x) - relu(-x).
    fn identity_codec() -> (ParamSet, CodecParams) {
        let (mut set, codec) = fresh_codec(0);
        let names: Vec<String> = set.entries().iter().map(|e| e.name.clone()).collect();
        for name in names {
            let id = set.find(&name).unwrap();
            let shape = set.entry(id).shape.clone();
            let data = set.data_mut(id);
            data.iter_mut().for_each(|v| *v = 0.0);
            if shape.len() != 2 {
                continue; // biases stay zero
            }
            let in_dim = shape[1];
            let encoder = name.contains("codec/in_");
            match (encoder, name.contains("/hidden/")) {
                (true, true) => {
                    // 3 -> 64: rows 0..3 = +I, rows 3..6 = -I
                    for c in 0..SYMBOLIC_DIM {
                        data[c * in_dim + c] = 1.0;
                        data[(SYMBOLIC_DIM + c) * in_dim + c] = -1.0;
                    }
                }
                (true, false) => {
                    // 64 -> 32: copy the six used lanes
                    for r in 0..2 * SYMBOLIC_DIM {
                        data[r * in_dim + r] = 1.0;
                    }
                }
                (false, true) => {
                    // 32 -> 64: identity on all latent lanes
                    for c in 0..LATENT_DIM {
                        data[c * in_dim + c] = 1.0;
                    }
                }
                (false, false) => {
                    // 64 -> 3: x = relu(x) - relu(-x)
                    for r in 0..SYMBOLIC_DIM {
                        data[r * in_dim + r] = 1.0;
                        data[r * in_dim + SYMBOLIC_DIM + r] = -1.0;
                    }
                }
            }
        }
        (set, codec)
    }

    #[test]
    fn identity_codec_has_zero_autoencoder_loss() {
        let (set, codec) = identity_codec();
        let s = sample_state(4, 7);
        let round = decode(&encode(&s, &codec, &set).unwrap(), &codec, &set).unwrap();
        for (a, b) in s.to_flat().iter().zip(round.to_flat()) {
            assert_abs_diff_eq!(a, &b, epsilon = 1e-15);
        }
        assert!(loss_ae(&s, &codec, &set).unwrap() < 1e-20);
    }

    #[test]
    fn loss_ae_is_non_negative() {
        let (set, codec) = fresh_codec(8);
        for seed in 0..5 {
            let s = sample_state(3, seed);
            assert!(loss_ae(&s, &codec, &set).unwrap() >= 0.0);
        }
    }

    #[test]
    fn loss_obs_examples() {
        let s = sample_state(1, 9);
        assert_eq!(loss_obs(&s, &s).unwrap(), 0.0);

        let mut shifted = s.clone();
        shifted.bodies[0].position.x += 2.0;
        // one coordinate off by 2 out of 6 coordinates -> 4/6
        assert_abs_diff_eq!(loss_obs(&s, &shifted).unwrap(), 4.0 / 6.0, epsilon = 1e-15);
        assert_eq!(loss_obs(&s, &shifted).unwrap(), loss_obs(&shifted, &s).unwrap());
    }

    #[test]
    fn loss_rec_examples() {
        let cam = CameraConfig::default();
        let s = SymbolicState::new(vec![BodyState::new(Vec3::new(0.5, -0.25, 10.0), Vec3::ZERO)]);
        let exact = crate::camera::project(s.bodies[0].position, &cam).unwrap();
        let obs = Observation {
            frame_index: 0,
            screen_coords: vec![(exact.u, exact.v)],
            depth_samples: None,
            visibility: vec![true],
        };
        assert_eq!(loss_rec(&s, &obs, &cam).unwrap(), 0.0);

        let obs_shifted = Observation {
            screen_coords: vec![(exact.u - 3.0, exact.v)],
            ..obs.clone()
        };
        assert_abs_diff_eq!(loss_rec(&s, &obs_shifted, &cam).unwrap(), 9.0 / 2.0, epsilon = 1e-12);

        // Velocities are invisible to the reprojection loss.
        let mut s_vel = s.clone();
        s_vel.bodies[0].velocity = Vec3::new(100.0, -50.0, 25.0);
        assert_eq!(
            loss_rec(&s, &obs_shifted, &cam).unwrap().to_bits(),
            loss_rec(&s_vel, &obs_shifted, &cam).unwrap().to_bits()
        );
    }

    #[test]
    fn loss_total_is_plain_sum() {
        assert_eq!(loss_total(1.0, 2.0, 3.0), 6.0);
        assert_eq!(loss_total(0.0, 2.5, 0.0), 2.5);
    }

    #[test]
    fn init_state_zero_net_gives_origin() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let net = InitNet::init(&mut set, InitMode::ScreenOnly, &mut rng);
        zero_params(&mut set);
        let obs = Observation {
            frame_index: 0,
            screen_coords: vec![(40.0, 20.0), (10.0, 50.0)],
            depth_samples: None,
            visibility: vec![true, true],
        };
        let s = init_state(&obs, &net, &set, InitMode::ScreenOnly, None).unwrap();
        assert!(s.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_state_missing_depth_names_object() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let net = InitNet::init(&mut set, InitMode::ScreenPlusDepth, &mut rng);
        let obs = Observation {
            frame_index: 0,
            screen_coords: vec![(40.0, 20.0), (10.0, 50.0)],
            depth_samples: Some(vec![Some(9.5), None]),
            visibility: vec![true, true],
        };
        match init_state(&obs, &net, &set, InitMode::ScreenPlusDepth, None) {
            Err(Error::MissingDepth(1)) => {}
            other => panic!("expected MissingDepth(1), got {other:?}"),
        }
    }

    #[test]
    fn groundtruth_z_overwrites_exactly() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let net = InitNet::init(&mut set, InitMode::GroundtruthZ, &mut rng);
        let obs = Observation {
            frame_index: 0,
            screen_coords: vec![(40.0, 20.0), (10.0, 50.0)],
            depth_samples: None,
            visibility: vec![true, true],
        };
        let gt = vec![9.25, 11.5];
        let s = init_state(&obs, &net, &set, InitMode::GroundtruthZ, Some(&gt)).unwrap();
        assert_eq!(s.bodies[0].position.z, 9.25);
        assert_eq!(s.bodies[1].position.z, 11.5);
        assert!(matches!(
            init_state(&obs, &net, &set, InitMode::GroundtruthZ, None),
            Err(Error::MissingGroundtruthZ(_))
        ));
    }
}
