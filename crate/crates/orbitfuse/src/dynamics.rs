//! Orbits N-body dynamics: pairwise inverse-square attraction between equal
//! masses plus a guidance pull toward a fixed point, integrated with
//! semi-implicit (symplectic) Euler. The 2D variant zeroes the z component of
//! the total force so motion stays in the initial plane; the 3D variant swaps
//! the inverse-square guidance for a spring-like pull proportional to the
//! offset from the guidance point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 3-component world-space vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Position and velocity of one object, in world units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyState {
    pub position: Vec3,
    pub velocity: Vec3,
}

impl BodyState {
    pub fn new(position: Vec3, velocity: Vec3) -> Self {
        BodyState { position, velocity }
    }
}

/// Whether motion is constrained to the x/y plane or free in all three axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimMode {
    TwoD,
    ThreeD,
}

/// Physical constants and integration settings for one scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Gravitational constant g.
    pub gravitational_constant: f64,
    /// Mass m shared by every object.
    pub object_mass: f64,
    /// Mass m_g of the invisible guidance object (2D variant).
    pub guidance_mass: f64,
    /// Location p_g of the guidance pull; the camera sits here.
    pub guidance_point: Vec3,
    /// Linear pull coefficient for the 3D variant.
    pub guidance_coefficient_3d: f64,
    /// Integration step.
    pub dt: f64,
    /// Number of objects N.
    pub num_objects: usize,
    pub mode: SimMode,
    /// Distances below this are clamped inside the inverse-square laws.
    /// Zero disables softening: coincident points become an error instead.
    pub softening_epsilon: f64,
}

impl SceneConfig {
    pub fn orbits_2d() -> Self {
        SceneConfig {
            gravitational_constant: 7.0,
            object_mass: 1.5,
            guidance_mass: 2.0,
            guidance_point: Vec3::ZERO,
            guidance_coefficient_3d: 0.6,
            dt: 0.05,
            num_objects: 4,
            mode: SimMode::TwoD,
            softening_epsilon: 1e-3,
        }
    }

    pub fn orbits_3d() -> Self {
        SceneConfig { mode: SimMode::ThreeD, ..Self::orbits_2d() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gravitational_constant > 0.0
            && self.object_mass > 0.0
            && self.guidance_mass > 0.0
            && self.dt > 0.0
            && self.num_objects >= 1
            && self.softening_epsilon >= 0.0
            && self.guidance_point.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("scene config out of range: {self:?}")))
        }
    }
}

/// A simulated sequence of per-object states, frame 0 being the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub frames: Vec<Vec<BodyState>>,
    pub config: SceneConfig,
}

/// Softened distance used inside the inverse-square laws. With softening
/// disabled (epsilon == 0) a coincident pair is unrecoverable and errors out.
fn soften(d: f64, epsilon: f64, what: &str) -> Result<f64> {
    if epsilon > 0.0 {
        Ok(d.max(epsilon))
    } else if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::DegenerateGeometry(format!("{what}: coincident points with softening disabled")))
    }
}

/// Pairwise attraction on each object: sum over i != n of
/// unit(p_i - p_n) * g * m^2 / |p_i - p_n|^2, with the softened distance
/// substituted into both the unit vector and the inverse square.
pub fn mutual_force(states: &[BodyState], config: &SceneConfig) -> Result<Vec<Vec3>> {
    let gamma = config.gravitational_constant * config.object_mass * config.object_mass;
    let eps = config.softening_epsilon;
    let mut forces = vec![Vec3::ZERO; states.len()];
    for n in 0..states.len() {
        for i in (n + 1)..states.len() {
            let d_vec = states[i].position - states[n].position;
            let d = soften(d_vec.norm(), eps, "mutual_force")?;
            let f = d_vec * (gamma / (d * d * d));
            forces[n] = forces[n] + f;
            forces[i] = forces[i] - f;
        }
    }
    Ok(forces)
}

/// Guidance pull toward `config.guidance_point`. 2D: inverse-square law with
/// the guidance mass; 3D: linear in the offset.
pub fn guidance_force(state: &BodyState, config: &SceneConfig) -> Result<Vec3> {
    let d_vec = config.guidance_point - state.position;
    match config.mode {
        SimMode::TwoD => {
            let gamma = config.gravitational_constant * config.object_mass * config.guidance_mass;
            let d = soften(d_vec.norm(), config.softening_epsilon, "guidance_force")?;
            Ok(d_vec * (gamma / (d * d * d)))
        }
        SimMode::ThreeD => Ok(d_vec * config.guidance_coefficient_3d),
    }
}

/// One semi-implicit Euler step: total force (z zeroed in 2D mode), then
/// v' = v + dt * F/m, then p' = p + dt * v'. The velocity-first order is
/// normative.
pub fn step(states: &[BodyState], config: &SceneConfig) -> Result<Vec<BodyState>> {
    let mutual = mutual_force(states, config)?;
    let dt = config.dt;
    let inv_m = 1.0 / config.object_mass;
    let mut out = Vec::with_capacity(states.len());
    for (state, fm) in states.iter().zip(&mutual) {
        let mut force = *fm + guidance_force(state, config)?;
        if config.mode == SimMode::TwoD {
            force.z = 0.0;
        }
        let velocity = state.velocity + force * (dt * inv_m);
        let position = state.position + velocity * dt;
        out.push(BodyState { position, velocity });
    }
    Ok(out)
}

/// Iterate `step`, recording `num_frames` frames with frame 0 equal to the
/// initial state.
pub fn simulate(initial: &[BodyState], config: &SceneConfig, num_frames: usize) -> Result<Trajectory> {
    if num_frames == 0 {
        return Err(Error::InvalidConfig("simulate requires num_frames >= 1".into()));
    }
    if initial.len() != config.num_objects {
        return Err(Error::LengthMismatch(format!(
            "simulate: {} initial states for num_objects {}",
            initial.len(),
            config.num_objects
        )));
    }
    let mut frames = Vec::with_capacity(num_frames);
    frames.push(initial.to_vec());
    for k in 1..num_frames {
        let next = step(frames.last().unwrap(), config).map_err(|e| match e {
            Error::DegenerateGeometry(msg) => Error::DegenerateGeometry(format!("frame {k}: {msg}")),
            other => other,
        })?;
        frames.push(next);
    }
    Ok(Trajectory { frames, config: *config })
}

/// Total mechanical energy: kinetic plus the pairwise and guidance potentials
/// matching the force laws (inverse-square potentials in 2D, a quadratic bowl
/// in 3D). Used by the integrator drift checks.
pub fn total_energy(states: &[BodyState], config: &SceneConfig) -> f64 {
    let g = config.gravitational_constant;
    let m = config.object_mass;
    let mut e = 0.0;
    for s in states {
        e += 0.5 * m * s.velocity.norm_sq();
    }
    for n in 0..states.len() {
        for i in (n + 1)..states.len() {
            let d = (states[i].position - states[n].position).norm();
            e -= g * m * m / d;
        }
    }
    for s in states {
        let d_vec = config.guidance_point - s.position;
        match config.mode {
            SimMode::TwoD => e -= g * m * config.guidance_mass / d_vec.norm(),
            SimMode::ThreeD => e += 0.5 * config.guidance_coefficient_3d * d_vec.norm_sq(),
        }
    }
    e
}
