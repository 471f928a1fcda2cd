//! Episode generation and the on-disk dataset layout: a JSON manifest plus
//! one binary file per episode (header, ground-truth states, observations,
//! optional frame-0 depth map, all little-endian).
//!
//! Seeds: episode slot `i` draws candidate seeds from stream `i + 1` of a
//! ChaCha20 generator keyed with the master seed. A candidate is rejected
//! and the next seed drawn when the simulation degenerates (any pairwise or
//! guidance distance at or below the softening radius), when an object is
//! not visible at frame 0, or (3D) when a frame-0 depth sample misses every
//! sphere. Regeneration from (master seed, config) is therefore bit-exact
//! and independent of thread scheduling.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{observe, render_depth_map, CameraConfig, DepthMap, Observation};
use crate::dynamics::{simulate, BodyState, SceneConfig, SimMode, Trajectory, Vec3};
use crate::error::{Error, Result};

/// Frames per episode.
pub const EPISODE_FRAMES: usize = 30;
/// Initial positions are drawn uniformly within +/- this range per axis.
pub const POSITION_RANGE: f64 = 4.0;
/// The sampling box is centered at this distance in front of the camera.
pub const CAMERA_DISTANCE: f64 = 10.0;
/// Initial velocities are drawn uniformly within +/- this range per axis.
pub const VELOCITY_RANGE: f64 = 1.5;

const MAGIC: &[u8; 8] = b"ORBEPIS\x01";
const VERSION: u32 = 1;

/// Scene, camera, and observation-noise settings for one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    /// Gaussian pixel-noise standard deviation applied to screen coordinates.
    pub noise_sigma: f64,
}

impl DatasetConfig {
    pub fn benchmark_2d() -> Self {
        DatasetConfig {
            scene: SceneConfig::orbits_2d(),
            camera: CameraConfig::default(),
            noise_sigma: 2.0,
        }
    }

    pub fn benchmark_3d() -> Self {
        DatasetConfig { scene: SceneConfig::orbits_3d(), ..Self::benchmark_2d() }
    }
}

/// One stored episode: ground truth, per-frame observations, and (3D) the
/// frame-0 depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub index: u64,
    pub seed: u64,
    pub scene: SceneConfig,
    pub truth: Trajectory,
    pub observations: Vec<Observation>,
    pub depth_map: Option<DepthMap>,
}

impl Episode {
    /// Globally unique within and across datasets generated from different
    /// master seeds: the episode's own derived seed.
    pub fn id(&self) -> u64 {
        self.seed
    }

    /// Borrowed view the estimator consumes.
    pub fn view(&self) -> crate::estimator::EpisodeView<'_> {
        crate::estimator::EpisodeView {
            observations: &self.observations,
            truth: &self.truth.frames,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub seed: u64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub master_seed: u64,
    pub num_episodes: usize,
    /// Total rejected candidates across all slots.
    pub resampled: u64,
    pub episodes: Vec<ManifestEntry>,
}

/// Draw order: per object x, y (, z offset in 3D); then per object the
/// velocity components (z velocity fixed at zero in 2D).
fn sample_initial_states<R: Rng>(rng: &mut R, scene: &SceneConfig) -> Vec<BodyState> {
    let n = scene.num_objects;
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.gen_range(-POSITION_RANGE..POSITION_RANGE);
        let y = rng.gen_range(-POSITION_RANGE..POSITION_RANGE);
        let z = match scene.mode {
            SimMode::TwoD => CAMERA_DISTANCE,
            SimMode::ThreeD => CAMERA_DISTANCE + rng.gen_range(-POSITION_RANGE..POSITION_RANGE),
        };
        positions.push(Vec3::new(x, y, z));
    }
    let mut states = Vec::with_capacity(n);
    for p in positions {
        let vx = rng.gen_range(-VELOCITY_RANGE..VELOCITY_RANGE);
        let vy = rng.gen_range(-VELOCITY_RANGE..VELOCITY_RANGE);
        let vz = match scene.mode {
            SimMode::TwoD => 0.0,
            SimMode::ThreeD => rng.gen_range(-VELOCITY_RANGE..VELOCITY_RANGE),
        };
        states.push(BodyState::new(p, Vec3::new(vx, vy, vz)));
    }
    states
}

fn min_separation(frames: &[Vec<BodyState>], scene: &SceneConfig) -> f64 {
    let mut min = f64::INFINITY;
    for frame in frames {
        for (i, a) in frame.iter().enumerate() {
            for b in &frame[i + 1..] {
                min = min.min((a.position - b.position).norm());
            }
            if scene.mode == SimMode::TwoD {
                min = min.min((scene.guidance_point - a.position).norm());
            }
        }
    }
    min
}

fn try_generate(config: &DatasetConfig, index: u64, seed: u64) -> Result<Option<Episode>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let initial = sample_initial_states(&mut rng, &config.scene);
    let truth = match simulate(&initial, &config.scene, EPISODE_FRAMES) {
        Ok(t) => t,
        Err(Error::DegenerateGeometry(_)) => return Ok(None),
        Err(other) => return Err(other),
    };
    if min_separation(&truth.frames, &config.scene) <= config.scene.softening_epsilon {
        return Ok(None);
    }
    // Frame-0 conditioning needs every object on screen.
    if truth.frames[0].iter().any(|b| crate::camera::project(b.position, &config.camera).is_none()) {
        return Ok(None);
    }
    let depth_map = match config.scene.mode {
        SimMode::ThreeD => Some(render_depth_map(&truth.frames[0], &config.camera)),
        SimMode::TwoD => None,
    };
    let obs_seed = rng.next_u64();
    let mut obs_rng = ChaCha20Rng::seed_from_u64(obs_seed);
    let observations: Vec<Observation> = truth
        .frames
        .iter()
        .enumerate()
        .map(|(t, frame)| {
            let map = if t == 0 { depth_map.as_ref() } else { None };
            observe(frame, &config.camera, config.noise_sigma, &mut obs_rng, map, t)
        })
        .collect();
    // Depth-conditioned lifting needs a hit for every object at frame 0.
    if let Some(samples) = observations[0].depth_samples.as_ref() {
        if samples.iter().any(|s| s.is_none()) {
            return Ok(None);
        }
    }
    if observations[0].visibility.iter().any(|v| !v) {
        return Ok(None);
    }
    Ok(Some(Episode { index, seed, scene: config.scene, truth, observations, depth_map }))
}

/// Generate the episode for one slot, drawing candidate seeds from the
/// slot's own stream until one passes the soundness checks. Returns the
/// episode and the number of rejected candidates.
pub fn generate_episode(config: &DatasetConfig, master_seed: u64, slot: u64) -> Result<(Episode, u64)> {
    let mut seed_rng = ChaCha20Rng::seed_from_u64(master_seed);
    seed_rng.set_stream(slot + 1);
    let mut rejected = 0;
    loop {
        let seed = seed_rng.next_u64();
        match try_generate(config, slot, seed)? {
            Some(ep) => return Ok((ep, rejected)),
            None => rejected += 1,
        }
    }
}

/// Generate and persist a dataset. Byte-identical for identical
/// (config, num_episodes, master_seed) regardless of `parallel`.
pub fn generate_dataset(
    config: &DatasetConfig,
    num_episodes: usize,
    master_seed: u64,
    out_dir: &Path,
    parallel: bool,
) -> Result<Manifest> {
    config.scene.validate()?;
    config.camera.validate()?;
    fs::create_dir_all(out_dir.join("episodes"))?;

    let slots: Vec<u64> = (0..num_episodes as u64).collect();
    let generated: Vec<Result<(Episode, u64)>> = {
        #[cfg(feature = "parallel")]
        {
            if parallel {
                use rayon::prelude::*;
                slots.par_iter().map(|&s| generate_episode(config, master_seed, s)).collect()
            } else {
                slots.iter().map(|&s| generate_episode(config, master_seed, s)).collect()
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = parallel;
            slots.iter().map(|&s| generate_episode(config, master_seed, s)).collect()
        }
    };

    let mut entries = Vec::with_capacity(num_episodes);
    let mut resampled = 0;
    for result in generated {
        let (episode, rejected) = result?;
        resampled += rejected;
        let file = format!("episodes/ep_{:05}.bin", episode.index);
        write_episode(&episode, &out_dir.join(&file))?;
        entries.push(ManifestEntry { index: episode.index, seed: episode.seed, file });
    }
    if resampled > 0 {
        log::info!("dataset {}: resampled {resampled} degenerate candidates", out_dir.display());
    }
    let manifest = Manifest {
        version: VERSION,
        config: *config,
        master_seed,
        num_episodes,
        resampled,
        episodes: entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::MalformedFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(manifest)
}

/// Load a whole dataset into memory.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Episode>)> {
    let manifest = load_manifest(dir)?;
    let episodes: Result<Vec<Episode>> =
        manifest.episodes.iter().map(|e| read_episode(&dir.join(&e.file))).collect();
    Ok((manifest, episodes?))
}

fn push_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn write_episode(episode: &Episode, path: &Path) -> Result<()> {
    let n = episode.scene.num_objects;
    let frames = episode.truth.frames.len();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&episode.index.to_le_bytes());
    out.extend_from_slice(&episode.seed.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.push(match episode.scene.mode {
        SimMode::TwoD => 0,
        SimMode::ThreeD => 1,
    });
    out.push(episode.depth_map.is_some() as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    let s = &episode.scene;
    for v in [
        s.gravitational_constant,
        s.object_mass,
        s.guidance_mass,
        s.guidance_point.x,
        s.guidance_point.y,
        s.guidance_point.z,
        s.guidance_coefficient_3d,
        s.dt,
        s.softening_epsilon,
    ] {
        push_f64(&mut out, v);
    }
    for frame in &episode.truth.frames {
        for b in frame {
            for v in [b.position.x, b.position.y, b.position.z, b.velocity.x, b.velocity.y, b.velocity.z] {
                push_f64(&mut out, v);
            }
        }
    }
    for obs in &episode.observations {
        out.push(obs.depth_samples.is_some() as u8);
        for o in 0..n {
            push_f64(&mut out, obs.screen_coords[o].0);
            push_f64(&mut out, obs.screen_coords[o].1);
            out.push(obs.visibility[o] as u8);
            let sample = obs.depth_samples.as_ref().and_then(|d| d[o]);
            out.push(sample.is_some() as u8);
            push_f64(&mut out, sample.unwrap_or(0.0));
        }
    }
    if let Some(map) = &episode.depth_map {
        out.extend_from_slice(&map.to_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let bytes = fs::read(path)?;
    let bad =
        |detail: &str| Error::MalformedFile { path: path.display().to_string(), detail: detail.into() };
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                detail: format!("truncated at byte {cur}"),
            });
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    let f64_at = |cur: &mut usize| -> Result<f64> {
        Ok(f64::from_le_bytes(take(cur, 8)?.try_into().unwrap()))
    };

    if take(&mut cur, 8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) != VERSION {
        return Err(bad("unsupported version"));
    }
    let index = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
    let seed = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
    let n = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let mode = match take(&mut cur, 1)?[0] {
        0 => SimMode::TwoD,
        1 => SimMode::ThreeD,
        _ => return Err(bad("bad mode byte")),
    };
    let has_depth = take(&mut cur, 1)?[0] != 0;
    take(&mut cur, 2)?; // padding
    let scene = SceneConfig {
        gravitational_constant: f64_at(&mut cur)?,
        object_mass: f64_at(&mut cur)?,
        guidance_mass: f64_at(&mut cur)?,
        guidance_point: Vec3::new(f64_at(&mut cur)?, f64_at(&mut cur)?, f64_at(&mut cur)?),
        guidance_coefficient_3d: f64_at(&mut cur)?,
        dt: f64_at(&mut cur)?,
        num_objects: n,
        mode,
        softening_epsilon: f64_at(&mut cur)?,
    };
    let mut truth_frames = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut frame = Vec::with_capacity(n);
        for _ in 0..n {
            let p = Vec3::new(f64_at(&mut cur)?, f64_at(&mut cur)?, f64_at(&mut cur)?);
            let v = Vec3::new(f64_at(&mut cur)?, f64_at(&mut cur)?, f64_at(&mut cur)?);
            frame.push(BodyState::new(p, v));
        }
        truth_frames.push(frame);
    }
    let mut observations = Vec::with_capacity(frames);
    for t in 0..frames {
        let depth_present = take(&mut cur, 1)?[0] != 0;
        let mut screen_coords = Vec::with_capacity(n);
        let mut visibility = Vec::with_capacity(n);
        let mut samples = if depth_present { Some(Vec::with_capacity(n)) } else { None };
        for _ in 0..n {
            let u = f64_at(&mut cur)?;
            let v = f64_at(&mut cur)?;
            let vis = take(&mut cur, 1)?[0] != 0;
            let has_sample = take(&mut cur, 1)?[0] != 0;
            let sample = f64_at(&mut cur)?;
            screen_coords.push((u, v));
            visibility.push(vis);
            if let Some(ss) = samples.as_mut() {
                ss.push(has_sample.then_some(sample));
            }
        }
        observations.push(Observation { frame_index: t, screen_coords, depth_samples: samples, visibility });
    }
    let depth_map = if has_depth {
        Some(DepthMap::from_bytes(&bytes[cur..]).map_err(|_| bad("bad depth map block"))?)
    } else if cur != bytes.len() {
        return Err(bad("trailing bytes"));
    } else {
        None
    };
    Ok(Episode {
        index,
        seed,
        scene,
        truth: Trajectory { frames: truth_frames, config: scene },
        observations,
        depth_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_config() -> DatasetConfig {
        DatasetConfig::benchmark_2d()
    }

    #[test]
    fn same_master_seed_gives_byte_identical_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        generate_dataset(&tiny_config(), 3, 42, &a, true).unwrap();
        generate_dataset(&tiny_config(), 3, 42, &b, false).unwrap();
        for name in ["manifest.json", "episodes/ep_00000.bin", "episodes/ep_00002.bin"] {
            let x = fs::read(a.join(name)).unwrap();
            let y = fs::read(b.join(name)).unwrap();
            assert_eq!(x, y, "{name} differs");
        }
    }

    #[test]
    fn empty_dataset_has_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&tiny_config(), 0, 7, dir.path(), true).unwrap();
        assert!(manifest.episodes.is_empty());
        let (loaded, episodes) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        assert!(episodes.is_empty());
    }

    #[test]
    fn two_d_dataset_is_planar() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_config(), 2, 9, dir.path(), true).unwrap();
        let (_, episodes) = load_dataset(dir.path()).unwrap();
        for ep in &episodes {
            for frame in &ep.truth.frames {
                for b in frame {
                    assert_eq!(b.position.z, CAMERA_DISTANCE);
                    assert_eq!(b.velocity.z, 0.0);
                }
            }
            assert!(ep.depth_map.is_none());
        }
    }

    #[test]
    fn three_d_dataset_has_frame0_depth() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&DatasetConfig::benchmark_3d(), 2, 11, dir.path(), true).unwrap();
        let (_, episodes) = load_dataset(dir.path()).unwrap();
        for ep in &episodes {
            assert!(ep.depth_map.is_some());
            let samples = ep.observations[0].depth_samples.as_ref().unwrap();
            assert!(samples.iter().all(|s| s.is_some()));
            assert!(ep.observations[1].depth_samples.is_none());
            assert!(ep.observations[0].visibility.iter().all(|&v| v));
        }
    }

    #[test]
    fn episode_file_round_trips() {
        let (ep, _) = generate_episode(&DatasetConfig::benchmark_3d(), 13, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.bin");
        write_episode(&ep, &path).unwrap();
        let back = read_episode(&path).unwrap();
        assert_eq!(ep, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn any_episode_round_trips_through_bytes(master in 0u64..1000, slot in 0u64..4, three_d: bool) {
            let config = if three_d { DatasetConfig::benchmark_3d() } else { DatasetConfig::benchmark_2d() };
            let (ep, _) = generate_episode(&config, master, slot).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ep.bin");
            write_episode(&ep, &path).unwrap();
            prop_assert_eq!(read_episode(&path).unwrap(), ep);
        }
    }
}
