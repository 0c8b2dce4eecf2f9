//! Seeded synthetic traffic: straight lines, constant-rate turns and
//! two-segment dog-legs, grouped into scenes of nearby vessels sharing a
//! time grid.

use std::f64::consts::PI;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ais::{Journey, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub scenes: usize,
    pub vessels_per_scene: usize,
    /// Samples per journey.
    pub length: usize,
    /// Index of the state at which a scene's vessels are clustered.
    pub meet_index: usize,
    /// Vessels start within this radius of the scene centre at `meet_index`.
    pub spread: f64,
    /// Speed range in normalized units per step.
    pub speed: [f64; 2],
    /// Turn-rate magnitude range in radians per step.
    pub turn_rate: [f64; 2],
    /// Dog-leg heading change magnitude range in radians.
    pub leg_turn: [f64; 2],
    /// Standard deviation of positional jitter.
    pub noise: f64,
    /// Scenes generated for each of the validation and test splits, from
    /// their own seeds.
    pub holdout_scenes: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            scenes: 16,
            vessels_per_scene: 4,
            length: 32,
            meet_index: 7,
            spread: 0.02,
            speed: [0.006, 0.012],
            turn_rate: [0.03, 0.08],
            leg_turn: [PI / 6.0, PI / 2.0],
            noise: 0.0005,
            holdout_scenes: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Line,
    Turn,
    DogLeg,
}

fn sign<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Unit-step headings for one vessel; `turn_at` is where a dog-leg bends.
fn headings<R: Rng + ?Sized>(rng: &mut R, motion: Motion, steps: usize, meet: usize, cfg: &SyntheticConfig) -> Vec<f64> {
    let start = rng.random_range(0.0..2.0 * PI);
    match motion {
        Motion::Line => vec![start; steps],
        Motion::Turn => {
            let rate = sign(rng) * uniform(rng, cfg.turn_rate);
            (0..steps).map(|i| start + rate * i as f64).collect()
        }
        Motion::DogLeg => {
            let lo = (meet + 1).min(steps.saturating_sub(1));
            let hi = steps.saturating_sub(4).max(lo + 1);
            let turn_at = rng.random_range(lo..hi);
            let turn = sign(rng) * uniform(rng, cfg.leg_turn);
            (0..steps).map(|i| if i >= turn_at { start + turn } else { start }).collect()
        }
    }
}

/// Generates `scenes × vessels_per_scene` normalized journeys and the motion
/// family of each, in journey order.
pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<(Journey, Motion)>> {
    if cfg.length < 2 || cfg.meet_index >= cfg.length || cfg.scenes == 0 || cfg.vessels_per_scene == 0 {
        return Err(Error::Config(format!("degenerate synthetic config: {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(cfg.scenes * cfg.vessels_per_scene);
    for scene in 0..cfg.scenes {
        let centre = [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)];
        // Scenes are placed far apart in time so they never interact.
        let start = 1_600_000_000 + scene as i64 * 86_400;
        for v in 0..cfg.vessels_per_scene {
            let motion = match rng.random_range(0..3) {
                0 => Motion::Line,
                1 => Motion::Turn,
                _ => Motion::DogLeg,
            };
            let speed = uniform(&mut rng, cfg.speed);
            let r = cfg.spread * rng.random_range(0.0f64..1.0).sqrt();
            let theta = rng.random_range(0.0..2.0 * PI);
            let meet_pos = [centre[0] + r * theta.sin(), centre[1] + r * theta.cos()];
            let heading = headings(&mut rng, motion, cfg.length, cfg.meet_index, cfg);
            // Integrate from the meeting point in both directions.
            let mut clean = vec![[0.0; 2]; cfg.length];
            clean[cfg.meet_index] = meet_pos;
            for i in cfg.meet_index + 1..cfg.length {
                let h = heading[i - 1];
                let p = clean[i - 1];
                clean[i] = [p[0] + speed * h.sin(), p[1] + speed * h.cos()];
            }
            for i in (0..cfg.meet_index).rev() {
                let h = heading[i];
                let p = clean[i + 1];
                clean[i] = [p[0] - speed * h.sin(), p[1] - speed * h.cos()];
            }
            let points = clean
                .into_iter()
                .map(|p| {
                    [
                        (p[0] + jitter.sample(&mut rng)).clamp(0.0, 1.0),
                        (p[1] + jitter.sample(&mut rng)).clamp(0.0, 1.0),
                    ]
                })
                .collect();
            out.push((
                Journey {
                    journey_id: format!("syn{scene:03}-{v}"),
                    mmsi: 990_000_000 + (scene * 100 + v) as u64,
                    start,
                    delta_minutes: 10,
                    points,
                },
                motion,
            ));
        }
    }
    Ok(out)
}

pub fn journeys(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<Journey>> {
    Ok(generate(cfg, seed)?.into_iter().map(|(j, _)| j).collect())
}

/// Training journeys plus independently seeded validation and test scenes.
///
/// Held-out ids are prefixed `val-` or `test-`, and their clocks are shifted
/// so that no held-out vessel is ever a neighbor of a training vessel.
pub fn split_journeys(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<(Journey, Split)>> {
    let mut out: Vec<(Journey, Split)> = journeys(cfg, seed)?.into_iter().map(|j| (j, Split::Train)).collect();
    if cfg.holdout_scenes == 0 {
        return Ok(out);
    }
    let held = SyntheticConfig {
        scenes: cfg.holdout_scenes,
        ..cfg.clone()
    };
    for (n, (split, tag)) in [(Split::Val, "val"), (Split::Test, "test")].into_iter().enumerate() {
        let salt = 0xA5A5_0000_0000_0000u64 | (n as u64 + 1);
        for mut j in journeys(&held, seed ^ salt)? {
            j.journey_id = format!("{tag}-{}", j.journey_id);
            j.start += (n as i64 + 1) * HOLDOUT_CLOCK_SHIFT;
            out.push((j, split));
        }
    }
    Ok(out)
}

/// Seconds between the training clock and each held-out clock.
const HOLDOUT_CLOCK_SHIFT: i64 = 100_000_000;
