//! Synthetic terminal-area traffic: aircraft flying left-hand rounded
//! rectangular circuits around one of two runways, with climb-out and
//! descent altitude profiles and a constant scene wind.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::types::Frame;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Runway {
    /// Threshold position, km.
    pub x: f64,
    pub y: f64,
    /// Heading in degrees, counterclockwise from +x.
    pub heading_deg: f64,
}

/// Generator parameters. Lengths in km, speeds in km/s, wind in m/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternParams {
    /// Frames per scene.
    pub duration: u64,
    pub runways: Vec<Runway>,
    /// Range of the circuit's along-runway length.
    pub length: (f64, f64),
    /// Range of the lateral offset of the downwind leg.
    pub width: (f64, f64),
    pub turn_radius: f64,
    pub speed: (f64, f64),
    pub pattern_altitude: (f64, f64),
    pub ground_altitude: f64,
    /// Fraction of the circuit spent climbing after the threshold.
    pub climb_fraction: f64,
    /// Fraction of the circuit spent descending before the threshold.
    pub descent_fraction: f64,
    /// Range of frames each agent stays in the scene.
    pub presence: (u64, u64),
    pub position_noise: f64,
    pub wind_speed_max: f64,
    pub wind_noise: f64,
}

impl Default for PatternParams {
    fn default() -> Self {
        PatternParams {
            duration: 900,
            runways: vec![
                Runway {
                    x: 0.0,
                    y: 0.0,
                    heading_deg: 80.0,
                },
                Runway {
                    x: 0.8,
                    y: -0.6,
                    heading_deg: 170.0,
                },
            ],
            length: (2.2, 3.4),
            width: (1.2, 2.2),
            turn_radius: 0.35,
            speed: (0.040, 0.055),
            pattern_altitude: (0.25, 0.40),
            ground_altitude: 0.02,
            climb_fraction: 0.25,
            descent_fraction: 0.3,
            presence: (300, 700),
            position_noise: 0.002,
            wind_speed_max: 8.0,
            wind_noise: 0.5,
        }
    }
}

impl PatternParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic pattern: {}", m)));
        let range_ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && 0.0 < r.0 && r.0 <= r.1;
        if self.runways.is_empty() {
            return bad("at least one runway is required");
        }
        if !(range_ok(self.length) && range_ok(self.width) && range_ok(self.speed)) {
            return bad("length, width and speed ranges must be positive and ordered");
        }
        if !(range_ok(self.pattern_altitude) && self.ground_altitude >= 0.0) {
            return bad("altitudes must be nonnegative and ordered");
        }
        if !(self.turn_radius > 0.0 && 2.0 * self.turn_radius < self.length.0.min(self.width.0)) {
            return bad("turn radius must fit inside the smallest circuit");
        }
        let fracs = self.climb_fraction + self.descent_fraction;
        if !(self.climb_fraction > 0.0 && self.descent_fraction > 0.0 && fracs < 1.0) {
            return bad("climb and descent fractions must be positive and sum below 1");
        }
        if !(self.presence.0 >= 2 && self.presence.0 <= self.presence.1 && self.presence.0 <= self.duration) {
            return bad("presence range must be ordered and fit the duration");
        }
        if !(self.position_noise >= 0.0 && self.wind_noise >= 0.0 && self.wind_speed_max >= 0.0) {
            return bad("noise levels and wind must be nonnegative");
        }
        let max_wind_km_s = self.wind_speed_max / 1000.0;
        if max_wind_km_s >= self.speed.0 {
            return bad("wind must be slower than the slowest aircraft");
        }
        Ok(())
    }
}

enum Leg {
    Straight {
        start: [f64; 2],
        dir: [f64; 2],
        len: f64,
    },
    Arc {
        center: [f64; 2],
        radius: f64,
        start_angle: f64,
    },
}

/// Rounded rectangle in runway coordinates: the runway lies on the +u axis
/// from the threshold, the downwind leg at `w = width`, turns to the left.
struct Circuit {
    legs: Vec<(f64, Leg)>,
    perimeter: f64,
}

impl Circuit {
    fn new(length: f64, width: f64, r: f64) -> Self {
        let du = length - 2.0 * r;
        let dw = width - 2.0 * r;
        let quarter = FRAC_PI_2 * r;
        let mut legs = Vec::new();
        let mut s = 0.0;
        let mut push = |leg: Leg, len: f64| {
            legs.push((s, leg));
            s += len;
        };
        push(
            Leg::Straight {
                start: [r, 0.0],
                dir: [1.0, 0.0],
                len: du,
            },
            du,
        );
        push(
            Leg::Arc {
                center: [length - r, r],
                radius: r,
                start_angle: -FRAC_PI_2,
            },
            quarter,
        );
        push(
            Leg::Straight {
                start: [length, r],
                dir: [0.0, 1.0],
                len: dw,
            },
            dw,
        );
        push(
            Leg::Arc {
                center: [length - r, width - r],
                radius: r,
                start_angle: 0.0,
            },
            quarter,
        );
        push(
            Leg::Straight {
                start: [length - r, width],
                dir: [-1.0, 0.0],
                len: du,
            },
            du,
        );
        push(
            Leg::Arc {
                center: [r, width - r],
                radius: r,
                start_angle: FRAC_PI_2,
            },
            quarter,
        );
        push(
            Leg::Straight {
                start: [0.0, width - r],
                dir: [0.0, -1.0],
                len: dw,
            },
            dw,
        );
        push(
            Leg::Arc {
                center: [r, r],
                radius: r,
                start_angle: PI,
            },
            quarter,
        );
        Circuit { legs, perimeter: s }
    }

    /// Position and unit tangent at arc length `s` (wrapped).
    fn at(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let s = s.rem_euclid(self.perimeter);
        let idx = self.legs.partition_point(|(start, _)| *start <= s) - 1;
        let (start, leg) = &self.legs[idx];
        let d = s - start;
        match leg {
            Leg::Straight { start, dir, len } => {
                let d = d.min(*len);
                ([start[0] + dir[0] * d, start[1] + dir[1] * d], *dir)
            }
            Leg::Arc {
                center,
                radius,
                start_angle,
            } => {
                let a = start_angle + d / radius;
                (
                    [center[0] + radius * a.cos(), center[1] + radius * a.sin()],
                    [-a.sin(), a.cos()],
                )
            }
        }
    }
}

struct Agent {
    origin: [f64; 2],
    heading: f64,
    circuit: Circuit,
    s0: f64,
    speed: f64,
    altitude: f64,
    entry: u64,
    stay: u64,
}

fn uniform<R: Rng>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn altitude_at(params: &PatternParams, cruise: f64, fraction: f64) -> f64 {
    let ground = params.ground_altitude;
    if fraction < params.climb_fraction {
        ground + (cruise - ground) * fraction / params.climb_fraction
    } else if fraction > 1.0 - params.descent_fraction {
        ground + (cruise - ground) * (1.0 - fraction) / params.descent_fraction
    } else {
        cruise
    }
}

/// Deterministic scene of `n_agents` circuit-flying aircraft with ids
/// `1..=n_agents`.
pub fn generate_synthetic_scene(seed: u64, n_agents: usize, params: &PatternParams) -> Result<Scene> {
    if n_agents == 0 {
        return Err(Error::Config("synthetic scene needs at least one agent".into()));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wind_dir = rng.random_range(0.0..TAU);
    let wind_speed = rng.random_range(0.0..=params.wind_speed_max);
    let wind = [wind_speed * wind_dir.cos(), wind_speed * wind_dir.sin()];
    // Wind is reported in m/s; positions advance in km.
    let drift = [wind[0] / 1000.0, wind[1] / 1000.0];

    let agents: Vec<Agent> = (0..n_agents)
        .map(|_| {
            let runway = params.runways[rng.random_range(0..params.runways.len())];
            let reverse = rng.random_bool(0.5);
            let heading = runway.heading_deg.to_radians() + if reverse { PI } else { 0.0 };
            let circuit = Circuit::new(
                uniform(&mut rng, params.length),
                uniform(&mut rng, params.width),
                params.turn_radius,
            );
            let s0 = rng.random_range(0.0..circuit.perimeter);
            let speed = uniform(&mut rng, params.speed);
            let altitude = uniform(&mut rng, params.pattern_altitude);
            let stay = rng
                .random_range(params.presence.0..=params.presence.1)
                .min(params.duration);
            let entry = rng.random_range(0..=params.duration - stay);
            Agent {
                origin: [runway.x, runway.y],
                heading,
                circuit,
                s0,
                speed,
                altitude,
                entry,
                stay,
            }
        })
        .collect();

    let pos_noise = Normal::new(0.0, params.position_noise).map_err(|e| Error::Config(e.to_string()))?;
    let wind_noise = Normal::new(0.0, params.wind_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut frames = Vec::new();
    for (i, agent) in agents.iter().enumerate() {
        let mut s = agent.s0;
        for step in 0..agent.stay {
            let (local, tangent) = agent.circuit.at(s);
            let world_tangent = rotate(tangent, agent.heading);
            let offset = rotate(local, agent.heading);
            let fraction = s.rem_euclid(agent.circuit.perimeter) / agent.circuit.perimeter;
            let z = altitude_at(params, agent.altitude, fraction);
            frames.push(Frame {
                frame_number: agent.entry + step,
                agent_id: i as u64 + 1,
                x: agent.origin[0] + offset[0] + pos_noise.sample(&mut rng),
                y: agent.origin[1] + offset[1] + pos_noise.sample(&mut rng),
                z: z + pos_noise.sample(&mut rng),
                wind_vx: wind[0] + wind_noise.sample(&mut rng),
                wind_vy: wind[1] + wind_noise.sample(&mut rng),
            });
            let tail = drift[0] * world_tangent[0] + drift[1] * world_tangent[1];
            s += agent.speed + tail;
        }
    }
    Scene::from_frames(frames)
}
