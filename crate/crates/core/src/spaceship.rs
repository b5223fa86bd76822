//! Spaceship piloting task.
//!
//! A ship starts at rest somewhere on a ring around the origin and must
//! reach the mothership at `(0, 0)`. Five static planets pull on it. Each
//! action is a thruster impulse on the first substep followed by ballistic
//! flight for a fixed number of substeps. Forces above a threshold cost
//! fuel, and the realised thrust is perturbed by multiplicative noise.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const N_PLANETS: usize = 5;
/// Observation layout: ship pos (2), vel (2), mass (1), then per planet
/// pos (2) and mass (1).
pub const OBS_WIDTH: usize = 5 + 3 * N_PLANETS;
pub const DEFAULT_FUEL_THRESHOLD: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Planet {
    pub position: [f64; 2],
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub ship_position: [f64; 2],
    pub ship_velocity: [f64; 2],
    pub ship_mass: f64,
    pub planets: [Planet; N_PLANETS],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThrustAction {
    pub force: [f64; 2],
}

impl ThrustAction {
    pub fn new(fx: f64, fy: f64) -> Self {
        Self { force: [fx, fy] }
    }

    pub fn magnitude(&self) -> f64 {
        self.force[0].hypot(self.force[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub fuel_price: f64,
    pub fuel_threshold: f64,
    /// Standard deviation of the per-component multiplicative thrust noise.
    pub noise_scale: f64,
    pub gravity: f64,
    /// Length of one ballistic substep.
    pub dt: f64,
    /// Ballistic substeps per action.
    pub substeps: usize,
    /// Plummer softening length of the planets' potential.
    pub softening: f64,
    /// Leapfrog integration steps inside each substep.
    pub integrator_steps: usize,
    pub ship_radius: (f64, f64),
    pub ship_mass: (f64, f64),
    pub planet_radius: (f64, f64),
    pub planet_mass: (f64, f64),
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            fuel_price: 0.0002,
            fuel_threshold: DEFAULT_FUEL_THRESHOLD,
            noise_scale: 0.05,
            gravity: 1.0,
            dt: 0.05,
            substeps: 11,
            softening: 0.05,
            integrator_steps: 50,
            ship_radius: (0.6, 1.0),
            ship_mass: (0.004, 0.36),
            planet_radius: (0.4, 1.0),
            planet_mass: (0.08, 0.4),
        }
    }
}

impl TaskConfig {
    pub fn noiseless(mut self) -> Self {
        self.noise_scale = 0.0;
        self
    }

    pub fn fuel_cost(&self, force_magnitude: f64) -> f64 {
        fuel_cost_above(force_magnitude, self.fuel_threshold, self.fuel_price)
    }

    /// Time covered by one action.
    pub fn action_duration(&self) -> f64 {
        self.dt * self.substeps as f64
    }
}

/// `max(0, (|F| - 8) * price)`.
pub fn fuel_cost(force_magnitude: f64, price: f64) -> f64 {
    fuel_cost_above(force_magnitude, DEFAULT_FUEL_THRESHOLD, price)
}

fn fuel_cost_above(force_magnitude: f64, threshold: f64, price: f64) -> f64 {
    ((force_magnitude - threshold) * price).max(0.0)
}

/// Summed fuel costs plus the final distance to the origin.
pub fn task_loss(fuel_costs: &[f64], final_scene: &Scene) -> f64 {
    fuel_costs.iter().sum::<f64>() + final_scene.distance_to_target()
}

fn polar(rng: &mut impl Rng, radius: (f64, f64)) -> [f64; 2] {
    let r = rng.random_range(radius.0..=radius.1);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    [r * theta.cos(), r * theta.sin()]
}

pub fn sample_scene(rng: &mut impl Rng, config: &TaskConfig) -> Scene {
    let ship_position = polar(rng, config.ship_radius);
    let ship_mass = rng.random_range(config.ship_mass.0..=config.ship_mass.1);
    let planets = std::array::from_fn(|_| Planet {
        position: polar(rng, config.planet_radius),
        mass: rng.random_range(config.planet_mass.0..=config.planet_mass.1),
    });
    Scene {
        ship_position,
        ship_velocity: [0.0, 0.0],
        ship_mass,
        planets,
    }
}

/// Gravitational acceleration at `at` from the scene's planets.
pub fn gravity_accel(scene: &Scene, at: [f64; 2], config: &TaskConfig) -> [f64; 2] {
    let eps2 = config.softening * config.softening;
    let mut acc = [0.0, 0.0];
    for p in &scene.planets {
        let dx = p.position[0] - at[0];
        let dy = p.position[1] - at[1];
        let r2 = dx * dx + dy * dy + eps2;
        let s = config.gravity * p.mass / (r2 * r2.sqrt());
        acc[0] += s * dx;
        acc[1] += s * dy;
    }
    acc
}

/// Result of executing one action in the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionOutcome {
    /// Scene after every ballistic substep.
    pub trajectory: Vec<Scene>,
    pub next: Scene,
    pub fuel_cost: f64,
    /// Realised noise `eta`; the applied force is `force * (1 + eta)`.
    pub noise: [f64; 2],
    pub effective_force: [f64; 2],
}

/// Execute `action` with thruster noise drawn from `rng`.
pub fn apply_action(scene: &Scene, action: &ThrustAction, rng: &mut impl Rng, config: &TaskConfig) -> ActionOutcome {
    let noise = if config.noise_scale > 0.0 {
        let normal = Normal::new(0.0, config.noise_scale).expect("finite noise scale");
        [normal.sample(rng), normal.sample(rng)]
    } else {
        [0.0, 0.0]
    };
    apply_with_noise(scene, action, noise, config)
}

/// Deterministic core of [`apply_action`] for a given noise realisation.
pub fn apply_with_noise(scene: &Scene, action: &ThrustAction, noise: [f64; 2], config: &TaskConfig) -> ActionOutcome {
    let effective_force = [action.force[0] * (1.0 + noise[0]), action.force[1] * (1.0 + noise[1])];
    let mut s = scene.clone();
    let kick = config.dt / s.ship_mass;
    s.ship_velocity[0] += effective_force[0] * kick;
    s.ship_velocity[1] += effective_force[1] * kick;
    let mut trajectory = Vec::with_capacity(config.substeps);
    let steps = config.integrator_steps.max(1);
    let h = config.dt / steps as f64;
    for _ in 0..config.substeps {
        for _ in 0..steps {
            leapfrog(&mut s, h, config);
        }
        trajectory.push(s.clone());
    }
    ActionOutcome {
        next: s,
        trajectory,
        fuel_cost: config.fuel_cost(action.magnitude()),
        noise,
        effective_force,
    }
}

/// Kick-drift-kick step.
fn leapfrog(s: &mut Scene, h: f64, config: &TaskConfig) {
    let a = gravity_accel(s, s.ship_position, config);
    s.ship_velocity[0] += 0.5 * h * a[0];
    s.ship_velocity[1] += 0.5 * h * a[1];
    s.ship_position[0] += h * s.ship_velocity[0];
    s.ship_position[1] += h * s.ship_velocity[1];
    let a = gravity_accel(s, s.ship_position, config);
    s.ship_velocity[0] += 0.5 * h * a[0];
    s.ship_velocity[1] += 0.5 * h * a[1];
}

/// Classical fourth-order Runge-Kutta reference for ballistic motion: the
/// ship state after each substep, integrated with step `dt / refine`.
/// Slow; used to validate [`apply_with_noise`].
pub fn reference_trajectory(scene: &Scene, config: &TaskConfig, refine: usize) -> Vec<Scene> {
    let h = config.dt / refine.max(1) as f64;
    let deriv = |x: [f64; 4]| {
        let a = gravity_accel(scene, [x[0], x[1]], config);
        [x[2], x[3], a[0], a[1]]
    };
    let axpy = |x: [f64; 4], k: [f64; 4], s: f64| std::array::from_fn::<f64, 4, _>(|i| x[i] + s * k[i]);
    let mut x = [
        scene.ship_position[0],
        scene.ship_position[1],
        scene.ship_velocity[0],
        scene.ship_velocity[1],
    ];
    let mut out = Vec::with_capacity(config.substeps);
    for _ in 0..config.substeps {
        for _ in 0..refine.max(1) {
            let k1 = deriv(x);
            let k2 = deriv(axpy(x, k1, h / 2.0));
            let k3 = deriv(axpy(x, k2, h / 2.0));
            let k4 = deriv(axpy(x, k3, h));
            x = std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        }
        out.push(Scene {
            ship_position: [x[0], x[1]],
            ship_velocity: [x[2], x[3]],
            ..scene.clone()
        });
    }
    out
}

impl Scene {
    pub fn distance_to_target(&self) -> f64 {
        self.ship_position[0].hypot(self.ship_position[1])
    }

    pub fn observation(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(OBS_WIDTH);
        v.extend_from_slice(&self.ship_position);
        v.extend_from_slice(&self.ship_velocity);
        v.push(self.ship_mass);
        for p in &self.planets {
            v.extend_from_slice(&p.position);
            v.push(p.mass);
        }
        v
    }

    pub fn from_observation(obs: &[f64]) -> Option<Scene> {
        if obs.len() != OBS_WIDTH {
            return None;
        }
        Some(Scene {
            ship_position: [obs[0], obs[1]],
            ship_velocity: [obs[2], obs[3]],
            ship_mass: obs[4],
            planets: std::array::from_fn(|p| Planet {
                position: [obs[5 + 3 * p], obs[6 + 3 * p]],
                mass: obs[7 + 3 * p],
            }),
        })
    }

    /// Kinetic plus softened gravitational potential energy of the ship.
    pub fn energy(&self, config: &TaskConfig) -> f64 {
        let v2 = self.ship_velocity[0].powi(2) + self.ship_velocity[1].powi(2);
        let eps2 = config.softening * config.softening;
        let potential: f64 = self
            .planets
            .iter()
            .map(|p| {
                let dx = p.position[0] - self.ship_position[0];
                let dy = p.position[1] - self.ship_position[1];
                -config.gravity * p.mass * self.ship_mass / (dx * dx + dy * dy + eps2).sqrt()
            })
            .sum();
        0.5 * self.ship_mass * v2 + potential
    }
}

/// One record per body:
///
/// ```text
/// ship <x> <y> <vx> <vy> <mass>
/// planet <x> <y> <mass>
/// ```
impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [x, y] = self.ship_position;
        let [vx, vy] = self.ship_velocity;
        writeln!(f, "ship {x:?} {y:?} {vx:?} {vy:?} {:?}", self.ship_mass)?;
        for p in &self.planets {
            writeln!(f, "planet {:?} {:?} {:?}", p.position[0], p.position[1], p.mass)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneParseError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("expected exactly one ship and {N_PLANETS} planets, found {ships} ship(s) and {planets} planet(s)")]
    BodyCount { ships: usize, planets: usize },
}

impl FromStr for Scene {
    type Err = SceneParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut ship: Option<([f64; 2], [f64; 2], f64)> = None;
        let mut ships = 0;
        let mut planets = Vec::new();
        for (i, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap_or_default();
            let nums: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let nums = nums.map_err(|e| SceneParseError::Line {
                line: i + 1,
                message: e.to_string(),
            })?;
            let bad = |n: usize| SceneParseError::Line {
                line: i + 1,
                message: format!("`{kind}` expects {n} numbers, got {}", nums.len()),
            };
            match kind {
                "ship" => {
                    if nums.len() != 5 {
                        return Err(bad(5));
                    }
                    ships += 1;
                    ship = Some(([nums[0], nums[1]], [nums[2], nums[3]], nums[4]));
                }
                "planet" => {
                    if nums.len() != 3 {
                        return Err(bad(3));
                    }
                    planets.push(Planet {
                        position: [nums[0], nums[1]],
                        mass: nums[2],
                    });
                }
                other => {
                    return Err(SceneParseError::Line {
                        line: i + 1,
                        message: format!("unknown record `{other}`"),
                    })
                }
            }
        }
        match (ship, ships, <[Planet; N_PLANETS]>::try_from(planets.as_slice())) {
            (Some((pos, vel, mass)), 1, Ok(planets)) => Ok(Scene {
                ship_position: pos,
                ship_velocity: vel,
                ship_mass: mass,
                planets,
            }),
            _ => Err(SceneParseError::BodyCount {
                ships,
                planets: planets.len(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn lone_planet(mass: f64, at: [f64; 2]) -> Scene {
        let mut planets = [Planet {
            position: [5.0, 5.0],
            mass: 0.0,
        }; N_PLANETS];
        planets[0] = Planet { position: at, mass };
        Scene {
            ship_position: [0.0, 0.0],
            ship_velocity: [0.0, 0.0],
            ship_mass: 0.1,
            planets,
        }
    }

    #[test]
    fn fuel_cost_examples() {
        assert_eq!(fuel_cost(8.0, 0.0002), 0.0);
        assert!((fuel_cost(13.0, 0.0004) - 0.002).abs() < 1e-15);
        assert_eq!(fuel_cost(0.0, 0.0004), 0.0);
    }

    #[test]
    fn task_loss_examples() {
        let mut s = lone_planet(0.0, [1.0, 0.0]);
        assert_eq!(task_loss(&[], &s), 0.0);
        s.ship_position = [3.0, 4.0];
        assert_eq!(task_loss(&[], &s), 5.0);
        s.ship_position = [0.6, 0.8];
        assert!((task_loss(&[0.002, 0.001], &s) - 1.003).abs() < 1e-12);
    }

    #[test]
    fn newtonian_single_planet() {
        let cfg = TaskConfig {
            softening: 0.0,
            ..TaskConfig::default()
        };
        let s = lone_planet(0.3, [0.5, 0.0]);
        let a = gravity_accel(&s, [0.0, 0.0], &cfg);
        assert!((a[0] - 0.3 / 0.25).abs() < 1e-12);
        assert_eq!(a[1], 0.0);
    }

    #[test]
    fn symmetric_planets_cancel() {
        let cfg = TaskConfig::default();
        let mut s = lone_planet(0.2, [0.4, 0.1]);
        s.planets[1] = Planet {
            position: [-0.4, -0.1],
            mass: 0.2,
        };
        let a = gravity_accel(&s, [0.0, 0.0], &cfg);
        assert!(a[0].abs() < 1e-15 && a[1].abs() < 1e-15);
    }

    #[test]
    fn idle_ship_in_empty_space_stays_put() {
        let cfg = TaskConfig::default();
        let s = lone_planet(0.0, [0.5, 0.5]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = apply_action(&s, &ThrustAction::new(0.0, 0.0), &mut rng, &cfg);
        assert_eq!(out.trajectory.len(), 11);
        assert!(out.trajectory.iter().all(|t| t.ship_position == [0.0, 0.0]));
    }

    #[test]
    fn noiseless_runs_ignore_seed() {
        let cfg = TaskConfig::default().noiseless();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = sample_scene(&mut rng, &cfg);
        let a = ThrustAction::new(3.0, -2.0);
        let o1 = apply_action(&s, &a, &mut rand_chacha::ChaCha8Rng::seed_from_u64(2), &cfg);
        let o2 = apply_action(&s, &a, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3), &cfg);
        assert_eq!(o1, o2);
    }

    #[test]
    fn thrust_kicks_velocity_by_f_dt_over_m() {
        let cfg = TaskConfig::default().noiseless();
        let s = lone_planet(0.0, [0.5, 0.5]);
        let out = apply_with_noise(&s, &ThrustAction::new(2.0, 0.0), [0.0, 0.0], &cfg);
        assert!((out.next.ship_velocity[0] - 2.0 * 0.05 / 0.1).abs() < 1e-12);
        assert!((out.next.ship_position[0] - 1.0 * 0.55).abs() < 1e-12);
    }

    #[test]
    fn scene_text_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let s = sample_scene(&mut rng, &TaskConfig::default());
        let parsed: Scene = s.to_string().parse().unwrap();
        assert_eq!(parsed, s);
        assert!("ship 0 0 0 0 1\n".parse::<Scene>().is_err());
    }

    #[test]
    fn observation_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let s = sample_scene(&mut rng, &TaskConfig::default());
        let obs = s.observation();
        assert_eq!(obs.len(), OBS_WIDTH);
        assert_eq!(Scene::from_observation(&obs).unwrap(), s);
    }
}
