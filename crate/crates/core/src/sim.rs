//! Embedded-processor simulator under DVFS control.
//!
//! Power is split into a dynamic part that grows as `f^eta` and a static part
//! proportional to core temperature. Temperature follows a first-order RC
//! model driven by total power, and frame rate is linear in frequency up to a
//! cap, throttled once the core passes the target temperature.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation of the processor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessorState {
    pub fps: f64,
    /// Normalized frequency in `[0, 1]`.
    pub freq: f64,
    /// Watts.
    pub power: f64,
    /// Degrees Celsius.
    pub temp: f64,
}

impl ProcessorState {
    pub const DIM: usize = 4;

    pub fn to_array(&self) -> [f64; 4] {
        [self.fps, self.freq, self.power, self.temp]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        ProcessorState {
            fps: v[0],
            freq: v[1],
            power: v[2],
            temp: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// Standard deviation of the additive Gaussian observation noise.
///
/// Frequency is set exactly and power is derived from it, so only frame rate
/// and temperature are noisy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseStd {
    pub fps: f64,
    pub temp: f64,
}

impl Default for NoiseStd {
    fn default() -> Self {
        // 1% of the nominal field scales (120 fps, 50 degC).
        NoiseStd {
            fps: 1.2,
            temp: 0.5,
        }
    }
}

impl NoiseStd {
    pub fn zero() -> Self {
        NoiseStd { fps: 0.0, temp: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_actions: usize,
    pub eta: f64,
    pub dyn_coeff: f64,
    pub static_coeff: f64,
    pub thermal_capacitance: f64,
    pub thermal_resistance: f64,
    pub ambient_temp: f64,
    pub min_freq: f64,
    pub fps_slope: f64,
    pub fps_cap: f64,
    pub target_fps: f64,
    pub target_temp: f64,
    pub reward_scale: f64,
    pub noise_std: NoiseStd,
    pub episode_horizon: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        // Calibrated so that the sixth of twelve levels is the first to reach
        // 60 fps, the top level reaches the 120 fps cap, and the top three
        // levels settle above 50 degC.
        EnvConfig {
            num_actions: 12,
            eta: 3.0,
            dyn_coeff: 12.3,
            static_coeff: 0.1,
            thermal_capacitance: 4.0,
            thermal_resistance: 2.0,
            ambient_temp: 25.0,
            min_freq: 0.2,
            fps_slope: 120.0,
            fps_cap: 120.0,
            target_fps: 60.0,
            target_temp: 50.0,
            reward_scale: 2.0,
            noise_std: NoiseStd::default(),
            episode_horizon: 200,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta", self.eta),
            ("dyn_coeff", self.dyn_coeff),
            ("static_coeff", self.static_coeff),
            ("thermal_capacitance", self.thermal_capacitance),
            ("thermal_resistance", self.thermal_resistance),
            ("fps_slope", self.fps_slope),
            ("fps_cap", self.fps_cap),
            ("target_fps", self.target_fps),
            ("reward_scale", self.reward_scale),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(field, format!("must be > 0, got {value}")));
            }
        }
        if self.eta <= 2.0 {
            return Err(Error::config("eta", "must be > 2"));
        }
        if self.num_actions < 1 {
            return Err(Error::config("num_actions", "must be >= 1"));
        }
        if !(self.min_freq > 0.0 && self.min_freq <= 1.0) {
            return Err(Error::config("min_freq", "must lie in (0, 1]"));
        }
        if !self.ambient_temp.is_finite() {
            return Err(Error::config("ambient_temp", "must be finite"));
        }
        if !(self.target_temp.is_finite() && self.target_temp > self.ambient_temp) {
            return Err(Error::config("target_temp", "must exceed ambient_temp"));
        }
        if self.fps_cap < self.target_fps {
            return Err(Error::config("fps_cap", "must be >= target_fps"));
        }
        for (field, value) in [
            ("noise_std.fps", self.noise_std.fps),
            ("noise_std.temp", self.noise_std.temp),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        if self.episode_horizon == 0 {
            return Err(Error::config("episode_horizon", "must be >= 1"));
        }
        // Temperature update is theta' = (1 - g/C) theta + const with
        // g = 1/R_th - c_s. It converges monotonically iff 0 < g/C <= 1.
        let leak = 1.0 / self.thermal_resistance - self.static_coeff;
        if leak <= 0.0 {
            return Err(Error::config(
                "static_coeff",
                "static_coeff * thermal_resistance must be < 1 for a bounded temperature",
            ));
        }
        if leak > self.thermal_capacitance {
            return Err(Error::config(
                "thermal_capacitance",
                "too small: temperature update would overshoot its fixed point",
            ));
        }
        Ok(())
    }

    /// Normalized frequency of a level index.
    pub fn level(&self, action: usize) -> f64 {
        if self.num_actions == 1 {
            return 1.0;
        }
        self.min_freq + (1.0 - self.min_freq) * action as f64 / (self.num_actions - 1) as f64
    }

    pub fn dynamic_power(&self, freq: f64) -> f64 {
        self.dyn_coeff * freq.powf(self.eta)
    }

    pub fn throttle(&self, temp: f64) -> f64 {
        if temp < self.target_temp {
            1.0
        } else {
            1.0 / (1.0 + 0.1 * (temp - self.target_temp))
        }
    }

    /// Nominal per-field scales used to normalize states for the Q-network.
    pub fn state_scales(&self) -> [f64; 4] {
        [
            self.fps_cap,
            1.0,
            self.dyn_coeff + self.static_coeff * (self.target_temp + self.ambient_temp),
            2.0 * self.target_temp,
        ]
    }

    /// Noise-free temperature fixed point for a constant frequency level.
    pub fn thermal_fixed_point(&self, action: usize) -> f64 {
        let rd = self.dynamic_power(self.level(action));
        (self.ambient_temp + self.thermal_resistance * rd)
            / (1.0 - self.thermal_resistance * self.static_coeff)
    }
}

/// Initial state: middle frequency level, core at ambient temperature.
pub fn reset(config: &EnvConfig) -> Result<ProcessorState> {
    config.validate()?;
    let freq = config.level(config.num_actions / 2);
    let temp = config.ambient_temp;
    Ok(ProcessorState {
        fps: config.fps_cap.min(config.fps_slope * freq) * config.throttle(temp),
        freq,
        power: config.dynamic_power(freq) + config.static_coeff * temp,
        temp,
    })
}

pub fn dynamics<R: Rng + ?Sized>(
    state: &ProcessorState,
    action: usize,
    config: &EnvConfig,
    rng: &mut R,
) -> Result<ProcessorState> {
    if action >= config.num_actions {
        return Err(Error::Domain(format!(
            "action {action} out of range 0..{}",
            config.num_actions
        )));
    }
    let freq = config.level(action);
    let power = config.dynamic_power(freq) + config.static_coeff * state.temp;
    let mut temp = state.temp
        + (power - (state.temp - config.ambient_temp) / config.thermal_resistance)
            / config.thermal_capacitance;
    let mut fps = config.fps_cap.min(config.fps_slope * freq) * config.throttle(temp);

    if config.noise_std.fps > 0.0 {
        fps += Normal::new(0.0, config.noise_std.fps).unwrap().sample(rng);
    }
    if config.noise_std.temp > 0.0 {
        temp += Normal::new(0.0, config.noise_std.temp).unwrap().sample(rng);
    }

    Ok(ProcessorState {
        fps: fps.max(0.0),
        freq,
        power,
        temp: temp.max(config.ambient_temp),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardComponents {
    pub fps_term: f64,
    pub temp_term: f64,
    pub power_term: f64,
    pub total: f64,
}

pub fn reward_components(state: &ProcessorState, config: &EnvConfig) -> Result<RewardComponents> {
    if !(state.power > 0.0) {
        return Err(Error::Domain(format!(
            "power must be positive, got {}",
            state.power
        )));
    }
    let fps_term = if state.fps >= config.target_fps {
        1.0
    } else {
        state.fps / config.target_fps
    };
    let temp_term = if state.temp < config.target_temp {
        0.2 * (config.target_temp - state.temp).tanh()
    } else {
        -2.0
    };
    let power_term = config.reward_scale / state.power;
    Ok(RewardComponents {
        fps_term,
        temp_term,
        power_term,
        total: fps_term + temp_term + power_term,
    })
}

pub fn reward(state: &ProcessorState, config: &EnvConfig) -> Result<f64> {
    reward_components(state, config).map(|c| c.total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub next: ProcessorState,
    pub reward: f64,
    pub done: bool,
}

/// A single episode of the simulator with its own noise stream.
#[derive(Debug, Clone)]
pub struct Environment<R> {
    config: EnvConfig,
    state: ProcessorState,
    steps: usize,
    rng: R,
}

impl<R: Rng> Environment<R> {
    pub fn new(config: EnvConfig, rng: R) -> Result<Self> {
        let state = reset(&config)?;
        Ok(Environment {
            config,
            state,
            steps: 0,
            rng,
        })
    }

    pub fn state(&self) -> ProcessorState {
        self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn step(&mut self, action: usize) -> Result<Step> {
        if self.steps >= self.config.episode_horizon {
            return Err(Error::State("episode already finished".into()));
        }
        let next = dynamics(&self.state, action, &self.config, &mut self.rng)?;
        let reward = reward(&next, &self.config)?;
        self.steps += 1;
        self.state = next;
        Ok(Step {
            next,
            reward,
            done: self.steps == self.config.episode_horizon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn quiet() -> EnvConfig {
        EnvConfig {
            noise_std: NoiseStd::zero(),
            ..EnvConfig::default()
        }
    }

    #[test]
    fn reset_is_deterministic_and_at_ambient() {
        let cfg = EnvConfig::default();
        let a = reset(&cfg).unwrap();
        let b = reset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.temp, 25.0);
        assert!((0.0..=1.0).contains(&a.freq));
        assert!(a.power > 0.0);
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = EnvConfig {
            eta: 2.0,
            ..EnvConfig::default()
        };
        match reset(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "eta"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = EnvConfig {
            static_coeff: 0.6,
            ..EnvConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn doubled_frequency_scales_dynamic_power_by_eight() {
        let cfg = EnvConfig::default();
        let ratio = cfg.dynamic_power(0.8) / cfg.dynamic_power(0.4);
        assert!((ratio - 8.0).abs() < 1e-12);
    }

    #[test]
    fn default_calibration() {
        let cfg = quiet();
        let fps = |a| cfg.fps_cap.min(cfg.fps_slope * cfg.level(a));
        assert!(fps(4) < 60.0 && fps(5) >= 60.0);
        assert_eq!(fps(11), 120.0);
        assert!(cfg.thermal_fixed_point(8) < 50.0);
        assert!(cfg.thermal_fixed_point(9) > 50.0);
    }

    #[test]
    fn lowest_level_fps_formula() {
        let cfg = quiet();
        let mut r = rng::seeded(0);
        let s = reset(&cfg).unwrap();
        let next = dynamics(&s, 0, &cfg, &mut r).unwrap();
        let expected = cfg.fps_cap.min(cfg.fps_slope * cfg.level(0)) * cfg.throttle(next.temp);
        assert_eq!(next.fps, expected);
        assert!((next.fps - 24.0).abs() < 1e-9);
    }

    #[test]
    fn temperature_converges_to_fixed_point() {
        let cfg = quiet();
        let mut r = rng::seeded(0);
        for action in [0, 5, 11] {
            // Fixed-point iteration on theta = amb + R_th * (c_d f^eta + c_s theta).
            let rd = cfg.dynamic_power(cfg.level(action));
            let mut theta_star = cfg.ambient_temp;
            for _ in 0..200 {
                theta_star = cfg.ambient_temp
                    + cfg.thermal_resistance * (rd + cfg.static_coeff * theta_star);
            }

            let mut s = ProcessorState {
                temp: cfg.ambient_temp,
                ..reset(&cfg).unwrap()
            };
            let mut prev_gap = (theta_star - s.temp).abs();
            for _ in 0..400 {
                s = dynamics(&s, action, &cfg, &mut r).unwrap();
                let gap = (theta_star - s.temp).abs();
                assert!(gap <= prev_gap + 1e-12);
                prev_gap = gap;
            }
            assert!(prev_gap < 1e-9, "action {action}: gap {prev_gap}");
            assert!((cfg.thermal_fixed_point(action) - theta_star).abs() < 1e-9);
        }
    }

    #[test]
    fn reward_examples() {
        let cfg = EnvConfig::default();
        let st = |fps, temp| ProcessorState {
            fps,
            freq: 0.5,
            power: 4.0,
            temp,
        };
        assert_eq!(reward_components(&st(60.0, 30.0), &cfg).unwrap().fps_term, 1.0);
        assert_eq!(reward_components(&st(30.0, 30.0), &cfg).unwrap().fps_term, 0.5);
        assert_eq!(reward_components(&st(60.0, 50.0), &cfg).unwrap().temp_term, -2.0);
        let v = reward_components(&st(60.0, 49.0), &cfg).unwrap().temp_term;
        assert!((v - 0.2 * 1f64.tanh()).abs() < 1e-15);
        assert!((v - 0.152).abs() < 1e-3);
        let c = reward_components(&st(45.0, 40.0), &cfg).unwrap();
        assert_eq!(c.power_term, 0.5);
        assert_eq!(c.total, c.fps_term + c.temp_term + c.power_term);
    }

    #[test]
    fn reward_rejects_nonpositive_power() {
        let cfg = EnvConfig::default();
        let s = ProcessorState {
            fps: 60.0,
            freq: 0.5,
            power: 0.0,
            temp: 30.0,
        };
        assert!(matches!(reward_components(&s, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn action_out_of_range() {
        let cfg = EnvConfig::default();
        let s = reset(&cfg).unwrap();
        let mut r = rng::seeded(0);
        assert!(matches!(
            dynamics(&s, 12, &cfg, &mut r),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn horizon_boundary() {
        let cfg = EnvConfig {
            episode_horizon: 1,
            ..EnvConfig::default()
        };
        let mut env = Environment::new(cfg, rng::seeded(3)).unwrap();
        let step = env.step(3).unwrap();
        assert!(step.done);
        assert!(matches!(env.step(3), Err(Error::State(_))));
    }

    #[test]
    fn step_reward_matches_components() {
        let mut env = Environment::new(EnvConfig::default(), rng::seeded(9)).unwrap();
        for a in 0..50 {
            let step = env.step(a % 12).unwrap();
            let expected = reward_components(&step.next, env.config()).unwrap().total;
            assert_eq!(step.reward, expected);
        }
    }

    #[test]
    fn noise_free_step_is_pure() {
        let cfg = quiet();
        let s = reset(&cfg).unwrap();
        let a = dynamics(&s, 7, &cfg, &mut rng::seeded(1)).unwrap();
        let b = dynamics(&s, 7, &cfg, &mut rng::seeded(2)).unwrap();
        assert_eq!(a, b);
    }
}
