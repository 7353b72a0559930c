//! Experiment configuration: one JSON document, every field optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::forest::ForestConfig;
use crate::orchestrator::{Method, PredictorConfig, RunConfig, ScheduleConfig};
use crate::sim::EnvConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub schedule: ScheduleConfig,
    pub flow: FlowConfig,
    pub forest: ForestConfig,
    pub predictor: PredictorConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        ExperimentConfig {
            env: run.env,
            agent: run.agent,
            schedule: run.schedule,
            flow: run.flow,
            forest: run.forest,
            predictor: run.predictor,
            methods: vec![Method::Dfm, Method::ModelBased, Method::ModelFree],
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            env: self.env.clone(),
            agent: self.agent.clone(),
            schedule: self.schedule.clone(),
            flow: self.flow.clone(),
            forest: self.forest.clone(),
            predictor: self.predictor.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.run_config().validate()?;
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::config("methods", format!("`{}` listed twice", m.name())));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::config("seeds", format!("seed {s} listed twice")));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        Ok(())
    }

    /// Parses and validates. Missing fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Pretty JSON with every field spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_table_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c.schedule.horizon, 200);
        assert_eq!(c.env.episode_horizon, 200);
        assert_eq!(c.env.num_actions, 12);
        assert_eq!(c.env.target_fps, 60.0);
        assert_eq!(c.env.target_temp, 50.0);
        assert_eq!(c.env.reward_scale, 2.0);
        assert_eq!(c.agent.learning_rate, 0.05);
        assert_eq!(c.agent.discount, 0.99);
        assert_eq!(c.agent.epsilon_decay, 0.99);
        assert_eq!(c.agent.batch_size, 32);
        assert_eq!(c.flow.epochs, 400);
        assert_eq!(c.schedule.exploit_threshold, 100);
        assert_eq!(c.schedule.retrain_period, 50);
        assert_eq!(c.schedule.planning_breadth, 1000);
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn bad_discount_names_the_field() {
        match ExperimentConfig::from_json(r#"{"agent": {"discount": 1.5}}"#) {
            Err(Error::Config { field, .. }) => assert!(field.contains("discount")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let text = "{\n  \"env\": {\n    \"num_actions\": 12,\n    \"bogus\": 1\n  }\n}";
        match ExperimentConfig::from_json(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"colour": 1}"#),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn malformed_json_reports_its_line() {
        match ExperimentConfig::from_json("{\n\"seeds\": [1,\n}") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn print_then_load_round_trips() {
        let mut c = ExperimentConfig::default();
        c.env.noise_std.fps = 0.7;
        c.seeds = vec![3, 9];
        c.methods = vec![Method::PureFm];
        c.agent.learning_rate = 0.01;
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn list_constraints() {
        for text in [
            r#"{"methods": []}"#,
            r#"{"seeds": []}"#,
            r#"{"seeds": [1, 1]}"#,
            r#"{"methods": ["dfm", "dfm"]}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config { .. })), "{text}");
        }
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"methods": ["dyna"]}"#),
            Err(Error::Parse { .. })
        ));
    }
}
