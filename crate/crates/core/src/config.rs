use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("invalid engine configuration: {0}")]
pub struct ConfigError(pub String);

/// Which documents a session retrieves from and scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusScope {
    /// The instance's own candidate documents (distractor setting).
    #[default]
    Pool,
    /// The union of all instances' documents.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Reasoning iterations before the answer is forced (T).
    pub max_iterations: usize,
    /// Plannings sampled per iteration (n).
    pub choices: usize,
    /// Answer-vote threshold (theta).
    pub theta: f64,
    pub initial_temperature: f64,
    /// Added to the temperature when every candidate query is a repeat.
    pub temperature_step: f64,
    pub max_temperature: f64,
    /// DBSCAN radius over bag-of-words query vectors.
    pub eps: f64,
    /// MSE weight for the external scorer trainer; carried, not used here.
    pub alpha: f64,
    /// Completions requested for the forced answer.
    pub forcible_choices: usize,
    pub corpus_scope: CorpusScope,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_iterations: 6,
            choices: 5,
            theta: 0.6,
            initial_temperature: 0.2,
            temperature_step: 0.8,
            max_temperature: 1.0,
            eps: 2.0,
            alpha: 0.1,
            forcible_choices: 1,
            corpus_scope: CorpusScope::Pool,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError(msg));
        if self.max_iterations == 0 {
            return fail("max_iterations must be at least 1".into());
        }
        if self.choices == 0 || self.forcible_choices == 0 {
            return fail("choice counts must be positive".into());
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return fail(format!("theta {} outside (0, 1]", self.theta));
        }
        for (name, value) in [
            ("initial_temperature", self.initial_temperature),
            ("max_temperature", self.max_temperature),
        ] {
            if !(0.0..=2.0).contains(&value) {
                return fail(format!("{name} {value} outside [0, 2]"));
            }
        }
        if self.max_temperature < self.initial_temperature {
            return fail("max_temperature is below initial_temperature".into());
        }
        if self.temperature_step.is_nan() || self.temperature_step < 0.0 {
            return fail("temperature_step must be non-negative".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return fail("eps must be positive".into());
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return fail("alpha must be non-negative".into());
        }
        Ok(())
    }

    /// One escalation step, clamped to the cap.
    pub fn escalated(&self, temperature: f64) -> f64 {
        (temperature + self.temperature_step).min(self.max_temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = EngineConfig::default();
        c.validate().unwrap();
        assert_eq!(
            (c.max_iterations, c.choices, c.theta, c.eps),
            (6, 5, 0.6, 2.0)
        );
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            EngineConfig {
                max_iterations: 0,
                ..Default::default()
            },
            EngineConfig {
                theta: 0.0,
                ..Default::default()
            },
            EngineConfig {
                theta: 1.01,
                ..Default::default()
            },
            EngineConfig {
                max_temperature: 0.1,
                ..Default::default()
            },
            EngineConfig {
                eps: 0.0,
                ..Default::default()
            },
            EngineConfig {
                choices: 0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn escalation_clamps() {
        let c = EngineConfig::default();
        assert!((c.escalated(0.2) - 1.0).abs() < 1e-12);
        assert_eq!(c.escalated(1.0), 1.0);
        let wide = EngineConfig {
            temperature_step: 0.5,
            max_temperature: 1.5,
            ..Default::default()
        };
        assert!((wide.escalated(wide.escalated(0.2)) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn toml_round_trip_with_partial_file() {
        let c: EngineConfig = toml::from_str("theta = 0.5\ncorpus_scope = \"full\"").unwrap();
        assert_eq!(c.theta, 0.5);
        assert_eq!(c.corpus_scope, CorpusScope::Full);
        assert_eq!(c.choices, 5);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<EngineConfig>(&text).unwrap(), c);
    }
}
