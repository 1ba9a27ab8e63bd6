//! Experiment manifest: one TOML document with a section per module,
//! defaults for every key, and `key=value` overrides.

use std::path::Path;

use cfbeam_core::beamspace::{PredictorArch, PredictorTraining};
use cfbeam_core::sim::RlHyper;
use cfbeam_core::ScenarioConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub arch: PredictorArch,
    pub training: PredictorTraining,
    /// Samples generated when no data set file is given.
    pub samples: usize,
    pub train: usize,
    pub validation: usize,
    pub top_k: usize,
    /// Use the true narrow sweep instead of a trained predictor.
    pub genie: bool,
    /// Saved predictor parameters; empty means "train one in the run".
    pub checkpoint: String,
}

impl Default for PredictorSection {
    fn default() -> Self {
        Self {
            arch: PredictorArch::default(),
            training: PredictorTraining::default(),
            samples: 3000,
            train: 2000,
            validation: 500,
            top_k: 2,
            genie: false,
            checkpoint: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub histogram_bins: usize,
    /// Upper edge of the histogram range; 0 uses the largest observed value.
    pub histogram_max: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 500,
            histogram_bins: 20,
            histogram_max: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub scenario: ScenarioConfig,
    pub rl: RlHyper,
    pub predictor: PredictorSection,
    pub eval: EvalSection,
}

/// Dotted keys that always exist, plus optional ones that may be absent
/// from the serialized form.
const OPTIONAL_KEYS: &[&str] = &["rl.max_grad_norm", "predictor.training.decay_every"];

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let m: Self = toml::from_str(text).map_err(|e| HarnessError::Usage(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.scenario.validate().map_err(|e| HarnessError::Usage(e.to_string()))?;
        let p = &self.predictor;
        if p.train + p.validation >= p.samples {
            return Err(HarnessError::Usage(format!(
                "predictor split {}+{} leaves no test samples out of {}",
                p.train, p.validation, p.samples
            )));
        }
        if self.eval.histogram_bins == 0 {
            return Err(HarnessError::Usage("eval.histogram_bins must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Every settable dotted key.
    pub fn keys() -> Vec<String> {
        let table = Value::try_from(Self::default()).expect("manifest serializes");
        let mut out = Vec::new();
        collect_keys(&table, "", &mut out);
        out.extend(OPTIONAL_KEYS.iter().map(|s| s.to_string()));
        out.sort();
        out.dedup();
        out
    }

    /// Applies one `key=value` override. Bare keys resolve against every
    /// section and must match exactly one of them. Only types are checked
    /// here; call [`Manifest::validate`] once all overrides are in.
    pub fn apply_override(&mut self, spec: &str) -> Result<String, HarnessError> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| HarnessError::Usage(format!("override '{spec}' is not key=value")))?;
        let key = resolve_key(key.trim())?;
        let value = parse_value(raw.trim());
        let mut root = Value::try_from(&*self).expect("manifest serializes");
        let path: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &path[..path.len() - 1] {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*part))
                .ok_or_else(|| unknown_key(&key))?;
        }
        let table = node.as_table_mut().ok_or_else(|| unknown_key(&key))?;
        table.insert(path[path.len() - 1].to_string(), value.clone());
        let updated: Self = root
            .try_into()
            .map_err(|e| HarnessError::Usage(format!("override {key}={raw}: {e}")))?;
        *self = updated;
        Ok(format!("{key} = {value}"))
    }
}

fn collect_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Table(t) = v {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if v.is_table() {
                collect_keys(v, &key, out);
            } else {
                out.push(key);
            }
        }
    }
}

fn unknown_key(key: &str) -> HarnessError {
    HarnessError::Usage(format!("unknown key '{key}'; known keys: {}", Manifest::keys().join(", ")))
}

fn resolve_key(key: &str) -> Result<String, HarnessError> {
    let keys = Manifest::keys();
    if keys.iter().any(|k| k == key) {
        return Ok(key.to_string());
    }
    let suffix = format!(".{key}");
    let matches: Vec<&String> = keys.iter().filter(|k| k.ends_with(&suffix)).collect();
    match matches.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(unknown_key(key)),
        many => Err(HarnessError::Usage(format!(
            "key '{key}' is ambiguous: {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let m = Manifest::default();
        assert_eq!(Manifest::parse(&m.to_toml()).unwrap(), m);
        assert_eq!(m.scenario.lambda, vec![4.5, 5.0, 5.5, 6.0]);
    }

    #[test]
    fn overrides() {
        let mut m = Manifest::default();
        assert_eq!(m.apply_override("rho=0.5").unwrap(), "scenario.rho = 0.5");
        assert_eq!(m.scenario.rho, 0.5);
        m.apply_override("scenario.lambda=[1, 2, 3, 4]").unwrap();
        assert_eq!(m.scenario.lambda, vec![1.0, 2.0, 3.0, 4.0]);
        m.apply_override("rl.max_grad_norm=5").unwrap();
        assert_eq!(m.rl.max_grad_norm, Some(5.0));
        assert!(matches!(m.apply_override("xyz=1"), Err(HarnessError::Usage(_))));
        assert!(matches!(m.apply_override("scenario.n_bs=many"), Err(HarnessError::Usage(_))));
        assert!(matches!(m.apply_override("seed=3"), Err(HarnessError::Usage(_))));
        assert!(m.apply_override("rho").is_err());
    }
}
