//! Parameter files plus a JSON manifest naming each file's role and the
//! layout fingerprint it was trained for.

use std::fs;
use std::path::Path;

use cfbeam_core::agents::Mixer;
use cfbeam_core::beamspace::{BeamPredictor, PredictorArch};
use cfbeam_core::sim::{layout_fingerprint, untrained_policy, Policy, RlHyper, Scenario, Scheme};
use cfbeam_nn::persist::{load_params, save_params};
use cfbeam_nn::Parameterized;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

pub const MANIFEST: &str = "checkpoints.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub role: String,
    pub file: String,
    pub fingerprint: String,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointSet {
    pub scheme: String,
    pub entries: Vec<Entry>,
}

fn io(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Runtime(format!("{}: {e}", path.display()))
}

fn write_entry<P: Parameterized + ?Sized>(dir: &Path, role: &str, fingerprint: &str, model: &P) -> Result<Entry, HarnessError> {
    let file = format!("{role}-{fingerprint}.params");
    let path = dir.join(&file);
    fs::write(&path, save_params(model)).map_err(|e| io(&path, e))?;
    Ok(Entry {
        role: role.to_string(),
        file,
        fingerprint: fingerprint.to_string(),
        parameters: model.parameter_count(),
    })
}

fn write_manifest(dir: &Path, set: &CheckpointSet) -> Result<(), HarnessError> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(set).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| io(&path, e))
}

fn read_manifest(dir: &Path) -> Result<CheckpointSet, HarnessError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))
}

fn load_entry<P: Parameterized + ?Sized>(dir: &Path, set: &CheckpointSet, role: &str, fingerprint: &str, model: &mut P) -> Result<(), HarnessError> {
    let entry = set
        .entries
        .iter()
        .find(|e| e.role == role)
        .ok_or_else(|| HarnessError::Usage(format!("checkpoint has no '{role}' entry")))?;
    if entry.fingerprint != fingerprint {
        return Err(HarnessError::Usage(format!(
            "checkpoint '{role}' was saved for layout {} but this configuration needs {fingerprint}",
            entry.fingerprint
        )));
    }
    let path = dir.join(&entry.file);
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
    load_params(model, &text).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))
}

pub fn predictor_fingerprint(arch: &PredictorArch, n_bs: usize, m_wide: usize, m: usize) -> String {
    let text = format!("predictor|B{n_bs}|Mw{m_wide}|M{m}|{arch:?}");
    cfbeam_core::beamspace::digest_hex(text.as_bytes())
}

pub fn save_predictor(dir: &Path, arch: &PredictorArch, p: &BeamPredictor) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let fp = predictor_fingerprint(arch, p.n_bs, p.m_wide, p.m);
    let entry = write_entry(dir, "predictor", &fp, p)?;
    write_manifest(dir, &CheckpointSet {
        scheme: "predictor".into(),
        entries: vec![entry],
    })
}

pub fn load_predictor(dir: &Path, arch: &PredictorArch, n_bs: usize, m_wide: usize, m: usize) -> Result<BeamPredictor, HarnessError> {
    let set = read_manifest(dir)?;
    let mut rng = cfbeam_core::rng::stream(0, "checkpoint", &[]);
    let mut p = BeamPredictor::new(arch, n_bs, m_wide, m, &mut rng);
    load_entry(dir, &set, "predictor", &predictor_fingerprint(arch, n_bs, m_wide, m), &mut p)?;
    Ok(p)
}

/// Writes every acting network (and the mixer, when present).
pub fn save_policy(dir: &Path, sc: &Scenario, hyper: &RlHyper, policy: &Policy, mixer: Option<&Mixer>) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let scheme = policy.scheme();
    let fp = layout_fingerprint(sc, scheme, hyper);
    let mut entries = Vec::new();
    match policy {
        Policy::Central { net, .. } => entries.push(write_entry(dir, "central", &fp, net)?),
        Policy::Independent { nets } | Policy::Mixed { locals: nets } => {
            for (b, n) in nets.iter().enumerate() {
                entries.push(write_entry(dir, &format!("agent{b}"), &fp, n)?);
            }
        }
        Policy::Baseline(_) => {}
    }
    if let Some(m) = mixer {
        entries.push(write_entry(dir, "mixer", &fp, m)?);
    }
    write_manifest(dir, &CheckpointSet {
        scheme: scheme.name().into(),
        entries,
    })
}

pub fn load_policy(dir: &Path, sc: &Scenario, scheme: Scheme, hyper: &RlHyper) -> Result<Policy, HarnessError> {
    let set = read_manifest(dir)?;
    if set.scheme != scheme.name() {
        return Err(HarnessError::Usage(format!(
            "checkpoint holds scheme {} but {} was requested",
            set.scheme,
            scheme.name()
        )));
    }
    let fp = layout_fingerprint(sc, scheme, hyper);
    let (mut policy, _) = untrained_policy(sc, scheme, hyper)?;
    match &mut policy {
        Policy::Central { net, .. } => load_entry(dir, &set, "central", &fp, net)?,
        Policy::Independent { nets } | Policy::Mixed { locals: nets } => {
            for (b, n) in nets.iter_mut().enumerate() {
                load_entry(dir, &set, &format!("agent{b}"), &fp, n)?;
            }
        }
        Policy::Baseline(_) => {}
    }
    Ok(policy)
}
