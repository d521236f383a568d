//! On-disk configuration formats and the run manifest.

use crawlopt::crawler::{CrawlerModel, ModelConfig, OneLink};
use crawlopt::transcription::{CostConfig, ProcessProblem, RunningCost};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Geometry of the single-link model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneLinkSpec {
    pub a: f64,
    pub b: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

/// A model file is either the single-link wrapper or a crawler description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelFile {
    OneLink { one_link: OneLinkSpec },
    Crawler(ModelConfig),
}

impl ModelFile {
    /// Builds the optimization problem; validation failures carry the
    /// offending field in their message.
    pub fn build(&self, f2: RunningCost) -> Result<ProcessProblem, String> {
        match self {
            ModelFile::OneLink { one_link } => {
                let ol = OneLink::new(one_link.a, one_link.b, one_link.horizon)
                    .map_err(|e| e.to_string())?;
                Ok(ProcessProblem::one_link(&ol, f2))
            }
            ModelFile::Crawler(cfg) => {
                let model = CrawlerModel::build(cfg.clone()).map_err(|e| e.to_string())?;
                Ok(ProcessProblem::crawler(&model, f2))
            }
        }
    }
}

/// Reads the running cost, defaulting to zero when no file is given.
pub fn load_cost(path: Option<&Path>) -> Result<RunningCost, String> {
    match path {
        None => Ok(RunningCost::Zero),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cost file {}: {e}", p.display()))?;
            let cfg: CostConfig = serde_json::from_str(&text)
                .map_err(|e| format!("cost file {}: {e}", p.display()))?;
            Ok(cfg.f2)
        }
    }
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("{what} {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{what} {}: {e}", path.display()))
}

/// Parses a comma-separated coordinate list.
pub fn parse_vector(text: &str) -> Result<DVector<f64>, String> {
    let vals: Result<Vec<f64>, _> = text
        .split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>().map_err(|e| format!("coordinate {s:?}: {e}"))
        })
        .collect();
    let vals = vals?;
    if vals.is_empty() {
        return Err("empty coordinate list".to_string());
    }
    Ok(DVector::from_vec(vals))
}

/// Parses an inclusive mesh range written as `a..b`.
pub fn parse_mesh_range(text: &str) -> Result<(u32, u32), String> {
    let (lo, hi) = text
        .split_once("..")
        .ok_or_else(|| format!("mesh range {text:?} is not of the form a..b"))?;
    let lo: u32 = lo.trim().parse().map_err(|e| format!("mesh range start: {e}"))?;
    let hi: u32 = hi.trim().parse().map_err(|e| format!("mesh range end: {e}"))?;
    if hi < lo {
        return Err(format!("mesh range {text:?} is empty"));
    }
    Ok((lo, hi))
}

/// Everything needed to reproduce a run.  Equal manifests produce
/// byte-identical outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub inputs: Vec<String>,
    pub seed: u64,
    pub out: String,
    pub config_hash: String,
}

impl RunManifest {
    /// Hashes the contents of every input file together with the flag
    /// summary, so the manifest pins the actual configuration bytes.
    pub fn new(
        subcommand: &str,
        inputs: &[&Path],
        flags: &str,
        seed: u64,
        out: &Path,
    ) -> Result<Self, String> {
        let mut hasher = Sha256::new();
        let mut names = Vec::new();
        for p in inputs {
            let bytes =
                std::fs::read(p).map_err(|e| format!("input {}: {e}", p.display()))?;
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
            names.push(p.display().to_string());
        }
        hasher.update(flags.as_bytes());
        hasher.update(seed.to_le_bytes());
        let digest = hasher.finalize();
        let config_hash = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(RunManifest {
            subcommand: subcommand.to_string(),
            inputs: names,
            seed,
            out: out.display().to_string(),
            config_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_file_reads_both_shapes() {
        let ol: ModelFile =
            serde_json::from_str(r#"{"one_link": {"a": 0.0, "b": 1.0, "T": 4.0}}"#).unwrap();
        assert!(matches!(ol, ModelFile::OneLink { .. }));
        let problem = ol.build(RunningCost::Zero).unwrap();
        assert_eq!(problem.control_dim(), 1);
        let cr: ModelFile = serde_json::from_str(
            r#"{"N": 3, "k": 1.0, "mu_plus": [1,1,1], "mu_minus": [3,3,3],
                "T": 4.0, "box": [1.0, 1.0]}"#,
        )
        .unwrap();
        assert!(matches!(cr, ModelFile::Crawler(_)));
        let problem = cr.build(RunningCost::Zero).unwrap();
        assert_eq!(problem.control_dim(), 2);
    }

    #[test]
    fn mesh_range_parsing_accepts_inclusive_bounds() {
        assert_eq!(parse_mesh_range("4..9").unwrap(), (4, 9));
        assert_eq!(parse_mesh_range("6..6").unwrap(), (6, 6));
        assert!(parse_mesh_range("9..4").is_err());
        assert!(parse_mesh_range("4").is_err());
    }

    #[test]
    fn vector_parsing_reports_the_bad_coordinate() {
        assert_eq!(parse_vector("0.5, 0.25").unwrap().len(), 2);
        let err = parse_vector("0.5, x").unwrap_err();
        assert!(err.contains("\"x\""), "{err}");
    }
}
