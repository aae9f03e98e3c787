//! Run configuration files.
//!
//! A config is TOML with fixed sections. Command-line flags override file
//! values, which override built-in defaults. Every command writes the fully
//! resolved configuration next to its outputs as `resolved.toml`; passing
//! that file back with `--config` repeats the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

/// Keys accepted in each section.
const KNOWN: &[(&str, &[&str])] = &[
    ("run", &["command", "model", "seed", "jobs", "deterministic"]),
    ("grid", &["resolution", "half_extent", "waist"]),
    (
        "noise",
        &[
            "preset",
            "center_jitter_sigma",
            "waist_jitter_rel",
            "impurity_eps",
            "pol_crosstalk_rad",
            "intensity_noise_rel",
            "background_rel",
        ],
    ),
    ("data", &["task", "per_class", "val_per_class", "count"]),
    ("svm", &["ncomp", "features", "lambda", "epochs"]),
    ("cnn", &["epochs", "batch_size", "learning_rate", "momentum"]),
    ("render", &["m1", "m2", "theta", "phi"]),
    ("report", &["ncomp", "bins"]),
    (
        "paths",
        &["out", "train", "val", "data", "model", "calibration"],
    ),
];

#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSection {
    pub command: Option<String>,
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub deterministic: Option<bool>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridSection {
    pub resolution: Option<usize>,
    pub half_extent: Option<f64>,
    pub waist: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSection {
    pub preset: Option<String>,
    pub center_jitter_sigma: Option<f64>,
    pub waist_jitter_rel: Option<f64>,
    pub impurity_eps: Option<f64>,
    pub pol_crosstalk_rad: Option<f64>,
    pub intensity_noise_rel: Option<f64>,
    pub background_rel: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataSection {
    pub task: Option<String>,
    pub per_class: Option<usize>,
    pub val_per_class: Option<usize>,
    pub count: Option<usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq)]
pub struct SvmSection {
    pub ncomp: Option<usize>,
    pub features: Option<String>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq)]
pub struct CnnSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq)]
pub struct RenderSection {
    pub m1: Option<i32>,
    pub m2: Option<i32>,
    pub theta: Option<f64>,
    pub phi: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportSection {
    pub ncomp: Option<usize>,
    pub bins: Option<usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq)]
pub struct PathsSection {
    pub out: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub grid: GridSection,
    pub noise: NoiseSection,
    pub data: DataSection,
    pub svm: SvmSection,
    pub cnn: CnnSection,
    pub render: RenderSection,
    pub report: ReportSection,
    pub paths: PathsSection,
}

/// Dotted names of keys that are not part of the schema.
pub fn unknown_keys(table: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    for (section, value) in table {
        match KNOWN.iter().find(|(s, _)| s == section) {
            None => out.push(section.clone()),
            Some((_, keys)) => match value.as_table() {
                Some(t) => {
                    for k in t.keys() {
                        if !keys.contains(&k.as_str()) {
                            out.push(format!("{section}.{k}"));
                        }
                    }
                }
                None => out.push(section.clone()),
            },
        }
    }
    out
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        let unknown = unknown_keys(&table);
        if !unknown.is_empty() {
            return Err(CliError::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Flag, then config value, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_every_unknown_key() {
        let err = RunConfig::parse(
            "[grid]\nresolution = 32\nsize = 3\n[noise]\nfoo = 1\n[extra]\na = 1\n",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("grid.size"), "{msg}");
        assert!(msg.contains("noise.foo"), "{msg}");
        assert!(msg.contains("extra"), "{msg}");
    }

    #[test]
    fn round_trips_through_text() {
        let mut c = RunConfig::default();
        c.run.seed = Some(7);
        c.grid.half_extent = Some(4.0);
        c.noise.preset = Some("labproxy".into());
        c.paths.out = Some("runs/a".into());
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn wrong_types_are_config_errors() {
        assert!(matches!(
            RunConfig::parse("[grid]\nresolution = \"big\"\n"),
            Err(CliError::Config(_))
        ));
    }
}
