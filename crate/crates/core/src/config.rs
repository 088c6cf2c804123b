//! Layered run configuration: TOML file, then `dotted.path=value` overrides,
//! then validation of every section. Errors name the offending dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::bridge::BridgeConfig;
use crate::infer::InferConfig;
use crate::inverse::InverseConfig;
use crate::net::NetConfig;
use crate::scene::SynthConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub sequences: usize,
    pub root: PathBuf,
    pub synth: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sequences: 50,
            root: PathBuf::from("data"),
            synth: SynthConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let s = &self.synth;
        if self.sequences == 0 {
            return Err(("sequences", "must be at least 1".into()));
        }
        for (name, v) in [
            ("synth.frames", s.frames),
            ("synth.height", s.height),
            ("synth.width", s.width),
            ("synth.env_height", s.env_height),
            ("synth.env_width", s.env_width),
        ] {
            if v == 0 {
                return Err((name, "must be at least 1".into()));
            }
        }
        if !(s.depth_max.is_finite() && s.depth_max > 0.0) {
            return Err(("synth.depth_max", "must be positive".into()));
        }
        if !(s.fov_deg > 0.0 && s.fov_deg < 180.0) {
            return Err(("synth.fov_deg", "must lie in (0, 180)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Repeated inferences in the determinism study.
    pub variance_runs: usize,
    /// Keyframe gaps of the gap study.
    pub gaps: Vec<usize>,
    /// Stage-1 steps per ablation variant.
    pub ablation_steps: usize,
    /// Stage-2 steps per ablation variant.
    pub ablation_keyframe_steps: usize,
    /// Held-out sequences used per evaluation; 0 uses all.
    pub max_sequences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            variance_runs: 10,
            gaps: vec![13, 17, 25, 49],
            ablation_steps: 300,
            ablation_keyframe_steps: 150,
            max_sequences: 4,
        }
    }
}

impl EvalConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.variance_runs == 0 {
            return Err(("variance_runs", "must be at least 1".into()));
        }
        if self.gaps.contains(&0) {
            return Err(("gaps", "gaps must be at least 1".into()));
        }
        if self.ablation_steps == 0 {
            return Err(("ablation_steps", "must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub net: NetConfig,
    pub bridge: BridgeConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub inverse: InverseConfig,
    pub eval: EvalConfig,
}

fn config_err(path: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        reason: reason.into(),
    }
}

fn parse_scalar(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Sets `path` (dot separated) in `root`, creating intermediate tables.
fn set_path(root: &mut Table, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(path, "malformed dotted path"));
    }
    let mut cur = root;
    for (i, k) in keys[..keys.len() - 1].iter().enumerate() {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(keys[..=i].join("."), "is not a section"))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Every key of `user` must exist in `reference`; sections recurse.
fn check_known(user: &Table, reference: &Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, reference.get(k)) {
            (_, None) => return Err(config_err(path, "unknown key")),
            (Value::Table(u), Some(Value::Table(r))) => check_known(u, r, &path)?,
            _ => {}
        }
    }
    Ok(())
}

fn section(name: &str, r: std::result::Result<(), (&'static str, String)>) -> Result<()> {
    r.map_err(|(field, reason)| config_err(format!("{name}.{field}"), reason))
}

impl RunConfig {
    /// Parses TOML text and applies `key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = toml::from_str(text).map_err(|e| config_err("<file>", e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(o.as_str(), "override must look like `section.key=value`"))?;
            set_path(&mut table, k.trim(), parse_scalar(v.trim()))?;
        }
        let reference = match Value::try_from(RunConfig::default()) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("defaults serialize to a table"),
        };
        check_known(&table, &reference, "")?;
        let cfg: RunConfig = serde_path_to_error::deserialize(Value::Table(table))
            .map_err(|e| config_err(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err("<dump>", e.to_string()))
    }

    /// Checks every section, then cross-section agreement.
    pub fn validate(&self) -> Result<()> {
        section("dataset", self.dataset.check())?;
        section("net", self.net.check())?;
        section("bridge", self.bridge.check())?;
        section("train", self.train.check())?;
        section("infer", self.infer.check())?;
        section("inverse", self.inverse.check())?;
        section("eval", self.eval.check())?;
        let s = &self.dataset.synth;
        for (field, net, data) in [
            ("net.height", self.net.height, s.height),
            ("net.width", self.net.width, s.width),
            ("net.env_height", self.net.env_height, s.env_height),
            ("net.env_width", self.net.env_width, s.env_width),
        ] {
            if net != data {
                return Err(config_err(field, format!("{net} disagrees with dataset.synth ({data})")));
            }
        }
        if self.infer.steps > self.bridge.t_grid.len() {
            return Err(config_err(
                "infer.steps",
                format!("exceeds the {} points of bridge.t_grid", self.bridge.t_grid.len()),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_of(e: Error) -> String {
        match e {
            Error::Config { path, .. } => path,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_toml_str("", &["bridge.sigma=0.005".into(), "train.stage=\"keyframe\"".into()]).unwrap();
        assert_eq!(c.bridge.sigma, 0.005);
        assert!(c.to_toml().unwrap().contains("sigma = 0.005"));
        let c = RunConfig::from_toml_str("[train]\nlr = 0.5\n", &["train.lr=0.25".into()]).unwrap();
        assert_eq!(c.train.lr, 0.25);
        let c = RunConfig::from_toml_str("", &["dataset.root=runs/data".into()]).unwrap();
        assert_eq!(c.dataset.root, PathBuf::from("runs/data"));
    }

    #[test]
    fn errors_name_the_dotted_path() {
        let e = RunConfig::from_toml_str("", &["train.clip_frames=0".into()]).unwrap_err();
        assert_eq!(path_of(e), "train.clip_frames");
        let e = RunConfig::from_toml_str("[train]\nclip_frame = 3\n", &[]).unwrap_err();
        assert_eq!(path_of(e), "train.clip_frame");
        let e = RunConfig::from_toml_str("[net]\ndim = \"wide\"\n", &[]).unwrap_err();
        assert_eq!(path_of(e), "net.dim");
        let e = RunConfig::from_toml_str("", &["dataset.synth.height=32".into()]).unwrap_err();
        assert_eq!(path_of(e), "net.height");
        let e = RunConfig::from_toml_str("", &["bogus.key=1".into()]).unwrap_err();
        assert_eq!(path_of(e), "bogus");
        assert!(RunConfig::from_toml_str("", &["novalue".into()]).is_err());
    }

    #[test]
    fn dump_round_trips() {
        let c = RunConfig::from_toml_str(
            "",
            &[
                "train.lr=0.0003".into(),
                "inverse.weights.depth=2.5".into(),
                "bridge.schedule=\"uniform\"".into(),
                "eval.gaps=[8, 32]".into(),
            ],
        )
        .unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, &[]).unwrap(), c);
    }
}
