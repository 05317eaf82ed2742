//! Layered settings: built-in defaults, then the `--config` file section for
//! the subcommand, then flags. Environment overrides for paths and ports
//! sit between the file and the flags.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const SECTIONS: [&str; 12] = [
    "synth-data",
    "ingest-concepts",
    "ingest-classes",
    "ingest-merge",
    "pretrain-vision",
    "train",
    "ablation",
    "generate",
    "serve",
    "eval-aggregate",
    "eval-probe",
    "bench",
];

pub const EXTRA_SECTIONS: [&str; 1] = ["eval-guard"];

/// Overlays `over` onto `base`. Struct-shaped objects (non-empty in `base`)
/// reject keys they do not have; empty ones are free-form maps.
pub fn merge(base: &mut Value, over: Value, at: &str) -> Result<(), CliError> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let strict = !b.is_empty();
            for (k, v) in o {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if !slot.is_null() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v,
                    None if strict => return Err(CliError::Validation(format!("unknown setting {here:?}"))),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

/// The parsed `--config` file: one object per subcommand section.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    sections: Map<String, Value>,
    pub path: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config file {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config file {}: {e}", path.display())))?;
        let Value::Object(sections) = v else {
            return Err(CliError::Validation(format!("config file {} must hold a JSON object", path.display())));
        };
        if let Some(k) = sections.keys().find(|k| !SECTIONS.contains(&k.as_str()) && !EXTRA_SECTIONS.contains(&k.as_str())) {
            return Err(CliError::Validation(format!("config file {}: unknown section {k:?}", path.display())));
        }
        Ok(Self { sections, path: Some(path.to_path_buf()) })
    }

    #[cfg(test)]
    pub fn from_value(v: Value) -> Result<Self, CliError> {
        match v {
            Value::Object(sections) => Ok(Self { sections, path: None }),
            _ => Err(CliError::Validation("config must be a JSON object".into())),
        }
    }

    /// Default, then file section, then `env`, then `flags`.
    pub fn resolve<T>(&self, section: &str, env: Flags, flags: Flags) -> Result<T, CliError>
    where
        T: Serialize + DeserializeOwned + Default,
    {
        let mut v = serde_json::to_value(T::default()).expect("settings serialize");
        if let Some(s) = self.sections.get(section) {
            merge(&mut v, s.clone(), section)?;
        }
        merge(&mut v, env.0, section)?;
        merge(&mut v, flags.0, section)?;
        serde_json::from_value(v).map_err(|e| CliError::Validation(format!("settings for {section}: {e}")))
    }
}

/// Values given on the command line, keyed by dotted setting path.
#[derive(Clone, Debug)]
pub struct Flags(Value);

impl Default for Flags {
    fn default() -> Self {
        Self(Value::Object(Map::new()))
    }
}

impl Flags {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set<T: Serialize>(mut self, path: &str, value: Option<T>) -> Self {
        if let Some(v) = value {
            let mut slot = &mut self.0;
            for key in path.split('.') {
                slot = slot
                    .as_object_mut()
                    .expect("flag paths only pass through objects")
                    .entry(key.to_string())
                    .or_insert_with(|| Value::Object(Map::new()));
            }
            *slot = serde_json::to_value(v).expect("flag values serialize");
        }
        self
    }

    /// Only set when the switch was given.
    pub fn switch(self, path: &str, on: bool) -> Self {
        self.set(path, on.then_some(true))
    }
}

/// Provenance written next to every artifact set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub config_file: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_at_ms: u64,
    pub finished_at_ms: Option<u64>,
    pub status: String,
    pub error: Option<String>,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

fn now_ms() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl RunManifest {
    /// Writes the manifest with status `running` into `dir`.
    pub fn begin<C: Serialize>(
        dir: &Path,
        subcommand: &str,
        config: &C,
        config_file: Option<&Path>,
        inputs: Vec<PathBuf>,
        seed: Option<u64>,
    ) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
        let m = Self {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config).expect("settings serialize"),
            config_file: config_file.map(Path::to_path_buf),
            inputs,
            outputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at_ms: now_ms(),
            finished_at_ms: None,
            status: "running".into(),
            error: None,
        };
        m.write(dir)?;
        Ok(m)
    }

    pub fn finish<T>(mut self, dir: &Path, outcome: &Result<T, CliError>, outputs: Vec<PathBuf>) -> Result<(), CliError> {
        self.finished_at_ms = Some(now_ms());
        self.outputs = outputs;
        match outcome {
            Ok(_) => self.status = "ok".into(),
            Err(e) => {
                self.status = "failed".into();
                self.error = Some(e.to_string());
            }
        }
        self.write(dir)
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        let p = dir.join(RUN_MANIFEST);
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        std::fs::write(&p, json).map_err(|e| CliError::Runtime(format!("writing {}: {e}", p.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Inner {
        a: u32,
        b: Option<String>,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Demo {
        seed: u64,
        n: usize,
        inner: Inner,
        map: std::collections::BTreeMap<String, String>,
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let file = ConfigFile::from_value(json!({ "train": { "seed": 5, "n": 9, "inner": { "b": "x" } } })).unwrap();
        let d: Demo = file.resolve("train", Flags::new(), Flags::new().set("seed", Some(7u64))).unwrap();
        assert_eq!((d.seed, d.n, d.inner.a, d.inner.b.as_deref()), (7, 9, 0, Some("x")));
        let d: Demo = ConfigFile::default().resolve("train", Flags::new(), Flags::new()).unwrap();
        assert_eq!(d, Demo::default());
    }

    #[test]
    fn environment_sits_between_file_and_flags() {
        let file = ConfigFile::from_value(json!({ "train": { "n": 1 } })).unwrap();
        let env = Flags::new().set("n", Some(2usize));
        let d: Demo = file.resolve("train", env.clone(), Flags::new()).unwrap();
        assert_eq!(d.n, 2);
        let d: Demo = file.resolve("train", env, Flags::new().set("n", Some(3usize))).unwrap();
        assert_eq!(d.n, 3);
    }

    #[test]
    fn typos_are_rejected_but_maps_are_free_form() {
        let file = ConfigFile::from_value(json!({ "train": { "sed": 5 } })).unwrap();
        assert!(file.resolve::<Demo>("train", Flags::new(), Flags::new()).is_err());
        let file = ConfigFile::from_value(json!({ "train": { "map": { "k": "v" } } })).unwrap();
        let d: Demo = file.resolve("train", Flags::new(), Flags::new()).unwrap();
        assert_eq!(d.map["k"], "v");
    }
}
