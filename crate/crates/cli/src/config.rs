//! Run configuration: a plain `key = value` file, overridden by flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use llc_core::data::{Split, SyntheticSpec};
use llc_core::diffcore::Schedule;
use llc_core::train::TrainConfig;

use crate::error::{CliError, CliResult};

pub const REPORT_DIR_ENV: &str = "LLC_REPORT_DIR";
const FALLBACK_REPORT_DIR: &str = "llc-out";

/// Every accepted key with its default and a one-line description. Path
/// defaults are file names inside the report directory.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dataset", "dataset.csv", "dataset CSV; a sidecar with the same stem and .json extension carries splits and the class tree"),
    ("ood_dataset", "ood.csv", "out-of-distribution instances used by `ood`"),
    ("checkpoint", "checkpoint.bin", "model after instance-code training"),
    ("phase1_checkpoint", "checkpoint_phase1.bin", "model right after codebook learning"),
    ("codebook", "codebook.txt", "class codebook"),
    ("idx_images", "", "IDX image file converted by `gen-data` instead of generating data"),
    ("idx_labels", "", "IDX label file paired with idx_images"),
    ("label_column", "label", "label column when reading CSV datasets"),
    ("data_seed", "7", "seed for synthetic generation and splitting"),
    ("depth", "2", "synthetic hierarchy depth"),
    ("branching", "4", "synthetic hierarchy branching factor"),
    ("samples_per_class", "200", "synthetic samples per class"),
    ("dim", "32", "synthetic feature dimension"),
    ("noise_scale", "0.7", "synthetic within-class noise"),
    ("step_scale", "1", "synthetic step size at the top of the tree"),
    ("step_decay", "0.5", "synthetic step shrink factor per level"),
    ("test_fraction", "0.25", "fraction of each class held for the test split"),
    ("standardize", "true", "standardize features using training-split statistics"),
    ("held_out_classes", "", "comma-separated class ids written to ood_dataset instead of dataset"),
    ("bits", "20", "code length"),
    ("hidden", "64", "comma-separated hidden layer widths (empty for none)"),
    ("phase1_epochs", "100", "codebook learning epochs"),
    ("phase2_epochs", "25", "instance code epochs"),
    ("batch_size", "256", "minibatch size"),
    ("phase1_lr", "0.1", "peak learning rate while learning the codebook"),
    ("phase2_lr", "0.01", "peak learning rate while learning instance codes"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "0", "L2 weight decay"),
    ("schedule", "cosine", "learning-rate schedule: cosine or constant"),
    ("seed", "0", "training seed"),
    ("phase1_binarize_instances", "false", "binarize projections while learning the codebook"),
    ("nested_prefixes", "", "comma-separated prefix lengths whose uniqueness is reported"),
    ("phase", "both", "training phases: 1, 2 or both"),
    ("split", "test", "split evaluated by `eval`: train, test or all"),
    ("topk", "100", "retrieval depth K"),
    ("database_split", "train", "split indexed by `retrieve`"),
    ("query_split", "test", "split queried by `retrieve`"),
    ("database_codes", "", "codes file (id, bits, label per line) used as the retrieval database"),
    ("query_codes", "", "codes file used as retrieval queries"),
    ("score_source", "hamming", "max-class probability for thresholds: hamming or head"),
    ("conservative_samples", "50", "OOD samples used by the conservative threshold"),
    ("linkage", "average", "taxonomy linkage: single, complete or average"),
    ("split_bit", "", "bit whose instance split `taxonomy` reports"),
];

pub fn keys_help() -> String {
    let mut out = String::from("Configuration keys (file lines `key = value`, or `--set key=value`):\n");
    for (key, default, help) in KEYS {
        let shown = if default.is_empty() { "unset" } else { default };
        writeln!(out, "  {key:<26} {help} [default: {shown}]").expect("string write");
    }
    out
}

fn lookup(key: &str) -> Option<&'static (&'static str, &'static str, &'static str)> {
    KEYS.iter().find(|(k, _, _)| *k == key)
}

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    report_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if key == "report_dir" {
                cfg.report_dir = Some(PathBuf::from(value.trim()));
                continue;
            }
            if cfg.values.contains_key(key) {
                return Err(CliError::config(format!("{origin}:{}: key `{key}` given twice", i + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| CliError::config(format!("{origin}:{}: {}", i + 1, e.message)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        if key == "report_dir" {
            self.report_dir = Some(PathBuf::from(value));
            return Ok(());
        }
        if lookup(key).is_none() {
            return Err(CliError::config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn set_assignment(&mut self, assignment: &str) -> CliResult<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("`--set {assignment}` is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set_report_dir(&mut self, dir: PathBuf) {
        self.report_dir = Some(dir);
    }

    /// Explicit value, then `LLC_REPORT_DIR`, then `./llc-out`.
    pub fn report_dir(&self) -> PathBuf {
        self.report_dir
            .clone()
            .or_else(|| std::env::var_os(REPORT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(FALLBACK_REPORT_DIR))
    }

    pub fn raw(&self, key: &str) -> &str {
        let (_, default, _) = lookup(key).unwrap_or_else(|| panic!("unregistered key {key}"));
        self.values.get(key).map_or(default, String::as_str)
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    /// Explicit paths are used as given; defaults live in the report directory.
    pub fn path(&self, key: &str) -> PathBuf {
        match self.values.get(key) {
            Some(v) => PathBuf::from(v),
            None => self.report_dir().join(self.raw(key)),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::config(format!("key `{key}`: cannot parse `{raw}`: {e}")))
    }

    pub fn list(&self, key: &str) -> CliResult<Vec<usize>> {
        let raw = self.raw(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::config(format!("key `{key}`: cannot parse `{s}`: {e}")))
            })
            .collect()
    }

    pub fn split(&self, key: &str) -> CliResult<Option<Split>> {
        match self.raw(key) {
            "train" => Ok(Some(Split::Train)),
            "test" => Ok(Some(Split::Test)),
            "all" => Ok(None),
            other => Err(CliError::config(format!(
                "key `{key}`: expected train, test or all, got `{other}`"
            ))),
        }
    }

    pub fn synthetic_spec(&self) -> CliResult<SyntheticSpec> {
        Ok(SyntheticSpec {
            seed: self.get("data_seed")?,
            depth: self.get("depth")?,
            branching: self.get("branching")?,
            samples_per_class: self.get("samples_per_class")?,
            dim: self.get("dim")?,
            noise_scale: self.get("noise_scale")?,
            step_scale: self.get("step_scale")?,
            step_decay: self.get("step_decay")?,
            test_fraction: self.get("test_fraction")?,
            standardize: self.get("standardize")?,
        })
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        Ok(TrainConfig {
            bits: self.get("bits")?,
            hidden: self.list("hidden")?,
            phase1_epochs: self.get("phase1_epochs")?,
            phase2_epochs: self.get("phase2_epochs")?,
            batch_size: self.get("batch_size")?,
            phase1_lr: self.get("phase1_lr")?,
            phase2_lr: self.get("phase2_lr")?,
            momentum: self.get("momentum")?,
            weight_decay: self.get("weight_decay")?,
            schedule: self.get::<Schedule>("schedule")?,
            seed: self.get("seed")?,
            phase1_binarize_instances: self.get("phase1_binarize_instances")?,
            nested_prefixes: self.list("nested_prefixes")?,
        })
    }

    /// Fails with a config error naming the first input that does not exist.
    pub fn require_inputs(&self, keys: &[&str]) -> CliResult<()> {
        for key in keys {
            let path = self.path(key);
            if !path.is_file() {
                return Err(CliError::config(format!(
                    "missing input file {} (key `{key}`)",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_library_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.synthetic_spec().unwrap(), SyntheticSpec::default());
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::default());
    }

    #[test]
    fn file_and_overrides() {
        let mut cfg = RunConfig::parse("# comment\nbits = 8\nhidden=32, 16\n\nreport_dir = out\n", "t").unwrap();
        assert_eq!(cfg.get::<usize>("bits").unwrap(), 8);
        assert_eq!(cfg.list("hidden").unwrap(), vec![32, 16]);
        assert_eq!(cfg.path("codebook"), PathBuf::from("out/codebook.txt"));
        cfg.set_assignment("bits=12").unwrap();
        assert_eq!(cfg.get::<usize>("bits").unwrap(), 12);
        cfg.set("codebook", "/tmp/x.txt").unwrap();
        assert_eq!(cfg.path("codebook"), PathBuf::from("/tmp/x.txt"));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let err = RunConfig::parse("bitz = 3\n", "f").unwrap_err();
        assert_eq!(err.message, "f:1: unknown key `bitz`");
        assert!(RunConfig::parse("bits = 3\nbits = 4\n", "f").is_err());
        assert!(RunConfig::parse("bits\n", "f").is_err());
        let cfg = RunConfig::parse("bits = eight\n", "f").unwrap();
        assert!(cfg.get::<usize>("bits").unwrap_err().message.contains("`bits`"));
        assert!(RunConfig::default().set_assignment("novalue").is_err());
    }

    #[test]
    fn empty_list_and_split_values() {
        let mut cfg = RunConfig::default();
        cfg.set("hidden", "").unwrap();
        assert!(cfg.list("hidden").unwrap().is_empty());
        assert_eq!(cfg.split("split").unwrap(), Some(Split::Test));
        cfg.set("split", "all").unwrap();
        assert_eq!(cfg.split("split").unwrap(), None);
        cfg.set("split", "dev").unwrap();
        assert!(cfg.split("split").is_err());
    }
}
