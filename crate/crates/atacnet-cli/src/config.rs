//! Flat key-value run configuration. Parsing is fail-closed: unknown or
//! duplicate keys are errors, and every error names the offending key so a
//! typo can never silently change an experiment.

use std::collections::BTreeSet;
use std::path::PathBuf;

use atacnet::graph::{parse_activation, HostSpec};
use atacnet::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetChoice {
    Synthetic,
    Cifar10,
    Cifar100,
}

impl DatasetChoice {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetChoice::Synthetic => "synthetic",
            DatasetChoice::Cifar10 => "cifar10",
            DatasetChoice::Cifar100 => "cifar100",
        }
    }

    pub fn num_classes(&self, synthetic_classes: usize) -> usize {
        match self {
            DatasetChoice::Synthetic => synthetic_classes,
            DatasetChoice::Cifar10 => 10,
            DatasetChoice::Cifar100 => 100,
        }
    }
}

/// Everything a run needs, with the full-recipe defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // data
    pub dataset: DatasetChoice,
    pub data_dir: Option<PathBuf>,
    pub checksum_manifest: Option<PathBuf>,
    pub train_subset: usize,
    pub test_subset: usize,
    pub augment: bool,
    pub synthetic_classes: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_snr: f64,
    // model
    pub model: String,
    pub blocks_per_stage: usize,
    pub activation: String,
    pub reduction: usize,
    pub replacement_ratio: f64,
    // optimization
    pub base_lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub seed: u64,
    // run
    pub out_dir: Option<PathBuf>,
    pub record_wall_time: bool,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetChoice::Synthetic,
            data_dir: None,
            checksum_manifest: None,
            train_subset: 0,
            test_subset: 0,
            augment: true,
            synthetic_classes: 10,
            synthetic_train: 512,
            synthetic_test: 128,
            synthetic_snr: 2.0,
            model: "resnet20v2".into(),
            blocks_per_stage: 3,
            activation: "relu".into(),
            reduction: 2,
            replacement_ratio: 0.0,
            base_lr: 0.2,
            epochs: 400,
            weight_decay: 1e-4,
            batch_size: 128,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_decay_epochs: vec![300, 350],
            seed: 1,
            out_dir: None,
            record_wall_time: false,
            threads: 0,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> CliError {
    CliError::Config(format!("key '{key}': cannot parse {value:?} as {want}"))
}

impl RunConfig {
    /// Applies one `key = value` assignment; used for config lines and for
    /// command-line overrides alike.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetChoice::Synthetic,
                    "cifar10" => DatasetChoice::Cifar10,
                    "cifar100" => DatasetChoice::Cifar100,
                    _ => return Err(bad(key, v, "synthetic|cifar10|cifar100")),
                }
            }
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "checksum_manifest" => self.checksum_manifest = Some(PathBuf::from(v)),
            "train_subset" => self.train_subset = v.parse().map_err(|_| bad(key, v, "integer"))?,
            "test_subset" => self.test_subset = v.parse().map_err(|_| bad(key, v, "integer"))?,
            "augment" => self.augment = v.parse().map_err(|_| bad(key, v, "true|false"))?,
            "synthetic_classes" => {
                self.synthetic_classes = v.parse().map_err(|_| bad(key, v, "integer"))?
            }
            "synthetic_train" => self.synthetic_train = v.parse().map_err(|_| bad(key, v, "integer"))?,
            "synthetic_test" => self.synthetic_test = v.parse().map_err(|_| bad(key, v, "integer"))?,
            "synthetic_snr" => self.synthetic_snr = v.parse().map_err(|_| bad(key, v, "float"))?,
            "model" => self.model = v.to_string(),
            "blocks_per_stage" => {
                self.blocks_per_stage = v.parse().map_err(|_| bad(key, v, "integer"))?
            }
            "activation" => self.activation = v.to_string(),
            "reduction" => self.reduction = v.parse().map_err(|_| bad(key, v, "integer"))?,
            "replacement_ratio" => {
                self.replacement_ratio = v.parse().map_err(|_| bad(key, v, "float"))?
            }
            "base_lr" => self.base_lr = v.parse().map_err(|_| bad(key, v, "float"))?,
            "epochs" => self.epochs = v.parse().map_err(|_| bad(key, v, "integer"))?,
            "weight_decay" => self.weight_decay = v.parse().map_err(|_| bad(key, v, "float"))?,
            "batch_size" => self.batch_size = v.parse().map_err(|_| bad(key, v, "integer"))?,
            "momentum" => self.momentum = v.parse().map_err(|_| bad(key, v, "float"))?,
            "lr_decay_factor" => {
                self.lr_decay_factor = v.parse().map_err(|_| bad(key, v, "float"))?
            }
            "lr_decay_epochs" => {
                let mut epochs = Vec::new();
                if !v.is_empty() {
                    for part in v.split(',') {
                        epochs.push(
                            part.trim()
                                .parse()
                                .map_err(|_| bad(key, v, "comma-separated integers"))?,
                        );
                    }
                }
                self.lr_decay_epochs = epochs;
            }
            "seed" => self.seed = v.parse().map_err(|_| bad(key, v, "integer"))?,
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            "record_wall_time" => {
                self.record_wall_time = v.parse().map_err(|_| bad(key, v, "true|false"))?
            }
            "threads" => self.threads = v.parse().map_err(|_| bad(key, v, "integer"))?,
            _ => return Err(CliError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a config file body. `# comments`, blank lines, one
    /// `key = value` per line, no duplicate keys.
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| CliError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// `key=value` overrides from the command line, mirroring config keys.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                CliError::Config(format!("override {item:?}: expected key=value"))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes(self.synthetic_classes)
    }

    /// The buildable model description, with all validation that does not
    /// need tensors (activation names, reduction divisibility via build).
    pub fn host_spec(&self) -> Result<HostSpec, CliError> {
        match self.model.as_str() {
            "resnet20v2" => {
                let activation = parse_activation(&self.activation, self.reduction)
                    .map_err(|e| CliError::Config(format!("key 'activation': {e}")))?;
                if !(0.0..=1.0).contains(&self.replacement_ratio) {
                    return Err(CliError::Config(format!(
                        "key 'replacement_ratio': {} outside [0, 1]",
                        self.replacement_ratio
                    )));
                }
                Ok(HostSpec::Resnet20V2 {
                    blocks_per_stage: self.blocks_per_stage,
                    num_classes: self.num_classes(),
                    activation,
                    replacement_ratio: self.replacement_ratio,
                    reduction: self.reduction,
                })
            }
            "resnet50" => Ok(HostSpec::Resnet50 { num_classes: 1000 }),
            "resnet50v1b" => Ok(HostSpec::Resnet50V1b {
                num_classes: 1000,
                atac: false,
            }),
            "atac-resnet50" => Ok(HostSpec::Resnet50V1b {
                num_classes: 1000,
                atac: true,
            }),
            other => Err(CliError::Config(format!("key 'model': unknown model {other:?}"))),
        }
    }

    pub fn train_config(&self, model_spec: &str) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            momentum: self.momentum,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_epochs: self.lr_decay_epochs.clone(),
            seed: self.seed,
            augment: self.augment,
            record_wall_time: self.record_wall_time,
            dataset: self.dataset.name().to_string(),
            model_spec: model_spec.to_string(),
        }
    }

    /// Every key with its effective value, in file order, for the manifest.
    pub fn echo(&self) -> Vec<(String, String)> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let decays: Vec<String> = self.lr_decay_epochs.iter().map(|e| e.to_string()).collect();
        vec![
            ("dataset".into(), self.dataset.name().into()),
            ("data_dir".into(), path(&self.data_dir)),
            ("checksum_manifest".into(), path(&self.checksum_manifest)),
            ("train_subset".into(), self.train_subset.to_string()),
            ("test_subset".into(), self.test_subset.to_string()),
            ("augment".into(), self.augment.to_string()),
            ("synthetic_classes".into(), self.synthetic_classes.to_string()),
            ("synthetic_train".into(), self.synthetic_train.to_string()),
            ("synthetic_test".into(), self.synthetic_test.to_string()),
            ("synthetic_snr".into(), self.synthetic_snr.to_string()),
            ("model".into(), self.model.clone()),
            ("blocks_per_stage".into(), self.blocks_per_stage.to_string()),
            ("activation".into(), self.activation.clone()),
            ("reduction".into(), self.reduction.to_string()),
            ("replacement_ratio".into(), self.replacement_ratio.to_string()),
            ("base_lr".into(), self.base_lr.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("lr_decay_factor".into(), self.lr_decay_factor.to_string()),
            ("lr_decay_epochs".into(), decays.join(",")),
            ("seed".into(), self.seed.to_string()),
            ("out_dir".into(), path(&self.out_dir)),
            ("record_wall_time".into(), self.record_wall_time.to_string()),
            ("threads".into(), self.threads.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_fails_closed() {
        let cfg = RunConfig::parse(
            "# demo\ndataset = synthetic\nepochs = 5\nlr_decay_epochs = 3,4\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.lr_decay_epochs, vec![3, 4]);
        assert_eq!(cfg.seed, 9);

        let err = RunConfig::parse("epochz = 5\n").unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");

        let err = RunConfig::parse("epochs = 5\nepochs = 6\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        let err = RunConfig::parse("epochs = five\n").unwrap_err();
        assert!(err.to_string().contains("'epochs'"), "{err}");
    }

    #[test]
    fn overrides_mirror_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["seed=4".into(), "batch_size=16".into()]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.batch_size, 16);
        assert!(cfg.apply_overrides(&["nope=1".into()]).is_err());
    }

    #[test]
    fn host_spec_validation() {
        let mut cfg = RunConfig {
            activation: "gelu".into(),
            ..RunConfig::default()
        };
        assert!(cfg.host_spec().is_err());
        cfg.activation = "relu".into();
        cfg.replacement_ratio = 1.5;
        assert!(cfg.host_spec().is_err());
        cfg.replacement_ratio = 0.5;
        cfg.host_spec().unwrap();
    }
}
