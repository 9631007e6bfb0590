//! TOML run configuration shared by training, tracking, evaluation and ablations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{generate_sequence, read_sequence_dir, NoiseConfig, ScenarioConfig, Sequence};
use crate::metrics::DEFAULT_IOU_THRESHOLD;
use crate::model::ModelConfig;
use crate::tracker::TrackerConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `train/` and `test/` sequence directories. When unset
    /// the sequences are generated in memory.
    pub dir: Option<PathBuf>,
    pub preset: String,
    /// Scenario fields overriding the preset.
    pub scenario: toml::Table,
    pub train_sequences: usize,
    pub test_sequences: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            preset: "easy".into(),
            scenario: toml::Table::new(),
            train_sequences: 16,
            test_sequences: 2,
        }
    }
}

/// Training and test sequences.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

impl DataConfig {
    /// The preset with overrides applied, reseeded.
    pub fn scenario(&self, seed: u64) -> Result<ScenarioConfig> {
        let base = ScenarioConfig::preset(&self.preset, seed)?;
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in &self.scenario {
            if !table.contains_key(k) {
                return Err(Error::Config(format!("unknown scenario field {k:?}")));
            }
            table.insert(k.clone(), v.clone());
        }
        let mut cfg: ScenarioConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("scenario: {e}")))?;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Scenario seeds of the training and test sequences for one run seed.
    pub fn seeds(&self, seed: u64) -> (Vec<u64>, Vec<u64>) {
        let base = seed.wrapping_mul(1000);
        (
            (0..self.train_sequences as u64).map(|i| base + i).collect(),
            (0..self.test_sequences as u64).map(|i| base + 500 + i).collect(),
        )
    }

    pub fn generate(&self, seed: u64) -> Result<Split> {
        let (train_seeds, test_seeds) = self.seeds(seed);
        let make = |prefix: &str, seeds: &[u64]| -> Result<Vec<Sequence>> {
            seeds
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let mut seq = generate_sequence(&self.scenario(s)?)?;
                    seq.name = format!("{prefix}-{i:03}");
                    Ok(seq)
                })
                .collect()
        };
        Ok(Split {
            train: make("train", &train_seeds)?,
            test: make("test", &test_seeds)?,
        })
    }

    /// Reads the split from `dir` when set, otherwise generates it.
    pub fn load_or_generate(&self, seed: u64) -> Result<Split> {
        match &self.dir {
            Some(dir) => Ok(Split {
                train: read_split(&dir.join("train"))?,
                test: read_split(&dir.join("test"))?,
            }),
            None => self.generate(seed),
        }
    }
}

/// Every sequence directory below `dir`, in name order.
pub fn read_split(dir: &Path) -> Result<Vec<Sequence>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if e.path().is_dir() {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Empty(format!("no sequences in {}", dir.display())));
    }
    dirs.iter().map(|d| read_sequence_dir(d)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Run seeds averaged in every row.
    pub seeds: Vec<u64>,
    pub train_lengths: Vec<usize>,
    pub windows: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2],
            train_lengths: vec![4, 8],
            windows: vec![16, 24],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: data, initialisation, clip sampling and the empty-row draw.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub noise: NoiseConfig,
    /// Apply `noise` to the detections when tracking.
    pub track_noise: bool,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
            noise: NoiseConfig::default(),
            track_noise: false,
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the master seed and the seeds derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.tracker.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.tracker.validate()?;
        self.noise.validate()?;
        self.data.scenario(self.seed)?;
        let t = self.eval.iou_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("iou_threshold {t} outside (0, 1]")));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn nested_keys_and_overrides() {
        let cfg = RunConfig::from_toml(
            r#"
seed = 7
[model]
dim = 32
[train]
clip_len = 4
steps = 10
[train.optimizer]
learning_rate = 0.01
[train.loss]
margin = 0.5
[tracker]
beta = 0.4
horizon = 12
[data]
preset = "hard"
train_sequences = 2
[data.scenario]
frames = 30
num_targets = 3
crossings = [{ a = 0, b = 1, frame = 10 }]
"#,
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.train.seed, cfg.tracker.seed), (7, 7, 7));
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.train.optimizer.learning_rate, 0.01);
        assert_eq!(cfg.train.loss.margin, 0.5);
        assert_eq!((cfg.tracker.beta, cfg.tracker.horizon), (0.4, 12));
        let sc = cfg.data.scenario(3).unwrap();
        assert!(sc.shared_base_color);
        assert_eq!((sc.frames, sc.num_targets, sc.seed), (30, 3, 3));
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[data.scenario]\nframez = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[data]\npreset = \"medium\""), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[tracker]\nhorizon = 0").is_err());
        assert!(RunConfig::from_toml("[model]\ndim = 0").is_err());
        assert!(RunConfig::from_toml("[train.optimizer]\nrate = 1.0").is_err());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let data = DataConfig {
            train_sequences: 2,
            test_sequences: 1,
            scenario: toml::from_str("frames = 5").unwrap(),
            ..DataConfig::default()
        };
        let a = data.generate(1).unwrap();
        let b = data.generate(1).unwrap();
        assert_eq!(a.train[0].gt, b.train[0].gt);
        assert_eq!(a.test[0].name, "test-000");
        let (tr, te) = data.seeds(1);
        assert!(tr.iter().all(|s| !te.contains(s)));
        assert!(matches!(
            DataConfig {
                dir: Some("/nonexistent".into()),
                ..data
            }
            .load_or_generate(0),
            Err(Error::Io { .. })
        ));
    }
}
