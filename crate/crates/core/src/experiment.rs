//! Train-then-track runs on seeded data and the ablation tables built from them.

use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::csc_attention::FusionVariant;
use crate::error::{Error, Result};
use crate::harness::{inject_noise, NoiseConfig, Sequence};
use crate::metrics::{evaluate_sequence, EvalReport};
use crate::model::Model;
use crate::mot::TrackSet;
use crate::tracker::{track_frames, TrackerConfig};
use crate::training::{train, Dataset, LossReport};

/// Initialises from the run seed and trains on `sequences`.
pub fn train_model(cfg: &RunConfig, sequences: &[Sequence], log: Option<&mut dyn Write>) -> Result<(Model, Vec<LossReport>)> {
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    let dataset = Dataset::new(sequences, &cfg.model.region)?;
    let losses = train(&mut model, &dataset, &cfg.train, log)?;
    Ok((model, losses))
}

/// Detections of one test sequence, perturbed when `noise` is given.
pub fn test_detections(seq: &Sequence, index: usize, noise: Option<&NoiseConfig>, seed: u64) -> Result<Vec<crate::geometry::Detection>> {
    match noise {
        None => Ok(seq.detections.clone()),
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(index as u64));
            inject_noise(&seq.detections, n, seq.image_size(), &mut rng)
        }
    }
}

/// Tracks every sequence and scores the results against ground truth.
pub fn evaluate_model(
    model: &Model,
    sequences: &[Sequence],
    tracker: &TrackerConfig,
    noise: Option<&NoiseConfig>,
    seed: u64,
    iou_threshold: f64,
) -> Result<(EvalReport, Vec<TrackSet>)> {
    let mut rows = Vec::with_capacity(sequences.len());
    let mut sets = Vec::with_capacity(sequences.len());
    for (i, seq) in sequences.iter().enumerate() {
        let dets = test_detections(seq, i, noise, seed)?;
        let set = track_frames(&seq.frames, &dets, model, tracker)?;
        rows.push(evaluate_sequence(&seq.name, &set, &seq.gt_track_set(), iou_threshold)?);
        sets.push(set);
    }
    Ok((EvalReport::combine(rows), sets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Levels,
    Fusion,
    TrainLen,
    InferLen,
    Noise,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "levels" => Ok(AblationAxis::Levels),
            "fusion" => Ok(AblationAxis::Fusion),
            "train_len" | "train-len" => Ok(AblationAxis::TrainLen),
            "infer_len" | "infer-len" => Ok(AblationAxis::InferLen),
            "noise" => Ok(AblationAxis::Noise),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation axis {other:?}; expected levels, fusion, train_len, infer_len or noise"
            ))),
        }
    }
}

/// Means over seeds of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub idf1: f64,
    pub mota: f64,
    pub id_switches: f64,
    pub per_seed_idf1: Vec<f64>,
    /// Noise axis only: IDF1 on perturbed detections.
    pub noisy_idf1: Option<f64>,
}

impl AblationRow {
    pub fn idf1_drop(&self) -> Option<f64> {
        self.noisy_idf1.map(|n| self.idf1 - n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        let noise = self.axis == AblationAxis::Noise;
        let mut s = format!("{:<width$} {:>7} {:>7} {:>7}", "variant", "IDF1", "MOTA", "IDSW");
        if noise {
            s.push_str(&format!(" {:>7} {:>7}", "IDF1(n)", "drop"));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<width$} {:>7.3} {:>7.3} {:>7.1}", r.label, r.idf1, r.mota, r.id_switches);
            if let (Some(n), Some(d)) = (r.noisy_idf1, r.idf1_drop()) {
                let _ = write!(s, " {n:>7.3} {d:>7.3}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,idf1,mota,id_switches,noisy_idf1,idf1_drop\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.label,
                r.idf1,
                r.mota,
                r.id_switches,
                opt(r.noisy_idf1),
                opt(r.idf1_drop())
            );
        }
        s
    }
}

/// One configuration of an ablation and how it differs from the base run.
#[derive(Debug, Clone)]
struct Setting {
    label: String,
    variant: FusionVariant,
    clip_len: Option<usize>,
    window: Option<usize>,
}

fn settings(cfg: &RunConfig, axis: AblationAxis) -> Vec<Setting> {
    let variant = |v: FusionVariant| Setting {
        label: v.label().to_string(),
        variant: v,
        clip_len: None,
        window: None,
    };
    let full = cfg.model.fusion.variant;
    match axis {
        AblationAxis::Levels => FusionVariant::LEVELS.iter().map(|&v| variant(v)).collect(),
        AblationAxis::Fusion => [FusionVariant::SemanticOnly, FusionVariant::MultiRegion, FusionVariant::Full]
            .iter()
            .map(|&v| variant(v))
            .collect(),
        AblationAxis::Noise => [FusionVariant::SemanticOnly, FusionVariant::Full]
            .iter()
            .map(|&v| variant(v))
            .collect(),
        AblationAxis::TrainLen => cfg
            .ablation
            .train_lengths
            .iter()
            .map(|&t| Setting {
                label: format!("T={t}"),
                variant: full,
                clip_len: Some(t),
                window: None,
            })
            .collect(),
        AblationAxis::InferLen => cfg
            .ablation
            .windows
            .iter()
            .map(|&w| Setting {
                label: format!("window={w}"),
                variant: full,
                clip_len: None,
                window: Some(w),
            })
            .collect(),
    }
}

/// Trains and evaluates every setting of `axis` for each ablation seed.
/// Settings that differ only at inference share one trained model.
pub fn ablate(cfg: &RunConfig, axis: AblationAxis, mut progress: Option<&mut dyn Write>) -> Result<AblationTable> {
    cfg.validate()?;
    let settings = settings(cfg, axis);
    if settings.is_empty() {
        return Err(Error::Config(format!("ablation axis {axis:?} has no settings")));
    }
    let seeds = cfg.ablation.seeds.clone();
    let mut sums: Vec<(f64, f64, f64, Option<f64>, Vec<f64>)> = vec![(0.0, 0.0, 0.0, None, Vec::new()); settings.len()];
    for &seed in &seeds {
        let run = cfg.clone().with_seed(seed);
        let split = run.data.load_or_generate(seed)?;
        let mut shared: Option<Model> = None;
        for (k, s) in settings.iter().enumerate() {
            let mut rc = run.clone();
            rc.model.fusion.variant = s.variant;
            if let Some(t) = s.clip_len {
                rc.train.clip_len = t;
            }
            let model = match (&shared, s.window) {
                (Some(m), Some(_)) => m.clone(),
                _ => {
                    let (m, _) = train_model(&rc, &split.train, None)?;
                    if s.window.is_some() {
                        shared = Some(m.clone());
                    }
                    m
                }
            };
            let mut tracker = rc.tracker.clone();
            if let Some(w) = s.window {
                tracker.window = w;
            }
            let iou = rc.eval.iou_threshold;
            let (clean, _) = evaluate_model(&model, &split.test, &tracker, None, seed, iou)?;
            let noisy = if axis == AblationAxis::Noise {
                Some(evaluate_model(&model, &split.test, &tracker, Some(&rc.noise), seed, iou)?.0.idf1)
            } else {
                None
            };
            let acc = &mut sums[k];
            acc.0 += clean.idf1;
            acc.1 += clean.mota;
            acc.2 += clean.id_switches as f64;
            acc.3 = noisy.map(|n| acc.3.unwrap_or(0.0) + n);
            acc.4.push(clean.idf1);
            if let Some(w) = progress.as_mut() {
                let _ = writeln!(
                    w,
                    "seed {seed} {}: idf1 {:.4} mota {:.4} idsw {}{}",
                    s.label,
                    clean.idf1,
                    clean.mota,
                    clean.id_switches,
                    noisy.map_or(String::new(), |n| format!(" noisy idf1 {n:.4}"))
                );
            }
        }
    }
    let n = seeds.len() as f64;
    let rows = settings
        .iter()
        .zip(sums)
        .map(|(s, (idf1, mota, idsw, noisy, per_seed))| AblationRow {
            label: s.label.clone(),
            idf1: idf1 / n,
            mota: mota / n,
            id_switches: idsw / n,
            per_seed_idf1: per_seed,
            noisy_idf1: noisy.map(|v| v / n),
        })
        .collect();
    Ok(AblationTable { axis, seeds, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::geometry::RegionConfig;

    fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig::from_toml(
            r#"
[data]
train_sequences = 1
test_sequences = 1
[data.scenario]
frames = 8
num_targets = 3
crossings = []
[train]
steps = 2
batch_size = 1
clip_len = 3
[ablation]
seeds = [0]
train_lengths = [2, 3]
windows = [2, 4]
"#,
        )
        .unwrap();
        cfg.model.region = RegionConfig {
            patch_size: 8,
            ..RegionConfig::default()
        };
        cfg.model.dim = 8;
        cfg.model.encoder = EncoderConfig { channels: vec![4] };
        cfg
    }

    #[test]
    fn axis_names_parse() {
        assert_eq!("levels".parse::<AblationAxis>().unwrap(), AblationAxis::Levels);
        assert_eq!("train_len".parse::<AblationAxis>().unwrap(), AblationAxis::TrainLen);
        assert!(matches!("depth".parse::<AblationAxis>(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn table_shapes_per_axis() {
        let cfg = tiny_run();
        let levels = ablate(&cfg, AblationAxis::Levels, None).unwrap();
        assert_eq!(levels.rows.len(), 4);
        assert_eq!(levels.to_table().lines().count(), 5);
        let noise = ablate(&cfg, AblationAxis::Noise, None).unwrap();
        assert_eq!(noise.rows.len(), 2);
        assert!(noise.rows.iter().all(|r| r.idf1_drop().is_some()));
        assert_eq!(noise.to_csv().lines().count(), 3);
        let windows = ablate(&cfg, AblationAxis::InferLen, None).unwrap();
        assert_eq!(windows.rows[1].label, "window=4");
        assert_eq!(ablate(&cfg, AblationAxis::Fusion, None).unwrap().rows.len(), 3);
        assert_eq!(ablate(&cfg, AblationAxis::TrainLen, None).unwrap().rows.len(), 2);
    }

    #[test]
    fn noisy_detections_are_seeded() {
        let cfg = tiny_run();
        let split = cfg.data.generate(0).unwrap();
        let noise = NoiseConfig::default();
        let a = test_detections(&split.test[0], 0, Some(&noise), 3).unwrap();
        let b = test_detections(&split.test[0], 0, Some(&noise), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, split.test[0].detections);
        assert_eq!(test_detections(&split.test[0], 0, None, 3).unwrap(), split.test[0].detections);
    }
}
