//! Clip sampling, association and feature losses, and the optimisation loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::association::AssociationProbabilities;
use crate::csc_attention::PatchLayout;
use crate::encoder::{stack_patches, FeatureVector};
use crate::error::{Error, Result};
use crate::geometry::{build_region_triplet, Detection, RegionConfig, RegionTriplet};
use crate::harness::{annotated_detections, group_by_frame, Sequence};
use crate::imaging::Patch;
use crate::model::Model;
use crate::nn::{AdamWConfig, AdamWState, Graph, GroupTarget, NllGroup, RowMix, Tensor, Var};

/// How steps without a ground-truth detection are supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbsentMode {
    /// A learned no-detection logit joins every softmax group.
    Logit,
    /// Absent steps contribute nothing.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub normalize_features: bool,
    pub absent: AbsentMode,
    /// Adds the part/background hinge when the variant uses both parts and context.
    pub feature_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.3,
            normalize_features: true,
            absent: AbsentMode::Logit,
            feature_loss: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub clip_len: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    /// Random channel order and per-channel gain applied to each sampled clip.
    pub color_jitter: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            clip_len: 8,
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                ..AdamWConfig::default()
            },
            loss: LossConfig::default(),
            color_jitter: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.clip_len == 0 {
            return Err(Error::Config("batch_size and clip_len must be positive".into()));
        }
        if self.loss.margin < 0.0 || self.optimizer.learning_rate < 0.0 {
            return Err(Error::Config("margin and learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// One trajectory of a clip: detections known from before the clip plus the
/// ground-truth detection index at every clip step (`None` when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTrajectory {
    pub history: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

/// A training clip. Detection frames are clip steps `0..num_steps`.
#[derive(Debug, Clone)]
pub struct ClipBatch {
    pub num_steps: usize,
    pub detections: Vec<Detection>,
    pub triplets: Vec<RegionTriplet>,
    pub trajectories: Vec<ClipTrajectory>,
}

impl ClipBatch {
    pub fn validate(&self) -> Result<()> {
        let n = self.detections.len();
        if self.triplets.len() != n {
            return Err(Error::Shape(format!("{} triplets for {n} detections", self.triplets.len())));
        }
        let mut claimed = vec![false; n];
        for (j, t) in self.trajectories.iter().enumerate() {
            if t.targets.len() != self.num_steps {
                return Err(Error::Shape(format!("trajectory {j} has {} steps", t.targets.len())));
            }
            if t.history.iter().any(|&i| i >= n) {
                return Err(Error::InvalidArgument(format!("trajectory {j} history out of range")));
            }
            for (q, target) in t.targets.iter().enumerate() {
                let Some(i) = *target else { continue };
                if i >= n || self.detections[i].frame != q {
                    return Err(Error::InvalidArgument(format!(
                        "trajectory {j} step {q} points at detection {i} outside that step"
                    )));
                }
                if std::mem::replace(&mut claimed[i], true) {
                    return Err(Error::InvalidArgument(format!("detection {i} claimed twice")));
                }
            }
        }
        Ok(())
    }

    /// Per-trajectory, per-step targets.
    pub fn gt_assignment(&self) -> Vec<Vec<Option<usize>>> {
        self.trajectories.iter().map(|t| t.targets.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub assoc: f64,
    pub feat: f64,
    pub total: f64,
    pub margin: f64,
}

struct CachedSequence {
    len: usize,
    detections: Vec<Detection>,
    triplets: Vec<RegionTriplet>,
}

/// Annotated sequences with every region triplet cropped up front.
pub struct Dataset {
    sequences: Vec<CachedSequence>,
    region: RegionConfig,
}

impl Dataset {
    pub fn new(sequences: &[Sequence], region: &RegionConfig) -> Result<Self> {
        let mut cached = Vec::with_capacity(sequences.len());
        for seq in sequences {
            let per_frame = group_by_frame(&annotated_detections(seq), seq.len());
            let mut detections = Vec::new();
            let mut triplets = Vec::new();
            for (f, dets) in per_frame.iter().enumerate() {
                for d in dets {
                    if d.identity.is_none() {
                        return Err(Error::InvalidArgument(format!(
                            "sequence {} has unlabelled boxes at frame {f}",
                            seq.name
                        )));
                    }
                    triplets.push(build_region_triplet(&seq.frames[f], d, dets, region)?);
                    detections.push(*d);
                }
            }
            cached.push(CachedSequence {
                len: seq.len(),
                detections,
                triplets,
            });
        }
        Ok(Dataset {
            sequences: cached,
            region: region.clone(),
        })
    }

    pub fn region(&self) -> &RegionConfig {
        &self.region
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }
}

/// A contiguous `clip_len`-frame window from a uniformly chosen sequence.
pub fn sample_clip(dataset: &Dataset, clip_len: usize, rng: &mut ChaCha8Rng) -> Result<ClipBatch> {
    let eligible: Vec<&CachedSequence> = dataset.sequences.iter().filter(|s| s.len >= clip_len).collect();
    if eligible.is_empty() || clip_len == 0 {
        return Err(Error::InvalidArgument(format!("no sequence has {clip_len} frames")));
    }
    let seq = eligible[rng.random_range(0..eligible.len())];
    let start = rng.random_range(0..=seq.len - clip_len);
    let mut detections = Vec::new();
    let mut triplets = Vec::new();
    let mut slots: BTreeMap<u64, Vec<Option<usize>>> = BTreeMap::new();
    for (d, t) in seq.detections.iter().zip(&seq.triplets) {
        if d.frame < start || d.frame >= start + clip_len {
            continue;
        }
        let step = d.frame - start;
        let id = d.identity.expect("dataset detections are labelled");
        slots.entry(id).or_insert_with(|| vec![None; clip_len])[step] = Some(detections.len());
        detections.push(Detection { frame: step, ..*d });
        triplets.push(t.clone());
    }
    let trajectories = slots
        .into_values()
        .map(|targets| ClipTrajectory {
            history: Vec::new(),
            targets,
        })
        .collect();
    Ok(ClipBatch {
        num_steps: clip_len,
        detections,
        triplets,
        trajectories,
    })
}

/// Permutes the colour channels and scales each by a gain in `[0.8, 1.2]`,
/// identically for every patch of the clip. Zero pixels stay zero.
pub fn jitter_colors(clip: &mut ClipBatch, rng: &mut ChaCha8Rng) {
    let mut order = [0usize, 1, 2];
    order.shuffle(rng);
    let gain: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..=1.2));
    let apply = |p: &mut Patch| {
        let plane = p.width * p.height;
        let src = p.data.clone();
        for (c, &from) in order.iter().enumerate() {
            for i in 0..plane {
                p.data[c * plane + i] = (src[from * plane + i] * gain[c]).min(1.0);
            }
        }
    };
    for t in &mut clip.triplets {
        t.parts.iter_mut().for_each(apply);
        apply(&mut t.semantic);
        apply(&mut t.context);
        apply(&mut t.context_background);
    }
}

/// Graph nodes of one loss evaluation.
pub struct LossGraph {
    pub graph: Graph,
    pub total: Var,
    pub assoc: Var,
    pub feat: Option<Var>,
}

impl LossGraph {
    pub fn report(&self, margin: f64) -> LossReport {
        let assoc = self.graph.value(self.assoc).item();
        let feat = self.feat.map_or(0.0, |f| self.graph.value(f).item());
        LossReport {
            assoc,
            feat,
            total: self.graph.value(self.total).item(),
            margin,
        }
    }
}

fn feature_loss_active(model: &Model, cfg: &LossConfig) -> bool {
    let v = model.config.fusion.variant;
    cfg.feature_loss && v.uses_parts() && v.uses_context()
}

/// Hinge on part-vs-background distances for `n` detections laid out in `feats`.
fn feature_hinge(
    g: &mut Graph,
    model: &Model,
    feats: Var,
    layout: &PatchLayout,
    n: usize,
    cfg: &LossConfig,
) -> Var {
    let np = layout.parts;
    let cross = model.fusion().cross_attn;
    let store = &model.params;
    let part_idx: Vec<usize> = (0..n).flat_map(|d| (0..np).map(move |u| layout.part(d, u))).collect();
    let sem_idx: Vec<usize> = (0..n).map(|d| layout.semantic(d)).collect();
    let sem_rep: Vec<usize> = (0..n).flat_map(|d| std::iter::repeat_n(layout.semantic(d), np)).collect();
    let bg_idx: Vec<usize> = (0..n).map(|d| layout.background(d)).collect();
    let parts = g.gather_rows(feats, &part_idx);
    let sem = g.gather_rows(feats, &sem_idx);
    let bg = g.gather_rows(feats, &bg_idx);
    let heads = model.config.fusion.heads;
    let pos_att = cross.forward(g, store, parts, sem, n, heads);
    let neg_att = cross.forward(g, store, sem, bg, n, heads);
    let sem_rep = g.gather_rows(feats, &sem_rep);
    let (pos_att, neg_att, sem_rep, sem) = if cfg.normalize_features {
        (
            g.normalize_rows(pos_att),
            g.normalize_rows(neg_att),
            g.normalize_rows(sem_rep),
            g.normalize_rows(sem),
        )
    } else {
        (pos_att, neg_att, sem_rep, sem)
    };
    let dp = g.sub(pos_att, sem_rep);
    let dp = g.sum_sq_rows(dp);
    let pos = g.segment_min(dp, np);
    let dn = g.sub(neg_att, sem);
    let neg = g.sum_sq_rows(dn);
    let diff = g.sub(pos, neg);
    let shifted = g.add_scalar(diff, cfg.margin);
    let hinge = g.relu(shifted);
    g.mean(hinge)
}

/// Builds the full loss graph over a batch of clips: association NLL summed
/// per clip and averaged over clips, plus the feature hinge averaged over
/// detections.
pub fn batch_loss(model: &Model, clips: &[ClipBatch], cfg: &LossConfig) -> Result<LossGraph> {
    if clips.is_empty() {
        return Err(Error::Empty("no clips in batch".into()));
    }
    for c in clips {
        c.validate()?;
    }
    let feat_on = feature_loss_active(model, cfg);
    let layout = PatchLayout::new(model.config.fusion.variant, model.num_parts(), feat_on);
    let mut g = Graph::new();
    let total_dets: usize = clips.iter().map(|c| c.detections.len()).sum();
    let zero = g.input(Tensor::scalar(0.0));
    if total_dets == 0 {
        return Ok(LossGraph {
            graph: g,
            total: zero,
            assoc: zero,
            feat: None,
        });
    }
    let mut patches = Vec::with_capacity(total_dets * layout.per_detection());
    for c in clips {
        patches.extend(layout.collect(&c.triplets));
    }
    let batch = stack_patches(&patches, model.config.region.patch_size)?;
    let feats = model.encode_batch(&mut g, batch);
    let tokens = model.fusion().forward(&mut g, &model.params, feats, &layout, total_dets);
    let head = model.association();
    let q = head.queries(&mut g, &model.params, tokens);
    let k = head.keys(&mut g, &model.params, tokens);

    let mut mix = Vec::new();
    let mut groups = Vec::new();
    let mut base = 0;
    for c in clips {
        let mut by_step: Vec<Vec<usize>> = vec![Vec::new(); c.num_steps];
        for (i, d) in c.detections.iter().enumerate() {
            by_step[d.frame].push(base + i);
        }
        for traj in &c.trajectories {
            for (step, target) in traj.targets.iter().enumerate() {
                let cols = &by_step[step];
                let target = match target {
                    Some(i) => {
                        let pos = cols.iter().position(|&col| col == base + i).expect("validated target");
                        GroupTarget::Column(pos)
                    }
                    None if cfg.absent == AbsentMode::Skip || cols.is_empty() => continue,
                    None => GroupTarget::Absent,
                };
                let others: Vec<usize> = traj
                    .history
                    .iter()
                    .map(|&i| base + i)
                    .chain(
                        traj.targets
                            .iter()
                            .enumerate()
                            .filter(|&(s, _)| s != step)
                            .filter_map(|(_, t)| t.map(|i| base + i)),
                    )
                    .collect();
                if others.is_empty() {
                    continue;
                }
                groups.push(NllGroup {
                    row: mix.len(),
                    cols: cols.clone(),
                    include_absent: cfg.absent == AbsentMode::Logit,
                    target,
                });
                mix.push(others);
            }
        }
        base += c.detections.len();
    }
    let assoc = if groups.is_empty() {
        zero
    } else {
        let qm = g.row_mix(q, Rc::new(RowMix::mean_of(&mix)));
        let scores = head.scores(&mut g, qm, k);
        let absent = (cfg.absent == AbsentMode::Logit).then(|| head.absent_logits(&mut g, &model.params, qm));
        let nll = g.group_nll(scores, absent, Rc::new(groups));
        g.scale(nll, 1.0 / clips.len() as f64)
    };
    let feat = feat_on.then(|| feature_hinge(&mut g, model, feats, &layout, total_dets, cfg));
    let total = match feat {
        Some(f) => g.add(assoc, f),
        None => assoc,
    };
    Ok(LossGraph {
        graph: g,
        total,
        assoc,
        feat,
    })
}

/// Association NLL from already normalised probabilities. `gt[j][f]` is the
/// detection of trajectory `j` at frame `f`. Absent steps use the row's
/// no-detection probability when present and are skipped otherwise.
pub fn association_loss(probs: &AssociationProbabilities, gt: &[Vec<Option<usize>>]) -> Result<f64> {
    let n = probs.det_frames.len();
    let mut loss = 0.0;
    for (j, steps) in gt.iter().enumerate() {
        let row = probs
            .probs
            .get(j)
            .ok_or_else(|| Error::InvalidArgument(format!("no probability row for trajectory {j}")))?;
        for (f, target) in steps.iter().enumerate() {
            match *target {
                Some(i) => {
                    if i >= n || probs.det_frames[i] != f {
                        return Err(Error::InvalidArgument(format!(
                            "trajectory {j} frame {f}: detection {i} is out of range"
                        )));
                    }
                    loss -= row[i].max(f64::MIN_POSITIVE).ln();
                }
                None => {
                    if let Some(p) = probs.absent_probability(j, f) {
                        loss -= p.max(f64::MIN_POSITIVE).ln();
                    }
                }
            }
        }
    }
    Ok(loss)
}

/// The feature hinge for a single detection, from encoder outputs.
pub fn feature_triplet_loss(
    part_feats: &[FeatureVector],
    semantic: &FeatureVector,
    context_background: &FeatureVector,
    model: &Model,
    cfg: &LossConfig,
) -> Result<f64> {
    let dim = model.dim();
    if part_feats.is_empty() {
        return Err(Error::Empty("no part features".into()));
    }
    if part_feats.iter().chain([semantic, context_background]).any(|f| f.len() != dim) {
        return Err(Error::Shape(format!("features must have length {dim}")));
    }
    let layout = PatchLayout {
        parts: part_feats.len(),
        context: false,
        background: true,
    };
    let rows: Vec<Vec<f64>> = part_feats
        .iter()
        .chain([semantic, context_background])
        .map(|f| f.0.clone())
        .collect();
    let mut g = Graph::new();
    let feats = g.input(Tensor::from_rows(&rows)?);
    let l = feature_hinge(&mut g, model, feats, &layout, 1, cfg);
    Ok(g.value(l).item())
}

fn finite_or_err(step: usize, report: &LossReport) -> Result<()> {
    if report.total.is_finite() && report.assoc.is_finite() && report.feat.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            detail: format!("assoc {} feat {} total {}", report.assoc, report.feat, report.total),
        })
    }
}

/// One optimisation step on `clips`; `step` only labels diagnostics.
pub fn train_step(
    model: &mut Model,
    state: &mut AdamWState,
    clips: &[ClipBatch],
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossReport> {
    let mut lg = batch_loss(model, clips, &cfg.loss)?;
    let report = lg.report(cfg.loss.margin);
    finite_or_err(step, &report)?;
    lg.graph.backward(lg.total);
    let grads = lg.graph.param_grads(&model.params);
    if let Some(id) = model.params.ids().find(|id| !grads[id.index()].is_finite()) {
        return Err(Error::NonFinite {
            step,
            detail: format!("gradient of {}", model.params.name(id)),
        });
    }
    state.update(&cfg.optimizer, &mut model.params, &grads);
    Ok(report)
}

pub const LOG_HEADER: &str = "step,assoc_loss,feat_loss,total";

/// Runs `cfg.steps` steps from seeded clip samples. Writes one CSV line per
/// step to `log` when given.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if dataset.region() != &model.config.region {
        return Err(Error::Config("dataset was cropped with a different region config".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamWState::new(&model.params);
    let mut reports = Vec::with_capacity(cfg.steps);
    let io = |e: std::io::Error| Error::io("training log", e);
    if let Some(w) = log.as_mut() {
        writeln!(w, "{LOG_HEADER}").map_err(io)?;
    }
    for step in 0..cfg.steps {
        let mut clips = (0..cfg.batch_size)
            .map(|_| sample_clip(dataset, cfg.clip_len, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        if cfg.color_jitter {
            for c in &mut clips {
                jitter_colors(c, &mut rng);
            }
        }
        let r = train_step(model, &mut state, &clips, cfg, step)?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{step},{},{},{}", r.assoc, r.feat, r.total).map_err(io)?;
        }
        reports.push(r);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::{normalize, normalize_with_absent, ScoreMatrix};
    use crate::csc_attention::{FusionConfig, FusionVariant};
    use crate::encoder::EncoderConfig;
    use crate::gradcheck::check_param_grads_piecewise;
    use crate::harness::{generate_sequence, ScenarioConfig};
    use crate::model::ModelConfig;

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            region: RegionConfig {
                patch_size: 8,
                ..RegionConfig::default()
            },
            dim: 8,
            encoder: EncoderConfig { channels: vec![4, 6] },
            fusion: FusionConfig::default(),
        }
    }

    fn tiny_dataset(frames: usize, region: &RegionConfig) -> Dataset {
        let seq = generate_sequence(&ScenarioConfig {
            num_targets: 3,
            frames,
            crossings: vec![crate::harness::Crossing { a: 0, b: 1, frame: frames / 2 }],
            ..ScenarioConfig::easy(4)
        })
        .unwrap();
        Dataset::new(&[seq], region).unwrap()
    }

    #[test]
    fn association_loss_trivial_cases() {
        let sm = ScoreMatrix {
            raw: vec![vec![60.0, 0.0, 60.0, 0.0]],
            per_step: Vec::new(),
        };
        let frames = [0, 0, 1, 1];
        let p = normalize(&sm, &frames, &[0.0; 4]).unwrap();
        let l = association_loss(&p, &[vec![Some(0), Some(2)]]).unwrap();
        assert!(l.abs() < 1e-12);
        let u = normalize(
            &ScoreMatrix {
                raw: vec![vec![0.0; 6]],
                per_step: Vec::new(),
            },
            &[0, 0, 0, 1, 1, 1],
            &[0.0; 6],
        )
        .unwrap();
        let l = association_loss(&u, &[vec![Some(1), Some(5)]]).unwrap();
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-12);
        assert!(association_loss(&u, &[vec![Some(4), None]]).is_err());
        assert!(association_loss(&u, &[vec![Some(9), None]]).is_err());
    }

    #[test]
    fn association_loss_hand_computed() {
        // Two trajectories, two frames with two detections each.
        let raw = vec![vec![2.0, 0.0, 1.0, -1.0], vec![0.5, 1.5, 0.0, 0.0]];
        let sm = ScoreMatrix { raw, per_step: Vec::new() };
        let frames = [0, 0, 1, 1];
        let p = normalize(&sm, &frames, &[0.0; 4]).unwrap();
        let gt = vec![vec![Some(0), Some(2)], vec![Some(1), Some(3)]];
        let sig = |a: f64, b: f64| a.exp() / (a.exp() + b.exp());
        let want = -(sig(2.0, 0.0).ln() + sig(1.0, -1.0).ln() + sig(1.5, 0.5).ln() + 0.5f64.ln());
        assert!((association_loss(&p, &gt).unwrap() - want).abs() < 1e-12);

        // With a no-detection logit of 0 and an absent second step for row 1.
        let pa = normalize_with_absent(&sm, &frames, &[0.0; 4], &[0.0, 0.0, 0.0]).unwrap();
        let gt = vec![vec![Some(0), Some(2)], vec![Some(1), None]];
        let soft3 = |t: f64, a: f64, b: f64| t.exp() / (t.exp() + a.exp() + b.exp());
        let want = -(soft3(2.0, 0.0, 0.0).ln()
            + soft3(1.0, -1.0, 0.0).ln()
            + soft3(1.5, 0.5, 0.0).ln()
            + soft3(0.0, 0.0, 0.0).ln());
        assert!((association_loss(&pa, &gt).unwrap() - want).abs() < 1e-12);
    }

    fn scalar_model(normalize: bool) -> (Model, LossConfig) {
        let cfg = ModelConfig {
            dim: 1,
            ..ModelConfig::default()
        };
        let mut m = Model::init(cfg, 1).unwrap();
        for (name, v) in [("fusion.cross_attn.value", 2.0), ("fusion.cross_attn.output", 0.5)] {
            let id = m.params.id(name).unwrap();
            m.params.get_mut(id).data[0] = v;
        }
        (
            m,
            LossConfig {
                normalize_features: normalize,
                ..LossConfig::default()
            },
        )
    }

    #[test]
    fn feature_hinge_scalar_trace() {
        let (m, cfg) = scalar_model(false);
        let f = |v: f64| FeatureVector(vec![v]);
        let parts = [f(0.3), f(-2.0), f(1.0), f(4.0)];
        // Single key: attention returns value*output times the key feature.
        // pos = (1.0 * 0.7 - 0.7)^2 = 0, neg = (1.0 * 0.2 - 0.7)^2 = 0.25.
        let l = feature_triplet_loss(&parts, &f(0.7), &f(0.2), &m, &cfg).unwrap();
        assert!((l - (0.0 - 0.25 + 0.3f64).max(0.0)).abs() < 1e-12);
        // neg = (1.0 * -0.5 - 0.7)^2 = 1.44 >= pos + margin.
        let l = feature_triplet_loss(&parts, &f(0.7), &f(-0.5), &m, &cfg).unwrap();
        assert_eq!(l, 0.0);
        // Background equal to the object makes pos == neg, so the loss is the margin.
        let l = feature_triplet_loss(&parts, &f(0.7), &f(0.7), &m, &cfg).unwrap();
        assert!((l - 0.3).abs() < 1e-12);
    }

    #[test]
    fn feature_hinge_bounded_by_positive_term_plus_margin() {
        let m = Model::init(ModelConfig::default(), 2).unwrap();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rf = || FeatureVector((0..64).map(|_| rng.random_range(-1.0..1.0)).collect());
        for _ in 0..20 {
            let parts: Vec<FeatureVector> = (0..4).map(|_| rf()).collect();
            let l = feature_triplet_loss(&parts, &rf(), &rf(), &m, &cfg).unwrap();
            // Unit-normalised squared distances are at most 4.
            assert!((0.0..=4.0 + cfg.margin).contains(&l));
        }
    }

    #[test]
    fn sampling_examples() {
        let region = tiny_model_config().region;
        let ds = tiny_dataset(12, &region);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let c1 = sample_clip(&ds, 5, &mut a).unwrap();
        let c2 = sample_clip(&ds, 5, &mut b).unwrap();
        assert_eq!(c1.detections, c2.detections);
        assert_eq!(c1.gt_assignment(), c2.gt_assignment());
        c1.validate().unwrap();
        // Full-length clip has exactly one window.
        let full = sample_clip(&ds, 12, &mut a).unwrap();
        let again = sample_clip(&ds, 12, &mut a).unwrap();
        assert_eq!(full.detections, again.detections);
        assert_eq!(full.trajectories.len(), 3);
        assert!(sample_clip(&ds, 13, &mut a).is_err());
    }

    #[test]
    fn color_jitter_keeps_zeros_and_unit_range() {
        let region = tiny_model_config().region;
        let ds = tiny_dataset(6, &region);
        let clip = sample_clip(&ds, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut jittered = clip.clone();
        jitter_colors(&mut jittered, &mut ChaCha8Rng::seed_from_u64(9));
        // Recover the channel map from one pixel of one patch and check it everywhere.
        let plane = region.patch_size * region.patch_size;
        let all = |c: &ClipBatch| -> Vec<f64> {
            c.triplets
                .iter()
                .flat_map(|t| t.parts.iter().chain([&t.semantic, &t.context, &t.context_background]))
                .flat_map(|p| p.data.clone())
                .collect()
        };
        let (before, after) = (all(&clip), all(&jittered));
        for (pb, pa) in before.chunks(3 * plane).zip(after.chunks(3 * plane)) {
            for i in 0..plane {
                let src: Vec<f64> = (0..3).map(|c| pb[c * plane + i]).collect();
                let dst: Vec<f64> = (0..3).map(|c| pa[c * plane + i]).collect();
                if src.iter().all(|&v| v == 0.0) {
                    assert!(dst.iter().all(|&v| v == 0.0));
                }
                for &v in &dst {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
        assert_ne!(before, after);
        assert_eq!(clip.detections, jittered.detections);
    }

    #[test]
    fn hidden_target_is_absent_mid_clip() {
        let region = tiny_model_config().region;
        let ds = tiny_dataset(40, &region);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clip = sample_clip(&ds, 40, &mut rng).unwrap();
        let gaps = clip
            .trajectories
            .iter()
            .filter(|t| {
                let first = t.targets.iter().position(Option::is_some).unwrap();
                let last = t.targets.iter().rposition(Option::is_some).unwrap();
                t.targets[first..last].iter().any(Option::is_none)
            })
            .count();
        assert!(gaps >= 1);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mcfg = tiny_model_config();
        let mut m = Model::init(mcfg.clone(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for id in m.params.ids() {
            if m.params.name(id).ends_with(".bias") {
                for v in &mut m.params.get_mut(id).data {
                    *v = rng.random_range(0.05..0.2);
                }
            }
        }
        let ds = tiny_dataset(10, &mcfg.region);
        let clips = vec![sample_clip(&ds, 3, &mut rng).unwrap(), sample_clip(&ds, 3, &mut rng).unwrap()];
        let cfg = LossConfig::default();
        let mut lg = batch_loss(&m, &clips, &cfg).unwrap();
        assert!(lg.feat.is_some());
        lg.graph.backward(lg.total);
        let grads = lg.graph.param_grads(&m.params);
        let report = check_param_grads_piecewise(
            &m.params,
            &grads,
            |ps| {
                let mm = Model::from_params(mcfg.clone(), ps.clone()).unwrap();
                let lg = batch_loss(&mm, &clips, &cfg).unwrap();
                (lg.graph.value(lg.total).item(), lg.graph.relu_signature())
            },
            10,
            1e-3,
            7,
            |name| !name.starts_with("fusion.concat"),
        );
        assert!(report.passes(1e-3), "{report:?}");
        for prefix in ["encoder.", "fusion.", "association."] {
            assert!(m.params.ids().any(|id| m.params.name(id).starts_with(prefix)));
        }
    }

    #[test]
    fn all_absent_batch_is_finite_and_trains_background() {
        let mcfg = tiny_model_config();
        let m = Model::init(mcfg.clone(), 8).unwrap();
        let ds = tiny_dataset(6, &mcfg.region);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut clip = sample_clip(&ds, 4, &mut rng).unwrap();
        // Known history from step 0; every supervised step is absent.
        for t in &mut clip.trajectories {
            t.history = t.targets.iter().flatten().take(1).copied().collect();
            t.targets = vec![None; 4];
        }
        let mut lg = batch_loss(&m, &[clip], &LossConfig::default()).unwrap();
        let r = lg.report(0.3);
        assert!(r.assoc.is_finite() && r.assoc > 0.0 && r.total.is_finite());
        lg.graph.backward(lg.total);
        let grads = lg.graph.param_grads(&m.params);
        for name in ["association.background", "association.absent_bias"] {
            let id = m.params.id(name).unwrap();
            assert!(grads[id.index()].data.iter().any(|&g| g != 0.0), "{name}");
        }
    }

    #[test]
    fn report_totals_and_skip_mode() {
        let mcfg = tiny_model_config();
        let m = Model::init(mcfg.clone(), 9).unwrap();
        let ds = tiny_dataset(10, &mcfg.region);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clips = vec![sample_clip(&ds, 4, &mut rng).unwrap()];
        let r = batch_loss(&m, &clips, &LossConfig::default()).unwrap().report(0.3);
        assert!(r.feat >= 0.0 && r.assoc >= 0.0);
        assert!((r.total - (r.assoc + r.feat)).abs() < 1e-12);
        let skip = LossConfig {
            absent: AbsentMode::Skip,
            ..LossConfig::default()
        };
        let s = batch_loss(&m, &clips, &skip).unwrap().report(0.3);
        assert!(s.assoc <= r.assoc + 1e-12);
        let sem = m
            .with_fusion(FusionConfig {
                variant: FusionVariant::SemanticOnly,
                ..FusionConfig::default()
            })
            .unwrap();
        let lg = batch_loss(&sem, &clips, &LossConfig::default()).unwrap();
        assert!(lg.feat.is_none());
    }

    #[test]
    fn invalid_batches_rejected() {
        let mcfg = tiny_model_config();
        let ds = tiny_dataset(6, &mcfg.region);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clip = sample_clip(&ds, 3, &mut rng).unwrap();
        let mut bad = clip.clone();
        let j = bad.trajectories[0].targets.iter().flatten().next().copied().unwrap();
        bad.trajectories[1].targets[bad.detections[j].frame] = Some(j);
        assert!(bad.validate().is_err());
        let mut off = clip;
        off.trajectories[0].targets[0] = Some(off.detections.len() + 3);
        assert!(off.validate().is_err());
    }

    fn small_run(lr: f64, steps: usize, seed: u64) -> (Model, Vec<LossReport>) {
        let mcfg = tiny_model_config();
        let mut m = Model::init(mcfg.clone(), seed).unwrap();
        let ds = tiny_dataset(16, &mcfg.region);
        let cfg = TrainConfig {
            steps,
            batch_size: 2,
            clip_len: 4,
            optimizer: AdamWConfig {
                learning_rate: lr,
                ..AdamWConfig::default()
            },
            seed,
            ..TrainConfig::default()
        };
        let r = train(&mut m, &ds, &cfg, None).unwrap();
        (m, r)
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let before = Model::init(tiny_model_config(), 3).unwrap();
        let (after, reports) = small_run(0.0, 2, 3);
        assert_eq!(reports.len(), 2);
        for id in before.params.ids() {
            assert_eq!(before.params.get(id), after.params.get(id));
        }
    }

    #[test]
    fn seeded_runs_are_identical_and_logged() {
        let (a, ra) = small_run(1e-3, 3, 11);
        let (b, rb) = small_run(1e-3, 3, 11);
        assert_eq!(ra, rb);
        for id in a.params.ids() {
            assert_eq!(a.params.get(id), b.params.get(id));
        }
        let mcfg = tiny_model_config();
        let mut m = Model::init(mcfg.clone(), 1).unwrap();
        let ds = tiny_dataset(8, &mcfg.region);
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 1,
            clip_len: 4,
            ..TrainConfig::default()
        };
        let mut buf: Vec<u8> = Vec::new();
        train(&mut m, &ds, &cfg, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,"));
    }
}
