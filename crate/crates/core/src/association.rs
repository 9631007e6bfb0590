//! Trajectory-to-detection scores and their per-frame softmax normalisation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::csc_attention::CscToken;
use crate::error::{Error, Result};
use crate::model::{Builder, Model};
use crate::nn::{softmax_in_place, Graph, ParamId, ParamStore, Tensor, Var};

/// Score given to trajectories without any valid step.
pub const INVALID_SCORE: f64 = -1e4;

/// The last `H` tokens of one trajectory, right-aligned, with padding flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryToken {
    pub values: Vec<Vec<f64>>,
    pub valid_mask: Vec<bool>,
}

impl TrajectoryToken {
    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    pub fn valid_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values
            .iter()
            .zip(&self.valid_mask)
            .filter(|(_, &v)| v)
            .map(|(r, _)| r.as_slice())
    }
}

pub fn build_trajectory_token(history: &[CscToken], horizon: usize) -> Result<TrajectoryToken> {
    if history.is_empty() {
        return Err(Error::Empty("trajectory history is empty".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let dim = history[0].len();
    if history.iter().any(|t| t.len() != dim) {
        return Err(Error::Shape("history tokens differ in length".into()));
    }
    let kept = history.len().min(horizon);
    let pad = horizon - kept;
    let mut values = vec![vec![0.0; dim]; pad];
    values.extend(history[history.len() - kept..].iter().map(|t| t.0.clone()));
    let mut valid_mask = vec![false; pad];
    valid_mask.extend(std::iter::repeat_n(true, kept));
    Ok(TrajectoryToken { values, valid_mask })
}

/// Averaged scores plus the per-step scores they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    /// `[M][N]`
    pub raw: Vec<Vec<f64>>,
    /// `[M][H][N]`
    pub per_step: Vec<Vec<Vec<f64>>>,
}

impl ScoreMatrix {
    pub fn rows(&self) -> usize {
        self.raw.len()
    }

    pub fn cols(&self) -> usize {
        self.raw.first().map_or(0, Vec::len)
    }
}

/// Per-frame softmax probabilities. The last row belongs to the empty trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationProbabilities {
    pub probs: Vec<Vec<f64>>,
    pub det_frames: Vec<usize>,
    /// Probability of the no-detection outcome per row and frame, when
    /// normalised with absent logits.
    pub absent: Vec<BTreeMap<usize, f64>>,
}

impl AssociationProbabilities {
    pub fn num_trajectories(&self) -> usize {
        self.probs.len().saturating_sub(1)
    }

    pub fn empty_row(&self) -> &[f64] {
        self.probs.last().map_or(&[], Vec::as_slice)
    }

    pub fn absent_probability(&self, row: usize, frame: usize) -> Option<f64> {
        self.absent.get(row).and_then(|m| m.get(&frame).copied())
    }
}

fn frame_groups(det_frames: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &f) in det_frames.iter().enumerate() {
        groups.entry(f).or_default().push(i);
    }
    groups
}

fn check_columns(scores: &ScoreMatrix, det_frames: &[usize], empty_scores: &[f64]) -> Result<()> {
    let n = det_frames.len();
    if scores.raw.iter().any(|r| r.len() != n) || empty_scores.len() != n {
        return Err(Error::Shape(format!(
            "score columns do not match {n} detection frames"
        )));
    }
    Ok(())
}

/// Softmax of every trajectory row (and the empty row) over the detections of
/// each frame.
pub fn normalize(scores: &ScoreMatrix, det_frames: &[usize], empty_scores: &[f64]) -> Result<AssociationProbabilities> {
    check_columns(scores, det_frames, empty_scores)?;
    let groups = frame_groups(det_frames);
    let mut probs: Vec<Vec<f64>> = scores.raw.clone();
    probs.push(empty_scores.to_vec());
    for row in &mut probs {
        for idx in groups.values() {
            let mut logits: Vec<f64> = idx.iter().map(|&i| row[i]).collect();
            softmax_in_place(&mut logits);
            for (&i, p) in idx.iter().zip(logits) {
                row[i] = p;
            }
        }
    }
    Ok(AssociationProbabilities {
        probs,
        det_frames: det_frames.to_vec(),
        absent: Vec::new(),
    })
}

/// As [`normalize`], with one extra no-detection logit per row competing in
/// every frame group. `absent_logits` has one entry per row including the
/// empty row.
pub fn normalize_with_absent(
    scores: &ScoreMatrix,
    det_frames: &[usize],
    empty_scores: &[f64],
    absent_logits: &[f64],
) -> Result<AssociationProbabilities> {
    check_columns(scores, det_frames, empty_scores)?;
    if absent_logits.len() != scores.rows() + 1 {
        return Err(Error::Shape(format!(
            "{} absent logits for {} rows",
            absent_logits.len(),
            scores.rows() + 1
        )));
    }
    let groups = frame_groups(det_frames);
    let mut probs: Vec<Vec<f64>> = scores.raw.clone();
    probs.push(empty_scores.to_vec());
    let mut absent = Vec::with_capacity(probs.len());
    for (row, &a) in probs.iter_mut().zip(absent_logits) {
        let mut per_frame = BTreeMap::new();
        for (&f, idx) in &groups {
            let mut logits: Vec<f64> = idx.iter().map(|&i| row[i]).collect();
            logits.push(a);
            softmax_in_place(&mut logits);
            for (&i, &p) in idx.iter().zip(&logits) {
                row[i] = p;
            }
            per_frame.insert(f, logits[idx.len()]);
        }
        absent.push(per_frame);
    }
    Ok(AssociationProbabilities {
        probs,
        det_frames: det_frames.to_vec(),
        absent,
    })
}

/// Learned query/key maps, the background token and the no-detection bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AssociationHead {
    query: ParamId,
    key: ParamId,
    pub(crate) background: ParamId,
    absent_bias: ParamId,
    dim: usize,
}

impl AssociationHead {
    pub(crate) fn build(b: &mut Builder<'_>, dim: usize) -> Result<Self> {
        Ok(AssociationHead {
            query: b.uniform("association.query", &[dim, dim], dim, dim)?,
            key: b.uniform("association.key", &[dim, dim], dim, dim)?,
            background: b.uniform("association.background", &[1, dim], dim, dim)?,
            absent_bias: b.constant("association.absent_bias", &[1], 0.0)?,
            dim,
        })
    }

    pub(crate) fn queries(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Var {
        let w = g.param(store, self.query);
        g.matmul(tokens, w)
    }

    pub(crate) fn keys(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Var {
        let w = g.param(store, self.key);
        g.matmul(tokens, w)
    }

    /// `[rows, cols]` scaled dot products of projected queries and keys.
    pub(crate) fn scores(&self, g: &mut Graph, queries: Var, keys: Var) -> Var {
        let s = g.matmul_t(queries, keys);
        g.scale(s, 1.0 / (self.dim as f64).sqrt())
    }

    /// `[rows, 1]` no-detection logits: each query against the projected
    /// background token, plus a learned bias.
    pub(crate) fn absent_logits(&self, g: &mut Graph, store: &ParamStore, queries: Var) -> Var {
        let bg = g.param(store, self.background);
        let k = self.keys(g, store, bg);
        let s = self.scores(g, queries, k);
        let bias = g.param(store, self.absent_bias);
        g.add_bias(s, bias)
    }
}

fn check_dim(tokens: impl IntoIterator<Item = usize>, dim: usize) -> Result<()> {
    for len in tokens {
        if len != dim {
            return Err(Error::Shape(format!("token length {len}, model dimension {dim}")));
        }
    }
    Ok(())
}

fn project(model: &Model, rows: &[Vec<f64>], query: bool) -> Result<Tensor> {
    let head = model.association();
    let mut g = Graph::new();
    let x = g.input(Tensor::from_rows(rows)?);
    let y = if query {
        head.queries(&mut g, &model.params, x)
    } else {
        head.keys(&mut g, &model.params, x)
    };
    Ok(g.value(y).clone())
}

fn dot_scaled(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (a.len() as f64).sqrt()
}

/// Scores every trajectory against every detection, averaging over the valid
/// steps of each trajectory.
pub fn score_pairs(trajectories: &[TrajectoryToken], detections: &[CscToken], model: &Model) -> Result<ScoreMatrix> {
    let dim = model.dim();
    check_dim(detections.iter().map(CscToken::len), dim)?;
    check_dim(trajectories.iter().flat_map(|t| t.values.iter().map(Vec::len)), dim)?;
    let n = detections.len();
    if n == 0 {
        return Ok(ScoreMatrix {
            raw: vec![Vec::new(); trajectories.len()],
            per_step: trajectories.iter().map(|t| vec![Vec::new(); t.horizon()]).collect(),
        });
    }
    let det_rows: Vec<Vec<f64>> = detections.iter().map(|d| d.0.clone()).collect();
    let keys = project(model, &det_rows, false)?;
    let mut raw = Vec::with_capacity(trajectories.len());
    let mut per_step = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        if traj.values.is_empty() {
            raw.push(vec![INVALID_SCORE; n]);
            per_step.push(Vec::new());
            continue;
        }
        let q = project(model, &traj.values, true)?;
        let steps: Vec<Vec<f64>> = (0..traj.horizon())
            .map(|h| (0..n).map(|i| dot_scaled(q.row(h), keys.row(i))).collect())
            .collect();
        let valid = traj.num_valid();
        let row = if valid == 0 {
            vec![INVALID_SCORE; n]
        } else {
            (0..n)
                .map(|i| {
                    steps
                        .iter()
                        .zip(&traj.valid_mask)
                        .filter(|(_, &v)| v)
                        .map(|(s, _)| s[i])
                        .sum::<f64>()
                        / valid as f64
                })
                .collect()
        };
        raw.push(row);
        per_step.push(steps);
    }
    Ok(ScoreMatrix { raw, per_step })
}

/// No-detection logit of each trajectory (invalid trajectories get the sentinel).
pub fn absent_scores(trajectories: &[TrajectoryToken], model: &Model) -> Result<Vec<f64>> {
    let dim = model.dim();
    check_dim(trajectories.iter().flat_map(|t| t.values.iter().map(Vec::len)), dim)?;
    let head = model.association();
    let mut out = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        let valid = traj.num_valid();
        if valid == 0 {
            out.push(INVALID_SCORE);
            continue;
        }
        let mut mean = vec![0.0; dim];
        for r in traj.valid_rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / valid as f64;
            }
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[mean])?);
        let q = head.queries(&mut g, &model.params, x);
        let a = head.absent_logits(&mut g, &model.params, q);
        out.push(g.value(a).item());
    }
    Ok(out)
}

/// The learned background token.
pub fn background_token(model: &Model) -> CscToken {
    CscToken(model.params.get(model.association().background).data.clone())
}

/// Token standing in for the empty trajectory: drawn from `pool` with the
/// seeded generator, or the background token when the pool is empty.
pub fn empty_trajectory_token(pool: &[CscToken], seed: u64, model: &Model) -> CscToken {
    if pool.is_empty() {
        background_token(model)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pool[rng.random_range(0..pool.len())].clone()
    }
}

/// Scores of the empty trajectory: a token drawn from `pool` with the seeded
/// generator (or the background token when the pool is empty) scored against
/// every detection as a one-step trajectory.
pub fn empty_trajectory_scores(
    detections: &[CscToken],
    pool: &[CscToken],
    seed: u64,
    model: &Model,
) -> Result<Vec<f64>> {
    let token = empty_trajectory_token(pool, seed, model);
    let traj = build_trajectory_token(std::slice::from_ref(&token), 1)?;
    let s = score_pairs(&[traj], detections, model)?;
    Ok(s.raw.into_iter().next().unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::Rng;

    use super::*;
    use crate::model::ModelConfig;

    fn small_model(dim: usize) -> Model {
        Model::init(
            ModelConfig {
                dim,
                ..ModelConfig::default()
            },
            17,
        )
        .unwrap()
    }

    fn tok(v: &[f64]) -> CscToken {
        CscToken(v.to_vec())
    }

    fn random_tokens(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<CscToken> {
        (0..n)
            .map(|_| CscToken((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    fn set(m: &mut Model, name: &str, values: &[f64]) {
        let id = m.params.id(name).unwrap();
        m.params.get_mut(id).data.copy_from_slice(values);
    }

    #[test]
    fn history_padding_and_truncation() {
        let h: Vec<CscToken> = (0..7).map(|i| tok(&[i as f64, 0.0])).collect();
        let one = build_trajectory_token(&h[..1], 4).unwrap();
        assert_eq!(one.valid_mask, vec![false, false, false, true]);
        assert_eq!(one.values[0], vec![0.0, 0.0]);
        assert_eq!(one.values[3], vec![0.0, 0.0]);
        let full = build_trajectory_token(&h[..4], 4).unwrap();
        assert!(full.valid_mask.iter().all(|&v| v));
        assert_eq!(full.values.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0, 3.0]);
        let long = build_trajectory_token(&h, 4).unwrap();
        assert_eq!(long.values.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![3.0, 4.0, 5.0, 6.0]);
        assert!(matches!(build_trajectory_token(&[], 4), Err(Error::Empty(_))));
    }

    #[test]
    fn hand_set_two_by_two_scores() {
        let mut m = small_model(2);
        set(&mut m, "association.query", &[1.0, 0.0, 0.0, 2.0]);
        set(&mut m, "association.key", &[0.0, 1.0, 1.0, 0.0]);
        // Row vectors times W: q = [a, 2b], k = [d, c] for token [c, d].
        let traj = build_trajectory_token(&[tok(&[1.0, 2.0]), tok(&[3.0, -1.0])], 2).unwrap();
        let dets = [tok(&[1.0, 0.0]), tok(&[0.5, 2.0])];
        let s = score_pairs(&[traj], &dets, &m).unwrap();
        let r2 = 2f64.sqrt();
        // q0 = [1, 4], q1 = [3, -2]; k0 = [0, 1], k1 = [2, 0.5].
        let want_steps = [[4.0 / r2, 4.0 / r2], [-2.0 / r2, 5.0 / r2]];
        for h in 0..2 {
            for i in 0..2 {
                assert!((s.per_step[0][h][i] - want_steps[h][i]).abs() < 1e-12);
            }
        }
        assert!((s.raw[0][0] - 1.0 / r2).abs() < 1e-12);
        assert!((s.raw[0][1] - 4.5 / r2).abs() < 1e-12);
    }

    #[test]
    fn horizon_one_raw_equals_per_step() {
        let m = small_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tokens(1, 8, &mut rng);
        let traj = build_trajectory_token(&t, 1).unwrap();
        let s = score_pairs(&[traj], &random_tokens(3, 8, &mut rng), &m).unwrap();
        assert_eq!(s.raw[0], s.per_step[0][0]);
    }

    #[test]
    fn identical_tokens_give_constant_scores() {
        let m = small_model(8);
        let v = tok(&[0.3; 8]);
        let trajs: Vec<TrajectoryToken> = (0..3)
            .map(|_| build_trajectory_token(&[v.clone(), v.clone()], 3).unwrap())
            .collect();
        let s = score_pairs(&trajs, &vec![v; 4], &m).unwrap();
        let first = s.raw[0][0];
        assert!(s.raw.iter().flatten().all(|&x| (x - first).abs() < 1e-12));
    }

    #[test]
    fn trajectory_without_valid_steps_gets_sentinel() {
        let m = small_model(4);
        let traj = TrajectoryToken {
            values: vec![vec![1.0; 4]; 2],
            valid_mask: vec![false, false],
        };
        let s = score_pairs(&[traj.clone()], &[tok(&[1.0; 4])], &m).unwrap();
        assert_eq!(s.raw[0][0], INVALID_SCORE);
        assert_eq!(absent_scores(&[traj], &m).unwrap()[0], INVALID_SCORE);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let m = small_model(4);
        let traj = build_trajectory_token(&[tok(&[1.0; 4])], 2).unwrap();
        assert!(matches!(score_pairs(&[traj], &[tok(&[1.0; 3])], &m), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let scores = ScoreMatrix {
            raw: vec![vec![1.0, 0.0, 5.0, 2.0, 2.0, 2.0]],
            per_step: Vec::new(),
        };
        let frames = [0, 0, 1, 2, 2, 2];
        let p = normalize(&scores, &frames, &[0.0; 6]).unwrap();
        let e = std::f64::consts::E;
        assert!((p.probs[0][0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.probs[0][0] - 0.7311).abs() < 1e-4);
        assert!((p.probs[0][1] - 0.2689).abs() < 1e-4);
        assert_eq!(p.probs[0][2], 1.0);
        for i in 3..6 {
            assert!((p.probs[0][i] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(p.probs.len(), 2);
    }

    #[test]
    fn absent_logit_competes_in_every_frame_group() {
        let scores = ScoreMatrix {
            raw: vec![vec![0.0, 0.0, 1.0]],
            per_step: Vec::new(),
        };
        let p = normalize_with_absent(&scores, &[0, 0, 1], &[0.0; 3], &[0.0, 0.0]).unwrap();
        assert!((p.probs[0][0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.absent_probability(0, 0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let e = std::f64::consts::E;
        assert!((p.probs[0][2] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.absent_probability(0, 1).unwrap() - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_row_uses_background_or_pool() {
        let m = small_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dets = random_tokens(3, 8, &mut rng);
        let a = empty_trajectory_scores(&dets, &[], 1, &m).unwrap();
        let b = empty_trajectory_scores(&dets, &[], 99, &m).unwrap();
        assert_eq!(a, b);
        let bg = build_trajectory_token(&[background_token(&m)], 1).unwrap();
        assert_eq!(a, score_pairs(&[bg], &dets, &m).unwrap().raw[0]);

        let pool = random_tokens(1, 8, &mut rng);
        let single = empty_trajectory_scores(&dets, &pool, 5, &m).unwrap();
        let t = build_trajectory_token(&pool, 1).unwrap();
        assert_eq!(single, score_pairs(&[t], &dets, &m).unwrap().raw[0]);

        let pool = random_tokens(5, 8, &mut rng);
        assert_eq!(
            empty_trajectory_scores(&dets, &pool, 7, &m).unwrap(),
            empty_trajectory_scores(&dets, &pool, 7, &m).unwrap()
        );
    }

    #[test]
    fn group_sums_hold_over_random_trials() {
        let m = small_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100 {
            let rows = rng.random_range(1..5);
            let n = rng.random_range(1..9);
            let trajs: Vec<TrajectoryToken> = (0..rows)
                .map(|_| {
                    let len = rng.random_range(1..5);
                    build_trajectory_token(&random_tokens(len, 8, &mut rng), 3).unwrap()
                })
                .collect();
            let dets = random_tokens(n, 8, &mut rng);
            let frames: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let s = score_pairs(&trajs, &dets, &m).unwrap();
            let empty = empty_trajectory_scores(&dets, &[], trial, &m).unwrap();
            let p = normalize(&s, &frames, &empty).unwrap();
            for row in &p.probs {
                for f in 0..3 {
                    let members: Vec<usize> = (0..n).filter(|&i| frames[i] == f).collect();
                    if members.is_empty() {
                        continue;
                    }
                    let sum: f64 = members.iter().map(|&i| row[i]).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    assert!(members.iter().all(|&i| row[i] > 0.0 && row[i] <= 1.0));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn shifting_one_group_leaves_its_probabilities(
            raw in prop::collection::vec(-5.0f64..5.0, 6),
            shift in -50.0f64..50.0,
        ) {
            let frames = [0, 0, 0, 1, 1, 1];
            let a = normalize(&ScoreMatrix { raw: vec![raw.clone()], per_step: Vec::new() }, &frames, &[0.0; 6]).unwrap();
            let mut shifted = raw;
            for v in &mut shifted[3..] {
                *v += shift;
            }
            let b = normalize(&ScoreMatrix { raw: vec![shifted], per_step: Vec::new() }, &frames, &[0.0; 6]).unwrap();
            for i in 0..6 {
                prop_assert!((a.probs[0][i] - b.probs[0][i]).abs() < 1e-6);
            }
        }

        #[test]
        fn permuting_detections_permutes_columns(seed in 0u64..1000) {
            let m = small_model(6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let dets = random_tokens(n, 6, &mut rng);
            let frames: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let trajs = vec![build_trajectory_token(&random_tokens(2, 6, &mut rng), 3).unwrap()];
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pd: Vec<CscToken> = perm.iter().map(|&i| dets[i].clone()).collect();
            let pf: Vec<usize> = perm.iter().map(|&i| frames[i]).collect();
            let s = score_pairs(&trajs, &dets, &m).unwrap();
            let ps = score_pairs(&trajs, &pd, &m).unwrap();
            let e = empty_trajectory_scores(&dets, &[], 0, &m).unwrap();
            let pe = empty_trajectory_scores(&pd, &[], 0, &m).unwrap();
            let p = normalize(&s, &frames, &e).unwrap();
            let pp = normalize(&ps, &pf, &pe).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((s.raw[0][i] - ps.raw[0][k]).abs() < 1e-12);
                for r in 0..2 {
                    prop_assert!((p.probs[r][i] - pp.probs[r][k]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn duplicating_a_padded_row_changes_nothing(seed in 0u64..1000) {
            let m = small_model(6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hist = random_tokens(2, 6, &mut rng);
            let traj = build_trajectory_token(&hist, 4).unwrap();
            let mut dup = traj.clone();
            dup.values[1] = random_tokens(1, 6, &mut rng)[0].0.clone();
            dup.values.insert(0, dup.values[1].clone());
            dup.valid_mask.insert(0, false);
            let dets = random_tokens(3, 6, &mut rng);
            let a = score_pairs(&[traj], &dets, &m).unwrap();
            let b = score_pairs(&[dup], &dets, &m).unwrap();
            for i in 0..3 {
                prop_assert!((a.raw[0][i] - b.raw[0][i]).abs() < 1e-12);
            }
        }
    }
}
