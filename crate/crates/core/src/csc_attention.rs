//! Fusion of part, object and union features into one token per detection.
//!
//! The part features and the object feature form a small token set that goes
//! through self-attention; the result then attends to the union-region feature
//! (queries from the token set, key and value from the union feature). Both
//! blocks are residual and optionally layer-normalised. The set is mean-pooled
//! and projected to the token dimension. There is no positional encoding, so
//! the output does not depend on the order of the parts.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::encoder::{stack_patches, FeatureVector};
use crate::error::{Error, Result};
use crate::geometry::{build_region_triplet, Detection, RegionTriplet};
use crate::imaging::{Image, Patch};
use crate::model::{Builder, Linear, Model};
use crate::nn::{Graph, ParamId, ParamStore, RowMix, Tensor, Var};

/// Which levels of the hierarchy feed the token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    SemanticOnly,
    SemanticCompositional,
    SemanticContextual,
    Full,
    /// Concatenate part and object features and project; no attention.
    MultiRegion,
}

impl FusionVariant {
    pub const LEVELS: [FusionVariant; 4] = [
        FusionVariant::SemanticOnly,
        FusionVariant::SemanticCompositional,
        FusionVariant::SemanticContextual,
        FusionVariant::Full,
    ];

    pub fn uses_parts(self) -> bool {
        matches!(
            self,
            FusionVariant::SemanticCompositional | FusionVariant::Full | FusionVariant::MultiRegion
        )
    }

    pub fn uses_context(self) -> bool {
        matches!(self, FusionVariant::SemanticContextual | FusionVariant::Full)
    }

    pub fn label(self) -> &'static str {
        match self {
            FusionVariant::SemanticOnly => "semantic",
            FusionVariant::SemanticCompositional => "semantic+compositional",
            FusionVariant::SemanticContextual => "semantic+contextual",
            FusionVariant::Full => "csc",
            FusionVariant::MultiRegion => "multi-region",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    pub layer_norm: bool,
    pub heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            variant: FusionVariant::Full,
            layer_norm: true,
            heads: 1,
        }
    }
}

/// Fused appearance token of one detection.
#[derive(Debug, Clone, PartialEq)]
pub struct CscToken(pub Vec<f64>);

impl CscToken {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Row positions of each detection's patches inside an encoded batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub parts: usize,
    pub context: bool,
    pub background: bool,
}

impl PatchLayout {
    pub fn new(variant: FusionVariant, num_parts: usize, background: bool) -> Self {
        PatchLayout {
            parts: if variant.uses_parts() || background { num_parts } else { 0 },
            context: variant.uses_context(),
            background,
        }
    }

    pub fn per_detection(&self) -> usize {
        self.parts + 1 + usize::from(self.context) + usize::from(self.background)
    }

    pub fn part(&self, det: usize, u: usize) -> usize {
        det * self.per_detection() + u
    }

    pub fn semantic(&self, det: usize) -> usize {
        det * self.per_detection() + self.parts
    }

    pub fn context(&self, det: usize) -> usize {
        debug_assert!(self.context);
        self.semantic(det) + 1
    }

    pub fn background(&self, det: usize) -> usize {
        debug_assert!(self.background);
        self.semantic(det) + 1 + usize::from(self.context)
    }

    pub fn collect<'a>(&self, triplets: &'a [RegionTriplet]) -> Vec<&'a Patch> {
        let mut out = Vec::with_capacity(triplets.len() * self.per_detection());
        for t in triplets {
            out.extend(t.parts.iter().take(self.parts));
            out.push(&t.semantic);
            if self.context {
                out.push(&t.context);
            }
            if self.background {
                out.push(&t.context_background);
            }
        }
        out
    }
}

/// Bias-free query/key/value/output maps of one attention block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionBlock {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

impl AttentionBlock {
    fn build(b: &mut Builder<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(AttentionBlock {
            q: b.uniform(&format!("{name}.query"), &[dim, dim], dim, dim)?,
            k: b.uniform(&format!("{name}.key"), &[dim, dim], dim, dim)?,
            v: b.uniform(&format!("{name}.value"), &[dim, dim], dim, dim)?,
            o: b.uniform(&format!("{name}.output"), &[dim, dim], dim, dim)?,
        })
    }

    /// Attention of `queries` over `keys_values`, block by block.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys_values: Var,
        groups: usize,
        heads: usize,
    ) -> Var {
        let (wq, wk, wv, wo) = (
            g.param(store, self.q),
            g.param(store, self.k),
            g.param(store, self.v),
            g.param(store, self.o),
        );
        let q = g.matmul(queries, wq);
        let k = g.matmul(keys_values, wk);
        let v = g.matmul(keys_values, wv);
        let a = g.block_attention(q, k, v, groups, heads);
        g.matmul(a, wo)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Fusion {
    cfg: FusionConfig,
    num_parts: usize,
    self_attn: AttentionBlock,
    pub(crate) cross_attn: AttentionBlock,
    norms: [(ParamId, ParamId); 2],
    out: Linear,
    concat: Linear,
}

impl Fusion {
    pub(crate) fn build(b: &mut Builder<'_>, cfg: &FusionConfig, dim: usize, num_parts: usize) -> Result<Self> {
        let self_attn = AttentionBlock::build(b, "fusion.self_attn", dim)?;
        let cross_attn = AttentionBlock::build(b, "fusion.cross_attn", dim)?;
        let mut norm = |name: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                b.constant(&format!("fusion.{name}.gain"), &[dim], 1.0)?,
                b.constant(&format!("fusion.{name}.bias"), &[dim], 0.0)?,
            ))
        };
        let norms = [norm("norm0")?, norm("norm1")?];
        let out = Linear::build(b, "fusion.out", dim, dim, true)?;
        let concat = Linear::build(b, "fusion.concat", (num_parts + 1) * dim, dim, true)?;
        Ok(Fusion {
            cfg: *cfg,
            num_parts,
            self_attn,
            cross_attn,
            norms,
            out,
            concat,
        })
    }

    fn residual_norm(&self, g: &mut Graph, store: &ParamStore, x: Var, delta: Var, which: usize) -> Var {
        let sum = g.add(x, delta);
        if !self.cfg.layer_norm {
            return sum;
        }
        let (gain, bias) = self.norms[which];
        let (gain, bias) = (g.param(store, gain), g.param(store, bias));
        g.layer_norm(sum, gain, bias)
    }

    /// Tokens `[n, dim]` for `n` detections whose features sit in `feats`
    /// according to `layout`.
    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, feats: Var, layout: &PatchLayout, n: usize) -> Var {
        let variant = self.cfg.variant;
        let parts = if variant.uses_parts() { self.num_parts } else { 0 };
        let set = parts + 1;
        let mut idx = Vec::with_capacity(n * set);
        for d in 0..n {
            idx.extend((0..parts).map(|u| layout.part(d, u)));
            idx.push(layout.semantic(d));
        }
        let tokens = g.gather_rows(feats, &idx);
        if variant == FusionVariant::MultiRegion {
            let dim = g.value(feats).cols();
            let flat = g.reshape(tokens, &[n, set * dim]);
            return self.concat.forward(g, store, flat);
        }
        let attended = self.self_attn.forward(g, store, tokens, tokens, n, self.cfg.heads);
        let mut x = self.residual_norm(g, store, tokens, attended, 0);
        if variant.uses_context() {
            let ctx_idx: Vec<usize> = (0..n).map(|d| layout.context(d)).collect();
            let ctx = g.gather_rows(feats, &ctx_idx);
            let crossed = self.cross_attn.forward(g, store, x, ctx, n, self.cfg.heads);
            x = self.residual_norm(g, store, x, crossed, 1);
        }
        let pooled = g.row_mix(x, Rc::new(RowMix::segment_mean(n * set, set)));
        self.out.forward(g, store, pooled)
    }
}

/// Plain scaled dot-product attention, `softmax(Q K^T / sqrt(d)) V`.
pub fn attention(queries: &[Vec<f64>], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if keys.is_empty() {
        return Err(Error::Empty("attention needs at least one key".into()));
    }
    if keys.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            keys.len(),
            values.len()
        )));
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let d = keys[0].len();
    if queries.iter().chain(keys).any(|r| r.len() != d) {
        return Err(Error::Shape("queries and keys must share one dimension".into()));
    }
    let mut g = Graph::new();
    let q = g.input(Tensor::from_rows(queries)?);
    let k = g.input(Tensor::from_rows(keys)?);
    let v = g.input(Tensor::from_rows(values)?);
    let out = g.block_attention(q, k, v, 1, 1);
    let t = g.value(out);
    Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
}

/// Fuses the features of one detection into its token.
pub fn fuse(
    part_feats: &[FeatureVector],
    semantic: &FeatureVector,
    context: &FeatureVector,
    model: &Model,
) -> Result<CscToken> {
    let dim = model.dim();
    if part_feats.len() != model.num_parts() {
        return Err(Error::Shape(format!(
            "expected {} part features, got {}",
            model.num_parts(),
            part_feats.len()
        )));
    }
    if part_feats.iter().chain([semantic, context]).any(|f| f.len() != dim) {
        return Err(Error::Shape(format!("all features must have length {dim}")));
    }
    let layout = PatchLayout {
        parts: model.num_parts(),
        context: true,
        background: false,
    };
    let rows: Vec<Vec<f64>> = part_feats
        .iter()
        .chain([semantic, context])
        .map(|f| f.0.clone())
        .collect();
    let mut g = Graph::new();
    let feats = g.input(Tensor::from_rows(&rows)?);
    let out = model.fusion().forward(&mut g, &model.params, feats, &layout, 1);
    Ok(CscToken(g.value(out).data.clone()))
}

/// Region hierarchy of every detection of one frame.
pub fn frame_triplets(image: &Image, detections: &[Detection], model: &Model) -> Result<Vec<RegionTriplet>> {
    detections
        .iter()
        .map(|d| build_region_triplet(image, d, detections, &model.config.region))
        .collect()
}

/// Tokens for all detections of one frame, in input order.
pub fn tokens_for_frame(detections: &[Detection], image: &Image, model: &Model) -> Result<Vec<CscToken>> {
    if detections.is_empty() {
        return Ok(Vec::new());
    }
    let frame = detections[0].frame;
    if detections.iter().any(|d| d.frame != frame) {
        return Err(Error::InvalidArgument("detections span several frames".into()));
    }
    let triplets = frame_triplets(image, detections, model)?;
    let layout = PatchLayout::new(model.config.fusion.variant, model.num_parts(), false);
    let patches = layout.collect(&triplets);
    let batch = stack_patches(&patches, model.config.region.patch_size)?;
    let mut g = Graph::new();
    let feats = model.encode_batch(&mut g, batch);
    let out = model
        .fusion()
        .forward(&mut g, &model.params, feats, &layout, detections.len());
    let t = g.value(out);
    Ok((0..t.rows()).map(|r| CscToken(t.row(r).to_vec())).collect())
}
