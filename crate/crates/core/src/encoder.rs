//! Shared convolutional feature extractor and its two-layer projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RegionTriplet;
use crate::imaging::{resize_patch, Patch};
use crate::model::{Builder, Linear, Model};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of each stride-2 convolution stage.
    pub channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![8, 16, 32],
        }
    }
}

/// Encoder output for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    convs: Vec<(ParamId, ParamId)>,
    proj: [Linear; 2],
}

const KERNEL: usize = 3;

impl Encoder {
    pub(crate) fn build(b: &mut Builder<'_>, cfg: &EncoderConfig, dim: usize) -> Result<Self> {
        let mut convs = Vec::with_capacity(cfg.channels.len());
        let mut in_c = 3;
        for (i, &out_c) in cfg.channels.iter().enumerate() {
            let w = b.uniform(
                &format!("encoder.conv{i}.weight"),
                &[out_c, KERNEL, KERNEL, in_c],
                KERNEL * KERNEL * in_c,
                KERNEL * KERNEL * out_c,
            )?;
            let bias = b.constant(&format!("encoder.conv{i}.bias"), &[out_c], 0.0)?;
            convs.push((w, bias));
            in_c = out_c;
        }
        let proj = [
            Linear::build(b, "encoder.proj0", in_c, dim, true)?,
            Linear::build(b, "encoder.proj1", dim, dim, true)?,
        ];
        Ok(Encoder { convs, proj })
    }

    /// `[B, S, S, 3]` patches to `[B, dim]` features.
    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for &(w, b) in &self.convs {
            let (w, b) = (g.param(store, w), g.param(store, b));
            let c = g.conv2d(h, w, b, 2, 1);
            h = g.relu(c);
        }
        let pooled = g.spatial_mean(h);
        let p0 = self.proj[0].forward(g, store, pooled);
        let a0 = g.relu(p0);
        let p1 = self.proj[1].forward(g, store, a0);
        g.relu(p1)
    }
}

/// Stacks equally sized patches into a channel-last `[B, S, S, 3]` batch.
pub fn stack_patches(patches: &[&Patch], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(patches.len() * size * size * 3);
    for p in patches {
        if p.size() != (size, size) {
            return Err(Error::Shape(format!(
                "patch is {}x{}, encoder expects {size}x{size}",
                p.width, p.height
            )));
        }
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    data.push(p.get(c, y, x));
                }
            }
        }
    }
    Tensor::new(vec![patches.len(), size, size, 3], data)
}

fn rows_to_features(t: &Tensor) -> Vec<FeatureVector> {
    (0..t.rows()).map(|r| FeatureVector(t.row(r).to_vec())).collect()
}

/// Runs the shared encoder on one patch of the configured resolution.
pub fn encode_patch(patch: &Patch, model: &Model) -> Result<FeatureVector> {
    let batch = stack_patches(&[patch], model.config.region.patch_size)?;
    let mut g = Graph::new();
    let out = model.encode_batch(&mut g, batch);
    Ok(FeatureVector(g.value(out).data.clone()))
}

/// Features of every level of a region triplet, all from the one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletFeatures {
    pub parts: Vec<FeatureVector>,
    pub semantic: FeatureVector,
    pub context: FeatureVector,
    pub context_background: FeatureVector,
}

pub fn encode_triplet(triplet: &RegionTriplet, model: &Model) -> Result<TripletFeatures> {
    let size = model.config.region.patch_size;
    if triplet.semantic.size() != (size, size) {
        return Err(Error::Shape(format!(
            "semantic patch is {}x{}, encoder expects {size}x{size}",
            triplet.semantic.width, triplet.semantic.height
        )));
    }
    let parts: Vec<Patch> = triplet
        .parts
        .iter()
        .map(|p| resize_patch(p, triplet.semantic.size()))
        .collect();
    let mut all: Vec<&Patch> = parts.iter().collect();
    all.push(&triplet.semantic);
    all.push(&triplet.context);
    all.push(&triplet.context_background);
    let batch = stack_patches(&all, size)?;
    let mut g = Graph::new();
    let out = model.encode_batch(&mut g, batch);
    let mut feats = rows_to_features(g.value(out));
    let context_background = feats.pop().expect("background row");
    let context = feats.pop().expect("context row");
    let semantic = feats.pop().expect("semantic row");
    Ok(TripletFeatures {
        parts: feats,
        semantic,
        context,
        context_background,
    })
}
