//! Synthetic tracking scenes, detection noise, and sequence directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Detection};
use crate::imaging::Image;
use crate::mot::{read_mot, write_mot, MotKind, TrackSet};

pub use crate::mot::{parse_mot, TrackRecord};

/// Two targets sharing a lane that meet head-on at `frame`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crossing {
    pub a: usize,
    pub b: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub num_targets: usize,
    pub frames: usize,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
    pub target_width: (f64, f64),
    pub target_height: (f64, f64),
    /// Horizontal speed range in pixels per frame.
    pub speed: (f64, f64),
    /// Amplitude of the smooth positional wobble in pixels.
    pub jitter: f64,
    pub crossings: Vec<Crossing>,
    /// Vertical offset between the two targets of a crossing.
    pub crossing_offset: f64,
    /// Probability that a visible target is missed by the detector.
    pub occlusion_rate: f64,
    /// Targets less visible than this are not detected.
    pub min_visibility: f64,
    /// All targets share one base colour; only the part accents differ.
    pub shared_base_color: bool,
    /// All targets carry the same four accent colours in different quadrant orders.
    pub shared_accent_colors: bool,
    /// Side of the accent squares relative to a part bin.
    pub accent_fraction: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::easy(0)
    }
}

impl ScenarioConfig {
    pub fn easy(seed: u64) -> Self {
        ScenarioConfig {
            name: "easy".into(),
            num_targets: 5,
            frames: 100,
            image_size: (224, 160),
            target_width: (22.0, 26.0),
            target_height: (40.0, 46.0),
            speed: (1.0, 2.0),
            jitter: 1.5,
            crossings: vec![Crossing { a: 0, b: 1, frame: 30 }, Crossing { a: 2, b: 3, frame: 70 }],
            crossing_offset: 6.0,
            occlusion_rate: 0.0,
            min_visibility: 0.4,
            shared_base_color: false,
            shared_accent_colors: false,
            accent_fraction: 0.6,
            seed,
        }
    }

    pub fn hard(seed: u64) -> Self {
        ScenarioConfig {
            name: "hard".into(),
            shared_base_color: true,
            accent_fraction: 0.35,
            ..ScenarioConfig::easy(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "easy" => Ok(ScenarioConfig::easy(seed)),
            "hard" => Ok(ScenarioConfig::hard(seed)),
            other => Err(Error::Config(format!("unknown scenario preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        if self.num_targets == 0 || self.frames == 0 || w == 0 || h == 0 {
            return Err(Error::Config("targets, frames and image size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) || !(0.0..=1.0).contains(&self.min_visibility) {
            return Err(Error::Config("rates must lie in [0, 1]".into()));
        }
        let ordered = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1;
        if !ordered(self.target_width) || !ordered(self.target_height) || !(self.speed.0 >= 0.0 && self.speed.0 <= self.speed.1) {
            return Err(Error::Config("ranges must be positive and ordered".into()));
        }
        if self.target_width.1 + 2.0 * self.jitter >= w as f64
            || self.target_height.1 + self.crossing_offset + 2.0 * self.jitter >= h as f64
        {
            return Err(Error::InvalidArgument(format!(
                "targets up to {}x{} do not fit a {w}x{h} image",
                self.target_width.1, self.target_height.1
            )));
        }
        if self.shared_accent_colors && self.num_targets > 24 {
            return Err(Error::Config("shared accent colours allow at most 24 targets".into()));
        }
        let mut used = vec![false; self.num_targets];
        for c in &self.crossings {
            if c.a == c.b || c.a >= self.num_targets || c.b >= self.num_targets {
                return Err(Error::Config(format!("invalid crossing {c:?}")));
            }
            for t in [c.a, c.b] {
                if std::mem::replace(&mut used[t], true) {
                    return Err(Error::Config(format!("target {t} is in two crossings")));
                }
            }
        }
        Ok(())
    }
}

/// A generated or loaded sequence. Frames are 0-based; identities start at 1.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Image>,
    /// Every target box in every frame, with identity.
    pub gt: Vec<Detection>,
    /// Detector output; carries identities when generated synthetically.
    pub detections: Vec<Detection>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.width(), f.height()))
    }

    /// Detections grouped by frame.
    pub fn detections_by_frame(&self) -> Vec<Vec<Detection>> {
        group_by_frame(&self.detections, self.len())
    }

    pub fn gt_track_set(&self) -> TrackSet {
        TrackSet::from_detections(&self.gt)
    }
}

pub fn group_by_frame(dets: &[Detection], frames: usize) -> Vec<Vec<Detection>> {
    let mut out = vec![Vec::new(); frames];
    for d in dets {
        if d.frame < frames {
            out[d.frame].push(*d);
        }
    }
    out
}

struct Target {
    w: f64,
    h: f64,
    lane_y: f64,
    /// Unfolded horizontal position at frame 0 and its velocity.
    x0: f64,
    vx: f64,
    phase: (f64, f64),
    base: [f32; 3],
    accents: [[f32; 3]; 4],
    texture: u64,
}

impl Target {
    fn bbox(&self, t: usize, cfg: &ScenarioConfig) -> BoundingBox {
        let (iw, ih) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
        let t = t as f64;
        let wobble_x = cfg.jitter * (0.31 * t + self.phase.0).sin();
        let wobble_y = cfg.jitter * (0.23 * t + self.phase.1).sin();
        let x = reflect(self.x0 + self.vx * t + wobble_x, iw - self.w);
        let y = (self.lane_y + wobble_y).clamp(0.0, ih - self.h);
        BoundingBox { x, y, w: self.w, h: self.h }
    }
}

/// Folds an unbounded coordinate into `[0, limit]` by mirror reflection.
fn reflect(x: f64, limit: f64) -> f64 {
    if limit <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * limit;
    let p = x.rem_euclid(period);
    if p > limit {
        period - p
    } else {
        p
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

const ACCENTS: [[f32; 3]; 8] = [
    [0.95, 0.95, 0.95],
    [0.05, 0.05, 0.05],
    [0.95, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.15, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.9, 0.2, 0.9],
    [0.1, 0.85, 0.9],
];

/// Cheap deterministic hash noise in `[-1, 1]`.
fn hash_noise(seed: u64, x: i64, y: i64) -> f32 {
    let mut h = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h as f64 / u64::MAX as f64 * 2.0 - 1.0) as f32
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn make_targets(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<Target> {
    let (iw, ih) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
    let n = cfg.num_targets;
    let mut partner: Vec<Option<(usize, usize, bool)>> = vec![None; n];
    for c in &cfg.crossings {
        partner[c.a] = Some((c.b, c.frame, true));
        partner[c.b] = Some((c.a, c.frame, false));
    }
    // One lane per crossing pair or lone target.
    let mut lane_of = vec![usize::MAX; n];
    let mut lanes = 0;
    for t in 0..n {
        if lane_of[t] != usize::MAX {
            continue;
        }
        lane_of[t] = lanes;
        if let Some((p, _, _)) = partner[t] {
            lane_of[p] = lanes;
        }
        lanes += 1;
    }
    let max_h = cfg.target_height.1 + cfg.crossing_offset;
    let span = (ih - max_h - 2.0 * cfg.jitter).max(0.0);
    let lane_y = |l: usize| cfg.jitter + if lanes > 1 { span * l as f64 / (lanes - 1) as f64 } else { span / 2.0 };

    let hue0: f64 = rng.random_range(0.0..1.0);
    let shared = hsv(hue0, 0.55, 0.7);
    let shared_accents = if cfg.shared_accent_colors {
        let mut palette: Vec<usize> = (0..ACCENTS.len()).collect();
        palette.shuffle(rng);
        [palette[0], palette[1], palette[2], palette[3]]
    } else {
        [0; 4]
    };
    let mut accent_sets: Vec<[usize; 4]> = Vec::new();
    let mut targets: Vec<Target> = Vec::with_capacity(n);
    for t in 0..n {
        let w = rng.random_range(cfg.target_width.0..=cfg.target_width.1);
        let h = rng.random_range(cfg.target_height.0..=cfg.target_height.1);
        let speed = rng.random_range(cfg.speed.0..=cfg.speed.1);
        let phase = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
        let base = if cfg.shared_base_color {
            shared
        } else {
            hsv(hue0 + t as f64 / n as f64, 0.6, 0.75)
        };
        let accents_idx = loop {
            let mut idx = [0usize; 4];
            if cfg.shared_accent_colors {
                idx = shared_accents;
                idx.shuffle(rng);
            } else {
                for slot in &mut idx {
                    *slot = rng.random_range(0..ACCENTS.len());
                }
            }
            if !accent_sets.contains(&idx) {
                break idx;
            }
        };
        accent_sets.push(accents_idx);
        let texture = rng.random();
        targets.push(Target {
            w,
            h,
            lane_y: lane_y(lane_of[t]),
            x0: 0.0,
            vx: speed,
            phase,
            base,
            accents: accents_idx.map(|i| ACCENTS[i]),
            texture,
        });
    }
    for t in 0..n {
        match partner[t] {
            Some((p, frame, first)) => {
                // Both centres reach `meet` at `frame`, moving towards each other.
                if !first {
                    continue;
                }
                let meet = rng.random_range(0.35 * iw..0.65 * iw);
                let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let f = frame as f64;
                for (k, sign) in [(t, dir), (p, -dir)] {
                    let tg = &mut targets[k];
                    tg.vx *= sign;
                    tg.phase.0 = -0.31 * f;
                    tg.x0 = meet - tg.w / 2.0 - tg.vx * f;
                }
                targets[p].lane_y += cfg.crossing_offset;
                targets[p].phase.1 = targets[t].phase.1;
            }
            None => {
                let tg = &mut targets[t];
                if rng.random_bool(0.5) {
                    tg.vx = -tg.vx;
                }
                tg.x0 = rng.random_range(0.0..(iw - tg.w));
            }
        }
    }
    targets
}

/// Renders the scenario. Returns the sequence with detections taken from the
/// sufficiently visible ground-truth boxes.
pub fn generate_sequence(cfg: &ScenarioConfig) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let targets = make_targets(cfg, &mut rng);
    let (iw, ih) = cfg.image_size;
    let bg_seed: u64 = rng.random();
    let background: Vec<f32> = (0..iw * ih)
        .map(|i| 0.35 + 0.04 * hash_noise(bg_seed, (i % iw) as i64, (i / iw) as i64))
        .collect();

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt = Vec::new();
    let mut detections = Vec::new();
    let mut owner = vec![usize::MAX; iw * ih];
    for f in 0..cfg.frames {
        let boxes: Vec<BoundingBox> = targets.iter().map(|t| t.bbox(f, cfg)).collect();
        // Lower boxes are nearer the camera and drawn last.
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.sort_by(|&a, &b| boxes[a].bottom().total_cmp(&boxes[b].bottom()).then(a.cmp(&b)));
        let mut img = Image::new(iw, ih);
        for (i, &v) in background.iter().enumerate() {
            let q = quantize(v);
            img.put(i % iw, i / iw, [q, q, q]);
        }
        owner.fill(usize::MAX);
        let mut total = vec![0usize; targets.len()];
        for &k in &order {
            let (t, b) = (&targets[k], boxes[k]);
            let x_lo = b.x.floor().max(0.0) as usize;
            let y_lo = b.y.floor().max(0.0) as usize;
            let x_hi = (b.right().ceil() as usize).min(iw);
            let y_hi = (b.bottom().ceil() as usize).min(ih);
            let (hw, hh) = (b.w / 2.0, b.h / 2.0);
            let (aw, ah) = (hw * cfg.accent_fraction, hh * cfg.accent_fraction);
            for py in y_lo..y_hi {
                for px in x_lo..x_hi {
                    let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                    if !b.contains_point(cx, cy) {
                        continue;
                    }
                    total[k] += 1;
                    let (u, v) = (cx - b.x, cy - b.y);
                    let (col, row) = (usize::from(u >= hw), usize::from(v >= hh));
                    let (qu, qv) = (u - col as f64 * hw, v - row as f64 * hh);
                    let inset_u = (hw - aw) / 2.0;
                    let inset_v = (hh - ah) / 2.0;
                    let in_accent = qu >= inset_u && qu < inset_u + aw && qv >= inset_v && qv < inset_v + ah;
                    let n = 1.0 + 0.08 * hash_noise(t.texture, u.floor() as i64, v.floor() as i64);
                    let c = if in_accent { t.accents[row * 2 + col] } else { t.base };
                    img.put(px, py, [quantize(c[0] * n), quantize(c[1] * n), quantize(c[2] * n)]);
                    owner[py * iw + px] = k;
                }
            }
        }
        let mut visible = vec![0usize; targets.len()];
        for &o in &owner {
            if o != usize::MAX {
                visible[o] += 1;
            }
        }
        for (k, b) in boxes.iter().enumerate() {
            let id = k as u64 + 1;
            let vis = if total[k] == 0 { 0.0 } else { visible[k] as f64 / total[k] as f64 };
            gt.push(Detection::new(f, *b, 1.0)?.with_identity(id));
            let missed = rng.random_bool(cfg.occlusion_rate);
            if vis >= cfg.min_visibility && !missed {
                detections.push(Detection::new(f, *b, vis)?.with_identity(id));
            }
        }
        frames.push(img);
    }
    Ok(Sequence {
        name: format!("{}-{:04}", cfg.name, cfg.seed),
        frames,
        gt,
        detections,
    })
}

/// Box-noise protocol: independent per-side shifts and per-axis rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Probability that each side is shifted.
    pub shift_prob: f64,
    pub shift_max_fraction: f64,
    pub shift_max_pixels: f64,
    pub resize_range: (f64, f64),
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            shift_prob: 0.25,
            shift_max_fraction: 0.2,
            shift_max_pixels: 20.0,
            resize_range: (0.9, 1.1),
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig {
            shift_prob: 0.0,
            resize_range: (1.0, 1.0),
            ..NoiseConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.resize_range;
        if !(0.0..=1.0).contains(&self.shift_prob)
            || self.shift_max_fraction < 0.0
            || self.shift_max_pixels < 0.0
            || !(lo > 0.0 && lo <= 1.0 && hi >= 1.0)
        {
            return Err(Error::Config(format!("invalid noise config {self:?}")));
        }
        Ok(())
    }
}

/// Shifts each side of a `d`-sized box by `[0, min(fraction d, max)]` pixels
/// with probability `p`, direction chosen uniformly.
fn shift_side(rng: &mut ChaCha8Rng, noise: &NoiseConfig, d: f64) -> f64 {
    if !rng.random_bool(noise.shift_prob) {
        return 0.0;
    }
    let max = (noise.shift_max_fraction * d).min(noise.shift_max_pixels);
    let mag = if max > 0.0 { rng.random_range(0.0..=max) } else { 0.0 };
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Perturbs every box, then clamps it to the `(width, height)` frame.
pub fn inject_noise(
    detections: &[Detection],
    noise: &NoiseConfig,
    image_size: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Detection>> {
    noise.validate()?;
    let mut out = Vec::with_capacity(detections.len());
    for d in detections {
        let b = d.bbox;
        let left = b.x + shift_side(rng, noise, b.w);
        let right = b.right() + shift_side(rng, noise, b.w);
        let top = b.y + shift_side(rng, noise, b.h);
        let bottom = b.bottom() + shift_side(rng, noise, b.h);
        let (lo, hi) = noise.resize_range;
        let sx = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let sy = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (cx, cy) = ((left + right) / 2.0, (top + bottom) / 2.0);
        let w = ((right - left) * sx).max(1.0);
        let h = ((bottom - top) * sy).max(1.0);
        let shifted = if noise.shift_prob == 0.0 && sx == 1.0 && sy == 1.0 {
            b
        } else {
            BoundingBox {
                x: cx - w / 2.0,
                y: cy - h / 2.0,
                w,
                h,
            }
        };
        let mut nd = *d;
        nd.bbox = shifted.clamp_to(image_size.0, image_size.1);
        out.push(nd);
    }
    Ok(out)
}

/// Writes `img1/`, `gt/gt.txt`, `det/det.txt` and `seqinfo.ini` under `dir`.
pub fn write_sequence_dir(seq: &Sequence, dir: &Path) -> Result<()> {
    let img_dir = dir.join("img1");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save_ppm(&img_dir.join(format!("{:06}.ppm", i + 1)))?;
    }
    write_mot(&dir.join("gt").join("gt.txt"), &TrackSet::from_detections(&seq.gt))?;
    let dets: Vec<Detection> = seq
        .detections
        .iter()
        .map(|d| Detection { identity: None, ..*d })
        .collect();
    write_mot(&dir.join("det").join("det.txt"), &TrackSet::from_detections(&dets))?;
    let (w, h) = seq.image_size();
    let mut ini = String::new();
    let _ = writeln!(ini, "[Sequence]");
    let _ = writeln!(ini, "name={}", seq.name);
    let _ = writeln!(ini, "imDir=img1");
    let _ = writeln!(ini, "frameRate=30");
    let _ = writeln!(ini, "seqLength={}", seq.len());
    let _ = writeln!(ini, "imWidth={w}");
    let _ = writeln!(ini, "imHeight={h}");
    let _ = writeln!(ini, "imExt=.ppm");
    let path = dir.join("seqinfo.ini");
    std::fs::write(&path, ini).map_err(|e| Error::io(&path, e))
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let img_dir = dir.join("img1");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm" || x == "png" || x == "jpg"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads a sequence directory. When `det/det.txt` is missing the ground truth
/// serves as detections. Detections never carry identities.
pub fn read_sequence_dir(dir: &Path) -> Result<Sequence> {
    let frames = frame_paths(dir)?
        .iter()
        .map(|p| Image::load(p))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::Empty(format!("no frames under {}", dir.join("img1").display())));
    }
    let gt_path = dir.join("gt").join("gt.txt");
    let gt = if gt_path.exists() {
        read_mot(&gt_path, MotKind::GroundTruth)?
    } else {
        TrackSet::default()
    };
    let det_path = dir.join("det").join("det.txt");
    let det = if det_path.exists() {
        read_mot(&det_path, MotKind::Detections)?
    } else {
        let mut d = gt.clone();
        d.records.iter_mut().for_each(|r| r.id = -1);
        d
    };
    let to_dets = |s: &TrackSet| -> Result<Vec<Detection>> {
        s.records
            .iter()
            .filter(|r| r.frame < frames.len())
            .map(TrackRecord::to_detection)
            .collect()
    };
    let name = dir
        .file_name()
        .map_or_else(|| "sequence".to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Sequence {
        name,
        gt: to_dets(&gt)?,
        detections: to_dets(&det)?,
        frames,
    })
}

/// Training view of a loaded sequence: ground-truth boxes with identities.
pub fn annotated_detections(seq: &Sequence) -> Vec<Detection> {
    if seq.detections.iter().all(|d| d.identity.is_some()) && !seq.detections.is_empty() {
        seq.detections.clone()
    } else {
        seq.gt.clone()
    }
}
