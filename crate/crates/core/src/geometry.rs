//! Boxes, detections and the part / object / union region hierarchy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{crop_and_resize, crop_and_resize_masked, Image, Patch};

/// Axis-aligned box in pixel units; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        if !(w > 0.0 && h > 0.0) || !b.is_finite() {
            return Err(Error::Degenerate(format!("box {b:?} must have finite positive extent")));
        }
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BoundingBox::new(x1, y1, x2 - x1, y2 - y1)
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn contains_point(&self, u: f64, v: f64) -> bool {
        u >= self.x && u < self.right() && v >= self.y && v < self.bottom()
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    /// Smallest box enclosing both.
    pub fn enclose(&self, other: &BoundingBox) -> BoundingBox {
        let x1 = self.x.min(other.x);
        let y1 = self.y.min(other.y);
        BoundingBox {
            x: x1,
            y: y1,
            w: self.right().max(other.right()) - x1,
            h: self.bottom().max(other.bottom()) - y1,
        }
    }

    /// Grows the box by `fraction` of its own width/height on every side.
    pub fn padded(&self, fraction: f64) -> BoundingBox {
        let dx = self.w * fraction;
        let dy = self.h * fraction;
        BoundingBox {
            x: self.x - dx,
            y: self.y - dy,
            w: self.w + 2.0 * dx,
            h: self.h + 2.0 * dy,
        }
    }

    /// Intersects the box with a `width x height` frame. A box lying completely
    /// outside collapses to a one-pixel sliver on the nearest border.
    pub fn clamp_to(&self, width: usize, height: usize) -> BoundingBox {
        let (wf, hf) = (width as f64, height as f64);
        if self.x >= 0.0 && self.y >= 0.0 && self.right() <= wf && self.bottom() <= hf {
            return *self;
        }
        let x1 = self.x.clamp(0.0, (wf - 1.0).max(0.0));
        let y1 = self.y.clamp(0.0, (hf - 1.0).max(0.0));
        let x2 = self.right().min(wf).max(x1 + 1.0);
        let y2 = self.bottom().min(hf).max(y1 + 1.0);
        BoundingBox {
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
        }
    }
}

/// Intersection over union; symmetric and within `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// One detected object in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Zero-based frame index.
    pub frame: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
    /// Ground-truth identity, present for annotated data only.
    pub identity: Option<u64>,
}

impl Detection {
    pub fn new(frame: usize, bbox: BoundingBox, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidArgument(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Detection {
            frame,
            bbox,
            confidence,
            identity: None,
        })
    }

    pub fn with_identity(mut self, identity: u64) -> Self {
        self.identity = Some(identity);
        self
    }
}

/// Splits a box into a `(rows, cols)` grid of bins that tile it exactly.
/// Leftover pixels from the integer division go to the last row and column.
pub fn split_into_bins(bbox: &BoundingBox, grid: (usize, usize)) -> Result<Vec<BoundingBox>> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("grid {rows}x{cols} is empty")));
    }
    if bbox.w < cols as f64 || bbox.h < rows as f64 {
        return Err(Error::Degenerate(format!(
            "box {}x{} is smaller than the {rows}x{cols} grid",
            bbox.w, bbox.h
        )));
    }
    let bw = (bbox.w / cols as f64).floor();
    let bh = (bbox.h / rows as f64).floor();
    let mut bins = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y = bbox.y + bh * r as f64;
        let h = if r + 1 == rows { bbox.bottom() - y } else { bh };
        for c in 0..cols {
            let x = bbox.x + bw * c as f64;
            let w = if c + 1 == cols { bbox.right() - x } else { bw };
            bins.push(BoundingBox { x, y, w, h });
        }
    }
    Ok(bins)
}

/// Box enclosing `target` and every box in `others` that overlaps it, padded by
/// `pad_fraction` of its own size and clamped to the `(width, height)` frame.
pub fn compute_union_region(
    target: &BoundingBox,
    others: &[BoundingBox],
    pad_fraction: f64,
    frame_size: (usize, usize),
) -> BoundingBox {
    let union = others
        .iter()
        .filter(|o| iou(target, o) > 0.0)
        .fold(*target, |acc, o| acc.enclose(o));
    union.padded(pad_fraction).clamp_to(frame_size.0, frame_size.1)
}

/// Settings for building the region hierarchy of a detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    /// Part grid as `(rows, cols)`.
    pub grid: (usize, usize),
    /// Padding applied to the union region.
    pub pad_fraction: f64,
    /// Side length of every extracted patch.
    pub patch_size: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            grid: (2, 2),
            pad_fraction: 0.1,
            patch_size: 16,
        }
    }
}

impl RegionConfig {
    pub fn num_parts(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Part, object and union crops of one detection, plus the union crop with the
/// object area blanked out.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTriplet {
    pub parts: Vec<Patch>,
    pub semantic: Patch,
    pub context: Patch,
    pub context_background: Patch,
    /// Frame-space boxes the patches were sampled from.
    pub object_box: BoundingBox,
    pub union_box: BoundingBox,
}

/// Builds the region hierarchy of `target` given all detections of its frame.
/// The target itself may be present in `frame_detections`; it is skipped by
/// identity of box and frame.
pub fn build_region_triplet(
    image: &Image,
    target: &Detection,
    frame_detections: &[Detection],
    config: &RegionConfig,
) -> Result<RegionTriplet> {
    if let Some(d) = frame_detections.iter().find(|d| d.frame != target.frame) {
        return Err(Error::InvalidArgument(format!(
            "detection from frame {} mixed into frame {}",
            d.frame, target.frame
        )));
    }
    let size = (config.patch_size, config.patch_size);
    let object = target.bbox.clamp_to(image.width(), image.height());
    let parts = split_into_bins(&object, config.grid)?
        .iter()
        .map(|b| crop_and_resize(image, b, size))
        .collect::<Result<Vec<_>>>()?;
    let semantic = crop_and_resize(image, &object, size)?;

    let others: Vec<BoundingBox> = frame_detections
        .iter()
        .filter(|d| *d != target)
        .map(|d| d.bbox.clamp_to(image.width(), image.height()))
        .collect();
    let union = compute_union_region(
        &object,
        &others,
        config.pad_fraction,
        (image.width(), image.height()),
    );
    let context = crop_and_resize(image, &union, size)?;
    let context_background = crop_and_resize_masked(image, &union, size, &object)?;

    Ok(RegionTriplet {
        parts,
        semantic,
        context,
        context_background,
        object_box: object,
        union_box: union,
    })
}
