//! RGB frames, fixed-size patches and bilinear resampling.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// An RGB frame with channel-interleaved `f32` samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image buffer of {} samples does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Writes the frame as a binary PPM.
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let encoder = PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
        encoder
            .write_image(&bytes, self.width as u32, self.height as u32, ExtendedColorType::Rgb8)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Image::from_raw(w as usize, h as usize, data)
    }

    /// Bilinear read at a continuous pixel-centre coordinate, clamped to the frame.
    fn sample(&self, u: f64, v: f64, c: usize, masked: Option<&PixelMask>) -> f64 {
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let px = |x: usize, y: usize| -> f64 {
            match masked {
                Some(m) if m.contains(x, y) => 0.0,
                _ => self.get(x, y, c) as f64,
            }
        };
        let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
        let bottom = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// A fixed-size three-channel patch stored plane by plane (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn zeros(width: usize, height: usize) -> Self {
        Patch {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Source pixels whose value is forced to zero during resampling.
#[derive(Debug, Clone, Copy)]
struct PixelMask {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl PixelMask {
    /// Every integer pixel that overlaps the half-open box area.
    fn covering(b: &BoundingBox) -> Self {
        let x0 = b.x.floor().max(0.0) as usize;
        let y0 = b.y.floor().max(0.0) as usize;
        let x1 = (b.x + b.w).ceil().max(0.0) as usize;
        let y1 = (b.y + b.h).ceil().max(0.0) as usize;
        PixelMask { x0, y0, x1, y1 }
    }

    #[inline]
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Source coordinate of output index `j` along one axis: corner-aligned, so the
/// first and last samples land on the first and last pixel centres of the box.
#[inline]
pub fn sample_coord(start: f64, extent: f64, j: usize, out: usize) -> f64 {
    if out == 1 {
        start + (extent - 1.0) * 0.5
    } else {
        start + j as f64 * (extent - 1.0) / (out - 1) as f64
    }
}

/// Bilinear resample of `bbox` to an `out_size = (width, height)` patch.
pub fn crop_and_resize(image: &Image, bbox: &BoundingBox, out_size: (usize, usize)) -> Result<Patch> {
    resample(image, bbox, out_size, None)
}

/// Like [`crop_and_resize`], but every source pixel overlapping `zeroed` reads as 0
/// and every output sample whose source point falls inside `zeroed` is exactly 0.
pub fn crop_and_resize_masked(
    image: &Image,
    bbox: &BoundingBox,
    out_size: (usize, usize),
    zeroed: &BoundingBox,
) -> Result<Patch> {
    resample(image, bbox, out_size, Some(zeroed))
}

fn resample(
    image: &Image,
    bbox: &BoundingBox,
    out_size: (usize, usize),
    zeroed: Option<&BoundingBox>,
) -> Result<Patch> {
    if image.is_empty() {
        return Err(Error::Empty("cannot crop from an empty image".into()));
    }
    let (ow, oh) = out_size;
    if ow == 0 || oh == 0 {
        return Err(Error::InvalidArgument(format!(
            "output size must be positive, got {ow}x{oh}"
        )));
    }
    let mask = zeroed.map(PixelMask::covering);
    let mut patch = Patch::zeros(ow, oh);
    for j in 0..oh {
        let v = sample_coord(bbox.y, bbox.h, j, oh);
        for i in 0..ow {
            let u = sample_coord(bbox.x, bbox.w, i, ow);
            if let Some(z) = zeroed {
                if z.contains_point(u, v) {
                    continue;
                }
            }
            for c in 0..3 {
                patch.set(c, j, i, image.sample(u, v, c, mask.as_ref()));
            }
        }
    }
    Ok(patch)
}

/// Resamples a patch to a new size with the same corner-aligned rule.
pub fn resize_patch(patch: &Patch, out_size: (usize, usize)) -> Patch {
    if patch.size() == out_size {
        return patch.clone();
    }
    let (ow, oh) = out_size;
    let mut out = Patch::zeros(ow, oh);
    for j in 0..oh {
        let v = sample_coord(0.0, patch.height as f64, j, oh);
        let y0 = v.floor() as usize;
        let y1 = (y0 + 1).min(patch.height - 1);
        let fy = v - y0 as f64;
        for i in 0..ow {
            let u = sample_coord(0.0, patch.width as f64, i, ow);
            let x0 = u.floor() as usize;
            let x1 = (x0 + 1).min(patch.width - 1);
            let fx = u - x0 as f64;
            for c in 0..3 {
                let top = patch.get(c, y0, x0) * (1.0 - fx) + patch.get(c, y0, x1) * fx;
                let bot = patch.get(c, y1, x0) * (1.0 - fx) + patch.get(c, y1, x1) * fx;
                out.set(c, j, i, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn constant_image_gives_constant_patch() {
        let img = Image::filled(20, 10, [0.25, 0.5, 0.75]);
        let p = crop_and_resize(&img, &bb(3.3, 1.7, 9.1, 6.2), (7, 5)).unwrap();
        for c in 0..3 {
            let want = [0.25, 0.5, 0.75][c];
            for y in 0..5 {
                for x in 0..7 {
                    assert!((p.get(c, y, x) - want).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn full_box_at_native_size_is_identity() {
        let mut img = Image::new(6, 4);
        for y in 0..4 {
            for x in 0..6 {
                img.put(x, y, [x as f32 / 8.0, y as f32 / 8.0, ((x * y) % 5) as f32 / 5.0]);
            }
        }
        let p = crop_and_resize(&img, &bb(0.0, 0.0, 6.0, 4.0), (6, 4)).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                for c in 0..3 {
                    assert_eq!(p.get(c, y, x), img.get(x, y, c) as f64);
                }
            }
        }
    }

    #[test]
    fn checkerboard_upsample_matches_direct_bilinear_formula() {
        let mut img = Image::new(2, 2);
        img.put(0, 0, [1.0; 3]);
        img.put(1, 1, [1.0; 3]);
        let p = crop_and_resize(&img, &bb(0.0, 0.0, 2.0, 2.0), (4, 4)).unwrap();
        // Corner-aligned samples sit at 0, 1/3, 2/3, 1 along each axis.
        let corners = [[1.0, 0.0], [0.0, 1.0]];
        for j in 0..4 {
            let fy = j as f64 / 3.0;
            for i in 0..4 {
                let fx = i as f64 / 3.0;
                let want = corners[0][0] * (1.0 - fx) * (1.0 - fy)
                    + corners[0][1] * fx * (1.0 - fy)
                    + corners[1][0] * (1.0 - fx) * fy
                    + corners[1][1] * fx * fy;
                assert!((p.get(0, j, i) - want).abs() < 1e-12, "({i},{j})");
            }
        }
        // Spot values of the frozen expectation.
        assert!((p.get(0, 0, 0) - 1.0).abs() < 1e-12);
        assert!((p.get(0, 1, 1) - 5.0 / 9.0).abs() < 1e-12);
        assert!((p.get(0, 0, 3) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn empty_image_is_rejected() {
        let img = Image::new(0, 0);
        assert!(matches!(
            crop_and_resize(&img, &bb(0.0, 0.0, 1.0, 1.0), (2, 2)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn masked_samples_inside_zeroed_box_are_zero() {
        let img = Image::filled(32, 32, [0.9, 0.8, 0.7]);
        let target = bb(8.5, 10.25, 9.0, 7.5);
        let p = crop_and_resize_masked(&img, &bb(2.0, 3.0, 25.0, 22.0), (16, 16), &target).unwrap();
        let mut zeros = 0;
        for j in 0..16 {
            let v = sample_coord(3.0, 22.0, j, 16);
            for i in 0..16 {
                let u = sample_coord(2.0, 25.0, i, 16);
                if target.contains_point(u, v) {
                    zeros += 1;
                    for c in 0..3 {
                        assert_eq!(p.get(c, j, i), 0.0);
                    }
                }
            }
        }
        assert!(zeros > 0);
    }
}
