//! Region-of-interest geometry: fixed-size crops around per-frame boxes,
//! latent-resolution masks, and compositing crops back into frames.

use std::path::Path;

use image::{GenericImageView, RgbImage};
use log::warn;
use ndarray::Array2;
use thiserror::Error;

use crate::raster::overlap;
use crate::scheduler::LatentFrame;
use crate::vae::{VaeError, VaeHandle, SCALE_FACTOR};

#[derive(Debug, Error)]
pub enum RoiError {
    #[error("crop {crop_w}x{crop_h} does not fit in a {frame_w}x{frame_h} frame")]
    CropTooLarge {
        crop_w: u32,
        crop_h: u32,
        frame_w: u32,
        frame_h: u32,
    },
    #[error("box track line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("box track has no record for frame {0}")]
    MissingFrame(usize),
    #[error("box track has two records for frame {0}")]
    DuplicateFrame(usize),
    #[error("box {bbox:?} is not inside region {roi:?}")]
    BoxOutsideRoi { bbox: Rect, roi: Rect },
    #[error("region {roi:?} is not inside the {frame_w}x{frame_h} frame")]
    RoiOutsideFrame { roi: Rect, frame_w: u32, frame_h: u32 },
    #[error("crop is {got:?} but region is {want:?}")]
    SizeMismatch { got: (u32, u32), want: (u32, u32) },
    #[error("mask values must lie in [0, 1]")]
    MaskRange,
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    /// Containment of `other`; an empty rectangle is contained when its origin is.
    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn intersect(&self, other: &Rect) -> Rect {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right()).max(x0);
        let y1 = self.bottom().min(other.bottom()).max(y0);
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// This rectangle in the coordinates of `origin`'s top-left corner.
    pub fn relative_to(&self, origin: &Rect) -> Rect {
        Rect::new(self.x - origin.x, self.y - origin.y, self.w, self.h)
    }
}

/// One box per frame, in source pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxTrack {
    pub boxes: Vec<Rect>,
}

impl BoxTrack {
    pub fn n_frames(&self) -> usize {
        self.boxes.len()
    }

    /// Parses `frame_index x y w h` records; `#` starts a comment. Frame
    /// indices are 0-based and must cover `0..n` exactly once.
    pub fn parse(text: &str) -> Result<Self, RoiError> {
        let mut records: Vec<Option<Rect>> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| RoiError::Parse { line: i + 1, reason };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", fields.len())));
            }
            let idx: usize = fields[0].parse().map_err(|e| err(format!("frame index: {e}")))?;
            let mut v = [0u32; 4];
            for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                *slot = f.parse().map_err(|e| err(format!("`{f}`: {e}")))?;
            }
            if idx >= records.len() {
                records.resize(idx + 1, None);
            }
            if records[idx].is_some() {
                return Err(RoiError::DuplicateFrame(idx));
            }
            records[idx] = Some(Rect::new(v[0], v[1], v[2], v[3]));
        }
        let boxes = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or(RoiError::MissingFrame(i)))
            .collect::<Result<_, _>>()?;
        Ok(Self { boxes })
    }

    pub fn load(path: &Path) -> Result<Self, RoiError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.boxes
            .iter()
            .enumerate()
            .map(|(i, b)| format!("{i} {} {} {} {}\n", b.x, b.y, b.w, b.h))
            .collect()
    }
}

/// Fixed-size crops, one per frame, each containing its (clamped) box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoITrack {
    pub crops: Vec<Rect>,
    /// Boxes after clamping to the frame and to the crop size.
    pub boxes: Vec<Rect>,
    pub crop_w: u32,
    pub crop_h: u32,
    pub warnings: Vec<String>,
}

impl RoITrack {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    /// True when every crop is the whole frame.
    pub fn is_full_frame(&self, frame_w: u32, frame_h: u32) -> bool {
        self.crop_w == frame_w && self.crop_h == frame_h
    }
}

fn place(center2: u64, size: u32, limit: u32) -> u32 {
    // center2 is twice the box centre, so the crop origin is (center2 - size) / 2.
    let origin = (center2 as i64 - i64::from(size)).div_euclid(2);
    origin.clamp(0, i64::from(limit - size)) as u32
}

/// Shrinks `len` to `max` around the centre of `[start, start + len)`.
fn shrink(start: u32, len: u32, max: u32) -> (u32, u32) {
    if len <= max {
        (start, len)
    } else {
        (start + (len - max) / 2, max)
    }
}

/// Expands every box to a `crop_w x crop_h` crop centred on it and shifted
/// inward at frame borders.
pub fn expand_boxes(
    track: &BoxTrack,
    frame_w: u32,
    frame_h: u32,
    crop_w: u32,
    crop_h: u32,
    margin: f64,
) -> Result<RoITrack, RoiError> {
    if crop_w == 0 || crop_h == 0 || crop_w > frame_w || crop_h > frame_h {
        return Err(RoiError::CropTooLarge {
            crop_w,
            crop_h,
            frame_w,
            frame_h,
        });
    }
    let frame = Rect::new(0, 0, frame_w, frame_h);
    let margin = margin.max(0.0);
    let mut out = RoITrack {
        crops: Vec::with_capacity(track.n_frames()),
        boxes: Vec::with_capacity(track.n_frames()),
        crop_w,
        crop_h,
        warnings: Vec::new(),
    };
    let warn_frame = |i: usize, msg: String| {
        let msg = format!("frame {i}: {msg}");
        warn!("{msg}");
        msg
    };
    for (i, raw) in track.boxes.iter().enumerate() {
        let mut b = raw.intersect(&frame);
        if b != *raw && !raw.is_empty() {
            out.warnings
                .push(warn_frame(i, format!("box {raw:?} clamped to frame as {b:?}")));
        }
        let (x, w) = shrink(b.x, b.w, crop_w);
        let (y, h) = shrink(b.y, b.h, crop_h);
        if (w, h) != (b.w, b.h) {
            let clamped = Rect::new(x, y, w, h);
            out.warnings.push(warn_frame(
                i,
                format!("box {b:?} exceeds the {crop_w}x{crop_h} crop; clamped to {clamped:?}"),
            ));
            b = clamped;
        }
        let pad = (margin * f64::from(b.w.max(b.h))).ceil() as u32;
        if !b.is_empty() && (b.w + 2 * pad > crop_w || b.h + 2 * pad > crop_h) {
            log::debug!("frame {i}: crop cannot hold the full {pad}px margin");
        }
        let cx2 = 2 * u64::from(b.x) + u64::from(b.w);
        let cy2 = 2 * u64::from(b.y) + u64::from(b.h);
        let crop = Rect::new(place(cx2, crop_w, frame_w), place(cy2, crop_h, frame_h), crop_w, crop_h);
        debug_assert!(crop.contains(&b));
        out.crops.push(crop);
        out.boxes.push(b);
    }
    Ok(out)
}

/// A latent-resolution mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlane {
    pub data: Array2<f32>,
    pub frame: usize,
}

impl MaskPlane {
    pub fn new(data: Array2<f32>, frame: usize) -> Result<Self, RoiError> {
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RoiError::MaskRange);
        }
        Ok(Self { data, frame })
    }

    pub fn zeros(h: usize, w: usize, frame: usize) -> Self {
        Self {
            data: Array2::zeros((h, w)),
            frame,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

/// Area-averaged indicator of `bbox` (crop coordinates) on a grid of
/// `cell x cell` pixel cells.
pub fn box_mask(bbox: &Rect, crop_w: u32, crop_h: u32, cell: u32, frame: usize) -> MaskPlane {
    let (gh, gw) = ((crop_h / cell) as usize, (crop_w / cell) as usize);
    let c = f64::from(cell);
    let (bx0, bx1) = (f64::from(bbox.x), f64::from(bbox.right()));
    let (by0, by1) = (f64::from(bbox.y), f64::from(bbox.bottom()));
    let data = Array2::from_shape_fn((gh, gw), |(i, j)| {
        let (y0, x0) = (i as f64 * c, j as f64 * c);
        (overlap(y0, y0 + c, by0, by1) * overlap(x0, x0 + c, bx0, bx1) / (c * c)) as f32
    });
    MaskPlane { data, frame }
}

#[derive(Debug, Clone)]
pub struct CropEncoding {
    pub crop: RgbImage,
    pub bg_latent: LatentFrame,
    pub masked_bg_latent: LatentFrame,
    pub mask: MaskPlane,
}

/// Crops `roi` from the frame, zeroes `bbox` (frame coordinates) and encodes
/// both versions. `frame_no` is the 1-based clip position tagged on outputs.
pub fn crop_and_encode(
    frame: &RgbImage,
    roi: Rect,
    bbox: Rect,
    encoder: &VaeHandle,
    frame_no: usize,
) -> Result<CropEncoding, RoiError> {
    let (fw, fh) = frame.dimensions();
    if !Rect::new(0, 0, fw, fh).contains(&roi) {
        return Err(RoiError::RoiOutsideFrame {
            roi,
            frame_w: fw,
            frame_h: fh,
        });
    }
    if !roi.contains(&bbox) {
        return Err(RoiError::BoxOutsideRoi { bbox, roi });
    }
    let crop = frame.view(roi.x, roi.y, roi.w, roi.h).to_image();
    let local = bbox.relative_to(&roi);
    let mut bg_latent = encoder.encode(&crop)?;
    bg_latent.frame = frame_no;
    let masked_bg_latent = if local.is_empty() {
        bg_latent.clone()
    } else {
        let mut masked = crop.clone();
        for y in local.y..local.bottom() {
            for x in local.x..local.right() {
                masked.put_pixel(x, y, image::Rgb([0, 0, 0]));
            }
        }
        let mut l = encoder.encode(&masked)?;
        l.frame = frame_no;
        l
    };
    let mask = box_mask(&local, roi.w, roi.h, encoder.scale_factor() as u32, frame_no);
    debug_assert_eq!(mask.dims(), (bg_latent.shape()[1], bg_latent.shape()[2]));
    Ok(CropEncoding {
        crop,
        bg_latent,
        masked_bg_latent,
        mask,
    })
}

/// Replaces the pixels of `roi` with `crop`; every other pixel is copied.
pub fn composite_back(frame: &RgbImage, roi: Rect, crop: &RgbImage) -> Result<RgbImage, RoiError> {
    if crop.dimensions() != (roi.w, roi.h) {
        return Err(RoiError::SizeMismatch {
            got: crop.dimensions(),
            want: (roi.w, roi.h),
        });
    }
    let (fw, fh) = frame.dimensions();
    if !Rect::new(0, 0, fw, fh).contains(&roi) {
        return Err(RoiError::RoiOutsideFrame {
            roi,
            frame_w: fw,
            frame_h: fh,
        });
    }
    let mut out = frame.clone();
    for (x, y, px) in crop.enumerate_pixels() {
        out.put_pixel(roi.x + x, roi.y + y, *px);
    }
    Ok(out)
}

/// Default latent cell size, re-exported for callers building masks by hand.
pub const MASK_CELL: u32 = SCALE_FACTOR as u32;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::BlockCodec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn track(boxes: &[Rect]) -> BoxTrack {
        BoxTrack { boxes: boxes.to_vec() }
    }

    #[test]
    fn centered_box_gets_centered_crop() {
        let t = track(&[Rect::new(900, 500, 100, 80)]);
        let r = expand_boxes(&t, 1920, 1080, 512, 512, 0.25).unwrap();
        assert_eq!(r.crops[0], Rect::new(950 - 256, 540 - 256, 512, 512));
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn corner_box_shifts_inward() {
        let t = track(&[Rect::new(1850, 1040, 70, 40)]);
        let r = expand_boxes(&t, 1920, 1080, 512, 512, 0.25).unwrap();
        assert_eq!(r.crops[0], Rect::new(1920 - 512, 1080 - 512, 512, 512));
        assert!(r.crops[0].contains(&t.boxes[0]));
        let t = track(&[Rect::new(0, 0, 10, 10)]);
        let r = expand_boxes(&t, 1920, 1080, 512, 512, 0.25).unwrap();
        assert_eq!(r.crops[0], Rect::new(0, 0, 512, 512));
    }

    #[test]
    fn oversized_crop_rejected() {
        let t = track(&[Rect::new(0, 0, 10, 10)]);
        assert!(matches!(
            expand_boxes(&t, 256, 256, 512, 256, 0.25),
            Err(RoiError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn drifting_box_is_clamped_with_warning() {
        let t = track(&[Rect::new(10, 10, 300, 40), Rect::new(200, 200, 100, 100)]);
        let r = expand_boxes(&t, 400, 400, 128, 128, 0.25).unwrap();
        assert_eq!(r.boxes[0].w, 128);
        assert!(r.crops[0].contains(&r.boxes[0]));
        assert_eq!(r.warnings.len(), 1);
        assert!(r.warnings[0].starts_with("frame 0"));
        // Out-of-frame boxes are intersected with the frame.
        let t = track(&[Rect::new(380, 380, 50, 50)]);
        let r = expand_boxes(&t, 400, 400, 128, 128, 0.25).unwrap();
        assert_eq!(r.boxes[0], Rect::new(380, 380, 20, 20));
    }

    proptest! {
        #[test]
        fn crops_satisfy_geometry(
            fw in 64u32..800, fh in 64u32..800,
            cw_frac in 0.1f64..1.0, ch_frac in 0.1f64..1.0,
            seeds in proptest::collection::vec(any::<u64>(), 10),
        ) {
            let cw = ((f64::from(fw) * cw_frac) as u32).max(1);
            let ch = ((f64::from(fh) * ch_frac) as u32).max(1);
            let boxes: Vec<Rect> = seeds.iter().map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(*s);
                let x = rng.random_range(0..fw);
                let y = rng.random_range(0..fh);
                Rect::new(x, y, rng.random_range(0..=fw - x), rng.random_range(0..=fh - y))
            }).collect();
            let t = track(&boxes);
            let r = expand_boxes(&t, fw, fh, cw, ch, 0.25).unwrap();
            let frame = Rect::new(0, 0, fw, fh);
            for (i, (crop, b)) in r.crops.iter().zip(&r.boxes).enumerate() {
                prop_assert_eq!((crop.w, crop.h), (cw, ch));
                prop_assert!(frame.contains(crop));
                prop_assert!(crop.contains(b));
                prop_assert!(boxes[i].contains(b) || b.is_empty());
                if boxes[i].w <= cw && boxes[i].h <= ch {
                    prop_assert_eq!(*b, boxes[i]);
                    // Centred unless pushed in by a border.
                    let off_l = i64::from(b.x) - i64::from(crop.x);
                    let off_r = i64::from(crop.right()) - i64::from(b.right());
                    if crop.x > 0 && crop.right() < fw {
                        prop_assert!((off_l - off_r).abs() <= 1);
                    }
                }
            }
            let again = expand_boxes(&t, fw, fh, cw, ch, 0.25).unwrap();
            prop_assert_eq!(r, again);
        }

        #[test]
        fn mask_is_monotone_in_box(x in 0u32..64, y in 0u32..64, w in 0u32..64, h in 0u32..64, gx in 0u32..8, gy in 0u32..8) {
            let small = Rect::new(x, y, w.min(64 - x), h.min(64 - y));
            let big = Rect::new(x.saturating_sub(gx), y.saturating_sub(gy),
                (small.w + gx * 2).min(64 - x.saturating_sub(gx)), (small.h + gy * 2).min(64 - y.saturating_sub(gy)));
            let a = box_mask(&small, 64, 64, 8, 0);
            let b = box_mask(&big, 64, 64, 8, 0);
            for (p, q) in a.data.iter().zip(b.data.iter()) {
                prop_assert!(q >= p);
                prop_assert!((0.0..=1.0).contains(p));
            }
        }
    }

    #[test]
    fn parses_box_track() {
        let t = BoxTrack::parse("# header\n1 5 6 7 8\n0 1 2 3 4  # first\n\n").unwrap();
        assert_eq!(t.boxes, vec![Rect::new(1, 2, 3, 4), Rect::new(5, 6, 7, 8)]);
        assert_eq!(BoxTrack::parse(&t.to_text()).unwrap(), t);
        assert!(matches!(
            BoxTrack::parse("0 1 2 3 4\n2 1 2 3 4\n"),
            Err(RoiError::MissingFrame(1))
        ));
        assert!(matches!(
            BoxTrack::parse("0 1 2 3 4\n0 1 2 3 4\n"),
            Err(RoiError::DuplicateFrame(0))
        ));
        assert!(matches!(
            BoxTrack::parse("0 1 2 3\n"),
            Err(RoiError::Parse { line: 1, .. })
        ));
        assert!(matches!(BoxTrack::parse("0 1 2 -3 4\n"), Err(RoiError::Parse { .. })));
    }

    fn vae() -> VaeHandle {
        Arc::new(BlockCodec::toy())
    }

    fn noisy_frame(w: u32, h: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        RgbImage::from_fn(w, h, |_, _| image::Rgb(rng.random()))
    }

    #[test]
    fn full_box_masks_everything() {
        let frame = noisy_frame(128, 96);
        let roi = Rect::new(32, 16, 64, 64);
        let enc = crop_and_encode(&frame, roi, roi, &vae(), 1).unwrap();
        assert!(enc.mask.data.iter().all(|v| *v == 1.0));
        assert!(enc.masked_bg_latent.data.iter().all(|v| *v == 0.0));
        assert_eq!(enc.bg_latent.frame, 1);
    }

    #[test]
    fn empty_box_masks_nothing() {
        let frame = noisy_frame(128, 96);
        let roi = Rect::new(32, 16, 64, 64);
        let enc = crop_and_encode(&frame, roi, Rect::new(40, 40, 0, 0), &vae(), 2).unwrap();
        assert!(enc.mask.is_empty());
        assert_eq!(enc.masked_bg_latent, enc.bg_latent);
    }

    #[test]
    fn quadrant_box_marks_quadrant_cells() {
        let frame = noisy_frame(512, 512);
        let roi = Rect::new(0, 0, 512, 512);
        let enc = crop_and_encode(&frame, roi, Rect::new(0, 0, 256, 256), &vae(), 1).unwrap();
        assert_eq!(enc.mask.dims(), (64, 64));
        // Direct 8x downsample of the pixel indicator.
        for i in 0..64 {
            for j in 0..64 {
                let mut count = 0;
                for y in i * 8..i * 8 + 8 {
                    for x in j * 8..j * 8 + 8 {
                        count += (x < 256 && y < 256) as u32;
                    }
                }
                assert_eq!(enc.mask.data[[i, j]], count as f32 / 64.0);
            }
        }
        // Partial cells carry fractional coverage.
        let m = box_mask(&Rect::new(4, 0, 8, 8), 16, 16, 8, 0);
        assert_eq!(m.data[[0, 0]], 0.5);
        assert_eq!(m.data[[0, 1]], 0.5);
    }

    #[test]
    fn box_outside_roi_rejected() {
        let frame = noisy_frame(128, 96);
        let roi = Rect::new(32, 16, 64, 64);
        assert!(matches!(
            crop_and_encode(&frame, roi, Rect::new(0, 0, 10, 10), &vae(), 1),
            Err(RoiError::BoxOutsideRoi { .. })
        ));
    }

    #[test]
    fn identity_composite() {
        let frame = noisy_frame(100, 80);
        let roi = Rect::new(10, 20, 40, 32);
        let crop = frame.view(10, 20, 40, 32).to_image();
        assert_eq!(composite_back(&frame, roi, &crop).unwrap(), frame);
    }

    #[test]
    fn composite_only_touches_roi() {
        let frame = noisy_frame(100, 80);
        let roi = Rect::new(10, 20, 40, 32);
        let out = composite_back(&frame, roi, &RgbImage::new(40, 32)).unwrap();
        for (x, y, px) in out.enumerate_pixels() {
            if roi.contains_point(x, y) {
                assert_eq!(px.0, [0, 0, 0]);
            } else {
                assert_eq!(px, frame.get_pixel(x, y));
            }
        }
        assert!(composite_back(&frame, roi, &RgbImage::new(41, 32)).is_err());
    }
}
