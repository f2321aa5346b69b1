//! Halo removal around a composited crop.
//!
//! The inserted object is segmented in the edited crop, its mask is dilated,
//! and the ring between the two is handed to a band inpainter. Pixels outside
//! the dilated mask come from the source crop, pixels inside the object mask
//! from the edited crop.

pub mod client;

use image::{GrayImage, Luma, Rgb, RgbImage};
use imageproc::distance_transform::euclidean_squared_distance_transform;
use log::warn;
use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

pub use client::{
    BandInpainterClient, ClientError, DiffSegmenter, FailingInpainter, ProcessBandInpainter, ProcessClient,
    ProcessSegmenter, RetryPolicy, SegmenterClient, SourceInpainter, StaticSegmenter,
};

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("empty detection label")]
    EmptyLabel,
    #[error("size mismatch: {what} is {got:?}, expected {want:?}")]
    Size {
        what: &'static str,
        got: (u32, u32),
        want: (u32, u32),
    },
    #[error("dilated mask does not contain the object mask")]
    Containment,
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// A per-pixel boolean mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self { width, height, bits }
    }

    /// Keeps values `>= threshold` of a `(height, width)` soft mask.
    pub fn from_soft(soft: &Array2<f32>, threshold: f32) -> Self {
        let (h, w) = soft.dim();
        Self::from_fn(w as u32, h as u32, |x, y| soft[[y as usize, x as usize]] >= threshold)
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[(y * self.width + x) as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn contains(&self, other: &BinaryMask) -> bool {
        self.dimensions() == other.dimensions() && self.bits.iter().zip(&other.bits).all(|(a, b)| *a || !*b)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y)[0] != 0)
    }

    /// Squared Euclidean distance from every pixel to the nearest set pixel;
    /// infinite when the mask is empty.
    pub fn squared_distance(&self) -> Vec<f64> {
        if self.is_empty() {
            return vec![f64::INFINITY; self.bits.len()];
        }
        euclidean_squared_distance_transform(&self.to_gray())
            .pixels()
            .map(|p| p[0])
            .collect()
    }
}

/// Segments `label` in the crop and binarizes the client's soft mask.
pub fn extract_object_mask(
    crop: &RgbImage,
    label: &str,
    client: &dyn SegmenterClient,
    threshold: f32,
) -> Result<BinaryMask, PostprocessError> {
    if label.trim().is_empty() {
        return Err(PostprocessError::EmptyLabel);
    }
    let soft = client.segment(crop, label)?;
    let (h, w) = soft.dim();
    if (w as u32, h as u32) != crop.dimensions() {
        return Err(ClientError::Protocol(format!(
            "segmenter returned a {w}x{h} mask for a {}x{} crop",
            crop.width(),
            crop.height()
        ))
        .into());
    }
    Ok(BinaryMask::from_soft(&soft, threshold))
}

/// Morphological dilation by a closed Euclidean disk of `radius` pixels.
pub fn dilate_mask(mask: &BinaryMask, radius: u32) -> BinaryMask {
    if radius == 0 || mask.is_empty() {
        return mask.clone();
    }
    let r2 = f64::from(radius) * f64::from(radius);
    let d = mask.squared_distance();
    BinaryMask {
        width: mask.width,
        height: mask.height,
        bits: d.iter().map(|v| *v <= r2).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrimapLabel {
    Foreground,
    Background,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trimap {
    width: u32,
    height: u32,
    labels: Vec<TrimapLabel>,
}

impl Trimap {
    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn label(&self, x: u32, y: u32) -> TrimapLabel {
        self.labels[(y * self.width + x) as usize]
    }

    pub fn count(&self, label: TrimapLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    pub fn mask_of(&self, label: TrimapLabel) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|l| *l == label).collect(),
        }
    }
}

pub fn make_trimap(object: &BinaryMask, dilated: &BinaryMask) -> Result<Trimap, PostprocessError> {
    if object.dimensions() != dilated.dimensions() {
        return Err(PostprocessError::Size {
            what: "dilated mask",
            got: dilated.dimensions(),
            want: object.dimensions(),
        });
    }
    if !dilated.contains(object) {
        return Err(PostprocessError::Containment);
    }
    let labels = object
        .bits
        .iter()
        .zip(&dilated.bits)
        .map(|(o, d)| match (o, d) {
            (true, _) => TrimapLabel::Foreground,
            (false, true) => TrimapLabel::Unknown,
            (false, false) => TrimapLabel::Background,
        })
        .collect();
    Ok(Trimap {
        width: object.width,
        height: object.height,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendOutcome {
    pub image: RgbImage,
    pub used_fallback: bool,
    pub client_called: bool,
}

/// Foreground-weight of the fallback cross-fade: `1 - d / (R + 1)` where `d`
/// is the distance to the nearest foreground pixel and `R` the largest such
/// distance inside the band.
pub fn crossfade_weights(trimap: &Trimap) -> Vec<f32> {
    let fg = trimap.mask_of(TrimapLabel::Foreground);
    let d: Vec<f64> = fg.squared_distance().into_iter().map(f64::sqrt).collect();
    let reach = trimap
        .labels
        .iter()
        .zip(&d)
        .filter(|(l, _)| **l == TrimapLabel::Unknown)
        .map(|(_, d)| *d)
        .filter(|d| d.is_finite())
        .fold(0.0f64, f64::max);
    trimap
        .labels
        .iter()
        .zip(&d)
        .map(|(l, d)| match l {
            TrimapLabel::Foreground => 1.0,
            TrimapLabel::Background => 0.0,
            TrimapLabel::Unknown if d.is_finite() => (1.0 - d / (reach + 1.0)) as f32,
            TrimapLabel::Unknown => 0.0,
        })
        .collect()
}

fn mix(a: &Rgb<u8>, b: &Rgb<u8>, w: f32) -> Rgb<u8> {
    Rgb(std::array::from_fn(|c| {
        (w * f32::from(a[c]) + (1.0 - w) * f32::from(b[c]))
            .round()
            .clamp(0.0, 255.0) as u8
    }))
}

/// Foreground from `crop`, background from `source`, band from the inpainter
/// (or a linear cross-fade when the inpainter fails).
pub fn blend_halo(
    crop: &RgbImage,
    source: &RgbImage,
    trimap: &Trimap,
    client: &dyn BandInpainterClient,
) -> Result<BlendOutcome, PostprocessError> {
    for (what, dims) in [("source crop", source.dimensions()), ("trimap", trimap.dimensions())] {
        if dims != crop.dimensions() {
            return Err(PostprocessError::Size {
                what,
                got: dims,
                want: crop.dimensions(),
            });
        }
    }
    let mut base = RgbImage::from_fn(crop.width(), crop.height(), |x, y| match trimap.label(x, y) {
        TrimapLabel::Foreground => *crop.get_pixel(x, y),
        _ => *source.get_pixel(x, y),
    });
    if trimap.count(TrimapLabel::Unknown) == 0 {
        return Ok(BlendOutcome {
            image: base,
            used_fallback: false,
            client_called: false,
        });
    }
    let band = trimap.mask_of(TrimapLabel::Unknown);
    let filled = client.inpaint(&base, &band).and_then(|img| {
        if img.dimensions() == base.dimensions() {
            Ok(img)
        } else {
            Err(ClientError::Protocol(format!(
                "band inpainter returned {:?} for {:?}",
                img.dimensions(),
                base.dimensions()
            )))
        }
    });
    let used_fallback = match filled {
        Ok(img) => {
            for (x, y, px) in base.enumerate_pixels_mut() {
                if band.get(x, y) {
                    *px = *img.get_pixel(x, y);
                }
            }
            false
        }
        Err(e) => {
            warn!("band inpainting failed ({e}); cross-fading the band instead");
            let w = crossfade_weights(trimap);
            for (x, y, px) in base.enumerate_pixels_mut() {
                if band.get(x, y) {
                    let wi = w[(y * crop.width() + x) as usize];
                    *px = mix(crop.get_pixel(x, y), source.get_pixel(x, y), wi);
                }
            }
            true
        }
    };
    Ok(BlendOutcome {
        image: base,
        used_fallback,
        client_called: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaloSettings {
    pub radius: u32,
    pub threshold: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub image: RgbImage,
    /// `None` when nothing was detected and blending was skipped.
    pub trimap: Option<Trimap>,
    pub used_fallback: bool,
}

/// Full halo treatment of one edited crop against its source crop.
pub fn postprocess_crop(
    edited: &RgbImage,
    source: &RgbImage,
    label: &str,
    settings: HaloSettings,
    segmenter: &dyn SegmenterClient,
    inpainter: &dyn BandInpainterClient,
) -> Result<FrameOutcome, PostprocessError> {
    let object = extract_object_mask(edited, label, segmenter, settings.threshold)?;
    if object.is_empty() {
        return Ok(FrameOutcome {
            image: edited.clone(),
            trimap: None,
            used_fallback: false,
        });
    }
    let dilated = dilate_mask(&object, settings.radius);
    let trimap = make_trimap(&object, &dilated)?;
    let blended = blend_halo(edited, source, &trimap, inpainter)?;
    Ok(FrameOutcome {
        image: blended.image,
        trimap: Some(trimap),
        used_fallback: blended.used_fallback,
    })
}

/// [`postprocess_crop`] over aligned sequences, in parallel. Errors name the
/// 1-based frame.
pub fn postprocess_crops(
    edited: &[RgbImage],
    sources: &[RgbImage],
    label: &str,
    settings: HaloSettings,
    segmenter: &dyn SegmenterClient,
    inpainter: &dyn BandInpainterClient,
) -> Result<Vec<FrameOutcome>, (usize, PostprocessError)> {
    edited
        .par_iter()
        .zip(sources)
        .enumerate()
        .map(|(i, (e, s))| postprocess_crop(e, s, label, settings, segmenter, inpainter).map_err(|err| (i + 1, err)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi::Rect;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(seed: u64, w: u32, h: u32, density: f64) -> BinaryMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BinaryMask {
            width: w,
            height: h,
            bits: (0..w * h).map(|_| rng.random_bool(density)).collect(),
        }
    }

    fn brute_dilate(m: &BinaryMask, r: u32) -> BinaryMask {
        let (w, h) = m.dimensions();
        let r = i64::from(r);
        BinaryMask::from_fn(w, h, |x, y| {
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (sx, sy) = (i64::from(x) + dx, i64::from(y) + dy);
                    dx * dx + dy * dy <= r * r
                        && sx >= 0
                        && sy >= 0
                        && sx < i64::from(w)
                        && sy < i64::from(h)
                        && m.get(sx as u32, sy as u32)
                })
            })
        })
    }

    fn brute_distance(m: &BinaryMask, x: u32, y: u32) -> f64 {
        let (w, h) = m.dimensions();
        let mut best = f64::INFINITY;
        for sy in 0..h {
            for sx in 0..w {
                if m.get(sx, sy) {
                    let (dx, dy) = (f64::from(sx) - f64::from(x), f64::from(sy) - f64::from(y));
                    best = best.min((dx * dx + dy * dy).sqrt());
                }
            }
        }
        best
    }

    #[test]
    fn stub_rectangle_is_binarized() {
        let crop = RgbImage::new(20, 10);
        let stub = StaticSegmenter::rect(20, 10, Rect::new(3, 2, 5, 4), 0.9);
        let m = extract_object_mask(&crop, "dog", &stub, 0.5).unwrap();
        assert_eq!(m.count(), 20);
        assert!(m.get(3, 2) && m.get(7, 5) && !m.get(8, 5));
        assert!(matches!(
            extract_object_mask(&crop, "  ", &stub, 0.5),
            Err(PostprocessError::EmptyLabel)
        ));
    }

    #[test]
    fn soft_mask_threshold() {
        let soft = Array2::from_shape_fn((4, 4), |(y, x)| if (x + y) % 2 == 0 { 0.4 } else { 0.6 });
        let stub = StaticSegmenter::new(soft.clone());
        let m = extract_object_mask(&RgbImage::new(4, 4), "cat", &stub, 0.5).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(m.get(x, y), soft[[y as usize, x as usize]] >= 0.5);
            }
        }
        let wrong = StaticSegmenter::new(Array2::zeros((3, 4)));
        assert!(matches!(
            extract_object_mask(&RgbImage::new(4, 4), "cat", &wrong, 0.5),
            Err(PostprocessError::Client(ClientError::Protocol(_)))
        ));
    }

    #[test]
    fn no_detection_skips_blending() {
        let edited = RgbImage::from_pixel(8, 8, Rgb([9, 9, 9]));
        let source = RgbImage::new(8, 8);
        let stub = StaticSegmenter::new(Array2::zeros((8, 8)));
        let out = postprocess_crop(
            &edited,
            &source,
            "dog",
            HaloSettings {
                radius: 2,
                threshold: 0.5,
            },
            &stub,
            &client::FailingInpainter,
        )
        .unwrap();
        assert_eq!(out.image, edited);
        assert!(out.trimap.is_none());
    }

    #[test]
    fn dilation_examples() {
        let mut m = BinaryMask::new(5, 5);
        m.set(2, 2, true);
        assert_eq!(dilate_mask(&m, 0), m);
        let d = dilate_mask(&m, 1);
        let expect = BinaryMask::from_fn(5, 5, |x, y| (x as i32 - 2).abs() + (y as i32 - 2).abs() <= 1);
        assert_eq!(d, expect);
        assert_eq!(d.count(), 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn dilation_matches_disk_enumeration(seed in any::<u64>(), w in 1u32..24, h in 1u32..24, r in 0u32..6, dens in 0.0f64..0.2) {
            let m = random_mask(seed, w, h, dens);
            let d = dilate_mask(&m, r);
            prop_assert_eq!(&d, &brute_dilate(&m, r));
            prop_assert!(d.contains(&m));
        }

        #[test]
        fn dilation_composes(seed in any::<u64>(), r1 in 0u32..4, r2 in 0u32..4) {
            let m = random_mask(seed, 20, 16, 0.05);
            let twice = dilate_mask(&dilate_mask(&m, r1), r2);
            prop_assert!(twice.contains(&dilate_mask(&m, r1.max(r2))));
        }

        #[test]
        fn trimap_partitions(seed in any::<u64>()) {
            let m = random_mask(seed, 24, 18, 0.08);
            let d = dilate_mask(&m, 3);
            let t = make_trimap(&m, &d).unwrap();
            for y in 0..18 {
                for x in 0..24 {
                    let want = if m.get(x, y) {
                        TrimapLabel::Foreground
                    } else if d.get(x, y) {
                        TrimapLabel::Unknown
                    } else {
                        TrimapLabel::Background
                    };
                    prop_assert_eq!(t.label(x, y), want);
                }
            }
            prop_assert_eq!(
                t.count(TrimapLabel::Foreground) + t.count(TrimapLabel::Unknown) + t.count(TrimapLabel::Background),
                24 * 18
            );
        }
    }

    #[test]
    fn trimap_edge_cases() {
        let m = random_mask(3, 10, 10, 0.3);
        assert_eq!(make_trimap(&m, &m).unwrap().count(TrimapLabel::Unknown), 0);
        let empty = BinaryMask::new(10, 10);
        assert_eq!(make_trimap(&empty, &empty).unwrap().count(TrimapLabel::Background), 100);
        assert!(matches!(make_trimap(&m, &empty), Err(PostprocessError::Containment)));
    }

    fn noisy(seed: u64, w: u32, h: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb(rng.random()))
    }

    #[test]
    fn empty_band_needs_no_client() {
        let (crop, source) = (noisy(1, 12, 12), noisy(2, 12, 12));
        let m = BinaryMask::from_fn(12, 12, |x, y| x < 6 && y < 6);
        let t = make_trimap(&m, &m).unwrap();
        let out = blend_halo(&crop, &source, &t, &client::FailingInpainter).unwrap();
        assert!(!out.client_called);
        for (x, y, px) in out.image.enumerate_pixels() {
            let want = if m.get(x, y) {
                crop.get_pixel(x, y)
            } else {
                source.get_pixel(x, y)
            };
            assert_eq!(px, want);
        }
    }

    #[test]
    fn source_stub_restores_source_outside_fg() {
        let (crop, source) = (noisy(1, 16, 16), noisy(2, 16, 16));
        let m = BinaryMask::from_fn(16, 16, |x, y| (5..9).contains(&x) && (5..9).contains(&y));
        let t = make_trimap(&m, &dilate_mask(&m, 3)).unwrap();
        let out = blend_halo(&crop, &source, &t, &SourceInpainter::new(source.clone())).unwrap();
        assert!(out.client_called && !out.used_fallback);
        for (x, y, px) in out.image.enumerate_pixels() {
            let want = if m.get(x, y) {
                crop.get_pixel(x, y)
            } else {
                source.get_pixel(x, y)
            };
            assert_eq!(px, want);
        }
    }

    #[test]
    fn fallback_crossfade_is_linear_in_distance() {
        let crop = RgbImage::from_pixel(24, 24, Rgb([200, 100, 0]));
        let source = RgbImage::from_pixel(24, 24, Rgb([0, 100, 200]));
        let m = BinaryMask::from_fn(24, 24, |x, y| (9..14).contains(&x) && (10..13).contains(&y));
        let t = make_trimap(&m, &dilate_mask(&m, 4)).unwrap();
        let out = blend_halo(&crop, &source, &t, &client::FailingInpainter).unwrap();
        assert!(out.used_fallback);
        let mut seen = 0;
        for (x, y, px) in out.image.enumerate_pixels() {
            match t.label(x, y) {
                TrimapLabel::Foreground => assert_eq!(px, crop.get_pixel(x, y)),
                TrimapLabel::Background => assert_eq!(px, source.get_pixel(x, y)),
                TrimapLabel::Unknown => {
                    let d = brute_distance(&m, x, y);
                    assert!(d > 0.0 && d <= 4.0);
                    let w = 1.0 - d / 5.0;
                    assert_eq!(px[0], (w * 200.0).round() as u8);
                    assert_eq!(px[1], 100);
                    assert_eq!(px[2], ((1.0 - w) * 200.0).round() as u8);
                    seen += 1;
                }
            }
        }
        assert_eq!(seen, t.count(TrimapLabel::Unknown));
        assert!(seen > 0);
    }

    #[test]
    fn size_mismatch_rejected() {
        let t = make_trimap(&BinaryMask::new(4, 4), &BinaryMask::new(4, 4)).unwrap();
        assert!(blend_halo(
            &RgbImage::new(4, 4),
            &RgbImage::new(5, 4),
            &t,
            &client::FailingInpainter
        )
        .is_err());
    }

    #[test]
    fn parallel_frames_report_failing_index() {
        let edited = vec![RgbImage::new(8, 8); 3];
        let source = vec![RgbImage::new(8, 8); 3];
        let stub = StaticSegmenter::new(Array2::zeros((8, 8)));
        let settings = HaloSettings {
            radius: 1,
            threshold: 0.5,
        };
        let ok = postprocess_crops(&edited, &source, "x", settings, &stub, &client::FailingInpainter).unwrap();
        assert_eq!(ok.len(), 3);
        let mut bad = edited.clone();
        bad[1] = RgbImage::new(4, 4);
        let (frame, _) = postprocess_crops(&bad, &source, "x", settings, &stub, &client::FailingInpainter).unwrap_err();
        assert_eq!(frame, 2);
    }
}
