//! Segmenter and band-inpainter clients.
//!
//! Process clients spawn a helper command per request, write one JSON line to
//! its stdin and read one JSON line from its stdout. Images travel as
//! base64-encoded PNG. See `docs/client-protocol.md`.

use std::io::{BufRead, BufReader, Cursor, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::BinaryMask;
use crate::roi::Rect;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("client failed: {0}")]
    Failed(String),
    #[error("malformed response: {0}")]
    Protocol(String),
}

impl ClientError {
    pub fn is_retriable(&self) -> bool {
        !matches!(self, Self::Protocol(_))
    }
}

pub trait SegmenterClient: Send + Sync {
    /// Soft object mask, `(height, width)` with values in `[0, 1]`.
    fn segment(&self, image: &RgbImage, label: &str) -> Result<Array2<f32>, ClientError>;
}

pub trait BandInpainterClient: Send + Sync {
    /// The image with every `band` pixel filled from its surroundings.
    fn inpaint(&self, image: &RgbImage, band: &BinaryMask) -> Result<RgbImage, ClientError>;
}

/// Returns the same soft mask for every request.
#[derive(Debug, Clone)]
pub struct StaticSegmenter {
    mask: Array2<f32>,
}

impl StaticSegmenter {
    pub fn new(mask: Array2<f32>) -> Self {
        Self { mask }
    }

    /// `value` inside `rect`, zero elsewhere.
    pub fn rect(width: u32, height: u32, rect: Rect, value: f32) -> Self {
        Self::new(Array2::from_shape_fn((height as usize, width as usize), |(y, x)| {
            if rect.contains_point(x as u32, y as u32) {
                value
            } else {
                0.0
            }
        }))
    }
}

impl SegmenterClient for StaticSegmenter {
    fn segment(&self, _: &RgbImage, _: &str) -> Result<Array2<f32>, ClientError> {
        Ok(self.mask.clone())
    }
}

/// Marks pixels that differ from a reference image; useful when the
/// unedited crop is known.
#[derive(Debug, Clone)]
pub struct DiffSegmenter {
    reference: RgbImage,
}

impl DiffSegmenter {
    pub fn new(reference: RgbImage) -> Self {
        Self { reference }
    }
}

impl SegmenterClient for DiffSegmenter {
    fn segment(&self, image: &RgbImage, _: &str) -> Result<Array2<f32>, ClientError> {
        if image.dimensions() != self.reference.dimensions() {
            return Err(ClientError::Failed("reference size differs".into()));
        }
        Ok(Array2::from_shape_fn(
            (image.height() as usize, image.width() as usize),
            |(y, x)| {
                let (a, b) = (
                    image.get_pixel(x as u32, y as u32),
                    self.reference.get_pixel(x as u32, y as u32),
                );
                if a == b {
                    0.0
                } else {
                    1.0
                }
            },
        ))
    }
}

/// Fills the band with pixels of a fixed source image.
#[derive(Debug, Clone)]
pub struct SourceInpainter {
    source: RgbImage,
}

impl SourceInpainter {
    pub fn new(source: RgbImage) -> Self {
        Self { source }
    }
}

impl BandInpainterClient for SourceInpainter {
    fn inpaint(&self, image: &RgbImage, band: &BinaryMask) -> Result<RgbImage, ClientError> {
        if self.source.dimensions() != image.dimensions() {
            return Err(ClientError::Failed("source size differs".into()));
        }
        let mut out = image.clone();
        for (x, y, px) in out.enumerate_pixels_mut() {
            if band.get(x, y) {
                *px = *self.source.get_pixel(x, y);
            }
        }
        Ok(out)
    }
}

/// Always fails; forces the cross-fade fallback.
#[derive(Debug, Clone, Copy, Default)]
pub struct FailingInpainter;

impl BandInpainterClient for FailingInpainter {
    fn inpaint(&self, _: &RgbImage, _: &BinaryMask) -> Result<RgbImage, ClientError> {
        Err(ClientError::Failed("no band inpainter configured".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub timeout: Duration,
    /// Extra attempts after the first.
    pub retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            retries: 2,
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut attempt: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut tries = 0;
        loop {
            match attempt() {
                Err(e) if e.is_retriable() && tries < self.retries => {
                    tries += 1;
                    warn!("client attempt {tries} failed: {e}; retrying");
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Segment {
        label: String,
        width: u32,
        height: u32,
        image_png_b64: String,
    },
    Inpaint {
        width: u32,
        height: u32,
        image_png_b64: String,
        mask_png_b64: String,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Response {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_png_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_png_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn encode_png(img: DynamicImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    B64.encode(buf.into_inner())
}

pub fn decode_png(b64: &str) -> Result<DynamicImage, ClientError> {
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| ClientError::Protocol(format!("base64: {e}")))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| ClientError::Protocol(format!("png: {e}")))
}

/// A helper command speaking the one-line JSON protocol.
#[derive(Debug, Clone)]
pub struct ProcessClient {
    program: String,
    args: Vec<String>,
    policy: RetryPolicy,
}

impl ProcessClient {
    /// `command` is split on whitespace into program and arguments.
    pub fn new(command: &str, policy: RetryPolicy) -> Result<Self, ClientError> {
        let mut parts = command.split_whitespace().map(String::from);
        let program = parts
            .next()
            .ok_or_else(|| ClientError::Failed("empty client command".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
            policy,
        })
    }

    fn call_once(&self, line: &str) -> Result<Response, ClientError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| ClientError::Failed(format!("spawning {}: {e}", self.program)))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        let payload = format!("{line}\n");
        thread::spawn(move || {
            // A helper that exits early closes the pipe; the reader reports it.
            let _ = stdin.write_all(payload.as_bytes());
            drop(stdin);
        });
        thread::spawn(move || {
            let mut reply = String::new();
            let res = BufReader::new(stdout).read_line(&mut reply).map(|_| reply);
            let _ = tx.send(res);
        });
        let reply = match rx.recv_timeout(self.policy.timeout) {
            Ok(r) => r,
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ClientError::Timeout(self.policy.timeout));
            }
        };
        let status = child.wait().map_err(|e| ClientError::Failed(e.to_string()))?;
        let reply = reply.map_err(|e| ClientError::Failed(e.to_string()))?;
        if reply.trim().is_empty() {
            return Err(ClientError::Failed(format!(
                "{} exited with {status} and no reply",
                self.program
            )));
        }
        let resp: Response = serde_json::from_str(reply.trim()).map_err(|e| ClientError::Protocol(e.to_string()))?;
        if let Some(err) = resp.error {
            return Err(ClientError::Failed(err));
        }
        Ok(resp)
    }

    pub fn call(&self, req: &Request) -> Result<Response, ClientError> {
        let line = serde_json::to_string(req).expect("request serializes");
        self.policy.run(|| self.call_once(&line))
    }
}

#[derive(Debug, Clone)]
pub struct ProcessSegmenter(pub ProcessClient);

impl SegmenterClient for ProcessSegmenter {
    fn segment(&self, image: &RgbImage, label: &str) -> Result<Array2<f32>, ClientError> {
        let req = Request::Segment {
            label: label.into(),
            width: image.width(),
            height: image.height(),
            image_png_b64: encode_png(DynamicImage::ImageRgb8(image.clone())),
        };
        let resp = self.0.call(&req)?;
        let mask = resp
            .mask_png_b64
            .ok_or_else(|| ClientError::Protocol("missing mask_png_b64".into()))?;
        let mask: GrayImage = decode_png(&mask)?.to_luma8();
        Ok(Array2::from_shape_fn(
            (mask.height() as usize, mask.width() as usize),
            |(y, x)| f32::from(mask.get_pixel(x as u32, y as u32)[0]) / 255.0,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct ProcessBandInpainter(pub ProcessClient);

impl BandInpainterClient for ProcessBandInpainter {
    fn inpaint(&self, image: &RgbImage, band: &BinaryMask) -> Result<RgbImage, ClientError> {
        let req = Request::Inpaint {
            width: image.width(),
            height: image.height(),
            image_png_b64: encode_png(DynamicImage::ImageRgb8(image.clone())),
            mask_png_b64: encode_png(DynamicImage::ImageLuma8(band.to_gray())),
        };
        let resp = self.0.call(&req)?;
        let img = resp
            .image_png_b64
            .ok_or_else(|| ClientError::Protocol("missing image_png_b64".into()))?;
        let img = decode_png(&img)?.to_rgb8();
        if img.dimensions() != image.dimensions() {
            return Err(ClientError::Protocol(format!(
                "inpainter returned {:?} for {:?}",
                img.dimensions(),
                image.dimensions()
            )));
        }
        Ok(img)
    }
}
