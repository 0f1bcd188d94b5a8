//! Image transforms applied between crafting and identification: 8-bit
//! quantisation, JPEG storage, resizing to the target network's input, and
//! the detection gate.

use std::fmt;
use std::sync::Arc;

use jpeg_encoder::{ColorType, Encoder, SamplingFactor};

use super::{PipelineError, Result};
use crate::raster::{quantize_value, Image, CHANNELS, PIXEL_MAX};

pub fn quantize_u8(image: &Image) -> Image {
    let mut out = image.clone();
    out.data_mut().iter_mut().for_each(|v| *v = quantize_value(*v));
    out
}

/// Baseline JPEG encode (4:2:0 chroma) followed by decode. The input is
/// quantised to 8 bits first.
pub fn jpeg_roundtrip(image: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(PipelineError::InvalidArgument(format!(
            "JPEG quality {quality} outside 1..=100"
        )));
    }
    let (w, h) = (image.width(), image.height());
    let (w16, h16) = match (u16::try_from(w), u16::try_from(h)) {
        (Ok(w16), Ok(h16)) if w16 > 0 && h16 > 0 => (w16, h16),
        _ => return Err(PipelineError::Codec(format!("cannot encode a {h}x{w} image as JPEG"))),
    };
    let rgb = image.to_rgb8();
    let mut buf = Vec::new();
    let mut encoder = Encoder::new(&mut buf, quality);
    encoder.set_sampling_factor(SamplingFactor::F_2_2);
    encoder
        .encode(&rgb, w16, h16, ColorType::Rgb)
        .map_err(|e| PipelineError::Codec(e.to_string()))?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(|e| PipelineError::Codec(e.to_string()))?
        .to_rgb8();
    if decoded.width() as usize != w || decoded.height() as usize != h {
        return Err(PipelineError::Codec("decoder changed the image size".into()));
    }
    Ok(Image::from_rgb8(h, w, decoded.as_raw())?)
}

/// Bilinear resize to `target_side x target_side`, half-pixel centres
/// (align-corners off), edge samples clamped.
pub fn resize(image: &Image, target_side: usize) -> Result<Image> {
    if target_side == 0 || image.height() == 0 || image.width() == 0 {
        return Err(PipelineError::InvalidArgument(format!(
            "cannot resize {}x{} to {target_side}",
            image.height(),
            image.width()
        )));
    }
    if image.height() == target_side && image.width() == target_side {
        return Ok(image.clone());
    }
    let ys = sample_positions(image.height(), target_side);
    let xs = sample_positions(image.width(), target_side);
    let mut out = Image::filled(target_side, target_side, 0.0);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..CHANNELS {
                let top = f64::from(image.get(y0, x0, c)) * (1.0 - fx) + f64::from(image.get(y0, x1, c)) * fx;
                let bottom = f64::from(image.get(y1, x0, c)) * (1.0 - fx) + f64::from(image.get(y1, x1, c)) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.set(oy, ox, c, (v as f32).clamp(0.0, PIXEL_MAX));
            }
        }
    }
    Ok(out)
}

fn sample_positions(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Face-detection stand-in. Implementations decide whether a (possibly
/// perturbed) image still counts as a detectable face.
pub trait Detector: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn detect(&self, image: &Image) -> std::result::Result<bool, String>;
}

/// Accepts every image.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassThrough;

impl Detector for PassThrough {
    fn name(&self) -> &str {
        "pass-through"
    }

    fn detect(&self, _image: &Image) -> std::result::Result<bool, String> {
        Ok(true)
    }
}

/// Accepts images whose pixel standard deviation reaches `min_std`; a crude
/// proxy for "there is still structure to detect".
#[derive(Debug, Clone, Copy)]
pub struct ContrastDetector {
    pub min_std: f32,
}

impl Detector for ContrastDetector {
    fn name(&self) -> &str {
        "contrast"
    }

    fn detect(&self, image: &Image) -> std::result::Result<bool, String> {
        let n = image.data().len();
        if n == 0 {
            return Err("empty image".into());
        }
        let mean = image.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
        let var = image.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n as f64;
        Ok(var.sqrt() >= f64::from(self.min_std))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateOutcome {
    Pass,
    Fail(String),
}

pub fn detect_gate(image: &Image, detector: &dyn Detector) -> GateOutcome {
    match detector.detect(image) {
        Ok(true) => GateOutcome::Pass,
        Ok(false) => GateOutcome::Fail(format!("{} detector found no face", detector.name())),
        Err(e) => GateOutcome::Fail(format!("{} detector error: {e}", detector.name())),
    }
}

#[derive(Debug, Clone)]
pub enum Transform {
    QuantizeU8,
    JpegRoundtrip { quality: u8 },
    Resize { side: usize },
    DetectGate(Arc<dyn Detector>),
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::QuantizeU8 => write!(f, "quantize_u8"),
            Transform::JpegRoundtrip { quality } => write!(f, "jpeg(q={quality})"),
            Transform::Resize { side } => write!(f, "resize({side})"),
            Transform::DetectGate(d) => write!(f, "detect_gate({})", d.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChainOutput {
    Image(Image),
    Gated { reason: String },
}

#[derive(Debug, Clone, Default)]
pub struct TransformChain {
    steps: Vec<Transform>,
}

impl TransformChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, step: Transform) -> Self {
        self.steps.push(step);
        self
    }

    pub fn steps(&self) -> &[Transform] {
        &self.steps
    }

    /// The storage-then-identify chain used for every transfer cell:
    /// `quantize_u8 -> jpeg (if any) -> resize (only when sizes differ) ->
    /// detect_gate`.
    pub fn cross_model(
        jpeg_quality: Option<u8>,
        source_size: usize,
        target_size: usize,
        detector: Arc<dyn Detector>,
    ) -> Self {
        let mut chain = Self::new().with(Transform::QuantizeU8);
        if let Some(quality) = jpeg_quality {
            chain = chain.with(Transform::JpegRoundtrip { quality });
        }
        if source_size != target_size {
            chain = chain.with(Transform::Resize { side: target_size });
        }
        chain.with(Transform::DetectGate(detector))
    }

    pub fn apply(&self, image: &Image) -> Result<ChainOutput> {
        let mut current = image.clone();
        for step in &self.steps {
            current = match step {
                Transform::QuantizeU8 => quantize_u8(&current),
                Transform::JpegRoundtrip { quality } => jpeg_roundtrip(&current, *quality)?,
                Transform::Resize { side } => resize(&current, *side)?,
                Transform::DetectGate(detector) => match detect_gate(&current, detector.as_ref()) {
                    GateOutcome::Pass => current,
                    GateOutcome::Fail(reason) => return Ok(ChainOutput::Gated { reason }),
                },
            };
        }
        Ok(ChainOutput::Image(current))
    }

    pub fn describe(&self) -> String {
        if self.steps.is_empty() {
            return "identity".into();
        }
        self.steps
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" -> ")
    }
}

impl From<crate::tensor::TensorError> for PipelineError {
    fn from(e: crate::tensor::TensorError) -> Self {
        PipelineError::Image(e)
    }
}
