//! Grounding expert adapters and the spatial noise injector.

use std::collections::HashMap;
use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arbitration::{normalize_label, ExpertId, Proposal};
use crate::error::{Error, Result};
use crate::fixture::{Detection, Scene};
use crate::geometry::{iou, BBox, ImageDims};
use crate::http::{post_json, Endpoint, HttpError};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.3;
pub const DEFAULT_NOISE_SEED: u64 = 42;
pub const NOISE_ATTEMPTS: usize = 1000;

/// Body of `POST /detect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRequest {
    pub image_b64: String,
    pub queries: Vec<String>,
    pub score_threshold: f64,
    /// The concatenated text query, for detectors that take a single string.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResponse {
    pub detections: Vec<WireDetection>,
    pub image_size: [u32; 2],
}

/// Detection as it crosses the wire; validated into [`Detection`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

/// `a <t1>. a <t2>. ...` over normalized labels.
pub fn build_detection_query(targets: &[String]) -> Result<String> {
    let labels: Vec<String> = targets.iter().map(|t| normalize_label(t)).filter(|t| !t.is_empty()).collect();
    if labels.is_empty() {
        return Err(Error::EmptyTargets);
    }
    Ok(labels.iter().map(|l| format!("a {l}.")).collect::<Vec<_>>().join(" "))
}

pub trait ExpertAdapter: Send + Sync {
    fn slot(&self) -> ExpertId;

    /// Raw detections for `targets`; the threshold is a hint the adapter may
    /// apply early. `propose` filters again regardless.
    fn detect(&self, image_id: &str, image: &RgbImage, targets: &[String], score_threshold: f64) -> Result<Vec<Detection>>;
}

/// Proposals with score strictly above `tau_score`, sorted by score
/// descending then box.
pub fn propose(
    expert: &dyn ExpertAdapter,
    image_id: &str,
    image: &RgbImage,
    targets: &[String],
    tau_score: f64,
) -> Result<Vec<Proposal>> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let slot = expert.slot();
    let mut out = Vec::new();
    for d in expert.detect(image_id, image, targets, tau_score)? {
        if d.score > tau_score {
            let p = Proposal::new(d.bbox, &d.label, d.score, slot).map_err(|e| Error::MalformedResponse {
                source_name: format!("expert {slot}"),
                reason: e.to_string(),
            })?;
            out.push(p);
        }
    }
    out.sort_by(|x, y| y.score.total_cmp(&x.score).then_with(|| x.bbox.lex_cmp(&y.bbox)));
    Ok(out)
}

/// Offline expert backed by the detections recorded in scene fixtures.
#[derive(Debug, Clone)]
pub struct FixtureExpert {
    slot: ExpertId,
    by_image: HashMap<String, Vec<Detection>>,
}

impl FixtureExpert {
    pub fn new(slot: ExpertId, by_image: HashMap<String, Vec<Detection>>) -> Self {
        Self { slot, by_image }
    }

    pub fn from_scenes(slot: ExpertId, scenes: &[Scene]) -> Self {
        let mut by_image: HashMap<String, Vec<Detection>> = HashMap::new();
        for s in scenes {
            by_image.entry(s.image_id.clone()).or_default().extend(s.experts.get(slot).iter().cloned());
        }
        Self { slot, by_image }
    }

    /// Same detections served from the other slot.
    pub fn relabeled(&self, slot: ExpertId) -> Self {
        Self { slot, by_image: self.by_image.clone() }
    }
}

impl ExpertAdapter for FixtureExpert {
    fn slot(&self) -> ExpertId {
        self.slot
    }

    fn detect(&self, image_id: &str, _image: &RgbImage, targets: &[String], _score_threshold: f64) -> Result<Vec<Detection>> {
        let wanted: Vec<String> = targets.iter().map(|t| normalize_label(t)).collect();
        Ok(self
            .by_image
            .get(image_id)
            .map(|dets| {
                dets.iter()
                    .filter(|d| wanted.contains(&normalize_label(&d.label)))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default())
    }
}

/// Client for a detector served over the `/detect` wire protocol.
#[derive(Debug, Clone)]
pub struct HttpExpert {
    slot: ExpertId,
    endpoint: Endpoint,
    timeout: Duration,
}

impl HttpExpert {
    pub fn new(slot: ExpertId, base_url: &str, timeout: Duration) -> Result<Self> {
        let endpoint = Endpoint::parse(base_url, "/detect").map_err(Error::InvalidConfig)?;
        Ok(Self { slot, endpoint, timeout })
    }

    fn name(&self) -> String {
        format!("expert {}", self.slot)
    }
}

pub fn encode_png_b64(image: &RgbImage) -> Result<String> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

/// Checks a detector reply against the image it was asked about. Boxes
/// spilling past the border are clipped; boxes with no area inside are
/// dropped.
pub fn validate_detection_response(resp: DetectionResponse, dims: ImageDims, source_name: &str) -> Result<Vec<Detection>> {
    let malformed = |reason: String| Error::MalformedResponse {
        source_name: source_name.to_string(),
        reason,
    };
    if resp.image_size != [dims.width, dims.height] {
        return Err(malformed(format!(
            "image_size {:?} does not match {}x{}",
            resp.image_size, dims.width, dims.height
        )));
    }
    let mut out = Vec::with_capacity(resp.detections.len());
    for d in resp.detections {
        if normalize_label(&d.label).is_empty() {
            return Err(malformed("detection with empty label".into()));
        }
        if !(0.0..=1.0).contains(&d.score) {
            return Err(malformed(format!("score {} outside [0, 1]", d.score)));
        }
        let [x1, y1, x2, y2] = d.bbox;
        let b = BBox::new(x1, y1, x2, y2).map_err(|e| malformed(e.to_string()))?;
        if let Some(clipped) = b.clamp_to(dims) {
            out.push(Detection { label: d.label, bbox: clipped, score: d.score });
        }
    }
    Ok(out)
}

impl ExpertAdapter for HttpExpert {
    fn slot(&self) -> ExpertId {
        self.slot
    }

    fn detect(&self, _image_id: &str, image: &RgbImage, targets: &[String], score_threshold: f64) -> Result<Vec<Detection>> {
        let dims = ImageDims::new(image.width(), image.height())?;
        let queries: Vec<String> = targets.iter().map(|t| normalize_label(t)).collect();
        let req = DetectionRequest {
            image_b64: encode_png_b64(image)?,
            prompt: Some(build_detection_query(&queries)?),
            queries,
            score_threshold,
        };
        let resp: DetectionResponse = post_json(&self.endpoint, &req, self.timeout).map_err(|e| match e {
            HttpError::Decode(reason) => Error::MalformedResponse { source_name: self.name(), reason },
            other => Error::ExpertUnavailable { expert: self.slot.to_string(), reason: other.to_string() },
        })?;
        validate_detection_response(resp, dims, &self.name())
    }
}

/// Seed for one noise stream, derived from the run seed and a context key.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Replaces every box with a same-size, in-bounds translation whose IoU with
/// the original is below `max_iou`. Translations are drawn uniformly over all
/// in-bounds placements; after `NOISE_ATTEMPTS` misses the farthest corner
/// placement is used, which minimizes IoU over all placements.
pub fn inject_noise(proposals: &[Proposal], max_iou: f64, dims: ImageDims, rng_seed: u64) -> Result<Vec<Proposal>> {
    if !(0.0..1.0).contains(&max_iou) {
        return Err(Error::InvalidConfig(format!("noise max_iou {max_iou} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (w_img, h_img) = (dims.width as f64, dims.height as f64);
    let mut out = Vec::with_capacity(proposals.len());
    for (index, p) in proposals.iter().enumerate() {
        let b = p.bbox;
        let (w, h) = (b.width(), b.height());
        if w > w_img || h > h_img {
            return Err(Error::NoisePlacementImpossible { index, max_iou });
        }
        let (span_x, span_y) = (w_img - w, h_img - h);
        let at = |x: f64, y: f64| BBox::new(x, y, x + w, y + h);

        let mut placed = None;
        for _ in 0..NOISE_ATTEMPTS {
            let x = if span_x > 0.0 { rng.random_range(0.0..=span_x) } else { 0.0 };
            let y = if span_y > 0.0 { rng.random_range(0.0..=span_y) } else { 0.0 };
            let cand = at(x, y)?;
            if iou(&b, &cand) < max_iou {
                placed = Some(cand);
                break;
            }
        }
        let placed = match placed {
            Some(c) => c,
            None => {
                let mut best: Option<(f64, BBox)> = None;
                for (x, y) in [(0.0, 0.0), (span_x, 0.0), (0.0, span_y), (span_x, span_y)] {
                    let cand = at(x, y)?;
                    let v = iou(&b, &cand);
                    if best.is_none_or(|(bv, _)| v < bv) {
                        best = Some((v, cand));
                    }
                }
                match best {
                    Some((v, c)) if v < max_iou => c,
                    _ => return Err(Error::NoisePlacementImpossible { index, max_iou }),
                }
            }
        };
        out.push(Proposal { bbox: placed, ..p.clone() });
    }
    Ok(out)
}

/// Whether some in-bounds translation of `b` has IoU below `max_iou`.
pub fn noise_feasible(b: &BBox, max_iou: f64, dims: ImageDims) -> bool {
    let (w, h) = (b.width(), b.height());
    let (span_x, span_y) = (dims.width as f64 - w, dims.height as f64 - h);
    if span_x < 0.0 || span_y < 0.0 {
        return false;
    }
    [(0.0, 0.0), (span_x, 0.0), (0.0, span_y), (span_x, span_y)]
        .iter()
        .filter_map(|&(x, y)| BBox::new(x, y, x + w, y + h).ok())
        .any(|c| iou(b, &c) < max_iou)
}
