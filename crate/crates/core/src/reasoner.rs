//! Language-model interface: target extraction, final yes/no inference, the
//! prompt templates, and a deterministic mock for offline runs.

use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::arbitration::normalize_label;
use crate::error::{Error, Result};
use crate::experts::encode_png_b64;
use crate::fixture::{GroundTruthObject, Scene};
use crate::geometry::{area_ratio, iou, BBox, ImageDims};
use crate::http::{post_json, Endpoint, HttpError};

pub const STAGE1_TEMPLATE: &str = include_str!("../assets/prompts/stage1_extract.txt");
pub const STAGE3_TEMPLATE: &str = include_str!("../assets/prompts/stage3_final.txt");
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

pub const CONFIRMED_PREFIX: &str = "✓ CONFIRMED: ";
pub const SUSPICIOUS_PREFIX: &str = "SUSPICIOUS: ";
pub const ZOOMED_SUFFIX: &str = " [zoomed]";
pub const NO_DETECTIONS: &str = "No objects detected.";

const CONDITIONAL_MARK: &str = "[Conditional] ";
const SUMMARY_HEADER: &str = "(Detection Visualization):\n";
const STAGE1_LEAD: &str = "Please analyze this image and the question: \"";
const QUESTION_LEAD: &str = "User Question: \"";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
    Unparseable,
}

impl Answer {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            Answer::Yes => Some(true),
            Answer::No => Some(false),
            Answer::Unparseable => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub answer: Answer,
    pub raw_text: String,
}

/// First whole-word `yes` or `no`, case-insensitive.
pub fn parse_yesno(text: &str) -> Verdict {
    let answer = text
        .split(|c: char| !c.is_alphanumeric())
        .find_map(|tok| {
            if tok.eq_ignore_ascii_case("yes") {
                Some(Answer::Yes)
            } else if tok.eq_ignore_ascii_case("no") {
                Some(Answer::No)
            } else {
                None
            }
        })
        .unwrap_or(Answer::Unparseable);
    Verdict {
        answer,
        raw_text: text.to_string(),
    }
}

/// Single-pass `{key}` substitution; unknown braces pass through untouched.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(i) = rest.find('{') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        for (k, v) in vars {
            if let Some(tail) = rest.strip_prefix('{').and_then(|r| r.strip_prefix(k)).and_then(|r| r.strip_prefix('}')) {
                out.push_str(v);
                rest = tail;
                continue 'scan;
            }
        }
        out.push('{');
        rest = &rest[1..];
    }
    out.push_str(rest);
    out
}

pub fn stage1_prompt(user_query: &str) -> String {
    fill(STAGE1_TEMPLATE, &[("user_query", user_query)])
}

/// Final-inference prompt. The conditional zoom entry is dropped when there
/// are no zooms; extra zooms are listed as IMAGE 4 onward.
pub fn stage3_prompt(detection_summary: &str, user_query: &str, zoom_labels: &[String]) -> String {
    let mut lines: Vec<String> = Vec::new();
    for line in STAGE3_TEMPLATE.split_inclusive('\n') {
        if !line.contains(CONDITIONAL_MARK) {
            lines.push(line.to_string());
            continue;
        }
        for (k, label) in zoom_labels.iter().enumerate() {
            let entry = line
                .replacen(CONDITIONAL_MARK, "", 1)
                .replacen("IMAGE 3", &format!("IMAGE {}", 3 + k), 1)
                .replace("{top_suspicious_label}", label);
            lines.push(entry);
        }
    }
    fill(
        &lines.concat(),
        &[("detection_summary_text", detection_summary), ("user_query", user_query)],
    )
}

/// Parses `{"objects": [...]}` out of a reply, tolerating text around the
/// outermost braces. Labels come back normalized and deduplicated.
pub fn parse_objects_reply(text: &str) -> Result<Vec<String>> {
    let malformed = || Error::MalformedExtraction(truncate(text, 120));
    let start = text.find('{').ok_or_else(malformed)?;
    let end = text.rfind('}').ok_or_else(malformed)?;
    if end < start {
        return Err(malformed());
    }
    let value: serde_json::Value = serde_json::from_str(&text[start..=end]).map_err(|_| malformed())?;
    let items = value.get("objects").and_then(|v| v.as_array()).ok_or_else(malformed)?;
    let mut out: Vec<String> = Vec::new();
    for item in items {
        let label = normalize_label(item.as_str().ok_or_else(malformed)?);
        if !label.is_empty() && !out.contains(&label) {
            out.push(label);
        }
    }
    Ok(out)
}

fn truncate(s: &str, n: usize) -> String {
    if s.chars().count() <= n {
        s.to_string()
    } else {
        s.chars().take(n).collect::<String>() + "..."
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasonerRequest {
    pub images: Vec<RgbImage>,
    pub prompt: String,
    pub temperature: f64,
}

pub trait Reasoner: Send + Sync {
    fn generate(&self, request: &ReasonerRequest) -> Result<String>;
}

/// Stage 1: asks the reasoner which objects the question depends on.
pub fn extract_targets(reasoner: &dyn Reasoner, image: &RgbImage, query: &str, temperature: f64) -> Result<Vec<String>> {
    let reply = reasoner.generate(&ReasonerRequest {
        images: vec![image.clone()],
        prompt: stage1_prompt(query),
        temperature,
    })?;
    parse_objects_reply(&reply)
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "there", "this", "that", "these", "those", "in", "on", "at", "of", "to", "any",
    "some", "image", "picture", "photo", "does", "do", "can", "you", "see", "contain", "contains", "visible", "what",
    "which", "where", "how", "many", "with", "and", "or", "it", "be", "have", "has", "shown", "present",
];

/// Labels from `vocabulary` mentioned in `query`, in order of appearance;
/// longer labels win over labels they contain. Falls back to the query's
/// content words when nothing in the vocabulary matches.
pub fn fallback_targets(query: &str, vocabulary: &[String]) -> Vec<String> {
    let words: Vec<String> = query
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let mut vocab: Vec<Vec<String>> = vocabulary
        .iter()
        .map(|l| normalize_label(l).split(' ').map(str::to_string).collect::<Vec<_>>())
        .filter(|toks| !toks.is_empty() && !toks[0].is_empty())
        .collect();
    vocab.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));

    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let hit = vocab.iter().find(|toks| words.len() - i >= toks.len() && words[i..i + toks.len()] == toks[..]);
        match hit {
            Some(toks) => {
                let label = toks.join(" ");
                if !out.contains(&label) {
                    out.push(label);
                }
                i += toks.len();
            }
            None => i += 1,
        }
    }
    if out.is_empty() {
        for w in words {
            if !STOPWORDS.contains(&w.as_str()) && !out.contains(&w) {
                out.push(w);
            }
        }
    }
    out
}

/// The object a yes/no existence question asks about: the noun phrase after
/// `is there a|an|any`, else the first vocabulary label mentioned.
pub fn queried_label(question: &str, vocabulary: &[String]) -> Option<String> {
    let q = question.to_lowercase();
    if let Some(pos) = q.find("is there ") {
        let mut rest = &q[pos + "is there ".len()..];
        for article in ["an ", "a ", "any "] {
            if let Some(r) = rest.strip_prefix(article) {
                rest = r;
                break;
            }
        }
        let end = [" in the ", " in this ", " on the ", "?"]
            .iter()
            .filter_map(|m| rest.find(m))
            .min()
            .unwrap_or(rest.len());
        let label = normalize_label(&rest[..end]);
        if !label.is_empty() {
            return Some(label);
        }
    }
    fallback_targets(question, vocabulary).into_iter().find(|l| vocabulary.iter().any(|v| normalize_label(v) == *l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SummaryKind {
    Confirmed,
    Suspicious,
}

/// One parsed line of the detection summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryEntry {
    pub kind: SummaryKind,
    pub label: String,
    pub confidence: f64,
    pub bbox: BBox,
    pub zoomed: bool,
}

pub fn parse_summary_line(line: &str) -> Option<SummaryEntry> {
    let (kind, rest) = if let Some(r) = line.strip_prefix(CONFIRMED_PREFIX) {
        (SummaryKind::Confirmed, r)
    } else {
        (SummaryKind::Suspicious, line.strip_prefix(SUSPICIOUS_PREFIX)?)
    };
    let (rest, zoomed) = match rest.strip_suffix(ZOOMED_SUFFIX) {
        Some(r) => (r, true),
        None => (rest, false),
    };
    let (label, rest) = rest.rsplit_once(" (conf ")?;
    let (conf, coords) = rest.split_once(") at [")?;
    let coords = coords.strip_suffix(']')?;
    let v: Vec<f64> = coords.split(',').map(|c| c.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().ok()?;
    if v.len() != 4 {
        return None;
    }
    Some(SummaryEntry {
        kind,
        label: normalize_label(label),
        confidence: conf.parse().ok()?,
        bbox: BBox::new(v[0], v[1], v[2], v[3]).ok()?,
        zoomed,
    })
}

/// Summary entries embedded in a final-inference prompt.
pub fn summary_entries(prompt: &str) -> Vec<SummaryEntry> {
    let Some(start) = prompt.find(SUMMARY_HEADER) else { return Vec::new() };
    let body = &prompt[start + SUMMARY_HEADER.len()..];
    let body = body.split("\n\nImage Guide:").next().unwrap_or("");
    body.lines().filter_map(parse_summary_line).collect()
}

fn quoted_after<'a>(prompt: &'a str, lead: &str) -> Option<&'a str> {
    let start = prompt.find(lead)? + lead.len();
    let rest = &prompt[start..];
    // The question itself may contain quotes; the quote closing the line wins.
    let line_end = rest.find('\n').unwrap_or(rest.len());
    rest[..line_end].rfind('"').map(|e| &rest[..e])
}

/// Knobs of the mock's perception model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockPerception {
    /// Objects at least this large (relative area) are seen in the original
    /// image without help. Zero sees everything.
    pub global_visibility: f64,
    /// IoU at which a region counts as clearly showing an object.
    pub evidence_iou: f64,
}

impl Default for MockPerception {
    fn default() -> Self {
        Self {
            global_visibility: 0.10,
            evidence_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub dims: ImageDims,
    pub objects: Vec<GroundTruthObject>,
}

impl SceneTruth {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let objects = scene
            .ground_truth
            .clone()
            .ok_or_else(|| Error::MissingGroundTruth(scene.image_id.clone()))?;
        Ok(Self { dims: scene.dims()?, objects })
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for o in &self.objects {
            let l = normalize_label(&o.label);
            if !out.contains(&l) {
                out.push(l);
            }
        }
        out
    }
}

/// Final answer of the mock for a stage-3 prompt. The first matching rule
/// wins:
///
/// 1. a zoomed region of the queried label shows a matching object: yes;
/// 2. confirmed regions of the label capture attention: yes iff one of them
///    actually covers some object;
/// 3. the object is large enough to see in the original image: yes;
/// 4. suspicious regions of the label that show nothing: no;
/// 5. nothing detected: no.
pub fn mock_answer(prompt: &str, truth: &SceneTruth, perception: &MockPerception) -> String {
    let vocab = truth.labels();
    let entries = summary_entries(prompt);
    let question = quoted_after(prompt, QUESTION_LEAD).unwrap_or("");
    let mut known = vocab.clone();
    known.extend(entries.iter().map(|e| e.label.clone()));
    let Some(label) = queried_label(question, &known) else {
        return "No (Rule 4: no detection)".into();
    };

    let same_label: Vec<&GroundTruthObject> = truth.objects.iter().filter(|o| normalize_label(&o.label) == label).collect();
    let shows = |b: &BBox, objs: &[&GroundTruthObject]| objs.iter().any(|o| iou(b, &o.bbox) >= perception.evidence_iou);
    let all: Vec<&GroundTruthObject> = truth.objects.iter().collect();
    let mine: Vec<&SummaryEntry> = entries.iter().filter(|e| e.label == label).collect();

    if mine.iter().any(|e| e.zoomed && shows(&e.bbox, &same_label)) {
        return "Yes (Rule 1: object visible in zoomed view)".into();
    }
    let confirmed: Vec<&&SummaryEntry> = mine.iter().filter(|e| e.kind == SummaryKind::Confirmed).collect();
    if !confirmed.is_empty() {
        return if confirmed.iter().any(|e| shows(&e.bbox, &all)) {
            "Yes (Rule 2: confirmed green box)".into()
        } else {
            "No (Rule 2: confirmed region shows no such object)".into()
        };
    }
    let visible = same_label
        .iter()
        .filter_map(|o| area_ratio(&o.bbox, truth.dims).ok())
        .any(|a| a >= perception.global_visibility);
    if visible {
        return "Yes (Rule 1: visible in original image)".into();
    }
    if mine.iter().any(|e| e.zoomed) {
        return "No (Rule 4 override: no visual evidence in ROI)".into();
    }
    if !mine.is_empty() {
        return "No (Rule 3: suspicious region not supported)".into();
    }
    "No (Rule 4: no detection)".into()
}

/// Rule-based stand-in for a vision-language model. Answers stage-1 prompts
/// with the queried object and stage-3 prompts via [`mock_answer`].
#[derive(Debug, Clone)]
pub struct MockReasoner {
    truth: Option<SceneTruth>,
    vocabulary: Vec<String>,
    perception: MockPerception,
}

impl MockReasoner {
    pub fn new(truth: Option<SceneTruth>, vocabulary: Vec<String>, perception: MockPerception) -> Self {
        Self { truth, vocabulary, perception }
    }

    pub fn for_scene(scene: &Scene, perception: MockPerception) -> Self {
        Self {
            truth: SceneTruth::from_scene(scene).ok(),
            vocabulary: scene.vocabulary(),
            perception,
        }
    }
}

impl Reasoner for MockReasoner {
    fn generate(&self, request: &ReasonerRequest) -> Result<String> {
        if request.prompt.starts_with(STAGE1_LEAD) {
            let question = quoted_after(&request.prompt, STAGE1_LEAD).unwrap_or("");
            let objects: Vec<String> = queried_label(question, &self.vocabulary).into_iter().collect();
            return Ok(serde_json::json!({ "objects": objects }).to_string());
        }
        let truth = self
            .truth
            .as_ref()
            .ok_or_else(|| Error::MissingGroundTruth("mock reasoner scene".into()))?;
        Ok(mock_answer(&request.prompt, truth, &self.perception))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub images_b64: Vec<String>,
    pub prompt: String,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

/// Client for a model served over the `/generate` wire protocol.
#[derive(Debug, Clone)]
pub struct HttpReasoner {
    endpoint: Endpoint,
    timeout: Duration,
}

impl HttpReasoner {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self> {
        let endpoint = Endpoint::parse(base_url, "/generate").map_err(Error::InvalidConfig)?;
        Ok(Self { endpoint, timeout })
    }
}

impl Reasoner for HttpReasoner {
    fn generate(&self, request: &ReasonerRequest) -> Result<String> {
        let images_b64 = request.images.iter().map(encode_png_b64).collect::<Result<Vec<_>>>()?;
        let body = GenerateRequest {
            images_b64,
            prompt: request.prompt.clone(),
            temperature: request.temperature,
        };
        let resp: GenerateResponse = post_json(&self.endpoint, &body, self.timeout).map_err(|e| match e {
            HttpError::Decode(reason) => Error::MalformedResponse {
                source_name: "reasoner".into(),
                reason,
            },
            other => Error::ReasonerUnavailable(other.to_string()),
        })?;
        Ok(resp.text)
    }
}

/// Decodes a base64 PNG/JPEG payload, as carried by the wire protocols.
pub fn decode_image_b64(payload: &str) -> Result<RgbImage> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(payload)
        .map_err(|e| Error::MalformedResponse {
            source_name: "image payload".into(),
            reason: e.to_string(),
        })?;
    Ok(image::load_from_memory(&bytes)?.to_rgb8())
}
