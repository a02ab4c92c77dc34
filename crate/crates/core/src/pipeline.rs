//! End-to-end orchestration: extract targets, query both experts, arbitrate,
//! render, and ask the reasoner, recording every step in a trace.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arbitration::{
    arbitrate, select_budgeted, ArbitrationConfig, ConsensusPartition, ExpertId, Proposal, SelectionResult,
};
use crate::error::{Error, Result};
use crate::experts::{
    derive_seed, inject_noise, propose, ExpertAdapter, FixtureExpert, DEFAULT_NOISE_SEED, DEFAULT_SCORE_THRESHOLD,
};
use crate::fixture::Scene;
use crate::geometry::{ImageDims, PixelRect};
use crate::par::{self, Execution};
use crate::reasoner::{
    fallback_targets, parse_objects_reply, parse_yesno, stage1_prompt, stage3_prompt, Answer, MockPerception,
    MockReasoner, Reasoner, ReasonerRequest, Verdict, CONFIRMED_PREFIX, DEFAULT_TEMPERATURE, NO_DETECTIONS,
    SUSPICIOUS_PREFIX, ZOOMED_SUFFIX,
};
use crate::rendering::{render_views, resize_long_edge, RenderConfig, RenderStyle, RenderedViewSet, ZoomFailure};

pub const TRACE_SCHEMA: u32 = 1;
pub const CONFIG_ENV: &str = "ACTIVE_LOOK_CONFIG";

/// How expert proposals reach the reasoner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Conflict-aware arbitration with budgeted zooms.
    #[default]
    ActiveLook,
    /// Every proposal highlighted as confirmed, no zooms.
    TrustAll,
    /// Experts not consulted; the reasoner sees the plain image.
    NoProposals,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::ActiveLook, Policy::TrustAll, Policy::NoProposals];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::ActiveLook => "active_look",
            Policy::TrustAll => "trust_all",
            Policy::NoProposals => "no_proposals",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub max_iou: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { enabled: false, max_iou: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSettings {
    pub score_threshold_a: f64,
    pub score_threshold_b: f64,
    /// Base URL of a `/detect` server for slot A; fixtures are used when unset.
    pub endpoint_a: Option<String>,
    pub endpoint_b: Option<String>,
    pub timeout_secs: f64,
}

impl Default for ExpertSettings {
    fn default() -> Self {
        Self {
            score_threshold_a: DEFAULT_SCORE_THRESHOLD,
            score_threshold_b: DEFAULT_SCORE_THRESHOLD,
            endpoint_a: None,
            endpoint_b: None,
            timeout_secs: 60.0,
        }
    }
}

impl ExpertSettings {
    pub fn threshold(&self, slot: ExpertId) -> f64 {
        match slot {
            ExpertId::A => self.score_threshold_a,
            ExpertId::B => self.score_threshold_b,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonerSettings {
    pub temperature: f64,
    /// Base URL of a `/generate` server.
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    pub mock: MockPerception,
}

impl Default for ReasonerSettings {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            endpoint: None,
            timeout_secs: 120.0,
            mock: MockPerception::default(),
        }
    }
}

impl ReasonerSettings {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub policy: Policy,
    pub zoom_scale: f64,
    pub target_long_edge: u32,
    pub rng_seed: u64,
    pub arbitration: ArbitrationConfig,
    pub style: RenderStyle,
    pub experts: ExpertSettings,
    pub reasoner: ReasonerSettings,
    pub noise: NoiseConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            policy: Policy::default(),
            zoom_scale: 1.5,
            target_long_edge: 384,
            rng_seed: DEFAULT_NOISE_SEED,
            arbitration: ArbitrationConfig::default(),
            style: RenderStyle::default(),
            experts: ExpertSettings::default(),
            reasoner: ReasonerSettings::default(),
            noise: NoiseConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.arbitration.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(1.0..=4.0).contains(&self.zoom_scale) {
            return bad(format!("zoom_scale {} outside [1, 4]", self.zoom_scale));
        }
        if self.target_long_edge < 64 {
            return bad(format!("target_long_edge {} below 64", self.target_long_edge));
        }
        for (name, t) in [("score_threshold_a", self.experts.score_threshold_a), ("score_threshold_b", self.experts.score_threshold_b)] {
            if !(0.0..1.0).contains(&t) {
                return bad(format!("{name} {t} outside [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.noise.max_iou) {
            return bad(format!("noise.max_iou {} outside [0, 1)", self.noise.max_iou));
        }
        if !(self.reasoner.temperature >= 0.0) {
            return bad(format!("temperature {} is negative", self.reasoner.temperature));
        }
        if !(self.experts.timeout_secs > 0.0 && self.reasoner.timeout_secs > 0.0) {
            return bad("timeouts must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, else the file named by `ACTIVE_LOOK_CONFIG`, else the
    /// defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let resolved: Option<PathBuf> = path
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
        match resolved {
            Some(p) => {
                let text = fs::read_to_string(&p)
                    .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml_str(&text)
            }
            None => Ok(Self::default()),
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            zoom_scale: self.zoom_scale,
            target_long_edge: self.target_long_edge,
            style: self.style.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenLedger {
    pub round1_visual: u64,
    pub round2_visual: u64,
    pub input_text_estimate: u64,
    pub output_text_estimate: u64,
}

impl TokenLedger {
    pub fn total_input(&self) -> u64 {
        self.round1_visual + self.round2_visual + self.input_text_estimate
    }
}

/// ceil(characters / 4).
pub fn estimate_text_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extract,
    Propose,
    Arbitrate,
    Select,
    Render,
    Reason,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Extract, Stage::Propose, Stage::Arbitrate, Stage::Select, Stage::Render, Stage::Reason];

    fn key(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::Propose => "propose",
            Stage::Arbitrate => "arbitrate",
            Stage::Select => "select",
            Stage::Render => "render",
            Stage::Reason => "reason",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Skipped,
    Failed,
    NotReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: Stage,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoomMeta {
    pub label: String,
    pub source_box: [f64; 4],
    pub disagreement: f64,
    pub window: PixelRect,
    pub size: (u32, u32),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewsMeta {
    pub global_full_size: (u32, u32),
    pub global_view_size: (u32, u32),
    pub zooms: Vec<ZoomMeta>,
    pub zoom_failures: Vec<ZoomFailure>,
    pub per_view_cost: u64,
    pub total_visual_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_file: Option<String>,
}

impl ViewsMeta {
    fn of(views: &RenderedViewSet) -> Self {
        Self {
            global_full_size: views.global_full.dimensions(),
            global_view_size: views.global_view.dimensions(),
            zooms: views
                .zoom_views
                .iter()
                .map(|z| ZoomMeta {
                    label: z.source.proposal.label.clone(),
                    source_box: z.source.proposal.bbox.to_array(),
                    disagreement: z.source.disagreement,
                    window: z.window,
                    size: z.image.dimensions(),
                    file: None,
                })
                .collect(),
            zoom_failures: views.zoom_failures.clone(),
            per_view_cost: views.per_view_cost,
            total_visual_tokens: views.total_visual_tokens,
            global_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceFlags {
    pub empty_targets: bool,
    pub empty_proposals: bool,
    pub extraction_fallback: bool,
    pub noise_enabled: bool,
    /// Doubtful regions left unzoomed, by budget or render failure.
    pub zoom_skips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub schema: u32,
    pub trace_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    pub image_id: String,
    pub image_size: (u32, u32),
    pub query: String,
    pub policy: Policy,
    pub targets: Vec<String>,
    pub proposals_a: Vec<Proposal>,
    pub proposals_b: Vec<Proposal>,
    pub provisional_gamma: Option<f64>,
    pub provisional_tau: Option<f64>,
    pub partition: Option<ConsensusPartition>,
    pub selection: Option<SelectionResult>,
    pub views: Option<ViewsMeta>,
    pub detection_summary: Option<String>,
    pub prompts: Vec<String>,
    pub replies: Vec<String>,
    pub verdict: Option<Verdict>,
    pub ledger: TokenLedger,
    pub stages: Vec<StageEntry>,
    pub flags: TraceFlags,
    pub error: Option<String>,
    /// Wall-clock milliseconds per stage; the only nondeterministic field.
    pub timings_ms: BTreeMap<String, f64>,
}

impl PipelineTrace {
    fn new(trace_id: String, input: &RunInput<'_>, policy: Policy, dims: (u32, u32)) -> Self {
        Self {
            schema: TRACE_SCHEMA,
            trace_id,
            item_id: input.item_id.map(str::to_string),
            image_id: input.image_id.to_string(),
            image_size: dims,
            query: input.query.to_string(),
            policy,
            targets: Vec::new(),
            proposals_a: Vec::new(),
            proposals_b: Vec::new(),
            provisional_gamma: None,
            provisional_tau: None,
            partition: None,
            selection: None,
            views: None,
            detection_summary: None,
            prompts: Vec::new(),
            replies: Vec::new(),
            verdict: None,
            ledger: TokenLedger::default(),
            stages: Stage::ALL
                .iter()
                .map(|&stage| StageEntry { stage, status: StageStatus::NotReached, note: None })
                .collect(),
            flags: TraceFlags::default(),
            error: None,
            timings_ms: BTreeMap::new(),
        }
    }

    fn mark(&mut self, stage: Stage, status: StageStatus, note: Option<String>, started: Instant) {
        if let Some(e) = self.stages.iter_mut().find(|e| e.stage == stage) {
            e.status = status;
            e.note = note;
        }
        self.timings_ms.insert(stage.key().to_string(), started.elapsed().as_secs_f64() * 1e3);
    }

    /// Pretty JSON with timings removed, for byte-level comparisons.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut t = self.clone();
        t.timings_ms.clear();
        Ok(serde_json::to_string_pretty(&t)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn zoom_count(&self) -> usize {
        self.views.as_ref().map_or(0, |v| v.zooms.len())
    }
}

/// One line per region: confirmed first by confidence, then suspicious by
/// disagreement, with zoomed ones marked.
pub fn summarize_detections(partition: &ConsensusPartition, selection: &SelectionResult) -> String {
    let coords = |b: &crate::geometry::BBox| {
        let r = |v: f64| v.round() as i64;
        format!("[{},{},{},{}]", r(b.x1()), r(b.y1()), r(b.x2()), r(b.y2()))
    };
    let mut trusted: Vec<_> = partition.trusted.iter().collect();
    trusted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut doubtful: Vec<_> = partition.doubtful.iter().collect();
    doubtful.sort_by(|a, b| a.priority_cmp(b));

    let mut lines = Vec::new();
    for t in trusted {
        lines.push(format!("{CONFIRMED_PREFIX}{} (conf {:.2}) at {}", t.label, t.score, coords(&t.bbox)));
    }
    for d in doubtful {
        let zoomed = selection.selected.iter().any(|s| s.proposal == d.proposal);
        lines.push(format!(
            "{SUSPICIOUS_PREFIX}{} (conf {:.2}) at {}{}",
            d.proposal.label,
            d.proposal.score,
            coords(&d.proposal.bbox),
            if zoomed { ZOOMED_SUFFIX } else { "" }
        ));
    }
    if lines.is_empty() {
        NO_DETECTIONS.to_string()
    } else {
        lines.join("\n")
    }
}

pub struct RunInput<'a> {
    pub image_id: &'a str,
    pub item_id: Option<&'a str>,
    pub image: &'a RgbImage,
    pub query: &'a str,
    /// Known labels for target extraction when the reasoner's reply is unusable.
    pub vocabulary: &'a [String],
}

pub struct Adapters<'a> {
    pub expert_a: &'a dyn ExpertAdapter,
    pub expert_b: &'a dyn ExpertAdapter,
    pub reasoner: &'a dyn Reasoner,
}

pub struct RunOutput {
    pub verdict: Verdict,
    pub trace: PipelineTrace,
    pub views: RenderedViewSet,
}

#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub trace: PipelineTrace,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run {} failed: {}", self.trace.trace_id, self.error)
    }
}

impl std::error::Error for RunFailure {}

pub fn trace_id(image: &RgbImage, query: &str, cfg: &PipelineConfig) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    h.update((query.len() as u64).to_le_bytes());
    h.update(query.as_bytes());
    h.update(serde_json::to_vec(cfg).unwrap_or_default());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// One full pass for a single image and question.
pub fn run(input: &RunInput<'_>, adapters: &Adapters<'_>, cfg: &PipelineConfig, exec: Execution) -> Result<RunOutput, Box<RunFailure>> {
    let dims = input.image.dimensions();
    let mut trace = PipelineTrace::new(trace_id(input.image, input.query, cfg), input, cfg.policy, dims);
    trace.flags.noise_enabled = cfg.noise.enabled && cfg.policy != Policy::NoProposals;
    macro_rules! fail {
        ($stage:expr, $started:expr, $err:expr) => {{
            let error: Error = $err;
            trace.error = Some(error.to_string());
            trace.mark($stage, StageStatus::Failed, Some(error.to_string()), $started);
            return Err(Box::new(RunFailure { error, trace }));
        }};
    }

    let cost = cfg.arbitration.per_view_cost;
    let original_view = resize_long_edge(input.image, cfg.target_long_edge);

    // Stage 1: targets.
    let t0 = Instant::now();
    let prompt1 = stage1_prompt(input.query);
    let reply1 = match adapters.reasoner.generate(&ReasonerRequest {
        images: vec![original_view.clone()],
        prompt: prompt1.clone(),
        temperature: cfg.reasoner.temperature,
    }) {
        Ok(r) => r,
        Err(e) => fail!(Stage::Extract, t0, e),
    };
    trace.ledger.round1_visual = cost;
    trace.ledger.input_text_estimate += estimate_text_tokens(&prompt1);
    trace.ledger.output_text_estimate += estimate_text_tokens(&reply1);
    trace.prompts.push(prompt1);
    trace.replies.push(reply1.clone());
    let note = match parse_objects_reply(&reply1) {
        Ok(t) => {
            trace.targets = t;
            None
        }
        Err(e) => {
            trace.flags.extraction_fallback = true;
            trace.targets = fallback_targets(input.query, input.vocabulary);
            Some(format!("{e}; fell back to query keywords"))
        }
    };
    trace.flags.empty_targets = trace.targets.is_empty();
    trace.mark(Stage::Extract, StageStatus::Completed, note, t0);

    // Stage 2: proposals.
    let t0 = Instant::now();
    if cfg.policy == Policy::NoProposals || trace.targets.is_empty() {
        let why = if trace.targets.is_empty() { "no targets" } else { "policy ignores experts" };
        trace.mark(Stage::Propose, StageStatus::Skipped, Some(why.into()), t0);
    } else {
        let targets = &trace.targets;
        let ask = |e: &dyn ExpertAdapter| propose(e, input.image_id, input.image, targets, cfg.experts.threshold(e.slot()));
        let (ra, rb) = par::join(exec, || ask(adapters.expert_a), || ask(adapters.expert_b));
        let (mut pa, mut pb) = match (ra, rb) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => fail!(Stage::Propose, t0, e),
        };
        if cfg.noise.enabled {
            let dims = match ImageDims::new(dims.0, dims.1) {
                Ok(d) => d,
                Err(e) => fail!(Stage::Propose, t0, e),
            };
            for (set, slot) in [(&mut pa, "A"), (&mut pb, "B")] {
                let seed = derive_seed(cfg.rng_seed, &[input.image_id, slot]);
                match inject_noise(set, cfg.noise.max_iou, dims, seed) {
                    Ok(shifted) => *set = shifted,
                    Err(e) => fail!(Stage::Propose, t0, e),
                }
            }
        }
        trace.proposals_a = pa;
        trace.proposals_b = pb;
        trace.mark(Stage::Propose, StageStatus::Completed, None, t0);
    }
    trace.flags.empty_proposals = trace.proposals_a.is_empty() && trace.proposals_b.is_empty();

    // Stage 3: partition and zoom selection.
    let t0 = Instant::now();
    let partition = match cfg.policy {
        _ if trace.flags.empty_proposals => ConsensusPartition::default(),
        Policy::ActiveLook => {
            let p = arbitrate(&trace.proposals_a, &trace.proposals_b, &cfg.arbitration);
            trace.provisional_gamma = Some(p.provisional_gamma);
            trace.provisional_tau = Some(cfg.arbitration.tau_base);
            p
        }
        Policy::TrustAll => ConsensusPartition::naive_union(&trace.proposals_a, &trace.proposals_b),
        Policy::NoProposals => ConsensusPartition::default(),
    };
    let status = if trace.flags.empty_proposals { StageStatus::Skipped } else { StageStatus::Completed };
    trace.mark(Stage::Arbitrate, status, None, t0);

    let t0 = Instant::now();
    let selection = if cfg.policy == Policy::ActiveLook && !partition.doubtful.is_empty() {
        let s = select_budgeted(&partition, &cfg.arbitration);
        trace.mark(Stage::Select, StageStatus::Completed, None, t0);
        s
    } else {
        trace.mark(Stage::Select, StageStatus::Skipped, Some("no doubtful regions".into()), t0);
        SelectionResult::default()
    };

    // Rendering.
    let t0 = Instant::now();
    let views = render_views(input.image, &partition, &selection, cost, &cfg.render_config());
    trace.flags.zoom_skips = selection.skipped.len() + views.zoom_failures.len();
    trace.views = Some(ViewsMeta::of(&views));
    trace.mark(Stage::Render, StageStatus::Completed, None, t0);

    // Stage 4: final answer. Zooms that failed to render are not claimed.
    let t0 = Instant::now();
    let rendered = SelectionResult {
        selected: views.zoom_views.iter().map(|z| z.source.clone()).collect(),
        ..selection.clone()
    };
    let summary = summarize_detections(&partition, &rendered);
    let zoom_labels: Vec<String> = views.zoom_views.iter().map(|z| z.source.proposal.label.clone()).collect();
    let prompt3 = stage3_prompt(&summary, input.query, &zoom_labels);
    let mut images = vec![views.global_view.clone(), original_view];
    images.extend(views.zoom_views.iter().map(|z| z.image.clone()));
    trace.ledger.round2_visual = images.len() as u64 * cost;
    trace.ledger.input_text_estimate += estimate_text_tokens(&prompt3);
    trace.detection_summary = Some(summary);
    trace.partition = Some(partition);
    trace.selection = Some(selection);
    trace.prompts.push(prompt3.clone());

    let reply = match adapters.reasoner.generate(&ReasonerRequest {
        images,
        prompt: prompt3,
        temperature: cfg.reasoner.temperature,
    }) {
        Ok(r) => r,
        Err(e) => fail!(Stage::Reason, t0, e),
    };
    trace.ledger.output_text_estimate += estimate_text_tokens(&reply);
    trace.replies.push(reply.clone());
    let verdict = parse_yesno(&reply);
    trace.verdict = Some(verdict.clone());
    let note = (verdict.answer == Answer::Unparseable).then(|| "reply has no yes/no".to_string());
    trace.mark(Stage::Reason, StageStatus::Completed, note, t0);

    Ok(RunOutput { verdict, trace, views })
}

/// Writes `<id>_global.png`, `<id>_zoom_<k>.png` and `<id>.json` into
/// `dir`, recording the file names in the trace first.
pub fn write_outputs(dir: &Path, trace: &mut PipelineTrace, views: &RenderedViewSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let id = trace.trace_id.clone();
    let global = format!("{id}_global.png");
    views.global_view.save(dir.join(&global))?;
    let mut names = Vec::new();
    for (k, z) in views.zoom_views.iter().enumerate() {
        let name = format!("{id}_zoom_{k}.png");
        z.image.save(dir.join(&name))?;
        names.push(name);
    }
    if let Some(meta) = trace.views.as_mut() {
        meta.global_file = Some(global);
        for (z, n) in meta.zooms.iter_mut().zip(names) {
            z.file = Some(n);
        }
    }
    write_trace(&dir.join(format!("{id}.json")), trace)
}

pub fn write_trace(path: &Path, trace: &PipelineTrace) -> Result<()> {
    let mut text = trace.to_json()?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Result of one fixture scene in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub item_id: String,
    pub image_id: String,
    pub question: String,
    pub truth: Option<bool>,
    pub answer: Answer,
    pub raw_text: String,
    pub a_rel: Option<f64>,
    pub gamma: Option<f64>,
    pub provisional_gamma: Option<f64>,
    pub zooms: usize,
    pub ledger: TokenLedger,
    pub error: Option<String>,
}

impl SceneOutcome {
    pub fn correct(&self) -> bool {
        self.truth.is_some() && self.answer.as_bool() == self.truth
    }
}

/// Runs one fixture scene with fixture experts and the mock reasoner.
pub fn run_scene(scene: &Scene, base_dir: &Path, cfg: &PipelineConfig, exec: Execution) -> Result<RunOutput, Box<RunFailure>> {
    let question = scene.question.clone().unwrap_or_default();
    let image = scene.load_image(base_dir);
    let image = match image {
        Ok(img) => img,
        Err(error) => {
            let blank = RgbImage::new(1, 1);
            let input = RunInput { image_id: &scene.image_id, item_id: Some(scene.item_id()), image: &blank, query: &question, vocabulary: &[] };
            let mut trace = PipelineTrace::new(trace_id(&blank, &question, cfg), &input, cfg.policy, (scene.width, scene.height));
            trace.error = Some(error.to_string());
            return Err(Box::new(RunFailure { error, trace }));
        }
    };
    let one = std::slice::from_ref(scene);
    let ea = FixtureExpert::from_scenes(ExpertId::A, one);
    let eb = FixtureExpert::from_scenes(ExpertId::B, one);
    let reasoner = MockReasoner::for_scene(scene, cfg.reasoner.mock);
    let vocabulary = scene.vocabulary();
    let input = RunInput {
        image_id: &scene.image_id,
        item_id: Some(scene.item_id()),
        image: &image,
        query: &question,
        vocabulary: &vocabulary,
    };
    run(&input, &Adapters { expert_a: &ea, expert_b: &eb, reasoner: &reasoner }, cfg, exec)
}

/// Runs every scene, fanning out across scenes per `exec`. Per-scene work is
/// sequential so the two levels do not compete.
pub fn run_scenes(scenes: &[Scene], base_dir: &Path, cfg: &PipelineConfig, exec: Execution) -> Vec<SceneOutcome> {
    par::map(scenes, exec, |scene| {
        let result = run_scene(scene, base_dir, cfg, Execution::Sequential);
        let (trace, error) = match result {
            Ok(out) => (out.trace, None),
            Err(f) => (f.trace, Some(f.error.to_string())),
        };
        let verdict = trace.verdict.clone();
        SceneOutcome {
            item_id: scene.item_id().to_string(),
            image_id: scene.image_id.clone(),
            question: scene.question.clone().unwrap_or_default(),
            truth: scene.truth(),
            answer: verdict.as_ref().map_or(Answer::Unparseable, |v| v.answer),
            raw_text: verdict.map(|v| v.raw_text).unwrap_or_default(),
            a_rel: scene.a_rel,
            gamma: trace.partition.as_ref().filter(|_| trace.policy == Policy::ActiveLook).map(|p| p.gamma),
            provisional_gamma: trace.provisional_gamma,
            zooms: trace.zoom_count(),
            ledger: trace.ledger,
            error,
        }
    })
}

/// All detections of a scene above the configured thresholds, unfiltered by
/// target label.
pub fn scene_proposals(scene: &Scene, cfg: &PipelineConfig) -> Result<(Vec<Proposal>, Vec<Proposal>)> {
    let collect = |slot: ExpertId| -> Result<Vec<Proposal>> {
        let tau = cfg.experts.threshold(slot);
        let mut v = scene
            .experts
            .get(slot)
            .iter()
            .filter(|d| d.score > tau)
            .map(|d| Proposal::new(d.bbox, &d.label, d.score, slot))
            .collect::<Result<Vec<_>>>()?;
        v.sort_by(|x, y| y.score.total_cmp(&x.score).then_with(|| x.bbox.lex_cmp(&y.bbox)));
        Ok(v)
    };
    Ok((collect(ExpertId::A)?, collect(ExpertId::B)?))
}
