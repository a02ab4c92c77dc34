//! Metric kernels for yes/no existence QA, paired perception QA and caption
//! hallucination, plus scale-stratified and conflict-stratified breakdowns.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arbitration::normalize_label;
use crate::error::{Error, Result};
use crate::pipeline::SceneOutcome;
use crate::reasoner::{parse_yesno, Answer};

pub const SMALL_MAX: f64 = 0.10;
pub const MEDIUM_MAX: f64 = 0.30;
pub const DEFAULT_TRIGGER: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    #[serde(default)]
    pub question: String,
    /// Binary ground truth; absent for caption records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<bool>,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.a_rel {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidConfig(format!("record {}: a_rel {a} outside [0, 1]", self.id)));
            }
        }
        Ok(())
    }

    fn truth(&self) -> Result<bool> {
        self.answer.ok_or_else(|| Error::MissingGroundTruth(self.id.clone()))
    }

    /// Predicted answer; an unparseable prediction becomes the wrong one.
    fn predicted(&self) -> Result<bool> {
        let truth = self.truth()?;
        Ok(parse_yesno(&self.prediction).answer.as_bool().unwrap_or(!truth))
    }

    fn correct(&self) -> Result<bool> {
        Ok(self.predicted()? == self.truth()?)
    }

    fn image_key(&self) -> &str {
        self.image_id.as_deref().unwrap_or(&self.id)
    }
}

impl From<&SceneOutcome> for EvalRecord {
    fn from(o: &SceneOutcome) -> Self {
        let prediction = match o.answer {
            Answer::Yes => "yes".to_string(),
            Answer::No => "no".to_string(),
            Answer::Unparseable => o.raw_text.clone(),
        };
        Self {
            id: o.item_id.clone(),
            question: o.question.clone(),
            answer: o.truth,
            prediction,
            a_rel: o.a_rel,
            category: None,
            image_id: Some(o.image_id.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a precision, recall or F1 denominator was zero.
    pub zero_division: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Confusion-matrix metrics with "yes" as the positive class.
pub fn pope_metrics(records: &[EvalRecord]) -> Result<PopeMetrics> {
    if records.is_empty() {
        return Err(Error::EmptyRecordSet);
    }
    let mut m = PopeMetrics { n: records.len(), ..Default::default() };
    for r in records {
        match (r.truth()?, r.predicted()?) {
            (true, true) => m.tp += 1,
            (false, true) => m.fp += 1,
            (true, false) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    m.accuracy = (m.tp + m.tn) as f64 / m.n as f64;
    let (p, zp) = ratio(m.tp, m.tp + m.fp);
    let (r, zr) = ratio(m.tp, m.tp + m.fn_);
    let (f1, zf) = ratio(2 * m.tp, 2 * m.tp + m.fp + m.fn_);
    m.precision = p;
    m.recall = r;
    m.f1 = f1;
    m.zero_division = zp || zr || zf;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleBin {
    Small,
    Medium,
    Large,
}

impl ScaleBin {
    pub const ALL: [ScaleBin; 3] = [ScaleBin::Small, ScaleBin::Medium, ScaleBin::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleBin::Small => "small",
            ScaleBin::Medium => "medium",
            ScaleBin::Large => "large",
        }
    }
}

/// Both breakpoints belong to the medium bin.
pub fn scale_bin(a_rel: f64) -> ScaleBin {
    if a_rel < SMALL_MAX {
        ScaleBin::Small
    } else if a_rel <= MEDIUM_MAX {
        ScaleBin::Medium
    } else {
        ScaleBin::Large
    }
}

/// POPE metrics per scale bin over records that carry `a_rel`. Empty bins are
/// omitted.
pub fn pope_by_scale(records: &[EvalRecord]) -> Result<BTreeMap<ScaleBin, PopeMetrics>> {
    let mut bins: BTreeMap<ScaleBin, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        if let Some(a) = r.a_rel {
            bins.entry(scale_bin(a)).or_default().push(r.clone());
        }
    }
    bins.into_iter().map(|(k, v)| Ok((k, pope_metrics(&v)?))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccPlusMode {
    /// An image counts when both of its questions are answered correctly.
    #[default]
    PerImage,
    /// As `PerImage`, but each reply must also be a bare yes or no.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmeCategory {
    pub questions: usize,
    pub images: usize,
    pub accuracy: f64,
    pub accuracy_plus: f64,
    pub score: f64,
}

fn is_bare_answer(text: &str) -> bool {
    let t = text.trim().trim_end_matches('.').trim();
    t.eq_ignore_ascii_case("yes") || t.eq_ignore_ascii_case("no")
}

/// Per-category accuracy, both-correct image accuracy and their summed score.
pub fn mme_scores(records: &[EvalRecord], mode: AccPlusMode) -> Result<BTreeMap<String, MmeCategory>> {
    if records.is_empty() {
        return Err(Error::EmptyRecordSet);
    }
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<&EvalRecord>>> = BTreeMap::new();
    for r in records {
        let cat = r
            .category
            .as_deref()
            .map(normalize_label)
            .ok_or_else(|| Error::MissingGroundTruth(format!("category of {}", r.id)))?;
        let image = r.image_id.clone().ok_or_else(|| Error::MissingGroundTruth(format!("image id of {}", r.id)))?;
        groups.entry(cat).or_default().entry(image).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (cat, images) in groups {
        let mut questions = 0;
        let mut correct = 0;
        let mut both = 0;
        for (image_id, qs) in &images {
            if qs.len() != 2 {
                return Err(Error::UnpairedImage {
                    image_id: image_id.clone(),
                    category: cat.clone(),
                    count: qs.len(),
                });
            }
            let mut all = true;
            for q in qs {
                let ok = q.correct()?;
                questions += 1;
                correct += usize::from(ok);
                all &= ok && (mode == AccPlusMode::PerImage || is_bare_answer(&q.prediction));
            }
            both += usize::from(all);
        }
        let accuracy = correct as f64 / questions as f64;
        let accuracy_plus = both as f64 / images.len() as f64;
        out.insert(
            cat,
            MmeCategory {
                questions,
                images: images.len(),
                accuracy,
                accuracy_plus,
                score: 100.0 * accuracy + 100.0 * accuracy_plus,
            },
        );
    }
    Ok(out)
}

/// Surface word or bigram to canonical object category. Canonical names map
/// to themselves.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynonymMap {
    map: HashMap<String, String>,
}

impl SynonymMap {
    pub fn new<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut map = HashMap::new();
        for (k, v) in pairs {
            let canon = normalize_label(v.as_ref());
            map.insert(normalize_label(k.as_ref()), canon.clone());
            map.insert(canon.clone(), canon);
        }
        Self { map }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, String> = serde_json::from_str(text)?;
        Ok(Self::new(raw))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn lookup(&self, phrase: &str) -> Option<&str> {
        self.map.get(phrase).map(String::as_str)
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.map.values().map(String::as_str).collect()
    }

    /// Distinct categories mentioned by `caption`, scanning left to right and
    /// preferring a bigram over its first word.
    pub fn mentions(&self, caption: &str) -> BTreeSet<String> {
        let lower = caption.to_lowercase();
        let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < words.len() {
            if i + 1 < words.len() {
                if let Some(c) = self.lookup(&format!("{} {}", words[i], words[i + 1])) {
                    found.insert(c.to_string());
                    i += 2;
                    continue;
                }
            }
            if let Some(c) = self.lookup(words[i]) {
                found.insert(c.to_string());
            }
            i += 1;
        }
        found
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairMetrics {
    pub captions: usize,
    pub hallucinated_captions: usize,
    pub mentions: usize,
    pub hallucinated_mentions: usize,
    pub chair_s: f64,
    pub chair_i: f64,
    /// Mentioned ground-truth categories over all ground-truth categories,
    /// pooled across images.
    pub recall: f64,
}

/// Caption hallucination rates. Each record's prediction is a caption keyed
/// by its image id; ground-truth categories are canonicalized through
/// `synonyms` before comparison.
pub fn chair(records: &[EvalRecord], gt_objects: &HashMap<String, Vec<String>>, synonyms: &SynonymMap) -> Result<ChairMetrics> {
    if records.is_empty() {
        return Err(Error::EmptyRecordSet);
    }
    let canon = |o: &String| {
        let n = normalize_label(o);
        synonyms.lookup(&n).map(str::to_string).unwrap_or(n)
    };
    let mut m = ChairMetrics {
        captions: records.len(),
        hallucinated_captions: 0,
        mentions: 0,
        hallucinated_mentions: 0,
        chair_s: 0.0,
        chair_i: 0.0,
        recall: 0.0,
    };
    let mut per_image: BTreeMap<&str, (BTreeSet<String>, BTreeSet<String>)> = BTreeMap::new();
    for r in records {
        let key = r.image_key();
        let gt = gt_objects.get(key).ok_or_else(|| Error::MissingGroundTruth(key.to_string()))?;
        let entry = per_image.entry(key).or_insert_with(|| (gt.iter().map(canon).collect(), BTreeSet::new()));
        let mentioned = synonyms.mentions(&r.prediction);
        let bad = mentioned.iter().filter(|c| !entry.0.contains(*c)).count();
        m.mentions += mentioned.len();
        m.hallucinated_mentions += bad;
        m.hallucinated_captions += usize::from(bad > 0);
        entry.1.extend(mentioned);
    }
    let (gt_total, gt_hit) = per_image
        .values()
        .fold((0, 0), |(t, h), (gt, said)| (t + gt.len(), h + gt.intersection(said).count()));
    m.chair_s = m.hallucinated_captions as f64 / m.captions as f64;
    m.chair_i = ratio(m.hallucinated_mentions, m.mentions).0;
    m.recall = ratio(gt_hit, gt_total).0;
    Ok(m)
}

/// Conflict level of one run, joined to records by item id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictObservation {
    pub id: String,
    pub gamma: f64,
}

impl ConflictObservation {
    pub fn from_outcome(o: &SceneOutcome) -> Option<Self> {
        o.gamma.map(|gamma| Self { id: o.item_id.clone(), gamma })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerRow {
    pub conflict: String,
    pub count: usize,
    pub ratio: f64,
    pub errors: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerReport {
    pub trigger: f64,
    pub rows: Vec<TriggerRow>,
}

/// Splits items into low and high conflict (γ above `trigger`) and reports
/// the baseline error rate in each group.
pub fn trigger_report(observations: &[ConflictObservation], baseline: &[EvalRecord], trigger: f64) -> Result<TriggerReport> {
    if observations.is_empty() {
        return Err(Error::EmptyRecordSet);
    }
    let by_id: HashMap<&str, &EvalRecord> = baseline.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut counts = [(0usize, 0usize); 2];
    for o in observations {
        let r = by_id.get(o.id.as_str()).ok_or_else(|| Error::JoinFailure(o.id.clone()))?;
        let slot = &mut counts[usize::from(o.gamma > trigger)];
        slot.0 += 1;
        slot.1 += usize::from(!r.correct()?);
    }
    let total = observations.len();
    let rows = ["low", "high"]
        .iter()
        .zip(counts)
        .map(|(name, (count, errors))| TriggerRow {
            conflict: name.to_string(),
            count,
            ratio: count as f64 / total as f64,
            errors,
            error_rate: ratio(errors, count).0,
        })
        .collect();
    Ok(TriggerReport { trigger, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pope,
    Mme,
    Chair,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pope" => Ok(Task::Pope),
            "mme" => Ok(Task::Mme),
            "chair" => Ok(Task::Chair),
            other => Err(Error::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pope: Option<PopeMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_scale: Option<BTreeMap<ScaleBin, PopeMetrics>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mme: Option<BTreeMap<String, MmeCategory>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chair: Option<ChairMetrics>,
}

fn pope_line(out: &mut String, name: &str, m: &PopeMetrics) {
    let _ = writeln!(
        out,
        "{name:<10} {:>6} {:>8.4} {:>9.4} {:>8.4} {:>8.4}{}",
        m.n,
        m.accuracy,
        m.precision,
        m.recall,
        m.f1,
        if m.zero_division { "  (zero division)" } else { "" }
    );
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        if let Some(m) = &self.pope {
            let _ = writeln!(out, "{:<10} {:>6} {:>8} {:>9} {:>8} {:>8}", "split", "n", "accuracy", "precision", "recall", "f1");
            pope_line(&mut out, "all", m);
            for (bin, m) in self.by_scale.iter().flatten() {
                pope_line(&mut out, bin.as_str(), m);
            }
        }
        if let Some(cats) = &self.mme {
            let _ = writeln!(out, "{:<12} {:>9} {:>6} {:>8} {:>9} {:>7}", "category", "questions", "images", "accuracy", "accuracy+", "score");
            let mut total = 0.0;
            for (name, c) in cats {
                total += c.score;
                let _ = writeln!(
                    out,
                    "{name:<12} {:>9} {:>6} {:>8.4} {:>9.4} {:>7.2}",
                    c.questions, c.images, c.accuracy, c.accuracy_plus, c.score
                );
            }
            let _ = writeln!(out, "total score {total:.2}");
        }
        if let Some(c) = &self.chair {
            let _ = writeln!(out, "captions {}  mentions {}", c.captions, c.mentions);
            let _ = writeln!(out, "CHAIR_s {:.4}  CHAIR_i {:.4}  recall {:.4}", c.chair_s, c.chair_i, c.recall);
        }
        f.write_str(out.trim_end())
    }
}

impl fmt::Display for TriggerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>6} {:>7} {:>10}", "conflict", "n", "ratio", "error rate")?;
        for r in &self.rows {
            writeln!(f, "{:<8} {:>6} {:>6.1}% {:>9.1}%", r.conflict, r.count, 100.0 * r.ratio, 100.0 * r.error_rate)?;
        }
        write!(f, "trigger: gamma > {}", self.trigger)
    }
}

/// Prediction file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
}

impl From<&SceneOutcome> for PredictionLine {
    fn from(o: &SceneOutcome) -> Self {
        let r = EvalRecord::from(o);
        Self { id: r.id, prediction: r.prediction, category: None, image_id: r.image_id }
    }
}

/// Ground-truth line for yes/no tasks. Scene fixture lines are accepted as is.
#[derive(Debug, Clone, Deserialize)]
struct AnswerLine {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    image_id: Option<String>,
    #[serde(default)]
    question: Option<String>,
    answer: String,
    #[serde(default)]
    a_rel: Option<f64>,
    #[serde(default)]
    category: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct ObjectsLine {
    image_id: String,
    objects: Vec<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Fixture { line: i + 1, reason: e.to_string() })?);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    read_jsonl(path)
}

/// Joins predictions to a yes/no ground-truth file by id.
pub fn join_answers(preds: &[PredictionLine], gt_path: &Path) -> Result<Vec<EvalRecord>> {
    let gt: Vec<AnswerLine> = read_jsonl(gt_path)?;
    let mut by_id = HashMap::new();
    for g in &gt {
        let id = g.id.clone().or_else(|| g.image_id.clone()).ok_or_else(|| Error::MissingGroundTruth("ground-truth line without id".into()))?;
        by_id.insert(id, g);
    }
    preds
        .iter()
        .map(|p| {
            let g = by_id.get(&p.id).ok_or_else(|| Error::JoinFailure(p.id.clone()))?;
            let answer = parse_yesno(&g.answer).answer.as_bool().ok_or_else(|| Error::MissingGroundTruth(p.id.clone()))?;
            let r = EvalRecord {
                id: p.id.clone(),
                question: g.question.clone().unwrap_or_default(),
                answer: Some(answer),
                prediction: p.prediction.clone(),
                a_rel: g.a_rel,
                category: p.category.clone().or_else(|| g.category.clone()),
                image_id: p.image_id.clone().or_else(|| g.image_id.clone()),
            };
            r.validate()?;
            Ok(r)
        })
        .collect()
}

pub fn load_chair_ground_truth(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    let lines: Vec<ObjectsLine> = read_jsonl(path)?;
    Ok(lines.into_iter().map(|l| (l.image_id, l.objects)).collect())
}

fn caption_records(preds: &[PredictionLine]) -> Vec<EvalRecord> {
    preds
        .iter()
        .map(|p| EvalRecord {
            id: p.id.clone(),
            question: String::new(),
            answer: None,
            prediction: p.prediction.clone(),
            a_rel: None,
            category: p.category.clone(),
            image_id: p.image_id.clone(),
        })
        .collect()
}

/// Builds the report behind `active-look eval`. CHAIR uses the identity
/// synonym map over ground-truth names when `synonyms` is absent.
pub fn evaluate(task: Task, pred_path: &Path, gt_path: &Path, synonyms: Option<&Path>, by_scale: bool, mode: AccPlusMode) -> Result<Report> {
    let preds = load_predictions(pred_path)?;
    let mut report = Report { task, pope: None, by_scale: None, mme: None, chair: None };
    match task {
        Task::Pope => {
            let records = join_answers(&preds, gt_path)?;
            report.pope = Some(pope_metrics(&records)?);
            if by_scale {
                report.by_scale = Some(pope_by_scale(&records)?);
            }
        }
        Task::Mme => {
            let records = join_answers(&preds, gt_path)?;
            report.mme = Some(mme_scores(&records, mode)?);
        }
        Task::Chair => {
            let gt = load_chair_ground_truth(gt_path)?;
            let syn = match synonyms {
                Some(p) => SynonymMap::load(p)?,
                None => SynonymMap::new(gt.values().flatten().map(|o| (o.clone(), o.clone()))),
            };
            report.chair = Some(chair(&caption_records(&preds), &gt, &syn)?);
        }
    }
    Ok(report)
}
