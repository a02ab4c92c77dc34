//! Seeded synthetic scenes for existence questions, with two imperfect
//! experts that miss objects, jitter boxes and occasionally hallucinate the
//! queried object on top of a confusable one.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::noise_feasible;
use crate::fixture::{Detection, GroundTruthObject, Scene, SceneExperts};
use crate::geometry::{area_ratio, iou, BBox, ImageDims};

pub const DEFAULT_VOCABULARY: &[&str] = &[
    "person", "dog", "cat", "chair", "car", "cup", "bottle", "bicycle", "bird", "couch", "laptop", "clock",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object relative areas are drawn from this range.
    pub a_rel_range: (f64, f64),
    pub present_ratio: f64,
    pub recall_a: f64,
    pub recall_b: f64,
    /// Chance that an expert hallucinates an absent queried object.
    pub hallucinate_a: f64,
    pub hallucinate_b: f64,
    /// Max edge jitter as a fraction of the box side.
    pub jitter: f64,
    /// Every detection must admit a translation below this IoU.
    pub noise_max_iou: f64,
    pub vocabulary: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 500,
            seed: 42,
            width: 320,
            height: 240,
            min_objects: 2,
            max_objects: 4,
            a_rel_range: (0.01, 0.40),
            present_ratio: 0.5,
            recall_a: 0.9,
            recall_b: 0.9,
            hallucinate_a: 0.2,
            hallucinate_b: 0.15,
            jitter: 0.05,
            noise_max_iou: 0.3,
            vocabulary: DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if self.vocabulary.len() <= self.max_objects {
            return bad("vocabulary must be larger than max_objects");
        }
        let (lo, hi) = self.a_rel_range;
        if !(0.0 < lo && lo <= hi && hi <= 0.5) {
            return bad("a_rel_range must satisfy 0 < lo <= hi <= 0.5");
        }
        for p in [self.present_ratio, self.recall_a, self.recall_b, self.hallucinate_a, self.hallucinate_b] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return bad("jitter must lie in [0, 0.5)");
        }
        ImageDims::new(self.width, self.height).map(|_| ())
    }
}

const PLACEMENT_TRIES: usize = 200;

fn sample_box(rng: &mut ChaCha8Rng, dims: ImageDims, a_rel: f64) -> Option<BBox> {
    let area = a_rel * dims.area();
    let aspect: f64 = rng.random_range(0.6..1.6);
    let w = (area * aspect).sqrt().min(dims.width as f64 - 1.0);
    let h = (area / w).min(dims.height as f64 - 1.0);
    if w < 2.0 || h < 2.0 {
        return None;
    }
    let x = rng.random_range(0.0..=(dims.width as f64 - w)).floor();
    let y = rng.random_range(0.0..=(dims.height as f64 - h)).floor();
    BBox::new(x, y, (x + w).round(), (y + h).round()).ok()
}

fn jittered(rng: &mut ChaCha8Rng, b: &BBox, jitter: f64, dims: ImageDims) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut d = |s: f64| if jitter > 0.0 { rng.random_range(-jitter..=jitter) * s } else { 0.0 };
    let x1 = (b.x1() + d(w)).max(0.0);
    let y1 = (b.y1() + d(h)).max(0.0);
    let x2 = (b.x2() + d(w)).min(dims.width as f64);
    let y2 = (b.y2() + d(h)).min(dims.height as f64);
    BBox::new(x1, y1, x2, y2).unwrap_or(*b)
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn rounded(b: BBox) -> BBox {
    BBox::new(round2(b.x1()), round2(b.y1()), round2(b.x2()), round2(b.y2())).unwrap_or(b)
}

/// Generates `cfg.scenes` scenes. Identical configs give identical output.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let dims = ImageDims::new(cfg.width, cfg.height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut index = 0usize;
    while scenes.len() < cfg.scenes {
        if let Some(scene) = generate_scene(&mut rng, cfg, dims, scenes.len()) {
            scenes.push(scene);
        }
        index += 1;
        if index > cfg.scenes * 50 + 1000 {
            return Err(Error::InvalidConfig("synth: could not place objects; loosen the size range".into()));
        }
    }
    Ok(scenes)
}

fn generate_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig, dims: ImageDims, n: usize) -> Option<Scene> {
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut labels: Vec<String> = cfg.vocabulary.clone();
    labels.shuffle(rng);
    let (present_labels, absent_labels) = labels.split_at(count);

    let mut objects: Vec<GroundTruthObject> = Vec::new();
    for label in present_labels {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let a_rel = rng.random_range(cfg.a_rel_range.0..=cfg.a_rel_range.1);
            let Some(b) = sample_box(rng, dims, a_rel) else { continue };
            let clear = objects.iter().all(|o| iou(&o.bbox, &b) < 0.1);
            if clear && noise_feasible(&b, cfg.noise_max_iou, dims) {
                placed = Some(b);
                break;
            }
        }
        objects.push(GroundTruthObject { label: label.clone(), bbox: placed? });
    }

    let present = rng.random_bool(cfg.present_ratio);
    let (queried, a_rel) = if present {
        let target = objects.choose(rng)?;
        (target.label.clone(), Some(round2(area_ratio(&target.bbox, dims).ok()? * 1e4) / 1e4))
    } else {
        (absent_labels.choose(rng)?.clone(), None)
    };

    let mut experts = SceneExperts::default();
    for (slot, recall, halluc) in [(0, cfg.recall_a, cfg.hallucinate_a), (1, cfg.recall_b, cfg.hallucinate_b)] {
        let mut dets = Vec::new();
        for obj in &objects {
            if rng.random_bool(recall) {
                let b = rounded(jittered(rng, &obj.bbox, cfg.jitter, dims));
                let score = round2(rng.random_range(0.5..0.95));
                dets.push(Detection { label: obj.label.clone(), bbox: b, score });
            }
        }
        if !present && rng.random_bool(halluc) {
            let host = objects.choose(rng)?;
            let b = rounded(jittered(rng, &host.bbox, cfg.jitter, dims));
            let score = round2(rng.random_range(0.35..0.6));
            dets.push(Detection { label: queried.clone(), bbox: b, score });
        }
        if dets.iter().any(|d| !noise_feasible(&d.bbox, cfg.noise_max_iou, dims)) {
            return None;
        }
        if slot == 0 {
            experts.a = dets;
        } else {
            experts.b = dets;
        }
    }

    Some(Scene {
        id: None,
        image_id: format!("synth_{n:04}"),
        image_path: None,
        width: dims.width,
        height: dims.height,
        experts,
        ground_truth: Some(objects),
        question: Some(format!("Is there a {queried} in the image?")),
        answer: Some(if present { "yes" } else { "no" }.to_string()),
        a_rel,
    })
}
