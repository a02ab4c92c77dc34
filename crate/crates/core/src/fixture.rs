//! JSON Lines scene fixtures: per-image expert detections plus optional
//! ground truth for the mock reasoner and the evaluators.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arbitration::{normalize_label, ExpertId};
use crate::error::{Error, Result};
use crate::geometry::{area_ratio, BBox, ImageDims};

/// A labelled box with a confidence, as emitted by a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneExperts {
    #[serde(rename = "A", default)]
    pub a: Vec<Detection>,
    #[serde(rename = "B", default)]
    pub b: Vec<Detection>,
}

impl SceneExperts {
    pub fn get(&self, slot: ExpertId) -> &[Detection] {
        match slot {
            ExpertId::A => &self.a,
            ExpertId::B => &self.b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Item id for evaluation joins; defaults to `image_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub experts: SceneExperts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GroundTruthObject>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_rel: Option<f64>,
}

impl Scene {
    pub fn item_id(&self) -> &str {
        self.id.as_deref().unwrap_or(&self.image_id)
    }

    pub fn dims(&self) -> Result<ImageDims> {
        ImageDims::new(self.width, self.height)
    }

    /// Ground-truth answer as a boolean, if the scene carries one.
    pub fn truth(&self) -> Option<bool> {
        match self.answer.as_deref().map(|a| a.trim().to_ascii_lowercase()) {
            Some(a) if a == "yes" => Some(true),
            Some(a) if a == "no" => Some(false),
            _ => None,
        }
    }

    /// Distinct ground-truth labels in first-seen order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for obj in self.ground_truth.iter().flatten() {
            let l = normalize_label(&obj.label);
            if !out.contains(&l) {
                out.push(l);
            }
        }
        out
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let dims = self.dims().map_err(|e| e.to_string())?;
        let inside = |b: &BBox| b.x2() <= dims.width as f64 && b.y2() <= dims.height as f64 && b.x1() >= 0.0 && b.y1() >= 0.0;
        for (slot, dets) in [("A", &self.experts.a), ("B", &self.experts.b)] {
            for d in dets.iter() {
                if !inside(&d.bbox) {
                    return Err(format!("expert {slot} box {:?} outside {}x{}", d.bbox.to_array(), dims.width, dims.height));
                }
                if !(0.0..=1.0).contains(&d.score) {
                    return Err(format!("expert {slot} score {} outside [0, 1]", d.score));
                }
                if normalize_label(&d.label).is_empty() {
                    return Err(format!("expert {slot} detection has an empty label"));
                }
            }
        }
        for g in self.ground_truth.iter().flatten() {
            if !inside(&g.bbox) {
                return Err(format!("ground-truth box {:?} outside image", g.bbox.to_array()));
            }
        }
        if let Some(a) = self.a_rel {
            if !(0.0..=1.0).contains(&a) {
                return Err(format!("a_rel {a} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Relative area of the largest ground-truth object with `label`.
    pub fn label_a_rel(&self, label: &str) -> Option<f64> {
        let dims = self.dims().ok()?;
        let label = normalize_label(label);
        self.ground_truth
            .iter()
            .flatten()
            .filter(|g| normalize_label(&g.label) == label)
            .filter_map(|g| area_ratio(&g.bbox, dims).ok())
            .max_by(f64::total_cmp)
    }

    /// Loads the referenced image, resolved against `base_dir`, or draws the
    /// ground-truth canvas when the scene has no image file.
    pub fn load_image(&self, base_dir: &Path) -> Result<RgbImage> {
        match &self.image_path {
            Some(p) => {
                let path = base_dir.join(p);
                let img = image::open(&path).map_err(|e| Error::ImageUnreadable {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                Ok(img.to_rgb8())
            }
            None => Ok(render_canvas(self)),
        }
    }
}

/// Parses a fixture file. Blank lines are skipped; errors carry the 1-based
/// line number.
pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let file = fs::File::open(path)?;
    parse_scenes(BufReader::new(file))
}

pub fn parse_scenes(reader: impl BufRead) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| Error::Fixture {
            line: i + 1,
            reason: e.to_string(),
        })?;
        scene.validate().map_err(|reason| Error::Fixture { line: i + 1, reason })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Directory that relative `image_path`s resolve against.
pub fn base_dir_of(fixture_path: &Path) -> PathBuf {
    fixture_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Ground-truth label vocabulary across scenes, sorted.
pub fn vocabulary(scenes: &[Scene]) -> Vec<String> {
    let mut set = BTreeMap::new();
    for s in scenes {
        for l in s.vocabulary() {
            set.insert(l, ());
        }
    }
    set.into_keys().collect()
}

/// Stable per-label fill color.
pub fn label_color(label: &str) -> [u8; 3] {
    let digest = Sha256::digest(normalize_label(label).as_bytes());
    [64 + digest[0] / 2, 64 + digest[1] / 2, 64 + digest[2] / 2]
}

/// Synthetic raster: textured background with ground-truth objects drawn as
/// filled, outlined rectangles in their label color.
pub fn render_canvas(scene: &Scene) -> RgbImage {
    let (w, h) = (scene.width.max(1), scene.height.max(1));
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        let v = 96 + ((x * 3 + y * 5) % 32) as u8;
        Rgb([v, v, v.saturating_add(8)])
    });
    let dims = ImageDims { width: w, height: h };
    for obj in scene.ground_truth.iter().flatten() {
        let Some(r) = obj.bbox.pixel_rect(dims) else { continue };
        let c = label_color(&obj.label);
        let edge = [c[0] / 2, c[1] / 2, c[2] / 2];
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let border = x == r.x0 || y == r.y0 || x + 1 == r.x1 || y + 1 == r.y1;
                img.put_pixel(x, y, Rgb(if border { edge } else { c }));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"image_id":"s1","width":100,"height":80,"experts":{"A":[{"label":"Dog","box":[10,10,40,40],"score":0.9}],"B":[]},"ground_truth":[{"label":"dog","box":[12,10,40,42]}],"question":"Is there a dog in the image?","answer":"yes","a_rel":0.12}"#;

    #[test]
    fn parses_a_scene() {
        let scenes = parse_scenes(LINE.as_bytes()).unwrap();
        assert_eq!(scenes.len(), 1);
        let s = &scenes[0];
        assert_eq!(s.item_id(), "s1");
        assert_eq!(s.truth(), Some(true));
        assert_eq!(s.experts.get(ExpertId::A).len(), 1);
        assert!(s.experts.get(ExpertId::B).is_empty());
        assert_eq!(s.vocabulary(), vec!["dog".to_string()]);
        let a = s.label_a_rel("DOG").unwrap();
        assert!((a - 28.0 * 32.0 / 8000.0).abs() < 1e-12);
    }

    #[test]
    fn reports_line_numbers() {
        let text = format!("{LINE}\n\n{{\"image_id\":\"x\"}}\n");
        match parse_scenes(text.as_bytes()) {
            Err(Error::Fixture { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_bounds_boxes() {
        let bad = LINE.replace("[10,10,40,40]", "[10,10,140,40]");
        assert!(matches!(parse_scenes(bad.as_bytes()), Err(Error::Fixture { line: 1, .. })));
    }

    #[test]
    fn round_trips_through_disk() {
        let scenes = parse_scenes(LINE.as_bytes()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        write_scenes(&p, &scenes).unwrap();
        assert_eq!(load_scenes(&p).unwrap(), scenes);
    }

    #[test]
    fn canvas_is_deterministic_and_draws_objects() {
        let s = &parse_scenes(LINE.as_bytes()).unwrap()[0];
        let a = render_canvas(s);
        assert_eq!(a, render_canvas(s));
        assert_eq!(a.dimensions(), (100, 80));
        assert_eq!(a.get_pixel(20, 20).0, label_color("dog"));
        assert_eq!(s.load_image(Path::new(".")).unwrap(), a);
    }

    #[test]
    fn missing_image_file_is_unreadable() {
        let mut s = parse_scenes(LINE.as_bytes()).unwrap().remove(0);
        s.image_path = Some("does-not-exist.png".into());
        assert!(matches!(s.load_image(Path::new("/nonexistent")), Err(Error::ImageUnreadable { .. })));
    }
}
