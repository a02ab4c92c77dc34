//! Auxiliary views: the global highlight overlay and zoom crops.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::arbitration::{ConsensusPartition, DoubtfulRegion, SelectionResult};
use crate::error::{Error, Result};
use crate::font;
use crate::geometry::{expand_and_clamp, BBox, ImageDims, PixelRect};

/// Height of the filled label tag drawn at a box corner.
pub const LABEL_HEIGHT: u32 = font::GLYPH_HEIGHT + 2;
const LABEL_TEXT_COLOR: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    pub trusted_color: [u8; 3],
    pub doubtful_color: [u8; 3],
    /// Stroke width in pixels; `None` scales with the image.
    pub line_width: Option<u32>,
    pub draw_labels: bool,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            trusted_color: [0, 200, 0],
            doubtful_color: [220, 0, 0],
            line_width: None,
            draw_labels: true,
        }
    }
}

impl RenderStyle {
    pub fn line_width_for(&self, dims: ImageDims) -> u32 {
        self.line_width.unwrap_or_else(|| {
            let long = dims.width.max(dims.height) as f64;
            ((0.004 * long).round() as u32).max(2)
        })
        .max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub zoom_scale: f64,
    pub target_long_edge: u32,
    pub style: RenderStyle,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            zoom_scale: 1.5,
            target_long_edge: 384,
            style: RenderStyle::default(),
        }
    }
}

pub fn dims_of(image: &RgbImage) -> Result<ImageDims> {
    ImageDims::new(image.width(), image.height())
}

/// Where the label tag for a box goes: above the box when there is room,
/// otherwise inside its top-left corner. Clipped to the image.
pub fn label_rect(rect: PixelRect, text: &str, dims: ImageDims) -> Option<PixelRect> {
    let w = font::text_width(text) + 2;
    let y0 = if rect.y0 >= LABEL_HEIGHT {
        rect.y0 - LABEL_HEIGHT
    } else {
        rect.y0
    };
    let clipped = PixelRect {
        x0: rect.x0,
        y0,
        x1: (rect.x0 + w).min(dims.width),
        y1: (y0 + LABEL_HEIGHT).min(dims.height),
    };
    (clipped.x0 < clipped.x1 && clipped.y0 < clipped.y1).then_some(clipped)
}

fn stroke_rect(img: &mut RgbImage, rect: PixelRect, lw: u32, color: [u8; 3]) {
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let on_edge = x < rect.x0 + lw
                || x + lw >= rect.x1
                || y < rect.y0 + lw
                || y + lw >= rect.y1;
            if on_edge {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

fn draw_label(img: &mut RgbImage, rect: PixelRect, text: &str, color: [u8; 3], dims: ImageDims) {
    let Some(tag) = label_rect(rect, text, dims) else {
        return;
    };
    for y in tag.y0..tag.y1 {
        for x in tag.x0..tag.x1 {
            img.put_pixel(x, y, Rgb(color));
        }
    }
    font::for_each_pixel(text, |dx, dy| {
        let (x, y) = (tag.x0 + 1 + dx, tag.y0 + 1 + dy);
        if tag.contains(x, y) {
            img.put_pixel(x, y, Rgb(LABEL_TEXT_COLOR));
        }
    });
}

/// Copy of `image` with trusted regions stroked in the trusted color and
/// doubtful regions in the doubtful color. Dimensions are unchanged.
pub fn render_highlight(image: &RgbImage, partition: &ConsensusPartition, style: &RenderStyle) -> RgbImage {
    let mut out = image.clone();
    let Ok(dims) = dims_of(image) else {
        return out;
    };
    let lw = style.line_width_for(dims);

    let regions = partition
        .trusted
        .iter()
        .map(|t| (&t.bbox, &t.label, style.trusted_color))
        .chain(
            partition
                .doubtful
                .iter()
                .map(|d| (&d.proposal.bbox, &d.proposal.label, style.doubtful_color)),
        );
    for (bbox, label, color) in regions {
        let Some(rect) = bbox.pixel_rect(dims) else {
            continue;
        };
        stroke_rect(&mut out, rect, lw, color);
        if style.draw_labels {
            draw_label(&mut out, rect, label, color, dims);
        }
    }
    out
}

/// Aspect-preserving bilinear resize so the longer edge equals `target`.
pub fn resize_long_edge(image: &RgbImage, target: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let long = w.max(h);
    if long == target || long == 0 {
        return image.clone();
    }
    let scale = target as f64 / long as f64;
    let nw = if w >= h { target } else { ((w as f64 * scale).round() as u32).max(1) };
    let nh = if h > w { target } else { ((h as f64 * scale).round() as u32).max(1) };
    imageops::resize(image, nw, nh, FilterType::Triangle)
}

/// Crop window actually used for a zoom: the scale-expanded box, clamped and
/// widened to whole pixels.
pub fn zoom_window(b: &BBox, zoom_scale: f64, dims: ImageDims) -> Result<PixelRect> {
    let expanded = expand_and_clamp(b, zoom_scale, dims)?;
    expanded
        .pixel_rect(dims)
        .ok_or_else(|| Error::DegenerateBox(format!("{:?} has no pixels", expanded.to_array())))
}

pub fn render_zoom(image: &RgbImage, b: &BBox, zoom_scale: f64, target_long_edge: u32) -> Result<RgbImage> {
    let dims = dims_of(image)?;
    let win = zoom_window(b, zoom_scale, dims)?;
    let crop = imageops::crop_imm(image, win.x0, win.y0, win.width(), win.height()).to_image();
    Ok(resize_long_edge(&crop, target_long_edge))
}

#[derive(Debug, Clone)]
pub struct ZoomView {
    pub source: DoubtfulRegion,
    pub window: PixelRect,
    pub image: RgbImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoomFailure {
    pub source: DoubtfulRegion,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RenderedViewSet {
    /// Highlight overlay at the original resolution.
    pub global_full: RgbImage,
    /// Highlight overlay resized to the model input size.
    pub global_view: RgbImage,
    pub zoom_views: Vec<ZoomView>,
    pub zoom_failures: Vec<ZoomFailure>,
    pub per_view_cost: u64,
    pub total_visual_tokens: u64,
}

/// One global highlight view plus one zoom per selected region, in selection
/// order. A zoom that cannot be rendered is recorded and skipped.
pub fn render_views(
    image: &RgbImage,
    partition: &ConsensusPartition,
    selection: &SelectionResult,
    per_view_cost: u64,
    cfg: &RenderConfig,
) -> RenderedViewSet {
    let global_full = render_highlight(image, partition, &cfg.style);
    let global_view = resize_long_edge(&global_full, cfg.target_long_edge);

    let mut zoom_views = Vec::new();
    let mut zoom_failures = Vec::new();
    for region in &selection.selected {
        let rendered = dims_of(image)
            .and_then(|d| zoom_window(&region.proposal.bbox, cfg.zoom_scale, d))
            .and_then(|win| {
                render_zoom(image, &region.proposal.bbox, cfg.zoom_scale, cfg.target_long_edge)
                    .map(|img| (win, img))
            });
        match rendered {
            Ok((window, img)) => zoom_views.push(ZoomView {
                source: region.clone(),
                window,
                image: img,
            }),
            Err(e) => zoom_failures.push(ZoomFailure {
                source: region.clone(),
                reason: e.to_string(),
            }),
        }
    }

    let total_visual_tokens = (1 + zoom_views.len() as u64) * per_view_cost;
    RenderedViewSet {
        global_full,
        global_view,
        zoom_views,
        zoom_failures,
        per_view_cost,
        total_visual_tokens,
    }
}
