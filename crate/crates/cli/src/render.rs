//! Static SVG overlays of one image's boxes.
//!
//! Multi-annotator files get one color per annotator; every other kind is
//! colored by category. Fused boxes are labeled with their confidence and
//! predictions with their score, both to two decimals.

use std::collections::HashMap;
use std::fmt::Write;

use annofuse_core::dataset::{Annotations, SceneRecord};
use annofuse_core::geometry::BBox;
use annofuse_core::{DatasetFile, Error, Result};

const PALETTE: [&str; 10] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45",
    "#fabed4", "#ffe119",
];

const LEGEND_ROW: f64 = 16.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Shape {
    bbox: BBox,
    color: &'static str,
    label: String,
}

fn find<'a, T>(scenes: &'a [SceneRecord<T>], id: &str) -> Result<&'a SceneRecord<T>> {
    scenes
        .iter()
        .find(|s| s.image_id == id)
        .ok_or_else(|| Error::InvalidArgument(format!("image `{id}` not found")))
}

/// Renders `image_id` from `ds` as a standalone SVG document.
pub fn render_image(ds: &DatasetFile, image_id: &str) -> Result<String> {
    let names: HashMap<u32, &str> = ds.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let cat_color: HashMap<u32, &'static str> = ds
        .categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, PALETTE[i % PALETTE.len()]))
        .collect();
    let name = |c: u32| names.get(&c).copied().unwrap_or("?").to_owned();
    let ccolor = |c: u32| cat_color.get(&c).copied().unwrap_or(PALETTE[0]);

    let (width, height, shapes, legend): (u32, u32, Vec<Shape>, Vec<(String, &'static str)>) =
        match &ds.annotations {
            Annotations::MultiAnnotator(scenes) => {
                let s = find(scenes, image_id)?;
                let colors: HashMap<&str, &'static str> = ds
                    .annotators
                    .iter()
                    .enumerate()
                    .map(|(i, a)| (a.id.as_str(), PALETTE[i % PALETTE.len()]))
                    .collect();
                let shapes = s
                    .boxes
                    .iter()
                    .map(|b| Shape {
                        bbox: b.bbox,
                        color: colors.get(b.annotator.as_str()).copied().unwrap_or(PALETTE[0]),
                        label: name(b.category),
                    })
                    .collect();
                let legend = ds
                    .annotators
                    .iter()
                    .map(|a| (a.id.clone(), colors[a.id.as_str()]))
                    .collect();
                (s.width, s.height, shapes, legend)
            }
            other => {
                let (w, h, shapes) = match other {
                    Annotations::GroundTruth(scenes) => {
                        let s = find(scenes, image_id)?;
                        let v = s
                            .boxes
                            .iter()
                            .map(|b| Shape { bbox: b.bbox, color: ccolor(b.category), label: name(b.category) })
                            .collect();
                        (s.width, s.height, v)
                    }
                    Annotations::Fused { scenes, .. } => {
                        let s = find(scenes, image_id)?;
                        let v = s
                            .boxes
                            .iter()
                            .map(|b| Shape {
                                bbox: b.bbox,
                                color: ccolor(b.category),
                                label: format!("{} {:.2}", name(b.category), b.confidence),
                            })
                            .collect();
                        (s.width, s.height, v)
                    }
                    Annotations::Predictions(scenes) => {
                        let s = find(scenes, image_id)?;
                        let v = s
                            .boxes
                            .iter()
                            .map(|b| Shape {
                                bbox: b.bbox,
                                color: ccolor(b.category),
                                label: format!("{} {:.2}", name(b.category), b.score),
                            })
                            .collect();
                        (s.width, s.height, v)
                    }
                    Annotations::MultiAnnotator(_) => unreachable!(),
                };
                let legend = ds
                    .categories
                    .iter()
                    .map(|c| (c.name.clone(), ccolor(c.id)))
                    .collect();
                (w, h, shapes, legend)
            }
        };

    let stroke = (width.max(height) as f64 / 256.0).max(1.0);
    let font = (12.0 * stroke).round();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"  <title>{} ({})</title>"#, escape(image_id), ds.kind());
    let _ = writeln!(svg, r##"  <rect width="{width}" height="{height}" fill="#111111"/>"##);
    for s in &shapes {
        let b = s.bbox;
        let _ = writeln!(
            svg,
            r#"  <rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{}" stroke-width="{stroke}"/>"#,
            b.x1(),
            b.y1(),
            b.width(),
            b.height(),
            s.color
        );
        let _ = writeln!(
            svg,
            r#"  <text x="{}" y="{}" fill="{}" font-family="sans-serif" font-size="{font}">{}</text>"#,
            b.x1(),
            (b.y1() - 2.0).max(font),
            s.color,
            escape(&s.label)
        );
    }
    let _ = writeln!(svg, r#"  <g class="legend">"#);
    for (i, (label, color)) in legend.iter().enumerate() {
        let y = 4.0 + i as f64 * LEGEND_ROW * stroke;
        let _ = writeln!(
            svg,
            r#"    <rect x="4" y="{y}" width="{0}" height="{0}" fill="{color}"/>"#,
            10.0 * stroke
        );
        let _ = writeln!(
            svg,
            r##"    <text x="{}" y="{}" fill="#ffffff" font-family="sans-serif" font-size="{font}">{}</text>"##,
            4.0 + 14.0 * stroke,
            y + 10.0 * stroke,
            escape(label)
        );
    }
    let _ = writeln!(svg, "  </g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}
