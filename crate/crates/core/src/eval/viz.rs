use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::autodiff::Tensor;

/// Raw values written next to a heatmap image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub grid_w: usize,
    pub grid_h: usize,
    pub attention: Vec<f64>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<stem>.ppm` (binary P6) and `<stem>.json`.
///
/// The red channel of each cell is replaced by its attention divided by the
/// row maximum; green and blue keep the render at half brightness.
pub fn emit_heatmap(
    image: &Tensor,
    attention: &[f64],
    grid_w: usize,
    metadata: serde_json::Value,
    stem: &Path,
) -> Result<(PathBuf, PathBuf), EvalError> {
    let [h, w, 3] = *image.shape() else {
        return Err(EvalError::Plot(format!("image shape {:?} is not [H, W, 3]", image.shape())));
    };
    if grid_w == 0 || !attention.len().is_multiple_of(grid_w) {
        return Err(EvalError::Plot(format!("{} attention values do not fill rows of {grid_w}", attention.len())));
    }
    let grid_h = attention.len() / grid_w;
    if w % grid_w != 0 || h % grid_h != 0 {
        return Err(EvalError::Plot(format!("{w}x{h} image does not tile into a {grid_w}x{grid_h} grid")));
    }
    let peak = attention.iter().cloned().fold(0.0_f64, f64::max);
    let (cw, ch) = (w / grid_w, h / grid_h);
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let a = attention[(y / ch) * grid_w + x / cw];
            let intensity = if peak > 0.0 { a / peak } else { 0.0 };
            let px = &image.data()[(y * w + x) * 3..(y * w + x) * 3 + 3];
            ppm.extend([byte(intensity), byte(px[1] * 0.5), byte(px[2] * 0.5)]);
        }
    }
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (img_path, json_path) = (with_ext(stem, "ppm"), with_ext(stem, "json"));
    std::fs::write(&img_path, ppm)?;
    let sidecar = HeatmapSidecar { grid_w, grid_h, attention: attention.to_vec(), metadata };
    std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok((img_path, json_path))
}

pub fn read_heatmap_sidecar(path: &Path) -> Result<HeatmapSidecar, EvalError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// One run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub value: f64,
    /// `None` when the run failed.
    pub val_success: Option<f64>,
    #[serde(rename = "final_L_action")]
    pub final_l_action: Option<f64>,
    #[serde(rename = "final_L_reasoning")]
    pub final_l_reasoning: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 320.0;
const MARGIN: f64 = 48.0;

/// Writes `<stem>.svg` (value on x, success on y) and `<stem>.json` holding the points.
/// Points are drawn at evenly spaced x positions in input order and labelled with
/// their value; failed runs are left out of the line.
pub fn emit_curves(points: &[CurvePoint], x_label: &str, stem: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    let drawn: Vec<(usize, &CurvePoint, f64)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.val_success.map(|s| (i, p, s)))
        .collect();
    if drawn.len() < 2 {
        return Err(EvalError::Plot(format!("{} plottable points, need at least 2", drawn.len())));
    }
    let span_x = SVG_W - 2.0 * MARGIN;
    let span_y = SVG_H - 2.0 * MARGIN;
    let x_of = |i: usize| MARGIN + span_x * i as f64 / (points.len() - 1).max(1) as f64;
    let y_of = |s: f64| SVG_H - MARGIN - span_y * s.clamp(0.0, 1.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    );
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += &format!(
        "<line x1=\"{MARGIN}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n<line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        y0 = SVG_H - MARGIN,
        x1 = SVG_W - MARGIN
    );
    for tick in [0.0, 0.5, 1.0] {
        svg += &format!(
            "<text class=\"y-label\" x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{tick}</text>\n",
            MARGIN - 6.0,
            y_of(tick) + 3.0
        );
    }
    let coords: Vec<String> = drawn.iter().map(|&(i, _, s)| format!("{},{}", x_of(i), y_of(s))).collect();
    svg += &format!("<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n", coords.join(" "));
    for &(i, _, s) in &drawn {
        svg += &format!("<circle class=\"marker\" cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"steelblue\"/>\n", x_of(i), y_of(s));
    }
    for (i, p) in points.iter().enumerate() {
        svg += &format!(
            "<text class=\"x-label\" x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            x_of(i),
            SVG_H - MARGIN + 14.0,
            p.value
        );
    }
    svg += &format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n",
        SVG_W / 2.0,
        SVG_H - 8.0
    );
    svg += &format!(
        "<text x=\"14\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">success</text>\n",
        SVG_H / 2.0,
        SVG_H / 2.0
    );
    svg += "</svg>\n";
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (svg_path, json_path) = (with_ext(stem, "svg"), with_ext(stem, "json"));
    std::fs::write(&svg_path, svg)?;
    std::fs::write(&json_path, serde_json::to_string_pretty(points)?)?;
    Ok((svg_path, json_path))
}
