//! Static grounding report: one PNG mosaic per case (frame tiles plus a
//! segment timeline) and a deterministic HTML index.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{DstgError, Result};
use crate::geometry::BBox;
use crate::grounding::GroundingResult;
use crate::manifest::sha256_hex;
use crate::metrics::tube_viou;
use crate::synthdata::{frame_runs, VideoSample};

pub const GT_COLOR: Rgb<u8> = Rgb([0, 200, 0]);
pub const FAIL_COLOR: Rgb<u8> = Rgb([220, 30, 30]);
pub const OK_COLOR: Rgb<u8> = Rgb([40, 90, 230]);
const PROPOSAL_COLOR: Rgb<u8> = Rgb([90, 90, 90]);
const SCORE_COLOR: Rgb<u8> = Rgb([230, 200, 0]);
const TILE_BG: Rgb<u8> = Rgb([24, 24, 24]);
const PLACEHOLDER_BG: Rgb<u8> = Rgb([110, 110, 110]);
const PLACEHOLDER_MARK: Rgb<u8> = Rgb([160, 160, 160]);
const TIMELINE_BG: Rgb<u8> = Rgb([245, 245, 245]);

/// A timeline colour and its `[start, end)` frame runs.
pub type TimelineRow = (Rgb<u8>, Vec<(usize, usize)>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// Tile edge in pixels.
    pub tile: u32,
    pub columns: usize,
    /// Predicted tubes whose best vIoU falls below this are drawn as failures.
    pub fail_below: f64,
    /// Predicted tubes drawn per case.
    pub max_tubes: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { tile: 128, columns: 8, fail_below: 0.3, max_tubes: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub video_id: String,
    pub expression_idx: usize,
    pub image: String,
    pub image_sha256: String,
    pub tube_viou: Vec<f64>,
    pub red_boxes: usize,
    pub blue_boxes: usize,
    pub placeholder_frames: Vec<usize>,
}

/// A rendered case: the mosaic and what was drawn on it.
pub struct RenderedCase {
    pub image: RgbImage,
    pub tube_viou: Vec<f64>,
    pub red_boxes: usize,
    pub blue_boxes: usize,
    pub placeholder_frames: Vec<usize>,
    /// Timeline rows top to bottom (GT tubes, then predicted tubes), each a
    /// list of `[start, end)` frame runs.
    pub timeline_rows: Vec<TimelineRow>,
}

fn fill(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn outline(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, t: i64, c: Rgb<u8>) {
    fill(img, x0, y0, x1, y0 + t, c);
    fill(img, x0, y1 - t, x1, y1, c);
    fill(img, x0, y0, x0 + t, y1, c);
    fill(img, x1 - t, y0, x1, y1, c);
}

fn placeholder(img: &mut RgbImage, ox: i64, oy: i64, tile: i64) {
    fill(img, ox, oy, ox + tile, oy + tile, PLACEHOLDER_BG);
    for k in 0..tile {
        fill(img, ox + k, oy + k, ox + k + 2, oy + k + 1, PLACEHOLDER_MARK);
        fill(img, ox + tile - 1 - k, oy + k, ox + tile + 1 - k, oy + k + 1, PLACEHOLDER_MARK);
    }
}

/// Render one (video, expression) case.
pub fn render_case(
    sample: &VideoSample,
    expression_idx: usize,
    pred: Option<&GroundingResult>,
    cfg: &ReportConfig,
) -> RenderedCase {
    let case = &sample.expressions[expression_idx];
    let gts: Vec<Vec<(usize, BBox)>> = case
        .target_tubes
        .iter()
        .map(|t| t.entries.iter().filter_map(|e| sample.region(e[1]).map(|r| (e[0], r.bbox))).collect())
        .collect();
    let tubes: Vec<_> = pred.map_or(Vec::new(), |p| p.tubes.iter().take(cfg.max_tubes).collect());
    let tube_scores: Vec<f64> =
        tubes.iter().map(|t| gts.iter().map(|g| tube_viou(&t.boxes(), g)).fold(0.0, f64::max)).collect();
    let tube_color = |k: usize| if tube_scores[k] < cfg.fail_below { FAIL_COLOR } else { OK_COLOR };

    let last_pred_frame = tubes.iter().flat_map(|t| t.entries.iter().map(|e| e.frame + 1)).max().unwrap_or(0);
    let frames = sample.num_frames.max(last_pred_frame).max(1);
    let cols = cfg.columns.clamp(1, frames);
    let grid_rows = frames.div_ceil(cols);
    let tile = cfg.tile as i64;
    let row_h = 10i64;
    let timeline_rows: Vec<TimelineRow> = case
        .target_tubes
        .iter()
        .map(|t| (GT_COLOR, t.segments()))
        .chain(tubes.iter().enumerate().map(|(k, t)| (tube_color(k), t.segments())))
        .collect();
    let width = cols as i64 * tile;
    let grid_h = grid_rows as i64 * tile;
    let height = grid_h + 4 + row_h * timeline_rows.len().max(1) as i64;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, TIMELINE_BG);
    let scale = tile as f64 / sample.width.max(sample.height).max(1) as f64;
    let to_px = |b: &BBox, ox: i64, oy: i64| {
        (
            ox + (b.x0 * scale).floor() as i64,
            oy + (b.y0 * scale).floor() as i64,
            ox + (b.x1 * scale).ceil() as i64,
            oy + (b.y1 * scale).ceil() as i64,
        )
    };

    let mut placeholders = Vec::new();
    let (mut red, mut blue) = (0, 0);
    for f in 0..frames {
        let ox = (f % cols) as i64 * tile;
        let oy = (f / cols) as i64 * tile;
        let Some(regions) = sample.regions.get(f).filter(|_| f < sample.num_frames) else {
            placeholder(&mut img, ox, oy, tile);
            placeholders.push(f);
            continue;
        };
        fill(&mut img, ox, oy, ox + tile, oy + tile, TILE_BG);
        for r in regions {
            let (x0, y0, x1, y1) = to_px(&r.bbox, ox, oy);
            outline(&mut img, x0, y0, x1, y1, 1, PROPOSAL_COLOR);
            if let Some(c) = pred.and_then(|p| p.region_scores.get(r.region_idx)) {
                let len = ((x1 - x0) as f64 * c.clamp(0.0, 1.0)).round() as i64;
                fill(&mut img, x0, y0 - 3, x0 + len, y0 - 1, SCORE_COLOR);
            }
        }
        for g in &gts {
            for (_, b) in g.iter().filter(|(gf, _)| *gf == f) {
                let (x0, y0, x1, y1) = to_px(b, ox, oy);
                outline(&mut img, x0, y0, x1, y1, 2, GT_COLOR);
            }
        }
        for (k, t) in tubes.iter().enumerate() {
            for e in t.entries.iter().filter(|e| e.frame == f) {
                let (x0, y0, x1, y1) = to_px(&e.bbox, ox, oy);
                outline(&mut img, x0 + 1, y0 + 1, x1 - 1, y1 - 1, 1, tube_color(k));
                if tube_color(k) == FAIL_COLOR {
                    red += 1;
                } else {
                    blue += 1;
                }
            }
        }
        outline(&mut img, ox, oy, ox + tile, oy + tile, 1, PLACEHOLDER_MARK);
    }
    let unit = width as f64 / frames as f64;
    for (row, (color, segs)) in timeline_rows.iter().enumerate() {
        let y = grid_h + 4 + row as i64 * row_h;
        for &(s, e) in segs {
            fill(&mut img, (s as f64 * unit) as i64, y + 1, (e as f64 * unit).ceil() as i64, y + row_h - 1, *color);
        }
    }
    RenderedCase {
        image: img,
        tube_viou: tube_scores,
        red_boxes: red,
        blue_boxes: blue,
        placeholder_frames: placeholders,
        timeline_rows,
    }
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| DstgError::Format(format!("png: {e}")))?;
    Ok(buf.into_inner())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn file_stem(idx: usize, video_id: &str, expr: usize) -> String {
    let clean: String =
        video_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{idx:04}_{clean}_{expr}.png")
}

fn segments_text(segs: &[(usize, usize)]) -> String {
    if segs.is_empty() {
        return "—".into();
    }
    segs.iter().map(|(s, e)| format!("{s}–{}", e - 1)).collect::<Vec<_>>().join(", ")
}

/// Render every case of `samples` into `out_dir` (PNG per case plus
/// `index.html`). Cases without predictions show GT only.
pub fn emit_report(
    preds: &[GroundingResult],
    samples: &[VideoSample],
    out_dir: &Path,
    manifest: Option<&serde_json::Value>,
    cfg: &ReportConfig,
) -> Result<(PathBuf, Vec<CaseSummary>)> {
    std::fs::create_dir_all(out_dir)?;
    let by_key: BTreeMap<(&str, usize), &GroundingResult> =
        preds.iter().map(|p| ((p.video_id.as_str(), p.expression_idx), p)).collect();
    let cases: Vec<(&VideoSample, usize)> =
        samples.iter().flat_map(|s| (0..s.expressions.len()).map(move |e| (s, e))).collect();

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cases.len().max(1));
    let chunk = cases.len().div_ceil(workers).max(1);
    let rendered: Vec<Result<(CaseSummary, Option<&GroundingResult>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cases
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                let by_key = &by_key;
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, &(s, e))| {
                            let pred = by_key.get(&(s.video_id.as_str(), e)).copied();
                            let r = render_case(s, e, pred, cfg);
                            let bytes = png_bytes(&r.image)?;
                            let name = file_stem(ci * chunk + k, &s.video_id, e);
                            std::fs::write(out_dir.join(&name), &bytes)?;
                            Ok((
                                CaseSummary {
                                    video_id: s.video_id.clone(),
                                    expression_idx: e,
                                    image: name,
                                    image_sha256: sha256_hex(&bytes),
                                    tube_viou: r.tube_viou,
                                    red_boxes: r.red_boxes,
                                    blue_boxes: r.blue_boxes,
                                    placeholder_frames: r.placeholder_frames,
                                },
                                pred,
                            ))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("render worker panicked")).collect()
    });

    let mut html = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Grounding report</title>\n<style>\
         body{font-family:sans-serif;margin:1em}table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:4px;vertical-align:top}\
         .gt{color:#00a000}.fail{color:#c81e1e}.ok{color:#285ae6}pre{font-size:11px}</style></head><body>\n<h1>Grounding report</h1>\n\
         <p>GT boxes <span class=\"gt\">green</span>; predicted tubes <span class=\"fail\">red</span> below vIoU ",
    );
    let _ = writeln!(
        html,
        "{:.1}, <span class=\"ok\">blue</span> otherwise; yellow bars are per-region matching scores. Timeline rows: GT tubes, then predicted tubes.</p>",
        cfg.fail_below
    );
    if let Some(m) = manifest {
        let _ = writeln!(
            html,
            "<details><summary>Manifest</summary><pre>{}</pre></details>",
            escape(&serde_json::to_string_pretty(m)?)
        );
    }
    html.push_str("<table>\n<tr><th>#</th><th>case</th><th>expression</th><th>segments</th><th>top region scores</th><th>mosaic</th></tr>\n");
    let mut summaries = Vec::new();
    for (i, item) in rendered.into_iter().enumerate() {
        let (summary, pred) = item?;
        let sample = samples.iter().find(|s| s.video_id == summary.video_id).expect("case comes from samples");
        let case = &sample.expressions[summary.expression_idx];
        let mut seg = String::new();
        for t in &case.target_tubes {
            let _ = write!(seg, "<div class=\"gt\">GT obj {}: {}</div>", t.object_id, segments_text(&t.segments()));
        }
        for (k, t) in pred.map_or(&[][..], |p| &p.tubes[..]).iter().take(cfg.max_tubes).enumerate() {
            let class = if summary.tube_viou[k] < cfg.fail_below { "fail" } else { "ok" };
            let _ = write!(
                seg,
                "<div class=\"{class}\">tube {k} (score {:.3}, vIoU {:.3}): {}</div>",
                t.score,
                summary.tube_viou[k],
                segments_text(&t.segments())
            );
        }
        let mut scores = String::new();
        if let Some(p) = pred {
            let mut ranked: Vec<(usize, f64)> = p.region_scores.iter().copied().enumerate().collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (ri, c) in ranked.into_iter().take(5) {
                let frame = sample.region(ri).map_or(0, |r| r.frame_idx);
                let _ = write!(scores, "<div>r{ri} (f{frame}): {c:.3}</div>");
            }
        }
        if !summary.placeholder_frames.is_empty() {
            let _ = write!(
                scores,
                "<div>placeholder frames: {}</div>",
                segments_text(&frame_runs(&summary.placeholder_frames))
            );
        }
        let _ = writeln!(
            html,
            "<tr><td>{i}</td><td>{}#{}<br>{:?}</td><td>{}</td><td>{seg}</td><td>{scores}</td><td><img src=\"{}\" alt=\"{}\"><br><small>sha256 {}</small></td></tr>",
            escape(&summary.video_id),
            summary.expression_idx,
            case.case_kind,
            escape(&case.expression.join(" ")),
            escape(&summary.image),
            escape(&summary.image),
            summary.image_sha256
        );
        summaries.push(summary);
    }
    html.push_str("</table>\n</body></html>\n");
    let index = out_dir.join("index.html");
    std::fs::write(&index, html)?;
    Ok((index, summaries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::{Tube, TubeEntry, PREDICTION_SCHEMA};
    use crate::synthdata::{generate_dataset, GeneratorConfig};

    fn perfect(s: &VideoSample, e: usize) -> GroundingResult {
        let tubes = s.expressions[e]
            .target_tubes
            .iter()
            .map(|t| Tube {
                entries: t
                    .entries
                    .iter()
                    .map(|en| TubeEntry { frame: en[0], region_idx: en[1], bbox: s.region(en[1]).unwrap().bbox })
                    .collect(),
                score: 1.0,
                link_reward_total: 0.0,
            })
            .collect();
        GroundingResult {
            schema: PREDICTION_SCHEMA.into(),
            video_id: s.video_id.clone(),
            expression_idx: e,
            tubes,
            region_scores: vec![0.5; s.num_regions()],
        }
    }

    fn count(img: &RgbImage, c: Rgb<u8>) -> usize {
        img.pixels().filter(|&&p| p == c).count()
    }

    #[test]
    fn perfect_predictions_have_no_red() {
        let data = generate_dataset(&GeneratorConfig::default(), 3, 5).unwrap();
        for s in &data {
            let r = render_case(s, 0, Some(&perfect(s, 0)), &ReportConfig::default());
            assert_eq!(r.red_boxes, 0);
            assert!(r.blue_boxes > 0);
            assert_eq!(count(&r.image, FAIL_COLOR), 0);
            assert!(r.tube_viou.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn empty_predictions_show_gt_timeline_only() {
        let data = generate_dataset(&GeneratorConfig::default(), 1, 6).unwrap();
        let s = &data[0];
        let r = render_case(s, 0, None, &ReportConfig::default());
        assert_eq!(r.timeline_rows.len(), s.expressions[0].target_tubes.len());
        assert!(r.timeline_rows.iter().all(|(c, _)| *c == GT_COLOR));
        assert_eq!(count(&r.image, FAIL_COLOR) + count(&r.image, OK_COLOR), 0);
        assert!(count(&r.image, GT_COLOR) > 0);
    }

    #[test]
    fn wrong_tube_is_red() {
        let data = generate_dataset(&GeneratorConfig::default(), 1, 8).unwrap();
        let s = &data[0];
        let mut p = perfect(s, 0);
        for t in &mut p.tubes {
            for e in &mut t.entries {
                e.bbox = BBox::new(0.0, 0.0, 4.0, 4.0);
            }
        }
        let r = render_case(s, 0, Some(&p), &ReportConfig::default());
        assert!(r.red_boxes > 0 && r.blue_boxes == 0);
    }

    #[test]
    fn missing_frames_get_placeholders() {
        let data = generate_dataset(&GeneratorConfig::default(), 1, 9).unwrap();
        let mut s = data[0].clone();
        let keep = s.num_frames - 3;
        s.regions.truncate(keep);
        let r = render_case(&s, 0, None, &ReportConfig::default());
        assert_eq!(r.placeholder_frames, (keep..s.num_frames).collect::<Vec<_>>());
    }

    #[test]
    fn report_is_deterministic() {
        let data = generate_dataset(&GeneratorConfig::default(), 2, 10).unwrap();
        let preds: Vec<_> = data.iter().map(|s| perfect(s, 0)).collect();
        let m = serde_json::json!({"command": "report"});
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (ia, sa) = emit_report(&preds, &data, a.path(), Some(&m), &ReportConfig::default()).unwrap();
        let (ib, sb) = emit_report(&preds, &data, b.path(), Some(&m), &ReportConfig::default()).unwrap();
        assert_eq!(std::fs::read(ia).unwrap(), std::fs::read(ib).unwrap());
        assert_eq!(sa, sb);
        assert_eq!(sa.len(), data.iter().map(|s| s.expressions.len()).sum::<usize>());
        for c in &sa {
            assert_eq!(sha256_hex(&std::fs::read(a.path().join(&c.image)).unwrap()), c.image_sha256);
        }
    }
}
