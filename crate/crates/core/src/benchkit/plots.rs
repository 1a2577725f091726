//! PNG plots of a run directory.
//!
//! | input                                         | output                    |
//! |-----------------------------------------------|---------------------------|
//! | `metrics.csv` in the run dir or a direct subdir `<name>/` | `plots/loss_<name>.png` (`loss_run.png` at the top level) |
//! | two or more of those logs                     | `plots/loss_overlay.png`  |
//! | `samples/<id>.before.mel` + `samples/<id>.after.mel` | `plots/mel_<id>.png` |
//!
//! Loss curves use a log10 loss axis. Mel heatmaps stack the input above
//! the conversion, low channels at the bottom of each panel.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::io;
use crate::trainer::METRICS_FILE;

pub const PLOTS_DIR: &str = "plots";
pub const SAMPLES_DIR: &str = "samples";
pub const OVERLAY_FILE: &str = "loss_overlay.png";

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;
const HEAT_SCALE: u32 = 4;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
    Rgb([255, 127, 14]),
    Rgb([23, 190, 207]),
];

/// One parsed `step,loss,lr,wall_s` log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn read_loss_curve(path: &Path, name: &str) -> Result<LossCurve> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == crate::trainer::METRICS_HEADER => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    let mut points = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| cols.get(i).and_then(|c| c.trim().parse::<f64>().ok());
        match (parse(0), parse(1)) {
            (Some(step), Some(loss)) if cols.len() == 4 => points.push((step, loss)),
            _ => return Err(bad(format!("bad row {line:?}"))),
        }
    }
    Ok(LossCurve {
        name: name.to_string(),
        points,
    })
}

/// Metrics logs of a run, sorted by name.
fn find_logs(run_dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut logs = Vec::new();
    let top = run_dir.join(METRICS_FILE);
    if top.is_file() {
        logs.push(("run".to_string(), top));
    }
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let csv = entry.path().join(METRICS_FILE);
        if entry.path().is_dir() && csv.is_file() {
            logs.push((entry.file_name().to_string_lossy().into_owned(), csv));
        }
    }
    logs.sort();
    if logs.is_empty() {
        let missing = run_dir.join(METRICS_FILE);
        return Err(Error::io(
            missing,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no metrics CSV in the run directory"),
        ));
    }
    Ok(logs)
}

fn find_samples(run_dir: &Path) -> Result<Vec<String>> {
    let dir = run_dir.join(SAMPLES_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".before.mel") {
            if dir.join(format!("{id}.after.mel")).is_file() {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// File names (relative to the run directory) that [`emit_plots`] writes.
pub fn plot_manifest(run_dir: &Path) -> Result<Vec<String>> {
    let logs = find_logs(run_dir)?;
    let mut names: Vec<String> = logs.iter().map(|(n, _)| format!("{PLOTS_DIR}/loss_{n}.png")).collect();
    if logs.len() >= 2 {
        names.push(format!("{PLOTS_DIR}/{OVERLAY_FILE}"));
    }
    names.extend(find_samples(run_dir)?.iter().map(|id| format!("{PLOTS_DIR}/mel_{id}.png")));
    Ok(names)
}

/// Renders every plot listed by [`plot_manifest`] and returns their paths.
pub fn emit_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let logs = find_logs(run_dir)?;
    let curves: Vec<LossCurve> = logs
        .iter()
        .map(|(name, path)| read_loss_curve(path, name))
        .collect::<Result<_>>()?;
    let out_dir = run_dir.join(PLOTS_DIR);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut written = Vec::new();
    for (i, c) in curves.iter().enumerate() {
        let path = out_dir.join(format!("loss_{}.png", c.name));
        save(&line_plot(std::slice::from_ref(c), i), &path)?;
        written.push(path);
    }
    if curves.len() >= 2 {
        let path = out_dir.join(OVERLAY_FILE);
        save(&line_plot(&curves, 0), &path)?;
        written.push(path);
    }
    for id in find_samples(run_dir)? {
        let dir = run_dir.join(SAMPLES_DIR);
        let before = io::read_mel(&dir.join(format!("{id}.before.mel")))?;
        let after = io::read_mel(&dir.join(format!("{id}.after.mel")))?;
        let path = out_dir.join(format!("mel_{id}.png"));
        save(&heatmap_pair(before.frames().view(), after.frames().view()), &path)?;
        written.push(path);
    }
    Ok(written)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    io::write_atomic(path, &bytes.into_inner())
}

fn draw_segment(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * f, y0 + (y1 - y0) * f);
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Loss against step, log10 loss axis, one colour per curve starting at
/// `first_color`.
fn line_plot(curves: &[LossCurve], first_color: usize) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let pts = curves.iter().flat_map(|c| c.points.iter()).filter(|p| p.1 > 0.0 && p.1.is_finite());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        let ly = y.log10();
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(ly);
        ymax = ymax.max(ly);
    }
    if xmin > xmax {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    if xmax - xmin < 1e-12 {
        xmax = xmin + 1.0;
    }
    if ymax - ymin < 1e-12 {
        ymax = ymin + 1.0;
    }
    let (left, right) = (MARGIN as f64, (WIDTH - MARGIN) as f64);
    let (top, bottom) = (MARGIN as f64, (HEIGHT - MARGIN) as f64);
    let map = |x: f64, y: f64| {
        (
            left + (x - xmin) / (xmax - xmin) * (right - left),
            bottom - (y.log10() - ymin) / (ymax - ymin) * (bottom - top),
        )
    };
    // Decade grid lines.
    for decade in (ymin.floor() as i32)..=(ymax.ceil() as i32) {
        let y = bottom - (decade as f64 - ymin) / (ymax - ymin) * (bottom - top);
        if (top..=bottom).contains(&y) {
            draw_segment(&mut img, (left, y), (right, y), GRID);
        }
    }
    draw_segment(&mut img, (left, bottom), (right, bottom), AXIS);
    draw_segment(&mut img, (left, top), (left, bottom), AXIS);
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[(first_color + i) % PALETTE.len()];
        let valid: Vec<(f64, f64)> = c.points.iter().filter(|p| p.1 > 0.0 && p.1.is_finite()).map(|&(x, y)| map(x, y)).collect();
        for w in valid.windows(2) {
            draw_segment(&mut img, w[0], w[1], color);
        }
        // Legend swatch, top right.
        let y = top + 4.0 + 12.0 * i as f64;
        draw_segment(&mut img, (right - 40.0, y), (right - 10.0, y), color);
    }
    img
}

/// Piecewise-linear approximation of the viridis colour map.
fn viridis(v: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let x = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (STOPS[i][k] + (STOPS[i + 1][k] - STOPS[i][k]) * f).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Two mel panels on a shared colour scale: `before` on top, `after` below.
fn heatmap_pair(before: ArrayView2<f32>, after: ArrayView2<f32>) -> RgbImage {
    let frames = before.nrows().max(after.nrows()) as u32;
    let chans = before.ncols().max(after.ncols()) as u32;
    let gap = 2 * HEAT_SCALE;
    let mut img = RgbImage::from_pixel(frames * HEAT_SCALE, 2 * chans * HEAT_SCALE + gap, BACKGROUND);
    let all = before.iter().chain(after.iter()).copied();
    let (lo, hi) = all.fold((f32::MAX, f32::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-6) as f64;
    for (panel, mel) in [before, after].into_iter().enumerate() {
        let y0 = panel as u32 * (chans * HEAT_SCALE + gap);
        for ((t, c), &v) in mel.indexed_iter() {
            let color = viridis((v - lo) as f64 / span);
            let row = chans - 1 - c as u32;
            for dy in 0..HEAT_SCALE {
                for dx in 0..HEAT_SCALE {
                    img.put_pixel(t as u32 * HEAT_SCALE + dx, y0 + row * HEAT_SCALE + dy, color);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::MelSpectrogram;
    use ndarray::Array2;

    fn write_log(dir: &Path, rows: &[(u64, f64)]) {
        fs::create_dir_all(dir).unwrap();
        let mut s = format!("{}\n", crate::trainer::METRICS_HEADER);
        for (step, loss) in rows {
            s.push_str(&format!("{step},{loss},0.001,0.5\n"));
        }
        fs::write(dir.join(METRICS_FILE), s).unwrap();
    }

    #[test]
    fn empty_run_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_plots(dir.path()), Err(Error::Io { .. })));
        assert!(matches!(emit_plots(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn two_ablation_logs_give_one_overlay() {
        let dir = tempfile::tempdir().unwrap();
        write_log(&dir.path().join("units-finetune"), &[(10, 1.0), (20, 0.5), (30, 0.3)]);
        write_log(&dir.path().join("mel-finetune"), &[(10, 1.0), (20, 0.8), (30, 0.7)]);
        let written = emit_plots(dir.path()).unwrap();
        let names: Vec<String> = written
            .iter()
            .map(|p| p.strip_prefix(dir.path()).unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, plot_manifest(dir.path()).unwrap());
        assert_eq!(names.iter().filter(|n| n.ends_with(OVERLAY_FILE)).count(), 1);
        let img = image::open(dir.path().join(PLOTS_DIR).join(OVERLAY_FILE)).unwrap();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
    }

    #[test]
    fn manifest_lists_losses_and_heatmaps() {
        let dir = tempfile::tempdir().unwrap();
        write_log(dir.path(), &[(1, 2.0), (2, 1.0)]);
        let samples = dir.path().join(SAMPLES_DIR);
        let mel = MelSpectrogram::new(Array2::from_shape_fn((12, 80), |(t, c)| (t + c) as f32 * 0.1)).unwrap();
        io::write_mel(&samples.join("utt7.before.mel"), &mel).unwrap();
        io::write_mel(&samples.join("utt7.after.mel"), &mel).unwrap();
        io::write_mel(&samples.join("lonely.before.mel"), &mel).unwrap();
        assert_eq!(
            plot_manifest(dir.path()).unwrap(),
            vec!["plots/loss_run.png".to_string(), "plots/mel_utt7.png".to_string()]
        );
        let written = emit_plots(dir.path()).unwrap();
        assert_eq!(written.len(), 2);
        let heat = image::open(&written[1]).unwrap();
        assert_eq!(heat.width(), 12 * HEAT_SCALE);
    }

    #[test]
    fn malformed_csv_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(METRICS_FILE), "step,loss\n1,2\n").unwrap();
        assert!(matches!(emit_plots(dir.path()), Err(Error::Format { .. })));
    }
}
