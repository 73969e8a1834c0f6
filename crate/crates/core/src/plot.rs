//! Plain SVG charts and PNG image grids. No plotting backend needed.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::dataset::ImageShape;
use crate::error::{Error, Result};
use crate::metrics::AccuracyRecord;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// A named line; `points[i]` is plotted at x = i + offset.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub offset: usize,
    pub points: Vec<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title)
    );
}

fn y_axis(out: &mut String, label: &str) {
    let plot_h = H - TOP - BOTTOM;
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = TOP + plot_h * (1.0 - v);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"##,
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(label)
    );
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            escape(name)
        );
    }
}

/// Line chart of values in [0, 1] against the 1-based step index.
pub fn line_chart_svg(title: &str, y_label: &str, num_steps: usize, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    y_axis(&mut out, y_label);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let x_of = |step: usize| {
        if num_steps <= 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * (step - 1) as f64 / (num_steps - 1) as f64
        }
    };
    let y_of = |v: f64| TOP + plot_h * (1.0 - v.clamp(0.0, 1.0));
    for step in 1..=num_steps {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{step}</text>"#,
            x_of(step),
            H - BOTTOM + 18.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        LEFT + plot_w / 2.0,
        H - 10.0
    );
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .enumerate()
            .map(|(j, &v)| format!("{:.1},{:.1}", x_of(j + s.offset), y_of(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{colour}"/>"#);
        }
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Observed accuracy plus one curve per task, starting at the step the task
/// was learned.
pub fn accuracy_curves_svg(record: &AccuracyRecord, title: &str) -> String {
    let steps = record.num_steps();
    let mut series = vec![Series {
        name: "observed".into(),
        offset: 1,
        points: record.steps.iter().map(|s| s.observed.value()).collect(),
    }];
    for task in 1..=steps {
        series.push(Series {
            name: format!("task {task}"),
            offset: task,
            points: (task..=steps)
                .filter_map(|l| record.task_accuracy(task, l).map(|f| f.value()))
                .collect(),
        });
    }
    line_chart_svg(title, "accuracy", steps, &series)
}

/// Grouped bars, one group per label and one bar per metric.
pub fn bar_chart_svg(title: &str, metrics: &[&str], groups: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    y_axis(&mut out, "value");
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let group_w = plot_w / groups.len().max(1) as f64;
    let bar_w = group_w * 0.8 / metrics.len().max(1) as f64;
    for (g, (label, values)) in groups.iter().enumerate() {
        let x0 = LEFT + group_w * g as f64 + group_w * 0.1;
        for (k, &v) in values.iter().enumerate() {
            let h = plot_h * v.clamp(0.0, 1.0);
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                x0 + bar_w * k as f64,
                TOP + plot_h - h,
                bar_w,
                h,
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + group_w * 0.4,
            H - BOTTOM + 18.0,
            escape(label)
        );
    }
    legend(&mut out, metrics);
    out.push_str("</svg>\n");
    out
}

/// Tile images (rows of `images`, values in [0, 1]) into a grid, scaled up
/// by `zoom`.
pub fn image_grid(images: &Array2<f64>, shape: ImageShape, cols: usize, zoom: usize) -> Result<image::RgbImage> {
    if images.ncols() != shape.numel() {
        return Err(Error::Shape(format!(
            "image rows have {} values, shape needs {}",
            images.ncols(),
            shape.numel()
        )));
    }
    if cols == 0 || zoom == 0 {
        return Err(Error::InvalidArgument("grid needs at least one column and zoom 1".into()));
    }
    let (c, h, w) = shape.dims();
    let n = images.nrows();
    let rows = n.div_ceil(cols).max(1);
    let pad = 1;
    let cell_w = w * zoom + pad;
    let cell_h = h * zoom + pad;
    let mut img = image::RgbImage::from_pixel((cols * cell_w + pad) as u32, (rows * cell_h + pad) as u32, image::Rgb([40, 40, 40]));
    for (i, row) in images.outer_iter().enumerate() {
        let (gx, gy) = ((i % cols) * cell_w + pad, (i / cols) * cell_h + pad);
        for y in 0..h * zoom {
            for x in 0..w * zoom {
                let at = |ch: usize| {
                    let v = row[ch * h * w + (y / zoom) * w + x / zoom];
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                };
                let px = if c >= 3 { [at(0), at(1), at(2)] } else { [at(0); 3] };
                img.put_pixel((gx + x) as u32, (gy + y) as u32, image::Rgb(px));
            }
        }
    }
    Ok(img)
}

pub fn save_image_grid(images: &Array2<f64>, shape: ImageShape, cols: usize, path: &Path) -> Result<()> {
    let zoom = (64 / shape.height.max(1)).clamp(1, 8);
    image_grid(images, shape, cols, zoom)?
        .save(path)
        .map_err(|e| Error::Io(std::io::Error::other(e)).context(format!("writing {}", path.display())))
}
