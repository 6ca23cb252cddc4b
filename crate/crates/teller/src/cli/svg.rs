//! Tiny hand-rolled SVG charts. CSV is the canonical artifact; these are a
//! quick visual check.

use crate::pipeline::{LatencyTrace, Stage, StageBudget};

const STAGE_COLORS: [(&str, &str); 5] = [
    ("audio", "#4c78a8"),
    ("ar", "#f58518"),
    ("motion_decode", "#54a24b"),
    ("interp", "#b279a2"),
    ("etm", "#e45756"),
];

fn color_for(stage: Stage) -> &'static str {
    STAGE_COLORS[Stage::ALL.iter().position(|&s| s == stage).unwrap()].1
}

/// Stacked horizontal bars, one per chunk, with the 200ms budget line.
pub fn latency_chart(trace: &LatencyTrace) -> String {
    let chunks = trace.chunks();
    let row_h = 22.0;
    let left = 70.0;
    let width = 640.0;
    let height = 60.0 + chunks as f64 * row_h;
    let max_ms = trace
        .rows
        .iter()
        .map(|r| r.end_ms - r.start_ms)
        .fold(0.0f64, |acc, d| acc + d)
        .max(200.0)
        .min(
            (0..chunks)
                .map(|c| trace.chunk_compute_ms(c))
                .fold(0.0f64, f64::max)
                .max(200.0)
                * 1.15,
        );
    let scale = (width - left - 20.0) / max_ms;

    let mut s = svg_open(width, height);
    s.push_str(&format!(
        "<text x=\"{left}\" y=\"16\" font-size=\"13\" font-family=\"sans-serif\">per-chunk stage times (ms)</text>\n"
    ));
    for (c, chunk) in (0..chunks).enumerate() {
        let y = 30.0 + c as f64 * row_h;
        s.push_str(&format!(
            "<text x=\"4\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\">chunk {chunk}</text>\n",
            y + 13.0
        ));
        let mut x = left;
        for row in trace.rows.iter().filter(|r| r.chunk == chunk) {
            let w = (row.end_ms - row.start_ms) * scale;
            s.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{y:.1}\" width=\"{:.2}\" height=\"{:.1}\" fill=\"{}\"><title>{}: {:.3} ms</title></rect>\n",
                w.max(0.5),
                row_h - 4.0,
                color_for(row.stage),
                row.stage.name(),
                row.end_ms - row.start_ms
            ));
            x += w;
        }
    }
    // budget line at 200ms
    let bx = left + 200.0 * scale;
    s.push_str(&format!(
        "<line x1=\"{bx:.1}\" y1=\"24\" x2=\"{bx:.1}\" y2=\"{:.1}\" stroke=\"#333\" stroke-dasharray=\"4 3\"/>\n",
        height - 20.0
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" font-family=\"sans-serif\">200ms</text>\n",
        bx + 3.0,
        height - 24.0
    ));
    legend(&mut s, left, height - 12.0);
    s.push_str("</svg>\n");
    s
}

/// Stage budget bars for the simulated schedule.
pub fn budget_chart(budget: &StageBudget) -> String {
    let bars = [
        ("audio encoder", budget.audio_encoder_ms, "#4c78a8"),
        ("stage 1 total", budget.stage1_total_ms, "#f58518"),
        ("stage 2 total", budget.stage2_total_ms, "#e45756"),
        ("per chunk", budget.per_chunk_ms(), "#54a24b"),
    ];
    let width = 520.0;
    let row_h = 26.0;
    let left = 110.0;
    let height = 40.0 + bars.len() as f64 * row_h;
    let scale = (width - left - 60.0) / 220.0f64.max(budget.per_chunk_ms() * 1.1);
    let mut s = svg_open(width, height);
    s.push_str(
        "<text x=\"8\" y=\"16\" font-size=\"13\" font-family=\"sans-serif\">stage budgets (ms)</text>\n",
    );
    for (i, (name, ms, color)) in bars.iter().enumerate() {
        let y = 28.0 + i as f64 * row_h;
        s.push_str(&format!(
            "<text x=\"4\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\">{name}</text>\n",
            y + 14.0
        ));
        s.push_str(&format!(
            "<rect x=\"{left}\" y=\"{y:.1}\" width=\"{:.2}\" height=\"{:.1}\" fill=\"{color}\"/>\n",
            ms * scale,
            row_h - 6.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\">{ms}</text>\n",
            left + ms * scale + 6.0,
            y + 14.0
        ));
    }
    let bx = left + 200.0 * scale;
    s.push_str(&format!(
        "<line x1=\"{bx:.1}\" y1=\"24\" x2=\"{bx:.1}\" y2=\"{:.1}\" stroke=\"#333\" stroke-dasharray=\"4 3\"/>\n",
        height - 8.0
    ));
    s.push_str("</svg>\n");
    s
}

/// Simple line chart: x values with one series of y values (used by the
/// compression sweep).
pub fn line_chart(title: &str, xs: &[f64], ys: &[f64], x_label: &str, y_label: &str) -> String {
    assert_eq!(xs.len(), ys.len());
    let width = 520.0;
    let height = 320.0;
    let (l, r, t, b) = (60.0, 20.0, 30.0, 40.0);
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let y_min = 0.0f64.min(ys.iter().cloned().fold(f64::INFINITY, f64::min));
    let y_max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * 1.1;
    let px = |x: f64| l + (x - x_min) / (x_max - x_min).max(1e-12) * (width - l - r);
    let py = |y: f64| height - b - (y - y_min) / (y_max - y_min).max(1e-12) * (height - t - b);

    let mut s = svg_open(width, height);
    s.push_str(&format!(
        "<text x=\"{l}\" y=\"18\" font-size=\"13\" font-family=\"sans-serif\">{title}</text>\n"
    ));
    s.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
        height - b,
        width - r,
        height - b
    ));
    s.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
        height - b
    ));
    let pts: Vec<String> = xs
        .iter()
        .zip(ys.iter())
        .map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y)))
        .collect();
    s.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#4c78a8\" stroke-width=\"2\"/>\n",
        pts.join(" ")
    ));
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        s.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#4c78a8\"><title>{x}: {y:.5}</title></circle>\n",
            px(x),
            py(y)
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"middle\">{x}</text>\n",
            px(x),
            height - b + 14.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"middle\">{x_label}</text>\n",
        (l + width - r) / 2.0,
        height - 6.0
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">{y_label}</text>\n",
        (t + height - b) / 2.0,
        (t + height - b) / 2.0
    ));
    s.push_str("</svg>\n");
    s
}

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn legend(s: &mut String, x: f64, y: f64) {
    let mut cx = x;
    for (name, color) in STAGE_COLORS {
        s.push_str(&format!(
            "<rect x=\"{cx:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            y - 9.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"10\" font-family=\"sans-serif\">{name}</text>\n",
            cx + 13.0
        ));
        cx += 16.0 + 7.0 * name.len() as f64;
    }
}
