//! Hand-rolled static SVG plots: loss curves with seed-band shading and
//! iso-vs-anisotropic bar charts. Output is deterministic: regenerating
//! from unchanged logs yields byte-identical files.

use std::collections::BTreeMap;

use iclbench::eval::ConfigReport;
use iclbench::training::RunLog;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

const TEST_COLOR: &str = "#1f77b4";
const TRAIN_COLOR: &str = "#ff7f0e";
const ISO_COLOR: &str = "#1f77b4";
const ANISO_COLOR: &str = "#d62728";

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Tick values at a round step covering `[0, max]`.
fn ticks(max: f64, target: usize) -> Vec<f64> {
    if !(max > 0.0) {
        return vec![0.0, 1.0];
    }
    let raw = max / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag);
    let mut out = Vec::new();
    let mut v = 0.0;
    while v <= max * 1.0001 {
        out.push(v);
        v += step;
    }
    out
}

struct Frame {
    x_max: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN_L + (v / self.x_max) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN_B - (v / self.y_max) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn push_header(svg: &mut String, title: &str, provenance: &str) {
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str(&format!("<!-- data: {provenance} -->\n"));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        WIDTH / 2.0
    ));
}

fn push_axes(svg: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let x0 = MARGIN_L;
    let x1 = WIDTH - MARGIN_R;
    let y0 = HEIGHT - MARGIN_B;
    let y1 = MARGIN_T;
    svg.push_str(&format!(
        "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y0:.2}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x0:.2}\" y2=\"{y1:.2}\" stroke=\"black\"/>\n"
    ));
    for t in ticks(frame.x_max, 6) {
        let x = frame.x(t);
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{y0:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            y0 + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            y0 + 20.0,
            if t >= 1000.0 {
                format!("{:.0}k", t / 1000.0)
            } else {
                format!("{t:.0}")
            }
        ));
    }
    for t in ticks(frame.y_max, 5) {
        let y = frame.y(t);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{x0:.2}\" y2=\"{y:.2}\" stroke=\"black\"/>\n",
            x0 - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            x0 - 9.0,
            y + 4.0,
            fmt(t)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{x_label}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{y_label}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    ));
}

fn polyline(points: &[(f64, f64)], frame: &Frame, color: &str, dashed: bool) -> String {
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", frame.x(x), frame.y(y)))
        .collect();
    let dash = if dashed {
        " stroke-dasharray=\"6 4\""
    } else {
        ""
    };
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"{dash}/>\n",
        coords.join(" ")
    )
}

/// Aligned per-step aggregates across seeds; steps present in every log.
struct AlignedSeries {
    /// (samples, mean, min, max) of the isotropic test loss.
    test: Vec<(f64, f64, f64, f64)>,
    /// (samples, mean) of the windowed train loss.
    train: Vec<(f64, f64)>,
}

fn align(logs: &[&RunLog]) -> AlignedSeries {
    let mut by_step: BTreeMap<u64, (u64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for log in logs {
        for r in &log.records {
            let entry = by_step
                .entry(r.step)
                .or_insert_with(|| (r.samples_seen, Vec::new(), Vec::new()));
            entry.1.push(r.test_loss);
            if let Some(tl) = r.train_loss {
                entry.2.push(tl);
            }
        }
    }
    let n = logs.len();
    let mut test = Vec::new();
    let mut train = Vec::new();
    for (_, (samples, tests, trains)) in by_step {
        if tests.len() != n {
            continue;
        }
        let mean = tests.iter().sum::<f64>() / n as f64;
        let min = tests.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = tests.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        test.push((samples as f64, mean, min, max));
        if trains.len() == n {
            train.push((samples as f64, trains.iter().sum::<f64>() / n as f64));
        }
    }
    AlignedSeries { test, train }
}

/// Loss curves for one configuration: mean test loss with a min-max band
/// across seeds, plus the mean windowed training loss.
pub fn curve_svg(title: &str, provenance: &str, logs: &[&RunLog]) -> String {
    let series = align(logs);
    let x_max = series
        .test
        .iter()
        .map(|p| p.0)
        .fold(1.0f64, f64::max);
    let y_max = series
        .test
        .iter()
        .map(|p| p.3)
        .chain(series.train.iter().map(|p| p.1))
        .fold(0.1f64, f64::max)
        * 1.08;
    let frame = Frame { x_max, y_max };

    let mut svg = String::new();
    push_header(&mut svg, title, provenance);
    push_axes(&mut svg, &frame, "samples seen", "normalized loss");

    if series.test.len() > 1 {
        let mut d = String::from("M");
        for p in &series.test {
            d.push_str(&format!(" {:.2},{:.2}", frame.x(p.0), frame.y(p.3)));
        }
        for p in series.test.iter().rev() {
            d.push_str(&format!(" {:.2},{:.2}", frame.x(p.0), frame.y(p.2)));
        }
        d.push_str(" Z");
        svg.push_str(&format!(
            "<path d=\"{d}\" fill=\"{TEST_COLOR}\" opacity=\"0.15\" stroke=\"none\"/>\n"
        ));
    }
    let test_mean: Vec<(f64, f64)> = series.test.iter().map(|p| (p.0, p.1)).collect();
    svg.push_str(&polyline(&test_mean, &frame, TEST_COLOR, false));
    if !series.train.is_empty() {
        svg.push_str(&polyline(&series.train, &frame, TRAIN_COLOR, true));
    }

    // Legend.
    let lx = WIDTH - MARGIN_R - 190.0;
    svg.push_str(&format!(
        "<line x1=\"{lx:.2}\" y1=\"52\" x2=\"{:.2}\" y2=\"52\" stroke=\"{TEST_COLOR}\" stroke-width=\"1.8\"/>\n",
        lx + 28.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"56\">test (mean, seed band)</text>\n",
        lx + 34.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{lx:.2}\" y1=\"72\" x2=\"{:.2}\" y2=\"72\" stroke=\"{TRAIN_COLOR}\" stroke-width=\"1.8\" stroke-dasharray=\"6 4\"/>\n",
        lx + 28.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"76\">train (mean)</text>\n",
        lx + 34.0
    ));

    svg.push_str("</svg>\n");
    svg
}

/// Grouped iso-vs-anisotropic bars with relative-degradation labels, one
/// group per configuration row.
pub fn robustness_svg(title: &str, provenance: &str, configs: &[ConfigReport]) -> String {
    let y_max = configs
        .iter()
        .flat_map(|c| [c.mean_test_loss, c.mean_aniso_loss])
        .fold(0.1f64, f64::max)
        * 1.2;
    let frame = Frame {
        x_max: 1.0,
        y_max,
    };

    let mut svg = String::new();
    push_header(&mut svg, title, provenance);
    push_axes(&mut svg, &frame, "", "normalized loss");

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let group_w = plot_w / configs.len().max(1) as f64;
    let bar_w = (group_w * 0.3).min(60.0);
    let base_y = HEIGHT - MARGIN_B;

    for (i, c) in configs.iter().enumerate() {
        let cx = MARGIN_L + (i as f64 + 0.5) * group_w;
        let bars = [
            (cx - bar_w - 2.0, c.mean_test_loss, ISO_COLOR),
            (cx + 2.0, c.mean_aniso_loss, ANISO_COLOR),
        ];
        for (x, value, color) in bars {
            let top = frame.y(value);
            svg.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{top:.2}\" width=\"{bar_w:.2}\" height=\"{:.2}\" fill=\"{color}\"/>\n",
                base_y - top
            ));
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
                x + bar_w / 2.0,
                top - 4.0,
                format!("{value:.3}")
            ));
        }
        if let Some(pct) = c.degradation_pct {
            svg.push_str(&format!(
                "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\" font-weight=\"bold\">{}</text>\n",
                frame.y(c.mean_test_loss.max(c.mean_aniso_loss)) - 20.0,
                format!("{pct:+.1}%")
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{} L{}</text>\n",
            base_y + 20.0,
            c.attention,
            c.layers
        ));
    }

    // Legend.
    let lx = WIDTH - MARGIN_R - 150.0;
    svg.push_str(&format!(
        "<rect x=\"{lx:.2}\" y=\"44\" width=\"14\" height=\"14\" fill=\"{ISO_COLOR}\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"56\">isotropic</text>\n",
        lx + 20.0
    ));
    svg.push_str(&format!(
        "<rect x=\"{lx:.2}\" y=\"64\" width=\"14\" height=\"14\" fill=\"{ANISO_COLOR}\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"76\">anisotropic</text>\n",
        lx + 20.0
    ));

    svg.push_str("</svg>\n");
    svg
}
