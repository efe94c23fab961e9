//! Accuracy curves from results files: an SVG line chart and the merged
//! table of plotted points.

use std::fmt::Write as _;
use std::io::Write;

use fedrecon::benchmark::{EvalPoint, EvalRecord};

/// One plotted point: a server-side evaluation of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub method: String,
    pub mission: usize,
    pub eval_point: EvalPoint,
    pub acc_base: Option<f64>,
    pub acc_field: Option<f64>,
    pub acc_avg: f64,
}

pub const TABLE_HEADER: [&str; 6] = ["method", "mission", "eval_point", "acc_base", "acc_field", "acc_avg"];

const METRICS: [(&str, &str); 3] = [("acc_base", ""), ("acc_field", "6,4"), ("acc_avg", "2,3")];
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 240.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

/// Pre-mission and post-merge records, in file order. Client-side records
/// are not plotted.
pub fn rows(method: &str, records: &[EvalRecord]) -> Vec<Row> {
    records
        .iter()
        .filter(|r| matches!(r.eval_point, EvalPoint::PreMission | EvalPoint::PostMerge))
        .map(|r| Row {
            method: method.to_string(),
            mission: r.mission,
            eval_point: r.eval_point,
            acc_base: r.acc_base,
            acc_field: r.acc_field,
            acc_avg: r.acc_avg,
        })
        .collect()
}

impl Row {
    fn metric(&self, i: usize) -> Option<f64> {
        match i {
            0 => self.acc_base,
            1 => self.acc_field,
            _ => Some(self.acc_avg),
        }
    }
}

pub fn write_table<W: Write>(rows: &[Row], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_HEADER)?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.mission.to_string(),
            r.eval_point.to_string(),
            opt(r.acc_base),
            opt(r.acc_field),
            format!("{:.6}", r.acc_avg),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line chart of every metric of every method against mission index. Colour
/// identifies the method and dash pattern the metric.
pub fn render_svg(rows: &[Row]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let max_mission = rows.iter().map(|r| r.mission).max().unwrap_or(1).max(1);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |m: usize| LEFT + plot_w * m as f64 / max_mission as f64;
    let y = |v: f64| TOP + plot_h * (1.0 - v);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">accuracy by mission</text>"#,
        LEFT + plot_w / 2.0
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{2}" y="{3:.1}" text-anchor="end">{v:.1}</text>"##,
            y(v),
            LEFT + plot_w,
            LEFT - 6.0,
            y(v) + 4.0
        );
    }
    let step = max_mission.div_ceil(20).max(1);
    for m in (0..=max_mission).step_by(step) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{m}</text>"#,
            x(m),
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">mission</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0:.1}" text-anchor="middle" transform="rotate(-90 16 {0:.1})">accuracy</text>"#,
        TOP + plot_h / 2.0
    );

    let mut legend_y = TOP + 10.0;
    for (k, method) in methods.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let name = escape(method);
        for (i, (metric, dash)) in METRICS.iter().enumerate() {
            let points: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| r.method == *method)
                .filter_map(|r| r.metric(i).map(|v| (r.mission, v)))
                .collect();
            if points.is_empty() {
                continue;
            }
            let coords: Vec<String> = points
                .iter()
                .map(|(m, v)| format!("{:.1},{:.1}", x(*m), y(*v)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline class="curve" data-method="{name}" data-metric="{metric}" points="{}" fill="none" stroke="{colour}" stroke-width="2" stroke-dasharray="{dash}"/>"#,
                coords.join(" ")
            );
            for (m, v) in &points {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{colour}"/>"#,
                    x(*m),
                    y(*v)
                );
            }
            let lx = WIDTH - RIGHT + 20.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="{colour}" stroke-width="2" stroke-dasharray="{dash}"/><text class="legend" x="{}" y="{}">{name} {metric}</text>"#,
                lx + 30.0,
                lx + 38.0,
                legend_y + 4.0
            );
            legend_y += 18.0;
        }
    }
    s.push_str("</svg>\n");
    s
}
