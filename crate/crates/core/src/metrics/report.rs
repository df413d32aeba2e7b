use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::eval::SelectMode;
use crate::corpus::TaskKind;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskScore {
    pub kind: TaskKind,
    /// `exact_match` for classification, `rouge_l` for generation.
    pub metric: String,
    pub value: f64,
    /// ROUGE-L regardless of kind (feeds the overall figure).
    pub rouge_l: f64,
    pub n_instances: usize,
}

/// Unweighted means over tasks; `None` when no task of that kind exists.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub exact_match: Option<f64>,
    pub rouge_l: Option<f64>,
    pub rouge_l_overall: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl Aggregate {
    pub fn from_scores(per_task: &BTreeMap<String, TaskScore>) -> Self {
        let of = |k: TaskKind| mean(per_task.values().filter(|s| s.kind == k).map(|s| s.value));
        Self {
            exact_match: of(TaskKind::Classification),
            rouge_l: of(TaskKind::Generation),
            rouge_l_overall: mean(per_task.values().map(|s| s.rouge_l)).unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub select: SelectMode,
    pub seed: u64,
    pub per_task: BTreeMap<String, TaskScore>,
    pub aggregate: Aggregate,
    /// Decoded predictions per task, in instance order.
    pub predictions: BTreeMap<String, Vec<String>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,kind,metric,value,rouge_l,n_instances\n");
        for (id, s) in &self.per_task {
            let kind = match s.kind {
                TaskKind::Classification => "classification",
                TaskKind::Generation => "generation",
            };
            let _ = writeln!(out, "{},{kind},{},{:.4},{:.4},{}", csv_field(id), s.metric, s.value, s.rouge_l, s.n_instances);
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        xml_escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
    );
}

/// Line chart of one or more `(x, y)` series with a shared, auto-scaled axis.
pub fn render_line_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let pts = series.iter().flat_map(|(_, s)| s.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if x0 > x1 {
        out.push_str("</svg>\n");
        return out;
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.3}</text>", PAD - 4.0, PAD + 4.0);
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.3}</text>", PAD - 4.0, H - PAD);
    let _ = writeln!(out, "<text x=\"{PAD}\" y=\"{}\">{x0}</text>", H - PAD + 14.0);
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x1}</text>", W - PAD, H - PAD + 14.0);
    for (i, (name, s)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> =
            s.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(out, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\" points=\"{}\"/>", path.join(" "));
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            W - PAD - 120.0,
            PAD + 14.0 * i as f64,
            xml_escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart of labelled values on a 0–100 scale.
pub fn render_bar_svg(title: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let n = bars.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = v.clamp(0.0, 100.0) / 100.0 * (H - 2.0 * PAD);
        let x = PAD + slot * i as f64 + slot * 0.1;
        let _ = writeln!(
            out,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"><title>{}: {v:.2}</title></rect>",
            H - PAD - h,
            slot * 0.8,
            COLORS[0],
            xml_escape(label)
        );
        if bars.len() <= 20 {
            let _ = writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-size=\"9\">{}</text>",
                x + slot * 0.4,
                H - PAD + 12.0,
                xml_escape(label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(kind: TaskKind, value: f64, rouge: f64) -> TaskScore {
        TaskScore { kind, metric: "m".into(), value, rouge_l: rouge, n_instances: 1 }
    }

    #[test]
    fn macro_averages_by_kind() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), score(TaskKind::Classification, 100.0, 100.0));
        m.insert("b".to_string(), score(TaskKind::Classification, 0.0, 50.0));
        m.insert("c".to_string(), score(TaskKind::Generation, 30.0, 30.0));
        let a = Aggregate::from_scores(&m);
        assert_eq!(a.exact_match, Some(50.0));
        assert_eq!(a.rouge_l, Some(30.0));
        assert_eq!(a.rouge_l_overall, 60.0);
        let perfect: BTreeMap<_, _> = m.keys().map(|k| (k.clone(), score(TaskKind::Generation, 100.0, 100.0))).collect();
        assert_eq!(Aggregate::from_scores(&perfect).rouge_l_overall, 100.0);
        assert_eq!(Aggregate::from_scores(&perfect).exact_match, None);
    }

    #[test]
    fn csv_and_svg_are_well_formed() {
        let mut per_task = BTreeMap::new();
        per_task.insert("x,y".to_string(), score(TaskKind::Generation, 12.5, 12.5));
        let r = EvalReport {
            select: SelectMode::Sampled,
            seed: 0,
            aggregate: Aggregate::from_scores(&per_task),
            per_task,
            predictions: BTreeMap::new(),
        };
        assert_eq!(r.to_csv(), "task_id,kind,metric,value,rouge_l,n_instances\n\"x,y\",generation,m,12.5000,12.5000,1\n");
        let svg = render_line_svg("loss <1>", &[("nll".into(), vec![(1.0, 2.0), (2.0, 1.0)])]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n") && svg.contains("&lt;1&gt;"));
        let svg = render_bar_svg("scores", &[("a".into(), 50.0)]);
        assert!(svg.contains("<rect x="));
    }
}
