//! Aggregated evaluation report and its JSON, CSV and SVG renderings.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    confusion_metrics, edf_frames, edf_frames_binary, edf_match, heart_rate_bins, transition_error_split, EdfScore,
    EdfSource, EvalPair, HeartRateTable, Rates, TransitionSplit, Weighting,
};
use crate::pipeline::{Evaluated, Rejection};

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub id: String,
    pub frames: usize,
    pub eligible_frames: usize,
    pub heart_rate_bpm: f64,
    pub accuracy: Option<f64>,
    pub edf: EdfScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequences: usize,
    pub eligible_frames: usize,
    pub edf_tolerance: usize,
    pub per_angiography: Rates,
    pub per_frame: Rates,
    pub edf: EdfScore,
    pub transitions: TransitionSplit,
    pub heart_rate: HeartRateTable,
    pub per_sequence: Vec<SequenceResult>,
    pub rejected: Vec<Rejection>,
}

fn sequence_result(e: &Evaluated, tol: usize) -> SequenceResult {
    let pair = &e.pair;
    let confusion = pair.confusion();
    let predicted = edf_frames_binary(&pair.pred);
    let truth = edf_frames(&pair.gt, EdfSource::GroundTruth);
    SequenceResult {
        id: pair.id.clone(),
        frames: pair.gt.len(),
        eligible_frames: confusion.total(),
        heart_rate_bpm: e.heart_rate_bpm,
        accuracy: confusion.rates().accuracy,
        edf: edf_match(&predicted, &truth, tol),
    }
}

pub fn build_report(evaluated: &[Evaluated], rejected: Vec<Rejection>, edf_tolerance: usize) -> Result<MetricReport> {
    let pairs: Vec<EvalPair> = evaluated.iter().map(|e| e.pair.clone()).collect();
    let per_sequence: Vec<SequenceResult> = evaluated.iter().map(|e| sequence_result(e, edf_tolerance)).collect();
    let hr: Vec<(f64, Option<f64>)> = per_sequence.iter().map(|s| (s.heart_rate_bpm, s.accuracy)).collect();
    let edf_scores: Vec<EdfScore> = per_sequence.iter().map(|s| s.edf).collect();
    Ok(MetricReport {
        sequences: pairs.len(),
        eligible_frames: per_sequence.iter().map(|s| s.eligible_frames).sum(),
        edf_tolerance,
        per_angiography: confusion_metrics(&pairs, Weighting::PerAngiography)?,
        per_frame: confusion_metrics(&pairs, Weighting::PerFrame)?,
        edf: EdfScore::pooled(&edf_scores),
        transitions: transition_error_split(&pairs),
        heart_rate: heart_rate_bins(&hr),
        per_sequence,
        rejected,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One `section,key,value` row per scalar.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(String, String, String)> = vec![
            ("summary".into(), "sequences".into(), self.sequences.to_string()),
            ("summary".into(), "eligible_frames".into(), self.eligible_frames.to_string()),
            ("summary".into(), "rejected".into(), self.rejected.len().to_string()),
        ];
        for (section, r) in [("per_angiography", &self.per_angiography), ("per_frame", &self.per_frame)] {
            for (k, v) in [
                ("accuracy", r.accuracy),
                ("sensitivity", r.sensitivity),
                ("specificity", r.specificity),
                ("ppv", r.ppv),
                ("npv", r.npv),
            ] {
                rows.push((section.into(), k.into(), opt(v)));
            }
        }
        let e = &self.edf;
        rows.push(("edf".into(), "tolerance".into(), self.edf_tolerance.to_string()));
        rows.push(("edf".into(), "matched".into(), e.matched.to_string()));
        rows.push(("edf".into(), "predicted".into(), e.predicted.to_string()));
        rows.push(("edf".into(), "truth".into(), e.truth.to_string()));
        rows.push(("edf".into(), "precision".into(), e.precision.to_string()));
        rows.push(("edf".into(), "recall".into(), e.recall.to_string()));
        rows.push(("edf".into(), "f1".into(), e.f1.to_string()));
        let t = &self.transitions;
        rows.push(("transitions".into(), "errors".into(), t.errors.to_string()));
        rows.push(("transitions".into(), "unattributed".into(), t.unattributed.to_string()));
        rows.push(("transitions".into(), "systole_to_diastole".into(), opt(t.systole_to_diastole)));
        rows.push(("transitions".into(), "diastole_to_systole".into(), opt(t.diastole_to_systole)));
        for b in self.heart_rate.bins.iter().chain([&self.heart_rate.out_of_range]) {
            let section = format!("heart_rate:{}", b.label);
            rows.push((section.clone(), "count".into(), b.count.to_string()));
            rows.push((section.clone(), "share".into(), b.share.to_string()));
            rows.push((section, "mean_accuracy".into(), opt(b.mean_accuracy)));
        }
        for s in &self.per_sequence {
            let section = format!("sequence:{}", s.id);
            rows.push((section.clone(), "heart_rate_bpm".into(), s.heart_rate_bpm.to_string()));
            rows.push((section.clone(), "accuracy".into(), opt(s.accuracy)));
            rows.push((section, "edf_f1".into(), s.edf.f1.to_string()));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["section", "key", "value"]).expect("in-memory write");
        for (a, b, c) in rows {
            w.write_record([a, b, c]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush to vec")).expect("utf-8 csv")
    }

    /// Writes `metrics.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [(METRICS_JSON, self.to_json()), (METRICS_CSV, self.to_csv())] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn load_report(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::format(format!("{}:{}", path.display(), e.path()), e.to_string()))
}

/// Probability, prediction and ground truth over one sequence as an SVG
/// line chart. Frame indices are original-rate frames.
pub fn probability_svg(e: &Evaluated) -> String {
    let n = e.pair.gt.len().max(2);
    let (w, h, pad) = (720.0, 240.0, 30.0);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
    let line = |values: &mut dyn Iterator<Item = f64>| {
        values
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r##"<line x1="{pad}" y1="{y5:.2}" x2="{x2}" y2="{y5:.2}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
        y5 = y(0.5),
        x2 = w - pad
    )
    .unwrap();
    let bw = (w - 2.0 * pad) / (n - 1) as f64;
    for i in (0..e.pair.eligible.len()).filter(|&i| !e.pair.eligible[i]) {
        let x0 = x(i) - bw / 2.0;
        writeln!(s, r##"<rect x="{x0:.2}" y="{pad}" width="{bw:.2}" height="{ih}" fill="#f3e6c8"/>"##, ih = h - 2.0 * pad).unwrap();
    }
    let gt = line(&mut e.pair.gt.iter().copied());
    let pred = line(&mut e.pair.pred.iter().map(|&p| p as f64));
    let prob = line(&mut e.probabilities.iter().copied());
    writeln!(s, r##"<polyline points="{gt}" fill="none" stroke="#2a7" stroke-width="2"/>"##).unwrap();
    writeln!(s, r##"<polyline points="{pred}" fill="none" stroke="#c33" stroke-width="1" stroke-dasharray="3 2"/>"##).unwrap();
    writeln!(s, r##"<polyline points="{prob}" fill="none" stroke="#236" stroke-width="1.5"/>"##).unwrap();
    writeln!(
        s,
        r#"<text x="{pad}" y="18" font-family="sans-serif" font-size="12">{} (frames {}..{})</text>"#,
        xml_escape(&e.pair.id),
        e.first_frame,
        e.first_frame + e.pair.gt.len()
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
