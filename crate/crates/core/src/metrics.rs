//! Box-level evaluation: success rate at IoU thresholds, AUC over a
//! threshold grid, and AP ranked by pipeline confidence. Multi-source
//! evaluation is class-aware.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GroundTruthBox, Mode, SampleManifest};
use crate::geometry::{iou, BoundingBox};
use crate::pipeline::{ClassEntry, SampleResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("no ground truth for sample {0}")]
    MissingGroundTruth(String),
    #[error("result and manifest ids disagree: {0}")]
    IdMismatch(String),
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Normalizes class tokens before comparison: trim, lowercase, then alias.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMatcher {
    pub aliases: BTreeMap<String, String>,
}

impl ClassMatcher {
    pub fn new(aliases: BTreeMap<String, String>) -> Self {
        let aliases = aliases
            .into_iter()
            .map(|(k, v)| (norm(&k), norm(&v)))
            .collect();
        Self { aliases }
    }

    pub fn normalize(&self, token: &str) -> String {
        let t = norm(token);
        self.aliases.get(&t).cloned().unwrap_or(t)
    }
}

fn norm(s: &str) -> String {
    s.trim().to_lowercase()
}

/// IoU of one prediction against a sample's ground truth. Single-source
/// ignores classes; multi-source scores only against the GT box whose
/// class matches, else 0.
pub fn sample_iou(
    pred: &BoundingBox,
    pred_class: Option<&str>,
    gt: &[GroundTruthBox],
    mode: Mode,
    matcher: &ClassMatcher,
) -> Result<f64> {
    let first = gt.first().ok_or_else(|| MetricsError::MissingGroundTruth(String::new()))?;
    match mode {
        Mode::Single => Ok(iou(pred, &first.bbox)),
        Mode::Duet => {
            let Some(cls) = pred_class else { return Ok(0.0) };
            let cls = matcher.normalize(cls);
            Ok(gt
                .iter()
                .find(|g| matcher.normalize(&g.class) == cls)
                .map_or(0.0, |g| iou(pred, &g.bbox)))
        }
    }
}

/// Fraction of IoUs at or above `tau`.
pub fn success_rate(ious: &[f64], tau: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(MetricsError::BadThreshold(tau));
    }
    Ok(ious.iter().filter(|&&v| v >= tau).count() as f64 / ious.len() as f64)
}

/// `{0.00, 0.05, ..., 0.95}`, built as `i / 20` so every point is the
/// nearest double to its decimal.
pub fn default_grid() -> Vec<f64> {
    (0..20).map(|i| f64::from(i) / 20.0).collect()
}

pub fn auc_on(ious: &[f64], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut total = 0.0;
    for &t in grid {
        total += success_rate(ious, t)?;
    }
    Ok(total / grid.len() as f64)
}

pub fn auc(ious: &[f64]) -> Result<f64> {
    auc_on(ious, &default_grid())
}

/// One ranked instance for AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub confidence: f64,
    pub iou: f64,
}

/// Non-interpolated AP: mean precision at the rank of each true positive.
/// Ranking is by confidence descending, ties by id.
pub fn average_precision(entries: &[Scored], tau_tp: f64) -> Result<f64> {
    if entries.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut ranked: Vec<&Scored> = entries.iter().collect();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.id.cmp(&b.id)));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, e) in ranked.iter().enumerate() {
        if e.iou >= tau_tp {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(if tp == 0 { 0.0 } else { sum / tp as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Headline threshold; also the AP true-positive threshold.
    pub tau: f64,
    pub grid: Vec<f64>,
    pub matcher: ClassMatcher,
}

impl EvalConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            tau: match mode {
                Mode::Single => 0.5,
                Mode::Duet => 0.3,
            },
            grid: default_grid(),
            matcher: ClassMatcher::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub tau: f64,
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub per_threshold: Vec<ThresholdRow>,
    /// AP in single mode, CAP in duet mode.
    pub ap: f64,
    pub headline_tau: f64,
    pub headline_success: f64,
    pub auc: f64,
    pub sample_count: usize,
    pub failure_count: usize,
    /// Scored instances: one per GT box.
    pub instance_count: usize,
    pub instances: Vec<Scored>,
}

fn entry_id(sample: &str, idx: usize) -> String {
    format!("{sample}#{idx}")
}

/// Scores a sample's entries; pads with misses up to the GT count.
fn score_sample(
    result: &SampleResult,
    gt: &[GroundTruthBox],
    mode: Mode,
    matcher: &ClassMatcher,
) -> Result<Vec<Scored>> {
    let want = gt.len().max(1);
    let mut out = Vec::with_capacity(want);
    if !result.is_failed() {
        let entries: Vec<&ClassEntry> = result.entries.iter().take(want).collect();
        for e in entries {
            out.push(Scored {
                id: entry_id(&result.sample_id, out.len()),
                confidence: e.confidence,
                iou: sample_iou(&e.final_box, e.class(), gt, mode, matcher)
                    .map_err(|_| MetricsError::MissingGroundTruth(result.sample_id.clone()))?,
            });
        }
    }
    while out.len() < want {
        out.push(Scored {
            id: entry_id(&result.sample_id, out.len()),
            confidence: 0.0,
            iou: 0.0,
        });
    }
    Ok(out)
}

/// Builds the report over all results. Failed samples count as misses.
pub fn build_report(
    results: &[SampleResult],
    gts: &BTreeMap<String, Vec<GroundTruthBox>>,
    mode: Mode,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut sorted: Vec<&SampleResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut instances = Vec::new();
    for r in &sorted {
        let gt = gts
            .get(&r.sample_id)
            .filter(|g| !g.is_empty())
            .ok_or_else(|| MetricsError::MissingGroundTruth(r.sample_id.clone()))?;
        instances.extend(score_sample(r, gt, mode, &cfg.matcher)?);
    }
    let ious: Vec<f64> = instances.iter().map(|s| s.iou).collect();
    let per_threshold = cfg
        .grid
        .iter()
        .map(|&tau| success_rate(&ious, tau).map(|success| ThresholdRow { tau, success }))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        mode,
        ap: average_precision(&instances, cfg.tau)?,
        headline_tau: cfg.tau,
        headline_success: success_rate(&ious, cfg.tau)?,
        auc: auc_on(&ious, &cfg.grid)?,
        per_threshold,
        sample_count: sorted.len(),
        failure_count: sorted.iter().filter(|r| r.is_failed()).count(),
        instance_count: instances.len(),
        instances,
    })
}

/// Results must cover exactly the manifest's ids.
pub fn check_alignment(results: &[SampleResult], manifest: &[SampleManifest]) -> Result<()> {
    let ids: BTreeSet<&str> = manifest.iter().map(|s| s.id.as_str()).collect();
    let seen: BTreeSet<&str> = results.iter().map(|r| r.sample_id.as_str()).collect();
    if let Some(unknown) = seen.difference(&ids).next() {
        return Err(MetricsError::IdMismatch(format!("unknown sample {unknown}")));
    }
    if let Some(missing) = ids.difference(&seen).next() {
        return Err(MetricsError::IdMismatch(format!("no result for {missing}")));
    }
    Ok(())
}

pub fn ground_truth(manifest: &[SampleManifest]) -> BTreeMap<String, Vec<GroundTruthBox>> {
    manifest.iter().map(|s| (s.id.clone(), s.gt.clone())).collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl MetricsReport {
    pub fn column_names(&self) -> [String; 3] {
        match self.mode {
            Mode::Single => ["AP(%)".into(), format!("IoU@{}(%)", self.headline_tau), "AUC(%)".into()],
            Mode::Duet => ["CAP(%)".into(), format!("CIoU@{}(%)", self.headline_tau), "AUC(%)".into()],
        }
    }

    /// One-row table in AP / IoU / AUC column order.
    pub fn render_table(&self, label: &str) -> String {
        let cols = self.column_names();
        let mut s = String::new();
        let _ = writeln!(s, "| {:<16} | {:>8} | {:>12} | {:>8} | {:>7} | {:>8} |", "run", cols[0], cols[1], cols[2], "samples", "failures");
        let _ = writeln!(s, "|{:-<18}|{:->10}|{:->14}|{:->10}|{:->9}|{:->10}|", "", "", "", "", "", "");
        let _ = writeln!(s, "{}", self.table_row(label));
        s
    }

    pub fn table_row(&self, label: &str) -> String {
        format!(
            "| {:<16} | {:>8} | {:>12} | {:>8} | {:>7} | {:>8} |",
            label,
            pct(self.ap),
            pct(self.headline_success),
            pct(self.auc),
            self.sample_count,
            self.failure_count
        )
    }

    pub fn render_thresholds(&self) -> String {
        let mut s = String::from("tau   success(%)\n");
        for row in &self.per_threshold {
            let _ = writeln!(s, "{:.2}  {}", row.tau, pct(row.success));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: [f64; 4]) -> BoundingBox {
        BoundingBox::try_from(a).unwrap()
    }

    fn gt(class: &str, b: [f64; 4]) -> GroundTruthBox {
        GroundTruthBox {
            class: class.into(),
            bbox: bx(b),
        }
    }

    #[test]
    fn iou_examples() {
        let m = ClassMatcher::default();
        let g = [gt("violin", [0., 0., 10., 10.])];
        assert_eq!(sample_iou(&bx([0., 0., 10., 10.]), None, &g, Mode::Single, &m).unwrap(), 1.0);
        let duet = [gt("violin", [0., 0., 100., 100.]), gt("piano", [224., 0., 324., 100.])];
        let p = bx([224., 0., 324., 50.]);
        assert_eq!(sample_iou(&p, Some("piano"), &duet, Mode::Duet, &m).unwrap(), 0.5);
        assert_eq!(sample_iou(&p, Some(" Piano "), &duet, Mode::Duet, &m).unwrap(), 0.5);
        assert_eq!(sample_iou(&p, Some("guitar"), &duet, Mode::Duet, &m).unwrap(), 0.0);
        assert!(sample_iou(&p, None, &[], Mode::Single, &m).is_err());
    }

    #[test]
    fn aliases_bridge_labels() {
        let m = ClassMatcher::new([("Dog Barking".to_string(), "dog".to_string())].into());
        let g = [gt("dog", [0., 0., 10., 10.]), gt("cat", [20., 0., 30., 10.])];
        assert_eq!(sample_iou(&bx([0., 0., 10., 10.]), Some("dog barking"), &g, Mode::Duet, &m).unwrap(), 1.0);
    }

    #[test]
    fn success_examples() {
        assert!((success_rate(&[0.6, 0.4, 0.55], 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(success_rate(&[0.5], 0.5).unwrap(), 1.0);
        assert_eq!(success_rate(&[], 0.5), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.5]).unwrap(), 0.55);
        assert_eq!(auc(&[1.0, 1.0]).unwrap(), 1.0);
        assert!((auc(&[0.0]).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(auc(&[]), Err(MetricsError::EmptyInput));
    }

    fn sc(id: &str, c: f64, iou: f64) -> Scored {
        Scored {
            id: id.into(),
            confidence: c,
            iou,
        }
    }

    #[test]
    fn ap_examples() {
        let e = [sc("a", 0.9, 1.0), sc("b", 0.8, 0.0), sc("c", 0.7, 1.0)];
        assert!((average_precision(&e, 0.5).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let all = [sc("a", 0.1, 0.9), sc("b", 0.2, 0.9)];
        assert_eq!(average_precision(&all, 0.5).unwrap(), 1.0);
        let none = [sc("a", 0.1, 0.1)];
        assert_eq!(average_precision(&none, 0.5).unwrap(), 0.0);
        assert_eq!(average_precision(&[], 0.5), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn ap_ties_break_by_id() {
        let e = [sc("b", 0.5, 0.0), sc("a", 0.5, 1.0)];
        assert_eq!(average_precision(&e, 0.5).unwrap(), 1.0);
    }
}
