//! Summary tables, figures and JSON built from run records alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balance::SamplingKind;
use crate::error::{Error, IoContext, Result};
use crate::eval::{aggregate_runs, ConfusionRow, MetricStats};
use crate::harness::run::RunRecord;
use crate::harness::spec::Condition;
use crate::subtype::SubtypeClass;

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const BOXPLOT_SVG: &str = "boxplots.svg";
pub const CONFUSION_SVG: &str = "confusion_rows.svg";

/// Five-number summary; whiskers span the observed extremes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("no values for a box".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

/// Linear interpolation between order statistics of sorted `v`.
fn quantile(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub label: String,
    pub condition: Condition,
    pub seeds: Vec<u64>,
    pub dice_values: Vec<f64>,
    pub variance_values: Vec<f64>,
    pub dice: MetricStats,
    pub subtype_variance: MetricStats,
    pub dice_box: BoxStats,
    pub variance_box: BoxStats,
    pub recalls: BTreeMap<SubtypeClass, MetricStats>,
    /// Built from the mean recall of each subtype.
    pub confusion_rows: BTreeMap<SubtypeClass, ConfusionRow>,
}

/// One condition against the reference baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub condition: String,
    pub reference: String,
    /// Mean Dice minus reference mean Dice.
    pub delta_dice: f64,
    /// `100 * (variance - reference) / reference`; negative is a reduction.
    /// `None` when the reference variance is zero.
    pub variance_change_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub conditions: Vec<ConditionSummary>,
    pub reference: Option<String>,
    pub comparisons: Vec<Comparison>,
    /// Conditions drawn in the confusion-row figure.
    pub confusion_conditions: Vec<String>,
}

impl ReportSummary {
    pub fn condition(&self, label: &str) -> Option<&ConditionSummary> {
        self.conditions.iter().find(|c| c.label == label)
    }

    pub fn comparison(&self, label: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.condition == label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub summary: ReportSummary,
    pub files: BTreeMap<String, PathBuf>,
}

fn condition_order(c: &Condition) -> (u8, String, f64) {
    match c {
        Condition::Baseline { sampling } => (0, sampling.name().to_string(), 0.0),
        Condition::Mixture { method, ratio } => (1, method.name().to_string(), *ratio),
    }
}

/// Groups records by condition; baselines first, then methods by ratio.
pub fn summarize(records: &[RunRecord], confusion: Option<(&str, &str)>) -> Result<ReportSummary> {
    if records.is_empty() {
        return Err(Error::Empty("no completed runs to report".into()));
    }
    let mut groups: Vec<(Condition, Vec<&RunRecord>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(c, _)| c.label() == r.label) {
            Some((_, g)) => g.push(r),
            None => groups.push((r.condition, vec![r])),
        }
    }
    groups.sort_by(|a, b| {
        let (ka, kb) = (condition_order(&a.0), condition_order(&b.0));
        ka.0.cmp(&kb.0).then(ka.1.cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
    });

    let mut conditions = Vec::with_capacity(groups.len());
    for (condition, mut runs) in groups {
        runs.sort_by_key(|r| r.rep);
        let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
        let agg = aggregate_runs(&reports)?;
        let dice_values: Vec<f64> = reports.iter().map(|r| r.dice).collect();
        let variance_values: Vec<f64> = reports.iter().map(|r| r.subtype_variance).collect();
        conditions.push(ConditionSummary {
            label: condition.label(),
            condition,
            seeds: runs.iter().map(|r| r.seed).collect(),
            dice_box: BoxStats::of(&dice_values)?,
            variance_box: BoxStats::of(&variance_values)?,
            dice_values,
            variance_values,
            dice: agg.dice,
            subtype_variance: agg.subtype_variance,
            recalls: agg.recalls,
            confusion_rows: agg.confusion_rows,
        });
    }

    let reference = [SamplingKind::SubtypeSampled, SamplingKind::TumorSampled]
        .iter()
        .map(|&sampling| Condition::Baseline { sampling }.label())
        .find(|l| conditions.iter().any(|c| &c.label == l));
    let comparisons: Vec<Comparison> = match &reference {
        Some(ref_label) => {
            let r = conditions.iter().find(|c| &c.label == ref_label).expect("reference is present");
            conditions
                .iter()
                .filter(|c| &c.label != ref_label)
                .map(|c| Comparison {
                    condition: c.label.clone(),
                    reference: ref_label.clone(),
                    delta_dice: c.dice.mean - r.dice.mean,
                    variance_change_pct: (r.subtype_variance.mean != 0.0)
                        .then(|| 100.0 * (c.subtype_variance.mean - r.subtype_variance.mean) / r.subtype_variance.mean),
                })
                .collect()
        }
        None => Vec::new(),
    };

    let confusion_conditions = match confusion {
        Some((a, b)) => {
            for l in [a, b] {
                if !conditions.iter().any(|c| c.label == l) {
                    return Err(Error::Config(format!("no completed runs for condition {l}")));
                }
            }
            vec![a.to_string(), b.to_string()]
        }
        None => default_pair(&conditions, reference.as_deref(), &comparisons),
    };

    Ok(ReportSummary {
        conditions,
        reference,
        comparisons,
        confusion_conditions,
    })
}

/// The reference against its best-Dice competitor, else the first two.
fn default_pair(conditions: &[ConditionSummary], reference: Option<&str>, comparisons: &[Comparison]) -> Vec<String> {
    if let (Some(r), Some(best)) = (reference, comparisons.iter().max_by(|a, b| a.delta_dice.total_cmp(&b.delta_dice))) {
        return vec![r.to_string(), best.condition.clone()];
    }
    conditions.iter().take(2).map(|c| c.label.clone()).collect()
}

/// Writes the summary table, JSON, box plots and confusion rows into `dir`.
pub fn emit_report(records: &[RunRecord], dir: &Path, confusion: Option<(&str, &str)>) -> Result<ReportBundle> {
    let summary = summarize(records, confusion)?;
    fs::create_dir_all(dir).at(dir)?;
    let mut files = BTreeMap::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).at(&path)?;
        files.insert(name.to_string(), path);
        Ok(())
    };
    put(SUMMARY_JSON, serde_json::to_vec_pretty(&summary)?)?;
    put(SUMMARY_TXT, summary_table(&summary).into_bytes())?;
    put(BOXPLOT_SVG, boxplot_svg(&summary).into_bytes())?;
    put(CONFUSION_SVG, confusion_svg(&summary).into_bytes())?;
    Ok(ReportBundle { summary, files })
}

pub fn summary_table(s: &ReportSummary) -> String {
    let width = s.conditions.iter().map(|c| c.label.len()).max().unwrap_or(0).max(9);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>4}  {:>17}  {:>21}  {:>8}  {:>9}",
        "condition", "runs", "dice", "subtype variance", "d dice", "d var %"
    );
    for c in &s.conditions {
        let cmp = s.comparison(&c.label);
        let delta = cmp.map_or("-".to_string(), |x| format!("{:+.4}", x.delta_dice));
        let pct = cmp
            .and_then(|x| x.variance_change_pct)
            .map_or("-".to_string(), |p| format!("{p:+.1}"));
        let _ = writeln!(
            out,
            "{:<width$}  {:>4}  {:>17}  {:>21}  {:>8}  {:>9}",
            c.label,
            c.dice.n,
            format!("{:.4} ± {:.4}", c.dice.mean, c.dice.std),
            format!("{:.6} ± {:.6}", c.subtype_variance.mean, c.subtype_variance.std),
            delta,
            pct
        );
    }
    if let Some(r) = &s.reference {
        let _ = writeln!(out, "\nchanges are relative to {r}");
    }
    out
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_T: f64 = 36.0;
const PLOT_H: f64 = 180.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let pad = if hi > lo { 0.08 * (hi - lo) } else { lo.abs().max(1e-3) * 0.1 };
    (lo - pad, hi + pad)
}

fn box_panel(out: &mut String, x0: f64, title: &str, labels: &[&str], boxes: &[BoxStats], points: &[&[f64]]) {
    let (lo, hi) = nice_range(boxes.iter().flat_map(|b| [b.min, b.max]));
    let plot_w = PANEL_W - MARGIN_L - 16.0;
    let y = |v: f64| MARGIN_T + PLOT_H * (1.0 - (v - lo) / (hi - lo));
    let _ = writeln!(out, r#"<g transform="translate({x0},0)">"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-weight="bold">{}</text>"#, MARGIN_L + plot_w / 2.0, esc(title));
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" height="{PLOT_H}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * f64::from(k) / 4.0;
        let yy = y(v);
        let _ = writeln!(
            out,
            r##"<line x1="{}" x2="{MARGIN_L}" y1="{yy:.2}" y2="{yy:.2}" stroke="#444"/><text x="{}" y="{:.2}" text-anchor="end" font-size="10">{v:.3}</text>"##,
            MARGIN_L - 4.0,
            MARGIN_L - 6.0,
            yy + 3.0
        );
    }
    let slot = plot_w / boxes.len() as f64;
    let bw = (slot * 0.5).min(40.0);
    for (i, (b, label)) in boxes.iter().zip(labels).enumerate() {
        let cx = MARGIN_L + slot * (i as f64 + 0.5);
        let _ = writeln!(
            out,
            r##"<line class="whisker" x1="{cx:.2}" x2="{cx:.2}" y1="{:.2}" y2="{:.2}" stroke="#222"/>"##,
            y(b.min),
            y(b.max)
        );
        for v in [b.min, b.max] {
            let _ = writeln!(
                out,
                r##"<line x1="{:.2}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="#222"/>"##,
                cx - bw / 4.0,
                cx + bw / 4.0,
                y(v),
                y(v)
            );
        }
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="#9ecae1" stroke="#222"/>"##,
            cx - bw / 2.0,
            y(b.q3),
            (y(b.q1) - y(b.q3)).max(0.5)
        );
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="#c00" stroke-width="2"/>"##,
            cx - bw / 2.0,
            cx + bw / 2.0,
            y(b.median),
            y(b.median)
        );
        for &v in points[i] {
            let _ = writeln!(out, r##"<circle cx="{cx:.2}" cy="{:.2}" r="2" fill="#333"/>"##, y(v));
        }
        let ly = MARGIN_T + PLOT_H + 14.0;
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{ly}" font-size="10" text-anchor="end" transform="rotate(-35 {cx:.2} {ly})">{}</text>"#,
            esc(label)
        );
    }
    let _ = writeln!(out, "</g>");
}

/// Dice and subtype-variance box plots side by side, one box per condition.
pub fn boxplot_svg(s: &ReportSummary) -> String {
    let labels: Vec<&str> = s.conditions.iter().map(|c| c.label.as_str()).collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{PANEL_H}" font-family="sans-serif" font-size="12">"#,
        2.0 * PANEL_W
    );
    let dice: Vec<BoxStats> = s.conditions.iter().map(|c| c.dice_box).collect();
    let dice_pts: Vec<&[f64]> = s.conditions.iter().map(|c| c.dice_values.as_slice()).collect();
    box_panel(&mut out, 0.0, "Tumor Dice", &labels, &dice, &dice_pts);
    let var: Vec<BoxStats> = s.conditions.iter().map(|c| c.variance_box).collect();
    let var_pts: Vec<&[f64]> = s.conditions.iter().map(|c| c.variance_values.as_slice()).collect();
    box_panel(&mut out, PANEL_W, "Subtype variance", &labels, &var, &var_pts);
    out.push_str("</svg>\n");
    out
}

/// Mean per-subtype rows (tumor / background share of each subtype's
/// pixels) for the selected conditions.
pub fn confusion_svg(s: &ReportSummary) -> String {
    let cell = 64.0;
    let block_w = 100.0 + 2.0 * cell + 30.0;
    let rows = SubtypeClass::TUMOR.len() as f64;
    let height = 60.0 + rows * cell + 20.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        block_w * s.confusion_conditions.len().max(1) as f64
    );
    for (k, label) in s.confusion_conditions.iter().enumerate() {
        let Some(c) = s.condition(label) else { continue };
        let x0 = block_w * k as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="18" text-anchor="middle" font-weight="bold">{}</text>"#,
            x0 + 100.0 + cell,
            esc(label)
        );
        for (j, col) in ["tumor", "background"].iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="48" text-anchor="middle">{col}</text>"#,
                x0 + 100.0 + cell * (j as f64 + 0.5)
            );
        }
        for (i, class) in SubtypeClass::TUMOR.iter().enumerate() {
            let y0 = 56.0 + cell * i as f64;
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                x0 + 94.0,
                y0 + cell / 2.0 + 4.0,
                class.name()
            );
            let values = c.confusion_rows.get(class).map(|r| [r.tumor, r.background]);
            for j in 0..2 {
                let x = x0 + 100.0 + cell * j as f64;
                let (fill, text) = match values {
                    Some(v) => {
                        let shade = (255.0 * (1.0 - 0.75 * v[j].clamp(0.0, 1.0))).round() as u8;
                        (format!("rgb({shade},{shade},255)"), format!("{:.2}", v[j]))
                    }
                    None => ("#eee".to_string(), "n/a".to_string()),
                };
                let _ = writeln!(
                    out,
                    r##"<rect x="{x:.1}" y="{y0:.1}" width="{cell}" height="{cell}" fill="{fill}" stroke="#fff"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{text}</text>"##,
                    x + cell / 2.0,
                    y0 + cell / 2.0 + 4.0
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::Method;
    use crate::eval::{EvalConfig, EvalReport};

    fn record(condition: Condition, rep: usize, dice: f64, recalls: [f64; 4]) -> RunRecord {
        let recalls: BTreeMap<SubtypeClass, f64> = SubtypeClass::HER2.iter().copied().zip(recalls).collect();
        let mean = recalls.values().sum::<f64>() / 4.0;
        let variance = recalls.values().map(|r| (r - mean).powi(2)).sum::<f64>() / 4.0;
        RunRecord {
            config_hash: "h".into(),
            label: condition.label(),
            condition,
            rep,
            seed: rep as u64,
            report: EvalReport {
                dice,
                confusion_rows: recalls.iter().map(|(&c, &r)| (c, ConfusionRow::from_recall(r))).collect(),
                support: recalls.keys().map(|&c| (c, 10)).collect(),
                recalls,
                subtype_variance: variance,
                config: EvalConfig::default(),
            },
            wall_clock_secs: 1.0,
            artifacts: BTreeMap::new(),
            train_size: crate::harness::run::TrainSize { real: 4, synthetic: 0 },
            best_epoch: 0,
        }
    }

    const BASE: Condition = Condition::Baseline {
        sampling: SamplingKind::SubtypeSampled,
    };
    const DIFF: Condition = Condition::Mixture {
        method: Method::Diffusion,
        ratio: 1.0,
    };

    #[test]
    fn quartiles_interpolate_between_order_statistics() {
        let b = BoxStats::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((b.min, b.q1, b.median, b.q3, b.max), (1.0, 1.75, 2.5, 3.25, 4.0));
    }

    #[test]
    fn whiskers_equal_observed_extremes() {
        let dice = [0.71, 0.65, 0.8, 0.77, 0.69];
        let records: Vec<_> = dice.iter().enumerate().map(|(i, &d)| record(BASE, i, d, [0.5, 0.6, 0.7, 0.8 - 0.01 * i as f64])).collect();
        let s = summarize(&records, None).unwrap();
        let c = &s.conditions[0];
        assert_eq!(c.dice_box.min, 0.65);
        assert_eq!(c.dice_box.max, 0.8);
        let vars: Vec<f64> = records.iter().map(|r| r.report.subtype_variance).collect();
        assert_eq!(c.variance_box.min, vars.iter().copied().fold(f64::INFINITY, f64::min));
        assert_eq!(c.variance_box.max, vars.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn single_record_gives_one_degenerate_row() {
        let s = summarize(&[record(DIFF, 0, 0.7, [0.5, 0.6, 0.7, 0.8])], None).unwrap();
        assert_eq!(s.conditions.len(), 1);
        let b = s.conditions[0].dice_box;
        assert!(b.min == b.max && b.q1 == b.q3 && b.median == 0.7);
        assert!(s.reference.is_none() && s.comparisons.is_empty());
        let table = summary_table(&s);
        assert_eq!(table.lines().count(), 2);
    }

    #[test]
    fn comparisons_are_relative_to_the_subtype_sampled_baseline() {
        let records = vec![
            record(BASE, 0, 0.80, [0.4, 0.6, 0.8, 1.0]),
            record(DIFF, 0, 0.85, [0.55, 0.6, 0.65, 0.7]),
        ];
        let s = summarize(&records, None).unwrap();
        assert_eq!(s.reference.as_deref(), Some("baseline:subtype_sampled"));
        let c = s.comparison("diffusion@1.0").unwrap();
        assert!((c.delta_dice - 0.05).abs() < 1e-12);
        // variances: 0.05 and 0.003125
        let expected = 100.0 * (0.003125 - 0.05) / 0.05;
        assert!((c.variance_change_pct.unwrap() - expected).abs() < 1e-9);
        assert_eq!(s.confusion_conditions, vec!["baseline:subtype_sampled", "diffusion@1.0"]);
    }

    #[test]
    fn tumor_sampled_is_the_fallback_reference() {
        let tumor = Condition::Baseline {
            sampling: SamplingKind::TumorSampled,
        };
        let s = summarize(&[record(tumor, 0, 0.8, [0.4, 0.6, 0.8, 1.0]), record(DIFF, 0, 0.7, [0.5; 4])], None).unwrap();
        assert_eq!(s.reference.as_deref(), Some("baseline:tumor_sampled"));
        assert_eq!(s.comparison("diffusion@1.0").unwrap().variance_change_pct, Some(-100.0));
    }

    #[test]
    fn bundle_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![record(BASE, 0, 0.8, [0.4, 0.6, 0.8, 1.0]), record(DIFF, 0, 0.85, [0.5, 0.6, 0.7, 0.8])];
        let bundle = emit_report(&records, dir.path(), Some(("diffusion@1.0", "baseline:subtype_sampled"))).unwrap();
        for name in [SUMMARY_JSON, SUMMARY_TXT, BOXPLOT_SVG, CONFUSION_SVG] {
            assert!(bundle.files[name].is_file());
        }
        let svg = fs::read_to_string(&bundle.files[BOXPLOT_SVG]).unwrap();
        assert_eq!(svg.matches("class=\"whisker\"").count(), 4);
        let back: ReportSummary = serde_json::from_slice(&fs::read(&bundle.files[SUMMARY_JSON]).unwrap()).unwrap();
        assert_eq!(back, bundle.summary);
        assert!(emit_report(&[], dir.path(), None).is_err());
        assert!(summarize(&records, Some(("gan@1.0", "diffusion@1.0"))).is_err());
    }
}
