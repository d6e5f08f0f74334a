//! Label volumes and segmentation metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volgrid::{load_raw, save_raw, Dims, GridError, RawSamples, Sidecar};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: prediction {pred}, ground truth {gt}")]
    DimMismatch { pred: Dims, gt: Dims },
    #[error("label {0} has no class name")]
    UnknownLabel(u32),
    #[error("unsupported label dtype `{0}` (expected uint8 or uint16)")]
    UnsupportedDtype(String),
    #[error("malformed report table: {0}")]
    Table(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Integer label grid; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub labels: Vec<u32>,
    pub class_names: BTreeMap<u32, String>,
}

impl LabelVolume {
    /// Fails with `UnknownLabel` if a nonzero label has no name.
    pub fn new(
        dims: Dims,
        labels: Vec<u32>,
        class_names: impl IntoIterator<Item = (u32, String)>,
    ) -> Result<Self, EvalError> {
        if labels.len() != dims.len() {
            return Err(GridError::DimMismatch {
                expected: dims.len(),
                actual: labels.len(),
                unit: "labels",
            }
            .into());
        }
        let mut class_names: BTreeMap<u32, String> = class_names.into_iter().collect();
        class_names.remove(&0);
        let l = LabelVolume {
            dims,
            labels,
            class_names,
        };
        l.check_names()?;
        Ok(l)
    }

    /// All-background volume.
    pub fn background(dims: Dims) -> Self {
        LabelVolume {
            dims,
            labels: vec![0; dims.len()],
            class_names: BTreeMap::new(),
        }
    }

    fn check_names(&self) -> Result<(), EvalError> {
        for l in self.present_labels() {
            if l != 0 && !self.class_names.contains_key(&l) {
                return Err(EvalError::UnknownLabel(l));
            }
        }
        Ok(())
    }

    pub fn present_labels(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[self.dims.index(x, y, z)]
    }

    pub fn count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn mask(&self, label: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }
}

/// Reads a `uint8`/`uint16` raw label volume. Labels missing from the
/// sidecar's `class_names` are named `class_<id>`.
pub fn load_labels(path: &Path) -> Result<LabelVolume, EvalError> {
    let (sidecar, samples) = load_raw(path)?;
    let labels: Vec<u32> = match samples {
        RawSamples::U8(v) => v.into_iter().map(u32::from).collect(),
        RawSamples::U16(v) => v.into_iter().map(u32::from).collect(),
        RawSamples::F32(_) => return Err(EvalError::UnsupportedDtype(sidecar.dtype)),
    };
    let mut names = sidecar.class_names.unwrap_or_default();
    for &l in labels.iter().collect::<BTreeSet<_>>() {
        if l != 0 {
            names.entry(l).or_insert_with(|| {
                log::warn!("label {l} in {} has no name", path.display());
                format!("class_{l}")
            });
        }
    }
    LabelVolume::new(Dims(sidecar.dims), labels, names)
}

/// Writes as `uint8` when every label fits, else `uint16`.
pub fn save_labels(l: &LabelVolume, path: &Path) -> Result<(), EvalError> {
    let max = l.labels.iter().copied().max().unwrap_or(0);
    let samples = if max <= u8::MAX as u32 {
        RawSamples::U8(l.labels.iter().map(|&v| v as u8).collect())
    } else if max <= u16::MAX as u32 {
        RawSamples::U16(l.labels.iter().map(|&v| v as u16).collect())
    } else {
        return Err(EvalError::UnsupportedDtype(format!("label {max} exceeds uint16")));
    };
    let sidecar = Sidecar {
        dims: l.dims.0,
        dtype: samples.dtype().to_string(),
        spacing: [1.0; 3],
        value_range: None,
        class_names: Some(l.class_names.clone()),
    };
    save_raw(path, &sidecar, &samples)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Ground-truth voxel count.
    pub support: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassMetrics {
    pub fn from_counts(name: impl Into<String>, tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassMetrics {
            name: name.into(),
            precision,
            recall,
            f1,
            iou: ratio(tp, tp + fp + fn_),
            support: tp + fn_,
            tp,
            fp,
            fn_,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    /// Fraction of voxels labeled correctly, background included.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Every class present in either volume or named by the ground truth,
    /// background (0) included.
    pub per_class: BTreeMap<u32, ClassMetrics>,
    pub means: MeanMetrics,
    pub include_background_in_means: bool,
    /// Average number of annotations per class, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations_per_class: Option<f64>,
}

/// Per-class confusion counts of `pred` against `gt`.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, include_background_in_means: bool) -> Result<MetricsReport, EvalError> {
    if pred.dims != gt.dims {
        return Err(EvalError::DimMismatch {
            pred: pred.dims,
            gt: gt.dims,
        });
    }
    let mut names: BTreeMap<u32, String> = pred.class_names.clone();
    names.extend(gt.class_names.clone());
    names.insert(0, "background".into());
    let index: BTreeMap<u32, usize> = names.keys().enumerate().map(|(i, &c)| (c, i)).collect();
    let k = index.len();
    let slot = |l: u32| index.get(&l).copied().ok_or(EvalError::UnknownLabel(l));
    // Dense lookup for small ids keeps the voxel loop branch-light.
    let max_id = *names.keys().next_back().unwrap() as usize;
    let mut lut = vec![usize::MAX; max_id + 1];
    for (&c, &i) in &index {
        lut[c as usize] = i;
    }
    let mut confusion = vec![0u64; k * k];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let pi = lut.get(p as usize).copied().filter(|&i| i != usize::MAX);
        let gi = lut.get(g as usize).copied().filter(|&i| i != usize::MAX);
        let pi = match pi {
            Some(i) => i,
            None => slot(p)?,
        };
        let gi = match gi {
            Some(i) => i,
            None => slot(g)?,
        };
        confusion[pi * k + gi] += 1;
    }
    let total: u64 = confusion.iter().sum();
    let correct: u64 = (0..k).map(|i| confusion[i * k + i]).sum();
    let mut per_class = BTreeMap::new();
    for (&c, &i) in &index {
        let tp = confusion[i * k + i];
        let predicted: u64 = (0..k).map(|j| confusion[i * k + j]).sum();
        let actual: u64 = (0..k).map(|j| confusion[j * k + i]).sum();
        per_class.insert(c, ClassMetrics::from_counts(names[&c].clone(), tp, predicted - tp, actual - tp));
    }
    let means = macro_means(&per_class, include_background_in_means, if total == 0 { 0.0 } else { correct as f64 / total as f64 });
    Ok(MetricsReport {
        per_class,
        means,
        include_background_in_means,
        annotations_per_class: None,
    })
}

fn macro_means(per_class: &BTreeMap<u32, ClassMetrics>, include_bg: bool, accuracy: f64) -> MeanMetrics {
    let rows: Vec<&ClassMetrics> = per_class
        .iter()
        .filter(|(&c, _)| include_bg || c != 0)
        .map(|(_, m)| m)
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|m| f(m)).sum::<f64>() / rows.len() as f64
        }
    };
    MeanMetrics {
        accuracy,
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        miou: mean(|m| m.iou),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(TableFormat::Json),
            "csv" => Ok(TableFormat::Csv),
            "md" | "markdown" => Ok(TableFormat::Markdown),
            other => Err(format!("unknown table format `{other}`")),
        }
    }
}

const CSV_HEADER: [&str; 12] = [
    "kind", "id", "name", "precision", "recall", "f1", "iou", "support", "tp", "fp", "fn", "extra",
];

/// Renders a report. CSV rows are `class` rows followed by one `mean` row
/// whose `support` column holds the accuracy and `extra` the annotation
/// count; markdown rounds to four decimals.
pub fn report_to_table(report: &MetricsReport, format: TableFormat) -> String {
    match format {
        TableFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).unwrap();
            for (c, m) in &report.per_class {
                w.write_record([
                    "class".to_string(),
                    c.to_string(),
                    m.name.clone(),
                    m.precision.to_string(),
                    m.recall.to_string(),
                    m.f1.to_string(),
                    m.iou.to_string(),
                    m.support.to_string(),
                    m.tp.to_string(),
                    m.fp.to_string(),
                    m.fn_.to_string(),
                    String::new(),
                ])
                .unwrap();
            }
            let mm = &report.means;
            w.write_record([
                "mean".to_string(),
                String::new(),
                if report.include_background_in_means { "all" } else { "foreground" }.to_string(),
                mm.precision.to_string(),
                mm.recall.to_string(),
                mm.f1.to_string(),
                mm.miou.to_string(),
                mm.accuracy.to_string(),
                String::new(),
                String::new(),
                String::new(),
                report.annotations_per_class.map(|a| a.to_string()).unwrap_or_default(),
            ])
            .unwrap();
            String::from_utf8(w.into_inner().unwrap()).unwrap()
        }
        TableFormat::Markdown => {
            let mut s = String::from("| id | class | precision | recall | F1 | IoU | support |\n|---:|---|---:|---:|---:|---:|---:|\n");
            for (c, m) in &report.per_class {
                let _ = writeln!(
                    s,
                    "| {c} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
                    m.name, m.precision, m.recall, m.f1, m.iou, m.support
                );
            }
            let mm = &report.means;
            let _ = writeln!(
                s,
                "| | **mean** | {:.4} | {:.4} | {:.4} | {:.4} | |",
                mm.precision, mm.recall, mm.f1, mm.miou
            );
            let _ = writeln!(s, "\naccuracy: {:.4}", mm.accuracy);
            if let Some(a) = report.annotations_per_class {
                let _ = writeln!(s, "annotations per class: {a:.1}");
            }
            s
        }
    }
}

/// Parses JSON or CSV output of [`report_to_table`].
pub fn parse_table(text: &str, format: TableFormat) -> Result<MetricsReport, EvalError> {
    let bad = |m: String| EvalError::Table(m);
    match format {
        TableFormat::Json => serde_json::from_str(text).map_err(|e| bad(e.to_string())),
        TableFormat::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let mut per_class = BTreeMap::new();
            let mut means = None;
            for rec in r.records() {
                let rec = rec.map_err(|e| bad(e.to_string()))?;
                let f = |i: usize| -> Result<f64, EvalError> {
                    rec.get(i).unwrap_or("").parse().map_err(|e| bad(format!("column {i}: {e}")))
                };
                let u = |i: usize| -> Result<u64, EvalError> {
                    rec.get(i).unwrap_or("").parse().map_err(|e| bad(format!("column {i}: {e}")))
                };
                match rec.get(0) {
                    Some("class") => {
                        let id = u(1)? as u32;
                        per_class.insert(
                            id,
                            ClassMetrics {
                                name: rec.get(2).unwrap_or("").to_string(),
                                precision: f(3)?,
                                recall: f(4)?,
                                f1: f(5)?,
                                iou: f(6)?,
                                support: u(7)?,
                                tp: u(8)?,
                                fp: u(9)?,
                                fn_: u(10)?,
                            },
                        );
                    }
                    Some("mean") => {
                        let extra = rec.get(11).unwrap_or("");
                        means = Some((
                            rec.get(2) == Some("all"),
                            MeanMetrics {
                                accuracy: f(7)?,
                                precision: f(3)?,
                                recall: f(4)?,
                                f1: f(5)?,
                                miou: f(6)?,
                            },
                            if extra.is_empty() { None } else { Some(f(11)?) },
                        ));
                    }
                    other => return Err(bad(format!("unknown row kind {other:?}"))),
                }
            }
            let (include_background_in_means, means, annotations_per_class) =
                means.ok_or_else(|| bad("missing mean row".into()))?;
            Ok(MetricsReport {
                per_class,
                means,
                include_background_in_means,
                annotations_per_class,
            })
        }
        TableFormat::Markdown => Err(bad("markdown tables are not parsed".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(labels: Vec<u32>) -> LabelVolume {
        let d = Dims::new(labels.len(), 1, 1);
        LabelVolume::new(d, labels, [(1, "a".to_string()), (2, "b".to_string())]).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = lv(vec![0, 1, 2, 2, 1]);
        let r = evaluate(&gt, &gt, false).unwrap();
        for c in [1, 2] {
            let m = &r.per_class[&c];
            assert_eq!((m.precision, m.recall, m.f1, m.iou), (1.0, 1.0, 1.0, 1.0));
        }
        assert_eq!(r.means.accuracy, 1.0);
        assert_eq!(r.means.miou, 1.0);
    }

    #[test]
    fn all_background_prediction() {
        let gt = lv(vec![0, 1, 1]);
        let r = evaluate(&LabelVolume::background(gt.dims), &gt, false).unwrap();
        let m = &r.per_class[&1];
        assert_eq!((m.precision, m.recall, m.iou), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_confusion() {
        let r = evaluate(&lv(vec![1, 1]), &lv(vec![1, 2]), false).unwrap();
        let a = &r.per_class[&1];
        assert_eq!((a.precision, a.recall, a.iou), (0.5, 1.0, 0.5));
        let b = &r.per_class[&2];
        assert_eq!((b.precision, b.recall, b.iou), (0.0, 0.0, 0.0));
        assert_eq!(r.means.accuracy, 0.5);
        assert!((r.means.miou - 0.25).abs() < 1e-12);
    }

    #[test]
    fn background_flag_changes_means_only() {
        let gt = lv(vec![0, 0, 1, 2]);
        let pred = lv(vec![0, 1, 1, 2]);
        let a = evaluate(&pred, &gt, false).unwrap();
        let b = evaluate(&pred, &gt, true).unwrap();
        assert_eq!(a.per_class, b.per_class);
        assert_eq!(a.means.accuracy, b.means.accuracy);
        assert!((b.means.miou - (0.5 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
        assert!((a.means.miou - 0.75).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            evaluate(&lv(vec![1]), &lv(vec![1, 2]), false),
            Err(EvalError::DimMismatch { .. })
        ));
        assert!(matches!(
            LabelVolume::new(Dims::new(1, 1, 1), vec![5], []),
            Err(EvalError::UnknownLabel(5))
        ));
        let mut p = lv(vec![1, 2]);
        p.labels[0] = 9;
        assert!(matches!(evaluate(&p, &lv(vec![1, 2]), false), Err(EvalError::UnknownLabel(9))));
    }

    fn fixed_report() -> MetricsReport {
        let mut r = evaluate(&lv(vec![0, 1, 1, 2, 2, 0, 1]), &lv(vec![0, 1, 2, 2, 2, 1, 1]), false).unwrap();
        r.annotations_per_class = Some(5.2);
        r
    }

    #[test]
    fn json_round_trip() {
        let r = fixed_report();
        assert_eq!(parse_table(&report_to_table(&r, TableFormat::Json), TableFormat::Json).unwrap(), r);
    }

    #[test]
    fn csv_round_trip() {
        let r = fixed_report();
        assert_eq!(parse_table(&report_to_table(&r, TableFormat::Csv), TableFormat::Csv).unwrap(), r);
    }

    #[test]
    fn markdown_rows_match_report() {
        let r = fixed_report();
        let md = report_to_table(&r, TableFormat::Markdown);
        for (c, m) in &r.per_class {
            let row = md.lines().find(|l| l.starts_with(&format!("| {c} |"))).unwrap();
            let cells: Vec<&str> = row.split('|').map(str::trim).collect();
            assert_eq!(cells[2], m.name);
            let iou: f64 = cells[6].parse().unwrap();
            assert!((iou - m.iou).abs() <= 5e-5);
        }
        assert!(md.contains("annotations per class: 5.2"));
    }

    #[test]
    fn label_io_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = lv(vec![0, 1, 2, 1]);
        save_labels(&l, &dir.path().join("l")).unwrap();
        assert_eq!(load_labels(&dir.path().join("l.raw")).unwrap(), l);
        l.labels[0] = 300;
        l.class_names.insert(300, "wide".into());
        save_labels(&l, &dir.path().join("w")).unwrap();
        let back = load_labels(&dir.path().join("w")).unwrap();
        assert_eq!(back, l);
        let (sc, _) = load_raw(&dir.path().join("w")).unwrap();
        assert_eq!(sc.dtype, "uint16");
    }
}
