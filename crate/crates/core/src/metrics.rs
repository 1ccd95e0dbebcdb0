//! One-pass evaluation: success and precision curves, RSR, RPR and overlap precision.
//!
//! Success counts IoU strictly above each threshold in {0, 0.01, ..., 1}; precision
//! counts center errors at or below each threshold in {0, 1, ..., 50} pixels.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::bbox::BBox;
use crate::error::{Error, ParseLocation, Result};

pub use crate::bbox::{center_error, iou};

pub const SUCCESS_POINTS: usize = 101;
pub const PRECISION_POINTS: usize = 51;
pub const RPR_THRESHOLD: usize = 20;

pub fn success_threshold(i: usize) -> f64 {
    i as f64 / (SUCCESS_POINTS - 1) as f64
}

pub fn success_curve(ious: &[f64]) -> Result<Vec<f64>> {
    if ious.is_empty() {
        return Err(Error::Data("success curve of an empty sequence".into()));
    }
    let n = ious.len() as f64;
    Ok((0..SUCCESS_POINTS)
        .map(|i| {
            let t = success_threshold(i);
            ious.iter().filter(|&&v| v > t).count() as f64 / n
        })
        .collect())
}

/// Mean of the success curve.
pub fn rsr(curve: &[f64]) -> f64 {
    curve.iter().sum::<f64>() / curve.len() as f64
}

pub fn precision_curve(errors: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::Data("precision curve of an empty sequence".into()));
    }
    let n = errors.len() as f64;
    Ok((0..PRECISION_POINTS)
        .map(|d| errors.iter().filter(|&&e| e <= d as f64).count() as f64 / n)
        .collect())
}

pub fn rpr(curve: &[f64]) -> f64 {
    curve[RPR_THRESHOLD]
}

/// Fraction of IoUs strictly above `t`.
pub fn op_t(ious: &[f64], t: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceEval {
    pub name: String,
    pub attributes: Vec<String>,
    pub frames: usize,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    pub success: Vec<f64>,
    pub precision: Vec<f64>,
    pub rsr: f64,
    pub rpr: f64,
    pub op50: f64,
    pub op75: f64,
}

impl SequenceEval {
    pub fn mean_iou(&self) -> f64 {
        self.ious.iter().sum::<f64>() / self.ious.len() as f64
    }
}

/// Scores predictions against ground truth over every annotated frame except frame 0.
pub fn evaluate(
    name: &str,
    attributes: &[String],
    pred: &BTreeMap<usize, BBox>,
    gt: &BTreeMap<usize, BBox>,
) -> Result<SequenceEval> {
    let mut ious = Vec::new();
    let mut errs = Vec::new();
    for (&j, g) in gt.range(1..) {
        let p = pred
            .get(&j)
            .ok_or_else(|| Error::Data(format!("{name}: no prediction for frame {j}")))?;
        ious.push(iou(p, g)?);
        errs.push(center_error(p, g));
    }
    if let Some((&j, _)) = pred.range(1..).find(|(j, _)| !gt.contains_key(j)) {
        return Err(Error::Data(format!("{name}: prediction for unannotated frame {j}")));
    }
    let success = success_curve(&ious)?;
    let precision = precision_curve(&errs)?;
    Ok(SequenceEval {
        name: name.to_string(),
        attributes: attributes.to_vec(),
        frames: ious.len(),
        rsr: rsr(&success),
        rpr: rpr(&precision),
        op50: op_t(&ious, 0.5),
        op75: op_t(&ious, 0.75),
        ious,
        center_errors: errs,
        success,
        precision,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub sequences: usize,
    pub rsr: f64,
    pub rpr: f64,
    pub op50: f64,
    pub op75: f64,
}

impl Summary {
    /// Means over sequences.
    pub fn of(evals: &[&SequenceEval]) -> Summary {
        let n = evals.len().max(1) as f64;
        let mean = |f: fn(&SequenceEval) -> f64| evals.iter().map(|e| f(e)).sum::<f64>() / n;
        Summary {
            sequences: evals.len(),
            rsr: mean(|e| e.rsr),
            rpr: mean(|e| e.rpr),
            op50: mean(|e| e.op50),
            op75: mean(|e| e.op75),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PerSequence {
    pub name: String,
    pub attributes: Vec<String>,
    pub frames: usize,
    pub rsr: f64,
    pub rpr: f64,
    pub op50: f64,
    pub op75: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub rsr: f64,
    pub rpr: f64,
    pub op50: f64,
    pub op75: f64,
    pub per_sequence: Vec<PerSequence>,
    pub per_attribute: BTreeMap<String, Summary>,
    pub protocol: Protocol,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Threshold conventions embedded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct Protocol {
    pub success_thresholds: &'static str,
    pub precision_thresholds: &'static str,
    pub rpr_threshold_px: usize,
    pub excluded_frames: &'static str,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            success_thresholds: "iou > t for t in 0, 0.01, ..., 1 (101 points)",
            precision_thresholds: "center error <= d for d in 0, 1, ..., 50 px (51 points)",
            rpr_threshold_px: RPR_THRESHOLD,
            excluded_frames: "frame 0 (initialization)",
        }
    }
}

/// Sequences without attributes are grouped under `"all"` only.
pub fn report(evals: &[SequenceEval], config: Option<serde_json::Value>) -> Report {
    let all: Vec<&SequenceEval> = evals.iter().collect();
    let overall = Summary::of(&all);
    let mut groups: BTreeMap<String, Vec<&SequenceEval>> = BTreeMap::new();
    for e in evals {
        groups.entry("all".into()).or_default().push(e);
        for a in &e.attributes {
            groups.entry(a.clone()).or_default().push(e);
        }
    }
    Report {
        rsr: overall.rsr,
        rpr: overall.rpr,
        op50: overall.op50,
        op75: overall.op75,
        per_sequence: evals
            .iter()
            .map(|e| PerSequence {
                name: e.name.clone(),
                attributes: e.attributes.clone(),
                frames: e.frames,
                rsr: e.rsr,
                rpr: e.rpr,
                op50: e.op50,
                op75: e.op75,
                mean_iou: e.mean_iou(),
            })
            .collect(),
        per_attribute: groups.into_iter().map(|(k, v)| (k, Summary::of(&v))).collect(),
        protocol: Protocol::default(),
        config,
    }
}

/// Success and precision curves as CSV (`threshold,value`).
pub fn curves_csv(e: &SequenceEval) -> (String, String) {
    let mut s = String::from("threshold,success\n");
    for (i, v) in e.success.iter().enumerate() {
        s.push_str(&format!("{:.2},{v}\n", success_threshold(i)));
    }
    let mut p = String::from("threshold_px,precision\n");
    for (d, v) in e.precision.iter().enumerate() {
        p.push_str(&format!("{d},{v}\n"));
    }
    (s, p)
}

/// Parses a prediction file: lines starting with `frame_index,x,y,w,h`; extra columns
/// and a non-numeric header line are ignored.
pub fn parse_predictions(text: &str, name: &str) -> Result<BTreeMap<usize, BBox>> {
    let mut out = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (k == 0 && line.starts_with(|c: char| c.is_alphabetic())) {
            continue;
        }
        let bad = |m: String| Error::Parse {
            file: name.to_string(),
            location: ParseLocation::Line(k + 1),
            message: m,
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() < 5 {
            return Err(bad(format!("expected at least 5 fields, got {}", f.len())));
        }
        let j: usize = f[0].parse().map_err(|_| bad(format!("bad frame index {:?}", f[0])))?;
        let mut v = [0.0; 4];
        for i in 0..4 {
            v[i] = f[i + 1].parse().map_err(|_| bad(format!("bad number {:?}", f[i + 1])))?;
        }
        let b = BBox::from_slice(&v);
        b.validate().map_err(|e| bad(e.to_string()))?;
        if out.insert(j, b).is_some() {
            return Err(bad(format!("duplicate frame {j}")));
        }
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<usize, BBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse_predictions(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn iou_and_center_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)).unwrap(), 0.0);
        assert!(close(iou(&a, &BBox::new(1.0, 1.0, 2.0, 2.0)).unwrap(), 1.0 / 7.0));
        assert!(iou(&a, &BBox::new(0.0, 0.0, 0.0, 1.0)).is_err());
        let c = BBox::from_center(2.0, 2.0, 1.0, 1.0);
        let d = BBox::from_center(5.0, 6.0, 1.0, 1.0);
        assert!(close(center_error(&c, &d), 5.0));
    }

    #[test]
    fn curve_examples() {
        let s = success_curve(&[1.0; 5]).unwrap();
        assert_eq!(s.len(), 101);
        assert!(s[..100].iter().all(|&v| v == 1.0) && s[100] == 0.0);
        assert!(close(rsr(&s), 100.0 / 101.0));
        assert_eq!(rsr(&success_curve(&[0.0; 3]).unwrap()), 0.0);
        assert_eq!(rpr(&precision_curve(&[0.0; 3]).unwrap()), 1.0);
        assert_eq!(rpr(&precision_curve(&[21.0; 3]).unwrap()), 0.0);
        assert_eq!(op_t(&[0.6, 0.4], 0.5), 0.5);
        assert_eq!(op_t(&[0.1, 0.2], 0.0), 1.0);
        assert!(success_curve(&[]).is_err() && precision_curve(&[]).is_err());
    }

    #[test]
    fn evaluate_excludes_first_frame_and_checks_indices() {
        let gt: BTreeMap<usize, BBox> = (0..4).map(|j| (j, BBox::new(j as f64, 0.0, 4.0, 4.0))).collect();
        let mut pred = gt.clone();
        pred.insert(0, BBox::new(100.0, 100.0, 1.0, 1.0));
        let e = evaluate("s", &[], &pred, &gt).unwrap();
        assert_eq!(e.frames, 3);
        assert_eq!((e.rpr, e.op50), (1.0, 1.0));
        pred.remove(&2);
        assert!(matches!(evaluate("s", &[], &pred, &gt), Err(Error::Data(_))));
    }

    #[test]
    fn report_aggregates() {
        let gt: BTreeMap<usize, BBox> = (0..3).map(|j| (j, BBox::new(0.0, 0.0, 4.0, 4.0))).collect();
        let off: BTreeMap<usize, BBox> = (0..3).map(|j| (j, BBox::new(2.0, 0.0, 4.0, 4.0))).collect();
        let a = evaluate("a", &["FWB".into()], &gt, &gt).unwrap();
        let b = evaluate("b", &[], &off, &gt).unwrap();
        let single = report(std::slice::from_ref(&a), None);
        assert_eq!(single.rsr, a.rsr);
        let r = report(&[a.clone(), b.clone()], None);
        assert!(close(r.rsr, (a.rsr + b.rsr) / 2.0));
        assert!(close(r.op50, (a.op50 + b.op50) / 2.0));
        assert_eq!(r.per_attribute["FWB"].rsr, a.rsr);
        assert_eq!(r.per_attribute["all"].sequences, 2);
    }

    #[test]
    fn parses_prediction_lines() {
        let p = parse_predictions("0,1,2,3,4,0.5,0.4,0.6\n1,1,2,3,4\n", "p").unwrap();
        assert_eq!(p.len(), 2);
        assert!(matches!(parse_predictions("0,1,2\n", "p"), Err(Error::Parse { .. })));
    }
}
