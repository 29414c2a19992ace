//! Tracking metrics over top-left `[x, y, w, h]` pixel boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type PixelBox = [f64; 4];

/// IoU thresholds `0, 0.05, …, 1.0` of the success curve.
pub fn success_thresholds() -> [f64; 21] {
    std::array::from_fn(|i| i as f64 / 20.0)
}

fn check(b: &PixelBox) -> Result<()> {
    if b[2] > 0.0 && b[3] > 0.0 && b.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::DegenerateBox(*b))
    }
}

pub fn iou(a: &PixelBox, b: &PixelBox) -> Result<f64> {
    check(a)?;
    check(b)?;
    let iw = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let ih = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    let inter = iw.max(0.0) * ih.max(0.0);
    Ok(inter / (a[2] * a[3] + b[2] * b[3] - inter))
}

pub fn center(b: &PixelBox) -> (f64, f64) {
    (b[0] + b[2] / 2.0, b[1] + b[3] / 2.0)
}

pub fn center_error(a: &PixelBox, b: &PixelBox) -> f64 {
    let (ax, ay) = center(a);
    let (bx, by) = center(b);
    (ax - bx).hypot(ay - by)
}

/// Fraction of frames with center error `≤ threshold`.
pub fn precision_rate(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("precision_rate"));
    }
    Ok(errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64)
}

/// Mean over the 21 thresholds of the fraction of frames with IoU above it.
pub fn success_rate(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::EmptyInput("success_rate"));
    }
    let n = ious.len() as f64;
    let t = success_thresholds();
    Ok(t.iter()
        .map(|&th| ious.iter().filter(|&&v| v > th).count() as f64 / n)
        .sum::<f64>()
        / t.len() as f64)
}

/// Precision with each center offset divided component-wise by the ground
/// truth extent.
pub fn norm_precision_rate(pred: &[PixelBox], gt: &[PixelBox], threshold: f64) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("norm_precision_rate"));
    }
    if pred.len() != gt.len() {
        return Err(Error::shape("norm_precision_rate", &[pred.len()], &[gt.len()]));
    }
    let mut hits = 0;
    for (p, g) in pred.iter().zip(gt) {
        check(g)?;
        let (px, py) = center(p);
        let (gx, gy) = center(g);
        if ((px - gx) / g[2]).hypot((py - gy) / g[3]) <= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / pred.len() as f64)
}

/// `(PR, SR)` of `pred` against one annotation stream.
pub fn pr_sr(pred: &[PixelBox], gt: &[PixelBox], pr_threshold: f64) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::shape("pr_sr", &[pred.len()], &[gt.len()]));
    }
    let errors: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| center_error(p, g)).collect();
    let ious = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect::<Result<Vec<_>>>()?;
    Ok((precision_rate(&errors, pr_threshold)?, success_rate(&ious)?))
}

/// `(MPR, MSR)`: the best PR and best SR over the annotation streams.
pub fn max_metrics(pred: &[PixelBox], streams: &[&[PixelBox]], pr_threshold: f64) -> Result<(f64, f64)> {
    if streams.is_empty() {
        return Err(Error::EmptyInput("max_metrics"));
    }
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for s in streams {
        let (pr, sr) = pr_sr(pred, s, pr_threshold)?;
        best = (best.0.max(pr), best.1.max(sr));
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub pr: f64,
    pub sr: f64,
    pub npr: f64,
    pub mpr: f64,
    pub msr: f64,
}

impl MetricSummary {
    pub fn compute(
        pred: &[PixelBox],
        gt: &[PixelBox],
        alt: Option<&[PixelBox]>,
        pr_threshold: f64,
        npr_threshold: f64,
    ) -> Result<Self> {
        let (pr, sr) = pr_sr(pred, gt, pr_threshold)?;
        let npr = norm_precision_rate(pred, gt, npr_threshold)?;
        let mut streams = vec![gt];
        streams.extend(alt);
        let (mpr, msr) = max_metrics(pred, &streams, pr_threshold)?;
        Ok(Self { pr, sr, npr, mpr, msr })
    }

    pub fn rows(&self) -> [(&'static str, f64); 5] {
        [("PR", self.pr), ("SR", self.sr), ("NPR", self.npr), ("MPR", self.mpr), ("MSR", self.msr)]
    }

    /// `metric,value` CSV with one row per metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_and_center_examples() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[5.0, 5.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((iou(&a, &[1.0, 1.0, 2.0, 2.0]).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert!(iou(&a, &[0.0, 0.0, 0.0, 1.0]).is_err());
        assert_eq!(center_error(&a, &a), 0.0);
        assert_eq!(center_error(&a, &[3.0, 4.0, 2.0, 2.0]), 5.0);
    }

    #[test]
    fn rate_examples() {
        assert_eq!(precision_rate(&[0.0, 0.0], 20.0).unwrap(), 1.0);
        assert_eq!(precision_rate(&[5.0, 25.0], 20.0).unwrap(), 0.5);
        assert_eq!(precision_rate(&[5.0, 25.0], 1.0).unwrap(), 0.0);
        assert!(precision_rate(&[], 20.0).is_err());
        assert!((success_rate(&[1.0; 3]).unwrap() - 20.0 / 21.0).abs() < 1e-15);
        assert_eq!(success_rate(&[0.0; 3]).unwrap(), 0.0);
        // 0.5 exceeds the ten thresholds 0, 0.05, …, 0.45
        assert!((success_rate(&[0.5]).unwrap() - 10.0 / 21.0).abs() < 1e-15);
        assert!(success_rate(&[]).is_err());
    }

    #[test]
    fn npr_examples() {
        let g = [10.0, 10.0, 20.0, 40.0];
        assert_eq!(norm_precision_rate(&[g], &[g], 0.2).unwrap(), 1.0);
        let near = [12.0, 10.0, 20.0, 40.0];
        assert_eq!(norm_precision_rate(&[near], &[g], 0.2).unwrap(), 1.0);
        let far = [30.0, 50.0, 20.0, 40.0];
        assert_eq!(norm_precision_rate(&[far], &[g], 0.2).unwrap(), 0.0);
        assert!(norm_precision_rate(&[g], &[[0.0, 0.0, 0.0, 1.0]], 0.2).is_err());
    }

    #[test]
    fn max_metric_examples() {
        let s1 = [[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 10.0, 10.0]];
        let s2 = [[40.0, 40.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]];
        let (pr, sr) = pr_sr(&s1, &s1, 20.0).unwrap();
        assert_eq!(max_metrics(&s1, &[&s1], 20.0).unwrap(), (pr, sr));
        let (mpr, _) = max_metrics(&s2, &[&s1, &s2], 20.0).unwrap();
        assert_eq!(mpr, 1.0);
        let csv = MetricSummary::compute(&s1, &s1, None, 20.0, 0.2).unwrap().to_csv();
        assert!(csv.starts_with("metric,value\nPR,1\nSR,0.95"));
    }
}
