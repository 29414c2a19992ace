//! JSON-lines run logs: a header, one record per frame, a metric summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{iou, center_error, MetricSummary, PixelBox};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub sequence_seed: u64,
    pub config_seed: u64,
    pub frames: usize,
    pub atf_order: String,
    pub gate: String,
    pub pr_threshold: f64,
    pub npr_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub pred: PixelBox,
    pub gt: PixelBox,
    pub gt_alt: Option<PixelBox>,
    pub iou: f64,
    pub center_error: f64,
    pub kb_size: [usize; 2],
    /// Search tokens left after fusion; `None` on the initialization frame.
    pub tokens_kept: Option<usize>,
    pub description_used: String,
    /// Templates and description were refreshed after this frame.
    pub updated: bool,
    pub max_score: Option<f64>,
}

impl FrameRecord {
    pub fn new(frame: usize, pred: PixelBox, gt: PixelBox, gt_alt: Option<PixelBox>) -> Result<Self> {
        Ok(Self {
            frame,
            pred,
            gt,
            gt_alt,
            iou: iou(&pred, &gt)?,
            center_error: center_error(&pred, &gt),
            kb_size: [0, 0],
            tokens_kept: None,
            description_used: String::new(),
            updated: false,
            max_score: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(RunHeader),
    Frame(FrameRecord),
    Summary(MetricSummary),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub frames: Vec<FrameRecord>,
    pub summary: MetricSummary,
}

impl RunLog {
    /// Metrics over every frame record, using the header thresholds.
    pub fn recompute_summary(&self) -> Result<MetricSummary> {
        let pred: Vec<PixelBox> = self.frames.iter().map(|f| f.pred).collect();
        let gt: Vec<PixelBox> = self.frames.iter().map(|f| f.gt).collect();
        let alt: Option<Vec<PixelBox>> = self.frames.iter().map(|f| f.gt_alt).collect();
        MetricSummary::compute(
            &pred,
            &gt,
            alt.as_deref(),
            self.header.pr_threshold,
            self.header.npr_threshold,
        )
    }

    pub fn from_frames(header: RunHeader, frames: Vec<FrameRecord>) -> Result<Self> {
        let mut log = Self {
            header,
            frames,
            summary: MetricSummary {
                pr: 0.0,
                sr: 0.0,
                npr: 0.0,
                mpr: 0.0,
                msr: 0.0,
            },
        };
        log.summary = log.recompute_summary()?;
        Ok(log)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&Line::Header(self.header.clone()))?;
        s.push('\n');
        for f in &self.frames {
            s.push_str(&serde_json::to_string(&Line::Frame(f.clone()))?);
            s.push('\n');
        }
        s.push_str(&serde_json::to_string(&Line::Summary(self.summary))?);
        s.push('\n');
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut frames = Vec::new();
        let mut summary = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                Line::Header(h) if header.is_none() => header = Some(h),
                Line::Frame(f) => frames.push(f),
                Line::Summary(s) => summary = Some(s),
                Line::Header(_) => return Err(Error::arg(format!("second header on line {}", n + 1))),
            }
        }
        let header = header.ok_or_else(|| Error::arg("run log has no header"))?;
        if frames.is_empty() {
            return Err(Error::EmptyInput("run log frames"));
        }
        let summary = summary.ok_or_else(|| Error::arg("run log has no summary"))?;
        Ok(Self { header, frames, summary })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> RunHeader {
        RunHeader {
            sequence_seed: 1,
            config_seed: 2,
            frames: 3,
            atf_order: "a".into(),
            gate: "g".into(),
            pr_threshold: 20.0,
            npr_threshold: 0.2,
        }
    }

    #[test]
    fn perfect_track_summary_and_round_trip() {
        let boxes = [[0.0, 0.0, 4.0, 4.0], [2.0, 2.0, 4.0, 4.0], [5.0, 1.0, 3.0, 6.0]];
        let frames = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| FrameRecord::new(i, *b, *b, None).unwrap())
            .collect();
        let log = RunLog::from_frames(header(), frames).unwrap();
        assert_eq!(log.summary.pr, 1.0);
        assert!((log.summary.sr - 20.0 / 21.0).abs() < 1e-12);
        let text = log.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(RunLog::from_jsonl(&text).unwrap(), log);
    }

    #[test]
    fn missing_parts_rejected() {
        assert!(RunLog::from_jsonl("").is_err());
        let h = serde_json::to_string(&Line::Header(header())).unwrap();
        assert!(RunLog::from_jsonl(&h).is_err());
    }
}
