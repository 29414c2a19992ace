//! Sequences on disk: `rgb/` and `tir/` PNG frames (`000000.png`, …),
//! `gt.json`, `desc.json` and `meta.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::PixelBox;
use super::synth::SequenceRecord;
use crate::crm::FrameAttributes;
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Serialize, Deserialize)]
struct GroundTruth {
    boxes: Vec<PixelBox>,
    #[serde(default)]
    alt_boxes: Option<Vec<PixelBox>>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    seed: u64,
    attributes: Vec<FrameAttributes>,
}

fn frame_path(dir: &Path, stream: &str, t: usize) -> PathBuf {
    dir.join(stream).join(format!("{t:06}.png"))
}

pub fn write_sequence(seq: &SequenceRecord, dir: &Path) -> Result<()> {
    seq.validate()?;
    for stream in ["rgb", "tir"] {
        std::fs::create_dir_all(dir.join(stream))?;
    }
    for t in 0..seq.len() {
        seq.rgb[t].to_png(&frame_path(dir, "rgb", t))?;
        seq.tir[t].to_png(&frame_path(dir, "tir", t))?;
    }
    let gt = GroundTruth {
        boxes: seq.gt_boxes.clone(),
        alt_boxes: seq.gt_boxes_alt.clone(),
    };
    std::fs::write(dir.join("gt.json"), serde_json::to_string_pretty(&gt)?)?;
    std::fs::write(dir.join("desc.json"), serde_json::to_string_pretty(&seq.descriptions)?)?;
    let meta = Meta {
        seed: seq.seed,
        attributes: seq.attributes.clone(),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_sequence(dir: &Path) -> Result<SequenceRecord> {
    let gt: GroundTruth = serde_json::from_str(&std::fs::read_to_string(dir.join("gt.json"))?)?;
    let descriptions: Vec<String> = serde_json::from_str(&std::fs::read_to_string(dir.join("desc.json"))?)?;
    let meta: Meta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let n = gt.boxes.len();
    let load = |stream: &str| (0..n).map(|t| Image::from_png(&frame_path(dir, stream, t))).collect::<Result<Vec<_>>>();
    let seq = SequenceRecord {
        rgb: load("rgb")?,
        tir: load("tir")?,
        gt_boxes: gt.boxes,
        gt_boxes_alt: gt.alt_boxes,
        descriptions,
        attributes: meta.attributes,
        seed: meta.seed,
    };
    seq.validate()?;
    Ok(seq)
}

/// Sequence directories under `root` (any directory holding `gt.json`),
/// sorted by name. `root` itself counts if it is one.
pub fn find_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("gt.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.join("gt.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::arg(format!("no sequences under {}", root.display())));
    }
    Ok(dirs)
}
