//! Deterministic synthetic RGB/TIR sequences: a colored square bouncing
//! inside the frame, with optional night frames, an occluding bar and
//! distractor squares.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::PixelBox;
use crate::crm::{attribute_sentence, FrameAttributes};
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Named target colors understood by [`SequenceSpec::color`].
pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.15, 0.25, 0.9]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("magenta", [0.85, 0.15, 0.8]),
    ("cyan", [0.1, 0.8, 0.85]),
];

pub fn color_rgb(name: &str) -> Result<[f64; 3]> {
    COLORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::Config(format!("unknown color {name:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceSpec {
    pub length: usize,
    /// Frame edge in pixels.
    pub edge: usize,
    /// Target side in pixels.
    pub target_size: f64,
    pub color: String,
    /// Pixels per frame.
    pub speed: f64,
    /// Half-open frame range rendered as night in RGB.
    pub night: Option<[usize; 2]>,
    pub occluder: bool,
    pub distractors: usize,
    /// Offset of the second annotation stream, if any.
    pub misalign: Option<[f64; 2]>,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            length: 40,
            edge: 128,
            target_size: 16.0,
            color: "red".into(),
            speed: 2.0,
            night: None,
            occluder: false,
            distractors: 0,
            misalign: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub rgb: Vec<Image>,
    pub tir: Vec<Image>,
    pub gt_boxes: Vec<PixelBox>,
    pub gt_boxes_alt: Option<Vec<PixelBox>>,
    pub descriptions: Vec<String>,
    pub attributes: Vec<FrameAttributes>,
    pub seed: u64,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.gt_boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_boxes.is_empty()
    }

    pub fn edge(&self) -> usize {
        self.rgb.first().map_or(0, Image::edge)
    }

    /// First `len` frames.
    pub fn truncated(&self, len: usize) -> Self {
        Self {
            rgb: self.rgb[..len].to_vec(),
            tir: self.tir[..len].to_vec(),
            gt_boxes: self.gt_boxes[..len].to_vec(),
            gt_boxes_alt: self.gt_boxes_alt.as_ref().map(|a| a[..len].to_vec()),
            descriptions: self.descriptions[..len].to_vec(),
            attributes: self.attributes[..len].to_vec(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [self.rgb.len(), self.tir.len(), self.descriptions.len(), self.attributes.len()];
        if n == 0 || lens.iter().any(|&l| l != n) || self.gt_boxes_alt.as_ref().is_some_and(|a| a.len() != n) {
            return Err(Error::arg(format!("inconsistent sequence lengths: {n} boxes vs {lens:?}")));
        }
        let e = self.edge();
        if self.rgb.iter().chain(&self.tir).any(|im| im.edge() != e) {
            return Err(Error::arg("frames differ in size"));
        }
        let e = e as f64;
        for b in self.gt_boxes.iter().chain(self.gt_boxes_alt.iter().flatten()) {
            if !(b[2] > 0.0 && b[3] > 0.0 && b[0] >= 0.0 && b[1] >= 0.0 && b[0] + b[2] <= e && b[1] + b[3] <= e) {
                return Err(Error::DegenerateBox(*b));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Square {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    size: f64,
}

impl Square {
    fn step(&mut self, edge: f64) {
        self.x += self.vx;
        self.y += self.vy;
        if self.x < 0.0 || self.x + self.size > edge {
            self.vx = -self.vx;
            self.x = self.x.clamp(0.0, edge - self.size);
        }
        if self.y < 0.0 || self.y + self.size > edge {
            self.vy = -self.vy;
            self.y = self.y.clamp(0.0, edge - self.size);
        }
    }

    fn bbox(&self) -> PixelBox {
        [self.x, self.y, self.size, self.size]
    }
}

/// Area of pixel `(px, py)` covered by the axis-aligned rectangle `b`.
fn coverage(b: &PixelBox, px: usize, py: usize) -> f64 {
    let (x0, y0) = (px as f64, py as f64);
    let w = ((x0 + 1.0).min(b[0] + b[2]) - x0.max(b[0])).max(0.0);
    let h = ((y0 + 1.0).min(b[1] + b[3]) - y0.max(b[1])).max(0.0);
    w * h
}

fn paint(img: &mut Image, b: &PixelBox, color: [f64; 3]) {
    let e = img.edge();
    let x0 = b[0].floor().max(0.0) as usize;
    let y0 = b[1].floor().max(0.0) as usize;
    let x1 = ((b[0] + b[2]).ceil() as usize).min(e);
    let y1 = ((b[1] + b[3]).ceil() as usize).min(e);
    for y in y0..y1 {
        for x in x0..x1 {
            let a = coverage(b, x, y);
            for (c, &v) in color.iter().enumerate() {
                let old = img.get(c, y, x);
                img.set(c, y, x, old * (1.0 - a) + v * a);
            }
        }
    }
}

fn box_blur(img: &Image) -> Image {
    let e = img.edge() as isize;
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..e {
            for x in 0..e {
                let (mut s, mut n) = (0.0, 0.0);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if (0..e).contains(&yy) && (0..e).contains(&xx) {
                            s += img.get(c, yy as usize, xx as usize);
                            n += 1.0;
                        }
                    }
                }
                out.set(c, y as usize, x as usize, s / n);
            }
        }
    }
    out
}

fn direction(vx: f64, vy: f64) -> &'static str {
    if vx == 0.0 && vy == 0.0 {
        "still"
    } else if vx.abs() >= vy.abs() {
        if vx > 0.0 {
            "right"
        } else {
            "left"
        }
    } else if vy > 0.0 {
        "down"
    } else {
        "up"
    }
}

fn overlap_fraction(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih / (a[2] * a[3])
}

const RGB_BACKGROUND: f64 = 0.4;
const TIR_BACKGROUND: f64 = 0.15;
const TIR_TARGET: f64 = 0.85;
const TIR_DISTRACTOR: f64 = 0.3;
const NIGHT_GAIN: f64 = 0.3;
/// Fraction of the target color kept against the background at night.
const NIGHT_CONTRAST: f64 = 0.3;
const OCCLUDED_FRACTION: f64 = 0.3;

pub fn gen_sequence(spec: &SequenceSpec) -> Result<SequenceRecord> {
    if spec.length < 2 {
        return Err(Error::Config("sequence length must be at least 2".into()));
    }
    let e = spec.edge as f64;
    if !(spec.target_size > 0.0 && spec.target_size < e) {
        return Err(Error::Config(format!(
            "target size {} does not fit a {}-pixel frame",
            spec.target_size, spec.edge
        )));
    }
    let color = color_rgb(&spec.color)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.edge * spec.edge;

    let texture_rgb: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.08..0.08)).collect();
    let texture_tir: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();

    let launch = |rng: &mut ChaCha8Rng, size: f64, speed: f64| {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        Square {
            x: rng.gen_range(0.0..e - size),
            y: rng.gen_range(0.0..e - size),
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            size,
        }
    };
    let mut target = launch(&mut rng, spec.target_size, spec.speed);
    let others: Vec<&str> = COLORS.iter().map(|c| c.0).filter(|c| *c != spec.color).collect();
    let mut distractors: Vec<(Square, [f64; 3])> = (0..spec.distractors)
        .map(|i| {
            let sq = launch(&mut rng, spec.target_size * 0.8, spec.speed.max(1.0));
            (sq, color_rgb(others[i % others.len()]).expect("listed color"))
        })
        .collect();
    let bar_w = (spec.target_size / 2.0).max(1.0);
    let mut bar_x = rng.gen_range(0.0..e - bar_w);
    let mut bar_v = 1.5;

    let mut rec = SequenceRecord {
        rgb: Vec::with_capacity(spec.length),
        tir: Vec::with_capacity(spec.length),
        gt_boxes: Vec::with_capacity(spec.length),
        gt_boxes_alt: spec.misalign.map(|_| Vec::with_capacity(spec.length)),
        descriptions: Vec::with_capacity(spec.length),
        attributes: Vec::with_capacity(spec.length),
        seed: spec.seed,
    };

    for t in 0..spec.length {
        if t > 0 {
            target.step(e);
            for (d, _) in &mut distractors {
                d.step(e);
            }
            bar_x += bar_v;
            if bar_x < 0.0 || bar_x + bar_w > e {
                bar_v = -bar_v;
                bar_x = bar_x.clamp(0.0, e - bar_w);
            }
        }
        let night = spec.night.is_some_and(|[a, b]| (a..b).contains(&t));
        let gt = target.bbox();
        let bar = [bar_x, 0.0, bar_w, e];
        let occluded = spec.occluder && overlap_fraction(&gt, &bar) > OCCLUDED_FRACTION;

        let mut rgb = Image::filled(spec.edge, [0.0; 3]);
        let mut tir = Image::filled(spec.edge, [0.0; 3]);
        for y in 0..spec.edge {
            for x in 0..spec.edge {
                let k = y * spec.edge + x;
                let noise = rng.gen_range(-0.02..0.02);
                for c in 0..3 {
                    rgb.set(c, y, x, RGB_BACKGROUND + texture_rgb[k] + noise);
                    tir.set(c, y, x, TIR_BACKGROUND + texture_tir[k] + noise / 2.0);
                }
            }
        }
        for (d, c) in &distractors {
            paint(&mut rgb, &d.bbox(), *c);
            paint(&mut tir, &d.bbox(), [TIR_DISTRACTOR; 3]);
        }
        let target_rgb = if night {
            color.map(|c| RGB_BACKGROUND + NIGHT_CONTRAST * (c - RGB_BACKGROUND))
        } else {
            color
        };
        paint(&mut rgb, &gt, target_rgb);
        paint(&mut tir, &gt, [TIR_TARGET; 3]);
        if spec.occluder {
            paint(&mut rgb, &bar, [0.55; 3]);
            paint(&mut tir, &bar, [0.25; 3]);
        }
        if night {
            rgb = Image::new(spec.edge, rgb.data().iter().map(|v| v * NIGHT_GAIN).collect())?;
        }
        let mut tir = box_blur(&tir);
        rgb.quantize();
        tir.quantize();

        let attrs = FrameAttributes {
            color: spec.color.clone(),
            direction: direction(target.vx, target.vy).into(),
            night,
            occluded,
        };
        rec.descriptions.push(attribute_sentence(&attrs));
        rec.attributes.push(attrs);
        if let (Some(alt), Some([dx, dy])) = (rec.gt_boxes_alt.as_mut(), spec.misalign) {
            alt.push([
                (gt[0] + dx).clamp(0.0, e - gt[2]),
                (gt[1] + dy).clamp(0.0, e - gt[3]),
                gt[2],
                gt[3],
            ]);
        }
        rec.gt_boxes.push(gt);
        rec.rgb.push(rgb);
        rec.tir.push(tir);
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Euclidean distance between mean target and mean background colors.
    fn contrast(img: &Image, b: &PixelBox) -> f64 {
        let e = img.edge();
        let mut d = 0.0;
        for c in 0..3 {
            let (mut si, mut ni, mut so, mut no) = (0.0, 0.0, 0.0, 0.0);
            for y in 0..e {
                for x in 0..e {
                    match coverage(b, x, y) {
                        1.0 => (si, ni) = (si + img.get(c, y, x), ni + 1.0),
                        0.0 => (so, no) = (so + img.get(c, y, x), no + 1.0),
                        _ => {}
                    }
                }
            }
            d += (si / ni - so / no).powi(2);
        }
        d.sqrt()
    }

    #[test]
    fn deterministic_and_valid() {
        let spec = SequenceSpec {
            length: 6,
            distractors: 2,
            occluder: true,
            misalign: Some([2.0, -1.0]),
            seed: 9,
            ..SequenceSpec::default()
        };
        let a = gen_sequence(&spec).unwrap();
        assert_eq!(a, gen_sequence(&spec).unwrap());
        a.validate().unwrap();
        assert_eq!(a.gt_boxes_alt.as_ref().unwrap().len(), 6);
        assert_ne!(a, gen_sequence(&SequenceSpec { seed: 10, ..spec }).unwrap());
    }

    #[test]
    fn zero_speed_keeps_box() {
        let s = gen_sequence(&SequenceSpec { speed: 0.0, length: 5, ..SequenceSpec::default() }).unwrap();
        assert!(s.gt_boxes.iter().all(|b| *b == s.gt_boxes[0]));
        assert!(s.descriptions.iter().all(|d| d == "a red square moving still"));
    }

    #[test]
    fn night_frames_lower_rgb_contrast() {
        let spec = SequenceSpec {
            length: 4,
            night: Some([2, 4]),
            ..SequenceSpec::default()
        };
        let s = gen_sequence(&spec).unwrap();
        for t in 0..4 {
            let (c_rgb, c_tir) = (contrast(&s.rgb[t], &s.gt_boxes[t]), contrast(&s.tir[t], &s.gt_boxes[t]));
            if t >= 2 {
                assert!(c_rgb < c_tir, "frame {t}: rgb {c_rgb} tir {c_tir}");
                assert!(s.descriptions[t].contains("dim"));
            } else {
                assert!(!s.attributes[t].night);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(gen_sequence(&SequenceSpec { length: 1, ..SequenceSpec::default() }).is_err());
        assert!(gen_sequence(&SequenceSpec { target_size: 200.0, ..SequenceSpec::default() }).is_err());
        assert!(gen_sequence(&SequenceSpec { color: "plaid".into(), ..SequenceSpec::default() }).is_err());
    }
}
