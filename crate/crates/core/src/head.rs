//! Prediction head, box decoding and the training loss.
//!
//! Head output is token-major: row `p = r·g + c` of the `g×g` search grid
//! holds `[cls, off_x, off_y, w, h]`, all sigmoid-activated. Maps are
//! indexed `(i, j)` with `i` the horizontal cell (`c`) and `j` the vertical
//! cell (`r`), so a decoded center is `(i + off_x, j + off_y)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{hole_fill, TokenSequence};
use crate::error::{Error, Result};
use crate::numeric::nn::{fan_in_uniform, Linear};
use crate::numeric::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

pub const OUTPUT_CHANNELS: usize = 5;
pub const FCN_STAGES: usize = 4;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Probability clip used inside the focal loss.
pub const FOCAL_EPS: f64 = 1e-4;
/// Classification bias at init, `logit(0.1)`.
const CLS_PRIOR_BIAS: f64 = -2.197_224_577_336_219_6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    /// 1×1 convolution `2C → C`.
    pub reduce: Linear,
    /// 3×3 kernels as `[9C×C]` matrices.
    pub convs: Vec<ParamId>,
    pub bns: Vec<BnParams>,
    /// 1×1 convolution `C → 5`.
    pub out: Linear,
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, c: usize, rng: &mut impl Rng) -> Self {
        let reduce = Linear::new(store, "head.reduce", 2 * c, c, rng);
        let mut convs = Vec::with_capacity(FCN_STAGES);
        let mut bns = Vec::with_capacity(FCN_STAGES);
        for s in 1..=FCN_STAGES {
            convs.push(store.add(format!("head.stage{s}.conv"), fan_in_uniform(&[9 * c, c], 9 * c, rng)));
            let buffer = |mut t: Tensor| {
                t.requires_grad = false;
                t
            };
            bns.push(BnParams {
                gain: store.add(format!("head.stage{s}.bn.gain"), Tensor::ones(&[c]).with_grad()),
                bias: store.add(format!("head.stage{s}.bn.bias"), Tensor::zeros(&[c]).with_grad()),
                running_mean: store.add(format!("head.stage{s}.bn.mean"), buffer(Tensor::zeros(&[c]))),
                running_var: store.add(format!("head.stage{s}.bn.var"), buffer(Tensor::ones(&[c]))),
            });
        }
        let out = Linear::new(store, "head.out", c, OUTPUT_CHANNELS, rng);
        store.get_mut(out.b).data_mut()[0] = CLS_PRIOR_BIAS;
        Self { reduce, convs, bns, out }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current grid.
    Batch,
    /// Normalize with the stored running statistics.
    Frozen,
}

/// Per-channel statistics of one batch-norm input.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct HeadOutput {
    /// `[g²×5]`, token-major.
    pub out: Var,
    /// Batch statistics per stage (empty in [`BnMode::Frozen`]).
    pub stats: Vec<BnStats>,
}

/// Dense `g²×C` grid from live search tokens plus frozen hole values.
pub fn scatter_to_grid(tape: &mut Tape, tokens: Var, seq: &TokenSequence, grid: usize) -> Result<Var> {
    let c = tape.value(tokens).cols();
    let n = grid * grid;
    if tape.value(tokens).rows() != seq.search_index.len() || seq.search_index.len() + seq.discarded.len() != n {
        return Err(Error::arg(format!(
            "selection metadata ({} live, {} discarded) does not cover a {grid}x{grid} grid",
            seq.search_index.len(),
            seq.discarded.len()
        )));
    }
    if seq.discarded.is_empty() && seq.search_index.iter().enumerate().all(|(k, &i)| k == i) {
        return Ok(tokens);
    }
    let fill = hole_fill(seq, n, c);
    tape.scatter_rows(tokens, &seq.search_index, &fill)
}

fn column_stats(t: &Tensor) -> BnStats {
    let (r, c) = (t.rows(), t.cols());
    let mut mean = vec![0.0; c];
    for i in 0..r {
        for (m, v) in mean.iter_mut().zip(t.row(i)) {
            *m += v / r as f64;
        }
    }
    let mut var = vec![0.0; c];
    for i in 0..r {
        for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / r as f64;
        }
    }
    BnStats { mean, var }
}

/// Runs the head on the two modalities' final search tokens.
#[allow(clippy::too_many_arguments)]
pub fn head_forward(
    tape: &mut Tape,
    p: &Bound,
    head: &HeadParams,
    x_rgb: Var,
    seq_rgb: &TokenSequence,
    x_tir: Var,
    seq_tir: &TokenSequence,
    grid: usize,
    mode: BnMode,
) -> Result<HeadOutput> {
    let rgb = scatter_to_grid(tape, x_rgb, seq_rgb, grid)?;
    let tir = scatter_to_grid(tape, x_tir, seq_tir, grid)?;
    let joint = tape.concat_cols(&[rgb, tir])?;
    let mut h = head.reduce.forward(tape, p, joint)?;
    let mut stats = Vec::new();
    for (conv, bn) in head.convs.iter().zip(&head.bns) {
        let cols = tape.im2col3(h, grid, grid)?;
        let y = tape.matmul(cols, p[*conv])?;
        let normed = match mode {
            BnMode::Batch => {
                stats.push(column_stats(tape.value(y)));
                tape.normalize_cols(y, BN_EPS)
            }
            BnMode::Frozen => {
                let mean = tape.value(p[bn.running_mean]).data();
                let var = tape.value(p[bn.running_var]).data();
                let shift = Tensor::vector(&mean.iter().map(|m| -m).collect::<Vec<_>>());
                let inv = Tensor::vector(&var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect::<Vec<_>>());
                let (shift, inv) = (tape.constant(shift), tape.constant(inv));
                let centered = tape.add_row(y, shift)?;
                tape.mul_row(centered, inv)?
            }
        };
        let scaled = tape.mul_row(normed, p[bn.gain])?;
        let shifted = tape.add_row(scaled, p[bn.bias])?;
        h = tape.relu(shifted);
    }
    let logits = head.out.forward(tape, p, h)?;
    Ok(HeadOutput {
        out: tape.sigmoid(logits),
        stats,
    })
}

/// Exponential moving update of the running batch-norm buffers.
pub fn update_running_stats(store: &mut ParamStore, head: &HeadParams, stats: &[BnStats]) {
    for (bn, s) in head.bns.iter().zip(stats) {
        for (id, batch) in [(bn.running_mean, &s.mean), (bn.running_var, &s.var)] {
            for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// Head maps on a square `g×g` grid, each indexed `(i, j)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMaps {
    pub grid: usize,
    pub cls: Tensor,
    pub offset: [Tensor; 2],
    pub size: [Tensor; 2],
}

impl PredictionMaps {
    /// Token index of map cell `(i, j)`.
    pub fn token(grid: usize, i: usize, j: usize) -> usize {
        j * grid + i
    }

    pub fn from_output(out: &Tensor, grid: usize) -> Result<Self> {
        if out.shape() != [grid * grid, OUTPUT_CHANNELS] {
            return Err(Error::shape("prediction maps", out.shape(), &[grid * grid, OUTPUT_CHANNELS]));
        }
        let channel = |k: usize| {
            let mut t = Tensor::zeros(&[grid, grid]);
            for i in 0..grid {
                for j in 0..grid {
                    t.set(i, j, out.at(Self::token(grid, i, j), k));
                }
            }
            t
        };
        Ok(Self {
            grid,
            cls: channel(0),
            offset: [channel(1), channel(2)],
            size: [channel(3), channel(4)],
        })
    }

    pub fn max_score(&self) -> f64 {
        let (i, j) = argmax_cell(&self.cls);
        self.cls.at(i, j)
    }
}

/// Center `(x, y)` in grid cells; `w`, `h` as fractions of the search edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// `[cx, cy, w, h]` in search-crop pixels.
    pub fn to_pixels(&self, patch: usize, search_edge: usize) -> [f64; 4] {
        let (p, e) = (patch as f64, search_edge as f64);
        [self.x * p, self.y * p, self.w * e, self.h * e]
    }

    pub fn from_pixels(center_box: [f64; 4], patch: usize, search_edge: usize) -> Self {
        let (p, e) = (patch as f64, search_edge as f64);
        Self {
            x: center_box[0] / p,
            y: center_box[1] / p,
            w: center_box[2] / e,
            h: center_box[3] / e,
        }
    }

    /// `(x, y)` divided by the grid size, `(w, h)` unchanged.
    pub fn normalized(&self, grid: usize) -> [f64; 4] {
        let g = grid as f64;
        [self.x / g, self.y / g, self.w, self.h]
    }
}

/// First maximum in row-major order.
pub fn argmax_cell(map: &Tensor) -> (usize, usize) {
    let cols = map.cols();
    let mut best = 0;
    for (k, &v) in map.data().iter().enumerate() {
        if v > map.data()[best] {
            best = k;
        }
    }
    (best / cols, best % cols)
}

pub fn decode_bbox(maps: &PredictionMaps) -> BBox {
    let (i, j) = argmax_cell(&maps.cls);
    BBox {
        x: i as f64 + maps.offset[0].at(i, j),
        y: j as f64 + maps.offset[1].at(i, j),
        w: maps.size[0].at(i, j),
        h: maps.size[1].at(i, j),
    }
}

/// `σ_g = max(1, diag/6)` with the diagonal measured in grid cells.
pub fn gaussian_sigma(gt: &BBox, grid: usize) -> f64 {
    let g = grid as f64;
    ((gt.w * g).hypot(gt.h * g) / 6.0).max(1.0)
}

/// Gaussian target `[g×g]` indexed `(i, j)`, peaking at 1 in the cell that
/// contains `center`.
pub fn gt_heatmap(grid: usize, center: (f64, f64), sigma: f64) -> Result<Tensor> {
    let g = grid as f64;
    let (x, y) = center;
    if !(x >= 0.0 && x < g && y >= 0.0 && y < g) {
        return Err(Error::arg(format!("center ({x}, {y}) outside {grid}x{grid} grid")));
    }
    let (ci, cj) = (x.floor(), y.floor());
    let mut t = Tensor::zeros(&[grid, grid]);
    for i in 0..grid {
        for j in 0..grid {
            let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
            t.set(i, j, (-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    Ok(t)
}

/// Penalty-reduced focal loss (`α = 2`, `β = 4`) of scores `pred` against
/// `target`, normalized by the number of positive cells. Returns the value
/// and the gradient with respect to `pred`.
pub fn focal_terms(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::shape("focal_loss", &[pred.len()], &[target.len()]));
    }
    let positives = target.iter().filter(|&&y| y == 1.0).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (k, (&raw, &y)) in pred.iter().zip(target).enumerate() {
        let p = raw.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        let inside = raw == p;
        let (l, d) = if y == 1.0 {
            let q = 1.0 - p;
            (-q * q * p.ln(), 2.0 * q * p.ln() - q * q / p)
        } else {
            let w = (1.0 - y).powi(4);
            let lq = (1.0 - p).ln();
            (-w * p * p * lq, -w * (2.0 * p * lq - p * p / (1.0 - p)))
        };
        loss += l;
        if inside {
            grad[k] = d / positives;
        }
    }
    Ok((loss / positives, grad))
}

pub fn focal_loss(cls: &Tensor, gt: &BBox) -> Result<f64> {
    let target = gt_heatmap(cls.rows(), (gt.x, gt.y), gaussian_sigma(gt, cls.rows()))?;
    Ok(focal_terms(cls.data(), target.data())?.0)
}

/// Mean absolute difference of the grid-normalized boxes, with its gradient
/// with respect to `pred` (normalized coordinates).
pub fn l1_terms(pred: [f64; 4], gt: [f64; 4]) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d = pred[k] - gt[k];
        loss += d.abs() / 4.0;
        grad[k] = if d > 0.0 {
            0.25
        } else if d < 0.0 {
            -0.25
        } else {
            0.0
        };
    }
    (loss, grad)
}

pub fn l1_loss(pred: &BBox, gt: &BBox, grid: usize) -> f64 {
    l1_terms(pred.normalized(grid), gt.normalized(grid)).0
}

/// `1 − GIoU` for boxes given as `[cx, cy, w, h]`, with the gradient with
/// respect to the first box.
pub fn giou_terms(pred: [f64; 4], gt: [f64; 4]) -> Result<(f64, [f64; 4])> {
    for b in [pred, gt] {
        if !(b[2] > 0.0 && b[3] > 0.0) {
            return Err(Error::DegenerateBox(b));
        }
    }
    let corners = |b: [f64; 4]| [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0];
    let [px1, py1, px2, py2] = corners(pred);
    let [gx1, gy1, gx2, gy2] = corners(gt);

    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let (iw, ih, overlap) = if iw > 0.0 && ih > 0.0 { (iw, ih, true) } else { (0.0, 0.0, false) };
    let inter = iw * ih;
    let area_p = pred[2] * pred[3];
    let union = area_p + gt[2] * gt[3] - inter;
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let hull = cw * ch;
    let loss = 2.0 - inter / union - union / hull;

    let d_inter = -(union + inter) / (union * union) + 1.0 / hull;
    let d_area = inter / (union * union) - 1.0 / hull;
    let d_hull = union / (hull * hull);

    // gradients with respect to (x1, y1, x2, y2)
    let mut g = [0.0; 4];
    if overlap {
        g[0] += d_inter * ih * if px1 > gx1 { -1.0 } else { 0.0 };
        g[2] += d_inter * ih * if px2 < gx2 { 1.0 } else { 0.0 };
        g[1] += d_inter * iw * if py1 > gy1 { -1.0 } else { 0.0 };
        g[3] += d_inter * iw * if py2 < gy2 { 1.0 } else { 0.0 };
    }
    let (w, h) = (pred[2], pred[3]);
    g[0] += -d_area * h;
    g[2] += d_area * h;
    g[1] += -d_area * w;
    g[3] += d_area * w;
    g[0] += d_hull * ch * if px1 < gx1 { -1.0 } else { 0.0 };
    g[2] += d_hull * ch * if px2 > gx2 { 1.0 } else { 0.0 };
    g[1] += d_hull * cw * if py1 < gy1 { -1.0 } else { 0.0 };
    g[3] += d_hull * cw * if py2 > gy2 { 1.0 } else { 0.0 };

    let grad = [g[0] + g[2], g[1] + g[3], (g[2] - g[0]) / 2.0, (g[3] - g[1]) / 2.0];
    Ok((loss, grad))
}

/// `1 − GIoU` of two boxes in grid-normalized units.
pub fn giou_loss(pred: &BBox, gt: &BBox, grid: usize) -> Result<f64> {
    Ok(giou_terms(pred.normalized(grid), gt.normalized(grid))?.0)
}

/// `1 − GIoU` of two top-left `[x, y, w, h]` rectangles.
pub fn giou_loss_rect(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    let center = |r: [f64; 4]| [r[0] + r[2] / 2.0, r[1] + r[3] / 2.0, r[2], r[3]];
    Ok(giou_terms(center(a), center(b))?.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
}

pub fn total_loss(c: LossComponents, w: LossWeights) -> f64 {
    c.cls + w.lambda_iou * c.iou + w.lambda_l1 * c.l1
}

pub struct LossVars {
    pub total: Var,
    pub components: LossComponents,
}

/// Focal, GIoU and L1 terms on the tape. Box losses use the cell at the
/// classification argmax; `gt` is in grid units.
pub fn loss_var(tape: &mut Tape, out: Var, grid: usize, gt: &BBox, weights: LossWeights) -> Result<LossVars> {
    let value = tape.value(out).clone();
    let maps = PredictionMaps::from_output(&value, grid)?;

    let target = gt_heatmap(grid, (gt.x, gt.y), gaussian_sigma(gt, grid))?;
    let cls_col = tape.slice_cols(out, 0, 1)?;
    let mut target_tokens = vec![0.0; grid * grid];
    for i in 0..grid {
        for j in 0..grid {
            target_tokens[PredictionMaps::token(grid, i, j)] = target.at(i, j);
        }
    }
    let (cls, cls_grad) = focal_terms(tape.value(cls_col).data(), &target_tokens)?;
    let l_cls = tape.scalar_fn(cls_col, cls, cls_grad)?;

    let (i, j) = argmax_cell(&maps.cls);
    let row = tape.gather_rows(out, &[PredictionMaps::token(grid, i, j)])?;
    let pred = decode_bbox(&maps);
    let (pn, gn) = (pred.normalized(grid), gt.normalized(grid));
    let g = grid as f64;
    // d(normalized box)/d(row) is 1/g for offsets and 1 for sizes
    let to_row = |d: [f64; 4]| vec![0.0, d[0] / g, d[1] / g, d[2], d[3]];
    let (iou, iou_grad) = giou_terms(pn, gn)?;
    let l_iou = tape.scalar_fn(row, iou, to_row(iou_grad))?;
    let (l1, l1_grad) = l1_terms(pn, gn);
    let l_l1 = tape.scalar_fn(row, l1, to_row(l1_grad))?;

    let a = tape.scale(l_iou, weights.lambda_iou);
    let b = tape.scale(l_l1, weights.lambda_l1);
    let t = tape.add(l_cls, a)?;
    let total = tape.add(t, b)?;
    Ok(LossVars {
        total,
        components: LossComponents { cls, iou, l1 },
    })
}

#[cfg(test)]
mod tests;
