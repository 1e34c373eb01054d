//! Whole-volume inference and multi-model fusion: sliding-window
//! prediction, probability averaging, argmax with largest-component
//! postprocessing, and the entropy / volume-variation uncertainty measures
//! with their error-rate analyses.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::nn::{unet_forward, NetworkConfig, NetworkParams};
use crate::preprocess::{idx3, LabelMask, RegionBox, Volume};
use crate::tape::{GradTape, Mode};
use crate::tensor::Tensor;

/// Two-channel class probabilities on a volume grid. Channel data is stored
/// foreground-only; background is its complement by construction (channels
/// are renormalized to sum to one).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Foreground probability per voxel, z-major.
    pub fg: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], fg: Vec<f32>) -> Result<Self> {
        if fg.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::shape(
                "probability_map",
                format!("{} values for dims {:?}", fg.len(), dims),
            ));
        }
        if fg.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("probability_map", "probabilities must lie in [0, 1]"));
        }
        Ok(ProbabilityMap { dims, spacing, fg })
    }
}

/// Per-voxel disagreement entropy in nats, on the same grid as the masks.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

fn window_positions(dim: usize, w: usize) -> Vec<usize> {
    let stride = (w / 2).max(1);
    let mut v = Vec::new();
    let mut p = 0;
    while p + w <= dim {
        v.push(p);
        p += stride;
    }
    let last = dim - w;
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

/// Runs the network over overlapping patch-sized windows and averages the
/// overlaps uniformly, renormalizing channel sums. Volumes smaller than the
/// window are padded with their minimum value and cropped back.
pub fn sliding_window_predict(
    params: &NetworkParams,
    config: &NetworkConfig,
    v: &Volume,
) -> Result<ProbabilityMap> {
    config.validate()?;
    let [wd, wh, ww] = config.patch_shape;
    let dims = v.dims;
    let padded = [dims[0].max(wd), dims[1].max(wh), dims[2].max(ww)];
    let pad_value = v.data.iter().copied().fold(f32::INFINITY, f32::min);
    let mut vol = vec![pad_value; padded[0] * padded[1] * padded[2]];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let src = idx3(&dims, z, y, 0);
            let dst = idx3(&padded, z, y, 0);
            vol[dst..dst + dims[2]].copy_from_slice(&v.data[src..src + dims[2]]);
        }
    }

    let n = padded[0] * padded[1] * padded[2];
    let mut fg_sum = vec![0.0f64; n];
    let mut bg_sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    let window_voxels = wd * wh * ww;

    for &z0 in &window_positions(padded[0], wd) {
        for &y0 in &window_positions(padded[1], wh) {
            for &x0 in &window_positions(padded[2], ww) {
                let mut patch = vec![0.0f32; window_voxels];
                for dz in 0..wd {
                    for dy in 0..wh {
                        let src = idx3(&padded, z0 + dz, y0 + dy, x0);
                        let dst = (dz * wh + dy) * ww;
                        patch[dst..dst + ww].copy_from_slice(&vol[src..src + ww]);
                    }
                }
                let mut tape: GradTape<f32> = GradTape::new();
                let x = tape.leaf(Tensor::from_vec(&[1, 1, wd, wh, ww], patch)?);
                let out = unet_forward(&mut tape, x, params, config, Mode::Eval)?;
                let probs = tape.value(out.probs).data();
                for dz in 0..wd {
                    for dy in 0..wh {
                        for dx in 0..ww {
                            let o = idx3(&padded, z0 + dz, y0 + dy, x0 + dx);
                            let p = (dz * wh + dy) * ww + dx;
                            bg_sum[o] += probs[p] as f64;
                            fg_sum[o] += probs[window_voxels + p] as f64;
                            count[o] += 1;
                        }
                    }
                }
            }
        }
    }

    let mut fg = vec![0.0f32; dims[0] * dims[1] * dims[2]];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let o = idx3(&padded, z, y, x);
                if count[o] == 0 {
                    return Err(Error::invalid("sliding_window", "window tiling left a voxel uncovered"));
                }
                let f = fg_sum[o] / count[o] as f64;
                let b = bg_sum[o] / count[o] as f64;
                let s = f + b;
                fg[idx3(&dims, z, y, x)] = if s > 0.0 { (f / s) as f32 } else { 0.0 };
            }
        }
    }
    ProbabilityMap::new(dims, v.spacing, fg)
}

/// Voxel-wise arithmetic mean of probability maps.
pub fn ensemble_average(maps: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("ensemble_average", "need at least one map"))?;
    for m in maps {
        if m.dims != first.dims {
            return Err(Error::shape(
                "ensemble_average",
                format!("map dims {:?} vs {:?}", m.dims, first.dims),
            ));
        }
    }
    let mut fg = vec![0.0f64; first.fg.len()];
    for m in maps {
        for (acc, &p) in fg.iter_mut().zip(&m.fg) {
            *acc += p as f64;
        }
    }
    let inv = 1.0 / maps.len() as f64;
    let fg = fg.into_iter().map(|s| (s * inv) as f32).collect();
    ProbabilityMap::new(first.dims, first.spacing, fg)
}

/// Argmax over the two channels; exact ties go to background.
pub fn binarize(map: &ProbabilityMap) -> LabelMask {
    let data = map.fg.iter().map(|&f| if f > 0.5 { 1u8 } else { 0 }).collect();
    LabelMask { dims: map.dims, spacing: map.spacing, data }
}

/// Keeps only the largest 6-connected foreground component; among equally
/// sized components the one whose first voxel comes earliest in (z, y, x)
/// scan order wins. Empty masks pass through unchanged.
pub fn largest_connected_component(m: &LabelMask) -> LabelMask {
    let [d, h, w] = m.dims;
    let n = d * h * w;
    let mut comp = vec![u32::MAX; n];
    let mut best_id = u32::MAX;
    let mut best_size = 0usize;
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if m.data[start] != 1 || comp[start] != u32::MAX {
            continue;
        }
        let id = next;
        next += 1;
        let mut size = 0usize;
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let z = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            let mut visit = |j: usize| {
                if m.data[j] == 1 && comp[j] == u32::MAX {
                    comp[j] = id;
                    queue.push_back(j);
                }
            };
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        // Strict comparison: the earliest seed keeps ties.
        if size > best_size {
            best_size = size;
            best_id = id;
        }
    }
    if best_size == 0 {
        return LabelMask { dims: m.dims, spacing: m.spacing, data: vec![0; n] };
    }
    let data = comp.iter().map(|&c| if c == best_id { 1u8 } else { 0 }).collect();
    LabelMask { dims: m.dims, spacing: m.spacing, data }
}

fn check_mask_stack(op: &'static str, masks: &[LabelMask], min: usize) -> Result<[usize; 3]> {
    if masks.len() < min {
        return Err(Error::invalid(op, format!("need at least {} masks, got {}", min, masks.len())));
    }
    let dims = masks[0].dims;
    for m in masks {
        if m.dims != dims {
            return Err(Error::shape(op, format!("mask dims {:?} vs {:?}", m.dims, dims)));
        }
    }
    Ok(dims)
}

/// Entropy in nats of a k / (n-k) agreement split among n binary votes.
pub fn split_entropy(k: usize, n: usize) -> f64 {
    let mut h = 0.0;
    for c in [k, n - k] {
        if c > 0 {
            let p = c as f64 / n as f64;
            h -= p * p.ln();
        }
    }
    h
}

/// Per-voxel entropy of the label frequencies across N masks. With binary
/// labels the value depends only on the agreement split, so N = 6 yields
/// exactly the four levels {0, 0.4506, 0.6365, 0.6931}.
pub fn pixelwise_entropy(masks: &[LabelMask]) -> Result<UncertaintyMap> {
    let dims = check_mask_stack("pixelwise_entropy", masks, 2)?;
    let n = masks.len();
    let table: Vec<f32> = (0..=n).map(|k| split_entropy(k, n) as f32).collect();
    let len = dims[0] * dims[1] * dims[2];
    let mut counts = vec![0u16; len];
    for m in masks {
        for (c, &v) in counts.iter_mut().zip(&m.data) {
            *c += v as u16;
        }
    }
    let data = counts.iter().map(|&k| table[k as usize]).collect();
    Ok(UncertaintyMap { dims, spacing: masks[0].spacing, data })
}

/// Volume variation coefficient: population standard deviation of the
/// per-model foreground volumes divided by their mean.
pub fn vvc(masks: &[LabelMask]) -> Result<f64> {
    check_mask_stack("vvc", masks, 2)?;
    let vols: Vec<f64> = masks.iter().map(|m| m.foreground_count() as f64).collect();
    let mean = vols.iter().sum::<f64>() / vols.len() as f64;
    if mean == 0.0 {
        return Err(Error::degenerate("vvc", "every mask is empty, volume mean is zero"));
    }
    let var = vols.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vols.len() as f64;
    Ok(var.sqrt() / mean)
}

/// Error rate of the fused mask at one agreement level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelErrorRate {
    /// 1 = full agreement ... 4 = maximal split (for N = 6).
    pub level: usize,
    /// Entropy value of this agreement split in nats.
    pub entropy: f64,
    pub voxels: usize,
    pub errors: usize,
    pub rate: f64,
}

/// Groups ROI voxels by model-agreement level and reports the fused mask's
/// error rate against ground truth per level. Levels with no voxels in the
/// ROI are omitted.
pub fn error_rate_by_level(
    per_model: &[LabelMask],
    fused: &LabelMask,
    gt: &LabelMask,
    roi: &RegionBox,
) -> Result<Vec<LevelErrorRate>> {
    let dims = check_mask_stack("error_rate_by_level", per_model, 2)?;
    if fused.dims != dims || gt.dims != dims {
        return Err(Error::shape("error_rate_by_level", "fused/gt dims differ from model masks"));
    }
    if roi.z1 >= dims[0] || roi.y1 >= dims[1] || roi.x1 >= dims[2] {
        return Err(Error::invalid("error_rate_by_level", "roi exceeds volume bounds"));
    }
    let n = per_model.len();
    let levels = n / 2 + 1;
    let mut voxels = vec![0usize; levels + 1];
    let mut errors = vec![0usize; levels + 1];
    for z in roi.z0..=roi.z1 {
        for y in roi.y0..=roi.y1 {
            for x in roi.x0..=roi.x1 {
                let i = idx3(&dims, z, y, x);
                let k: usize = per_model.iter().map(|m| m.data[i] as usize).sum();
                let level = k.min(n - k) + 1;
                voxels[level] += 1;
                if fused.data[i] != gt.data[i] {
                    errors[level] += 1;
                }
            }
        }
    }
    let mut out = Vec::new();
    for level in 1..=levels {
        if voxels[level] == 0 {
            continue;
        }
        out.push(LevelErrorRate {
            level,
            entropy: split_entropy(level - 1, n),
            voxels: voxels[level],
            errors: errors[level],
            rate: errors[level] as f64 / voxels[level] as f64,
        });
    }
    Ok(out)
}

/// One case in the structure-level uncertainty scatter.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub vvc: f64,
    pub one_minus_dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VvcDiceScatter {
    pub points: Vec<ScatterPoint>,
    /// Spearman rank correlation between VVC and 1 - Dice; `None` when
    /// either series is constant.
    pub spearman: Option<f64>,
}

fn ranks_with_ties(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let rx = ranks_with_ties(xs);
    let ry = ranks_with_ties(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Pairs each case's VVC with its segmentation error 1 - Dice and attaches
/// the rank correlation of the two series.
pub fn vvc_dice_scatter(cases: &[(f64, f64)]) -> Result<VvcDiceScatter> {
    if cases.len() < 2 {
        return Err(Error::invalid("vvc_dice_scatter", "need at least two cases"));
    }
    let points: Vec<ScatterPoint> = cases
        .iter()
        .map(|&(vvc, dice)| ScatterPoint { vvc, one_minus_dice: 1.0 - dice })
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.vvc).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.one_minus_dice).collect();
    Ok(VvcDiceScatter { spearman: spearman(&xs, &ys), points })
}
