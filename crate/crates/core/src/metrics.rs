//! Segmentation quality measures: Dice overlap, average symmetric surface
//! distance in millimetres, and relative volume error.

use crate::error::{Error, Result};
use crate::preprocess::LabelMask;

/// Per-case evaluation record. `dice` is recomputable from the stored
/// counts as 2tp/(2tp+fp+fn). `assd_mm` is `None` when either mask is
/// empty, which is distinct from a zero distance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub dice: f64,
    pub assd_mm: Option<f64>,
    pub rve_percent: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

fn check_same_dims(op: &'static str, a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape(op, format!("mask dims {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

pub fn overlap_counts(pred: &LabelMask, gt: &LabelMask) -> Result<(usize, usize, usize)> {
    check_same_dims("overlap_counts", pred, gt)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => {}
        }
    }
    Ok((tp, fp, fneg))
}

/// Dice overlap 2tp/(2tp+fp+fn); two empty masks count as perfect.
pub fn dice_score(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    let (tp, fp, fneg) = overlap_counts(pred, gt)?;
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// Physical coordinates (mm) of foreground voxels with at least one
/// background 6-neighbor; the volume border counts as background.
pub fn surface_points(m: &LabelMask, spacing: [f64; 3]) -> Result<Vec<[f64; 3]>> {
    let [d, h, w] = m.dims;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if m.at(z, y, x) != 1 {
                    continue;
                }
                let exposed = z == 0
                    || z == d - 1
                    || y == 0
                    || y == h - 1
                    || x == 0
                    || x == w - 1
                    || m.at(z - 1, y, x) == 0
                    || m.at(z + 1, y, x) == 0
                    || m.at(z, y - 1, x) == 0
                    || m.at(z, y + 1, x) == 0
                    || m.at(z, y, x - 1) == 0
                    || m.at(z, y, x + 1) == 0;
                if exposed {
                    out.push([z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::degenerate("surface_points", "mask has no foreground voxels"));
    }
    Ok(out)
}

/// Sum over `from` of the distance to the nearest point in `to`. Points in
/// `to` are sorted by z so the scan can stop once the z gap alone exceeds
/// the best distance found.
fn sum_min_dists(from: &[[f64; 3]], to_sorted_z: &[[f64; 3]]) -> f64 {
    let mut total = 0.0;
    for p in from {
        let start = to_sorted_z.partition_point(|q| q[0] < p[0]);
        let mut best = f64::INFINITY;
        let (mut lo, mut hi) = (start, start);
        loop {
            let lo_gap = if lo > 0 { (p[0] - to_sorted_z[lo - 1][0]).powi(2) } else { f64::INFINITY };
            let hi_gap = if hi < to_sorted_z.len() { (to_sorted_z[hi][0] - p[0]).powi(2) } else { f64::INFINITY };
            let gap = lo_gap.min(hi_gap);
            if gap >= best {
                break;
            }
            let q = if lo_gap <= hi_gap {
                lo -= 1;
                to_sorted_z[lo]
            } else {
                let q = to_sorted_z[hi];
                hi += 1;
                q
            };
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            best = best.min(d2);
        }
        total += best.sqrt();
    }
    total
}

/// Average symmetric surface distance in mm. `Ok(None)` when either mask
/// has no surface (an undefined distance, not zero).
pub fn assd(pred: &LabelMask, gt: &LabelMask, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_same_dims("assd", pred, gt)?;
    let s = match surface_points(pred, spacing) {
        Ok(s) => s,
        Err(Error::DegenerateInput { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let g = match surface_points(gt, spacing) {
        Ok(g) => g,
        Err(Error::DegenerateInput { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut s_sorted = s.clone();
    let mut g_sorted = g.clone();
    s_sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
    g_sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let total = sum_min_dists(&s, &g_sorted) + sum_min_dists(&g, &s_sorted);
    Ok(Some(total / (s.len() + g.len()) as f64))
}

/// Relative volume error |Vp - Vg| / Vg as a percentage.
pub fn rve(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_same_dims("rve", pred, gt)?;
    let vg = gt.foreground_count();
    if vg == 0 {
        return Err(Error::degenerate("rve", "ground truth mask is empty"));
    }
    let vp = pred.foreground_count();
    Ok((vp as f64 - vg as f64).abs() / vg as f64 * 100.0)
}

/// Full per-case record. Requires a nonempty ground truth; an empty
/// prediction still evaluates (dice 0, undefined assd, rve 100).
pub fn evaluate_case(pred: &LabelMask, gt: &LabelMask) -> Result<MetricsReport> {
    check_same_dims("evaluate_case", pred, gt)?;
    if gt.spacing != pred.spacing {
        return Err(Error::shape(
            "evaluate_case",
            format!("mask spacings {:?} vs {:?}", pred.spacing, gt.spacing),
        ));
    }
    let rve_percent = rve(pred, gt)?;
    let (tp, fp, fneg) = overlap_counts(pred, gt)?;
    let denom = 2 * tp + fp + fneg;
    let dice = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
    let assd_mm = assd(pred, gt, gt.spacing)?;
    Ok(MetricsReport { dice, assd_mm, rve_percent, true_pos: tp, false_pos: fp, false_neg: fneg })
}
