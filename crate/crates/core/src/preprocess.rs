//! CT preprocessing and patch sampling: intensity truncation, per-image
//! normalization, spacing resample, body-region boxes at three scales, and
//! the foreground-biased patch extractor with joint left-right flips.

use rand::Rng;

use crate::error::{Error, Result};

/// Scalar volume on a regular grid, z-major layout, spacing in mm per voxel
/// as (sz, sy, sx). Values are HU before normalization, unitless after.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

/// Binary companion of [`Volume`], same grid and layout, voxels in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<u8>,
}

pub fn idx3(dims: &[usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

fn check_dims_spacing(op: &'static str, dims: &[usize; 3], spacing: &[f64; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(op, format!("dims {:?} must all be positive", dims)));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(op, format!("spacing {:?} must be positive and finite", spacing)));
    }
    let expect = dims[0] * dims[1] * dims[2];
    if len != expect {
        return Err(Error::shape(op, format!("{} voxels for dims {:?} ({} expected)", len, dims, expect)));
    }
    Ok(())
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_dims_spacing("volume", &dims, &spacing, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("volume", "voxel data contains non-finite values"));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[idx3(&self.dims, z, y, x)]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

impl LabelMask {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        check_dims_spacing("label_mask", &dims, &spacing, data.len())?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("label_mask", "mask voxels must be 0 or 1"));
        }
        Ok(LabelMask { dims, spacing, data })
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[idx3(&self.dims, z, y, x)]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Sampling scale of a region box, from tightest to whole-volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Local,
    Middle,
    Global,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Local => "local",
            Scale::Middle => "middle",
            Scale::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Scale::Local),
            "middle" => Ok(Scale::Middle),
            "global" => Ok(Scale::Global),
            other => Err(Error::invalid(
                "scale",
                format!("unknown scale {:?}, expected one of local, middle, global", other),
            )),
        }
    }
}

/// Inclusive voxel bounds of a sampling region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionBox {
    pub z0: usize,
    pub z1: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub scale: Scale,
}

impl RegionBox {
    pub fn extents(&self) -> [usize; 3] {
        [self.z1 - self.z0 + 1, self.y1 - self.y0 + 1, self.x1 - self.x0 + 1]
    }

    pub fn contains(&self, other: &RegionBox) -> bool {
        self.z0 <= other.z0
            && other.z1 <= self.z1
            && self.y0 <= other.y0
            && other.y1 <= self.y1
            && self.x0 <= other.x0
            && other.x1 <= self.x1
    }
}

/// How a patch was drawn, recorded so callers can see fallback behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    ForegroundCentered,
    Uniform,
    UniformFallback,
}

/// One training patch with its aligned label crop.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub shape: [usize; 3],
    pub image: Vec<f32>,
    pub label: Vec<u8>,
    pub kind: SampleKind,
    pub scale: Scale,
    pub flipped: bool,
}

/// Clamps every voxel to the CT window [-200, 700] HU.
pub fn truncate_hu(v: &Volume) -> Volume {
    let data = v.data.iter().map(|&x| x.clamp(-200.0, 700.0)).collect();
    Volume { dims: v.dims, spacing: v.spacing, data }
}

/// Centers and scales voxels by the per-image mean and population standard
/// deviation. Constant volumes have no scale and are rejected.
pub fn normalize(v: &Volume) -> Result<Volume> {
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return Err(Error::degenerate("normalize", "constant volume has zero standard deviation"));
    }
    let data = v.data.iter().map(|&x| ((x as f64 - mean) / std) as f32).collect();
    Ok(Volume { dims: v.dims, spacing: v.spacing, data })
}

fn resampled_dims(op: &'static str, dims: &[usize; 3], spacing: &[f64; 3], target: &[f64; 3]) -> Result<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let exact = dims[a] as f64 * spacing[a] / target[a];
        let rounded = exact.round_ties_even();
        if rounded < 1.0 {
            return Err(Error::degenerate(
                op,
                format!("axis {} resamples to zero voxels ({} -> {:.3})", a, dims[a], exact),
            ));
        }
        out[a] = rounded as usize;
    }
    Ok(out)
}

/// Maps output index to a source coordinate in voxel units.
fn source_coord(i: usize, target_sp: f64, src_sp: f64) -> f64 {
    i as f64 * target_sp / src_sp
}

/// Trilinear resample of a scalar volume onto `target` spacing. New dims are
/// the rounded physical extent; identical spacing reproduces the input.
pub fn resample_volume(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("resample", "target spacing must be positive"));
    }
    let new_dims = resampled_dims("resample", &v.dims, &v.spacing, &target)?;
    let [nd, nh, nw] = new_dims;
    let mut data = vec![0.0f32; nd * nh * nw];
    for z in 0..nd {
        let fz = source_coord(z, target[0], v.spacing[0]);
        let (z0, tz) = floor_frac(fz, v.dims[0]);
        for y in 0..nh {
            let fy = source_coord(y, target[1], v.spacing[1]);
            let (y0, ty) = floor_frac(fy, v.dims[1]);
            for x in 0..nw {
                let fx = source_coord(x, target[2], v.spacing[2]);
                let (x0, tx) = floor_frac(fx, v.dims[2]);
                let z1 = (z0 + 1).min(v.dims[0] - 1);
                let y1 = (y0 + 1).min(v.dims[1] - 1);
                let x1 = (x0 + 1).min(v.dims[2] - 1);
                let c = |zz: usize, yy: usize, xx: usize| v.at(zz, yy, xx) as f64;
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let v00 = lerp(c(z0, y0, x0), c(z0, y0, x1), tx);
                let v01 = lerp(c(z0, y1, x0), c(z0, y1, x1), tx);
                let v10 = lerp(c(z1, y0, x0), c(z1, y0, x1), tx);
                let v11 = lerp(c(z1, y1, x0), c(z1, y1, x1), tx);
                let v0 = lerp(v00, v01, ty);
                let v1 = lerp(v10, v11, ty);
                data[idx3(&new_dims, z, y, x)] = lerp(v0, v1, tz) as f32;
            }
        }
    }
    Ok(Volume { dims: new_dims, spacing: target, data })
}

fn floor_frac(f: f64, dim: usize) -> (usize, f64) {
    let clamped = f.clamp(0.0, (dim - 1) as f64);
    let fl = clamped.floor();
    (fl as usize, clamped - fl)
}

/// Nearest-neighbor resample of a mask; values stay binary.
pub fn resample_mask(m: &LabelMask, target: [f64; 3]) -> Result<LabelMask> {
    if target.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("resample", "target spacing must be positive"));
    }
    let new_dims = resampled_dims("resample", &m.dims, &m.spacing, &target)?;
    let [nd, nh, nw] = new_dims;
    let mut data = vec![0u8; nd * nh * nw];
    let nearest = |f: f64, dim: usize| -> usize {
        (f.round_ties_even().max(0.0) as usize).min(dim - 1)
    };
    for z in 0..nd {
        let sz = nearest(source_coord(z, target[0], m.spacing[0]), m.dims[0]);
        for y in 0..nh {
            let sy = nearest(source_coord(y, target[1], m.spacing[1]), m.dims[1]);
            for x in 0..nw {
                let sx = nearest(source_coord(x, target[2], m.spacing[2]), m.dims[2]);
                data[idx3(&new_dims, z, y, x)] = m.at(sz, sy, sx);
            }
        }
    }
    Ok(LabelMask { dims: new_dims, spacing: target, data })
}

/// HU threshold separating body from air when boxing the anatomy.
pub const BODY_HU_THRESHOLD: f32 = -150.0;
/// Fraction of the body z-extent kept by the local (head-only) region.
pub const LOCAL_Z_FRACTION: f64 = 0.4;

/// Sampling region at the requested scale. Works on HU values, so it must
/// run before normalization. The local region keeps the head-end 40% of the
/// body's z-extent (low z indices) and re-tightens x and y inside it.
pub fn compute_region(v: &Volume, scale: Scale) -> Result<RegionBox> {
    let [d, h, w] = v.dims;
    if scale == Scale::Global {
        return Ok(RegionBox { z0: 0, z1: d - 1, y0: 0, y1: h - 1, x0: 0, x1: w - 1, scale });
    }
    let middle = body_bbox(v, 0, d - 1)?;
    if scale == Scale::Middle {
        return Ok(RegionBox { scale, ..middle });
    }
    let slices = middle.z1 - middle.z0 + 1;
    let keep = ((slices as f64 * LOCAL_Z_FRACTION).round_ties_even() as usize).clamp(1, slices);
    let z1 = middle.z0 + keep - 1;
    let local = body_bbox(v, middle.z0, z1)?;
    Ok(RegionBox { scale: Scale::Local, ..local })
}

fn body_bbox(v: &Volume, z_lo: usize, z_hi: usize) -> Result<RegionBox> {
    let [_, h, w] = v.dims;
    let (mut z0, mut z1, mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0, usize::MAX, 0);
    for z in z_lo..=z_hi {
        for y in 0..h {
            for x in 0..w {
                if v.at(z, y, x) > BODY_HU_THRESHOLD {
                    z0 = z0.min(z);
                    z1 = z1.max(z);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                }
            }
        }
    }
    if z0 == usize::MAX {
        return Err(Error::degenerate("compute_region", "no body voxels above the HU threshold"));
    }
    Ok(RegionBox { z0, z1, y0, y1, x0, x1, scale: Scale::Middle })
}

/// Draws one training patch from `rbox`. With probability 0.5 the patch is
/// centered on a uniformly chosen foreground voxel (clipped into the
/// volume), otherwise its corner is uniform in the box; an in-plane
/// left-right flip then applies to image and label jointly with probability
/// 0.5. Reads outside the volume take the volume minimum (label 0). An
/// empty foreground downgrades the biased branch to a uniform draw.
pub fn sample_patch(
    v: &Volume,
    m: &LabelMask,
    rbox: &RegionBox,
    patch_shape: [usize; 3],
    rng: &mut impl Rng,
) -> Result<PatchSample> {
    if v.dims != m.dims {
        return Err(Error::shape(
            "sample_patch",
            format!("volume dims {:?} vs mask dims {:?}", v.dims, m.dims),
        ));
    }
    if patch_shape.iter().any(|&p| p == 0) {
        return Err(Error::invalid("sample_patch", "patch dims must be positive"));
    }
    if rbox.z1 >= v.dims[0] || rbox.y1 >= v.dims[1] || rbox.x1 >= v.dims[2] {
        return Err(Error::invalid("sample_patch", "region box exceeds volume bounds"));
    }

    let want_fg = rng.random_range(0.0..1.0) < 0.5;
    let (corner, kind) = if want_fg {
        let fg: Vec<[usize; 3]> = foreground_voxels(m);
        if fg.is_empty() {
            (uniform_corner(rbox, &patch_shape, rng), SampleKind::UniformFallback)
        } else {
            let center = fg[rng.random_range(0..fg.len())];
            let mut corner = [0usize; 3];
            for a in 0..3 {
                let half = patch_shape[a] / 2;
                let hi = v.dims[a].saturating_sub(patch_shape[a]);
                corner[a] = center[a].saturating_sub(half).min(hi);
            }
            (corner, SampleKind::ForegroundCentered)
        }
    } else {
        (uniform_corner(rbox, &patch_shape, rng), SampleKind::Uniform)
    };

    let pad = v.data.iter().copied().fold(f32::INFINITY, f32::min);
    let [pd, ph, pw] = patch_shape;
    let mut image = vec![0.0f32; pd * ph * pw];
    let mut label = vec![0u8; pd * ph * pw];
    for dz in 0..pd {
        for dy in 0..ph {
            for dx in 0..pw {
                let (z, y, x) = (corner[0] + dz, corner[1] + dy, corner[2] + dx);
                let o = (dz * ph + dy) * pw + dx;
                if z < v.dims[0] && y < v.dims[1] && x < v.dims[2] {
                    image[o] = v.at(z, y, x);
                    label[o] = m.at(z, y, x);
                } else {
                    image[o] = pad;
                }
            }
        }
    }

    let flipped = rng.random_range(0.0..1.0) < 0.5;
    if flipped {
        flip_x(&mut image, &patch_shape);
        flip_x(&mut label, &patch_shape);
    }

    Ok(PatchSample { shape: patch_shape, image, label, kind, scale: rbox.scale, flipped })
}

fn uniform_corner(rbox: &RegionBox, patch: &[usize; 3], rng: &mut impl Rng) -> [usize; 3] {
    let lo = [rbox.z0, rbox.y0, rbox.x0];
    let hi = [rbox.z1, rbox.y1, rbox.x1];
    let mut corner = [0usize; 3];
    for a in 0..3 {
        let top = hi[a].saturating_add(1).saturating_sub(patch[a]).max(lo[a]);
        corner[a] = rng.random_range(lo[a]..=top);
    }
    corner
}

fn foreground_voxels(m: &LabelMask) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..m.dims[0] {
        for y in 0..m.dims[1] {
            for x in 0..m.dims[2] {
                if m.at(z, y, x) == 1 {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Reverses the x axis of a z-major patch in place.
pub fn flip_x<T: Copy>(data: &mut [T], shape: &[usize; 3]) {
    let [d, h, w] = *shape;
    for z in 0..d {
        for y in 0..h {
            let row = (z * h + y) * w;
            data[row..row + w].reverse();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_volume(dims: [usize; 3], fill: f32) -> Volume {
        Volume::new(dims, [3.0, 1.0, 1.0], vec![fill; dims[0] * dims[1] * dims[2]]).unwrap()
    }

    #[test]
    fn truncate_clamps_to_ct_window() {
        let v = Volume::new([1, 1, 3], [3.0, 1.0, 1.0], vec![1000.0, -500.0, 50.0]).unwrap();
        let t = truncate_hu(&v);
        assert_eq!(t.data, vec![700.0, -200.0, 50.0]);
        assert_eq!(truncate_hu(&t).data, t.data);
    }

    #[test]
    fn normalize_two_value_volume_hits_unit_levels() {
        let mut data = vec![-200.0f32; 8];
        data.extend(vec![700.0f32; 8]);
        let v = Volume::new([1, 4, 4], [3.0, 1.0, 1.0], data).unwrap();
        // mean 250, population std 450.
        let n = normalize(&v).unwrap();
        for (i, val) in n.data.iter().enumerate() {
            let expect = if i < 8 { -1.0 } else { 1.0 };
            assert!((val - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_centers_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..512).map(|_| rng.random_range(-300.0..900.0)).collect();
        let v = Volume::new([8, 8, 8], [3.0, 1.0, 1.0], data).unwrap();
        let n = normalize(&truncate_hu(&v)).unwrap();
        let cnt = n.data.len() as f64;
        let mean = n.data.iter().map(|&x| x as f64).sum::<f64>() / cnt;
        let var = n.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / cnt;
        assert!(mean.abs() < 1e-4);
        assert!((var.sqrt() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn normalize_rejects_constant_volume() {
        assert!(normalize(&flat_volume([2, 2, 2], 40.0)).is_err());
    }

    #[test]
    fn resample_at_target_spacing_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f32> = (0..4 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = Volume::new([4, 8, 8], [3.0, 1.0, 1.0], data).unwrap();
        let r = resample_volume(&v, [3.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.dims, v.dims);
        assert_eq!(r.data, v.data);
    }

    #[test]
    fn resample_doubles_slices_when_halving_spacing() {
        let v = flat_volume([10, 4, 4], 1.0);
        let v = Volume { spacing: [6.0, 1.0, 1.0], ..v };
        let r = resample_volume(&v, [3.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.dims, [20, 4, 4]);
        assert!(r.data.iter().all(|&x| (x - 1.0).abs() < 1e-6));
    }

    #[test]
    fn resample_mask_stays_binary_and_round_trips_interior() {
        let mut data = vec![0u8; 8 * 16 * 16];
        let dims = [8usize, 16, 16];
        for z in 2..6 {
            for y in 4..12 {
                for x in 4..12 {
                    data[idx3(&dims, z, y, x)] = 1;
                }
            }
        }
        let m = LabelMask::new(dims, [6.0, 2.0, 2.0], data).unwrap();
        let fine = resample_mask(&m, [3.0, 1.0, 1.0]).unwrap();
        assert_eq!(fine.dims, [16, 32, 32]);
        assert!(fine.data.iter().all(|&v| v <= 1));
        let back = resample_mask(&fine, [6.0, 2.0, 2.0]).unwrap();
        assert_eq!(back.dims, m.dims);
        // Any disagreement sits on the component boundary shell.
        for z in 0..8 {
            for y in 0..16 {
                for x in 0..16 {
                    if back.at(z, y, x) != m.at(z, y, x) {
                        let interior = z > 2 && z < 5 && y > 4 && y < 11 && x > 4 && x < 11;
                        assert!(!interior, "interior voxel ({},{},{}) changed", z, y, x);
                    }
                }
            }
        }
    }

    #[test]
    fn resample_rejects_collapse_to_zero() {
        let v = flat_volume([1, 4, 4], 0.0);
        assert!(resample_volume(&v, [100.0, 1.0, 1.0]).is_err());
    }

    fn blob_volume() -> Volume {
        // Air everywhere except a body blob spanning z in [10, 49].
        let dims = [60usize, 32, 32];
        let mut data = vec![-200.0f32; dims[0] * dims[1] * dims[2]];
        for z in 10..=49 {
            for y in 8..=23 {
                for x in 6..=25 {
                    data[idx3(&dims, z, y, x)] = 40.0;
                }
            }
        }
        Volume::new(dims, [3.0, 1.0, 1.0], data).unwrap()
    }

    #[test]
    fn region_scales_nest_and_match_hand_bounds() {
        let v = blob_volume();
        let g = compute_region(&v, Scale::Global).unwrap();
        let m = compute_region(&v, Scale::Middle).unwrap();
        let l = compute_region(&v, Scale::Local).unwrap();
        assert_eq!((g.z0, g.z1, g.y0, g.y1, g.x0, g.x1), (0, 59, 0, 31, 0, 31));
        assert_eq!((m.z0, m.z1), (10, 49));
        assert_eq!((m.y0, m.y1, m.x0, m.x1), (8, 23, 6, 25));
        // 40 slices, head fraction 0.4 keeps 16 slices from the head end.
        assert_eq!((l.z0, l.z1), (10, 25));
        assert!(g.contains(&m) && m.contains(&l));
    }

    #[test]
    fn region_rejects_all_air() {
        assert!(compute_region(&flat_volume([4, 4, 4], -200.0), Scale::Middle).is_err());
    }

    fn tiny_case() -> (Volume, LabelMask) {
        let dims = [12usize, 24, 24];
        let mut img = vec![-200.0f32; dims[0] * dims[1] * dims[2]];
        let mut msk = vec![0u8; img.len()];
        for z in 1..11 {
            for y in 2..22 {
                for x in 2..22 {
                    img[idx3(&dims, z, y, x)] = 40.0;
                }
            }
        }
        for z in 3..6 {
            for y in 10..14 {
                for x in 14..18 {
                    img[idx3(&dims, z, y, x)] = 65.0;
                    msk[idx3(&dims, z, y, x)] = 1;
                }
            }
        }
        (
            Volume::new(dims, [3.0, 1.0, 1.0], img).unwrap(),
            LabelMask::new(dims, [3.0, 1.0, 1.0], msk).unwrap(),
        )
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (v, m) = tiny_case();
        let rbox = compute_region(&v, Scale::Middle).unwrap();
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_patch(&v, &m, &rbox, [4, 8, 8], &mut rng).unwrap()
        };
        let a = draw(9);
        let b = draw(9);
        assert_eq!(a.image, b.image);
        assert_eq!(a.label, b.label);
        assert_eq!(a.kind, b.kind);
    }

    #[test]
    fn foreground_bias_hits_tumor_often() {
        let (v, m) = tiny_case();
        let rbox = compute_region(&v, Scale::Middle).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut hits = 0;
        let trials = 2000;
        for _ in 0..trials {
            let s = sample_patch(&v, &m, &rbox, [4, 8, 8], &mut rng).unwrap();
            if s.kind == SampleKind::ForegroundCentered {
                assert!(s.label.iter().any(|&l| l == 1));
            }
            if s.label.iter().any(|&l| l == 1) {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.45 * trials as f64, "only {}/{} patches hit tumor", hits, trials);
    }

    #[test]
    fn empty_foreground_falls_back_to_uniform() {
        let (v, m) = tiny_case();
        let empty = LabelMask::new(m.dims, m.spacing, vec![0; m.data.len()]).unwrap();
        let rbox = compute_region(&v, Scale::Middle).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut saw_fallback = false;
        for _ in 0..20 {
            let s = sample_patch(&v, &empty, &rbox, [4, 8, 8], &mut rng).unwrap();
            assert_ne!(s.kind, SampleKind::ForegroundCentered);
            saw_fallback |= s.kind == SampleKind::UniformFallback;
        }
        assert!(saw_fallback);
    }

    #[test]
    fn flip_is_involutive_and_joint() {
        let shape = [2usize, 3, 4];
        let mut data: Vec<i32> = (0..24).collect();
        let orig = data.clone();
        flip_x(&mut data, &shape);
        assert_ne!(data, orig);
        flip_x(&mut data, &shape);
        assert_eq!(data, orig);

        // Image equals the mask, so alignment survives any flipping.
        let (_, m) = tiny_case();
        let img: Vec<f32> = m.data.iter().map(|&v| v as f32 * 100.0 - 50.0).collect();
        let v = Volume::new(m.dims, m.spacing, img).unwrap();
        let rbox = compute_region(&Volume { data: vec![40.0; v.numel()], ..v.clone() }, Scale::Global).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let s = sample_patch(&v, &m, &rbox, [4, 8, 8], &mut rng).unwrap();
            for (iv, lv) in s.image.iter().zip(&s.label) {
                assert_eq!(*iv > 0.0, *lv == 1, "image and label misaligned");
            }
        }
    }

    #[test]
    fn patch_inside_small_volume_pads_with_minimum() {
        let (v, m) = tiny_case();
        let rbox = compute_region(&v, Scale::Global).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample_patch(&v, &m, &rbox, [16, 8, 8], &mut rng).unwrap();
        // Volume has only 12 slices; the deeper patch must contain padding.
        assert!(s.image.iter().any(|&val| val == -200.0));
        assert_eq!(s.image.len(), 16 * 8 * 8);
    }
}
