//! Synthetic head-and-neck CT phantom with a ground-truth tumor mask.
//!
//! Geometry lives in voxel units; anisotropy enters only through the spacing
//! metadata. The head ellipsoid sits at the low-z end of the volume and the
//! wider shoulder slab at the high-z end, so the head-end crop is a strict
//! sub-box of the body bounding box and the tumor centroid falls inside it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::preprocess::{idx3, LabelMask, Volume};

/// Raw air value. Sits 10 noise sigmas below the -200 HU truncation floor so
/// noisy air can never cross the -150 HU body threshold and distort region
/// boxes; after truncation air reads exactly -200.
pub const AIR_RAW_HU: f32 = -250.0;
pub const SOFT_TISSUE_HU: f32 = 40.0;
pub const SKULL_HU: f32 = 700.0;
/// Normalized head radius where bone starts; soft tissue fills the inside.
pub const SKULL_INNER_FRACTION: f64 = 0.88;
/// The tumor must fit within this fraction of the head radii, keeping it
/// clear of the skull shell.
pub const GTV_MARGIN_FRACTION: f64 = 0.85;
/// Contrast step for the high-contrast variant.
pub const SEPARABLE_DELTA_HU: f32 = 200.0;

const GTV_RADIUS_INPLANE: (f64, f64) = (4.0, 10.0);
const GTV_RADIUS_Z: (f64, f64) = (2.5, 4.5);
const GTV_OFFSET_INPLANE: (f64, f64) = (-10.0, 10.0);
const GTV_OFFSET_Z: (f64, f64) = (-4.0, 4.0);

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// HU added to soft tissue inside the tumor; 25 gives the low-contrast
    /// regime, [`SEPARABLE_DELTA_HU`] the easy one.
    pub gtv_delta_hu: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 128, 128],
            spacing: [3.0, 1.0, 1.0],
            gtv_delta_hu: 25.0,
            noise_sigma: 10.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::invalid(
                "PhantomSpec",
                format!("dims {:?} too small, each must be >= 8", self.dims),
            ));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(
                "PhantomSpec",
                format!("spacing {:?} must be positive and finite", self.spacing),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid(
                "PhantomSpec",
                format!("noise sigma {} must be finite and >= 0", self.noise_sigma),
            ));
        }
        if !self.gtv_delta_hu.is_finite() {
            return Err(Error::invalid("PhantomSpec", "gtv_delta_hu must be finite"));
        }
        Ok(())
    }
}

/// Continuous geometry behind a phantom, in voxel coordinates (z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGeometry {
    pub head_center: [f64; 3],
    pub head_radii: [f64; 3],
    pub gtv_center: [f64; 3],
    pub gtv_radii: [f64; 3],
}

fn head_placement(dims: &[usize; 3]) -> ([f64; 3], [f64; 3]) {
    let d = dims[0] as f64;
    let h = dims[1] as f64;
    let w = dims[2] as f64;
    let center = [d * 5.0 / 16.0, h / 2.0, w / 2.0];
    let radii = [d / 4.0, h * 5.0 / 16.0, w * 5.0 / 16.0];
    (center, radii)
}

/// Shoulder slab bounds as half-open voxel ranges (z, y, x). Wider than the
/// head in x, so the global body box strictly exceeds the head-end box.
fn slab_ranges(dims: &[usize; 3]) -> [(usize, usize); 3] {
    let (d, h, w) = (dims[0], dims[1], dims[2]);
    [
        (d * 10 / 16, d * 14 / 16),
        (h * 3 / 16, h * 13 / 16),
        (w / 16, w * 15 / 16),
    ]
}

fn draw_geometry(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<PhantomGeometry> {
    let (head_center, head_radii) = head_placement(&spec.dims);
    let ry = rng.random_range(GTV_RADIUS_INPLANE.0..GTV_RADIUS_INPLANE.1);
    let rx = rng.random_range(GTV_RADIUS_INPLANE.0..GTV_RADIUS_INPLANE.1);
    let rz = rng.random_range(GTV_RADIUS_Z.0..GTV_RADIUS_Z.1);
    let offy = rng.random_range(GTV_OFFSET_INPLANE.0..GTV_OFFSET_INPLANE.1);
    let offx = rng.random_range(GTV_OFFSET_INPLANE.0..GTV_OFFSET_INPLANE.1);
    let offz = rng.random_range(GTV_OFFSET_Z.0..GTV_OFFSET_Z.1);
    let off = [offz, offy, offx];
    let radii = [rz, ry, rx];

    // Triangle inequality in the head-normalized metric: every tumor point
    // stays within GTV_MARGIN_FRACTION of the head radii, hence inside the
    // soft tissue and strictly inside the head.
    let center_norm: f64 = off
        .iter()
        .zip(&head_radii)
        .map(|(o, r)| (o / r) * (o / r))
        .sum::<f64>()
        .sqrt();
    let max_ratio = radii
        .iter()
        .zip(&head_radii)
        .map(|(g, r)| g / r)
        .fold(0.0f64, f64::max);
    if center_norm + max_ratio > GTV_MARGIN_FRACTION {
        return Err(Error::invalid(
            "generate_phantom",
            format!(
                "tumor radii {:?} at offset {:?} exceed {} of head radii {:?}",
                radii, off, GTV_MARGIN_FRACTION, head_radii
            ),
        ));
    }

    Ok(PhantomGeometry {
        gtv_center: [
            head_center[0] + offz,
            head_center[1] + offy,
            head_center[2] + offx,
        ],
        gtv_radii: radii,
        head_center,
        head_radii,
    })
}

/// The geometry a given spec will generate, without building the volume.
pub fn phantom_geometry(spec: &PhantomSpec) -> Result<PhantomGeometry> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    draw_geometry(spec, &mut rng)
}

fn ellipsoid_norm2(p: [f64; 3], center: &[f64; 3], radii: &[f64; 3]) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let t = (p[a] - center[a]) / radii[a];
        s += t * t;
    }
    s
}

/// Builds the raw HU volume and the exact tumor mask. Deterministic in the
/// spec: geometry draws come first, then one noise draw per voxel in z-major
/// order.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geo = draw_geometry(spec, &mut rng)?;
    let dims = spec.dims;
    let numel = dims[0] * dims[1] * dims[2];
    let mut hu = vec![AIR_RAW_HU; numel];
    let mut mask = vec![0u8; numel];

    let slab = slab_ranges(&dims);
    let inner2 = SKULL_INNER_FRACTION * SKULL_INNER_FRACTION;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = idx3(&dims, z, y, x);
                let p = [z as f64, y as f64, x as f64];
                let head = ellipsoid_norm2(p, &geo.head_center, &geo.head_radii);
                if head <= 1.0 {
                    hu[i] = if head >= inner2 { SKULL_HU } else { SOFT_TISSUE_HU };
                }
                if z >= slab[0].0
                    && z < slab[0].1
                    && y >= slab[1].0
                    && y < slab[1].1
                    && x >= slab[2].0
                    && x < slab[2].1
                {
                    hu[i] = SOFT_TISSUE_HU;
                }
                if ellipsoid_norm2(p, &geo.gtv_center, &geo.gtv_radii) <= 1.0 {
                    hu[i] = SOFT_TISSUE_HU + spec.gtv_delta_hu;
                    mask[i] = 1;
                }
            }
        }
    }

    for v in hu.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += (spec.noise_sigma as f64 * n) as f32;
    }

    Ok((
        Volume::new(dims, spec.spacing, hu)?,
        LabelMask::new(dims, spec.spacing, mask)?,
    ))
}
