//! Beer–Lambert optical density, Macenko stain-basis estimation, two-stain
//! deconvolution, concentration scaling and reconstruction.
//!
//! All functions are pure; nothing here holds state between calls.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::util::percentile;

/// Default incident light intensity for 8-bit scans.
pub const DEFAULT_BACKGROUND: f64 = 255.0;

/// Gram determinant below which a basis is treated as rank deficient.
const GRAM_TOLERANCE: f64 = 1e-12;

/// Conventional hematoxylin OD direction (unnormalised).
pub const REFERENCE_H: [f64; 3] = [0.650, 0.704, 0.286];
/// Conventional eosin OD direction (unnormalised).
pub const REFERENCE_E: [f64; 3] = [0.072, 0.990, 0.105];
/// 99th-percentile concentrations used as the default normalisation target.
pub const REFERENCE_MAX_CONCENTRATION: [f64; 2] = [1.9705, 1.0308];

pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

/// Angle between two 3-vectors in degrees.
pub fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    let c = dot3(a, b) / (norm3(a) * norm3(b));
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// An 8-bit RGB image patch stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbPatch {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RgbPatch {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyPatch);
        }
        if pixels.len() != width * height {
            return Err(Error::dims(
                format!("{} pixels ({width}x{height})", width * height),
                pixels.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    /// Builds a patch from a flat interleaved `RGBRGB...` buffer.
    pub fn from_interleaved(width: usize, height: usize, data: &[u8]) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dims(width * height * 3, data.len()));
        }
        let pixels = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Mean absolute channel difference, in units of full scale (so 2/255 is
    /// "two grey levels on average").
    pub fn mean_abs_error(&self, other: &RgbPatch) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::dims(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ));
        }
        let total: u64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |c| a[c].abs_diff(b[c]) as u64))
            .sum();
        Ok(total as f64 / (self.pixels.len() * 3) as f64 / 255.0)
    }

    /// Fraction of pixels whose RGB values differ.
    pub fn fraction_differing(&self, other: &RgbPatch) -> f64 {
        let n = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| a != b)
            .count();
        n as f64 / self.pixels.len() as f64
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for p in &self.pixels {
            for c in 0..3 {
                acc[c] += p[c] as f64;
            }
        }
        acc.map(|v| v / self.pixels.len() as f64 / 255.0)
    }
}

/// A patch in optical-density space.
#[derive(Debug, Clone, PartialEq)]
pub struct OdPatch {
    width: usize,
    height: usize,
    od: Vec<Vec3>,
    background: f64,
}

impl OdPatch {
    pub fn new(width: usize, height: usize, od: Vec<Vec3>, background: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyPatch);
        }
        if od.len() != width * height {
            return Err(Error::dims(width * height, od.len()));
        }
        if !(background > 0.0 && background.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "background intensity must be positive, got {background}"
            )));
        }
        if od.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "optical density values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            od,
            background,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[Vec3] {
        &self.od
    }

    pub fn background(&self) -> f64 {
        self.background
    }
}

/// Unit OD-space directions of hematoxylin and eosin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainBasis {
    h: Vec3,
    e: Vec3,
}

impl StainBasis {
    /// Minimum angle between the two stain directions.
    pub const DEFAULT_MIN_ANGLE_DEG: f64 = 1.0;

    /// Validates unit norm, nonnegativity and non-parallelism.
    pub fn new(h: Vec3, e: Vec3) -> Result<Self> {
        for (name, v) in [("hematoxylin", &h), ("eosin", &e)] {
            if v.iter().any(|c| !c.is_finite() || *c < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} vector must be finite and nonnegative: {v:?}"
                )));
            }
            if (norm3(v) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "{name} vector must have unit norm: {v:?}"
                )));
            }
        }
        let angle = angle_deg(&h, &e);
        if angle < Self::DEFAULT_MIN_ANGLE_DEG {
            return Err(Error::DegenerateStains(format!(
                "stain vectors are {angle:.3} degrees apart"
            )));
        }
        Ok(Self { h, e })
    }

    /// Normalises both vectors before validating.
    pub fn from_unnormalized(h: Vec3, e: Vec3) -> Result<Self> {
        let unit = |v: Vec3| {
            let n = norm3(&v);
            if n > 0.0 {
                v.map(|c| c / n)
            } else {
                v
            }
        };
        Self::new(unit(h), unit(e))
    }

    pub fn reference() -> Self {
        Self::from_unnormalized(REFERENCE_H, REFERENCE_E).expect("reference basis is valid")
    }

    pub fn h(&self) -> Vec3 {
        self.h
    }

    pub fn e(&self) -> Vec3 {
        self.e
    }

    fn mix(&self, ch: f64, ce: f64) -> Vec3 {
        [
            ch * self.h[0] + ce * self.e[0],
            ch * self.h[1] + ce * self.e[1],
            ch * self.h[2] + ce * self.e[2],
        ]
    }
}

/// Per-pixel hematoxylin and eosin concentrations.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMap {
    width: usize,
    height: usize,
    h: Vec<f64>,
    e: Vec<f64>,
}

impl ConcentrationMap {
    pub fn new(width: usize, height: usize, h: Vec<f64>, e: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyPatch);
        }
        if h.len() != width * height || e.len() != width * height {
            return Err(Error::dims(width * height, format!("{}/{}", h.len(), e.len())));
        }
        if h.iter().chain(&e).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "concentrations must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            h,
            e,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn e(&self) -> &[f64] {
        &self.e
    }

    pub fn mean_h(&self) -> f64 {
        self.h.iter().sum::<f64>() / self.h.len() as f64
    }

    pub fn mean_e(&self) -> f64 {
        self.e.iter().sum::<f64>() / self.e.len() as f64
    }
}

/// Parameters of the Macenko estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainEstimationConfig {
    /// Pixels with OD norm at or below this are background.
    pub od_threshold: f64,
    /// Angular percentile (in percent) for the extreme stain directions.
    pub angle_percentile: f64,
    pub background_intensity: f64,
    pub min_angle_deg: f64,
}

impl Default for StainEstimationConfig {
    fn default() -> Self {
        Self {
            od_threshold: 0.15,
            angle_percentile: 1.0,
            background_intensity: DEFAULT_BACKGROUND,
            min_angle_deg: StainBasis::DEFAULT_MIN_ANGLE_DEG,
        }
    }
}

impl StainEstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.od_threshold > 0.0 && self.od_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "od_threshold must lie in (0, 1), got {}",
                self.od_threshold
            )));
        }
        if !(self.angle_percentile > 0.0 && self.angle_percentile < 50.0) {
            return Err(Error::InvalidArgument(format!(
                "angle_percentile must lie in (0, 50), got {}",
                self.angle_percentile
            )));
        }
        if !(self.background_intensity > 0.0 && self.background_intensity.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "background intensity must be positive, got {}",
                self.background_intensity
            )));
        }
        Ok(())
    }
}

/// Beer–Lambert conversion, `od = -log10(max(I, 1) / I0)`, clamped at zero.
pub fn rgb_to_od(patch: &RgbPatch, background: f64) -> Result<OdPatch> {
    if !(background > 0.0 && background.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "background intensity must be positive, got {background}"
        )));
    }
    let od = patch
        .pixels
        .iter()
        .map(|p| p.map(|c| (-((c.max(1) as f64) / background).log10()).max(0.0)))
        .collect();
    Ok(OdPatch {
        width: patch.width,
        height: patch.height,
        od,
        background,
    })
}

#[inline]
fn od_channel_to_u8(od: f64, background: f64) -> u8 {
    let v = (background * 10f64.powf(-od) + 0.5).floor();
    v.clamp(0.0, 255.0) as u8
}

/// Inverse conversion, rounding half-up and clamping to `[0, 255]`.
pub fn od_to_rgb(od: &OdPatch) -> RgbPatch {
    let pixels = od
        .od
        .iter()
        .map(|v| v.map(|c| od_channel_to_u8(c, od.background)))
        .collect();
    RgbPatch {
        width: od.width,
        height: od.height,
        pixels,
    }
}

/// Macenko estimation: SVD plane of tissue OD, robust angular extremes.
pub fn estimate_stain_basis(od: &OdPatch, cfg: &StainEstimationConfig) -> Result<StainBasis> {
    cfg.validate()?;
    let tissue: Vec<&Vec3> = od
        .od
        .iter()
        .filter(|v| norm3(v) > cfg.od_threshold)
        .collect();
    if tissue.len() < 2 {
        return Err(Error::InsufficientTissue {
            tissue_pixels: tissue.len(),
        });
    }

    let m = DMatrix::from_fn(tissue.len(), 3, |r, c| tissue[r][c]);
    let svd = m.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD did not produce right singular vectors".into()))?;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut plane = [[0.0; 3]; 2];
    for (k, &row) in order[..2].iter().enumerate() {
        let mut v = [v_t[(row, 0)], v_t[(row, 1)], v_t[(row, 2)]];
        let projected: f64 = tissue.iter().map(|p| dot3(p, &v)).sum();
        if projected < 0.0 {
            v = v.map(|c| -c);
        }
        plane[k] = v;
    }

    let angles: Vec<f64> = tissue
        .iter()
        .map(|p| dot3(p, &plane[1]).atan2(dot3(p, &plane[0])))
        .collect();
    let lo = percentile(&angles, cfg.angle_percentile);
    let hi = percentile(&angles, 100.0 - cfg.angle_percentile);

    let direction = |phi: f64| -> Result<Vec3> {
        let (s, c) = phi.sin_cos();
        let mut v: Vec3 = std::array::from_fn(|i| c * plane[0][i] + s * plane[1][i]);
        if v.iter().sum::<f64>() < 0.0 {
            v = v.map(|x| -x);
        }
        // Residual negative components are not physical absorbances.
        let v = v.map(|x| x.max(0.0));
        let n = norm3(&v);
        if n <= f64::EPSILON {
            return Err(Error::DegenerateStains(
                "extreme direction has no nonnegative component".into(),
            ));
        }
        Ok(v.map(|x| x / n))
    };
    let a = direction(lo)?;
    let b = direction(hi)?;
    let angle = angle_deg(&a, &b);
    if !(angle >= cfg.min_angle_deg) {
        return Err(Error::DegenerateStains(format!(
            "extreme stain directions are {angle:.4} degrees apart (minimum {})",
            cfg.min_angle_deg
        )));
    }
    let (h, e) = if a[0] >= b[0] { (a, b) } else { (b, a) };
    Ok(StainBasis { h, e })
}

/// Convenience wrapper: RGB to OD, then [`estimate_stain_basis`].
pub fn estimate_stain_basis_rgb(
    patch: &RgbPatch,
    cfg: &StainEstimationConfig,
) -> Result<StainBasis> {
    estimate_stain_basis(&rgb_to_od(patch, cfg.background_intensity)?, cfg)
}

/// Least-squares concentrations through the 2x3 pseudo-inverse of the basis;
/// negative solutions are clamped to zero.
pub fn deconvolve(od: &OdPatch, basis: &StainBasis) -> Result<ConcentrationMap> {
    let (h, e) = (&basis.h, &basis.e);
    let (hh, he, ee) = (dot3(h, h), dot3(h, e), dot3(e, e));
    let det = hh * ee - he * he;
    if det.abs() < GRAM_TOLERANCE {
        return Err(Error::DegenerateStains(format!(
            "stain Gram matrix is singular (det = {det:e})"
        )));
    }
    let n = od.od.len();
    let mut ch = Vec::with_capacity(n);
    let mut ce = Vec::with_capacity(n);
    for v in &od.od {
        let (bh, be) = (dot3(h, v), dot3(e, v));
        ch.push(((ee * bh - he * be) / det).max(0.0));
        ce.push(((hh * be - he * bh) / det).max(0.0));
    }
    Ok(ConcentrationMap {
        width: od.width,
        height: od.height,
        h: ch,
        e: ce,
    })
}

pub fn scale_stains(conc: &ConcentrationMap, alpha_h: f64, alpha_e: f64) -> Result<ConcentrationMap> {
    for (name, a) in [("alpha_h", alpha_h), ("alpha_e", alpha_e)] {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{name} must be positive, got {a}"
            )));
        }
    }
    Ok(ConcentrationMap {
        width: conc.width,
        height: conc.height,
        h: conc.h.iter().map(|v| v * alpha_h).collect(),
        e: conc.e.iter().map(|v| v * alpha_e).collect(),
    })
}

/// Optical density implied by a concentration map, before quantisation.
pub fn concentrations_to_od(
    conc: &ConcentrationMap,
    basis: &StainBasis,
    background: f64,
) -> Result<OdPatch> {
    let od = conc
        .h
        .iter()
        .zip(&conc.e)
        .map(|(&ch, &ce)| basis.mix(ch, ce))
        .collect();
    OdPatch::new(conc.width, conc.height, od, background)
}

pub fn reconstruct(conc: &ConcentrationMap, basis: &StainBasis, background: f64) -> Result<RgbPatch> {
    Ok(od_to_rgb(&concentrations_to_od(conc, basis, background)?))
}

/// Stain-space augmentation: deconvolve, scale H and E, reconstruct.
pub fn augment(
    patch: &RgbPatch,
    basis: &StainBasis,
    alpha_h: f64,
    alpha_e: f64,
    background: f64,
) -> Result<RgbPatch> {
    let od = rgb_to_od(patch, background)?;
    let conc = deconvolve(&od, basis)?;
    let scaled = scale_stains(&conc, alpha_h, alpha_e)?;
    reconstruct(&scaled, basis, background)
}

/// Stain appearance a patch is normalised towards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacenkoTarget {
    pub basis: StainBasis,
    /// 99th-percentile H and E concentrations.
    pub max_concentration: [f64; 2],
}

impl Default for MacenkoTarget {
    fn default() -> Self {
        Self {
            basis: StainBasis::reference(),
            max_concentration: REFERENCE_MAX_CONCENTRATION,
        }
    }
}

const CONCENTRATION_PERCENTILE: f64 = 99.0;

fn max_concentrations(conc: &ConcentrationMap) -> [f64; 2] {
    [
        percentile(&conc.h, CONCENTRATION_PERCENTILE),
        percentile(&conc.e, CONCENTRATION_PERCENTILE),
    ]
}

/// Derives a normalisation target from a reference patch.
pub fn fit_macenko_target(patch: &RgbPatch, cfg: &StainEstimationConfig) -> Result<MacenkoTarget> {
    let od = rgb_to_od(patch, cfg.background_intensity)?;
    let basis = estimate_stain_basis(&od, cfg)?;
    let conc = deconvolve(&od, &basis)?;
    Ok(MacenkoTarget {
        basis,
        max_concentration: max_concentrations(&conc),
    })
}

/// Classical Macenko normalisation of one patch onto a target appearance.
pub fn macenko_normalize_to_target(
    patch: &RgbPatch,
    target_basis: &StainBasis,
    target_max_c: [f64; 2],
    cfg: &StainEstimationConfig,
) -> Result<RgbPatch> {
    if !target_max_c.iter().all(|v| *v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target concentrations must be positive, got {target_max_c:?}"
        )));
    }
    let od = rgb_to_od(patch, cfg.background_intensity)?;
    let basis = estimate_stain_basis(&od, cfg)?;
    let conc = deconvolve(&od, &basis)?;
    let src = max_concentrations(&conc);
    if !src.iter().all(|v| *v > 0.0) {
        return Err(Error::DegenerateStains(format!(
            "source 99th-percentile concentrations are not positive: {src:?}"
        )));
    }
    let scaled = scale_stains(&conc, target_max_c[0] / src[0], target_max_c[1] / src[1])?;
    reconstruct(&scaled, target_basis, cfg.background_intensity)
}
