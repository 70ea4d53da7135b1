//! Synthetic volumes: a spherical lesion rendered at per-modality contrast,
//! and 2-D slices whose class depends on the acquisition sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::film::ClsSample;
use crate::metadata::{ModalityId, ModalityMask, Plane, N_MODALITIES};
use crate::seg::{LabelVolume, SegBatch};
use crate::tensor::Tensor;

/// Minimum lesion pixels for a positive slice.
pub const MIN_TUMOR_PIXELS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contrast {
    pub background: f64,
    pub tumor: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub extent: usize,
    pub n_samples: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// FLAIR, T1c, T1, T2.
    pub flair: Contrast,
    pub t1c: Contrast,
    pub t1: Contrast,
    pub t2: Contrast,
    pub seed: u64,
}

impl Default for PhantomSpec {
    /// Every modality sees the lesion through heavy noise at a different
    /// contrast, so combining modalities helps.
    fn default() -> Self {
        Self {
            extent: 32,
            n_samples: 8,
            radius_min: 4.0,
            radius_max: 8.0,
            flair: Contrast { background: 0.0, tumor: 1.0, sigma: 0.7 },
            t1c: Contrast { background: 0.0, tumor: 0.8, sigma: 0.7 },
            t1: Contrast { background: 0.0, tumor: -0.5, sigma: 0.7 },
            t2: Contrast { background: 0.0, tumor: 0.9, sigma: 0.7 },
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn contrasts(&self) -> [Contrast; N_MODALITIES] {
        [self.flair, self.t1c, self.t1, self.t2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent == 0 {
            return Err(Error::config("phantom.extent", "must be positive"));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::config("phantom.radius_min", "need 0 < radius_min <= radius_max"));
        }
        if self.radius_max > self.extent as f64 / 2.0 {
            return Err(Error::config(
                "phantom.radius_max",
                format!("radius {} exceeds half the extent {}", self.radius_max, self.extent),
            ));
        }
        let names = ["phantom.flair", "phantom.t1c", "phantom.t1", "phantom.t2"];
        for (c, key) in self.contrasts().iter().zip(names) {
            if !(c.sigma >= 0.0 && c.sigma.is_finite() && c.tumor.is_finite() && c.background.is_finite()) {
                return Err(Error::config(key, "levels must be finite and sigma non-negative"));
            }
        }
        if self.contrasts().iter().all(|c| c.tumor == c.background) {
            return Err(Error::config("phantom", "the lesion is invisible in every modality"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegPhantom {
    pub batch: SegBatch,
    /// Voxel-index coordinates of the lesion center.
    pub center: [f64; 3],
    pub radius: f64,
}

fn inside(idx: [usize; 3], center: [f64; 3], radius: f64) -> bool {
    let d2: f64 = (0..3).map(|a| (idx[a] as f64 - center[a]).powi(2)).sum();
    d2 <= radius * radius
}

/// Volumes with one spherical lesion each; all modalities available.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Vec<SegPhantom>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.extent;
    let n = e * e * e;
    let contrasts = spec.contrasts();
    let noise: Vec<Normal<f64>> = contrasts
        .iter()
        .map(|c| Normal::new(0.0, c.sigma).expect("sigma validated"))
        .collect();
    let mut out = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let radius = if spec.radius_min == spec.radius_max {
            spec.radius_min
        } else {
            rng.random_range(spec.radius_min..=spec.radius_max)
        };
        let lo = radius;
        let hi = (e as f64 - 1.0 - radius).max(lo);
        let center: [f64; 3] = std::array::from_fn(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo });
        let mut labels = vec![0usize; n];
        for (v, l) in labels.iter_mut().enumerate() {
            *l = inside([v / (e * e), v / e % e, v % e], center, radius) as usize;
        }
        let mut data = Vec::with_capacity(N_MODALITIES * n);
        for (c, dist) in contrasts.iter().zip(&noise) {
            for &l in &labels {
                let level = if l == 1 { c.tumor } else { c.background };
                data.push(level + dist.sample(&mut rng));
            }
        }
        out.push(SegPhantom {
            batch: SegBatch {
                volumes: Tensor::new(&[N_MODALITIES, e, e, e], data)?,
                mask: ModalityMask::all(1),
                target: LabelVolume::new([e; 3], labels)?,
            },
            center,
            radius,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClsPhantomSpec {
    pub extent: usize,
    pub n_samples: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for ClsPhantomSpec {
    fn default() -> Self {
        Self {
            extent: 32,
            n_samples: 256,
            radius_min: 4.0,
            radius_max: 6.0,
            sigma: 0.3,
            seed: 0,
        }
    }
}

impl ClsPhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent < 24 {
            return Err(Error::config("cls_data.extent", "must be at least 24 to separate the two spheres"));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::config("cls_data.radius_min", "need 0 < radius_min <= radius_max"));
        }
        // The two spheres sit in opposite quarters of every axis.
        if self.radius_max >= self.extent as f64 / 4.0 {
            return Err(Error::config(
                "cls_data.radius_max",
                format!("radius {} must stay below a quarter of the extent {}", self.radius_max, self.extent),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("cls_data.sigma", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Lesion brightness for a sequence. The fluid sphere has the opposite sign,
/// so an image alone cannot tell which blob is the lesion.
pub fn lesion_polarity(seq: ModalityId) -> f64 {
    match seq {
        ModalityId::Flair | ModalityId::T1c => 1.0,
        ModalityId::T1 | ModalityId::T2 => -1.0,
    }
}

fn slice_axis(plane: Plane) -> usize {
    match plane {
        Plane::Axial => 0,
        Plane::Coronal => 1,
        Plane::Sagittal => 2,
    }
}

/// Pixels of the sphere cut by the plane `axis = index`.
fn disk_pixels(e: usize, axis: usize, index: usize, center: [f64; 3], radius: f64) -> Vec<usize> {
    let mut px = Vec::new();
    for i in 0..e {
        for j in 0..e {
            let mut idx = [0usize; 3];
            idx[axis] = index;
            let free: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
            idx[free[0]] = i;
            idx[free[1]] = j;
            if inside(idx, center, radius) {
                px.push(i * e + j);
            }
        }
    }
    px
}

/// Labeled 2-D slices. Each volume has a lesion and a fluid sphere of the
/// same size range; the sequence sets which one is bright. A slice is
/// positive when it contains at least [`MIN_TUMOR_PIXELS`] lesion pixels.
pub fn generate_cls_phantoms(spec: &ClsPhantomSpec) -> Result<Vec<ClsSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.extent;
    let noise = Normal::new(0.0, spec.sigma).expect("sigma validated");
    let quarter = e as f64 / 4.0;
    let mut out = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let mut lesion = [0.0; 3];
        let mut fluid = [0.0; 3];
        for a in 0..3 {
            let low = quarter + rng.random_range(-1.0..=1.0);
            let high = 3.0 * quarter + rng.random_range(-1.0..=1.0);
            if rng.random::<bool>() {
                (lesion[a], fluid[a]) = (low, high);
            } else {
                (lesion[a], fluid[a]) = (high, low);
            }
        }
        let r_lesion = rng.random_range(spec.radius_min..=spec.radius_max);
        let r_fluid = rng.random_range(spec.radius_min..=spec.radius_max);
        let sequence = ModalityId::ALL[rng.random_range(0..N_MODALITIES)];
        let plane = Plane::ALL[rng.random_range(0..3)];
        let axis = slice_axis(plane);
        // Cut through the lesion, the fluid, or anywhere.
        let index = match rng.random_range(0..3) {
            0 => (lesion[axis] + rng.random_range(-0.5..=0.5) * r_lesion).round(),
            1 => (fluid[axis] + rng.random_range(-0.5..=0.5) * r_fluid).round(),
            _ => rng.random_range(0..e) as f64,
        }
        .clamp(0.0, (e - 1) as f64) as usize;
        let lesion_px = disk_pixels(e, axis, index, lesion, r_lesion);
        let fluid_px = disk_pixels(e, axis, index, fluid, r_fluid);
        let pol = lesion_polarity(sequence);
        let mut img: Vec<f64> = (0..e * e).map(|_| noise.sample(&mut rng)).collect();
        for &p in &lesion_px {
            img[p] += pol;
        }
        for &p in &fluid_px {
            img[p] -= pol;
        }
        out.push(ClsSample {
            image: Tensor::new(&[1, e, e], img)?,
            sequence,
            plane,
            label: (lesion_px.len() >= MIN_TUMOR_PIXELS) as usize,
        });
    }
    Ok(out)
}
