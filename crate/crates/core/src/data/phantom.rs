//! Synthetic brain-tumor phantoms with nested regions.
//!
//! A brain ellipsoid (zero outside) holds one or more tumors. Each tumor
//! claims the voxels nearest its center under an ellipsoidal distance, so class
//! counts hit the configured ratios exactly: the complete tumor first, the
//! core among those, enhancing among the core. Necrosis is the part of the
//! non-enhancing core lying furthest along a random direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{LabelVolume, Volume};
use crate::error::{invalid, Result};
use crate::{NUM_CLASSES, NUM_MODALITIES};

/// Voxel-level class ratio: background, necrosis, edema, non-enhancing, enhancing.
pub const DEFAULT_RATIOS: [f64; NUM_CLASSES] = [2262.0, 2.0, 16.0, 7.0, 1.0];

/// Mean intensity per class (rows) and channel (T1, T1c, T2, FLAIR). Row 0
/// is healthy tissue inside the brain. FLAIR lifts every tumor class; T1c
/// marks enhancing tumor.
pub const DEFAULT_CLASS_MEANS: [[f64; NUM_MODALITIES]; NUM_CLASSES] = [
    [1.00, 1.00, 1.00, 1.00],
    [0.55, 0.70, 1.70, 1.45],
    [0.85, 1.00, 1.45, 1.85],
    [0.70, 1.15, 1.30, 1.65],
    [0.80, 1.90, 1.20, 1.55],
];

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub seed: u64,
    /// `(D, H, W)`.
    pub dims: [usize; 3],
    pub ratios: [f64; NUM_CLASSES],
    pub tumor_count: usize,
    /// Tumor volume is scaled by a uniform factor in `[1 - j, 1 + j]`.
    pub size_jitter: f64,
    pub class_means: [[f64; NUM_MODALITIES]; NUM_CLASSES],
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            dims: [32, 64, 64],
            ratios: DEFAULT_RATIOS,
            tumor_count: 1,
            size_jitter: 0.25,
            class_means: DEFAULT_CLASS_MEANS,
            noise: 0.4,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return invalid(format!("phantom dims {:?} must be positive", self.dims));
        }
        if self.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return invalid(format!("phantom ratios {:?} must be positive", self.ratios));
        }
        if self.tumor_count == 0 {
            return invalid("tumor count must be at least 1");
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return invalid(format!("size jitter {} outside [0, 1)", self.size_jitter));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return invalid("noise must be finite and non-negative");
        }
        if self.class_means.iter().flatten().any(|m| !(*m > 0.0 && m.is_finite())) {
            return invalid("class means must be positive");
        }
        Ok(())
    }
}

const BRAIN_EXTENT: f64 = 0.45;
/// Tumor centers stay within this ellipsoidal radius of the brain center.
const CENTER_SPREAD: f64 = 0.35;
/// Floor on brain intensities so the nonzero mask is exactly the brain.
const MIN_INTENSITY: f64 = 1e-2;
/// Largest per-axis shift of the enhancing center from the core center, in
/// units of the complete tumor's radius.
const ENHANCING_OFFSET: f64 = 0.3;

#[derive(Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn dist2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.axes[i]).powi(2)).sum()
    }

    fn jittered(rng: &mut ChaCha8Rng, center: [f64; 3], offset: f64) -> Self {
        let mut c = center;
        for v in &mut c {
            *v += offset * (2.0 * rng.random::<f64>() - 1.0);
        }
        let mut axes = [0.0; 3];
        for a in &mut axes {
            *a = rng.random_range(0.75..1.33);
        }
        Ellipsoid { center: c, axes }
    }
}

fn position(idx: usize, dims: [usize; 3]) -> [f64; 3] {
    let [_, h, w] = dims;
    [(idx / (h * w)) as f64, ((idx / w) % h) as f64, (idx % w) as f64]
}

/// The `n` candidates nearest under `score` (smallest first, index ties broken by index).
fn nearest(candidates: &[usize], n: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates.iter().map(|&i| (score(i), i)).collect();
    let n = n.min(scored.len());
    if n < scored.len() {
        scored.select_nth_unstable_by(n, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    }
    scored.truncate(n);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Deterministic given `cfg.seed`.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume, LabelVolume)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = cfg.dims;
    let total: usize = dims.iter().product();
    let ratio_sum: f64 = cfg.ratios.iter().sum();

    let scale = 1.0 + cfg.size_jitter * (2.0 * rng.random::<f64>() - 1.0);
    let per_tumor = |k: usize| {
        (total as f64 * cfg.ratios[k] / ratio_sum * scale / cfg.tumor_count as f64).round() as usize
    };
    let [n_nec, n_edema, n_nonenh, n_enh] = [per_tumor(1), per_tumor(2), per_tumor(3), per_tumor(4)];
    if n_enh == 0 {
        return invalid(format!("phantom dims {dims:?} too small to hold an enhancing region"));
    }
    let n_core = n_nec + n_nonenh + n_enh;
    let n_complete = n_core + n_edema;

    let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let brain = Ellipsoid { center, axes: dims.map(|d| BRAIN_EXTENT * d as f64) };
    let brain_voxels: Vec<usize> = (0..total).filter(|&i| brain.dist2(position(i, dims)) <= 1.0).collect();
    if brain_voxels.len() < 2 * n_complete * cfg.tumor_count {
        return invalid(format!("phantom dims {dims:?} too small to fit {} tumor voxels", n_complete * cfg.tumor_count));
    }

    let mut labels = vec![0u8; total];
    let mut in_brain = vec![false; total];
    for &i in &brain_voxels {
        in_brain[i] = true;
    }
    for _ in 0..cfg.tumor_count {
        let tumor_center = loop {
            let c: [f64; 3] =
                std::array::from_fn(|i| center[i] + brain.axes[i] * CENTER_SPREAD * (2.0 * rng.random::<f64>() - 1.0));
            if brain.dist2(c) <= CENTER_SPREAD * CENTER_SPREAD {
                break c;
            }
        };
        let free: Vec<usize> = brain_voxels.iter().copied().filter(|&i| labels[i] == 0).collect();
        let outer = Ellipsoid::jittered(&mut rng, tumor_center, 0.0);
        let complete = nearest(&free, n_complete, |i| outer.dist2(position(i, dims)));

        let radius = (3.0 * n_complete as f64 / (4.0 * std::f64::consts::PI)).cbrt();
        let core_shape = Ellipsoid::jittered(&mut rng, tumor_center, 0.15 * radius);
        let core = nearest(&complete, n_core, |i| core_shape.dist2(position(i, dims)));
        let enh_shape = Ellipsoid::jittered(&mut rng, core_shape.center, ENHANCING_OFFSET * radius);
        let enhancing = nearest(&core, n_enh, |i| enh_shape.dist2(position(i, dims)));

        for &i in &complete {
            labels[i] = 2;
        }
        for &i in &core {
            labels[i] = 3;
        }
        for &i in &enhancing {
            labels[i] = 4;
        }
        let dir: [f64; 3] = {
            let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.map(|x| x / norm)
        };
        let rest: Vec<usize> = core.iter().copied().filter(|&i| labels[i] == 3).collect();
        let necrosis = nearest(&rest, n_nec, |i| {
            let p = position(i, dims);
            -(0..3).map(|k| (p[k] - core_shape.center[k]) * dir[k]).sum::<f64>()
        });
        for &i in &necrosis {
            labels[i] = 1;
        }
    }

    let mut data = vec![0f32; total * NUM_MODALITIES];
    for i in 0..total {
        if !in_brain[i] {
            continue;
        }
        let means = &cfg.class_means[labels[i] as usize];
        for c in 0..NUM_MODALITIES {
            let noise: f64 = rng.sample(StandardNormal);
            data[i * NUM_MODALITIES + c] = (means[c] + cfg.noise * noise).max(MIN_INTENSITY) as f32;
        }
    }
    Ok((Volume::new(dims, data)?, LabelVolume::new(dims, labels)?))
}
