//! Experimental-like imperfections for synthetic images.
//!
//! Beam-side effects (centring, waist, radial-mode impurity, polarization
//! crosstalk) act on the Jones field; detector-side effects (intensity noise,
//! background light) act on the six analyzer intensities behind a Stokes
//! image. All draws come from [`crate::rng::stream`] keyed by
//! `(seed, sample_index, stage)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::optics::{
    self, Distortion, GridSpec, JonesField, StokesImage, VvbState, DARK_THRESHOLD,
    NOISY_DARK_THRESHOLD,
};
use crate::rng::{stream, Stage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub seed: u64,
    /// Std of the beam-centre displacement along each axis, in waist units.
    pub center_jitter_sigma: f64,
    /// Relative std of the waist.
    pub waist_jitter_rel: f64,
    /// Amplitude of the `LG_{m,1}` admixture, in `[0, 1)`.
    pub impurity_eps: f64,
    /// Std of a global polarization rotation, radians.
    pub pol_crosstalk_rad: f64,
    /// Relative std of Gaussian noise on each analyzer intensity.
    pub intensity_noise_rel: f64,
    /// Uniform background added to each analyzer intensity, relative to peak.
    pub background_rel: f64,
}

impl NoiseConfig {
    pub const PRESET_NAMES: [&'static str; 2] = ["none", "labproxy"];

    pub fn none(seed: u64) -> Self {
        Self {
            seed,
            center_jitter_sigma: 0.0,
            waist_jitter_rel: 0.0,
            impurity_eps: 0.0,
            pol_crosstalk_rad: 0.0,
            intensity_noise_rel: 0.0,
            background_rel: 0.0,
        }
    }

    /// Stand-in for laboratory conditions.
    pub fn labproxy(seed: u64) -> Self {
        Self {
            seed,
            center_jitter_sigma: 0.05,
            waist_jitter_rel: 0.03,
            impurity_eps: 0.15,
            pol_crosstalk_rad: 0.05,
            intensity_noise_rel: 0.03,
            background_rel: 0.02,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "none" | "clean" => Some(Self::none(seed)),
            "labproxy" => Some(Self::labproxy(seed)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            ("center_jitter_sigma", self.center_jitter_sigma),
            ("waist_jitter_rel", self.waist_jitter_rel),
            ("impurity_eps", self.impurity_eps),
            ("pol_crosstalk_rad", self.pol_crosstalk_rad),
            ("intensity_noise_rel", self.intensity_noise_rel),
            ("background_rel", self.background_rel),
        ];
        for (name, v) in sigmas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if self.impurity_eps >= 1.0 {
            return Err(Error::domain(format!(
                "impurity_eps = {} must be < 1",
                self.impurity_eps
            )));
        }
        Ok(())
    }

    fn has_detector_noise(&self) -> bool {
        self.intensity_noise_rel > 0.0 || self.background_rel > 0.0
    }
}

/// Renders `state` with beam imperfections drawn for `sample_index`.
pub fn perturb_field(
    state: &VvbState,
    grid: &GridSpec,
    cfg: &NoiseConfig,
    sample_index: u64,
) -> Result<JonesField> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, sample_index, Stage::Field);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let w = grid.waist();
    let center = (
        cfg.center_jitter_sigma * w * normal(),
        cfg.center_jitter_sigma * w * normal(),
    );
    // keep the waist positive for absurd jitter settings
    let waist_scale = (1.0 + cfg.waist_jitter_rel * normal()).max(0.05);
    let rotation = cfg.pol_crosstalk_rad * normal();
    let distortion = Distortion {
        center,
        waist_scale,
        impurity: cfg.impurity_eps,
        rotation,
    };
    Ok(optics::synthesize(state, grid, &distortion))
}

/// Adds detector noise to a Stokes image.
///
/// The six analyzer intensities are rebuilt from `(S, I)`, each becomes
/// `max(0, I_k (1 + σ z_k) + background)`, and the Stokes ratios are recomputed.
/// With no detector noise configured the image passes through the same round
/// trip with the noiseless dark threshold; otherwise the noisy threshold applies.
pub fn perturb_stokes(img: &StokesImage, cfg: &NoiseConfig, sample_index: u64) -> StokesImage {
    let mut rng = stream(cfg.seed, sample_index, Stage::Stokes);
    let noisy = cfg.has_detector_noise();
    let sigma = cfg.intensity_noise_rel;
    let background = cfg.background_rel;
    let basis: Vec<[f64; 6]> = (0..img.pixel_count())
        .map(|k| {
            let i = img.intensity()[k];
            let s = [img.s1()[k], img.s2()[k], img.s3()[k]];
            let mut out = [0.0; 6];
            for (j, sj) in s.iter().enumerate() {
                out[2 * j] = i * (1.0 + sj) / 2.0;
                out[2 * j + 1] = i * (1.0 - sj) / 2.0;
            }
            if noisy {
                for v in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = (*v * (1.0 + sigma * z) + background).max(0.0);
                }
            }
            out
        })
        .collect();
    let threshold = if noisy {
        NOISY_DARK_THRESHOLD
    } else {
        DARK_THRESHOLD
    };
    StokesImage::from_intensities(img.resolution(), &basis, threshold)
}

/// Full measurement chain for one sample: distorted field, polarimetry, detector noise.
pub fn observe(
    state: &VvbState,
    grid: &GridSpec,
    cfg: &NoiseConfig,
    sample_index: u64,
) -> Result<StokesImage> {
    let field = perturb_field(state, grid, cfg, sample_index)?;
    let img = optics::stokes(&field);
    Ok(perturb_stokes(&img, cfg, sample_index))
}

/// Mean `s1² + s2² + s3²` over polarized pixels.
pub fn mean_purity(img: &StokesImage) -> f64 {
    let (sum, n) = (0..img.pixel_count())
        .filter(|&k| !img.is_unpolarized(k))
        .fold((0.0, 0usize), |(s, n), k| (s + img.purity_at(k), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
