//! Laguerre-Gauss modes, vector vortex beam synthesis and Stokes polarimetry.
//!
//! A beam is described in the circular basis `(e_L, e_R)`:
//!
//! ```text
//! E = e_L cos(θ/2) LG_{m1} + e_R e^{iφ} sin(θ/2) LG_{m2}
//! ```
//!
//! Linear analyzer states are fixed as `H = (e_L + e_R)/√2`,
//! `V = -i(e_L - e_R)/√2`, `D = (H + V)/√2` and `A = (H - V)/√2`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2, TAU};
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Dark-pixel threshold relative to peak intensity for noiseless images.
pub const DARK_THRESHOLD: f64 = 1e-6;
/// Dark-pixel threshold applied once detector noise has been injected.
pub const NOISY_DARK_THRESHOLD: f64 = 1e-2;

/// A point `(m1, m2, θ, φ)` on a higher-order Poincaré sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VvbState {
    m1: i32,
    m2: i32,
    theta: f64,
    phi: f64,
}

impl VvbState {
    /// `phi` is reduced into `[0, 2π)`.
    pub fn new(m1: i32, m2: i32, theta: f64, phi: f64) -> Result<Self> {
        if m1 == m2 {
            return Err(Error::domain(format!("m1 and m2 must differ (both {m1})")));
        }
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::domain(format!("theta {theta} outside [0, π]")));
        }
        if !phi.is_finite() {
            return Err(Error::domain("phi must be finite"));
        }
        Ok(Self {
            m1,
            m2,
            theta,
            phi: reduce_angle(phi),
        })
    }

    pub fn m1(&self) -> i32 {
        self.m1
    }

    pub fn m2(&self) -> i32 {
        self.m2
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }
}

/// Reduces an angle into `[0, 2π)`.
pub fn reduce_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Square sampling grid in the transverse plane.
///
/// Pixel `(i, j)` (row `i`, column `j`) sits at
/// `x = -half_extent + (j + 0.5)·Δ`, `y = -half_extent + (i + 0.5)·Δ` with
/// `Δ = 2·half_extent / resolution`; row 0 is the most negative `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    resolution: usize,
    half_extent: f64,
    waist: f64,
}

impl GridSpec {
    pub fn new(resolution: usize, half_extent: f64, waist: f64) -> Result<Self> {
        if resolution < 8 {
            return Err(Error::domain(format!("resolution {resolution} < 8")));
        }
        if !(half_extent > 0.0 && half_extent.is_finite()) {
            return Err(Error::domain(format!("half_extent {half_extent} must be > 0")));
        }
        if !(waist > 0.0 && waist.is_finite()) {
            return Err(Error::domain(format!("waist {waist} must be > 0")));
        }
        Ok(Self {
            resolution,
            half_extent,
            waist,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    pub fn waist(&self) -> f64 {
        self.waist
    }

    pub fn pixel_count(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn pixel_size(&self) -> f64 {
        2.0 * self.half_extent / self.resolution as f64
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_size() * self.pixel_size()
    }

    /// Physical coordinate of a pixel centre along one axis.
    pub fn coord(&self, index: usize) -> f64 {
        -self.half_extent + (index as f64 + 0.5) * self.pixel_size()
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            half_extent: 4.0,
            waist: 1.0,
        }
    }
}

/// Unnormalized `LG_{m,0}` amplitude `(r√2/w)^|m| · e^{-r²/w²} · e^{i m az}`.
pub fn lg_amplitude(m: i32, r: f64, az: f64, w: f64) -> Complex64 {
    let rho = r * SQRT_2 / w;
    let radial = rho.powi(m.abs()) * (-(r * r) / (w * w)).exp();
    Complex64::from_polar(radial, m as f64 * az)
}

/// Unnormalized `LG_{m,1}` amplitude, the p = 0 profile times the generalized
/// Laguerre factor `L_1^{|m|}(2r²/w²) = |m| + 1 - 2r²/w²`.
pub fn lg_amplitude_p1(m: i32, r: f64, az: f64, w: f64) -> Complex64 {
    let laguerre = m.abs() as f64 + 1.0 - 2.0 * r * r / (w * w);
    lg_amplitude(m, r, az, w) * laguerre
}

/// Per-pixel Jones vectors `(E_L, E_R)` on a grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JonesField {
    grid: GridSpec,
    left: Vec<Complex64>,
    right: Vec<Complex64>,
}

impl JonesField {
    pub fn new(grid: GridSpec, left: Vec<Complex64>, right: Vec<Complex64>) -> Result<Self> {
        let n = grid.pixel_count();
        if left.len() != n || right.len() != n {
            return Err(Error::shape(
                format!("{n} pixels per component"),
                format!("{} / {}", left.len(), right.len()),
            ));
        }
        if left.iter().chain(&right).any(|c| !c.is_finite()) {
            return Err(Error::domain("Jones field contains non-finite amplitudes"));
        }
        Ok(Self { grid, left, right })
    }

    /// Field with the same Jones vector at every pixel.
    pub fn uniform(grid: GridSpec, left: Complex64, right: Complex64) -> Self {
        let n = grid.pixel_count();
        Self {
            grid,
            left: vec![left; n],
            right: vec![right; n],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn left(&self) -> &[Complex64] {
        &self.left
    }

    pub fn right(&self) -> &[Complex64] {
        &self.right
    }

    /// `Σ (|E_L|² + |E_R|²) · ΔA`.
    pub fn total_power(&self) -> f64 {
        let sum: f64 = self
            .left
            .iter()
            .zip(&self.right)
            .map(|(l, r)| l.norm_sqr() + r.norm_sqr())
            .sum();
        sum * self.grid.pixel_area()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            left: self.left.iter().map(|v| v * c).collect(),
            right: self.right.iter().map(|v| v * c).collect(),
        }
    }
}

/// Beam imperfections applied during synthesis. The identity value
/// reproduces [`render`] exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Distortion {
    pub center: (f64, f64),
    pub waist_scale: f64,
    pub impurity: f64,
    pub rotation: f64,
}

impl Distortion {
    pub const NONE: Distortion = Distortion {
        center: (0.0, 0.0),
        waist_scale: 1.0,
        impurity: 0.0,
        rotation: 0.0,
    };
}

fn normalize_on_grid(mode: &mut [Complex64], pixel_area: f64) {
    let power: f64 = mode.iter().map(|c| c.norm_sqr()).sum::<f64>() * pixel_area;
    if power > 0.0 {
        let scale = 1.0 / power.sqrt();
        mode.iter_mut().for_each(|c| *c *= scale);
    }
}

/// Grid-normalized transverse profile of one OAM component.
fn mode_profile(m: i32, grid: &GridSpec, d: &Distortion) -> Vec<Complex64> {
    let res = grid.resolution();
    let w = grid.waist() * d.waist_scale;
    let area = grid.pixel_area();
    let sample = |f: fn(i32, f64, f64, f64) -> Complex64| {
        let mut out = Vec::with_capacity(res * res);
        for i in 0..res {
            let y = grid.coord(i) - d.center.1;
            for j in 0..res {
                let x = grid.coord(j) - d.center.0;
                out.push(f(m, x.hypot(y), y.atan2(x), w));
            }
        }
        out
    };
    let mut base = sample(lg_amplitude);
    normalize_on_grid(&mut base, area);
    if d.impurity == 0.0 {
        return base;
    }
    let mut radial = sample(lg_amplitude_p1);
    normalize_on_grid(&mut radial, area);
    let keep = (1.0 - d.impurity * d.impurity).sqrt();
    let mut mixed: Vec<Complex64> = base
        .iter()
        .zip(&radial)
        .map(|(a, b)| a * keep + b * d.impurity)
        .collect();
    normalize_on_grid(&mut mixed, area);
    mixed
}

pub(crate) fn synthesize(state: &VvbState, grid: &GridSpec, d: &Distortion) -> JonesField {
    let half = state.theta / 2.0;
    let wl = Complex64::new(half.cos(), 0.0);
    let wr = Complex64::from_polar(half.sin(), state.phi);
    let mut left: Vec<Complex64> = mode_profile(state.m1, grid, d)
        .into_iter()
        .map(|v| v * wl)
        .collect();
    let mut right: Vec<Complex64> = mode_profile(state.m2, grid, d)
        .into_iter()
        .map(|v| v * wr)
        .collect();
    if d.rotation != 0.0 {
        // rotating linear polarization by β multiplies E_L by e^{-iβ}, E_R by e^{iβ}
        let rot = Complex64::from_polar(1.0, d.rotation);
        left.iter_mut().for_each(|v| *v *= rot.conj());
        right.iter_mut().for_each(|v| *v *= rot);
    }
    JonesField {
        grid: *grid,
        left,
        right,
    }
}

/// Jones field of a VVB with each LG component normalized to unit power on
/// the grid, so the whole field carries power 1.
pub fn render(state: &VvbState, grid: &GridSpec) -> JonesField {
    synthesize(state, grid, &Distortion::NONE)
}

/// Intensities behind the six analyzers, in the order H, V, D, A, L, R.
pub fn analyzer_intensities(left: Complex64, right: Complex64) -> [f64; 6] {
    let h = (left + right) * FRAC_1_SQRT_2;
    // <V|E> with V = (-i, i)/√2
    let v = (left - right) * Complex64::new(0.0, FRAC_1_SQRT_2);
    let d = (h + v) * FRAC_1_SQRT_2;
    let a = (h - v) * FRAC_1_SQRT_2;
    [
        h.norm_sqr(),
        v.norm_sqr(),
        d.norm_sqr(),
        a.norm_sqr(),
        left.norm_sqr(),
        right.norm_sqr(),
    ]
}

fn contrast(a: f64, b: f64) -> f64 {
    let total = a + b;
    if total > 0.0 {
        ((a - b) / total).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Per-pixel normalized Stokes parameters plus total intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct StokesImage {
    resolution: usize,
    s1: Vec<f64>,
    s2: Vec<f64>,
    s3: Vec<f64>,
    intensity: Vec<f64>,
}

impl StokesImage {
    pub fn new(
        resolution: usize,
        s1: Vec<f64>,
        s2: Vec<f64>,
        s3: Vec<f64>,
        intensity: Vec<f64>,
    ) -> Result<Self> {
        let n = resolution * resolution;
        for (name, plane) in [("s1", &s1), ("s2", &s2), ("s3", &s3), ("intensity", &intensity)] {
            if plane.len() != n {
                return Err(Error::shape(
                    format!("{n} values in {name}"),
                    plane.len(),
                ));
            }
        }
        Ok(Self {
            resolution,
            s1,
            s2,
            s3,
            intensity,
        })
    }

    /// Builds an image from per-pixel analyzer intensities `[H, V, D, A, L, R]`,
    /// masking pixels darker than `threshold · max` as unpolarized.
    pub fn from_intensities(resolution: usize, basis: &[[f64; 6]], threshold: f64) -> Self {
        let n = basis.len();
        let totals: Vec<f64> = basis.iter().map(|b| b[0] + b[1]).collect();
        let peak = totals.iter().cloned().fold(0.0, f64::max);
        let mut img = Self {
            resolution,
            s1: vec![0.0; n],
            s2: vec![0.0; n],
            s3: vec![0.0; n],
            intensity: vec![0.0; n],
        };
        if peak <= 0.0 {
            return img;
        }
        let cut = threshold * peak;
        for (k, b) in basis.iter().enumerate() {
            img.intensity[k] = totals[k] / peak;
            if totals[k] >= cut {
                img.s1[k] = contrast(b[0], b[1]);
                img.s2[k] = contrast(b[2], b[3]);
                img.s3[k] = contrast(b[4], b[5]);
            }
        }
        img
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pixel_count(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn s1(&self) -> &[f64] {
        &self.s1
    }

    pub fn s2(&self) -> &[f64] {
        &self.s2
    }

    pub fn s3(&self) -> &[f64] {
        &self.s3
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    /// Planes in storage order: s1, s2, s3, intensity.
    pub fn planes(&self) -> [&[f64]; 4] {
        [&self.s1, &self.s2, &self.s3, &self.intensity]
    }

    pub(crate) fn planes_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.s1, &mut self.s2, &mut self.s3, &mut self.intensity]
    }

    /// `s1² + s2² + s3²` at pixel `k`.
    pub fn purity_at(&self, k: usize) -> f64 {
        self.s1[k] * self.s1[k] + self.s2[k] * self.s2[k] + self.s3[k] * self.s3[k]
    }

    /// Whether pixel `k` carries the unpolarized convention.
    pub fn is_unpolarized(&self, k: usize) -> bool {
        self.s1[k] == 0.0 && self.s2[k] == 0.0 && self.s3[k] == 0.0
    }

    /// Rounds every value to the nearest `f32`, the precision of stored datasets.
    pub fn quantized(mut self) -> Self {
        for plane in self.planes_mut() {
            plane.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        self
    }
}

/// Stokes image of a Jones field with the noiseless dark-pixel threshold.
pub fn stokes(field: &JonesField) -> StokesImage {
    stokes_with_threshold(field, DARK_THRESHOLD)
}

pub fn stokes_with_threshold(field: &JonesField, threshold: f64) -> StokesImage {
    let basis: Vec<[f64; 6]> = field
        .left
        .iter()
        .zip(&field.right)
        .map(|(l, r)| analyzer_intensities(*l, *r))
        .collect();
    StokesImage::from_intensities(field.grid.resolution(), &basis, threshold)
}

/// 8-bit RGB rendering of a Stokes image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    resolution: usize,
    pixels: Vec<[u8; 3]>,
}

fn channel(s: f64) -> u8 {
    (255.0 * (s + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8
}

/// Maps `(S1, S2, S3)` to `(r, g, b)` by `round(255·(S+1)/2)`; unpolarized
/// pixels come out grey `(128, 128, 128)`.
pub fn to_rgb(img: &StokesImage) -> RgbImage {
    let pixels = (0..img.pixel_count())
        .map(|k| [channel(img.s1[k]), channel(img.s2[k]), channel(img.s3[k])])
        .collect();
    RgbImage {
        resolution: img.resolution,
        pixels,
    }
}

impl RgbImage {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    /// Binary PPM (P6, maxval 255). Row 0 of the file is the top of the
    /// picture, i.e. the most positive `y`.
    pub fn to_ppm(&self) -> Vec<u8> {
        let res = self.resolution;
        let mut out = format!("P6\n{res} {res}\n255\n").into_bytes();
        for row in (0..res).rev() {
            for px in &self.pixels[row * res..(row + 1) * res] {
                out.extend_from_slice(px);
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{E, FRAC_PI_2};

    fn grid64() -> GridSpec {
        GridSpec::default()
    }

    #[test]
    fn lg_amplitude_examples() {
        assert_eq!(lg_amplitude(1, 0.0, 0.7, 1.0).norm(), 0.0);
        let g = lg_amplitude(0, 0.0, 1.3, 1.0);
        assert_eq!(g, Complex64::new(1.0, 0.0));
        // (√2)² e^{-1} e^{iπ}
        let v = lg_amplitude(2, 1.0, FRAC_PI_2, 1.0);
        assert_abs_diff_eq!(v.re, -2.0 / E, epsilon = 1e-15);
        assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lg_magnitude_is_azimuth_independent() {
        for m in [-5, -2, 0, 3] {
            let a = lg_amplitude(m, 0.8, 0.1, 1.3).norm();
            let b = lg_amplitude(m, 0.8, 2.9, 1.3).norm();
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn p1_mode_has_node_at_waist_for_unit_charge() {
        assert_abs_diff_eq!(lg_amplitude_p1(1, 1.0, 0.3, 1.0).norm(), 0.0, epsilon = 1e-15);
        assert!(lg_amplitude_p1(1, 0.5, 0.3, 1.0).norm() > 0.1);
    }

    #[test]
    fn state_validation() {
        assert!(VvbState::new(1, 1, 0.0, 0.0).is_err());
        assert!(VvbState::new(1, -1, -0.1, 0.0).is_err());
        assert!(VvbState::new(1, -1, 3.2, 0.0).is_err());
        let s = VvbState::new(-1, 1, 1.0, -0.5).unwrap();
        assert_abs_diff_eq!(s.phi(), TAU - 0.5, epsilon = 1e-15);
        let s = VvbState::new(-1, 1, 1.0, TAU).unwrap();
        assert_eq!(s.phi(), 0.0);
    }

    #[test]
    fn grid_validation_and_coordinates() {
        assert!(GridSpec::new(7, 4.0, 1.0).is_err());
        assert!(GridSpec::new(8, 0.0, 1.0).is_err());
        assert!(GridSpec::new(8, 1.0, -1.0).is_err());
        let g = GridSpec::new(8, 4.0, 1.0).unwrap();
        assert_abs_diff_eq!(g.coord(0), -3.5);
        assert_abs_diff_eq!(g.coord(7), 3.5);
    }

    #[test]
    fn poles_have_a_single_component() {
        let g = grid64();
        let north = render(&VvbState::new(3, -1, 0.0, 1.0).unwrap(), &g);
        assert!(north.right().iter().all(|c| c.norm() == 0.0));
        let south = render(&VvbState::new(3, -1, PI, 1.0).unwrap(), &g);
        let bare = mode_profile(-1, &g, &Distortion::NONE);
        for (a, b) in south.right().iter().zip(&bare) {
            assert_abs_diff_eq!(a.norm(), b.norm(), epsilon = 1e-15);
        }
        assert!(south.left().iter().all(|c| c.norm() < 1e-16));
    }

    #[test]
    fn rendered_power_is_one() {
        let s = VvbState::new(-1, 1, FRAC_PI_2, 0.0).unwrap();
        let f = render(&s, &grid64());
        // direct summation, independent of total_power
        let mut sum = 0.0;
        for k in 0..f.left().len() {
            sum += f.left()[k].norm_sqr() + f.right()[k].norm_sqr();
        }
        let dx = 8.0 / 64.0;
        assert_abs_diff_eq!(sum * dx * dx, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn uniform_basis_states() {
        let g = GridSpec::new(8, 1.0, 1.0).unwrap();
        let r = FRAC_1_SQRT_2;
        let h = stokes(&JonesField::uniform(g, Complex64::new(r, 0.0), Complex64::new(r, 0.0)));
        for k in 0..g.pixel_count() {
            assert_abs_diff_eq!(h.s1()[k], 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(h.s2()[k], 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(h.s3()[k], 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(h.intensity()[k], 1.0, epsilon = 1e-15);
        }
        let l = stokes(&JonesField::uniform(g, Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)));
        assert!(l.s3().iter().all(|&v| v == 1.0));
        // V and D from the frozen convention
        let v = stokes(&JonesField::uniform(g, Complex64::new(0.0, -r), Complex64::new(0.0, r)));
        assert_abs_diff_eq!(v.s1()[0], -1.0, epsilon = 1e-15);
        let d = stokes(&JonesField::uniform(
            g,
            Complex64::new(0.5, -0.5),
            Complex64::new(0.5, 0.5),
        ));
        assert_abs_diff_eq!(d.s2()[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn radial_beam_is_fully_polarized_and_linear() {
        let s = VvbState::new(-1, 1, FRAC_PI_2, 0.0).unwrap();
        let img = stokes(&render(&s, &grid64()));
        let mut lit = 0;
        for k in 0..img.pixel_count() {
            if !img.is_unpolarized(k) {
                lit += 1;
                assert_abs_diff_eq!(img.purity_at(k), 1.0, epsilon = 1e-6);
                assert_abs_diff_eq!(img.s3()[k], 0.0, epsilon = 1e-9);
            }
        }
        assert!(lit > 1000);
        // the polarization direction turns twice per revolution: opposite
        // points across the origin share the same Stokes vector
        let res = 64;
        let (a, b) = (20 * res + 30, (res - 1 - 20) * res + (res - 1 - 30));
        assert_abs_diff_eq!(img.s1()[a], img.s1()[b], epsilon = 1e-9);
        assert_abs_diff_eq!(img.s2()[a], img.s2()[b], epsilon = 1e-9);
    }

    #[test]
    fn dark_pixels_are_unpolarized() {
        let s = VvbState::new(-5, 5, 1.0, 0.0).unwrap();
        let img = stokes(&render(&s, &grid64()));
        // the vortex core of |m| = 5 is dark
        let centre = 32 * 64 + 32;
        assert!(img.intensity()[centre] < DARK_THRESHOLD);
        assert!(img.is_unpolarized(centre));
    }

    #[test]
    fn rgb_examples() {
        assert!(StokesImage::new(8, vec![0.0], vec![0.0], vec![0.0], vec![1.0]).is_err());
        let img = StokesImage::new(
            8,
            vec![0.0; 64],
            vec![0.0; 64],
            vec![0.0; 64],
            vec![1.0; 64],
        )
        .unwrap();
        assert!(to_rgb(&img).pixels().iter().all(|p| *p == [128, 128, 128]));
        assert_eq!([channel(1.0), channel(-1.0), channel(0.0)], [255, 0, 128]);
        assert_eq!([channel(-1.0); 3], [0, 0, 0]);
    }

    #[test]
    fn ppm_header_and_size() {
        let s = VvbState::new(-1, 1, FRAC_PI_2, 0.0).unwrap();
        let rgb = to_rgb(&stokes(&render(&s, &grid64())));
        let bytes = rgb.to_ppm();
        let header = b"P6\n64 64\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 64 * 64 * 3);
    }
}
