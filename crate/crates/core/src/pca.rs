//! Linear principal component analysis over flattened Stokes images.
//!
//! The decomposition never forms a `D × D` covariance when there are fewer
//! samples than features: it diagonalizes the `N × N` Gram matrix of the
//! centred data and maps its eigenvectors back to right singular vectors,
//! then re-orthonormalizes them.

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::optics::StokesImage;

/// Planes of a Stokes image that enter the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSet {
    /// `s1, s2, s3`.
    Polarization,
    /// `s1, s2, s3, intensity`.
    PolarizationIntensity,
}

impl FeatureSet {
    pub fn planes(self) -> usize {
        match self {
            FeatureSet::Polarization => 3,
            FeatureSet::PolarizationIntensity => 4,
        }
    }

    pub fn tag(self) -> u8 {
        self.planes() as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            3 => Some(FeatureSet::Polarization),
            4 => Some(FeatureSet::PolarizationIntensity),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::Polarization => "stokes",
            FeatureSet::PolarizationIntensity => "stokes+intensity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stokes" => Some(FeatureSet::Polarization),
            "stokes+intensity" => Some(FeatureSet::PolarizationIntensity),
            _ => None,
        }
    }
}

/// Concatenated feature planes of one image.
pub fn flatten(img: &StokesImage, set: FeatureSet) -> Vec<f64> {
    let planes = img.planes();
    let mut out = Vec::with_capacity(set.planes() * img.pixel_count());
    for plane in &planes[..set.planes()] {
        out.extend_from_slice(plane);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `n_c × D`, orthonormal rows.
    components: DMatrix<f64>,
    explained_variance: Vec<f64>,
    total_variance: f64,
    resolution: usize,
    features: FeatureSet,
}

impl PcaModel {
    pub fn from_parts(
        mean: Vec<f64>,
        components: DMatrix<f64>,
        explained_variance: Vec<f64>,
        total_variance: f64,
        resolution: usize,
        features: FeatureSet,
    ) -> Result<Self> {
        let d = mean.len();
        if components.ncols() != d || explained_variance.len() != components.nrows() {
            return Err(Error::shape(
                format!("{d} columns and {} variances", components.nrows()),
                format!(
                    "{} columns and {} variances",
                    components.ncols(),
                    explained_variance.len()
                ),
            ));
        }
        if resolution > 0 && d != features.planes() * resolution * resolution {
            return Err(Error::shape(
                features.planes() * resolution * resolution,
                d,
            ));
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
            total_variance,
            resolution,
            features,
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Variance summed over every direction of the training data.
    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// Share of total variance captured by each retained component.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    /// Share of total variance captured by the first `k` components.
    pub fn cumulative_share(&self, k: usize) -> f64 {
        self.explained_variance_ratio().iter().take(k).sum()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn features(&self) -> FeatureSet {
        self.features
    }

    /// Keeps the leading `k` components.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.n_components() {
            return Err(Error::domain(format!(
                "cannot keep {k} of {} components",
                self.n_components()
            )));
        }
        Ok(Self {
            components: self.components.rows(0, k).into_owned(),
            explained_variance: self.explained_variance[..k].to_vec(),
            ..self.clone()
        })
    }

    /// `components · (x - mean)`.
    pub fn transform_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape(self.dim(), x.len()));
        }
        let centred = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
        Ok((&self.components * centred).iter().copied().collect())
    }

    pub fn transform(&self, img: &StokesImage) -> Result<Vec<f64>> {
        if img.resolution() != self.resolution {
            return Err(Error::shape(
                format!("resolution {}", self.resolution),
                img.resolution(),
            ));
        }
        self.transform_vec(&flatten(img, self.features))
    }

    /// Projects every image of a dataset.
    pub fn transform_dataset(&self, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
        use rayon::prelude::*;
        ds.samples()
            .par_iter()
            .map(|s| self.transform(&s.image))
            .collect()
    }

    /// `mean + componentsᵀ · y`.
    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n_components() {
            return Err(Error::shape(self.n_components(), y.len()));
        }
        let y = DVector::from_column_slice(y);
        let back = self.components.tr_mul(&y);
        Ok(back.iter().zip(&self.mean).map(|(a, m)| a + m).collect())
    }
}

/// Fits `n_c` components to the rows of `data` (`N × D`).
pub fn fit_matrix(data: &DMatrix<f64>, n_c: usize) -> Result<PcaModel> {
    fit_matrix_with(data, n_c, 0, FeatureSet::Polarization)
}

fn fit_matrix_with(
    data: &DMatrix<f64>,
    n_c: usize,
    resolution: usize,
    features: FeatureSet,
) -> Result<PcaModel> {
    let (n, d) = data.shape();
    if n_c == 0 || n_c > n.min(d) {
        return Err(Error::domain(format!(
            "n_c = {n_c} must lie in 1..={} for {n} samples of dimension {d}",
            n.min(d)
        )));
    }
    let mean: Vec<f64> = (0..d).map(|j| data.column(j).mean()).collect();
    let mut centred = data.clone();
    for (j, m) in mean.iter().enumerate() {
        centred.column_mut(j).add_scalar_mut(-m);
    }
    let denom = (n.max(2) - 1) as f64;
    let total_variance = centred.norm_squared() / denom;

    let mut components = DMatrix::<f64>::zeros(n_c, d);
    let mut eigen_values = Vec::with_capacity(n_c);
    if n <= d {
        let gram = &centred * centred.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        let top = eig.eigenvalues[order[0]].max(0.0);
        for (row, &k) in order.iter().take(n_c).enumerate() {
            let lambda = eig.eigenvalues[k].max(0.0);
            eigen_values.push(lambda);
            if lambda > 1e-20 * top.max(1e-300) && lambda > 0.0 {
                let u = eig.eigenvectors.column(k);
                let v = centred.tr_mul(&u) / lambda.sqrt();
                components.row_mut(row).copy_from(&v.transpose());
            }
        }
    } else {
        let cov = centred.tr_mul(&centred);
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        for (row, &k) in order.iter().take(n_c).enumerate() {
            eigen_values.push(eig.eigenvalues[k].max(0.0));
            components
                .row_mut(row)
                .copy_from(&eig.eigenvectors.column(k).transpose());
        }
    }
    orthonormalize_rows(&mut components);
    for mut row in components.row_iter_mut() {
        // sign convention: the largest-magnitude entry is positive
        let (mut best, mut val) = (0.0f64, 0.0f64);
        for &x in row.iter() {
            if x.abs() > best {
                best = x.abs();
                val = x;
            }
        }
        if val < 0.0 {
            row.neg_mut();
        }
    }
    let explained_variance = eigen_values.iter().map(|l| l / denom).collect();
    PcaModel::from_parts(
        mean,
        components,
        explained_variance,
        total_variance,
        resolution,
        features,
    )
}

fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Two passes of modified Gram-Schmidt; rows that vanish (null directions
/// of rank-deficient data) are completed from the standard basis.
fn orthonormalize_rows(m: &mut DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let mut basis_next = 0usize;
    for i in 0..rows {
        let mut attempts = 0;
        loop {
            for _ in 0..2 {
                for j in 0..i {
                    let dot = m.row(i).dot(&m.row(j));
                    let rj = m.row(j).into_owned();
                    let mut ri = m.row_mut(i);
                    ri -= rj * dot;
                }
            }
            let norm = m.row(i).norm();
            if norm > 1e-8 {
                m.row_mut(i).scale_mut(1.0 / norm);
                break;
            }
            attempts += 1;
            assert!(attempts <= cols, "cannot complete an orthonormal basis");
            m.row_mut(i).fill(0.0);
            m[(i, basis_next % cols)] = 1.0;
            basis_next += 1;
        }
    }
}

/// Fits PCA to the flattened images of a dataset.
pub fn pca_fit(data: &Dataset, n_c: usize, features: FeatureSet) -> Result<PcaModel> {
    let res = data.resolution();
    let d = features.planes() * res * res;
    let n = data.len();
    if n == 0 {
        return Err(Error::domain("cannot fit PCA to an empty dataset"));
    }
    let mut matrix = DMatrix::<f64>::zeros(n, d);
    for (i, img) in data.images().enumerate() {
        let row = flatten(img, features);
        for (j, v) in row.into_iter().enumerate() {
            matrix[(i, j)] = v;
        }
    }
    fit_matrix_with(&matrix, n_c, res, features)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        let bins = bins.max(1);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            let k = (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1);
            counts[k as usize] += 1;
        }
        Self { edges, counts }
    }

    /// CSV with columns `lo,hi,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lo,hi,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[k], self.edges[k + 1], c));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadiiStats {
    pub center: Vector3<f64>,
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
}

impl RadiiStats {
    /// Coefficient of variation `std / mean`.
    pub fn relative_spread(&self) -> f64 {
        self.std / self.mean
    }
}

pub const DEFAULT_RADII_BINS: usize = 30;

/// Distances of 3-D points from `center` (the centroid when `None`).
pub fn radii_stats(
    points: &[Vector3<f64>],
    center: Option<Vector3<f64>>,
    bins: usize,
) -> Result<RadiiStats> {
    if points.len() < 2 {
        return Err(Error::domain("radii statistics need at least two points"));
    }
    let n = points.len() as f64;
    let center =
        center.unwrap_or_else(|| points.iter().fold(Vector3::zeros(), |a, p| a + p) / n);
    let radii: Vec<f64> = points.iter().map(|p| (p - center).norm()).collect();
    let mean = radii.iter().sum::<f64>() / n;
    let std = (radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let lo = radii.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = radii.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(RadiiStats {
        center,
        mean,
        std,
        histogram: Histogram::new(&radii, bins, lo, hi),
    })
}

/// First three coordinates of each reduced vector.
pub fn leading3(points: &[Vec<f64>]) -> Vec<Vector3<f64>> {
    points
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn orthonormality_error(m: &PcaModel) -> f64 {
        let g = m.components() * m.components().transpose();
        (g - DMatrix::identity(m.n_components(), m.n_components())).amax()
    }

    #[test]
    fn exact_low_rank_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let coeffs = random_matrix(&mut rng, 40, 3);
        let basis = random_matrix(&mut rng, 3, 25);
        let offset = random_matrix(&mut rng, 1, 25);
        let mut data = &coeffs * &basis;
        for mut row in data.row_iter_mut() {
            row += &offset;
        }
        let model = fit_matrix(&data, 5).unwrap();
        assert!(orthonormality_error(&model) < 1e-8);
        let ev = model.explained_variance();
        assert!(ev[3] < 1e-9 * ev[0] && ev[4] < 1e-9 * ev[0]);
        let m3 = model.truncated(3).unwrap();
        for row in data.row_iter() {
            let x: Vec<f64> = row.iter().copied().collect();
            let back = m3.reconstruct(&m3.transform_vec(&x).unwrap()).unwrap();
            for (a, b) in x.iter().zip(&back) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-8);
            }
        }
        assert_abs_diff_eq!(m3.cumulative_share(3), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn tall_data_uses_covariance_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random_matrix(&mut rng, 60, 4);
        let model = fit_matrix(&data, 4).unwrap();
        assert!(orthonormality_error(&model) < 1e-8);
        let ev = model.explained_variance();
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
        assert_abs_diff_eq!(ev.iter().sum::<f64>(), model.total_variance(), epsilon = 1e-9);
    }

    #[test]
    fn gram_and_covariance_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_matrix(&mut rng, 12, 10);
        let a = fit_matrix(&data, 4).unwrap();
        // zero-padding the features pushes the fit down the Gram route
        let wide = data.clone().resize_horizontally(12, 0.0);
        let b = fit_matrix(&wide, 4).unwrap();
        for k in 0..4 {
            assert_abs_diff_eq!(a.explained_variance()[k], b.explained_variance()[k], epsilon = 1e-9);
            let dot: f64 = (0..10).map(|j| a.components()[(k, j)] * b.components()[(k, j)]).sum();
            assert_abs_diff_eq!(dot.abs(), 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn single_component_finds_cluster_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let axis = DVector::from_fn(30, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        let data = DMatrix::from_fn(80, 30, |i, j| {
            let side = if i % 2 == 0 { 5.0 } else { -5.0 };
            side * axis[j] + 0.1 * rng.sample::<f64, _>(StandardNormal)
        });
        let model = fit_matrix(&data, 1).unwrap();
        let cos: f64 = (0..30).map(|j| model.components()[(0, j)] * axis[j]).sum();
        assert!(cos.abs() > 0.999, "{cos}");
    }

    #[test]
    fn complete_basis_reconstructs_training_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_matrix(&mut rng, 10, 50);
        let model = fit_matrix(&data, 9).unwrap();
        for row in data.row_iter() {
            let x: Vec<f64> = row.iter().copied().collect();
            let back = model.reconstruct(&model.transform_vec(&x).unwrap()).unwrap();
            for (a, b) in x.iter().zip(&back) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
        // asking for the null direction as well still yields an orthonormal set
        let full = fit_matrix(&data, 10).unwrap();
        assert!(orthonormality_error(&full) < 1e-8);
    }

    #[test]
    fn mean_maps_to_origin_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_matrix(&mut rng, 20, 8);
        let model = fit_matrix(&data, 3).unwrap();
        let y = model.transform_vec(model.mean()).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
        assert!(model.transform_vec(&[0.0; 7]).is_err());
        assert!(fit_matrix(&data, 9).is_err());
        assert!(fit_matrix(&data, 0).is_err());
    }

    #[test]
    fn reconstruction_error_falls_with_more_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = random_matrix(&mut rng, 15, 30);
        let full = fit_matrix(&data, 14).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..=14 {
            let m = full.truncated(k).unwrap();
            let mut err = 0.0;
            for row in data.row_iter() {
                let x: Vec<f64> = row.iter().copied().collect();
                let back = m.reconstruct(&m.transform_vec(&x).unwrap()).unwrap();
                err += x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
            assert!(err <= last + 1e-9);
            last = err;
        }
        assert!(last < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn transform_reconstruct_is_a_projection(seed in 0u64..200, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_matrix(&mut rng, 8, 12);
            let m = fit_matrix(&data, k).unwrap();
            let x: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
            let once = m.reconstruct(&m.transform_vec(&x).unwrap()).unwrap();
            let twice = m.reconstruct(&m.transform_vec(&once).unwrap()).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                proptest::prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn radii_of_exact_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = Vector3::new(1.0, -2.0, 0.5);
        let pts: Vec<_> = (0..500)
            .map(|_| {
                let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
                c + 2.0 * v
            })
            .collect();
        let s = radii_stats(&pts, Some(c), DEFAULT_RADII_BINS).unwrap();
        assert_abs_diff_eq!(s.mean, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.std, 0.0, epsilon = 1e-12);
        assert_eq!(s.histogram.counts.iter().sum::<usize>(), 500);
        assert_eq!(s.histogram.counts.len(), 30);
        assert!(radii_stats(&pts[..1], None, 30).is_err());
    }
}
