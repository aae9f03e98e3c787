//! Bloch-vector estimates from images via the leading three principal
//! components.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::pca::{Histogram, PcaModel};
use crate::sphere::{align_to_sphere, fidelity, BlochVector, SphereAlignment};

/// Leading three reduced coordinates of every image.
pub fn sphere_points(pca: &PcaModel, data: &Dataset) -> Result<Vec<Vector3<f64>>> {
    if pca.n_components() < 3 {
        return Err(Error::domain(format!(
            "sphere reconstruction needs 3 components, the model has {}",
            pca.n_components()
        )));
    }
    let pca3 = pca.truncated(3)?;
    data.samples()
        .par_iter()
        .map(|s| {
            let y = pca3.transform(&s.image)?;
            Ok(Vector3::new(y[0], y[1], y[2]))
        })
        .collect()
}

fn true_vectors(data: &Dataset) -> Result<Vec<BlochVector>> {
    data.samples()
        .iter()
        .enumerate()
        .map(|(k, s)| {
            s.angles
                .map(|(t, p)| BlochVector::from_angles(t, p))
                .ok_or_else(|| Error::domain(format!("sample {k} carries no (θ, φ) labels")))
        })
        .collect()
}

/// Fits the similarity transform from reduced space to the Bloch sphere on
/// images with known angles.
pub fn calibrate(pca: &PcaModel, data: &Dataset) -> Result<SphereAlignment> {
    let refs = true_vectors(data)?;
    align_to_sphere(&sphere_points(pca, data)?, &refs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `(θ̂, φ̂)` per image.
    pub estimates: Vec<(f64, f64)>,
    pub fidelities: Vec<f64>,
}

impl Reconstruction {
    pub fn mean_fidelity(&self) -> f64 {
        self.fidelities.iter().sum::<f64>() / self.fidelities.len() as f64
    }

    /// Population standard deviation of the fidelities.
    pub fn std_fidelity(&self) -> f64 {
        let m = self.mean_fidelity();
        (self.fidelities.iter().map(|f| (f - m).powi(2)).sum::<f64>()
            / self.fidelities.len() as f64)
            .sqrt()
    }

    pub fn histogram(&self, bins: usize) -> Histogram {
        let lo = self.fidelities.iter().cloned().fold(f64::INFINITY, f64::min);
        Histogram::new(&self.fidelities, bins, lo.min(1.0), 1.0)
    }

    /// CSV with columns `index,theta_true,phi_true,theta_est,phi_est,fidelity`.
    pub fn to_csv(&self, data: &Dataset) -> String {
        let mut out = String::from("index,theta_true,phi_true,theta_est,phi_est,fidelity\n");
        for (k, ((s, est), f)) in data
            .samples()
            .iter()
            .zip(&self.estimates)
            .zip(&self.fidelities)
            .enumerate()
        {
            let (t, p) = s.angles.unwrap_or((f64::NAN, f64::NAN));
            out.push_str(&format!("{k},{t},{p},{},{},{f}\n", est.0, est.1));
        }
        out
    }
}

/// Projects, aligns and renormalizes each image, then scores the estimate
/// against the generating state.
pub fn reconstruct(
    pca: &PcaModel,
    alignment: &SphereAlignment,
    data: &Dataset,
) -> Result<Reconstruction> {
    let refs = true_vectors(data)?;
    if refs.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let points = sphere_points(pca, data)?;
    let mut estimates = Vec::with_capacity(points.len());
    let mut fidelities = Vec::with_capacity(points.len());
    for (p, truth) in points.iter().zip(&refs) {
        let est = alignment.estimate(p);
        estimates.push(est.angles());
        fidelities.push(fidelity(&est, truth)?);
    }
    Ok(Reconstruction {
        estimates,
        fidelities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_class15, generate_sphere};
    use crate::noise::NoiseConfig;
    use crate::optics::GridSpec;
    use crate::pca::{pca_fit, FeatureSet};

    fn grid() -> GridSpec {
        GridSpec::new(32, 4.0, 1.0).unwrap()
    }

    #[test]
    fn clean_sphere_is_recovered() {
        let calib = generate_sphere(300, &NoiseConfig::none(0), &grid(), 1).unwrap();
        let test = generate_sphere(200, &NoiseConfig::none(0), &grid(), 2).unwrap();
        let pca = pca_fit(&calib, 3, FeatureSet::Polarization).unwrap();
        let align = calibrate(&pca, &calib).unwrap();
        let r = reconstruct(&pca, &align, &test).unwrap();
        assert!(r.mean_fidelity() >= 0.99, "{}", r.mean_fidelity());
        assert_eq!(r.histogram(20).counts.iter().sum::<usize>(), 200);
        // north-hemisphere states stay in the north hemisphere
        for (s, est) in test.samples().iter().zip(&r.estimates) {
            if s.angles.unwrap().0 < 0.2 {
                assert!(est.0 <= std::f64::consts::FRAC_PI_2);
            }
        }
    }

    #[test]
    fn unlabelled_data_is_rejected() {
        let (train, _) = generate_class15(1, 1, &NoiseConfig::none(0), &grid(), 1).unwrap();
        let pca = pca_fit(&train, 3, FeatureSet::Polarization).unwrap();
        assert!(calibrate(&pca, &train).is_err());
    }
}
