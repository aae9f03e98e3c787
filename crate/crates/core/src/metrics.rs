//! Confusion matrices and accuracy summaries.

use crate::dataset::{Dataset, LabelSpec, Task};
use crate::error::{Error, Result};
use crate::optics::StokesImage;
use crate::sphere::{self, SECTOR_COUNT};

/// Anything that maps a Stokes image to a class index.
pub trait Classifier: Sync {
    fn class_count(&self) -> usize;
    fn classify(&self, img: &StokesImage) -> Result<usize>;
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        Self {
            counts: vec![vec![0; class_count]; class_count],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], class_count: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(truth.len(), predicted.len()));
        }
        let mut m = Self::new(class_count);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.class_count();
        if truth >= c || predicted >= c {
            return Err(Error::domain(format!(
                "class pair ({truth}, {predicted}) outside 0..{c}"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.class_count()).map(|c| self.counts[c][c]).sum()
    }

    /// Fraction correct per class; `None` for classes without samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect()
    }

    /// Mean of the per-class accuracies over classes that have samples.
    pub fn average_accuracy(&self) -> f64 {
        let acc: Vec<f64> = self.per_class_accuracy().into_iter().flatten().collect();
        if acc.is_empty() {
            0.0
        } else {
            acc.iter().sum::<f64>() / acc.len() as f64
        }
    }

    /// Fraction of all samples classified correctly.
    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.correct() as f64 / total as f64
        }
    }

    /// Share of misclassifications that land in a sector one φ-step away
    /// within the same θ band. `None` unless this is a 26-sector matrix with
    /// at least one error.
    pub fn phi_adjacent_error_share(&self) -> Option<f64> {
        if self.class_count() != SECTOR_COUNT {
            return None;
        }
        let mut errors = 0u64;
        let mut adjacent = 0u64;
        for t in 0..SECTOR_COUNT {
            for p in 0..SECTOR_COUNT {
                if t == p {
                    continue;
                }
                let n = self.counts[t][p];
                errors += n;
                if sphere::phi_adjacent(t, p) {
                    adjacent += n;
                }
            }
        }
        (errors > 0).then(|| adjacent as f64 / errors as f64)
    }

    /// Aligned text table with class names as headers and per-class accuracy
    /// in the last column.
    pub fn to_text(&self, spec: Option<&LabelSpec>) -> String {
        let c = self.class_count();
        let names: Vec<String> = (0..c)
            .map(|k| spec.map_or_else(|| k.to_string(), |s| s.class_name(k)))
            .collect();
        let width = names
            .iter()
            .map(String::len)
            .chain(self.counts.iter().flatten().map(|n| n.to_string().len()))
            .max()
            .unwrap_or(1)
            .max(4);
        let mut out = format!("{:>width$} |", "true");
        for n in &names {
            out.push_str(&format!(" {n:>width$}"));
        }
        out.push_str(" |    acc\n");
        out.push_str(&"-".repeat(out.len() - 1));
        out.push('\n');
        let acc = self.per_class_accuracy();
        for (k, row) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:>width$} |", names[k]));
            for n in row {
                out.push_str(&format!(" {n:>width$}"));
            }
            match acc[k] {
                Some(a) => out.push_str(&format!(" | {a:.4}\n")),
                None => out.push_str(" |      -\n"),
            }
        }
        out.push_str(&format!(
            "average accuracy {:.6}  overall accuracy {:.6}  ({} samples)\n",
            self.average_accuracy(),
            self.overall_accuracy(),
            self.total()
        ));
        out
    }

    /// CSV: header `true\predicted,<names>...`, one row per true class.
    pub fn to_csv(&self, spec: Option<&LabelSpec>) -> String {
        let c = self.class_count();
        let name = |k: usize| {
            let n = spec.map_or_else(|| k.to_string(), |s| s.class_name(k));
            if n.contains(',') {
                format!("\"{n}\"")
            } else {
                n
            }
        };
        let mut out = String::from("true\\predicted");
        for k in 0..c {
            out.push(',');
            out.push_str(&name(k));
        }
        out.push('\n');
        for (k, row) in self.counts.iter().enumerate() {
            out.push_str(&name(k));
            for n in row {
                out.push_str(&format!(",{n}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Classifies every image of `data` and tabulates the results.
pub fn confusion_matrix(model: &dyn Classifier, data: &Dataset) -> Result<ConfusionMatrix> {
    use rayon::prelude::*;
    if data.label_spec().task() == Task::Regression {
        return Err(Error::domain("a regression dataset has no class labels"));
    }
    if model.class_count() != data.class_count() {
        return Err(Error::shape(
            format!("{} classes", model.class_count()),
            data.class_count(),
        ));
    }
    let predicted = data
        .samples()
        .par_iter()
        .map(|s| model.classify(&s.image))
        .collect::<Result<Vec<_>>>()?;
    ConfusionMatrix::from_predictions(&data.labels(), &predicted, model.class_count())
}
