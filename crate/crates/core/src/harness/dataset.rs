use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

/// Gaussian-blob classification data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    /// Standard deviation of the class means around the origin.
    pub separation: f64,
    /// Within-class standard deviation.
    pub spread: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 64,
            test_per_class: 64,
            input_dim: 8,
            separation: 1.0,
            spread: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub classes: usize,
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<usize>,
    /// Labels before noise injection.
    pub clean_y: Vec<usize>,
    /// `corrupted[i]` iff `train_y[i] != clean_y[i]`.
    pub corrupted: Vec<bool>,
    pub test_x: Vec<Vec<f64>>,
    pub test_y: Vec<usize>,
}

pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Dataset(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.train_per_class == 0 || spec.input_dim == 0 {
        return Err(Error::Dataset("empty training set or zero input dimension".into()));
    }
    if !(spec.spread >= 0.0 && spec.separation >= 0.0) {
        return Err(Error::Dataset("negative spread or separation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.input_dim)
                .map(|_| spec.separation * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let draw = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        means[c]
            .iter()
            .map(|m| m + spec.spread * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let mut train: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut test: Vec<(Vec<f64>, usize)> = Vec::new();
    for c in 0..spec.classes {
        for _ in 0..spec.train_per_class {
            train.push((draw(c, &mut rng), c));
        }
        for _ in 0..spec.test_per_class {
            test.push((draw(c, &mut rng), c));
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    let (train_x, train_y): (Vec<_>, Vec<_>) = train.into_iter().unzip();
    let (test_x, test_y): (Vec<_>, Vec<_>) = test.into_iter().unzip();
    Ok(Dataset {
        classes: spec.classes,
        corrupted: vec![false; train_y.len()],
        clean_y: train_y.clone(),
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

/// Replaces each training label, with probability `eta`, by a uniform draw
/// over the other classes. Test labels are left alone.
pub fn inject_label_noise(data: &Dataset, eta: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta must lie in [0, 1), got {eta}")));
    }
    let mut out = data.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..out.train_y.len() {
        let flip = rng.random::<f64>() < eta;
        let other = rng.random_range(0..data.classes - 1);
        if flip {
            let clean = data.clean_y[i];
            out.train_y[i] = if other >= clean { other + 1 } else { other };
        } else {
            out.train_y[i] = data.clean_y[i];
        }
        out.corrupted[i] = out.train_y[i] != data.clean_y[i];
    }
    Ok(out)
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn input_dim(&self) -> usize {
        self.train_x.first().map_or(0, Vec::len)
    }

    pub fn train_batch(&self, idx: &[usize]) -> Result<Batch> {
        let xs: Vec<Vec<f64>> = idx.iter().map(|&i| self.train_x[i].clone()).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| self.train_y[i]).collect();
        Batch::classification(&xs, &ys)
    }

    pub fn full_train_batch(&self) -> Result<Batch> {
        Batch::classification(&self.train_x, &self.train_y)
    }

    pub fn test_batch(&self) -> Result<Batch> {
        Batch::classification(&self.test_x, &self.test_y)
    }

    pub fn corrupted_fraction(&self) -> f64 {
        self.corrupted.iter().filter(|&&c| c).count() as f64 / self.corrupted.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = DatasetSpec::default();
        let a = make_dataset(&spec).unwrap();
        assert_eq!(a, make_dataset(&spec).unwrap());
        for c in 0..spec.classes {
            assert_eq!(a.train_y.iter().filter(|&&y| y == c).count(), spec.train_per_class);
        }
        assert!(make_dataset(&DatasetSpec { train_per_class: 0, ..spec.clone() }).is_err());
        assert!(make_dataset(&DatasetSpec { classes: 1, ..spec }).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let d = make_dataset(&DatasetSpec::default()).unwrap();
        assert_eq!(inject_label_noise(&d, 0.0, 3).unwrap(), d);
        assert!(inject_label_noise(&d, 1.0, 3).is_err());
    }

    #[test]
    fn flips_go_to_other_classes_only() {
        let d = make_dataset(&DatasetSpec::default()).unwrap();
        let n = inject_label_noise(&d, 0.5, 1).unwrap();
        assert_eq!(n.test_y, d.test_y);
        for i in 0..n.train_len() {
            assert_eq!(n.corrupted[i], n.train_y[i] != d.train_y[i]);
            assert!(n.train_y[i] < d.classes);
        }
    }
}
