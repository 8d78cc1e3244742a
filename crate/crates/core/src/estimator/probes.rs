use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::partition::ParamPartition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Independent ±1 coordinates.
    Rademacher,
    /// Independent standard normal coordinates.
    Gaussian,
}

/// `count` reproducible probe vectors with `E[z] = 0`, `E[zzᵀ] = I`.
///
/// Each `(probe, layer)` block comes from its own ChaCha stream keyed by
/// `(seed, layer, stream)` with the probe index as stream id, so any block can
/// be regenerated on its own and the layer-`ℓ` block of a full probe is the
/// same vector as the block-mode probe for `ℓ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeBatch {
    pub seed: u64,
    /// Secondary key, e.g. the training step of a snapshot.
    pub stream: u64,
    pub count: usize,
    pub kind: ProbeKind,
}

impl ProbeBatch {
    pub fn rademacher(seed: u64, count: usize) -> Self {
        Self {
            seed,
            stream: 0,
            count,
            kind: ProbeKind::Rademacher,
        }
    }

    pub fn gaussian(seed: u64, count: usize) -> Self {
        Self {
            seed,
            stream: 0,
            count,
            kind: ProbeKind::Gaussian,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    fn rng(&self, probe: usize, layer: usize) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(layer as u64).to_le_bytes());
        key[16..24].copy_from_slice(&self.stream.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(probe as u64);
        rng
    }

    /// Probe `probe` restricted to a block of `len` coordinates belonging to `layer`.
    pub fn block(&self, probe: usize, layer: usize, len: usize) -> Vec<f64> {
        let mut rng = self.rng(probe, layer);
        match self.kind {
            ProbeKind::Rademacher => {
                let mut out = Vec::with_capacity(len);
                while out.len() < len {
                    let bits = rng.next_u64();
                    let take = (len - out.len()).min(64);
                    out.extend((0..take).map(|b| if bits >> b & 1 == 1 { 1.0 } else { -1.0 }));
                }
                out
            }
            ProbeKind::Gaussian => (0..len).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    /// Probe `probe` over every group of `partition`.
    pub fn full(&self, probe: usize, partition: &ParamPartition) -> Vec<f64> {
        let mut out = Vec::with_capacity(partition.total());
        for (layer, g) in partition.groups().iter().enumerate() {
            out.extend(self.block(probe, layer, g.len));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_keys_give_identical_probes() {
        let p = ProbeBatch::rademacher(11, 4);
        assert_eq!(p.block(2, 1, 100), p.block(2, 1, 100));
        assert_ne!(p.block(2, 1, 100), p.block(3, 1, 100));
        assert_ne!(p.block(2, 1, 100), p.block(2, 0, 100));
        assert_ne!(p.block(2, 1, 100), p.with_stream(1).block(2, 1, 100));
        assert!(p.block(0, 0, 130).iter().all(|x| x.abs() == 1.0));
    }

    #[test]
    fn full_probe_concatenates_blocks() {
        let part = ParamPartition::from_sizes([("a", 3), ("b", 70)]);
        let p = ProbeBatch::gaussian(5, 1);
        let z = p.full(0, &part);
        assert_eq!(&z[..3], p.block(0, 0, 3).as_slice());
        assert_eq!(&z[3..], p.block(0, 1, 70).as_slice());
    }

    #[test]
    fn empirical_moments() {
        let p = ProbeBatch::rademacher(1, 1);
        for kind in [ProbeKind::Rademacher, ProbeKind::Gaussian] {
            let p = ProbeBatch { kind, ..p };
            let n = 20_000;
            let (mut m, mut cross, mut sq) = (0.0, 0.0, 0.0);
            for k in 0..n {
                let z = p.block(k, 0, 2);
                m += z[0];
                cross += z[0] * z[1];
                sq += z[0] * z[0];
            }
            let n = n as f64;
            // 5σ bands for E[z]=0, E[z1 z2]=0, E[z1²]=1
            assert!((m / n).abs() < 5.0 / n.sqrt());
            assert!((cross / n).abs() < 5.0 / n.sqrt());
            assert!((sq / n - 1.0).abs() < 5.0 * 2f64.sqrt() / n.sqrt());
        }
    }
}
