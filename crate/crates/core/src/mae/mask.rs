use rand::seq::SliceRandom;

use super::config::masked_count;
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Partition of patch indices into visible and masked sets.
///
/// `shuffle_perm` is the random permutation the mask was drawn from: its
/// first `visible.len()` entries are the visible patches in the order the
/// encoder sees them, the rest are masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    visible: Vec<usize>,
    masked: Vec<usize>,
    shuffle_perm: Vec<usize>,
}

impl MaskSet {
    pub fn from_permutation(shuffle_perm: Vec<usize>, n_masked: usize) -> Result<Self> {
        let n = shuffle_perm.len();
        let mut seen = vec![false; n];
        for &p in &shuffle_perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Contract(format!(
                    "shuffle permutation of length {n} is not a permutation"
                )));
            }
        }
        if n_masked == 0 || n_masked >= n {
            return Err(Error::Contract(format!(
                "mask must hide at least one and keep at least one of {n} patches, hides {n_masked}"
            )));
        }
        let n_vis = n - n_masked;
        let mut visible = shuffle_perm[..n_vis].to_vec();
        let mut masked = shuffle_perm[n_vis..].to_vec();
        visible.sort_unstable();
        masked.sort_unstable();
        Ok(Self {
            visible,
            masked,
            shuffle_perm,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.shuffle_perm.len()
    }

    /// Sorted visible indices.
    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    /// Sorted masked indices.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn shuffle_perm(&self) -> &[usize] {
        &self.shuffle_perm
    }

    /// Visible patches in encoder order.
    pub fn keep_order(&self) -> &[usize] {
        &self.shuffle_perm[..self.visible.len()]
    }

    /// `restore[p]` is the position of patch `p` in the shuffled sequence.
    pub fn restore_order(&self) -> Vec<usize> {
        let mut restore = vec![0; self.shuffle_perm.len()];
        for (pos, &p) in self.shuffle_perm.iter().enumerate() {
            restore[p] = pos;
        }
        restore
    }

    pub fn check_patches(&self, n_p: usize) -> Result<()> {
        if self.n_patches() != n_p {
            return Err(Error::Contract(format!(
                "mask covers {} patches, model has {n_p}",
                self.n_patches()
            )));
        }
        Ok(())
    }
}

/// Uniformly random mask hiding `round(mask_ratio * n_p)` patches.
pub fn random_mask(n_p: usize, mask_ratio: f64, seed: u64) -> Result<MaskSet> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::Contract(format!(
            "mask ratio {mask_ratio} outside (0, 1)"
        )));
    }
    let n_masked = masked_count(n_p, mask_ratio);
    let mut perm: Vec<usize> = (0..n_p).collect();
    perm.shuffle(&mut rng_from(seed, &[]));
    MaskSet::from_permutation(perm, n_masked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_split() {
        let m = random_mask(250, 0.8, 3).unwrap();
        assert_eq!(m.masked().len(), 200);
        assert_eq!(m.visible().len(), 50);
        let mut all: Vec<usize> = m.visible().iter().chain(m.masked()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..250).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            random_mask(64, 0.8, 9).unwrap(),
            random_mask(64, 0.8, 9).unwrap()
        );
        assert_ne!(
            random_mask(64, 0.8, 9).unwrap(),
            random_mask(64, 0.8, 10).unwrap()
        );
    }

    #[test]
    fn degenerate_ratios_rejected() {
        assert!(random_mask(10, 0.01, 0).is_err());
        assert!(random_mask(10, 0.99, 0).is_err());
        assert!(random_mask(10, 1.0, 0).is_err());
        assert!(random_mask(10, 0.0, 0).is_err());
    }

    #[test]
    fn restore_inverts_permutation() {
        let m = random_mask(16, 0.5, 1).unwrap();
        let r = m.restore_order();
        for (p, &pos) in r.iter().enumerate() {
            assert_eq!(m.shuffle_perm()[pos], p);
        }
    }
}
