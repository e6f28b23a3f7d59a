use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Integer split geometry for one image side.
///
/// Patches are `patch` pixels square and start at `starts[i]` along each axis;
/// adjacent patches share `patch - (starts[i+1] - starts[i])` pixels. Montage
/// slots are `slot = side / m` pixels square.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub m: usize,
    pub side: usize,
    pub overlap: usize,
    pub patch: usize,
    pub starts: Vec<usize>,
    pub slot: usize,
}

impl GridSpec {
    pub fn slots(&self) -> usize {
        self.m * self.m
    }

    /// Pixel overlap actually realised between patches `i` and `i + 1`.
    pub fn realised_overlap(&self, i: usize) -> isize {
        self.patch as isize - (self.starts[i + 1] as isize - self.starts[i] as isize)
    }
}

/// Computes the split geometry for an `side × side` image cut into `m × m`
/// patches whose neighbours overlap by `ratio · side` pixels.
///
/// `overlap = round(ratio·side)`, `patch = ceil((side + (m−1)·overlap) / m)` and
/// `starts[i] = round(i·(side − patch)/(m − 1))`, so the last patch always ends
/// exactly at the image border.
pub fn compute_grid(side: usize, m: usize, ratio: f64) -> Result<GridSpec> {
    if m < 2 {
        return Err(Error::Invalid(format!("m must be at least 2, got {m}")));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("overlap ratio must lie in [0, 1), got {ratio}")));
    }
    if !side.is_multiple_of(m) {
        return Err(Error::Invalid(format!("image side {side} is not divisible by m = {m}")));
    }
    let overlap = (ratio * side as f64).round() as usize;
    let patch = (side + (m - 1) * overlap).div_ceil(m);
    if patch >= side {
        return Err(Error::Invalid(format!(
            "overlap ratio {ratio} is too large for m = {m}: patch side {patch} >= image side {side}"
        )));
    }
    let span = side - patch;
    // round-half-up of i·span/(m−1) in integer arithmetic
    let starts: Vec<usize> = (0..m)
        .map(|i| (2 * i * span + (m - 1)) / (2 * (m - 1)))
        .collect();
    if starts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid(format!(
            "image side {side} too small for m = {m} at overlap ratio {ratio}"
        )));
    }
    Ok(GridSpec {
        m,
        side,
        overlap,
        patch,
        starts,
        slot: side / m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        let g = compute_grid(224, 2, 0.3).unwrap();
        assert_eq!((g.overlap, g.patch, g.slot), (67, 146, 112));
        assert_eq!(g.starts, vec![0, 78]);

        let g = compute_grid(224, 2, 0.0).unwrap();
        assert_eq!((g.overlap, g.patch, g.slot), (0, 112, 112));
        assert_eq!(g.starts, vec![0, 112]);

        let g = compute_grid(32, 2, 0.3).unwrap();
        assert_eq!((g.overlap, g.patch, g.slot), (10, 21, 16));
        assert_eq!(g.starts, vec![0, 11]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(compute_grid(30, 4, 0.3).is_err());
        assert!(compute_grid(32, 1, 0.3).is_err());
        assert!(compute_grid(32, 2, 1.0).is_err());
        assert!(compute_grid(32, 2, -0.1).is_err());
        // patch side would reach the full image
        assert!(compute_grid(32, 2, 0.99).is_err());
    }

    proptest! {
        #[test]
        fn geometry_invariants(m in 2usize..6, slot in 4usize..40, ratio in 0.0f64..0.6) {
            let side = m * slot;
            if let Ok(g) = compute_grid(side, m, ratio) {
                prop_assert_eq!(g.starts[0], 0);
                prop_assert_eq!(g.starts[m - 1] + g.patch, side);
                for i in 0..m - 1 {
                    prop_assert!(g.starts[i + 1] > g.starts[i]);
                    let o = g.realised_overlap(i);
                    prop_assert!(o >= 0);
                    prop_assert!((o - g.overlap as isize).abs() <= 1, "overlap {} vs {}", o, g.overlap);
                }
            }
        }
    }
}
