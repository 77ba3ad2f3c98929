//! Rotary position embedding: pair `r` of a head vector at position `t` is
//! rotated by `t * base^(-2r/d)`. Nothing here depends on a maximum length,
//! so any sequence length can be encoded with the same weights.

use crate::error::{Error, Result};
use crate::numkernel::{kernels, RopeTable, Tensor};

/// `[d/2]` frequencies `base^(-2r/d)`; the first is always exactly 1.
pub fn rope_frequencies(head_dim: usize, base: f64) -> Result<Tensor> {
    Ok(Tensor::vector(kernels::rope_frequencies(head_dim, base)?))
}

/// Rotates the (even, odd) pairs of every head vector in `x: [.., L, d]`.
pub fn apply_rope(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 || x.shape()[r - 2] != positions.len() {
        return Err(Error::Shape {
            op: "apply_rope",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len()],
        });
    }
    let table = RopeTable::new(positions, x.shape()[r - 1], base)?;
    let mut out = x.clone();
    table.rotate(out.data_mut(), false);
    Ok(out)
}

/// Positions `0..len` of a flattened token sequence.
pub fn positions(len: usize) -> Vec<usize> {
    (0..len).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn frequencies_examples() {
        let w = rope_frequencies(4, 1000.0).unwrap();
        assert_eq!(w.data()[0], 1.0);
        assert!((w.data()[1] - 0.031_622_776_601_683_8).abs() < 1e-12);
        assert_eq!(rope_frequencies(2, 7.5).unwrap().data(), &[1.0]);
        assert_eq!(rope_frequencies(2, 1e6).unwrap().data(), &[1.0]);
        let w = rope_frequencies(16, 1000.0).unwrap();
        assert!(w.data().windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn odd_dim_is_a_config_error() {
        assert!(matches!(rope_frequencies(3, 1000.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_position_is_identity() {
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap();
        let y = apply_rope(&x, &[0, 0, 0], 1000.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn quarter_turn_maps_x_y_to_minus_y_x() {
        // rotation-matrix oracle for angle pi/2
        let (x, y) = (0.3, -1.7);
        let table = RopeTable::from_angles(1, 2, vec![std::f64::consts::FRAC_PI_2]).unwrap();
        let mut v = vec![x, y];
        table.rotate(&mut v, false);
        let (c, s) = (0.0_f64, 1.0_f64);
        assert!((v[0] - (c * x - s * y)).abs() < 1e-12);
        assert!((v[1] - (s * x + c * y)).abs() < 1e-12);
        assert!((v[0] + y).abs() < 1e-12 && (v[1] - x).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn relative_shift_invariance(
            q in prop::collection::vec(-1.0f64..1.0, 8),
            k in prop::collection::vec(-1.0f64..1.0, 8),
            t in 0usize..500, s in 0usize..500, shift in 0usize..500,
        ) {
            let qt = Tensor::new(vec![1, 8], q).unwrap();
            let kt = Tensor::new(vec![1, 8], k).unwrap();
            let a = dot(apply_rope(&qt, &[t], 1000.0).unwrap().data(), apply_rope(&kt, &[s], 1000.0).unwrap().data());
            let b = dot(
                apply_rope(&qt, &[t + shift], 1000.0).unwrap().data(),
                apply_rope(&kt, &[s + shift], 1000.0).unwrap().data(),
            );
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn pair_norms_are_preserved(x in prop::collection::vec(-10.0f64..10.0, 12), t in 0usize..4096) {
            let xt = Tensor::new(vec![1, 12], x.clone()).unwrap();
            let y = apply_rope(&xt, &[t], 1000.0).unwrap();
            for r in 0..6 {
                let before = x[2 * r].hypot(x[2 * r + 1]);
                let after = y.data()[2 * r].hypot(y.data()[2 * r + 1]);
                prop_assert!((before - after).abs() < 1e-12 * before.max(1.0));
            }
        }
    }
}
