//! Exact cardinality of the cell-level search space.

use num_bigint::BigUint;

/// Number of distinct cell-level architectures, in exact integer
/// arithmetic:
///
/// `a^normal_edges * (b^special_edges + c^special_edges + d^special_edges)`
///
/// with `sizes = (a, b, c, d)`: `a` candidates per non-special edge shared
/// by all three cell types, and `b`, `c`, `d` candidates per special edge
/// of the three types. With zero special edges each power is the empty
/// product, so the special factor degenerates to 3 (one empty product per
/// cell type). All sizes must be >= 1.
pub fn count_cell_space(
    normal_edges: u32,
    special_edges: u32,
    sizes: (u64, u64, u64, u64),
) -> BigUint {
    assert!(
        sizes.0 >= 1 && sizes.1 >= 1 && sizes.2 >= 1 && sizes.3 >= 1,
        "candidate-set sizes must be >= 1"
    );
    let normal_term = BigUint::from(sizes.0).pow(normal_edges);
    let special_term = BigUint::from(sizes.1).pow(special_edges)
        + BigUint::from(sizes.2).pow(special_edges)
        + BigUint::from(sizes.3).pow(special_edges);
    normal_term * special_term
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: literally count assignments with an odometer
    /// over per-edge choices, one run per cell type.
    fn enumerate_naive(normal_edges: u32, special_edges: u32, sizes: (u64, u64, u64, u64)) -> u64 {
        let mut total = 0u64;
        for &special_size in &[sizes.1, sizes.2, sizes.3] {
            let radices: Vec<u64> = std::iter::repeat(sizes.0)
                .take(normal_edges as usize)
                .chain(std::iter::repeat(special_size).take(special_edges as usize))
                .collect();
            if radices.is_empty() {
                total += 1;
                continue;
            }
            let mut digits = vec![0u64; radices.len()];
            'odometer: loop {
                total += 1;
                for i in 0..digits.len() {
                    digits[i] += 1;
                    if digits[i] < radices[i] {
                        continue 'odometer;
                    }
                    digits[i] = 0;
                }
                break;
            }
        }
        total
    }

    #[test]
    fn exact_value_for_the_full_cell() {
        let n = count_cell_space(10, 4, (7, 6, 4, 7));
        assert_eq!(n.to_string(), "1116624659297");
    }

    #[test]
    fn three_singleton_cell_types() {
        assert_eq!(count_cell_space(0, 1, (1, 1, 1, 1)).to_string(), "3");
    }

    #[test]
    fn zero_special_edges_degenerate_to_three_empty_products() {
        assert_eq!(count_cell_space(1, 0, (5, 9, 9, 9)).to_string(), "15");
        let n = count_cell_space(14, 0, (6, 1, 1, 1));
        assert_eq!(n, BigUint::from(6u64).pow(14) * 3u64);
        assert_eq!(n.to_string(), "235092492288");
    }

    #[test]
    fn matches_naive_enumeration_on_small_spaces() {
        let cases = [
            (0u32, 0u32, (1u64, 1u64, 1u64, 1u64)),
            (0, 1, (1, 1, 1, 1)),
            (1, 0, (5, 1, 1, 1)),
            (3, 2, (4, 3, 2, 5)),
            (5, 2, (3, 6, 4, 7)),
            (2, 4, (2, 3, 2, 4)),
            (6, 1, (3, 2, 5, 4)),
            (4, 4, (2, 2, 2, 2)),
            (10, 0, (2, 1, 1, 1)),
        ];
        for (ne, se, sizes) in cases {
            let exact = count_cell_space(ne, se, sizes);
            let naive = enumerate_naive(ne, se, sizes);
            assert!(naive <= 1_000_000, "oracle should stay small");
            assert_eq!(exact, BigUint::from(naive), "case ({ne}, {se}, {sizes:?})");
        }
    }
}
