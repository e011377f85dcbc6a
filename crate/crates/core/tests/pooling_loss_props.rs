use ngcg::encoder::HiddenStates;
use ngcg::objective::{info_nce_value, Batch, Direction, TemperatureConfig};
use ngcg::pooling::{pool, PoolingConfig, PoolingStrategy};
use ngcg::Matrix;
use proptest::prelude::*;

const D: usize = 6;

/// `(states, mask)` with at least one valid position; eos is the last valid one.
fn hidden() -> impl Strategy<Value = HiddenStates> {
    (1usize..8).prop_flat_map(|t| {
        (
            prop::collection::vec(-2.0f64..2.0, t * D),
            prop::collection::vec(any::<bool>(), t),
            0..t,
        )
            .prop_map(move |(data, mut mask, forced)| {
                mask[forced] = true;
                let eos_index = mask.iter().rposition(|&m| m).unwrap();
                HiddenStates {
                    states: Matrix::new(t, D, data).unwrap(),
                    mask,
                    eos_index,
                }
            })
    })
}

fn configs(query: &[f64]) -> Vec<PoolingConfig> {
    vec![
        PoolingConfig::new(PoolingStrategy::Eos, D, 0),
        PoolingConfig::new(PoolingStrategy::Average, D, 0),
        PoolingConfig::with_query(Matrix::row_vector(query)).unwrap(),
    ]
}

fn unit_rows(b: usize, d: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), b)
        .prop_filter("non-degenerate rows", |rows| {
            rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        })
        .prop_map(|rows| {
            let unit: Vec<Vec<f64>> = rows
                .into_iter()
                .map(|r| {
                    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    r.into_iter().map(|v| v / n).collect()
                })
                .collect();
            Matrix::from_rows(&unit)
        })
}

fn pair_batch() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..7, 2usize..6).prop_flat_map(|(b, d)| (unit_rows(b, d), unit_rows(b, d)))
}

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    let rows: Vec<&[f64]> = perm.iter().map(|&i| m.row(i)).collect();
    Matrix::from_rows(&rows)
}

fn is_exact_reorder(loss: f64, permuted: f64) -> bool {
    (loss - permuted).abs() <= 1e-12 * loss.abs().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pooled_output_has_unit_norm(h in hidden(), q in prop::collection::vec(-3.0f64..3.0, D)) {
        for cfg in configs(&q) {
            let e = pool(&h, &cfg).unwrap();
            let norm = e.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-12, "{:?}: {norm}", cfg.strategy());
        }
    }

    #[test]
    fn appended_padding_is_invisible(
        h in hidden(),
        q in prop::collection::vec(-3.0f64..3.0, D),
        pad in (1usize..4).prop_flat_map(|rows| prop::collection::vec(-50.0f64..50.0, rows * D)),
    ) {
        let t = h.states.rows();
        let mut data = h.states.data().to_vec();
        data.extend_from_slice(&pad);
        let padded = HiddenStates {
            states: Matrix::new(t + pad.len() / D, D, data).unwrap(),
            mask: h.mask.iter().copied().chain(std::iter::repeat_n(false, pad.len() / D)).collect(),
            eos_index: h.eos_index,
        };
        for cfg in configs(&q).into_iter().skip(1) {
            prop_assert_eq!(pool(&h, &cfg).unwrap(), pool(&padded, &cfg).unwrap());
        }
    }

    #[test]
    fn positive_scaling_leaves_eos_and_average_unchanged(h in hidden(), c in 0.01f64..100.0) {
        let scaled = HiddenStates { states: h.states.scaled(c), ..h.clone() };
        for strategy in [PoolingStrategy::Eos, PoolingStrategy::Average] {
            let cfg = PoolingConfig::new(strategy, D, 0);
            let (a, b) = (pool(&h, &cfg).unwrap(), pool(&scaled, &cfg).unwrap());
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_is_average_pooling(h in hidden()) {
        let query = PoolingConfig::with_query(Matrix::zeros(1, D)).unwrap();
        let average = PoolingConfig::new(PoolingStrategy::Average, D, 0);
        let (a, b) = (pool(&h, &query).unwrap(), pool(&h, &average).unwrap());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn info_nce_is_non_negative((q, s) in pair_batch(), tau in 0.01f64..2.0, symmetric in any::<bool>()) {
        let direction = if symmetric { Direction::Symmetric } else { Direction::T2i };
        let loss = info_nce_value(&Batch::new(q, s).unwrap(), &TemperatureConfig::Fixed(tau), direction).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite(), "{loss}");
    }

    /// Reordering pairs permutes the negatives of every row; only summation
    /// order changes.
    #[test]
    fn info_nce_ignores_pair_order(
        ((q, s), perm) in pair_batch().prop_flat_map(|(q, s)| {
            let b = q.rows();
            (Just((q, s)), Just((0..b).collect::<Vec<_>>()).prop_shuffle())
        }),
        tau in 0.02f64..1.0,
    ) {
        let temp = TemperatureConfig::Fixed(tau);
        for direction in [Direction::T2i, Direction::Symmetric] {
            let loss = info_nce_value(&Batch::new(q.clone(), s.clone()).unwrap(), &temp, direction).unwrap();
            let moved = Batch::new(permute_rows(&q, &perm), permute_rows(&s, &perm)).unwrap();
            let permuted = info_nce_value(&moved, &temp, direction).unwrap();
            prop_assert!(is_exact_reorder(loss, permuted), "{loss} vs {permuted}");
        }
    }

    /// Satellites are basis vectors, so raising `q_i[i]` (and compensating in
    /// the spare coordinate) moves only the positive similarity of query `i`.
    #[test]
    fn raising_one_positive_similarity_lowers_the_loss(
        coords in (2usize..6).prop_flat_map(|b| prop::collection::vec(prop::collection::vec(-0.3f64..0.3, b), b)),
        pick in any::<prop::sample::Index>(),
        delta in 0.02f64..0.3,
        tau in 0.05f64..1.0,
    ) {
        let b = coords.len();
        let i = pick.index(b);
        let lift = |rows: &[Vec<f64>]| -> Matrix {
            let full: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let spare = (1.0 - r.iter().map(|v| v * v).sum::<f64>()).sqrt();
                    r.iter().copied().chain([spare]).collect()
                })
                .collect();
            Matrix::from_rows(&full)
        };
        let satellites = Matrix::from_rows(
            &(0..b).map(|r| (0..=b).map(|c| f64::from(u8::from(r == c))).collect::<Vec<_>>()).collect::<Vec<_>>(),
        );
        let mut raised = coords.clone();
        raised[i][i] += delta;
        let temp = TemperatureConfig::Fixed(tau);
        for direction in [Direction::T2i, Direction::Symmetric] {
            let before = info_nce_value(&Batch::new(lift(&coords), satellites.clone()).unwrap(), &temp, direction).unwrap();
            let after = info_nce_value(&Batch::new(lift(&raised), satellites.clone()).unwrap(), &temp, direction).unwrap();
            prop_assert!(after < before, "{direction}: {after} !< {before}");
        }
    }
}
