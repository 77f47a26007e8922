use nalgebra::DMatrix;
use oodbench::analysis::spearman_rho;
use oodbench::data::{trial_average, FeatureMatrix, ResponseTensor};
use oodbench::encoder::{ceiling, fit_fixed};
use oodbench::shift::{ccd, cosine_distance};
use oodbench::splits::{attribute_split, distance_chunk_bounds, distance_split, HoldOutStrategy, PercentileCuts, SeedImage};
use proptest::prelude::*;

fn rows(data: &[f64], cols: usize) -> Vec<&[f64]> {
    data.chunks(cols).collect()
}

fn strategy() -> impl Strategy<Value = HoldOutStrategy> {
    prop_oneof![Just(HoldOutStrategy::High), Just(HoldOutStrategy::Low), Just(HoldOutStrategy::Mid)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trial_average_ignores_trial_order(
        cells in prop::collection::vec(prop::collection::vec(0.0f64..100.0, 1..6), 2..20),
        rot in 0usize..6,
    ) {
        // one neuron; each image's trials rotated by `rot`
        let counts: Vec<usize> = cells.iter().map(Vec::len).collect();
        let flat: Vec<f64> = cells.iter().flatten().copied().collect();
        let rotated: Vec<f64> = cells
            .iter()
            .flat_map(|c| {
                let mut c = c.clone();
                let k = rot % c.len();
                c.rotate_left(k);
                c
            })
            .collect();
        let a = trial_average(&ResponseTensor::new(1, counts.clone(), flat).unwrap());
        let b = trial_average(&ResponseTensor::new(1, counts, rotated).unwrap());
        for i in 0..cells.len() {
            prop_assert!((a[(i, 0)] - b[(i, 0)]).abs() <= 1e-12 * a[(i, 0)].abs().max(1.0));
        }
    }

    #[test]
    fn attribute_split_partitions_and_orders(
        values in prop::collection::vec(-50.0f64..50.0, 8..200),
        strategy in strategy(),
    ) {
        let Ok(split) = attribute_split(&values, strategy, PercentileCuts::default()) else {
            return Ok(());
        };
        prop_assert!(split.validate(values.len()).is_ok());
        let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..values.len()).collect::<Vec<_>>());
        let pick = |idx: &[usize]| idx.iter().map(|&i| values[i]).collect::<Vec<_>>();
        let (train, test) = (pick(&split.train), pick(&split.test));
        let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        match strategy {
            HoldOutStrategy::High => prop_assert!(min(&test) > max(&train)),
            HoldOutStrategy::Low => prop_assert!(max(&test) < min(&train)),
            HoldOutStrategy::Mid => {
                for &t in &train {
                    prop_assert!(t <= min(&test) || t >= max(&test));
                }
            }
        }
    }

    #[test]
    fn distance_split_follows_rank_order(
        data in prop::collection::vec(-1.0f64..1.0, 40 * 3..=40 * 3),
        n in 20usize..40,
        seed in any::<u64>(),
    ) {
        let cols = 3;
        // shift away from the origin so no row has zero norm
        let data: Vec<f64> = data[..n * cols].iter().map(|v| v + 2.0).collect();
        let features = FeatureMatrix::new("p", n, cols, data).unwrap();
        let split = distance_split(&features, SeedImage::Random, seed).unwrap();
        prop_assert_eq!(split.order[0], split.seed_image);
        let ranks = split.ranks();
        let (b1, b2, b3) = distance_chunk_bounds(n);
        for w in split.order.windows(2).skip(1) {
            prop_assert!(split.distances[w[0]] <= split.distances[w[1]]);
        }
        let max_rank = |v: &[usize]| v.iter().map(|&i| ranks[i]).max().unwrap();
        let min_rank = |v: &[usize]| v.iter().map(|&i| ranks[i]).min().unwrap();
        prop_assert!(max_rank(&split.train).max(max_rank(&split.ind_test)) < b1);
        prop_assert!(min_rank(&split.near_ood) >= b2 && max_rank(&split.near_ood) < b3);
        prop_assert!(min_rank(&split.far_ood) >= b3);
        prop_assert_eq!(split.ind_test.len(), split.near_ood.len());
        for a in split.assignments() {
            prop_assert!(a.validate(n).is_ok());
        }
    }

    #[test]
    fn ccd_is_bounded_and_zero_on_subsets(
        data in prop::collection::vec(-3.0f64..3.0, 4 * 12..=4 * 12),
        k in 1usize..12,
    ) {
        let data: Vec<f64> = data.iter().map(|v| v + 0.01f64.copysign(*v)).collect();
        let all = rows(&data, 4);
        let value = ccd(&all, &all[..k]).unwrap();
        prop_assert_eq!(value, 0.0);
        let other = ccd(&all[k..], &all[..k]).unwrap();
        prop_assert!((0.0..=2.0).contains(&other));
        for (u, v) in all.iter().zip(all.iter().skip(1)) {
            let d = cosine_distance(u, v).unwrap();
            prop_assert!((0.0..=2.0).contains(&d));
            prop_assert_eq!(d, cosine_distance(v, u).unwrap());
        }
    }

    #[test]
    fn ridge_predictions_ignore_feature_scale(
        x in prop::collection::vec(-2.0f64..2.0, 30 * 4..=30 * 4),
        y in prop::collection::vec(-5.0f64..5.0, 30..=30),
        scales in prop::collection::vec(0.01f64..100.0, 4..=4),
        lambda in prop_oneof![Just(0.1), Just(1.0), Just(100.0)],
    ) {
        let a = DMatrix::from_row_slice(30, 4, &x);
        let mut b = a.clone();
        for (j, s) in scales.iter().enumerate() {
            b.column_mut(j).scale_mut(*s);
        }
        let pa = fit_fixed(&a, &y, lambda).unwrap().predict(&a);
        let pb = fit_fixed(&b, &y, lambda).unwrap().predict(&b);
        for (p, q) in pa.iter().zip(&pb) {
            prop_assert!((p - q).abs() <= 1e-8 * p.abs().max(1.0), "{} vs {}", p, q);
        }
    }

    #[test]
    fn spearman_ignores_monotone_transforms(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 5..40),
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let tx: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        let ty: Vec<f64> = y.iter().map(|v| v.powi(3)).collect();
        let base = spearman_rho(&x, &y).unwrap();
        let moved = spearman_rho(&tx, &ty).unwrap();
        match (base, moved) {
            (Some(a), Some(b)) => {
                prop_assert!((a.rho - b.rho).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&a.rho));
            }
            (None, None) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn ceiling_ignores_trial_order(
        cells in prop::collection::vec(prop::collection::vec(0.0f64..20.0, 2..6), 3..25),
        seed in any::<u64>(),
    ) {
        let reversed: Vec<Vec<f64>> = cells.iter().map(|c| c.iter().rev().copied().collect()).collect();
        let a = ceiling(&cells, 5, seed).unwrap();
        let b = ceiling(&reversed, 5, seed).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((-1.0..=1.0).contains(&a.split_half_r));
    }
}
