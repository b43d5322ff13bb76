//! Normalization constants, deviation tables and KDEs against brute-force
//! re-implementations.

use advdev::deviation::{
    compute_deviations, density_at, extract_representations, kde, linspace, normalization_constants, pair_count,
    summarize, Metric, RepresentationSet,
};
use advdev::network::{ArchitectureSpec, Model};
use advdev::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force_mean(vectors: &[Vec<f64>], metric: Metric) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..vectors.len() {
        for j in 0..vectors.len() {
            if i < j {
                let (u, v) = (&vectors[i], &vectors[j]);
                let d = match metric {
                    Metric::Euclidean => u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
                    Metric::Cosine => {
                        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
                        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                        1.0 - dot / (nu * nv)
                    }
                };
                total += d;
                count += 1;
            }
        }
    }
    total / count as f64
}

fn random_set(n: usize, dims: &[usize], seed: u64) -> (RepresentationSet, Vec<Vec<Vec<f64>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| dims.iter().map(|&d| (0..d).map(|_| rng.gen_range(-1.0..2.0)).collect()).collect())
        .collect();
    let ids: Vec<usize> = (1..=dims.len()).collect();
    (RepresentationSet::from_vectors((0..n).collect(), &ids, &rows).unwrap(), rows)
}

#[test]
fn exhaustive_constants_match_brute_force() {
    for n in [3, 50, 200] {
        let (set, rows) = random_set(n, &[7, 31], n as u64);
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let c = normalization_constants(&set, metric, None, 0).unwrap();
            assert_eq!(c.pair_count, pair_count(n as u64));
            for k in 0..2 {
                let column: Vec<Vec<f64>> = rows.iter().map(|r| r[k].clone()).collect();
                let want = brute_force_mean(&column, metric);
                assert!((c.constants[k].value - want).abs() <= 1e-9, "n={n} {metric} k={k}");
            }
        }
    }
}

#[test]
fn full_test_split_pair_count() {
    assert_eq!(pair_count(9267), 42_934_011);
}

#[test]
fn scaling_a_checkpoint() {
    let (clean, rows) = random_set(12, &[5], 1);
    let (adv, adv_rows) = random_set(12, &[5], 2);
    let lambda = 3.7;
    let scale = |r: &Vec<Vec<Vec<f64>>>| -> RepresentationSet {
        let scaled: Vec<Vec<Vec<f64>>> = r.iter().map(|v| vec![v[0].iter().map(|x| x * lambda).collect()]).collect();
        RepresentationSet::from_vectors((0..12).collect(), &[1], &scaled).unwrap()
    };
    let (clean_s, adv_s) = (scale(&rows), scale(&adv_rows));
    for metric in [Metric::Euclidean, Metric::Cosine] {
        let c = normalization_constants(&clean, metric, None, 0).unwrap();
        let cs = normalization_constants(&clean_s, metric, None, 0).unwrap();
        let t = compute_deviations(&clean, &adv, &[c.clone()], None, "x").unwrap();
        let ts = compute_deviations(&clean_s, &adv_s, &[cs.clone()], None, "x").unwrap();
        let factor = if metric == Metric::Euclidean { lambda } else { 1.0 };
        assert!((cs.constants[0].value - factor * c.constants[0].value).abs() < 1e-9);
        for (a, b) in t.rows.iter().zip(&ts.rows) {
            assert!((b.raw - factor * a.raw).abs() < 1e-9);
            assert!((b.normalized - a.normalized).abs() < 1e-9);
        }
    }
}

#[test]
fn duplicate_images_give_identical_rows() {
    let model = Model::build(ArchitectureSpec::small_net(), 0).unwrap();
    let x = Tensor::filled(&[3, 32, 32], 0.25);
    let reps = extract_representations(&model, &[x.clone(), x], &[0, 1], None).unwrap();
    let dims: Vec<usize> = reps.checkpoints.iter().map(|c| c.dim).collect();
    assert_eq!(dims, vec![3072, 16384, 8192, 4096, 64, 10, 10, 10]);
    for c in &reps.checkpoints {
        assert_eq!(c.row(0), c.row(1));
    }
    assert!(extract_representations(&model, &[Tensor::zeros(&[3, 8, 8])], &[0], None).is_err());
}

#[test]
fn one_hot_rows_are_constant() {
    // distinct one-hot vectors at the checkpoint, as after a successful attack
    let clean: Vec<Vec<Vec<f64>>> = (0..6).map(|i| vec![one_hot(i % 3)]).collect();
    let adv: Vec<Vec<Vec<f64>>> = (0..6).map(|i| vec![one_hot((i + 1) % 3)]).collect();
    let c = RepresentationSet::from_vectors((0..6).collect(), &[10], &clean).unwrap();
    let a = RepresentationSet::from_vectors((0..6).collect(), &[10], &adv).unwrap();
    let consts: Vec<_> = [Metric::Euclidean, Metric::Cosine]
        .iter()
        .map(|&m| normalization_constants(&c, m, None, 0).unwrap())
        .collect();
    let t = compute_deviations(&c, &a, &consts, Some(&[true; 6]), "cw").unwrap();
    for r in &t.rows {
        let raw = if r.metric == Metric::Euclidean { 2f64.sqrt() } else { 1.0 };
        assert!((r.raw - raw).abs() < 1e-12);
    }
    let s = summarize(&t, 100).unwrap();
    assert!(s.iter().all(|g| g.point_mass && g.count == 6));
}

fn one_hot(k: usize) -> Vec<f64> {
    let mut v = vec![0.0; 3];
    v[k] = 1.0;
    v
}

#[test]
fn group_counts_match_mask() {
    let (clean, _) = random_set(10, &[4, 6, 2], 3);
    let (adv, _) = random_set(10, &[4, 6, 2], 4);
    let mask: Vec<bool> = (0..10).map(|i| i % 3 != 0).collect();
    let consts = vec![normalization_constants(&clean, Metric::Cosine, None, 0).unwrap()];
    let t = compute_deviations(&clean, &adv, &consts, Some(&mask), "bim").unwrap();
    for r in &t.rows {
        assert!(mask[r.image_id]);
        let c = consts[0].get(r.checkpoint).unwrap();
        assert!((r.normalized - r.raw / c).abs() <= 1e-12 * r.normalized.abs());
    }
    let s = summarize(&t, 100).unwrap();
    assert_eq!(s.len(), 3);
    assert!(s.iter().all(|g| g.count == 6));
}

proptest! {
    #[test]
    fn kde_integrates_to_one(samples in proptest::collection::vec(-50.0..50.0f64, 2..60)) {
        let spread = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - samples.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let k = kde(&samples, 100).unwrap();
        prop_assert!(k.density.iter().all(|d| *d >= 0.0));
        prop_assert!(k.grid.windows(2).all(|w| w[0] < w[1]));
        let lo = k.grid[0] - 5.0 * k.bandwidth;
        let hi = k.grid[99] + 5.0 * k.bandwidth;
        let xs = linspace(lo, hi, 4000);
        let ys: Vec<f64> = xs.iter().map(|&x| density_at(&samples, k.bandwidth, x)).collect();
        let area: f64 = xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum();
        prop_assert!((area - 1.0).abs() <= 0.02, "area {}", area);
    }
}
