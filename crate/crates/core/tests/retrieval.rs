use chorekit::io::SeededRng;
use chorekit::nn::{grad_check, GradCheck, Graph, StepLr};
use chorekit::retrieval::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn gaussian(rng: &mut SeededRng, rows: usize, dim: usize) -> Features {
    Features::new(rows, dim, (0..rows * dim).map(|_| rng.normal()).collect()).unwrap()
}

fn random_spd(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
    let a = &g * g.transpose() + DMatrix::identity(n, n) * 1e-3;
    a.transpose().as_slice().to_vec()
}

fn rel_fro(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    num / b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn eigen_reconstructs_spd_matrices() {
    let mut rng = SeededRng::new(7);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = 1 + case % 64;
        let a = random_spd(&mut rng, n);
        let e = jacobi_eigen(&a, n).unwrap();
        worst = worst.max(rel_fro(&e.reconstruct(), &a));
        let mut want = nalgebra::SymmetricEigen::new(DMatrix::from_row_slice(n, n, &a)).eigenvalues.as_slice().to_vec();
        want.sort_by(f64::total_cmp);
        let scale = want[n - 1].abs();
        for (got, want) in e.values.iter().zip(&want) {
            assert!((got - want).abs() <= 1e-9 * scale, "n={n}: eigenvalue {got} vs {want}");
        }
    }
    assert!(worst < 1e-6, "worst relative reconstruction error {worst:e}");
}

#[test]
fn eigenvectors_are_orthonormal() {
    let mut rng = SeededRng::new(3);
    let n = 20;
    let e = jacobi_eigen(&random_spd(&mut rng, n), n).unwrap();
    let q = DMatrix::from_row_slice(n, n, &e.vectors);
    let err = (q.transpose() * &q - DMatrix::<f64>::identity(n, n)).abs().max();
    assert!(err < 1e-12, "{err:e}");
}

#[test]
fn fid_of_a_set_with_itself_vanishes() {
    let mut rng = SeededRng::new(11);
    for (n, d) in [(10, 4), (50, 16), (300, 64)] {
        let a = gaussian(&mut rng, n, d);
        let v = fid(&a, &a).unwrap();
        assert!(v < 1e-4, "fid(a, a) = {v:e} at {n}x{d}");
    }
}

/// Samples whose empirical mean and covariance equal the requested ones
/// exactly, built by whitening standard normal draws.
fn with_exact_moments(rng: &mut SeededRng, n: usize, mean: &[f64], sd: f64) -> Features {
    let d = mean.len();
    let x = DMatrix::from_fn(n, d, |_, _| rng.normal());
    let mu = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let l = cov.cholesky().unwrap().l();
    let white = l.solve_lower_triangular(&centered.transpose()).unwrap().transpose();
    let out = DMatrix::from_fn(n, d, |i, j| white[(i, j)] * sd + mean[j]);
    Features::new(n, d, out.transpose().as_slice().to_vec()).unwrap()
}

#[test]
fn fid_diagonal_gaussian_fixture() {
    // ‖1‖² + 4·(1 + 4 − 2·2) = 8.
    let mut rng = SeededRng::new(5);
    let a = with_exact_moments(&mut rng, 100_000, &[0.0; 4], 1.0);
    let b = with_exact_moments(&mut rng, 100_000, &[1.0; 4], 2.0);
    let v = fid(&a, &b).unwrap();
    assert!((v - 8.0).abs() < 0.05, "{v}");
    assert!((v - 8.0).abs() < 1e-8, "whitened fixture should be exact, got {v}");
}

#[test]
fn fid_matches_nalgebra_square_root() {
    let mut rng = SeededRng::new(9);
    let a = gaussian(&mut rng, 40, 6);
    let b = Features::new(40, 6, gaussian(&mut rng, 40, 6).as_slice().iter().map(|v| 2.0 * v + 0.5).collect()).unwrap();
    let (sa, sb) = (GaussianStats::fit(&a).unwrap(), GaussianStats::fit(&b).unwrap());
    let ma = DMatrix::from_row_slice(6, 6, &sa.cov);
    let mb = DMatrix::from_row_slice(6, 6, &sb.cov);
    let root = |m: &DMatrix<f64>| {
        let e = nalgebra::SymmetricEigen::new(m.clone());
        &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt())) * e.eigenvectors.transpose()
    };
    let ra = root(&ma);
    let inner = &ra * &mb * &ra;
    let tr_sqrt: f64 = nalgebra::SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let dmu = DVector::from_vec(sa.mean.clone()) - DVector::from_vec(sb.mean.clone());
    let want = dmu.norm_squared() + ma.trace() + mb.trace() - 2.0 * tr_sqrt;
    let got = fid(&a, &b).unwrap();
    assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fid_is_symmetric_and_nonnegative(seed in any::<u64>(), n in 3usize..30, d in 1usize..8) {
        let mut rng = SeededRng::new(seed);
        let a = gaussian(&mut rng, n, d);
        let b = gaussian(&mut rng, n + 2, d);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!(ab >= 0.0 && ba >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-3, "{} vs {}", ab, ba);
    }

    #[test]
    fn recall_is_monotone_and_complete(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = SeededRng::new(seed);
        let q = gaussian(&mut rng, n, 3);
        let g = gaussian(&mut rng, n, 3);
        let r: Vec<f64> = (1..=n).map(|k| recall_at_k(&q, &g, k).unwrap()).collect();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(r[n - 1], 1.0);
    }

    #[test]
    fn diversity_is_translation_invariant(vals in prop::collection::vec(-64i32..64, 12), shift in prop::collection::vec(-64i32..64, 3)) {
        // Quarter-integer values keep every difference exact.
        let data: Vec<f64> = vals.iter().map(|&v| v as f64 * 0.25).collect();
        let moved: Vec<f64> = data.iter().enumerate().map(|(i, v)| v + shift[i % 3] as f64 * 0.25).collect();
        let a = Features::new(4, 3, data).unwrap();
        let b = Features::new(4, 3, moved).unwrap();
        prop_assert_eq!(diversity(&a).unwrap(), diversity(&b).unwrap());
    }

    #[test]
    fn clip_loss_is_symmetric_in_modalities(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = SeededRng::new(seed);
        let a = gaussian(&mut rng, n, 5);
        let b = gaussian(&mut rng, n, 5);
        let ab = clip_loss(&a, &b, LOG_SCALE).unwrap();
        let ba = clip_loss(&b, &a, LOG_SCALE).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
    }
}

#[test]
fn unpaired_recall_matches_chance() {
    let mut rng = SeededRng::new(21);
    let trials = 5;
    let mean: f64 = (0..trials)
        .map(|_| recall_at_k(&gaussian(&mut rng, 1000, 32), &gaussian(&mut rng, 1000, 32), 5).unwrap())
        .sum::<f64>()
        / trials as f64;
    assert!((mean - 0.005).abs() <= 0.005, "{mean}");
}

#[test]
fn unpaired_mean_rank_matches_chance() {
    let mut rng = SeededRng::new(22);
    let trials = 20;
    let mean: f64 = (0..trials)
        .map(|_| rank_stats(&gaussian(&mut rng, 100, 16), &gaussian(&mut rng, 100, 16)).unwrap().mean)
        .sum::<f64>()
        / trials as f64;
    assert!((mean - 50.5).abs() <= 3.0, "{mean}");
}

#[test]
fn clip_loss_falls_as_pairs_align() {
    let mut rng = SeededRng::new(4);
    let n = 16;
    let m = gaussian(&mut rng, n, 8);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let shuffled: Vec<f64> = perm.iter().flat_map(|&i| m.row(i).to_vec()).collect();
    let losses: Vec<f64> = [0.0, 0.5, 1.0]
        .iter()
        .map(|&w| {
            let d: Vec<f64> = shuffled.iter().zip(m.as_slice()).map(|(s, a)| (1.0 - w) * s + w * a).collect();
            clip_loss(&m, &Features::new(n, 8, d).unwrap(), LOG_SCALE).unwrap()
        })
        .collect();
    assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
}

#[test]
fn graph_clip_loss_matches_plain_form() {
    let mut rng = SeededRng::new(8);
    let (a, b) = (gaussian(&mut rng, 6, 5), gaussian(&mut rng, 6, 5));
    let params = chorekit::nn::ParamStore::<f64>::new(0);
    let mut g = Graph::new(&params);
    let ma = g.input(chorekit::nn::Tensor::matrix(6, 5, a.as_slice().to_vec()).unwrap());
    let mb = g.input(chorekit::nn::Tensor::matrix(6, 5, b.as_slice().to_vec()).unwrap());
    let l = clip_loss_graph(&mut g, ma, mb, LOG_SCALE).unwrap();
    let want = clip_loss(&a, &b, LOG_SCALE).unwrap();
    assert!((g.value(l).item() - want).abs() < 1e-12);
}

fn tiny_encoder() -> DualEncoder<f64> {
    let cfg = RetrievalConfig { layers: 2, hidden: 8, heads: 2, ffn_dim: 12, ..RetrievalConfig::toy(3, 4) };
    DualEncoder::new(cfg, 1).unwrap()
}

#[test]
fn full_length_sequence_pools_to_one_position() {
    assert_eq!(pooled_lengths(360, 9).last(), Some(&1));
    let cfg = RetrievalConfig { hidden: 8, heads: 2, ffn_dim: 8, ..RetrievalConfig::full(2, 2) };
    let enc = DualEncoder::<f64>::new(cfg, 0).unwrap();
    let mut rng = SeededRng::new(0);
    let x: Vec<f64> = (0..360 * 2).map(|_| rng.normal()).collect();
    let mut g = Graph::new(&enc.params);
    let v = enc.encode_sequence(&mut g, Modality::Music, &x, 360).unwrap();
    assert_eq!(g.value(v).shape(), &[1, 8]);
    // Nine pools leave one row, so no final averaging node is added.
    assert_eq!(g.op_name(v), "avg_pool2");
}

#[test]
fn bypassed_layers_preserve_constant_sequences() {
    let mut enc = tiny_encoder();
    enc.bypass_layers().unwrap();
    let frame = [0.5, -1.0, 2.0];
    let x: Vec<f64> = frame.iter().copied().cycle().take(7 * 3).collect();
    let mut g = Graph::new(&enc.params);
    let pooled = enc.encode_sequence(&mut g, Modality::Music, &x, 7).unwrap();
    let single = enc.encode_sequence(&mut g, Modality::Music, &frame, 1).unwrap();
    let (a, b) = (g.value(pooled).data().to_vec(), g.value(single).data().to_vec());
    assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12), "{a:?} vs {b:?}");
}

#[test]
fn swapping_a_pooled_pair_changes_nothing() {
    let mut enc = tiny_encoder();
    enc.bypass_layers().unwrap();
    let mut rng = SeededRng::new(2);
    let x: Vec<f64> = (0..6 * 4).map(|_| rng.normal()).collect();
    let mut y = x.clone();
    for j in 0..4 {
        y.swap(2 * 4 + j, 3 * 4 + j);
    }
    let mut g = Graph::new(&enc.params);
    let a = enc.encode_sequence(&mut g, Modality::Dance, &x, 6).unwrap();
    let b = enc.encode_sequence(&mut g, Modality::Dance, &y, 6).unwrap();
    let (a, b) = (g.value(a).data(), g.value(b).data());
    assert!(a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12));
}

#[test]
fn encoder_loss_gradients_match_finite_differences() {
    let enc = tiny_encoder();
    let mut rng = SeededRng::new(6);
    let music: Vec<Vec<f64>> = (0..3).map(|_| (0..5 * 3).map(|_| rng.normal()).collect()).collect();
    let dance: Vec<Vec<f64>> = (0..3).map(|_| (0..5 * 4).map(|_| rng.normal()).collect()).collect();
    let report = grad_check(
        &enc.params,
        |g| {
            let ms: Vec<(&[f64], usize)> = music.iter().map(|x| (x.as_slice(), 5)).collect();
            let ds: Vec<(&[f64], usize)> = dance.iter().map(|x| (x.as_slice(), 5)).collect();
            let fm = enc.encode_batch(g, Modality::Music, &ms)?;
            let fd = enc.encode_batch(g, Modality::Dance, &ds)?;
            clip_loss_graph(g, fm, fd, 1.0)
        },
        GradCheck { samples: 64, dropout_seed: Some(3), resolvable: 1e-7, ..Default::default() },
    )
    .unwrap();
    assert!(report.checked >= 64 && report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn step_schedule_decays_at_epoch_five() {
    let s = StepLr::standard(1e-3);
    assert_eq!(s.lr_at(4), 1e-3);
    assert_eq!(s.lr_at(5), 0.33 * 1e-3);
    assert_eq!(s.lr_at(10), 0.33 * 0.33 * 1e-3);
}

#[test]
fn toy_training_beats_chance() {
    let (train, val) = toy_corpus(&ToyCorpusSpec::default()).unwrap();
    let cfg = RetrievalConfig::toy(train.music_dim, train.dance_dim);
    let mut enc = DualEncoder::<f32>::new(cfg, 0).unwrap();
    let before = retrieval_report(&enc, &val).unwrap();
    assert_eq!(before.gallery, 256);
    assert!(before.r_at_5 < 3.0 * before.null_r_at_5, "untrained R@5 {}", before.r_at_5);
    let log = train_retrieval(&mut enc, &train, &RetrievalTrainOptions::default()).unwrap();
    assert!(log[5].loss < log[0].loss);
    assert_eq!(log[5].lr, 0.33 * log[0].lr);
    let after = retrieval_report(&enc, &val).unwrap();
    assert!(after.r_at_5 > 0.059, "trained R@5 {}", after.r_at_5);
    let mut again = DualEncoder::<f32>::new(enc.cfg.clone(), 0).unwrap();
    let log2 = train_retrieval(&mut again, &train, &RetrievalTrainOptions::default()).unwrap();
    assert_eq!(log, log2);
}
