use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rulecap::scoring::{
    contrastive_loss_and_grad, embed_text_hashed, train_scorer_contrastive, BilinearScorer,
    ContrastiveConfig, ImageRef, SimilarityScorer,
};

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((r, c), |_| n.sample(rng))
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, di, dt) = (5, 4, 6);
    let images = random_matrix(&mut rng, b, di);
    let texts = random_matrix(&mut rng, b, dt);
    let w = random_matrix(&mut rng, di, dt) * 0.3;
    let log_t = 0.2;
    let (_, dw, dlt) = contrastive_loss_and_grad(&w, log_t, &images, &texts);
    let h = 1e-6;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for i in 0..di {
        for j in 0..dt {
            let mut up = w.clone();
            up[[i, j]] += h;
            let mut down = w.clone();
            down[[i, j]] -= h;
            let n = (contrastive_loss_and_grad(&up, log_t, &images, &texts).0
                - contrastive_loss_and_grad(&down, log_t, &images, &texts).0)
                / (2.0 * h);
            worst = worst.max(rel(dw[[i, j]], n));
        }
    }
    let n = (contrastive_loss_and_grad(&w, log_t + h, &images, &texts).0
        - contrastive_loss_and_grad(&w, log_t - h, &images, &texts).0)
        / (2.0 * h);
    worst = worst.max(rel(dlt, n));
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn loss_is_invariant_to_joint_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = random_matrix(&mut rng, 6, 3);
    let texts = random_matrix(&mut rng, 6, 5);
    let w = random_matrix(&mut rng, 3, 5);
    let base = contrastive_loss_and_grad(&w, 0.0, &images, &texts);
    let perm = [3, 0, 5, 1, 4, 2];
    let pi = Array2::from_shape_fn((6, 3), |(r, c)| images[[perm[r], c]]);
    let pt = Array2::from_shape_fn((6, 5), |(r, c)| texts[[perm[r], c]]);
    let other = contrastive_loss_and_grad(&w, 0.0, &pi, &pt);
    assert!((base.0 - other.0).abs() <= 1e-12);
    assert!((&base.1 - &other.1).iter().all(|v| v.abs() <= 1e-12));
    assert!((base.2 - other.2).abs() <= 1e-12);
}

#[test]
fn loss_by_hand_for_two_pairs() {
    // Identity scorer, unit temperature: logits are [[1, 0], [0, 1]].
    let eye = Array2::from_shape_fn((2, 2), |(r, c)| if r == c { 1.0 } else { 0.0 });
    let (loss, _, _) = contrastive_loss_and_grad(&eye, 0.0, &eye, &eye);
    let expected = (1.0f64.exp() + 1.0).ln() - 1.0;
    assert!((loss - expected).abs() <= 1e-12);
}

const WORDS: [&str; 24] = [
    "actor", "singer", "mayor", "coach", "stage", "stadium", "council", "river", "speaks",
    "performs", "wins", "meets", "Boston", "Paris", "Lagos", "Lima", "band", "team", "crowd",
    "court", "award", "concert", "match", "vote",
];

fn synthetic_pairs(n: usize, seed: u64) -> Vec<(ImageRef, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = random_matrix(&mut rng, 32, 16);
    let noise = Normal::new(0.0, 0.05).unwrap();
    (0..n)
        .map(|i| {
            let caption: Vec<&str> = (0..3)
                .map(|_| WORDS[rng.random_range(0..WORDS.len())])
                .collect();
            let caption = caption.join(" ");
            let e = embed_text_hashed(&caption, 32, 99);
            let feature: Vec<f64> = (0..16)
                .map(|c| (0..32).map(|r| e[r] * proj[[r, c]]).sum::<f64>() + noise.sample(&mut rng))
                .collect();
            (ImageRef::new(format!("img{i}"), feature).unwrap(), caption)
        })
        .collect()
}

fn mean_rank(scorer: &BilinearScorer, pairs: &[(ImageRef, String)]) -> f64 {
    let mut total = 0usize;
    for (i, (image, caption)) in pairs.iter().enumerate() {
        let own = scorer.score(image, caption);
        total += pairs
            .iter()
            .enumerate()
            .filter(|(j, (_, c))| *j != i && scorer.score(image, c) > own)
            .count();
    }
    total as f64 / pairs.len() as f64
}

#[test]
fn training_improves_retrieval_rank() {
    let pairs = synthetic_pairs(200, 5);
    let config = ContrastiveConfig {
        epochs: 20,
        lr: 1e-2,
        d_txt: 32,
        text_seed: 99,
        ..ContrastiveConfig::default()
    };
    let init = train_scorer_contrastive(
        &pairs,
        &ContrastiveConfig {
            epochs: 0,
            ..config
        },
    )
    .unwrap();
    let fit = train_scorer_contrastive(&pairs, &config).unwrap();
    let before = mean_rank(&init.scorer, &pairs);
    let after = mean_rank(&fit.scorer, &pairs);
    assert_eq!(fit.epoch_losses.len(), 20);
    assert!(fit.epoch_losses.last().unwrap() < fit.epoch_losses.first().unwrap());
    assert!(after < before, "mean rank {before} -> {after}");
    assert!(after < 10.0, "mean rank {after}");
}

#[test]
fn zero_epochs_returns_initialization() {
    let pairs = synthetic_pairs(10, 6);
    let config = ContrastiveConfig {
        epochs: 0,
        d_txt: 32,
        seed: 4,
        ..ContrastiveConfig::default()
    };
    let a = train_scorer_contrastive(&pairs, &config).unwrap();
    let b = train_scorer_contrastive(&pairs, &config).unwrap();
    assert!(a.epoch_losses.is_empty());
    assert_eq!(a.scorer, b.scorer);
    assert!((a.scorer.temperature() - 0.07).abs() <= 1e-12);
    let std = (a.scorer.w.iter().map(|v| v * v).sum::<f64>() / a.scorer.w.len() as f64).sqrt();
    assert!(std > 0.005 && std < 0.02);
}

#[test]
fn training_is_deterministic() {
    let pairs = synthetic_pairs(40, 7);
    let config = ContrastiveConfig {
        epochs: 3,
        d_txt: 32,
        ..ContrastiveConfig::default()
    };
    let a = train_scorer_contrastive(&pairs, &config).unwrap();
    let b = train_scorer_contrastive(&pairs, &config).unwrap();
    assert_eq!(a.scorer, b.scorer);
    assert_eq!(a.epoch_losses, b.epoch_losses);
}
