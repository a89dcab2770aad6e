//! Synthetic interaction logs with known structure.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gumbel, StandardNormal};

use crate::dataset::{ingest, IngestOptions, InteractionDataset, RawInteraction};
use crate::error::Result;
use crate::rng;

/// Two user blocks by two item blocks; every user interacts with every item
/// of its own block and nothing else. Untimestamped.
pub fn block_diagonal(n_users: usize, n_items: usize, seed: u64) -> InteractionDataset {
    let mut rng = rng::stream(seed, "synthetic");
    let mut users: Vec<u32> = (0..n_users as u32).collect();
    users.shuffle(&mut rng);
    let mut pairs = Vec::new();
    for &u in &users {
        let block = (u as usize * 2) / n_users;
        let mut items: Vec<u32> = (0..n_items as u32)
            .filter(|&i| (i as usize * 2) / n_items == block)
            .collect();
        items.shuffle(&mut rng);
        pairs.extend(items.into_iter().map(|i| (u, i)));
    }
    InteractionDataset::from_pairs(n_users, n_items, &pairs).expect("valid indices")
}

/// Parameters of [`latent_factor`].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// Rank of the true preference structure.
    pub latent_dim: usize,
    /// Interactions per user are uniform on `min..=max`.
    pub min_per_user: usize,
    pub max_per_user: usize,
    /// Weight of the log-rank popularity bias in the item logits.
    pub popularity: f64,
    /// Scale of the user-item affinity term in the logits.
    pub affinity: f64,
}

impl Default for LatentConfig {
    /// About 2,000 users, 1,500 items and 40,000 interactions.
    fn default() -> Self {
        LatentConfig {
            n_users: 2000,
            n_items: 1500,
            latent_dim: 8,
            min_per_user: 10,
            max_per_user: 30,
            popularity: 1.0,
            affinity: 4.0,
        }
    }
}

/// Samples an implicit-feedback log from a low-rank preference model with
/// popularity bias.
///
/// Each user draws its interactions without replacement from
/// `softmax(affinity * <x_u, y_i> + popularity * -ln(rank_i + 1))` (Gumbel
/// top-k), and gets them in random temporal order.
pub fn latent_factor(config: &LatentConfig, seed: u64) -> Result<InteractionDataset> {
    let mut rng = rng::stream(seed, "synthetic");
    let d = config.latent_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut gauss = |n: usize, s: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s * z
            })
            .collect()
    };
    let users = gauss(config.n_users * d, scale);
    let items = gauss(config.n_items * d, 1.0);

    let mut ranks: Vec<usize> = (0..config.n_items).collect();
    ranks.shuffle(&mut rng);
    let bias: Vec<f64> = ranks
        .iter()
        .map(|&r| -config.popularity * ((r + 1) as f64).ln())
        .collect();

    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    let mut records = Vec::new();
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(config.n_items);
    for u in 0..config.n_users {
        let x = &users[u * d..(u + 1) * d];
        keys.clear();
        for i in 0..config.n_items {
            let y = &items[i * d..(i + 1) * d];
            let affinity: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let logit = config.affinity * affinity + bias[i];
            keys.push((logit + gumbel.sample(&mut rng), i));
        }
        let n = rng.random_range(config.min_per_user..=config.max_per_user).min(config.n_items);
        keys.select_nth_unstable_by(n - 1, |a, b| b.0.total_cmp(&a.0));
        let mut chosen: Vec<usize> = keys[..n].iter().map(|&(_, i)| i).collect();
        chosen.sort_unstable();
        let mut times: Vec<i64> = (0..n as i64).collect();
        times.shuffle(&mut rng);
        for (i, t) in chosen.into_iter().zip(times) {
            records.push(RawInteraction::new(format!("u{u}"), format!("i{i}"), Some(t)));
        }
    }
    ingest(&records, &IngestOptions::default())
}
