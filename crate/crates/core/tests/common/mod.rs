//! Independent reference implementations and fixture generators shared by
//! the integration tests. Nothing here calls into the library's metric or
//! voting code.

#![allow(dead_code)]

pub mod checks;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const TABLE2: &str = include_str!("../../fixtures/table2.jsonl");
pub const TABLE3: &str = include_str!("../../fixtures/table3.jsonl");
pub const CLASS_COUNTS: &str = include_str!("../../fixtures/class_counts.json");

/// Published averages: Table II top-1 and voting, Table III top-1/2/3.
pub const TABLE2_AVG_TOP1: f64 = 86.9;
pub const TABLE2_AVG_VOTING: f64 = 88.3;
pub const TABLE3_AVG: [f64; 3] = [78.5, 89.6, 94.5];
/// Published rounding of averages is to 0.1.
pub const TABLE_TOLERANCE: f64 = 0.05;

/// Published split sizes (train, test, val) of the 9309-image set.
pub const PUBLISHED_SPLIT: [usize; 3] = [6498, 1413, 1398];
pub const PUBLISHED_TOTAL: usize = 9309;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Random softmax-like rows. Roughly a third of fixtures quantize the
/// probabilities so that exact ties occur.
pub fn random_probs(r: &mut impl Rng, n: usize, c: usize) -> Array2<f64> {
    let quantize = r.random_bool(0.35);
    let mut out = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        let mut row: Vec<f64> = (0..c)
            .map(|_| {
                if quantize {
                    r.random_range(0..4) as f64
                } else {
                    r.random::<f64>()
                }
            })
            .collect();
        if row.iter().all(|v| *v == 0.0) {
            row[r.random_range(0..c)] = 1.0;
        }
        let s: f64 = row.iter().sum();
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v / s;
        }
    }
    out
}

pub fn random_labels(r: &mut impl Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..c)).collect()
}

/// `(probs, labels)` for fixture `index`; sizes vary with the index.
pub fn metric_fixture(index: u64) -> (Array2<f64>, Vec<usize>) {
    let mut r = rng(0x6d65_7472 ^ index);
    let n = r.random_range(1..=60);
    let c = r.random_range(2..=11);
    (random_probs(&mut r, n, c), random_labels(&mut r, n, c))
}

/// Class order for one row: sort by probability descending, then by index
/// ascending, using a plain insertion sort.
fn order_of(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::with_capacity(row.len());
    for j in 0..row.len() {
        let mut pos = order.len();
        while pos > 0 {
            let prev = order[pos - 1];
            let before = row[prev] > row[j] || (row[prev] == row[j] && prev < j);
            if before {
                break;
            }
            pos -= 1;
        }
        order.insert(pos, j);
    }
    order
}

pub fn brute_topk(probs: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = probs.row(i).to_vec();
        if order_of(&row)[..k].contains(&y) {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

pub fn brute_predicted(row: &[f64]) -> usize {
    order_of(row)[0]
}

pub fn brute_confusion(probs: &Array2<f64>, labels: &[usize]) -> Vec<Vec<usize>> {
    let c = probs.ncols();
    let mut m = vec![vec![0usize; c]; c];
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = probs.row(i).to_vec();
        m[y][brute_predicted(&row)] += 1;
    }
    m
}

/// Macro accuracy by explicit per-class tallies.
pub fn brute_macro(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let c = probs.ncols();
    let (mut right, mut total) = (vec![0usize; c], vec![0usize; c]);
    for (i, &y) in labels.iter().enumerate() {
        total[y] += 1;
        if brute_predicted(&probs.row(i).to_vec()) == y {
            right[y] += 1;
        }
    }
    let present: Vec<f64> = (0..c)
        .filter(|&j| total[j] > 0)
        .map(|j| right[j] as f64 / total[j] as f64)
        .collect();
    present.iter().sum::<f64>() / present.len() as f64
}

/// Three models' validation outputs for fixture `index`, with one model
/// deliberately better than the rest on some fixtures.
pub fn voting_fixture(index: u64) -> (Vec<Array2<f64>>, Vec<usize>) {
    let mut r = rng(0x766f_7465 ^ index);
    let n = r.random_range(8..=40);
    let c = r.random_range(2..=6);
    let labels = random_labels(&mut r, n, c);
    let models = (0..3)
        .map(|_| {
            let mut p = random_probs(&mut r, n, c);
            let boost: f64 = r.random_range(0.0..1.5);
            for (i, &y) in labels.iter().enumerate() {
                p[[i, y]] += boost * r.random::<f64>();
                let s: f64 = p.row(i).sum();
                p.row_mut(i).mapv_inplace(|v| v / s);
            }
            p
        })
        .collect();
    (models, labels)
}

/// Σ wᵢ·Pᵢ / Σ wᵢ written out element by element.
pub fn brute_vote(probs: &[Array2<f64>], weights: &[f64]) -> Array2<f64> {
    let (n, c) = probs[0].dim();
    let total: f64 = weights.iter().sum();
    Array2::from_shape_fn((n, c), |(i, j)| {
        let mut acc = 0.0;
        for (p, w) in probs.iter().zip(weights) {
            acc += w * p[[i, j]];
        }
        acc / total
    })
}

/// Per-class counts read off the dataset statistics chart.
pub fn class_counts() -> Vec<(String, usize)> {
    let v: serde_json::Map<String, serde_json::Value> = serde_json::from_str(CLASS_COUNTS).unwrap();
    v.into_iter().map(|(k, n)| (k, n.as_u64().unwrap() as usize)).collect()
}
