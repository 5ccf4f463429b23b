//! Linear probe: how much of a factor is linearly decodable from frozen
//! embeddings.

use crate::autodiff::Graph;
use crate::error::DataError;
use crate::optim::Adam;
use crate::params::{ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PROBE_FOLDS: usize = 5;
pub const PROBE_STEPS: usize = 200;
const PROBE_LR: f64 = 0.05;

/// Mean held-out accuracy (percent) of a dense+softmax classifier trained
/// per fold with full-batch Adam for [`PROBE_STEPS`] steps.
///
/// Folds are stratified by class after a `seed`-driven shuffle. Features are
/// standardized with the training fold's statistics.
pub fn nuisance_probe(embeddings: &Tensor<f64>, labels: &[usize], folds: usize, seed: u64) -> Result<f64, DataError> {
    let &[n, d] = embeddings.shape() else {
        return Err(DataError::Invalid(format!("embeddings must be [N, D], got {:?}", embeddings.shape())));
    };
    if labels.len() != n {
        return Err(DataError::Invalid(format!("{} labels for {n} embeddings", labels.len())));
    }
    if folds < 2 {
        return Err(DataError::Invalid("probe needs at least 2 folds".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some((c, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < folds) {
        return Err(DataError::Invalid(format!("class {c} has {} samples, fewer than {folds} folds", members.len())));
    }

    let mut rng = Rng::new(seed);
    let mut fold_of = vec![0; n];
    for members in &mut by_class {
        rng.shuffle(members);
        for (j, &i) in members.iter().enumerate() {
            fold_of[i] = j % folds;
        }
    }

    let x = embeddings.data();
    let mut total = 0.0;
    for fold in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        let (mean, std) = column_stats(x, d, &train);
        let (mean, std) = (&mean, &std);
        let features = |rows: &[usize]| {
            let data = rows
                .iter()
                .flat_map(|&i| (0..d).map(move |j| (x[i * d + j] - mean[j]) / std[j]))
                .collect();
            Tensor::new(&[rows.len(), d], data).expect("probe features")
        };
        let (xtr, xte) = (features(&train), features(&test));
        let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();

        let mut store = ParamStore::new();
        let w = store.add("probe.weight", ParamGroup::Predictor, Tensor::zeros(&[d, classes]));
        let b = store.add("probe.bias", ParamGroup::Predictor, Tensor::zeros(&[classes]));
        let mut adam = Adam::new(PROBE_LR);
        for _ in 0..PROBE_STEPS {
            let mut g = Graph::new();
            let input = g.constant(xtr.clone());
            let (wv, bv) = (g.param(w, store.tensor(w), true), g.param(b, store.tensor(b), true));
            let logits = g.dense(input, wv, bv)?;
            let loss = g.softmax_cross_entropy(logits, &ytr)?;
            g.backward(loss)?;
            store.accumulate_grads(&g)?;
            adam.step(&mut store, &[w, b])?;
        }

        let mut g = Graph::new();
        let input = g.constant(xte);
        let (wv, bv) = (g.param(w, store.tensor(w), false), g.param(b, store.tensor(b), false));
        let logits = g.dense(input, wv, bv)?;
        let scores = g.value(logits).data();
        let correct = test
            .iter()
            .enumerate()
            .filter(|&(r, &i)| argmax(&scores[r * classes..(r + 1) * classes]) == labels[i])
            .count();
        total += 100.0 * correct as f64 / test.len() as f64;
    }
    Ok(total / folds as f64)
}

fn column_stats(x: &[f64], d: usize, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in rows {
        for j in 0..d {
            mean[j] += x[i * d + j] / n;
        }
    }
    let mut var = vec![0.0; d];
    for &i in rows {
        for j in 0..d {
            var[j] += (x[i * d + j] - mean[j]).powi(2) / n;
        }
    }
    let std = var.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
}
