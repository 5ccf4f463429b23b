//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use ropad_core::metrics::ScoreSet;
use ropad_core::Rng;

/// Random two-class score set of size `n` (at least 2); every few sets are
/// coarsely quantized so ties are common.
pub fn random_score_set(rng: &mut Rng, n: usize) -> ScoreSet {
    let levels = match rng.below(3) {
        0 => Some(2 + rng.below(10)),
        _ => None,
    };
    let mut labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores: Vec<f64> = (0..n)
        .map(|_| {
            let s = rng.uniform();
            levels.map_or(s, |k| (s * k as f64).floor() / k as f64)
        })
        .collect();
    ScoreSet::from_pairs(&scores, &labels).unwrap()
}

pub struct Oracle {
    pub bona: Vec<f64>,
    pub attack: Vec<f64>,
}

impl Oracle {
    pub fn new(set: &ScoreSet) -> Self {
        let pick = |l| set.records.iter().filter(|r| r.label == l).map(|r| r.score).collect();
        Self { bona: pick(1), attack: pick(0) }
    }

    /// Every distinct score plus one sentinel on each side, ascending.
    pub fn thresholds(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.bona.iter().chain(&self.attack).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        let (lo, hi) = (all[0] - 1.0, all[all.len() - 1] + 1.0);
        let mut out = vec![lo];
        out.extend(all);
        out.push(hi);
        out
    }

    /// `(far, frr)` by direct recount at `t`.
    pub fn rates(&self, t: f64) -> (f64, f64) {
        let far = self.attack.iter().filter(|&&s| s >= t).count() as f64 / self.attack.len() as f64;
        let frr = self.bona.iter().filter(|&&s| s < t).count() as f64 / self.bona.len() as f64;
        (far, frr)
    }

    /// Pairwise Mann-Whitney statistic, ties counting one half.
    pub fn auc(&self) -> f64 {
        let mut wins = 0.0;
        for &b in &self.bona {
            for &a in &self.attack {
                wins += if b > a { 1.0 } else if b == a { 0.5 } else { 0.0 };
            }
        }
        wins / (self.bona.len() * self.attack.len()) as f64
    }

    /// Closest-point EER with ties to the lowest threshold.
    pub fn eer(&self) -> (f64, f64) {
        let ts = self.thresholds();
        let gaps: Vec<f64> = ts.iter().map(|&t| {
            let (far, frr) = self.rates(t);
            (far - frr).abs()
        }).collect();
        let min = gaps.iter().copied().fold(f64::INFINITY, f64::min);
        let i = gaps.iter().position(|&g| g <= min + 1e-12).unwrap();
        let (far, frr) = self.rates(ts[i]);
        (50.0 * (far + frr), ts[i])
    }

    pub fn hter(&self, t: f64) -> f64 {
        let (far, frr) = self.rates(t);
        50.0 * (far + frr)
    }
}
