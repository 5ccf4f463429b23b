//! Presentation-attack detection metrics.
//!
//! Scores are probabilities of bona fide: a sample is accepted as bona fide
//! iff `score >= threshold`. FAR is the fraction of attacks accepted, FRR
//! the fraction of bona fide samples rejected. Rates in reports are
//! percentages.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;

pub const BONA_FIDE: u8 = 1;
pub const ATTACK: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub records: Vec<ScoreRecord>,
}

/// One ROC operating point; rates are fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorRates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

/// Test-set metrics at the development set's EER threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
    pub eer: f64,
    pub auc: f64,
    pub threshold: f64,
    pub n_bona_fide: usize,
    pub n_attack: usize,
}

/// Accepted/rejected counts at one threshold.
#[derive(Clone, Copy, Debug)]
struct Counts {
    threshold: f64,
    attacks_accepted: usize,
    bona_rejected: usize,
}

impl ScoreSet {
    /// Builds a set, rejecting non-finite scores and non-binary labels.
    pub fn new(records: Vec<ScoreRecord>) -> Result<Self, MetricsError> {
        for (i, r) in records.iter().enumerate() {
            if !r.score.is_finite() {
                return Err(MetricsError::NonFiniteScore(r.sample_id.clone()));
            }
            if r.label > 1 {
                return Err(MetricsError::Parse { row: i + 1, detail: format!("label {} is not 0 or 1", r.label) });
            }
        }
        Ok(Self { records })
    }

    /// From parallel score/label slices with generated ids.
    pub fn from_pairs(scores: &[f64], labels: &[u8]) -> Result<Self, MetricsError> {
        Self::new(
            scores
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&score, &label))| ScoreRecord { sample_id: i.to_string(), score, label })
                .collect(),
        )
    }

    /// `(bona fide, attack)` counts.
    pub fn counts(&self) -> (usize, usize) {
        let bona = self.records.iter().filter(|r| r.label == BONA_FIDE).count();
        (bona, self.records.len() - bona)
    }

    fn two_class(&self) -> Result<(usize, usize), MetricsError> {
        match self.counts() {
            (b, a) if b > 0 && a > 0 => Ok((b, a)),
            (bona_fide, attack) => Err(MetricsError::SingleClass { bona_fide, attack }),
        }
    }

    /// Counts at every candidate threshold, ascending: one below the minimum,
    /// every distinct score, one above the maximum.
    fn sweep(&self) -> Result<Vec<Counts>, MetricsError> {
        let (n_bona, n_attack) = self.two_class()?;
        let mut sorted: Vec<(f64, u8)> = self.records.iter().map(|r| (r.score, r.label)).collect();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
        let (lo, hi) = (sorted[0].0, sorted[sorted.len() - 1].0);
        let mut out = Vec::with_capacity(sorted.len() + 2);
        out.push(Counts { threshold: lo - 1.0, attacks_accepted: n_attack, bona_rejected: 0 });
        // at threshold t every sample below t is rejected
        let (mut bona_below, mut attack_below) = (0, 0);
        let mut i = 0;
        while i < sorted.len() {
            let t = sorted[i].0;
            out.push(Counts { threshold: t, attacks_accepted: n_attack - attack_below, bona_rejected: bona_below });
            while i < sorted.len() && sorted[i].0 == t {
                if sorted[i].1 == BONA_FIDE {
                    bona_below += 1;
                } else {
                    attack_below += 1;
                }
                i += 1;
            }
        }
        out.push(Counts { threshold: hi + 1.0, attacks_accepted: 0, bona_rejected: n_bona });
        Ok(out)
    }

    /// Counts at an arbitrary threshold.
    fn at(&self, threshold: f64) -> Result<(usize, usize, usize, usize), MetricsError> {
        let (n_bona, n_attack) = self.two_class()?;
        let accepted = |label| self.records.iter().filter(|r| r.label == label && r.score >= threshold).count();
        Ok((accepted(ATTACK), n_bona - accepted(BONA_FIDE), n_bona, n_attack))
    }
}

/// ROC points at ascending thresholds. FAR is non-increasing and FRR
/// non-decreasing along the list.
pub fn roc_curve(set: &ScoreSet) -> Result<Vec<RocPoint>, MetricsError> {
    let (n_bona, n_attack) = set.two_class()?;
    Ok(set
        .sweep()?
        .into_iter()
        .map(|c| {
            let far = c.attacks_accepted as f64 / n_attack as f64;
            let frr = c.bona_rejected as f64 / n_bona as f64;
            RocPoint { threshold: c.threshold, far, frr, tpr: 1.0 - frr, fpr: far }
        })
        .collect())
}

/// Trapezoidal area under (fpr, tpr); equal to the probability that a random
/// bona fide sample outscores a random attack, ties counting one half.
pub fn auc(set: &ScoreSet) -> Result<f64, MetricsError> {
    let (n_bona, n_attack) = set.two_class()?;
    // Integer trapezoids: twice the area in units of 1/(n_bona*n_attack).
    let sweep = set.sweep()?;
    let mut twice = 0u128;
    for w in sweep.windows(2) {
        let (hi, lo) = (&w[0], &w[1]);
        let dx = (hi.attacks_accepted - lo.attacks_accepted) as u128;
        let y = ((n_bona - hi.bona_rejected) + (n_bona - lo.bona_rejected)) as u128;
        twice += dx * y;
    }
    Ok(twice as f64 / (2.0 * n_bona as f64 * n_attack as f64))
}

/// Closest-point EER: the threshold minimizing |FAR - FRR| (lowest such
/// threshold on ties), returning `(100 * (FAR + FRR) / 2, threshold)`.
pub fn eer(set: &ScoreSet) -> Result<(f64, f64), MetricsError> {
    let (n_bona, n_attack) = set.two_class()?;
    let gap = |c: &Counts| (c.attacks_accepted * n_bona).abs_diff(c.bona_rejected * n_attack);
    let sweep = set.sweep()?;
    let best = sweep.iter().fold(&sweep[0], |best, c| if gap(c) < gap(best) { c } else { best });
    let far = best.attacks_accepted as f64 / n_attack as f64;
    let frr = best.bona_rejected as f64 / n_bona as f64;
    Ok((50.0 * (far + frr), best.threshold))
}

/// APCER (attacks accepted), BPCER (bona fide rejected) and their mean, in
/// percent.
pub fn classification_error_rates(set: &ScoreSet, threshold: f64) -> Result<ErrorRates, MetricsError> {
    let (attacks_accepted, bona_rejected, n_bona, n_attack) = set.at(threshold)?;
    Ok(error_rates(100.0 * attacks_accepted as f64 / n_attack as f64, 100.0 * bona_rejected as f64 / n_bona as f64))
}

/// Combines APCER and BPCER percentages into the triple.
pub fn error_rates(apcer: f64, bpcer: f64) -> ErrorRates {
    ErrorRates { apcer, bpcer, acer: (apcer + bpcer) / 2.0 }
}

/// Half total error rate `(FAR + FRR) / 2` in percent at a fixed threshold.
pub fn hter(set: &ScoreSet, threshold: f64) -> Result<f64, MetricsError> {
    let (attacks_accepted, bona_rejected, n_bona, n_attack) = set.at(threshold)?;
    Ok(50.0 * (attacks_accepted as f64 / n_attack as f64 + bona_rejected as f64 / n_bona as f64))
}

/// Threshold from the dev set's EER point; error rates and HTER on test at
/// that threshold; EER and AUC of test.
pub fn metrics_report(dev: &ScoreSet, test: &ScoreSet) -> Result<MetricsReport, MetricsError> {
    let (_, threshold) = eer(dev)?;
    let rates = classification_error_rates(test, threshold)?;
    let (n_bona_fide, n_attack) = test.counts();
    Ok(MetricsReport {
        apcer: rates.apcer,
        bpcer: rates.bpcer,
        acer: rates.acer,
        hter: hter(test, threshold)?,
        eer: eer(test)?.0,
        auc: auc(test)?,
        threshold,
        n_bona_fide,
        n_attack,
    })
}

/// Rounds to two decimals for serialization.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[derive(Serialize)]
struct ReportJson {
    apcer: f64,
    bpcer: f64,
    acer: f64,
    hter: f64,
    eer: f64,
    auc: f64,
    threshold: f64,
    n_bona_fide: usize,
    n_attack: usize,
}

impl MetricsReport {
    /// JSON object with the report's fields; percentages rounded to two
    /// decimals.
    pub fn to_json(&self) -> String {
        let j = ReportJson {
            apcer: round2(self.apcer),
            bpcer: round2(self.bpcer),
            acer: round2(self.acer),
            hter: round2(self.hter),
            eer: round2(self.eer),
            auc: self.auc,
            threshold: self.threshold,
            n_bona_fide: self.n_bona_fide,
            n_attack: self.n_attack,
        };
        let mut s = serde_json::to_string_pretty(&j).expect("report serializes");
        s.push('\n');
        s
    }
}

fn lf_writer<W: std::io::Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

/// CSV `sample_id,score,label`.
pub fn scores_to_csv(set: &ScoreSet) -> Vec<u8> {
    let mut w = lf_writer(Vec::new());
    w.write_record(["sample_id", "score", "label"]).expect("in-memory write");
    for r in &set.records {
        w.serialize((&r.sample_id, r.score, r.label)).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn scores_from_csv(bytes: &[u8]) -> Result<ScoreSet, MetricsError> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let mut records = Vec::new();
    for (i, row) in rdr.deserialize::<ScoreRecord>().enumerate() {
        records.push(row.map_err(|e| MetricsError::Parse { row: i + 1, detail: e.to_string() })?);
    }
    ScoreSet::new(records)
}

pub fn write_scores(path: &Path, set: &ScoreSet) -> std::io::Result<()> {
    fs::write(path, scores_to_csv(set))
}

pub fn read_scores(path: &Path) -> Result<ScoreSet, MetricsError> {
    let bytes = fs::read(path).map_err(|e| MetricsError::Parse { row: 0, detail: format!("{}: {e}", path.display()) })?;
    scores_from_csv(&bytes)
}

/// CSV `threshold,far,frr,tpr,fpr`.
pub fn roc_to_csv(points: &[RocPoint]) -> Vec<u8> {
    let mut w = lf_writer(Vec::new());
    for p in points {
        w.serialize(p).expect("in-memory write");
    }
    if points.is_empty() {
        w.write_record(["threshold", "far", "frr", "tpr", "fpr"]).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(bona: &[f64], attack: &[f64]) -> ScoreSet {
        let scores: Vec<f64> = bona.iter().chain(attack).copied().collect();
        let labels: Vec<u8> = bona.iter().map(|_| 1).chain(attack.iter().map(|_| 0)).collect();
        ScoreSet::from_pairs(&scores, &labels).unwrap()
    }

    #[test]
    fn perfect_separation() {
        let s = set(&[1.0], &[0.0]);
        let r = classification_error_rates(&s, 0.5).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (0.0, 0.0, 0.0));
        assert_eq!(auc(&s).unwrap(), 1.0);
        assert_eq!(eer(&s).unwrap().0, 0.0);
        assert_eq!(hter(&s, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn inverted_pair_has_eer_100() {
        let s = set(&[0.4], &[0.6]);
        assert_eq!(eer(&s).unwrap(), (100.0, 0.6));
        assert_eq!(auc(&s).unwrap(), 0.0);
    }

    #[test]
    fn identical_scores() {
        let s = set(&[0.3, 0.3], &[0.3, 0.3, 0.3]);
        assert_eq!(auc(&s).unwrap(), 0.5);
        for p in roc_curve(&s).unwrap() {
            assert!(p.far + p.frr == 1.0, "{p:?}");
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let s = set(&[0.1, 0.2], &[]);
        assert!(matches!(auc(&s), Err(MetricsError::SingleClass { bona_fide: 2, attack: 0 })));
        assert!(matches!(roc_curve(&s), Err(MetricsError::SingleClass { .. })));
    }

    #[test]
    fn roc_has_sentinels_and_is_monotone() {
        let s = set(&[0.9, 0.6, 0.6], &[0.1, 0.6, 0.3]);
        let roc = roc_curve(&s).unwrap();
        assert_eq!(roc.len(), 4 + 2);
        assert_eq!((roc[0].far, roc[0].frr), (1.0, 0.0));
        assert_eq!((roc[5].far, roc[5].frr), (0.0, 1.0));
        for w in roc.windows(2) {
            assert!(w[0].threshold < w[1].threshold);
            assert!(w[1].far <= w[0].far && w[1].frr >= w[0].frr);
        }
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        assert!(matches!(ScoreSet::from_pairs(&[f64::NAN], &[1]), Err(MetricsError::NonFiniteScore(_))));
    }

    #[test]
    fn json_has_exactly_the_report_fields() {
        let s = set(&[0.9, 0.7, 0.2], &[0.1, 0.8]);
        let r = metrics_report(&s, &s).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["acer", "apcer", "auc", "bpcer", "eer", "hter", "n_attack", "n_bona_fide", "threshold"]);
        assert_eq!(r.acer, (r.apcer + r.bpcer) / 2.0);
    }

    #[test]
    fn scores_csv_round_trips() {
        let s = set(&[0.25, 1.0], &[0.0, 0.123456789]);
        let bytes = scores_to_csv(&s);
        assert!(bytes.starts_with(b"sample_id,score,label\n"));
        assert_eq!(scores_from_csv(&bytes).unwrap(), s);
        assert!(matches!(scores_from_csv(b"sample_id,score,label\na,x,1\n"), Err(MetricsError::Parse { row: 1, .. })));
    }

    #[test]
    fn roc_csv_header() {
        let s = set(&[0.9], &[0.1]);
        let text = String::from_utf8(roc_to_csv(&roc_curve(&s).unwrap())).unwrap();
        assert!(text.starts_with("threshold,far,frr,tpr,fpr\n"));
        assert_eq!(text.lines().count(), 1 + 4);
    }
}
