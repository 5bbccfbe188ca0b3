//! Scoring metrics over per-item evaluation records and the weighted
//! composite that scalarizes them.
//!
//! Five quality metrics are computed from a prompt's [`ItemRecord`]s:
//!
//! - **ACC** — fraction of items answered correctly; an item the model did
//!   not follow (no parseable answer) counts as incorrect.
//! - **ECE** — expected calibration error over equal-width confidence bins:
//!   `sum_i (|B_i|/N) * |acc(B_i) - conf(B_i)|` with confidence `c` assigned
//!   to bin `i` where `c` is in `((i-1)/n, i/n]`, and `c = 0` to bin 1.
//! - **AUROC** — Mann–Whitney statistic: correct records should outrank
//!   incorrect ones by confidence; ties count half.
//! - **PR-P / PR-N** — average precision for retrieving correct records by
//!   confidence, and incorrect records by inverse confidence.
//! - **IFR** — instruction-following rate, `n_scored / n_total`; reported
//!   alongside but excluded from the composite.
//!
//! Only followed records enter ECE/AUROC/PR; unfollowed records still count
//! against ACC and IFR. Degenerate cases (a metric's input class is empty)
//! are flagged and given fixed fallback values so the composite stays total.
//!
//! The composite is `value = sum_m w_m * normalized_m`, where ACC, AUROC and
//! PR-P pass through unchanged and ECE and PR-N are flipped (`1 - v`) so
//! higher is always better. Default weights are uniform (1/5 each).
//!
//! Every metric canonicalizes record order internally (sort by item id), so
//! all values are exactly invariant under permutation of the input.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::ItemRecord;

/// Default number of equal-width calibration bins.
pub const DEFAULT_ECE_BINS: usize = 10;

/// Tolerance for validating that custom composite weights sum to 1.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Fallback values substituted when a metric is degenerate.
///
/// AUROC falls back to chance level. PR falls back to the prevalence of its
/// target class among scored records. With zero scored records the prompt
/// earned no calibration evidence at all: ECE falls back to the worst case,
/// PR-P to 0 and PR-N to 1, so the composite gives no calibration credit.
pub const FALLBACK_AUROC: f64 = 0.5;
pub const FALLBACK_ECE_UNSCORED: f64 = 1.0;
pub const FALLBACK_PR_P_UNSCORED: f64 = 0.0;
pub const FALLBACK_PR_N_UNSCORED: f64 = 1.0;

/// The five composite-eligible metric names.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Acc,
    Ece,
    Auroc,
    PrP,
    PrN,
}

impl MetricName {
    pub const ALL: [MetricName; 5] = [
        MetricName::Acc,
        MetricName::Ece,
        MetricName::Auroc,
        MetricName::PrP,
        MetricName::PrN,
    ];
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MetricName::Acc => "acc",
            MetricName::Ece => "ece",
            MetricName::Auroc => "auroc",
            MetricName::PrP => "pr_p",
            MetricName::PrN => "pr_n",
        };
        f.write_str(s)
    }
}

/// Which record class a PR curve retrieves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrClass {
    /// Retrieve correct records, ranked by confidence descending.
    Positive,
    /// Retrieve incorrect records, ranked by inverse confidence descending
    /// (implemented as confidence ascending; identical ordering without the
    /// float hazard of materializing `1 - c`).
    Negative,
}

/// All metrics for one (prompt, dataset) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub acc: f64,
    pub ece: f64,
    pub auroc: f64,
    pub pr_p: f64,
    pub pr_n: f64,
    /// Instruction-following rate `n_scored / n_total`; not in the composite.
    pub ifr: f64,
    /// Number of followed (scored) records.
    pub n_scored: usize,
    /// Total records evaluated.
    pub n_total: usize,
    /// Metrics whose value is a documented fallback, sorted and deduped.
    pub degenerate: Vec<MetricName>,
}

/// One calibration bin: count, mean confidence, and accuracy of its members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Equal-width confidence binning over the scored records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBinning {
    pub n_bins: usize,
    pub bins: Vec<BinStat>,
}

/// A scalarized metric vector: the composite value plus the weights and
/// normalized per-metric terms that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeScore {
    pub value: f64,
    pub weights: BTreeMap<MetricName, f64>,
    pub normalized: BTreeMap<MetricName, f64>,
}

// ---------------------------------------------------------------------------
// record plumbing
// ---------------------------------------------------------------------------

fn validate_records(records: &[ItemRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    for r in records {
        if r.followed {
            match r.confidence {
                Some(c) if (0.0..=1.0).contains(&c) => {}
                Some(c) => {
                    return Err(Error::InvalidRecord(format!(
                        "item `{}` has confidence {c} outside [0, 1]",
                        r.item_id
                    )))
                }
                None => {
                    return Err(Error::InvalidRecord(format!(
                        "item `{}` is followed but has no confidence",
                        r.item_id
                    )))
                }
            }
            if r.predicted.is_none() {
                return Err(Error::InvalidRecord(format!(
                    "item `{}` is followed but has no predicted letter",
                    r.item_id
                )));
            }
        } else if r.correct || r.confidence.is_some() || r.predicted.is_some() {
            return Err(Error::InvalidRecord(format!(
                "item `{}` is unfollowed but carries an answer",
                r.item_id
            )));
        }
    }
    Ok(())
}

/// Clone the records in canonical (item id) order. Every metric works on
/// this ordering so values are exactly permutation-invariant.
fn canonical(records: &[ItemRecord]) -> Vec<ItemRecord> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    sorted
}

/// Followed records with their confidences, in canonical order.
fn scored(records: &[ItemRecord]) -> Vec<(String, f64, bool)> {
    canonical(records)
        .into_iter()
        .filter(|r| r.followed)
        .map(|r| {
            let c = r.confidence.expect("validated: followed implies confidence");
            (r.item_id, c, r.correct)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// individual metrics
// ---------------------------------------------------------------------------

/// Fraction of records answered correctly; unfollowed records count as
/// incorrect (their `correct` flag is false by construction).
pub fn accuracy(records: &[ItemRecord]) -> Result<f64> {
    validate_records(records)?;
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Instruction-following rate: followed records over total records.
pub fn instruction_following_rate(records: &[ItemRecord]) -> Result<f64> {
    validate_records(records)?;
    let followed = records.iter().filter(|r| r.followed).count();
    Ok(followed as f64 / records.len() as f64)
}

/// Index of the bin holding confidence `c` under `n` equal-width bins:
/// bin `i` (0-based) covers `(i/n, (i+1)/n]`, with `c = 0` in bin 0.
///
/// Computed arithmetically, then corrected against the defining interval
/// predicate with the exact float comparisons, so the result agrees with a
/// literal interval scan for every representable `c`.
fn bin_index(c: f64, n_bins: usize) -> usize {
    debug_assert!((0.0..=1.0).contains(&c));
    if c == 0.0 {
        return 0;
    }
    let n = n_bins as f64;
    // 1-based guess, then enforce (i-1)/n < c <= i/n exactly.
    let mut i = ((c * n).ceil() as usize).clamp(1, n_bins);
    while i > 1 && c <= ((i - 1) as f64) / n {
        i -= 1;
    }
    while i < n_bins && c > (i as f64) / n {
        i += 1;
    }
    i - 1
}

/// Per-bin counts, mean confidence, and accuracy over the scored records.
/// Empty bins report zero for both statistics.
pub fn calibration_binning(records: &[ItemRecord], n_bins: usize) -> Result<CalibrationBinning> {
    validate_records(records)?;
    if n_bins == 0 {
        return Err(Error::Config("ECE bin count must be at least 1".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut correct_sum = vec![0usize; n_bins];
    for (_, c, correct) in scored(records) {
        let b = bin_index(c, n_bins);
        count[b] += 1;
        conf_sum[b] += c;
        correct_sum[b] += correct as usize;
    }
    let bins = (0..n_bins)
        .map(|b| BinStat {
            count: count[b],
            mean_confidence: if count[b] == 0 {
                0.0
            } else {
                conf_sum[b] / count[b] as f64
            },
            accuracy: if count[b] == 0 {
                0.0
            } else {
                correct_sum[b] as f64 / count[b] as f64
            },
        })
        .collect();
    Ok(CalibrationBinning { n_bins, bins })
}

/// Expected calibration error over `n_bins` equal-width bins.
///
/// Only followed records participate; `N` is the scored count. With zero
/// scored records returns the documented worst-case fallback of 1.0.
pub fn expected_calibration_error(records: &[ItemRecord], n_bins: usize) -> Result<f64> {
    let binning = calibration_binning(records, n_bins)?;
    let n_scored: usize = binning.bins.iter().map(|b| b.count).sum();
    if n_scored == 0 {
        return Ok(FALLBACK_ECE_UNSCORED);
    }
    let n = n_scored as f64;
    Ok(binning
        .bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.count as f64 / n) * (b.accuracy - b.mean_confidence).abs())
        .sum())
}

/// AUROC as the Mann–Whitney statistic `(wins + 0.5 * ties) / (n_pos * n_neg)`
/// over (correct, incorrect) pairs ranked by confidence, computed via
/// midranks. Returns the chance-level fallback 0.5 when either class is
/// empty among the scored records.
pub fn auroc(records: &[ItemRecord]) -> Result<f64> {
    validate_records(records)?;
    let mut s = scored(records);
    let n_pos = s.iter().filter(|(_, _, c)| *c).count();
    let n_neg = s.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(FALLBACK_AUROC);
    }
    // Midrank assignment: sort by confidence (ids break ties only for
    // determinism of the walk; midranks depend on confidence groups alone).
    s.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("validated finite").then(a.0.cmp(&b.0)));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j < s.len() && s[j].1 == s[i].1 {
            j += 1;
        }
        // Group occupies 1-based ranks i+1 ..= j; midrank is their mean.
        let midrank = ((i + 1) + j) as f64 / 2.0;
        for item in &s[i..j] {
            if item.2 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let np = n_pos as f64;
    let nn = n_neg as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Average precision for retrieving one class of scored records.
///
/// Records are ranked by confidence (descending for the positive class,
/// ascending for the negative class — equivalent to `1 - c` descending),
/// ties broken by item id ascending. AP is the mean over target-class
/// records of precision at their rank. Falls back to the class prevalence
/// when the target class is empty, and to the documented unscored fallbacks
/// when nothing was scored at all.
pub fn pr_auc(records: &[ItemRecord], class: PrClass) -> Result<f64> {
    validate_records(records)?;
    let mut s = scored(records);
    if s.is_empty() {
        return Ok(match class {
            PrClass::Positive => FALLBACK_PR_P_UNSCORED,
            PrClass::Negative => FALLBACK_PR_N_UNSCORED,
        });
    }
    let is_target = |correct: bool| match class {
        PrClass::Positive => correct,
        PrClass::Negative => !correct,
    };
    let n_target = s.iter().filter(|(_, _, c)| is_target(*c)).count();
    if n_target == 0 {
        // Class prevalence of an empty class is 0.
        return Ok(0.0);
    }
    match class {
        PrClass::Positive => {
            s.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)))
        }
        PrClass::Negative => {
            s.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite").then(a.0.cmp(&b.0)))
        }
    }
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (rank0, (_, _, correct)) in s.iter().enumerate() {
        if is_target(*correct) {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / n_target as f64)
}

/// Compute the full metric vector, with degenerate flags and fallbacks.
pub fn compute_metrics(records: &[ItemRecord], n_bins: usize) -> Result<MetricVector> {
    validate_records(records)?;
    let acc = accuracy(records)?;
    let ifr = instruction_following_rate(records)?;
    let n_total = records.len();
    let s = scored(records);
    let n_scored = s.len();
    let n_pos = s.iter().filter(|(_, _, c)| *c).count();
    let n_neg = n_scored - n_pos;

    let mut degenerate = Vec::new();
    let ece = expected_calibration_error(records, n_bins)?;
    if n_scored == 0 {
        degenerate.push(MetricName::Ece);
    }
    let auroc_v = auroc(records)?;
    if n_pos == 0 || n_neg == 0 {
        degenerate.push(MetricName::Auroc);
    }
    let pr_p = pr_auc(records, PrClass::Positive)?;
    if n_pos == 0 {
        degenerate.push(MetricName::PrP);
    }
    let pr_n = pr_auc(records, PrClass::Negative)?;
    if n_neg == 0 {
        degenerate.push(MetricName::PrN);
    }
    degenerate.sort();
    degenerate.dedup();

    Ok(MetricVector {
        acc,
        ece,
        auroc: auroc_v,
        pr_p,
        pr_n,
        ifr,
        n_scored,
        n_total,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// composite
// ---------------------------------------------------------------------------

fn default_weights() -> BTreeMap<MetricName, f64> {
    MetricName::ALL.iter().map(|m| (*m, 0.2)).collect()
}

/// Normalize the five metrics so higher is better (ECE and PR-N are flipped
/// to `1 - v`) and combine them with the given weights (uniform 1/5 by
/// default). Custom weights must cover exactly the five metrics and sum to
/// 1 within `1e-9`.
pub fn normalize_and_compose(
    metrics: &MetricVector,
    weights: Option<&BTreeMap<MetricName, f64>>,
) -> Result<CompositeScore> {
    let weights = match weights {
        Some(w) => {
            if w.len() != MetricName::ALL.len()
                || MetricName::ALL.iter().any(|m| !w.contains_key(m))
            {
                return Err(Error::Config(
                    "composite weights must cover exactly acc, ece, auroc, pr_p, pr_n".into(),
                ));
            }
            if let Some((m, v)) = w.iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
                return Err(Error::Config(format!(
                    "composite weight for {m} is invalid: {v}"
                )));
            }
            let sum: f64 = w.values().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(Error::WeightSum { sum });
            }
            w.clone()
        }
        None => default_weights(),
    };

    let mut normalized = BTreeMap::new();
    normalized.insert(MetricName::Acc, metrics.acc);
    normalized.insert(MetricName::Ece, 1.0 - metrics.ece);
    normalized.insert(MetricName::Auroc, metrics.auroc);
    normalized.insert(MetricName::PrP, metrics.pr_p);
    normalized.insert(MetricName::PrN, 1.0 - metrics.pr_n);

    let value = MetricName::ALL
        .iter()
        .map(|m| weights[m] * normalized[m])
        .sum();

    Ok(CompositeScore {
        value,
        weights,
        normalized,
    })
}

// ===========================================================================
// tests
// ===========================================================================
