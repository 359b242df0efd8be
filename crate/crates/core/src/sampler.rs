//! Demonstration sample scoring, selection and ordering.
//!
//! Samples whose highest-logit pool word belongs to another class are
//! ineligible. Eligible samples are scored on the top-`N_l` ranking of the
//! refined pool, where `N_l` is the size of the sample's own class list, using
//! only positions held by words of that class.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::ClassWordPool;
use crate::error::{Error, Result};
use crate::refiner::LogitMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMethod {
    /// Sum of the logits of own-class words among the top `N_l`.
    TopLogitSum,
    /// Linear rank weights `2(N_l - i) / ((N_l + 1) N_l)` of own-class words
    /// among the top `N_l`.
    RankWeighted,
}

/// Scoring method requested on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringChoice {
    Sum,
    Rank,
    #[default]
    Auto,
}

/// Fraction of eligible samples with a negative own-class top-`N_l` logit
/// above which `Auto` switches to rank weighting.
pub const AUTO_NEGATIVE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: usize,
    pub class: String,
    pub method: ScoringMethod,
    /// `None` for ineligible samples.
    pub score: Option<f64>,
    pub eligible: bool,
}

/// Word indices sorted by logit, highest first; ties keep pool order.
pub fn rank_words(logits: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Eligibility of every matrix row: the argmax word (first wins on ties)
/// must belong to the row's own class. Matrix columns must be the pool's
/// words in pool order.
pub fn misprediction_filter(matrix: &LogitMatrix, pool: &ClassWordPool) -> Result<Vec<bool>> {
    check_columns(matrix, pool)?;
    let classes = pool.flat_classes();
    (0..matrix.rows())
        .map(|r| {
            let own = pool
                .class_index(&matrix.labels[r])
                .ok_or_else(|| Error::UnknownClass(matrix.labels[r].clone()))?;
            let row = matrix.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            Ok(!row.is_empty() && classes[best] == own)
        })
        .collect()
}

fn check_columns(matrix: &LogitMatrix, pool: &ClassWordPool) -> Result<()> {
    if matrix.words != pool.flat_words() {
        return Err(Error::Invalid(
            "logit matrix columns must match the pool's words".into(),
        ));
    }
    Ok(())
}

fn own_class(pool: &ClassWordPool, class: &str) -> Result<(usize, usize)> {
    let ci = pool
        .class_index(class)
        .ok_or_else(|| Error::UnknownClass(class.to_string()))?;
    let n = pool.words_of(class).map_or(0, <[String]>::len);
    if n == 0 {
        return Err(Error::NoSeparableWords(class.to_string()));
    }
    Ok((ci, n))
}

/// Ranks (0-based) within the top `N_l` held by words of `class`, together
/// with those words' positions in `logits`.
fn own_top_ranks(
    logits: &[f64],
    pool: &ClassWordPool,
    class: &str,
) -> Result<(usize, Vec<(usize, usize)>)> {
    let (ci, n) = own_class(pool, class)?;
    if logits.len() != pool.len() {
        return Err(Error::Invalid("one logit per pool word required".into()));
    }
    let classes = pool.flat_classes();
    let hits = rank_words(logits)
        .into_iter()
        .take(n)
        .enumerate()
        .filter(|&(_, w)| classes[w] == ci)
        .collect();
    Ok((n, hits))
}

/// Top-logit summation score. `logits` is aligned with `pool.flat_words()`.
pub fn score_top_logit_sum(logits: &[f64], pool: &ClassWordPool, class: &str) -> Result<f64> {
    let (_, hits) = own_top_ranks(logits, pool, class)?;
    Ok(hits.iter().map(|&(_, w)| logits[w]).sum())
}

/// Weight of rank `i` (0-based) among `n` positions.
pub fn rank_weight(n: usize, i: usize) -> f64 {
    assert!(i < n, "rank {i} outside top {n}");
    (2 * (n - i)) as f64 / ((n + 1) * n) as f64
}

/// Rank-weighted counting score in `[0, 1]`. The integer weight numerators
/// are summed before the single division, so the result does not depend on
/// summation order.
pub fn score_rank_weighted(logits: &[f64], pool: &ClassWordPool, class: &str) -> Result<f64> {
    let (n, hits) = own_top_ranks(logits, pool, class)?;
    let numerator: usize = hits.iter().map(|&(rank, _)| 2 * (n - rank)).sum();
    Ok(numerator as f64 / ((n + 1) * n) as f64)
}

fn score_with(
    method: ScoringMethod,
    logits: &[f64],
    pool: &ClassWordPool,
    class: &str,
) -> Result<f64> {
    match method {
        ScoringMethod::TopLogitSum => score_top_logit_sum(logits, pool, class),
        ScoringMethod::RankWeighted => score_rank_weighted(logits, pool, class),
    }
}

/// Resolves `Auto` by the negative-logit rule over eligible rows.
pub fn resolve_method(
    choice: ScoringChoice,
    matrix: &LogitMatrix,
    pool: &ClassWordPool,
    eligible: &[bool],
) -> Result<ScoringMethod> {
    match choice {
        ScoringChoice::Sum => Ok(ScoringMethod::TopLogitSum),
        ScoringChoice::Rank => Ok(ScoringMethod::RankWeighted),
        ScoringChoice::Auto => {
            let mut n_eligible = 0usize;
            let mut negative = 0usize;
            for r in (0..matrix.rows()).filter(|&r| eligible[r]) {
                n_eligible += 1;
                let row = matrix.row(r);
                let (_, hits) = own_top_ranks(row, pool, &matrix.labels[r])?;
                if hits.iter().any(|&(_, w)| row[w] < 0.0) {
                    negative += 1;
                }
            }
            let frac = if n_eligible == 0 {
                0.0
            } else {
                negative as f64 / n_eligible as f64
            };
            Ok(if frac > AUTO_NEGATIVE_FRACTION {
                ScoringMethod::RankWeighted
            } else {
                ScoringMethod::TopLogitSum
            })
        }
    }
}

/// Filters and scores every row of a matrix over the refined pool.
pub fn score_samples(
    matrix: &LogitMatrix,
    pool: &ClassWordPool,
    choice: ScoringChoice,
) -> Result<(ScoringMethod, Vec<SampleScore>)> {
    let eligible = misprediction_filter(matrix, pool)?;
    let method = resolve_method(choice, matrix, pool, &eligible)?;
    let scores = (0..matrix.rows())
        .map(|r| {
            let class = matrix.labels[r].clone();
            let score = if eligible[r] {
                Some(score_with(method, matrix.row(r), pool, &class)?)
            } else {
                None
            };
            Ok(SampleScore {
                sample_id: matrix.sample_ids[r],
                class,
                method,
                score,
                eligible: eligible[r],
            })
        })
        .collect::<Result<_>>()?;
    Ok((method, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub sample_id: usize,
    pub class: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationPlan {
    pub order: Vec<PlanEntry>,
    pub k: usize,
    pub balanced: bool,
}

impl DemonstrationPlan {
    pub fn sample_ids(&self) -> Vec<usize> {
        self.order.iter().map(|e| e.sample_id).collect()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

fn by_score_then_id(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Top-`k` eligible samples per class, interleaved tier by tier with classes
/// ordered by their best score. The unbalanced variant then drops the single
/// highest-scoring pair.
pub fn select_and_order(
    scores: &[SampleScore],
    classes: &[String],
    k: usize,
    balanced: bool,
) -> Result<DemonstrationPlan> {
    if k == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let mut per_class: Vec<(usize, Vec<(usize, f64)>)> = Vec::with_capacity(classes.len());
    for (ci, class) in classes.iter().enumerate() {
        let mut ranked: Vec<(usize, f64)> = scores
            .iter()
            .filter(|s| &s.class == class && s.eligible)
            .filter_map(|s| s.score.map(|v| (s.sample_id, v)))
            .collect();
        if ranked.len() < k {
            return Err(Error::InsufficientSamples {
                class: class.clone(),
                available: ranked.len(),
                required: k,
            });
        }
        ranked.sort_by(by_score_then_id);
        ranked.truncate(k);
        per_class.push((ci, ranked));
    }
    for s in scores {
        if !classes.contains(&s.class) {
            return Err(Error::UnknownClass(s.class.clone()));
        }
    }
    per_class.sort_by(|(ca, a), (cb, b)| {
        b[0].1
            .partial_cmp(&a[0].1)
            .unwrap_or(Ordering::Equal)
            .then(ca.cmp(cb))
    });
    let mut order = Vec::with_capacity(k * classes.len());
    for tier in 0..k {
        for (ci, ranked) in &per_class {
            let (sample_id, score) = ranked[tier];
            order.push(PlanEntry {
                sample_id,
                class: classes[*ci].clone(),
                score,
            });
        }
    }
    if !balanced {
        order.remove(0);
    }
    Ok(DemonstrationPlan { order, k, balanced })
}
