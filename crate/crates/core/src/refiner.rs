//! Class-word pool refinement.
//!
//! A word survives when its mean zero-shot logit over samples of its own class
//! is strictly greater than its mean over samples of every other class, and
//! its point-biserial correlation with the same-label indicator is positive.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backend::{batch_query, LogitBackend, LogitQuery};
use crate::corpus::{render_zero_shot, ClassWordPool, LabeledDataset, PromptTemplate};
use crate::error::{Error, Result};

/// Logits of a fixed word list for every sample of a dataset (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitMatrix {
    pub sample_ids: Vec<usize>,
    pub labels: Vec<String>,
    pub words: Vec<String>,
    values: Vec<f64>,
}

impl LogitMatrix {
    pub fn new(
        sample_ids: Vec<usize>,
        labels: Vec<String>,
        words: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if sample_ids.len() != labels.len() || values.len() != sample_ids.len() * words.len() {
            return Err(Error::Invalid("logit matrix dimensions disagree".into()));
        }
        Ok(Self {
            sample_ids,
            labels,
            words,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.words.len();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.words.len() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, col)).collect()
    }

    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Sub-matrix over `words`, in the given order.
    pub fn restrict(&self, words: &[String]) -> Result<Self> {
        let cols: Vec<usize> = words
            .iter()
            .map(|w| {
                self.word_index(w)
                    .ok_or_else(|| Error::Invalid(format!("word {w:?} not in logit matrix")))
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(self.rows() * cols.len());
        for r in 0..self.rows() {
            values.extend(cols.iter().map(|&c| self.get(r, c)));
        }
        Self::new(
            self.sample_ids.clone(),
            self.labels.clone(),
            words.to_vec(),
            values,
        )
    }
}

/// Zero-shot logits of every pool word for every sample.
pub fn zero_shot_logit_matrix(
    data: &LabeledDataset,
    pool: &ClassWordPool,
    template: &PromptTemplate,
    backend: &dyn LogitBackend,
    parallelism: usize,
) -> Result<LogitMatrix> {
    let words = pool.flat_words();
    let queries = data
        .examples()
        .iter()
        .map(|ex| LogitQuery::new(render_zero_shot(template, &ex.text), words.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let tables = batch_query(backend, &queries, parallelism)?;
    let mut values = Vec::with_capacity(words.len() * tables.len());
    for t in &tables {
        values.extend(t.aligned(&words)?);
    }
    LogitMatrix::new(
        data.examples().iter().map(|e| e.id).collect(),
        data.examples().iter().map(|e| e.label.clone()).collect(),
        words,
        values,
    )
}

fn label_indices(matrix: &LogitMatrix, pool: &ClassWordPool) -> Result<Vec<usize>> {
    matrix
        .labels
        .iter()
        .map(|l| {
            pool.class_index(l)
                .ok_or_else(|| Error::UnknownClass(l.clone()))
        })
        .collect()
}

/// Mean logit of each word per class: `means[word][class]`.
pub fn class_means(matrix: &LogitMatrix, pool: &ClassWordPool) -> Result<Vec<Vec<f64>>> {
    let labels = label_indices(matrix, pool)?;
    let nc = pool.num_classes();
    let mut counts = vec![0usize; nc];
    for &l in &labels {
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(pool.class_at(empty).to_string()));
    }
    let mut means = vec![vec![0.0; nc]; matrix.words.len()];
    for (r, &l) in labels.iter().enumerate() {
        for (col, v) in matrix.row(r).iter().enumerate() {
            means[col][l] += v;
        }
    }
    for row in &mut means {
        for (m, &n) in row.iter_mut().zip(&counts) {
            *m /= n as f64;
        }
    }
    Ok(means)
}

/// Words whose own-class mean strictly exceeds every other class mean.
pub fn dominance_filter(matrix: &LogitMatrix, pool: &ClassWordPool) -> Result<Vec<String>> {
    let means = class_means(matrix, pool)?;
    let mut kept = Vec::new();
    for (col, word) in matrix.words.iter().enumerate() {
        let own = pool
            .class_index_of(word)
            .ok_or_else(|| Error::Invalid(format!("word {word:?} not in pool")))?;
        if is_dominant(&means[col], own) {
            kept.push(word.clone());
        }
    }
    Ok(kept)
}

fn is_dominant(means: &[f64], own: usize) -> bool {
    means
        .iter()
        .enumerate()
        .all(|(c, &m)| c == own || means[own] > m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiserialStats {
    pub v0: f64,
    pub v1: f64,
    pub sigma: f64,
    pub n0: usize,
    pub n1: usize,
    pub r: f64,
}

/// Standard deviation used by the correlation; population form (no Bessel
/// correction).
pub fn spread(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Point-biserial correlation between `logits` and the same-label indicator
/// `mask`.
pub fn point_biserial(logits: &[f64], mask: &[bool]) -> Result<BiserialStats> {
    if logits.len() != mask.len() {
        return Err(Error::Invalid("logits and mask lengths differ".into()));
    }
    let (mut s0, mut s1, mut n0, mut n1) = (0.0, 0.0, 0usize, 0usize);
    for (&v, &same) in logits.iter().zip(mask) {
        if same {
            s0 += v;
            n0 += 1;
        } else {
            s1 += v;
            n1 += 1;
        }
    }
    if n0 == 0 || n1 == 0 {
        return Err(Error::Invalid(
            "point-biserial needs both same-label and other-label samples".into(),
        ));
    }
    let v0 = s0 / n0 as f64;
    let v1 = s1 / n1 as f64;
    let sigma = spread(logits);
    let n = (n0 + n1) as f64;
    let r = if sigma == 0.0 || v0 == v1 {
        0.0
    } else {
        let raw = (v0 - v1) / sigma * ((n0 as f64 * n1 as f64) / (n * n)).sqrt();
        raw.clamp(-1.0, 1.0)
    };
    Ok(BiserialStats {
        v0,
        v1,
        sigma,
        n0,
        n1,
        r,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    Dominance,
    Biserial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordVerdict {
    pub word: String,
    pub class: String,
    pub kept: bool,
    /// Stage that removed the word; `None` for kept words.
    pub stage: Option<FilterStage>,
    pub v0: f64,
    pub v1: f64,
    pub sigma: f64,
    pub r: f64,
    pub n0: usize,
    pub n1: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub words: Vec<WordVerdict>,
}

impl RefinementReport {
    pub fn kept(&self) -> impl Iterator<Item = &WordVerdict> {
        self.words.iter().filter(|w| w.kept)
    }

    pub fn dropped(&self) -> impl Iterator<Item = &WordVerdict> {
        self.words.iter().filter(|w| !w.kept)
    }

    /// Rebuilds the refined pool from the kept words, with classes in the
    /// order of `original`.
    pub fn refined_pool(&self, original: &ClassWordPool) -> Result<ClassWordPool> {
        let mut words: IndexMap<String, Vec<String>> = original
            .classes()
            .map(|c| (c.to_string(), Vec::new()))
            .collect();
        for v in self.kept() {
            words
                .get_mut(&v.class)
                .ok_or_else(|| Error::UnknownClass(v.class.clone()))?
                .push(v.word.clone());
        }
        if let Some((class, _)) = words.iter().find(|(_, list)| list.is_empty()) {
            return Err(Error::NoSeparableWords(class.clone()));
        }
        ClassWordPool::refined(words)
    }
}

/// Applies both filters to a precomputed matrix covering every pool word.
pub fn refine_from_matrix(
    matrix: &LogitMatrix,
    pool: &ClassWordPool,
) -> Result<(ClassWordPool, RefinementReport)> {
    let labels = label_indices(matrix, pool)?;
    let words = pool.flat_words();
    let classes = pool.flat_classes();
    let sub = matrix.restrict(&words)?;
    let means = class_means(&sub, pool)?;
    let mut verdicts = Vec::with_capacity(words.len());
    for (col, (word, &own)) in words.iter().zip(&classes).enumerate() {
        let mask: Vec<bool> = labels.iter().map(|&l| l == own).collect();
        let stats = point_biserial(&sub.column(col), &mask)?;
        let stage = if !is_dominant(&means[col], own) {
            Some(FilterStage::Dominance)
        } else if stats.r <= 0.0 {
            Some(FilterStage::Biserial)
        } else {
            None
        };
        verdicts.push(WordVerdict {
            word: word.clone(),
            class: pool.class_at(own).to_string(),
            kept: stage.is_none(),
            stage,
            v0: stats.v0,
            v1: stats.v1,
            sigma: stats.sigma,
            r: stats.r,
            n0: stats.n0,
            n1: stats.n1,
        });
    }
    let report = RefinementReport { words: verdicts };
    let refined = report.refined_pool(pool)?;
    Ok((refined, report))
}

/// Queries zero-shot logits for the training set and refines the pool.
pub fn refine_pool(
    train: &LabeledDataset,
    pool: &ClassWordPool,
    template: &PromptTemplate,
    backend: &dyn LogitBackend,
    parallelism: usize,
) -> Result<(ClassWordPool, RefinementReport)> {
    train.check_against(pool)?;
    let matrix = zero_shot_logit_matrix(train, pool, template, backend, parallelism)?;
    refine_from_matrix(&matrix, pool)
}
