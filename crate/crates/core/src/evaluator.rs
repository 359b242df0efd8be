//! Prediction, accuracy reports and ordering ablations.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{batch_query, BackendError, LogitBackend, LogitQuery, LogitTable};
use crate::corpus::{
    class_name_word, render_prompt, ClassWordPool, DemoRef, LabeledDataset, PromptTemplate,
};
use crate::error::{Error, Result};
use crate::labeler::LabelSequences;
use crate::sampler::DemonstrationPlan;

/// Which candidate words are scored at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// The bare class names.
    ClassNames,
    /// Position-0 word of each label sequence.
    #[default]
    AnchorWords,
    /// Every word of every label sequence.
    InsertedWords,
    /// Every word of the refined pool.
    FullPool,
}

impl fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictionMode::ClassNames => "class_names",
            PredictionMode::AnchorWords => "anchor_words",
            PredictionMode::InsertedWords => "inserted_words",
            PredictionMode::FullPool => "full_pool",
        })
    }
}

/// Candidate words with the class each maps to, in class order then
/// within-class order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub words: Vec<String>,
    pub classes: Vec<String>,
}

impl CandidateSet {
    pub fn new(
        mode: PredictionMode,
        class_names: &[String],
        labels: &LabelSequences,
        refined: &ClassWordPool,
    ) -> Result<Self> {
        let mut words = Vec::new();
        let mut classes = Vec::new();
        for class in class_names {
            let list: Vec<String> = match mode {
                PredictionMode::ClassNames => vec![class_name_word(class)],
                PredictionMode::AnchorWords => vec![labels.anchor(class)?.to_string()],
                PredictionMode::InsertedWords => labels.words(class)?.to_vec(),
                PredictionMode::FullPool => refined
                    .words_of(class)
                    .ok_or_else(|| Error::UnknownClass(class.clone()))?
                    .to_vec(),
            };
            for w in list {
                if words.contains(&w) {
                    return Err(Error::Invalid(format!(
                        "candidate {w:?} maps to more than one class"
                    )));
                }
                words.push(w);
                classes.push(class.clone());
            }
        }
        if words.is_empty() {
            return Err(Error::Invalid("empty candidate set".into()));
        }
        Ok(Self { words, classes })
    }

    /// Class of the highest logit; the first listed candidate wins ties.
    pub fn argmax_class(&self, logits: &[f64]) -> &str {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[best] {
                best = i;
            }
        }
        &self.classes[best]
    }
}

/// Everything needed to render k-shot prompts: template, ordered
/// demonstrations (text and class), label sequences, and the character
/// budget beyond which demo texts are truncated.
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub template: PromptTemplate,
    pub demos: Vec<(String, String)>,
    pub labels: LabelSequences,
    pub budget: Option<usize>,
}

impl PromptContext {
    pub fn from_plan(
        template: &PromptTemplate,
        plan: &DemonstrationPlan,
        train: &LabeledDataset,
        labels: &LabelSequences,
        budget: Option<usize>,
    ) -> Result<Self> {
        let demos = plan
            .order
            .iter()
            .map(|e| {
                train
                    .get(e.sample_id)
                    .map(|ex| (ex.text.clone(), e.class.clone()))
                    .ok_or_else(|| {
                        Error::Invalid(format!("plan sample {} not in training set", e.sample_id))
                    })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            template: template.clone(),
            demos,
            labels: labels.clone(),
            budget,
        })
    }

    /// Renders the prompt for `query`, returning the fraction of demo text
    /// characters kept (1.0 when nothing was truncated).
    pub fn render(&self, query: &str) -> Result<(String, f64)> {
        let words: Vec<&[String]> = self
            .demos
            .iter()
            .map(|(_, class)| self.labels.words(class))
            .collect::<Result<_>>()?;
        let build = |texts: &[&str]| {
            let demos: Vec<DemoRef<'_>> = texts
                .iter()
                .zip(&words)
                .map(|(t, w)| DemoRef { text: t, words: w })
                .collect();
            render_prompt(&self.template, &demos, query)
        };
        let texts: Vec<&str> = self.demos.iter().map(|(t, _)| t.as_str()).collect();
        let prompt = build(&texts);
        let Some(budget) = self.budget else {
            return Ok((prompt, 1.0));
        };
        let length = prompt.chars().count();
        if length <= budget {
            return Ok((prompt, 1.0));
        }
        let lens: Vec<usize> = texts.iter().map(|t| t.chars().count()).collect();
        let total: usize = lens.iter().sum();
        let overhead = length - total;
        if overhead > budget || total == 0 {
            return Err(BackendError::PromptTooLong { length, budget }.into());
        }
        let fraction = (budget - overhead) as f64 / total as f64;
        let kept: Vec<&str> = texts
            .iter()
            .zip(&lens)
            .map(|(t, &n)| head_chars(t, (n as f64 * fraction).floor() as usize))
            .collect();
        let kept_chars: usize = kept.iter().map(|t| t.chars().count()).sum();
        Ok((build(&kept), kept_chars as f64 / total as f64))
    }

    pub fn with_order(&self, order: &[usize]) -> Self {
        Self {
            demos: order.iter().map(|&i| self.demos[i].clone()).collect(),
            ..self.clone()
        }
    }
}

fn head_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((byte, _)) => &s[..byte],
        None => s,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: String,
    pub table: LogitTable,
    pub kept_fraction: f64,
}

pub fn predict(
    ctx: &PromptContext,
    query: &str,
    candidates: &CandidateSet,
    backend: &dyn LogitBackend,
) -> Result<Prediction> {
    let (prompt, kept_fraction) = ctx.render(query)?;
    let table = backend.query(&LogitQuery::new(prompt, candidates.words.clone())?)?;
    let logits = table.aligned(&candidates.words)?;
    Ok(Prediction {
        class: candidates.argmax_class(&logits).to_string(),
        table,
        kept_fraction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: PredictionMode,
    pub accuracy: f64,
    pub correct: usize,
    pub n_test: usize,
    /// Accuracy per true class; `None` when the class has no test examples.
    pub per_class: IndexMap<String, Option<f64>>,
    pub class_names: Vec<String>,
    /// `confusion[true][predicted]`, both in `class_names` order.
    pub confusion: Vec<Vec<usize>>,
    pub plan_digest: String,
    pub labels_digest: String,
    pub truncated_prompts: usize,
    pub min_kept_fraction: f64,
}

/// Per-example outcome, kept for CSV emission.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOutcome {
    pub example_id: usize,
    pub label: String,
    pub predicted: String,
    pub table: LogitTable,
}

pub fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("digest input serializes");
    hex::encode(Sha256::digest(&bytes))[..16].to_string()
}

/// Accuracy over a test set. Queries run with bounded parallelism and are
/// aggregated by example position.
pub fn evaluate(
    test: &LabeledDataset,
    ctx: &PromptContext,
    plan: &DemonstrationPlan,
    candidates: &CandidateSet,
    mode: PredictionMode,
    backend: &dyn LogitBackend,
    parallelism: usize,
) -> Result<(EvalReport, Vec<ExampleOutcome>)> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut queries = Vec::with_capacity(test.len());
    let mut kept = Vec::with_capacity(test.len());
    for ex in test.examples() {
        let (prompt, fraction) = ctx.render(&ex.text)?;
        queries.push(LogitQuery::new(prompt, candidates.words.clone())?);
        kept.push(fraction);
    }
    let tables = batch_query(backend, &queries, parallelism)?;

    let class_names = test.class_names().to_vec();
    let index = |c: &str| {
        class_names
            .iter()
            .position(|n| n == c)
            .ok_or_else(|| Error::UnknownClass(c.to_string()))
    };
    let mut confusion = vec![vec![0usize; class_names.len()]; class_names.len()];
    let mut outcomes = Vec::with_capacity(test.len());
    let mut correct = 0;
    for (ex, table) in test.examples().iter().zip(tables) {
        let logits = table.aligned(&candidates.words)?;
        let predicted = candidates.argmax_class(&logits).to_string();
        confusion[index(&ex.label)?][index(&predicted)?] += 1;
        if predicted == ex.label {
            correct += 1;
        }
        outcomes.push(ExampleOutcome {
            example_id: ex.id,
            label: ex.label.clone(),
            predicted,
            table,
        });
    }
    let per_class = class_names
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let row: usize = confusion[i].iter().sum();
            let acc = (row > 0).then(|| confusion[i][i] as f64 / row as f64);
            (c.clone(), acc)
        })
        .collect();
    let report = EvalReport {
        mode,
        accuracy: correct as f64 / test.len() as f64,
        correct,
        n_test: test.len(),
        per_class,
        class_names,
        confusion,
        plan_digest: digest(plan),
        labels_digest: digest(&ctx.labels),
        truncated_prompts: kept.iter().filter(|&&f| f < 1.0).count(),
        min_kept_fraction: kept.iter().copied().fold(1.0, f64::min),
    };
    Ok((report, outcomes))
}

/// Writes `example_id,candidate,class,logit` rows.
pub fn write_logits_csv(
    path: &Path,
    outcomes: &[ExampleOutcome],
    candidates: &CandidateSet,
) -> Result<()> {
    let to_err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["example_id", "candidate", "class", "logit"])
        .map_err(to_err)?;
    for o in outcomes {
        for (word, class) in candidates.words.iter().zip(&candidates.classes) {
            let logit = o.table.get(word).unwrap_or(f64::NAN);
            w.write_record([
                o.example_id.to_string(),
                word.clone(),
                class.clone(),
                logit.to_string(),
            ])
            .map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Number of orderings of `n` items, saturating at `u64::MAX`.
fn factorial(n: usize) -> u64 {
    (1..=n as u64)
        .try_fold(1u64, |acc, k| acc.checked_mul(k))
        .unwrap_or(u64::MAX)
}

fn next_lexicographic(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len())
        .rev()
        .find(|&j| p[j] > p[i - 1])
        .expect("pivot has a successor");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Up to `n_perms` distinct non-identity orderings of `0..n`. When fewer
/// exist, all of them are returned in lexicographic order; otherwise they are
/// drawn by seeded shuffles, rejecting the identity and repeats.
pub fn sample_permutations(n: usize, n_perms: usize, seed: u64) -> Vec<Vec<usize>> {
    let identity: Vec<usize> = (0..n).collect();
    let available = factorial(n).saturating_sub(1);
    if available <= n_perms as u64 {
        let mut all = Vec::new();
        let mut p = identity.clone();
        while next_lexicographic(&mut p) {
            all.push(p.clone());
        }
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n_perms);
    while out.len() < n_perms {
        let mut p = identity.clone();
        p.shuffle(&mut rng);
        if p != identity && seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    /// Plan sample ids in the evaluated order.
    pub order: Vec<usize>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationStudy {
    pub requested: usize,
    pub seed: u64,
    pub plan_accuracy: f64,
    pub results: Vec<PermutationResult>,
    /// Requested permutations that do not exist for a plan this small.
    pub shortfall: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn permutation_study(
    plan: &DemonstrationPlan,
    n_perms: usize,
    seed: u64,
    ctx: &PromptContext,
    test: &LabeledDataset,
    candidates: &CandidateSet,
    mode: PredictionMode,
    backend: &dyn LogitBackend,
    parallelism: usize,
) -> Result<PermutationStudy> {
    if n_perms == 0 {
        return Err(Error::Config("n_perms must be at least 1".into()));
    }
    if plan.len() < 2 {
        return Err(Error::Invalid(
            "permutation study needs at least two demonstrations".into(),
        ));
    }
    let (base, _) = evaluate(test, ctx, plan, candidates, mode, backend, parallelism)?;
    let perms = sample_permutations(plan.len(), n_perms, seed);
    let mut results = Vec::with_capacity(perms.len());
    for perm in &perms {
        let reordered = DemonstrationPlan {
            order: perm.iter().map(|&i| plan.order[i].clone()).collect(),
            ..plan.clone()
        };
        let (report, _) = evaluate(
            test,
            &ctx.with_order(perm),
            &reordered,
            candidates,
            mode,
            backend,
            parallelism,
        )?;
        results.push(PermutationResult {
            order: reordered.sample_ids(),
            accuracy: report.accuracy,
        });
    }
    Ok(PermutationStudy {
        requested: n_perms,
        seed,
        plan_accuracy: base.accuracy,
        shortfall: n_perms - results.len(),
        results,
    })
}
