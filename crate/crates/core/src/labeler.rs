//! Multi-word label construction.
//!
//! Each class starts from an anchor word (its class name, or the refined-pool
//! word with the highest mean zero-shot logit over the class's selected
//! demonstrations). Words are then appended greedily, one per class per
//! round: the remaining candidate with the highest mean logit over the dev
//! samples of that class, queried with the current k-shot prompt. After each
//! round the dev accuracy is measured; the search stops on exhaustion, on a
//! round limit, or when accuracy falls strictly below the best seen so far,
//! and the sequences are reset to the best round.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backend::{batch_query, LogitBackend, LogitQuery};
use crate::corpus::{
    class_name_word, render_zero_shot, ClassWordPool, LabeledDataset, PromptTemplate,
};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, CandidateSet, PredictionMode, PromptContext};
use crate::sampler::DemonstrationPlan;

/// Ordered label words per class; serializes in the pool-file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSequences(IndexMap<String, Vec<String>>);

impl LabelSequences {
    pub fn from_map(map: IndexMap<String, Vec<String>>) -> Self {
        Self(map)
    }

    /// One bare class-name word per class.
    pub fn class_names<'a>(classes: impl IntoIterator<Item = &'a str>) -> Self {
        Self(
            classes
                .into_iter()
                .map(|c| (c.to_string(), vec![class_name_word(c)]))
                .collect(),
        )
    }

    pub fn words(&self, class: &str) -> Result<&[String]> {
        self.0
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invalid(format!("no label sequence for class `{class}`")))
    }

    pub fn anchor(&self, class: &str) -> Result<&str> {
        self.words(class)?
            .first()
            .map(String::as_str)
            .ok_or_else(|| Error::Invalid(format!("empty label sequence for `{class}`")))
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn lengths(&self) -> IndexMap<String, usize> {
        self.0.iter().map(|(c, w)| (c.clone(), w.len())).collect()
    }

    pub fn as_map(&self) -> &IndexMap<String, Vec<String>> {
        &self.0
    }

    fn push(&mut self, class: &str, word: String) {
        self.0.get_mut(class).expect("class present").push(word);
    }

    /// Checks the sequence invariants against a refined pool: non-empty,
    /// duplicate-free, and drawn from the class's pool words or class name.
    pub fn validate(&self, pool: &ClassWordPool) -> Result<()> {
        for (class, words) in &self.0 {
            let allowed = pool
                .words_of(class)
                .ok_or_else(|| Error::UnknownClass(class.clone()))?;
            if words.is_empty() {
                return Err(Error::Invalid(format!(
                    "empty label sequence for `{class}`"
                )));
            }
            for (i, w) in words.iter().enumerate() {
                if words[..i].contains(w) {
                    return Err(Error::Invalid(format!("{w:?} repeated in `{class}`")));
                }
                if !allowed.contains(w) && *w != class_name_word(class) {
                    return Err(Error::Invalid(format!("{w:?} is not a word of `{class}`")));
                }
            }
        }
        Ok(())
    }
}

/// Which selected samples rank the initial words of a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorScope {
    /// Only the class's own demonstrations.
    #[default]
    ClassSamples,
    /// Every selected demonstration.
    AllSamples,
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Picks each class's anchor from the refined pool by mean zero-shot logit
/// over the plan's samples. A class absent from an unbalanced plan is ranked
/// over all plan samples.
pub fn initial_word_update(
    plan: &DemonstrationPlan,
    train: &LabeledDataset,
    pool: &ClassWordPool,
    template: &PromptTemplate,
    backend: &dyn LogitBackend,
    scope: AnchorScope,
    parallelism: usize,
) -> Result<LabelSequences> {
    if plan.is_empty() {
        return Err(Error::Invalid("empty demonstration plan".into()));
    }
    let mut anchors = IndexMap::new();
    for class in pool.classes() {
        let own: Vec<usize> = plan
            .order
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.sample_id)
            .collect();
        let ids = match scope {
            AnchorScope::ClassSamples if !own.is_empty() => own,
            AnchorScope::ClassSamples if plan.balanced => {
                return Err(Error::Invalid(format!(
                    "class `{class}` has no demonstration samples"
                )))
            }
            _ => plan.sample_ids(),
        };
        let words = pool.words_of(class).expect("class from pool").to_vec();
        let queries = ids
            .iter()
            .map(|&id| {
                let ex = train.get(id).ok_or_else(|| {
                    Error::Invalid(format!("plan sample {id} not in training set"))
                })?;
                Ok(LogitQuery::new(
                    render_zero_shot(template, &ex.text),
                    words.clone(),
                )?)
            })
            .collect::<Result<Vec<_>>>()?;
        let tables = batch_query(backend, &queries, parallelism)?;
        let mut means = vec![0.0; words.len()];
        for t in &tables {
            for (m, v) in means.iter_mut().zip(t.aligned(&words)?) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= tables.len() as f64;
        }
        let anchor = words[argmax_first(&means)].clone();
        anchors.insert(class.to_string(), vec![anchor]);
    }
    Ok(LabelSequences(anchors))
}

/// Pool words not yet in the sequences, per class, in pool order.
pub fn remaining_pool(
    pool: &ClassWordPool,
    labels: &LabelSequences,
) -> Result<IndexMap<String, Vec<String>>> {
    pool.classes()
        .map(|c| {
            let used = labels.words(c)?;
            let rest = pool
                .words_of(c)
                .expect("class from pool")
                .iter()
                .filter(|w| !used.contains(w))
                .cloned()
                .collect();
            Ok((c.to_string(), rest))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMean {
    pub word: String,
    pub mean: f64,
}

/// Words chosen in one round and the mean dev logit of every candidate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundChoice {
    pub chosen: IndexMap<String, String>,
    pub candidate_means: IndexMap<String, Vec<CandidateMean>>,
}

/// Scores every remaining candidate of every class against the current
/// sequences and picks the per-class argmax of mean dev logit. All choices
/// are made before any sequence is updated.
pub fn choose_round(
    ctx: &PromptContext,
    dev: &LabeledDataset,
    remaining: &IndexMap<String, Vec<String>>,
    backend: &dyn LogitBackend,
    parallelism: usize,
) -> Result<RoundChoice> {
    let active: Vec<(&String, &Vec<String>)> =
        remaining.iter().filter(|(_, ws)| !ws.is_empty()).collect();
    if active.is_empty() {
        return Err(Error::NothingToInsert);
    }
    let mut queries = Vec::new();
    let mut spans = Vec::with_capacity(active.len());
    for (class, words) in &active {
        let start = queries.len();
        for ex in dev.of_class(class) {
            let (prompt, _) = ctx.render(&ex.text)?;
            queries.push(LogitQuery::new(prompt, (*words).clone())?);
        }
        if queries.len() == start {
            return Err(Error::Invalid(format!(
                "class `{class}` has no dev samples"
            )));
        }
        spans.push(start..queries.len());
    }
    let tables = batch_query(backend, &queries, parallelism)?;
    let mut choice = RoundChoice::default();
    for ((class, words), span) in active.into_iter().zip(spans) {
        let n = span.len() as f64;
        let mut means = vec![0.0; words.len()];
        for t in &tables[span] {
            for (m, v) in means.iter_mut().zip(t.aligned(words)?) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n;
        }
        let best = argmax_first(&means);
        choice.chosen.insert(class.clone(), words[best].clone());
        choice.candidate_means.insert(
            class.clone(),
            words
                .iter()
                .zip(&means)
                .map(|(w, &mean)| CandidateMean {
                    word: w.clone(),
                    mean,
                })
                .collect(),
        );
    }
    Ok(choice)
}

/// Dev-set accuracy overall and per class.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DevScore {
    pub accuracy: f64,
    pub per_class: IndexMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    PoolExhausted,
    AccuracyDecreased,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub chosen: IndexMap<String, String>,
    pub candidate_means: IndexMap<String, Vec<CandidateMean>>,
    pub dev_accuracy: f64,
    pub dev_per_class: IndexMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionTrace {
    pub rounds: Vec<RoundTrace>,
    pub best_round: usize,
    pub final_n: IndexMap<String, usize>,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionConfig {
    pub max_rounds: usize,
    /// Stop and revert each class on its own dev accuracy.
    pub per_class_stopping: bool,
    /// Candidate set used to measure dev accuracy.
    pub dev_mode: PredictionMode,
}

impl Default for InsertionConfig {
    fn default() -> Self {
        Self {
            max_rounds: 8,
            per_class_stopping: false,
            dev_mode: PredictionMode::AnchorWords,
        }
    }
}

/// Runs the insertion loop with pluggable round selection and dev scoring.
pub fn drive_insertion<C, A>(
    anchors: LabelSequences,
    mut remaining: IndexMap<String, Vec<String>>,
    config: &InsertionConfig,
    mut choose: C,
    mut score: A,
) -> Result<(LabelSequences, InsertionTrace)>
where
    C: FnMut(&LabelSequences, &IndexMap<String, Vec<String>>) -> Result<RoundChoice>,
    A: FnMut(&LabelSequences) -> Result<DevScore>,
{
    let mut current = anchors;
    let first = score(&current)?;
    let mut rounds = vec![RoundTrace {
        round: 0,
        chosen: IndexMap::new(),
        candidate_means: IndexMap::new(),
        dev_accuracy: first.accuracy,
        dev_per_class: first.per_class.clone(),
    }];

    // Global best, and per-class bests for per-class stopping.
    let mut best = (first.accuracy, 0usize, current.clone());
    let mut class_best: HashMap<String, (f64, Vec<String>)> = current
        .as_map()
        .iter()
        .map(|(c, w)| {
            (
                c.clone(),
                (first.per_class.get(c).copied().unwrap_or(0.0), w.clone()),
            )
        })
        .collect();
    let mut frozen_any = false;

    let stop_reason = loop {
        if remaining.values().all(Vec::is_empty) {
            break if config.per_class_stopping && frozen_any {
                StopReason::AccuracyDecreased
            } else {
                StopReason::PoolExhausted
            };
        }
        if rounds.len() > config.max_rounds {
            break StopReason::MaxRounds;
        }
        let round = rounds.len();
        let choice = choose(&current, &remaining)?;
        for (class, word) in &choice.chosen {
            let pool = remaining
                .get_mut(class)
                .ok_or_else(|| Error::UnknownClass(class.clone()))?;
            let pos = pool
                .iter()
                .position(|w| w == word)
                .ok_or_else(|| Error::Invalid(format!("{word:?} is not a remaining candidate")))?;
            pool.remove(pos);
            current.push(class, word.clone());
        }
        let dev = score(&current)?;
        rounds.push(RoundTrace {
            round,
            chosen: choice.chosen,
            candidate_means: choice.candidate_means,
            dev_accuracy: dev.accuracy,
            dev_per_class: dev.per_class.clone(),
        });

        if config.per_class_stopping {
            for (class, (best_acc, best_words)) in class_best.iter_mut() {
                let acc = dev.per_class.get(class).copied().unwrap_or(0.0);
                if acc < *best_acc {
                    current.0.insert(class.clone(), best_words.clone());
                    remaining.insert(class.clone(), Vec::new());
                    frozen_any = true;
                } else if acc > *best_acc {
                    *best_acc = acc;
                    *best_words = current.words(class)?.to_vec();
                }
            }
        } else if dev.accuracy < best.0 {
            current = best.2.clone();
            break StopReason::AccuracyDecreased;
        } else if dev.accuracy > best.0 {
            best = (dev.accuracy, round, current.clone());
        }
    };

    let best_round = if config.per_class_stopping {
        for (class, (_, words)) in &class_best {
            current.0.insert(class.clone(), words.clone());
        }
        rounds.len() - 1
    } else {
        current = best.2;
        best.1
    };
    let trace = InsertionTrace {
        rounds,
        best_round,
        final_n: current.lengths(),
        stop_reason,
    };
    Ok((current, trace))
}

/// Dev accuracy of `labels` under `mode`.
#[allow(clippy::too_many_arguments)]
pub fn dev_score(
    labels: &LabelSequences,
    base: &PromptContext,
    plan: &DemonstrationPlan,
    dev: &LabeledDataset,
    pool: &ClassWordPool,
    mode: PredictionMode,
    backend: &dyn LogitBackend,
    parallelism: usize,
) -> Result<DevScore> {
    let ctx = PromptContext {
        labels: labels.clone(),
        ..base.clone()
    };
    let class_names: Vec<String> = pool.classes().map(String::from).collect();
    let candidates = CandidateSet::new(mode, &class_names, labels, pool)?;
    let (report, _) = evaluate(dev, &ctx, plan, &candidates, mode, backend, parallelism)?;
    Ok(DevScore {
        accuracy: report.accuracy,
        per_class: report
            .per_class
            .into_iter()
            .filter_map(|(c, a)| a.map(|a| (c, a)))
            .collect(),
    })
}

/// Greedy forward insertion against a backend.
#[allow(clippy::too_many_arguments)]
pub fn run_insertion(
    anchors: &LabelSequences,
    plan: &DemonstrationPlan,
    train: &LabeledDataset,
    dev: &LabeledDataset,
    pool: &ClassWordPool,
    template: &PromptTemplate,
    backend: &dyn LogitBackend,
    config: &InsertionConfig,
    parallelism: usize,
) -> Result<(LabelSequences, InsertionTrace)> {
    anchors.validate(pool)?;
    let base =
        PromptContext::from_plan(template, plan, train, anchors, backend.max_prompt_chars())?;
    let remaining = remaining_pool(pool, anchors)?;
    drive_insertion(
        anchors.clone(),
        remaining,
        config,
        |labels, remaining| {
            let ctx = PromptContext {
                labels: labels.clone(),
                ..base.clone()
            };
            choose_round(&ctx, dev, remaining, backend, parallelism)
        },
        |labels| {
            dev_score(
                labels,
                &base,
                plan,
                dev,
                pool,
                config.dev_mode,
                backend,
                parallelism,
            )
        },
    )
}
