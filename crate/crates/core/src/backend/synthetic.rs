//! Deterministic planted-signal backend.
//!
//! Each sample has a latent class and a strength, each word a latent class
//! and a bias. The logit of word `w` for sample `x` is
//!
//! ```text
//! affinity[class(x)][class(w)] * strength(x) + bias(w) + noise(seed, x, w) * noise_scale
//!   + demo_gain * affinity[class(x)][class(w)] * strength(x) * sum(bias(v))
//! ```
//!
//! where the last sum runs over the demonstration label words `v` in the
//! prompt whose latent class equals `class(w)`. With `demo_gain = 0` the
//! prompt context is ignored entirely.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, LogitBackend, LogitQuery, LogitTable};
use crate::corpus::PromptTemplate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub id: u64,
    pub text: String,
    /// Latent class; may differ from the sample's dataset label.
    pub class: String,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelSpec {
    pub classes: Vec<String>,
    pub affinity: Vec<Vec<f64>>,
    /// Latent class of every word the backend may be asked about.
    pub word_class: IndexMap<String, String>,
    #[serde(default)]
    pub word_bias: IndexMap<String, f64>,
    pub samples: Vec<SyntheticSample>,
    #[serde(default)]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub demo_gain: f64,
    #[serde(default)]
    pub max_prompt_chars: Option<usize>,
}

impl SyntheticModelSpec {
    pub fn validate(&self) -> Result<(), BackendError> {
        let n = self.classes.len();
        if n == 0 {
            return Err(BackendError::Synthetic("no classes".into()));
        }
        if self.affinity.len() != n || self.affinity.iter().any(|row| row.len() != n) {
            return Err(BackendError::Synthetic(format!("affinity must be {n}x{n}")));
        }
        if self.affinity.iter().flatten().any(|v| !v.is_finite()) {
            return Err(BackendError::Synthetic("non-finite affinity".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(BackendError::Synthetic("noise_scale must be >= 0".into()));
        }
        for (w, c) in &self.word_class {
            self.class_index(c)
                .ok_or_else(|| BackendError::Synthetic(format!("word {w:?}: unknown class {c}")))?;
        }
        for s in &self.samples {
            self.class_index(&s.class).ok_or_else(|| {
                BackendError::Synthetic(format!("sample {}: unknown class {}", s.id, s.class))
            })?;
            if !(0.0..=1.0).contains(&s.strength) {
                return Err(BackendError::Synthetic(format!(
                    "sample {}: strength {} outside [0, 1]",
                    s.id, s.strength
                )));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn bias(&self, word: &str) -> f64 {
        self.word_bias.get(word).copied().unwrap_or(0.0)
    }
}

/// Hash-derived pseudo-random value in `[-1, 1]` keyed by seed, sample id and
/// word.
pub fn noise_unit(seed: u64, sample_id: u64, word: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.to_le_bytes());
    h.update(word.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let bits = u64::from_le_bytes(bytes) >> 11;
    // 53 random bits mapped onto [0, 1], then onto [-1, 1].
    let unit = bits as f64 / ((1u64 << 53) - 1) as f64;
    2.0 * unit - 1.0
}

/// Context-free logit of `word` (latent class `word_class`) for a sample of
/// latent class `sample_class`.
pub fn synthetic_logit(
    spec: &SyntheticModelSpec,
    sample_class: &str,
    sample_id: u64,
    strength: f64,
    word: &str,
    word_class: &str,
) -> Result<f64, BackendError> {
    let sc = spec
        .class_index(sample_class)
        .ok_or_else(|| BackendError::Synthetic(format!("unknown class {sample_class}")))?;
    let wc = spec
        .class_index(word_class)
        .ok_or_else(|| BackendError::Synthetic(format!("unknown class {word_class}")))?;
    Ok(spec.affinity[sc][wc] * strength
        + spec.bias(word)
        + noise_unit(spec.seed, sample_id, word) * spec.noise_scale)
}

pub struct SyntheticBackend {
    spec: SyntheticModelSpec,
    template: PromptTemplate,
    by_text: HashMap<String, usize>,
    word_class: HashMap<String, usize>,
    identity: String,
    calls: AtomicUsize,
}

impl SyntheticBackend {
    /// `template` must be the one used to render prompts; the backend parses
    /// prompts with it to recover the query sample and demonstration labels.
    pub fn new(spec: SyntheticModelSpec, template: PromptTemplate) -> Result<Self, BackendError> {
        spec.validate()?;
        let mut by_text = HashMap::new();
        for (i, s) in spec.samples.iter().enumerate() {
            if by_text.insert(s.text.clone(), i).is_some() {
                return Err(BackendError::Synthetic(format!(
                    "duplicate sample text {:?}",
                    s.text
                )));
            }
        }
        let word_class = spec
            .word_class
            .iter()
            .map(|(w, c)| (w.clone(), spec.class_index(c).expect("validated")))
            .collect();
        let canonical = serde_json::to_vec(&spec).expect("spec serializes");
        let identity = format!(
            "synthetic:{}",
            &hex::encode(Sha256::digest(&canonical))[..16]
        );
        Ok(Self {
            spec,
            template,
            by_text,
            word_class,
            identity,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &SyntheticModelSpec {
        &self.spec
    }

    /// Number of queries answered so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn word_class_of(&self, word: &str) -> Option<usize> {
        self.word_class.get(word).copied().or_else(|| {
            word.strip_prefix(' ')
                .and_then(|bare| self.word_class.get(bare).copied())
        })
    }

    /// Splits a rendered prompt into the query text and, per class, the sum
    /// of biases of demonstration label words of that latent class.
    fn parse_prompt<'p>(&self, prompt: &'p str) -> Result<(&'p str, Vec<f64>), BackendError> {
        let t = &self.template;
        let tail = format!("{}{}", t.line_separator, t.label_prefix);
        let body = prompt.strip_suffix(tail.as_str()).ok_or_else(|| {
            BackendError::Synthetic("prompt does not end with the label prefix".into())
        })?;
        let qstart = body
            .rfind(t.input_prefix.as_str())
            .ok_or_else(|| BackendError::Synthetic("prompt has no input prefix".into()))?;
        let query = &body[qstart + t.input_prefix.len()..];
        let demos = &body[..qstart];

        let mut demo_bias = vec![0.0; self.spec.classes.len()];
        if self.spec.demo_gain != 0.0 {
            let label_marker = tail.as_str();
            let pair_marker = format!("{}{}", t.pair_separator, t.input_prefix);
            let mut rest = demos;
            while let Some(pos) = rest.find(label_marker) {
                rest = &rest[pos + label_marker.len()..];
                let end = rest.find(pair_marker.as_str()).unwrap_or(rest.len());
                let label = rest[..end]
                    .strip_suffix(t.pair_separator.as_str())
                    .unwrap_or(&rest[..end]);
                for token in label.split_whitespace() {
                    let spaced = format!(" {token}");
                    let key = if self.word_class.contains_key(&spaced) {
                        spaced.as_str()
                    } else {
                        token
                    };
                    if let Some(&c) = self.word_class.get(key) {
                        demo_bias[c] += self.spec.bias(key);
                    }
                }
                rest = &rest[end..];
            }
        }
        Ok((query, demo_bias))
    }
}

impl LogitBackend for SyntheticBackend {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn max_prompt_chars(&self) -> Option<usize> {
        self.spec.max_prompt_chars
    }

    fn query(&self, query: &LogitQuery) -> Result<LogitTable, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if let Some(budget) = self.spec.max_prompt_chars {
            let length = query.prompt().chars().count();
            if length > budget {
                return Err(BackendError::PromptTooLong { length, budget });
            }
        }
        let (text, demo_bias) = self.parse_prompt(query.prompt())?;
        let sample = self
            .by_text
            .get(text)
            .map(|&i| &self.spec.samples[i])
            .ok_or_else(|| BackendError::Synthetic(format!("unknown sample text {text:?}")))?;
        let sc = self.spec.class_index(&sample.class).expect("validated");
        let mut logits = Vec::with_capacity(query.candidates().len());
        for word in query.candidates() {
            let wc = self
                .word_class_of(word)
                .ok_or_else(|| BackendError::Synthetic(format!("unknown word {word:?}")))?;
            let base = synthetic_logit(
                &self.spec,
                &sample.class,
                sample.id,
                sample.strength,
                word,
                &self.spec.classes[wc],
            )?;
            let context =
                self.spec.demo_gain * self.spec.affinity[sc][wc] * sample.strength * demo_bias[wc];
            logits.push(base + context);
        }
        LogitTable::from_aligned(query.candidates(), &logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{render_prompt, render_zero_shot, DemoRef};

    fn spec(noise: f64) -> SyntheticModelSpec {
        let mut word_class = IndexMap::new();
        word_class.insert(" a".to_string(), "A".to_string());
        word_class.insert(" b".to_string(), "B".to_string());
        SyntheticModelSpec {
            classes: vec!["A".into(), "B".into()],
            affinity: vec![vec![2.0, 0.0], vec![0.0, 2.0]],
            word_class,
            word_bias: IndexMap::new(),
            samples: vec![
                SyntheticSample {
                    id: 0,
                    text: "first".into(),
                    class: "A".into(),
                    strength: 1.0,
                },
                SyntheticSample {
                    id: 1,
                    text: "second".into(),
                    class: "A".into(),
                    strength: 0.5,
                },
            ],
            noise_scale: noise,
            seed: 7,
            demo_gain: 0.0,
            max_prompt_chars: None,
        }
    }

    #[test]
    fn formula_cases() {
        let s = spec(0.0);
        assert_eq!(synthetic_logit(&s, "A", 0, 1.0, " a", "A").unwrap(), 2.0);
        assert_eq!(synthetic_logit(&s, "A", 0, 0.5, " a", "A").unwrap(), 1.0);
        assert_eq!(synthetic_logit(&s, "A", 0, 1.0, " b", "B").unwrap(), 0.0);
        assert!(synthetic_logit(&s, "Z", 0, 1.0, " a", "A").is_err());
    }

    #[test]
    fn noise_is_deterministic_and_bounded() {
        let s = spec(0.1);
        let a = synthetic_logit(&s, "A", 3, 1.0, " a", "A").unwrap();
        let b = synthetic_logit(&s, "A", 3, 1.0, " a", "A").unwrap();
        assert_eq!(a, b);
        assert!((a - 2.0).abs() <= 0.1);
        for id in 0..500 {
            let n = noise_unit(42, id, " w");
            assert!((-1.0..=1.0).contains(&n));
        }
        assert_ne!(noise_unit(1, 0, " w"), noise_unit(2, 0, " w"));
    }

    #[test]
    fn backend_answers_from_prompt() {
        let t = PromptTemplate::sentiment();
        let b = SyntheticBackend::new(spec(0.0), t.clone()).unwrap();
        let q = LogitQuery::new(
            render_zero_shot(&t, "first"),
            vec![" a".into(), " b".into()],
        )
        .unwrap();
        let table = b.query(&q).unwrap();
        assert_eq!(table.get(" a"), Some(2.0));
        assert_eq!(table.get(" b"), Some(0.0));
        assert_eq!(b.query(&q).unwrap(), table);
        assert_eq!(b.calls(), 2);
    }

    #[test]
    fn unknown_text_and_word_fail() {
        let t = PromptTemplate::sentiment();
        let b = SyntheticBackend::new(spec(0.0), t.clone()).unwrap();
        let q = LogitQuery::new(render_zero_shot(&t, "nope"), vec![" a".into()]).unwrap();
        assert!(b.query(&q).is_err());
        let q = LogitQuery::new(render_zero_shot(&t, "first"), vec![" zz".into()]).unwrap();
        assert!(b.query(&q).is_err());
    }

    #[test]
    fn demo_labels_shift_logits() {
        let mut s = spec(0.0);
        s.demo_gain = 1.0;
        s.word_class.insert(" great".into(), "A".into());
        s.word_bias.insert(" great".into(), 0.5);
        let t = PromptTemplate::sentiment();
        let b = SyntheticBackend::new(s, t.clone()).unwrap();
        let label = vec![" a".to_string(), " great".to_string()];
        let prompt = render_prompt(
            &t,
            &[DemoRef {
                text: "second",
                words: &label,
            }],
            "first",
        );
        let q = LogitQuery::new(prompt, vec![" a".into(), " b".into()]).unwrap();
        let table = b.query(&q).unwrap();
        // 2.0 * 1.0 + gain * 2.0 * 1.0 * 0.5
        assert_eq!(table.get(" a"), Some(3.0));
        assert_eq!(table.get(" b"), Some(0.0));
    }

    #[test]
    fn budget_enforced() {
        let mut s = spec(0.0);
        s.max_prompt_chars = Some(5);
        let t = PromptTemplate::sentiment();
        let b = SyntheticBackend::new(s, t.clone()).unwrap();
        let q = LogitQuery::new(render_zero_shot(&t, "first"), vec![" a".into()]).unwrap();
        assert!(matches!(
            b.query(&q),
            Err(BackendError::PromptTooLong { budget: 5, .. })
        ));
    }

    #[test]
    fn rejects_bad_affinity_and_strength() {
        let mut s = spec(0.0);
        s.affinity.pop();
        assert!(s.validate().is_err());
        let mut s = spec(0.0);
        s.samples[0].strength = 1.5;
        assert!(s.validate().is_err());
    }
}
