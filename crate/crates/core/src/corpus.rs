//! Datasets, class-word pools, prompt templates and prompt rendering.
//!
//! Datasets are JSON Lines files with one `{"text": .., "label": ..}` object
//! per line. Pools are JSON objects mapping each class name to its ordered
//! list of candidate words, each stored with its leading space (`" negative"`).
//! Templates are JSON objects holding the prefixes and separators used by
//! [`render_prompt`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: usize,
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    examples: Vec<LabeledExample>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    /// Builds a dataset, deriving the class list from first-appearance order.
    pub fn new(examples: Vec<LabeledExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut class_names: Vec<String> = Vec::new();
        let mut ids = HashSet::new();
        for ex in &examples {
            if ex.text.is_empty() {
                return Err(Error::Invalid(format!("example {} has empty text", ex.id)));
            }
            if !ids.insert(ex.id) {
                return Err(Error::Invalid(format!("duplicate example id {}", ex.id)));
            }
            if !class_names.contains(&ex.label) {
                class_names.push(ex.label.clone());
            }
        }
        Ok(Self {
            examples,
            class_names,
        })
    }

    /// Builds a dataset with an explicit class list (which may name classes
    /// that have no examples here, as dev and test splits often do).
    pub fn with_classes(examples: Vec<LabeledExample>, class_names: Vec<String>) -> Result<Self> {
        let mut ds = Self::new(examples)?;
        for label in &ds.class_names {
            if !class_names.contains(label) {
                return Err(Error::UnknownClass(label.clone()));
            }
        }
        ds.class_names = class_names;
        Ok(ds)
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&LabeledExample> {
        self.examples.iter().find(|ex| ex.id == id)
    }

    pub fn of_class<'a>(&'a self, class: &'a str) -> impl Iterator<Item = &'a LabeledExample> + 'a {
        self.examples.iter().filter(move |ex| ex.label == class)
    }

    /// Checks that the dataset has at least two classes and every label is
    /// one of the pool's classes.
    pub fn check_against(&self, pool: &ClassWordPool) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::Invalid(
                "dataset must contain at least two classes".into(),
            ));
        }
        for label in &self.class_names {
            if pool.class_index(label).is_none() {
                return Err(Error::UnknownClass(label.clone()));
            }
        }
        Ok(())
    }

    /// Serializes back to JSON Lines, one record per line.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            text: &'a str,
            label: &'a str,
        }
        let mut out = String::new();
        for ex in &self.examples {
            let line = serde_json::to_string(&Record {
                text: &ex.text,
                label: &ex.label,
            })
            .expect("string records always serialize");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Parses JSON Lines dataset content. Ids are assigned in file order starting
/// at `first_id`; blank lines are skipped.
pub fn parse_dataset(content: &str, first_id: usize) -> Result<LabeledDataset> {
    let mut examples = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line,
            message: "record is not a JSON object".into(),
        })?;
        let field = |name: &str| -> Result<String> {
            match obj.get(name) {
                None => Err(Error::Parse {
                    line,
                    message: format!("missing field `{name}`"),
                }),
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(Error::Schema {
                    line,
                    field: name.to_string(),
                }),
            }
        };
        let text = field("text")?;
        let label = field("label")?;
        if text.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty text".into(),
            });
        }
        examples.push(LabeledExample {
            id: first_id + examples.len(),
            text,
            label,
        });
    }
    LabeledDataset::new(examples)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    load_dataset_from(path, 0)
}

/// Like [`load_dataset`] but numbers examples from `first_id`, so that a test
/// file can be kept id-disjoint from its training file.
pub fn load_dataset_from(path: &Path, first_id: usize) -> Result<LabeledDataset> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&content, first_id)
}

/// Training set minus the given demonstration ids, order preserved.
pub fn derive_dev(train: &LabeledDataset, demo_ids: &BTreeSet<usize>) -> Result<LabeledDataset> {
    for id in demo_ids {
        if train.get(*id).is_none() {
            return Err(Error::Invalid(format!(
                "demonstration id {id} is not in the training set"
            )));
        }
    }
    let remaining: Vec<LabeledExample> = train
        .examples
        .iter()
        .filter(|ex| !demo_ids.contains(&ex.id))
        .cloned()
        .collect();
    if remaining.is_empty() {
        return Err(Error::EmptyDevSet);
    }
    LabeledDataset::with_classes(remaining, train.class_names.clone())
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: LabeledDataset,
    pub dev: LabeledDataset,
    pub test: LabeledDataset,
}

impl DatasetSplit {
    pub fn new(train: LabeledDataset, dev: LabeledDataset, test: LabeledDataset) -> Result<Self> {
        let ids = |ds: &LabeledDataset| ds.examples.iter().map(|e| e.id).collect::<HashSet<_>>();
        let (tr, dv, te) = (ids(&train), ids(&dev), ids(&test));
        if !tr.is_disjoint(&te) || !dv.is_disjoint(&te) {
            return Err(Error::Invalid(
                "test examples must be disjoint from train and dev by id".into(),
            ));
        }
        Ok(Self { train, dev, test })
    }
}

/// The label word used for a bare class name.
pub fn class_name_word(class: &str) -> String {
    format!(" {class}")
}

/// Candidate class-related words per class, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWordPool {
    words: IndexMap<String, Vec<String>>,
    refined: bool,
    word_class: HashMap<String, usize>,
}

impl ClassWordPool {
    /// Builds an unrefined pool. Every class list must contain the class name
    /// in its leading-space form.
    pub fn new(words: IndexMap<String, Vec<String>>) -> Result<Self> {
        for (class, list) in &words {
            if !list.contains(&class_name_word(class)) {
                return Err(Error::Invalid(format!(
                    "pool for class `{class}` does not contain its class name"
                )));
            }
        }
        Self::build(words, false)
    }

    /// Builds a refined pool; class names are not required to survive.
    pub fn refined(words: IndexMap<String, Vec<String>>) -> Result<Self> {
        Self::build(words, true)
    }

    fn build(words: IndexMap<String, Vec<String>>, refined: bool) -> Result<Self> {
        if words.len() < 2 {
            return Err(Error::Invalid("pool needs at least two classes".into()));
        }
        let mut word_class = HashMap::new();
        for (ci, (class, list)) in words.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::NoSeparableWords(class.clone()));
            }
            for w in list {
                if w.trim().is_empty() {
                    return Err(Error::Invalid(format!("blank word in class `{class}`")));
                }
                if let Some(prev) = word_class.insert(w.clone(), ci) {
                    let other = words.get_index(prev).map(|(c, _)| c.as_str()).unwrap_or("");
                    return Err(Error::Invalid(if prev == ci {
                        format!("word {w:?} listed twice under `{class}`")
                    } else {
                        format!("word {w:?} listed under both `{other}` and `{class}`")
                    }));
                }
            }
        }
        Ok(Self {
            words,
            refined,
            word_class,
        })
    }

    pub fn is_refined(&self) -> bool {
        self.refined
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.words.keys().map(String::as_str)
    }

    pub fn num_classes(&self) -> usize {
        self.words.len()
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.words.get_index_of(class)
    }

    pub fn class_at(&self, idx: usize) -> &str {
        self.words
            .get_index(idx)
            .map(|(c, _)| c.as_str())
            .expect("class index in range")
    }

    pub fn words_of(&self, class: &str) -> Option<&[String]> {
        self.words.get(class).map(Vec::as_slice)
    }

    pub fn class_of(&self, word: &str) -> Option<&str> {
        self.word_class.get(word).map(|&ci| self.class_at(ci))
    }

    pub fn class_index_of(&self, word: &str) -> Option<usize> {
        self.word_class.get(word).copied()
    }

    /// All words in pool order (class order, then within-class order).
    pub fn flat_words(&self) -> Vec<String> {
        self.words.values().flatten().cloned().collect()
    }

    /// Class index of each word in [`flat_words`](Self::flat_words) order.
    pub fn flat_classes(&self) -> Vec<usize> {
        self.words
            .values()
            .enumerate()
            .flat_map(|(ci, list)| std::iter::repeat_n(ci, list.len()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.word_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_class.is_empty()
    }

    pub fn as_map(&self) -> &IndexMap<String, Vec<String>> {
        &self.words
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.words).expect("pool serializes")
    }
}

pub fn load_pool(path: &Path) -> Result<ClassWordPool> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let words: IndexMap<String, Vec<String>> =
        serde_json::from_str(&content).map_err(|e| Error::json(path, e))?;
    ClassWordPool::new(words)
}

fn default_separator() -> String {
    "\n".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub input_prefix: String,
    pub label_prefix: String,
    #[serde(default = "default_separator")]
    pub line_separator: String,
    #[serde(default = "default_separator")]
    pub pair_separator: String,
}

impl PromptTemplate {
    pub fn new(input_prefix: &str, label_prefix: &str) -> Self {
        Self {
            input_prefix: input_prefix.to_string(),
            label_prefix: label_prefix.to_string(),
            line_separator: default_separator(),
            pair_separator: default_separator(),
        }
    }

    /// `Review:` / `Sentiment:` (SST-2, CR, IMDB).
    pub fn sentiment() -> Self {
        Self::new("Review: ", "Sentiment:")
    }

    /// `Review:` / `Emotion:` (AMAN, ISEAR).
    pub fn emotion() -> Self {
        Self::new("Review: ", "Emotion:")
    }

    /// `Question:` / `Answer Type:` (TREC).
    pub fn question_type() -> Self {
        Self::new("Question: ", "Answer Type:")
    }

    /// `Article:` / `Answer:` (AG News).
    pub fn topic() -> Self {
        Self::new("Article: ", "Answer:")
    }
}

pub fn load_template(path: &Path) -> Result<PromptTemplate> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&content).map_err(|e| Error::json(path, e))
}

/// One demonstration: the sample text followed by its label words.
#[derive(Debug, Clone, Copy)]
pub struct DemoRef<'a> {
    pub text: &'a str,
    pub words: &'a [String],
}

/// Joins label words into the string placed after the label prefix. Words
/// carry their own leading space; a word lacking one is separated by a single
/// space, except in first position.
pub fn join_label_words(words: &[String]) -> String {
    let mut out = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 && !w.starts_with(' ') {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

/// Renders a k-shot prompt. The result ends immediately after the label
/// prefix.
pub fn render_prompt(template: &PromptTemplate, demos: &[DemoRef<'_>], query: &str) -> String {
    let mut out = String::new();
    for demo in demos {
        out.push_str(&template.input_prefix);
        out.push_str(demo.text);
        out.push_str(&template.line_separator);
        out.push_str(&template.label_prefix);
        out.push_str(&join_label_words(demo.words));
        out.push_str(&template.pair_separator);
    }
    out.push_str(&template.input_prefix);
    out.push_str(query);
    out.push_str(&template.line_separator);
    out.push_str(&template.label_prefix);
    out
}

/// Zero-shot prompt for a single sample.
pub fn render_zero_shot(template: &PromptTemplate, query: &str) -> String {
    render_prompt(template, &[], query)
}

pub(crate) fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(content.as_bytes())
        .map_err(|e| Error::io(path, e))
}
