//! Generator for planted-signal classification tasks served by the synthetic
//! backend.
//!
//! Every class gets its class name plus a few planted words (latent class
//! equal to the pool class) and, optionally, distractor words listed under
//! the class but behaving like the next class. A fraction of training samples
//! is anti-planted: labelled with one class but latently belonging to the
//! next. Each class has exactly one training sample of strength 1.0; all
//! other strengths stay below `strength.1`.

use std::collections::BTreeSet;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{SyntheticModelSpec, SyntheticSample};
use crate::corpus::{
    class_name_word, write_file, ClassWordPool, LabeledDataset, LabeledExample, PromptTemplate,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTaskConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Planted words per class, class name included.
    pub words_per_class: usize,
    /// Distractor words per class.
    pub distractors_per_class: usize,
    /// Fraction of training samples per class that are anti-planted.
    pub anti_planted_fraction: f64,
    pub diag: f64,
    pub off_diag: f64,
    /// Range of non-maximal sample strengths.
    pub strength: (f64, f64),
    pub bias: (f64, f64),
    pub noise_scale: f64,
    pub demo_gain: f64,
    pub seed: u64,
}

impl Default for PlantedTaskConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 50,
            test_per_class: 20,
            words_per_class: 4,
            distractors_per_class: 1,
            anti_planted_fraction: 0.2,
            diag: 4.0,
            off_diag: 0.0,
            strength: (0.5, 0.9),
            bias: (0.0, 0.5),
            noise_scale: 0.05,
            demo_gain: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub pool: ClassWordPool,
    pub template: PromptTemplate,
    pub spec: SyntheticModelSpec,
    pub planted_words: BTreeSet<String>,
    pub distractor_words: BTreeSet<String>,
    pub anti_planted: BTreeSet<usize>,
    /// Training sample id of strength 1.0, per class.
    pub strongest: IndexMap<String, usize>,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const POOL_FILE: &str = "pool.json";
pub const TEMPLATE_FILE: &str = "template.json";
pub const SYNTHETIC_FILE: &str = "synthetic.json";

impl PlantedTask {
    pub fn generate(cfg: &PlantedTaskConfig) -> Result<Self> {
        if cfg.classes < 2 || cfg.words_per_class < 1 || cfg.train_per_class < 2 {
            return Err(Error::Config(
                "planted task needs >= 2 classes, >= 1 word and >= 2 training samples per class"
                    .into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let classes: Vec<String> = (0..cfg.classes).map(|c| format!("class{c}")).collect();
        let next = |c: usize| (c + 1) % cfg.classes;

        let mut pool_words = IndexMap::new();
        let mut word_class = IndexMap::new();
        let mut word_bias = IndexMap::new();
        let mut planted_words = BTreeSet::new();
        let mut distractor_words = BTreeSet::new();
        for (c, name) in classes.iter().enumerate() {
            let mut list = vec![class_name_word(name)];
            list.extend((1..cfg.words_per_class).map(|i| format!(" w{c}x{i}")));
            for w in &list {
                word_class.insert(w.clone(), name.clone());
                planted_words.insert(w.clone());
            }
            for i in 0..cfg.distractors_per_class {
                let w = format!(" d{c}x{i}");
                word_class.insert(w.clone(), classes[next(c)].clone());
                distractor_words.insert(w.clone());
                list.push(w);
            }
            for w in &list {
                word_bias.insert(w.clone(), rng.random_range(cfg.bias.0..=cfg.bias.1));
            }
            pool_words.insert(name.clone(), list);
        }

        let n_anti = (cfg.train_per_class as f64 * cfg.anti_planted_fraction).round() as usize;
        let mut samples = Vec::new();
        let mut train = Vec::new();
        let mut anti_planted = BTreeSet::new();
        let mut strongest = IndexMap::new();
        for (c, name) in classes.iter().enumerate() {
            for i in 0..cfg.train_per_class {
                let id = train.len();
                // Sample 0 of each class is the planted maximum; the last
                // `n_anti` are anti-planted.
                let anti = i >= cfg.train_per_class - n_anti && i > 0;
                let strength = if i == 0 {
                    strongest.insert(name.clone(), id);
                    1.0
                } else {
                    rng.random_range(cfg.strength.0..=cfg.strength.1)
                };
                let latent = if anti {
                    anti_planted.insert(id);
                    classes[next(c)].clone()
                } else {
                    name.clone()
                };
                let text = format!("train sample {id} of {name}");
                samples.push(SyntheticSample {
                    id: id as u64,
                    text: text.clone(),
                    class: latent,
                    strength,
                });
                train.push(LabeledExample {
                    id,
                    text,
                    label: name.clone(),
                });
            }
        }
        let first_test = train.len();
        let mut test = Vec::new();
        for name in &classes {
            for _ in 0..cfg.test_per_class {
                let id = first_test + test.len();
                let text = format!("test sample {id} of {name}");
                samples.push(SyntheticSample {
                    id: id as u64,
                    text: text.clone(),
                    class: name.clone(),
                    strength: rng.random_range(cfg.strength.0..=cfg.strength.1),
                });
                test.push(LabeledExample {
                    id,
                    text,
                    label: name.clone(),
                });
            }
        }

        let n = classes.len();
        let affinity = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { cfg.diag } else { cfg.off_diag })
                    .collect()
            })
            .collect();
        let spec = SyntheticModelSpec {
            classes: classes.clone(),
            affinity,
            word_class,
            word_bias,
            samples,
            noise_scale: cfg.noise_scale,
            seed: cfg.seed,
            demo_gain: cfg.demo_gain,
            max_prompt_chars: None,
        };
        spec.validate()?;
        let train = LabeledDataset::new(train)?;
        let test = if test.is_empty() {
            train.clone()
        } else {
            LabeledDataset::with_classes(test, classes.clone())?
        };
        Ok(Self {
            train,
            test,
            pool: ClassWordPool::new(pool_words)?,
            template: PromptTemplate::sentiment(),
            spec,
            planted_words,
            distractor_words,
            anti_planted,
            strongest,
        })
    }

    /// Writes dataset, pool, template and synthetic-model files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write_jsonl(&dir.join(TRAIN_FILE))?;
        self.test.write_jsonl(&dir.join(TEST_FILE))?;
        for (name, content) in [
            (POOL_FILE, self.pool.to_json()),
            (TEMPLATE_FILE, to_pretty(&self.template)),
            (SYNTHETIC_FILE, to_pretty(&self.spec)),
        ] {
            write_file(&dir.join(name), &(content + "\n"))?;
        }
        Ok(())
    }
}

fn to_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}
