//! Stage orchestration. Each stage reads its inputs from JSON artifacts in a
//! run directory and writes its own, so stages can be re-run individually.

use std::fmt;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backend::{
    CacheStats, CachedBackend, HttpBackend, LogitBackend, SyntheticBackend, SyntheticModelSpec,
    ENDPOINT_ENV,
};
use crate::corpus::{
    derive_dev, load_dataset, load_dataset_from, load_pool, load_template, write_file,
    ClassWordPool, LabeledDataset, PromptTemplate,
};
use crate::error::{Error, ErrorKind, Result};
use crate::evaluator::{
    digest, evaluate, permutation_study, write_logits_csv, CandidateSet, EvalReport,
    PermutationStudy, PredictionMode, PromptContext,
};
use crate::labeler::{
    initial_word_update, run_insertion, AnchorScope, InsertionConfig, InsertionTrace,
    LabelSequences,
};
use crate::refiner::{refine_pool, zero_shot_logit_matrix, RefinementReport};
use crate::sampler::{
    score_samples, select_and_order, DemonstrationPlan, SampleScore, ScoringChoice,
};

pub const REFINEMENT: &str = "refinement.json";
pub const REFINED_POOL: &str = "refined_pool.json";
pub const SCORES: &str = "scores.json";
pub const PLAN: &str = "plan.json";
pub const ANCHORS: &str = "anchors.json";
pub const LABELS: &str = "labels.json";
pub const TRACE: &str = "insertion_trace.json";
pub const EVAL: &str = "eval.json";
pub const PERMUTATIONS: &str = "permutations.json";
pub const MANIFEST: &str = "manifest.json";

/// Where logits come from. `{"synthetic": "model.json"}` or
/// `{"http": "http://host:port"}`; `{"http": null}` reads the endpoint from
/// the environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendConfig {
    Synthetic(PathBuf),
    Http(Option<String>),
}

fn default_shots() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_max_rounds() -> usize {
    InsertionConfig::default().max_rounds
}

fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub pool: PathBuf,
    pub template: PathBuf,
    pub backend: BackendConfig,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default)]
    pub scoring: ScoringChoice,
    #[serde(default = "default_true")]
    pub balanced: bool,
    /// Candidate set used for test evaluation.
    #[serde(default)]
    pub mode: PredictionMode,
    /// Candidate set used to score dev accuracy during insertion.
    #[serde(default)]
    pub dev_mode: PredictionMode,
    #[serde(default)]
    pub anchor_scope: AnchorScope,
    #[serde(default)]
    pub per_class_stopping: bool,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    /// Label sequences (pool format) to evaluate instead of the ones built
    /// by insertion.
    #[serde(default)]
    pub cross_pool: Option<PathBuf>,
    /// Permutations evaluated by a full run; 0 skips the study.
    #[serde(default)]
    pub permutations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Logit cache directory; defaults to `cache/` under the output root.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn new(
        train: &Path,
        test: &Path,
        pool: &Path,
        template: &Path,
        backend: BackendConfig,
    ) -> Self {
        Self {
            train: train.into(),
            test: test.into(),
            pool: pool.into(),
            template: template.into(),
            backend,
            shots: default_shots(),
            scoring: ScoringChoice::default(),
            balanced: true,
            mode: PredictionMode::default(),
            dev_mode: PredictionMode::default(),
            anchor_scope: AnchorScope::default(),
            per_class_stopping: false,
            max_rounds: default_max_rounds(),
            cross_pool: None,
            permutations: 0,
            seed: 0,
            parallelism: default_parallelism(),
            cache_dir: None,
        }
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&content)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.train);
        resolve(&mut cfg.test);
        resolve(&mut cfg.pool);
        resolve(&mut cfg.template);
        if let BackendConfig::Synthetic(p) = &mut cfg.backend {
            resolve(p);
        }
        if let Some(p) = cfg.cross_pool.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.cache_dir.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash of every setting that can change results. Parallelism and the
    /// cache location are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.parallelism = default_parallelism();
        c.cache_dir = None;
        digest(&c)
    }

    fn insertion(&self) -> InsertionConfig {
        InsertionConfig {
            max_rounds: self.max_rounds,
            per_class_stopping: self.per_class_stopping,
            dev_mode: self.dev_mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Refine,
    Score,
    Select,
    InitLabels,
    Insert,
    Eval,
    Permute,
    Manifest,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Load => "load",
            Stage::Refine => "refine",
            Stage::Score => "score",
            Stage::Select => "select",
            Stage::InitLabels => "init-labels",
            Stage::Insert => "insert",
            Stage::Eval => "eval",
            Stage::Permute => "permute",
            Stage::Manifest => "manifest",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    /// Process exit code: 2 configuration, 3 backend, 4 data.
    pub fn exit_code(&self) -> i32 {
        exit_code(self.source.kind())
    }
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Backend => 3,
        ErrorKind::Data => 4,
    }
}

type StageResult<T> = std::result::Result<T, StageError>;

fn in_stage<T>(stage: Stage, f: impl FnOnce() -> Result<T>) -> StageResult<T> {
    f().map_err(|source| StageError { stage, source })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub backend: String,
    pub cache: CacheStats,
    /// Artifact name to content digest, for artifacts present in the run.
    pub artifacts: IndexMap<String, String>,
    pub written_at_unix: u64,
}

/// A loaded run: inputs, backend and the run directory.
pub struct Run {
    pub config: PipelineConfig,
    pub dir: PathBuf,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub pool: ClassWordPool,
    pub template: PromptTemplate,
    backend: CachedBackend<Box<dyn LogitBackend>>,
}

impl Run {
    /// Loads inputs, connects the configured backend and creates the run
    /// directory `<out_root>/<config hash>`.
    pub fn open(config: PipelineConfig, out_root: &Path) -> StageResult<Self> {
        in_stage(Stage::Load, || {
            config.validate()?;
            let template = load_template(&config.template)?;
            let backend: Box<dyn LogitBackend> = match &config.backend {
                BackendConfig::Synthetic(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    let spec: SyntheticModelSpec =
                        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
                    Box::new(SyntheticBackend::new(spec, template.clone())?)
                }
                BackendConfig::Http(endpoint) => {
                    let endpoint = match endpoint {
                        Some(e) => e.clone(),
                        None => std::env::var(ENDPOINT_ENV).map_err(|_| {
                            Error::Config(format!(
                                "no logit endpoint configured and {ENDPOINT_ENV} is unset"
                            ))
                        })?,
                    };
                    Box::new(HttpBackend::connect(&endpoint)?)
                }
            };
            Self::assemble(config, out_root, template, backend)
        })
    }

    /// Like [`Run::open`] with an already constructed backend.
    pub fn with_backend(
        config: PipelineConfig,
        out_root: &Path,
        backend: Box<dyn LogitBackend>,
    ) -> StageResult<Self> {
        in_stage(Stage::Load, || {
            config.validate()?;
            let template = load_template(&config.template)?;
            Self::assemble(config, out_root, template, backend)
        })
    }

    fn assemble(
        config: PipelineConfig,
        out_root: &Path,
        template: PromptTemplate,
        backend: Box<dyn LogitBackend>,
    ) -> Result<Self> {
        let pool = load_pool(&config.pool)?;
        let train = load_dataset(&config.train)?;
        train.check_against(&pool)?;
        let test = load_dataset_from(&config.test, train.len())?;
        test.check_against(&pool)?;
        let classes: Vec<String> = pool.classes().map(String::from).collect();
        let test = LabeledDataset::with_classes(test.examples().to_vec(), classes)?;
        let cache_dir = config
            .cache_dir
            .clone()
            .unwrap_or_else(|| out_root.join("cache"));
        let backend = CachedBackend::open(backend, &cache_dir)?;
        let dir = out_root.join(config.hash());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            config,
            dir,
            train,
            test,
            pool,
            template,
            backend,
        })
    }

    pub fn backend(&self) -> &dyn LogitBackend {
        &self.backend
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.backend.stats()
    }

    pub fn artifact_path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn read_artifact<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let path = self.artifact_path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }

    fn write_artifact<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        write_file(&self.artifact_path(name), &text)
    }

    fn refined_pool(&self) -> Result<ClassWordPool> {
        let report: RefinementReport = self.read_artifact(REFINEMENT)?;
        report.refined_pool(&self.pool)
    }

    fn plan(&self) -> Result<DemonstrationPlan> {
        self.read_artifact(PLAN)
    }

    pub fn refine(&self) -> StageResult<RefinementReport> {
        in_stage(Stage::Refine, || {
            let (refined, report) = refine_pool(
                &self.train,
                &self.pool,
                &self.template,
                self.backend(),
                self.config.parallelism,
            )?;
            self.write_artifact(REFINEMENT, &report)?;
            self.write_artifact(REFINED_POOL, refined.as_map())?;
            Ok(report)
        })
    }

    pub fn score(&self) -> StageResult<Vec<SampleScore>> {
        in_stage(Stage::Score, || {
            let refined = self.refined_pool()?;
            let matrix = zero_shot_logit_matrix(
                &self.train,
                &refined,
                &self.template,
                self.backend(),
                self.config.parallelism,
            )?;
            let (_, scores) = score_samples(&matrix, &refined, self.config.scoring)?;
            self.write_artifact(SCORES, &scores)?;
            Ok(scores)
        })
    }

    pub fn select(&self) -> StageResult<DemonstrationPlan> {
        in_stage(Stage::Select, || {
            let scores: Vec<SampleScore> = self.read_artifact(SCORES)?;
            let classes: Vec<String> = self.pool.classes().map(String::from).collect();
            let plan =
                select_and_order(&scores, &classes, self.config.shots, self.config.balanced)?;
            self.write_artifact(PLAN, &plan)?;
            Ok(plan)
        })
    }

    pub fn init_labels(&self) -> StageResult<LabelSequences> {
        in_stage(Stage::InitLabels, || {
            let refined = self.refined_pool()?;
            let plan = self.plan()?;
            let anchors = initial_word_update(
                &plan,
                &self.train,
                &refined,
                &self.template,
                self.backend(),
                self.config.anchor_scope,
                self.config.parallelism,
            )?;
            self.write_artifact(ANCHORS, &anchors)?;
            Ok(anchors)
        })
    }

    pub fn insert(&self) -> StageResult<(LabelSequences, InsertionTrace)> {
        in_stage(Stage::Insert, || {
            let refined = self.refined_pool()?;
            let plan = self.plan()?;
            let anchors: LabelSequences = self.read_artifact(ANCHORS)?;
            let dev = derive_dev(&self.train, &plan.sample_ids().into_iter().collect())?;
            let (labels, trace) = run_insertion(
                &anchors,
                &plan,
                &self.train,
                &dev,
                &refined,
                &self.template,
                self.backend(),
                &self.config.insertion(),
                self.config.parallelism,
            )?;
            self.write_artifact(LABELS, &labels)?;
            self.write_artifact(TRACE, &trace)?;
            Ok((labels, trace))
        })
    }

    /// Label sequences used at evaluation: the cross pool when configured,
    /// otherwise the insertion output.
    fn eval_labels(&self) -> Result<LabelSequences> {
        match &self.config.cross_pool {
            Some(path) => {
                let labels = LabelSequences::from_map(load_pool(path)?.as_map().clone());
                for class in self.pool.classes() {
                    labels.words(class)?;
                }
                Ok(labels)
            }
            None => self.read_artifact(LABELS),
        }
    }

    fn eval_setup(
        &self,
        mode: PredictionMode,
    ) -> Result<(DemonstrationPlan, PromptContext, CandidateSet)> {
        let refined = self.refined_pool()?;
        let plan = self.plan()?;
        let labels = self.eval_labels()?;
        let ctx = PromptContext::from_plan(
            &self.template,
            &plan,
            &self.train,
            &labels,
            self.backend.max_prompt_chars(),
        )?;
        let classes: Vec<String> = self.pool.classes().map(String::from).collect();
        let candidates = CandidateSet::new(mode, &classes, &labels, &refined)?;
        Ok((plan, ctx, candidates))
    }

    /// Evaluates on the test set. A mode other than the configured one is
    /// written to `eval_<mode>.json`.
    pub fn eval(
        &self,
        mode: Option<PredictionMode>,
        logits_csv: Option<&Path>,
    ) -> StageResult<EvalReport> {
        in_stage(Stage::Eval, || {
            let mode = mode.unwrap_or(self.config.mode);
            let (plan, ctx, candidates) = self.eval_setup(mode)?;
            let (report, outcomes) = evaluate(
                &self.test,
                &ctx,
                &plan,
                &candidates,
                mode,
                self.backend(),
                self.config.parallelism,
            )?;
            let name = if mode == self.config.mode {
                EVAL.to_string()
            } else {
                format!("eval_{mode}.json")
            };
            self.write_artifact(&name, &report)?;
            if let Some(path) = logits_csv {
                write_logits_csv(path, &outcomes, &candidates)?;
            }
            Ok(report)
        })
    }

    pub fn permute(&self, n_perms: usize, seed: u64) -> StageResult<PermutationStudy> {
        in_stage(Stage::Permute, || {
            let mode = self.config.mode;
            let (plan, ctx, candidates) = self.eval_setup(mode)?;
            let study = permutation_study(
                &plan,
                n_perms,
                seed,
                &ctx,
                &self.test,
                &candidates,
                mode,
                self.backend(),
                self.config.parallelism,
            )?;
            self.write_artifact(PERMUTATIONS, &study)?;
            Ok(study)
        })
    }

    pub fn write_manifest(&self) -> StageResult<Manifest> {
        in_stage(Stage::Manifest, || {
            let mut artifacts = IndexMap::new();
            let mut names: Vec<String> = std::fs::read_dir(&self.dir)
                .map_err(|e| Error::io(&self.dir, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".json") && n != MANIFEST)
                .collect();
            names.sort();
            for name in names {
                let path = self.artifact_path(&name);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                artifacts.insert(name, digest(&bytes));
            }
            let manifest = Manifest {
                version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: self.config.hash(),
                config: self.config.clone(),
                backend: self.backend.identity(),
                cache: self.cache_stats(),
                artifacts,
                written_at_unix: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            self.write_artifact(MANIFEST, &manifest)?;
            Ok(manifest)
        })
    }

    /// Every stage in order, then the manifest.
    pub fn run_all(&self) -> StageResult<EvalReport> {
        self.refine()?;
        self.score()?;
        self.select()?;
        self.init_labels()?;
        self.insert()?;
        let report = self.eval(None, None)?;
        if self.config.permutations > 0 {
            self.permute(self.config.permutations, self.config.seed)?;
        }
        self.write_manifest()?;
        Ok(report)
    }
}

/// Opens a run from a config and executes every stage.
pub fn run_pipeline(config: PipelineConfig, out_root: &Path) -> StageResult<(Run, EvalReport)> {
    let run = Run::open(config, out_root)?;
    let report = run.run_all()?;
    Ok((run, report))
}
