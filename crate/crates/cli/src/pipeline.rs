//! Stage runners. Each stage reads its inputs from the workdir (or the
//! configured source files) and writes stage-prefixed artifacts back.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use funcda_core::annotate::{
    annotate_batch, annotate_with_checkpoint, distribution_report, write_annotations, AnnotationReport,
    UnlabeledPart,
};
use funcda_core::backend::remote::RemoteClient;
use funcda_core::backend::softmax::{self, NativeClassifier, SoftmaxModel, TrainingTrace};
use funcda_core::backend::{Classifier, ClassifierFactory, Hyperparameters, NativeFactory, RemoteClassifier, RemoteFactory};
use funcda_core::corpus::{
    label_histogram, split_indices, to_chat_example, to_jsonl_bytes, LabeledExample,
};
use funcda_core::eval::EvaluationReport;
use funcda_core::ingest::{
    match_abc_to_osdr, parse_abc_chunks, parse_abc_metadata, parse_osdr_csv, preprocess, write_abc_csv,
    write_records_csv, CorpusStats, DesignRecord,
};
use funcda_core::search::{run_search, score, subsample_study, subsample_table, SearchOptions, SearchReport, SubsampleRow};
use funcda_core::taxonomy::{FunctionLabel, Taxonomy};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Command;
use crate::config::{BackendKind, PipelineConfig, Provenance};
use crate::report;

pub const RECORDS_CSV: &str = "01_records.csv";
pub const INGEST_STATS: &str = "01_ingest_stats.json";
pub const MATCHED_CSV: &str = "02_matched.csv";
pub const MATCH_STATS: &str = "02_match_stats.json";
pub const TRAIN_CSV: &str = "03_train.csv";
pub const TEST_CSV: &str = "03_test.csv";
pub const POOL_CSV: &str = "03_train_pool.csv";
pub const SPLIT_JSON: &str = "03_split.json";
pub const TRAIN_JSONL: &str = "04_train.jsonl";
pub const TEST_JSONL: &str = "04_test.jsonl";
pub const SEARCH_JSON: &str = "05_search.json";
pub const SEARCH_TXT: &str = "05_search.txt";
pub const SUBSAMPLE_JSON: &str = "05_subsample.json";
pub const SUBSAMPLE_TXT: &str = "05_subsample.txt";
pub const MODEL_JSON: &str = "06_model.json";
pub const REMOTE_MODEL_JSON: &str = "06_remote_model.json";
pub const TRAINING_JSON: &str = "06_training.json";
pub const EVAL_JSON: &str = "07_eval.json";
pub const EVAL_TXT: &str = "07_eval.txt";
pub const CONFUSION_CSV: &str = "07_confusion_test.csv";
pub const ANNOTATIONS_CSV: &str = "08_annotations.csv";
pub const DISTRIBUTION_JSON: &str = "08_distribution.json";
pub const DISTRIBUTION_CSV: &str = "08_distribution.csv";
pub const REPORT_MD: &str = "09_report.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration or missing inputs; exit status 2.
    Config,
    /// A stage failed while running; exit status 1.
    Pipeline,
}

#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub kind: ErrorKind,
    pub error: anyhow::Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Pipeline => 1,
        }
    }
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ErrorKind::Config => "invalid configuration",
            ErrorKind::Pipeline => "pipeline error",
        };
        write!(f, "{kind} in stage {}: {:#}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

trait StageContext<T> {
    fn config_err(self, stage: &'static str) -> Result<T, StageError>;
    fn stage_err(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: Into<anyhow::Error>> StageContext<T> for Result<T, E> {
    fn config_err(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            kind: ErrorKind::Config,
            error: e.into(),
        })
    }

    fn stage_err(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            kind: ErrorKind::Pipeline,
            error: e.into(),
        })
    }
}

/// Per-invocation inputs that are not part of the hashed configuration.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub model: Option<PathBuf>,
    pub model_id: Option<String>,
    pub parts: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train: usize,
    pub train_pool: usize,
    pub test: usize,
    pub histogram: Vec<HistogramRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramRow {
    pub label: FunctionLabel,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSummary {
    pub stats: CorpusStats,
    pub labels: Vec<(FunctionLabel, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchSummary {
    pub abc_parts: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsampleArtifact {
    pub hp: Hyperparameters,
    pub rows: Vec<SubsampleRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingArtifact {
    pub model_id: String,
    pub hp: Hyperparameters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TrainingTrace>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub name: String,
    pub model_id: String,
    pub train: EvaluationReport,
    pub test: EvaluationReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub models: Vec<ModelEvaluation>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    prov: Provenance,
    taxonomy: Taxonomy,
    inputs: Inputs,
}

impl Pipeline {
    /// Validates the configuration and creates the workdir.
    pub fn new(cfg: PipelineConfig, inputs: Inputs) -> Result<Self, StageError> {
        cfg.validate().config_err("config")?;
        let taxonomy = cfg.load_taxonomy().config_err("config")?;
        std::fs::create_dir_all(&cfg.workdir)
            .with_context(|| format!("creating workdir {}", cfg.workdir.display()))
            .config_err("config")?;
        Ok(Pipeline {
            prov: cfg.provenance(),
            cfg,
            taxonomy,
            inputs,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.workdir.join(name)
    }

    pub fn run(&self, command: Command) -> Result<(), StageError> {
        match command {
            Command::Ingest => self.ingest(),
            Command::Match => self.match_parts(),
            Command::Split => self.split(),
            Command::Prepare => self.prepare(),
            Command::Search => self.search(),
            Command::Train => self.train(),
            Command::Evaluate => self.evaluate(),
            Command::Annotate => self.annotate(),
            Command::Report => self.report(),
            Command::Run => self.run_all(),
            Command::MockServer { .. } => Err(anyhow!("mock-server is not a pipeline stage")).config_err("config"),
        }
    }

    pub fn run_all(&self) -> Result<(), StageError> {
        self.ingest()?;
        if !self.cfg.abc.is_empty() {
            self.match_parts()?;
        }
        self.split()?;
        self.prepare()?;
        self.search()?;
        self.train()?;
        self.evaluate()?;
        if self.inputs.parts.is_some() || self.path(MATCHED_CSV).exists() {
            self.annotate()?;
        }
        self.report()
    }

    fn require(&self, stage: &'static str, path: &Path, hint: &str) -> Result<(), StageError> {
        if path.exists() {
            Ok(())
        } else {
            Err(anyhow!("{} does not exist ({hint})", path.display())).config_err(stage)
        }
    }

    fn require_artifact(&self, stage: &'static str, name: &str, producer: &str) -> Result<PathBuf, StageError> {
        let p = self.path(name);
        self.require(stage, &p, &format!("run `funcda {producer}` first"))?;
        Ok(p)
    }

    fn write_bytes(&self, stage: &'static str, name: &str, bytes: &[u8]) -> Result<(), StageError> {
        let p = self.path(name);
        std::fs::write(&p, bytes)
            .with_context(|| format!("writing {}", p.display()))
            .stage_err(stage)?;
        tracing::info!(stage, artifact = %p.display(), "wrote");
        Ok(())
    }

    /// JSON object with a `provenance` key added at the top level.
    fn write_json<T: Serialize>(&self, stage: &'static str, name: &str, value: &T) -> Result<(), StageError> {
        let mut v = serde_json::to_value(value).stage_err(stage)?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| anyhow!("{name}: artifact is not a JSON object"))
            .stage_err(stage)?;
        obj.insert("provenance".into(), serde_json::to_value(&self.prov).stage_err(stage)?);
        let mut text = serde_json::to_string_pretty(&v).stage_err(stage)?;
        text.push('\n');
        self.write_bytes(stage, name, text.as_bytes())
    }

    /// Text or CSV with a leading `# provenance` comment line.
    fn write_commented(&self, stage: &'static str, name: &str, body: &[u8]) -> Result<(), StageError> {
        let mut out = self.prov.comment_line().into_bytes();
        out.extend_from_slice(body);
        self.write_bytes(stage, name, &out)
    }

    fn read_json<T: DeserializeOwned>(&self, stage: &'static str, path: &Path) -> Result<T, StageError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .stage_err(stage)?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .stage_err(stage)
    }

    fn load_records(&self, stage: &'static str) -> Result<Vec<DesignRecord>, StageError> {
        let p = self.require_artifact(stage, RECORDS_CSV, "ingest")?;
        let rows = parse_osdr_csv(&p).stage_err(stage)?;
        Ok(preprocess(&rows, &self.taxonomy).0)
    }

    fn load_examples(&self, stage: &'static str, name: &str) -> Result<Vec<LabeledExample>, StageError> {
        let p = self.require_artifact(stage, name, "split")?;
        read_examples_csv(&p).stage_err(stage)
    }

    fn write_examples(&self, stage: &'static str, name: &str, examples: &[LabeledExample]) -> Result<(), StageError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for ex in examples {
            w.serialize(ex).stage_err(stage)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow!("{e}")).stage_err(stage)?;
        self.write_commented(stage, name, &bytes)
    }

    pub fn ingest(&self) -> Result<(), StageError> {
        const STAGE: &str = "ingest";
        let osdr = self
            .cfg
            .osdr
            .clone()
            .ok_or_else(|| anyhow!("no OSDR export given (--osdr or \"osdr\" in the config)"))
            .config_err(STAGE)?;
        self.require(STAGE, &osdr, "OSDR export")?;
        let rows = parse_osdr_csv(&osdr).stage_err(STAGE)?;
        let (records, stats) = preprocess(&rows, &self.taxonomy);
        if records.is_empty() {
            return Err(anyhow!("no complete records in {}", osdr.display())).stage_err(STAGE);
        }
        tracing::info!(?stats, "preprocessed OSDR export");
        let mut buf = Vec::new();
        write_records_csv(&records, &mut buf).stage_err(STAGE)?;
        self.write_commented(STAGE, RECORDS_CSV, &buf)?;
        let examples: Vec<LabeledExample> = records.iter().map(LabeledExample::from).collect();
        self.write_json(
            STAGE,
            INGEST_STATS,
            &IngestSummary {
                stats,
                labels: label_histogram(&examples),
            },
        )
    }

    pub fn match_parts(&self) -> Result<(), StageError> {
        const STAGE: &str = "match";
        if self.cfg.abc.is_empty() {
            return Err(anyhow!("no ABC metadata files given (--abc or \"abc\" in the config)")).config_err(STAGE);
        }
        for p in &self.cfg.abc {
            self.require(STAGE, p, "ABC metadata chunk")?;
        }
        let records = self.load_records(STAGE)?;
        let abc = parse_abc_chunks(&self.cfg.abc).stage_err(STAGE)?;
        let matched = match_abc_to_osdr(&abc, &records);
        tracing::info!(abc = abc.len(), matched = matched.len(), "matched ABC parts");
        let mut buf = Vec::new();
        write_abc_csv(&matched, &mut buf).stage_err(STAGE)?;
        self.write_commented(STAGE, MATCHED_CSV, &buf)?;
        self.write_json(
            STAGE,
            MATCH_STATS,
            &MatchSummary {
                abc_parts: abc.len(),
                matched: matched.len(),
            },
        )
    }

    pub fn split(&self) -> Result<(), StageError> {
        const STAGE: &str = "split";
        let examples: Vec<LabeledExample> = self.load_records(STAGE)?.iter().map(LabeledExample::from).collect();
        let labels: Vec<FunctionLabel> = examples.iter().map(|e| e.label.clone()).collect();
        let idx = split_indices(&labels, &self.cfg.split).stage_err(STAGE)?;
        let pick = |ids: &[usize]| ids.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
        let (train, pool, test) = (pick(&idx.train), pick(&idx.train_pool), pick(&idx.test));
        self.write_examples(STAGE, TRAIN_CSV, &train)?;
        self.write_examples(STAGE, POOL_CSV, &pool)?;
        self.write_examples(STAGE, TEST_CSV, &test)?;
        let hist_train = label_histogram(&train);
        let hist_test = label_histogram(&test);
        let histogram = hist_train
            .iter()
            .zip(&hist_test)
            .map(|((label, tr), (_, te))| HistogramRow {
                label: label.clone(),
                train: *tr,
                test: *te,
            })
            .collect();
        self.write_json(
            STAGE,
            SPLIT_JSON,
            &SplitSummary {
                train: train.len(),
                train_pool: pool.len(),
                test: test.len(),
                histogram,
            },
        )
    }

    pub fn prepare(&self) -> Result<(), StageError> {
        const STAGE: &str = "prepare";
        let system = self.cfg.remote.system_message.as_deref();
        for (csv_name, jsonl_name) in [(TRAIN_CSV, TRAIN_JSONL), (TEST_CSV, TEST_JSONL)] {
            let examples = self.load_examples(STAGE, csv_name)?;
            let chats = examples
                .iter()
                .map(|ex| to_chat_example(ex, &self.taxonomy, system))
                .collect::<Result<Vec<_>, _>>()
                .stage_err(STAGE)?;
            let bytes = to_jsonl_bytes(&chats);
            self.write_bytes(STAGE, jsonl_name, &bytes)?;
            // the upload file must stay byte-exact, so provenance goes beside it
            let sidecar = SidecarProvenance {
                file: jsonl_name.to_string(),
                sha256: sha256_hex(&bytes),
                examples: chats.len(),
                characters: bytes.len(),
            };
            self.write_json(STAGE, &format!("{jsonl_name}.provenance.json"), &sidecar)?;
        }
        Ok(())
    }

    fn remote_client(&self, stage: &'static str) -> Result<Arc<RemoteClient>, StageError> {
        Ok(Arc::new(RemoteClient::new(self.cfg.remote_config()).stage_err(stage)?))
    }

    fn factory(&self, stage: &'static str) -> Result<Box<dyn ClassifierFactory>, StageError> {
        Ok(match self.cfg.backend {
            BackendKind::Native => Box::new(NativeFactory {
                taxonomy: self.taxonomy.clone(),
                config: self.cfg.native,
                seed: self.cfg.train_seed,
            }),
            BackendKind::Remote => Box::new(RemoteFactory {
                client: self.remote_client(stage)?,
                taxonomy: self.taxonomy.clone(),
            }),
        })
    }

    pub fn search(&self) -> Result<(), StageError> {
        const STAGE: &str = "search";
        let train = self.load_examples(STAGE, TRAIN_CSV)?;
        let test = self.load_examples(STAGE, TEST_CSV)?;
        let factory = self.factory(STAGE)?;
        let options = SearchOptions {
            objective: self.cfg.objective,
            parallel_trials: self.cfg.parallel_trials,
            eval: self.cfg.eval_options(),
        };
        let report = run_search(&self.cfg.search, &train, &test, factory.as_ref(), &options).stage_err(STAGE)?;
        tracing::info!(best = %report.best, "search finished");
        self.write_json(STAGE, SEARCH_JSON, &report)?;
        self.write_commented(STAGE, SEARCH_TXT, report.to_table().as_bytes())?;

        if self.cfg.subsample_fractions.is_empty() {
            return Ok(());
        }
        let pool = self.load_examples(STAGE, POOL_CSV)?;
        let rows = subsample_study(
            report.best,
            &self.cfg.subsample_fractions,
            &pool,
            &test,
            factory.as_ref(),
            self.cfg.split.seed,
            self.cfg.split.stratified,
            self.cfg.eval_options(),
        )
        .stage_err(STAGE)?;
        self.write_commented(STAGE, SUBSAMPLE_TXT, subsample_table(&rows).as_bytes())?;
        self.write_json(STAGE, SUBSAMPLE_JSON, &SubsampleArtifact { hp: report.best, rows })
    }

    fn chosen_hyperparameters(&self, stage: &'static str) -> Result<Hyperparameters, StageError> {
        if let Some(hp) = self.cfg.train {
            return Ok(hp);
        }
        let p = self.path(SEARCH_JSON);
        if !p.exists() {
            return Err(anyhow!(
                "no hyperparameters: pass --epochs/--batch-size/--lr, set \"train\" in the config, or run `funcda search`"
            ))
            .config_err(stage);
        }
        let report: SearchReport = self.read_json(stage, &p)?;
        Ok(report.best)
    }

    pub fn train(&self) -> Result<(), StageError> {
        const STAGE: &str = "train";
        let train = self.load_examples(STAGE, TRAIN_CSV)?;
        let hp = self.chosen_hyperparameters(STAGE)?;
        match self.cfg.backend {
            BackendKind::Native => {
                let (model, trace) =
                    softmax::train(&train, &hp, self.cfg.train_seed, &self.cfg.native, &self.taxonomy).stage_err(STAGE)?;
                let model_id = native_model_id(&model);
                tracing::info!(%hp, model_id, train_accuracy = trace.train_accuracy, "trained native model");
                self.write_json(STAGE, MODEL_JSON, &model)?;
                self.write_json(
                    STAGE,
                    TRAINING_JSON,
                    &TrainingArtifact {
                        model_id,
                        hp,
                        trace: Some(trace),
                    },
                )
            }
            BackendKind::Remote => {
                let factory = RemoteFactory {
                    client: self.remote_client(STAGE)?,
                    taxonomy: self.taxonomy.clone(),
                };
                let clf = factory.build(&hp, &train, 0).stage_err(STAGE)?;
                let artifact = TrainingArtifact {
                    model_id: clf.id().to_string(),
                    hp,
                    trace: None,
                };
                self.write_json(STAGE, REMOTE_MODEL_JSON, &artifact)?;
                self.write_json(STAGE, TRAINING_JSON, &artifact)
            }
        }
    }

    fn classifier(&self, stage: &'static str) -> Result<Box<dyn Classifier>, StageError> {
        match self.cfg.backend {
            BackendKind::Native => {
                let path = match &self.inputs.model {
                    Some(p) => {
                        self.require(stage, p, "model file")?;
                        p.clone()
                    }
                    None => self.require_artifact(stage, MODEL_JSON, "train")?,
                };
                let model = SoftmaxModel::load(&path).stage_err(stage)?;
                let id = native_model_id(&model);
                Ok(Box::new(NativeClassifier::new(id, model, self.taxonomy.clone())))
            }
            BackendKind::Remote => {
                let model_id = match &self.inputs.model_id {
                    Some(id) => id.clone(),
                    None => {
                        let p = self.require_artifact(stage, REMOTE_MODEL_JSON, "train --backend remote")?;
                        self.read_json::<TrainingArtifact>(stage, &p)?.model_id
                    }
                };
                Ok(Box::new(RemoteClassifier::new(
                    self.remote_client(stage)?,
                    model_id,
                    self.taxonomy.clone(),
                )))
            }
        }
    }

    fn baseline(&self, stage: &'static str) -> Result<Box<dyn Classifier>, StageError> {
        Ok(match self.cfg.backend {
            BackendKind::Native => {
                let model = SoftmaxModel::zeros(self.cfg.native.featurizer).stage_err(stage)?;
                Box::new(NativeClassifier::new("native-untrained", model, self.taxonomy.clone()))
            }
            BackendKind::Remote => Box::new(RemoteClassifier::new(
                self.remote_client(stage)?,
                self.cfg.remote.base_model.clone(),
                self.taxonomy.clone(),
            )),
        })
    }

    pub fn evaluate(&self) -> Result<(), StageError> {
        const STAGE: &str = "evaluate";
        let train = self.load_examples(STAGE, TRAIN_CSV)?;
        let test = self.load_examples(STAGE, TEST_CSV)?;
        let opts = self.cfg.eval_options();
        let mut candidates = vec![("fine-tuned".to_string(), self.classifier(STAGE)?)];
        if self.cfg.baseline {
            candidates.push(("baseline".to_string(), self.baseline(STAGE)?));
        }
        let mut models = Vec::new();
        for (name, clf) in candidates {
            clf.ensure_ready().stage_err(STAGE)?;
            models.push(ModelEvaluation {
                model_id: clf.id().to_string(),
                train: score(clf.as_ref(), &train, opts).stage_err(STAGE)?,
                test: score(clf.as_ref(), &test, opts).stage_err(STAGE)?,
                name,
            });
        }
        let artifact = EvalArtifact { models };
        self.write_commented(STAGE, CONFUSION_CSV, artifact.models[0].test.confusion.to_csv().as_bytes())?;
        self.write_commented(STAGE, EVAL_TXT, report::model_table(&artifact).as_bytes())?;
        self.write_json(STAGE, EVAL_JSON, &artifact)
    }

    pub fn annotate(&self) -> Result<(), StageError> {
        const STAGE: &str = "annotate";
        let source = match &self.inputs.parts {
            Some(p) => {
                self.require(STAGE, p, "parts file")?;
                p.clone()
            }
            None => self.require_artifact(STAGE, MATCHED_CSV, "match")?,
        };
        let parts: Vec<UnlabeledPart> = parse_abc_metadata(&source)
            .stage_err(STAGE)?
            .iter()
            .map(UnlabeledPart::from)
            .collect();
        let clf = self.classifier(STAGE)?;
        let results = if self.cfg.checkpoint_block > 0 {
            let ckpt = self.path(&format!("08_checkpoint_{}.jsonl", file_safe(clf.id())));
            annotate_with_checkpoint(&parts, clf.as_ref(), &ckpt, self.cfg.checkpoint_block)
        } else {
            annotate_batch(&parts, clf.as_ref())
        }
        .stage_err(STAGE)?;
        let mut buf = Vec::new();
        write_annotations(&results, &mut buf).stage_err(STAGE)?;
        self.write_commented(STAGE, ANNOTATIONS_CSV, &buf)?;
        let dist = distribution_report(&results).stage_err(STAGE)?;
        self.write_commented(STAGE, DISTRIBUTION_CSV, dist.to_csv().as_bytes())?;
        self.write_json(STAGE, DISTRIBUTION_JSON, &dist)
    }

    pub fn report(&self) -> Result<(), StageError> {
        const STAGE: &str = "report";
        let load = |name: &str| -> Option<PathBuf> { Some(self.path(name)).filter(|p| p.exists()) };
        let inputs = report::ReportInputs {
            ingest: load(INGEST_STATS).map(|p| self.read_json::<IngestSummary>(STAGE, &p)).transpose()?,
            split: load(SPLIT_JSON).map(|p| self.read_json::<SplitSummary>(STAGE, &p)).transpose()?,
            search: load(SEARCH_JSON).map(|p| self.read_json::<SearchReport>(STAGE, &p)).transpose()?,
            subsample: load(SUBSAMPLE_JSON)
                .map(|p| self.read_json::<SubsampleArtifact>(STAGE, &p))
                .transpose()?,
            eval: load(EVAL_JSON).map(|p| self.read_json::<EvalArtifact>(STAGE, &p)).transpose()?,
            distribution: load(DISTRIBUTION_JSON)
                .map(|p| self.read_json::<AnnotationReport>(STAGE, &p))
                .transpose()?,
        };
        if inputs.is_empty() {
            return Err(anyhow!("no stage artifacts in {}", self.cfg.workdir.display())).config_err(STAGE);
        }
        let text = report::render(&inputs, &self.prov);
        self.write_bytes(STAGE, REPORT_MD, text.as_bytes())
    }
}

#[derive(Debug, Serialize)]
struct SidecarProvenance {
    file: String,
    sha256: String,
    examples: usize,
    characters: usize,
}

pub fn read_examples_csv(path: &Path) -> anyhow::Result<Vec<LabeledExample>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .collect::<Result<Vec<LabeledExample>, _>>()
        .with_context(|| format!("reading {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content-derived id, so checkpoints never mix results from two models.
pub fn native_model_id(model: &SoftmaxModel) -> String {
    let bytes = serde_json::to_vec(model).expect("model serializes");
    format!("native-{}", &sha256_hex(&bytes)[..12])
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_safe_replaces_separators() {
        assert_eq!(file_safe("ft:mock-model:0001"), "ft_mock-model_0001");
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let e: Result<(), _> = Err(anyhow!("x")).config_err("split");
        let e = e.unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("stage split"));
        let e: Result<(), _> = Err(anyhow!("x")).stage_err("train");
        assert_eq!(e.unwrap_err().exit_code(), 1);
    }

    #[test]
    fn native_ids_differ_by_weights() {
        let cfg = funcda_core::backend::FeaturizerConfig {
            dim: 4,
            ..Default::default()
        };
        let a = SoftmaxModel::zeros(cfg).unwrap();
        let mut b = a.clone();
        b.set_weight(0, 0, 1.0);
        assert_ne!(native_model_id(&a), native_model_id(&b));
        assert_eq!(native_model_id(&a), native_model_id(&a.clone()));
    }
}
