//! One function per subcommand. Stages read configured inputs plus the
//! files earlier stages left in the output directory, so running them one
//! at a time and running `pipeline` produce the same bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use distill_core::corpus::{dedup_corpus, Corpus};
use distill_core::embeddings::EmbeddingStore;
use distill_core::eval::{rerank_run, standard_report, MetricReport, Qrels, RunFile};
use distill_core::jsonl;
use distill_core::negatives::{
    mine_all, read_groups, sweep_csv, threshold_sweep, write_groups, EvalBundle, MiningSource,
};
use distill_core::querygen::{filter_queries, read_queries, validate_query, FilterReport, GeneratedQuery};
use distill_core::teacher::{normalize_scores, NormalizedScoreTable, RawScoreTable};
use distill_core::trainer::{apply_adapter, train, AdapterModel};
use distill_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::config::{hex_digest, PipelineConfig};
use crate::error::CliError;

pub const DEDUP_CORPUS: &str = "corpus.dedup.jsonl";
pub const DEDUP_REMOVALS: &str = "dedup.removals.jsonl";
pub const TEACHER_NORMALIZED: &str = "teacher.normalized.jsonl";
pub const FILTER_REPORT: &str = "filter_report.json";
pub const TEACHER_TRAIN: &str = "teacher.train.jsonl";
pub const GROUPS: &str = "groups.jsonl";
pub const REJECTIONS: &str = "rejections.jsonl";
pub const CHECKPOINT: &str = "adapter.ckpt";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const ADAPTED_PASSAGES: &str = "passages.adapted.emb";
pub const ADAPTED_QUERIES: &str = "eval_queries.adapted.emb";
pub const BASE_RUN: &str = "run.base.trec";
pub const ADAPTED_RUN: &str = "run.adapted.trec";
pub const METRICS: &str = "metrics.json";
pub const RERANK_RUN: &str = "run.rerank.trec";
pub const RERANK_METRICS: &str = "metrics.rerank.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";

#[derive(Serialize)]
struct InputEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    stage: &'a str,
    version: &'a str,
    seed: u64,
    deterministic: bool,
    config_hash: String,
    inputs: BTreeMap<String, InputEntry>,
    outputs: BTreeMap<String, String>,
}

/// Tracks what one stage read and wrote, then records it in
/// `<stage>.manifest.json`.
pub struct Stage<'a> {
    cfg: &'a PipelineConfig,
    name: &'static str,
    out: PathBuf,
    inputs: BTreeMap<String, PathBuf>,
    outputs: Vec<String>,
}

impl<'a> Stage<'a> {
    pub fn begin(cfg: &'a PipelineConfig, name: &'static str) -> Result<Self, CliError> {
        let out = cfg.output_dir()?.to_path_buf();
        std::fs::create_dir_all(&out)
            .map_err(|e| CliError::Usage(format!("cannot create output dir {}: {e}", out.display())))?;
        tracing::info!(stage = name, out = %out.display(), "start");
        Ok(Stage { cfg, name, out, inputs: BTreeMap::new(), outputs: Vec::new() })
    }

    /// A configured input file; must exist.
    fn input(&mut self, key: &str) -> Result<PathBuf, CliError> {
        let path = self
            .cfg
            .paths
            .get(key)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "{}: paths.{key} is not set (config or DISTILL_{})",
                    self.name,
                    key.to_uppercase()
                ))
            })?
            .clone();
        if !path.is_file() {
            return Err(CliError::Usage(format!("{}: {key} file {} does not exist", self.name, path.display())));
        }
        self.inputs.insert(key.to_string(), path.clone());
        Ok(path)
    }

    /// A file written earlier by `producer` into the output directory.
    fn prior(&mut self, file: &str, producer: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(file);
        if !path.is_file() {
            return Err(CliError::Usage(format!(
                "{}: {} not found; run `distill {producer}` first",
                self.name,
                path.display()
            )));
        }
        self.inputs.insert(file.to_string(), path.clone());
        Ok(path)
    }

    /// An explicit file named on the command line.
    fn extra(&mut self, key: String, path: &Path) -> Result<PathBuf, CliError> {
        if !path.is_file() {
            return Err(CliError::Usage(format!("{}: {} does not exist", self.name, path.display())));
        }
        self.inputs.insert(key, path.to_path_buf());
        Ok(path.to_path_buf())
    }

    fn output(&mut self, file: &str) -> PathBuf {
        self.outputs.push(file.to_string());
        self.out.join(file)
    }

    fn finish(self) -> Result<(), CliError> {
        let hash = |p: &Path| -> Result<String, CliError> {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(hex_digest(&bytes))
        };
        let mut inputs = BTreeMap::new();
        for (key, path) in &self.inputs {
            inputs.insert(key.clone(), InputEntry { path: path.display().to_string(), sha256: hash(path)? });
        }
        let mut outputs = BTreeMap::new();
        for file in &self.outputs {
            outputs.insert(file.clone(), hash(&self.out.join(file))?);
        }
        let manifest = Manifest {
            stage: self.name,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.cfg.settings.seed,
            deterministic: self.cfg.settings.deterministic,
            config_hash: self.cfg.settings.hash(),
            inputs,
            outputs,
        };
        jsonl::write_json(&self.out.join(format!("{}.manifest.json", self.name)), &manifest)?;
        tracing::info!(stage = self.name, "done");
        Ok(())
    }
}

/// Passage embeddings restricted to the de-duplicated corpus. Every kept
/// passage needs a vector.
fn passage_store(stage: &mut Stage) -> Result<EmbeddingStore, CliError> {
    let path = stage.input("passage_embeddings")?;
    let corpus = Corpus::read_jsonl(&stage.prior(DEDUP_CORPUS, "dedup")?)?;
    let store = EmbeddingStore::read(&path, None)?;
    if let Some(p) = corpus.passages().iter().find(|p| store.position(&p.id).is_none()) {
        return Err(Error::MissingEmbedding(p.id.clone()).into());
    }
    warn_norms(&path, &store);
    Ok(store.filter(|id| corpus.contains(id)))
}

fn query_store(stage: &mut Stage, key: &str, dim: usize) -> Result<EmbeddingStore, CliError> {
    let path = stage.input(key)?;
    let store = EmbeddingStore::read(&path, Some(dim))?;
    warn_norms(&path, &store);
    Ok(store)
}

fn warn_norms(path: &Path, store: &EmbeddingStore) {
    if !store.norm_warnings().is_empty() {
        tracing::warn!(
            file = %path.display(),
            count = store.norm_warnings().len(),
            first = %store.norm_warnings()[0],
            "vectors were not unit length and have been renormalized"
        );
    }
}

fn generated_queries(stage: &mut Stage) -> Result<Vec<GeneratedQuery>, CliError> {
    let corpus = Corpus::read_jsonl(&stage.input("corpus")?)?;
    let queries = read_queries(&stage.input("queries")?, Some(&corpus))?;
    let flagged = queries.iter().filter(|q| !validate_query(q).is_empty()).count();
    if flagged > 0 {
        tracing::warn!(flagged, "queries with validation warnings");
    }
    Ok(queries)
}

/// `(query, source passage)` for the queries that survived filtering, in
/// query-file order.
fn kept_pairs(queries: &[GeneratedQuery], report: &FilterReport) -> Vec<(String, String)> {
    let kept: BTreeSet<&str> = report.kept.iter().map(String::as_str).collect();
    queries
        .iter()
        .filter(|q| kept.contains(q.query_id.as_str()))
        .map(|q| (q.query_id.clone(), q.source_passage_id.clone()))
        .collect()
}

pub fn dedup(cfg: &PipelineConfig) -> Result<(), CliError> {
    let mut stage = Stage::begin(cfg, "dedup")?;
    let corpus = Corpus::read_jsonl(&stage.input("corpus")?)?;
    let (kept, removals) = dedup_corpus(&corpus);
    kept.write_jsonl(&stage.output(DEDUP_CORPUS))?;
    jsonl::write(&stage.output(DEDUP_REMOVALS), &removals)?;
    println!("dedup: {} passages, {} removed, {} kept", corpus.len(), removals.len(), kept.len());
    stage.finish()
}

pub fn normalize(cfg: &PipelineConfig) -> Result<(), CliError> {
    let mut stage = Stage::begin(cfg, "normalize-scores")?;
    let raw = RawScoreTable::read_jsonl(&stage.input("teacher_scores")?)?;
    let norm = normalize_scores(&raw)?;
    norm.write_jsonl(&stage.output(TEACHER_NORMALIZED))?;
    println!("normalize-scores: {} pairs, clipped to [{}, {}]", norm.len(), norm.lo, norm.hi);
    stage.finish()
}

pub fn filter(cfg: &PipelineConfig) -> Result<(), CliError> {
    let mut stage = Stage::begin(cfg, "filter-queries")?;
    let queries = generated_queries(&mut stage)?;
    let passages = passage_store(&mut stage)?;
    let query_embs = query_store(&mut stage, "query_embeddings", passages.dim())?;
    let teacher = NormalizedScoreTable::read_jsonl(&stage.prior(TEACHER_NORMALIZED, "normalize-scores")?)?;
    let report = filter_queries(&queries, &query_embs, &passages, &teacher)?;
    report.write_json(&stage.output(FILTER_REPORT))?;
    println!(
        "filter-queries: {} queries, {} dropped by retrieval, {} by the teacher, {} kept",
        queries.len(),
        report.dropped_stage1.len(),
        report.dropped_stage2.len(),
        report.kept.len()
    );
    stage.finish()
}

pub fn mine(cfg: &PipelineConfig) -> Result<(), CliError> {
    let mut stage = Stage::begin(cfg, "mine")?;
    let queries = generated_queries(&mut stage)?;
    let report = FilterReport::read_json(&stage.prior(FILTER_REPORT, "filter-queries")?)?;
    let passages = passage_store(&mut stage)?;
    let query_embs = query_store(&mut stage, "query_embeddings", passages.dim())?;
    let raw = RawScoreTable::read_jsonl(&stage.input("teacher_scores")?)?;

    // Normalization bounds come from the surviving queries only.
    let kept: BTreeSet<&str> = report.kept.iter().map(String::as_str).collect();
    let teacher = normalize_scores(&raw.retain_queries(|q| kept.contains(q)))?;
    teacher.write_jsonl(&stage.output(TEACHER_TRAIN))?;

    let pairs = kept_pairs(&queries, &report);
    let (groups, rejections) = mine_all(&pairs, &passages, &query_embs, &teacher, &cfg.settings.mining)?;
    write_groups(&stage.output(GROUPS), &groups)?;
    jsonl::write(&stage.output(REJECTIONS), &rejections)?;
    println!("mine: {} groups, {} queries rejected", groups.len(), rejections.len());
    stage.finish()
}

pub fn train_stage(cfg: &PipelineConfig) -> Result<(), CliError> {
    let mut stage = Stage::begin(cfg, "train")?;
    let groups = read_groups(&stage.prior(GROUPS, "mine")?)?;
    let passages = passage_store(&mut stage)?;
    let query_embs = query_store(&mut stage, "query_embeddings", passages.dim())?;
    let s = &cfg.settings;
    let (model, mut report) = train(&groups, &query_embs, &passages, &s.train, &s.loss)?;
    model.write_checkpoint(&stage.output(CHECKPOINT), s.seed, &s.train)?;
    report.model_path = Some(CHECKPOINT.to_string());
    jsonl::write_json(&stage.output(TRAIN_REPORT), &report)?;
    println!(
        "train: {} train / {} dev groups, dev loss {:.4} -> {:.4} (best epoch {})",
        report.train_groups, report.dev_groups, report.epochs[0].dev_loss, report.best_dev_loss, report.best_epoch
    );
    stage.finish()
}

pub fn apply(cfg: &PipelineConfig) -> Result<(), CliError> {
    let mut stage = Stage::begin(cfg, "apply")?;
    let (model, _) = AdapterModel::read_checkpoint(&stage.prior(CHECKPOINT, "train")?)?;
    let passages = passage_store(&mut stage)?;
    let queries = query_store(&mut stage, "eval_query_embeddings", passages.dim())?;
    apply_adapter(&model, &passages)?.write_binary(&stage.output(ADAPTED_PASSAGES))?;
    apply_adapter(&model, &queries)?.write_binary(&stage.output(ADAPTED_QUERIES))?;
    println!("apply: {} passages, {} queries", passages.len(), queries.len());
    stage.finish()
}

pub fn retrieve(cfg: &PipelineConfig) -> Result<(), CliError> {
    let mut stage = Stage::begin(cfg, "retrieve")?;
    let depth = cfg.settings.eval.depth;
    let passages = passage_store(&mut stage)?;
    let queries = query_store(&mut stage, "eval_query_embeddings", passages.dim())?;
    let base = RunFile::from_results("base", &passages.search_all(&queries, depth)?)?;
    base.write(&stage.output(BASE_RUN))?;

    let adapted_passages = EmbeddingStore::read(&stage.prior(ADAPTED_PASSAGES, "apply")?, Some(passages.dim()))?;
    let adapted_queries = EmbeddingStore::read(&stage.prior(ADAPTED_QUERIES, "apply")?, Some(passages.dim()))?;
    let adapted = RunFile::from_results("adapted", &adapted_passages.search_all(&adapted_queries, depth)?)?;
    adapted.write(&stage.output(ADAPTED_RUN))?;
    println!("retrieve: {} queries at depth {depth}", queries.len());
    stage.finish()
}

fn summary(tag: &str, report: &MetricReport) -> String {
    format!(
        "{tag}: map {:.4}  ndcg@10 {:.4}  recall@100 {:.4}",
        report["map"].mean, report["ndcg_cut_10"].mean, report["recall_100"].mean
    )
}

pub fn evaluate(cfg: &PipelineConfig, runs: &[PathBuf]) -> Result<(), CliError> {
    let mut stage = Stage::begin(cfg, "evaluate")?;
    let qrels = Qrels::read(&stage.input("qrels")?)?;
    let paths = if runs.is_empty() {
        vec![stage.prior(BASE_RUN, "retrieve")?, stage.prior(ADAPTED_RUN, "retrieve")?]
    } else {
        runs.iter()
            .enumerate()
            .map(|(i, p)| stage.extra(format!("run{i}"), p))
            .collect::<Result<_, _>>()?
    };
    let mut reports: BTreeMap<String, MetricReport> = BTreeMap::new();
    for path in &paths {
        let run = RunFile::read(path)?;
        if reports.contains_key(&run.tag) {
            return Err(CliError::Usage(format!("two runs share the tag `{}`", run.tag)));
        }
        let report = standard_report(&run, &qrels);
        println!("{}", summary(&run.tag, &report));
        reports.insert(run.tag, report);
    }
    let mut out = json!({ "runs": reports });
    if let (Some(base), Some(adapted)) = (reports.get("base"), reports.get("adapted")) {
        let delta = adapted["ndcg_cut_10"].mean - base["ndcg_cut_10"].mean;
        println!("ndcg@10 improvement over base: {delta:+.4}");
        out["ndcg_cut_10_improvement"] = json!(delta);
    }
    jsonl::write_json(&stage.output(METRICS), &out)?;
    stage.finish()
}

pub fn rerank_eval(cfg: &PipelineConfig, run: Option<&Path>, depth: Option<usize>) -> Result<(), CliError> {
    let mut stage = Stage::begin(cfg, "rerank-eval")?;
    let qrels = Qrels::read(&stage.input("qrels")?)?;
    let teacher = RawScoreTable::read_jsonl(&stage.input("eval_teacher_scores")?)?;
    let run_path = match run {
        Some(p) => stage.extra("run".into(), p)?,
        None => stage.prior(BASE_RUN, "retrieve")?,
    };
    let depth = depth.unwrap_or(cfg.settings.eval.rerank_depth);
    let before = RunFile::read(&run_path)?;
    let after = rerank_run(&before, &teacher, depth)?;
    after.write(&stage.output(RERANK_RUN))?;
    let (b, a) = (standard_report(&before, &qrels), standard_report(&after, &qrels));
    println!("{}", summary(&before.tag, &b));
    println!("{}", summary(&after.tag, &a));
    let out = json!({ "depth": depth, "before": b, "after": a });
    jsonl::write_json(&stage.output(RERANK_METRICS), &out)?;
    stage.finish()
}

pub fn sweep(cfg: &PipelineConfig, thresholds: Option<&[f64]>) -> Result<(), CliError> {
    let mut stage = Stage::begin(cfg, "sweep-threshold")?;
    let s = &cfg.settings;
    let thresholds = thresholds.unwrap_or(&s.sweep.thresholds);
    if thresholds.is_empty() {
        return Err(CliError::Usage("sweep-threshold: no thresholds given".into()));
    }
    let queries = generated_queries(&mut stage)?;
    let report = FilterReport::read_json(&stage.prior(FILTER_REPORT, "filter-queries")?)?;
    let teacher = NormalizedScoreTable::read_jsonl(&stage.prior(TEACHER_TRAIN, "mine")?)?;
    let passages = passage_store(&mut stage)?;
    let query_embs = query_store(&mut stage, "query_embeddings", passages.dim())?;
    let eval_queries = query_store(&mut stage, "eval_query_embeddings", passages.dim())?;
    let qrels = Qrels::read(&stage.input("qrels")?)?;

    let pairs = kept_pairs(&queries, &report);
    let source = MiningSource {
        pairs: &pairs,
        passage_embs: &passages,
        query_embs: &query_embs,
        teacher: &teacher,
        mining: s.mining,
    };
    let bundle = EvalBundle {
        query_embs: &eval_queries,
        passage_embs: &passages,
        qrels: &qrels,
        depth: s.eval.depth,
    };
    let rows = threshold_sweep(&source, thresholds, &s.train, &s.loss, &bundle)?;
    for r in &rows {
        println!("threshold {}: map {:.4}  ndcg@10 {:.4}  recall@100 {:.4}", r.threshold, r.map, r.ndcg10, r.recall100);
    }
    std::fs::write(stage.output(SWEEP_CSV), sweep_csv(&rows)).map_err(|e| Error::io(stage.out.join(SWEEP_CSV), e))?;
    jsonl::write_json(&stage.output(SWEEP_JSON), &rows)?;
    stage.finish()
}

/// dedup, normalize-scores, filter-queries, mine, train, apply, retrieve,
/// evaluate.
pub fn pipeline(cfg: &PipelineConfig) -> Result<(), CliError> {
    dedup(cfg)?;
    normalize(cfg)?;
    filter(cfg)?;
    mine(cfg)?;
    train_stage(cfg)?;
    apply(cfg)?;
    retrieve(cfg)?;
    evaluate(cfg, &[])
}
