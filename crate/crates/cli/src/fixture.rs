//! Writes the synthetic task as a ready-to-run input directory.

use std::path::Path;

use distill_core::jsonl;
use distill_core::synthetic::{fixture_train_config, SyntheticTask, TaskConfig};
use distill_core::teacher::oracle_teacher;
use distill_core::Error;

use crate::error::CliError;

pub const CONFIG_FILE: &str = "distill.toml";

/// Input files plus `distill.toml` pointing at them, with outputs going to
/// `<dir>/out`. `teacher.eval.jsonl` scores every base top-`depth` pair of
/// the held-out queries, for `rerank-eval`.
pub fn write_synthetic(dir: &Path, task_seed: u64, depth: usize) -> Result<(), CliError> {
    let cfg = TaskConfig { seed: task_seed, ..Default::default() };
    let task = SyntheticTask::generate(&cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;

    task.corpus.write_jsonl(&dir.join("corpus.jsonl"))?;
    jsonl::write(&dir.join("queries.jsonl"), &task.queries)?;
    task.passage_embs.write_binary(&dir.join("passages.emb"))?;
    task.query_embs.write_binary(&dir.join("queries.emb"))?;
    task.eval_query_embs.write_binary(&dir.join("eval_queries.emb"))?;
    task.teacher_raw.write_jsonl(&dir.join("teacher.jsonl"))?;
    task.eval_qrels.write(&dir.join("qrels.eval.trec"))?;

    let results = task.passage_embs.search_all(&task.eval_query_embs, depth)?;
    let pairs = results
        .iter()
        .flat_map(|r| r.ranked.iter().map(move |h| (r.query_id.as_str(), h.passage_id.as_str())));
    let eval_teacher = oracle_teacher(&task.eval_qrels, pairs, task_seed ^ 0x5eed, cfg.teacher_noise_sd)?;
    eval_teacher.write_jsonl(&dir.join("teacher.eval.jsonl"))?;

    let train = fixture_train_config();
    let config = format!(
        "seed = {seed}\n\
         deterministic = true\n\
         \n\
         [paths]\n\
         corpus = \"corpus.jsonl\"\n\
         queries = \"queries.jsonl\"\n\
         passage_embeddings = \"passages.emb\"\n\
         query_embeddings = \"queries.emb\"\n\
         teacher_scores = \"teacher.jsonl\"\n\
         eval_query_embeddings = \"eval_queries.emb\"\n\
         qrels = \"qrels.eval.trec\"\n\
         eval_teacher_scores = \"teacher.eval.jsonl\"\n\
         output_dir = \"out\"\n\
         \n\
         [train]\n\
         learning_rate = {lr:?}\n\
         queries_per_batch = {batch}\n\
         chunk_size = {chunk}\n\
         \n\
         [eval]\n\
         depth = {depth}\n\
         rerank_depth = {depth}\n",
        seed = train.seed,
        lr = train.learning_rate,
        batch = train.queries_per_batch,
        chunk = train.chunk_size,
    );
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, config).map_err(|e| Error::io(&path, e))?;
    println!(
        "synthetic: {} passages, {} training queries, {} held-out queries -> {}",
        task.corpus.len(),
        task.queries.len(),
        task.eval_query_embs.len(),
        path.display()
    );
    Ok(())
}
