//! Passage collections: loading, text normalization and substring
//! de-duplication.

mod containment;

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory as Gc};

use crate::error::{Error, Result};
use crate::jsonl;
use containment::ContainmentIndex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub id: String,
    pub text: String,
    pub norm_text: String,
}

/// On-disk passage record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassageRecord {
    pub id: String,
    pub text: String,
}

/// One de-duplication decision: `removed` is contained in `kept_superstring`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub removed: String,
    pub kept_superstring: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    passages: Vec<Passage>,
    id_index: HashMap<String, usize>,
}

fn is_stripped(c: char) -> bool {
    matches!(
        get_general_category(c),
        Gc::ConnectorPunctuation
            | Gc::DashPunctuation
            | Gc::OpenPunctuation
            | Gc::ClosePunctuation
            | Gc::InitialPunctuation
            | Gc::FinalPunctuation
            | Gc::OtherPunctuation
            | Gc::MathSymbol
            | Gc::CurrencySymbol
            | Gc::ModifierSymbol
            | Gc::OtherSymbol
    )
}

/// Lowercases, drops every punctuation and symbol character (Unicode
/// categories `P*` and `S*`), collapses whitespace runs to one ASCII space
/// and trims.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if !is_stripped(c) {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    out
}

impl Corpus {
    pub fn new(records: impl IntoIterator<Item = PassageRecord>) -> Result<Self> {
        let mut corpus = Corpus::default();
        for rec in records {
            if rec.id.is_empty() {
                return Err(Error::invalid("passage with empty id"));
            }
            if corpus.id_index.contains_key(&rec.id) {
                return Err(Error::DuplicateId(rec.id));
            }
            corpus.id_index.insert(rec.id.clone(), corpus.passages.len());
            let norm_text = normalize_text(&rec.text);
            corpus.passages.push(Passage {
                id: rec.id,
                text: rec.text,
                norm_text,
            });
        }
        Ok(corpus)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        Self::new(pairs.into_iter().map(|(id, text)| PassageRecord {
            id: id.to_owned(),
            text: text.to_owned(),
        }))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Self::new(jsonl::read::<PassageRecord>(path)?)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let records: Vec<PassageRecord> = self
            .passages
            .iter()
            .map(|p| PassageRecord {
                id: p.id.clone(),
                text: p.text.clone(),
            })
            .collect();
        jsonl::write(path, &records)
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.id_index.get(id).map(|&i| &self.passages[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.id_index.contains_key(id)
    }

    fn retain_positions(&self, keep: &[bool]) -> Corpus {
        let mut out = Corpus::default();
        for (p, _) in self.passages.iter().zip(keep).filter(|(_, &k)| k) {
            out.id_index.insert(p.id.clone(), out.passages.len());
            out.passages.push(p.clone());
        }
        out
    }
}

/// Removes every passage whose normalized text is a substring of another
/// passage's normalized text. Exact duplicates keep their first occurrence;
/// empty texts are dropped whenever anything else exists. Each removal names
/// a surviving passage that contains it: the longest container, ties to the
/// earliest.
pub fn dedup_corpus(corpus: &Corpus) -> (Corpus, Vec<Removal>) {
    let passages = &corpus.passages;
    let n = passages.len();

    // Exact duplicates collapse onto their first occurrence.
    let mut first_of: HashMap<&str, usize> = HashMap::new();
    let mut representative = vec![0usize; n];
    let mut uniques: Vec<usize> = Vec::new();
    for (i, p) in passages.iter().enumerate() {
        let rep = *first_of.entry(p.norm_text.as_str()).or_insert_with(|| {
            uniques.push(i);
            i
        });
        representative[i] = rep;
    }

    let non_empty: Vec<usize> = uniques
        .iter()
        .copied()
        .filter(|&i| !passages[i].norm_text.is_empty())
        .collect();

    // superstring[i] is the surviving container of unique passage i.
    let mut superstring: Vec<Option<usize>> = vec![None; n];
    let index = ContainmentIndex::build(
        non_empty
            .iter()
            .map(|&i| passages[i].norm_text.as_str())
            .collect(),
    );
    let containers: Vec<Option<usize>> = (0..non_empty.len())
        .into_par_iter()
        .map(|d| {
            if index.contained_elsewhere(d) {
                index.maximal_container(d).map(|c| non_empty[c])
            } else {
                None
            }
        })
        .collect();
    for (d, c) in containers.into_iter().enumerate() {
        superstring[non_empty[d]] = c;
    }

    // The empty text is contained in everything.
    if let Some(&empty) = uniques.iter().find(|&&i| passages[i].norm_text.is_empty()) {
        superstring[empty] = non_empty
            .iter()
            .copied()
            .filter(|&i| superstring[i].is_none())
            .min_by_key(|&i| (std::cmp::Reverse(passages[i].norm_text.len()), i));
    }

    let mut keep = vec![false; n];
    let mut removals = Vec::new();
    for i in 0..n {
        let rep = representative[i];
        let kept = match superstring[rep] {
            Some(s) => Some(s),
            None if rep != i => Some(rep),
            None => None,
        };
        match kept {
            Some(k) => removals.push(Removal {
                removed: passages[i].id.clone(),
                kept_superstring: passages[k].id.clone(),
            }),
            None => keep[i] = true,
        }
    }
    (corpus.retain_positions(&keep), removals)
}
