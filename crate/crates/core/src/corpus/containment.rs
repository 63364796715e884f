//! Substring containment over a set of documents, backed by a suffix array
//! of their concatenation.

use std::cmp::Ordering;
use std::ops::Range;

/// Separates documents in the concatenated text. `0xFF` never occurs in
/// well-formed UTF-8, so no query string can match across a boundary.
const SEPARATOR: u8 = 0xFF;

pub(crate) struct ContainmentIndex<'a> {
    docs: Vec<&'a str>,
    text: Vec<u8>,
    starts: Vec<usize>,
    suffixes: Vec<i32>,
}

impl<'a> ContainmentIndex<'a> {
    pub(crate) fn build(docs: Vec<&'a str>) -> Self {
        let total: usize = docs.iter().map(|d| d.len() + 1).sum();
        assert!(total < i32::MAX as usize, "concatenated corpus exceeds 2 GiB");
        let mut text = Vec::with_capacity(total);
        let mut starts = Vec::with_capacity(docs.len());
        for doc in &docs {
            starts.push(text.len());
            text.extend_from_slice(doc.as_bytes());
            text.push(SEPARATOR);
        }
        let (text, suffixes) = divsufsort::sort(&text).into_parts();
        let text = text.to_vec();
        ContainmentIndex {
            docs,
            text,
            starts,
            suffixes,
        }
    }

    fn compare_prefix(&self, suffix: usize, pattern: &[u8]) -> Ordering {
        let tail = &self.text[suffix..];
        let n = tail.len().min(pattern.len());
        match tail[..n].cmp(&pattern[..n]) {
            Ordering::Equal if tail.len() < pattern.len() => Ordering::Less,
            Ordering::Equal => Ordering::Equal,
            other => other,
        }
    }

    /// Suffix-array positions whose suffix starts with `pattern`.
    fn occurrences(&self, pattern: &[u8]) -> Range<usize> {
        let lo = self
            .suffixes
            .partition_point(|&s| self.compare_prefix(s as usize, pattern) == Ordering::Less);
        let hi = lo
            + self.suffixes[lo..]
                .partition_point(|&s| self.compare_prefix(s as usize, pattern) == Ordering::Equal);
        lo..hi
    }

    fn doc_at(&self, pos: usize) -> usize {
        self.starts.partition_point(|&s| s <= pos) - 1
    }

    /// True when document `doc` occurs inside some other document. Assumes
    /// the indexed documents are pairwise distinct and non-empty, so a
    /// document occurs exactly once inside itself.
    pub(crate) fn contained_elsewhere(&self, doc: usize) -> bool {
        self.occurrences(self.docs[doc].as_bytes()).len() > 1
    }

    /// Among the other documents containing `doc`, the longest one (ties to
    /// the lowest index). The longest container cannot itself be contained
    /// in a distinct document, so it is always a survivor.
    pub(crate) fn maximal_container(&self, doc: usize) -> Option<usize> {
        let range = self.occurrences(self.docs[doc].as_bytes());
        self.suffixes[range]
            .iter()
            .map(|&s| self.doc_at(s as usize))
            .filter(|&d| d != doc)
            .min_by_key(|&d| (std::cmp::Reverse(self.docs[d].len()), d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_containers() {
        let idx = ContainmentIndex::build(vec!["the cat sat", "cat sat", "dogs", "at"]);
        assert!(!idx.contained_elsewhere(0));
        assert!(idx.contained_elsewhere(1));
        assert!(!idx.contained_elsewhere(2));
        assert!(idx.contained_elsewhere(3));
        assert_eq!(idx.maximal_container(1), Some(0));
        assert_eq!(idx.maximal_container(3), Some(0));
        assert_eq!(idx.maximal_container(2), None);
    }

    #[test]
    fn no_match_across_boundaries() {
        // "ab" + "cd" concatenated would contain "bc" without a separator.
        let idx = ContainmentIndex::build(vec!["ab", "cd", "bc"]);
        assert!(!idx.contained_elsewhere(2));
    }

    #[test]
    fn multibyte_text() {
        let idx = ContainmentIndex::build(vec!["über straße", "straße", "raß"]);
        assert_eq!(idx.maximal_container(1), Some(0));
        assert_eq!(idx.maximal_container(2), Some(0));
    }
}
