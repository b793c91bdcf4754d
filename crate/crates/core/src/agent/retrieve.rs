//! Top-k snippet retrieval over a directory of text documents.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{rank_documents, SimilarityProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalKind {
    Knowledge,
    Syntax,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RetrieveError {
    #[error("retrieval corpus is empty")]
    EmptyCorpus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub source: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub snippets: Vec<Snippet>,
}

impl Corpus {
    /// One snippet per blank-line-separated paragraph of every regular file
    /// directly under `dir`, files in name order.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut snippets = Vec::new();
        for f in files {
            let Ok(text) = fs::read_to_string(&f) else {
                continue;
            };
            let source = f
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            snippets.extend(paragraphs(&text).map(|p| Snippet {
                source: source.clone(),
                text: p,
            }));
        }
        Ok(Corpus { snippets })
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        Corpus {
            snippets: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Snippet {
                    source: format!("doc{i}"),
                    text: t.as_ref().to_string(),
                })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }
}

fn paragraphs(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split("\n\n")
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
}

/// Highest-similarity snippets first; ties keep corpus order.
pub fn retrieve(
    corpus: &Corpus,
    query: &str,
    k: usize,
    provider: &dyn SimilarityProvider,
) -> Result<Vec<Snippet>, RetrieveError> {
    if corpus.is_empty() {
        return Err(RetrieveError::EmptyCorpus);
    }
    let docs: Vec<&str> = corpus.snippets.iter().map(|s| s.text.as_str()).collect();
    Ok(rank_documents(query, &docs, k, provider)
        .into_iter()
        .map(|i| corpus.snippets[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::HashedBowSimilarity;

    #[test]
    fn ranks_overlapping_doc_first() {
        let c = Corpus::from_texts(&[
            "stadium capacity is measured in seats",
            "singer age and singer country of origin",
            "concert year refers to the calendar year",
        ]);
        let p = HashedBowSimilarity::default();
        let got = retrieve(&c, "what is the average singer age", 3, &p).unwrap();
        assert_eq!(got[0].source, "doc1");
        assert!(retrieve(&c, "x", 0, &p).unwrap().is_empty());
        assert_eq!(
            retrieve(&Corpus::default(), "x", 3, &p),
            Err(RetrieveError::EmptyCorpus)
        );
    }

    #[test]
    fn loads_paragraphs_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.md"), "second file").unwrap();
        fs::write(dir.path().join("a.md"), "first para\n\nsecond para\n").unwrap();
        let c = Corpus::from_dir(dir.path()).unwrap();
        let texts: Vec<&str> = c.snippets.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["first para", "second para", "second file"]);
    }
}
