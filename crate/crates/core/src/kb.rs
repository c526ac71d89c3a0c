//! Section-structured knowledge base loaded from JSON Lines.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionChunk {
    pub section_id: String,
    pub heading: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAttachment {
    pub image_id: String,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbArticle {
    pub article_id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub sections: Vec<SectionChunk>,
    #[serde(default)]
    pub images: Vec<ImageAttachment>,
}

impl KbArticle {
    pub fn lead_section(&self) -> &SectionChunk {
        &self.sections[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_articles: usize,
    pub n_sections: usize,
    pub n_images: usize,
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("duplicate article_id {id:?} on lines {first} and {second}")]
    DuplicateArticle {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("duplicate image_id {id:?} on lines {first} and {second}")]
    DuplicateImage {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("article {0:?} is not in the corpus")]
    UnknownArticle(String),
    #[error("cannot subsample {n} articles: {reason}")]
    BadSubsample { n: usize, reason: String },
}

/// Immutable article store with the image→article map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    articles: BTreeMap<String, KbArticle>,
    image_to_article: BTreeMap<String, String>,
    stats: CorpusStats,
}

fn validate_article(a: &KbArticle) -> Result<(), String> {
    if a.article_id.is_empty() {
        return Err("article_id is empty".into());
    }
    if a.sections.is_empty() {
        return Err(format!("article {:?} has no sections", a.article_id));
    }
    let mut seen = BTreeSet::new();
    for s in &a.sections {
        if !seen.insert(s.section_id.as_str()) {
            return Err(format!(
                "article {:?} repeats section_id {:?}",
                a.article_id, s.section_id
            ));
        }
        if s.text.is_empty() {
            return Err(format!(
                "section {:?} of {:?} has empty text",
                s.section_id, a.article_id
            ));
        }
    }
    for img in &a.images {
        if img.image_id.is_empty() {
            return Err(format!(
                "article {:?} has an image with empty image_id",
                a.article_id
            ));
        }
    }
    Ok(())
}

impl Corpus {
    /// Builds a corpus from `(line_number, article)` pairs, checking every invariant.
    pub fn from_numbered(
        articles: impl IntoIterator<Item = (usize, KbArticle)>,
    ) -> Result<Self, KbError> {
        let mut by_id: BTreeMap<String, KbArticle> = BTreeMap::new();
        let mut article_line: HashMap<String, usize> = HashMap::new();
        let mut image_line: HashMap<String, usize> = HashMap::new();
        let mut image_to_article = BTreeMap::new();
        for (line, a) in articles {
            validate_article(&a).map_err(|message| KbError::Schema { line, message })?;
            if let Some(&first) = article_line.get(&a.article_id) {
                return Err(KbError::DuplicateArticle {
                    id: a.article_id.clone(),
                    first,
                    second: line,
                });
            }
            for img in &a.images {
                if let Some(&first) = image_line.get(&img.image_id) {
                    return Err(KbError::DuplicateImage {
                        id: img.image_id.clone(),
                        first,
                        second: line,
                    });
                }
                image_line.insert(img.image_id.clone(), line);
                image_to_article.insert(img.image_id.clone(), a.article_id.clone());
            }
            article_line.insert(a.article_id.clone(), line);
            by_id.insert(a.article_id.clone(), a);
        }
        let stats = CorpusStats {
            n_articles: by_id.len(),
            n_sections: by_id.values().map(|a| a.sections.len()).sum(),
            n_images: image_to_article.len(),
        };
        Ok(Corpus {
            articles: by_id,
            image_to_article,
            stats,
        })
    }

    pub fn from_articles(articles: impl IntoIterator<Item = KbArticle>) -> Result<Self, KbError> {
        Self::from_numbered(articles.into_iter().enumerate().map(|(i, a)| (i + 1, a)))
    }

    pub fn stats(&self) -> CorpusStats {
        self.stats
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn get(&self, article_id: &str) -> Option<&KbArticle> {
        self.articles.get(article_id)
    }

    /// Articles in ascending `article_id` order.
    pub fn articles(&self) -> impl Iterator<Item = &KbArticle> {
        self.articles.values()
    }

    pub fn article_ids(&self) -> impl Iterator<Item = &str> {
        self.articles.keys().map(String::as_str)
    }

    pub fn article_for_image(&self, image_id: &str) -> Option<&str> {
        self.image_to_article.get(image_id).map(String::as_str)
    }

    pub fn image_to_article(&self) -> &BTreeMap<String, String> {
        &self.image_to_article
    }

    pub fn section(
        &self,
        article_id: &str,
        section_id: &str,
    ) -> Option<(&KbArticle, &SectionChunk)> {
        let a = self.articles.get(article_id)?;
        a.sections
            .iter()
            .find(|s| s.section_id == section_id)
            .map(|s| (a, s))
    }

    /// Writes the corpus as JSON Lines in `article_id` order.
    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        let io = |source| KbError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        for a in self.articles.values() {
            let line = serde_json::to_string(a).expect("article serializes");
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus, KbError> {
    let io = |source| KbError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut parsed = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let article: KbArticle = serde_json::from_str(&line).map_err(|e| KbError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        parsed.push((line_no, article));
    }
    Corpus::from_numbered(parsed)
}

/// Draws exactly `n` articles: all of `must_include` plus a seeded uniform
/// sample (without replacement) of the rest. For a fixed seed the draws are
/// nested: a larger `n` keeps every article a smaller `n` kept.
pub fn subsample_corpus(
    corpus: &Corpus,
    n: usize,
    seed: u64,
    must_include: &BTreeSet<String>,
) -> Result<Corpus, KbError> {
    for id in must_include {
        if corpus.get(id).is_none() {
            return Err(KbError::UnknownArticle(id.clone()));
        }
    }
    let total = corpus.stats.n_articles;
    if n > total {
        return Err(KbError::BadSubsample {
            n,
            reason: format!("corpus only has {total} articles"),
        });
    }
    if n < must_include.len() {
        return Err(KbError::BadSubsample {
            n,
            reason: format!("{} articles are required", must_include.len()),
        });
    }
    let mut pool: Vec<&str> = corpus
        .article_ids()
        .filter(|id| !must_include.contains(*id))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut keep: BTreeSet<&str> = must_include.iter().map(String::as_str).collect();
    keep.extend(pool.into_iter().take(n - must_include.len()));
    Corpus::from_articles(keep.into_iter().map(|id| corpus.articles[id].clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn article(id: &str, n_sections: usize, images: &[&str]) -> KbArticle {
        KbArticle {
            article_id: id.into(),
            title: format!("Title {id}"),
            url: None,
            sections: (0..n_sections)
                .map(|i| SectionChunk {
                    section_id: format!("s{i}"),
                    heading: format!("H{i}"),
                    text: format!("{id} text {i}"),
                })
                .collect(),
            images: images
                .iter()
                .map(|i| ImageAttachment {
                    image_id: i.to_string(),
                    uri: format!("file://{i}.jpg"),
                    caption: None,
                })
                .collect(),
        }
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn to_line(a: &KbArticle) -> String {
        serde_json::to_string(a).unwrap()
    }

    #[test]
    fn loads_three_articles() {
        let arts = [
            article("a", 2, &["i1"]),
            article("b", 3, &[]),
            article("c", 1, &["i2", "i3"]),
        ];
        let f = write_lines(&arts.iter().map(to_line).collect::<Vec<_>>());
        let c = load_corpus(f.path()).unwrap();
        assert_eq!(
            c.stats(),
            CorpusStats {
                n_articles: 3,
                n_sections: 6,
                n_images: 3
            }
        );
        assert_eq!(c.article_for_image("i3"), Some("c"));
    }

    #[test]
    fn duplicate_article_names_both_lines() {
        let mut lines: Vec<String> = (0..8)
            .map(|i| to_line(&article(&format!("x{i}"), 1, &[])))
            .collect();
        lines[1] = to_line(&article("dup", 1, &[]));
        lines[6] = to_line(&article("dup", 1, &[]));
        let f = write_lines(&lines);
        match load_corpus(f.path()) {
            Err(KbError::DuplicateArticle { id, first, second }) => {
                assert_eq!((id.as_str(), first, second), ("dup", 2, 7));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_image_is_fatal() {
        let f = write_lines(&[
            to_line(&article("a", 1, &["i"])),
            to_line(&article("b", 1, &["i"])),
        ]);
        assert!(matches!(
            load_corpus(f.path()),
            Err(KbError::DuplicateImage {
                first: 1,
                second: 2,
                ..
            })
        ));
    }

    #[test]
    fn schema_error_reports_line() {
        let f = write_lines(&[to_line(&article("a", 1, &[])), "{\"article_id\": 3}".into()]);
        assert!(matches!(
            load_corpus(f.path()),
            Err(KbError::Schema { line: 2, .. })
        ));
        let f = write_lines(&[to_line(&article("a", 0, &[]))]);
        assert!(matches!(
            load_corpus(f.path()),
            Err(KbError::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = write_lines(&[]);
        let c = load_corpus(f.path()).unwrap();
        assert_eq!(c.stats(), CorpusStats::default());
    }

    #[test]
    fn line_order_does_not_matter() {
        let arts = [
            article("a", 2, &["i1"]),
            article("b", 1, &["i2"]),
            article("c", 1, &[]),
        ];
        let fwd = write_lines(&arts.iter().map(to_line).collect::<Vec<_>>());
        let rev = write_lines(&arts.iter().rev().map(to_line).collect::<Vec<_>>());
        assert_eq!(
            load_corpus(fwd.path()).unwrap(),
            load_corpus(rev.path()).unwrap()
        );
    }

    fn big(n: usize) -> Corpus {
        Corpus::from_articles((0..n).map(|i| article(&format!("a{i:04}"), 1, &[]))).unwrap()
    }

    #[test]
    fn subsample_identity_and_minimum() {
        let c = big(50);
        let must: BTreeSet<String> = ["a0003", "a0042"].iter().map(|s| s.to_string()).collect();
        assert_eq!(subsample_corpus(&c, 50, 99, &must).unwrap(), c);
        let only = subsample_corpus(&c, 2, 99, &must).unwrap();
        assert_eq!(
            only.article_ids().collect::<Vec<_>>(),
            vec!["a0003", "a0042"]
        );
        assert!(subsample_corpus(&c, 1, 99, &must).is_err());
        assert!(subsample_corpus(&c, 51, 99, &BTreeSet::new()).is_err());
    }

    #[test]
    fn subsample_is_deterministic() {
        let c = big(500);
        let must = BTreeSet::from(["a0001".to_string()]);
        let a = subsample_corpus(&c, 100, 7, &must).unwrap();
        let b = subsample_corpus(&c, 100, 7, &must).unwrap();
        assert_eq!(
            a.article_ids().collect::<Vec<_>>(),
            b.article_ids().collect::<Vec<_>>()
        );
        assert_eq!(a.stats().n_articles, 100);
        assert!(a.get("a0001").is_some());
        let other = subsample_corpus(&c, 100, 8, &must).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn subsamples_are_nested_for_a_seed() {
        let c =
            Corpus::from_articles((0..30).map(|i| article(&format!("a{i:02}"), 1, &[]))).unwrap();
        let must: BTreeSet<String> = ["a07".to_string()].into();
        let mut prev: BTreeSet<String> = BTreeSet::new();
        for n in [1, 5, 12, 30] {
            let s = subsample_corpus(&c, n, 9, &must).unwrap();
            let ids: BTreeSet<String> = s.article_ids().map(String::from).collect();
            assert!(ids.contains("a07"));
            assert!(prev.is_subset(&ids));
            prev = ids;
        }
    }
}
