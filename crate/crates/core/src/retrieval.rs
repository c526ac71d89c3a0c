//! Exact dense retrieval over section chunks and corpus images.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{dot, EmbedError, EmbeddingProvider, Modality};
use crate::kb::Corpus;
use crate::protocol::EvidenceItem;

pub const DEFAULT_TEXT_K: usize = 3;
pub const DEFAULT_IMAGE_K: usize = 1;
pub const INDEX_FORMAT_VERSION: u32 = 1;
const INDEX_MAGIC: &[u8; 8] = b"KBSIDX\x00\x01";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("provider modality {found:?} cannot build a {expected:?} index")]
    WrongModality { expected: Modality, found: Modality },
    #[error("embedding failed for article {article_id:?} item {item_id:?}: {source}")]
    IndexEmbedding {
        article_id: String,
        item_id: String,
        source: EmbedError,
    },
    #[error("query embedding failed: {0}")]
    Query(#[source] EmbedError),
    #[error("cannot resolve image reference {image_ref:?}: {source}")]
    UnresolvableImage {
        image_ref: String,
        source: EmbedError,
    },
    #[error("index dimension {index} does not match provider dimension {provider}")]
    DimensionMismatch { index: usize, provider: usize },
    #[error("index file {path}: {message}")]
    Format { path: String, message: String },
    #[error("index file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("article {0:?} from the index is missing from the corpus")]
    MissingArticle(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub article_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub score: f64,
    pub rank: usize,
}

/// `item_id` is the section id for text entries and the image id for image entries.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub article_id: String,
    pub item_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    pub modality: Modality,
    pub dimension: usize,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    format_version: u32,
    dimension: usize,
    count: usize,
    modality: Modality,
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Binary layout: magic, a JSON header line, then per entry two
    /// length-prefixed UTF-8 ids and `dimension` little-endian f64s.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let io = |source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let header = IndexHeader {
            format_version: INDEX_FORMAT_VERSION,
            dimension: self.dimension,
            count: self.entries.len(),
            modality: self.modality,
        };
        w.write_all(INDEX_MAGIC).map_err(io)?;
        let header = serde_json::to_string(&header).expect("header serializes");
        w.write_all(header.as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
        for e in &self.entries {
            for s in [&e.article_id, &e.item_id] {
                w.write_all(&(s.len() as u32).to_le_bytes()).map_err(io)?;
                w.write_all(s.as_bytes()).map_err(io)?;
            }
            for x in &e.vector {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path, expected_dimension: usize) -> Result<Self, RetrievalError> {
        let p = path.display().to_string();
        let io = |source| RetrievalError::Io {
            path: p.clone(),
            source,
        };
        let fmt = |message: String| RetrievalError::Format {
            path: p.clone(),
            message,
        };
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != INDEX_MAGIC {
            return Err(fmt("not an index file".into()));
        }
        let mut header = Vec::new();
        loop {
            let mut b = [0u8; 1];
            r.read_exact(&mut b).map_err(io)?;
            if b[0] == b'\n' {
                break;
            }
            header.push(b[0]);
            if header.len() > 4096 {
                return Err(fmt("header too long".into()));
            }
        }
        let header: IndexHeader =
            serde_json::from_slice(&header).map_err(|e| fmt(e.to_string()))?;
        if header.format_version != INDEX_FORMAT_VERSION {
            return Err(fmt(format!(
                "unsupported format_version {}",
                header.format_version
            )));
        }
        if header.dimension != expected_dimension {
            return Err(RetrievalError::DimensionMismatch {
                index: header.dimension,
                provider: expected_dimension,
            });
        }
        let read_str = |r: &mut BufReader<File>| -> Result<String, RetrievalError> {
            let mut len = [0u8; 4];
            r.read_exact(&mut len).map_err(io)?;
            let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut buf).map_err(io)?;
            String::from_utf8(buf).map_err(|e| fmt(e.to_string()))
        };
        let mut entries = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let article_id = read_str(&mut r)?;
            let item_id = read_str(&mut r)?;
            let mut vector = Vec::with_capacity(header.dimension);
            for _ in 0..header.dimension {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|e| RetrievalError::Io {
                    path: p.clone(),
                    source: e,
                })?;
                vector.push(f64::from_le_bytes(b));
            }
            entries.push(IndexEntry {
                article_id,
                item_id,
                vector,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| RetrievalError::Io {
            path: p.clone(),
            source: e,
        })? != 0
        {
            return Err(fmt("trailing bytes after last entry".into()));
        }
        Ok(VectorIndex {
            modality: header.modality,
            dimension: header.dimension,
            entries,
        })
    }
}

/// One entry per (article, section), ordered by `(article_id, section_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextIndex(pub VectorIndex);

/// One entry per corpus image, ordered by `image_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageIndex(pub VectorIndex);

const EMBED_CHUNK: usize = 256;

fn embed_entries(
    provider: &EmbeddingProvider,
    items: Vec<(String, String, String)>,
) -> Result<Vec<IndexEntry>, RetrievalError> {
    let mut entries = Vec::with_capacity(items.len());
    for chunk in items.chunks(EMBED_CHUNK) {
        let inputs: Vec<String> = chunk.iter().map(|(_, _, t)| t.clone()).collect();
        let vectors = provider.embed_batch(&inputs).map_err(|source| {
            let at = match &source {
                EmbedError::EmptyInput { index }
                | EmbedError::ZeroVector { index }
                | EmbedError::DimensionMismatch { index, .. } => *index,
                _ => 0,
            };
            let (a, s, _) = &chunk[at.min(chunk.len() - 1)];
            RetrievalError::IndexEmbedding {
                article_id: a.clone(),
                item_id: s.clone(),
                source,
            }
        })?;
        for ((a, s, _), vector) in chunk.iter().zip(vectors) {
            entries.push(IndexEntry {
                article_id: a.clone(),
                item_id: s.clone(),
                vector,
            });
        }
    }
    Ok(entries)
}

pub fn build_text_index(
    corpus: &Corpus,
    provider: &EmbeddingProvider,
) -> Result<TextIndex, RetrievalError> {
    if provider.modality() != Modality::Text {
        return Err(RetrievalError::WrongModality {
            expected: Modality::Text,
            found: provider.modality(),
        });
    }
    let mut items: Vec<(String, String, String)> = corpus
        .articles()
        .flat_map(|a| {
            a.sections
                .iter()
                .map(|s| (a.article_id.clone(), s.section_id.clone(), s.text.clone()))
        })
        .collect();
    items.sort_by(|x, y| (&x.0, &x.1).cmp(&(&y.0, &y.1)));
    let entries = embed_entries(provider, items)?;
    Ok(TextIndex(VectorIndex {
        modality: Modality::Text,
        dimension: provider.dimension(),
        entries,
    }))
}

/// Image vectors come from embedding each image id; the deterministic
/// provider therefore maps a query ref equal to a stored id onto that image.
pub fn build_image_index(
    corpus: &Corpus,
    provider: &EmbeddingProvider,
) -> Result<ImageIndex, RetrievalError> {
    if provider.modality() != Modality::Image {
        return Err(RetrievalError::WrongModality {
            expected: Modality::Image,
            found: provider.modality(),
        });
    }
    let items: Vec<(String, String, String)> = corpus
        .image_to_article()
        .iter()
        .map(|(img, art)| (art.clone(), img.clone(), img.clone()))
        .collect();
    let entries = embed_entries(provider, items)?;
    Ok(ImageIndex(VectorIndex {
        modality: Modality::Image,
        dimension: provider.dimension(),
        entries,
    }))
}

fn check_dims(index: &VectorIndex, provider: &EmbeddingProvider) -> Result<(), RetrievalError> {
    if index.dimension != provider.dimension() {
        return Err(RetrievalError::DimensionMismatch {
            index: index.dimension,
            provider: provider.dimension(),
        });
    }
    Ok(())
}

/// Scores are rounded to this resolution before ranking so that cosines equal
/// in exact arithmetic tie regardless of floating-point summation order.
pub const SCORE_RESOLUTION: f64 = 1e-12;

pub fn quantize_score(s: f64) -> f64 {
    (s / SCORE_RESOLUTION).round() * SCORE_RESOLUTION
}

// Descending score, then ascending key.
fn ranked<'a, K: Ord>(
    index: &'a VectorIndex,
    query: &[f64],
    key: impl Fn(&'a IndexEntry) -> K,
) -> Vec<(f64, usize)> {
    let mut scored: Vec<(f64, usize)> = index
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (quantize_score(dot(query, &e.vector)), i))
        .collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| key(&index.entries[a.1]).cmp(&key(&index.entries[b.1])))
    });
    scored
}

pub fn text_search(
    index: &TextIndex,
    provider: &EmbeddingProvider,
    query: &str,
    k: usize,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    check_dims(&index.0, provider)?;
    if index.0.is_empty() {
        return Ok(Vec::new());
    }
    let q = provider.embed_one(query).map_err(RetrievalError::Query)?;
    let scored = ranked(&index.0, &q, |e| {
        (e.article_id.as_str(), e.item_id.as_str())
    });
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, (score, i))| {
            let e = &index.0.entries[i];
            RetrievalHit {
                article_id: e.article_id.clone(),
                section_id: Some(e.item_id.clone()),
                image_id: None,
                score,
                rank: r + 1,
            }
        })
        .collect())
}

/// Returns up to `k` distinct articles; each keeps its best-scoring image.
pub fn image_search(
    index: &ImageIndex,
    provider: &EmbeddingProvider,
    image_ref: &str,
    k: usize,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    check_dims(&index.0, provider)?;
    let q = provider
        .embed_one(image_ref)
        .map_err(|source| RetrievalError::UnresolvableImage {
            image_ref: image_ref.to_string(),
            source,
        })?;
    if index.0.is_empty() {
        return Ok(Vec::new());
    }
    let scored = ranked(&index.0, &q, |e| e.item_id.as_str());
    let mut seen = HashSet::new();
    let mut hits = Vec::new();
    for (score, i) in scored {
        let e = &index.0.entries[i];
        if !seen.insert(e.article_id.as_str()) {
            continue;
        }
        hits.push(RetrievalHit {
            article_id: e.article_id.clone(),
            section_id: None,
            image_id: Some(e.item_id.clone()),
            score,
            rank: hits.len() + 1,
        });
        if hits.len() == k {
            break;
        }
    }
    Ok(hits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageEvidenceScope {
    /// Title plus the first section of each matched article.
    #[default]
    LeadSection,
    FullArticle,
}

/// Text retrieval tool as seen by the agent loop.
pub trait TextRetriever: Send + Sync {
    fn retrieve_text(&self, query: &str, k: usize) -> Result<Vec<EvidenceItem>, RetrievalError>;
}

/// Image retrieval tool as seen by the agent loop.
pub trait ImageRetriever: Send + Sync {
    fn retrieve_image(
        &self,
        image_ref: &str,
        k: usize,
    ) -> Result<Vec<EvidenceItem>, RetrievalError>;
}

/// Corpus-backed retrieval tools resolving hits into evidence text.
pub struct KnowledgeTools {
    pub corpus: Arc<Corpus>,
    pub text_index: Arc<TextIndex>,
    pub image_index: Arc<ImageIndex>,
    pub text_provider: Arc<EmbeddingProvider>,
    pub image_provider: Arc<EmbeddingProvider>,
    pub image_scope: ImageEvidenceScope,
}

impl KnowledgeTools {
    /// Embeds the corpus with both providers.
    pub fn build(
        corpus: Arc<Corpus>,
        text_provider: Arc<EmbeddingProvider>,
        image_provider: Arc<EmbeddingProvider>,
    ) -> Result<Self, RetrievalError> {
        let text_index = Arc::new(build_text_index(&corpus, &text_provider)?);
        let image_index = Arc::new(build_image_index(&corpus, &image_provider)?);
        Ok(KnowledgeTools {
            corpus,
            text_index,
            image_index,
            text_provider,
            image_provider,
            image_scope: ImageEvidenceScope::LeadSection,
        })
    }
}

impl TextRetriever for KnowledgeTools {
    fn retrieve_text(&self, query: &str, k: usize) -> Result<Vec<EvidenceItem>, RetrievalError> {
        text_search(&self.text_index, &self.text_provider, query, k)?
            .into_iter()
            .map(|h| {
                let sid = h.section_id.clone().unwrap_or_default();
                let (a, s) = self
                    .corpus
                    .section(&h.article_id, &sid)
                    .ok_or_else(|| RetrievalError::MissingArticle(h.article_id.clone()))?;
                Ok(EvidenceItem {
                    article_id: a.article_id.clone(),
                    section_id: Some(s.section_id.clone()),
                    article_title: a.title.clone(),
                    section_heading: s.heading.clone(),
                    text: s.text.clone(),
                    score: h.score,
                    rank: h.rank,
                })
            })
            .collect()
    }
}

impl ImageRetriever for KnowledgeTools {
    fn retrieve_image(
        &self,
        image_ref: &str,
        k: usize,
    ) -> Result<Vec<EvidenceItem>, RetrievalError> {
        let mut out = Vec::new();
        for h in image_search(&self.image_index, &self.image_provider, image_ref, k)? {
            let a = self
                .corpus
                .get(&h.article_id)
                .ok_or_else(|| RetrievalError::MissingArticle(h.article_id.clone()))?;
            let sections = match self.image_scope {
                ImageEvidenceScope::LeadSection => &a.sections[..1],
                ImageEvidenceScope::FullArticle => &a.sections[..],
            };
            for s in sections {
                out.push(EvidenceItem {
                    article_id: a.article_id.clone(),
                    section_id: Some(s.section_id.clone()),
                    article_title: a.title.clone(),
                    section_heading: s.heading.clone(),
                    text: s.text.clone(),
                    score: h.score,
                    rank: h.rank,
                });
            }
        }
        Ok(out)
    }
}
