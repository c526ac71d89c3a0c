#![allow(dead_code)]

use std::sync::Arc;

use kbsearch_core::embed::{EmbeddingProvider, Modality};
use kbsearch_core::eval::EvalRecord;
use kbsearch_core::kb::Corpus;
use kbsearch_core::retrieval::KnowledgeTools;
use kbsearch_core::runtime::ToolBinding;

pub const TEXT_DIM: usize = 256;
pub const TEXT_SEED: u64 = 11;
pub const IMAGE_DIM: usize = 64;
pub const IMAGE_SEED: u64 = 12;

pub fn providers() -> (Arc<EmbeddingProvider>, Arc<EmbeddingProvider>) {
    (
        Arc::new(EmbeddingProvider::hashing(
            Modality::Text,
            TEXT_DIM,
            TEXT_SEED,
        )),
        Arc::new(EmbeddingProvider::hashing(
            Modality::Image,
            IMAGE_DIM,
            IMAGE_SEED,
        )),
    )
}

pub fn tools(corpus: &Corpus) -> ToolBinding {
    let (t, i) = providers();
    let kt = Arc::new(KnowledgeTools::build(Arc::new(corpus.clone()), t, i).unwrap());
    ToolBinding::new(kt.clone(), kt)
}

/// Type-breakdown fixture rows: label, share %, recall % (None for direct answers), accuracy %.
pub const TYPE_BREAKDOWN: [(&str, f64, Option<f64>, f64); 5] = [
    ("A", 5.4, None, 69.7),
    ("I→A", 25.7, Some(65.9), 56.0),
    ("T→A", 36.1, Some(81.6), 49.5),
    ("I→T→A", 15.7, Some(55.2), 43.5),
    ("T→T→A", 17.1, Some(70.3), 41.1),
];
pub const TYPE_BREAKDOWN_N: usize = 100_000;

fn tool_calls(label: &str) -> usize {
    label.matches('→').count()
}

fn record(id: usize, label: &str, correct: bool, hit: Option<bool>) -> EvalRecord {
    EvalRecord {
        sample_id: format!("r{id:06}"),
        trajectory_type: label.to_string(),
        answer_correct: correct,
        retrieval_hit: hit,
        n_tool_calls: tool_calls(label),
        split_tags: vec!["test".into()],
    }
}

/// Records engineered to the type-breakdown rates over 100k samples.
pub fn type_breakdown_records() -> Vec<EvalRecord> {
    let mut out = Vec::new();
    for (label, share, recall, acc) in TYPE_BREAKDOWN {
        let n = (share / 100.0 * TYPE_BREAKDOWN_N as f64).round() as usize;
        let correct = (acc / 100.0 * n as f64).round() as usize;
        let hits = recall.map(|r| (r / 100.0 * n as f64).round() as usize);
        for i in 0..n {
            let id = out.len();
            out.push(record(id, label, i < correct, hits.map(|h| i < h)));
        }
    }
    out
}

/// 1000 retrieval hits of which 704 are answered correctly and 1000 misses
/// of which 114 are.
pub fn contingency_records() -> Vec<EvalRecord> {
    let mut out = Vec::new();
    for (hit, correct) in [(true, 704), (false, 114)] {
        for i in 0..1000 {
            let id = out.len();
            out.push(record(id, "T→A", i < correct, Some(hit)));
        }
    }
    out
}

const VOCAB: [&str; 24] = [
    "river", "stone", "bridge", "north", "tower", "lake", "old", "city", "market", "peak",
    "forest", "road", "harbour", "mill", "castle", "valley", "church", "field", "island",
    "station", "gate", "garden", "hill", "spring",
];

/// Articles with `sections_per` sections each; one section in eight copies an
/// earlier one so exact score ties occur. Every fifth article has two images.
pub fn probe_corpus(n_articles: usize, sections_per: usize, seed: u64) -> Corpus {
    use kbsearch_core::kb::{ImageAttachment, KbArticle, SectionChunk};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut texts: Vec<String> = Vec::new();
    let mut articles = Vec::new();
    for a in 0..n_articles {
        let mut sections = Vec::new();
        for s in 0..sections_per {
            let text = if !texts.is_empty() && rng.gen_ratio(1, 8) {
                texts[rng.gen_range(0..texts.len())].clone()
            } else {
                let n = rng.gen_range(2..7);
                (0..n)
                    .map(|_| VOCAB[rng.gen_range(0..VOCAB.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            texts.push(text.clone());
            sections.push(SectionChunk {
                section_id: format!("s{s}"),
                heading: format!("Part {s}"),
                text,
            });
        }
        let mut images = vec![ImageAttachment {
            image_id: format!("img://p{a:04}"),
            uri: format!("img://p{a:04}"),
            caption: None,
        }];
        if a % 5 == 0 {
            images.push(ImageAttachment {
                image_id: format!("img://p{a:04}b"),
                uri: format!("img://p{a:04}b"),
                caption: None,
            });
        }
        articles.push(KbArticle {
            article_id: format!("p{a:04}"),
            title: format!("Place {a}"),
            url: None,
            sections,
            images,
        });
    }
    Corpus::from_articles(articles).unwrap()
}

/// Random short queries over the probe vocabulary.
pub fn probe_queries(n: usize, seed: u64) -> Vec<String> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.gen_range(1..5);
            (0..k)
                .map(|_| VOCAB[rng.gen_range(0..VOCAB.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Exhaustive cosine scan written independently of the library: raw hashed
/// vectors, explicit cosine, descending score then `(article, section)`.
pub fn oracle_text(
    corpus: &Corpus,
    dim: usize,
    seed: u64,
    query: &str,
    k: usize,
) -> Vec<(String, String)> {
    let e = kbsearch_core::embed::HashingEmbedder::new(dim, seed);
    let q = e.embed_text(query);
    let mut scored: Vec<(f64, String, String)> = Vec::new();
    for a in corpus.articles() {
        for s in &a.sections {
            scored.push((
                cosine(&q, &e.embed_text(&s.text)),
                a.article_id.clone(),
                s.section_id.clone(),
            ));
        }
    }
    scored.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap()
            .then_with(|| (&x.1, &x.2).cmp(&(&y.1, &y.2)))
    });
    scored.into_iter().take(k).map(|(_, a, s)| (a, s)).collect()
}

/// Best image per article, descending score then image id, `k` articles.
pub fn oracle_image(
    corpus: &Corpus,
    dim: usize,
    seed: u64,
    image_ref: &str,
    k: usize,
) -> Vec<(String, String)> {
    let e = kbsearch_core::embed::HashingEmbedder::new(dim, seed);
    let q = e.embed_text(image_ref);
    let mut scored: Vec<(f64, String, String)> = corpus
        .articles()
        .flat_map(|a| {
            a.images.iter().map(|i| {
                (
                    cosine(&q, &e.embed_text(&i.image_id)),
                    i.image_id.clone(),
                    a.article_id.clone(),
                )
            })
        })
        .collect();
    scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then_with(|| x.1.cmp(&y.1)));
    let mut out: Vec<(String, String)> = Vec::new();
    for (_, img, art) in scored {
        if out.iter().all(|(a, _)| *a != art) {
            out.push((art, img));
        }
        if out.len() == k {
            break;
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    let c = ab / (aa.sqrt() * bb.sqrt());
    (c * 1e12).round() / 1e12
}
