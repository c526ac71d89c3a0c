//! Seeded synthetic corpora, QA samples and scripted policies used by the
//! test suites and the `synth` CLI command.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::escape;
use serde::{Deserialize, Serialize};

use crate::factory::{prompts, PromptTemplate, QaSample, Split, TrajectoryType};
use crate::gateway::ScriptedRule;
use crate::kb::{Corpus, ImageAttachment, KbArticle, SectionChunk};
use crate::protocol::IMAGE_PLACEHOLDER;
use crate::runtime::AgentTask;

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ra", "ven", "tor", "sel", "du", "ni", "bar", "qu", "zen", "fa", "hol", "pi",
    "mar", "ost", "ur", "ber", "gli", "van", "tes", "ro", "lin",
];
const KINDS: [(&str, &str); 4] = [
    ("Peak", "mountain"),
    ("Falls", "waterfall"),
    ("Tower", "tower"),
    ("Lake", "lake"),
];
const REGIONS: [&str; 6] = [
    "Northern", "Coastal", "Highland", "Eastern", "Lowland", "Western",
];

/// Ground truth for one synthetic article.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityFacts {
    pub article_id: String,
    pub title: String,
    pub kind: String,
    pub region: String,
    pub elevation_m: u32,
    pub year: u32,
    pub image_ref: String,
}

impl EntityFacts {
    pub fn elevation(&self) -> String {
        format!("{} m", self.elevation_m)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub corpus: Corpus,
    pub facts: Vec<EntityFacts>,
}

fn make_name(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    let mut s: String = (0..n)
        .map(|_| *SYLLABLES.choose(rng).expect("non-empty"))
        .collect();
    s[..1].make_ascii_uppercase();
    s
}

/// `n` articles with three sections and one image each, ids `a00000`...
pub fn synthetic_world(n: usize, seed: u64) -> SyntheticWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = BTreeSet::new();
    let mut facts = Vec::with_capacity(n);
    let mut articles = Vec::with_capacity(n);
    for i in 0..n {
        let (suffix, kind) = KINDS[i % KINDS.len()];
        let title = loop {
            let t = format!("{} {suffix}", make_name(&mut rng));
            if names.insert(t.clone()) {
                break t;
            }
        };
        let f = EntityFacts {
            article_id: format!("a{i:05}"),
            title: title.clone(),
            kind: kind.to_string(),
            region: REGIONS.choose(&mut rng).expect("non-empty").to_string(),
            elevation_m: rng.gen_range(100..5000),
            year: rng.gen_range(1500..2000),
            image_ref: format!("img://a{i:05}"),
        };
        articles.push(KbArticle {
            article_id: f.article_id.clone(),
            title,
            url: None,
            sections: vec![
                SectionChunk {
                    section_id: "s0".into(),
                    heading: "Overview".into(),
                    text: format!("{} is a {} in the {} region.", f.title, f.kind, f.region),
                },
                SectionChunk {
                    section_id: "s1".into(),
                    heading: "Geography".into(),
                    text: format!("{} has an elevation of {} metres.", f.title, f.elevation_m),
                },
                SectionChunk {
                    section_id: "s2".into(),
                    heading: "History".into(),
                    text: format!("{} was first recorded in {}.", f.title, f.year),
                },
            ],
            images: vec![ImageAttachment {
                image_id: f.image_ref.clone(),
                uri: f.image_ref.clone(),
                caption: None,
            }],
        });
        facts.push(f);
    }
    let corpus = Corpus::from_articles(articles).expect("synthetic ids are unique");
    SyntheticWorld { corpus, facts }
}

pub fn elevation_question(f: &EntityFacts) -> String {
    format!("What is the elevation of this {}?", f.kind)
}

pub fn qa_sample(sample_id: &str, f: &EntityFacts, split: Split) -> QaSample {
    QaSample {
        sample_id: sample_id.to_string(),
        image_ref: f.image_ref.clone(),
        question: elevation_question(f),
        gold_answers: vec![f.elevation(), format!("{} metres", f.elevation_m)],
        gold_entity: Some(f.title.clone()),
        gold_article_id: Some(f.article_id.clone()),
        split,
        tags: Vec::new(),
    }
}

pub fn agent_task(task_id: &str, f: &EntityFacts) -> AgentTask {
    AgentTask {
        task_id: task_id.to_string(),
        image_ref: f.image_ref.clone(),
        question: elevation_question(f),
    }
}

fn turn(think: &str, caption: Option<&str>, tag: &str, payload: &str) -> String {
    let cap = caption
        .map(|c| format!("<caption>{c}</caption>"))
        .unwrap_or_default();
    format!("<think>{think}</think>{cap}<{tag}>{payload}</{tag}>")
}

/// Turn-indexed replay of one canonical trajectory shape, scoped to the task.
pub fn replay_rules(f: &EntityFacts, shape: TrajectoryType) -> Vec<ScriptedRule> {
    let answer = turn(
        "The evidence gives the elevation.",
        None,
        "answer",
        &f.elevation(),
    );
    let image = turn(
        &format!("I cannot tell which {} this is.", f.kind),
        None,
        "image_search",
        IMAGE_PLACEHOLDER,
    );
    let text = |q: &str| {
        turn(
            &format!("This looks like {}.", f.title),
            None,
            "text_search",
            q,
        )
    };
    let outputs: Vec<String> = match shape {
        TrajectoryType::A => vec![turn(
            &format!("I recognise {}.", f.title),
            None,
            "answer",
            &f.elevation(),
        )],
        TrajectoryType::IA => vec![image, answer],
        TrajectoryType::TA => vec![text(&format!("{} elevation", f.title)), answer],
        TrajectoryType::ITA => vec![
            image,
            turn(
                "The article names it but I still need the elevation.",
                Some(&format!("A {} seen from a distance.", f.kind)),
                "text_search",
                &format!("{} elevation metres", f.title),
            ),
            answer,
        ],
        TrajectoryType::TTA => vec![
            text(&format!("{} history", f.title)),
            turn(
                "That section has no elevation.",
                None,
                "text_search",
                &format!("{} elevation", f.title),
            ),
            answer,
        ],
        TrajectoryType::Discarded | TrajectoryType::Failed => Vec::new(),
    };
    outputs
        .into_iter()
        .enumerate()
        .map(|(i, o)| ScriptedRule::at_turn(i, o).scoped(&f.image_ref))
        .collect()
}

/// A policy that never answers.
pub fn always_search_rules() -> Vec<ScriptedRule> {
    vec![
        ScriptedRule::on_pattern("", turn("Keep looking.", None, "text_search", "elevation"))
            .expect("static pattern"),
    ]
}

/// Answers once the task's article shows up in evidence; otherwise searches
/// text first and falls back to image search.
pub fn evidence_policy_rules(facts: &[EntityFacts]) -> Vec<ScriptedRule> {
    let mut rules = Vec::new();
    for f in facts {
        let seen = format!(r"\] {} — ", escape(&f.title));
        rules.push(
            ScriptedRule::on_pattern(
                &seen,
                turn("The evidence covers it.", None, "answer", &f.elevation()),
            )
            .expect("escaped pattern")
            .scoped(&f.image_ref),
        );
        rules.push(
            ScriptedRule::at_turn(
                0,
                turn(
                    &format!("This looks like {}.", f.title),
                    None,
                    "text_search",
                    &format!("{} elevation", f.title),
                ),
            )
            .scoped(&f.image_ref),
        );
    }
    rules.push(
        ScriptedRule::on_pattern(
            "^<evidence>",
            turn("Not found yet.", None, "image_search", IMAGE_PLACEHOLDER),
        )
        .expect("static pattern"),
    );
    rules
}

/// Searches once with a query naming only the kind and region, which many
/// articles share, then answers. Whether the gold article is retrieved
/// depends only on how many look-alikes the corpus holds.
pub fn ambiguous_query_rules(facts: &[EntityFacts]) -> Vec<ScriptedRule> {
    let mut rules = Vec::new();
    for f in facts {
        let q = format!("{} in the {} region", f.kind, f.region);
        rules.push(
            ScriptedRule::at_turn(0, turn("Which one is it?", None, "text_search", &q))
                .scoped(&f.image_ref),
        );
        rules.push(
            ScriptedRule::at_turn(
                1,
                turn("Going with the elevation.", None, "answer", &f.elevation()),
            )
            .scoped(&f.image_ref),
        );
    }
    rules
}

/// What the scripted factory backend should do with one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactoryPlan {
    Route(TrajectoryType),
    /// Stage 3 of the text branch answers wrongly.
    TextStage3Wrong,
    /// Stage 3 of the image branch answers wrongly.
    ImageStage3Wrong,
    /// The text rewrite repeats the first query.
    RepeatedQuery,
    /// A T→A route whose stage-1 routing rationale names the gold answer.
    LeakyChoose,
    /// The stage-1 answer breaks its tag contract.
    Unparseable,
}

impl FactoryPlan {
    pub fn expected(self) -> TrajectoryType {
        match self {
            FactoryPlan::Route(t) => t,
            _ => TrajectoryType::Discarded,
        }
    }
}

fn stage_pattern(t: &PromptTemplate, sample_id: &str) -> String {
    format!(
        r"^\[stage\] {}\n\[sample_id\] {}\n",
        escape(t.id),
        escape(sample_id)
    )
}

/// Scripted stage outputs for one sample. Judge outputs carry verdict markers
/// so the same script works under either judge mode.
pub fn factory_rules(sample: &QaSample, f: &EntityFacts, plan: FactoryPlan) -> Vec<ScriptedRule> {
    use TrajectoryType::*;
    let sid = &sample.sample_id;
    let right = f.elevation();
    let wrong = format!("{} m", f.elevation_m + 1);
    let route_image = matches!(
        plan,
        FactoryPlan::Route(IA | ITA) | FactoryPlan::ImageStage3Wrong
    );
    let entity = if route_image {
        format!("an unnamed {}", f.kind)
    } else {
        f.title.clone()
    };
    let s1_answer = if plan == FactoryPlan::Route(A) {
        right.clone()
    } else {
        wrong.clone()
    };
    let s2_correct = matches!(plan, FactoryPlan::Route(IA | TA) | FactoryPlan::LeakyChoose);
    let s3_correct = matches!(plan, FactoryPlan::Route(ITA | TTA));
    let q1 = if matches!(plan, FactoryPlan::Route(TA) | FactoryPlan::LeakyChoose) {
        format!("{} elevation", f.title)
    } else {
        format!("{} history", f.title)
    };
    let q2 = if plan == FactoryPlan::RepeatedQuery {
        q1.clone()
    } else {
        format!("{} elevation metres", f.title)
    };
    let choose = if plan == FactoryPlan::LeakyChoose {
        format!("The answer should be {right}, which needs a lookup.")
    } else if route_image {
        format!(
            "The {} in the image cannot be named with confidence.",
            f.kind
        )
    } else {
        format!("{} is recognised but its elevation is not known.", f.title)
    };
    let mark = |ok: bool| if ok { "[correct]" } else { "[wrong]" };
    let ans = |ok: bool| if ok { right.clone() } else { wrong.clone() };

    let mut out: Vec<(PromptTemplate, String)> = Vec::new();
    out.push((
        prompts::S1_ANSWER,
        if plan == FactoryPlan::Unparseable {
            format!("<think>A {}.</think><answer>{}</answer>", f.kind, s1_answer)
        } else {
            format!(
                "<think>\nThe image shows a {} in a {} landscape.\n</think>\n<entity>{entity}</entity>\n<answer>{s1_answer}</answer>",
                f.kind,
                f.region.to_lowercase()
            )
        },
    ));
    out.push((
        prompts::S1_JUDGE,
        if plan == FactoryPlan::Route(A) {
            "[correct]".to_string()
        } else if route_image {
            format!("[wrong]\n<image_search>\n{IMAGE_PLACEHOLDER}\n</image_search>\n<choose>{choose}</choose>")
        } else {
            format!("[wrong]\n<text_search>\n{q1}\n</text_search>\n<choose>{choose}</choose>")
        },
    ));
    let (a2, j2, a3, j3) = if route_image {
        (
            prompts::S2_IMAGE_ANSWER,
            prompts::S2_IMAGE_JUDGE,
            prompts::S3_IMAGE_ANSWER,
            prompts::S3_IMAGE_JUDGE,
        )
    } else {
        (
            prompts::S2_TEXT_ANSWER,
            prompts::S2_TEXT_JUDGE,
            prompts::S3_TEXT_ANSWER,
            prompts::S3_TEXT_JUDGE,
        )
    };
    out.push((
        a2,
        format!(
            "<think>\nThe evidence describes {}.\n</think>\n<answer>\n{}\n</answer>",
            f.title,
            ans(s2_correct)
        ),
    ));
    out.push((
        j2,
        if s2_correct {
            "[correct]".to_string()
        } else if route_image {
            format!(
                "[wrong]\n<caption>A {} under a clear sky.</caption>\n<think>The evidence names the {} but gives no elevation.</think>\n<text_search>{q2}</text_search>",
                f.kind, f.kind
            )
        } else {
            format!("[wrong]\n<think>The retrieved section does not state the elevation.</think>\n<text_search>{q2}</text_search>")
        },
    ));
    out.push((
        a3,
        format!(
            "<think>The new evidence states the elevation.</think>\n<answer>{}</answer>",
            ans(s3_correct)
        ),
    ));
    out.push((j3, mark(s3_correct).to_string()));
    out.into_iter()
        .map(|(t, o)| {
            ScriptedRule::on_pattern(&stage_pattern(&t, sid), o).expect("escaped pattern")
        })
        .collect()
}

/// A 60-sample plan: ten of each canonical route plus ten discards.
pub fn factory_plan_60() -> Vec<FactoryPlan> {
    use TrajectoryType::*;
    let mut plan = Vec::new();
    for t in [A, IA, TA, ITA, TTA] {
        plan.extend(std::iter::repeat_n(FactoryPlan::Route(t), 10));
    }
    plan.extend([
        FactoryPlan::TextStage3Wrong,
        FactoryPlan::TextStage3Wrong,
        FactoryPlan::TextStage3Wrong,
        FactoryPlan::ImageStage3Wrong,
        FactoryPlan::ImageStage3Wrong,
        FactoryPlan::RepeatedQuery,
        FactoryPlan::RepeatedQuery,
        FactoryPlan::LeakyChoose,
        FactoryPlan::LeakyChoose,
        FactoryPlan::Unparseable,
    ]);
    plan
}

/// Samples and scripted rules for a factory plan, one article per sample.
pub fn factory_fixture(
    world: &SyntheticWorld,
    plan: &[FactoryPlan],
) -> (Vec<QaSample>, Vec<ScriptedRule>) {
    assert!(plan.len() <= world.facts.len(), "world too small for plan");
    let mut samples = Vec::new();
    let mut rules = Vec::new();
    for (i, (p, f)) in plan.iter().zip(&world.facts).enumerate() {
        let s = qa_sample(&format!("q{i:04}"), f, Split::Train);
        rules.extend(factory_rules(&s, f, *p));
        samples.push(s);
    }
    (samples, rules)
}
