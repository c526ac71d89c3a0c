//! Effective run configuration: flags over environment over config file over
//! built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ENV_CHAT_URL: &str = "DBAGENT_CHAT_URL";
pub const ENV_EMBED_URL: &str = "DBAGENT_EMBED_URL";
pub const ENV_API_KEY: &str = "DBAGENT_API_KEY";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub paths: FilePaths,
    #[serde(default)]
    pub backend: FileBackend,
    #[serde(default)]
    pub rollout: FileRollout,
    #[serde(default)]
    pub embedding: FileEmbedding,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilePaths {
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub index_dir: Option<PathBuf>,
    pub script: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileBackend {
    pub chat_url: Option<String>,
    pub embed_url: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRollout {
    pub budget: Option<usize>,
    pub k_text: Option<usize>,
    pub k_image: Option<usize>,
    pub strict: Option<bool>,
    pub allow_caption_before_answer: Option<bool>,
    pub temperature: Option<f64>,
    pub max_new_tokens: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEmbedding {
    pub text_dimension: Option<usize>,
    pub image_dimension: Option<usize>,
}

/// Values given on the command line; `None` means not given.
#[derive(Debug, Clone, Default)]
pub struct FlagConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub index_dir: Option<PathBuf>,
    pub script: Option<PathBuf>,
    pub chat_url: Option<String>,
    pub embed_url: Option<String>,
    pub budget: Option<usize>,
    pub k_text: Option<usize>,
    pub k_image: Option<usize>,
    pub lenient: bool,
    pub allow_caption_before_answer: bool,
    pub temperature: Option<f64>,
    pub max_new_tokens: Option<u32>,
    pub text_dimension: Option<usize>,
    pub image_dimension: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct EnvConfig {
    pub chat_url: Option<String>,
    pub embed_url: Option<String>,
    pub api_key: Option<String>,
}

impl EnvConfig {
    pub fn from_process() -> Self {
        let get = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        EnvConfig {
            chat_url: get(ENV_CHAT_URL),
            embed_url: get(ENV_EMBED_URL),
            api_key: get(ENV_API_KEY),
        }
    }
}

/// Secret string that never prints its value.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Secret(Option<String>);

impl Secret {
    pub fn expose(&self) -> Option<&str> {
        self.0.as_deref()
    }
}

impl std::fmt::Debug for Secret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(if self.0.is_some() {
            "\"<redacted>\""
        } else {
            "None"
        })
    }
}

impl Serialize for Secret {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Some(_) => s.serialize_str("<redacted>"),
            None => s.serialize_str(""),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub paths: Paths,
    pub backend: Backend,
    pub rollout: Rollout,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, Serialize)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Backend {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chat_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_url: Option<String>,
    pub api_key: Secret,
}

#[derive(Debug, Clone, Serialize)]
pub struct Rollout {
    pub budget: usize,
    pub k_text: usize,
    pub k_image: usize,
    pub strict: bool,
    pub allow_caption_before_answer: bool,
    pub temperature: f64,
    pub max_new_tokens: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct Embedding {
    pub text_dimension: usize,
    pub image_dimension: usize,
}

pub const DEFAULT_TEXT_DIMENSION: usize = 256;
pub const DEFAULT_THREADS: usize = 4;

pub fn read_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn merge(flags: FlagConfig, env: EnvConfig, file: FileConfig) -> RunConfig {
    use kbsearch_core::embed::DEFAULT_HASH_DIMENSION;
    use kbsearch_core::retrieval::{DEFAULT_IMAGE_K, DEFAULT_TEXT_K};
    use kbsearch_core::runtime::DEFAULT_BUDGET;
    RunConfig {
        seed: flags.seed.or(file.seed).unwrap_or(0),
        threads: flags.threads.or(file.threads).unwrap_or(DEFAULT_THREADS),
        paths: Paths {
            corpus: flags.corpus.or(file.paths.corpus),
            dataset: flags.dataset.or(file.paths.dataset),
            index_dir: flags.index_dir.or(file.paths.index_dir),
            script: flags.script.or(file.paths.script),
        },
        backend: Backend {
            chat_url: flags.chat_url.or(env.chat_url).or(file.backend.chat_url),
            embed_url: flags.embed_url.or(env.embed_url).or(file.backend.embed_url),
            api_key: Secret(env.api_key),
        },
        rollout: Rollout {
            budget: flags
                .budget
                .or(file.rollout.budget)
                .unwrap_or(DEFAULT_BUDGET),
            k_text: flags
                .k_text
                .or(file.rollout.k_text)
                .unwrap_or(DEFAULT_TEXT_K),
            k_image: flags
                .k_image
                .or(file.rollout.k_image)
                .unwrap_or(DEFAULT_IMAGE_K),
            strict: if flags.lenient {
                false
            } else {
                file.rollout.strict.unwrap_or(true)
            },
            allow_caption_before_answer: flags.allow_caption_before_answer
                || file.rollout.allow_caption_before_answer.unwrap_or(false),
            temperature: flags
                .temperature
                .or(file.rollout.temperature)
                .unwrap_or(0.0),
            max_new_tokens: flags
                .max_new_tokens
                .or(file.rollout.max_new_tokens)
                .unwrap_or(1024),
        },
        embedding: Embedding {
            text_dimension: flags
                .text_dimension
                .or(file.embedding.text_dimension)
                .unwrap_or(DEFAULT_TEXT_DIMENSION),
            image_dimension: flags
                .image_dimension
                .or(file.embedding.image_dimension)
                .unwrap_or(DEFAULT_HASH_DIMENSION),
        },
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn rollout_config(&self) -> kbsearch_core::runtime::RolloutConfig {
        use kbsearch_core::gateway::GenerationParams;
        kbsearch_core::runtime::RolloutConfig {
            budget: self.rollout.budget,
            k_text: self.rollout.k_text,
            k_image: self.rollout.k_image,
            strict_protocol: self.rollout.strict,
            allow_caption_before_answer: self.rollout.allow_caption_before_answer,
            generation: GenerationParams::agent(
                self.rollout.temperature,
                self.rollout.max_new_tokens,
            ),
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flags_env_file_default() {
        let file: FileConfig = toml::from_str(
            "seed = 5\n[backend]\nchat_url = \"http://file\"\nembed_url = \"http://file-embed\"\n[rollout]\nbudget = 6\nk_text = 2\n",
        )
        .unwrap();
        let env = EnvConfig {
            chat_url: Some("http://env".into()),
            embed_url: None,
            api_key: Some("sk-123".into()),
        };
        let flags = FlagConfig {
            k_text: Some(5),
            ..Default::default()
        };
        let c = merge(flags, env, file);
        assert_eq!(c.seed, 5);
        assert_eq!(c.rollout.budget, 6);
        assert_eq!(c.rollout.k_text, 5);
        assert_eq!(c.rollout.k_image, 1);
        assert_eq!(c.backend.chat_url.as_deref(), Some("http://env"));
        assert_eq!(c.backend.embed_url.as_deref(), Some("http://file-embed"));
        let dumped = c.to_toml();
        assert!(!dumped.contains("sk-123") && dumped.contains("<redacted>"));
        assert!(!format!("{c:?}").contains("sk-123"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[rollout]\nbudgett = 3\n").is_err());
    }
}
