use kbsearch_core::embed::EmbedError;
use kbsearch_core::eval::EvalError;
use kbsearch_core::factory::FactoryError;
use kbsearch_core::gateway::GatewayError;
use kbsearch_core::retrieval::RetrievalError;
use kbsearch_core::runtime::RuntimeError;

/// Process outcome classes; each maps to one exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(anyhow::Error),
    Backend(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
        }
    }

    pub fn data(msg: impl std::fmt::Display) -> Self {
        CliError::Data(anyhow::anyhow!("{msg}"))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "data error: {e:#}"),
            CliError::Backend(e) => write!(f, "backend error: {e:#}"),
        }
    }
}

fn embed_is_backend(e: &EmbedError) -> bool {
    matches!(
        e,
        EmbedError::Transport { .. } | EmbedError::Status { .. } | EmbedError::Decode(_)
    )
}

fn gateway_is_backend(e: &GatewayError) -> bool {
    !matches!(e, GatewayError::Script { .. } | GatewayError::Io { .. })
}

/// Attaches `context` (usually a file path) and sorts the error into an exit class.
pub trait Classify<T> {
    fn classify(self, context: &str) -> Result<T, CliError>;
}

fn wrap<E: std::error::Error + Send + Sync + 'static>(
    e: E,
    context: &str,
    backend: bool,
) -> CliError {
    let err = anyhow::Error::new(e).context(context.to_string());
    if backend {
        CliError::Backend(err)
    } else {
        CliError::Data(err)
    }
}

impl<T> Classify<T> for Result<T, GatewayError> {
    fn classify(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            let b = gateway_is_backend(&e);
            wrap(e, context, b)
        })
    }
}

impl<T> Classify<T> for Result<T, RetrievalError> {
    fn classify(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            let b = match &e {
                RetrievalError::IndexEmbedding { source, .. }
                | RetrievalError::Query(source)
                | RetrievalError::UnresolvableImage { source, .. } => embed_is_backend(source),
                _ => false,
            };
            wrap(e, context, b)
        })
    }
}

impl<T> Classify<T> for Result<T, RuntimeError> {
    fn classify(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            let b = matches!(&e, RuntimeError::Backend(g) if gateway_is_backend(g));
            wrap(e, context, b)
        })
    }
}

impl<T> Classify<T> for Result<T, FactoryError> {
    fn classify(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            let b = matches!(&e, FactoryError::Backend(g) if gateway_is_backend(g));
            wrap(e, context, b)
        })
    }
}

impl<T> Classify<T> for Result<T, EvalError> {
    fn classify(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            let b = match &e {
                EvalError::Backend(g) => gateway_is_backend(g),
                EvalError::Retrieval(RetrievalError::IndexEmbedding { source, .. }) => {
                    embed_is_backend(source)
                }
                _ => false,
            };
            wrap(e, context, b)
        })
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl<T> Classify<T> for Result<T, $t> {
            fn classify(self, context: &str) -> Result<T, CliError> {
                self.map_err(|e| wrap(e, context, false))
            }
        }
    )*};
}

data_errors!(
    kbsearch_core::kb::KbError,
    kbsearch_core::sft::SftError,
    std::io::Error,
    serde_json::Error
);

impl<T> Classify<T> for Result<T, EmbedError> {
    fn classify(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            let b = embed_is_backend(&e);
            wrap(e, context, b)
        })
    }
}
