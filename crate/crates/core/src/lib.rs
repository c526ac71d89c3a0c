pub mod answer;
pub mod embed;
pub mod eval;
pub mod factory;
pub mod gateway;
pub mod kb;
pub mod protocol;
pub mod retrieval;
pub mod runtime;
pub mod seeds;
pub mod sft;
pub mod synth;
