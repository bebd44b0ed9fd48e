//! Layer-wise analysis of hidden states dumped from causal language models.
//!
//! The engine never runs a model itself. An extraction process writes a
//! [`DumpBundle`](tensor_store::DumpBundle) (per-layer hidden states, the LM
//! head, final-norm parameters, the token table and optional
//! contextualization scores) and this crate computes:
//!
//! - per-token nonlinearity between adjacent layers ([`linearity`]),
//! - logit-lens predictions, next-token errors and layer contributions ([`lens`]),
//! - TwoNN intrinsic dimension of token point clouds ([`intrinsic_dim`]),
//! - word-class removal transforms, class histograms and correlations ([`token_analysis`]).
//!
//! Layer convention: a dump for a model with `L` blocks carries `L + 1`
//! hidden stacks, `hidden.0` being the post-embedding states and `hidden.l`
//! the output of block `l`.

pub mod error;
pub mod intrinsic_dim;
pub mod lens;
pub mod linearity;
pub mod tensor_store;
pub mod token_analysis;

pub use error::{Error, ErrorKind, Result};
pub use tensor_store::{DumpBundle, NormKind, Token, TokenTable};
