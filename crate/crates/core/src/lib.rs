pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod embed;
pub mod models;
pub mod tokenizer;
pub mod util;
pub mod decode;
pub mod eval;
pub mod scaling;
pub mod trie;
