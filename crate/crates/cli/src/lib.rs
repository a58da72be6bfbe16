//! Front end for the latent factor generator: model loading, top-N ranking
//! and the HTTP endpoint. The `lfg` binary wires these to subcommands.

pub mod recommend;
pub mod serve;
