//! Cooperative multi-agent Q-learning with cyclic pairwise value decomposition.
//!
//! The joint action-value is approximated as a sum of pairwise terms over a
//! cycle of agents, `Q(o, a) ≈ Σᵢ Q̃ᵢ,ⱼ₍ᵢ₎((oᵢ, oⱼ), (aᵢ, aⱼ))`. Maximizing such a
//! sum is no longer decentralized, so [`maximizer`] provides an exact
//! `O(n·|A|³)` dynamic program for cycles and general functional graphs.
//!
//! The remaining modules build a small deep Q-learning stack around it:
//! a from-scratch MLP ([`nn`]), the PairVDN / VDN / IQL decompositions
//! ([`models`]), the Box Jump tower-building environment ([`boxjump`]),
//! synthetic coordination games ([`matrix`]) and the training loop
//! ([`training`]).

pub mod boxjump;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod matrix;
pub mod maximizer;
pub mod models;
pub mod nn;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
