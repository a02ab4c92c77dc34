//! Conflict-driven visual verification for vision-language reasoning.
//!
//! Two heterogeneous grounding experts propose regions for the objects a
//! question mentions. Regions they agree on are trusted and highlighted in a
//! global view; regions only one of them proposes are doubtful and, within a
//! visual-token budget, re-inspected through zoomed crops. The reasoner then
//! answers from the highlighted view, the original image and the crops.

pub mod arbitration;
pub mod error;
pub mod eval;
pub mod experts;
pub mod fixture;
pub mod font;
pub mod geometry;
pub mod http;
pub mod par;
pub mod pipeline;
pub mod reasoner;
pub mod rendering;
pub mod synth;

pub use error::{Error, Result};
