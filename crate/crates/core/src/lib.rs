//! Semantic-aware caching for agent tool calls.
//!
//! A lookup embeds the request, collects nearby cached keys from a vector
//! index (similarity gate `tau_sim`), then asks a judge whether a cached result
//! really answers the request (confidence gate `tau_lsm`). Misses go to a
//! rate-limited remote tool and the result is admitted as a new element.
//! Eviction ranks elements by frequency, cost, latency and staticity per token.

pub mod clock;
pub mod embed;
pub mod index;
pub mod kv;
pub mod model;
pub mod text;
pub mod judge;
pub mod recalibrate;
pub mod cache;
pub mod remote;
pub mod prefetch;
pub mod proxy;
pub mod bench;
pub mod sched;
pub mod server;
