//! Reward, evaluation and data-construction engine for box-grounded visual
//! reasoning.
//!
//! - [`geometry`]: boxes, IoU and the dual (recall + precision) IoU reward.
//! - [`parser`]: `<think>`/`<answer>` response parsing, box and choice extraction.
//! - [`rewards`]: accuracy + format + IoU reward composition, group advantages.
//! - [`harness`]: benchmark loading, evaluation and reporting.
//! - [`pipeline`]: seeded dataset construction steps.
//! - [`chat`], [`judge`]: chat-completions transport, cassettes and the judge client.

pub mod chat;
pub mod geometry;
pub mod harness;
pub mod judge;
pub mod parser;
pub mod pipeline;
pub mod rewards;
pub mod template;
pub mod verdicts;
