//! Set-of-Mark auto-labeling: number candidate regions, draw the numbers on
//! the image, ask a vision LLM to name each region's distortion and turn the
//! reply into an annotation.

pub mod client;
pub mod compose;
pub mod marks;
pub mod matching;
pub mod overlay;
pub mod pipeline;
pub mod prompt;
pub mod response;

pub use client::{ChatBackend, ChatRequest, HttpChatBackend, LlmClient, LlmEndpointConfig, LlmError};
pub use compose::{compose_annotation, AnnotationStamp, ComposeOutcome};
pub use marks::{assign_marks, MarkError, MarkedRegion, MarkedRegionSet};
pub use matching::{match_distortion, match_label, LabelMatch};
pub use pipeline::{autolabel, autolabel_manifest, generate_quality_text, AutolabelError, RunReport};
pub use prompt::{build_prompts, QUALITY_TEXT_PROMPT, SYSTEM_PROMPT};
pub use response::{parse_response, AutoLabelEntry, AutoLabelResponse, ParseError};
