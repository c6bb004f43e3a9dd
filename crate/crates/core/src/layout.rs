//! Token-segment layouts for every input variant, plus the text-mode prompt
//! templates.
//!
//! The layout type is pure index bookkeeping: it records where each segment
//! (image, question, context, ...) lives inside the flat token sequence.
//! Tokenization is handled elsewhere; the toy model consumes symbolic ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on layout length accepted by [`build_layout`]. Model configs
/// enforce their own (smaller) `max_seq` at forward time.
pub const MAX_LAYOUT_LEN: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Instruction,
    Image,
    ImageQuestion,
    Context,
    ContextQuestion,
    Question,
    Generated,
}

/// Input variant, covering closed-book, vanilla RAG, the swapped-order
/// ablation, the dual-question layout without intervention, and the full
/// intervention layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ClosedBook,
    VanillaRag,
    SwapQc,
    DualQuestionNoInt,
    MadRag,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::ClosedBook,
        Variant::VanillaRag,
        Variant::SwapQc,
        Variant::DualQuestionNoInt,
        Variant::MadRag,
    ];

    pub fn is_dual_question(self) -> bool {
        matches!(self, Variant::DualQuestionNoInt | Variant::MadRag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ClosedBook => "closed_book",
            Variant::VanillaRag => "vanilla_rag",
            Variant::SwapQc => "swap_qc",
            Variant::DualQuestionNoInt => "dual_question_no_int",
            Variant::MadRag => "madrag",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Ordered, contiguous, non-overlapping token segments covering `[0, L)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub variant: Variant,
    segments: Vec<Segment>,
    total_len: usize,
}

impl SequenceLayout {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn range_of(&self, kind: SegmentKind) -> Option<std::ops::Range<usize>> {
        self.segments
            .iter()
            .find(|s| s.kind == kind && s.len > 0)
            .map(|s| s.range())
    }

    pub fn image_range(&self) -> std::ops::Range<usize> {
        self.range_of(SegmentKind::Image).unwrap_or(0..0)
    }

    pub fn context_range(&self) -> std::ops::Range<usize> {
        self.range_of(SegmentKind::Context).unwrap_or(0..0)
    }

    pub fn image_question_range(&self) -> Option<std::ops::Range<usize>> {
        self.range_of(SegmentKind::ImageQuestion)
    }

    pub fn context_question_range(&self) -> Option<std::ops::Range<usize>> {
        self.range_of(SegmentKind::ContextQuestion)
    }

    pub fn generated_range(&self) -> std::ops::Range<usize> {
        self.range_of(SegmentKind::Generated).unwrap_or(0..0)
    }

    /// Length of the prompt, excluding any generated segment.
    pub fn prompt_len(&self) -> usize {
        self.total_len - self.generated_range().len()
    }

    pub fn is_dual_question(&self) -> bool {
        self.variant.is_dual_question()
    }

    /// Layout extended by `n` generated token positions.
    pub fn with_generated(&self, n: usize) -> SequenceLayout {
        let mut out = self.clone();
        if n == 0 {
            return out;
        }
        if let Some(last) = out.segments.last_mut() {
            if last.kind == SegmentKind::Generated {
                last.len += n;
                out.total_len += n;
                return out;
            }
        }
        out.segments.push(Segment {
            kind: SegmentKind::Generated,
            start: out.total_len,
            len: n,
        });
        out.total_len += n;
        out
    }
}

/// Build the segment layout for a variant.
///
/// `v` is the image-token count, `t` the question-token count, `cn` the
/// context-token count and `s` the instruction-token count (default 0 in the
/// toy engine). Dual-question variants repeat the `t` question tokens before
/// and after the context.
pub fn build_layout(
    variant: Variant,
    v: usize,
    t: usize,
    cn: usize,
    s: usize,
) -> Result<SequenceLayout> {
    if t < 1 {
        return Err(Error::Layout("question length T must be >= 1".into()));
    }
    if variant == Variant::ClosedBook && cn > 0 {
        return Err(Error::Layout(format!(
            "closed-book layout cannot carry context tokens (Cn = {cn})"
        )));
    }
    let mut kinds: Vec<(SegmentKind, usize)> = Vec::new();
    if s > 0 {
        kinds.push((SegmentKind::Instruction, s));
    }
    kinds.push((SegmentKind::Image, v));
    match variant {
        Variant::ClosedBook => kinds.push((SegmentKind::Question, t)),
        Variant::VanillaRag => {
            kinds.push((SegmentKind::Question, t));
            kinds.push((SegmentKind::Context, cn));
        }
        Variant::SwapQc => {
            kinds.push((SegmentKind::Context, cn));
            kinds.push((SegmentKind::Question, t));
        }
        Variant::DualQuestionNoInt | Variant::MadRag => {
            kinds.push((SegmentKind::ImageQuestion, t));
            kinds.push((SegmentKind::Context, cn));
            kinds.push((SegmentKind::ContextQuestion, t));
        }
    }
    let mut segments = Vec::new();
    let mut start = 0;
    for (kind, len) in kinds {
        segments.push(Segment { kind, start, len });
        start += len;
    }
    if start > MAX_LAYOUT_LEN {
        return Err(Error::Layout(format!(
            "layout length {start} exceeds budget {MAX_LAYOUT_LEN}"
        )));
    }
    Ok(SequenceLayout {
        variant,
        segments,
        total_len: start,
    })
}

/// Fill the two question slots of a dual-question layout with identical
/// token ids. Non-question positions are left as 0 placeholders; callers
/// assembling a full stream overwrite them.
pub fn duplicate_question(layout: &SequenceLayout, question_tokens: &[u32]) -> Result<Vec<u32>> {
    if !layout.is_dual_question() {
        return Err(Error::Layout(format!(
            "duplicate_question requires a dual-question variant, got {:?}",
            layout.variant
        )));
    }
    let qi = layout.image_question_range().unwrap();
    let qc = layout.context_question_range().unwrap();
    if qi.len() != question_tokens.len() || qc.len() != question_tokens.len() {
        return Err(Error::Layout(format!(
            "question has {} tokens but layout slots hold {}",
            question_tokens.len(),
            qi.len()
        )));
    }
    let mut stream = vec![0u32; layout.total_len()];
    stream[qi.clone()].copy_from_slice(question_tokens);
    stream[qc.clone()].copy_from_slice(question_tokens);
    Ok(stream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetStyle {
    Okvqa,
    EvqaInfoseek,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ClosedBook,
    Rag,
}

const OKVQA_CLOSED_BOOK: &str = include_str!("../templates/okvqa_closed_book.txt");
const OKVQA_RAG: &str = include_str!("../templates/okvqa_rag.txt");
const EVQA_INFOSEEK_CLOSED_BOOK: &str =
    include_str!("../templates/evqa_infoseek_closed_book.txt");
const EVQA_INFOSEEK_RAG: &str = include_str!("../templates/evqa_infoseek_rag.txt");

/// Render a text-mode prompt from the versioned templates. No trailing
/// newline follows the final line.
pub fn render_prompt(
    style: DatasetStyle,
    mode: PromptMode,
    question: &str,
    context: Option<&str>,
) -> Result<String> {
    if question.is_empty() {
        return Err(Error::Prompt("question must be non-empty".into()));
    }
    let template = match (style, mode) {
        (DatasetStyle::Okvqa, PromptMode::ClosedBook) => OKVQA_CLOSED_BOOK,
        (DatasetStyle::Okvqa, PromptMode::Rag) => OKVQA_RAG,
        (DatasetStyle::EvqaInfoseek, PromptMode::ClosedBook) => EVQA_INFOSEEK_CLOSED_BOOK,
        (DatasetStyle::EvqaInfoseek, PromptMode::Rag) => EVQA_INFOSEEK_RAG,
    };
    let mut out = template.replace("{question}", question);
    match mode {
        PromptMode::Rag => {
            let ctx = context
                .filter(|c| !c.is_empty())
                .ok_or_else(|| Error::Prompt("rag mode requires a non-empty context".into()))?;
            out = out.replace("{context}", ctx);
        }
        PromptMode::ClosedBook => {}
    }
    Ok(out)
}
