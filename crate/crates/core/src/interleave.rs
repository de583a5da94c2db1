//! Parsing, validation and serialization of mixed think/code sequences.
//!
//! A generation is an optional upfront `<think>` block followed by code with
//! any number of inline `<thinkanywhere>` blocks. Parsing is a single
//! left-to-right pass over delimiter events with an explicit open-block
//! state; the same state machine runs on raw text ([`parse_mixed_sequence`])
//! and on token streams that carry dedicated delimiter ids
//! ([`parse_token_stream`]).

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_OPEN_THINK: &str = "<think>";
pub const DEFAULT_CLOSE_THINK: &str = "</think>";
pub const DEFAULT_OPEN_TA: &str = "<thinkanywhere>";
pub const DEFAULT_CLOSE_TA: &str = "</thinkanywhere>";

/// How delimiters are represented in generated output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelimiterMode {
    TextTags,
    /// Each delimiter is one dedicated vocabulary entry. The strings of the
    /// scheme are the decoded surface forms of those entries.
    SingleTokenIds {
        think_ids: (u32, u32),
        ta_ids: (u32, u32),
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelimiterScheme {
    pub open_think: String,
    pub close_think: String,
    pub open_ta: String,
    pub close_ta: String,
    pub mode: DelimiterMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemeError {
    #[error("delimiter {0:?} is empty")]
    Empty(&'static str),
    #[error("delimiters {0:?} and {1:?} overlap")]
    Overlap(String, String),
    #[error("delimiter token ids are not distinct")]
    DuplicateIds,
}

impl Default for DelimiterScheme {
    fn default() -> Self {
        Self::text_tags()
    }
}

impl DelimiterScheme {
    pub fn text_tags() -> Self {
        Self {
            open_think: DEFAULT_OPEN_THINK.into(),
            close_think: DEFAULT_CLOSE_THINK.into(),
            open_ta: DEFAULT_OPEN_TA.into(),
            close_ta: DEFAULT_CLOSE_TA.into(),
            mode: DelimiterMode::TextTags,
        }
    }

    /// Dedicated-token variant: `<ta>`/`</ta>` for inline blocks.
    pub fn single_token(think_ids: (u32, u32), ta_ids: (u32, u32)) -> Self {
        Self {
            open_think: DEFAULT_OPEN_THINK.into(),
            close_think: DEFAULT_CLOSE_THINK.into(),
            open_ta: "<ta>".into(),
            close_ta: "</ta>".into(),
            mode: DelimiterMode::SingleTokenIds { think_ids, ta_ids },
        }
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        let named = self.delimiters();
        for (kind, d) in named {
            if d.is_empty() {
                return Err(SchemeError::Empty(kind.name()));
            }
        }
        for (i, (_, a)) in named.iter().enumerate() {
            for (_, b) in named.iter().skip(i + 1) {
                if a.contains(b) || b.contains(a) {
                    return Err(SchemeError::Overlap((*a).to_string(), (*b).to_string()));
                }
            }
        }
        if let DelimiterMode::SingleTokenIds { think_ids, ta_ids } = &self.mode {
            let ids = [think_ids.0, think_ids.1, ta_ids.0, ta_ids.1];
            for i in 0..ids.len() {
                if ids[i + 1..].contains(&ids[i]) {
                    return Err(SchemeError::DuplicateIds);
                }
            }
        }
        Ok(())
    }

    fn delimiters(&self) -> [(Delim, &str); 4] {
        [
            (Delim::OpenThink, self.open_think.as_str()),
            (Delim::CloseThink, self.close_think.as_str()),
            (Delim::OpenTa, self.open_ta.as_str()),
            (Delim::CloseTa, self.close_ta.as_str()),
        ]
    }

    pub fn text_of(&self, delim: Delim) -> &str {
        match delim {
            Delim::OpenThink => &self.open_think,
            Delim::CloseThink => &self.close_think,
            Delim::OpenTa => &self.open_ta,
            Delim::CloseTa => &self.close_ta,
        }
    }

    /// Which delimiter, if any, a token id stands for.
    pub fn delim_for_id(&self, id: u32) -> Option<Delim> {
        match &self.mode {
            DelimiterMode::TextTags => None,
            DelimiterMode::SingleTokenIds { think_ids, ta_ids } => {
                if id == think_ids.0 {
                    Some(Delim::OpenThink)
                } else if id == think_ids.1 {
                    Some(Delim::CloseThink)
                } else if id == ta_ids.0 {
                    Some(Delim::OpenTa)
                } else if id == ta_ids.1 {
                    Some(Delim::CloseTa)
                } else {
                    None
                }
            }
        }
    }

    /// The delimiter starting at `at`, if any. At most one can match since
    /// no delimiter is a substring of another.
    fn match_at(&self, raw: &[u8], at: usize) -> Option<Delim> {
        let rest = &raw[at..];
        self.delimiters().into_iter().find(|(_, d)| rest.starts_with(d.as_bytes())).map(|(kind, _)| kind)
    }

    fn contains_delimiter(&self, text: &str) -> bool {
        self.delimiters().iter().any(|(_, d)| text.contains(d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delim {
    OpenThink,
    CloseThink,
    OpenTa,
    CloseTa,
}

impl Delim {
    fn name(self) -> &'static str {
        match self {
            Delim::OpenThink => "open_think",
            Delim::CloseThink => "close_think",
            Delim::OpenTa => "open_ta",
            Delim::CloseTa => "close_ta",
        }
    }
}

/// Kind of thinking block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Think,
    Ta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "text", rename_all = "snake_case")]
pub enum Segment {
    Code(String),
    Think(String),
}

impl Segment {
    pub fn text(&self) -> &str {
        match self {
            Segment::Code(t) | Segment::Think(t) => t,
        }
    }

    pub fn is_code(&self) -> bool {
        matches!(self, Segment::Code(_))
    }
}

/// Decomposition of a generation into upfront thinking, code segments and
/// inline thinking blocks.
///
/// `segments` always starts and ends with a code segment and alternates in
/// between; code segments may be empty. `preamble` holds whitespace that
/// precedes the upfront block so that serialization is byte-exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedSequence {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub preamble: String,
    pub upfront: Option<String>,
    pub segments: Vec<Segment>,
    /// Byte range in the source of the upfront block, delimiters included.
    pub upfront_span: Option<Range<usize>>,
    /// Byte range of each segment, parallel to `segments`. Think ranges
    /// include their delimiters.
    pub segment_spans: Vec<Range<usize>>,
}

impl MixedSequence {
    /// Sequence with no thinking at all.
    pub fn code_only(code: impl Into<String>) -> Self {
        let code = code.into();
        let len = code.len();
        Self {
            preamble: String::new(),
            upfront: None,
            segments: vec![Segment::Code(code)],
            upfront_span: None,
            segment_spans: std::iter::once(0..len).collect(),
        }
    }

    /// Builds a sequence from logical parts, computing spans as if serialized
    /// with `scheme`.
    pub fn from_parts(upfront: Option<String>, segments: Vec<Segment>, scheme: &DelimiterScheme) -> Self {
        let mut seq =
            Self { preamble: String::new(), upfront, segments, upfront_span: None, segment_spans: Vec::new() };
        seq.recompute_spans(scheme);
        seq
    }

    fn recompute_spans(&mut self, scheme: &DelimiterScheme) {
        let mut pos = self.preamble.len();
        self.upfront_span = self.upfront.as_ref().map(|u| {
            let start = pos;
            pos += scheme.open_think.len() + u.len() + scheme.close_think.len();
            start..pos
        });
        self.segment_spans = self
            .segments
            .iter()
            .map(|s| {
                let start = pos;
                pos += match s {
                    Segment::Code(t) => t.len(),
                    Segment::Think(t) => scheme.open_ta.len() + t.len() + scheme.close_ta.len(),
                };
                start..pos
            })
            .collect();
    }

    /// Number of inline thinking blocks (M).
    pub fn ta_count(&self) -> usize {
        self.segments.iter().filter(|s| !s.is_code()).count()
    }

    pub fn think_blocks(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Think(t) => Some(t.as_str()),
            Segment::Code(_) => None,
        })
    }

    pub fn code_segments(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Code(t) => Some(t.as_str()),
            Segment::Think(_) => None,
        })
    }

    /// Offsets in the extracted code at which each inline block was removed.
    pub fn ta_onsets(&self) -> Vec<usize> {
        let mut offset = 0;
        let mut onsets = Vec::with_capacity(self.ta_count());
        for seg in &self.segments {
            match seg {
                Segment::Code(t) => offset += t.len(),
                Segment::Think(_) => onsets.push(offset),
            }
        }
        onsets
    }

    /// Every source span in order: preamble, upfront block, then segments.
    pub fn span_map(&self) -> Vec<Range<usize>> {
        let mut spans = Vec::with_capacity(self.segment_spans.len() + 2);
        if !self.preamble.is_empty() {
            spans.push(0..self.preamble.len());
        }
        spans.extend(self.upfront_span.clone());
        spans.extend(self.segment_spans.iter().cloned());
        spans
    }

    /// Structural well-formedness: alternation starting and ending with code.
    pub fn is_well_formed(&self) -> bool {
        !self.segments.is_empty()
            && self.segments.iter().enumerate().all(|(i, s)| s.is_code() == (i % 2 == 0))
            && self.segments.len() % 2 == 1
            && self.preamble.bytes().all(|b| b.is_ascii_whitespace())
            && (self.upfront.is_some() || self.preamble.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unmatched {delim:?} at byte {offset}")]
    UnmatchedTag { delim: Delim, offset: usize },
    #[error("{inner:?} block opened inside {outer:?} block at byte {offset}")]
    NestedBlock { outer: BlockKind, inner: BlockKind, offset: usize },
    #[error("think block after code at byte {offset}")]
    ThinkAfterCode { offset: usize },
    #[error("invalid scheme: {0}")]
    Scheme(#[from] SchemeError),
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::UnmatchedTag { offset, .. }
            | ParseError::NestedBlock { offset, .. }
            | ParseError::ThinkAfterCode { offset } => *offset,
            ParseError::Scheme(_) => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SerializeError {
    #[error("segment text contains a delimiter of the scheme or the result does not reparse")]
    SchemeConflict,
    #[error("segments do not alternate code/think starting and ending with code")]
    Malformed,
    #[error("invalid scheme: {0}")]
    Scheme(#[from] SchemeError),
}

enum Event<'a> {
    Text(&'a str),
    Delim(Delim),
}

enum Open {
    None,
    Think { start: usize },
    Ta { start: usize },
}

/// Event-driven decomposition shared by the text and token-stream parsers.
struct Builder {
    pos: usize,
    open: Open,
    preamble: String,
    upfront: Option<String>,
    upfront_span: Option<Range<usize>>,
    segments: Vec<Segment>,
    spans: Vec<Range<usize>>,
    current: String,
    current_start: usize,
    block: String,
    /// True once any delimiter or non-whitespace code has been seen.
    started: bool,
}

impl Builder {
    fn new() -> Self {
        Self {
            pos: 0,
            open: Open::None,
            preamble: String::new(),
            upfront: None,
            upfront_span: None,
            segments: Vec::new(),
            spans: Vec::new(),
            current: String::new(),
            current_start: 0,
            block: String::new(),
            started: false,
        }
    }

    fn text(&mut self, text: &str) {
        match self.open {
            Open::None => {
                if !text.bytes().all(|b| b.is_ascii_whitespace()) {
                    self.started = true;
                }
                self.current.push_str(text);
            }
            Open::Think { .. } | Open::Ta { .. } => self.block.push_str(text),
        }
        self.pos += text.len();
    }

    fn flush_code(&mut self, end: usize) {
        self.segments.push(Segment::Code(std::mem::take(&mut self.current)));
        self.spans.push(self.current_start..end);
    }

    fn delim(&mut self, delim: Delim, len: usize) -> Result<(), ParseError> {
        let at = self.pos;
        let end = at + len;
        match (&self.open, delim) {
            (Open::None, Delim::OpenThink) => {
                if self.started {
                    return Err(ParseError::ThinkAfterCode { offset: at });
                }
                // Leading whitespace becomes the preamble.
                self.preamble = std::mem::take(&mut self.current);
                self.open = Open::Think { start: at };
                self.started = true;
            }
            (Open::None, Delim::OpenTa) => {
                self.flush_code(at);
                self.open = Open::Ta { start: at };
                self.started = true;
            }
            (Open::None, Delim::CloseThink | Delim::CloseTa) => {
                return Err(ParseError::UnmatchedTag { delim, offset: at });
            }
            (Open::Think { start }, Delim::CloseThink) => {
                self.upfront = Some(std::mem::take(&mut self.block));
                self.upfront_span = Some(*start..end);
                self.open = Open::None;
                self.current_start = end;
            }
            (Open::Ta { start }, Delim::CloseTa) => {
                let start = *start;
                self.segments.push(Segment::Think(std::mem::take(&mut self.block)));
                self.spans.push(start..end);
                self.open = Open::None;
                self.current_start = end;
            }
            (Open::Think { .. }, Delim::OpenThink | Delim::OpenTa) => {
                return Err(ParseError::NestedBlock {
                    outer: BlockKind::Think,
                    inner: if delim == Delim::OpenTa { BlockKind::Ta } else { BlockKind::Think },
                    offset: at,
                });
            }
            (Open::Ta { .. }, Delim::OpenThink | Delim::OpenTa) => {
                return Err(ParseError::NestedBlock {
                    outer: BlockKind::Ta,
                    inner: if delim == Delim::OpenTa { BlockKind::Ta } else { BlockKind::Think },
                    offset: at,
                });
            }
            (Open::Think { .. }, Delim::CloseTa) | (Open::Ta { .. }, Delim::CloseThink) => {
                return Err(ParseError::UnmatchedTag { delim, offset: at });
            }
        }
        self.pos = end;
        Ok(())
    }

    fn finish(mut self) -> Result<MixedSequence, ParseError> {
        match self.open {
            Open::None => {}
            Open::Think { start } => return Err(ParseError::UnmatchedTag { delim: Delim::OpenThink, offset: start }),
            Open::Ta { start } => return Err(ParseError::UnmatchedTag { delim: Delim::OpenTa, offset: start }),
        }
        let end = self.pos;
        self.flush_code(end);
        Ok(MixedSequence {
            preamble: self.preamble,
            upfront: self.upfront,
            segments: self.segments,
            upfront_span: self.upfront_span,
            segment_spans: self.spans,
        })
    }

    fn run<'a>(mut self, events: impl Iterator<Item = (Event<'a>, usize)>) -> Result<MixedSequence, ParseError> {
        for (event, len) in events {
            match event {
                Event::Text(t) => self.text(t),
                Event::Delim(d) => self.delim(d, len)?,
            }
        }
        self.finish()
    }
}

/// Splits raw text into text runs and delimiter events.
fn text_events<'a>(raw: &'a str, scheme: &'a DelimiterScheme) -> impl Iterator<Item = (Event<'a>, usize)> + 'a {
    let bytes = raw.as_bytes();
    let firsts: Vec<u8> = scheme.delimiters().iter().map(|(_, d)| d.as_bytes()[0]).collect();
    let mut pos = 0;
    std::iter::from_fn(move || {
        if pos >= bytes.len() {
            return None;
        }
        if let Some(d) = scheme.match_at(bytes, pos) {
            let len = scheme.text_of(d).len();
            pos += len;
            return Some((Event::Delim(d), len));
        }
        let start = pos;
        pos += 1;
        while pos < bytes.len() && !(firsts.contains(&bytes[pos]) && scheme.match_at(bytes, pos).is_some()) {
            pos += 1;
        }
        // Delimiters are valid UTF-8 and start on char boundaries, so every
        // cut point here is a char boundary.
        Some((Event::Text(&raw[start..pos]), pos - start))
    })
}

/// Parses raw generated text into its mixed-sequence decomposition.
pub fn parse_mixed_sequence(raw: &str, scheme: &DelimiterScheme) -> Result<MixedSequence, ParseError> {
    scheme.validate()?;
    Builder::new().run(text_events(raw, scheme))
}

/// A decoded token: its id and surface text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPiece {
    pub id: u32,
    pub text: String,
}

/// Parses a token stream where delimiters are recognized by id rather than by
/// text. Ordinary tokens are taken as text even if they spell a delimiter.
/// Byte offsets refer to the concatenation of the token texts.
pub fn parse_token_stream(tokens: &[TokenPiece], scheme: &DelimiterScheme) -> Result<MixedSequence, ParseError> {
    scheme.validate()?;
    let events = tokens.iter().map(|t| match scheme.delim_for_id(t.id) {
        Some(d) => (Event::Delim(d), t.text.len()),
        None => (Event::Text(t.text.as_str()), t.text.len()),
    });
    Builder::new().run(events)
}

/// Concatenates the code segments, dropping every thinking block.
pub fn extract_code(seq: &MixedSequence) -> String {
    let len = seq.code_segments().map(str::len).sum();
    let mut code = String::with_capacity(len);
    seq.code_segments().for_each(|c| code.push_str(c));
    code
}

/// Best-effort removal of thinking blocks from text that may not parse.
///
/// Complete blocks are removed together with anything nested inside them; an
/// open delimiter without its close removes the rest of the text; stray close
/// delimiters are dropped. On input that parses, this equals
/// [`extract_code`] of the parse.
pub fn strip_blocks_lenient(raw: &str, scheme: &DelimiterScheme) -> String {
    let bytes = raw.as_bytes();
    let mut out = String::with_capacity(raw.len());
    let mut pos = 0;
    let mut text_start = 0;
    while pos < bytes.len() {
        let Some(d) = scheme.match_at(bytes, pos) else {
            pos += 1;
            continue;
        };
        out.push_str(&raw[text_start..pos]);
        let after_open = pos + scheme.text_of(d).len();
        pos = match d {
            Delim::OpenThink | Delim::OpenTa => {
                let close = if d == Delim::OpenThink { &scheme.close_think } else { &scheme.close_ta };
                match raw[after_open..].find(close.as_str()) {
                    Some(i) => after_open + i + close.len(),
                    None => bytes.len(),
                }
            }
            Delim::CloseThink | Delim::CloseTa => after_open,
        };
        text_start = pos;
    }
    if text_start < bytes.len() {
        out.push_str(&raw[text_start..]);
    }
    out
}

/// Reconstructs the raw text of a sequence.
pub fn serialize(seq: &MixedSequence, scheme: &DelimiterScheme) -> Result<String, SerializeError> {
    scheme.validate()?;
    if !seq.is_well_formed() {
        return Err(SerializeError::Malformed);
    }
    let texts = seq.upfront.iter().map(String::as_str).chain(seq.segments.iter().map(Segment::text));
    for t in texts {
        if scheme.contains_delimiter(t) {
            return Err(SerializeError::SchemeConflict);
        }
    }
    let mut out = seq.preamble.clone();
    if let Some(up) = &seq.upfront {
        out.push_str(&scheme.open_think);
        out.push_str(up);
        out.push_str(&scheme.close_think);
    }
    for seg in &seq.segments {
        match seg {
            Segment::Code(t) => out.push_str(t),
            Segment::Think(t) => {
                out.push_str(&scheme.open_ta);
                out.push_str(t);
                out.push_str(&scheme.close_ta);
            }
        }
    }
    // A delimiter can still form across a segment boundary; the reparse
    // catches that case.
    match parse_mixed_sequence(&out, scheme) {
        Ok(back) if back.preamble == seq.preamble && back.upfront == seq.upfront && back.segments == seq.segments => {
            Ok(out)
        }
        _ => Err(SerializeError::SchemeConflict),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnmatchedTag,
    NestedBlock,
    ThinkAfterCode,
    TaInsideThink,
    EmptyOutput,
}

impl ViolationKind {
    /// Wire name, identical to the serde form.
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::UnmatchedTag => "unmatched_tag",
            ViolationKind::NestedBlock => "nested_block",
            ViolationKind::ThinkAfterCode => "think_after_code",
            ViolationKind::TaInsideThink => "ta_inside_think",
            ViolationKind::EmptyOutput => "empty_output",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureReport {
    pub has_initial_think: bool,
    pub ta_block_count: usize,
    pub violations: Vec<Violation>,
    /// Inline blocks whose onset sits at a line boundary of the code rather
    /// than inside a statement. Informational only.
    pub line_boundary_blocks: usize,
}

impl StructureReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the structural rules that do not require execution.
pub fn validate_structure(parsed: Result<&MixedSequence, &ParseError>) -> StructureReport {
    let seq = match parsed {
        Ok(seq) => seq,
        Err(err) => {
            let kind = match err {
                ParseError::UnmatchedTag { .. } | ParseError::Scheme(_) => ViolationKind::UnmatchedTag,
                ParseError::NestedBlock { outer: BlockKind::Think, inner: BlockKind::Ta, .. } => {
                    ViolationKind::TaInsideThink
                }
                ParseError::NestedBlock { .. } => ViolationKind::NestedBlock,
                ParseError::ThinkAfterCode { .. } => ViolationKind::ThinkAfterCode,
            };
            return StructureReport {
                has_initial_think: false,
                ta_block_count: 0,
                violations: vec![Violation { kind, byte_offset: err.offset() }],
                line_boundary_blocks: 0,
            };
        }
    };
    let mut violations = Vec::new();
    if seq.code_segments().all(|c| c.trim().is_empty()) {
        let offset = seq.segment_spans.first().map_or(0, |s| s.start);
        violations.push(Violation { kind: ViolationKind::EmptyOutput, byte_offset: offset });
    }
    let mut line_boundary_blocks = 0;
    let mut code_so_far = String::new();
    for seg in &seq.segments {
        match seg {
            Segment::Code(t) => code_so_far.push_str(t),
            Segment::Think(_) => {
                let line_tail = code_so_far.rsplit('\n').next().unwrap_or("");
                if line_tail.trim().is_empty() {
                    line_boundary_blocks += 1;
                }
            }
        }
    }
    StructureReport {
        has_initial_think: seq.upfront.as_deref().is_some_and(|u| !u.is_empty()),
        ta_block_count: seq.ta_count(),
        violations,
        line_boundary_blocks,
    }
}

/// Parses and validates in one step.
pub fn check_raw(raw: &str, scheme: &DelimiterScheme) -> (Result<MixedSequence, ParseError>, StructureReport) {
    let parsed = parse_mixed_sequence(raw, scheme);
    let report = validate_structure(parsed.as_ref());
    (parsed, report)
}

/// Fallback token length: whitespace-delimited word count. Approximate.
pub fn approx_token_len(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub avg_freq: f64,
    pub avg_len: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sequence {index} has {blocks} blocks but {lens} token lengths")]
    TokenLenMismatch { index: usize, blocks: usize, lens: usize },
}

/// Average inline-block frequency per sequence and average block length.
///
/// `token_lengths[i]`, when given, holds one token count per inline block of
/// `corpus[i]`; otherwise lengths fall back to [`approx_token_len`].
pub fn block_stats(corpus: &[MixedSequence], token_lengths: Option<&[Vec<usize>]>) -> Result<BlockStats, StatsError> {
    if corpus.is_empty() {
        return Err(StatsError::EmptyCorpus);
    }
    let mut blocks = 0usize;
    let mut tokens = 0usize;
    for (i, seq) in corpus.iter().enumerate() {
        let m = seq.ta_count();
        blocks += m;
        match token_lengths.and_then(|t| t.get(i)) {
            Some(lens) => {
                if lens.len() != m {
                    return Err(StatsError::TokenLenMismatch { index: i, blocks: m, lens: lens.len() });
                }
                tokens += lens.iter().sum::<usize>();
            }
            None => tokens += seq.think_blocks().map(approx_token_len).sum::<usize>(),
        }
    }
    Ok(BlockStats {
        avg_freq: blocks as f64 / corpus.len() as f64,
        avg_len: if blocks == 0 { 0.0 } else { tokens as f64 / blocks as f64 },
    })
}

/// One line of a trace corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub raw: String,
    #[serde(default)]
    pub scheme: Option<SchemeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_lens: Option<Vec<usize>>,
}

/// Wire form of a delimiter scheme: `{"mode": "text"|"ids", ...}` with
/// optional delimiter overrides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SchemeSpec {
    Text {
        #[serde(flatten)]
        delims: DelimOverrides,
    },
    Ids {
        think_ids: (u32, u32),
        ta_ids: (u32, u32),
        #[serde(flatten)]
        delims: DelimOverrides,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelimOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub open_think: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub close_think: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub open_ta: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub close_ta: Option<String>,
}

impl SchemeSpec {
    pub fn to_scheme(&self) -> DelimiterScheme {
        let (mut scheme, delims) = match self {
            SchemeSpec::Text { delims } => (DelimiterScheme::text_tags(), delims),
            SchemeSpec::Ids { think_ids, ta_ids, delims } => {
                (DelimiterScheme::single_token(*think_ids, *ta_ids), delims)
            }
        };
        if let Some(d) = &delims.open_think {
            scheme.open_think = d.clone();
        }
        if let Some(d) = &delims.close_think {
            scheme.close_think = d.clone();
        }
        if let Some(d) = &delims.open_ta {
            scheme.open_ta = d.clone();
        }
        if let Some(d) = &delims.close_ta {
            scheme.close_ta = d.clone();
        }
        scheme
    }
}
