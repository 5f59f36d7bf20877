//! Recovers a candidate function from a free-form model response.
//!
//! Rule order:
//! 1. the last fenced block that defines the entry point;
//! 2. otherwise the last fenced block of any kind;
//! 3. otherwise the run of code-like lines around the last bare `def` of the
//!    entry point (its body, preceding imports/decorators/helpers);
//! 4. otherwise nothing.
//!
//! The returned code is always `response[span]`: prose and fence markers are
//! never part of it. Leading and trailing blank lines are trimmed from spans,
//! except that a bare definition reaching the end of the response is kept
//! through its final byte.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractionStatus {
    Found,
    NotFound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractionStrategy {
    FencedBlock,
    BareDefScan,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionResult {
    pub status: ExtractionStatus,
    pub code: String,
    pub source_span: (usize, usize),
    pub strategy: Option<ExtractionStrategy>,
}

impl ExtractionResult {
    fn not_found() -> Self {
        ExtractionResult { status: ExtractionStatus::NotFound, code: String::new(), source_span: (0, 0), strategy: None }
    }

    fn found(response: &str, span: (usize, usize), strategy: ExtractionStrategy) -> Self {
        ExtractionResult {
            status: ExtractionStatus::Found,
            code: response[span.0..span.1].to_string(),
            source_span: span,
            strategy: Some(strategy),
        }
    }

    pub fn is_found(&self) -> bool {
        self.status == ExtractionStatus::Found
    }
}

/// A line of the response with its byte range (terminator included).
#[derive(Debug, Clone, Copy)]
struct Line<'a> {
    start: usize,
    end: usize,
    text: &'a str,
}

impl Line<'_> {
    /// Content without the line terminator.
    fn content(&self) -> &str {
        self.text.trim_end_matches(['\n', '\r'])
    }

    fn is_blank(&self) -> bool {
        self.content().trim().is_empty()
    }
}

fn lines(text: &str) -> Vec<Line<'_>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for piece in text.split_inclusive('\n') {
        out.push(Line { start: offset, end: offset + piece.len(), text: piece });
        offset += piece.len();
    }
    out
}

/// Byte span covering `lines[from..to]` without leading/trailing blank lines
/// and without the last line's terminator.
fn trimmed_span(lines: &[Line<'_>], from: usize, to: usize) -> Option<(usize, usize)> {
    let slice = &lines[from..to];
    let first = slice.iter().position(|l| !l.is_blank())?;
    let last = slice.iter().rposition(|l| !l.is_blank())?;
    let last_line = slice[last];
    Some((slice[first].start, last_line.start + last_line.content().len()))
}

#[derive(Debug, Clone, Copy)]
struct FencedBlock {
    span: Option<(usize, usize)>,
}

fn fence_blocks(lines: &[Line<'_>]) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut open: Option<usize> = None;
    for (i, line) in lines.iter().enumerate() {
        let t = line.content().trim();
        match open {
            None if t.starts_with("```") => open = Some(i + 1),
            Some(body) if t.len() >= 3 && t.chars().all(|c| c == '`') => {
                blocks.push(FencedBlock { span: trimmed_span(lines, body, i) });
                open = None;
            }
            _ => {}
        }
    }
    // an unterminated fence (truncated response) runs to the end
    if let Some(body) = open {
        blocks.push(FencedBlock { span: trimmed_span(lines, body, lines.len()) });
    }
    blocks
}

fn def_regex(entry_point: &str) -> Regex {
    Regex::new(&format!(r"(?m)^[ \t]*(?:async[ \t]+)?def[ \t]+{}[ \t]*\(", regex::escape(entry_point)))
        .expect("escaped identifier forms a valid pattern")
}

/// True iff `code` contains a (possibly nested or decorated) `def` of `entry_point`.
pub fn defines_entry_point(code: &str, entry_point: &str) -> bool {
    def_regex(entry_point).is_match(code)
}

fn code_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(concat!(
            r"^(?:(?:async[ \t]+)?def[ \t]|class[ \t]|import[ \t]|from[ \t]+[\w.]+[ \t]+import[ \t]|@|#|",
            r"(?:if|elif|while|for|with|try|except|finally|else|return|raise|assert|pass|break|continue|global|nonlocal|del|yield)\b|",
            r"[A-Za-z_][\w.]*(?:\[[^\]]*\])*[ \t]*(?:[-+*/%&|^@]|//|\*\*|<<|>>)?=[^=]|",
            r"[A-Za-z_][\w.]*\(|",
            r"[A-Za-z_]\w*(?:[ \t]*,[ \t]*[A-Za-z_]\w*)+[ \t]*=[^=]|",
            r"[\)\]\}])"
        ))
        .expect("static pattern")
    })
}

/// Whether a response line plausibly belongs to a Python code region.
fn is_code_line(line: &Line<'_>) -> bool {
    let c = line.content();
    c.trim().is_empty() || c.starts_with([' ', '\t']) || code_line_regex().is_match(c)
}

fn bare_scan(lines: &[Line<'_>], entry_point: &str) -> Option<(usize, usize)> {
    let def = def_regex(entry_point);
    let anchor = lines.iter().rposition(|l| def.is_match(l.content()))?;
    let mut from = anchor;
    while from > 0 && is_code_line(&lines[from - 1]) {
        from -= 1;
    }
    let mut to = anchor + 1;
    while to < lines.len() && is_code_line(&lines[to]) {
        to += 1;
    }
    let (start, end) = trimmed_span(lines, from, to)?;
    // code running to the end of the response is kept verbatim
    let end = if to == lines.len() { lines[to - 1].end } else { end };
    Some((start, end))
}

pub fn extract_code(response: &str, entry_point: &str) -> ExtractionResult {
    let lines = lines(response);
    let blocks = fence_blocks(&lines);
    let spans: Vec<(usize, usize)> = blocks.iter().filter_map(|b| b.span).collect();

    if let Some(span) = spans.iter().rev().find(|s| defines_entry_point(&response[s.0..s.1], entry_point)) {
        return ExtractionResult::found(response, *span, ExtractionStrategy::FencedBlock);
    }
    if let Some(span) = spans.last() {
        return ExtractionResult::found(response, *span, ExtractionStrategy::FencedBlock);
    }
    if !blocks.is_empty() {
        // only empty fences; bare scanning would pick up code outside them
        return ExtractionResult::not_found();
    }
    match bare_scan(&lines, entry_point) {
        Some(span) => ExtractionResult::found(response, span, ExtractionStrategy::BareDefScan),
        None => ExtractionResult::not_found(),
    }
}
