//! Response grammar: `<think>…</think><answer>…</answer>` structure, the
//! detection payload `[{'Position': [x1, y1, x2, y2], 'Confidence': c}, ...]`,
//! the `No Objects` sentinel, and classification labels.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Sentinel a detector returns when the queried category is absent.
pub const NO_OBJECTS: &str = "No Objects";

/// Upper bound of the normalized coordinate frame.
pub const COORD_MAX: i32 = 1000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrammarError {
    #[error("malformed answer: {0}")]
    MalformedAnswer(String),
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: need 0 <= x1 < x2 <= 1000 and 0 <= y1 < y2 <= 1000")]
    InvalidBox { x1: i64, y1: i64, x2: i64, y2: i64 },
    #[error("invalid confidence {0}: must lie in [0, 1]")]
    InvalidConfidence(f64),
    #[error("empty classification answer")]
    EmptyAnswer,
}

/// An axis-aligned box in the integer 0–1000 normalized frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[i32; 4]")]
pub struct BBox {
    x1: i32,
    y1: i32,
    x2: i32,
    y2: i32,
}

impl BBox {
    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Result<Self, GrammarError> {
        let max = i64::from(COORD_MAX);
        let ok = (0..=max).contains(&x1)
            && (0..=max).contains(&y1)
            && x1 < x2
            && y1 < y2
            && x2 <= max
            && y2 <= max;
        if !ok {
            return Err(GrammarError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self {
            x1: x1 as i32,
            y1: y1 as i32,
            x2: x2 as i32,
            y2: y2 as i32,
        })
    }

    pub fn x1(&self) -> i32 {
        self.x1
    }
    pub fn y1(&self) -> i32 {
        self.y1
    }
    pub fn x2(&self) -> i32 {
        self.x2
    }
    pub fn y2(&self) -> i32 {
        self.y2
    }

    pub fn coords(&self) -> [i32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> i64 {
        i64::from(self.x2 - self.x1)
    }

    pub fn height(&self) -> i64 {
        i64::from(self.y2 - self.y1)
    }

    /// Area in squared normalized units.
    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }
}

impl TryFrom<[i64; 4]> for BBox {
    type Error = GrammarError;

    fn try_from(c: [i64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [i32; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// A predicted box with its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

impl Prediction {
    pub fn new(bbox: BBox, confidence: f64) -> Result<Self, GrammarError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(GrammarError::InvalidConfidence(confidence));
        }
        Ok(Self { bbox, confidence })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectionAnswer {
    /// Non-empty list in emission order.
    Boxes(Vec<Prediction>),
    NoObjects,
}

impl DetectionAnswer {
    pub fn predictions(&self) -> &[Prediction] {
        match self {
            DetectionAnswer::Boxes(p) => p,
            DetectionAnswer::NoObjects => &[],
        }
    }
}

/// A normalized class label: trimmed, case-folded, inner whitespace collapsed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassificationAnswer(String);

impl ClassificationAnswer {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassificationAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Result of applying the tag grammar to raw model output.
///
/// `think` and `answer_raw` hold the verbatim block contents when
/// `format_ok` is true and are empty otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedResponse {
    pub think: String,
    pub answer_raw: String,
    pub format_ok: bool,
}

impl ParsedResponse {
    /// The answer payload, if the response was well-formed.
    pub fn answer(&self) -> Option<&str> {
        self.format_ok.then_some(self.answer_raw.as_str())
    }
}

/// Checks the tag structure: exactly one think block, then exactly one answer
/// block, and nothing but whitespace around them.
pub fn parse_response(raw: &str) -> ParsedResponse {
    try_parse_response(raw).unwrap_or_default()
}

fn try_parse_response(raw: &str) -> Option<ParsedResponse> {
    for tag in [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE] {
        if raw.matches(tag).count() != 1 {
            return None;
        }
    }
    let rest = raw.trim_start().strip_prefix(THINK_OPEN)?;
    let (think, rest) = rest.split_once(THINK_CLOSE)?;
    let rest = rest.trim_start().strip_prefix(ANSWER_OPEN)?;
    let (answer, rest) = rest.split_once(ANSWER_CLOSE)?;
    if !rest.trim().is_empty() {
        return None;
    }
    Some(ParsedResponse {
        think: think.to_string(),
        answer_raw: answer.to_string(),
        format_ok: true,
    })
}

/// Folds case, trims, and collapses whitespace runs to single spaces.
pub fn normalize_label(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_classification_answer(answer_raw: &str) -> Result<ClassificationAnswer, GrammarError> {
    let label = normalize_label(answer_raw);
    if label.is_empty() {
        return Err(GrammarError::EmptyAnswer);
    }
    Ok(ClassificationAnswer(label))
}

pub fn parse_detection_answer(answer_raw: &str) -> Result<DetectionAnswer, GrammarError> {
    let trimmed = answer_raw.trim();
    if trimmed.eq_ignore_ascii_case(NO_OBJECTS) {
        return Ok(DetectionAnswer::NoObjects);
    }
    let mut cursor = Cursor::new(trimmed);
    let preds = cursor.record_list()?;
    cursor.skip_ws();
    if !cursor.at_end() {
        return Err(cursor.malformed("trailing characters after list"));
    }
    if preds.is_empty() {
        return Err(GrammarError::MalformedAnswer("empty box list".into()));
    }
    Ok(DetectionAnswer::Boxes(preds))
}

/// Emits the single-quoted wire syntax with two-decimal confidences.
pub fn serialize_detection_answer(answer: &DetectionAnswer) -> String {
    match answer {
        DetectionAnswer::NoObjects => NO_OBJECTS.to_string(),
        DetectionAnswer::Boxes(preds) => {
            let records: Vec<String> = preds
                .iter()
                .map(|p| {
                    format!(
                        "{{'Position': {}, 'Confidence': {:.2}}}",
                        p.bbox, p.confidence
                    )
                })
                .collect();
            format!("[{}]", records.join(", "))
        }
    }
}

/// Wraps reasoning text and an answer payload in the tag template.
pub fn format_response(think: &str, answer: &str) -> String {
    format!("{THINK_OPEN}{think}{THINK_CLOSE}{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Key {
    Position,
    Confidence,
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn skip_ws(&mut self) {
        let rest = self.rest();
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn malformed(&self, what: &str) -> GrammarError {
        GrammarError::MalformedAnswer(format!("{what} at byte {}", self.pos))
    }

    fn expect(&mut self, c: char) -> Result<(), GrammarError> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(self.malformed(&format!("expected '{c}'")))
        }
    }

    /// Consumes `c` if it is the next non-whitespace character.
    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    /// Parses a comma-separated bracketed sequence; a trailing comma is allowed.
    fn sequence<T>(
        &mut self,
        open: char,
        close: char,
        mut item: impl FnMut(&mut Self) -> Result<T, GrammarError>,
    ) -> Result<Vec<T>, GrammarError> {
        self.expect(open)?;
        let mut out = Vec::new();
        if self.eat(close) {
            return Ok(out);
        }
        loop {
            out.push(item(self)?);
            if self.eat(close) {
                return Ok(out);
            }
            self.expect(',')?;
            if self.eat(close) {
                return Ok(out);
            }
        }
    }

    fn record_list(&mut self) -> Result<Vec<Prediction>, GrammarError> {
        self.sequence('[', ']', Self::record)
    }

    fn record(&mut self) -> Result<Prediction, GrammarError> {
        self.expect('{')?;
        let mut position: Option<[i64; 4]> = None;
        let mut confidence: Option<f64> = None;
        loop {
            let key = self.key()?;
            self.expect(':')?;
            match key {
                Key::Position if position.is_none() => position = Some(self.quad()?),
                Key::Confidence if confidence.is_none() => confidence = Some(self.number()?),
                _ => return Err(self.malformed("duplicate key")),
            }
            if self.eat('}') {
                break;
            }
            self.expect(',')?;
            if self.eat('}') {
                break;
            }
        }
        let (Some(p), Some(c)) = (position, confidence) else {
            return Err(self.malformed("record needs both 'Position' and 'Confidence'"));
        };
        let bbox = BBox::new(p[0], p[1], p[2], p[3])?;
        Prediction::new(bbox, c)
    }

    fn key(&mut self) -> Result<Key, GrammarError> {
        self.skip_ws();
        let quote = match self.peek() {
            Some(q @ ('\'' | '"')) => q,
            _ => return Err(self.malformed("expected quoted key")),
        };
        self.pos += 1;
        let Some(len) = self.rest().find(quote) else {
            return Err(self.malformed("unterminated key"));
        };
        let name = &self.rest()[..len];
        self.pos += len + 1;
        match name {
            "Position" => Ok(Key::Position),
            "Confidence" => Ok(Key::Confidence),
            other => Err(self.malformed(&format!("unknown key '{other}'"))),
        }
    }

    fn quad(&mut self) -> Result<[i64; 4], GrammarError> {
        let values = self.sequence('[', ']', Self::integer)?;
        values
            .try_into()
            .map_err(|_| self.malformed("'Position' needs exactly four integers"))
    }

    fn numeric_token(&mut self) -> Result<&'a str, GrammarError> {
        self.skip_ws();
        let rest = self.rest();
        let len = rest
            .find(|c: char| !(c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e' | 'E')))
            .unwrap_or(rest.len());
        if len == 0 {
            return Err(self.malformed("expected number"));
        }
        self.pos += len;
        Ok(&rest[..len])
    }

    fn integer(&mut self) -> Result<i64, GrammarError> {
        let start = self.pos;
        let tok = self.numeric_token()?;
        tok.parse::<i64>().map_err(|_| {
            GrammarError::MalformedAnswer(format!("expected integer at byte {start}, got '{tok}'"))
        })
    }

    fn number(&mut self) -> Result<f64, GrammarError> {
        let start = self.pos;
        let tok = self.numeric_token()?;
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(GrammarError::MalformedAnswer(format!(
                "expected number at byte {start}, got '{tok}'"
            ))),
        }
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_prediction() -> impl Strategy<Value = Prediction> {
        (0i64..1000, 0i64..1000, 1i64..=1000, 1i64..=1000, 0u32..=100).prop_map(
            |(x, y, w, h, c)| {
                let x2 = (x + w).min(1000).max(x + 1);
                let y2 = (y + h).min(1000).max(y + 1);
                Prediction::new(BBox::new(x, y, x2, y2).unwrap(), f64::from(c) / 100.0).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(preds in prop::collection::vec(arb_prediction(), 1..6)) {
            let a = DetectionAnswer::Boxes(preds);
            let text = serialize_detection_answer(&a);
            prop_assert_eq!(parse_detection_answer(&text).unwrap(), a);
        }

        #[test]
        fn parse_response_is_pure(s in ".{0,64}") {
            prop_assert_eq!(parse_response(&s), parse_response(&s));
        }

        #[test]
        fn answer_tag_count_other_than_one_is_invalid(
            think in "[a-z ]{0,8}", ans in "[a-z ]{0,8}", extra in 0usize..3,
        ) {
            let mut text = format!("<think>{think}</think>");
            let n = if extra == 1 { 0 } else { extra };
            for _ in 0..n {
                text.push_str(&format!("<answer>{ans}</answer>"));
            }
            if n == 0 {
                text.push_str(&ans);
            }
            prop_assert!(!parse_response(&text).format_ok);
        }
    }
}
