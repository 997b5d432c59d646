//! Parsing and validation of model-generated plans and call programs.
//!
//! Two textual artifacts come back from the language model:
//!
//! * a step plan delimited by `[start of plan]` / `[end of plan]`;
//! * a straight-line program of motion API calls, optionally wrapped in a
//!   single `def name():` header.
//!
//! Programs are parsed with a small hand-written scanner. Nothing is ever
//! evaluated; anything beyond one call per line is rejected.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kitchen::{ManipulatorId, BOWL, CUTTING_BOARD, PLATE_ALIAS};

pub const PLAN_START_TAG: &str = "[start of plan]";
pub const PLAN_END_TAG: &str = "[end of plan]";

/// The ten motion and perception functions a program may call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiFunction {
    OpenGripper,
    MoveToObject,
    Grasp,
    Cut,
    Pour,
    Put,
    Toss,
    CutAndPutIn,
    GetListOfObjects,
    GetBoundingBoxes,
}

impl ApiFunction {
    pub const ALL: [ApiFunction; 10] = [
        ApiFunction::OpenGripper,
        ApiFunction::MoveToObject,
        ApiFunction::Grasp,
        ApiFunction::Cut,
        ApiFunction::Pour,
        ApiFunction::Put,
        ApiFunction::Toss,
        ApiFunction::CutAndPutIn,
        ApiFunction::GetListOfObjects,
        ApiFunction::GetBoundingBoxes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ApiFunction::OpenGripper => "open_gripper",
            ApiFunction::MoveToObject => "move_to_object",
            ApiFunction::Grasp => "grasp",
            ApiFunction::Cut => "cut",
            ApiFunction::Pour => "pour",
            ApiFunction::Put => "put",
            ApiFunction::Toss => "toss",
            ApiFunction::CutAndPutIn => "cut_and_put_in",
            ApiFunction::GetListOfObjects => "get_list_of_objects",
            ApiFunction::GetBoundingBoxes => "get_bounding_boxes",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Python-style signature used in prompt documentation.
    pub fn signature(self) -> &'static str {
        match self {
            ApiFunction::OpenGripper => "open_gripper(manipulator_type)",
            ApiFunction::MoveToObject => "move_to_object(manipulator_type, object_name)",
            ApiFunction::Grasp => "grasp(manipulator_type, object_name)",
            ApiFunction::Cut => "cut(manipulator_type, object_name)",
            ApiFunction::Pour => "pour(manipulator_type, object_name)",
            ApiFunction::Put => "put(manipulator_type, object_name)",
            ApiFunction::Toss => "toss(manipulator_type, object_name)",
            ApiFunction::CutAndPutIn => "cut_and_put_in(manipulator_type, object_name)",
            ApiFunction::GetListOfObjects => "get_list_of_objects()",
            ApiFunction::GetBoundingBoxes => "get_bounding_boxes(object_name, ...)",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ApiFunction::OpenGripper => {
                "Completely opens the gripper, releasing any held object at the current target."
            }
            ApiFunction::MoveToObject => "Moves the manipulator to the position of the specified object.",
            ApiFunction::Grasp => "Grasps the object the gripper arm has moved to.",
            ApiFunction::Cut => "Cuts the object lying on the cutting board (tool arm).",
            ApiFunction::Pour => "Pours the contents of the held container into the bowl (gripper arm).",
            ApiFunction::Put => {
                "Places an object in the bowl: a held object, or a cut object swept from the board by the tool arm."
            }
            ApiFunction::Toss => "Mixes the contents of the bowl.",
            ApiFunction::CutAndPutIn => "Cuts the object on the cutting board and puts it in the bowl.",
            ApiFunction::GetListOfObjects => "Returns the names of all objects visible on the table.",
            ApiFunction::GetBoundingBoxes => "Returns bounding boxes for the listed objects.",
        }
    }
}

impl fmt::Display for ApiFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One whitelisted call with arguments checked against its signature.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "function", rename_all = "snake_case")]
pub enum ApiCall {
    OpenGripper { arm: ManipulatorId },
    MoveToObject { arm: ManipulatorId, object: String },
    Grasp { arm: ManipulatorId, object: String },
    Cut { arm: ManipulatorId, object: String },
    Pour { arm: ManipulatorId, object: String },
    Put { arm: ManipulatorId, object: String },
    Toss { arm: ManipulatorId, object: String },
    CutAndPutIn { arm: ManipulatorId, object: String },
    GetListOfObjects,
    GetBoundingBoxes { objects: Vec<String> },
}

impl ApiCall {
    /// Builds a two-argument call; `None` for functions with another signature.
    pub fn manipulation(function: ApiFunction, arm: ManipulatorId, object: impl Into<String>) -> Option<Self> {
        let object = object.into();
        Some(match function {
            ApiFunction::MoveToObject => ApiCall::MoveToObject { arm, object },
            ApiFunction::Grasp => ApiCall::Grasp { arm, object },
            ApiFunction::Cut => ApiCall::Cut { arm, object },
            ApiFunction::Pour => ApiCall::Pour { arm, object },
            ApiFunction::Put => ApiCall::Put { arm, object },
            ApiFunction::Toss => ApiCall::Toss { arm, object },
            ApiFunction::CutAndPutIn => ApiCall::CutAndPutIn { arm, object },
            _ => return None,
        })
    }

    pub fn function(&self) -> ApiFunction {
        match self {
            ApiCall::OpenGripper { .. } => ApiFunction::OpenGripper,
            ApiCall::MoveToObject { .. } => ApiFunction::MoveToObject,
            ApiCall::Grasp { .. } => ApiFunction::Grasp,
            ApiCall::Cut { .. } => ApiFunction::Cut,
            ApiCall::Pour { .. } => ApiFunction::Pour,
            ApiCall::Put { .. } => ApiFunction::Put,
            ApiCall::Toss { .. } => ApiFunction::Toss,
            ApiCall::CutAndPutIn { .. } => ApiFunction::CutAndPutIn,
            ApiCall::GetListOfObjects => ApiFunction::GetListOfObjects,
            ApiCall::GetBoundingBoxes { .. } => ApiFunction::GetBoundingBoxes,
        }
    }

    pub fn arm(&self) -> Option<ManipulatorId> {
        match self {
            ApiCall::OpenGripper { arm }
            | ApiCall::MoveToObject { arm, .. }
            | ApiCall::Grasp { arm, .. }
            | ApiCall::Cut { arm, .. }
            | ApiCall::Pour { arm, .. }
            | ApiCall::Put { arm, .. }
            | ApiCall::Toss { arm, .. }
            | ApiCall::CutAndPutIn { arm, .. } => Some(*arm),
            ApiCall::GetListOfObjects | ApiCall::GetBoundingBoxes { .. } => None,
        }
    }

    /// Every object token the call mentions.
    pub fn objects(&self) -> Vec<&str> {
        match self {
            ApiCall::MoveToObject { object, .. }
            | ApiCall::Grasp { object, .. }
            | ApiCall::Cut { object, .. }
            | ApiCall::Pour { object, .. }
            | ApiCall::Put { object, .. }
            | ApiCall::Toss { object, .. }
            | ApiCall::CutAndPutIn { object, .. } => vec![object.as_str()],
            ApiCall::GetBoundingBoxes { objects } => objects.iter().map(String::as_str).collect(),
            ApiCall::OpenGripper { .. } | ApiCall::GetListOfObjects => Vec::new(),
        }
    }

    /// Perception calls carry no motion and are skipped by the simulator.
    pub fn is_perception(&self) -> bool {
        matches!(self, ApiCall::GetListOfObjects | ApiCall::GetBoundingBoxes { .. })
    }
}

impl fmt::Display for ApiCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.function())?;
        let mut args: Vec<&str> = Vec::new();
        if let Some(arm) = self.arm() {
            args.push(arm.as_str());
        }
        args.extend(self.objects());
        for (i, a) in args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "'{a}'")?;
        }
        f.write_str(")")
    }
}

/// 1-based line and column.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpan {
    pub line: usize,
    pub column: usize,
}

impl SourceSpan {
    pub const fn new(line: usize, column: usize) -> Self {
        Self { line, column }
    }
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationCode {
    MissingTags,
    DuplicateTags,
    UnknownFunction,
    BadArity,
    BadArgumentType,
    UnsupportedConstruct,
    UnknownObjectName,
    SyntaxError,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{code:?} at {location}: {message}")]
pub struct ValidationError {
    pub code: ValidationCode,
    pub location: SourceSpan,
    pub message: String,
}

impl ValidationError {
    fn new(code: ValidationCode, location: SourceSpan, message: impl Into<String>) -> Self {
        Self { code, location, message: message.into() }
    }
}

/// Steps extracted from between the plan tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub steps: Vec<String>,
    pub raw: String,
}

impl PlanDocument {
    /// Re-renders the plan with its tags, one step per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from(PLAN_START_TAG);
        out.push('\n');
        for s in &self.steps {
            out.push_str(s);
            out.push('\n');
        }
        out.push_str(PLAN_END_TAG);
        out
    }
}

fn line_col(text: &str, byte_offset: usize) -> SourceSpan {
    let before = &text[..byte_offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    SourceSpan::new(line, column)
}

/// Extracts the step list from a tagged plan. Tags match case-insensitively.
pub fn parse_plan(text: &str) -> Result<PlanDocument, ValidationError> {
    let folded = text.to_ascii_lowercase();
    let starts: Vec<usize> = folded.match_indices(PLAN_START_TAG).map(|(i, _)| i).collect();
    let ends: Vec<usize> = folded.match_indices(PLAN_END_TAG).map(|(i, _)| i).collect();
    if starts.len() > 1 {
        return Err(ValidationError::new(
            ValidationCode::DuplicateTags,
            line_col(text, starts[1]),
            format!("`{PLAN_START_TAG}` appears {} times", starts.len()),
        ));
    }
    if ends.len() > 1 {
        return Err(ValidationError::new(
            ValidationCode::DuplicateTags,
            line_col(text, ends[1]),
            format!("`{PLAN_END_TAG}` appears {} times", ends.len()),
        ));
    }
    let (start, end) = match (starts.first(), ends.first()) {
        (Some(&s), Some(&e)) if s + PLAN_START_TAG.len() <= e => (s, e),
        (Some(&s), Some(_)) => {
            return Err(ValidationError::new(
                ValidationCode::MissingTags,
                line_col(text, s),
                "`[end of plan]` precedes `[start of plan]`",
            ))
        }
        _ => {
            return Err(ValidationError::new(
                ValidationCode::MissingTags,
                SourceSpan::new(1, 1),
                "plan must be enclosed in `[start of plan]` ... `[end of plan]`",
            ))
        }
    };
    let body = &text[start + PLAN_START_TAG.len()..end];
    let steps: Vec<String> = body.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect();
    if steps.is_empty() {
        return Err(ValidationError::new(ValidationCode::SyntaxError, line_col(text, start), "plan contains no steps"));
    }
    Ok(PlanDocument { steps, raw: text.to_string() })
}

/// A validated straight-line call sequence.
///
/// Equality compares calls only; spans are diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionProgram {
    calls: Vec<ApiCall>,
    spans: Vec<SourceSpan>,
}

impl PartialEq for ActionProgram {
    fn eq(&self, other: &Self) -> bool {
        self.calls == other.calls
    }
}

impl Eq for ActionProgram {}

impl ActionProgram {
    /// `None` for an empty call list.
    pub fn new(calls: Vec<ApiCall>) -> Option<Self> {
        if calls.is_empty() {
            return None;
        }
        let spans = (1..=calls.len()).map(|l| SourceSpan::new(l, 1)).collect();
        Some(Self { calls, spans })
    }

    pub fn calls(&self) -> &[ApiCall] {
        &self.calls
    }

    pub fn spans(&self) -> &[SourceSpan] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.calls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.calls.is_empty()
    }
}

const UNSUPPORTED_KEYWORDS: &[&str] = &[
    "for", "while", "if", "elif", "else", "try", "except", "finally", "with", "import", "from", "return", "yield",
    "lambda", "class", "def", "async", "await", "pass", "break", "continue", "global", "nonlocal", "del", "raise",
    "assert",
];

/// Lowercases and normalizes an object name to `[a-z][a-z0-9_]*`.
pub fn canonical_object(raw: &str) -> Option<String> {
    let mut out = String::with_capacity(raw.len());
    for c in raw.trim().chars() {
        match c {
            'a'..='z' | '0'..='9' | '_' => out.push(c),
            'A'..='Z' => out.push(c.to_ascii_lowercase()),
            ' ' | '-' => out.push('_'),
            _ => return None,
        }
    }
    out.starts_with(|c: char| c.is_ascii_lowercase()).then_some(out)
}

struct Scanner<'a> {
    chars: Vec<(usize, char)>,
    pos: usize,
    line: usize,
    text: &'a str,
}

impl<'a> Scanner<'a> {
    fn new(text: &'a str, line: usize) -> Self {
        Self { chars: text.char_indices().collect(), pos: 0, line, text }
    }

    fn span(&self) -> SourceSpan {
        SourceSpan::new(self.line, self.pos + 1)
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn byte(&self, pos: usize) -> usize {
        self.chars.get(pos).map_or(self.text.len(), |&(b, _)| b)
    }

    fn error(&self, message: impl Into<String>) -> ValidationError {
        ValidationError::new(ValidationCode::SyntaxError, self.span(), message)
    }

    fn identifier(&mut self) -> Option<&'a str> {
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => self.pos += 1,
            _ => return None,
        }
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        Some(&self.text[self.byte(start)..self.byte(self.pos)])
    }

    fn string(&mut self) -> Result<(&'a str, SourceSpan), ValidationError> {
        let span = self.span();
        let quote = match self.peek() {
            Some(q @ ('\'' | '"')) => q,
            _ => return Err(self.error("expected a quoted string argument")),
        };
        self.pos += 1;
        let start = self.pos;
        loop {
            match self.peek() {
                Some(c) if c == quote => break,
                Some('\\') => return Err(self.error("escape sequences are not supported")),
                Some(_) => self.pos += 1,
                None => return Err(ValidationError::new(ValidationCode::SyntaxError, span, "unterminated string")),
            }
        }
        let s = &self.text[self.byte(start)..self.byte(self.pos)];
        self.pos += 1;
        Ok((s, span))
    }
}

/// Finds the first unquoted occurrence of any of `targets`.
fn find_unquoted(line: &str, targets: &[char]) -> Option<usize> {
    let mut quote: Option<char> = None;
    for (i, c) in line.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '\'' || c == '"' => quote = Some(c),
            None if targets.contains(&c) => return Some(i),
            None => {}
        }
    }
    None
}

fn first_word(line: &str) -> &str {
    let end = line.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(line.len());
    &line[..end]
}

/// Parses a generated call sequence into an [`ActionProgram`].
///
/// Grammar, per non-blank line after stripping `#` comments:
///
/// ```text
/// header := 'def' ... ':'            (first line only, optional)
/// call   := ident '(' [ str { ',' str } ] ')'
/// str    := "'" chars "'" | '"' chars '"'
/// ```
///
/// Markdown code fences are ignored. The first problem found is returned.
pub fn parse_program(source: &str) -> Result<ActionProgram, ValidationError> {
    let mut calls = Vec::new();
    let mut spans = Vec::new();
    let mut seen_content = false;
    for (idx, raw_line) in source.split('\n').enumerate() {
        let line_no = idx + 1;
        let without_comment = match find_unquoted(raw_line, &['#']) {
            Some(i) => &raw_line[..i],
            None => raw_line,
        };
        let trimmed_start = without_comment.trim_start();
        let indent = without_comment.len() - trimmed_start.len();
        let line = trimmed_start.trim_end();
        if line.is_empty() || line.starts_with("```") {
            continue;
        }
        let column = without_comment[..indent].chars().count() + 1;
        let here = SourceSpan::new(line_no, column);
        let is_first = !seen_content;
        seen_content = true;

        let word = first_word(line);
        if word == "def" && line.ends_with(':') && is_first {
            continue;
        }
        if UNSUPPORTED_KEYWORDS.contains(&word) || line.ends_with(':') {
            let what = if word.is_empty() { line.chars().take(16).collect::<String>() } else { word.to_string() };
            return Err(ValidationError::new(
                ValidationCode::UnsupportedConstruct,
                here,
                format!("`{what}` is not allowed; programs are straight-line call sequences"),
            ));
        }
        if find_unquoted(line, &['=']).is_some() {
            return Err(ValidationError::new(
                ValidationCode::UnsupportedConstruct,
                here,
                "assignments are not allowed",
            ));
        }

        let mut sc = Scanner::new(line, line_no);
        let offset = column - 1;
        let shift = |mut s: SourceSpan| {
            s.column += offset;
            s
        };
        let name = sc.identifier().ok_or_else(|| {
            let mut e = sc.error("expected a function call");
            e.location = shift(e.location);
            e
        })?;
        let mut args: Vec<(&str, SourceSpan)> = Vec::new();
        let parsed: Result<(), ValidationError> = (|| {
            sc.skip_ws();
            if sc.peek() != Some('(') {
                return Err(sc.error(format!("expected `(` after `{name}`")));
            }
            sc.pos += 1;
            sc.skip_ws();
            if sc.peek() == Some(')') {
                sc.pos += 1;
            } else {
                loop {
                    sc.skip_ws();
                    args.push(sc.string()?);
                    sc.skip_ws();
                    match sc.peek() {
                        Some(',') => sc.pos += 1,
                        Some(')') => {
                            sc.pos += 1;
                            break;
                        }
                        _ => return Err(sc.error("expected `,` or `)`")),
                    }
                }
            }
            sc.skip_ws();
            if sc.peek().is_some() {
                return Err(sc.error("unexpected text after call"));
            }
            Ok(())
        })();
        parsed.map_err(|mut e| {
            e.location = shift(e.location);
            e
        })?;

        let function = ApiFunction::from_name(name).ok_or_else(|| {
            ValidationError::new(
                ValidationCode::UnknownFunction,
                here,
                format!("`{name}` is not an available API function"),
            )
        })?;
        let call = build_call(function, &args, here, shift)?;
        calls.push(call);
        spans.push(here);
    }
    if calls.is_empty() {
        return Err(ValidationError::new(
            ValidationCode::SyntaxError,
            SourceSpan::new(1, 1),
            "program contains no calls",
        ));
    }
    Ok(ActionProgram { calls, spans })
}

fn build_call(
    function: ApiFunction,
    args: &[(&str, SourceSpan)],
    here: SourceSpan,
    shift: impl Fn(SourceSpan) -> SourceSpan,
) -> Result<ApiCall, ValidationError> {
    let arity_error = |expected: &str| {
        ValidationError::new(
            ValidationCode::BadArity,
            here,
            format!("`{function}` takes {expected} argument(s), got {}", args.len()),
        )
    };
    let manipulator = |(raw, span): (&str, SourceSpan)| {
        ManipulatorId::from_literal(raw).ok_or_else(|| {
            ValidationError::new(
                ValidationCode::BadArgumentType,
                shift(span),
                format!("manipulator must be 'gripper' or 'tool', got '{raw}'"),
            )
        })
    };
    let object = |(raw, span): (&str, SourceSpan)| {
        canonical_object(raw).ok_or_else(|| {
            ValidationError::new(
                ValidationCode::BadArgumentType,
                shift(span),
                format!("'{raw}' is not a valid object name"),
            )
        })
    };
    match function {
        ApiFunction::GetListOfObjects => {
            if args.is_empty() {
                Ok(ApiCall::GetListOfObjects)
            } else {
                Err(arity_error("0"))
            }
        }
        ApiFunction::GetBoundingBoxes => {
            if args.is_empty() {
                return Err(arity_error("at least 1"));
            }
            let objects = args.iter().map(|&a| object(a)).collect::<Result<_, _>>()?;
            Ok(ApiCall::GetBoundingBoxes { objects })
        }
        ApiFunction::OpenGripper => match args {
            [a] => Ok(ApiCall::OpenGripper { arm: manipulator(*a)? }),
            _ => Err(arity_error("1")),
        },
        _ => match args {
            [a, o] => {
                let arm = manipulator(*a)?;
                let obj = object(*o)?;
                Ok(ApiCall::manipulation(function, arm, obj).expect("two-argument function"))
            }
            _ => Err(arity_error("2")),
        },
    }
}

/// Canonical text: one call per line, single quotes, no header.
pub fn serialize_program(p: &ActionProgram) -> String {
    p.calls.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
}

/// Static findings of [`validate_against_scene`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneReport {
    pub violations: Vec<ValidationError>,
}

impl SceneReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Flags object tokens that are neither known scene objects nor fixtures.
pub fn validate_against_scene(p: &ActionProgram, known_objects: &BTreeSet<String>) -> SceneReport {
    let mut violations = Vec::new();
    for (call, span) in p.calls.iter().zip(&p.spans) {
        for obj in call.objects() {
            let fixture = obj == CUTTING_BOARD || obj == BOWL || obj == PLATE_ALIAS;
            if !fixture && !known_objects.contains(obj) {
                violations.push(ValidationError::new(
                    ValidationCode::UnknownObjectName,
                    *span,
                    format!("`{}` refers to unknown object '{obj}'", call.function()),
                ));
            }
        }
    }
    SceneReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code_of(src: &str) -> ValidationCode {
        parse_program(src).unwrap_err().code
    }

    #[test]
    fn plan_single_step() {
        let plan = parse_plan("[start of plan]\n1. move gripper to pepper\n[end of plan]").unwrap();
        assert_eq!(plan.steps, vec!["1. move gripper to pepper"]);
    }

    #[test]
    fn plan_ignores_surrounding_chatter_and_blank_lines() {
        let text = "Sure! Here it is.\n[Start of Plan]\n\n 1. a \n\n2. b\n[END OF PLAN]\nEnjoy.";
        let plan = parse_plan(text).unwrap();
        assert_eq!(plan.steps, vec!["1. a", "2. b"]);
        assert_eq!(parse_plan(&plan.to_text()).unwrap().steps, plan.steps);
    }

    #[test]
    fn plan_tag_errors() {
        assert_eq!(parse_plan("1. do things").unwrap_err().code, ValidationCode::MissingTags);
        assert_eq!(parse_plan("[start of plan]\n1. x\n").unwrap_err().code, ValidationCode::MissingTags);
        let dup = "[start of plan]\n1. x\n[start of plan]\n[end of plan]";
        let err = parse_plan(dup).unwrap_err();
        assert_eq!(err.code, ValidationCode::DuplicateTags);
        assert_eq!(err.location.line, 3);
        assert_eq!(parse_plan("[end of plan] [start of plan]").unwrap_err().code, ValidationCode::MissingTags);
        assert_eq!(parse_plan("[start of plan]\n \n[end of plan]").unwrap_err().code, ValidationCode::SyntaxError);
    }

    #[test]
    fn single_call() {
        let p = parse_program("cut('tool', 'pepper')").unwrap();
        assert_eq!(p.calls(), &[ApiCall::Cut { arm: ManipulatorId::ToolArm, object: "pepper".into() }]);
    }

    #[test]
    fn header_comments_and_indentation() {
        let src = "```python\ndef make_salad():\n    # grab it\n    move_to_object(\"gripper\", \"Pepper\")  # go\n\n    grasp('gripper','pepper')\n```\n";
        let p = parse_program(src).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.spans()[0], SourceSpan::new(4, 5));
        assert_eq!(p.calls()[0], ApiCall::MoveToObject { arm: ManipulatorId::GripperArm, object: "pepper".into() });
    }

    #[test]
    fn unknown_function_reports_line() {
        let err = parse_program("fly('tool', 'pepper')").unwrap_err();
        assert_eq!(err.code, ValidationCode::UnknownFunction);
        assert_eq!(err.location, SourceSpan::new(1, 1));
    }

    #[test]
    fn control_flow_is_rejected() {
        assert_eq!(code_of("for x in items:\n    cut('tool', x)"), ValidationCode::UnsupportedConstruct);
        assert_eq!(code_of("cut('tool', 'a')\nwhile True:"), ValidationCode::UnsupportedConstruct);
        assert_eq!(code_of("import os"), ValidationCode::UnsupportedConstruct);
        assert_eq!(code_of("x = cut('tool', 'a')"), ValidationCode::UnsupportedConstruct);
        assert_eq!(code_of("cut('tool', 'a')\ndef other():"), ValidationCode::UnsupportedConstruct);
        assert_eq!(code_of("def a():\ndef b():"), ValidationCode::UnsupportedConstruct);
    }

    #[test]
    fn bad_manipulator_literal() {
        let err = parse_program("grasp('left', 'pepper')").unwrap_err();
        assert_eq!(err.code, ValidationCode::BadArgumentType);
        assert_eq!(err.location, SourceSpan::new(1, 7));
    }

    #[test]
    fn arity_checks() {
        assert_eq!(code_of("cut('tool')"), ValidationCode::BadArity);
        assert_eq!(code_of("open_gripper('gripper', 'x')"), ValidationCode::BadArity);
        assert_eq!(code_of("get_list_of_objects('x')"), ValidationCode::BadArity);
        assert_eq!(code_of("get_bounding_boxes()"), ValidationCode::BadArity);
        let p = parse_program("get_list_of_objects()\nget_bounding_boxes('a', 'b')").unwrap();
        assert!(p.calls().iter().all(ApiCall::is_perception));
    }

    #[test]
    fn syntax_errors() {
        for src in [
            "cut('tool', 'pepper'",
            "cut 'tool'",
            "cut('tool', pepper)",
            "cut('tool', 'pepper') extra",
            "cut('tool', 'pep)",
            "cut('tool',, 'x')",
            "robot.cut('tool', 'x')",
            "(",
            "",
            "# only a comment",
        ] {
            assert_eq!(code_of(src), ValidationCode::SyntaxError, "{src:?}");
        }
    }

    #[test]
    fn hash_inside_string_is_not_a_comment() {
        assert_eq!(code_of("cut('tool', 'a#b')"), ValidationCode::BadArgumentType);
    }

    #[test]
    fn serialize_canonical_form() {
        let p =
            ActionProgram::new(vec![ApiCall::Cut { arm: ManipulatorId::ToolArm, object: "pepper".into() }]).unwrap();
        assert_eq!(serialize_program(&p), "cut('tool', 'pepper')");
        assert!(ActionProgram::new(Vec::new()).is_none());
    }

    #[test]
    fn scene_validation() {
        let p = parse_program("move_to_object('gripper', 'pepper')\nput('gripper', 'bowl')").unwrap();
        let known: BTreeSet<String> = ["pepper".to_string()].into();
        assert!(validate_against_scene(&p, &known).is_clean());
        let p = parse_program("grasp('gripper', 'durian')").unwrap();
        let report = validate_against_scene(&p, &known);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].code, ValidationCode::UnknownObjectName);
        let p = parse_program("toss('tool', 'bowl')").unwrap();
        assert!(validate_against_scene(&p, &BTreeSet::new()).is_clean());
    }

    #[test]
    fn whitelist_names_round_trip() {
        for f in ApiFunction::ALL {
            assert_eq!(ApiFunction::from_name(f.name()), Some(f));
            assert!(f.signature().starts_with(f.name()));
        }
        assert_eq!(ApiFunction::from_name("exec"), None);
    }

    #[test]
    fn object_canonicalization() {
        assert_eq!(canonical_object(" Bell Pepper ").as_deref(), Some("bell_pepper"));
        assert_eq!(canonical_object("9lives"), None);
        assert_eq!(canonical_object(""), None);
        assert_eq!(canonical_object("a;b"), None);
    }
}
