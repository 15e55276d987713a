//! Rule-based repair of operand literals in generated assembly lines.
//!
//! Generated code is often right in structure but wrong in a literal operand
//! because the literal was out of vocabulary. The intent text usually spells
//! the literal out, so it is taken as ground truth:
//!
//! * **L1**: when the line and the intent carry the same number of literals,
//!   literals that differ are replaced position by position.
//! * **U1**: when exactly one operand is the unknown token and exactly one
//!   intent literal is unaccounted for, that literal fills the slot.
//!
//! Nothing else is touched: labels, mnemonics, registers, memory operands and
//! the operand count always survive. Lines joined with the corpus separator
//! are treated as one sequence of literal slots.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{special, LINE_SEPARATOR};
use crate::error::{Error, Result};

const REGISTERS: &[&str] = &[
    "eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp", "ax", "bx", "cx", "dx", "si", "di", "bp", "sp", "al", "ah",
    "bl", "bh", "cl", "ch", "dl", "dh", "cs", "ds", "es", "fs", "gs", "ss",
];

const SIZE_WORDS: &[&str] = &["byte", "word", "dword", "qword", "short", "near", "far", "ptr"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperandClass {
    Register,
    LiteralHex,
    LiteralDec,
    Memory,
    Symbol,
}

impl OperandClass {
    pub fn is_literal(self) -> bool {
        matches!(self, OperandClass::LiteralHex | OperandClass::LiteralDec)
    }
}

fn is_hex_literal(t: &str) -> bool {
    let t = t.strip_prefix('-').unwrap_or(t);
    t.strip_prefix("0x")
        .or_else(|| t.strip_prefix("0X"))
        .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_hexdigit()))
}

fn is_dec_literal(t: &str) -> bool {
    let t = t.strip_prefix('-').unwrap_or(t);
    !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit())
}

pub fn classify_operand(token: &str) -> OperandClass {
    let t = token.trim();
    if REGISTERS.iter().any(|r| r.eq_ignore_ascii_case(t)) {
        OperandClass::Register
    } else if is_hex_literal(t) {
        OperandClass::LiteralHex
    } else if is_dec_literal(t) {
        OperandClass::LiteralDec
    } else if t.contains('[') && t.ends_with(']') {
        OperandClass::Memory
    } else {
        OperandClass::Symbol
    }
}

/// Splits a size qualifier such as `byte` off an operand, returning
/// `(qualifier prefix including trailing space, core)`.
fn split_qualifier(operand: &str) -> (&str, &str) {
    let mut rest = operand;
    let mut cut = 0;
    loop {
        let trimmed = rest.trim_start();
        let word_end = trimmed.find(char::is_whitespace).unwrap_or(trimmed.len());
        let word = &trimmed[..word_end];
        if word_end < trimmed.len() && SIZE_WORDS.iter().any(|s| s.eq_ignore_ascii_case(word)) {
            let consumed = operand.len() - trimmed.len() + word_end;
            cut = consumed;
            rest = &operand[consumed..];
        } else {
            break;
        }
    }
    let core = operand[cut..].trim_start();
    (&operand[..operand.len() - core.len()], core)
}

/// `label: mnemonic operand, operand ; options`
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsmLine {
    pub label: Option<String>,
    /// Empty only for a label-only line.
    pub mnemonic: String,
    pub operands: Vec<String>,
    pub options: Option<String>,
    pub raw: String,
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || matches!(c, '_' | '.' | '$' | '@'))
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$' | '@'))
}

/// Splits on commas that are outside brackets and quotes.
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let (mut depth, mut quote) = (0i32, None::<char>);
    let mut cur = String::new();
    for c in s.chars() {
        match (quote, c) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), _) => {}
            (None, '\'' | '"' | '`') => quote = Some(c),
            (None, '[') => depth += 1,
            (None, ']') => depth -= 1,
            (None, ',') if depth <= 0 => {
                out.push(std::mem::take(&mut cur).trim().to_owned());
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    out.push(cur.trim().to_owned());
    out
}

pub fn parse_asm_line(text: &str) -> Result<AsmLine> {
    let fail = |m: &str| Err(Error::Parse { raw: text.to_owned(), message: m.to_owned() });
    let raw = text.to_owned();
    let (body, options) = match text.split_once(';') {
        Some((b, o)) => (b, Some(o.trim().to_owned()).filter(|o| !o.is_empty())),
        None => (text, None),
    };
    let mut body = body.trim();
    if body.is_empty() {
        return fail("empty instruction");
    }
    let mut label = None;
    if let Some((head, rest)) = body.split_once(':') {
        let head = head.trim();
        let first_word = !head.contains(char::is_whitespace);
        if first_word && !head.contains('[') {
            if !is_identifier(head) {
                return fail("colon without a valid label");
            }
            label = Some(head.to_owned());
            body = rest.trim();
        }
    }
    if body.is_empty() {
        return match label {
            Some(_) => Ok(AsmLine { label, mnemonic: String::new(), operands: Vec::new(), options, raw }),
            None => fail("empty instruction"),
        };
    }
    let (mnemonic, rest) = match body.find(char::is_whitespace) {
        Some(i) => (&body[..i], body[i..].trim()),
        None => (body, ""),
    };
    if mnemonic.contains([',', ':', '[', ']']) {
        return fail("malformed mnemonic");
    }
    let operands = if rest.is_empty() { Vec::new() } else { split_operands(rest) };
    if operands.iter().any(String::is_empty) {
        return fail("empty operand");
    }
    Ok(AsmLine { label, mnemonic: mnemonic.to_owned(), operands, options, raw })
}

impl AsmLine {
    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(l) = &self.label {
            s.push_str(l);
            s.push(':');
        }
        if !self.mnemonic.is_empty() {
            if !s.is_empty() {
                s.push(' ');
            }
            s.push_str(&self.mnemonic);
        }
        if !self.operands.is_empty() {
            s.push(' ');
            s.push_str(&self.operands.join(", "));
        }
        if let Some(o) = &self.options {
            s.push_str(" ; ");
            s.push_str(o);
        }
        s
    }
}

impl fmt::Display for AsmLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Hex and decimal literals of an intent, in order of appearance.
pub fn extract_literals(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !(c.is_ascii_alphanumeric() || c == '-')).trim_end_matches('-'))
        .filter(|w| is_hex_literal(w) || is_dec_literal(w))
        .map(str::to_owned)
        .collect()
}

fn literal_eq(a: &str, b: &str) -> bool {
    a.eq_ignore_ascii_case(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepairRule {
    L1,
    U1,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    /// Instruction index within a joined line.
    pub instruction: usize,
    pub operand: usize,
    pub old: String,
    pub new: String,
    pub rule: RepairRule,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairReport {
    pub changed: bool,
    pub parse_failed: bool,
    pub substitutions: Vec<Substitution>,
    /// Why a rule declined to act, for the audit log.
    pub notes: Vec<String>,
    pub original: String,
    pub repaired: String,
}

/// One instruction of a (possibly joined) line with its surrounding spacing.
struct Piece {
    lead: String,
    line: AsmLine,
    trail: String,
}

#[derive(Clone)]
struct Slot {
    instruction: usize,
    operand: usize,
    core: String,
}

fn slots(pieces: &[Piece], pick: impl Fn(&str) -> bool) -> Vec<Slot> {
    let mut out = Vec::new();
    for (i, p) in pieces.iter().enumerate() {
        for (j, op) in p.line.operands.iter().enumerate() {
            let (_, core) = split_qualifier(op);
            if pick(core) {
                out.push(Slot { instruction: i, operand: j, core: core.to_owned() });
            }
        }
    }
    out
}

fn substitute(pieces: &mut [Piece], slot: &Slot, new: &str, rule: RepairRule) -> Substitution {
    let op = &mut pieces[slot.instruction].line.operands[slot.operand];
    let (qual, _) = split_qualifier(op);
    *op = format!("{qual}{new}");
    Substitution {
        instruction: slot.instruction,
        operand: slot.operand,
        old: slot.core.clone(),
        new: new.to_owned(),
        rule,
    }
}

fn apply_rules(pieces: &mut [Piece], intent: &[String], notes: &mut Vec<String>) -> Vec<Substitution> {
    let unk = special::NAMES[special::UNK];
    let mut subs = Vec::new();

    let unks = slots(pieces, |c| c == unk);
    if !unks.is_empty() {
        let mut unmatched: Vec<&String> = intent.iter().collect();
        for s in slots(pieces, |c| classify_operand(c).is_literal()) {
            if let Some(k) = unmatched.iter().position(|l| literal_eq(l, &s.core)) {
                unmatched.remove(k);
            }
        }
        if unks.len() == 1 && unmatched.len() == 1 {
            subs.push(substitute(pieces, &unks[0], unmatched[0], RepairRule::U1));
        } else {
            notes.push(format!(
                "U1 skipped: {} unknown operands, {} unmatched intent literals",
                unks.len(),
                unmatched.len()
            ));
        }
    }

    let lits = slots(pieces, |c| classify_operand(c).is_literal());
    if !lits.is_empty() && !intent.is_empty() {
        if lits.len() == intent.len() {
            for (s, want) in lits.iter().zip(intent) {
                if !literal_eq(&s.core, want) {
                    subs.push(substitute(pieces, s, want, RepairRule::L1));
                }
            }
        } else {
            notes.push(format!("L1 skipped: {} literals generated, {} in intent", lits.len(), intent.len()));
        }
    }
    subs
}

/// Repairs `generated` against the literals of `intent`. Unparseable input is
/// returned verbatim with `parse_failed` set.
pub fn repair(generated: &str, intent: &str) -> (String, RepairReport) {
    let unchanged = |parse_failed: bool, notes: Vec<String>| {
        (
            generated.to_owned(),
            RepairReport {
                changed: false,
                parse_failed,
                substitutions: Vec::new(),
                notes,
                original: generated.to_owned(),
                repaired: generated.to_owned(),
            },
        )
    };
    let mut pieces = Vec::new();
    for part in generated.split(LINE_SEPARATOR) {
        let trimmed = part.trim();
        let lead = part[..part.len() - part.trim_start().len()].to_owned();
        let trail = part[part.trim_end().len()..].to_owned();
        match parse_asm_line(trimmed) {
            Ok(line) => pieces.push(Piece { lead, line, trail }),
            Err(e) => return unchanged(true, vec![e.to_string()]),
        }
    }
    let intent_lits = extract_literals(intent);
    let mut notes = Vec::new();
    let mut subs = Vec::new();
    // Rules run to a fixpoint so a second repair pass finds nothing to do.
    for _ in 0..4 {
        let round = apply_rules(&mut pieces, &intent_lits, &mut notes);
        if round.is_empty() {
            break;
        }
        subs.extend(round);
    }
    if subs.is_empty() {
        return unchanged(false, notes);
    }
    let repaired: String = pieces
        .iter()
        .map(|p| format!("{}{}{}", p.lead, p.line.render(), p.trail))
        .collect::<Vec<_>>()
        .join(LINE_SEPARATOR);
    (
        repaired.clone(),
        RepairReport {
            changed: true,
            parse_failed: false,
            substitutions: subs,
            notes,
            original: generated.to_owned(),
            repaired,
        },
    )
}
