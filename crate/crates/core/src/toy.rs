//! A small synthetic intent/snippet corpus in the style of the real one,
//! used by demos and tests.

use std::fmt::Write as _;

use crate::corpus::ExamplePair;

const REGS: [&str; 6] = ["eax", "ebx", "ecx", "edx", "esi", "edi"];

/// `n` pairs with distinct intents, deterministic in `n`. Eight instruction
/// templates cycle over six registers, so the first 48 snippets are distinct
/// as well; every immediate appears in exactly one pair, which gives the
/// repair component something to fix.
pub fn pairs(n: usize) -> Vec<ExamplePair> {
    (0..n)
        .map(|i| {
            let reg = REGS[i % REGS.len()];
            let other = REGS[(i / REGS.len() + 1 + i) % REGS.len()];
            let imm = format!("0x{:x}", 0x10 + 7 * i);
            let (intent, snippet) = match (i / REGS.len()) % 8 {
                0 => (format!("push {reg} onto the stack"), format!("push {reg}")),
                1 => (format!("zero out the {reg} register"), format!("xor {reg}, {reg}")),
                2 => (format!("move {imm} into {reg}"), format!("mov {reg}, {imm}")),
                3 => (format!("copy {other} into {reg}"), format!("mov {reg}, {other}")),
                4 => (format!("subtract {imm} from {reg}"), format!("sub {reg}, {imm}")),
                5 => (format!("pop the top of the stack into {reg}"), format!("pop {reg}")),
                6 => (format!("increment the {reg} register"), format!("inc {reg}")),
                _ => (format!("decrement {reg} by one"), format!("dec {reg}")),
            };
            let intent = if i >= 48 { format!("{intent} pass {}", i / 48) } else { intent };
            ExamplePair { row: i, intent, snippet }
        })
        .collect()
}

/// The pairs as a CSV file with `intent,snippet` headers.
pub fn csv(pairs: &[ExamplePair]) -> String {
    let mut s = String::from("intent,snippet\n");
    for p in pairs {
        let _ = writeln!(s, "\"{}\",\"{}\"", p.intent.replace('"', "\"\""), p.snippet.replace('"', "\"\""));
    }
    s
}
