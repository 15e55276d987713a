/// Token used by the corpus to join several instructions on one line.
pub const LINE_SEPARATOR: &str = "\\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Code,
    Nl,
}

pub fn tokenize(text: &str, kind: TokenKind) -> Vec<String> {
    match kind {
        TokenKind::Nl => text.split_whitespace().map(str::to_owned).collect(),
        TokenKind::Code => tokenize_code(text),
    }
}

/// Commas, colons and the `\n` instruction separator become their own
/// tokens; a bracketed memory operand stays whole even if it holds spaces.
fn tokenize_code(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut depth = 0usize;
    let mut chars = text.chars().peekable();
    let flush = |cur: &mut String, out: &mut Vec<String>| {
        if !cur.is_empty() {
            out.push(std::mem::take(cur));
        }
    };
    while let Some(c) = chars.next() {
        if depth > 0 {
            if !c.is_whitespace() {
                cur.push(c);
            }
            if c == ']' {
                depth -= 1;
            } else if c == '[' {
                depth += 1;
            }
            continue;
        }
        match c {
            '[' => {
                depth += 1;
                cur.push(c);
            }
            ',' | ':' => {
                flush(&mut cur, &mut out);
                out.push(c.to_string());
            }
            '\\' if chars.peek() == Some(&'n') => {
                chars.next();
                flush(&mut cur, &mut out);
                out.push(LINE_SEPARATOR.to_owned());
            }
            c if c.is_whitespace() => flush(&mut cur, &mut out),
            c => cur.push(c),
        }
    }
    flush(&mut cur, &mut out);
    out
}

/// Joins code tokens back into conventional assembly spelling.
pub fn detokenize_code(tokens: &[String]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let glue = matches!(t.as_str(), "," | ":");
        if i > 0 && !glue {
            s.push(' ');
        }
        s.push_str(t);
    }
    s
}

pub fn detokenize(tokens: &[String], kind: TokenKind) -> String {
    match kind {
        TokenKind::Code => detokenize_code(tokens),
        TokenKind::Nl => tokens.join(" "),
    }
}
