//! Plain-text attention dump.
//!
//! ```text
//! # dualsc attention dump v1
//! @ encoder_self layer=1 head=1 rows=3 cols=3
//! .  ShellCodeGen:  push  eax
//! ShellCodeGen:  0.500000  0.250000  0.250000
//! push  0.100000  0.800000  0.100000
//! eax  0.333333  0.333333  0.333334
//! ```
//!
//! Each block starts with an `@` header naming the site, the 1-based layer
//! and head, and the matrix size. The next line holds a placeholder `.`
//! followed by the key tokens, then one line per query token with its
//! weights. Fields are tab separated (shown as spaces above); blank lines
//! are ignored.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::AttentionSite;

pub const DUMP_HEADER: &str = "# dualsc attention dump v1";

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub site: AttentionSite,
    /// 1-based.
    pub layer: usize,
    /// 1-based.
    pub head: usize,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `rows.len()` rows of `cols.len()` weights.
    pub weights: Vec<Vec<f64>>,
}

pub fn site_name(site: AttentionSite) -> &'static str {
    match site {
        AttentionSite::EncoderSelf => "encoder_self",
        AttentionSite::DecoderSelf => "decoder_self",
        AttentionSite::DecoderCross => "decoder_cross",
    }
}

fn parse_site(s: &str) -> Option<AttentionSite> {
    match s {
        "encoder_self" => Some(AttentionSite::EncoderSelf),
        "decoder_self" => Some(AttentionSite::DecoderSelf),
        "decoder_cross" => Some(AttentionSite::DecoderCross),
        _ => None,
    }
}

pub fn render_dump(matrices: &[AttentionMatrix]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{DUMP_HEADER}");
    for m in matrices {
        let _ = writeln!(
            s,
            "@ {} layer={} head={} rows={} cols={}",
            site_name(m.site),
            m.layer,
            m.head,
            m.rows.len(),
            m.cols.len()
        );
        let _ = writeln!(s, ".\t{}", m.cols.join("\t"));
        for (tok, row) in m.rows.iter().zip(&m.weights) {
            s.push_str(tok);
            for w in row {
                let _ = write!(s, "\t{w:.6}");
            }
            s.push('\n');
        }
    }
    s
}

fn parse_err(line: &str, message: impl Into<String>) -> Error {
    Error::Parse { raw: line.to_owned(), message: message.into() }
}

fn header_field(line: &str, part: Option<&str>, key: &str) -> Result<usize> {
    part.and_then(|p| p.strip_prefix(key))
        .and_then(|p| p.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(line, format!("missing or invalid `{key}`")))
}

pub fn parse_dump(text: &str) -> Result<Vec<AttentionMatrix>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(l) if l.trim() == DUMP_HEADER => {}
        Some(l) => return Err(parse_err(l, "not an attention dump")),
        None => return Err(parse_err("", "empty attention dump")),
    }
    let mut out = Vec::new();
    while let Some(line) = lines.next() {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("@") {
            return Err(parse_err(line, "expected an `@` block header"));
        }
        let site = parts.next().and_then(parse_site).ok_or_else(|| parse_err(line, "unknown attention site"))?;
        let layer = header_field(line, parts.next(), "layer")?;
        let head = header_field(line, parts.next(), "head")?;
        let n_rows = header_field(line, parts.next(), "rows")?;
        let n_cols = header_field(line, parts.next(), "cols")?;
        let col_line = lines.next().ok_or_else(|| parse_err(line, "block ends before its column header"))?;
        let mut fields = col_line.split('\t');
        if fields.next() != Some(".") {
            return Err(parse_err(col_line, "column header must start with `.`"));
        }
        let cols: Vec<String> = fields.map(str::to_owned).collect();
        if cols.len() != n_cols {
            return Err(parse_err(col_line, format!("expected {n_cols} column tokens, found {}", cols.len())));
        }
        let mut rows = Vec::with_capacity(n_rows);
        let mut weights = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            let row_line = lines.next().ok_or_else(|| parse_err(line, "block ends before all rows were read"))?;
            let mut fields = row_line.split('\t');
            rows.push(fields.next().unwrap_or_default().to_owned());
            let row = fields
                .map(|f| f.parse::<f64>().map_err(|e| parse_err(row_line, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != n_cols {
                return Err(parse_err(row_line, format!("expected {n_cols} weights, found {}", row.len())));
            }
            weights.push(row);
        }
        out.push(AttentionMatrix { site, layer, head, rows, cols, weights });
    }
    Ok(out)
}
