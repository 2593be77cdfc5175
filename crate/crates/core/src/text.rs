//! Small text helpers shared by the parsers and renderers.

use alloc::string::String;
use alloc::vec::Vec;

/// Collapses every run of whitespace (including newlines) into one space.
pub(crate) fn single_line(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Truncates to at most `budget` characters, marking the cut with an ellipsis.
pub(crate) fn truncate_chars(s: &str, budget: usize) -> String {
    if s.chars().count() <= budget {
        return String::from(s);
    }
    let mut out: String = s.chars().take(budget).collect();
    out.push('…');
    out
}

/// Strips list bullets and markdown emphasis that models like to put in
/// front of `key: value` lines.
fn strip_line_decoration(line: &str) -> &str {
    line.trim()
        .trim_start_matches(['-', '*', '#', '>', ' ', '\t'])
        .trim_end_matches(['*', ' '])
}

/// Value of the last `key: value` line, matching the key case-insensitively.
/// Markdown decorations around the key (`**Key:**`, `- key:`) are tolerated.
pub(crate) fn last_field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    let mut found = None;
    for line in text.lines() {
        if let Some(v) = field_on_line(line, key) {
            found = Some(v);
        }
    }
    found
}

pub(crate) fn field_on_line<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let line = strip_line_decoration(line);
    let colon = line.find(':')?;
    let label = line[..colon].trim().trim_matches('*').trim();
    if label.eq_ignore_ascii_case(key) {
        Some(line[colon + 1..].trim().trim_start_matches('*').trim())
    } else {
        None
    }
}

/// Lenient parser for a bracketed list of strings, as in
/// `["a", "b"]`, `['a']` or `[a, b]`. Returns `None` when no list is present.
pub(crate) fn parse_string_list(s: &str) -> Option<Vec<String>> {
    let start = s.find('[')?;
    let mut items = Vec::new();
    let mut chars = s[start + 1..].chars().peekable();
    let mut bare = String::new();
    let mut closed = false;
    while let Some(c) = chars.next() {
        match c {
            '"' | '\'' if bare.trim().is_empty() => {
                let quote = c;
                let mut item = String::new();
                while let Some(c) = chars.next() {
                    if c == '\\' {
                        if let Some(esc) = chars.next() {
                            item.push(esc);
                        }
                    } else if c == quote {
                        // A single quote followed by a letter is an apostrophe.
                        if quote == '\'' && chars.peek().is_some_and(|n| n.is_alphanumeric()) {
                            item.push(c);
                            continue;
                        }
                        break;
                    } else {
                        item.push(c);
                    }
                }
                let item = item.trim();
                if !item.is_empty() {
                    items.push(String::from(item));
                }
                bare.clear();
            }
            ',' => {
                push_bare(&mut items, &mut bare);
            }
            ']' => {
                push_bare(&mut items, &mut bare);
                closed = true;
                break;
            }
            _ => bare.push(c),
        }
    }
    if !closed {
        push_bare(&mut items, &mut bare);
    }
    Some(items)
}

fn push_bare(items: &mut Vec<String>, bare: &mut String) {
    let item = bare.trim();
    if !item.is_empty() {
        items.push(String::from(item));
    }
    bare.clear();
}
