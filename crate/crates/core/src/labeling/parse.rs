//! Line-oriented reader for the answer forms. Unknown lines are skipped, so
//! prose around the form is harmless; nothing here can fail.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupFeatures {
    pub group: usize,
    pub features: Vec<String>,
}

/// One `Group i: ...` line under `Feature Evolution:`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evolution {
    pub group: usize,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub common_features: Vec<String>,
    pub groups: Vec<GroupFeatures>,
    pub evolution: Vec<Evolution>,
    pub caption: Option<String>,
}

#[derive(Clone, Copy, PartialEq)]
enum State {
    Idle,
    Common,
    Group(usize),
    Evolution,
    CaptionNext,
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

/// Drops list markers, heading hashes and emphasis; reports whether the line
/// was a list item.
fn clean(line: &str) -> (String, bool) {
    let t = line.trim();
    let unmarked = t.trim_start_matches(['-', '*', '•', '#']).trim_start();
    let mut bullet = t.starts_with(['-', '*', '•']);
    let digits = unmarked.chars().take_while(char::is_ascii_digit).count();
    let unnumbered = if digits > 0 && unmarked[digits..].starts_with(['.', ')']) {
        bullet = true;
        unmarked[digits + 1..].trim_start()
    } else {
        unmarked
    };
    (unnumbered.replace("**", "").replace("__", "").trim().to_string(), bullet)
}

/// `group <n> <rest>` with `rest` after the number.
fn group_prefix(s: &str) -> Option<(usize, &str)> {
    let rest = strip_prefix_ci(s, "group")?.trim_start();
    let digits = rest.chars().take_while(char::is_ascii_digit).count();
    let n = rest[..digits].parse().ok()?;
    Some((n, rest[digits..].trim_start()))
}

fn split_items(s: &str) -> Vec<String> {
    s.split([',', ';'])
        .map(|p| p.trim().trim_end_matches('.').trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

fn unquote(s: &str) -> String {
    s.trim().trim_matches('"').trim().to_string()
}

pub fn parse_answer(raw: &str) -> ParsedAnswer {
    let mut out = ParsedAnswer::default();
    let mut state = State::Idle;
    for line in raw.lines() {
        let (text, bullet) = clean(line);
        if text.is_empty() {
            continue;
        }
        if let Some(rest) = strip_prefix_ci(&text, "caption:") {
            let caption = unquote(rest);
            if caption.is_empty() {
                state = State::CaptionNext;
            } else {
                out.caption = Some(caption);
                state = State::Idle;
            }
            continue;
        }
        if let Some(rest) = strip_prefix_ci(&text, "common features:") {
            out.common_features.extend(split_items(rest));
            state = State::Common;
            continue;
        }
        if let Some(rest) = strip_prefix_ci(&text, "feature evolution:") {
            state = State::Evolution;
            if let Some((n, body)) = group_prefix(rest.trim()).and_then(|(n, r)| Some((n, r.strip_prefix(':')?))) {
                out.evolution.push(Evolution {
                    group: n,
                    text: body.trim().to_string(),
                });
            }
            continue;
        }
        if let Some((n, rest)) = group_prefix(&text) {
            if let Some(items) = strip_prefix_ci(rest, "common features:") {
                out.groups.push(GroupFeatures {
                    group: n,
                    features: split_items(items),
                });
                state = State::Group(n);
                continue;
            }
            if state == State::Evolution {
                if let Some(body) = rest.strip_prefix(':') {
                    out.evolution.push(Evolution {
                        group: n,
                        text: body.trim().to_string(),
                    });
                    continue;
                }
            }
        }
        match state {
            State::CaptionNext => {
                out.caption = Some(unquote(&text));
                state = State::Idle;
            }
            State::Common if bullet => out.common_features.push(text),
            State::Group(n) if bullet => {
                if let Some(g) = out.groups.iter_mut().rev().find(|g| g.group == n) {
                    g.features.push(text);
                }
            }
            State::Evolution => {}
            _ => state = State::Idle,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_strips_markers() {
        assert_eq!(clean("  - **Caption:** x"), ("Caption: x".to_string(), true));
        assert_eq!(clean("2) red"), ("red".to_string(), true));
        assert_eq!(clean("# Answer form:"), ("Answer form:".to_string(), false));
    }

    #[test]
    fn group_prefix_reads_number() {
        assert_eq!(group_prefix("Group 12: abc"), Some((12, ": abc")));
        assert_eq!(group_prefix("groups"), None);
    }
}
