//! LaTeX-ish tokenization. Inputs that contain whitespace are split on it
//! directly (the manifest convention); compact strings are scanned one
//! glyph at a time, with `\command` taking a maximal letter run.

use crate::error::{Error, Result};

pub fn tokenize(input: &str) -> Result<Vec<String>> {
    if input.is_empty() {
        return Err(Error::Invalid("tokenize: empty input".into()));
    }
    let tokens: Vec<String> = if input.chars().any(char::is_whitespace) {
        input.split_whitespace().map(str::to_string).collect()
    } else {
        scan(input)?
    };
    if tokens.is_empty() {
        return Err(Error::Invalid("tokenize: no tokens".into()));
    }
    if let Some(bad) = tokens.iter().find(|t| t.as_str() == "\\") {
        return Err(Error::Invalid(format!("tokenize: lone backslash token {bad:?}")));
    }
    Ok(tokens)
}

fn scan(input: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let chars: Vec<char> = input.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '\\' {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_ascii_alphabetic() {
                j += 1;
            }
            if j == i + 1 {
                return Err(Error::Invalid(
                    "tokenize: backslash must be followed by letters".into(),
                ));
            }
            out.push(chars[i..j].iter().collect());
            i = j;
        } else {
            out.push(chars[i].to_string());
            i += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s).unwrap()
    }

    #[test]
    fn whitespace_split_rule() {
        assert_eq!(toks("x ^ { 2 }"), vec!["x", "^", "{", "2", "}"]);
    }

    #[test]
    fn scan_rule_on_compact_input() {
        assert_eq!(
            toks("\\frac{a}{b}"),
            vec!["\\frac", "{", "a", "}", "{", "b", "}"]
        );
        assert_eq!(toks("x^{2}"), vec!["x", "^", "{", "2", "}"]);
        assert_eq!(toks("1+2=3"), vec!["1", "+", "2", "=", "3"]);
    }

    #[test]
    fn lone_backslash_rejected() {
        assert!(tokenize("\\").is_err());
        assert!(tokenize("a\\").is_err());
        assert!(tokenize("\\ ").is_err());
    }

    #[test]
    fn empty_rejected() {
        assert!(tokenize("").is_err());
    }

    #[test]
    fn stabilizes_after_one_pass() {
        for s in ["\\frac{a}{b}", "x^{2}+1", "\\alpha\\beta", "x ^ { 2 }"] {
            let first = toks(s);
            let rejoined = first.join(" ");
            assert_eq!(toks(&rejoined), first, "input {s}");
        }
    }
}
