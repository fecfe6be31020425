//! Built-in glyph atlas: 5x7 bitmaps for every drawable token. The
//! structural tokens `^ _ { } \frac` carry no bitmap; the renderer gives
//! them layout meaning instead.

/// Rows are 5-character strings, 'X' = ink.
pub type Bitmap = [&'static str; 7];

pub const STRUCTURAL_TOKENS: [&str; 5] = ["^", "_", "{", "}", "\\frac"];

#[rustfmt::skip]
pub const GLYPHS: &[(&str, Bitmap)] = &[
    ("0", [".XXX.", "X...X", "X..XX", "X.X.X", "XX..X", "X...X", ".XXX."]),
    ("1", ["..X..", ".XX..", "..X..", "..X..", "..X..", "..X..", ".XXX."]),
    ("2", [".XXX.", "X...X", "....X", "...X.", "..X..", ".X...", "XXXXX"]),
    ("3", [".XXX.", "X...X", "....X", "..XX.", "....X", "X...X", ".XXX."]),
    ("4", ["...X.", "..XX.", ".X.X.", "X..X.", "XXXXX", "...X.", "...X."]),
    ("5", ["XXXXX", "X....", "XXXX.", "....X", "....X", "X...X", ".XXX."]),
    ("6", ["..XX.", ".X...", "X....", "XXXX.", "X...X", "X...X", ".XXX."]),
    ("7", ["XXXXX", "....X", "...X.", "..X..", ".X...", ".X...", ".X..."]),
    ("8", [".XXX.", "X...X", "X...X", ".XXX.", "X...X", "X...X", ".XXX."]),
    ("9", [".XXX.", "X...X", "X...X", ".XXXX", "....X", "...X.", ".XX.."]),
    ("a", [".....", ".....", ".XXX.", "....X", ".XXXX", "X...X", ".XXXX"]),
    ("b", ["X....", "X....", "X.XX.", "XX..X", "X...X", "X...X", "XXXX."]),
    ("c", [".....", ".....", ".XXX.", "X....", "X....", "X...X", ".XXX."]),
    ("d", ["....X", "....X", ".XX.X", "X..XX", "X...X", "X...X", ".XXXX"]),
    ("e", [".....", ".....", ".XXX.", "X...X", "XXXXX", "X....", ".XXX."]),
    ("f", ["..XX.", ".X..X", ".X...", "XXX..", ".X...", ".X...", ".X..."]),
    ("g", [".....", ".XXXX", "X...X", "X...X", ".XXXX", "....X", ".XXX."]),
    ("h", ["X....", "X....", "X.XX.", "XX..X", "X...X", "X...X", "X...X"]),
    ("i", ["..X..", ".....", ".XX..", "..X..", "..X..", "..X..", ".XXX."]),
    ("j", ["...X.", ".....", "..XX.", "...X.", "...X.", "X..X.", ".XX.."]),
    ("k", ["X....", "X....", "X..X.", "X.X..", "XX...", "X.X..", "X..X."]),
    ("l", [".XX..", "..X..", "..X..", "..X..", "..X..", "..X..", ".XXX."]),
    ("m", [".....", ".....", "XX.X.", "X.X.X", "X.X.X", "X.X.X", "X.X.X"]),
    ("n", [".....", ".....", "X.XX.", "XX..X", "X...X", "X...X", "X...X"]),
    ("o", [".....", ".....", ".XXX.", "X...X", "X...X", "X...X", ".XXX."]),
    ("p", [".....", "XXXX.", "X...X", "X...X", "XXXX.", "X....", "X...."]),
    ("q", [".....", ".XXXX", "X...X", "X...X", ".XXXX", "....X", "....X"]),
    ("r", [".....", ".....", "X.XX.", "XX...", "X....", "X....", "X...."]),
    ("s", [".....", ".....", ".XXXX", "X....", ".XXX.", "....X", "XXXX."]),
    ("t", [".X...", ".X...", "XXXX.", ".X...", ".X...", ".X..X", "..XX."]),
    ("u", [".....", ".....", "X...X", "X...X", "X...X", "X..XX", ".XX.X"]),
    ("v", [".....", ".....", "X...X", "X...X", "X...X", ".X.X.", "..X.."]),
    ("w", [".....", ".....", "X...X", "X.X.X", "X.X.X", "X.X.X", ".X.X."]),
    ("x", [".....", ".....", "X...X", ".X.X.", "..X..", ".X.X.", "X...X"]),
    ("y", [".....", "X...X", "X...X", ".XXXX", "....X", "X...X", ".XXX."]),
    ("z", [".....", ".....", "XXXXX", "...X.", "..X..", ".X...", "XXXXX"]),
    ("+", [".....", "..X..", "..X..", "XXXXX", "..X..", "..X..", "....."]),
    ("-", [".....", ".....", ".....", "XXXXX", ".....", ".....", "....."]),
    ("=", [".....", ".....", "XXXXX", ".....", "XXXXX", ".....", "....."]),
    ("(", ["...X.", "..X..", ".X...", ".X...", ".X...", "..X..", "...X."]),
    (")", [".X...", "..X..", "...X.", "...X.", "...X.", "..X..", ".X..."]),
    ("[", [".XXX.", ".X...", ".X...", ".X...", ".X...", ".X...", ".XXX."]),
    ("]", [".XXX.", "...X.", "...X.", "...X.", "...X.", "...X.", ".XXX."]),
    ("|", ["..X..", "..X..", "..X..", "..X..", "..X..", "..X..", "..X.."]),
    ("/", ["....X", "...X.", "...X.", "..X..", ".X...", ".X...", "X...."]),
    ("!", ["..X..", "..X..", "..X..", "..X..", "..X..", ".....", "..X.."]),
    (",", [".....", ".....", ".....", ".....", "..XX.", "..X..", ".X..."]),
    (".", [".....", ".....", ".....", ".....", ".....", ".XX..", ".XX.."]),
    ("<", ["...X.", "..X..", ".X...", "X....", ".X...", "..X..", "...X."]),
    (">", [".X...", "..X..", "...X.", "....X", "...X.", "..X..", ".X..."]),
    ("\\alpha", [".....", ".....", ".XX.X", "X..X.", "X..X.", "X..X.", ".XX.X"]),
    ("\\beta", [".XXX.", "X...X", "XXXX.", "X...X", "X...X", "XXXX.", "X...."]),
    ("\\gamma", [".....", "X...X", ".X..X", "..XX.", "..X..", "..X..", ".X..."]),
    ("\\theta", [".XXX.", "X...X", "X...X", "XXXXX", "X...X", "X...X", ".XXX."]),
    ("\\lambda", ["X....", ".X...", ".XX..", "..X..", ".X.X.", "X...X", "X...X"]),
    ("\\mu", [".....", ".....", "X..X.", "X..X.", "X..X.", "XXXX.", "X...."]),
    ("\\pi", [".....", "XXXXX", ".X.X.", ".X.X.", ".X.X.", ".X.X.", ".X.XX"]),
    ("\\sigma", [".....", ".XXXX", ".X..X", "X...X", "X...X", ".XXX.", "....."]),
    ("\\phi", ["..X..", ".XXX.", "X.X.X", "X.X.X", ".XXX.", "..X..", "..X.."]),
    ("\\sum", ["XXXXX", "X....", ".X...", "..X..", ".X...", "X....", "XXXXX"]),
    ("\\int", ["...XX", "..X..", "..X..", "..X..", "..X..", "..X..", "XX..."]),
    ("\\sqrt", ["..XXX", "..X..", "..X..", "..X..", "X.X..", "XX...", ".X..."]),
    ("\\leq", ["...X.", "..X..", ".X...", "..X..", "...X.", ".....", "XXXXX"]),
    ("\\geq", [".X...", "..X..", "...X.", "..X..", ".X...", ".....", "XXXXX"]),
    ("\\neq", ["....X", "...X.", "XXXXX", "..X..", "XXXXX", ".X...", "X...."]),
    ("\\pm", ["..X..", "..X..", "XXXXX", "..X..", "..X..", ".....", "XXXXX"]),
    ("\\times", [".....", "X...X", ".X.X.", "..X..", ".X.X.", "X...X", "....."]),
    ("\\cdot", [".....", ".....", ".....", ".XX..", ".XX..", ".....", "....."]),
    ("\\rightarrow", [".....", "..X..", "...X.", "XXXXX", "...X.", "..X..", "....."]),
    ("\\infty", [".....", ".....", ".X.X.", "X.X.X", "X.X.X", ".X.X.", "....."]),
];

/// Bitmap lookup for a drawable token.
pub fn glyph(token: &str) -> Option<&'static Bitmap> {
    GLYPHS.iter().find(|(t, _)| *t == token).map(|(_, b)| b)
}

/// Every token the renderer accepts: drawable glyphs plus the structural
/// layout tokens.
pub fn atlas_tokens() -> Vec<&'static str> {
    GLYPHS
        .iter()
        .map(|(t, _)| *t)
        .chain(STRUCTURAL_TOKENS)
        .collect()
}

pub fn is_atlas_token(token: &str) -> bool {
    glyph(token).is_some() || STRUCTURAL_TOKENS.contains(&token)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitmaps_are_5x7() {
        for (name, bmp) in GLYPHS {
            for row in bmp {
                assert_eq!(row.len(), 5, "glyph {name} row {row:?}");
                assert!(row.chars().all(|c| c == 'X' || c == '.'), "glyph {name}");
            }
        }
    }

    #[test]
    fn names_unique_and_nonempty_ink() {
        let mut seen = std::collections::HashSet::new();
        for (name, bmp) in GLYPHS {
            assert!(seen.insert(*name), "duplicate glyph {name}");
            assert!(
                bmp.iter().any(|row| row.contains('X')),
                "glyph {name} is blank"
            );
        }
    }

    #[test]
    fn structural_tokens_have_no_bitmap() {
        for t in STRUCTURAL_TOKENS {
            assert!(glyph(t).is_none());
            assert!(is_atlas_token(t));
        }
    }
}
