//! Bundled bitmap fonts and the line rasterizer.
//!
//! Four fonts ship with the artifact, all derived from one hand-drawn 5x7
//! ASCII table plus a 12x12 ideograph subset:
//!
//! - 0 `sans`: the base bitmaps
//! - 1 `bold`: horizontal dilation
//! - 2 `slant`: sheared rows
//! - 3 `serif`: foot/head ticks on vertical stroke ends; this font does NOT
//!   cover the ideograph subset, which keeps the glyph-fallback path honest.
//!
//! Glyphs are pure data, so rendering is bit-exact across machines. ASCII
//! glyphs advance one 8px cell, ideographs two cells.

use ndarray::Array2;

pub const FONT_COUNT: usize = 4;
pub const FONT_NAMES: [&str; FONT_COUNT] = ["sans", "bold", "slant", "serif"];

/// Horizontal pitch of one cell in a natural-scale line raster.
pub const CELL_W: usize = 8;
/// Height of a natural-scale line raster.
pub const CELL_H: usize = 16;

/// 5x7 ASCII glyphs for 0x20..=0x7E; bit 4 of each row byte is the left column.
#[rustfmt::skip]
const ASCII_5X7: [[u8; 7]; 95] = [
    [0b00000,0b00000,0b00000,0b00000,0b00000,0b00000,0b00000], // ' '
    [0b00100,0b00100,0b00100,0b00100,0b00100,0b00000,0b00100], // '!'
    [0b01010,0b01010,0b01010,0b00000,0b00000,0b00000,0b00000], // '"'
    [0b01010,0b01010,0b11111,0b01010,0b11111,0b01010,0b01010], // '#'
    [0b00100,0b01111,0b10100,0b01110,0b00101,0b11110,0b00100], // '$'
    [0b11000,0b11001,0b00010,0b00100,0b01000,0b10011,0b00011], // '%'
    [0b01100,0b10010,0b10100,0b01000,0b10101,0b10010,0b01101], // '&'
    [0b01100,0b00100,0b01000,0b00000,0b00000,0b00000,0b00000], // '\''
    [0b00010,0b00100,0b01000,0b01000,0b01000,0b00100,0b00010], // '('
    [0b01000,0b00100,0b00010,0b00010,0b00010,0b00100,0b01000], // ')'
    [0b00000,0b00100,0b10101,0b01110,0b10101,0b00100,0b00000], // '*'
    [0b00000,0b00100,0b00100,0b11111,0b00100,0b00100,0b00000], // '+'
    [0b00000,0b00000,0b00000,0b00000,0b01100,0b00100,0b01000], // ','
    [0b00000,0b00000,0b00000,0b11111,0b00000,0b00000,0b00000], // '-'
    [0b00000,0b00000,0b00000,0b00000,0b00000,0b01100,0b01100], // '.'
    [0b00000,0b00001,0b00010,0b00100,0b01000,0b10000,0b00000], // '/'
    [0b01110,0b10001,0b10011,0b10101,0b11001,0b10001,0b01110], // '0'
    [0b00100,0b01100,0b00100,0b00100,0b00100,0b00100,0b01110], // '1'
    [0b01110,0b10001,0b00001,0b00010,0b00100,0b01000,0b11111], // '2'
    [0b11111,0b00010,0b00100,0b00010,0b00001,0b10001,0b01110], // '3'
    [0b00010,0b00110,0b01010,0b10010,0b11111,0b00010,0b00010], // '4'
    [0b11111,0b10000,0b11110,0b00001,0b00001,0b10001,0b01110], // '5'
    [0b00110,0b01000,0b10000,0b11110,0b10001,0b10001,0b01110], // '6'
    [0b11111,0b00001,0b00010,0b00100,0b01000,0b01000,0b01000], // '7'
    [0b01110,0b10001,0b10001,0b01110,0b10001,0b10001,0b01110], // '8'
    [0b01110,0b10001,0b10001,0b01111,0b00001,0b00010,0b01100], // '9'
    [0b00000,0b01100,0b01100,0b00000,0b01100,0b01100,0b00000], // ':'
    [0b00000,0b01100,0b01100,0b00000,0b01100,0b00100,0b01000], // ';'
    [0b00010,0b00100,0b01000,0b10000,0b01000,0b00100,0b00010], // '<'
    [0b00000,0b00000,0b11111,0b00000,0b11111,0b00000,0b00000], // '='
    [0b01000,0b00100,0b00010,0b00001,0b00010,0b00100,0b01000], // '>'
    [0b01110,0b10001,0b00001,0b00010,0b00100,0b00000,0b00100], // '?'
    [0b01110,0b10001,0b00001,0b01101,0b10101,0b10101,0b01110], // '@'
    [0b01110,0b10001,0b10001,0b10001,0b11111,0b10001,0b10001], // 'A'
    [0b11110,0b10001,0b10001,0b11110,0b10001,0b10001,0b11110], // 'B'
    [0b01110,0b10001,0b10000,0b10000,0b10000,0b10001,0b01110], // 'C'
    [0b11100,0b10010,0b10001,0b10001,0b10001,0b10010,0b11100], // 'D'
    [0b11111,0b10000,0b10000,0b11110,0b10000,0b10000,0b11111], // 'E'
    [0b11111,0b10000,0b10000,0b11110,0b10000,0b10000,0b10000], // 'F'
    [0b01110,0b10001,0b10000,0b10111,0b10001,0b10001,0b01111], // 'G'
    [0b10001,0b10001,0b10001,0b11111,0b10001,0b10001,0b10001], // 'H'
    [0b01110,0b00100,0b00100,0b00100,0b00100,0b00100,0b01110], // 'I'
    [0b00111,0b00010,0b00010,0b00010,0b00010,0b10010,0b01100], // 'J'
    [0b10001,0b10010,0b10100,0b11000,0b10100,0b10010,0b10001], // 'K'
    [0b10000,0b10000,0b10000,0b10000,0b10000,0b10000,0b11111], // 'L'
    [0b10001,0b11011,0b10101,0b10101,0b10001,0b10001,0b10001], // 'M'
    [0b10001,0b10001,0b11001,0b10101,0b10011,0b10001,0b10001], // 'N'
    [0b01110,0b10001,0b10001,0b10001,0b10001,0b10001,0b01110], // 'O'
    [0b11110,0b10001,0b10001,0b11110,0b10000,0b10000,0b10000], // 'P'
    [0b01110,0b10001,0b10001,0b10001,0b10101,0b10010,0b01101], // 'Q'
    [0b11110,0b10001,0b10001,0b11110,0b10100,0b10010,0b10001], // 'R'
    [0b01111,0b10000,0b10000,0b01110,0b00001,0b00001,0b11110], // 'S'
    [0b11111,0b00100,0b00100,0b00100,0b00100,0b00100,0b00100], // 'T'
    [0b10001,0b10001,0b10001,0b10001,0b10001,0b10001,0b01110], // 'U'
    [0b10001,0b10001,0b10001,0b10001,0b10001,0b01010,0b00100], // 'V'
    [0b10001,0b10001,0b10001,0b10101,0b10101,0b10101,0b01010], // 'W'
    [0b10001,0b10001,0b01010,0b00100,0b01010,0b10001,0b10001], // 'X'
    [0b10001,0b10001,0b10001,0b01010,0b00100,0b00100,0b00100], // 'Y'
    [0b11111,0b00001,0b00010,0b00100,0b01000,0b10000,0b11111], // 'Z'
    [0b01110,0b01000,0b01000,0b01000,0b01000,0b01000,0b01110], // '['
    [0b00000,0b10000,0b01000,0b00100,0b00010,0b00001,0b00000], // '\\'
    [0b01110,0b00010,0b00010,0b00010,0b00010,0b00010,0b01110], // ']'
    [0b00100,0b01010,0b10001,0b00000,0b00000,0b00000,0b00000], // '^'
    [0b00000,0b00000,0b00000,0b00000,0b00000,0b00000,0b11111], // '_'
    [0b01000,0b00100,0b00010,0b00000,0b00000,0b00000,0b00000], // '`'
    [0b00000,0b00000,0b01110,0b00001,0b01111,0b10001,0b01111], // 'a'
    [0b10000,0b10000,0b10110,0b11001,0b10001,0b10001,0b11110], // 'b'
    [0b00000,0b00000,0b01110,0b10000,0b10000,0b10001,0b01110], // 'c'
    [0b00001,0b00001,0b01101,0b10011,0b10001,0b10001,0b01111], // 'd'
    [0b00000,0b00000,0b01110,0b10001,0b11111,0b10000,0b01110], // 'e'
    [0b00110,0b01001,0b01000,0b11100,0b01000,0b01000,0b01000], // 'f'
    [0b00000,0b01111,0b10001,0b10001,0b01111,0b00001,0b01110], // 'g'
    [0b10000,0b10000,0b10110,0b11001,0b10001,0b10001,0b10001], // 'h'
    [0b00100,0b00000,0b01100,0b00100,0b00100,0b00100,0b01110], // 'i'
    [0b00010,0b00000,0b00110,0b00010,0b00010,0b10010,0b01100], // 'j'
    [0b10000,0b10000,0b10010,0b10100,0b11000,0b10100,0b10010], // 'k'
    [0b01100,0b00100,0b00100,0b00100,0b00100,0b00100,0b01110], // 'l'
    [0b00000,0b00000,0b11010,0b10101,0b10101,0b10001,0b10001], // 'm'
    [0b00000,0b00000,0b10110,0b11001,0b10001,0b10001,0b10001], // 'n'
    [0b00000,0b00000,0b01110,0b10001,0b10001,0b10001,0b01110], // 'o'
    [0b00000,0b00000,0b11110,0b10001,0b11110,0b10000,0b10000], // 'p'
    [0b00000,0b00000,0b01101,0b10011,0b01111,0b00001,0b00001], // 'q'
    [0b00000,0b00000,0b10110,0b11001,0b10000,0b10000,0b10000], // 'r'
    [0b00000,0b00000,0b01110,0b10000,0b01110,0b00001,0b11110], // 's'
    [0b01000,0b01000,0b11100,0b01000,0b01000,0b01001,0b00110], // 't'
    [0b00000,0b00000,0b10001,0b10001,0b10001,0b10011,0b01101], // 'u'
    [0b00000,0b00000,0b10001,0b10001,0b10001,0b01010,0b00100], // 'v'
    [0b00000,0b00000,0b10001,0b10001,0b10101,0b10101,0b01010], // 'w'
    [0b00000,0b00000,0b10001,0b01010,0b00100,0b01010,0b10001], // 'x'
    [0b00000,0b00000,0b10001,0b10001,0b01111,0b00001,0b01110], // 'y'
    [0b00000,0b00000,0b11111,0b00010,0b00100,0b01000,0b11111], // 'z'
    [0b00010,0b00100,0b00100,0b01000,0b00100,0b00100,0b00010], // '{'
    [0b00100,0b00100,0b00100,0b00100,0b00100,0b00100,0b00100], // '|'
    [0b01000,0b00100,0b00100,0b00010,0b00100,0b00100,0b01000], // '}'
    [0b00000,0b00000,0b01000,0b10101,0b00010,0b00000,0b00000], // '~'
];

/// Ideograph subset covered by the bundled fonts (fonts 0..=2).
pub const CJK_CHARS: [char; 10] = ['一', '二', '三', '十', '口', '日', '田', '山', '中', '人'];

fn cjk_bitmap(ch: char) -> Option<Array2<f64>> {
    const N: usize = 12;
    let mut g = Array2::<f64>::zeros((N, N));
    fn hline(g: &mut Array2<f64>, y: usize, x0: usize, x1: usize) {
        for x in x0..=x1 {
            g[[y, x]] = 1.0;
        }
    }
    fn vline(g: &mut Array2<f64>, x: usize, y0: usize, y1: usize) {
        for y in y0..=y1 {
            g[[y, x]] = 1.0;
        }
    }
    match ch {
        '一' => hline(&mut g, 6, 0, 11),
        '二' => {
            hline(&mut g, 3, 1, 10);
            hline(&mut g, 9, 0, 11);
        }
        '三' => {
            hline(&mut g, 2, 1, 10);
            hline(&mut g, 6, 2, 9);
            hline(&mut g, 10, 0, 11);
        }
        '十' => {
            hline(&mut g, 5, 0, 11);
            vline(&mut g, 6, 0, 11);
        }
        '口' => {
            hline(&mut g, 2, 2, 9);
            hline(&mut g, 10, 2, 9);
            vline(&mut g, 2, 2, 10);
            vline(&mut g, 9, 2, 10);
        }
        '日' => {
            hline(&mut g, 1, 2, 9);
            hline(&mut g, 6, 2, 9);
            hline(&mut g, 11, 2, 9);
            vline(&mut g, 2, 1, 11);
            vline(&mut g, 9, 1, 11);
        }
        '田' => {
            hline(&mut g, 1, 1, 10);
            hline(&mut g, 6, 1, 10);
            hline(&mut g, 11, 1, 10);
            vline(&mut g, 1, 1, 11);
            vline(&mut g, 6, 1, 11);
            vline(&mut g, 10, 1, 11);
        }
        '山' => {
            vline(&mut g, 6, 0, 10);
            vline(&mut g, 1, 4, 10);
            vline(&mut g, 11, 4, 10);
            hline(&mut g, 10, 1, 11);
        }
        '中' => {
            hline(&mut g, 3, 1, 10);
            hline(&mut g, 8, 1, 10);
            vline(&mut g, 1, 3, 8);
            vline(&mut g, 10, 3, 8);
            vline(&mut g, 6, 0, 11);
        }
        '人' => {
            // two strokes fanning out from the top center
            for i in 0..11usize {
                let y = 1 + i;
                let spread = (i * 5) / 10;
                g[[y, 5 - spread.min(5)]] = 1.0;
                g[[y, 6 + spread.min(5)]] = 1.0;
            }
        }
        _ => return None,
    }
    Some(g)
}

fn ascii_bitmap(ch: char) -> Option<Array2<f64>> {
    let code = ch as u32;
    if !(0x20..=0x7E).contains(&code) {
        return None;
    }
    let rows = &ASCII_5X7[(code - 0x20) as usize];
    let mut g = Array2::<f64>::zeros((7, 5));
    for (r, bits) in rows.iter().enumerate() {
        for c in 0..5 {
            if bits & (1 << (4 - c)) != 0 {
                g[[r, c]] = 1.0;
            }
        }
    }
    Some(g)
}

/// True for characters that advance two cells.
pub fn is_wide(ch: char) -> bool {
    CJK_CHARS.contains(&ch)
}

/// The full artifact charset: printable ASCII plus the ideograph subset.
pub fn charset() -> Vec<char> {
    let mut cs: Vec<char> = (0x20u32..=0x7E).map(|c| char::from_u32(c).unwrap()).collect();
    cs.extend_from_slice(&CJK_CHARS);
    cs
}

pub fn in_charset(ch: char) -> bool {
    let code = ch as u32;
    (0x20..=0x7E).contains(&code) || CJK_CHARS.contains(&ch)
}

fn dilate_horizontal(g: &Array2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    Array2::from_shape_fn((h, w + 1), |(i, j)| {
        let a = if j < w { g[[i, j]] } else { 0.0 };
        let b = if j > 0 { g[[i, j - 1]] } else { 0.0 };
        a.max(b)
    })
}

fn shear(g: &Array2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    let max_shift = (h - 1) / 3;
    let mut out = Array2::<f64>::zeros((h, w + max_shift));
    for i in 0..h {
        let shift = (h - 1 - i) / 3;
        for j in 0..w {
            out[[i, j + shift]] = g[[i, j]];
        }
    }
    out
}

fn add_serifs(g: &Array2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    let mut out = g.clone();
    for j in 0..w {
        for i in 0..h {
            if g[[i, j]] == 0.0 {
                continue;
            }
            let bottom_end = i + 1 < h && g[[i + 1, j]] == 0.0 && i >= 1 && g[[i - 1, j]] > 0.0;
            let top_end = i >= 1 && g[[i - 1, j]] == 0.0 && i + 1 < h && g[[i + 1, j]] > 0.0;
            if bottom_end || top_end {
                if j > 0 {
                    out[[i, j - 1]] = 1.0;
                }
                if j + 1 < w {
                    out[[i, j + 1]] = 1.0;
                }
            }
        }
    }
    out
}

/// Glyph bitmap for one font, values in {0,1}. `None` when the font does not
/// cover the character (the serif font has no ideographs).
pub fn glyph_bitmap(font_id: usize, ch: char) -> Option<Array2<f64>> {
    assert!(font_id < FONT_COUNT, "font_id out of range");
    let base = if is_wide(ch) {
        if font_id == 3 {
            return None;
        }
        cjk_bitmap(ch)?
    } else {
        ascii_bitmap(ch)?
    };
    Some(match font_id {
        0 => base,
        1 => dilate_horizontal(&base),
        2 => shear(&base),
        3 => add_serifs(&base),
        _ => unreachable!(),
    })
}

/// Renders a line at natural scale: [`CELL_H`] tall, one cell per ASCII char
/// and two per ideograph. Returns a {0,1} mask. Characters the font cannot
/// render leave their cells empty (callers validate coverage up front).
pub fn raster_line(text: &str, font_id: usize) -> Array2<f64> {
    let units = text_units(text).max(1);
    let w = units * CELL_W;
    let mut out = Array2::<f64>::zeros((CELL_H, w));
    let mut x = 0usize;
    for ch in text.chars() {
        let wide = is_wide(ch);
        let cell_w = if wide { 2 * CELL_W } else { CELL_W };
        if let Some(g) = glyph_bitmap(font_id, ch) {
            let (gh, gw) = g.dim();
            let ox = x + cell_w.saturating_sub(gw) / 2;
            let oy = (CELL_H - gh) / 2;
            for i in 0..gh {
                for j in 0..gw {
                    if g[[i, j]] > 0.0 && ox + j < w {
                        out[[oy + i, ox + j]] = 1.0;
                    }
                }
            }
        }
        x += cell_w;
    }
    out
}

/// Number of horizontal cells a string occupies at natural scale.
pub fn text_units(text: &str) -> usize {
    text.chars().map(|c| if is_wide(c) { 2 } else { 1 }).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_fonts_cover_ascii() {
        for f in 0..FONT_COUNT {
            for code in 0x20u32..=0x7E {
                let ch = char::from_u32(code).unwrap();
                assert!(glyph_bitmap(f, ch).is_some(), "font {f} missing {ch:?}");
            }
        }
    }

    #[test]
    fn serif_font_lacks_ideographs_others_cover_them() {
        for &ch in CJK_CHARS.iter() {
            assert!(glyph_bitmap(3, ch).is_none());
            for f in 0..3 {
                let g = glyph_bitmap(f, ch).unwrap();
                assert!(g.sum() > 0.0, "font {f} empty {ch:?}");
            }
        }
    }

    #[test]
    fn variants_differ_from_base() {
        for ch in ['A', 'g', '8'] {
            let base = glyph_bitmap(0, ch).unwrap();
            for f in 1..FONT_COUNT {
                let v = glyph_bitmap(f, ch).unwrap();
                let same = v.dim() == base.dim() && v == base;
                assert!(!same, "font {f} identical to base for {ch:?}");
            }
        }
    }

    #[test]
    fn raster_line_shape_and_binarity() {
        let r = raster_line("Hi 十", 0);
        assert_eq!(r.dim().0, CELL_H);
        assert_eq!(r.dim().1, 5 * CELL_W); // 'H','i',' ' are one cell each, the ideograph two
        assert!(r.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(r.sum() > 0.0);
    }

    #[test]
    fn glyphs_are_distinct_within_font() {
        let mut seen: Vec<(char, Array2<f64>)> = Vec::new();
        for code in 0x21u32..=0x7E {
            let ch = char::from_u32(code).unwrap();
            let g = glyph_bitmap(0, ch).unwrap();
            for (prev_ch, prev) in &seen {
                assert!(
                    !(prev.dim() == g.dim() && *prev == g),
                    "glyphs {prev_ch:?} and {ch:?} identical"
                );
            }
            seen.push((ch, g));
        }
    }
}
