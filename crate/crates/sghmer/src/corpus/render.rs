//! Synthetic expression rasterizer. Glyphs sit left-to-right on a
//! baseline; `^`/`_` render the following group at 0.7 scale shifted
//! up/down by 0.4x the glyph height; braces group without drawing;
//! `\frac` draws a bar with its two groups above and below. Ink is 1,
//! background 0, and every (tokens, seed) pair renders identical pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::atlas::{self, Bitmap};
use super::GrayImage;
use crate::error::{Error, Result};

/// Pixels per bitmap cell at scale 1 (glyphs are 15x21 px).
const UNIT: f64 = 3.0;
const SCRIPT_SCALE: f64 = 0.7;
const SCRIPT_OFFSET: f64 = 0.4;
pub const MIN_EXTENT: usize = 32;

fn glyph_h(scale: f64) -> i64 {
    (7.0 * UNIT * scale).round().max(2.0) as i64
}

fn glyph_w(scale: f64) -> i64 {
    (5.0 * UNIT * scale).round().max(2.0) as i64
}

fn spacing(scale: f64) -> i64 {
    (UNIT * scale).round().max(1.0) as i64
}

#[derive(Debug)]
enum Item {
    Glyph(&'static str),
    Group(Vec<Item>),
    Sup(Vec<Item>),
    Sub(Vec<Item>),
    Frac(Vec<Item>, Vec<Item>),
}

struct Parser<'a> {
    toks: &'a [String],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).map(String::as_str)
    }

    fn next(&mut self) -> Option<&'a str> {
        let t = self.peek();
        self.pos += 1;
        t
    }

    fn parse_seq(&mut self, in_group: bool) -> Result<Vec<Item>> {
        let mut items = Vec::new();
        while let Some(tok) = self.peek() {
            match tok {
                "}" => {
                    if in_group {
                        break;
                    }
                    return Err(Error::Invalid("render: unbalanced '}'".into()));
                }
                "{" => {
                    self.next();
                    let inner = self.parse_seq(true)?;
                    self.expect_close()?;
                    items.push(Item::Group(inner));
                }
                "^" => {
                    self.next();
                    items.push(Item::Sup(self.parse_script_arg()?));
                }
                "_" => {
                    self.next();
                    items.push(Item::Sub(self.parse_script_arg()?));
                }
                "\\frac" => {
                    self.next();
                    let a = self.parse_braced("\\frac")?;
                    let b = self.parse_braced("\\frac")?;
                    items.push(Item::Frac(a, b));
                }
                t => match atlas::GLYPHS.iter().find(|(name, _)| *name == t) {
                    Some((name, _)) => {
                        self.next();
                        items.push(Item::Glyph(name));
                    }
                    None => {
                        return Err(Error::Invalid(format!(
                            "render: token {t:?} is not in the glyph atlas"
                        )))
                    }
                },
            }
        }
        Ok(items)
    }

    fn expect_close(&mut self) -> Result<()> {
        match self.next() {
            Some("}") => Ok(()),
            _ => Err(Error::Invalid("render: missing '}'".into())),
        }
    }

    /// The group a script applies to: a braced group or a single glyph.
    fn parse_script_arg(&mut self) -> Result<Vec<Item>> {
        match self.peek() {
            Some("{") => {
                self.next();
                let inner = self.parse_seq(true)?;
                self.expect_close()?;
                Ok(inner)
            }
            Some(t) => match atlas::GLYPHS.iter().find(|(name, _)| *name == t) {
                Some((name, _)) => {
                    self.next();
                    Ok(vec![Item::Glyph(name)])
                }
                None => Err(Error::Invalid(format!(
                    "render: script argument {t:?} is not a glyph or group"
                ))),
            },
            None => Err(Error::Invalid("render: dangling script token".into())),
        }
    }

    fn parse_braced(&mut self, ctx: &str) -> Result<Vec<Item>> {
        match self.next() {
            Some("{") => {
                let inner = self.parse_seq(true)?;
                self.expect_close()?;
                Ok(inner)
            }
            _ => Err(Error::Invalid(format!("render: {ctx} expects '{{' groups"))),
        }
    }
}

/// Width, extent above the baseline, extent below it.
#[derive(Clone, Copy, Default)]
struct Metrics {
    w: i64,
    asc: i64,
    desc: i64,
}

fn measure_seq(items: &[Item], scale: f64) -> Metrics {
    let mut m = Metrics::default();
    for (i, item) in items.iter().enumerate() {
        let im = measure(item, scale);
        if i > 0 {
            m.w += spacing(scale);
        }
        m.w += im.w;
        m.asc = m.asc.max(im.asc);
        m.desc = m.desc.max(im.desc);
    }
    m
}

fn measure(item: &Item, scale: f64) -> Metrics {
    match item {
        Item::Glyph(_) => Metrics {
            w: glyph_w(scale),
            asc: glyph_h(scale),
            desc: 0,
        },
        Item::Group(inner) => measure_seq(inner, scale),
        Item::Sup(inner) => {
            let im = measure_seq(inner, scale * SCRIPT_SCALE);
            let shift = (SCRIPT_OFFSET * glyph_h(scale) as f64).round() as i64;
            Metrics {
                w: im.w,
                asc: im.asc + shift,
                desc: (im.desc - shift).max(0),
            }
        }
        Item::Sub(inner) => {
            let im = measure_seq(inner, scale * SCRIPT_SCALE);
            let shift = (SCRIPT_OFFSET * glyph_h(scale) as f64).round() as i64;
            Metrics {
                w: im.w,
                asc: (im.asc - shift).max(0),
                desc: im.desc + shift,
            }
        }
        Item::Frac(num, den) => {
            let (nm, dm) = (measure_seq(num, scale), measure_seq(den, scale));
            let gap = spacing(scale);
            let axis = (0.35 * glyph_h(scale) as f64).round() as i64;
            Metrics {
                w: nm.w.max(dm.w) + 2 * gap,
                asc: axis + gap + nm.desc + nm.asc,
                desc: (gap + dm.asc + dm.desc - axis).max(0),
            }
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    pix: Vec<f32>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas {
            h,
            w,
            pix: vec![0.0; h * w],
        }
    }

    fn set(&mut self, y: i64, x: i64) {
        if y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w {
            self.pix[y as usize * self.w + x as usize] = 1.0;
        }
    }
}

fn draw_glyph(canvas: &mut Canvas, bmp: &Bitmap, x0: i64, baseline: i64, scale: f64) {
    let h = glyph_h(scale);
    let w = glyph_w(scale);
    let top = baseline - h;
    for row in 0..h {
        let br = (row * 7 / h) as usize;
        let bits = bmp[br].as_bytes();
        for col in 0..w {
            let bc = (col * 5 / w) as usize;
            if bits[bc] == b'X' {
                canvas.set(top + row, x0 + col);
            }
        }
    }
}

fn draw_seq(
    canvas: &mut Canvas,
    items: &[Item],
    x0: i64,
    baseline: i64,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> i64 {
    let mut x = x0;
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            // horizontal jitter only widens gaps so boxes never collide
            x += spacing(scale) + rng.gen_range(0..=2);
        }
        x += draw_item(canvas, item, x, baseline, scale, rng);
    }
    x - x0
}

fn draw_item(
    canvas: &mut Canvas,
    item: &Item,
    x: i64,
    baseline: i64,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> i64 {
    match item {
        Item::Glyph(name) => {
            let dy = rng.gen_range(0..=1);
            draw_glyph(canvas, atlas::glyph(name).expect("parsed glyph"), x, baseline + dy, scale);
            glyph_w(scale)
        }
        Item::Group(inner) => draw_seq(canvas, inner, x, baseline, scale, rng),
        Item::Sup(inner) => {
            let shift = (SCRIPT_OFFSET * glyph_h(scale) as f64).round() as i64;
            draw_seq(canvas, inner, x, baseline - shift, scale * SCRIPT_SCALE, rng)
        }
        Item::Sub(inner) => {
            let shift = (SCRIPT_OFFSET * glyph_h(scale) as f64).round() as i64;
            draw_seq(canvas, inner, x, baseline + shift, scale * SCRIPT_SCALE, rng)
        }
        Item::Frac(num, den) => {
            let (nm, dm) = (measure_seq(num, scale), measure_seq(den, scale));
            let gap = spacing(scale);
            let axis = (0.35 * glyph_h(scale) as f64).round() as i64;
            let w = nm.w.max(dm.w) + 2 * gap;
            let bar_y = baseline - axis;
            let thickness = (scale.round() as i64).max(1);
            for t in 0..thickness {
                for c in 0..w {
                    canvas.set(bar_y + t, x + c);
                }
            }
            let num_x = x + (w - nm.w) / 2;
            let den_x = x + (w - dm.w) / 2;
            draw_seq(canvas, num, num_x, bar_y - gap - nm.desc, scale, rng);
            draw_seq(canvas, den, den_x, bar_y + thickness + gap + dm.asc, scale, rng);
            w
        }
    }
}

/// Rasterizes a token sequence. Deterministic for a given (tokens, seed).
pub fn render_tokens(tokens: &[String], seed: u64) -> Result<GrayImage> {
    if tokens.is_empty() {
        return Err(Error::Invalid("render: empty token sequence".into()));
    }
    let mut parser = Parser { toks: tokens, pos: 0 };
    let items = parser.parse_seq(false)?;

    let m = measure_seq(&items, 1.0);
    // generous slack for jitter; the crop below tightens the result
    let est_w = (m.w + 4 * tokens.len() as i64 + 32).max(48) as usize;
    let est_h = (m.asc + m.desc + 32).max(48) as usize;
    let mut canvas = Canvas::new(est_h, est_w);
    let baseline = m.asc + 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_seq(&mut canvas, &items, 12, baseline, 1.0, &mut rng);

    Ok(crop_with_margin(&canvas, 4))
}

fn crop_with_margin(canvas: &Canvas, margin: usize) -> GrayImage {
    let mut y0 = canvas.h;
    let mut y1 = 0usize;
    let mut x0 = canvas.w;
    let mut x1 = 0usize;
    for y in 0..canvas.h {
        for x in 0..canvas.w {
            if canvas.pix[y * canvas.w + x] > 0.0 {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y0 >= y1 {
        // no ink at all (e.g. empty groups): blank minimum-size image
        return GrayImage::blank(MIN_EXTENT, MIN_EXTENT);
    }
    let ch = y1 - y0 + 2 * margin;
    let cw = x1 - x0 + 2 * margin;
    let h = ch.max(MIN_EXTENT);
    let w = cw.max(MIN_EXTENT);
    // center content when padding up to the minimum extent
    let oy = margin + (h - ch) / 2;
    let ox = margin + (w - cw) / 2;
    let mut img = GrayImage::blank(h, w);
    for y in y0..y1 {
        for x in x0..x1 {
            img.pix[(y - y0 + oy) * w + (x - x0 + ox)] = canvas.pix[y * canvas.w + x];
        }
    }
    img
}
