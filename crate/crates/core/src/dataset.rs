//! Synthetic scene-text corpus with exact per-line ground truth.
//!
//! Every sample is generated, so content, polygons, fonts, colors and the
//! watermark state are all known. Images are 64x64 RGB in [0,1]. A caption
//! carries one `*` placeholder per line plus a watermark trigger phrase.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GlyphError, Result};
use crate::fonts;
use crate::imgops::{self, Quad};

pub const IMG_SIZE: usize = 64;

/// The caption placeholder marker; the tokenizer reserves it as a special id.
pub const PLACEHOLDER: char = '*';

pub const WM_TRIGGER_NONE: &str = "no watermarks";
pub const WM_TRIGGER_WITH: &str = "with watermarks";

#[derive(Clone, Debug)]
pub struct TextLine {
    pub content: String,
    /// Quad in pixel coordinates, vertex order x0y0, x1y0, x1y1, x0y1.
    pub polygon: Quad,
    pub font_id: usize,
    pub color_rgb: [u8; 3],
    pub has_color_label: bool,
}

#[derive(Clone, Debug)]
pub struct SceneSample {
    /// (H, W, 3) in [0,1].
    pub image: Array3<f64>,
    pub lines: Vec<TextLine>,
    pub caption: String,
    pub wm_score: f64,
}

#[derive(Clone, Debug)]
pub struct BatchSpec {
    pub p_mask_empty: f64,
    pub p_font_empty: f64,
    pub p_color_default: f64,
    pub batch_size: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec { p_mask_empty: 0.5, p_font_empty: 0.2, p_color_default: 0.35, batch_size: 16 }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        for (n, p) in [
            ("p_mask_empty", self.p_mask_empty),
            ("p_font_empty", self.p_font_empty),
            ("p_color_default", self.p_color_default),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GlyphError::InvalidInput(format!("{n}={p} outside [0,1]")));
            }
        }
        if self.batch_size == 0 {
            return Err(GlyphError::InvalidInput("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample conditioning dropout decisions drawn by [`next_batch`].
#[derive(Clone, Debug)]
pub struct DropoutFlags {
    pub mask_empty: bool,
    pub font_empty: Vec<bool>,
    pub color_default: Vec<bool>,
}

/// Generation knobs. The defaults match the corpus the acceptance runs use.
#[derive(Clone, Debug)]
pub struct SynthOpts {
    /// Probability a sample carries the synthetic watermark overlay.
    pub wm_rate: f64,
    /// Probability each character is drawn from the ideograph subset.
    pub cjk_prob: f64,
    /// Content length range in characters.
    pub len_range: (usize, usize),
    /// Minimum text/background color distance (Euclidean, 0-255 scale).
    pub min_contrast: f64,
    /// Largest integer glyph scale.
    pub max_scale: usize,
    /// Restrict contents to this pool when set (e.g. uppercase-only tasks).
    pub char_pool: Option<Vec<char>>,
}

impl Default for SynthOpts {
    fn default() -> Self {
        SynthOpts {
            wm_rate: 0.2,
            cjk_prob: 0.08,
            len_range: (2, 5),
            min_contrast: 80.0,
            max_scale: 4,
            char_pool: None,
        }
    }
}

fn default_char_pool() -> Vec<char> {
    let mut pool: Vec<char> = ('A'..='Z').collect();
    pool.extend('a'..='z');
    pool.extend('0'..='9');
    pool
}

fn gen_content(rng: &mut ChaCha12Rng, opts: &SynthOpts) -> String {
    let pool = opts.char_pool.clone().unwrap_or_else(default_char_pool);
    let len = rng.random_range(opts.len_range.0..=opts.len_range.1);
    let mut s = String::new();
    for _ in 0..len {
        if opts.char_pool.is_none() && rng.random_bool(opts.cjk_prob) {
            s.push(fonts::CJK_CHARS[rng.random_range(0..fonts::CJK_CHARS.len())]);
        } else {
            s.push(pool[rng.random_range(0..pool.len())]);
        }
    }
    s
}

/// Crops a {0,1} raster to its ink extent plus a one-pixel margin.
fn crop_to_ink(r: &Array2<f64>) -> Array2<f64> {
    let (h, w) = r.dim();
    let mut y0 = h;
    let mut y1 = 0;
    let mut x0 = w;
    let mut x1 = 0;
    for i in 0..h {
        for j in 0..w {
            if r[[i, j]] > 0.0 {
                y0 = y0.min(i);
                y1 = y1.max(i + 1);
                x0 = x0.min(j);
                x1 = x1.max(j + 1);
            }
        }
    }
    if y0 >= y1 {
        return Array2::zeros((1, 1));
    }
    let (ch, cw) = (y1 - y0 + 2, x1 - x0 + 2);
    Array2::from_shape_fn((ch, cw), |(i, j)| {
        if i == 0 || j == 0 || y0 + i - 1 >= y1 || x0 + j - 1 >= x1 {
            0.0
        } else {
            r[[y0 + i - 1, x0 + j - 1]]
        }
    })
}

/// 64x64 {0,1} mask of the synthetic watermark: "WM" stamps on a diagonal
/// lattice. Injected at synthesis when a sample is watermarked; evaluation
/// correlates against the same pattern.
pub fn watermark_pattern() -> Array2<f64> {
    let stamp = crop_to_ink(&fonts::raster_line("WM", 0));
    let (sh, sw) = stamp.dim();
    let scale = 2usize;
    let mut m = Array2::<f64>::zeros((IMG_SIZE, IMG_SIZE));
    let step = 28usize;
    for row in 0..4 {
        for col in 0..4 {
            let oy = row * step / 2 + 2;
            let ox = col * step + (row * step / 2) % step;
            for i in 0..sh * scale {
                for j in 0..sw * scale {
                    let (y, x) = (oy + i, ox + j);
                    if y < IMG_SIZE && x < IMG_SIZE && stamp[[i / scale, j / scale]] > 0.0 {
                        m[[y, x]] = 1.0;
                    }
                }
            }
        }
    }
    m
}

/// Blends the watermark pattern into an image, darkening bright scenes and
/// lightening dark ones so the mark stays visible.
pub fn apply_watermark(image: &mut Array3<f64>) {
    let m = watermark_pattern();
    let lum = imgops::to_gray(image).mean().unwrap();
    let delta = if lum > 0.5 { -0.15 } else { 0.15 };
    for i in 0..IMG_SIZE {
        for j in 0..IMG_SIZE {
            if m[[i, j]] > 0.0 {
                for c in 0..3 {
                    image[[i, j, c]] = (image[[i, j, c]] + delta).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Caption templates; selection is uniform over this pool.
pub const CAPTION_TEMPLATES: [&str; 5] = [
    "Image with words",
    "Text says",
    "A sign that reads",
    "A photo with the text",
    "Poster showing",
];

/// Builds a caption with one `*` placeholder per line, in line order.
pub fn make_caption(sample_lines: usize, template_seed: u64) -> String {
    let mut rng = ChaCha12Rng::seed_from_u64(template_seed);
    let phrase = CAPTION_TEMPLATES[rng.random_range(0..CAPTION_TEMPLATES.len())];
    let slots: Vec<String> = (0..sample_lines).map(|_| format!("\"{PLACEHOLDER}\"")).collect();
    format!("{phrase} {}", slots.join(", "))
}

/// Appends exactly one watermark trigger phrase, comma separated.
pub fn apply_watermark_label(caption: &str, wm_score: f64) -> String {
    let trigger = if wm_score < 0.5 { WM_TRIGGER_NONE } else { WM_TRIGGER_WITH };
    format!("{caption}, {trigger}")
}

pub fn placeholder_count(caption: &str) -> usize {
    caption.chars().filter(|&c| c == PLACEHOLDER).count()
}

/// Deterministic scene synthesis. Lines are laid out in disjoint horizontal
/// bands; each line is rendered with its ground-truth font and color.
pub fn synth_scene(seed: u64, n_lines: usize) -> Result<SceneSample> {
    synth_scene_with(seed, n_lines, &SynthOpts::default())
}

pub fn synth_scene_with(seed: u64, n_lines: usize, opts: &SynthOpts) -> Result<SceneSample> {
    if !(1..=5).contains(&n_lines) {
        return Err(GlyphError::InvalidInput(format!("n_lines={n_lines} outside 1..=5")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (n_lines as u64).wrapping_mul(0x9e3779b97f4a7c15));

    // Background: solid, vertical gradient, or lightly noised solid.
    let mut image = Array3::<f64>::zeros((IMG_SIZE, IMG_SIZE, 3));
    let bg_mode = rng.random_range(0..3u32);
    let bg_a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let bg_b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    for i in 0..IMG_SIZE {
        for j in 0..IMG_SIZE {
            for c in 0..3 {
                let v = match bg_mode {
                    0 => bg_a[c],
                    1 => bg_a[c] + (bg_b[c] - bg_a[c]) * i as f64 / (IMG_SIZE - 1) as f64,
                    _ => (bg_a[c] + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0),
                };
                image[[i, j, c]] = v;
            }
        }
    }

    let band_h = IMG_SIZE / n_lines;
    let mut lines = Vec::with_capacity(n_lines);
    for li in 0..n_lines {
        let band_y = li * band_h;
        let mut placed = None;
        for _attempt in 0..64 {
            let content = gen_content(&mut rng, opts);
            if lines.iter().any(|l: &TextLine| l.content == content) {
                continue; // distinct contents keep line bindings unambiguous
            }
            let has_wide = content.chars().any(fonts::is_wide);
            let font_id = loop {
                let f = rng.random_range(0..fonts::FONT_COUNT);
                if !(has_wide && f == 3) {
                    break f;
                }
            };
            if !content.chars().all(fonts::in_charset) || content.contains(PLACEHOLDER) {
                continue; // charset violation: reject and resample
            }
            let raster = crop_to_ink(&fonts::raster_line(&content, font_id));
            let (rh, rw) = raster.dim();
            let max_s_h = (band_h.saturating_sub(3)) / rh;
            let max_s_w = (IMG_SIZE - 4) / rw;
            let max_s = max_s_h.min(max_s_w).min(opts.max_scale);
            if max_s == 0 {
                continue; // does not fit the band, resample content
            }
            let s = rng.random_range(max_s.div_ceil(2)..=max_s).max(1);
            let (th, tw) = (rh * s, rw * s);
            let x0 = rng.random_range(1..=IMG_SIZE - 1 - tw - 1) as f64;
            let ymax = band_y + band_h - 1 - th;
            let y0 = rng.random_range(band_y + 1..=ymax.max(band_y + 1)) as f64;
            let poly: Quad = [
                [x0, y0],
                [x0 + tw as f64, y0],
                [x0 + tw as f64, y0 + th as f64],
                [x0, y0 + th as f64],
            ];

            // Flatten the rect to its mean color first (a plate, as posters
            // do), then enforce text/plate contrast.
            let bx0 = x0 as usize;
            let by0 = y0 as usize;
            let mut bg_mean = [0.0f64; 3];
            for i in by0..by0 + th {
                for j in bx0..bx0 + tw {
                    for c in 0..3 {
                        bg_mean[c] += image[[i, j, c]];
                    }
                }
            }
            for c in &mut bg_mean {
                *c /= (th * tw) as f64;
            }
            for i in by0..by0 + th {
                for j in bx0..bx0 + tw {
                    for c in 0..3 {
                        image[[i, j, c]] = bg_mean[c];
                    }
                }
            }
            let mut color = [0u8; 3];
            let mut ok = false;
            for _ in 0..32 {
                color = std::array::from_fn(|_| rng.random_range(0..=255u8));
                let d2: f64 = (0..3)
                    .map(|c| (color[c] as f64 - bg_mean[c] * 255.0).powi(2))
                    .sum();
                if d2.sqrt() >= opts.min_contrast {
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue;
            }

            // Stamp the glyphs at integer scale.
            for i in 0..th {
                for j in 0..tw {
                    if raster[[i / s, j / s]] > 0.0 {
                        for c in 0..3 {
                            image[[by0 + i, bx0 + j, c]] = color[c] as f64 / 255.0;
                        }
                    }
                }
            }
            placed = Some(TextLine {
                content,
                polygon: poly,
                font_id,
                color_rgb: color,
                has_color_label: false,
            });
            break;
        }
        let line = placed.ok_or_else(|| {
            GlyphError::InvalidInput(format!("could not place line {li} after resampling"))
        })?;
        lines.push(line);
    }

    let watermarked = rng.random_bool(opts.wm_rate);
    let wm_score = if watermarked {
        rng.random_range(0.5..1.0)
    } else {
        rng.random_range(0.0..0.5)
    };
    if watermarked {
        apply_watermark(&mut image);
    }

    // Color labels from the non-learned picker, over the final pixels.
    for li in 0..lines.len() {
        let confident = crate::attr::pick_color(&image, &lines[li].polygon)
            .ok()
            .flatten()
            .is_some();
        lines[li].has_color_label = confident;
    }

    let caption = apply_watermark_label(&make_caption(lines.len(), rng.random()), wm_score);
    let sample = SceneSample { image, lines, caption, wm_score };
    validate_sample(&sample)?;
    Ok(sample)
}

/// Checks the documented sample invariants.
pub fn validate_sample(s: &SceneSample) -> Result<()> {
    if s.lines.is_empty() || s.lines.len() > 5 {
        return Err(GlyphError::InvalidInput("line count outside 1..=5".into()));
    }
    if placeholder_count(&s.caption) != s.lines.len() {
        return Err(GlyphError::InvalidInput(format!(
            "caption has {} placeholders for {} lines",
            placeholder_count(&s.caption),
            s.lines.len()
        )));
    }
    let mut masks: Vec<Array2<f64>> = Vec::new();
    for l in &s.lines {
        if l.content.is_empty() || l.content.chars().count() > 20 {
            return Err(GlyphError::InvalidInput("content length outside 1..=20".into()));
        }
        for ch in l.content.chars() {
            if !fonts::in_charset(ch) {
                return Err(GlyphError::Charset(ch));
            }
        }
        if !imgops::quad_is_convex(&l.polygon) || imgops::quad_area(&l.polygon).abs() <= 0.0 {
            return Err(GlyphError::DegeneratePolygon(format!("{:?}", l.polygon)));
        }
        for p in &l.polygon {
            if p[0] < 0.0 || p[0] > IMG_SIZE as f64 || p[1] < 0.0 || p[1] > IMG_SIZE as f64 {
                return Err(GlyphError::InvalidInput("polygon out of bounds".into()));
            }
        }
        let m = imgops::fill_quad(IMG_SIZE, IMG_SIZE, &l.polygon);
        for prev in &masks {
            if (&m * prev).sum() > 0.0 {
                return Err(GlyphError::InvalidInput("overlapping line polygons".into()));
            }
        }
        masks.push(m);
    }
    Ok(())
}

/// Draws a training batch: uniform sample choice plus independent conditioning
/// dropout flags, all from one seeded stream.
pub fn next_batch<'a>(
    corpus: &'a [SceneSample],
    spec: &BatchSpec,
    rng_seed: u64,
) -> Result<Vec<(&'a SceneSample, DropoutFlags)>> {
    if corpus.is_empty() {
        return Err(GlyphError::InvalidInput("empty corpus".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let mut batch = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.batch_size {
        let s = &corpus[rng.random_range(0..corpus.len())];
        let mask_empty = rng.random_bool(spec.p_mask_empty);
        let font_empty = (0..s.lines.len())
            .map(|_| rng.random_bool(spec.p_font_empty))
            .collect();
        let color_default = (0..s.lines.len())
            .map(|_| rng.random_bool(spec.p_color_default))
            .collect();
        batch.push((s, DropoutFlags { mask_empty, font_empty, color_default }));
    }
    Ok(batch)
}

#[derive(Serialize, Deserialize)]
struct LineRecord {
    text: String,
    polygon: [[f64; 2]; 4],
    font_id: usize,
    rgb: [u8; 3],
}

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    image_path: String,
    caption: String,
    wm_score: f64,
    lines: Vec<LineRecord>,
}

pub fn image_to_u8(img: &Array3<f64>) -> Vec<u8> {
    img.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

pub fn image_from_u8(data: &[u8], h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((h, w, 3), |(i, j, c)| data[(i * w + j) * 3 + c] as f64 / 255.0)
}

/// Persists samples as PNGs plus an `index.jsonl` with one record per sample.
pub fn save_dataset(dir: &Path, samples: &[SceneSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GlyphError::io(dir, e))?;
    let index_path = dir.join("index.jsonl");
    let mut index = std::fs::File::create(&index_path).map_err(|e| GlyphError::io(&index_path, e))?;
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        let path = dir.join(&name);
        let buf = image_to_u8(&s.image);
        image::save_buffer(
            &path,
            &buf,
            IMG_SIZE as u32,
            IMG_SIZE as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| GlyphError::Image { path: path.clone(), source: e })?;
        let rec = IndexRecord {
            image_path: name,
            caption: s.caption.clone(),
            wm_score: s.wm_score,
            lines: s
                .lines
                .iter()
                .map(|l| LineRecord {
                    text: l.content.clone(),
                    polygon: l.polygon,
                    font_id: l.font_id,
                    rgb: l.color_rgb,
                })
                .collect(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| GlyphError::Json { path: index_path.clone(), source: e })?;
        writeln!(index, "{line}").map_err(|e| GlyphError::io(&index_path, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let index_path = dir.join("index.jsonl");
    let f = std::fs::File::open(&index_path).map_err(|e| GlyphError::io(&index_path, e))?;
    let reader = std::io::BufReader::new(f);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| GlyphError::io(&index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndexRecord = serde_json::from_str(&line)
            .map_err(|e| GlyphError::Json { path: index_path.clone(), source: e })?;
        let img_path = dir.join(&rec.image_path);
        let img = image::open(&img_path)
            .map_err(|e| GlyphError::Image { path: img_path.clone(), source: e })?
            .into_rgb8();
        let (w, h) = img.dimensions();
        let image = image_from_u8(img.as_raw(), h as usize, w as usize);
        let lines = rec
            .lines
            .into_iter()
            .map(|l| TextLine {
                content: l.text,
                polygon: l.polygon,
                font_id: l.font_id,
                color_rgb: l.rgb,
                has_color_label: false,
            })
            .collect();
        out.push(SceneSample { image, lines, caption: rec.caption, wm_score: rec.wm_score });
    }
    Ok(out)
}

/// Convenience: a corpus of samples with per-sample derived seeds.
pub fn synth_corpus(
    seed: u64,
    count: usize,
    n_lines: impl Fn(usize) -> usize,
    opts: &SynthOpts,
) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|i| synth_scene_with(seed.wrapping_add(1 + i as u64), n_lines(i), opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_valid() {
        let a = synth_scene(7, 1).unwrap();
        let b = synth_scene(7, 1).unwrap();
        assert_eq!(a.image, b.image, "same seed must give identical pixels");
        assert_eq!(a.caption, b.caption);
        validate_sample(&a).unwrap();
    }

    #[test]
    fn five_lines_have_disjoint_polygons() {
        let s = synth_scene(9, 5).unwrap();
        assert_eq!(s.lines.len(), 5);
        for i in 0..5 {
            for j in i + 1..5 {
                let a = imgops::fill_quad(IMG_SIZE, IMG_SIZE, &s.lines[i].polygon);
                let b = imgops::fill_quad(IMG_SIZE, IMG_SIZE, &s.lines[j].polygon);
                assert_eq!((&a * &b).sum(), 0.0, "lines {i} and {j} overlap");
            }
        }
    }

    #[test]
    fn render_then_extract_recovers_color() {
        // Round trip: the picker run on rendered pixels must recover the
        // ground-truth color of a high-contrast line.
        let s = synth_scene(7, 1).unwrap();
        let line = &s.lines[0];
        let got = crate::attr::pick_color(&s.image, &line.polygon)
            .unwrap()
            .expect("picker should be confident on a clean synthetic line");
        for c in 0..3 {
            let err = (got.rgb[c] as f64 - line.color_rgb[c] as f64).abs();
            assert!(err <= 16.0, "channel {c}: {} vs {}", got.rgb[c], line.color_rgb[c]);
        }
    }

    #[test]
    fn caption_placeholders_match_lines() {
        for seed in [1u64, 2, 3, 11, 12] {
            for n in 1..=3usize {
                let s = synth_scene(seed, n).unwrap();
                assert_eq!(placeholder_count(&s.caption), n, "caption: {}", s.caption);
            }
        }
        let c2 = make_caption(2, 5);
        assert_eq!(c2.chars().filter(|&c| c == PLACEHOLDER).count(), 2);
        assert_eq!(make_caption(2, 5), c2, "same template seed, same caption");
        assert!(CAPTION_TEMPLATES.contains(&"Image with words"));
        assert!(CAPTION_TEMPLATES.contains(&"Text says"));
    }

    #[test]
    fn watermark_labels() {
        assert_eq!(apply_watermark_label("a poster", 0.1), "a poster, no watermarks");
        assert_eq!(apply_watermark_label("a poster", 0.9), "a poster, with watermarks");
        assert_eq!(apply_watermark_label("a poster", 0.5), "a poster, with watermarks");
    }

    #[test]
    fn batch_dropout_rates_converge() {
        let corpus: Vec<SceneSample> = (0..4).map(|i| synth_scene(100 + i, 2).unwrap()).collect();
        let spec = BatchSpec { batch_size: 10_000, ..Default::default() };
        let batch = next_batch(&corpus, &spec, 42).unwrap();
        let mask_rate =
            batch.iter().filter(|(_, f)| f.mask_empty).count() as f64 / batch.len() as f64;
        assert!((mask_rate - 0.5).abs() <= 0.02, "mask-empty rate {mask_rate}");
        let (mut fe, mut ftot, mut ce, mut ctot) = (0usize, 0usize, 0usize, 0usize);
        for (_, f) in &batch {
            fe += f.font_empty.iter().filter(|&&b| b).count();
            ftot += f.font_empty.len();
            ce += f.color_default.iter().filter(|&&b| b).count();
            ctot += f.color_default.len();
        }
        assert!((fe as f64 / ftot as f64 - 0.2).abs() <= 0.02);
        assert!((ce as f64 / ctot as f64 - 0.35).abs() <= 0.02);
    }

    #[test]
    fn degenerate_dropout_probabilities() {
        let corpus = vec![synth_scene(5, 2).unwrap()];
        let spec = BatchSpec { p_font_empty: 0.0, p_color_default: 1.0, batch_size: 64, ..Default::default() };
        let batch = next_batch(&corpus, &spec, 9).unwrap();
        for (_, f) in &batch {
            assert!(f.font_empty.iter().all(|&b| !b));
            assert!(f.color_default.iter().all(|&b| b));
        }
    }

    #[test]
    fn dataset_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<SceneSample> = (0..3).map(|i| synth_scene(50 + i, 2).unwrap()).collect();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in samples.iter().zip(loaded.iter()) {
            assert_eq!(a.caption, b.caption);
            assert!((a.wm_score - b.wm_score).abs() < 1e-9);
            assert_eq!(a.lines.len(), b.lines.len());
            for (la, lb) in a.lines.iter().zip(b.lines.iter()) {
                assert_eq!(la.content, lb.content);
                assert_eq!(la.polygon, lb.polygon);
                assert_eq!(la.font_id, lb.font_id);
                assert_eq!(la.color_rgb, lb.color_rgb);
            }
            // PNG stores u8, so pixels agree to quantization.
            let max_err = a
                .image
                .iter()
                .zip(b.image.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-12, "max pixel err {max_err}");
        }
    }

    #[test]
    fn watermarked_samples_detectably_differ() {
        let mut with = synth_scene(3, 1).unwrap().image;
        let without = with.clone();
        apply_watermark(&mut with);
        let diff: f64 = with
            .iter()
            .zip(without.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / with.len() as f64;
        assert!(diff > 0.005, "overlay should move pixels, got {diff}");
    }
}
