//! Non-learned attribute extraction.
//!
//! Four pipelines feed the conditioning stack without any trained weights:
//! glyph canvas / strip rendering (with font anti-leakage), position masks,
//! adaptive-threshold font patches with geometric augmentation, and the
//! cluster-and-rank color picker.
//!
//! Fixed constants (window sizes, thresholds, cluster criteria) are declared
//! here so extraction is exactly reproducible:
//!
//! - adaptive threshold: 11x11 local mean window, offset 5 (0-255 scale),
//!   polarity chosen so the foreground is the minority class;
//! - color picker: k-means with k=5, 20 iterations, seed [`KMEANS_SEED`],
//!   candidate clusters ranked by pixel count, text-likeness criteria
//!   (a) area fraction in [0.05, 0.6], (b) 1..=60 connected components
//!   (8-connectivity, components under 3 px ignored), (c) cluster bbox
//!   covering >= 40% of the region width, (d) per-component bbox fill ratio
//!   in [0.1, 0.95].

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::dataset::TextLine;
use crate::error::{GlyphError, Result};
use crate::fonts;
use crate::imgops::{self, Quad};

pub const STRIP_H: usize = 16;
pub const STRIP_W: usize = 96;
pub const KMEANS_SEED: u64 = 0x5eed_c01d;

const THRESH_WINDOW: usize = 11;
const THRESH_OFFSET: f64 = 5.0;
const MIN_COMPONENT_PX: usize = 3;

#[derive(Clone, Debug)]
pub struct GlyphCanvas {
    /// 64x64 union of all line renderings, values {0,1}.
    pub l_g: Array2<f64>,
    /// Per-line 16x96 strips, aspect preserved, values in [0,1].
    pub per_line_strips: Vec<Array2<f64>>,
    /// Which bundled font actually rendered each line (never the ground-truth
    /// font when an alternative covers the content).
    pub render_fonts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PositionMask {
    pub l_p: Array2<f64>,
    pub e_p_list: Vec<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct FontPatch {
    /// 16x96 binary patch.
    pub e_f: Array2<f64>,
    /// False when thresholding found no usable structure; the patch is then
    /// all-zero and callers treat it as the empty font condition.
    pub confident: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorLabel {
    pub rgb: [u8; 3],
    pub confident: bool,
}

/// Uniformly scales a mask to fit (out_h, out_w) preserving aspect, centered.
pub fn fit_mask(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if sh == 0 || sw == 0 || src.iter().all(|&v| v == 0.0) {
        return Array2::zeros((out_h, out_w));
    }
    let s = (out_h as f64 / sh as f64).min(out_w as f64 / sw as f64);
    let th = ((sh as f64 * s).round() as usize).clamp(1, out_h);
    let tw = ((sw as f64 * s).round() as usize).clamp(1, out_w);
    let scaled = imgops::resize_nearest(src, th, tw);
    let mut out = Array2::zeros((out_h, out_w));
    let oy = (out_h - th) / 2;
    let ox = (out_w - tw) / 2;
    for i in 0..th {
        for j in 0..tw {
            out[[oy + i, ox + j]] = scaled[[i, j]];
        }
    }
    out
}

fn validate_line_charset(line: &TextLine) -> Result<()> {
    for ch in line.content.chars() {
        if !fonts::in_charset(ch) {
            return Err(GlyphError::Charset(ch));
        }
    }
    Ok(())
}

fn fonts_covering(content: &str) -> Vec<usize> {
    (0..fonts::FONT_COUNT)
        .filter(|&f| content.chars().all(|c| fonts::glyph_bitmap(f, c).is_some() || c == ' '))
        .collect()
}

fn crop_ink(r: &Array2<f64>) -> Array2<f64> {
    let (h, w) = r.dim();
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
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
    r.slice(ndarray::s![y0..y1, x0..x1]).to_owned()
}

/// Renders all lines onto one canvas plus per-line strips.
///
/// Training-time anti-leakage: each line is drawn with a random bundled font
/// that is never its ground-truth font when any alternative covers the
/// content, and no color is used.
pub fn render_glyph_canvas(lines: &[TextLine], rng_seed: u64) -> Result<GlyphCanvas> {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let n = crate::dataset::IMG_SIZE;
    let mut l_g = Array2::<f64>::zeros((n, n));
    let mut strips = Vec::with_capacity(lines.len());
    let mut chosen = Vec::with_capacity(lines.len());
    for line in lines {
        validate_line_charset(line)?;
        let mut candidates = fonts_covering(&line.content);
        if candidates.is_empty() {
            return Err(GlyphError::InvalidInput(format!(
                "no bundled font covers {:?}",
                line.content
            )));
        }
        if candidates.len() > 1 {
            candidates.retain(|&f| f != line.font_id);
        }
        let render_font = candidates[rng.random_range(0..candidates.len())];
        chosen.push(render_font);

        let raster = crop_ink(&fonts::raster_line(&line.content, render_font));
        let (bx0, by0, bx1, by1) = imgops::quad_bbox(&line.polygon, n, n);
        let (bh, bw) = (by1.saturating_sub(by0), bx1.saturating_sub(bx0));
        if bh == 0 || bw == 0 {
            return Err(GlyphError::DegeneratePolygon(format!("{:?}", line.polygon)));
        }
        let fitted = fit_mask(&raster, bh, bw);
        for i in 0..bh {
            for j in 0..bw {
                if fitted[[i, j]] > 0.0 {
                    l_g[[by0 + i, bx0 + j]] = 1.0;
                }
            }
        }
        strips.push(fit_mask(&raster, STRIP_H, STRIP_W));
    }
    Ok(GlyphCanvas { l_g, per_line_strips: strips, render_fonts: chosen })
}

/// Fills each line's quad; `l_p` is the union.
pub fn render_position_masks(lines: &[TextLine]) -> Result<PositionMask> {
    let n = crate::dataset::IMG_SIZE;
    let mut l_p = Array2::<f64>::zeros((n, n));
    let mut e_p_list = Vec::with_capacity(lines.len());
    for line in lines {
        if !imgops::quad_is_convex(&line.polygon) || imgops::quad_area(&line.polygon).abs() <= 0.0 {
            return Err(GlyphError::DegeneratePolygon(format!("{:?}", line.polygon)));
        }
        let m = imgops::fill_quad(n, n, &line.polygon);
        l_p.zip_mut_with(&m, |a, &b| *a = a.max(b));
        e_p_list.push(m);
    }
    Ok(PositionMask { l_p, e_p_list })
}

fn local_mean(gray: &Array2<f64>, win: usize) -> Array2<f64> {
    let (h, w) = gray.dim();
    let r = win / 2;
    // Integral image for O(1) window sums with clamped borders.
    let mut integral = Array2::<f64>::zeros((h + 1, w + 1));
    for i in 0..h {
        for j in 0..w {
            integral[[i + 1, j + 1]] =
                gray[[i, j]] + integral[[i, j + 1]] + integral[[i + 1, j]] - integral[[i, j]];
        }
    }
    Array2::from_shape_fn((h, w), |(i, j)| {
        let y0 = i.saturating_sub(r);
        let x0 = j.saturating_sub(r);
        let y1 = (i + r + 1).min(h);
        let x1 = (j + r + 1).min(w);
        let sum = integral[[y1, x1]] - integral[[y0, x1]] - integral[[y1, x0]] + integral[[y0, x0]];
        sum / ((y1 - y0) * (x1 - x0)) as f64
    })
}

/// Adaptive-threshold font patch from a text region.
///
/// Crop, grayscale, local-mean threshold, minority polarity, fit to 16x96.
pub fn extract_font_patch(image: &Array3<f64>, polygon: &Quad) -> Result<FontPatch> {
    let (h, w, _) = image.dim();
    if !imgops::quad_is_convex(polygon) {
        return Err(GlyphError::DegeneratePolygon(format!("{polygon:?}")));
    }
    for p in polygon {
        if p[0] < 0.0 || p[0] > w as f64 || p[1] < 0.0 || p[1] > h as f64 {
            return Err(GlyphError::InvalidInput("polygon out of bounds".into()));
        }
    }
    let (x0, y0, x1, y1) = imgops::quad_bbox(polygon, h, w);
    let (bh, bw) = (y1.saturating_sub(y0), x1.saturating_sub(x0));
    if bh * bw < 16 {
        return Err(GlyphError::InvalidInput(format!("region area {} below 16 px", bh * bw)));
    }
    let gray = Array2::from_shape_fn((bh, bw), |(i, j)| {
        255.0
            * (0.299 * image[[y0 + i, x0 + j, 0]]
                + 0.587 * image[[y0 + i, x0 + j, 1]]
                + 0.114 * image[[y0 + i, x0 + j, 2]])
    });
    let mean = local_mean(&gray, THRESH_WINDOW);
    let inside = Array2::from_shape_fn((bh, bw), |(i, j)| {
        imgops::point_in_quad(polygon, (x0 + j) as f64 + 0.5, (y0 + i) as f64 + 0.5)
    });
    let mut dark = Array2::<f64>::zeros((bh, bw));
    let mut light = Array2::<f64>::zeros((bh, bw));
    let mut n_in = 0usize;
    for i in 0..bh {
        for j in 0..bw {
            if !inside[[i, j]] {
                continue;
            }
            n_in += 1;
            if gray[[i, j]] < mean[[i, j]] - THRESH_OFFSET {
                dark[[i, j]] = 1.0;
            }
            if gray[[i, j]] > mean[[i, j]] + THRESH_OFFSET {
                light[[i, j]] = 1.0;
            }
        }
    }
    let (nd, nl) = (dark.sum() as usize, light.sum() as usize);
    let (fg, nfg) = if nd == 0 && nl == 0 {
        (dark, 0)
    } else if nd <= nl {
        (dark, nd)
    } else {
        (light, nl)
    };
    let frac = nfg as f64 / n_in.max(1) as f64;
    if nfg == 0 || frac >= 0.9 {
        return Ok(FontPatch { e_f: Array2::zeros((STRIP_H, STRIP_W)), confident: false });
    }
    let fitted = fit_mask(&crop_ink(&fg), STRIP_H, STRIP_W).mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    Ok(FontPatch { e_f: fitted, confident: true })
}

/// Geometric augmentation parameters; all values are exact so the neutral
/// transform reproduces the input bit-for-bit.
#[derive(Clone, Debug)]
pub struct AugmentParams {
    pub rotate_deg: f64,
    /// Fractional shift of (x, y), each within +-0.10.
    pub translate: (f64, f64),
    pub scale: f64,
    /// Occluding rects as (x0, y0, w, h) fractions of the patch.
    pub occlusions: Vec<[f64; 4]>,
}

impl AugmentParams {
    pub fn neutral() -> Self {
        AugmentParams { rotate_deg: 0.0, translate: (0.0, 0.0), scale: 1.0, occlusions: vec![] }
    }

    pub fn sample(rng: &mut ChaCha12Rng) -> Self {
        let n_occ = rng.random_range(0..=2usize);
        let mut occlusions = Vec::new();
        let mut budget = 0.20f64;
        for _ in 0..n_occ {
            let area = rng.random_range(0.02..=0.12f64.min(budget.max(0.021)));
            budget -= area;
            let wfrac = rng.random_range(0.1..=0.5f64);
            let hfrac = (area / wfrac).min(1.0);
            let x0 = rng.random_range(0.0..=(1.0 - wfrac));
            let y0 = rng.random_range(0.0..=(1.0 - hfrac).max(0.0));
            occlusions.push([x0, y0, wfrac, hfrac]);
        }
        AugmentParams {
            rotate_deg: rng.random_range(-15.0..=15.0),
            translate: (rng.random_range(-0.10..=0.10), rng.random_range(-0.10..=0.10)),
            scale: rng.random_range(0.8..=1.2),
            occlusions,
        }
    }
}

/// Applies rotation/translation/scale (inverse-mapped, nearest sampling) and
/// occlusion, re-binarizing the result.
pub fn augment_font_patch_with(patch: &FontPatch, params: &AugmentParams) -> FontPatch {
    let (h, w) = patch.e_f.dim();
    let neutral = params.rotate_deg == 0.0
        && params.translate == (0.0, 0.0)
        && params.scale == 1.0;
    let mut out = if neutral {
        patch.e_f.clone()
    } else {
        let theta = params.rotate_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        Array2::from_shape_fn((h, w), |(i, j)| {
            // Inverse map: undo translation, then rotation/scale about center.
            let x = j as f64 - params.translate.0 * w as f64 - cx;
            let y = i as f64 - params.translate.1 * h as f64 - cy;
            let sx = (cos * x + sin * y) / params.scale + cx;
            let sy = (-sin * x + cos * y) / params.scale + cy;
            let (si, sj) = (sy.round(), sx.round());
            if si < 0.0 || sj < 0.0 || si >= h as f64 || sj >= w as f64 {
                0.0
            } else if patch.e_f[[si as usize, sj as usize]] >= 0.5 {
                1.0
            } else {
                0.0
            }
        })
    };
    for occ in &params.occlusions {
        let x0 = (occ[0] * w as f64) as usize;
        let y0 = (occ[1] * h as f64) as usize;
        let x1 = ((occ[0] + occ[2]) * w as f64).ceil().min(w as f64) as usize;
        let y1 = ((occ[1] + occ[3]) * h as f64).ceil().min(h as f64) as usize;
        for i in y0..y1 {
            for j in x0..x1 {
                out[[i, j]] = 0.0;
            }
        }
    }
    FontPatch { e_f: out, confident: patch.confident }
}

pub fn augment_font_patch(patch: &FontPatch, rng_seed: u64) -> FontPatch {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    augment_font_patch_with(patch, &AugmentParams::sample(&mut rng))
}

/// 8-connected components of a boolean mask. Returns (labels, sizes); label 0
/// is background, component labels start at 1.
pub fn connected_components(mask: &Array2<bool>) -> (Array2<usize>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<usize>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut next = 1usize;
    let mut stack = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] || labels[[i, j]] != 0 {
                continue;
            }
            let mut size = 0usize;
            stack.push((i, j));
            labels[[i, j]] = next;
            while let Some((y, x)) = stack.pop() {
                size += 1;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = next;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            sizes.push(size);
            next += 1;
        }
    }
    (labels, sizes)
}

struct KmeansResult {
    assignment: Vec<usize>,
    centers: Vec<[f64; 3]>,
    counts: Vec<usize>,
}

fn kmeans_rgb(pixels: &[[f64; 3]], k: usize, iters: usize, seed: u64) -> KmeansResult {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = pixels.len();
    // k-means++ style seeding on the squared-distance distribution.
    let mut centers: Vec<[f64; 3]> = vec![pixels[rng.random_range(0..n)]];
    while centers.len() < k {
        let d2: Vec<f64> = pixels
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| dist2(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 1e-12 {
            centers.push(pixels[rng.random_range(0..n)]);
            continue;
        }
        let mut target = rng.random_range(0.0..total);
        let mut chosen = n - 1;
        for (i, d) in d2.iter().enumerate() {
            if target < *d {
                chosen = i;
                break;
            }
            target -= d;
        }
        centers.push(pixels[chosen]);
    }
    let mut assignment = vec![0usize; n];
    let mut counts = vec![0usize; k];
    for _ in 0..iters {
        for (i, p) in pixels.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let d = dist2(p, c);
                if d < bd {
                    bd = d;
                    best = ci;
                }
            }
            assignment[i] = best;
        }
        let mut sums = vec![[0.0f64; 3]; k];
        counts = vec![0usize; k];
        for (i, p) in pixels.iter().enumerate() {
            let a = assignment[i];
            counts[a] += 1;
            for c in 0..3 {
                sums[a][c] += p[c];
            }
        }
        for ci in 0..k {
            if counts[ci] == 0 {
                // Re-seed an empty cluster at the point farthest from its center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist2(&pixels[a], &centers[assignment[a]])
                            .total_cmp(&dist2(&pixels[b], &centers[assignment[b]]))
                    })
                    .unwrap();
                centers[ci] = pixels[far];
            } else {
                for c in 0..3 {
                    centers[ci][c] = sums[ci][c] / counts[ci] as f64;
                }
            }
        }
    }
    KmeansResult { assignment, centers, counts }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum()
}

/// The color picker: cluster region pixels, rank dominant clusters, accept the
/// first one whose mask looks like text. `Ok(None)` means no reliable label.
pub fn pick_color(image: &Array3<f64>, polygon: &Quad) -> Result<Option<ColorLabel>> {
    pick_color_seeded(image, polygon, KMEANS_SEED)
}

pub fn pick_color_seeded(
    image: &Array3<f64>,
    polygon: &Quad,
    seed: u64,
) -> Result<Option<ColorLabel>> {
    let (h, w, _) = image.dim();
    if !imgops::quad_is_convex(polygon) {
        return Err(GlyphError::DegeneratePolygon(format!("{polygon:?}")));
    }
    let (x0, y0, x1, y1) = imgops::quad_bbox(polygon, h, w);
    let (bh, bw) = (y1.saturating_sub(y0), x1.saturating_sub(x0));
    let mut coords = Vec::new();
    let mut pixels: Vec<[f64; 3]> = Vec::new();
    for i in 0..bh {
        for j in 0..bw {
            if imgops::point_in_quad(polygon, (x0 + j) as f64 + 0.5, (y0 + i) as f64 + 0.5) {
                coords.push((i, j));
                pixels.push([
                    image[[y0 + i, x0 + j, 0]] * 255.0,
                    image[[y0 + i, x0 + j, 1]] * 255.0,
                    image[[y0 + i, x0 + j, 2]] * 255.0,
                ]);
            }
        }
    }
    let k = 5usize;
    if pixels.len() < k {
        return Ok(None);
    }
    let km = kmeans_rgb(&pixels, k, 20, seed);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| km.counts[b].cmp(&km.counts[a]).then(a.cmp(&b)));

    for &ci in order.iter().take(3) {
        let count = km.counts[ci];
        if count == 0 {
            continue;
        }
        let frac = count as f64 / pixels.len() as f64;
        if !(0.05..=0.6).contains(&frac) {
            continue;
        }
        let mut mask = Array2::<bool>::default((bh, bw));
        for (pi, &(i, j)) in coords.iter().enumerate() {
            mask[[i, j]] = km.assignment[pi] == ci;
        }
        let (labels, sizes) = connected_components(&mask);
        let comps: Vec<usize> = (1..=sizes.len())
            .filter(|&l| sizes[l - 1] >= MIN_COMPONENT_PX)
            .collect();
        if comps.is_empty() || comps.len() > 60 {
            continue;
        }
        // Cluster bbox must span a text-like fraction of the region width.
        let (mut mx0, mut mx1) = (bw, 0usize);
        for i in 0..bh {
            for j in 0..bw {
                if mask[[i, j]] {
                    mx0 = mx0.min(j);
                    mx1 = mx1.max(j + 1);
                }
            }
        }
        if ((mx1 - mx0) as f64) < 0.4 * bw as f64 {
            continue;
        }
        let mut all_fill_ok = true;
        for &l in &comps {
            let (mut cy0, mut cy1, mut cx0, mut cx1) = (bh, 0usize, bw, 0usize);
            for i in 0..bh {
                for j in 0..bw {
                    if labels[[i, j]] == l {
                        cy0 = cy0.min(i);
                        cy1 = cy1.max(i + 1);
                        cx0 = cx0.min(j);
                        cx1 = cx1.max(j + 1);
                    }
                }
            }
            let fill = sizes[l - 1] as f64 / ((cy1 - cy0) * (cx1 - cx0)) as f64;
            if !(0.1..=0.95).contains(&fill) {
                all_fill_ok = false;
                break;
            }
        }
        if !all_fill_ok {
            continue;
        }
        let c = km.centers[ci];
        return Ok(Some(ColorLabel {
            rgb: [
                c[0].round().clamp(0.0, 255.0) as u8,
                c[1].round().clamp(0.0, 255.0) as u8,
                c[2].round().clamp(0.0, 255.0) as u8,
            ],
            confident: true,
        }));
    }
    Ok(None)
}

/// Minimal .npy (format 1.0) writer for f64 arrays; extraction results are
/// persisted as one file per key inside a per-line directory.
pub fn write_npy(path: &std::path::Path, arr: &ndarray::ArrayD<f64>) -> Result<()> {
    use std::io::Write;
    let shape = arr
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let shape_str = if arr.ndim() == 1 { format!("({shape},)") } else { format!("({shape})") };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_str}, }}");
    let total = 10 + header.len() + 1;
    let pad = (64 - total % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');
    let mut f = std::fs::File::create(path).map_err(|e| GlyphError::io(path, e))?;
    f.write_all(b"\x93NUMPY\x01\x00").map_err(|e| GlyphError::io(path, e))?;
    f.write_all(&(header.len() as u16).to_le_bytes())
        .map_err(|e| GlyphError::io(path, e))?;
    f.write_all(header.as_bytes()).map_err(|e| GlyphError::io(path, e))?;
    for v in arr.iter() {
        f.write_all(&v.to_le_bytes()).map_err(|e| GlyphError::io(path, e))?;
    }
    Ok(())
}

/// Reads back an f64 .npy written by [`write_npy`].
pub fn read_npy(path: &std::path::Path) -> Result<ndarray::ArrayD<f64>> {
    let buf = std::fs::read(path).map_err(|e| GlyphError::io(path, e))?;
    if buf.len() < 10 || &buf[..6] != b"\x93NUMPY" {
        return Err(GlyphError::Checkpoint("not an npy file".into()));
    }
    let hlen = u16::from_le_bytes([buf[8], buf[9]]) as usize;
    let header = std::str::from_utf8(&buf[10..10 + hlen])
        .map_err(|_| GlyphError::Checkpoint("bad npy header".into()))?;
    let shape_part = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| GlyphError::Checkpoint("bad npy shape".into()))?;
    let shape: Vec<usize> = shape_part
        .split(',')
        .filter_map(|t| t.trim().parse::<usize>().ok())
        .collect();
    let numel: usize = shape.iter().product();
    let data_start = 10 + hlen;
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = data_start + i * 8;
        data.push(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()));
    }
    ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
        .map_err(|e| GlyphError::Checkpoint(format!("npy shape: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_scene, IMG_SIZE};
    use ndarray::Array3;

    fn line_at(content: &str, font_id: usize, poly: Quad) -> TextLine {
        TextLine {
            content: content.into(),
            polygon: poly,
            font_id,
            color_rgb: [0, 0, 0],
            has_color_label: false,
        }
    }

    #[test]
    fn canvas_is_local_and_deterministic() {
        let poly: Quad = [[8.0, 8.0], [40.0, 8.0], [40.0, 24.0], [8.0, 24.0]];
        let lines = vec![line_at("Hi", 0, poly)];
        let a = render_glyph_canvas(&lines, 3).unwrap();
        let b = render_glyph_canvas(&lines, 3).unwrap();
        assert_eq!(a.l_g, b.l_g);
        assert_eq!(a.per_line_strips[0], b.per_line_strips[0]);
        assert!(a.l_g.sum() > 0.0);
        let inside = imgops::fill_quad(IMG_SIZE, IMG_SIZE, &poly);
        for i in 0..IMG_SIZE {
            for j in 0..IMG_SIZE {
                if a.l_g[[i, j]] > 0.0 {
                    assert!(inside[[i, j]] > 0.0, "ink outside the quad at {i},{j}");
                }
            }
        }
    }

    #[test]
    fn canvas_never_leaks_ground_truth_font() {
        let poly: Quad = [[4.0, 4.0], [60.0, 4.0], [60.0, 20.0], [4.0, 20.0]];
        for seed in 0..20u64 {
            let lines = vec![line_at("Abc", 2, poly)];
            let c = render_glyph_canvas(&lines, seed).unwrap();
            assert_ne!(c.render_fonts[0], 2, "seed {seed} leaked the ground-truth font");
        }
    }

    #[test]
    fn position_masks_union_and_edge_cases() {
        let q1: Quad = [[0.0, 0.0], [64.0, 0.0], [64.0, 64.0], [0.0, 64.0]];
        let full = render_position_masks(&[line_at("A", 0, q1)]).unwrap();
        assert_eq!(full.l_p.sum(), (IMG_SIZE * IMG_SIZE) as f64);

        let qa: Quad = [[2.0, 2.0], [20.0, 2.0], [20.0, 10.0], [2.0, 10.0]];
        let qb: Quad = [[2.0, 30.0], [20.0, 30.0], [20.0, 40.0], [2.0, 40.0]];
        let two = render_position_masks(&[line_at("A", 0, qa), line_at("B", 0, qb)]).unwrap();
        let area_sum: f64 = two.e_p_list.iter().map(|m| m.sum()).sum();
        assert_eq!(area_sum, two.l_p.sum(), "disjoint quads must tile their union");

        let empty = render_position_masks(&[]).unwrap();
        assert_eq!(empty.l_p.sum(), 0.0);
        assert!(empty.e_p_list.is_empty());

        let degenerate: Quad = [[1.0, 1.0], [5.0, 1.0], [9.0, 1.0], [1.0, 1.0]];
        assert!(render_position_masks(&[line_at("A", 0, degenerate)]).is_err());
    }

    /// Independent hole counter: background components (4-connectivity) of the
    /// patch complement that do not touch the border.
    fn count_holes(patch: &Array2<f64>) -> usize {
        let (h, w) = patch.dim();
        let mut visited = Array2::<bool>::default((h, w));
        let mut holes = 0;
        for si in 0..h {
            for sj in 0..w {
                if patch[[si, sj]] >= 0.5 || visited[[si, sj]] {
                    continue;
                }
                let mut stack = vec![(si, sj)];
                visited[[si, sj]] = true;
                let mut touches_border = false;
                while let Some((y, x)) = stack.pop() {
                    if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                        touches_border = true;
                    }
                    let neigh = [
                        (y.wrapping_sub(1), x),
                        (y + 1, x),
                        (y, x.wrapping_sub(1)),
                        (y, x + 1),
                    ];
                    for (ny, nx) in neigh {
                        if ny < h && nx < w && patch[[ny, nx]] < 0.5 && !visited[[ny, nx]] {
                            visited[[ny, nx]] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
                if !touches_border {
                    holes += 1;
                }
            }
        }
        holes
    }

    fn glyph_image(ch: char, invert: bool) -> (Array3<f64>, Quad) {
        // Black glyph on white (or inverted), scaled x3, with margin.
        let g = fonts::glyph_bitmap(0, ch).unwrap();
        let (gh, gw) = g.dim();
        let (h, w) = (gh * 3 + 8, gw * 3 + 8);
        let bg = if invert { 0.0 } else { 1.0 };
        let fg = 1.0 - bg;
        let mut img = Array3::<f64>::from_elem((h, w, 3), bg);
        for i in 0..gh * 3 {
            for j in 0..gw * 3 {
                if g[[i / 3, j / 3]] > 0.0 {
                    for c in 0..3 {
                        img[[4 + i, 4 + j, c]] = fg;
                    }
                }
            }
        }
        let quad: Quad = [
            [0.0, 0.0],
            [w as f64, 0.0],
            [w as f64, h as f64],
            [0.0, h as f64],
        ];
        (img, quad)
    }

    #[test]
    fn font_patch_preserves_topology_and_polarity() {
        let (img, quad) = glyph_image('A', false);
        let patch = extract_font_patch(&img, &quad).unwrap();
        assert!(patch.confident);
        assert!(patch.e_f.iter().all(|&v| v == 0.0 || v == 1.0));
        let frac = patch.e_f.sum() / patch.e_f.len() as f64;
        assert!(frac < 0.5, "foreground should be the minority, got {frac}");
        assert_eq!(count_holes(&patch.e_f), 1, "'A' must keep its one hole");

        let (inv, quad2) = glyph_image('A', true);
        let ipatch = extract_font_patch(&inv, &quad2).unwrap();
        let disagree = patch
            .e_f
            .iter()
            .zip(ipatch.e_f.iter())
            .filter(|(a, b)| a != b)
            .count() as f64
            / patch.e_f.len() as f64;
        assert!(disagree <= 0.02, "polarity invariance violated: {disagree}");
    }

    #[test]
    fn font_patch_degenerate_inputs() {
        let img = Array3::<f64>::from_elem((20, 40, 3), 0.5);
        let quad: Quad = [[0.0, 0.0], [40.0, 0.0], [40.0, 20.0], [0.0, 20.0]];
        let patch = extract_font_patch(&img, &quad).unwrap();
        assert!(!patch.confident);
        assert_eq!(patch.e_f.sum(), 0.0);

        let tiny: Quad = [[0.0, 0.0], [3.0, 0.0], [3.0, 3.0], [0.0, 3.0]];
        assert!(extract_font_patch(&img, &tiny).is_err(), "area below 16 px must error");
    }

    #[test]
    fn augment_identity_binarity_occlusion() {
        let (img, quad) = glyph_image('B', false);
        let patch = extract_font_patch(&img, &quad).unwrap();

        let same = augment_font_patch_with(&patch, &AugmentParams::neutral());
        assert_eq!(same.e_f, patch.e_f, "neutral transform must be the identity");

        for seed in 0..10u64 {
            let aug = augment_font_patch(&patch, seed);
            assert!(aug.e_f.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(aug.e_f.dim(), (STRIP_H, STRIP_W));
        }

        let occ_only = AugmentParams {
            occlusions: vec![[0.3, 0.2, 0.3, 0.4]],
            ..AugmentParams::neutral()
        };
        let occluded = augment_font_patch_with(&patch, &occ_only);
        assert!(occluded.e_f.sum() <= patch.e_f.sum());
    }

    fn stamp_text(
        img: &mut Array3<f64>,
        content: &str,
        color: [f64; 3],
        scale: usize,
        at: (usize, usize),
    ) -> Quad {
        let r = crop_ink(&fonts::raster_line(content, 0));
        let (rh, rw) = r.dim();
        for i in 0..rh * scale {
            for j in 0..rw * scale {
                if r[[i / scale, j / scale]] > 0.0 {
                    for c in 0..3 {
                        img[[at.0 + i, at.1 + j, c]] = color[c];
                    }
                }
            }
        }
        [
            [at.1 as f64 - 2.0, at.0 as f64 - 2.0],
            [(at.1 + rw * scale) as f64 + 2.0, at.0 as f64 - 2.0],
            [(at.1 + rw * scale) as f64 + 2.0, (at.0 + rh * scale) as f64 + 2.0],
            [at.1 as f64 - 2.0, (at.0 + rh * scale) as f64 + 2.0],
        ]
    }

    #[test]
    fn picker_recovers_red_on_white() {
        let mut img = Array3::<f64>::from_elem((64, 64, 3), 1.0);
        let color = [200.0 / 255.0, 30.0 / 255.0, 30.0 / 255.0];
        let quad = stamp_text(&mut img, "Red", color, 2, (20, 8));
        let label = pick_color(&img, &quad).unwrap().expect("confident");
        assert!((label.rgb[0] as f64 - 200.0).abs() <= 16.0);
        assert!((label.rgb[1] as f64 - 30.0).abs() <= 16.0);
        assert!((label.rgb[2] as f64 - 30.0).abs() <= 16.0);
    }

    #[test]
    fn picker_rejects_uniform_region() {
        let img = Array3::<f64>::from_elem((64, 64, 3), 0.42);
        let quad: Quad = [[4.0, 4.0], [40.0, 4.0], [40.0, 20.0], [4.0, 20.0]];
        assert!(pick_color(&img, &quad).unwrap().is_none());
    }

    #[test]
    fn picker_prefers_text_over_two_tone_background() {
        // Second tone occupies a narrow slab of the region; morphology must
        // reject both background tones and keep the glyph cluster.
        let mut img = Array3::<f64>::zeros((64, 64, 3));
        for i in 0..64 {
            for j in 0..64 {
                let v = if j < 10 { 0.55 } else { 0.85 };
                for c in 0..3 {
                    img[[i, j, c]] = v;
                }
            }
        }
        let blue = [20.0 / 255.0, 40.0 / 255.0, 220.0 / 255.0];
        let quad = stamp_text(&mut img, "Blu", blue, 2, (24, 14));
        let label = pick_color(&img, &quad).unwrap().expect("confident");
        assert!(
            (label.rgb[2] as f64 - 220.0).abs() <= 16.0 && label.rgb[2] > label.rgb[0],
            "wanted blue, got {:?}",
            label.rgb
        );
    }

    #[test]
    fn picker_is_deterministic() {
        let s = synth_scene(21, 2).unwrap();
        let a = pick_color(&s.image, &s.lines[0].polygon).unwrap();
        let b = pick_color(&s.image, &s.lines[0].polygon).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strips_are_aspect_normalized() {
        let poly: Quad = [[2.0, 2.0], [62.0, 2.0], [62.0, 18.0], [2.0, 18.0]];
        let c = render_glyph_canvas(&[line_at("Wide", 0, poly)], 1).unwrap();
        let strip = &c.per_line_strips[0];
        assert_eq!(strip.dim(), (STRIP_H, STRIP_W));
        assert!(strip.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(strip.sum() > 0.0);
    }

    #[test]
    fn npy_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let arr = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[3, 5]), |ix| {
            (ix[0] * 5 + ix[1]) as f64 * 0.25
        });
        let path = dir.path().join("x.npy");
        write_npy(&path, &arr).unwrap();
        let back = read_npy(&path).unwrap();
        assert_eq!(arr, back);
    }
}
