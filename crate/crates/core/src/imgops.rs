//! Small image utilities shared by the dataset renderer, attribute extraction
//! and evaluation: resizing, grayscale, PSNR, convex-quad rasterization.

use ndarray::{Array2, Array3};

/// Nearest-neighbor resize of a single-channel image.
pub fn resize_nearest(src: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let si = (i * sh / h).min(sh - 1);
        let sj = (j * sw / w).min(sw - 1);
        src[[si, sj]]
    })
}

/// Bilinear resize of a single-channel image.
pub fn resize_bilinear(src: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let fy = (i as f64 + 0.5) * sh as f64 / h as f64 - 0.5;
        let fx = (j as f64 + 0.5) * sw as f64 / w as f64 - 0.5;
        let y0 = fy.floor().max(0.0) as usize;
        let x0 = fx.floor().max(0.0) as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let dy = (fy - y0 as f64).clamp(0.0, 1.0);
        let dx = (fx - x0 as f64).clamp(0.0, 1.0);
        src[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + src[[y0, x1]] * (1.0 - dy) * dx
            + src[[y1, x0]] * dy * (1.0 - dx)
            + src[[y1, x1]] * dy * dx
    })
}

/// Luminance of an (H,W,3) image in [0,1].
pub fn to_gray(img: &Array3<f64>) -> Array2<f64> {
    let (h, w, _) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        0.299 * img[[i, j, 0]] + 0.587 * img[[i, j, 1]] + 0.114 * img[[i, j, 2]]
    })
}

/// Peak signal-to-noise ratio between two images with values in [0,1].
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (1.0 / mse).log10()
}

pub type Quad = [[f64; 2]; 4];

/// Signed area of a quad (shoelace). Positive for counter-clockwise order.
pub fn quad_area(q: &Quad) -> f64 {
    let mut s = 0.0;
    for i in 0..4 {
        let [x0, y0] = q[i];
        let [x1, y1] = q[(i + 1) % 4];
        s += x0 * y1 - x1 * y0;
    }
    s / 2.0
}

/// True if the quad is convex and non-degenerate (consistent turn direction).
pub fn quad_is_convex(q: &Quad) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let [ax, ay] = q[i];
        let [bx, by] = q[(i + 1) % 4];
        let [cx, cy] = q[(i + 2) % 4];
        let cross = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
        if cross.abs() < 1e-12 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Point-in-convex-quad test (pixel centers against vertex order either way).
pub fn point_in_quad(q: &Quad, x: f64, y: f64) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let [ax, ay] = q[i];
        let [bx, by] = q[(i + 1) % 4];
        let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        if cross.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Binary mask of a convex quad's interior, sampled at pixel centers.
pub fn fill_quad(h: usize, w: usize, q: &Quad) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(i, j)| {
        if point_in_quad(q, j as f64 + 0.5, i as f64 + 0.5) {
            1.0
        } else {
            0.0
        }
    })
}

/// Axis-aligned integer bounding box (x0, y0, x1, y1), half-open, clamped.
pub fn quad_bbox(q: &Quad, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let xs = q.iter().map(|p| p[0]);
    let ys = q.iter().map(|p| p[1]);
    let x0 = xs.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let x1 = (xs.fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(w);
    let y0 = ys.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let y1 = (ys.fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(h);
    (x0, y0, x1, y1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn quad_fill_and_area_agree_for_rect() {
        let q: Quad = [[2.0, 3.0], [10.0, 3.0], [10.0, 7.0], [2.0, 7.0]];
        let mask = fill_quad(16, 16, &q);
        assert_eq!(mask.sum() as i64, 32); // 8x4 pixels
        assert!((quad_area(&q).abs() - 32.0).abs() < 1e-9);
        assert!(quad_is_convex(&q));
    }

    #[test]
    fn degenerate_quad_rejected() {
        let q: Quad = [[0.0, 0.0], [4.0, 0.0], [8.0, 0.0], [0.0, 0.0]];
        assert!(!quad_is_convex(&q));
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = Array3::<f64>::from_elem((4, 4, 3), 0.5);
        assert!(psnr(&a, &a).is_infinite());
    }
}
