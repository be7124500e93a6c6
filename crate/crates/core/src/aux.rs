//! Auxiliary latent fusion: glyph canvas, position map and (optionally) a
//! masked image are each run through a small strided conv stem, concatenated
//! at latent resolution and merged by a zero-initialized 1x1 conv into the
//! auxiliary pixels z_a. The zero init keeps the whole path inert until
//! training moves it.

use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{GlyphError, Result};
use crate::nn::{Conv2d, NodeId, ParamStore, Tape};

pub const AUX_CHANNELS: usize = 32;

#[derive(Clone, Debug)]
pub struct AuxFuser {
    stem_g: [Conv2d; 2],
    stem_p: [Conv2d; 2],
    stem_m: [Conv2d; 2],
    out: Conv2d,
}

impl Default for AuxFuser {
    fn default() -> Self {
        Self::new()
    }
}

impl AuxFuser {
    pub fn new() -> Self {
        let stem = |tag: &str, cin: usize| {
            [
                Conv2d::new(format!("aux_fuser.{tag}1"), cin, 8, 3, 2, 1),
                Conv2d::new(format!("aux_fuser.{tag}2"), 8, 16, 3, 2, 1),
            ]
        };
        AuxFuser {
            stem_g: stem("g", 1),
            stem_p: stem("p", 1),
            stem_m: stem("m", 3),
            out: Conv2d::new("aux_fuser.out", 48, AUX_CHANNELS, 1, 1, 0).zero_init(),
        }
    }

    pub fn register(&self, store: &mut ParamStore) {
        for c in self.stem_g.iter().chain(&self.stem_p).chain(&self.stem_m) {
            c.register(store, true);
        }
        self.out.register(store, true);
    }

    /// l_g, l_p: (N,1,64,64); l_m: (N,3,64,64). Returns (N,32,16,16).
    pub fn fuse(&self, t: &mut Tape, l_g: NodeId, l_p: NodeId, l_m: NodeId) -> NodeId {
        let run = |t: &mut Tape, stem: &[Conv2d; 2], x: NodeId| {
            let a = stem[0].fwd(t, x);
            let a = t.g.silu(a);
            let b = stem[1].fwd(t, a);
            t.g.silu(b)
        };
        let fg = run(t, &self.stem_g, l_g);
        let fp = run(t, &self.stem_p, l_p);
        let fm = run(t, &self.stem_m, l_m);
        let cat = t.g.concat(&[fg, fp, fm], 1);
        self.out.fwd(t, cat)
    }
}

/// Stacks per-sample single-channel 64x64 maps into a (N,1,64,64) array.
pub fn stack_maps(maps: &[Array2<f64>]) -> Result<Array4<f64>> {
    let n = maps.len();
    let mut out = Array4::<f64>::zeros((n, 1, 64, 64));
    for (i, m) in maps.iter().enumerate() {
        if m.dim() != (64, 64) {
            return Err(GlyphError::shape("aux map", "(64, 64)", format!("{:?}", m.dim())));
        }
        out.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(m);
    }
    Ok(out)
}

/// Stacks per-sample HWC images (or `None` for the empty sentinel) into CHW.
pub fn stack_images(images: &[Option<&Array3<f64>>]) -> Result<Array4<f64>> {
    let n = images.len();
    let mut out = Array4::<f64>::zeros((n, 3, 64, 64));
    for (i, m) in images.iter().enumerate() {
        if let Some(img) = m {
            if img.dim() != (64, 64, 3) {
                return Err(GlyphError::shape("aux image", "(64, 64, 3)", format!("{:?}", img.dim())));
            }
            for y in 0..64 {
                for x in 0..64 {
                    for c in 0..3 {
                        out[[i, c, y, x]] = img[[y, x, c]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The masked image used by editing mode: original pixels outside every text
/// region, zero inside.
pub fn masked_image(image: &Array3<f64>, l_p: &Array2<f64>) -> Array3<f64> {
    let mut out = image.clone();
    for y in 0..64 {
        for x in 0..64 {
            if l_p[[y, x]] > 0.0 {
                for c in 0..3 {
                    out[[y, x, c]] = 0.0;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use ndarray::Array4;

    #[test]
    fn zero_init_fuser_is_inert_for_any_input() {
        let mut store = ParamStore::new(11);
        let fuser = AuxFuser::new();
        fuser.register(&mut store);
        let mut t = Tape::new(&store);
        let lg = t.g.constant(Array4::<f64>::from_elem((2, 1, 64, 64), 0.7).into_dyn());
        let lp = t.g.constant(Array4::<f64>::zeros((2, 1, 64, 64)).into_dyn());
        let lm = t.g.constant(Array4::<f64>::from_elem((2, 3, 64, 64), 0.3).into_dyn());
        let z = fuser.fuse(&mut t, lg, lp, lm);
        assert_eq!(t.g.value(z).shape(), &[2, AUX_CHANNELS, 16, 16]);
        assert!(t.g.value(z).iter().all(|&v| v == 0.0), "zero-init output conv must gate");
    }

    #[test]
    fn fuser_sees_lm_pixels_everywhere_after_training_moves_weights() {
        // Masking is the caller's job: with a nonzero output conv, pixels of
        // l_m far from any mask still change z_a.
        let mut store = ParamStore::new(12);
        let fuser = AuxFuser::new();
        fuser.register(&mut store);
        store.get_mut("aux_fuser.out.w").value.fill(0.01);
        let run = |store: &ParamStore, val: f64| {
            let mut t = Tape::new(store);
            let lg = t.g.constant(Array4::<f64>::zeros((1, 1, 64, 64)).into_dyn());
            let lp = t.g.constant(Array4::<f64>::zeros((1, 1, 64, 64)).into_dyn());
            let mut lm = Array4::<f64>::zeros((1, 3, 64, 64));
            lm[[0, 0, 2, 2]] = val;
            let lm = t.g.constant(lm.into_dyn());
            let z = fuser.fuse(&mut t, lg, lp, lm);
            t.g.value(z).clone()
        };
        let a = run(&store, 0.0);
        let b = run(&store, 1.0);
        assert!(a != b, "z_a must react to out-of-mask l_m pixels");
    }
}
