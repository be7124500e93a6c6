use glyphgen::{attr, dataset};

#[test]
fn probe_color_picker_stats() {
    let mut confident = 0usize;
    let mut within = 0usize;
    let mut total_lines = 0usize;
    for seed in 0..120u64 {
        let s = dataset::synth_scene(seed * 7 + 1, 1 + (seed % 3) as usize).unwrap();
        for line in &s.lines {
            total_lines += 1;
            if let Some(label) = attr::pick_color(&s.image, &line.polygon).unwrap() {
                confident += 1;
                let ok = (0..3).all(|c| (label.rgb[c] as f64 - line.color_rgb[c] as f64).abs() <= 16.0);
                if ok { within += 1; }
            }
        }
    }
    println!("lines={total_lines} confident={confident} ({:.1}%) within16={within} ({:.1}% of confident)",
        100.0*confident as f64/total_lines as f64, 100.0*within as f64/confident.max(1) as f64);
}

#[test]
fn probe_codec_glyph_legibility_and_latent_stats() {
    use glyphgen::latent;
    use ndarray::{Array2, Array3};

    // Latent channel stats over dataset images
    let mut ch_stats = [(0.0f64, 0.0f64); 4];
    let mut nimg = 0.0;
    for seed in 0..20u64 {
        let s = dataset::synth_scene(seed + 500, 1 + (seed % 2) as usize).unwrap();
        let z = latent::encode_latent(&s.image).unwrap();
        for c in 0..4 {
            let sl = z.index_axis(ndarray::Axis(0), c);
            let m = sl.mean().unwrap();
            let v = sl.mapv(|x| (x - m) * (x - m)).mean().unwrap();
            ch_stats[c].0 += m;
            ch_stats[c].1 += v.sqrt();
        }
        nimg += 1.0;
    }
    for c in 0..4 {
        println!("latent ch{c}: mean={:.3} std={:.3}", ch_stats[c].0 / nimg, ch_stats[c].1 / nimg);
    }

    // Glyph template matching through the codec: render single chars big (scale 3),
    // roundtrip, extract gray crop, nearest-template over the 36-char pool.
    let pool: Vec<char> = ('A'..='Z').chain('0'..='9').collect();
    let render_char = |ch: char, scale: usize| -> Array3<f64> {
        let g = glyphgen::fonts::glyph_bitmap(0, ch).unwrap();
        let (gh, gw) = g.dim();
        let mut img = Array3::<f64>::from_elem((64, 64, 3), 0.9);
        let (oy, ox) = (20, 20);
        for i in 0..gh * scale {
            for j in 0..gw * scale {
                if g[[i / scale, j / scale]] > 0.0 {
                    for c in 0..3 {
                        img[[oy + i, ox + j, c]] = 0.05;
                    }
                }
            }
        }
        img
    };
    let crop_gray = |img: &Array3<f64>, scale: usize| -> Array2<f64> {
        Array2::from_shape_fn((7 * scale + 4, 5 * scale + 4), |(i, j)| {
            let y = 18 + i;
            let x = 18 + j;
            0.299 * img[[y, x, 0]] + 0.587 * img[[y, x, 1]] + 0.114 * img[[y, x, 2]]
        })
    };
    for scale in [2usize, 3] {
        let templates: Vec<Array2<f64>> = pool
            .iter()
            .map(|&ch| {
                let img = render_char(ch, scale);
                let rt = latent::decode_latent(&latent::encode_latent(&img).unwrap()).unwrap();
                crop_gray(&rt, scale)
            })
            .collect();
        let mut correct = 0;
        for (gt, _) in pool.iter().enumerate() {
            let probe = &templates[gt];
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (ti, t) in templates.iter().enumerate() {
                if ti == gt { continue; }
                let d: f64 = probe.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < bd { bd = d; best = ti; }
            }
            // distance to own template is 0; measure margin to nearest other
            let self_d = 0.0f64;
            if bd > self_d { correct += 1; }
            let _ = best;
        }
        // margin statistics: min inter-template distance
        let mut min_inter = f64::INFINITY;
        let mut mean_inter = 0.0;
        let mut cnt = 0.0;
        for i in 0..templates.len() {
            for j in i + 1..templates.len() {
                let d: f64 = templates[i].iter().zip(templates[j].iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                min_inter = min_inter.min(d);
                mean_inter += d;
                cnt += 1.0;
            }
        }
        println!("scale {scale}: all {} templates separable={}, min inter-dist {:.3}, mean {:.3}",
            pool.len(), correct == pool.len(), min_inter, mean_inter / cnt);
    }
}
