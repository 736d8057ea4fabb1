//! Independent reference implementations shared by the integration tests.
//! Written as plain scalar loops, without calling into the metric code.

#![allow(dead_code)]

use flowiid_core::image_plane::ImagePlane;

pub fn random_plane(seed: u64, c: usize, h: usize, w: usize) -> ImagePlane {
    use rand::Rng;
    let mut rng = flowiid_core::rng::seeded(seed);
    ImagePlane::from_fn(c, h, w, |_, _, _| rng.random::<f32>())
}

pub fn brute_mse(p: &ImagePlane, g: &ImagePlane) -> f64 {
    let n = p.data().len() as f64;
    p.data()
        .iter()
        .zip(g.data())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / n
}

/// Scans every window position, solves the shared scale by closed form.
pub fn brute_lmse(p: &ImagePlane, g: &ImagePlane, window: usize, stride: usize) -> f64 {
    let (c, h, w) = (p.channels(), p.height(), p.width());
    let (mut num, mut den) = (0.0f64, 0.0f64);
    let mut y = 0;
    while y + window <= h {
        let mut x = 0;
        while x + window <= w {
            let (mut pg, mut pp, mut gg) = (0.0f64, 0.0f64, 0.0f64);
            for ch in 0..c {
                for yy in y..y + window {
                    for xx in x..x + window {
                        let a = p.get(ch, yy, xx) as f64;
                        let b = g.get(ch, yy, xx) as f64;
                        pg += a * b;
                        pp += a * a;
                        gg += b * b;
                    }
                }
            }
            let alpha = if pp > 0.0 { pg / pp } else { 0.0 };
            let mut r = 0.0;
            for ch in 0..c {
                for yy in y..y + window {
                    for xx in x..x + window {
                        let d = alpha * p.get(ch, yy, xx) as f64 - g.get(ch, yy, xx) as f64;
                        r += d * d;
                    }
                }
            }
            num += r;
            den += gg;
            x += stride;
        }
        y += stride;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// SSIM with an explicit 2-D Gaussian window at every valid position.
pub fn brute_ssim(p: &ImagePlane, g: &ImagePlane) -> f64 {
    let k = 11usize;
    let sigma = 1.5f64;
    let mut kernel = vec![vec![0.0f64; k]; k];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let di = i as f64 - 5.0;
            let dj = j as f64 - 5.0;
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let (h, w) = (p.height(), p.width());
    let mut acc = 0.0;
    for ch in 0..p.channels() {
        let mut sum = 0.0;
        let mut count = 0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wgt = kernel[i][j] / total;
                        let a = p.get(ch, y + i, x + j) as f64;
                        let b = g.get(ch, y + i, x + j) as f64;
                        mx += wgt * a;
                        my += wgt * b;
                        xx += wgt * a * a;
                        yy += wgt * b * b;
                        xy += wgt * a * b;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc += sum / count as f64;
    }
    acc / p.channels() as f64
}

// Parameter ledger helpers: element counts per layer type.
pub fn conv(i: usize, o: usize, k: usize) -> usize {
    i * o * k * k + o
}
pub fn gn(c: usize) -> usize {
    2 * c
}
pub fn linear(i: usize, o: usize) -> usize {
    i * o + o
}
pub fn resblock(i: usize, o: usize, temb: Option<usize>) -> usize {
    gn(i) + conv(i, o, 3) + temb.map_or(0, |t| linear(t, o)) + gn(o) + conv(o, o, 3) + if i != o { conv(i, o, 1) } else { 0 }
}
pub fn attention(c: usize) -> usize {
    gn(c) + linear(c, 3 * c) + linear(c, c)
}
