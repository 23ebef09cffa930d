//! Raster filters shared by degradation, metrics and losses.

use crate::image::ImageTensor;

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur with replicate borders.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let k = gaussian_kernel(sigma, radius);
    let (h, w, c) = img.shape();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = ImageTensor::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0f64;
                for (i, &t) in k.iter().enumerate() {
                    let xx = clampi(x as isize + i as isize - radius as isize, w);
                    s += t * img.get(y, xx, ch) as f64;
                }
                tmp.set(y, x, ch, s as f32);
            }
        }
    }
    let mut out = ImageTensor::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0f64;
                for (i, &t) in k.iter().enumerate() {
                    let yy = clampi(y as isize + i as isize - radius as isize, h);
                    s += t * tmp.get(yy, x, ch) as f64;
                }
                out.set(y, x, ch, s as f32);
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centres and clamped borders.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (h, w, c) = img.shape();
    let mut out = ImageTensor::filled(out_h, out_w, c, 0.0);
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for y in 0..out_h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..out_w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - tx) + img.get(y0, x1, ch) * tx;
                let bot = img.get(y1, x0, ch) * (1.0 - tx) + img.get(y1, x1, ch) * tx;
                out.set(y, x, ch, top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

/// Largest Sobel magnitude on [0, 1] inputs: `|(4, 2)| = 2 * sqrt(5)`.
/// The magnitude is convex in the patch, so the maximum sits on a binary patch.
pub const SOBEL_MAX: f32 = 4.472_136;

/// Per-channel Sobel magnitude with replicate padding, scaled into [0, 1].
pub fn sobel(img: &ImageTensor) -> ImageTensor {
    let (h, w, c) = img.shape();
    let at = |y: isize, x: isize, ch: usize| {
        img.get(y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize, ch)
    };
    let mut out = ImageTensor::filled(h, w, c, 0.0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for ch in 0..c {
                let gx = (at(y - 1, x + 1, ch) + 2.0 * at(y, x + 1, ch) + at(y + 1, x + 1, ch))
                    - (at(y - 1, x - 1, ch) + 2.0 * at(y, x - 1, ch) + at(y + 1, x - 1, ch));
                let gy = (at(y + 1, x - 1, ch) + 2.0 * at(y + 1, x, ch) + at(y + 1, x + 1, ch))
                    - (at(y - 1, x - 1, ch) + 2.0 * at(y - 1, x, ch) + at(y - 1, x + 1, ch));
                out.set(y as usize, x as usize, ch, (gx * gx + gy * gy).sqrt() / SOBEL_MAX);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sobel_max_matches_exhaustive_search() {
        let mut best = 0f32;
        for bits in 0u32..512 {
            let p: Vec<f32> = (0..9).map(|i| ((bits >> i) & 1) as f32).collect();
            let gx = (p[2] + 2.0 * p[5] + p[8]) - (p[0] + 2.0 * p[3] + p[6]);
            let gy = (p[6] + 2.0 * p[7] + p[8]) - (p[0] + 2.0 * p[1] + p[2]);
            best = best.max((gx * gx + gy * gy).sqrt());
        }
        assert!((best - SOBEL_MAX).abs() < 1e-6);
    }

    #[test]
    fn sobel_step_edge_peaks_beside_the_step() {
        // columns 0..2 dark, 3..4 bright: the step lies between columns 2 and 3
        let data: Vec<f32> = (0..25).map(|i| if i % 5 >= 3 { 1.0 } else { 0.0 }).collect();
        let img = ImageTensor::new(5, 5, 1, data).unwrap();
        let s = sobel(&img);
        for y in 0..5 {
            assert!((s.get(y, 2, 0) - 4.0 / SOBEL_MAX).abs() < 1e-6);
            assert!((s.get(y, 3, 0) - 4.0 / SOBEL_MAX).abs() < 1e-6);
            assert_eq!(s.get(y, 0, 0), 0.0);
        }
    }

    #[test]
    fn blur_and_resize_keep_constants() {
        let img = ImageTensor::filled(9, 7, 3, 0.37);
        for v in gaussian_blur(&img, 1.3).data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
        for v in resize_bilinear(&img, 3, 4).data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }
}
