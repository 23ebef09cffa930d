//! 2-D convolution via im2col + gemm, forward and backward.

use crate::gemm::{gemm, Layout};
use crate::graph::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f32], g: &Geom, out: &mut [f32]) {
    let cols = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols_data: &[f32], g: &Geom, dx: &mut [f32]) {
    let cols = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let prow = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            prow[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    /// Zero-padded square-kernel convolution of `[N, Cin, H, W]` with
    /// weights `[Cout, Cin, k, k]`.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        let wt = weight.value();
        let xs = x.shape();
        let ws = wt.shape();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d shapes {xs:?} * {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} * {ws:?}");
        assert_eq!(ws[2], ws[3], "conv2d needs a square kernel");
        let (n, cout, k) = (xs[0], ws[0], ws[2]);
        assert!(xs[2] + 2 * pad >= k && xs[3] + 2 * pad >= k, "conv2d input smaller than kernel");
        let geom = Geom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let (rows, cols) = (geom.rows(), geom.cols());
        let in_sz = geom.cin * geom.h * geom.w;
        let mut col_buf = vec![0f32; n * rows * cols];
        let mut out = vec![0f32; n * cout * cols];
        for i in 0..n {
            let cb = &mut col_buf[i * rows * cols..(i + 1) * rows * cols];
            im2col(&x.data()[i * in_sz..(i + 1) * in_sz], &geom, cb);
            gemm(
                cout,
                rows,
                cols,
                1.0,
                wt.data(),
                Layout::row_major(rows, false),
                cb,
                Layout::row_major(cols, false),
                0.0,
                &mut out[i * cout * cols..(i + 1) * cout * cols],
            );
        }
        let x_shape = xs.to_vec();
        let w_shape = ws.to_vec();
        self.g.push(
            Tensor::from_parts(vec![n, cout, geom.ho, geom.wo], out),
            &[self, weight],
            Box::new(move |g, needs| {
                let gd = g.data();
                let gw = needs[1].then(|| {
                    let mut gw = vec![0f32; cout * rows];
                    for i in 0..n {
                        gemm(
                            cout,
                            cols,
                            rows,
                            1.0,
                            &gd[i * cout * cols..(i + 1) * cout * cols],
                            Layout::row_major(cols, false),
                            &col_buf[i * rows * cols..(i + 1) * rows * cols],
                            Layout::row_major(cols, true),
                            1.0,
                            &mut gw,
                        );
                    }
                    Tensor::from_parts(w_shape.clone(), gw)
                });
                let gx = needs[0].then(|| {
                    let mut gx = vec![0f32; n * in_sz];
                    let mut dcols = vec![0f32; rows * cols];
                    for i in 0..n {
                        gemm(
                            rows,
                            cout,
                            cols,
                            1.0,
                            wt.data(),
                            Layout::row_major(rows, true),
                            &gd[i * cout * cols..(i + 1) * cout * cols],
                            Layout::row_major(cols, false),
                            0.0,
                            &mut dcols,
                        );
                        col2im(&dcols, &geom, &mut gx[i * in_sz..(i + 1) * in_sz]);
                    }
                    Tensor::from_parts(x_shape.clone(), gx)
                });
                vec![gx, gw]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    /// Direct-loop reference convolution.
    fn naive(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f32> {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0f32; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ii = (i * stride + ki) as isize - pad as isize;
                                    let jj = (j * stride + kj) as isize - pad as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                        s += x.data()[((b * cin + ci) * h + ii as usize) * wd + jj as usize]
                                            * w.data()[((co * cin + ci) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out[((b * cout + co) * ho + i) * wo + j] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let g = Graph::detached(false);
            let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), stride, pad).value();
            let want = naive(&x, &w, stride, pad);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let w0 = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            naive(x, w, 2, 1).iter().map(|v| (*v as f64).powi(2)).sum()
        };
        let g = Graph::detached(true);
        let xv = g.leaf(x0.clone(), true);
        let wv = g.leaf(w0.clone(), true);
        let grads = g.backward(xv.conv2d(wv, 2, 1).sqr().sum());
        let eps = 1e-2;
        for idx in [0, 7, 24, 49] {
            let mut xp = x0.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[idx] -= eps;
            let num = (loss(&xp, &w0) - loss(&xm, &w0)) / (2.0 * eps as f64);
            let ana = grads.get(xv).unwrap().data()[idx] as f64;
            assert!((num - ana).abs() < 1e-2 * (1.0 + num.abs()), "x[{idx}] {num} vs {ana}");
        }
        for idx in [0, 10, 53] {
            let mut wp = w0.clone();
            wp.data_mut()[idx] += eps;
            let mut wm = w0.clone();
            wm.data_mut()[idx] -= eps;
            let num = (loss(&x0, &wp) - loss(&x0, &wm)) / (2.0 * eps as f64);
            let ana = grads.get(wv).unwrap().data()[idx] as f64;
            assert!((num - ana).abs() < 1e-2 * (1.0 + num.abs()), "w[{idx}] {num} vs {ana}");
        }
    }
}
