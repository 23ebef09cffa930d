//! Channel- and row-wise broadcasting ops.

use crate::graph::Var;
use crate::tensor::Tensor;

/// Splits `[N, C, rest..]` into (n, c, inner).
fn channel_split(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel op needs rank >= 2, got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Whether `b` is per-channel `[C]` (false) or per-sample-channel `[N, C]` (true).
fn per_sample(b: &[usize], n: usize, c: usize, op: &str) -> bool {
    if b == [c] {
        false
    } else if b == [n, c] {
        true
    } else {
        panic!("{op}: operand {b:?} does not broadcast over [{n}, {c}, ..]")
    }
}

impl<'g> Var<'g> {
    /// `x[n, c, ..] + b[c]` or `x[n, c, ..] + b[n, c]`.
    pub fn add_channel(self, b: Var<'g>) -> Var<'g> {
        let x = self.value();
        let bv = b.value();
        let (n, c, inner) = channel_split(x.shape());
        let ps = per_sample(bv.shape(), n, c, "add_channel");
        let mut out = x.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let v = bv.data()[if ps { ni * c + ci } else { ci }];
                let base = (ni * c + ci) * inner;
                out[base..base + inner].iter_mut().for_each(|o| *o += v);
            }
        }
        let b_shape = bv.shape().to_vec();
        self.g.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, b],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut gb = vec![0f32; b_shape.iter().product()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            let s: f32 = g.data()[base..base + inner].iter().sum();
                            gb[if ps { ni * c + ci } else { ci }] += s;
                        }
                    }
                    Tensor::from_parts(b_shape.clone(), gb)
                });
                vec![Some(g.clone()), gb]
            }),
        )
    }

    /// `x[n, c, ..] * s[c]` or `x[n, c, ..] * s[n, c]`.
    pub fn mul_channel(self, s: Var<'g>) -> Var<'g> {
        let x = self.value();
        let sv = s.value();
        let (n, c, inner) = channel_split(x.shape());
        let ps = per_sample(sv.shape(), n, c, "mul_channel");
        let idx = move |ni: usize, ci: usize| if ps { ni * c + ci } else { ci };
        let mut out = x.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let v = sv.data()[idx(ni, ci)];
                let base = (ni * c + ci) * inner;
                out[base..base + inner].iter_mut().for_each(|o| *o *= v);
            }
        }
        let s_shape = sv.shape().to_vec();
        self.g.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, s],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = g.data().to_vec();
                    for ni in 0..n {
                        for ci in 0..c {
                            let v = sv.data()[idx(ni, ci)];
                            let base = (ni * c + ci) * inner;
                            gx[base..base + inner].iter_mut().for_each(|o| *o *= v);
                        }
                    }
                    Tensor::from_parts(g.shape().to_vec(), gx)
                });
                let gs = needs[1].then(|| {
                    let mut gs = vec![0f32; s_shape.iter().product()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            let d: f32 = g.data()[base..base + inner]
                                .iter()
                                .zip(&x.data()[base..base + inner])
                                .map(|(a, b)| a * b)
                                .sum();
                            gs[idx(ni, ci)] += d;
                        }
                    }
                    Tensor::from_parts(s_shape.clone(), gs)
                });
                vec![gx, gs]
            }),
        )
    }

    /// Multiplies sample `i` of `x[N, ..]` by constant `s[i]`.
    pub fn scale_batch(self, s: &[f32]) -> Var<'g> {
        let shape = self.shape();
        assert_eq!(shape[0], s.len(), "scale_batch: batch size mismatch");
        let inner: usize = shape[1..].iter().product();
        let s = s.to_vec();
        let apply = move |t: &Tensor| {
            let mut d = t.data().to_vec();
            for (i, chunk) in d.chunks_mut(inner.max(1)).enumerate() {
                chunk.iter_mut().for_each(|v| *v *= s[i]);
            }
            Tensor::from_parts(t.shape().to_vec(), d)
        };
        let out = apply(&self.value());
        self.g.push(out, &[self], Box::new(move |g, _| vec![Some(apply(g))]))
    }

    /// `x[.., C] + b[C]`.
    pub fn add_bias(self, b: Var<'g>) -> Var<'g> {
        let x = self.value();
        let bv = b.value();
        let c = *x.shape().last().expect("add_bias on scalar");
        assert_eq!(bv.shape(), [c], "add_bias: bias {:?} vs last dim {c}", bv.shape());
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
        }
        self.g.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, b],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut gb = vec![0f32; c];
                    for row in g.data().chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    Tensor::from_parts(vec![c], gb)
                });
                vec![Some(g.clone()), gb]
            }),
        )
    }

    /// `x[.., C] * s[C]`.
    pub fn mul_lastdim(self, s: Var<'g>) -> Var<'g> {
        let x = self.value();
        let sv = s.value();
        let c = *x.shape().last().expect("mul_lastdim on scalar");
        assert_eq!(sv.shape(), [c], "mul_lastdim: scale {:?} vs last dim {c}", sv.shape());
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(sv.data()).for_each(|(o, s)| *o *= s);
        }
        self.g.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, s],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = g.data().to_vec();
                    for row in gx.chunks_mut(c) {
                        row.iter_mut().zip(sv.data()).for_each(|(o, s)| *o *= s);
                    }
                    Tensor::from_parts(g.shape().to_vec(), gx)
                });
                let gs = needs[1].then(|| {
                    let mut gs = vec![0f32; c];
                    for (grow, xrow) in g.data().chunks(c).zip(x.data().chunks(c)) {
                        for i in 0..c {
                            gs[i] += grow[i] * xrow[i];
                        }
                    }
                    Tensor::from_parts(vec![c], gs)
                });
                vec![gx, gs]
            }),
        )
    }

    /// Repeats `x[..]` into `[n, ..]`.
    pub fn repeat_batch(self, n: usize) -> Var<'g> {
        let x = self.value();
        let inner = x.numel();
        let mut shape = vec![n];
        shape.extend_from_slice(x.shape());
        let mut data = Vec::with_capacity(n * inner);
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let xs = x.shape().to_vec();
        self.g.push(
            Tensor::from_parts(shape, data),
            &[self],
            Box::new(move |g, _| {
                let mut acc = vec![0f32; inner];
                for chunk in g.data().chunks(inner.max(1)) {
                    acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![Some(Tensor::from_parts(xs.clone(), acc))]
            }),
        )
    }

    /// Rows of a `[V, D]` table selected by `ids`, giving `[ids.len(), D]`.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'g> {
        let t = self.value();
        assert_eq!(t.dims(), 2, "gather_rows needs a 2-D table");
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "gather_rows: id {i} out of range {v}");
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        self.g.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            &[self],
            Box::new(move |g, _| {
                let mut acc = vec![0f32; v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        acc[i * d + j] += g.data()[r * d + j];
                    }
                }
                vec![Some(Tensor::from_parts(vec![v, d], acc))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn channel_bias_gradient_sums_over_batch_and_space() {
        let g = Graph::detached(true);
        let x = g.leaf(Tensor::zeros(&[2, 3, 2, 2]), true);
        let b = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let y = x.add_channel(b);
        assert_eq!(y.value().data()[4], 2.0);
        let grads = g.backward(y.sum());
        assert_eq!(grads.get(b).unwrap().data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn per_sample_scale() {
        let g = Graph::detached(true);
        let x = g.leaf(Tensor::ones(&[2, 2, 1]), true);
        let s = g.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = x.mul_channel(s);
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let grads = g.backward(y.sum());
        assert_eq!(grads.get(s).unwrap().data(), &[1.0; 4]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
