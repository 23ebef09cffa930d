use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let s = x.sum() as f32;
        let shape = x.shape().to_vec();
        self.g.push(
            Tensor::scalar(s),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f32;
        self.sum().scale(1.0 / n)
    }

    /// Mean over every axis after the first `keep` axes.
    pub fn mean_trailing(self, keep: usize) -> Var<'g> {
        let x = self.value();
        assert!(keep <= x.dims(), "mean_trailing: keep {keep} > rank {}", x.dims());
        let outer: usize = x.shape()[..keep].iter().product();
        let inner: usize = x.shape()[keep..].iter().product();
        let out: Vec<f32> = x
            .data()
            .chunks(inner.max(1))
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as f32)
            .collect();
        debug_assert_eq!(out.len(), outer);
        let in_shape = x.shape().to_vec();
        self.g.push(
            Tensor::from_parts(x.shape()[..keep].to_vec(), out),
            &[self],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(outer * inner);
                for &gv in g.data() {
                    d.extend(std::iter::repeat(gv / inner as f32).take(inner));
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), d))]
            }),
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(self) -> Var<'g> {
        let x = self.value();
        let d = *x.shape().last().expect("softmax on scalar");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = std::sync::Arc::new(Tensor::from_parts(x.shape().to_vec(), out));
        let ys = y.clone();
        self.g.push(
            (*y).clone(),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0f32; g.numel()];
                for ((grow, yrow), orow) in
                    g.data().chunks(d).zip(ys.data().chunks(d)).zip(gx.chunks_mut(d))
                {
                    let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        orow[i] = yrow[i] * (grow[i] - dot);
                    }
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
            }),
        )
    }

    /// Log of the softmax over the last axis.
    pub fn log_softmax(self) -> Var<'g> {
        let x = self.value();
        let d = *x.shape().last().expect("log_softmax on scalar");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|v| ((v - m) as f64).exp()).sum::<f64>().ln() as f32;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let y = Tensor::from_parts(x.shape().to_vec(), out);
        let ys = y.clone();
        self.g.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0f32; g.numel()];
                for ((grow, yrow), orow) in
                    g.data().chunks(d).zip(ys.data().chunks(d)).zip(gx.chunks_mut(d))
                {
                    let total: f32 = grow.iter().sum();
                    for i in 0..d {
                        orow[i] = grow[i] - yrow[i].exp() * total;
                    }
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
            }),
        )
    }

    /// Multiplies by `s`, whose shape is a leading prefix of `self`'s shape,
    /// broadcasting over the remaining axes.
    pub fn mul_prefix(self, s: Var<'g>) -> Var<'g> {
        let (x, sv) = (self.value(), s.value());
        let k = sv.dims();
        assert!(k <= x.dims() && x.shape()[..k] == *sv.shape(), "mul_prefix: {:?} by {:?}", x.shape(), sv.shape());
        let inner: usize = x.shape()[k..].iter().product();
        let mut out = x.data().to_vec();
        for (chunk, &f) in out.chunks_mut(inner.max(1)).zip(sv.data()) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        self.g.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, s],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut d = g.data().to_vec();
                    for (chunk, &f) in d.chunks_mut(inner.max(1)).zip(sv.data()) {
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    Tensor::from_parts(g.shape().to_vec(), d)
                });
                let gs = needs[1].then(|| {
                    let d: Vec<f32> = g
                        .data()
                        .chunks(inner.max(1))
                        .zip(x.data().chunks(inner.max(1)))
                        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                        .collect();
                    Tensor::from_parts(sv.shape().to_vec(), d)
                });
                vec![gx, gs]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn softmax_rows_sum_to_one_and_gradient_of_sum_vanishes() {
        let g = Graph::detached(true);
        let x = g.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap(), true);
        let y = x.softmax();
        for row in y.value().data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let grads = g.backward(y.sum());
        assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn mean_trailing_keeps_leading_axes() {
        let g = Graph::detached(false);
        let x = g.constant(Tensor::new(&[2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap());
        let m = x.mean_trailing(2);
        assert_eq!(m.value().shape(), &[2, 2]);
        assert_eq!(m.value().data(), &[0.5, 2.5, 4.5, 6.5]);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x0 = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 3.0, -4.0]).unwrap();
        let w = Tensor::new(&[2, 3], vec![1.0, 0.0, -2.0, 0.5, 1.5, 1.0]).unwrap();
        let g = Graph::detached(true);
        let x = g.leaf(x0.clone(), true);
        let y = x.log_softmax();
        let sm = g.constant(x0.clone()).softmax().value();
        for (a, b) in y.value().data().iter().zip(sm.data()) {
            assert!((a - b.ln()).abs() < 1e-6);
        }
        let grads = g.backward(y.mul_const(&w).sum());
        let f = |t: &Tensor| {
            let g = Graph::detached(false);
            g.constant(t.clone()).log_softmax().mul_const(&w).sum().value().item() as f64
        };
        for i in 0..6 {
            let mut p = x0.clone();
            p.data_mut()[i] += 1e-2;
            let mut m = x0.clone();
            m.data_mut()[i] -= 1e-2;
            let num = (f(&p) - f(&m)) / 2e-2;
            assert!((num - grads.get(x).unwrap().data()[i] as f64).abs() < 2e-3);
        }
    }

    #[test]
    fn mul_prefix_broadcasts_and_reduces() {
        let g = Graph::detached(true);
        let x = g.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let s = g.leaf(Tensor::new(&[2], vec![2.0, -1.0]).unwrap(), true);
        let y = x.mul_prefix(s);
        assert_eq!(y.value().data(), &[2.0, 4.0, 6.0, -4.0, -5.0, -6.0]);
        let grads = g.backward(y.sum());
        assert_eq!(grads.get(s).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0, -1.0, -1.0, -1.0]);
    }
}
