use crate::graph::Var;
use crate::tensor::Tensor;

/// Normalizes each contiguous chunk of `len` elements to zero mean, unit variance.
fn normalize_chunks<'g>(x: Var<'g>, len: usize, eps: f32) -> Var<'g> {
    let xv = x.value();
    assert!(len > 0 && xv.numel() % len == 0, "norm chunk {len} does not divide {:?}", xv.shape());
    let mut y = vec![0f32; xv.numel()];
    let mut inv_std = Vec::with_capacity(xv.numel() / len);
    for (src, dst) in xv.data().chunks(len).zip(y.chunks_mut(len)) {
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len as f64;
        let is = 1.0 / (var + eps as f64).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s as f64 - mean) * is) as f32;
        }
        inv_std.push(is as f32);
    }
    let y = Tensor::from_parts(xv.shape().to_vec(), y);
    let ys = y.clone();
    x.g.push(
        y,
        &[x],
        Box::new(move |g, _| {
            let mut gx = vec![0f32; g.numel()];
            for (((gc, yc), oc), &is) in g
                .data()
                .chunks(len)
                .zip(ys.data().chunks(len))
                .zip(gx.chunks_mut(len))
                .zip(&inv_std)
            {
                let mg = gc.iter().sum::<f32>() / len as f32;
                let mgy = gc.iter().zip(yc).map(|(a, b)| a * b).sum::<f32>() / len as f32;
                for i in 0..len {
                    oc[i] = is * (gc[i] - mg - yc[i] * mgy);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        }),
    )
}

impl<'g> Var<'g> {
    /// Group normalization of `[N, C, ..]` without affine parameters.
    pub fn group_norm(self, groups: usize, eps: f32) -> Var<'g> {
        let s = self.shape();
        assert!(s.len() >= 2 && s[1] % groups == 0, "group_norm: {groups} groups for {s:?}");
        let len = s[1] / groups * s[2..].iter().product::<usize>();
        normalize_chunks(self, len, eps)
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layer_norm(self, eps: f32) -> Var<'g> {
        let len = *self.shape().last().expect("layer_norm on scalar");
        normalize_chunks(self, len, eps)
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn layer_norm_gradient_matches_finite_difference() {
        let x0 = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.7]).unwrap();
        let w = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 0.3, 1.5, -1.0]).unwrap();
        let f = |x: &Tensor| {
            let g = Graph::detached(false);
            g.constant(x.clone()).layer_norm(1e-5).mul_const(&w).sum().value().item() as f64
        };
        let g = Graph::detached(true);
        let xv = g.leaf(x0.clone(), true);
        let grads = g.backward(xv.layer_norm(1e-5).mul_const(&w).sum());
        for i in 0..6 {
            let mut p = x0.clone();
            p.data_mut()[i] += 1e-2;
            let mut m = x0.clone();
            m.data_mut()[i] -= 1e-2;
            let num = (f(&p) - f(&m)) / 2e-2;
            let ana = grads.get(xv).unwrap().data()[i] as f64;
            assert!((num - ana).abs() < 5e-3, "{i}: {num} vs {ana}");
        }
    }
}
