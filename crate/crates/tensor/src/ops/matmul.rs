use crate::gemm::{gemm, Layout};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Batched product plan. `a` is `[batch.., m, k]`; `b` is `[batch.., k, n]`
/// (or `[batch.., n, k]` when `trans_b`), or 2-D and shared by every batch.
struct Plan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    trans_b: bool,
}

fn plan(a: &[usize], b: &[usize], trans_b: bool) -> Plan {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul needs rank >= 2: {a:?} x {b:?}");
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    assert_eq!(k, kb, "matmul inner dims differ: {a:?} x {b:?} (trans_b={trans_b})");
    let batch: usize = a[..a.len() - 2].iter().product();
    let shared_b = b.len() == 2;
    if !shared_b {
        assert_eq!(&a[..a.len() - 2], &b[..b.len() - 2], "matmul batch dims differ");
    }
    Plan { batch, m, k, n, shared_b, trans_b }
}

fn forward(p: &Plan, a: &[f32], b: &[f32]) -> Vec<f32> {
    let mut c = vec![0f32; p.batch * p.m * p.n];
    if p.shared_b {
        gemm(
            p.batch * p.m,
            p.k,
            p.n,
            1.0,
            a,
            Layout::row_major(p.k, false),
            b,
            Layout::row_major(if p.trans_b { p.k } else { p.n }, p.trans_b),
            0.0,
            &mut c,
        );
    } else {
        let (sa, sb, sc) = (p.m * p.k, p.k * p.n, p.m * p.n);
        for i in 0..p.batch {
            gemm(
                p.m,
                p.k,
                p.n,
                1.0,
                &a[i * sa..(i + 1) * sa],
                Layout::row_major(p.k, false),
                &b[i * sb..(i + 1) * sb],
                Layout::row_major(if p.trans_b { p.k } else { p.n }, p.trans_b),
                0.0,
                &mut c[i * sc..(i + 1) * sc],
            );
        }
    }
    c
}

impl<'g> Var<'g> {
    /// Batched `self @ other`.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.matmul_impl(other, false)
    }

    /// Batched `self @ other^T`.
    pub fn matmul_t(self, other: Var<'g>) -> Var<'g> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'g>, trans_b: bool) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let p = plan(a.shape(), b.shape(), trans_b);
        let c = forward(&p, a.data(), b.data());
        let mut shape = a.shape()[..a.dims() - 2].to_vec();
        shape.extend_from_slice(&[p.m, p.n]);
        self.g.push(
            Tensor::from_parts(shape, c),
            &[self, other],
            Box::new(move |g, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let mut ga = vec![0f32; a.numel()];
                    // dA = dC @ B^T  (B stored [k,n]) or dC @ B (B stored [n,k])
                    let lb = if p.trans_b {
                        Layout::row_major(p.k, false)
                    } else {
                        Layout::row_major(p.n, true)
                    };
                    if p.shared_b {
                        gemm(p.batch * p.m, p.n, p.k, 1.0, gd, Layout::row_major(p.n, false), b.data(), lb, 0.0, &mut ga);
                    } else {
                        let (sb, sc, sa) = (p.k * p.n, p.m * p.n, p.m * p.k);
                        for i in 0..p.batch {
                            gemm(
                                p.m,
                                p.n,
                                p.k,
                                1.0,
                                &gd[i * sc..(i + 1) * sc],
                                Layout::row_major(p.n, false),
                                &b.data()[i * sb..(i + 1) * sb],
                                lb,
                                0.0,
                                &mut ga[i * sa..(i + 1) * sa],
                            );
                        }
                    }
                    Tensor::from_parts(a.shape().to_vec(), ga)
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0f32; b.numel()];
                    // dB = A^T @ dC  ([k,n])  or  dC^T @ A  ([n,k])
                    let rows = if p.shared_b { p.batch * p.m } else { p.m };
                    let steps = if p.shared_b { 1 } else { p.batch };
                    let (sa, sc, sb) = (rows * p.k, rows * p.n, p.k * p.n);
                    for i in 0..steps {
                        let ai = &a.data()[i * sa..(i + 1) * sa];
                        let ci = &gd[i * sc..(i + 1) * sc];
                        let out = &mut gb[i * sb * (!p.shared_b) as usize..][..sb];
                        if p.trans_b {
                            gemm(p.n, rows, p.k, 1.0, ci, Layout::row_major(p.n, true), ai, Layout::row_major(p.k, false), 0.0, out);
                        } else {
                            gemm(p.k, rows, p.n, 1.0, ai, Layout::row_major(p.k, true), ci, Layout::row_major(p.n, false), 0.0, out);
                        }
                    }
                    Tensor::from_parts(b.shape().to_vec(), gb)
                });
                vec![ga, gb]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let b: Vec<f32> = (0..12).map(|v| (v as f32) * 0.5 - 2.0).collect();
        let g = Graph::detached(false);
        let va = g.constant(Tensor::new(&[2, 3], a.clone()).unwrap());
        let vb = g.constant(Tensor::new(&[3, 4], b.clone()).unwrap());
        assert_eq!(va.matmul(vb).value().data(), naive(&a, &b, 2, 3, 4).as_slice());
        let bt = vb.transpose_last2();
        assert_eq!(va.matmul_t(bt).value().data(), naive(&a, &b, 2, 3, 4).as_slice());
    }

    #[test]
    fn batched_gradients_match_shared_gradients() {
        // With a batch of one, shared and batched b must agree.
        let g = Graph::detached(true);
        let a = g.leaf(Tensor::new(&[1, 2, 3], vec![1.0, -2.0, 0.5, 3.0, 1.0, -1.0]).unwrap(), true);
        let b2 = g.leaf(Tensor::new(&[3, 2], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap(), true);
        let b3 = g.leaf(Tensor::new(&[1, 3, 2], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap(), true);
        let l = a.matmul(b2).sqr().sum().add(a.matmul(b3).sqr().sum());
        let grads = g.backward(l);
        assert_eq!(grads.get(b2).unwrap().data(), grads.get(b3).unwrap().data());
    }
}
