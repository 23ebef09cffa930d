use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// (outer, axis_len, inner) view of `shape` around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

impl<'g> Var<'g> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.g.push(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&old).unwrap())]),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(self) -> Var<'g> {
        let x = self.value();
        let out = transpose_last2(&x);
        self.g.push(out, &[self], Box::new(|g, _| vec![Some(transpose_last2(g))]))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let (outer, n, inner) = around(x.shape(), axis);
        assert!(start + len <= n, "narrow {start}+{len} exceeds {n}");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let in_shape = x.shape().to_vec();
        self.g.push(
            Tensor::from_parts(shape, data),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0f32; outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(self) -> Var<'g> {
        let x = self.value();
        let (nc, h, w) = nchw(x.shape());
        let mut out = vec![0f32; nc * 4 * h * w];
        for p in 0..nc {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[2] *= 2;
        shape[3] *= 2;
        let in_shape = x.shape().to_vec();
        self.g.push(
            Tensor::from_parts(shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0f32; nc * h * w];
                for p in 0..nc {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            }),
        )
    }

    /// 2x2 average pooling of `[N, C, H, W]` (H, W even).
    pub fn avg_pool2x(self) -> Var<'g> {
        let x = self.value();
        let (nc, h, w) = nchw(x.shape());
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0f32; nc * ho * wo];
        for p in 0..nc {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    out[p * ho * wo + i * wo + j] = 0.25 * s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[2] = ho;
        shape[3] = wo;
        let in_shape = x.shape().to_vec();
        self.g.push(
            Tensor::from_parts(shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0f32; nc * h * w];
                for p in 0..nc {
                    for i in 0..h {
                        for j in 0..w {
                            gx[p * h * w + i * w + j] =
                                0.25 * g.data()[p * ho * wo + (i / 2) * wo + j / 2];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            }),
        )
    }

    /// Edge-replicating spatial padding of `[N, C, H, W]`.
    pub fn pad_replicate(self, p: usize) -> Var<'g> {
        let x = self.value();
        let (nc, h, w) = nchw(x.shape());
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let src_idx = move |i: usize, j: usize| {
            let si = i.saturating_sub(p).min(h - 1);
            let sj = j.saturating_sub(p).min(w - 1);
            si * w + sj
        };
        let mut out = vec![0f32; nc * hp * wp];
        for c in 0..nc {
            for i in 0..hp {
                for j in 0..wp {
                    out[c * hp * wp + i * wp + j] = x.data()[c * h * w + src_idx(i, j)];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[2] = hp;
        shape[3] = wp;
        let in_shape = x.shape().to_vec();
        self.g.push(
            Tensor::from_parts(shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0f32; nc * h * w];
                for c in 0..nc {
                    for i in 0..hp {
                        for j in 0..wp {
                            gx[c * h * w + src_idx(i, j)] += g.data()[c * hp * wp + i * wp + j];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            }),
        )
    }
}

impl<'s> Graph<'s> {
    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let (outer, _, inner) = around(&first, axis);
        let lens: Vec<usize> = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert!(
                    s.len() == first.len()
                        && s[..axis] == first[..axis]
                        && s[axis + 1..] == first[axis + 1..],
                    "concat: incompatible shapes {first:?} and {s:?}"
                );
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        self.push(
            Tensor::from_parts(shape, data),
            parts,
            Box::new(move |g, needs| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(lens.len());
                for (k, &l) in lens.iter().enumerate() {
                    if needs[k] {
                        let mut d = Vec::with_capacity(outer * l * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + l * inner]);
                        }
                        grads.push(Some(Tensor::from_parts(shapes[k].clone(), d)));
                    } else {
                        grads.push(None);
                    }
                    offset += l;
                }
                grads
            }),
        )
    }
}

fn nchw(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected [N, C, H, W], got {shape:?}");
    (shape[0] * shape[1], shape[2], shape[3])
}

pub(crate) fn transpose_last2(x: &Tensor) -> Tensor {
    let s = x.shape();
    assert!(s.len() >= 2, "transpose_last2 needs rank >= 2");
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = x.numel() / (r * c).max(1);
    let mut out = vec![0f32; x.numel()];
    for b in 0..batch {
        let src = &x.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape.swap(n - 1, n - 2);
    Tensor::from_parts(shape, out)
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn concat_then_narrow_roundtrip() {
        let g = Graph::detached(true);
        let a = g.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let b = g.leaf(Tensor::new(&[1, 1, 2], vec![5.0, 6.0]).unwrap(), true);
        let c = g.concat(&[a, b], 1);
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let tail = c.narrow(1, 2, 1);
        assert_eq!(tail.value().data(), &[5.0, 6.0]);
        let grads = g.backward(tail.sum());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn replicate_padding_copies_edges() {
        let g = Graph::detached(false);
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = x.pad_replicate(1).value();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        assert_eq!(&p.data()[..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&p.data()[12..], &[3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn pooling_inverts_upsampling() {
        let g = Graph::detached(false);
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(x.upsample2x().avg_pool2x().value().data(), x.value().data());
    }
}
