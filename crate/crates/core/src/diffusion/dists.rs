//! Structure/texture perceptual distance over a frozen random feature
//! pyramid, and its edge-aware variant on Sobel maps.

use timeweaver_tensor::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::filters::{self, SOBEL_MAX};
use crate::image::ImageTensor;
use crate::seed;

const C1: f32 = 1e-6;
const C2: f32 = 1e-6;
const PYRAMID_SEED: u64 = 0x7d15_75ed;
const CHANNELS: [usize; 3] = [8, 16, 32];
const SOFTPLUS_BETA: f32 = 5.0;

/// Per-channel gradient magnitude, `[N, C, H, W]` to the same shape in [0, 1].
pub fn sobel_var(x: Var<'_>) -> Var<'_> {
    let c = x.shape()[1];
    let g = x.graph();
    let kx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let ky = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let mut w = vec![0f32; 2 * c * c * 9];
    for ch in 0..c {
        for k in 0..9 {
            w[(ch * c + ch) * 9 + k] = kx[k];
            w[((c + ch) * c + ch) * 9 + k] = ky[k];
        }
    }
    let w = g.constant(Tensor::new(&[2 * c, c, 3, 3], w).expect("sobel weight shape"));
    let d = x.pad_replicate(1).conv2d(w, 1, 0);
    let gx = d.narrow(1, 0, c);
    let gy = d.narrow(1, c, c);
    gx.sqr().add(gy.sqr()).add_scalar(1e-12).sqrt().scale(1.0 / SOBEL_MAX)
}

/// Sobel magnitude of an image, normalized to [0, 1].
pub fn sobel(image: &ImageTensor) -> Result<ImageTensor> {
    if image.height() < 3 || image.width() < 3 {
        return Err(Error::DimensionMismatch(format!("sobel needs at least 3x3, got {:?}", image.shape())));
    }
    Ok(filters::sobel(image))
}

/// Frozen 3-stage convolutional pyramid (the raw input counts as stage 0).
#[derive(Clone, Debug)]
pub struct DistsLike {
    weights: Vec<Tensor>,
}

impl Default for DistsLike {
    fn default() -> Self {
        Self::new(PYRAMID_SEED)
    }
}

impl DistsLike {
    pub fn new(seed_root: u64) -> Self {
        let mut rng = seed::derived_rng(seed_root, "dists-pyramid");
        let mut cin = 3;
        let weights = CHANNELS
            .iter()
            .map(|&cout| {
                let w = Tensor::randn(&[cout, cin, 3, 3], (2.0 / (cin * 9) as f32).sqrt(), &mut rng);
                cin = cout;
                w
            })
            .collect();
        Self { weights }
    }

    fn features<'g>(&self, x: Var<'g>) -> Vec<Var<'g>> {
        let g = x.graph();
        let mut out = vec![x];
        let mut h = x;
        for (i, w) in self.weights.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2x();
            }
            h = h.conv2d(g.constant(w.clone()), 1, 1).softplus(SOFTPLUS_BETA);
            out.push(h);
        }
        out
    }

    /// Per-sample distance `[N]` between `[N, 3, H, W]` batches.
    pub fn distance<'g>(&self, a: Var<'g>, b: Var<'g>) -> Var<'g> {
        let fa = self.features(a);
        let fb = self.features(b);
        let total: usize = fa.iter().map(|f| f.shape()[1]).sum();
        let mut acc: Option<Var<'g>> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let s = x.shape();
            let (n, c) = (s[0], s[1]);
            let x = x.reshape(&[n, c, s[2] * s[3]]);
            let y = y.reshape(&[n, c, s[2] * s[3]]);
            let (mx, my) = (x.mean_trailing(2), y.mean_trailing(2));
            let vx = x.sqr().mean_trailing(2).sub(mx.sqr());
            let vy = y.sqr().mean_trailing(2).sub(my.sqr());
            let cov = x.mul(y).mean_trailing(2).sub(mx.mul(my));
            let texture = mx.mul(my).scale(2.0).add_scalar(C1).div(mx.sqr().add(my.sqr()).add_scalar(C1));
            let structure = cov.scale(2.0).add_scalar(C2).div(vx.add(vy).add_scalar(C2));
            let stage = texture.add(structure).mean_trailing(1).scale(c as f32);
            acc = Some(match acc {
                Some(a) => a.add(stage),
                None => stage,
            });
        }
        acc.expect("non-empty pyramid").scale(-0.5 / total as f32).add_scalar(1.0)
    }

    /// Raw-image distance plus Sobel-map distance, per sample.
    pub fn edge_aware<'g>(&self, a: Var<'g>, b: Var<'g>) -> Var<'g> {
        self.distance(a, b).add(self.distance(sobel_var(a), sobel_var(b)))
    }
}

fn pair<'g>(g: &'g Graph<'g>, a: &ImageTensor, b: &ImageTensor) -> Result<(Var<'g>, Var<'g>)> {
    a.same_shape(b)?;
    let to = |i: &ImageTensor| -> Result<Tensor> {
        let t = i.to_chw();
        let s = t.shape().to_vec();
        Ok(t.reshape(&[1, s[0], s[1], s[2]])?)
    };
    Ok((g.constant(to(a)?), g.constant(to(b)?)))
}

/// Perceptual distance in [0, 2] for images in [0, 1].
pub fn dists_like(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let g = Graph::detached(false);
    let (va, vb) = pair(&g, a, b)?;
    Ok(DistsLike::default().distance(va, vb).value().data()[0] as f64)
}

pub fn ea_dists(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    let g = Graph::detached(false);
    let (va, vb) = pair(&g, pred, gt)?;
    Ok(DistsLike::default().edge_aware(va, vb).value().data()[0] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed_root: u64) -> ImageTensor {
        let mut rng = seed::rng(seed_root);
        ImageTensor::new(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn graph_sobel_matches_the_image_filter() {
        let img = random_image(1);
        let g = Graph::detached(false);
        let (v, _) = pair(&g, &img, &img).unwrap();
        let out = sobel_var(v).value();
        let want = sobel(&img).unwrap().to_chw();
        assert!(out.as_ref().clone().reshape(want.shape()).unwrap().max_abs_diff(&want).unwrap() < 1e-5);
        assert!(sobel(&ImageTensor::filled(2, 5, 3, 0.1)).is_err());
    }

    #[test]
    fn distance_identities() {
        let (a, b) = (random_image(2), random_image(3));
        assert!(dists_like(&a, &a).unwrap().abs() < 1e-6);
        assert!(ea_dists(&a, &a).unwrap().abs() < 1e-6);
        let ab = dists_like(&a, &b).unwrap();
        assert!((ab - dists_like(&b, &a).unwrap()).abs() < 1e-9);
        assert!((0.0..=2.0).contains(&ab));
        assert!(ea_dists(&a, &b).unwrap() >= ab);
        assert!(dists_like(&a, &ImageTensor::filled(4, 4, 3, 0.0)).is_err());
    }

    #[test]
    fn shuffled_pixels_are_farther_than_slight_noise() {
        let x = random_image(4);
        let mut rng = seed::rng(5);
        let noisy = ImageTensor::new(
            32,
            32,
            3,
            x.data().iter().map(|&v| (v + 0.01 * (rng.gen::<f32>() - 0.5)).clamp(0.0, 1.0)).collect(),
        )
        .unwrap();
        let mut idx: Vec<usize> = (0..32 * 32).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = x.clone();
        for (dst, &src) in idx.iter().enumerate() {
            for c in 0..3 {
                shuffled.data_mut()[dst * 3 + c] = x.data()[src * 3 + c];
            }
        }
        assert!(dists_like(&x, &shuffled).unwrap() > dists_like(&x, &noisy).unwrap());
    }

    #[test]
    fn distance_gradient_matches_finite_differences() {
        let a = random_image(6).to_chw().reshape(&[1, 3, 32, 32]).unwrap();
        let b = random_image(7).to_chw().reshape(&[1, 3, 32, 32]).unwrap();
        let d = DistsLike::default();
        let eval = |x: &Tensor| {
            let g = Graph::detached(false);
            d.edge_aware(g.constant(x.clone()), g.constant(b.clone())).value().data()[0] as f64
        };
        let g = Graph::detached(true);
        let va = g.leaf(a.clone(), true);
        let grads = g.backward(d.edge_aware(va, g.constant(b.clone())).sum());
        for idx in [5, 700, 2100, 3000] {
            let mut p = a.clone();
            p.data_mut()[idx] += 1e-2;
            let mut m = a.clone();
            m.data_mut()[idx] -= 1e-2;
            let num = (eval(&p) - eval(&m)) / 2e-2;
            let ana = grads.get(va).unwrap().data()[idx] as f64;
            assert!((num - ana).abs() < 2e-3 + 0.05 * num.abs(), "{idx}: {num} vs {ana}");
        }
    }
}
