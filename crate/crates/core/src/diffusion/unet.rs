//! Three-resolution U-shaped noise predictor with a control branch for the
//! degraded input and decoupled text/identity cross-attention.

use std::cell::RefCell;

use rand::Rng;
use timeweaver_tensor::nn::{from_tokens, sinusoidal, to_tokens, Conv2d, GroupNorm, Init, LayerNorm, Linear};
use timeweaver_tensor::{Graph, ParamStore, Tensor, Var};

use crate::guidance::ttab::{gamma_from_scores, SpatialResponse};

const TIME_FREQ_DIM: usize = 64;
const TIME_DIM: usize = 128;

/// Age-token selectors for the boosted block, one per batch sample, and an
/// optional sink for the emitted response maps.
pub struct TtabHook<'a> {
    pub s_age: &'a [Vec<usize>],
    pub trace: Option<&'a RefCell<Vec<SpatialResponse>>>,
}

#[derive(Clone, Debug)]
struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    t: Linear,
    n2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, cin: usize, cout: usize, groups: usize, rng: &mut R) -> Self {
        Self {
            n1: GroupNorm::new(s, &format!("{name}.n1"), cin, groups),
            c1: Conv2d::new(s, &format!("{name}.c1"), cin, cout, 3, 1, Init::FanIn(1.4), rng),
            t: Linear::new(s, &format!("{name}.t"), TIME_DIM, cout, true, Init::FanIn(1.0), rng),
            n2: GroupNorm::new(s, &format!("{name}.n2"), cout, groups),
            c2: Conv2d::new(s, &format!("{name}.c2"), cout, cout, 3, 1, Init::FanIn(0.5), rng),
            skip: (cin != cout).then(|| Conv2d::new(s, &format!("{name}.skip"), cin, cout, 1, 1, Init::FanIn(1.0), rng)),
        }
    }

    fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>, temb: Var<'g>) -> Var<'g> {
        let h = self.c1.forward(g, self.n1.forward(g, x).silu());
        let h = h.add_channel(self.t.forward(g, temb));
        let h = self.c2.forward(g, self.n2.forward(g, h).silu());
        let skip = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        skip.add(h)
    }
}

/// Text attention plus a separately projected identity attention, summed
/// before the output projection.
#[derive(Clone, Debug)]
pub struct DecoupledCrossAttention {
    ln: LayerNorm,
    q: Linear,
    k_txt: Linear,
    v_txt: Linear,
    k_id: Linear,
    v_id: Linear,
    o: Linear,
    dim: usize,
}

impl DecoupledCrossAttention {
    fn new<R: Rng + ?Sized>(s: &mut ParamStore, base: &str, adapter: &str, ch: usize, d_c: usize, rng: &mut R) -> Self {
        Self {
            ln: LayerNorm::new(s, &format!("{base}.ln"), ch),
            q: Linear::new(s, &format!("{base}.q"), ch, ch, false, Init::FanIn(1.0), rng),
            k_txt: Linear::new(s, &format!("{base}.k"), d_c, ch, false, Init::FanIn(1.0), rng),
            v_txt: Linear::new(s, &format!("{base}.v"), d_c, ch, false, Init::FanIn(1.0), rng),
            k_id: Linear::new(s, &format!("{adapter}.k_id"), d_c, ch, false, Init::FanIn(1.0), rng),
            v_id: Linear::new(s, &format!("{adapter}.v_id"), d_c, ch, false, Init::Zeros, rng),
            o: Linear::new(s, &format!("{base}.o"), ch, ch, true, Init::FanIn(0.5), rng),
            dim: ch,
        }
    }

    fn forward<'g>(
        &self,
        g: &'g Graph<'g>,
        x: Var<'g>,
        text: Var<'g>,
        f_id: Option<Var<'g>>,
        ttab: Option<&TtabHook<'_>>,
    ) -> Var<'g> {
        let s = x.shape();
        let (b, h, w) = (s[0], s[2], s[3]);
        let tokens = to_tokens(x);
        let q = self.q.forward(g, self.ln.forward(g, tokens));
        let scores = q.matmul_t(self.k_txt.forward(g, text));
        let probs = scores.scale(1.0 / (self.dim as f32).sqrt()).softmax();
        let mut read = probs.matmul(self.v_txt.forward(g, text));
        if let Some(hook) = ttab {
            let n_txt = text.shape()[1];
            let sv = scores.value();
            let per = h * w * n_txt;
            let mut boost = Vec::with_capacity(b * h * w);
            for i in 0..b {
                let resp = gamma_from_scores(&sv.data()[i * per..(i + 1) * per], n_txt, &hook.s_age[i]);
                boost.extend(resp.gamma.iter().map(|&v| 1.0 + v));
                if let Some(t) = hook.trace {
                    t.borrow_mut().push(resp);
                }
            }
            if boost.iter().any(|&v| v != 1.0) {
                read = read.mul_prefix(g.constant(Tensor::new(&[b, h * w], boost).expect("one factor per position")));
            }
        }
        if let Some(f) = f_id {
            let (id_read, _) =
                timeweaver_tensor::nn::attention(q, self.k_id.forward(g, f), self.v_id.forward(g, f));
            read = read.add(id_read);
        }
        from_tokens(tokens.add(self.o.forward(g, read)), h, w)
    }
}

/// Degraded-image feature pyramid at 32, 16 and 8 pixels.
#[derive(Clone, Debug)]
struct ControlEncoder {
    c0: Conv2d,
    c1: Conv2d,
    d1: Conv2d,
    d2: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    rb32: ResBlock,
    down16: Conv2d,
    rb16: ResBlock,
    xa16: DecoupledCrossAttention,
    down8: Conv2d,
    rb8: ResBlock,
    xa8: DecoupledCrossAttention,
    up16: Conv2d,
    rb16u: ResBlock,
    xa16u: DecoupledCrossAttention,
    up32: Conv2d,
    rb32u: ResBlock,
    n_out: GroupNorm,
    conv_out: Conv2d,
    control: ControlEncoder,
    zc32: Conv2d,
    zc16: Conv2d,
    zc8: Conv2d,
}

impl Denoiser {
    /// Base weights live under `unet.`, the control encoder under `control.`
    /// and the zero-initialized fusion convs plus identity projections under
    /// `adapter.`.
    pub fn new<R: Rng + ?Sized>(s: &mut ParamStore, widths: [usize; 3], groups: usize, d_c: usize, rng: &mut R) -> Self {
        let [w0, w1, w2] = widths;
        let f = Init::FanIn(1.4);
        Self {
            time1: Linear::new(s, "unet.time1", TIME_FREQ_DIM, TIME_DIM, true, Init::FanIn(1.0), rng),
            time2: Linear::new(s, "unet.time2", TIME_DIM, TIME_DIM, true, Init::FanIn(1.0), rng),
            conv_in: Conv2d::new(s, "unet.conv_in", 3, w0, 3, 1, Init::FanIn(1.0), rng),
            rb32: ResBlock::new(s, "unet.rb32", w0, w0, groups, rng),
            down16: Conv2d::new(s, "unet.down16", w0, w1, 3, 2, f, rng),
            rb16: ResBlock::new(s, "unet.rb16", w1, w1, groups, rng),
            xa16: DecoupledCrossAttention::new(s, "unet.xa16", "adapter.xa16", w1, d_c, rng),
            down8: Conv2d::new(s, "unet.down8", w1, w2, 3, 2, f, rng),
            rb8: ResBlock::new(s, "unet.rb8", w2, w2, groups, rng),
            xa8: DecoupledCrossAttention::new(s, "unet.xa8", "adapter.xa8", w2, d_c, rng),
            up16: Conv2d::new(s, "unet.up16", w2, w1, 3, 1, f, rng),
            rb16u: ResBlock::new(s, "unet.rb16u", 2 * w1, w1, groups, rng),
            xa16u: DecoupledCrossAttention::new(s, "unet.xa16u", "adapter.xa16u", w1, d_c, rng),
            up32: Conv2d::new(s, "unet.up32", w1, w0, 3, 1, f, rng),
            rb32u: ResBlock::new(s, "unet.rb32u", 2 * w0, w0, groups, rng),
            n_out: GroupNorm::new(s, "unet.n_out", w0, groups),
            conv_out: Conv2d::new(s, "unet.conv_out", w0, 3, 3, 1, Init::FanIn(0.2), rng),
            control: ControlEncoder {
                c0: Conv2d::new(s, "control.c0", 3, w0, 3, 1, f, rng),
                c1: Conv2d::new(s, "control.c1", w0, w0, 3, 1, f, rng),
                d1: Conv2d::new(s, "control.d1", w0, w1, 3, 2, f, rng),
                d2: Conv2d::new(s, "control.d2", w1, w2, 3, 2, f, rng),
            },
            zc32: Conv2d::new(s, "adapter.zc32", w0, w0, 1, 1, Init::Zeros, rng),
            zc16: Conv2d::new(s, "adapter.zc16", w1, w1, 1, 1, Init::Zeros, rng),
            zc8: Conv2d::new(s, "adapter.zc8", w2, w2, 1, 1, Init::Zeros, rng),
        }
    }

    /// Predicts the noise in `z [B, 3, 32, 32]` at per-sample timesteps `t`.
    /// `lq` is the degraded image batch in [0, 1], `text` is `[B, n_txt, d_c]`
    /// and `f_id` is `[B, n, d_c]` (omitted before the identity branch exists).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g>(
        &self,
        g: &'g Graph<'g>,
        z: Var<'g>,
        t: &[usize],
        lq: Var<'g>,
        text: Var<'g>,
        f_id: Option<Var<'g>>,
        ttab: Option<&TtabHook<'_>>,
    ) -> Var<'g> {
        let steps: Vec<f32> = t.iter().map(|&v| v as f32).collect();
        let temb = g.constant(sinusoidal(&steps, TIME_FREQ_DIM, 1000.0));
        let temb = self.time2.forward(g, self.time1.forward(g, temb).silu()).silu();

        let c = &self.control;
        let l = lq.affine(2.0, -1.0);
        let l32 = c.c1.forward(g, c.c0.forward(g, l).silu()).silu();
        let l16 = c.d1.forward(g, l32).silu();
        let l8 = c.d2.forward(g, l16).silu();

        let h = self.conv_in.forward(g, z);
        let h32 = self.rb32.forward(g, h, temb).add(self.zc32.forward(g, l32));
        let h = self.rb16.forward(g, self.down16.forward(g, h32), temb);
        let h16 = self.xa16.forward(g, h, text, f_id, None).add(self.zc16.forward(g, l16));
        let h = self.down8.forward(g, h16).add(self.zc8.forward(g, l8));
        let h = self.rb8.forward(g, h, temb);
        let h = self.xa8.forward(g, h, text, f_id, ttab);
        let h = self.up16.forward(g, h.upsample2x());
        let h = self.rb16u.forward(g, g.concat(&[h, h16], 1), temb);
        let h = self.xa16u.forward(g, h, text, f_id, None);
        let h = self.up32.forward(g, h.upsample2x());
        let h = self.rb32u.forward(g, g.concat(&[h, h32], 1), temb);
        self.conv_out.forward(g, self.n_out.forward(g, h).silu())
    }
}
