use crate::graph::Var;
use crate::tensor::Tensor;

fn same_shape(a: &Var<'_>, b: &Var<'_>, op: &str) {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        same_shape(&self, &other, "add");
        let out = self.value().add(&other.value()).unwrap();
        self.g.push(out, &[self, other], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        same_shape(&self, &other, "sub");
        let out = self.value().sub(&other.value()).unwrap();
        self.g.push(out, &[self, other], Box::new(|g, _| vec![Some(g.clone()), Some(g.scale(-1.0))]))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        same_shape(&self, &other, "mul");
        let (a, b) = (self.value(), other.value());
        let out = a.mul(&b).unwrap();
        self.g.push(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.mul(&b).unwrap()),
                    needs[1].then(|| g.mul(&a).unwrap()),
                ]
            }),
        )
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        same_shape(&self, &other, "div");
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x / y).unwrap();
        self.g.push(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.zip_map(&b, |gv, y| gv / y).unwrap());
                let gb = needs[1].then(|| {
                    let q = g.zip_map(&a, |gv, x| gv * x).unwrap();
                    q.zip_map(&b, |v, y| -v / (y * y)).unwrap()
                });
                vec![ga, gb]
            }),
        )
    }

    /// `self * s + b` with constant scalars.
    pub fn affine(self, s: f32, b: f32) -> Var<'g> {
        let out = self.value().map(|v| v * s + b);
        self.g.push(out, &[self], Box::new(move |g, _| vec![Some(g.scale(s))]))
    }

    pub fn scale(self, s: f32) -> Var<'g> {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(self, b: f32) -> Var<'g> {
        self.affine(1.0, b)
    }

    pub fn neg(self) -> Var<'g> {
        self.affine(-1.0, 0.0)
    }

    /// Elementwise product with a constant tensor (no gradient to the constant).
    pub fn mul_const(self, c: &Tensor) -> Var<'g> {
        let c = std::sync::Arc::new(c.clone());
        let out = self.value().mul(&c).expect("mul_const shape");
        self.g.push(out, &[self], Box::new(move |g, _| vec![Some(g.mul(&c).unwrap())]))
    }

    fn unary(self, f: impl Fn(f32) -> f32, df: impl Fn(f32, f32) -> f32 + 'static) -> Var<'g> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = std::sync::Arc::new(y.clone());
        self.g.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y_saved.data())
                    .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
            }),
        )
    }

    pub fn sqr(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f32::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f32::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f32::ln, |x, _| 1.0 / x)
    }

    pub fn recip(self) -> Var<'g> {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(self) -> Var<'g> {
        self.unary(
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// `ln(1 + exp(beta x)) / beta`, a smooth ReLU.
    pub fn softplus(self, beta: f32) -> Var<'g> {
        self.unary(
            move |x| x.max(0.0) + (-(beta * x).abs()).exp().ln_1p() / beta,
            move |x, _| 1.0 / (1.0 + (-beta * x).exp()),
        )
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(f32::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn product_rule() {
        let g = Graph::detached(true);
        let a = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let b = g.leaf(Tensor::new(&[2], vec![3.0, -1.0]).unwrap(), true);
        let loss = a.mul(b).add(a.sqr()).sum();
        let grads = g.backward(loss);
        assert_eq!(grads.get(a).unwrap().data(), &[3.0 + 2.0, -1.0 + 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn no_grad_graph_reports_nothing() {
        let g = Graph::detached(false);
        let a = g.leaf(Tensor::ones(&[3]), true);
        let loss = a.silu().sum();
        assert!(g.backward(loss).get(a).is_none());
    }

    #[test]
    fn softplus_is_stable_and_has_sigmoid_slope() {
        let g = Graph::detached(true);
        let x = g.leaf(Tensor::new(&[4], vec![-40.0, -0.3, 0.0, 50.0]).unwrap(), true);
        let y = x.softplus(5.0);
        let v = y.value();
        assert!(v.data()[0] >= 0.0 && v.data()[0] < 1e-12);
        assert!((v.data()[2] - 2f32.ln() / 5.0).abs() < 1e-7);
        assert_eq!(v.data()[3], 50.0);
        let grads = g.backward(y.sum());
        let want = 1.0 / (1.0 + 1.5f32.exp());
        assert!((grads.get(x).unwrap().data()[1] - want).abs() < 1e-6);
        assert_eq!(grads.get(x).unwrap().data()[2], 0.5);
    }
}
