use super::{Graph, Var};
use crate::tensor::Tensor;

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shape preserved")
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.custom(
            out,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.custom(
            out,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]),
        )
    }

    /// Sum of equally shaped nodes, accumulated left to right.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        if xs.len() == 1 {
            return xs[0];
        }
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            out.add_assign(self.value(x));
        }
        let n = xs.len();
        self.custom(
            out,
            xs,
            Box::new(move |ctx| {
                (0..n)
                    .map(|i| ctx.needs[i].then(|| ctx.grad.clone()))
                    .collect()
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.custom(
            out,
            &[a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| zip_map(ctx.grad, ctx.inputs[1], |g, y| g * y)),
                    ctx.needs[1].then(|| zip_map(ctx.grad, ctx.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.custom(out, &[a], Box::new(move |ctx| vec![Some(ctx.grad.map(|g| c * g))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.custom(
            out,
            &[a],
            Box::new(|ctx| {
                vec![Some(zip_map(ctx.grad, ctx.inputs[0], |g, x| {
                    if x > 0.0 {
                        g
                    } else {
                        0.0
                    }
                }))]
            }),
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        self.custom(
            out,
            &[a],
            Box::new(|ctx| {
                vec![Some(zip_map(ctx.grad, ctx.inputs[0], |g, x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    g * (s + x * s * (1.0 - s))
                }))]
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.custom(
            out,
            &[a],
            Box::new(|ctx| vec![Some(zip_map(ctx.grad, ctx.out, |g, y| g * y))]),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.custom(
            out,
            &[a],
            Box::new(|ctx| vec![Some(zip_map(ctx.grad, ctx.inputs[0], |g, x| g / x))]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape: element count mismatch");
        self.custom(
            out,
            &[a],
            Box::new(|ctx| {
                vec![Some(
                    ctx.grad
                        .clone()
                        .reshape(ctx.inputs[0].shape())
                        .expect("same element count"),
                )]
            }),
        )
    }

    /// Sum of all elements as a one-element node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.custom(
            Tensor::scalar(s),
            &[a],
            Box::new(|ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]),
        )
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.shape().len() == 2 && bv.shape().len() == 2, "matmul needs 2-D operands");
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        self.custom(
            Tensor::new(&[m, n], out).expect("shape"),
            &[a, b],
            Box::new(move |ctx| {
                let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let ga = ctx.needs[0].then(|| {
                    // g (m,n) x b^T (n,k)
                    let mut out = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for p in 0..k {
                                out[i * k + p] += gij * bv[p * n + j];
                            }
                        }
                    }
                    Tensor::new(&[m, k], out).expect("shape")
                });
                let gb = ctx.needs[1].then(|| {
                    // a^T (k,m) x g (m,n)
                    let mut out = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let row = &mut out[p * n..(p + 1) * n];
                            for (o, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += aip * gv;
                            }
                        }
                    }
                    Tensor::new(&[k, n], out).expect("shape")
                });
                vec![ga, gb]
            }),
        )
    }

    /// Softmax of row `row` of a 2-D node, returned as a 1-D node of length `cols`.
    pub fn softmax_row(&mut self, a: Var, row: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape().len(), 2, "softmax_row needs a 2-D node");
        let cols = av.shape()[1];
        let logits = &av.data()[row * cols..(row + 1) * cols];
        let probs = softmax(logits);
        self.custom(
            Tensor::new(&[cols], probs).expect("shape"),
            &[a],
            Box::new(move |ctx| {
                let p = ctx.out.data();
                let g = ctx.grad.data();
                let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                let mut full = Tensor::zeros(ctx.inputs[0].shape());
                let dst = &mut full.data_mut()[row * cols..(row + 1) * cols];
                for i in 0..cols {
                    dst[i] = p[i] * (g[i] - dot);
                }
                vec![Some(full)]
            }),
        )
    }

    /// Weighted mixture `sum_k w[k] * xs[k]`; `None` entries stand for the zero map.
    ///
    /// `weights` must be a 1-D node of length `xs.len()`; at least one entry of
    /// `xs` must be present so the output shape is known.
    pub fn mix(&mut self, xs: &[Option<Var>], weights: Var) -> Var {
        let w = self.value(weights).data().to_vec();
        assert_eq!(w.len(), xs.len(), "mixture weight count mismatch");
        let present: Vec<(usize, Var)> = xs
            .iter()
            .enumerate()
            .filter_map(|(k, x)| x.map(|v| (k, v)))
            .collect();
        assert!(!present.is_empty(), "mixture needs at least one non-zero op");
        let mut out = Tensor::zeros(self.value(present[0].1).shape());
        for &(k, v) in &present {
            let wk = w[k];
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += wk * x;
            }
        }
        let slots: Vec<usize> = present.iter().map(|&(k, _)| k).collect();
        let kcount = xs.len();
        let mut parents: Vec<Var> = present.iter().map(|&(_, v)| v).collect();
        parents.push(weights);
        self.custom(
            out,
            &parents,
            Box::new(move |ctx| {
                let n = slots.len();
                let w = ctx.inputs[n].data();
                let g = ctx.grad.data();
                let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(n + 1);
                for (i, &k) in slots.iter().enumerate() {
                    grads.push(ctx.needs[i].then(|| ctx.grad.map(|gv| gv * w[k])));
                }
                let gw = ctx.needs[n].then(|| {
                    let mut gw = Tensor::zeros(&[kcount]);
                    for (i, &k) in slots.iter().enumerate() {
                        gw.data_mut()[k] = ctx.inputs[i]
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(x, gv)| x * gv)
                            .sum();
                    }
                    gw
                });
                grads.push(gw);
                grads
            }),
        )
    }

    /// Channel-wise concatenation of `(b, c_i, h, w)` nodes.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        if xs.len() == 1 {
            return xs[0];
        }
        let (b, _, h, w) = self.value(xs[0]).dims4();
        let chans: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let (bb, c, hh, ww) = self.value(x).dims4();
                assert!(bb == b && hh == h && ww == w, "concat: spatial/batch mismatch");
                c
            })
            .collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (&x, &c) in xs.iter().zip(&chans) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        self.custom(
            Tensor::new(&[b, total, h, w], out).expect("shape"),
            xs,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(chans.len());
                for (i, &c) in chans.iter().enumerate() {
                    if ctx.needs[i] {
                        let mut gi = Vec::with_capacity(b * c * plane);
                        for bi in 0..b {
                            let start = (bi * total + offset) * plane;
                            gi.extend_from_slice(&g[start..start + c * plane]);
                        }
                        grads.push(Some(Tensor::new(&[b, c, h, w], gi).expect("shape")));
                    } else {
                        grads.push(None);
                    }
                    offset += c;
                }
                grads
            }),
        )
    }

    /// Samples `start..start + len` of a 4-D node.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert!(start + len <= b, "slice_batch out of range");
        let n = c * h * w;
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.custom(
            Tensor::new(&[len, c, h, w], out).expect("shape"),
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[b, c, h, w]);
                g.data_mut()[start * n..(start + len) * n].copy_from_slice(ctx.grad.data());
                vec![Some(g)]
            }),
        )
    }

    /// Gathers the listed channels of a 4-D node.
    pub fn select_channels(&mut self, x: Var, idx: &[usize]) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let m = idx.len();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * m * plane);
        for bi in 0..b {
            for &ch in idx {
                let s = (bi * c + ch) * plane;
                out.extend_from_slice(&src[s..s + plane]);
            }
        }
        let idx = idx.to_vec();
        self.custom(
            Tensor::new(&[b, m, h, w], out).expect("shape"),
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[b, c, h, w]);
                let gd = g.data_mut();
                let go = ctx.grad.data();
                for bi in 0..b {
                    for (j, &ch) in idx.iter().enumerate() {
                        let d = (bi * c + ch) * plane;
                        let s = (bi * m + j) * plane;
                        for p in 0..plane {
                            gd[d + p] += go[s + p];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Copy of `x` whose channels `idx[j]` are replaced by channel `j` of `replacement`.
    pub fn merge_channels(&mut self, x: Var, replacement: Var, idx: &[usize]) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let (rb, m, rh, rw) = self.value(replacement).dims4();
        assert!(rb == b && rh == h && rw == w && m == idx.len(), "merge_channels shape mismatch");
        let plane = h * w;
        let mut out = self.value(x).clone();
        {
            let rep = self.value(replacement).data();
            let od = out.data_mut();
            for bi in 0..b {
                for (j, &ch) in idx.iter().enumerate() {
                    let d = (bi * c + ch) * plane;
                    let s = (bi * m + j) * plane;
                    od[d..d + plane].copy_from_slice(&rep[s..s + plane]);
                }
            }
        }
        let idx = idx.to_vec();
        self.custom(
            out,
            &[x, replacement],
            Box::new(move |ctx| {
                let go = ctx.grad.data();
                let gx = ctx.needs[0].then(|| {
                    let mut g = ctx.grad.clone();
                    let gd = g.data_mut();
                    for bi in 0..b {
                        for &ch in &idx {
                            let d = (bi * c + ch) * plane;
                            gd[d..d + plane].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    g
                });
                let gr = ctx.needs[1].then(|| {
                    let mut g = Tensor::zeros(&[b, m, h, w]);
                    let gd = g.data_mut();
                    for bi in 0..b {
                        for (j, &ch) in idx.iter().enumerate() {
                            let s = (bi * c + ch) * plane;
                            let d = (bi * m + j) * plane;
                            gd[d..d + plane].copy_from_slice(&go[s..s + plane]);
                        }
                    }
                    g
                });
                vec![gx, gr]
            }),
        )
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
