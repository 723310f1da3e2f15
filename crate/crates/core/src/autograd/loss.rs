use super::{Graph, Var};
use crate::tensor::Tensor;

/// Floor on `|a| |q|` inside the squared cosine.
pub const COSINE_GUARD: f64 = 1e-12;

impl Graph {
    /// Log-softmax over the channel axis of a `(b, c, h, w)` node.
    pub fn log_softmax_channels(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for p in 0..plane {
                let at = |ch: usize| (bi * c + ch) * plane + p;
                let max = (0..c).map(|ch| xd[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..c).map(|ch| (xd[at(ch)] - max).exp()).sum::<f64>().ln();
                for ch in 0..c {
                    out[at(ch)] = xd[at(ch)] - lse;
                }
            }
        }
        self.custom(
            Tensor::new(&[b, c, h, w], out).expect("shape"),
            &[x],
            Box::new(move |ctx| {
                let (gd, od) = (ctx.grad.data(), ctx.out.data());
                let mut gx = vec![0.0; gd.len()];
                for bi in 0..b {
                    for p in 0..plane {
                        let at = |ch: usize| (bi * c + ch) * plane + p;
                        let gs: f64 = (0..c).map(|ch| gd[at(ch)]).sum();
                        for ch in 0..c {
                            gx[at(ch)] = gd[at(ch)] - od[at(ch)].exp() * gs;
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, c, h, w], gx).expect("shape"))]
            }),
        )
    }

    /// Mean negative log-likelihood of integer `labels` (one per pixel, batch-major)
    /// under per-pixel log-probabilities.
    pub fn nll_mean(&mut self, logp: Var, labels: &[usize]) -> Var {
        let (b, c, h, w) = self.value(logp).dims4();
        let plane = h * w;
        assert_eq!(labels.len(), b * plane, "one label per pixel expected");
        let ld = self.value(logp).data();
        let n = (b * plane) as f64;
        let mut s = 0.0;
        for bi in 0..b {
            for p in 0..plane {
                let y = labels[bi * plane + p];
                assert!(y < c, "label {y} out of range for {c} classes");
                s -= ld[(bi * c + y) * plane + p];
            }
        }
        let labels = labels.to_vec();
        self.custom(
            Tensor::scalar(s / n),
            &[logp],
            Box::new(move |ctx| {
                let g = ctx.grad.item() / n;
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                let gd = gx.data_mut();
                for bi in 0..b {
                    for p in 0..plane {
                        gd[(bi * c + labels[bi * plane + p]) * plane + p] = -g;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Soft Dice loss `1 - mean_c (2 I_c + s) / (P_c + Y_c + s)` accumulated over
    /// the whole batch, for every class including background.
    pub fn dice_loss(&mut self, probs: Var, labels: &[usize], smooth: f64) -> Var {
        let (b, c, h, w) = self.value(probs).dims4();
        let plane = h * w;
        assert_eq!(labels.len(), b * plane);
        let pd = self.value(probs).data();
        let mut inter = vec![0.0; c];
        let mut psum = vec![0.0; c];
        let mut ysum = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                for p in 0..plane {
                    let v = pd[(bi * c + ch) * plane + p];
                    psum[ch] += v;
                    if labels[bi * plane + p] == ch {
                        inter[ch] += v;
                        ysum[ch] += 1.0;
                    }
                }
            }
        }
        let dice: Vec<f64> = (0..c)
            .map(|ch| (2.0 * inter[ch] + smooth) / (psum[ch] + ysum[ch] + smooth))
            .collect();
        let loss = 1.0 - dice.iter().sum::<f64>() / c as f64;
        let labels = labels.to_vec();
        self.custom(
            Tensor::scalar(loss),
            &[probs],
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                let gd = gx.data_mut();
                for ch in 0..c {
                    let den = psum[ch] + ysum[ch] + smooth;
                    let num = 2.0 * inter[ch] + smooth;
                    let on = -g / c as f64 * (2.0 * den - num) / (den * den);
                    let off = -g / c as f64 * (-num) / (den * den);
                    for bi in 0..b {
                        for p in 0..plane {
                            gd[(bi * c + ch) * plane + p] = if labels[bi * plane + p] == ch { on } else { off };
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Squared error against a fixed `target`, restricted to the pixels where
    /// `mask` is set (one flag per batch pixel). Each selected position
    /// contributes the channel-mean of its squared differences; the sum over
    /// positions is divided by `denom`.
    pub fn masked_mse(&mut self, x: Var, target: &Tensor, mask: &[bool], denom: f64) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert_eq!(target.shape(), self.value(x).shape(), "masked_mse target shape");
        let plane = h * w;
        assert_eq!(mask.len(), b * plane);
        let xd = self.value(x).data();
        let td = target.data();
        let mut s = 0.0;
        for bi in 0..b {
            for p in 0..plane {
                if !mask[bi * plane + p] {
                    continue;
                }
                let mut acc = 0.0;
                for ch in 0..c {
                    let i = (bi * c + ch) * plane + p;
                    acc += (xd[i] - td[i]) * (xd[i] - td[i]);
                }
                s += acc / c as f64;
            }
        }
        let target = target.clone();
        let mask = mask.to_vec();
        self.custom(
            Tensor::scalar(s / denom),
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                let xd = ctx.inputs[0].data();
                let td = target.data();
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                let gd = gx.data_mut();
                for bi in 0..b {
                    for p in 0..plane {
                        if !mask[bi * plane + p] {
                            continue;
                        }
                        for ch in 0..c {
                            let i = (bi * c + ch) * plane + p;
                            gd[i] = g * 2.0 * (xd[i] - td[i]) / (c as f64 * denom);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Row-averaged squared cosine similarity between matching rows of two
    /// `(rows, d)` nodes.
    pub fn cos2_rows_mean(&mut self, a: Var, q: Var) -> Var {
        let (av, qv) = (self.value(a), self.value(q));
        assert_eq!(av.shape(), qv.shape(), "cos2_rows_mean shape mismatch");
        assert_eq!(av.shape().len(), 2);
        let (rows, d) = (av.shape()[0], av.shape()[1]);
        let stats = row_stats(av.data(), qv.data(), rows, d);
        let value = stats.iter().map(|s| s.cos * s.cos).sum::<f64>() / rows as f64;
        self.custom(
            Tensor::scalar(value),
            &[a, q],
            Box::new(move |ctx| {
                let g = ctx.grad.item() / rows as f64;
                let (ad, qd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut ga = Tensor::zeros(&[rows, d]);
                let mut gq = Tensor::zeros(&[rows, d]);
                for (k, st) in stats.iter().enumerate() {
                    let ar = &ad[k * d..(k + 1) * d];
                    let qr = &qd[k * d..(k + 1) * d];
                    if st.guarded {
                        // denominator is the constant guard: d cos = d(dot) / guard
                        let f = g * 2.0 * st.cos / COSINE_GUARD;
                        for j in 0..d {
                            ga.data_mut()[k * d + j] = f * qr[j];
                            gq.data_mut()[k * d + j] = f * ar[j];
                        }
                        continue;
                    }
                    let f = g * 2.0 * st.cos / (st.na * st.nq);
                    for j in 0..d {
                        ga.data_mut()[k * d + j] = f * (qr[j] - st.dot * ar[j] / (st.na * st.na));
                        gq.data_mut()[k * d + j] = f * (ar[j] - st.dot * qr[j] / (st.nq * st.nq));
                    }
                }
                vec![ctx.needs[0].then_some(ga), ctx.needs[1].then_some(gq)]
            }),
        )
    }
}

struct RowStat {
    dot: f64,
    na: f64,
    nq: f64,
    cos: f64,
    guarded: bool,
}

fn row_stats(a: &[f64], q: &[f64], rows: usize, d: usize) -> Vec<RowStat> {
    (0..rows)
        .map(|k| {
            let ar = &a[k * d..(k + 1) * d];
            let qr = &q[k * d..(k + 1) * d];
            let dot: f64 = ar.iter().zip(qr).map(|(x, y)| x * y).sum();
            let na = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nq = qr.iter().map(|x| x * x).sum::<f64>().sqrt();
            let den = na * nq;
            let guarded = den < COSINE_GUARD;
            let cos = dot / den.max(COSINE_GUARD);
            RowStat {
                dot,
                na,
                nq,
                cos,
                guarded,
            }
        })
        .collect()
}
