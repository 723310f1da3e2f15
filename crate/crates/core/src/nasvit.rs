//! Searchable linear-attention transformer block used on every encoder edge.
//!
//! The block projects a feature map to query/key/value tokens, replaces a
//! fixed subset of token channels by a relaxed mixture of the encoder
//! candidate operations (applied on the spatial view of the tokens), runs
//! ReLU linear attention, projects back with a residual and finishes with a
//! depthwise-convolution feed-forward layer.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Graph, Var};
use crate::candidate_ops::{build_op, OpInstance, ENCODER_OPS};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Denominator guard of the linear attention.
pub const ATTENTION_EPS: f64 = 1e-6;

/// Whether query, key and value share one set of relaxation logits per edge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSharing {
    #[default]
    Shared,
    PerToken,
}

impl AlphaSharing {
    /// Logit rows used by one edge.
    pub fn rows(self) -> usize {
        match self {
            AlphaSharing::Shared => 1,
            AlphaSharing::PerToken => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NasVitConfig {
    /// Input feature dimension.
    pub f: usize,
    /// Token dimension.
    pub d: usize,
    /// Fraction of token channels routed through the operation mixture.
    pub channel_fraction: f64,
    pub sharing: AlphaSharing,
}

impl NasVitConfig {
    pub fn new(f: usize, d: usize) -> Self {
        NasVitConfig {
            f,
            d,
            channel_fraction: 0.25,
            sharing: AlphaSharing::Shared,
        }
    }

    pub fn num_ops(&self) -> usize {
        ENCODER_OPS.len()
    }

    /// Number of searched token channels.
    pub fn searched_channels(&self) -> Result<usize> {
        let raw = self.channel_fraction * self.d as f64;
        let rounded = raw.round();
        if !(self.channel_fraction > 0.0 && self.channel_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "channel_fraction must lie in (0, 1], got {}",
                self.channel_fraction
            )));
        }
        if (raw - rounded).abs() > 1e-9 || rounded < 1.0 {
            return Err(Error::Config(format!(
                "channel_fraction {} times token dimension {} is not a positive integer",
                self.channel_fraction, self.d
            )));
        }
        if self.f < 1 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        Ok(rounded as usize)
    }
}

/// Token channels exposed to the operation search; fixed at construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    d: usize,
    selected: Vec<usize>,
}

impl ChannelMask {
    pub fn sample(d: usize, count: usize, rng: &mut impl Rng) -> Self {
        let mut selected = sample(rng, d, count).into_vec();
        selected.sort_unstable();
        ChannelMask { d, selected }
    }

    pub fn from_indices(d: usize, mut selected: Vec<usize>) -> Result<Self> {
        selected.sort_unstable();
        selected.dedup();
        if selected.is_empty() || selected.iter().any(|&i| i >= d) {
            return Err(Error::Config(format!("invalid channel mask {selected:?} for d = {d}")));
        }
        Ok(ChannelMask { d, selected })
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Binary vector over the `d` token channels.
    pub fn as_binary(&self) -> Vec<u8> {
        let mut v = vec![0u8; self.d];
        for &i in &self.selected {
            v[i] = 1;
        }
        v
    }
}

/// How one mixture picks its operations.
#[derive(Clone, Copy, Debug)]
pub enum MixChoice {
    /// Weighted sum with a 1-D weight node (softmaxed logits or fixed one-hot).
    Weights(Var),
    /// Evaluate only the operation at this index of the candidate set.
    Single(usize),
}

/// Query/key/value tokens of shape `(n, d)` plus their spatial layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub spatial: (usize, usize),
}

/// `Q = x Wq`, `K = x Wk`, `V = x Wv` for tokens `x` of shape `(n, f)` and
/// projections of shape `(f, d)`.
pub fn project_qkv(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, spatial: (usize, usize)) -> Result<TokenSet> {
    if x.shape().len() != 2 {
        return Err(Error::Contract(format!("tokens must be (n, f), got {:?}", x.shape())));
    }
    let (n, f) = (x.shape()[0], x.shape()[1]);
    if spatial.0 * spatial.1 != n {
        return Err(Error::Contract(format!("{n} tokens cannot be viewed as {spatial:?}")));
    }
    let d = wq.shape().get(1).copied().unwrap_or(0);
    for w in [wq, wk, wv] {
        if w.shape() != [f, d] {
            return Err(Error::Contract(format!(
                "projection shape {:?} does not match ({f}, {d})",
                w.shape()
            )));
        }
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut proj = |w: &Tensor| {
        let wv = g.constant(w.clone());
        let out = g.matmul(xv, wv);
        g.value(out).clone()
    };
    Ok(TokenSet {
        q: proj(wq),
        k: proj(wk),
        v: proj(wv),
        spatial,
    })
}

/// ReLU linear attention over a token set; returns the `(n, d)` output tokens.
pub fn relu_linear_attention(tokens: &TokenSet) -> Result<Tensor> {
    let (n, d) = (tokens.q.shape()[0], tokens.q.shape()[1]);
    if tokens.k.shape() != [n, d] || tokens.v.shape() != [n, d] {
        return Err(Error::Contract("query/key/value shapes differ".into()));
    }
    let to_map = |t: &Tensor| {
        // (n, d) -> (1, d, 1, n)
        Tensor::from_fn(&[1, d, 1, n], |i| t.data()[(i % n) * d + i / n])
    };
    let mut g = Graph::new();
    let q = g.constant(to_map(&tokens.q));
    let k = g.constant(to_map(&tokens.k));
    let v = g.constant(to_map(&tokens.v));
    let o = g.linear_attention(q, k, v, ATTENTION_EPS);
    let om = g.value(o);
    Ok(Tensor::from_fn(&[n, d], |i| om.data()[(i % d) * n + i / d]))
}

impl Graph {
    /// ReLU linear attention on `(b, d, h, w)` maps, tokens indexed by pixel.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, eps: f64) -> Var {
        let (b, d, h, w) = self.value(q).dims4();
        assert_eq!(self.value(k).shape(), self.value(q).shape());
        assert_eq!(self.value(v).shape(), self.value(q).shape());
        let n = h * w;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; b * d * n];
        for bi in 0..b {
            let base = bi * d * n;
            let st = AttnStats::new(&qd[base..base + d * n], &kd[base..base + d * n], &vd[base..base + d * n], d, n, eps);
            let o = &mut out[base..base + d * n];
            for c in 0..d {
                for t in 0..n {
                    let mut num = 0.0;
                    for a in 0..d {
                        num += st.q[a * n + t] * st.s[a * d + c];
                    }
                    o[c * n + t] = num / st.den[t];
                }
            }
        }
        self.custom(
            Tensor::new(&[b, d, h, w], out).expect("shape"),
            &[q, k, v],
            Box::new(move |ctx| {
                let (qd, kd, vd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
                let (gd, od) = (ctx.grad.data(), ctx.out.data());
                let mut gq = vec![0.0; b * d * n];
                let mut gk = vec![0.0; b * d * n];
                let mut gv = vec![0.0; b * d * n];
                for bi in 0..b {
                    let base = bi * d * n;
                    let (qs, ks, vs) = (&qd[base..base + d * n], &kd[base..base + d * n], &vd[base..base + d * n]);
                    let st = AttnStats::new(qs, ks, vs, d, n, eps);
                    let go = &gd[base..base + d * n];
                    let oo = &od[base..base + d * n];
                    // g_num[c][t] = go / den ; g_den[t] = -sum_c go * o / den
                    let mut g_num = vec![0.0; d * n];
                    let mut g_den = vec![0.0; n];
                    for c in 0..d {
                        for t in 0..n {
                            g_num[c * n + t] = go[c * n + t] / st.den[t];
                            g_den[t] -= go[c * n + t] * oo[c * n + t] / st.den[t];
                        }
                    }
                    let mut g_s = vec![0.0; d * d];
                    let mut g_z = vec![0.0; d];
                    for a in 0..d {
                        for t in 0..n {
                            let qa = st.q[a * n + t];
                            if qa == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                g_s[a * d + c] += qa * g_num[c * n + t];
                            }
                            g_z[a] += qa * g_den[t];
                        }
                    }
                    for a in 0..d {
                        for t in 0..n {
                            let idx = a * n + t;
                            if qs[idx] > 0.0 {
                                let mut acc = g_den[t] * st.z[a];
                                for c in 0..d {
                                    acc += g_num[c * n + t] * st.s[a * d + c];
                                }
                                gq[base + idx] = acc;
                            }
                            if ks[idx] > 0.0 {
                                let mut acc = g_z[a];
                                for c in 0..d {
                                    acc += g_s[a * d + c] * vs[c * n + t];
                                }
                                gk[base + idx] = acc;
                            }
                        }
                    }
                    for c in 0..d {
                        for t in 0..n {
                            let mut acc = 0.0;
                            for a in 0..d {
                                acc += st.k[a * n + t] * g_s[a * d + c];
                            }
                            gv[base + c * n + t] = acc;
                        }
                    }
                }
                let shape = [b, d, h, w];
                vec![
                    ctx.needs[0].then(|| Tensor::new(&shape, gq).expect("shape")),
                    ctx.needs[1].then(|| Tensor::new(&shape, gk).expect("shape")),
                    ctx.needs[2].then(|| Tensor::new(&shape, gv).expect("shape")),
                ]
            }),
        )
    }
}

/// Per-sample intermediates: rectified q/k, `S = k v^T` (d x d), `z = sum_j k_j`
/// and the guarded per-token denominators.
struct AttnStats {
    q: Vec<f64>,
    k: Vec<f64>,
    s: Vec<f64>,
    z: Vec<f64>,
    den: Vec<f64>,
}

impl AttnStats {
    fn new(q: &[f64], k: &[f64], v: &[f64], d: usize, n: usize, eps: f64) -> Self {
        let q: Vec<f64> = q.iter().map(|x| x.max(0.0)).collect();
        let k: Vec<f64> = k.iter().map(|x| x.max(0.0)).collect();
        let mut s = vec![0.0; d * d];
        let mut z = vec![0.0; d];
        for a in 0..d {
            let krow = &k[a * n..(a + 1) * n];
            z[a] = krow.iter().sum();
            for c in 0..d {
                s[a * d + c] = krow.iter().zip(&v[c * n..(c + 1) * n]).map(|(x, y)| x * y).sum();
            }
        }
        let den = (0..n)
            .map(|t| (0..d).map(|a| q[a * n + t] * z[a]).sum::<f64>() + eps)
            .collect();
        AttnStats { q, k, s, z, den }
    }
}

/// One searchable transformer block (an encoder edge).
#[derive(Clone, Debug)]
pub struct NasVitBlock {
    cfg: NasVitConfig,
    mask: ChannelMask,
    /// Query/key/value projections stored as `(d, f, 1, 1)` kernels.
    proj: [ParamId; 3],
    /// Candidate operations for query, key and value tokens.
    ops: [Vec<OpInstance>; 3],
    out_proj: ParamId,
    ffn_in: ParamId,
    ffn_dw: ParamId,
    ffn_out: ParamId,
}

pub const FFN_EXPANSION: usize = 2;

impl NasVitBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: NasVitConfig, rng: &mut impl Rng) -> Result<Self> {
        let searched = cfg.searched_channels()?;
        let (f, d) = (cfg.f, cfg.d);
        let mask = ChannelMask::sample(d, searched, rng);
        let w = ParamGroup::Weight;
        let proj = ["q", "k", "v"].map(|t| store.conv_kernel(format!("{prefix}.w{t}"), w, [d, f, 1, 1], rng));
        let mut ops: [Vec<OpInstance>; 3] = Default::default();
        for (t, name) in ["q", "k", "v"].iter().enumerate() {
            for kind in ENCODER_OPS {
                let seed = rng.random::<u64>();
                ops[t].push(build_op(store, &format!("{prefix}.mix_{name}.{kind}"), kind, searched, seed)?);
            }
        }
        let out_proj = store.conv_kernel(format!("{prefix}.wo"), w, [f, d, 1, 1], rng);
        let e = FFN_EXPANSION * f;
        let ffn_in = store.conv_kernel(format!("{prefix}.ffn.expand"), w, [e, f, 1, 1], rng);
        let ffn_dw = store.conv_kernel(format!("{prefix}.ffn.dw"), w, [e, 1, 3, 3], rng);
        let ffn_out = store.conv_kernel(format!("{prefix}.ffn.project"), w, [f, e, 1, 1], rng);
        Ok(NasVitBlock {
            cfg,
            mask,
            proj,
            ops,
            out_proj,
            ffn_in,
            ffn_dw,
            ffn_out,
        })
    }

    pub fn config(&self) -> &NasVitConfig {
        &self.cfg
    }

    pub fn mask(&self) -> &ChannelMask {
        &self.mask
    }

    /// Projection kernels `(d, f, 1, 1)` for query, key, value.
    pub fn projections(&self) -> [ParamId; 3] {
        self.proj
    }

    pub fn out_projection(&self) -> ParamId {
        self.out_proj
    }

    pub fn ffn_projection(&self) -> ParamId {
        self.ffn_out
    }

    /// Candidate operations applied to token type `t` (0 = q, 1 = k, 2 = v).
    pub fn token_ops(&self, t: usize) -> &[OpInstance] {
        &self.ops[t]
    }

    /// Multi-scale token search: the masked channels of `tokens` are replaced
    /// by the mixture of candidate operations, the rest pass through.
    pub fn mix_tokens(&self, g: &mut Graph, p: &mut Binding<'_>, tokens: Var, token_type: usize, choice: MixChoice) -> Var {
        let sel = g.select_channels(tokens, self.mask.selected());
        let mixed = match choice {
            MixChoice::Weights(w) => {
                let outs: Vec<Option<Var>> = self.ops[token_type].iter().map(|op| op.forward(g, p, sel)).collect();
                g.mix(&outs, w)
            }
            MixChoice::Single(k) => match self.ops[token_type][k].forward(g, p, sel) {
                Some(v) => v,
                None => {
                    let zeros = Tensor::zeros(g.value(sel).shape());
                    g.constant(zeros)
                }
            },
        };
        g.merge_channels(tokens, mixed, self.mask.selected())
    }

    /// Expand, depthwise 3x3, project, with a residual around the whole layer.
    pub fn ffn(&self, g: &mut Graph, p: &mut Binding<'_>, y: Var) -> Var {
        let e = FFN_EXPANSION * self.cfg.f;
        let (k_in, k_dw, k_out) = (p.var(g, self.ffn_in), p.var(g, self.ffn_dw), p.var(g, self.ffn_out));
        let h = g.conv2d(y, k_in, ConvSpec::POINTWISE);
        let h = g.silu(h);
        let h = g.conv2d(h, k_dw, ConvSpec::same(3, 1, e));
        let h = g.silu(h);
        let h = g.conv2d(h, k_out, ConvSpec::POINTWISE);
        g.add(y, h)
    }

    /// Full block on a `(b, f, h, w)` map. `choices` holds one entry for shared
    /// logits or three (q, k, v) for per-token logits.
    pub fn forward(&self, g: &mut Graph, p: &mut Binding<'_>, x: Var, choices: &[MixChoice]) -> Var {
        assert!(!choices.is_empty());
        let mut tokens = [x; 3];
        for t in 0..3 {
            let w = p.var(g, self.proj[t]);
            let raw = g.conv2d(x, w, ConvSpec::POINTWISE);
            tokens[t] = self.mix_tokens(g, p, raw, t, choices[t.min(choices.len() - 1)]);
        }
        let attn = g.linear_attention(tokens[0], tokens[1], tokens[2], ATTENTION_EPS);
        let wo = p.var(g, self.out_proj);
        let o = g.conv2d(attn, wo, ConvSpec::POINTWISE);
        let y = g.add(x, o);
        self.ffn(g, p, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::{assert_grad_close, numeric_grad, rand_tensor};
    use crate::candidate_ops::OpKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(f: usize, seed: u64) -> (ParamStore, NasVitBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = NasVitConfig::new(f, f);
        if f % 4 != 0 {
            cfg.channel_fraction = 0.5;
        }
        let b = NasVitBlock::new(&mut store, "blk", cfg, &mut rng).unwrap();
        (store, b)
    }

    fn op_index(kind: OpKind) -> usize {
        ENCODER_OPS.iter().position(|&k| k == kind).unwrap()
    }

    #[test]
    fn config_rejects_fractional_channel_counts() {
        let mut c = NasVitConfig::new(6, 6);
        assert!(c.searched_channels().is_err());
        c.channel_fraction = 0.5;
        assert_eq!(c.searched_channels().unwrap(), 3);
        c.channel_fraction = 0.0;
        assert!(c.searched_channels().is_err());
    }

    #[test]
    fn mask_has_expected_population() {
        let (_, b) = block(16, 3);
        assert_eq!(b.mask().as_binary().iter().filter(|&&v| v == 1).count(), 4);
    }

    #[test]
    fn projection_matches_scalar_matmul() {
        let x = rand_tensor(&[3, 2], 1);
        let w = [rand_tensor(&[2, 2], 2), rand_tensor(&[2, 2], 3), rand_tensor(&[2, 2], 4)];
        let t = project_qkv(&x, &w[0], &w[1], &w[2], (1, 3)).unwrap();
        for (out, wm) in [(&t.q, &w[0]), (&t.k, &w[1]), (&t.v, &w[2])] {
            for i in 0..3 {
                for j in 0..2 {
                    let mut s = 0.0;
                    for p in 0..2 {
                        s += x.data()[i * 2 + p] * wm.data()[p * 2 + j];
                    }
                    assert_eq!(out.data()[i * 2 + j], s);
                }
            }
        }
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let id = project_qkv(&x, &eye, &eye, &eye, (3, 1)).unwrap();
        assert_eq!(id.q, x);
        assert!(project_qkv(&x, &rand_tensor(&[3, 2], 0), &eye, &eye, (3, 1)).is_err());
    }

    #[test]
    fn attention_edge_cases_and_scalar_oracle() {
        // single token with positive q, k: output equals v
        let one = TokenSet {
            q: Tensor::new(&[1, 2], vec![0.3, 0.7]).unwrap(),
            k: Tensor::new(&[1, 2], vec![1.2, 0.1]).unwrap(),
            v: Tensor::new(&[1, 2], vec![-2.0, 5.0]).unwrap(),
            spatial: (1, 1),
        };
        let o = relu_linear_attention(&one).unwrap();
        assert!((o.data()[0] + 2.0).abs() < 1e-4 && (o.data()[1] - 5.0).abs() < 1e-4);

        let t = TokenSet {
            q: Tensor::new(&[2, 2], vec![0.5, -1.0, -0.2, -0.3]).unwrap(),
            k: Tensor::new(&[2, 2], vec![0.4, 0.9, 1.5, -0.1]).unwrap(),
            v: Tensor::new(&[2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap(),
            spatial: (1, 2),
        };
        let o = relu_linear_attention(&t).unwrap();
        let relu = |x: f64| x.max(0.0);
        for n in 0..2 {
            let mut num = [0.0; 2];
            let mut den = 0.0;
            for j in 0..2 {
                let mut s = 0.0;
                for a in 0..2 {
                    s += relu(t.q.data()[n * 2 + a]) * relu(t.k.data()[j * 2 + a]);
                }
                den += s;
                for c in 0..2 {
                    num[c] += s * t.v.data()[j * 2 + c];
                }
            }
            for c in 0..2 {
                assert!((o.data()[n * 2 + c] - num[c] / (den + ATTENTION_EPS)).abs() < 1e-14);
            }
        }
        // second query row is entirely negative
        assert_eq!(&o.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn attention_rows_are_stochastic_for_positive_inputs() {
        let q = rand_tensor(&[5, 3], 8).map(|v| v.abs() + 0.1);
        let k = rand_tensor(&[5, 3], 9).map(|v| v.abs() + 0.1);
        // with v = 1 the output is the sum of the attention weights
        let t = TokenSet {
            q,
            k,
            v: Tensor::full(&[5, 3], 1.0),
            spatial: (5, 1),
        };
        let o = relu_linear_attention(&t).unwrap();
        assert!(o.data().iter().all(|&x| (x - 1.0).abs() < 1e-6));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let q = rand_tensor(&[2, 3, 2, 2], 1);
        let k = rand_tensor(&[2, 3, 2, 2], 2);
        let v = rand_tensor(&[2, 3, 2, 2], 3);
        let wt = rand_tensor(&[2, 3, 2, 2], 4);
        let f = |q: &Tensor, k: &Tensor, v: &Tensor| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.leaf(q.clone(), true), g.leaf(k.clone(), true), g.leaf(v.clone(), true));
            let o = g.linear_attention(qv, kv, vv, ATTENTION_EPS);
            let w = g.constant(wt.clone());
            let o = g.mul(o, w);
            let s = g.sum(o);
            let gr = g.backward(s);
            (
                g.value(s).item(),
                [gr.get(qv).unwrap().clone(), gr.get(kv).unwrap().clone(), gr.get(vv).unwrap().clone()],
            )
        };
        let (_, an) = f(&q, &k, &v);
        assert_grad_close(&an[0], &numeric_grad(&q, 1e-6, |x| f(x, &k, &v).0), 1e-5);
        assert_grad_close(&an[1], &numeric_grad(&k, 1e-6, |x| f(&q, x, &v).0), 1e-5);
        assert_grad_close(&an[2], &numeric_grad(&v, 1e-6, |x| f(&q, &k, x).0), 1e-5);
    }

    fn mix(store: &ParamStore, b: &NasVitBlock, tokens: &Tensor, weights: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let mut p = store.binding(&[]);
        let t = g.constant(tokens.clone());
        let w = g.constant(weights.clone());
        let out = b.mix_tokens(&mut g, &mut p, t, 0, MixChoice::Weights(w));
        g.value(out).clone()
    }

    #[test]
    fn mix_tokens_identity_zero_and_passthrough() {
        let (store, b) = block(8, 5);
        let t = rand_tensor(&[1, 8, 3, 3], 6);
        let one_hot = |k: usize| Tensor::from_fn(&[8], |i| if i == k { 1.0 } else { 0.0 });
        let skip = mix(&store, &b, &t, &one_hot(op_index(OpKind::Skip)));
        assert!(skip.max_abs_diff(&t) <= 1e-12);
        let zero = mix(&store, &b, &t, &one_hot(op_index(OpKind::Zero)));
        let mask = b.mask().as_binary();
        for (ch, &m) in mask.iter().enumerate() {
            let plane = &zero.data()[ch * 9..(ch + 1) * 9];
            let orig = &t.data()[ch * 9..(ch + 1) * 9];
            if m == 1 {
                assert!(plane.iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(plane, orig);
            }
        }
        let zeros = Tensor::zeros(&[1, 8, 3, 3]);
        let uniform = Tensor::full(&[8], 0.125);
        assert!(mix(&store, &b, &zeros, &uniform).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let (s1, b1) = block(4, 11);
        let (s2, b2) = block(4, 11);
        assert_eq!(s1, s2);
        assert_eq!(b1.mask(), b2.mask());
        let x = rand_tensor(&[2, 4, 4, 4], 12);
        let run = |store: &ParamStore, b: &NasVitBlock| {
            let mut g = Graph::new();
            let mut p = store.binding(&[]);
            let xv = g.constant(x.clone());
            let w = g.constant(Tensor::full(&[8], 0.125));
            let y = b.forward(&mut g, &mut p, xv, &[MixChoice::Weights(w)]);
            g.value(y).clone()
        };
        let y1 = run(&s1, &b1);
        assert_eq!(y1.shape(), x.shape());
        assert_eq!(y1, run(&s2, &b2));
    }

    #[test]
    fn ffn_residual_identity_with_zero_projection() {
        let (mut store, b) = block(2, 2);
        let z = store.get(b.ffn_projection()).shape().to_vec();
        *store.get_mut(b.ffn_projection()) = Tensor::zeros(&z);
        let x = rand_tensor(&[1, 2, 3, 3], 1);
        let mut g = Graph::new();
        let mut p = store.binding(&[]);
        let xv = g.constant(x.clone());
        let y = b.ffn(&mut g, &mut p, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn ffn_gradients_match_finite_differences() {
        let (store, b) = block(2, 21);
        let x = rand_tensor(&[1, 2, 3, 3], 22);
        let wt = rand_tensor(&[1, 2, 3, 3], 23);
        let loss = |store: &ParamStore, x: &Tensor| {
            let mut g = Graph::new();
            let mut p = store.binding(&[ParamGroup::Weight]);
            let xv = g.leaf(x.clone(), true);
            let y = b.ffn(&mut g, &mut p, xv);
            let w = g.constant(wt.clone());
            let y = g.mul(y, w);
            let s = g.sum(y);
            let gr = g.backward(s);
            (g.value(s).item(), p.gradients(&gr), gr.get(xv).unwrap().clone())
        };
        let (_, grads, gx) = loss(&store, &x);
        assert_grad_close(&gx, &numeric_grad(&x, 1e-6, |x| loss(&store, x).0), 1e-4);
        assert_eq!(grads.len(), 3);
        for (id, an) in grads {
            let num = numeric_grad(store.get(id), 1e-6, |t| {
                let mut s = store.clone();
                *s.get_mut(id) = t.clone();
                loss(&s, &x).0
            });
            assert_grad_close(&an, &num, 1e-4);
        }
    }

    #[test]
    fn block_gradients_reach_logits_and_all_parameters() {
        let (store, b) = block(4, 31);
        let x = rand_tensor(&[1, 4, 4, 4], 32);
        let logits = rand_tensor(&[1, 8], 33);
        let loss = |logits: &Tensor| {
            let mut g = Graph::new();
            let mut p = store.binding(&[ParamGroup::Weight]);
            let xv = g.constant(x.clone());
            let lv = g.leaf(logits.clone(), true);
            let w = g.softmax_row(lv, 0);
            let y = b.forward(&mut g, &mut p, xv, &[MixChoice::Weights(w)]);
            let sq = g.mul(y, y);
            let s = g.sum(sq);
            let gr = g.backward(s);
            let params = p.gradients(&gr);
            (g.value(s).item(), gr.get(lv).unwrap().clone(), params)
        };
        let (_, ga, params) = loss(&logits);
        let num = numeric_grad(&logits, 1e-6, |l| loss(l).0);
        assert!(num.data().iter().any(|v| v.abs() > 1e-8));
        assert_grad_close(&ga, &num, 1e-4);
        assert_eq!(params.len(), store.len(), "every parameter must be reached");
        for (_, gp) in params {
            assert!(gp.is_finite());
        }
    }
}
