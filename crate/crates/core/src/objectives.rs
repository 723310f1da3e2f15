//! Loss terms of the co-training objective and their schedules.
//!
//! Value-level functions work on plain tensors and serve as the reference
//! definitions; the `*_graph` variants record the same quantities in a
//! [`Graph`] for training.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, COSINE_GUARD};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{ParamGroup, ParamId};
use crate::supernet::{argmax_channels, Supernet};
use crate::tensor::Tensor;

/// Smoothing of the soft Dice term.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Smoothing inside the uncertainty log-ratio.
pub const UNCERTAINTY_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda3: f64,
    /// Plateau of the ramped weights.
    pub ramp_max: f64,
    /// Epochs until the ramp reaches its plateau.
    pub i_ramp: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda3: 2.0,
            ramp_max: 5.0,
            i_ramp: 50,
        }
    }
}

impl LossWeights {
    pub fn lambda2(&self, i: usize) -> f64 {
        ramp(i, self.i_ramp, self.ramp_max)
    }

    pub fn lambda4(&self, i: usize) -> f64 {
        ramp(i, self.i_ramp, self.ramp_max)
    }
}

/// `5 exp(-5 (1 - min(i, I)/I)^2)` with the default plateau of 5.
pub fn ramp_weight(i: usize, i_ramp: usize) -> f64 {
    ramp(i, i_ramp, 5.0)
}

fn ramp(i: usize, i_ramp: usize, max: f64) -> f64 {
    if i_ramp == 0 {
        return max;
    }
    let t = 1.0 - i.min(i_ramp) as f64 / i_ramp as f64;
    max * (-5.0 * t * t).exp()
}

/// The four per-network terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub sup: f64,
    pub uns: f64,
    pub ind: f64,
    pub con: f64,
}

/// Weighted sum of the parts at (zero-based) epoch `i`.
pub fn total_loss(parts: &LossParts, w: &LossWeights, i: usize, network: usize) -> Result<f64> {
    for (term, v) in [("supervised", parts.sup), ("unsupervised", parts.uns), ("independence", parts.ind), ("contrastive", parts.con)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term, network, value: v });
        }
    }
    Ok(w.lambda1 * parts.sup + w.lambda2(i) * parts.uns + w.lambda3 * parts.ind + w.lambda4(i) * parts.con)
}

fn check_normalised(p: &Tensor) -> Result<()> {
    let (b, c, h, w) = p.dims4();
    let plane = h * w;
    for bi in 0..b {
        for px in 0..plane {
            let s: f64 = (0..c).map(|ch| p.data()[(bi * c + ch) * plane + px]).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("class probabilities sum to {s} at pixel {px}")));
            }
        }
    }
    Ok(())
}

fn cross_entropy(p: &Tensor, y: &[usize]) -> Result<f64> {
    let (b, c, h, w) = p.dims4();
    let plane = h * w;
    if y.len() != b * plane || y.iter().any(|&v| v >= c) {
        return Err(Error::Contract("labels do not match the probability maps".into()));
    }
    let mut s = 0.0;
    for bi in 0..b {
        for px in 0..plane {
            let v = p.data()[(bi * c + y[bi * plane + px]) * plane + px];
            s -= v.max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(s / (b * plane) as f64)
}

/// `1 - mean_c (2|P_c Y_c| + s) / (|P_c| + |Y_c| + s)` over all classes.
pub fn dice_loss(p: &Tensor, y: &[usize]) -> f64 {
    let (b, c, h, w) = p.dims4();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
        for bi in 0..b {
            for px in 0..plane {
                let v = p.data()[(bi * c + ch) * plane + px];
                ps += v;
                if y[bi * plane + px] == ch {
                    inter += v;
                    ys += 1.0;
                }
            }
        }
        total += (2.0 * inter + DICE_SMOOTH) / (ps + ys + DICE_SMOOTH);
    }
    1.0 - total / c as f64
}

/// Half the sum of cross-entropy and soft Dice for probability maps `(b, c, h, w)`.
pub fn supervised_loss(p: &Tensor, y: &[usize]) -> Result<f64> {
    check_normalised(p)?;
    let ce = cross_entropy(p, y)?;
    Ok(0.5 * (ce + dice_loss(p, y)))
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn pseudo_label(p: &Tensor) -> Vec<usize> {
    argmax_channels(p)
}

/// Cross-entropy of `p` against labels produced by the other network.
pub fn unsupervised_loss(p: &Tensor, pseudo: &[usize]) -> Result<f64> {
    check_normalised(p)?;
    cross_entropy(p, pseudo)
}

/// Supervised loss recorded on logits.
pub fn supervised_loss_graph(g: &mut Graph, logits: Var, y: &[usize]) -> Var {
    let lp = g.log_softmax_channels(logits);
    let ce = g.nll_mean(lp, y);
    let p = g.exp(lp);
    let dice = g.dice_loss(p, y, DICE_SMOOTH);
    let s = g.add(ce, dice);
    g.scale(s, 0.5)
}

/// Pseudo-label cross-entropy recorded on logits; `pseudo` is a constant.
pub fn unsupervised_loss_graph(g: &mut Graph, logits: Var, pseudo: &[usize]) -> Var {
    let lp = g.log_softmax_channels(logits);
    g.nll_mean(lp, pseudo)
}

/// A kernel viewed as `(c_out, d)` rows.
fn rows(t: &Tensor) -> (usize, usize) {
    let co = t.shape()[0];
    (co, t.numel() / co)
}

/// Mean squared cosine between rows of `a` and rows of `g_mat * b`.
pub fn layer_independence(a: &Tensor, b: &Tensor, g_mat: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!("paired layers differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (co, d) = rows(a);
    if g_mat.shape() != [co, co] {
        return Err(Error::Contract(format!("combination matrix {:?} for {co} rows", g_mat.shape())));
    }
    let (ad, bd, gd) = (a.data(), b.data(), g_mat.data());
    let mut total = 0.0;
    for k in 0..co {
        let q: Vec<f64> = (0..d).map(|j| (0..co).map(|m| gd[k * co + m] * bd[m * d + j]).sum()).collect();
        let ar = &ad[k * d..(k + 1) * d];
        let dot: f64 = ar.iter().zip(&q).map(|(x, y)| x * y).sum();
        let na = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = dot / (na * nq).max(COSINE_GUARD);
        total += cos * cos;
    }
    Ok(total / co as f64)
}

/// `L_ind` of network `a` against network `b` using `b`'s combination matrices.
pub fn independence_loss(a: &Supernet, b: &Supernet) -> Result<f64> {
    let (pa, pb) = (a.combinations(), b.combinations());
    if pa.len() != pb.len() {
        return Err(Error::Contract("networks register different numbers of paired layers".into()));
    }
    if pa.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (&(la, _), &(lb, gb)) in pa.iter().zip(pb) {
        s += layer_independence(a.store.get(la), b.store.get(lb), b.store.get(gb))?;
    }
    Ok(s / pa.len() as f64)
}

/// One layer of the independence loss recorded on the graph.
pub fn layer_independence_graph(g: &mut Graph, a: Var, b: Var, g_mat: Var) -> Var {
    let (co, d) = rows(g.value(a));
    let a2 = g.reshape(a, &[co, d]);
    let b2 = g.reshape(b, &[co, d]);
    let q = g.matmul(g_mat, b2);
    g.cos2_rows_mean(a2, q)
}

/// Mean over paired layers of `layer_independence_graph`, where `var_a` and
/// `var_b` supply the nodes for a layer of network a / b and `var_g` the
/// combination matrix belonging to network b.
pub fn independence_graph(
    g: &mut Graph,
    layers: &[(ParamId, ParamId, ParamId)],
    mut var_a: impl FnMut(&mut Graph, ParamId) -> Var,
    mut var_b: impl FnMut(&mut Graph, ParamId) -> Var,
    mut var_g: impl FnMut(&mut Graph, ParamId) -> Var,
) -> Option<Var> {
    if layers.is_empty() {
        return None;
    }
    let terms: Vec<Var> = layers
        .iter()
        .map(|&(la, lb, gb)| {
            let (a, b, m) = (var_a(g, la), var_b(g, lb), var_g(g, gb));
            layer_independence_graph(g, a, b, m)
        })
        .collect();
    let s = g.add_n(&terms);
    Some(g.scale(s, 1.0 / layers.len() as f64))
}

/// `(layer of a, layer of b, combination matrix of b)` triples, checked for shape agreement.
pub fn paired_layers(a: &Supernet, b: &Supernet) -> Result<Vec<(ParamId, ParamId, ParamId)>> {
    let (pa, pb) = (a.combinations(), b.combinations());
    if pa.len() != pb.len() {
        return Err(Error::Contract("networks register different numbers of paired layers".into()));
    }
    pa.iter()
        .zip(pb)
        .map(|(&(la, _), &(lb, gb))| {
            if a.store.get(la).shape() != b.store.get(lb).shape() {
                return Err(Error::Contract(format!(
                    "paired layer {} has mismatched shapes",
                    a.store.entry(la).name
                )));
            }
            Ok((la, lb, gb))
        })
        .collect()
}

/// `L_ind,1(.; G2) + L_ind,2(.; G1)` and its gradient w.r.t. `(G1, G2)` entries,
/// listed in combination order.
pub fn g_objective(net1: &Supernet, net2: &Supernet) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    let l12 = paired_layers(net1, net2)?;
    let l21 = paired_layers(net2, net1)?;
    let mut g = Graph::new();
    let mut p1 = net1.store.binding(&[ParamGroup::Combination]);
    let mut p2 = net2.store.binding(&[ParamGroup::Combination]);
    let (s1, s2) = (&net1.store, &net2.store);
    let Some(j1) = independence_graph(
        &mut g,
        &l12,
        |g, id| g.constant(s1.get(id).clone()),
        |g, id| g.constant(s2.get(id).clone()),
        |g, id| p2.var(g, id),
    ) else {
        return Ok((0.0, vec![], vec![]));
    };
    let j2 = independence_graph(
        &mut g,
        &l21,
        |g, id| g.constant(s2.get(id).clone()),
        |g, id| g.constant(s1.get(id).clone()),
        |g, id| p1.var(g, id),
    )
    .expect("same layer count");
    let j = g.add(j1, j2);
    let grads = g.backward(j);
    let collect = |p: &crate::params::Binding<'_>, net: &Supernet| {
        let gr = p.gradients(&grads);
        net.combinations()
            .iter()
            .map(|&(_, gid)| {
                gr.iter()
                    .find(|(id, _)| *id == gid)
                    .map(|(_, t)| t.clone())
                    .unwrap_or_else(|| Tensor::zeros(net.store.get(gid).shape()))
            })
            .collect::<Vec<_>>()
    };
    let (gr1, gr2) = (collect(&p1, net1), collect(&p2, net2));
    Ok((g.value(j).item(), gr1, gr2))
}

/// `steps` Adam ascent steps on the independence objective w.r.t. the
/// combination matrices only. Returns the objective before each step and
/// after the last one.
pub fn maximize_g(net1: &mut Supernet, net2: &mut Supernet, opt1: &mut Adam, opt2: &mut Adam, steps: usize) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (j, gr1, gr2) = g_objective(net1, net2)?;
        if !j.is_finite() {
            return Err(Error::NonFinite {
                term: "independence",
                network: 1,
                value: j,
            });
        }
        trace.push(j);
        for (net, opt, grads) in [(&mut *net1, &mut *opt1, gr1), (&mut *net2, &mut *opt2, gr2)] {
            let ids: Vec<ParamId> = net.combinations().iter().map(|&(_, gid)| gid).collect();
            for (slot, (gid, grad)) in ids.into_iter().zip(grads).enumerate() {
                let neg: Vec<f64> = grad.data().iter().map(|v| -v).collect();
                opt.step(slot, net.store.get_mut(gid).data_mut(), &neg);
            }
        }
    }
    trace.push(g_objective(net1, net2)?.0);
    Ok(trace)
}

/// Which mean the uncertainty log-ratio compares against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMean {
    /// Spatial mean of each channel.
    #[default]
    Spatial,
    /// Mean over channels at each position.
    Channel,
}

/// KL-style uncertainty `(b, h, w)` of rectified features `(b, c, h, w)`.
pub fn uncertainty_map(x: &Tensor, mean: UncertaintyMean) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let plane = h * w;
    let d = x.data();
    let mut u = Tensor::zeros(&[b, h, w]);
    for bi in 0..b {
        let at = |ch: usize, px: usize| d[(bi * c + ch) * plane + px].max(0.0);
        let spatial: Vec<f64> = (0..c).map(|ch| (0..plane).map(|px| at(ch, px)).sum::<f64>() / plane as f64).collect();
        for px in 0..plane {
            let channel = (0..c).map(|ch| at(ch, px)).sum::<f64>() / c as f64;
            let mut s = 0.0;
            for ch in 0..c {
                let v = at(ch, px);
                if v == 0.0 {
                    continue;
                }
                let m = match mean {
                    UncertaintyMean::Spatial => spatial[ch],
                    UncertaintyMean::Channel => channel,
                };
                s += v * ((v + UNCERTAINTY_EPS) / (m + UNCERTAINTY_EPS)).ln();
            }
            u.data_mut()[bi * plane + px] = s;
        }
    }
    u
}

/// Positions where network 1 (resp. 2) is strictly more uncertain.
pub fn contrastive_masks(u1: &Tensor, u2: &Tensor) -> (Vec<bool>, Vec<bool>) {
    let m1 = u1.data().iter().zip(u2.data()).map(|(a, b)| a > b).collect();
    let m2 = u1.data().iter().zip(u2.data()).map(|(a, b)| b > a).collect();
    (m1, m2)
}

fn masked_mse_value(x: &Tensor, t: &Tensor, mask: &[bool]) -> f64 {
    let (b, c, h, w) = x.dims4();
    let plane = h * w;
    let mut s = 0.0;
    for bi in 0..b {
        for px in 0..plane {
            if mask[bi * plane + px] {
                let acc: f64 = (0..c)
                    .map(|ch| {
                        let i = (bi * c + ch) * plane + px;
                        (x.data()[i] - t.data()[i]).powi(2)
                    })
                    .sum();
                s += acc / c as f64;
            }
        }
    }
    s / (b * plane) as f64
}

fn check_resolutions(f1: &[(usize, Tensor)], f2: &[(usize, Tensor)], res: &[usize]) -> Result<()> {
    for r in res {
        let a = f1.iter().find(|(x, _)| x == r);
        let b = f2.iter().find(|(x, _)| x == r);
        match (a, b) {
            (Some((_, a)), Some((_, b))) if a.shape() == b.shape() => {}
            _ => return Err(Error::Contract(format!("both traces must provide resolution {r} with equal shapes"))),
        }
    }
    Ok(())
}

/// `(L_con,1, L_con,2)` over the requested resolutions of two decoder traces.
pub fn contrastive_loss(f1: &[(usize, Tensor)], f2: &[(usize, Tensor)], res: &[usize], mean: UncertaintyMean) -> Result<(f64, f64)> {
    check_resolutions(f1, f2, res)?;
    let (mut l1, mut l2) = (0.0, 0.0);
    for r in res {
        let a = &f1.iter().find(|(x, _)| x == r).unwrap().1;
        let b = &f2.iter().find(|(x, _)| x == r).unwrap().1;
        let (m1, m2) = contrastive_masks(&uncertainty_map(a, mean), &uncertainty_map(b, mean));
        l1 += masked_mse_value(a, b, &m1);
        l2 += masked_mse_value(b, a, &m2);
    }
    Ok((l1, l2))
}

/// Contrastive terms on the graph: network `i` is pulled towards the detached
/// features of the other network where it is more uncertain.
pub fn contrastive_graph(g: &mut Graph, f1: &[(usize, Var)], f2: &[(usize, Var)], res: &[usize], mean: UncertaintyMean) -> Result<(Option<Var>, Option<Var>)> {
    let (mut t1, mut t2) = (Vec::new(), Vec::new());
    for r in res {
        let find = |f: &[(usize, Var)]| f.iter().find(|(x, _)| x == r).map(|&(_, v)| v);
        let (Some(a), Some(b)) = (find(f1), find(f2)) else {
            return Err(Error::Contract(format!("decoder traces lack resolution {r}")));
        };
        let (av, bv) = (g.value(a).clone(), g.value(b).clone());
        let (_, _, h, w) = av.dims4();
        let denom = (av.shape()[0] * h * w) as f64;
        let (m1, m2) = contrastive_masks(&uncertainty_map(&av, mean), &uncertainty_map(&bv, mean));
        t1.push(g.masked_mse(a, &bv, &m1, denom));
        t2.push(g.masked_mse(b, &av, &m2, denom));
    }
    let sum = |g: &mut Graph, t: Vec<Var>| (!t.is_empty()).then(|| g.add_n(&t));
    Ok((sum(g, t1), sum(g, t2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::{assert_grad_close, numeric_grad, rand_tensor};
    use crate::encoder::EncoderConfig;
    use crate::optim::AdamConfig;
    use crate::supernet::SupernetConfig;
    use proptest::prelude::*;

    fn probs(c: usize, values: &[f64]) -> Tensor {
        let n = values.len() / c;
        Tensor::new(&[1, c, 1, n], values.to_vec()).unwrap()
    }

    #[test]
    fn supervised_examples() {
        let y = vec![0, 1, 1, 0];
        let one_hot = probs(2, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        assert!(supervised_loss(&one_hot, &y).unwrap().abs() < 1e-12);
        let uni = probs(3, &[1.0 / 3.0; 12]);
        let y3 = vec![0, 1, 2, 2];
        assert!((cross_entropy(&uni, &y3).unwrap() - 3f64.ln()).abs() < 1e-12);
        let p = Tensor::new(&[1, 2, 2, 2], vec![0.8, 0.8, 0.8, 0.8, 0.2, 0.2, 0.2, 0.2]).unwrap();
        let y0 = vec![0; 4];
        let ce = -(0.8f64).ln();
        let d0 = (2.0 * 3.2 + 1e-5) / (3.2 + 4.0 + 1e-5);
        let d1 = 1e-5 / (0.8 + 1e-5);
        let expect = 0.5 * (ce + 1.0 - (d0 + d1) / 2.0);
        assert!((supervised_loss(&p, &y0).unwrap() - expect).abs() < 1e-12);
        let bad = probs(2, &[0.5, 0.6]);
        assert!(matches!(supervised_loss(&bad, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn graph_losses_match_value_definitions() {
        let logits = rand_tensor(&[2, 3, 2, 2], 3);
        let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let s = supervised_loss_graph(&mut g, l, &y);
        let u = unsupervised_loss_graph(&mut g, l, &y);
        let lp = g.log_softmax_channels(l);
        let p = g.exp(lp);
        let pv = g.value(p).clone();
        assert!((g.value(s).item() - supervised_loss(&pv, &y).unwrap()).abs() < 1e-12);
        assert!((g.value(u).item() - unsupervised_loss(&pv, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_rules() {
        assert_eq!(pseudo_label(&probs(2, &[0.9, 0.1])), vec![0]);
        assert_eq!(pseudo_label(&probs(2, &[0.5, 0.5])), vec![0]);
        let m = vec![2, 0, 1, 1];
        let oh = Tensor::from_fn(&[1, 3, 1, 4], |i| (m[i % 4] == i / 4) as u8 as f64);
        assert_eq!(pseudo_label(&oh), m);
        assert!(unsupervised_loss(&oh, &m).unwrap().abs() < 1e-12);
        let uni = probs(4, &[0.25; 8]);
        assert!((unsupervised_loss(&uni, &[3, 1]).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn independence_examples() {
        let a = rand_tensor(&[3, 4], 1);
        let eye = Tensor::from_fn(&[3, 3], |i| (i / 3 == i % 3) as u8 as f64);
        assert!((layer_independence(&a, &a, &eye).unwrap() - 1.0).abs() < 1e-15);
        // rows of G B orthogonal to rows of A
        let a = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let eye2 = Tensor::from_fn(&[2, 2], |i| (i / 2 == i % 2) as u8 as f64);
        assert_eq!(layer_independence(&a, &b, &eye2).unwrap(), 0.0);
        // scalar double loop
        let a = rand_tensor(&[3, 4], 2);
        let b = rand_tensor(&[3, 4], 3);
        let gm = rand_tensor(&[3, 3], 4);
        let mut expect = 0.0;
        for k in 0..3 {
            let mut q = [0.0; 4];
            for j in 0..4 {
                for m in 0..3 {
                    q[j] += gm.data()[k * 3 + m] * b.data()[m * 4 + j];
                }
            }
            let (mut dot, mut na, mut nq) = (0.0, 0.0, 0.0);
            for j in 0..4 {
                dot += a.data()[k * 4 + j] * q[j];
                na += a.data()[k * 4 + j].powi(2);
                nq += q[j] * q[j];
            }
            expect += dot * dot / (na * nq) / 3.0;
        }
        assert!((layer_independence(&a, &b, &gm).unwrap() - expect).abs() < 1e-14);
        let mut g = Graph::new();
        let (av, bv, gv) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(gm.clone()));
        let l = layer_independence_graph(&mut g, av, bv, gv);
        assert!((g.value(l).item() - expect).abs() < 1e-14);
        assert!(layer_independence(&a, &rand_tensor(&[3, 5], 1), &gm).is_err());
    }

    fn tiny_pair() -> (Supernet, Supernet) {
        let cfg = SupernetConfig {
            encoder: EncoderConfig {
                layers: 2,
                nodes: 1,
                c_base: 4,
                num_resolutions: 2,
                ..EncoderConfig::default()
            },
            ..SupernetConfig::default()
        };
        (Supernet::new(&cfg, 1).unwrap(), Supernet::new(&cfg, 2).unwrap())
    }

    #[test]
    fn g_ascent_is_monotone_and_gradient_checks() {
        let (mut n1, mut n2) = tiny_pair();
        let cfg = AdamConfig::new(1e-3, 0.0);
        let (mut o1, mut o2) = (Adam::new(cfg), Adam::new(cfg));
        let before = n1.store.clone();
        let trace = maximize_g(&mut n1, &mut n2, &mut o1, &mut o2, 6).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{trace:?}");
        }
        assert_eq!(
            n1.store.changed_groups(&before).into_iter().collect::<Vec<_>>(),
            vec![ParamGroup::Combination]
        );
        // finite difference on one entry of G2
        let (_, _, gr2) = g_objective(&n1, &n2).unwrap();
        let gid = n2.combinations()[3].1;
        let idx = 1;
        let h = 1e-6;
        let eval = |v: f64| {
            let mut m = n2.clone();
            m.store.get_mut(gid).data_mut()[idx] = v;
            g_objective(&n1, &m).unwrap().0
        };
        let x0 = n2.store.get(gid).data()[idx];
        let num = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
        let an = gr2[3].data()[idx];
        assert!((an - num).abs() <= 1e-4 * an.abs().max(1e-6), "{an} vs {num}");
    }

    #[test]
    fn single_row_layers_are_scale_invariant() {
        let a = rand_tensor(&[1, 6], 1);
        let b = rand_tensor(&[1, 6], 2);
        let base = layer_independence(&a, &b, &Tensor::full(&[1, 1], 1.0)).unwrap();
        for s in [0.1, 3.0, -2.5] {
            let v = layer_independence(&a, &b, &Tensor::full(&[1, 1], s)).unwrap();
            assert!((v - base).abs() < 1e-10);
        }
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let gv = g.leaf(Tensor::full(&[1, 1], 1.7), true);
        let l = layer_independence_graph(&mut g, av, bv, gv);
        assert!(g.backward(l).get(gv).unwrap().data()[0].abs() < 1e-10);
    }

    #[test]
    fn independence_graph_gradient_wrt_weights() {
        let a = rand_tensor(&[3, 2, 1, 2], 5);
        let b = rand_tensor(&[3, 2, 1, 2], 6);
        let gm = rand_tensor(&[3, 3], 7);
        let f = |a: &Tensor| {
            let mut g = Graph::new();
            let av = g.leaf(a.clone(), true);
            let (bv, gv) = (g.constant(b.clone()), g.constant(gm.clone()));
            let l = layer_independence_graph(&mut g, av, bv, gv);
            (g.value(l).item(), g.backward(l).get(av).unwrap().clone())
        };
        assert_grad_close(&f(&a).1, &numeric_grad(&a, 1e-6, |x| f(x).0), 1e-5);
    }

    #[test]
    fn uncertainty_examples() {
        let constant = Tensor::from_fn(&[1, 2, 2, 2], |i| if i < 4 { 0.7 } else { 2.0 });
        assert!(uncertainty_map(&constant, UncertaintyMean::Spatial).data().iter().all(|v| v.abs() < 1e-15));
        assert!(uncertainty_map(&Tensor::zeros(&[1, 3, 2, 2]), UncertaintyMean::Spatial).data().iter().all(|&v| v == 0.0));
        let x = Tensor::new(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        let u = uncertainty_map(&x, UncertaintyMean::Spatial);
        let e = 1e-8;
        for px in 0..4 {
            let (a, b) = (x.data()[px], x.data()[4 + px]);
            let expect = a * ((a + e) / (2.5 + e)).ln() + b * ((b + e) / (2.5 + e)).ln();
            assert!((u.data()[px] - expect).abs() < 1e-14);
        }
        // channel mean variant: each position averages to 2.5 as well
        let uc = uncertainty_map(&x, UncertaintyMean::Channel);
        assert!(uc.max_abs_diff(&u) < 1e-14);
    }

    #[test]
    fn contrastive_examples() {
        let f = rand_tensor(&[1, 3, 2, 2], 1);
        let same = vec![(4, f.clone())];
        assert_eq!(contrastive_loss(&same, &same, &[4], UncertaintyMean::Spatial).unwrap(), (0.0, 0.0));
        // 1-channel 2x2 at one resolution, against a scalar evaluation
        let a = Tensor::new(&[1, 1, 2, 2], vec![0.2, 1.5, 0.0, 0.9]).unwrap();
        let b = Tensor::new(&[1, 1, 2, 2], vec![0.6, 0.6, 0.3, 1.2]).unwrap();
        let u = |t: &Tensor| {
            let m = t.data().iter().sum::<f64>() / 4.0;
            t.data().iter().map(|&v| if v == 0.0 { 0.0 } else { v * ((v + 1e-8) / (m + 1e-8)).ln() }).collect::<Vec<_>>()
        };
        let (ua, ub) = (u(&a), u(&b));
        let (mut e1, mut e2) = (0.0, 0.0);
        for i in 0..4 {
            let d = (a.data()[i] - b.data()[i]).powi(2);
            if ua[i] > ub[i] {
                e1 += d / 4.0;
            }
            if ub[i] > ua[i] {
                e2 += d / 4.0;
            }
        }
        let (l1, l2) = contrastive_loss(&[(8, a.clone())], &[(8, b.clone())], &[8], UncertaintyMean::Spatial).unwrap();
        assert!((l1 - e1).abs() < 1e-15 && (l2 - e2).abs() < 1e-15);
        assert!(e1 > 0.0 && e2 > 0.0);
        assert!(contrastive_loss(&[(8, a)], &[(4, b)], &[8], UncertaintyMean::Spatial).is_err());
    }

    #[test]
    fn contrastive_one_sided_mask_and_graph_agreement() {
        // b is spatially constant so U2 = 0 while U1 > 0 at every position
        let a = Tensor::new(&[1, 2, 1, 2], vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        let b = Tensor::full(&[1, 2, 1, 2], 0.5);
        let ua = uncertainty_map(&a, UncertaintyMean::Spatial);
        assert!(ua.data().iter().all(|&v| v > 0.0));
        let (l1, l2) = contrastive_loss(&[(4, a.clone())], &[(4, b.clone())], &[4], UncertaintyMean::Spatial).unwrap();
        assert_eq!(l2, 0.0);
        assert!((l1 - masked_mse_value(&a, &b, &[true, true])).abs() < 1e-15);
        let mut g = Graph::new();
        let av = g.leaf(a.clone(), true);
        let bv = g.leaf(b.clone(), true);
        let (c1, c2) = contrastive_graph(&mut g, &[(4, av)], &[(4, bv)], &[4], UncertaintyMean::Spatial).unwrap();
        let (c1, c2) = (c1.unwrap(), c2.unwrap());
        assert!((g.value(c1).item() - l1).abs() < 1e-15);
        assert_eq!(g.value(c2).item(), 0.0);
        // gradient of L_con,1 flows only into network 1's features
        let gr = g.backward(c1);
        assert!(gr.get(bv).is_none());
        assert!(gr.get(av).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn ramp_and_total() {
        assert!((ramp_weight(0, 50) - 5.0 * (-5f64).exp()).abs() < 1e-15);
        assert!((ramp_weight(0, 50) - 0.033690).abs() < 5e-7);
        assert_eq!(ramp_weight(50, 50), 5.0);
        assert_eq!(ramp_weight(80, 50), 5.0);
        let w = LossWeights::default();
        for i in 0..50 {
            assert!(ramp_weight(i + 1, 50) >= ramp_weight(i, 50));
            assert_eq!(w.lambda2(i), w.lambda4(i));
        }
        assert_eq!(total_loss(&LossParts::default(), &w, 3, 1).unwrap(), 0.0);
        let ones = LossParts { sup: 1.0, uns: 1.0, ind: 1.0, con: 1.0 };
        assert_eq!(total_loss(&ones, &w, 50, 1).unwrap(), 13.0);
        let two = LossParts { sup: 2.0, ..ones };
        assert_eq!(total_loss(&two, &w, 7, 1).unwrap() - total_loss(&ones, &w, 7, 1).unwrap(), 1.0);
        let bad = LossParts { con: f64::NAN, ..ones };
        assert!(matches!(total_loss(&bad, &w, 0, 2), Err(Error::NonFinite { term: "contrastive", network: 2, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn masks_are_disjoint(seed in 0u64..1_000_000, c in 1usize..4, h in 1usize..5) {
            let a = rand_tensor(&[1, c, h, h], seed);
            let b = rand_tensor(&[1, c, h, h], seed.wrapping_add(7));
            let (m1, m2) = contrastive_masks(&uncertainty_map(&a, UncertaintyMean::Spatial), &uncertainty_map(&b, UncertaintyMean::Spatial));
            prop_assert!(m1.iter().zip(&m2).all(|(x, y)| !(x & y)));
        }

        #[test]
        fn per_layer_independence_in_unit_interval(seed in 0u64..1_000_000, co in 1usize..4, d in 1usize..6) {
            let a = rand_tensor(&[co, d], seed);
            let b = rand_tensor(&[co, d], seed ^ 0x55);
            let gm = rand_tensor(&[co, co], seed ^ 0xaa);
            let v = layer_independence(&a, &b, &gm).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }

        #[test]
        fn swapping_networks_swaps_terms(seed in 0u64..1_000_000) {
            let a = rand_tensor(&[2, 2, 2, 2], seed);
            let b = rand_tensor(&[2, 2, 2, 2], seed + 1);
            let (x1, x2) = contrastive_loss(&[(4, a.clone())], &[(4, b.clone())], &[4], UncertaintyMean::Spatial).unwrap();
            let (y1, y2) = contrastive_loss(&[(4, b)], &[(4, a)], &[4], UncertaintyMean::Spatial).unwrap();
            prop_assert_eq!((x1, x2), (y2, y1));
        }
    }
}
