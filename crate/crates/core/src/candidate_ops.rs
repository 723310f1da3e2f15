//! Candidate operations searched inside encoder and decoder cells.
//!
//! Every operation is stride 1, size preserving and bias free, so each one
//! maps the zero map to the zero map and all of them can be mixed on the same
//! feature map.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3_r2")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5_r2")]
    DilConv5x5,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "skip")]
    Skip,
    #[serde(rename = "zero")]
    Zero,
}

/// Encoder candidate set; the position of each kind is its index along the
/// last axis of the encoder relaxation logits.
pub const ENCODER_OPS: [OpKind; 8] = [
    OpKind::SepConv3x3,
    OpKind::SepConv5x5,
    OpKind::DilConv3x3,
    OpKind::DilConv5x5,
    OpKind::AvgPool3x3,
    OpKind::MaxPool3x3,
    OpKind::Skip,
    OpKind::Zero,
];

/// Decoder candidate set: the encoder set without pooling and without `zero`.
pub const DECODER_OPS: [OpKind; 5] = [
    OpKind::SepConv3x3,
    OpKind::SepConv5x5,
    OpKind::DilConv3x3,
    OpKind::DilConv5x5,
    OpKind::Skip,
];

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3_r2",
            OpKind::DilConv5x5 => "dil_conv_5x5_r2",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::Skip => "skip",
            OpKind::Zero => "zero",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ENCODER_OPS
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpRole {
    Encoder,
    Decoder,
}

impl FromStr for OpRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(OpRole::Encoder),
            "decoder" => Ok(OpRole::Decoder),
            other => Err(Error::Config(format!(
                "unknown operation role `{other}` (expected `encoder` or `decoder`)"
            ))),
        }
    }
}

impl fmt::Display for OpRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpRole::Encoder => "encoder",
            OpRole::Decoder => "decoder",
        })
    }
}

/// The documented, stable operation ordering for a role.
pub fn op_set(role: OpRole) -> &'static [OpKind] {
    match role {
        OpRole::Encoder => &ENCODER_OPS,
        OpRole::Decoder => &DECODER_OPS,
    }
}

/// Decoder candidate set variant (the `full` variant re-admits pooling and `zero`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderOpSet {
    #[default]
    Compact,
    Full,
}

impl DecoderOpSet {
    pub fn ops(self) -> &'static [OpKind] {
        match self {
            DecoderOpSet::Compact => &DECODER_OPS,
            DecoderOpSet::Full => &ENCODER_OPS,
        }
    }
}

impl FromStr for DecoderOpSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compact" => Ok(DecoderOpSet::Compact),
            "full" => Ok(DecoderOpSet::Full),
            other => Err(Error::Config(format!(
                "unknown decoder op set `{other}` (expected `compact` or `full`)"
            ))),
        }
    }
}

/// One instantiated candidate operation over `channels` feature maps.
#[derive(Clone, Debug)]
pub struct OpInstance {
    kind: OpKind,
    channels: usize,
    kernels: Vec<ParamId>,
}

/// Builds `kind` over `channels` maps, registering its kernels in `store`
/// under `prefix`. The same `(kind, channels, seed)` always yields the same values.
pub fn build_op(store: &mut ParamStore, prefix: &str, kind: OpKind, channels: usize, seed: u64) -> Result<OpInstance> {
    if channels < 1 {
        return Err(Error::Config(format!("{prefix}: operation needs at least one channel")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = channels;
    let mut kernel = |store: &mut ParamStore, part: &str, shape: [usize; 4]| {
        store.conv_kernel(format!("{prefix}.{part}"), ParamGroup::Weight, shape, &mut rng)
    };
    let kernels = match kind {
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
            let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
            vec![
                kernel(store, "dw1", [c, 1, k, k]),
                kernel(store, "pw1", [c, c, 1, 1]),
                kernel(store, "dw2", [c, 1, k, k]),
                kernel(store, "pw2", [c, c, 1, 1]),
            ]
        }
        OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
            let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
            vec![kernel(store, "dw", [c, 1, k, k]), kernel(store, "pw", [c, c, 1, 1])]
        }
        _ => Vec::new(),
    };
    Ok(OpInstance { kind, channels, kernels })
}

impl OpInstance {
    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernels(&self) -> &[ParamId] {
        &self.kernels
    }

    /// Records the operation on `x` (`(b, channels, h, w)`); `None` is the zero map.
    pub fn forward(&self, g: &mut Graph, p: &mut Binding<'_>, x: Var) -> Option<Var> {
        let c = self.channels;
        match self.kind {
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if self.kind == OpKind::SepConv3x3 { 3 } else { 5 };
                let mut h = x;
                for stage in 0..2 {
                    let dw = p.var(g, self.kernels[2 * stage]);
                    let pw = p.var(g, self.kernels[2 * stage + 1]);
                    h = g.relu(h);
                    h = g.conv2d(h, dw, ConvSpec::same(k, 1, c));
                    h = g.conv2d(h, pw, ConvSpec::POINTWISE);
                }
                Some(h)
            }
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                let k = if self.kind == OpKind::DilConv3x3 { 3 } else { 5 };
                let dw = p.var(g, self.kernels[0]);
                let pw = p.var(g, self.kernels[1]);
                let h = g.relu(x);
                let h = g.conv2d(h, dw, ConvSpec::same(k, 2, c));
                Some(g.conv2d(h, pw, ConvSpec::POINTWISE))
            }
            OpKind::AvgPool3x3 => Some(g.avg_pool3(x)),
            OpKind::MaxPool3x3 => Some(g.max_pool3(x)),
            OpKind::Skip => Some(x),
            OpKind::Zero => None,
        }
    }

    /// Evaluates the operation on a concrete `(b, c, h, w)` or `(c, h, w)` tensor.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let squeeze = x.shape().len() == 3;
        let x4 = if squeeze {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.clone().reshape(&s)?
        } else {
            x.clone()
        };
        if x4.shape().len() != 4 || x4.shape()[1] != self.channels {
            return Err(Error::Contract(format!(
                "{} expects {} channels, got shape {:?}",
                self.kind,
                self.channels,
                x.shape()
            )));
        }
        let mut g = Graph::new();
        let mut p = store.binding(&[]);
        let xv = g.constant(x4.clone());
        let out = match self.forward(&mut g, &mut p, xv) {
            Some(v) => g.value(v).clone(),
            None => Tensor::zeros(x4.shape()),
        };
        if squeeze {
            out.reshape(x.shape())
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::{numeric_grad, rand_tensor};

    #[test]
    fn op_sets_have_documented_order() {
        assert_eq!(op_set(OpRole::Encoder).len(), 8);
        assert_eq!(op_set(OpRole::Decoder).len(), 5);
        assert_eq!(op_set(OpRole::Encoder)[0], OpKind::SepConv3x3);
        assert_eq!(op_set(OpRole::Encoder)[7], OpKind::Zero);
        assert!(!op_set(OpRole::Decoder)
            .iter()
            .any(|k| matches!(k, OpKind::AvgPool3x3 | OpKind::MaxPool3x3 | OpKind::Zero)));
        assert!(matches!("both".parse::<OpRole>(), Err(Error::Config(_))));
        assert_eq!("decoder".parse::<OpRole>().unwrap(), OpRole::Decoder);
        for k in ENCODER_OPS {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }

    #[test]
    fn zero_channels_rejected() {
        let mut s = ParamStore::new();
        assert!(matches!(build_op(&mut s, "x", OpKind::SepConv3x3, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_zero_propagation_and_determinism() {
        let x = rand_tensor(&[2, 3, 6, 7], 4);
        for kind in ENCODER_OPS {
            let mut s1 = ParamStore::new();
            let mut s2 = ParamStore::new();
            let a = build_op(&mut s1, "op", kind, 3, 9).unwrap();
            let b = build_op(&mut s2, "op", kind, 3, 9).unwrap();
            assert_eq!(s1, s2, "{kind} parameters differ for the same seed");
            let ya = a.apply(&s1, &x).unwrap();
            let yb = b.apply(&s2, &x).unwrap();
            assert_eq!(ya.shape(), x.shape());
            assert_eq!(ya, yb);
            let z = a.apply(&s1, &Tensor::zeros(&[1, 3, 5, 5])).unwrap();
            assert!(z.data().iter().all(|&v| v == 0.0), "{kind} does not map 0 to 0");
        }
    }

    #[test]
    fn skip_is_identity_and_zero_is_zero() {
        let mut s = ParamStore::new();
        let x = rand_tensor(&[8, 4, 4], 1);
        let skip = build_op(&mut s, "s", OpKind::Skip, 8, 0).unwrap();
        let zero = build_op(&mut s, "z", OpKind::Zero, 8, 0).unwrap();
        assert_eq!(skip.apply(&s, &x).unwrap(), x);
        assert_eq!(zero.apply(&s, &x).unwrap(), Tensor::zeros(&[8, 4, 4]));
    }

    #[test]
    fn sep_conv_kernel_gradient_matches_finite_differences() {
        let mut s = ParamStore::new();
        let op = build_op(&mut s, "sep", OpKind::SepConv3x3, 4, 5).unwrap();
        let x = rand_tensor(&[1, 4, 5, 5], 6);
        let weights = rand_tensor(&[1, 4, 5, 5], 7);
        let loss = |store: &ParamStore, track: bool| {
            let mut g = Graph::new();
            let groups = if track { vec![ParamGroup::Weight] } else { vec![] };
            let mut p = store.binding(&groups);
            let xv = g.constant(x.clone());
            let y = op.forward(&mut g, &mut p, xv).unwrap();
            let w = g.constant(weights.clone());
            let y = g.mul(y, w);
            let l = g.sum(y);
            let grads = if track { p.gradients(&g.backward(l)) } else { Vec::new() };
            (g.value(l).item(), grads)
        };
        let (_, grads) = loss(&s, true);
        assert_eq!(grads.len(), 4);
        for (id, analytic) in grads {
            let numeric = numeric_grad(s.get(id), 1e-6, |t| {
                let mut probe = s.clone();
                *probe.get_mut(id) = t.clone();
                loss(&probe, false).0
            });
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                let scale = a.abs().max(n.abs());
                if scale > 1e-8 {
                    assert!((a - n).abs() / scale < 1e-4, "{a} vs {n}");
                }
            }
        }
    }
}
