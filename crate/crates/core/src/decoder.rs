//! U-shaped searchable decoder with node-free cells.

use rand::Rng;

use crate::autograd::{ConvSpec, Graph, Var};
use crate::candidate_ops::{build_op, OpInstance, OpKind};
use crate::encoder::{EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nasvit::MixChoice;
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::supernet::ArchMode;
use crate::tensor::Tensor;

/// A decoder cell: one relaxed mixture over the decoder candidate set.
#[derive(Clone, Debug)]
pub struct DecoderCell {
    ops: Vec<OpInstance>,
    gamma: ParamId,
}

impl DecoderCell {
    pub fn new(store: &mut ParamStore, prefix: &str, ops: &[OpKind], channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut inst = Vec::with_capacity(ops.len());
        for &kind in ops {
            inst.push(build_op(store, &format!("{prefix}.{kind}"), kind, channels, rng.random())?);
        }
        let gamma = store.add(
            format!("{prefix}.gamma"),
            ParamGroup::Gamma,
            Tensor::from_fn(&[1, ops.len()], |_| 1e-3 * rng.random_range(-1.0..1.0)),
            false,
        );
        Ok(DecoderCell { ops: inst, gamma })
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn ops(&self) -> &[OpInstance] {
        &self.ops
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binding<'_>, x: Var, choice: MixChoice) -> Var {
        match choice {
            MixChoice::Weights(w) => {
                let outs: Vec<Option<Var>> = self.ops.iter().map(|op| op.forward(g, p, x)).collect();
                if outs.iter().all(Option::is_none) {
                    return g.scale(x, 0.0);
                }
                g.mix(&outs, w)
            }
            MixChoice::Single(k) => self.ops[k].forward(g, p, x).unwrap_or_else(|| g.scale(x, 0.0)),
        }
    }
}

/// Per-resolution decoder features and full-resolution class logits.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    /// `(r, feature)` pairs, finest resolution first.
    pub features: Vec<(usize, Var)>,
    pub logits: Var,
}

impl DecoderTrace {
    pub fn at(&self, r: usize) -> Option<Var> {
        self.features.iter().find(|(x, _)| *x == r).map(|&(_, v)| v)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    resolutions: Vec<usize>,
    /// Cells indexed like `resolutions` (finest first).
    cells: Vec<DecoderCell>,
    /// 1x1 convolutions merging the upsampled coarser output with the skip,
    /// indexed like `resolutions`; the coarsest entry is unused.
    merges: Vec<Option<ParamId>>,
    head: ParamId,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, ops: &[OpKind], num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::Config("decoder needs at least one candidate operation".into()));
        }
        let res = enc.resolutions().to_vec();
        let mut cells = Vec::new();
        let mut merges = Vec::new();
        for (i, &r) in res.iter().enumerate() {
            let c = enc.channels(r);
            merges.push((i + 1 < res.len()).then(|| {
                let cin = c + enc.channels(res[i + 1]);
                store.conv_kernel(format!("dec.r{r}.merge"), ParamGroup::Weight, [c, cin, 1, 1], rng)
            }));
        }
        for &r in &res {
            cells.push(DecoderCell::new(store, &format!("dec.r{r}"), ops, enc.channels(r), rng)?);
        }
        let head = store.conv_kernel("dec.head", ParamGroup::Weight, [num_classes, enc.channels(res[0]), 1, 1], rng);
        Ok(Decoder {
            resolutions: res,
            cells,
            merges,
            head,
        })
    }

    pub fn cells(&self) -> &[DecoderCell] {
        &self.cells
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn merges(&self) -> &[Option<ParamId>] {
        &self.merges
    }

    pub fn head(&self) -> ParamId {
        self.head
    }

    /// Mixture choice for cell `i` under `mode`.
    pub fn choice(&self, g: &mut Graph, p: &mut Binding<'_>, mode: &ArchMode<'_>, i: usize) -> MixChoice {
        let picks = mode.decoder_pick(i);
        mode.row_choices(g, p, self.cells[i].gamma, picks.as_ref().map(std::slice::from_ref), 1)[0]
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binding<'_>, pyr: &FeaturePyramid, mode: &ArchMode<'_>) -> Result<DecoderTrace> {
        let top = pyr.last();
        if top.len() != self.resolutions.len() {
            return Err(Error::Contract(format!(
                "decoder expects {} pyramid entries, got {}",
                self.resolutions.len(),
                top.len()
            )));
        }
        let n = self.resolutions.len();
        let mut features = Vec::with_capacity(n);
        let mut x = top[n - 1];
        for i in (0..n).rev() {
            if let Some(merge) = self.merges[i] {
                let up = g.upsample_nearest(x, 2);
                let cat = g.concat_channels(&[up, top[i]]);
                let k = p.var(g, merge);
                x = g.conv2d(cat, k, ConvSpec::POINTWISE);
            }
            let choice = self.choice(g, p, mode, i);
            x = self.cells[i].forward(g, p, x, choice);
            features.push((self.resolutions[i], x));
        }
        features.reverse();
        let up = g.upsample_bilinear(x, self.resolutions[0]);
        let k = p.var(g, self.head);
        let logits = g.conv2d(up, k, ConvSpec::POINTWISE);
        Ok(DecoderTrace { features, logits })
    }
}
