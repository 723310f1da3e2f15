//! Encoder-decoder supernet and the ways its architecture can be evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::candidate_ops::{DecoderOpSet, ENCODER_OPS};
use crate::decoder::{Decoder, DecoderTrace};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nasvit::MixChoice;
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupernetConfig {
    pub encoder: EncoderConfig,
    pub in_channels: usize,
    pub num_classes: usize,
    pub decoder_ops: DecoderOpSet,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            encoder: EncoderConfig::default(),
            in_channels: 1,
            num_classes: 3,
            decoder_ops: DecoderOpSet::default(),
        }
    }
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        Ok(())
    }
}

/// Discrete operation indices: per encoder cell one entry per logit row, per
/// decoder cell (finest resolution first) one entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchChoice {
    pub encoder: Vec<Vec<usize>>,
    pub decoder: Vec<usize>,
}

/// How the relaxation parameters are used in a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum ArchMode<'a> {
    /// Softmax of the stored logits.
    Relaxed,
    /// Full mixtures with constant one-hot weights at the given choice.
    Forced(&'a ArchChoice),
    /// Only the chosen operation is evaluated.
    Derived(&'a ArchChoice),
}

impl<'a> ArchMode<'a> {
    fn choice(&self) -> Option<&'a ArchChoice> {
        match *self {
            ArchMode::Relaxed => None,
            ArchMode::Forced(c) | ArchMode::Derived(c) => Some(c),
        }
    }

    pub(crate) fn encoder_picks(&self, cell: usize) -> Option<&'a [usize]> {
        self.choice().map(|c| c.encoder[cell].as_slice())
    }

    pub(crate) fn decoder_pick(&self, cell: usize) -> Option<usize> {
        self.choice().map(|c| c.decoder[cell])
    }

    /// One mixture choice per logit row of `logits`.
    pub(crate) fn row_choices(
        &self,
        g: &mut Graph,
        p: &mut Binding<'_>,
        logits: ParamId,
        picks: Option<&[usize]>,
        rows: usize,
    ) -> Vec<MixChoice> {
        match self {
            ArchMode::Relaxed => {
                let v = p.var(g, logits);
                (0..rows).map(|r| MixChoice::Weights(g.softmax_row(v, r))).collect()
            }
            ArchMode::Forced(_) => {
                let cols = p.store().get(logits).shape()[1];
                let picks = picks.expect("forced mode carries a choice");
                (0..rows)
                    .map(|r| {
                        let k = picks[r];
                        let w = Tensor::from_fn(&[cols], |i| if i == k { 1.0 } else { 0.0 });
                        MixChoice::Weights(g.constant(w))
                    })
                    .collect()
            }
            ArchMode::Derived(_) => {
                let picks = picks.expect("derived mode carries a choice");
                (0..rows).map(|r| MixChoice::Single(picks[r])).collect()
            }
        }
    }
}

pub struct SupernetOutput {
    pub pyramid: FeaturePyramid,
    pub trace: DecoderTrace,
}

/// One network: parameters plus the module structure that indexes them.
#[derive(Clone, Debug)]
pub struct Supernet {
    cfg: SupernetConfig,
    /// Construction seed; it also fixes the non-parameter channel masks.
    seed: u64,
    pub store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    /// `(paired layer, combination matrix)` in registration order.
    combinations: Vec<(ParamId, ParamId)>,
}

impl Supernet {
    pub fn new(cfg: &SupernetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &cfg.encoder, cfg.in_channels, &mut rng)?;
        let decoder = Decoder::new(&mut store, &cfg.encoder, cfg.decoder_ops.ops(), cfg.num_classes, &mut rng)?;
        let combinations = store
            .paired_layers()
            .into_iter()
            .map(|layer| {
                let c = store.get(layer).shape()[0];
                let name = format!("g.{}", store.entry(layer).name);
                let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
                (layer, store.add(name, ParamGroup::Combination, eye, false))
            })
            .collect();
        Ok(Supernet {
            cfg: cfg.clone(),
            seed,
            store,
            encoder,
            decoder,
            combinations,
        })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn combinations(&self) -> &[(ParamId, ParamId)] {
        &self.combinations
    }

    /// Encoder logit parameters in cell-index order.
    pub fn alpha_ids(&self) -> Vec<ParamId> {
        self.encoder.cells().map(|c| c.alpha()).collect()
    }

    /// Decoder logit parameters, finest resolution first.
    pub fn gamma_ids(&self) -> Vec<ParamId> {
        self.decoder.cells().iter().map(|c| c.gamma()).collect()
    }

    /// Checks that `choice` addresses every cell and row with a valid op index.
    pub fn check_choice(&self, choice: &ArchChoice) -> Result<()> {
        let rows = self.cfg.encoder.alpha_rows();
        let ndec = self.cfg.decoder_ops.ops().len();
        let enc_ok = choice.encoder.len() == self.cfg.encoder.num_cells()
            && choice.encoder.iter().all(|c| c.len() == rows && c.iter().all(|&k| k < ENCODER_OPS.len()));
        let dec_ok = choice.decoder.len() == self.decoder.cells().len() && choice.decoder.iter().all(|&k| k < ndec);
        if !(enc_ok && dec_ok) {
            return Err(Error::Contract("architecture choice does not match the supernet layout".into()));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binding<'_>, image: Var, mode: &ArchMode<'_>) -> Result<SupernetOutput> {
        if let Some(c) = mode.choice() {
            self.check_choice(c)?;
        }
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::Input(format!(
                "expected (b, {}, h, w) images, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let pyramid = self.encoder.forward(g, p, image, mode)?;
        let trace = self.decoder.forward(g, p, &pyramid, mode)?;
        Ok(SupernetOutput { pyramid, trace })
    }

    /// Logits for a `(b, in, h, w)` batch with all parameters held constant.
    pub fn logits(&self, images: &Tensor, mode: &ArchMode<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut p = self.store.binding(&[]);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &mut p, x, mode)?;
        Ok(g.value(out.trace.logits).clone())
    }

    /// Per-pixel class labels (argmax, lowest index on ties), batch-major.
    pub fn predict(&self, images: &Tensor, mode: &ArchMode<'_>) -> Result<Vec<usize>> {
        Ok(argmax_channels(&self.logits(images, mode)?))
    }
}

/// Channel argmax of a `(b, c, h, w)` tensor, lowest index on ties.
pub fn argmax_channels(t: &Tensor) -> Vec<usize> {
    let (b, c, h, w) = t.dims4();
    let plane = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if d[(bi * c + ch) * plane + p] > d[(bi * c + best) * plane + p] {
                    best = ch;
                }
            }
            out.push(best);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::{assert_grad_close, numeric_grad, rand_tensor};
    use rand::Rng;

    pub(crate) fn tiny_config(layers: usize, nodes: usize) -> SupernetConfig {
        SupernetConfig {
            encoder: EncoderConfig {
                layers,
                nodes,
                c_base: 4,
                ..EncoderConfig::default()
            },
            ..SupernetConfig::default()
        }
    }

    fn random_choice(net: &Supernet, seed: u64) -> ArchChoice {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = net.config();
        ArchChoice {
            encoder: (0..cfg.encoder.num_cells())
                .map(|_| (0..cfg.encoder.alpha_rows()).map(|_| rng.random_range(0..8)).collect())
                .collect(),
            decoder: (0..net.gamma_ids().len()).map(|_| rng.random_range(0..5)).collect(),
        }
    }

    #[test]
    fn output_shapes_and_trace() {
        let net = Supernet::new(&tiny_config(2, 1), 1).unwrap();
        let img = rand_tensor(&[2, 1, 64, 64], 2);
        let mut g = Graph::new();
        let mut p = net.store.binding(&[]);
        let x = g.constant(img);
        let out = net.forward(&mut g, &mut p, x, &ArchMode::Relaxed).unwrap();
        assert_eq!(g.value(out.trace.logits).shape(), &[2, 3, 64, 64]);
        let rs: Vec<usize> = out.trace.features.iter().map(|f| f.0).collect();
        assert_eq!(rs, vec![4, 8, 16, 32]);
        for (r, v) in &out.trace.features {
            assert_eq!(g.value(*v).shape(), &[2, 4 * r / 4, 64 / r, 64 / r]);
        }
        let bad = g.constant(Tensor::zeros(&[1, 1, 48, 64]));
        assert!(matches!(net.forward(&mut g, &mut p, bad, &ArchMode::Relaxed), Err(Error::Input(_))));
    }

    #[test]
    fn forced_one_hot_matches_single_path_network() {
        let net = Supernet::new(&tiny_config(3, 2), 3).unwrap();
        let choice = random_choice(&net, 4);
        let img = rand_tensor(&[1, 1, 64, 64], 5);
        let a = net.logits(&img, &ArchMode::Forced(&choice)).unwrap();
        let b = net.logits(&img, &ArchMode::Derived(&choice)).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10, "diff {}", a.max_abs_diff(&b));
        let bad = ArchChoice {
            decoder: vec![9; 4],
            ..choice
        };
        assert!(net.logits(&img, &ArchMode::Derived(&bad)).is_err());
    }

    #[test]
    fn seeds_control_parameters() {
        let cfg = tiny_config(2, 1);
        let a = Supernet::new(&cfg, 7).unwrap();
        let b = Supernet::new(&cfg, 7).unwrap();
        let c = Supernet::new(&cfg, 8).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
        assert!(!a.combinations().is_empty());
        for &(layer, gm) in a.combinations() {
            let co = a.store.get(layer).shape()[0];
            assert_eq!(a.store.get(gm).shape(), &[co, co]);
        }
    }

    #[test]
    fn probabilities_normalise_and_arch_gradients_flow() {
        let net = Supernet::new(&tiny_config(2, 1), 11).unwrap();
        let img = rand_tensor(&[1, 1, 32, 32], 12);
        let labels: Vec<usize> = (0..32 * 32).map(|i| (i / 7) % 3).collect();
        let alpha = net.alpha_ids()[1];
        let gamma = net.gamma_ids()[0];
        let loss = |store: &ParamStore| {
            let mut g = Graph::new();
            let mut p = store.binding(&[ParamGroup::Alpha, ParamGroup::Gamma]);
            let x = g.constant(img.clone());
            let out = net.forward(&mut g, &mut p, x, &ArchMode::Relaxed).unwrap();
            let lp = g.log_softmax_channels(out.trace.logits);
            let probs = g.exp(lp);
            let pv = g.value(probs);
            let (_, c, h, w) = pv.dims4();
            for px in 0..h * w {
                let s: f64 = (0..c).map(|ch| pv.data()[ch * h * w + px]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            let l = g.nll_mean(lp, &labels);
            let gr = g.backward(l);
            (g.value(l).item(), p.gradients(&gr))
        };
        let (_, grads) = loss(&net.store);
        let n_arch = net.alpha_ids().len() + net.gamma_ids().len();
        assert_eq!(grads.len(), n_arch);
        for id in [alpha, gamma] {
            let an = &grads.iter().find(|(i, _)| *i == id).unwrap().1;
            assert!(an.data().iter().all(|v| v.abs() > 0.0));
            let num = numeric_grad(net.store.get(id), 1e-5, |t| {
                let mut s = net.store.clone();
                *s.get_mut(id) = t.clone();
                loss(&s).0
            });
            assert_grad_close(an, &num, 1e-4);
        }
    }
}
