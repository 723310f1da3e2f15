//! Three-stage co-training search loop over a pair of supernets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::data::{make_batch, SegBatch, SegSample};
use crate::error::{Error, Result};
use crate::metrics::{foreground_scores, Scores};
use crate::objectives::{
    contrastive_graph, independence_graph, maximize_g, paired_layers, supervised_loss_graph, total_loss,
    unsupervised_loss_graph, LossParts, LossWeights, UncertaintyMean,
};
use crate::optim::{Adam, AdamConfig, Sgd, SgdConfig};
use crate::params::{ParamGroup, ParamId};
use crate::supernet::{argmax_channels, ArchMode, Supernet, SupernetConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Architecture parameters stay frozen for epochs `1..=arch_warmup`.
    pub arch_warmup: usize,
    /// Ascent steps on the combination matrices per epoch.
    pub g_steps: usize,
    pub weight_opt: SgdConfig,
    pub arch_opt: AdamConfig,
    pub g_opt: AdamConfig,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Rescales each network's weight gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    /// Defaults to enough steps to visit the larger stream once.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub contrastive_resolutions: Vec<usize>,
    pub uncertainty_mean: UncertaintyMean,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            arch_warmup: 10,
            g_steps: 6,
            weight_opt: SgdConfig {
                lr: 0.001,
                momentum: 0.9,
                weight_decay: 3e-4,
            },
            arch_opt: AdamConfig::new(0.003, 0.001),
            g_opt: AdamConfig::new(0.001, 0.0),
            labeled_batch: 4,
            unlabeled_batch: 4,
            grad_clip: None,
            steps_per_epoch: None,
            seed: 0,
            contrastive_resolutions: vec![4, 8, 16],
            uncertainty_mean: UncertaintyMean::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.g_steps == 0 {
            return bad("g_steps must be at least 1");
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return bad("grad_clip must be positive and finite");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive");
        }
        let lrs = [self.weight_opt.lr, self.arch_opt.lr, self.g_opt.lr];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return bad("learning rates must be positive and finite");
        }
        let decays = [self.weight_opt.weight_decay, self.arch_opt.weight_decay, self.g_opt.weight_decay];
        if decays.iter().any(|d| !(d.is_finite() && *d >= 0.0)) || !(0.0..1.0).contains(&self.weight_opt.momentum) {
            return bad("weight decay must be non-negative and momentum in [0, 1)");
        }
        let w = &self.loss;
        if [w.lambda1, w.lambda3, w.ramp_max].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be non-negative and finite");
        }
        let mut res = self.contrastive_resolutions.clone();
        res.sort_unstable();
        res.dedup();
        if res.len() != self.contrastive_resolutions.len() {
            return bad("contrastive_resolutions contains duplicates");
        }
        Ok(())
    }

    fn check_resolutions(&self, net: &SupernetConfig) -> Result<()> {
        let avail = net.encoder.resolutions();
        if let Some(r) = self.contrastive_resolutions.iter().find(|r| !avail.contains(r)) {
            return Err(Error::Config(format!("contrastive resolution {r} is not one of {avail:?}")));
        }
        Ok(())
    }
}

/// Student and teacher supernets with independently seeded parameters.
#[derive(Clone, Debug)]
pub struct SupernetPair {
    pub net1: Supernet,
    pub net2: Supernet,
}

impl SupernetPair {
    pub fn new(cfg: &SupernetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s1, s2): (u64, u64) = (rng.random(), rng.random());
        Ok(SupernetPair {
            net1: Supernet::new(cfg, s1)?,
            net2: Supernet::new(cfg, s2)?,
        })
    }

    pub fn nets(&self) -> [&Supernet; 2] {
        [&self.net1, &self.net2]
    }
}

/// Losses of both networks on one batch pair and the gradients of the
/// requested parameter groups.
#[derive(Clone, Debug)]
pub struct StepLosses {
    pub parts: [LossParts; 2],
    pub totals: [f64; 2],
    pub grads: [Vec<(ParamId, Tensor)>; 2],
}

/// Stage boundaries reported to a [`run_search`] observer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageEvent {
    Start,
    G { epoch: usize },
    Weights { epoch: usize },
    Arch { epoch: usize },
    ArchSkipped { epoch: usize },
}

/// Per-network optimiser state.
#[derive(Clone, Debug)]
struct Optimisers {
    weights: Sgd,
    arch: Adam,
    g: Adam,
}

impl Optimisers {
    fn new(cfg: &TrainConfig) -> Self {
        Optimisers {
            weights: Sgd::new(cfg.weight_opt),
            arch: Adam::new(cfg.arch_opt),
            g: Adam::new(cfg.g_opt),
        }
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    pub pair: SupernetPair,
    opts: [Optimisers; 2],
    /// `(layer of net k, layer of the other net, combination of the other net)`.
    layers: [Vec<(ParamId, ParamId, ParamId)>; 2],
}

impl Trainer {
    pub fn new(cfg: TrainConfig, pair: SupernetPair) -> Result<Self> {
        cfg.validate()?;
        cfg.check_resolutions(pair.net1.config())?;
        if pair.net1.config() != pair.net2.config() {
            return Err(Error::Config("the two networks must share one configuration".into()));
        }
        let layers = [paired_layers(&pair.net1, &pair.net2)?, paired_layers(&pair.net2, &pair.net1)?];
        Ok(Trainer {
            opts: [Optimisers::new(&cfg), Optimisers::new(&cfg)],
            cfg,
            pair,
            layers,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Maximises the independence objective over both networks' combination
    /// matrices. Returns the objective before each step and after the last.
    pub fn stage_g(&mut self) -> Result<Vec<f64>> {
        let [o1, o2] = &mut self.opts;
        maximize_g(&mut self.pair.net1, &mut self.pair.net2, &mut o1.g, &mut o2.g, self.cfg.g_steps)
    }

    /// One SGD step per network on its total loss w.r.t. weights and fusion parameters.
    pub fn stage_weights(&mut self, labeled: &SegBatch, unlabeled: Option<&SegBatch>, epoch: usize) -> Result<StepLosses> {
        let out = self.losses(&[ParamGroup::Weight, ParamGroup::Fusion], labeled, unlabeled, epoch)?;
        for (k, grads) in out.grads.iter().enumerate() {
            let net = if k == 0 { &mut self.pair.net1 } else { &mut self.pair.net2 };
            let scale = clip_scale(grads, self.cfg.grad_clip);
            for (id, grad) in grads {
                let g = grad.map(|v| v * scale);
                self.opts[k].weights.step(id.index(), net.store.get_mut(*id).data_mut(), g.data());
            }
        }
        Ok(out)
    }

    /// One Adam step per network on its total loss w.r.t. the operation
    /// logits. A no-op returning `None` while `epoch <= arch_warmup`.
    pub fn stage_arch(&mut self, labeled: &SegBatch, unlabeled: Option<&SegBatch>, epoch: usize) -> Result<Option<StepLosses>> {
        if epoch <= self.cfg.arch_warmup {
            return Ok(None);
        }
        let out = self.losses(&[ParamGroup::Alpha, ParamGroup::Gamma], labeled, unlabeled, epoch)?;
        for (k, grads) in out.grads.iter().enumerate() {
            let net = if k == 0 { &mut self.pair.net1 } else { &mut self.pair.net2 };
            for (id, grad) in grads {
                self.opts[k].arch.step(id.index(), net.store.get_mut(*id).data_mut(), grad.data());
            }
        }
        Ok(Some(out))
    }

    /// Total losses of both networks at (one-based) `epoch` with gradients
    /// for `groups`. The labeled batch feeds the supervised term, the
    /// unlabeled batch the pseudo-label term, and the contrastive term sees both.
    pub fn losses(&self, groups: &[ParamGroup], labeled: &SegBatch, unlabeled: Option<&SegBatch>, epoch: usize) -> Result<StepLosses> {
        self.losses_scaled(groups, labeled, unlabeled, epoch, [1.0, 1.0])
    }

    pub(crate) fn losses_scaled(
        &self,
        groups: &[ParamGroup],
        labeled: &SegBatch,
        unlabeled: Option<&SegBatch>,
        epoch: usize,
        root_scale: [f64; 2],
    ) -> Result<StepLosses> {
        let masks = labeled
            .masks
            .as_ref()
            .ok_or_else(|| Error::Input("labeled batch carries no masks".into()))?;
        let nl = labeled.len();
        let unlabeled = unlabeled.filter(|u| !u.is_empty());
        let images = match unlabeled {
            Some(u) => concat_batch(&labeled.images, &u.images)?,
            None => labeled.images.clone(),
        };
        let nu = images.shape()[0] - nl;
        let i = epoch.saturating_sub(1);
        let w = &self.cfg.loss;

        let mut g = Graph::new();
        let nets = self.pair.nets();
        let mut binds = [nets[0].store.binding(groups), nets[1].store.binding(groups)];
        let x = g.constant(images);
        let mut outs = Vec::with_capacity(2);
        for k in 0..2 {
            outs.push(nets[k].forward(&mut g, &mut binds[k], x, &ArchMode::Relaxed)?);
        }
        let unl_logits: Vec<Option<Var>> = outs
            .iter()
            .map(|o| (nu > 0).then(|| g.slice_batch(o.trace.logits, nl, nu)))
            .collect();
        let pseudo: Vec<Option<Vec<usize>>> = unl_logits.iter().map(|v| v.map(|v| argmax_channels(g.value(v)))).collect();
        let feats: Vec<Vec<(usize, Var)>> = outs.iter().map(|o| o.trace.features.clone()).collect();
        let (c1, c2) = contrastive_graph(&mut g, &feats[0], &feats[1], &self.cfg.contrastive_resolutions, self.cfg.uncertainty_mean)?;
        let con = [c1, c2];

        let mut parts = [LossParts::default(); 2];
        let mut totals = [0.0; 2];
        let mut roots = Vec::new();
        for k in 0..2 {
            let other = 1 - k;
            let lab_logits = g.slice_batch(outs[k].trace.logits, 0, nl);
            let sup = supervised_loss_graph(&mut g, lab_logits, masks);
            let uns = unl_logits[k].map(|v| unsupervised_loss_graph(&mut g, v, pseudo[other].as_ref().unwrap()));
            let other_store = &nets[other].store;
            let bind = &mut binds[k];
            let ind = independence_graph(
                &mut g,
                &self.layers[k],
                |g, id| bind.var(g, id),
                |g, id| g.constant(other_store.get(id).clone()),
                |g, id| g.constant(other_store.get(id).clone()),
            );
            let val = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
            parts[k] = LossParts {
                sup: g.value(sup).item(),
                uns: val(&g, uns),
                ind: val(&g, ind),
                con: val(&g, con[k]),
            };
            totals[k] = total_loss(&parts[k], w, i, k + 1)?;
            let mut terms = vec![g.scale(sup, w.lambda1)];
            for (v, c) in [(uns, w.lambda2(i)), (ind, w.lambda3), (con[k], w.lambda4(i))] {
                if let Some(v) = v {
                    terms.push(g.scale(v, c));
                }
            }
            let t = g.add_n(&terms);
            roots.push(g.scale(t, root_scale[k]));
        }
        let root = g.add_n(&roots);
        let grads = g.backward(root);
        Ok(StepLosses {
            parts,
            totals,
            grads: [binds[0].gradients(&grads), binds[1].gradients(&grads)],
        })
    }
}

fn clip_scale(grads: &[(ParamId, Tensor)], clip: Option<f64>) -> f64 {
    let Some(c) = clip else { return 1.0 };
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > c {
        c / norm
    } else {
        1.0
    }
}

fn concat_batch(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::Input(format!("labeled {:?} and unlabeled {:?} images differ in size", a.shape(), b.shape())));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(&shape, data)
}

/// Endless index stream reshuffled on every pass.
#[derive(Clone, Debug)]
struct Stream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Stream {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Stream { order, pos: 0, rng }
    }

    fn next(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-step loss terms of each network over the weights stage.
    pub parts: [LossParts; 2],
    pub totals: [f64; 2],
    /// Independence objective after the ascent stage.
    pub g_objective: f64,
    /// Mean foreground DSC of network 1 on the validation set.
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    /// Epoch 0 holds the evaluation before training.
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainState {
    /// `epoch,net,sup,uns,ind,con,total,g_objective,val_dsc`, one row per
    /// network and epoch. Floats use the shortest round-trip form.
    pub fn loss_history_csv(&self) -> String {
        let mut s = String::from("epoch,net,sup,uns,ind,con,total,g_objective,val_dsc\n");
        for r in &self.history {
            for k in 0..2 {
                let p = &r.parts[k];
                let dsc = if k == 0 { r.val_dsc.map(|v| v.to_string()).unwrap_or_default() } else { String::new() };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    r.epoch,
                    k + 1,
                    p.sup,
                    p.uns,
                    p.ind,
                    p.con,
                    r.totals[k],
                    r.g_objective,
                    dsc
                );
            }
        }
        s
    }
}

pub struct SearchOutcome {
    pub pair: SupernetPair,
    pub state: TrainState,
}

/// Per-sample foreground scores of `net` under `mode` on labeled samples.
pub fn evaluate(net: &Supernet, samples: &[SegSample], mode: &ArchMode<'_>, batch: usize) -> Result<Vec<Scores>> {
    let classes = net.config().num_classes;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let b = make_batch(&refs)?;
        let gt = b
            .masks
            .ok_or_else(|| Error::Input("evaluation samples must carry masks".into()))?;
        let pred = net.predict(&b.images, mode)?;
        let (h, w) = (chunk[0].height(), chunk[0].width());
        for (p, t) in pred.chunks(h * w).zip(gt.chunks(h * w)) {
            out.push(foreground_scores(p, t, w, classes)?);
        }
    }
    Ok(out)
}

fn mean_dsc(scores: &[Scores]) -> Option<f64> {
    (!scores.is_empty()).then(|| scores.iter().map(|s| s.dsc).sum::<f64>() / scores.len() as f64)
}

/// Runs the full search: each epoch performs the ascent stage, a weights
/// pass over the epoch's batch schedule and, after the warm-up, an
/// architecture pass over the same schedule. The shorter of the labeled and
/// unlabeled streams cycles with a fresh shuffle. A checkpoint is written
/// after every epoch when `checkpoint_dir` is given.
pub fn run_search(
    net_cfg: &SupernetConfig,
    cfg: &TrainConfig,
    labeled: &[SegSample],
    unlabeled: &[SegSample],
    validation: &[SegSample],
    checkpoint_dir: Option<&Path>,
    observer: &mut dyn FnMut(StageEvent, &SupernetPair),
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Config("the labeled set is empty".into()));
    }
    if labeled.iter().any(|s| !s.is_labeled()) {
        return Err(Error::Input("labeled samples must carry masks".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pair = SupernetPair::new(net_cfg, seeds.random())?;
    let mut trainer = Trainer::new(cfg.clone(), pair)?;
    let mut lab_stream = Stream::new(labeled.len(), seeds.random());
    let mut unl_stream = Stream::new(unlabeled.len(), seeds.random());
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| {
        labeled
            .len()
            .div_ceil(cfg.labeled_batch)
            .max(unlabeled.len().div_ceil(cfg.unlabeled_batch))
    });
    let validate = |net: &Supernet| -> Result<Option<f64>> {
        Ok(mean_dsc(&evaluate(net, validation, &ArchMode::Relaxed, 8)?))
    };

    let mut state = TrainState::default();
    state.history.push(EpochRecord {
        epoch: 0,
        parts: [LossParts::default(); 2],
        totals: [0.0; 2],
        g_objective: crate::objectives::g_objective(&trainer.pair.net1, &trainer.pair.net2)?.0,
        val_dsc: validate(&trainer.pair.net1)?,
    });
    observer(StageEvent::Start, &trainer.pair);

    for epoch in 1..=cfg.epochs {
        let g_trace = trainer.stage_g()?;
        observer(StageEvent::G { epoch }, &trainer.pair);

        let schedule: Vec<(Vec<usize>, Vec<usize>)> = (0..steps)
            .map(|_| {
                let u = if unlabeled.is_empty() { vec![] } else { unl_stream.next(cfg.unlabeled_batch) };
                (lab_stream.next(cfg.labeled_batch), u)
            })
            .collect();
        let batches = schedule
            .iter()
            .map(|(l, u)| {
                let lb = make_batch(&l.iter().map(|&i| &labeled[i]).collect::<Vec<_>>())?;
                let ub = if u.is_empty() {
                    None
                } else {
                    Some(make_batch(&u.iter().map(|&i| &unlabeled[i]).collect::<Vec<_>>())?)
                };
                Ok((lb, ub))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut parts = [LossParts::default(); 2];
        let mut totals = [0.0; 2];
        for (lb, ub) in &batches {
            let out = trainer.stage_weights(lb, ub.as_ref(), epoch)?;
            for k in 0..2 {
                let (p, q) = (&mut parts[k], &out.parts[k]);
                p.sup += q.sup / steps as f64;
                p.uns += q.uns / steps as f64;
                p.ind += q.ind / steps as f64;
                p.con += q.con / steps as f64;
                totals[k] += out.totals[k] / steps as f64;
            }
        }
        observer(StageEvent::Weights { epoch }, &trainer.pair);

        if epoch > cfg.arch_warmup {
            for (lb, ub) in &batches {
                trainer.stage_arch(lb, ub.as_ref(), epoch)?;
            }
            observer(StageEvent::Arch { epoch }, &trainer.pair);
        } else {
            observer(StageEvent::ArchSkipped { epoch }, &trainer.pair);
        }

        state.epoch = epoch;
        state.history.push(EpochRecord {
            epoch,
            parts,
            totals,
            g_objective: *g_trace.last().unwrap(),
            val_dsc: validate(&trainer.pair.net1)?,
        });
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("epoch_{epoch:03}"));
            checkpoint::save(&path, &trainer.pair, cfg, &state)?;
            state.checkpoints.push(path);
        }
    }
    Ok(SearchOutcome {
        pair: trainer.pair,
        state,
    })
}
