//! Hierarchical encoder: stem, searchable cells on a multi-resolution grid
//! and per-layer fusion with dense same-resolution history.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::nasvit::{AlphaSharing, MixChoice, NasVitBlock, NasVitConfig};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::supernet::ArchMode;
use crate::tensor::Tensor;

/// Downsampling factors of the searched grid, finest first.
pub const RESOLUTIONS: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub nodes: usize,
    /// Node channels at the finest resolution; doubles with every halving.
    pub c_base: usize,
    /// How many grid resolutions are active, counted from r = 4.
    pub num_resolutions: usize,
    pub channel_fraction: f64,
    pub alpha_sharing: AlphaSharing,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 8,
            nodes: 5,
            c_base: 8,
            num_resolutions: 4,
            channel_fraction: 0.25,
            alpha_sharing: AlphaSharing::Shared,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config(format!("layers must be at least 2, got {}", self.layers)));
        }
        if self.nodes < 1 {
            return Err(Error::Config("nodes must be at least 1".into()));
        }
        if self.c_base < 1 {
            return Err(Error::Config("c_base must be positive".into()));
        }
        if !(1..=RESOLUTIONS.len()).contains(&self.num_resolutions) {
            return Err(Error::Config(format!(
                "num_resolutions must lie in 1..=4, got {}",
                self.num_resolutions
            )));
        }
        for &r in self.resolutions() {
            self.block_config(r).searched_channels()?;
        }
        Ok(())
    }

    pub fn resolutions(&self) -> &'static [usize] {
        &RESOLUTIONS[..self.num_resolutions.min(RESOLUTIONS.len())]
    }

    /// Channels at resolution `r`.
    pub fn channels(&self, r: usize) -> usize {
        self.c_base * r / 4
    }

    /// Edges in one cell: node `n` (zero-based) reads the two cell inputs and all earlier nodes.
    pub fn edges_per_cell(&self) -> usize {
        (0..self.nodes).map(|n| n + 2).sum()
    }

    pub fn num_cells(&self) -> usize {
        self.layers * self.num_resolutions
    }

    /// Cell index of layer `layer` (1-based) at grid position `ri`.
    pub fn cell_index(&self, layer: usize, ri: usize) -> usize {
        (layer - 1) * self.num_resolutions + ri
    }

    /// Logit rows per cell.
    pub fn alpha_rows(&self) -> usize {
        self.edges_per_cell() * self.alpha_sharing.rows()
    }

    fn block_config(&self, r: usize) -> NasVitConfig {
        let c = self.channels(r);
        NasVitConfig {
            f: c,
            d: c,
            channel_fraction: self.channel_fraction,
            sharing: self.alpha_sharing,
        }
    }
}

/// Grid features of one encoder level, indexed like [`EncoderConfig::resolutions`].
pub type Level = Vec<Var>;

/// Encoder output: the final level plus every level computed on the way.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// Level 0 is the stem; level `l` is the output of layer `l`.
    pub levels: Vec<Level>,
}

impl FeaturePyramid {
    pub fn last(&self) -> &Level {
        self.levels.last().expect("pyramid has at least the stem level")
    }

    /// Final feature map at resolution `r`, if active.
    pub fn at(&self, r: usize) -> Option<Var> {
        RESOLUTIONS.iter().position(|&x| x == r).and_then(|i| self.last().get(i).copied())
    }
}

/// Two stride-2 convolutions down to r = 4, then stride-2 seeds for the coarser grid.
#[derive(Clone, Debug)]
pub struct Stem {
    conv1: ParamId,
    conv2: ParamId,
    seeds: Vec<ParamId>,
}

impl Stem {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, in_channels: usize, rng: &mut impl Rng) -> Self {
        let c = cfg.c_base;
        let w = ParamGroup::Weight;
        let conv1 = store.conv_kernel("enc.stem.conv1", w, [c, in_channels, 3, 3], rng);
        let conv2 = store.conv_kernel("enc.stem.conv2", w, [c, c, 3, 3], rng);
        let res = cfg.resolutions();
        let seeds = (1..res.len())
            .map(|i| {
                let (lo, hi) = (cfg.channels(res[i - 1]), cfg.channels(res[i]));
                store.conv_kernel(format!("enc.stem.seed{}", res[i]), w, [hi, lo, 3, 3], rng)
            })
            .collect();
        Stem { conv1, conv2, seeds }
    }

    pub fn kernels(&self) -> Vec<ParamId> {
        let mut v = vec![self.conv1, self.conv2];
        v.extend(&self.seeds);
        v
    }

    /// `(b, in, H, W)` image to the r = 4 map (`Stem::forward(..)[0]`) and coarser seeds.
    pub fn forward(&self, g: &mut Graph, p: &mut Binding<'_>, image: Var) -> Level {
        let (k1, k2) = (p.var(g, self.conv1), p.var(g, self.conv2));
        let h = g.conv2d(image, k1, ConvSpec::strided(3, 2));
        let h = g.relu(h);
        let mut level = vec![g.conv2d(h, k2, ConvSpec::strided(3, 2))];
        for &seed in &self.seeds {
            let k = p.var(g, seed);
            let prev = g.relu(*level.last().unwrap());
            level.push(g.conv2d(prev, k, ConvSpec::strided(3, 2)));
        }
        level
    }
}

/// Checks that an image batch can pass the stem and the coarsest resolution.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Input(format!(
            "image size {h}x{w} is not a positive multiple of 32; pad the input first"
        )));
    }
    Ok(())
}

/// Searchable cell: two preprocessed inputs, `N` nodes of summed NAS-ViT
/// edges, and a 1x1 reduction of the concatenated nodes.
#[derive(Clone, Debug)]
pub struct Cell {
    channels: usize,
    pre0: ParamId,
    pre1: ParamId,
    edges: Vec<NasVitBlock>,
    out: ParamId,
    alpha: ParamId,
    nodes: usize,
    rows_per_edge: usize,
}

impl Cell {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, r: usize, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels(r);
        let w = ParamGroup::Weight;
        let pre0 = store.conv_kernel(format!("{prefix}.pre0"), w, [c, c, 1, 1], rng);
        let pre1 = store.conv_kernel(format!("{prefix}.pre1"), w, [c, c, 1, 1], rng);
        let mut edges = Vec::with_capacity(cfg.edges_per_cell());
        for e in 0..cfg.edges_per_cell() {
            edges.push(NasVitBlock::new(store, &format!("{prefix}.e{e}"), cfg.block_config(r), rng)?);
        }
        let out = store.conv_kernel(format!("{prefix}.out"), w, [c, cfg.nodes * c, 1, 1], rng);
        let rows = cfg.alpha_rows();
        let nops = crate::candidate_ops::ENCODER_OPS.len();
        let alpha = store.add(
            format!("{prefix}.alpha"),
            ParamGroup::Alpha,
            Tensor::from_fn(&[rows, nops], |_| 1e-3 * rng.random_range(-1.0..1.0)),
            false,
        );
        Ok(Cell {
            channels: c,
            pre0,
            pre1,
            edges,
            out,
            alpha,
            nodes: cfg.nodes,
            rows_per_edge: cfg.alpha_sharing.rows(),
        })
    }

    pub fn alpha(&self) -> ParamId {
        self.alpha
    }

    pub fn edges(&self) -> &[NasVitBlock] {
        &self.edges
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Preprocessing and reduction kernels `(pre0, pre1, out)`.
    pub fn convs(&self) -> (ParamId, ParamId, ParamId) {
        (self.pre0, self.pre1, self.out)
    }

    /// Per-edge mixture choices for this cell under `mode`.
    pub fn choices(&self, g: &mut Graph, p: &mut Binding<'_>, mode: &ArchMode<'_>, cell: usize) -> Vec<Vec<MixChoice>> {
        let rows = self.rows_per_edge;
        let picks = mode.encoder_picks(cell);
        let all = mode.row_choices(g, p, self.alpha, picks, self.edges.len() * rows);
        all.chunks(rows).map(|c| c.to_vec()).collect()
    }

    /// Node outputs followed by the cell output.
    pub fn forward_nodes(
        &self,
        g: &mut Graph,
        p: &mut Binding<'_>,
        h_prev: Var,
        h_prevprev: Var,
        choices: &[Vec<MixChoice>],
    ) -> (Vec<Var>, Var) {
        let (k0, k1, ko) = (p.var(g, self.pre0), p.var(g, self.pre1), p.var(g, self.out));
        let s0 = g.conv2d(h_prevprev, k0, ConvSpec::POINTWISE);
        let s1 = g.conv2d(h_prev, k1, ConvSpec::POINTWISE);
        let mut states = vec![s0, s1];
        let mut e = 0;
        for _ in 0..self.nodes {
            let mut terms = Vec::with_capacity(states.len());
            for &s in &states {
                terms.push(self.edges[e].forward(g, p, s, &choices[e]));
                e += 1;
            }
            let node = g.add_n(&terms);
            states.push(node);
        }
        let nodes = states.split_off(2);
        let cat = g.concat_channels(&nodes);
        let out = g.conv2d(cat, ko, ConvSpec::POINTWISE);
        (nodes, out)
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binding<'_>, h_prev: Var, h_prevprev: Var, choices: &[Vec<MixChoice>]) -> Result<Var> {
        let (a, b) = (g.value(h_prev).shape(), g.value(h_prevprev).shape());
        if a != b || a[1] != self.channels {
            return Err(Error::Contract(format!(
                "cell inputs {a:?} and {b:?} do not share the cell resolution with {} channels",
                self.channels
            )));
        }
        Ok(self.forward_nodes(g, p, h_prev, h_prevprev, choices).1)
    }
}

/// Fusion convolutions of one layer at one resolution.
#[derive(Clone, Debug)]
pub struct Fusion {
    /// 3x3 stride-2 convolution from the next finer cell.
    pub down: Option<ParamId>,
    /// 1x1 convolution applied after nearest x2 upsampling of the next coarser cell.
    pub up: Option<ParamId>,
    /// 1x1 convolution over `[down, up, same, history...]`.
    pub fuse: ParamId,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub cells: Vec<Cell>,
    pub fusion: Vec<Fusion>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    stem: Stem,
    layers: Vec<Layer>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, in_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let stem = Stem::new(store, cfg, in_channels, rng);
        let res = cfg.resolutions();
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let mut cells = Vec::new();
            for &r in res {
                cells.push(Cell::new(store, &format!("enc.l{l}.r{r}"), cfg, r, rng)?);
            }
            let mut fusion = Vec::new();
            for (ri, &r) in res.iter().enumerate() {
                let c = cfg.channels(r);
                let fb = ParamGroup::Fusion;
                let down = (ri > 0).then(|| {
                    store.conv_kernel(format!("enc.l{l}.r{r}.down"), fb, [c, cfg.channels(res[ri - 1]), 3, 3], rng)
                });
                let up = (ri + 1 < res.len()).then(|| {
                    store.conv_kernel(format!("enc.l{l}.r{r}.up"), fb, [c, cfg.channels(res[ri + 1]), 1, 1], rng)
                });
                // same-resolution cell plus history levels 0..l-1
                let branches = down.is_some() as usize + up.is_some() as usize + 1 + l;
                let fuse = store.conv_kernel(format!("enc.l{l}.r{r}.fuse"), fb, [c, branches * c, 1, 1], rng);
                fusion.push(Fusion { down, up, fuse });
            }
            layers.push(Layer { cells, fusion });
        }
        Ok(Encoder {
            cfg: cfg.clone(),
            stem,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn stem(&self) -> &Stem {
        &self.stem
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// All cells in cell-index order.
    pub fn cells(&self) -> impl Iterator<Item = &Cell> {
        self.layers.iter().flat_map(|l| l.cells.iter())
    }

    /// Layer `l` (1-based) given all earlier levels.
    pub fn layer_forward(&self, g: &mut Graph, p: &mut Binding<'_>, levels: &[Level], l: usize, mode: &ArchMode<'_>) -> Result<Level> {
        let layer = &self.layers[l - 1];
        let prev = &levels[l - 1];
        let prevprev = &levels[l.saturating_sub(2)];
        let mut cell_out = Vec::with_capacity(layer.cells.len());
        for (ri, cell) in layer.cells.iter().enumerate() {
            let choices = cell.choices(g, p, mode, self.cfg.cell_index(l, ri));
            cell_out.push(cell.forward(g, p, prev[ri], prevprev[ri], &choices)?);
        }
        let mut out = Vec::with_capacity(cell_out.len());
        for (ri, f) in layer.fusion.iter().enumerate() {
            let mut parts = Vec::new();
            if let Some(down) = f.down {
                let k = p.var(g, down);
                parts.push(g.conv2d(cell_out[ri - 1], k, ConvSpec::strided(3, 2)));
            }
            if let Some(up) = f.up {
                let k = p.var(g, up);
                let u = g.upsample_nearest(cell_out[ri + 1], 2);
                parts.push(g.conv2d(u, k, ConvSpec::POINTWISE));
            }
            parts.push(cell_out[ri]);
            parts.extend(levels.iter().map(|lv| lv[ri]));
            let cat = g.concat_channels(&parts);
            let k = p.var(g, f.fuse);
            out.push(g.conv2d(cat, k, ConvSpec::POINTWISE));
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binding<'_>, image: Var, mode: &ArchMode<'_>) -> Result<FeaturePyramid> {
        let (_, _, h, w) = g.value(image).dims4();
        check_input_size(h, w)?;
        let mut levels = vec![self.stem.forward(g, p, image)];
        for l in 1..=self.cfg.layers {
            let next = self.layer_forward(g, p, &levels, l, mode)?;
            levels.push(next);
        }
        Ok(FeaturePyramid { levels })
    }
}
