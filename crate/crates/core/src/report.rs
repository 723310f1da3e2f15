//! Discrete architectures, operation proportions and report files.
//!
//! `proportions.csv` columns are `role,op,fraction`, prefixed by `network`
//! when several networks are reported together. `metrics.csv` columns are
//! `split,metric,mean,std`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ops::softmax;
use crate::candidate_ops::{op_set, OpKind, OpRole, ENCODER_OPS};
use crate::error::{Error, Result};
use crate::metrics::Scores;
use crate::supernet::{ArchChoice, Supernet, SupernetConfig};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderCellGenotype {
    pub layer: usize,
    pub resolution: usize,
    /// One operation per logit row; row `e * tokens + t` belongs to edge `e`.
    pub ops: Vec<OpKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderCellGenotype {
    pub resolution: usize,
    pub op: OpKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub schema_version: u32,
    /// Operation orderings the choices index into.
    pub encoder_op_order: Vec<OpKind>,
    pub decoder_op_order: Vec<OpKind>,
    pub encoder: Vec<EncoderCellGenotype>,
    /// Finest resolution first.
    pub decoder: Vec<DecoderCellGenotype>,
    pub config: SupernetConfig,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn rows(t: &Tensor) -> impl Iterator<Item = &[f64]> {
    let cols = t.shape()[1];
    t.data().chunks(cols)
}

/// Per-row argmax of the encoder and decoder logits.
pub fn derive(net: &Supernet) -> Genotype {
    let cfg = net.config();
    let enc_cfg = &cfg.encoder;
    let res = enc_cfg.resolutions();
    let nres = res.len();
    let encoder = net
        .alpha_ids()
        .into_iter()
        .enumerate()
        .map(|(i, id)| EncoderCellGenotype {
            layer: i / nres + 1,
            resolution: res[i % nres],
            ops: rows(net.store.get(id)).map(|r| ENCODER_OPS[argmax(r)]).collect(),
        })
        .collect();
    let dec_ops = cfg.decoder_ops.ops();
    let decoder = net
        .gamma_ids()
        .into_iter()
        .zip(res)
        .map(|(id, &r)| DecoderCellGenotype {
            resolution: r,
            op: dec_ops[argmax(net.store.get(id).data())],
        })
        .collect();
    Genotype {
        schema_version: SCHEMA_VERSION,
        encoder_op_order: ENCODER_OPS.to_vec(),
        decoder_op_order: dec_ops.to_vec(),
        encoder,
        decoder,
        config: cfg.clone(),
    }
}

impl Genotype {
    /// Operation indices for forcing or deriving a supernet.
    pub fn choice(&self) -> Result<ArchChoice> {
        let index = |order: &[OpKind], k: OpKind| {
            order
                .iter()
                .position(|&o| o == k)
                .ok_or_else(|| Error::Format(format!("operation {k} is not a candidate here")))
        };
        let encoder = self
            .encoder
            .iter()
            .map(|c| c.ops.iter().map(|&k| index(&ENCODER_OPS, k)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let decoder = self
            .decoder
            .iter()
            .map(|c| index(self.config.decoder_ops.ops(), c.op))
            .collect::<Result<Vec<_>>>()?;
        Ok(ArchChoice { encoder, decoder })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serialises")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(text).map_err(|e| Error::Format(format!("genotype: {e}")))?;
        if g.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported genotype schema {}", g.schema_version)));
        }
        if g.encoder_op_order != ENCODER_OPS || g.decoder_op_order != g.config.decoder_ops.ops() {
            return Err(Error::Format("genotype operation order does not match this build".into()));
        }
        g.choice()?;
        Ok(g)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Mean softmax weight of each operation of `role` over all logit rows.
pub fn proportions(net: &Supernet, role: OpRole) -> Vec<(OpKind, f64)> {
    let (ids, ops) = match role {
        OpRole::Encoder => (net.alpha_ids(), &ENCODER_OPS[..]),
        OpRole::Decoder => (net.gamma_ids(), net.config().decoder_ops.ops()),
    };
    let logits: Vec<&Tensor> = ids.into_iter().map(|id| net.store.get(id)).collect();
    proportions_of(&logits, ops)
}

/// Mean row softmax of `(rows, ops)` logit tensors.
pub fn proportions_of(logits: &[&Tensor], ops: &[OpKind]) -> Vec<(OpKind, f64)> {
    let mut acc = vec![0.0; ops.len()];
    let mut n = 0usize;
    for t in logits {
        for r in rows(t) {
            for (a, p) in acc.iter_mut().zip(softmax(r)) {
                *a += p;
            }
            n += 1;
        }
    }
    ops.iter().zip(acc).map(|(&k, a)| (k, a / n.max(1) as f64)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProportionRow {
    pub network: Option<String>,
    pub role: OpRole,
    pub op: OpKind,
    pub fraction: f64,
}

pub fn proportion_rows(net: &Supernet, network: Option<&str>) -> Vec<ProportionRow> {
    [OpRole::Encoder, OpRole::Decoder]
        .into_iter()
        .flat_map(|role| {
            proportions(net, role).into_iter().map(move |(op, fraction)| ProportionRow {
                network: network.map(str::to_string),
                role,
                op,
                fraction,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub split: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

/// `dsc`, `iou` and `hd95` rows for one split.
pub fn summarize(split: &str, scores: &[Scores]) -> Vec<MetricRow> {
    let stat = |f: fn(&Scores) -> f64| {
        let n = scores.len() as f64;
        let mean = scores.iter().map(f).sum::<f64>() / n;
        let std = if scores.len() > 1 {
            (scores.iter().map(|s| (f(s) - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        (mean, std)
    };
    let metrics: [(&str, fn(&Scores) -> f64); 3] = [("dsc", |s| s.dsc), ("iou", |s| s.iou), ("hd95", |s| s.hd95)];
    metrics
        .into_iter()
        .map(|(name, f)| {
            let (mean, std) = stat(f);
            MetricRow {
                split: split.into(),
                metric: name.into(),
                mean,
                std,
            }
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

pub fn write_proportions(path: &Path, rows: &[ProportionRow]) -> Result<()> {
    ensure_parent(path)?;
    let with_net = rows.iter().any(|r| r.network.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["role", "op", "fraction"];
    if with_net {
        header.insert(0, "network");
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let mut rec = vec![r.role.to_string(), r.op.to_string(), r.fraction.to_string()];
        if with_net {
            rec.insert(0, r.network.clone().unwrap_or_default());
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_proportions(path: &Path) -> Result<Vec<ProportionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let with_net = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["role", "op", "fraction"] => false,
        ["network", "role", "op", "fraction"] => true,
        other => return Err(Error::Format(format!("{}: unexpected header {other:?}", path.display()))),
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let o = with_net as usize;
        let fraction = rec[o + 2]
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad fraction `{}`", path.display(), &rec[o + 2])))?;
        out.push(ProportionRow {
            network: with_net.then(|| rec[0].to_string()),
            role: rec[o].parse().map_err(|e: Error| Error::Format(e.to_string()))?,
            op: rec[o + 1].parse().map_err(|e: Error| Error::Format(e.to_string()))?,
            fraction,
        });
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["split", "metric", "mean", "std"]).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([r.split.clone(), r.metric.clone(), r.mean.to_string(), r.std.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    if header != ["split", "metric", "mean", "std"] {
        return Err(Error::Format(format!("{}: unexpected header {header:?}", path.display())));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("{}: bad number `{s}`", path.display())));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        out.push(MetricRow {
            split: rec[0].to_string(),
            metric: rec[1].to_string(),
            mean: num(&rec[2])?,
            std: num(&rec[3])?,
        });
    }
    Ok(out)
}

/// Writes `genotype.json`, `proportions.csv` and `metrics.csv` into `dir`.
pub fn export(dir: &Path, genotype: &Genotype, proportions: &[ProportionRow], metrics: &[MetricRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("genotype.json");
    fs::write(&path, genotype.to_json()).map_err(|e| Error::io(&path, e))?;
    write_proportions(&dir.join("proportions.csv"), proportions)?;
    write_metrics(&dir.join("metrics.csv"), metrics)
}

/// Sum of fractions per `(network, role)`.
pub fn role_sums(rows: &[ProportionRow]) -> Vec<(Option<String>, OpRole, f64)> {
    let mut out: Vec<(Option<String>, OpRole, f64)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(n, role, _)| *n == r.network && *role == r.role) {
            Some(e) => e.2 += r.fraction,
            None => out.push((r.network.clone(), r.role, r.fraction)),
        }
    }
    out
}

/// Candidate set of `role` under `cfg`.
pub fn role_ops(cfg: &SupernetConfig, role: OpRole) -> &'static [OpKind] {
    match role {
        OpRole::Encoder => op_set(role),
        OpRole::Decoder => cfg.decoder_ops.ops(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::supernet::ArchMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net() -> Supernet {
        let cfg = SupernetConfig {
            encoder: EncoderConfig {
                layers: 2,
                nodes: 2,
                c_base: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        Supernet::new(&cfg, 5).unwrap()
    }

    fn fill(net: &mut Supernet, mut f: impl FnMut(usize, usize) -> f64) {
        for id in net.alpha_ids().into_iter().chain(net.gamma_ids()) {
            let t = net.store.get_mut(id);
            let cols = t.shape()[1];
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = f(i / cols, i % cols);
            }
        }
    }

    #[test]
    fn one_hot_logits_pick_their_op_and_shift_is_irrelevant() {
        let mut n = net();
        fill(&mut n, |r, c| if c == (r + 1) % 5 { 4.0 } else { 0.0 });
        let g = derive(&n);
        for cell in &g.encoder {
            for (r, op) in cell.ops.iter().enumerate() {
                assert_eq!(*op, ENCODER_OPS[(r + 1) % 5]);
            }
        }
        fill(&mut n, |r, c| if c == (r + 1) % 5 { 4.0 } else { 0.0 } + 3.25);
        assert_eq!(derive(&n), g);
    }

    #[test]
    fn random_logits_match_scan_and_ties_pick_lowest() {
        let mut n = net();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        fill(&mut n, |_, _| rng.random_range(-2.0..2.0));
        let g = derive(&n);
        let choice = g.choice().unwrap();
        for (cell, id) in n.alpha_ids().into_iter().enumerate() {
            let t = n.store.get(id);
            for (r, row) in t.data().chunks(8).enumerate() {
                let mut best = (f64::NEG_INFINITY, 0);
                for (k, &v) in row.iter().enumerate() {
                    if v > best.0 {
                        best = (v, k);
                    }
                }
                assert_eq!(choice.encoder[cell][r], best.1);
            }
        }
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn proportions_are_distributions() {
        let mut n = net();
        fill(&mut n, |_, _| 0.0);
        for (_, p) in proportions(&n, OpRole::Encoder) {
            assert!((p - 0.125).abs() < 1e-15);
        }
        let skip = ENCODER_OPS.iter().position(|&k| k == OpKind::Skip).unwrap();
        fill(&mut n, |_, c| if c == skip { 800.0 } else { 0.0 });
        for (k, p) in proportions(&n, OpRole::Encoder) {
            assert_eq!(p, if k == OpKind::Skip { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn toy_proportions_match_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cells: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[3, 8], |_| rng.random_range(-1.0..1.0))).collect();
        let refs: Vec<&Tensor> = cells.iter().collect();
        let p = proportions_of(&refs, &ENCODER_OPS);
        for (k, (_, got)) in p.iter().enumerate() {
            let mut s = 0.0;
            for t in &cells {
                for e in 0..3 {
                    let row = &t.data()[e * 8..e * 8 + 8];
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    s += row[k].exp() / z;
                }
            }
            assert!((got - s / 6.0).abs() < 1e-14);
        }
    }

    #[test]
    fn genotype_round_trip_and_forced_fidelity() {
        let mut n = net();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        fill(&mut n, |_, _| rng.random_range(-3.0..3.0));
        let g = derive(&n);
        assert_eq!(Genotype::parse(&g.to_json()).unwrap(), g);
        let choice = g.choice().unwrap();
        let x = Tensor::from_fn(&[1, 1, 32, 32], |i| ((i * 31) % 17) as f64 / 17.0);
        let forced = n.logits(&x, &ArchMode::Forced(&choice)).unwrap();
        let derived = n.logits(&x, &ArchMode::Derived(&choice)).unwrap();
        assert!(forced.max_abs_diff(&derived) <= 1e-10);
    }

    #[test]
    fn export_files_round_trip() {
        let n = net();
        let dir = tempfile::tempdir().unwrap();
        let rows = proportion_rows(&n, None);
        let scores = [
            Scores { dsc: 0.9, iou: 0.8, hd95: 2.0 },
            Scores { dsc: 0.7, iou: 0.6, hd95: 4.0 },
        ];
        let metrics = summarize("test", &scores);
        export(dir.path(), &derive(&n), &rows, &metrics).unwrap();
        let back = read_proportions(&dir.path().join("proportions.csv")).unwrap();
        assert_eq!(back, rows);
        for (_, _, s) in role_sums(&back) {
            assert!((s - 1.0).abs() < 1e-9);
        }
        let m = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(m, metrics);
        assert!((m[0].mean - 0.8).abs() < 1e-12 && (m[0].std - 0.02f64.sqrt()).abs() < 1e-12);
        let text = fs::read_to_string(dir.path().join("proportions.csv")).unwrap();
        assert!(text.starts_with("role,op,fraction\n"));
        assert_eq!(Genotype::read(&dir.path().join("genotype.json")).unwrap(), derive(&n));
    }
}
