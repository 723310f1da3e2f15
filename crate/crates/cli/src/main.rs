//! Command-line entry point: `search`, `derive`, `eval` and `report`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! missing inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use segnas::checkpoint;
use segnas::config::RunConfig;
use segnas::data::{generate_dataset, load_dir, load_masks, split, write_gray, SegSample};
use segnas::metrics::foreground_scores;
use segnas::report::{self, derive, proportion_rows, summarize, Genotype, MetricRow};
use segnas::supernet::{ArchMode, Supernet};
use segnas::trainer::{evaluate, run_search, StageEvent};

#[derive(Parser)]
#[command(name = "segnas", version, about = "Semi-supervised architecture search for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search from a TOML config and write checkpoints.
    Search(SearchArgs),
    /// Discretise a checkpoint into a genotype and operation proportions.
    Derive {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Network to derive (1 or 2).
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        network: u8,
    },
    /// Score predictions against ground-truth masks.
    Eval(EvalArgs),
    /// Aggregate both networks of a run into report files.
    Report {
        /// Output directory of a finished search.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SearchArgs {
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    /// Comma-separated resolutions, or `none`.
    #[arg(long)]
    contrastive_res: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predict with this checkpoint.
    #[arg(long, conflicts_with = "pred", required_unless_present = "pred")]
    checkpoint: Option<PathBuf>,
    /// Directory of predicted masks (`masks/<id>.png`).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth directory (`images/` and `masks/`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    network: u8,
    /// Evaluate the relaxed supernet instead of the derived architecture.
    #[arg(long)]
    relaxed: bool,
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<segnas::Error> for Failure {
    fn from(e: segnas::Error) -> Self {
        match e {
            segnas::Error::Config(_) | segnas::Error::Input(_) => Failure::Invalid(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn require(path: &Path, what: &str) -> Outcome<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Invalid(anyhow!("{what} {} does not exist", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Search(a) => search(a),
        Command::Derive { checkpoint, out, network } => derive_cmd(&checkpoint, &out, network),
        Command::Eval(a) => eval(a),
        Command::Report { run, out } => report_cmd(&run, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn parse_resolutions(s: &str) -> Outcome<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Failure::Invalid(anyhow!("--contrastive-res: `{t}` is not a resolution")))
        })
        .collect()
}

fn search(a: SearchArgs) -> Outcome<()> {
    require(&a.config, "config file")?;
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.labeled_fraction {
        cfg.labeled_fraction = f;
    }
    if let Some(l) = a.layers {
        cfg.layers = l;
    }
    if let Some(r) = &a.contrastive_res {
        cfg.contrastive_resolutions = parse_resolutions(r)?;
    }
    cfg.validate()?;

    let (labeled, unlabeled, test) = load_data(&cfg)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
    let train = cfg.train();
    eprintln!(
        "search: {} labeled, {} unlabeled, {} held out, {} epochs",
        labeled.len(),
        unlabeled.len(),
        test.len(),
        train.epochs
    );
    let outcome = run_search(
        &cfg.supernet(),
        &train,
        &labeled,
        &unlabeled,
        &test,
        Some(&out.join("checkpoints")),
        &mut |e, _| {
            if let StageEvent::Arch { epoch } | StageEvent::ArchSkipped { epoch } = e {
                eprintln!("epoch {epoch}/{} done", train.epochs);
            }
        },
    )?;
    fs::write(out.join("loss_history.csv"), outcome.state.loss_history_csv()).context("writing loss_history.csv")?;
    if !test.is_empty() {
        let net = &outcome.pair.net1;
        let genotype = derive(net);
        let choice = genotype.choice()?;
        let mut rows = summarize("test_derived", &evaluate(net, &test, &ArchMode::Derived(&choice), 8)?);
        rows.extend(summarize("test_relaxed", &evaluate(net, &test, &ArchMode::Relaxed, 8)?));
        report::write_metrics(&out.join("metrics.csv"), &rows)?;
        if let Some(r) = rows.first() {
            eprintln!("held-out DSC (derived network 1): {:.4}", r.mean);
        }
    }
    Ok(())
}

type Splits = (Vec<SegSample>, Vec<SegSample>, Vec<SegSample>);

fn load_data(cfg: &RunConfig) -> Outcome<Splits> {
    if cfg.uses_phantoms() {
        let data = generate_dataset(&cfg.phantom(), cfg.phantom_count, cfg.seed)?;
        let s = split(data, cfg.labeled_fraction, cfg.test_fraction, cfg.seed)?;
        return Ok((s.labeled, s.unlabeled, s.test));
    }
    let dir = Path::new(&cfg.data);
    require(dir, "data directory")?;
    let all = load_dir(dir)?;
    let (with, without): (Vec<_>, Vec<_>) = all.into_iter().partition(|s| s.is_labeled());
    if with.is_empty() {
        return Err(Failure::Invalid(anyhow!("data directory {} holds no masks", dir.display())));
    }
    let mut s = split(with, cfg.labeled_fraction, cfg.test_fraction, cfg.seed)?;
    s.unlabeled.extend(without);
    Ok((s.labeled, s.unlabeled, s.test))
}

fn load_net(checkpoint: &Path, network: u8) -> Outcome<Supernet> {
    require(&checkpoint.join("manifest.json"), "checkpoint manifest")?;
    let ck = checkpoint::load(checkpoint)?;
    Ok(if network == 1 { ck.pair.net1 } else { ck.pair.net2 })
}

fn derive_cmd(checkpoint: &Path, out: &Path, network: u8) -> Outcome<()> {
    let net = load_net(checkpoint, network)?;
    let genotype = derive(&net);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("genotype.json"), genotype.to_json()).context("writing genotype.json")?;
    report::write_proportions(&out.join("proportions.csv"), &proportion_rows(&net, None))?;
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome<()> {
    require(&a.data.join("masks"), "ground-truth masks directory")?;
    let rows = match (&a.checkpoint, &a.pred) {
        (Some(ck), _) => {
            let net = load_net(ck, a.network)?;
            let samples: Vec<SegSample> = load_dir(&a.data)?.into_iter().filter(|s| s.is_labeled()).collect();
            if samples.is_empty() {
                return Err(Failure::Invalid(anyhow!("no labeled samples in {}", a.data.display())));
            }
            let genotype = derive(&net);
            let choice = genotype.choice()?;
            let mode = if a.relaxed { ArchMode::Relaxed } else { ArchMode::Derived(&choice) };
            let classes = net.config().num_classes;
            let mut scores = Vec::with_capacity(samples.len());
            for s in &samples {
                let (h, w) = (s.height(), s.width());
                let pred = net.predict(&s.image.clone().reshape(&[1, 1, h, w])?, &mode)?;
                scores.push(foreground_scores(&pred, s.mask.as_ref().unwrap(), w, classes)?);
                let px = pred.iter().map(|&c| c as u8).collect();
                write_gray(&a.out.join("masks").join(format!("{}.png", s.id)), h, w, px)?;
            }
            summarize("eval", &scores)
        }
        (None, Some(pred_dir)) => {
            require(&pred_dir.join("masks"), "prediction masks directory")?;
            let gt = load_masks(&a.data)?;
            let pred = load_masks(pred_dir)?;
            let classes = gt
                .iter()
                .flat_map(|(_, _, _, m)| m.iter())
                .chain(pred.iter().flat_map(|(_, _, _, m)| m.iter()))
                .max()
                .map_or(2, |&c| (c + 1).max(2));
            let mut scores = Vec::with_capacity(gt.len());
            for (id, h, w, truth) in &gt {
                let (_, ph, pw, p) = pred
                    .iter()
                    .find(|(pid, ..)| pid == id)
                    .ok_or_else(|| Failure::Invalid(anyhow!("no prediction for `{id}`")))?;
                if (ph, pw) != (h, w) {
                    return Err(Failure::Invalid(anyhow!("prediction `{id}` is {ph}x{pw}, mask is {h}x{w}")));
                }
                scores.push(foreground_scores(p, truth, *w, classes)?);
            }
            if scores.is_empty() {
                return Err(Failure::Invalid(anyhow!("no ground-truth masks in {}", a.data.display())));
            }
            summarize("eval", &scores)
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    report::write_metrics(&a.out.join("metrics.csv"), &rows)?;
    for r in &rows {
        println!("{} {} {:.6} {:.6}", r.split, r.metric, r.mean, r.std);
    }
    Ok(())
}

fn latest_checkpoint(run: &Path) -> Outcome<PathBuf> {
    let dir = run.join("checkpoints");
    require(&dir, "checkpoint directory")?;
    let mut epochs: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").exists())
        .collect();
    epochs.sort();
    epochs
        .pop()
        .ok_or_else(|| Failure::Invalid(anyhow!("no checkpoints under {}", dir.display())))
}

fn report_cmd(run: &Path, out: &Path) -> Outcome<()> {
    let ck = checkpoint::load(&latest_checkpoint(run)?)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::new();
    let mut genotypes: Vec<Genotype> = Vec::new();
    for (k, net) in ck.pair.nets().into_iter().enumerate() {
        let name = format!("net{}", k + 1);
        let g = derive(net);
        fs::write(out.join(format!("genotype_{name}.json")), g.to_json()).context("writing genotype")?;
        rows.extend(proportion_rows(net, Some(&name)));
        genotypes.push(g);
    }
    let metrics_path = run.join("metrics.csv");
    let mut metrics: Vec<MetricRow> = if metrics_path.exists() {
        report::read_metrics(&metrics_path)?
    } else {
        Vec::new()
    };
    if let Some(dsc) = ck.manifest.history.last().and_then(|r| r.val_dsc) {
        metrics.push(MetricRow {
            split: "validation_final".into(),
            metric: "dsc".into(),
            mean: dsc,
            std: 0.0,
        });
    }
    report::export(out, &genotypes[0], &rows, &metrics)?;
    Ok(())
}
