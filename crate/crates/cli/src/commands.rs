//! One function per subcommand. Each writes its resolved configuration next
//! to its outputs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cscl_core::check::{affinity_suite, gradient_suite, label_suite, stride_suite, SuiteReport};
use cscl_core::encoder::{Checkpoint, EncoderParams};
use cscl_core::nn::{CeVariant, ClassifierParams};
use cscl_core::strided::{bench_csv, bench_stride};
use cscl_core::synth::{generate_scene, read_dataset, write_dataset, SyntheticScene};
use cscl_core::train::{
    evaluate, finetune, position_accuracy, pretrain, FinetuneConfig, PretrainConfig, RegionReport, STREAM_CLASSIFIER,
    STREAM_ENCODER, STREAM_PROJECTIONS,
};
use cscl_core::{LossForm, PretrainDiagnostics, ProjectionParams, Rng};

use crate::config::{RunConfig, RESOLVED_FILE};

pub const STREAM_GEN_TRAIN: u64 = 10;
pub const STREAM_GEN_EVAL: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gen,
    Pretrain,
    Finetune,
    Eval,
    Bench,
    Check,
}

impl Command {
    pub const ALL: [(Command, &'static str, &'static str); 6] = [
        (Command::Gen, "gen", "generate train/eval synthetic scenes"),
        (Command::Pretrain, "pretrain", "CSCL pre-training of encoder and projections"),
        (Command::Finetune, "finetune", "masked cross-entropy training from --init random or a checkpoint"),
        (Command::Eval, "eval", "metrics and per-position pair accuracy of a checkpoint"),
        (Command::Bench, "bench", "strided versus naive affinity benchmark"),
        (Command::Check, "check", "run the oracle and gradient suites"),
    ];

    pub fn from_name(name: &str) -> Option<Command> {
        Command::ALL.iter().find(|(_, n, _)| *n == name).map(|(c, _, _)| *c)
    }
}

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let occupied = !out.is_dir() || fs::read_dir(out)?.next().is_some();
        if occupied && !force {
            bail!("{} already exists; pass --force to overwrite", out.display());
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write(path: PathBuf, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cmd: Command, cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    prepare_out(out, force)?;
    write(out.join(RESOLVED_FILE), cfg.resolved_text())?;
    match cmd {
        Command::Gen => cmd_gen(cfg, out),
        Command::Pretrain => cmd_pretrain(cfg, out),
        Command::Finetune => cmd_finetune(cfg, out),
        Command::Eval => cmd_eval(cfg, out),
        Command::Bench => cmd_bench(cfg, out),
        Command::Check => cmd_check(cfg, out),
    }
}

/// Scene seeds drawn from a split-specific stream.
fn split_seeds(seed: u64, stream: u64, n: usize) -> Vec<u64> {
    let mut rng = Rng::new(seed, stream);
    (0..n).map(|_| rng.next_u64()).collect()
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let n_train: usize = cfg.get("scenes")?;
    let n_eval: usize = cfg.get("eval_scenes")?;
    ensure!(n_train > 0, "--scenes must be at least 1");
    let train_seeds = split_seeds(seed, STREAM_GEN_TRAIN, n_train);
    let eval_seeds = split_seeds(seed, STREAM_GEN_EVAL, n_eval);
    let all: BTreeSet<u64> = train_seeds.iter().chain(&eval_seeds).copied().collect();
    ensure!(all.len() == n_train + n_eval, "scene seeds collide; choose another --seed");
    for (split, seeds) in [("train", train_seeds), ("eval", eval_seeds)] {
        let scenes = seeds
            .iter()
            .enumerate()
            .map(|(id, &s)| Ok(generate_scene(&cfg.scene(s, seed)?, id)?))
            .collect::<Result<Vec<_>>>()?;
        write_dataset(&scenes, &out.join(split))?;
        log::info!("{split}: {} scenes", scenes.len());
    }
    Ok(())
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<SyntheticScene>> {
    let dir = Path::new(cfg.raw("data")).join(split);
    read_dataset(&dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn channels(scenes: &[SyntheticScene]) -> Result<usize> {
    match scenes.first() {
        Some(s) => Ok(s.image.shape()[2]),
        None => bail!("the training split is empty"),
    }
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let train = load_split(cfg, "train")?;
    let seed: u64 = cfg.get("seed")?;
    let ecfg = cfg.encoder(channels(&train)?)?;
    let window = cfg.window()?;
    let encoder = EncoderParams::init(&ecfg, &mut Rng::new(seed, STREAM_ENCODER))?;
    let proj = ProjectionParams::init(ecfg.d_in, cfg.get("d_q")?, window.wd, &mut Rng::new(seed, STREAM_PROJECTIONS))?;
    let pc = PretrainConfig {
        window,
        form: cfg.get::<LossForm>("loss")?,
        use_pos: cfg.get("use_pos")?,
        train: cfg.train()?,
    };
    let res = pretrain(&train, encoder, proj, &pc)?;
    let mut csv = format!("{}\n", PretrainDiagnostics::CSV_HEADER);
    for d in &res.diagnostics {
        writeln!(csv, "{}", d.csv_row())?;
    }
    write(out.join("diagnostics.csv"), csv)?;
    Checkpoint {
        encoder: res.encoder,
        projections: Some(res.projections),
        classifier: None,
    }
    .save(&out.join("checkpoint"))?;
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, out: &Path) -> Result<()> {
    let train = load_split(cfg, "train")?;
    let seed: u64 = cfg.get("seed")?;
    let in_channels = channels(&train)?;
    let encoder = match cfg.raw("init") {
        "random" => EncoderParams::init(&cfg.encoder(in_channels)?, &mut Rng::new(seed, STREAM_ENCODER))?,
        path => {
            let ck = Checkpoint::load(Path::new(path)).with_context(|| format!("loading checkpoint {path}"))?;
            ensure!(
                ck.encoder.in_channels() == in_channels,
                "checkpoint {path} expects {} input channels, the data has {in_channels}",
                ck.encoder.in_channels()
            );
            ck.encoder
        }
    };
    let num_classes = train[0].labels.num_classes;
    let classifier = ClassifierParams::init(num_classes, encoder.d_in(), &mut Rng::new(seed, STREAM_CLASSIFIER));
    let fc = FinetuneConfig {
        variant: cfg.get::<CeVariant>("variant")?,
        train: cfg.train()?,
    };
    let res = finetune(&train, encoder, classifier, &fc)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in res.losses.iter().enumerate() {
        writeln!(csv, "{},{l}", e + 1)?;
    }
    write(out.join("train_loss.csv"), csv)?;
    let eval = load_split(cfg, "eval")?;
    if !eval.is_empty() {
        let sr = res.encoder.super_res() || cfg.get("score_sr")?;
        let reports = evaluate(&eval, &res.encoder, &res.classifier, &cfg.regions()?, sr)?;
        write_reports(&reports, out)?;
    }
    Checkpoint {
        encoder: res.encoder,
        projections: None,
        classifier: Some(res.classifier),
    }
    .save(&out.join("checkpoint"))?;
    Ok(())
}

pub const METRICS_HEADER: &str = "region,overall_acc,miou,macro_f1";

fn write_reports(reports: &[RegionReport], out: &Path) -> Result<()> {
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut table = format!("{:<10} {:>8} {:>8} {:>8}\n", "region", "OA", "mIoU", "F1");
    for r in reports {
        let m = r.metrics;
        writeln!(csv, "{},{},{},{}", r.region, m.overall_acc, m.miou, m.macro_f1)?;
        writeln!(
            table,
            "{:<10} {:>8.4} {:>8.4} {:>8.4}",
            r.region.to_string(),
            m.overall_acc,
            m.miou,
            m.macro_f1
        )?;
        write(out.join(format!("confusion_{}.csv", r.region)), r.confusion.to_csv())?;
    }
    write(out.join("metrics.csv"), csv)?;
    write(out.join("metrics.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = cfg.raw("checkpoint");
    ensure!(!path.is_empty(), "--checkpoint is required");
    let ck = Checkpoint::load(Path::new(path)).with_context(|| format!("loading checkpoint {path}"))?;
    let scenes = load_split(cfg, cfg.raw("split"))?;
    ensure!(!scenes.is_empty(), "split {} is empty", cfg.raw("split"));
    ensure!(
        ck.classifier.is_some() || ck.projections.is_some(),
        "checkpoint {path} has neither a classifier nor projection heads"
    );
    if let Some(cls) = &ck.classifier {
        let sr = ck.encoder.super_res() || cfg.get("score_sr")?;
        let reports = evaluate(&scenes, &ck.encoder, cls, &cfg.regions()?, sr)?;
        write_reports(&reports, out)?;
    }
    if let Some(proj) = &ck.projections {
        let window = cfg.window()?;
        ensure!(
            proj.wd() == window.wd,
            "checkpoint was pre-trained with w_d={}, configuration has w_d={}",
            proj.wd(),
            window.wd
        );
        let (pos, neg) = position_accuracy(
            &scenes,
            &ck.encoder,
            proj,
            &window,
            cfg.get("use_pos")?,
            cfg.get("threshold")?,
        )?;
        let c = window.center() as f64;
        let mut csv = String::from("k,m,distance,pos_acc,neg_acc\n");
        for k in 0..window.wd {
            for m in 0..window.wd {
                let dist = ((k as f64 - c).powi(2) + (m as f64 - c).powi(2)).sqrt();
                writeln!(csv, "{k},{m},{dist},{},{}", pos.get(&[k, m]), neg.get(&[k, m]))?;
            }
        }
        write(out.join("position_accuracy.csv"), csv)?;
    }
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let d: usize = cfg.get("bench_channels")?;
    let sizes: Vec<(usize, usize, usize)> = cfg.bench_sizes()?.into_iter().map(|s| (s, s, d)).collect();
    let rows = bench_stride(&sizes, &cfg.bench_cfgs()?, cfg.get("seed")?)?;
    write(out.join("bench.csv"), bench_csv(&rows))?;
    let mismatched: Vec<String> = rows
        .iter()
        .filter(|r| !r.equivalent)
        .map(|r| format!("{}x{}x{} {}", r.h, r.w, r.d, r.cfg_label()))
        .collect();
    if cfg.get("check_equivalence")? && !mismatched.is_empty() {
        bail!("strided and naive results differ for {}", mismatched.join(", "));
    }
    Ok(())
}

pub fn cmd_check(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let (grad, rows) = gradient_suite();
    let reports: Vec<SuiteReport> = vec![
        label_suite(6, 3, &[3, 5], 1000, seed)?,
        affinity_suite(50, 1e-6, seed)?,
        grad,
        stride_suite(200, 1e-6, seed)?,
    ];
    let mut csv = format!("{}\n", SuiteReport::CSV_HEADER);
    for r in &reports {
        writeln!(csv, "{}", r.csv_row())?;
        println!("{:<12} {:>7} cases  {}", r.name, r.cases, if r.passed() { "ok" } else { "FAILED" });
    }
    write(out.join("check.csv"), csv)?;
    let mut g = String::from("case,max_rel_err,passed\n");
    for r in &rows {
        writeln!(g, "{},{:e},{}", r.name, r.max_rel_err, r.passed)?;
    }
    write(out.join("gradients.csv"), g)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    ensure!(failed.is_empty(), "failed suites: {}", failed.join(", "));
    Ok(())
}
