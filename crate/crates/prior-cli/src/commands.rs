//! Subcommand implementations. Each one resolves its options (flag, then
//! config file, then default), verifies upstream artifacts against their
//! manifests, writes its outputs, and records a manifest of its own.

use crate::args::*;
use crate::config::ConfigFile;
use crate::manifest::{verify_input, ManifestBuilder, RunManifest};
use anyhow::{anyhow, bail, Context, Result};
use prior_core::analysis;
use prior_core::model::{CheckpointBundle, ModelConfig};
use prior_core::scaling::{self, FitMetric};
use prior_core::scoring::{
    read_scored, score_corpus, train_reference, write_scored, ScoredSample,
};
use prior_core::synth::{build_vocab, gen_corpus, read_corpus, CorpusSpec, SyntheticSample, VocabLayout};
use prior_core::trainer::{
    self, evaluate, read_run_log, Objective, RunRecord, TrainConfig, TrainingRunLog,
};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("creating {}", path.display())
    })?))
}

fn spec_from_manifest(manifest: &RunManifest, artifact: &Path) -> Result<CorpusSpec> {
    manifest.corpus_spec.clone().ok_or_else(|| {
        anyhow!(
            "manifest for {} carries no corpus geometry",
            artifact.display()
        )
    })
}

/// Verified corpus load: hash check, then parse; returns the generator spec
/// and vocabulary layout alongside the samples.
fn load_corpus_verified(path: &Path) -> Result<(Vec<SyntheticSample>, CorpusSpec, VocabLayout)> {
    let manifest = verify_input(path)?;
    let spec = spec_from_manifest(&manifest, path)?;
    let vocab = build_vocab(&spec)?;
    let samples = read_corpus(BufReader::new(File::open(path)?))?;
    Ok((samples, spec, vocab))
}

fn load_scored_verified(path: &Path) -> Result<(Vec<ScoredSample>, CorpusSpec, VocabLayout)> {
    let manifest = verify_input(path)?;
    let spec = spec_from_manifest(&manifest, path)?;
    let vocab = build_vocab(&spec)?;
    let samples = read_scored(BufReader::new(File::open(path)?))?;
    Ok((samples, spec, vocab))
}

/// Checkpoints are self-describing; the manifest hash is checked when one
/// exists (tamper detection), and skipped for hand-placed files.
fn load_ckpt(path: &Path) -> Result<CheckpointBundle> {
    if crate::manifest::manifest_path(path).exists() {
        verify_input(path)?;
    }
    Ok(CheckpointBundle::load(path)?)
}

fn resolve_dims(
    dims: &ModelDims,
    cfg: &ConfigFile,
    vocab: &VocabLayout,
    prefix_len: usize,
    seed: u64,
) -> Result<ModelConfig> {
    Ok(ModelConfig {
        vocab_size: vocab.total,
        d_model: cfg.resolve(dims.d_model, "d-model", 64)?,
        n_heads: cfg.resolve(dims.heads, "heads", 4)?,
        n_layers: cfg.resolve(dims.layers, "layers", 2)?,
        context_len: cfg.resolve(dims.context_len, "context-len", 256)?,
        prefix_len,
        seed,
    })
}

fn write_log_file(path: &Path, log: &TrainingRunLog) -> Result<()> {
    let mut out = open_writer(path)?;
    log.write_jsonl(&mut out)?;
    out.flush()?;
    Ok(())
}

fn read_log_verified(path: &Path) -> Result<Vec<RunRecord>> {
    if crate::manifest::manifest_path(path).exists() {
        verify_input(path)?;
    }
    Ok(read_run_log(BufReader::new(File::open(path)?))?)
}

// ---- gen-data -------------------------------------------------------------

pub fn gen_data(args: GenDataArgs, cfg: &ConfigFile) -> Result<()> {
    let spec = CorpusSpec {
        n_slots: cfg.resolve(args.slots, "slots", 3)?,
        attrs_per_slot: cfg.resolve(args.attrs, "attrs", 8)?,
        filler_vocab: cfg.resolve(args.filler, "filler", 32)?,
        markov_peak: cfg.resolve(args.gamma, "gamma", 0.95)?,
        filler_run_p: cfg.resolve(args.run_p, "run-p", 0.3)?,
        runs_min: cfg.resolve(args.runs_min, "runs-min", 3)?,
        runs_max: cfg.resolve(args.runs_max, "runs-max", 6)?,
        seed: cfg.resolve_seed(args.seed)?,
    };
    let n = cfg.resolve(args.n, "n", 20_000)?;
    let offset = cfg.resolve(args.offset, "offset", 0)?;
    let vocab = build_vocab(&spec)?;

    let mut manifest = ManifestBuilder::new("gen-data");
    manifest
        .set("n", n)
        .set("offset", offset)
        .set("seed", spec.seed)
        .set("slots", spec.n_slots)
        .set("attrs", spec.attrs_per_slot)
        .set("filler", spec.filler_vocab)
        .set("gamma", spec.markov_peak)
        .set("run-p", spec.filler_run_p)
        .set("runs-min", spec.runs_min)
        .set("runs-max", spec.runs_max)
        .set("vocab-size", vocab.total)
        .corpus_spec(&spec);

    let mut out = open_writer(&args.out)?;
    gen_corpus(&spec, n, offset, &mut out)?;
    out.flush()?;
    drop(out);

    manifest.output(&args.out)?;
    manifest.write()?;
    println!(
        "wrote {} samples (vocab {}) to {}",
        n,
        vocab.total,
        args.out.display()
    );
    Ok(())
}

// ---- train-ref --------------------------------------------------------------

pub fn train_ref(args: TrainRefArgs, cfg: &ConfigFile) -> Result<()> {
    let (corpus, spec, vocab) = load_corpus_verified(&args.corpus)?;
    let (heldout, _, _) = load_corpus_verified(&args.heldout)?;

    let seed = cfg.resolve_seed(args.seed)?;
    let model_cfg = resolve_dims(&args.dims, cfg, &vocab, 0, seed)?;
    let mut train_cfg = TrainConfig::new(Objective::Ntp, cfg.resolve(args.steps, "steps", 2000)?, seed);
    train_cfg.batch_size = cfg.resolve(args.batch_size, "batch-size", 64)?;
    train_cfg.learning_rate = cfg.resolve(args.lr, "lr", 3e-4)?;
    train_cfg.eval_every = cfg.resolve(args.eval_every, "eval-every", 250)?;

    let mut manifest = ManifestBuilder::new("train-ref");
    manifest
        .set("steps", train_cfg.steps)
        .set("batch-size", train_cfg.batch_size)
        .set("lr", train_cfg.learning_rate)
        .set("eval-every", train_cfg.eval_every)
        .set("seed", seed)
        .set("d-model", model_cfg.d_model)
        .set("layers", model_cfg.n_layers)
        .set("heads", model_cfg.n_heads)
        .set("context-len", model_cfg.context_len)
        .corpus_spec(&spec);
    manifest.input(&args.corpus)?;
    manifest.input(&args.heldout)?;

    let (ckpt, log) = train_reference(&corpus, &heldout, &vocab, &model_cfg, &train_cfg)?;
    ckpt.save(&args.out)?;
    write_log_file(&args.log, &log)?;

    manifest.output(&args.out)?;
    manifest.output(&args.log)?;
    manifest.write()?;
    if let Some(last) = log.records.last() {
        println!(
            "reference trained {} steps; held-out NLL {:.4}",
            train_cfg.steps, last.overall_nll
        );
    }
    Ok(())
}

// ---- score ----------------------------------------------------------------

pub fn score(args: ScoreArgs, _cfg: &ConfigFile) -> Result<()> {
    let (corpus, spec, vocab) = load_corpus_verified(&args.corpus)?;
    let ckpt = load_ckpt(&args.reference)?;
    if ckpt.config.vocab_size != vocab.total {
        return Err(prior_core::Error::IncompatibleTokenizer(format!(
            "reference vocabulary {} but corpus vocabulary {}",
            ckpt.config.vocab_size, vocab.total
        ))
        .into());
    }

    let mut manifest = ManifestBuilder::new("score");
    manifest
        .set("ref-model-hash", ckpt.hash_hex())
        .corpus_spec(&spec);
    manifest.input(&args.reference)?;
    manifest.input(&args.corpus)?;

    let scored = score_corpus(&ckpt, &corpus)?;
    let mut out = open_writer(&args.out)?;
    write_scored(&scored, &mut out)?;
    out.flush()?;
    drop(out);

    manifest.output(&args.out)?;
    manifest.write()?;
    println!("scored {} captions into {}", scored.len(), args.out.display());
    Ok(())
}

// ---- train ------------------------------------------------------------------

/// `model.ckpt` with alpha 0.5 becomes `model-a0.5.ckpt`.
fn sweep_path(path: &Path, alpha: f64) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    path.with_file_name(format!("{stem}-a{alpha}{ext}"))
}

pub fn train(args: TrainArgs, cfg: &ConfigFile) -> Result<()> {
    let (scored, spec, vocab) = load_scored_verified(&args.scored)?;
    let (heldout, _, _) = load_corpus_verified(&args.heldout)?;

    let objective = match args.objective {
        Some(ObjectiveArg::Ntp) => Objective::Ntp,
        Some(ObjectiveArg::Prior) => Objective::Prior,
        None => match cfg.resolve(None, "objective", "prior".to_string())?.as_str() {
            "ntp" => Objective::Ntp,
            "prior" => Objective::Prior,
            other => bail!("unknown objective '{other}'"),
        },
    };
    let seed = cfg.resolve_seed(args.seed)?;
    let model_cfg = resolve_dims(&args.dims, cfg, &vocab, spec.n_slots, seed)?;

    let alphas: Vec<f64> = match &args.alpha_sweep {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| anyhow!("bad alpha '{s}' in sweep: {e}"))
            })
            .collect::<Result<_>>()?,
        None => vec![cfg.resolve(args.alpha, "alpha", 1.0)?],
    };
    let sweeping = args.alpha_sweep.is_some();

    for &alpha in &alphas {
        let mut train_cfg = TrainConfig::new(objective, cfg.resolve(args.steps, "steps", 3000)?, seed);
        train_cfg.alpha = alpha;
        train_cfg.scale_by_k = !args.no_k_scale;
        train_cfg.batch_size = cfg.resolve(args.batch_size, "batch-size", 64)?;
        train_cfg.learning_rate = cfg.resolve(args.lr, "lr", 3e-4)?;
        train_cfg.eval_every = cfg.resolve(args.eval_every, "eval-every", 250)?;
        train_cfg.text_mix = args.text_mix;

        let ckpt_path = if sweeping {
            sweep_path(&args.out, alpha)
        } else {
            args.out.clone()
        };
        let log_path = if sweeping {
            sweep_path(&args.log, alpha)
        } else {
            args.log.clone()
        };

        let mut manifest = ManifestBuilder::new("train");
        manifest
            .set("objective", objective)
            .set("alpha", alpha)
            .set("scale-by-k", train_cfg.scale_by_k)
            .set("steps", train_cfg.steps)
            .set("batch-size", train_cfg.batch_size)
            .set("lr", train_cfg.learning_rate)
            .set("eval-every", train_cfg.eval_every)
            .set("seed", seed)
            .set("text-mix", train_cfg.text_mix)
            .set("d-model", model_cfg.d_model)
            .set("layers", model_cfg.n_layers)
            .set("heads", model_cfg.n_heads)
            .set("context-len", model_cfg.context_len)
            .corpus_spec(&spec);
        manifest.input(&args.scored)?;
        manifest.input(&args.heldout)?;

        let (ckpt, log) = trainer::train(&scored, &heldout, &vocab, &model_cfg, &train_cfg)?;
        ckpt.save(&ckpt_path)?;
        write_log_file(&log_path, &log)?;

        manifest.output(&ckpt_path)?;
        manifest.output(&log_path)?;
        manifest.write()?;
        if let Some(last) = log.records.last() {
            println!(
                "{objective} alpha={alpha}: {} steps, held-out NLL {:.4}, attr acc {:.4}",
                train_cfg.steps, last.overall_nll, last.attr_acc
            );
        }
    }
    Ok(())
}

// ---- eval -------------------------------------------------------------------

pub fn eval(args: EvalArgs, _cfg: &ConfigFile) -> Result<()> {
    let (heldout, spec, vocab) = load_corpus_verified(&args.corpus)?;
    let ckpt = load_ckpt(&args.ckpt)?;
    let report = evaluate(&ckpt, &heldout, &vocab)?;

    let mut out = open_writer(&args.out)?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    out.write_all(b"\n")?;
    out.flush()?;
    drop(out);

    let mut manifest = ManifestBuilder::new("eval");
    manifest.corpus_spec(&spec);
    manifest.input(&args.ckpt)?;
    manifest.input(&args.corpus)?;
    manifest.output(&args.out)?;
    manifest.write()?;
    println!(
        "overall NLL {:.4}, related {:?}, unrelated {:?}, attr acc {:.4}",
        report.overall_nll, report.related_nll, report.unrelated_nll, report.attr_acc
    );
    Ok(())
}

// ---- analyze ----------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn analyze(cmd: AnalyzeCommand, cfg: &ConfigFile) -> Result<()> {
    match cmd {
        AnalyzeCommand::Length(args) => {
            let (scored, spec, _) = load_scored_verified(&args.scored)?;
            let alpha = cfg.resolve(args.alpha, "alpha", 1.0)?;
            let report = analysis::length_score_correlation(&scored, alpha)?;
            let mut out = open_writer(&args.out)?;
            writeln!(out, "length,mean_score,n")?;
            for (len, mean, n) in &report.per_length {
                writeln!(out, "{len},{mean},{n}")?;
            }
            out.flush()?;
            let mut manifest = ManifestBuilder::new("analyze-length");
            manifest
                .set("alpha", alpha)
                .set("pearson-r", report.pearson_r)
                .corpus_spec(&spec);
            manifest.input(&args.scored)?;
            manifest.output(&args.out)?;
            manifest.write()?;
            println!("pearson r = {:.4} over {} captions", report.pearson_r, report.n_captions);
        }
        AnalyzeCommand::Position(args) => {
            let (scored, spec, _) = load_scored_verified(&args.scored)?;
            let alpha = cfg.resolve(args.alpha, "alpha", 1.0)?;
            let max_pos = cfg.resolve(args.max_pos, "max-pos", 40)?;
            let report = analysis::position_score_profile(&scored, alpha, max_pos)?;
            let mut out = open_writer(&args.out)?;
            writeln!(out, "pos,mean_score,n")?;
            for (pos, mean, n) in &report.per_position {
                writeln!(out, "{pos},{mean},{n}")?;
            }
            out.flush()?;
            let mut manifest = ManifestBuilder::new("analyze-position");
            manifest.set("alpha", alpha).set("max-pos", max_pos).corpus_spec(&spec);
            manifest.input(&args.scored)?;
            manifest.output(&args.out)?;
            manifest.write()?;
            println!("{} positions profiled", report.per_position.len());
        }
        AnalyzeCommand::Threshold(args) => {
            let (scored, spec, _) = load_scored_verified(&args.scored)?;
            let ckpt = load_ckpt(&args.ckpt)?;
            let taus: Vec<f64> = match &args.taus {
                Some(list) => list
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|e| anyhow!("bad threshold '{s}': {e}"))
                    })
                    .collect::<Result<_>>()?,
                None => vec![0.3, 0.5, 0.7, 0.9],
            };
            let report = analysis::threshold_loss_split(&ckpt, &scored, &taus)?;
            let mut out = open_writer(&args.out)?;
            writeln!(out, "tau,related_nll,unrelated_nll,n_rel,n_unrel")?;
            for c in &report.cells {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    c.tau,
                    fmt_opt(c.related_nll),
                    fmt_opt(c.unrelated_nll),
                    c.n_related,
                    c.n_unrelated
                )?;
            }
            out.flush()?;
            let mut manifest = ManifestBuilder::new("analyze-threshold");
            manifest
                .set("taus", taus.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","))
                .corpus_spec(&spec);
            manifest.input(&args.ckpt)?;
            manifest.input(&args.scored)?;
            manifest.output(&args.out)?;
            manifest.write()?;
            println!("{} thresholds over {} tokens", report.cells.len(), report.n_tokens);
        }
        AnalyzeCommand::Auc(args) => {
            let (scored, spec, _) = load_scored_verified(&args.scored)?;
            let alpha = cfg.resolve(args.alpha, "alpha", 1.0)?;
            let auc = analysis::relatedness_auc(&scored, alpha)?;
            let mut out = open_writer(&args.out)?;
            serde_json::to_writer_pretty(&mut out, &serde_json::json!({ "alpha": alpha, "auc": auc }))?;
            out.write_all(b"\n")?;
            out.flush()?;
            let mut manifest = ManifestBuilder::new("analyze-auc");
            manifest.set("alpha", alpha).set("auc", auc).corpus_spec(&spec);
            manifest.input(&args.scored)?;
            manifest.output(&args.out)?;
            manifest.write()?;
            println!("AUC = {auc:.4}");
        }
        AnalyzeCommand::Infogain(args) => {
            let (scored, spec, _) = load_scored_verified(&args.scored)?;
            let cond = load_ckpt(&args.cond)?;
            let reference = load_ckpt(&args.reference)?;
            let report = analysis::info_gain(&cond, &reference, &scored)?;
            let mut out = open_writer(&args.out)?;
            writeln!(out, "subset,mean_gain,n")?;
            writeln!(out, "overall,{},{}", report.overall, report.n_tokens)?;
            if let Some(v) = report.related {
                writeln!(out, "related,{},{}", v, report.n_related)?;
            }
            if let Some(v) = report.unrelated {
                writeln!(out, "unrelated,{},{}", v, report.n_unrelated)?;
            }
            out.flush()?;
            let mut manifest = ManifestBuilder::new("analyze-infogain");
            manifest.set("overall-gain", report.overall).corpus_spec(&spec);
            manifest.input(&args.cond)?;
            manifest.input(&args.reference)?;
            manifest.input(&args.scored)?;
            manifest.output(&args.out)?;
            manifest.write()?;
            println!(
                "info gain: overall {:.4}, related {:?}, unrelated {:?}",
                report.overall, report.related, report.unrelated
            );
        }
    }
    Ok(())
}

// ---- fit-scaling / compare-runs ----------------------------------------------

pub fn fit_scaling(args: FitScalingArgs, cfg: &ConfigFile) -> Result<()> {
    let metric: FitMetric = cfg
        .resolve(args.metric, "metric", "attr-acc".to_string())?
        .parse()?;
    let records = read_log_verified(&args.log)?;
    let points = scaling::points_from_records(&records, metric);
    let fit = scaling::fit_power_law(&points)?;

    let mut out = open_writer(&args.out)?;
    serde_json::to_writer_pretty(&mut out, &fit)?;
    out.write_all(b"\n")?;
    out.flush()?;
    drop(out);

    let mut manifest = ManifestBuilder::new("fit-scaling");
    manifest
        .set("metric", format!("{metric:?}"))
        .set("alpha-d", fit.alpha_d)
        .set("n-points", fit.n_points);
    manifest.input(&args.log)?;
    manifest.output(&args.out)?;
    manifest.write()?;
    println!(
        "alpha_D = {:.4}, D_c = {:?}, rmse(log) = {:.4e}",
        fit.alpha_d, fit.d_c, fit.rmse_log
    );
    Ok(())
}

pub fn compare_runs(args: CompareRunsArgs, cfg: &ConfigFile) -> Result<()> {
    let metric: FitMetric = cfg
        .resolve(args.metric, "metric", "attr-acc".to_string())?
        .parse()?;
    let ntp = read_log_verified(&args.ntp_log)?;
    let prior = read_log_verified(&args.prior_log)?;
    let holdout_d = match args.holdout_d {
        Some(d) => d,
        None => {
            let last_ntp = ntp
                .last()
                .ok_or_else(|| anyhow!("ntp log is empty"))?
                .tokens_seen;
            let last_prior = prior
                .last()
                .ok_or_else(|| anyhow!("prior log is empty"))?
                .tokens_seen;
            if last_ntp != last_prior {
                bail!(
                    "logs end at different token counts ({last_ntp} vs {last_prior}); \
                     pass --holdout-d explicitly"
                );
            }
            last_ntp as f64
        }
    };
    let report = scaling::compare_runs(&ntp, &prior, metric, holdout_d)?;

    let mut out = open_writer(&args.out)?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    out.write_all(b"\n")?;
    out.flush()?;
    drop(out);

    let mut manifest = ManifestBuilder::new("compare-runs");
    manifest
        .set("metric", format!("{metric:?}"))
        .set("holdout-d", holdout_d);
    manifest.input(&args.ntp_log)?;
    manifest.input(&args.prior_log)?;
    manifest.output(&args.out)?;
    manifest.write()?;
    println!(
        "ntp:   alpha_D {:.4}, rel err {:.4}\nprior: alpha_D {:.4}, rel err {:.4}",
        report.ntp.fit.alpha_d,
        report.ntp.relative_error,
        report.prior.fit.alpha_d,
        report.prior.relative_error
    );
    Ok(())
}
