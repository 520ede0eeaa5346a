//! `tinykd` command-line driver.

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tinykd::corpus::{generate_corpus, write_sequences, Corpus, CorpusSplits, Split};
use tinykd::decode::generate_batch;
use tinykd::divergence::LossVariant;
use tinykd::eval::{
    evaluation_conditions, feature_stats, frechet_distance, run_ablation, write_ablation_csv, AblationConfig,
    AblationSettings, EvalReport,
};
use tinykd::model::{Component, ModelWeights};
use tinykd::quant::{apply_plan, read_checkpoint, size_report, write_checkpoint, Checkpoint, Precision, QuantPlan};
use tinykd::train::{
    compare_losses, distill_observed, mean_cross_entropy, stage_mixed_at_most_forward, train_teacher, LossCurve,
};

use config::RunConfig;

const EMA_WINDOW: usize = 50;

#[derive(Parser)]
#[command(name = "tinykd", version, about = "Stage-mixed distillation and quantization of small conditioned token models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory of the run directory.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
    /// Overrides `corpus.items`.
    #[arg(long)]
    items: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/validation/test corpus files.
    Corpus(Common),
    /// Pretrain the teacher with next-token cross-entropy.
    TrainTeacher(Common),
    /// Distill a student from the teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Overrides `distill.variant`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Quantize the checkpoint at `paths.student`.
    Quantize {
        #[command(flatten)]
        common: Common,
        /// Overrides `quant.plan`.
        #[arg(long, value_parser = ["paper", "fp16", "int8", "fp32"])]
        plan: Option<String>,
    },
    /// Sample sequences from the checkpoint at `paths.student`.
    Generate(Common),
    /// Score the checkpoint at `paths.student` against the test split.
    Eval(Common),
    /// Distill once per loss variant with identical data and seeds.
    CompareLosses {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of variants (default: all six).
        #[arg(long, value_delimiter = ',')]
        variant: Vec<String>,
    },
    /// Baseline, KD, quantization and KD plus quantization.
    Ablation {
        #[command(flatten)]
        common: Common,
        /// Overrides `quant.plan`.
        #[arg(long, value_parser = ["paper", "fp16", "int8", "fp32"])]
        plan: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Corpus(_) => "corpus",
            Command::TrainTeacher(_) => "train-teacher",
            Command::Distill { .. } => "distill",
            Command::Quantize { .. } => "quantize",
            Command::Generate(_) => "generate",
            Command::Eval(_) => "eval",
            Command::CompareLosses { .. } => "compare-losses",
            Command::Ablation { .. } => "ablation",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Corpus(c) | Command::TrainTeacher(c) | Command::Generate(c) | Command::Eval(c) => c,
            Command::Distill { common, .. }
            | Command::Quantize { common, .. }
            | Command::CompareLosses { common, .. }
            | Command::Ablation { common, .. } => common,
        }
    }
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

/// Timestamped progress log, mirrored to standard error.
struct RunLog(File);

impl RunLog {
    fn line(&mut self, msg: impl AsRef<str>) {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let msg = msg.as_ref();
        let _ = writeln!(self.0, "[{}.{:03}] {msg}", now.as_secs(), now.subsec_millis());
        eprintln!("{msg}");
    }
}

/// Loads the config and applies command-line overrides.
fn resolve(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(items) = common.items {
        cfg.set("corpus.items", &items.to_string())?;
    }
    match cmd {
        Command::Distill { variant: Some(v), .. } => cfg.set("distill.variant", v)?,
        Command::Quantize { plan: Some(p), .. } | Command::Ablation { plan: Some(p), .. } => cfg.set("quant.plan", p)?,
        _ => {}
    }
    match cmd {
        Command::Quantize { .. } | Command::Generate(_) | Command::Eval(_) if cfg.student_path.is_none() => {
            bail!("`paths.student`: {} needs a checkpoint path", cmd.name())
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn compare_variants(names: &[String]) -> Result<Vec<LossVariant>> {
    if names.is_empty() {
        return Ok(LossVariant::ALL.to_vec());
    }
    let variants = names
        .iter()
        .map(|n| n.parse::<LossVariant>().map_err(|e| anyhow!("--variant: {e}")))
        .collect::<Result<Vec<_>>>()?;
    if variants.len() < 2 {
        bail!("--variant: compare-losses needs at least two variants");
    }
    Ok(variants)
}

fn thread_cap() -> Result<()> {
    let Ok(v) = std::env::var("TINYKD_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).with_context(|| format!("TINYKD_THREADS=`{v}` is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_corpus(cfg: &RunConfig, log: &mut RunLog) -> Result<CorpusSplits> {
    let Some(dir) = &cfg.corpus_path else {
        log.line(format!("generating corpus: {} items of length {}", cfg.corpus_items, cfg.corpus_length));
        return Ok(generate_corpus(cfg.seed, cfg.corpus_items, cfg.corpus_length, cfg.corpus_fractions)?);
    };
    let read = |split: Split| -> Result<Corpus> {
        let path = dir.join(format!("{}.txt", split.name()));
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        Corpus::read_from(BufReader::new(file), split).with_context(|| format!("reading {}", path.display()))
    };
    log.line(format!("reading corpus from {}", dir.display()));
    Ok(CorpusSplits { train: read(Split::Train)?, validation: read(Split::Validation)?, test: read(Split::Test)? })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_checkpoint(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// Stores weights at binary32, which is lossless for trained weights.
fn save_weights(w: &ModelWeights, path: &Path) -> Result<()> {
    let (ck, _) = apply_plan(w, &QuantPlan::uniform(Precision::Fp32))?;
    let mut out = create(path)?;
    write_checkpoint(&mut out, &ck)?;
    out.flush()?;
    Ok(())
}

fn write_curve(curve: &LossCurve, dir: &Path, prefix: &str) -> Result<()> {
    let mut train = create(&dir.join(format!("{prefix}train_loss.csv")))?;
    curve.write_train_csv(&mut train)?;
    train.flush()?;
    let mut val = create(&dir.join(format!("{prefix}val_loss.csv")))?;
    curve.write_val_csv(&mut val)?;
    val.flush()?;
    Ok(())
}

/// Loads `paths.teacher` or pretrains a teacher into the run directory.
fn teacher(cfg: &RunConfig, corpus: &CorpusSplits, dir: &Path, log: &mut RunLog) -> Result<ModelWeights> {
    if let Some(path) = &cfg.teacher_path {
        log.line(format!("loading teacher from {}", path.display()));
        return Ok(load_checkpoint(path)?.to_weights()?);
    }
    let spec = cfg.teacher.spec()?;
    log.line(format!("pretraining teacher ({} parameters)", spec.param_count()));
    let (w, curve) = train_teacher(&spec, corpus, &cfg.teacher_train_config()?)?;
    log.line(format!("teacher final validation loss {:.4}", curve.final_val().unwrap_or(f64::NAN)));
    save_weights(&w, &dir.join("teacher.tkdc"))?;
    write_curve(&curve, dir, "teacher_")?;
    Ok(w)
}

fn write_curves_csv(curves: &[LossCurve], dir: &Path) -> Result<()> {
    let mut train = create(&dir.join("curves.csv"))?;
    writeln!(train, "step,loss,smoothed_loss,variant")?;
    for c in curves {
        for (i, (v, s)) in c.train.iter().zip(c.smoothed(EMA_WINDOW)).enumerate() {
            writeln!(train, "{i},{v},{s},{}", c.variant)?;
        }
    }
    train.flush()?;
    let mut val = create(&dir.join("val_curves.csv"))?;
    writeln!(val, "epoch,val_loss,variant")?;
    for c in curves {
        for (i, v) in c.val.iter().enumerate() {
            writeln!(val, "{},{v},{}", i + 1, c.variant)?;
        }
    }
    val.flush()?;
    Ok(())
}

fn execute(cmd: &Command, cfg: &RunConfig, dir: &Path, log: &mut RunLog) -> Result<()> {
    match cmd {
        Command::Corpus(_) => {
            let corpus = load_corpus(cfg, log)?;
            for split in Split::ALL {
                let mut out = create(&dir.join(format!("{}.txt", split.name())))?;
                corpus.get(split).write_to(&mut out)?;
                out.flush()?;
                log.line(format!("{}: {} sequences", split.name(), corpus.get(split).items.len()));
            }
        }
        Command::TrainTeacher(_) => {
            let corpus = load_corpus(cfg, log)?;
            let spec = cfg.teacher.spec()?;
            log.line(format!("pretraining teacher ({} parameters)", spec.param_count()));
            let (w, curve) = train_teacher(&spec, &corpus, &cfg.teacher_train_config()?)?;
            save_weights(&w, &dir.join("teacher.tkdc"))?;
            write_curve(&curve, dir, "")?;
            log.line(format!("final validation loss {:.4}", curve.final_val().unwrap_or(f64::NAN)));
        }
        Command::Distill { .. } => {
            let corpus = load_corpus(cfg, log)?;
            let t = teacher(cfg, &corpus, dir, log)?;
            let train_cfg = cfg.student_train_config()?;
            let total = train_cfg.total_steps(corpus.train.items.len());
            log.line(format!("distilling with {} for {total} steps", cfg.variant));
            let every = (total / 10).max(1);
            let (w, curve) = distill_observed(&t, &cfg.student.spec()?, &corpus, &train_cfg, &mut |r| {
                if r.step % every == 0 || r.step + 1 == total {
                    log.line(format!("step {}/{total} loss {:.4}", r.step + 1, r.loss));
                }
            })?;
            save_weights(&w, &dir.join("student.tkdc"))?;
            write_curve(&curve, dir, "")?;
            log.line(format!("final validation loss {:.4}", curve.final_val().unwrap_or(f64::NAN)));
        }
        Command::Quantize { .. } => {
            let path = cfg.student_path.as_ref().expect("checked during resolution");
            let w = load_checkpoint(path)?.to_weights()?;
            let (ck, _) = apply_plan(&w, &cfg.quant_plan()?)?;
            let out_path = dir.join("quantized.tkdc");
            let mut out = create(&out_path)?;
            write_checkpoint(&mut out, &ck)?;
            out.flush()?;
            let report = size_report(&ck);
            let mut csv = create(&dir.join("size_report.csv"))?;
            writeln!(csv, "component,bytes")?;
            for c in Component::ALL {
                writeln!(csv, "{c},{}", report.by_component[&c])?;
            }
            writeln!(csv, "total,{}", report.total_bytes)?;
            writeln!(csv, "fp32,{}", report.fp32_bytes)?;
            writeln!(csv, "file,{}", report.file_bytes)?;
            writeln!(csv, "ratio,{}", report.compression_ratio)?;
            csv.flush()?;
            log.line(format!(
                "{} plan: {} bytes on disk, ratio {:.4} against binary32",
                cfg.plan, report.file_bytes, report.compression_ratio
            ));
        }
        Command::Generate(_) => {
            let path = cfg.student_path.as_ref().expect("checked during resolution");
            let w = load_checkpoint(path)?.to_weights()?;
            let conditions = evaluation_conditions(cfg.n_sequences);
            let seqs = generate_batch(&w, &conditions, &cfg.sample_config()?)?;
            let mut out = create(&dir.join("samples.txt"))?;
            write_sequences(&mut out, cfg.seed, &seqs)?;
            out.flush()?;
            log.line(format!("generated {} sequences", seqs.len()));
        }
        Command::Eval(_) => {
            let path = cfg.student_path.as_ref().expect("checked during resolution");
            let ck = load_checkpoint(path)?;
            let w = ck.to_weights()?;
            let corpus = load_corpus(cfg, log)?;
            let sizes = size_report(&ck);
            let conditions = evaluation_conditions(cfg.n_sequences);
            let seqs: Vec<_> = generate_batch(&w, &conditions, &cfg.sample_config()?)?
                .into_iter()
                .filter(|s| !s.tokens.is_empty())
                .collect();
            let frechet = frechet_distance(&feature_stats(&seqs)?, &feature_stats(&corpus.test.items)?)?;
            let consistency =
                seqs.iter().map(tinykd::corpus::condition_consistency).sum::<f64>() / seqs.len() as f64;
            let report = EvalReport {
                config: "checkpoint".into(),
                frechet,
                consistency,
                bytes_by_component: sizes.by_component,
                total_bytes: sizes.file_bytes,
                compression_ratio: sizes.compression_ratio,
                final_val_loss: mean_cross_entropy(&w, &corpus.validation.items)?,
                conditions,
            };
            let mut out = create(&dir.join("eval.csv"))?;
            write_ablation_csv(&mut out, std::slice::from_ref(&report))?;
            out.flush()?;
            log.line(format!("frechet {:.4} consistency {:.4}", report.frechet, report.consistency));
        }
        Command::CompareLosses { variant, .. } => {
            let variants = compare_variants(variant)?;
            let corpus = load_corpus(cfg, log)?;
            let t = teacher(cfg, &corpus, dir, log)?;
            log.line(format!("comparing {} variants", variants.len()));
            let curves = compare_losses(&t, &cfg.student.spec()?, &corpus, &cfg.student_train_config()?, &variants)?;
            write_curves_csv(&curves, dir)?;
            let mut summary = create(&dir.join("summary.csv"))?;
            writeln!(summary, "variant,smoothed_first,smoothed_last,final_val_loss")?;
            for c in &curves {
                let s = c.smoothed(EMA_WINDOW);
                let fv = c.final_val().unwrap_or(f64::NAN);
                writeln!(summary, "{},{},{},{fv}", c.variant, s[0], s[s.len() - 1])?;
                log.line(format!("{}: final validation loss {fv:.4}", c.variant));
            }
            summary.flush()?;
            match stage_mixed_at_most_forward(&curves) {
                Some(flag) => log.line(format!("stage-mixed-skewed final validation loss <= forward-kl: {flag}")),
                None => log.line("stage-mixed-skewed vs forward-kl flag not computed (variant missing)"),
            }
        }
        Command::Ablation { .. } => {
            let corpus = load_corpus(cfg, log)?;
            let t = teacher(cfg, &corpus, dir, log)?;
            let settings = AblationSettings {
                train: cfg.student_train_config()?,
                sample: cfg.sample_config()?,
                n_sequences: cfg.n_sequences,
            };
            log.line("running ablation: baseline, kd, quant, kd+quant");
            let reports =
                run_ablation(&corpus, &t, &cfg.student.spec()?, &AblationConfig::standard(cfg.quant_plan()?), &settings)?;
            let mut out = create(&dir.join("ablation.csv"))?;
            write_ablation_csv(&mut out, &reports)?;
            out.flush()?;
            for r in &reports {
                log.line(format!(
                    "{}: frechet {:.4} consistency {:.4} bytes {} ratio {:.4}",
                    r.config, r.frechet, r.consistency, r.total_bytes, r.compression_ratio
                ));
            }
        }
    }
    Ok(())
}

fn run(cmd: &Command) -> std::result::Result<PathBuf, Failure> {
    let cfg = resolve(cmd).map_err(Failure::Usage)?;
    if let Command::CompareLosses { variant, .. } = cmd {
        compare_variants(variant).map_err(Failure::Usage)?;
    }
    thread_cap().map_err(Failure::Usage)?;
    let dir = cmd.common().out.join(format!("{}-{}-seed{}", cmd.name(), cfg.hash8(), cfg.seed));
    let setup = || -> Result<RunLog> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.resolved"), cfg.render())?;
        Ok(RunLog(File::create(dir.join("run.log"))?))
    };
    let mut log = setup().map_err(Failure::Runtime)?;
    log.line(format!("{} -> {}", cmd.name(), dir.display()));
    match execute(cmd, &cfg, &dir, &mut log) {
        Ok(()) => {
            log.line("done");
            Ok(dir)
        }
        Err(e) => {
            log.line(format!("error: {e:#}"));
            Err(Failure::Runtime(e))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("run `tinykd {} --help` for usage", cli.command.name());
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
