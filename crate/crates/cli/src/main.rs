use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccx::autodiff::Fault;
use ccx::data::{generate_dataset, GeneratorOptions, Split};
use ccx::gradcheck::{self, Module};
use ccx::metrics::{evaluate, EvalCorpus, MetricReport};
use ccx::train::{evaluate_checkpoint, load_checkpoint, run_pipeline, Config, PipelinePlan, RunOptions};
use ccx::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(name = "ccx", version, about = "Bi-temporal change captioning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic before/after dataset with a manifest.
    GenData(GenDataArgs),
    /// Run training stages and write checkpoints.
    Train(TrainArgs),
    /// Caption one pair with a trained checkpoint.
    Caption(CaptionArgs),
    /// Score captions with BLEU, METEOR, ROUGE-L and CIDEr-D.
    EvalMetrics(EvalArgs),
    /// Compare backward passes with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print or write a configuration preset.
    ConfigInit(ConfigInitArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Repeat one canonical caption instead of five paraphrases.
    #[arg(long)]
    single_caption: bool,
    /// Put every pair in the train split.
    #[arg(long)]
    all_train: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// `all`, a single stage `1`..`3`, or a range such as `2-3`.
    #[arg(long, default_value = "all")]
    stage: String,
    /// Continue from the checkpoint of the stage before the first one run.
    #[arg(long)]
    resume: bool,
    /// Checkpoint directory to resume from, overriding the default.
    #[arg(long, requires = "resume")]
    from: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    pair: String,
    /// Defaults to the manifest named in the checkpoint's config.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// JSONL lines of `{"id", "hyp"}`.
    #[arg(long, requires = "reference", conflicts_with_all = ["corpus", "checkpoint"])]
    hyp: Option<PathBuf>,
    /// JSONL lines of `{"id", "refs"}`.
    #[arg(long = "ref", requires = "hyp")]
    reference: Option<PathBuf>,
    /// JSONL lines of `{"id", "hyp", "refs"}`.
    #[arg(long, conflicts_with = "checkpoint")]
    corpus: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// With --checkpoint, also write the generated captions as hypothesis JSONL.
    #[arg(long, requires = "checkpoint")]
    hyp_out: Option<PathBuf>,
    /// Where to write the report as JSON.
    #[arg(long, default_value = "metrics.json")]
    json: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale the GELU backward pass (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<f64>,
}

#[derive(Args)]
struct ConfigInitArgs {
    #[arg(long, default_value = "toy")]
    profile: String,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
            Error::NumericAbort { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Caption(a) => caption(a),
        Command::EvalMetrics(a) => eval_metrics(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::ConfigInit(a) => config_init(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    if a.pairs == 0 {
        return Err(Failure::usage("--pairs must be at least 1"));
    }
    let options = GeneratorOptions {
        pairs: a.pairs,
        seed: a.seed,
        image_size: a.image_size,
        paraphrases: !a.single_caption,
        all_train: a.all_train,
        ..GeneratorOptions::default()
    };
    let summary = generate_dataset(&options, &a.out)?;
    println!("manifest={}", summary.manifest.display());
    let splits: Vec<String> = summary.per_split.iter().map(|(s, n)| format!("{s}={n}")).collect();
    println!("records={} {}", summary.records, splits.join(" "));
    let kinds: Vec<String> = summary.per_kind.iter().map(|(k, n)| format!("{k}={n}")).collect();
    println!("changes {}", kinds.join(" "));
    println!("checksum={}", summary.checksum);
    Ok(())
}

fn parse_stages(s: &str) -> Result<Vec<u8>, Failure> {
    let bad = || Failure::usage(format!("--stage expects all, 1, 2, 3 or a range like 2-3, got '{s}'"));
    let stage = |x: &str| x.parse::<u8>().ok().filter(|n| (1..=3).contains(n)).ok_or_else(bad);
    if s == "all" {
        return Ok(vec![1, 2, 3]);
    }
    match s.split_once('-') {
        Some((lo, hi)) => {
            let (lo, hi) = (stage(lo)?, stage(hi)?);
            if lo > hi {
                return Err(bad());
            }
            Ok((lo..=hi).collect())
        }
        None => Ok(vec![stage(s)?]),
    }
}

fn train(a: TrainArgs) -> CmdResult {
    let config = Config::load(&a.config).map_err(|e| Failure::usage(e.to_string()))?;
    let stages = parse_stages(&a.stage)?;
    let resume = if a.resume {
        let first = stages[0];
        if first == 1 && a.from.is_none() {
            return Err(Failure::usage("--resume needs a stage after 1 or an explicit --from"));
        }
        Some(a.from.clone().unwrap_or_else(|| a.out.join(format!("stage{}", first - 1))))
    } else {
        None
    };
    let plan = PipelinePlan {
        stages,
        resume,
        out_dir: a.out.clone(),
    };
    let mut on_epoch = |r: &ccx::train::EpochReport| {
        println!("stage={} epoch={} loss={:.6}", r.stage, r.epoch, r.mean_loss);
    };
    let outcome = run_pipeline(&config, &plan, &RunOptions::from_env(), &mut on_epoch)?;
    if let Some(dir) = outcome.final_checkpoint() {
        println!("checkpoint={}", dir.display());
    }
    Ok(())
}

fn caption(a: CaptionArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let manifest = a.manifest.unwrap_or_else(|| ck.config.data.manifest.clone());
    let dataset = ccx::data::Dataset::load(&manifest, None)?;
    let i = dataset
        .index_of(&a.pair)
        .ok_or_else(|| Failure::usage(format!("pair '{}' not found in {}", a.pair, manifest.display())))?;
    let (img1, img2) = &dataset.images[i];
    let generated = ck.model.caption(img1, img2)?;
    println!("{}", generated.text);
    Ok(())
}

fn write_report(report: &MetricReport, path: &Path) -> CmdResult {
    print!("{}", report.to_text());
    std::fs::write(path, report.to_json() + "\n").map_err(|e| Error::io(path, e))?;
    println!("report={}", path.display());
    Ok(())
}

fn eval_metrics(a: EvalArgs) -> CmdResult {
    let report = match (&a.hyp, &a.reference, &a.corpus, &a.checkpoint, &a.manifest) {
        (Some(h), Some(r), None, None, None) => evaluate(&EvalCorpus::join_files(h, r)?)?,
        (None, None, Some(c), None, None) => evaluate(&EvalCorpus::load_jsonl(c)?)?,
        (None, None, None, Some(ck), Some(m)) => {
            let split: Split = a.split.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
            let ev = evaluate_checkpoint(ck, m, split)?;
            println!("exact_match={:.4} truncated={}", ev.exact_match, ev.truncated);
            if let Some(path) = &a.hyp_out {
                let lines: String = ev
                    .captions
                    .iter()
                    .map(|(id, hyp)| serde_json::json!({ "hyp": hyp, "id": id }).to_string() + "\n")
                    .collect();
                std::fs::write(path, lines).map_err(|e| Error::io(path, e))?;
            }
            ev.report
        }
        _ => return Err(Failure::usage("give --hyp with --ref, --corpus, or --checkpoint with --manifest")),
    };
    write_report(&report, &a.json)
}

fn run_gradcheck(a: GradcheckArgs) -> CmdResult {
    let module: Module = a.module.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
    let fault = a.inject_fault.map(Fault::GeluBackwardScale);
    let threads = RunOptions::from_env().threads;
    let report = gradcheck::check_model(module, a.seed, fault, threads)?;
    for (group, err) in report.group_max() {
        println!("{:<10} max_rel={err:.3e}", group.as_str());
    }
    let worst = report.worst().expect("at least one parameter");
    println!("worst {} max_rel={:.3e}", worst.name, worst.max_rel);
    if report.passed(gradcheck::TOLERANCE) {
        println!("gradcheck passed (tolerance {:.0e})", gradcheck::TOLERANCE);
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            msg: format!(
                "gradcheck failed: {} has relative error {:.3e} at index {} (tolerance {:.0e})",
                worst.name,
                worst.max_rel,
                worst.worst_index,
                gradcheck::TOLERANCE
            ),
        })
    }
}

fn config_init(a: ConfigInitArgs) -> CmdResult {
    let mut config = Config::profile(&a.profile).map_err(|e| Failure::usage(e.to_string()))?;
    if let Some(m) = a.manifest {
        config.data.manifest = m;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let text = config.to_toml();
    match a.out {
        Some(path) => {
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            println!("config={}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
