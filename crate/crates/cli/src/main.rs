use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use captionedit::autodiff::{inject_backward_fault, OpKind};
use captionedit::checkpoint::Checkpoint;
use captionedit::config::{Preset, RunConfig};
use captionedit::data::{read_jsonl, write_jsonl, CorpusStats, Example};
use captionedit::eval::{edit_caption, evaluate, Editor};
use captionedit::gradsuite::{format_suite, run_suite};
use captionedit::train::{build_vocab, generate_splits, Trainer};

#[derive(Parser)]
#[command(name = "captionedit", version, about = "Train and run caption-editing models on a synthetic corpus")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// desk, full or overfit
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    data_dir: Option<String>,
    #[arg(long, global = true)]
    out_dir: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/dev/test corpora as JSONL
    Gen,
    /// Train EditNet and DCNet through the configured phases
    Train,
    /// Score a checkpoint and the identity baseline on a split
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Edit one caption and print the per-step alignment
    Edit {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        caption: String,
        #[arg(long, default_value_t = 0)]
        feature_seed: u64,
    },
    /// Compare analytic and numeric gradients at tiny dimensions
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Token and corruption histograms of a split
    Stats {
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn load_config(c: &Common) -> anyhow::Result<RunConfig> {
    let preset = c.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut cfg = match (&c.config, preset) {
        (Some(path), Some(p)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse_with_preset(&text, p)?
        }
        (Some(path), None) => RunConfig::load(path, Preset::Desk)?,
        (None, p) => RunConfig::preset(p.unwrap_or(Preset::Desk)),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(d) = &c.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split_path(cfg: &RunConfig, split: &str) -> PathBuf {
    Path::new(&cfg.data_dir).join(format!("{split}.jsonl"))
}

fn read_split(cfg: &RunConfig, split: &str) -> anyhow::Result<Vec<Example>> {
    let p = split_path(cfg, split);
    if !p.exists() {
        bail!("corpus {} not found (run `captionedit gen` first)", p.display());
    }
    Ok(read_jsonl(&p).with_context(|| format!("reading {}", p.display()))?)
}

fn checkpoint_path(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given
        .clone()
        .unwrap_or_else(|| Path::new(&cfg.out_dir).join("model.ckpt"))
}

fn load_checkpoint(cfg: &RunConfig, path: &Path, explicit_config: bool) -> anyhow::Result<Checkpoint> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if explicit_config {
        let want = cfg.model_config(ck.config.vocab_size);
        if want != ck.config {
            bail!(
                "configuration does not match checkpoint: config {:?} vs checkpoint {:?}",
                want,
                ck.config
            );
        }
    }
    Ok(ck)
}

fn cmd_gen(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.data_dir)?;
    for (split, ex) in ["train", "dev", "test"].into_iter().zip(generate_splits(cfg)) {
        let path = split_path(cfg, split);
        write_jsonl(&path, &ex)?;
        println!("wrote {} examples to {}", ex.len(), path.display());
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let train = read_split(cfg, "train")?;
    let dev = read_split(cfg, "dev").unwrap_or_default();
    let vocab = build_vocab(&train, cfg.min_count);
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.txt"), cfg.to_string())?;
    let model_cfg = cfg.model_config(vocab.len());
    println!(
        "vocab {} tokens, {} parameters, {} train / {} dev examples",
        vocab.len(),
        model_cfg.param_count(),
        train.len(),
        dev.len()
    );
    println!("epoch iter loss lr ss_prob");
    let mut trainer = Trainer::new(cfg.clone(), vocab, train, dev)?;
    let mut stdout = std::io::stdout().lock();
    trainer.run(Some(&out), &mut stdout)?;
    stdout.flush()?;
    if !trainer.dev.is_empty() {
        let report = trainer.evaluate(&trainer.dev)?;
        print!("{}", report.tsv());
        std::fs::write(out.join("dev_metrics.json"), serde_json::to_string_pretty(&report)?)?;
    }
    println!("checkpoint {}", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, ck_path: &Path, split: &str, explicit: bool) -> anyhow::Result<()> {
    let ck = load_checkpoint(cfg, ck_path, explicit)?;
    let (editnet, dcnet) = ck.models()?;
    let examples = read_split(cfg, split)?;
    let params = captionedit::data::CorpusParams {
        k: ck.config.k,
        d_v: ck.config.d_v,
        ..cfg.corpus_params()
    };
    let (report, hyps) = evaluate(&Editor::new(&editnet, &dcnet), &examples, &ck.vocab, &params, cfg.max_decode_len)?;
    print!("{}", report.tsv());
    let dir = ck_path.parent().unwrap_or(Path::new("."));
    let json = dir.join(format!("eval_{split}.json"));
    std::fs::write(&json, serde_json::to_string_pretty(&report)?)?;
    let outputs: String = hyps.iter().map(|h| h.join(" ") + "\n").collect();
    std::fs::write(dir.join(format!("eval_{split}.txt")), outputs)?;
    println!("report {}", json.display());
    Ok(())
}

fn cmd_edit(cfg: &RunConfig, ck_path: &Path, caption: &str, feature_seed: u64, explicit: bool) -> anyhow::Result<()> {
    let ck = load_checkpoint(cfg, ck_path, explicit)?;
    let (editnet, dcnet) = ck.models()?;
    let params = captionedit::data::CorpusParams {
        k: ck.config.k,
        d_v: ck.config.d_v,
        ..cfg.corpus_params()
    };
    let r = edit_caption(&Editor::new(&editnet, &dcnet), &ck.vocab, caption, feature_seed, &params, cfg.max_decode_len)?;
    if r.unknown == r.input.len() {
        eprintln!("warning: no word of the caption is in the vocabulary");
    } else if r.unknown > 0 {
        eprintln!("warning: {} unknown word(s)", r.unknown);
    }
    println!("input\t{}", r.input.join(" "));
    println!("edited\t{}", r.output.join(" "));
    println!("mean_copy_gate\t{:.4}", r.decoded.mean_copy_gate());
    println!("step\temitted\targmax_input\talpha_max\tcopy_gate");
    for a in &r.decoded.alignment {
        println!("{}", a.line(&ck.vocab));
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, fault: Option<&str>) -> anyhow::Result<bool> {
    if let Some(name) = fault {
        let kind = OpKind::from_name(name).with_context(|| format!("unknown op {name:?}"))?;
        inject_backward_fault(Some(kind));
    }
    let start = std::time::Instant::now();
    let entries = run_suite(cfg.seed)?;
    print!("{}", format_suite(&entries));
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(entries.iter().all(|e| e.passed()))
}

fn cmd_stats(cfg: &RunConfig, split: &str) -> anyhow::Result<()> {
    let ex = read_split(cfg, split)?;
    print!("{}", CorpusStats::from_examples(&ex));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let cfg = load_config(&cli.common)?;
    let explicit = cli.common.config.is_some();
    match &cli.command {
        Command::Gen => cmd_gen(&cfg)?,
        Command::Train => cmd_train(&cfg)?,
        Command::Eval { checkpoint, split } => cmd_eval(&cfg, &checkpoint_path(&cfg, checkpoint), split, explicit)?,
        Command::Edit {
            checkpoint,
            caption,
            feature_seed,
        } => cmd_edit(&cfg, &checkpoint_path(&cfg, checkpoint), caption, *feature_seed, explicit)?,
        Command::Gradcheck { inject_fault } => return cmd_gradcheck(&cfg, inject_fault.as_deref()),
        Command::Stats { split } => cmd_stats(&cfg, split)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
