use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dhs_convqa::corpus::{default_mix, generate_synthetic, load_quac, to_quac_json, write_quac, Conversation, DialogFeature, FeatureMix};
use dhs_convqa::harness::{
    config_hash, degrade_experiment, evaluate_corpus, inject_negatives, parse_variants, run_ablation, split_corpus,
    train_models, write_records, Models, PipelineConfig, RunOptions, Variant,
};

#[derive(Parser)]
#[command(name = "dhs", about = "History selection for conversational QA")]
struct Cli {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON pipeline config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "reports")]
    report_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus in QuAC format.
    Generate {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// e.g. drill_down=0.4,topic_shift=0.3
        #[arg(long)]
        mix: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a corpus; injected negatives in it are used.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value = "full")]
        variant: Variant,
    },
    /// Train on a seeded split and compare variants on the held-out part.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,no_prune,no_rerank,no_termclass,pipeline_qr")]
        variants: Vec<String>,
        #[arg(long, default_value_t = 0.2)]
        eval_fraction: f64,
    },
    /// Add k same-topic negatives from the pool to every question.
    Inject {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Degrade {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "100,70,50")]
        target: Vec<f64>,
    },
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        models: PathBuf,
        /// Corpus whose passages are offered by GET /passages.
        #[arg(long)]
        corpus: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => {
            let s = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&s).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_mix(s: &str) -> Result<FeatureMix> {
    let mut mix = FeatureMix::new();
    for part in s.split(',').filter(|p| !p.is_empty()) {
        let (name, w) = part.split_once('=').with_context(|| format!("mix entry {part:?} is not name=weight"))?;
        let f: DialogFeature = serde_json::from_value(serde_json::Value::String(name.trim().into()))
            .with_context(|| format!("unknown dialog feature {name:?}"))?;
        mix.insert(f, w.trim().parse().with_context(|| format!("bad weight in {part:?}"))?);
    }
    Ok(mix)
}

fn load_models(path: &Path) -> Result<Models> {
    let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Models::from_json(&s)?)
}

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{body}");
            Ok(())
        }
    }
}

fn report_file(root: &Path, cfg: &PipelineConfig, name: &str, body: &str) -> Result<PathBuf> {
    let dir = root.join(config_hash(cfg));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(name);
    std::fs::write(&path, body)?;
    Ok(path)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.cmd {
        Cmd::Generate { n, mix, out } => {
            let mix = match mix {
                Some(m) => parse_mix(&m)?,
                None => default_mix(),
            };
            let corpus = generate_synthetic(cfg.seed, n, &mix)?;
            match out {
                Some(p) => write_quac(&p, &corpus)?,
                None => println!("{}", to_quac_json(&corpus)),
            }
        }
        Cmd::Train { corpus, out } => {
            let corpus = load_quac(&corpus)?;
            let (models, summary) = train_models(&corpus, &cfg)?;
            std::fs::write(&out, models.to_json()).with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "trained on {} attention and {} term examples ({} unresolvable turns)",
                summary.n_attention_examples, summary.n_term_examples, summary.unresolvable_turns
            );
        }
        Cmd::Eval { corpus, models, variant } => {
            let corpus = load_quac(&corpus)?;
            let models = load_models(&models)?;
            let cfg = cfg.with_variant(variant);
            let with_injected = |c: &Conversation| vec![RunOptions { use_injected: true, ..RunOptions::default() }; c.turns.len()];
            let run = evaluate_corpus(&corpus, &models, &cfg, with_injected)?;
            let body = serde_json::to_string_pretty(&run)?;
            let path = report_file(&cli.report_dir, &cfg, &format!("eval_{variant}.json"), &body)?;
            println!("{}", run.report.to_json());
            eprintln!("wrote {}", path.display());
        }
        Cmd::Ablate { corpus, variants, eval_fraction } => {
            let corpus = load_quac(&corpus)?;
            let variants = parse_variants(&variants)?;
            let (train, eval) = split_corpus(&corpus, cfg.seed, eval_fraction)?;
            if train.is_empty() || eval.is_empty() {
                bail!("split of {} conversations left an empty side", corpus.len());
            }
            let out = run_ablation(&train, &eval, &variants, &cfg)?;
            let dir = write_records(&cli.report_dir, &cfg, &out.records)?;
            println!("{}", out.table);
            eprintln!("wrote {}", dir.display());
        }
        Cmd::Inject { corpus, k, pool, out } => {
            let corpus = load_quac(&corpus)?;
            let pool = load_quac(&pool)?;
            let injected = inject_negatives(&corpus, k, &pool, cfg.seed)?;
            emit(out.as_deref(), &to_quac_json(&injected))?;
        }
        Cmd::Degrade { corpus, models, target } => {
            let corpus = load_quac(&corpus)?;
            let models = load_models(&models)?;
            let points = degrade_experiment(&corpus, &models, &cfg, &target, cfg.seed)?;
            let body = serde_json::to_string_pretty(&points)?;
            let path = report_file(&cli.report_dir, &cfg, "degrade.json", &body)?;
            println!("{body}");
            eprintln!("wrote {}", path.display());
        }
        Cmd::Serve { host, port, models, corpus } => {
            let models = load_models(&models)?;
            let corpus = load_quac(&corpus)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(dhs_cli::serve_api(&host, port, models, cfg, &corpus))?;
        }
    }
    Ok(())
}
