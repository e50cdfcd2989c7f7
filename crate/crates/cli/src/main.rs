use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use seqattn_core::checkpoint::Checkpoint;
use seqattn_core::config::TrainConfig;
use seqattn_core::metrics::evaluate;
use seqattn_core::proxy::{ProxyNet, ProxyTrainConfig};
use seqattn_core::study::{Study, StudyConfig};
use seqattn_core::synth::{
    corpus, generate_dataset, read_manifest, write_manifest, SequenceConfig,
};
use seqattn_core::{Trainer, Vocabulary};
use seqattn_service::api::serve;
use seqattn_service::repl::{run, ReplOptions};
use seqattn_service::{AppState, Engine, SessionStore};

#[derive(Parser)]
#[command(
    name = "seqattn",
    version,
    about = "Multi-turn language-guided image editing"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic edit-sequence dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        t_min: usize,
        #[arg(long, default_value_t = 5)]
        t_max: usize,
    },
    /// Pretrain the matching encoders, then train the editor.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// key=value file; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        no_attn: bool,
        #[arg(long)]
        no_damsm: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV loss log; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the attribute classifier used for IS and FID.
    TrainProxy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ProxyTrainConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint on a held-out dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        proxy: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        splits: usize,
    },
    /// Train the full model and both ablations on one synthetic dataset and
    /// score them on a held-out set. Weights are cached under --cache.
    Study {
        #[arg(long, default_value = "study-cache")]
        cache: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Serve the HTTP editing API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = seqattn_service::session::DEFAULT_MAX_TURNS)]
        max_turns: usize,
        /// Persist sessions as JSON files here so they survive restarts.
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long, default_value_t = seqattn_service::store::DEFAULT_TTL_SECS)]
        ttl_secs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Edit interactively in the terminal.
    Chat {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "chat-out")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = seqattn_service::session::DEFAULT_MAX_TURNS)]
        max_turns: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_data(dir: &Path) -> Result<Vec<seqattn_core::EditSequence>> {
    let data = read_manifest(dir).with_context(|| format!("reading {}", dir.display()))?;
    if data.is_empty() {
        bail!("{} has no sequences", dir.display());
    }
    Ok(data)
}

fn train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    no_attn: bool,
    no_damsm: bool,
    seed: Option<u64>,
    log: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.model.use_attention &= !no_attn;
    cfg.use_damsm &= !no_damsm;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = load_data(data)?;
    let vocab = Vocabulary::build(&corpus(&data), 1);
    eprintln!("{} sequences, vocabulary of {}", data.len(), vocab.len());
    let mut trainer = Trainer::new(cfg, vocab)?;
    let log_path = log.unwrap_or_else(|| out.with_extension("csv"));
    let mut log =
        BufWriter::new(File::create(&log_path).with_context(|| log_path.display().to_string())?);
    let reports = trainer.fit(
        &data,
        |e| {
            eprintln!(
                "matching epoch {}: loss {:.4} accuracy {:.3}",
                e.epoch, e.loss, e.accuracy
            )
        },
        Some(&mut log),
    )?;
    log.flush()?;
    if let Some(r) = reports.last() {
        eprintln!("step {}: L_D {:.4} L_G {:.4}", r.step, r.l_d, r.l_g);
    }
    trainer.save(out)?;
    eprintln!("saved {} (log {})", out.display(), log_path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::GenData {
            out,
            count,
            seed,
            t_min,
            t_max,
        } => {
            let cfg = SequenceConfig {
                t_min,
                t_max,
                ..SequenceConfig::default()
            };
            if t_min == 0 || t_min > t_max {
                bail!("need 1 <= t-min <= t-max");
            }
            let data = generate_dataset(count, seed, &cfg);
            write_manifest(&data, &out)?;
            eprintln!("wrote {count} sequences to {}", out.display());
        }
        Cmd::Train {
            data,
            out,
            config,
            no_attn,
            no_damsm,
            seed,
            log,
        } => train(&data, &out, config.as_deref(), no_attn, no_damsm, seed, log)?,
        Cmd::TrainProxy { out, steps, seed } => {
            let mut net = ProxyNet::new(seed)?;
            let loss = net.train(&ProxyTrainConfig {
                steps,
                seed,
                ..ProxyTrainConfig::default()
            })?;
            net.save(&out)?;
            eprintln!("final loss {loss:.4}; saved {}", out.display());
        }
        Cmd::Eval {
            ckpt,
            data,
            proxy,
            out,
            seed,
            splits,
        } => {
            let trainer = Trainer::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let proxy = ProxyNet::load(&proxy)?;
            let data = load_data(&data)?;
            let report = evaluate(&trainer.model, &trainer.vocab, &data, &proxy, seed, splits)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!(
                "IS {:.3}  FID {:.3}  SSIM {:.4} (copy-previous {:.4})",
                report.is_mean, report.fid, report.ssim_mean, report.baseline_ssim_mean
            );
        }
        Cmd::Study { cache, out, epochs } => {
            let mut cfg = StudyConfig::default();
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let study = Study::new(cfg, &cache)?;
            let report = study.run(|line| eprintln!("{line}"))?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
        }
        Cmd::Serve {
            ckpt,
            port,
            host,
            max_turns,
            sessions,
            ttl_secs,
            seed,
        } => {
            let engine = Engine::load(&ckpt)?;
            let store = match sessions {
                Some(dir) => SessionStore::on_disk(&dir, ttl_secs)?,
                None => SessionStore::in_memory(ttl_secs),
            };
            let app = Arc::new(AppState::new(
                Some(Arc::new(engine)),
                store,
                max_turns,
                seed,
            ));
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .context("bad host or port")?;
            tokio::runtime::Runtime::new()?.block_on(serve(app, addr))?;
        }
        Cmd::Chat {
            ckpt,
            out_dir,
            max_turns,
            seed,
        } => {
            let engine = Engine::load(&ckpt)?;
            let opts = ReplOptions {
                max_turns,
                seed,
                out_dir,
            };
            let stdin = std::io::stdin();
            run(&engine, stdin.lock(), &mut std::io::stdout(), &opts)?;
        }
    }
    Ok(())
}
