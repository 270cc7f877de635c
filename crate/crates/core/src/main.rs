use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use stainedit::corpus::{self, CorpusManifest, FilterThresholds, PrepareConfig};
use stainedit::imageio;
use stainedit::netcore::{Direction, NetConfig};
use stainedit::objectives::{ContextPairing, LossWeights};
use stainedit::sefa::EditParams;
use stainedit::service::{self, AppState, LoadedModel};
use stainedit::survey;
use stainedit::trainer::{self, MaskScope, TileCorpus, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "stainedit", version, about = "Unpaired stain transfer with editable latent directions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Slice, filter and store slides from <in>/HE and <in>/P63.
    Prepare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.80)]
        tau_bg: f64,
        #[arg(long, default_value_t = 0.90)]
        l_white: f64,
        #[arg(long, default_value_t = 3.0)]
        tau_ent: f64,
    },
    /// Write a procedural two-domain corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Train(TrainArgs),
    /// Translate one tile with an eigenvector edit applied.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        direction: Direction,
        /// Inclusive 1-based basis range, e.g. `1:4`.
        #[arg(long, value_parser = parse_range)]
        range: (usize, usize),
        #[arg(long, allow_negative_numbers = true)]
        m: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP editing service.
    Serve {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Build a blind real-vs-generated comparison packet.
    SurveyPairs {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Train both generators and discriminators on a corpus manifest.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_xai_mask: bool,
    #[arg(long, value_enum, default_value = "adversarial")]
    mask_scope: ScopeArg,
    #[arg(long, default_value_t = 1.0)]
    lambda_context: f64,
    #[arg(long, default_value_t = 10.0)]
    lambda_cycle: f64,
    #[arg(long, default_value_t = 5.0)]
    lambda_identity: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value = "literal")]
    context_pairing: ContextPairing,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Decay the learning rate linearly to zero after this step.
    #[arg(long)]
    lr_decay_start: Option<u64>,
    #[arg(long, default_value_t = 500)]
    checkpoint_interval: u64,
    #[arg(long, default_value_t = 32)]
    base_channels: usize,
    #[arg(long, default_value_t = 2)]
    n_down: usize,
    #[arg(long, default_value_t = 4)]
    n_res: usize,
    #[arg(long, default_value_t = 64)]
    disc_channels: usize,
    #[arg(long, default_value_t = 3)]
    disc_down: usize,
    /// Continue from a checkpoint; network and loss settings come from it.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ScopeArg {
    Adversarial,
    All,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (j, k) = s.split_once(':').ok_or_else(|| format!("expected J:K, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad index `{v}`: {e}"));
    Ok((num(j)?, num(k)?))
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Prepare {
            input,
            out,
            seed,
            tau_bg,
            l_white,
            tau_ent,
        } => {
            let slides = corpus::read_slide_dir(&input)?;
            let cfg = PrepareConfig {
                thresholds: FilterThresholds { tau_bg, l_white, tau_ent },
                ..PrepareConfig::new(&out, seed)
            };
            let m = corpus::build_manifest(&slides, &cfg)?;
            println!(
                "kept {} HE and {} P63 tiles of {} seen; manifest at {}",
                m.tiles_kept.he,
                m.tiles_kept.p63,
                m.tiles_seen.he + m.tiles_seen.p63,
                m.path().display()
            );
        }
        Command::Synth { out, n, size, seed } => {
            if n < 2 {
                bail!("--n must be at least 2");
            }
            let m = corpus::synth_corpus(&out, n, size, seed)?;
            println!("wrote {} tiles per domain; manifest at {}", n, m.path().display());
        }
        Command::Train(args) => train(args)?,
        Command::Edit {
            ckpt,
            input,
            direction,
            range,
            m,
            out,
        } => {
            let model = LoadedModel::load(&ckpt)?;
            let tile = imageio::read_as_lab(&input)?;
            let params = EditParams {
                direction,
                j: range.0,
                k: range.1,
                m,
            };
            let png = model.render(&tile, &params)?;
            imageio::write(&out, &png)?;
            println!("wrote {}", out.display());
        }
        Command::Serve { ckpt, port, host } => {
            let state = match ckpt {
                Some(p) => AppState::with_model(LoadedModel::load(&p).with_context(|| format!("loading {}", p.display()))?),
                None => AppState::new(),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(state, SocketAddr::new(host, port)))?;
        }
        Command::SurveyPairs {
            real,
            fake,
            n,
            seed,
            out,
        } => {
            survey::export_survey_pairs(&real, &fake, n, seed, &out)?;
            println!(
                "packet in {}, key in {}",
                out.join(survey::PACKET_DIR).display(),
                out.join(survey::KEY_FILE).display()
            );
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let manifest = CorpusManifest::load(&a.corpus)?;
    let corpus = TileCorpus::from_manifest(&manifest)?;
    let state = match &a.resume {
        Some(p) => {
            let mut st = TrainState::load(p)?;
            st.train.total_steps = a.steps;
            st
        }
        None => {
            let net = NetConfig {
                base_channels: a.base_channels,
                n_down: a.n_down,
                n_res: a.n_res,
                image_px: manifest.tile_px,
                disc_base_channels: a.disc_channels,
                disc_down: a.disc_down,
                ..NetConfig::default()
            };
            let train = TrainConfig {
                lr: a.lr,
                lr_decay_start: a.lr_decay_start,
                batch_size: a.batch_size,
                total_steps: a.steps,
                seed: a.seed,
                xai_masking: !a.no_xai_mask,
                mask_scope: match a.mask_scope {
                    ScopeArg::Adversarial => MaskScope::Adversarial,
                    ScopeArg::All => MaskScope::All,
                },
                checkpoint_interval: a.checkpoint_interval,
                context_pairing: a.context_pairing,
                ..TrainConfig::default()
            };
            let weights = LossWeights {
                context: a.lambda_context,
                cycle: a.lambda_cycle,
                identity: a.lambda_identity,
                gamma: a.gamma,
                ..LossWeights::default()
            };
            TrainState::new(net, train, weights)?
        }
    };
    let done = trainer::fit(&corpus, state, &a.out)?;
    println!(
        "finished at step {}; checkpoint {}",
        done.step,
        a.out.join(trainer::FINAL_CHECKPOINT).display()
    );
    Ok(())
}
