//! Command-line entry point.
//!
//! Usage errors (unknown subcommand, missing or malformed flag) exit with
//! status 2; failures of the operation itself exit with status 1.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bandit::{
    encode_records, pretrain_critic, read_triples_csv, run_bandit_loop_into, write_triples_csv, BanditLearner,
    BanditRun, TripleRecord,
};
use crate::bpe::{check_line, restore_words, BpeModel};
use crate::config::{PipelineConfig, Profile};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, windowed_means};
use crate::net::{run_source_logger, run_static_client_into, BanditServer, NetChannel, ServedCorpus, ServerConfig};
use crate::select::select_data;
use crate::seq2seq::{load_critic, save_critic, CriticParams, DecodeConfig, TranslationModel};
use crate::supervised::{train_translation_model, write_metrics_csv, ParallelCorpus};

#[derive(Debug, Parser)]
#[command(name = "banditmt", version, about = "Bandit machine translation workbench")]
pub struct Cli {
    /// Seed for every random choice of the subcommand.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a joint merge table from one or more token files.
    BpeLearn {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Number of merges; defaults to `train.bpe_merges`.
        #[arg(long)]
        merges: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a token file into subword units.
    BpeApply {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Join subword units back into words.
    BpeRestore {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank a general-domain corpus by cross-entropy difference and keep the
    /// best fraction.
    SelectData {
        #[arg(long)]
        in_domain: PathBuf,
        #[arg(long)]
        out_domain_src: PathBuf,
        #[arg(long)]
        out_domain_tgt: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        cap: Option<usize>,
        /// Writes `<prefix>.src`, `<prefix>.tgt` and `<prefix>.scores.csv`.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Maximum-likelihood training.
    Train {
        /// Source and target files as `src,tgt`.
        #[arg(long, value_parser = parse_pair)]
        train: Option<(PathBuf, PathBuf)>,
        #[arg(long, value_parser = parse_pair)]
        dev: Option<(PathBuf, PathBuf)>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Translate a token file.
    Translate {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        decoding: Decoding,
    },
    /// Serve a corpus as a feedback stream.
    ServeBandit {
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Stop after this many sessions instead of serving forever.
        #[arg(long)]
        sessions: Option<usize>,
    },
    /// Connect to a feedback server.
    Client {
        #[arg(long, value_enum)]
        mode: ClientMode,
        #[arg(long)]
        addr: Option<String>,
        #[command(flatten)]
        model: LearnerFiles,
        /// Sources (log-sources mode) or adapted checkpoint (a2c mode).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Triple log CSV (static and a2c modes).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Static mode: sample at the actor temperature instead of decoding.
        #[arg(long)]
        sample: bool,
        #[command(flatten)]
        decoding: Decoding,
    },
    /// Adapt a model with actor-critic from a feedback server.
    BanditTrain {
        #[command(flatten)]
        model: LearnerFiles,
        #[arg(long)]
        server: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Corpus BLEU of a hypothesis file, or windowed means of a triple log.
    #[command(group(ArgGroup::new("what").required(true).args(["hyp", "rewards"])))]
    Evaluate {
        #[arg(long, requires = "reference")]
        hyp: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Triple log CSV whose rewards are averaged per window.
        #[arg(long, requires = "window")]
        rewards: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClientMode {
    Static,
    A2c,
    LogSources,
}

#[derive(Debug, Args)]
pub struct Decoding {
    /// Beam width; overrides the configured decoding mode.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Merge table; sources are segmented and outputs restored to words.
    #[arg(long)]
    pub bpe: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LearnerFiles {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Critic checkpoint, or `none` for a fresh critic.
    #[arg(long)]
    pub critic: Option<String>,
    /// Triple log used to pretrain the critic before adapting.
    #[arg(long)]
    pub pretrain: Option<PathBuf>,
    #[arg(long)]
    pub critic_out: Option<PathBuf>,
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pair(s: &str) -> std::result::Result<(PathBuf, PathBuf), String> {
    match s.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.into(), b.into())),
        _ => Err(format!("expected `src,tgt`, got {s:?}")),
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Run(e.into())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// A flag value, falling back to the config.
fn need<T: Clone>(flag: Option<T>, fallback: &Option<T>, name: &str) -> Outcome<T> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Failure::Usage(format!("missing required flag --{name}")))
}

/// Parses arguments, runs the subcommand and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Process entry point for the `banditmt` binary.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run(std::env::args_os())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(p) => PipelineConfig::load(p, cli.profile),
        None => PipelineConfig::from_json_str("", cli.profile),
    }
}

fn dispatch(cli: Cli) -> Outcome {
    let config = load_config(&cli)?;
    let seed = cli.seed;
    match cli.command {
        Command::BpeLearn { inputs, merges, out } => {
            let mut lines = Vec::new();
            for p in &inputs {
                lines.extend(read_tokens(p)?);
            }
            let model = BpeModel::learn(&lines, merges.unwrap_or(config.train.bpe_merges))?;
            model.save(&out)?;
            println!("{} merges", model.merges().len());
        }
        Command::BpeApply { codes, input, out } => {
            let model = BpeModel::load(&codes)?;
            let lines = read_tokens(&input)?;
            let mut w = create(&out)?;
            for l in &lines {
                check_line(l)?;
                writeln!(w, "{}", model.apply(l).join(" "))?;
            }
            w.flush()?;
        }
        Command::BpeRestore { input, out } => {
            let mut w = create(&out)?;
            for l in read_tokens(&input)? {
                writeln!(w, "{}", restore_words(&l).join(" "))?;
            }
            w.flush()?;
        }
        Command::SelectData {
            in_domain,
            out_domain_src,
            out_domain_tgt,
            fraction,
            cap,
            out_prefix,
        } => {
            let mut sel = config.selection.clone();
            sel.fraction = fraction.unwrap_or(sel.fraction);
            sel.in_domain_cap = cap.unwrap_or(sel.in_domain_cap);
            let in_lines = read_tokens(&in_domain)?;
            let corpus = read_corpus(&out_domain_src, &out_domain_tgt)?;
            let (chosen, ranked) = select_data(&in_lines, &corpus, &sel)?;
            write_lines(&with_suffix(&out_prefix, "src"), chosen.sources().map(|s| s.join(" ")))?;
            write_lines(&with_suffix(&out_prefix, "tgt"), chosen.targets().map(|t| t.join(" ")))?;
            let mut scores = csv::Writer::from_writer(create(&with_suffix(&out_prefix, "scores.csv"))?);
            for s in &ranked {
                scores.serialize(s).map_err(Error::from)?;
            }
            scores.flush()?;
            println!("selected {} of {}", chosen.len(), corpus.len());
        }
        Command::Train {
            train,
            dev,
            out,
            metrics,
        } => {
            let fallback = config.paths.train_src.clone().zip(config.paths.train_tgt.clone());
            let (src, tgt) = need(train, &fallback, "train")?;
            let out = need(out, &config.paths.checkpoint, "out")?;
            let dev_fallback = config.paths.dev_src.clone().zip(config.paths.dev_tgt.clone());
            let heldout = match dev.or(dev_fallback) {
                Some((s, t)) => Some(read_corpus(&s, &t)?),
                None => None,
            };
            let corpus = read_corpus(&src, &tgt)?;
            let (model, history) = train_translation_model(&corpus, heldout.as_ref(), &config.train, seed)?;
            model.save(&out)?;
            if let Some(m) = metrics {
                write_metrics_csv(&history, create(&m)?)?;
            }
            if let Some(last) = history.last() {
                println!(
                    "epoch {} train ppl {:.4} held-out ppl {:.4}",
                    last.epoch, last.train_ppl, last.heldout_ppl
                );
            }
        }
        Command::Translate {
            ckpt,
            input,
            out,
            decoding,
        } => {
            let model = TranslationModel::load(need(ckpt, &config.paths.checkpoint, "ckpt")?)?;
            let bpe = load_bpe(decoding.bpe.as_ref(), &config)?;
            let dc = decode_config(&config, &decoding);
            let mut w = create(&out)?;
            for l in read_tokens(&input)? {
                writeln!(w, "{}", translate_words(&model, bpe.as_ref(), &l, &dc)?.join(" "))?;
            }
            w.flush()?;
        }
        Command::ServeBandit {
            src,
            reference,
            addr,
            log,
            sessions,
        } => {
            let sources = read_lines(&src)?;
            let refs = read_lines(&reference)?;
            let corpus = ServedCorpus::new(&sources, &refs)?;
            let server = BanditServer::bind(
                addr.unwrap_or(config.server.addr.clone()),
                corpus,
                ServerConfig {
                    window: config.server.window,
                    log_dir: log.or(config.paths.log_dir.clone()),
                },
            )?;
            println!("listening on {}", server.local_addr()?);
            std::io::stdout().flush()?;
            match sessions {
                Some(n) => {
                    for s in server.serve(n)? {
                        println!(
                            "session {}: {} rewards, {} errors",
                            s.session,
                            s.triples.len(),
                            s.errors
                        );
                    }
                }
                None => server.serve_forever()?,
            }
        }
        Command::Client {
            mode,
            addr,
            model,
            out,
            log,
            sample,
            decoding,
        } => {
            let addr = addr.unwrap_or(config.server.addr.clone());
            match mode {
                ClientMode::LogSources => {
                    let out = need(out, &None, "out")?;
                    let sources = run_source_logger(&addr)?;
                    write_lines(&out, sources.iter().cloned())?;
                    println!("{} sources", sources.len());
                }
                ClientMode::Static => {
                    let log = need(log, &None, "log")?;
                    let m = TranslationModel::load(need(model.ckpt, &config.paths.checkpoint, "ckpt")?)?;
                    let bpe = load_bpe(decoding.bpe.as_ref(), &config)?;
                    let base = decode_config(&config, &decoding);
                    let mut next_id = 0u64;
                    let mut records = Vec::new();
                    let outcome = run_static_client_into(
                        &addr,
                        |words| {
                            let dc = if sample {
                                DecodeConfig {
                                    max_len: config.a2c.max_len,
                                    ..DecodeConfig::sample(
                                        config.a2c.tau,
                                        seed ^ next_id.wrapping_mul(0x9e37_79b9_7f4a_7c15),
                                    )
                                }
                            } else {
                                base.clone()
                            };
                            next_id += 1;
                            translate_words(&m, bpe.as_ref(), words, &dc)
                        },
                        &mut records,
                    );
                    write_triples_csv(&records, create(&log)?)?;
                    outcome?;
                    report_rewards(&records);
                }
                ClientMode::A2c => {
                    let out = need(out, &config.paths.checkpoint, "out")?;
                    let log = need(log, &None, "log")?;
                    adapt(&config, seed, model, decoding.bpe.as_ref(), &addr, &out, &log)?;
                }
            }
        }
        Command::BanditTrain {
            model,
            server,
            out,
            log,
        } => {
            let addr = server.unwrap_or(config.server.addr.clone());
            adapt(&config, seed, model, None, &addr, &out, &log)?;
        }
        Command::Evaluate {
            hyp,
            reference,
            rewards,
            window,
        } => {
            if let (Some(h), Some(r)) = (hyp, reference) {
                let hyps = read_tokens(&h)?;
                let refs = read_tokens(&r)?;
                println!("{:.2}", corpus_bleu(&hyps, &refs)?);
            }
            if let (Some(path), Some(w)) = (rewards, window) {
                let records = read_triples_csv(File::open(path)?)?;
                let scores: Vec<f64> = records.iter().map(|r| r.reward).collect();
                let mut out = csv::Writer::from_writer(std::io::stdout());
                for m in windowed_means(&scores, w)? {
                    out.serialize(m).map_err(Error::from)?;
                }
                out.flush()?;
            }
        }
    }
    Ok(())
}

fn adapt(
    config: &PipelineConfig,
    seed: u64,
    files: LearnerFiles,
    bpe_path: Option<&PathBuf>,
    addr: &str,
    out: &Path,
    log: &Path,
) -> Outcome {
    let model = TranslationModel::load(need(files.ckpt, &config.paths.checkpoint, "ckpt")?)?;
    let bpe = load_bpe(bpe_path, config)?;
    let critic_flag = need(
        files.critic,
        &config.paths.critic.as_ref().map(|p| p.display().to_string()),
        "critic",
    )?;
    let mut critic = if critic_flag == "none" {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CriticParams::init(model.params.dims, config.train.init_scale, &mut rng)?
    } else {
        load_critic(&critic_flag)?
    };
    if let Some(p) = files.pretrain {
        let mut records = read_triples_csv(File::open(p)?)?;
        records.truncate(config.a2c.pretrain_triples);
        let triples = encode_records(&model, bpe.as_ref(), &records)?;
        let (trained, report) = pretrain_critic(critic, &triples, &config.a2c.pretrain, seed)?;
        critic = trained;
        if let Some(mse) = report.heldout_mse.last() {
            println!("critic held-out mse {mse:.5} (zero predictor {:.5})", report.zero_mse);
        }
    }
    let mut learner = BanditLearner::new(model, critic, bpe, config.a2c.clone())?;
    let mut run = BanditRun::default();
    let outcome = NetChannel::connect(addr).and_then(|mut channel| {
        run_bandit_loop_into(&mut learner, &mut channel, seed, &mut run)?;
        channel.finish()
    });
    // the log of completed blocks is kept even when the session broke off
    write_triples_csv(&run.log, create(log)?)?;
    outcome?;
    learner.model.save(out)?;
    if let Some(c) = files.critic_out {
        save_critic(&learner.critic, c)?;
    }
    println!("{} updates", run.updates);
    report_rewards(&run.log);
    Ok(())
}

fn report_rewards(records: &[TripleRecord]) {
    let mean = records.iter().map(|r| r.reward).sum::<f64>() / records.len().max(1) as f64;
    println!("{} rewards, mean {mean:.4}", records.len());
}

fn decode_config(config: &PipelineConfig, d: &Decoding) -> DecodeConfig {
    match d.beam {
        Some(w) => DecodeConfig {
            max_len: config.decode.max_len,
            ..DecodeConfig::beam(w)
        },
        None => config.decode.clone(),
    }
}

fn load_bpe(flag: Option<&PathBuf>, config: &PipelineConfig) -> Result<Option<BpeModel>> {
    flag.or(config.paths.bpe.as_ref()).map(BpeModel::load).transpose()
}

fn translate_words(
    model: &TranslationModel,
    bpe: Option<&BpeModel>,
    words: &[String],
    config: &DecodeConfig,
) -> Result<Vec<String>> {
    match bpe {
        Some(b) => Ok(restore_words(&model.translate(&b.apply(words), config)?)),
        None => model.translate(words, config),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    s.into()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(String::from).collect())
}

fn read_tokens(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

fn read_corpus(src: &Path, tgt: &Path) -> Result<ParallelCorpus> {
    ParallelCorpus::from_lines(&read_lines(src)?, &read_lines(tgt)?)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut w = create(path)?;
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}
