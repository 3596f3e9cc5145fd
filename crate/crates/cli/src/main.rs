use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relctr::ctr::{score_candidates, EmbeddingCache};
use relctr::data::{config_hash, emit_dataset, load_dataset, DatasetHeader, SearchSample};
use relctr::encoder::{load_checkpoint, save_checkpoint};
use relctr::preference::BehaviorPool;
use relctr::train::{
    ablate, assess, build_requests, check_layout, fit, generate_data, init_params, prepare_encoder, sweep, sweep_csv,
    ExperimentConfig, ENCODER_PREFIX,
};
use relctr::{config, Error, ParamStore, Result};

const HISTORY: &str = "history.tsv";
const TRAIN: &str = "train.tsv";
const TEST: &str = "test.tsv";

#[derive(Parser)]
#[command(name = "relctr", version, about = "Relevance-aware click-through ranking on synthetic search logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut pairs = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                config::parse_flat(&text)?
            }
            None => Vec::new(),
        };
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(Error::Config(format!("override {o:?} is not key=value")));
            };
            let k = k.trim();
            pairs.retain(|(seen, _)| seen != k);
            pairs.push((k.to_string(), v.trim().to_string()));
        }
        let cfg: ExperimentConfig = config::apply(&ExperimentConfig::default(), &pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the world and write history, train and test datasets.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the text encoder and write its checkpoint.
    PretrainEncoder {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch pretraining statistics as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the ranking model on a generated data directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint; built from the config when omitted.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also evaluate on the test split and write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a trained model on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AUC grid over the fake-level cut points, as CSV.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3")]
        p1: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.4,0.6,0.8")]
        p2: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Component ablation over several seeds, as JSON.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Variants to run besides full and base; all when omitted.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score and rank candidate lists with a trained model.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Data directory whose history feeds the behaviour sequences.
        #[arg(long)]
        data: PathBuf,
        /// Candidates in dataset format; consecutive rows with the same
        /// user and query form one list.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn data_hash(cfg: &ExperimentConfig) -> String {
    config_hash(&(cfg.seed, &cfg.world, &cfg.logs))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn require(paths: &[&Path]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing inputs: {}", missing.join(", "))))
    }
}

fn read_split(cfg: &ExperimentConfig, path: &Path) -> Result<Vec<SearchSample>> {
    let (header, samples) = load_dataset(path)?;
    if header.config_hash != data_hash(cfg) {
        log::warn!("{} was generated under a different world or log config", path.display());
    }
    let w = &cfg.world;
    if let Some(s) = samples.iter().find(|s| {
        s.user_id as usize >= w.n_users || s.item_id as usize >= w.n_items || s.category as usize >= w.n_categories
    }) {
        return Err(Error::Config(format!(
            "{}: sample (user {}, item {}, category {}) is outside the configured world",
            path.display(),
            s.user_id,
            s.item_id,
            s.category
        )));
    }
    Ok(samples)
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<(relctr::ctr::RankModel, ParamStore)> {
    require(&[path])?;
    let model = cfg.rank_model()?;
    let params = load_checkpoint(path)?;
    let encoder = relctr::encoder::EncoderParams::init(cfg.encoder_config()?, ENCODER_PREFIX, &mut relctr::rng::stream(0, "layout"))?;
    check_layout(&init_params(cfg, &model, &encoder.params), &params, "model checkpoint")?;
    Ok((model, params))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let (_, logs) = generate_data(&cfg)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let header = DatasetHeader::new(data_hash(&cfg));
            for (name, split) in [(HISTORY, &logs.history), (TRAIN, &logs.train), (TEST, &logs.test)] {
                emit_dataset(split, &header, out.join(name))?;
            }
            log::info!(
                "wrote {} history, {} train and {} test samples to {}",
                logs.history.len(),
                logs.train.len(),
                logs.test.len(),
                out.display()
            );
        }
        Command::PretrainEncoder { cfg, out, report } => {
            let cfg = cfg.load()?;
            let (world, _) = generate_data(&cfg)?;
            let (encoder, stats) = prepare_encoder(&cfg, &world)?;
            save_checkpoint(&encoder, &out)?;
            if let Some(path) = report {
                let mut text = serde_json::to_string_pretty(&serde_json::to_value(&stats).map_err(|e| Error::Internal(e.to_string()))?)
                    .map_err(|e| Error::Internal(e.to_string()))?;
                text.push('\n');
                write(&path, &text)?;
            }
        }
        Command::Train { cfg, data, encoder, out, report } => {
            let cfg = cfg.load()?;
            let (history, train, test) = (data.join(HISTORY), data.join(TRAIN), data.join(TEST));
            let mut inputs = vec![history.as_path(), train.as_path()];
            if report.is_some() {
                inputs.push(test.as_path());
            }
            if let Some(e) = &encoder {
                inputs.push(e.as_path());
            }
            require(&inputs)?;
            let history = read_split(&cfg, &history)?;
            let train = read_split(&cfg, &train)?;
            let enc = match &encoder {
                Some(path) => {
                    let params = load_checkpoint(path)?;
                    let expected = relctr::encoder::EncoderParams::init(cfg.encoder_config()?, ENCODER_PREFIX, &mut relctr::rng::stream(0, "layout"))?;
                    check_layout(&expected.params, &params, "encoder checkpoint")?;
                    params
                }
                None => {
                    let (world, _) = generate_data(&cfg)?;
                    prepare_encoder(&cfg, &world)?.0
                }
            };
            let trained = fit(&cfg, &history, &train, &enc)?;
            save_checkpoint(&trained.params, &out)?;
            if let Some(path) = report {
                let test = read_split(&cfg, &test)?;
                let r = assess(&cfg, &trained.model, &trained.params, &history, &test)?;
                write(&path, &r.to_canonical_json())?;
            }
        }
        Command::Eval { cfg, data, model, out } => {
            let cfg = cfg.load()?;
            let (history, test) = (data.join(HISTORY), data.join(TEST));
            require(&[&history, &test, &model])?;
            let (rank_model, params) = load_model(&cfg, &model)?;
            let history = read_split(&cfg, &history)?;
            let test = read_split(&cfg, &test)?;
            let r = assess(&cfg, &rank_model, &params, &history, &test)?;
            emit(out.as_deref(), &r.to_canonical_json())?;
        }
        Command::Sweep { cfg, p1, p2, out } => {
            let cfg = cfg.load()?;
            emit(out.as_deref(), &sweep_csv(&sweep(&cfg, &p1, &p2)?))?;
        }
        Command::Ablate { cfg, seeds, only, out } => {
            let cfg = cfg.load()?;
            if seeds.is_empty() {
                return Err(Error::Config("ablate needs at least one seed".into()));
            }
            let known: Vec<String> = relctr::train::ablation_variants(&cfg).into_iter().map(|(n, _)| n).collect();
            if let Some(bad) = only.iter().find(|o| !known.contains(o)) {
                return Err(Error::Config(format!("unknown variant {bad}; known: {}", known.join(", "))));
            }
            let only: Vec<&str> = only.iter().map(String::as_str).collect();
            emit(out.as_deref(), &ablate(&cfg, &seeds, &only)?.to_canonical_json())?;
        }
        Command::Score { cfg, model, data, candidates, out } => {
            let cfg = cfg.load()?;
            let history = data.join(HISTORY);
            require(&[&history, &candidates])?;
            let (rank_model, params) = load_model(&cfg, &model)?;
            let history = read_split(&cfg, &history)?;
            let cands = read_split(&cfg, &candidates)?;
            let pool = BehaviorPool::new(&history);
            let requests = build_requests(&cands, &pool, &cfg.mining, cfg.seed)?;
            let mut cache = EmbeddingCache::new();
            let mut text = String::from("user_id\tquery_id\titem_id\tp_click\ttau\trank_score\trank\n");
            for req in &requests {
                let rows = &cands[req.rows.clone()];
                let first = &rows[0];
                for c in score_candidates(&rank_model, &params, &first.query_text, &req.seq, rows, Some(&mut cache))? {
                    text.push_str(&format!(
                        "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                        first.user_id, first.query_id, c.item_id, c.p_click, c.tau, c.rank_score, c.rank
                    ));
                }
            }
            emit(out.as_deref(), &text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
