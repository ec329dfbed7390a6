use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bt_adapter::checkpoint::{self, Checkpoint};
use bt_adapter::config::Preset;
use bt_adapter::data;
use bt_adapter::eval;
use bt_adapter::model::{self, BtModel};
use bt_adapter::params::Group;
use bt_adapter::trainer::{self, FeatureCache, StepRecord, TrainObserver, TrainOptions};
use bt_adapter::{Error, ModelConfig, Result};
use clap::{Args, Parser, Subcommand};

mod config;

use config::{Overrides, RunConfig};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "bt-adapter", version, about = "Branching temporal adapter: data, training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Tube mask ratio.
    #[arg(long)]
    rho: Option<f64>,
    /// Branch layers (K).
    #[arg(long)]
    layers: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset,
            seed: self.seed,
            steps: self.steps,
            rho: self.rho,
            branch_layers: self.layers,
            out: self.out.clone(),
            ..Overrides::default()
        }
    }

    fn resolve(&self, extra: Overrides) -> Result<RunConfig> {
        let mut ov = self.overrides();
        ov.corpus = extra.corpus;
        ov.checkpoint_every = extra.checkpoint_every;
        config::resolve(self.config.as_deref(), &ov)
    }
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic twin-pair corpus.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the branch on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Write an extra checkpoint every N steps.
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Retrieval and twin-order metrics for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Finite-difference check of every trainable gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
    /// Token and parameter accounting of temporal-modelling strategies.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Report analytic branch multiply counts per mask ratio instead.
        #[arg(long)]
        masking: bool,
    },
    /// Copy a checkpoint's branch onto a freshly built backbone.
    Graft {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Check the exact initialisation invariants of a fresh model.
    VerifyInit {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure that maps to a specific exit code.
enum Failure {
    Error(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error kind=check msg={}", one_line(&msg));
            ExitCode::from(3)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenData { common } => gen_data(&common),
        Command::Train {
            common,
            corpus,
            checkpoint_every,
        } => train(
            &common,
            Overrides {
                corpus,
                checkpoint_every,
                ..Overrides::default()
            },
        ),
        Command::Eval {
            common,
            checkpoint,
            corpus,
        } => evaluate(
            &common,
            &checkpoint,
            Overrides {
                corpus,
                ..Overrides::default()
            },
        ),
        Command::Gradcheck { common, h, batch } => gradcheck(&common, h, batch),
        Command::Compare { common, masking } => compare(&common, masking),
        Command::Graft { common, checkpoint } => graft(&common, &checkpoint),
        Command::VerifyInit { common } => verify_init(&common),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(cfg)?;
    json.push(b'\n');
    checkpoint::write_atomic(&dir.join("config.json"), &json)
}

fn corpus_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.corpus
        .clone()
        .ok_or_else(|| Error::Config("--corpus is required".into()))
}

fn gen_data(common: &Common) -> CmdResult {
    let cfg = common.resolve(Overrides::default())?;
    let dir = out_dir(&cfg)?;
    let corpus = data::gen_dataset(&cfg.model, &cfg.data, cfg.seed)?;
    let path = dir.join("corpus.bta");
    data::save_corpus(&corpus, &path)?;
    echo_config(&dir, &cfg)?;
    println!(
        "corpus path={} samples={} train={} held_out={}",
        path.display(),
        corpus.samples.len(),
        corpus.split_indices(data::Split::Train).len(),
        corpus.split_indices(data::Split::HeldOut).len()
    );
    Ok(())
}

struct RunLog {
    metrics: fs::File,
    summary: String,
    dir: PathBuf,
}

impl TrainObserver for RunLog {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        self.metrics.write_all(&line)?;
        let l = &r.loss;
        self.summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, l.total, l.vtc, l.mbta, l.mbca, l.batch_size, l.unmasked_count
        ));
        Ok(())
    }

    fn on_checkpoint(&mut self, model: &BtModel, step: u64) -> Result<()> {
        checkpoint::save_checkpoint(&self.dir.join(format!("checkpoint-{step:06}.btck")), model, step)
    }
}

fn train(common: &Common, extra: Overrides) -> CmdResult {
    let cfg = common.resolve(extra)?;
    let dir = out_dir(&cfg)?;
    let corpus = data::load_corpus(&corpus_path(&cfg)?)?;
    corpus.check_model(&cfg.model)?;
    echo_config(&dir, &cfg)?;
    let mut model = BtModel::new(cfg.model.clone(), cfg.seed)?;
    let backbone_init = model.group_hash(Group::Backbone);
    let cache = FeatureCache::build(&model, &corpus)?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut log = RunLog {
        metrics: fs::File::create(&metrics_path)?,
        summary: String::from("step,total,vtc,mbta,mbca,batch_size,unmasked_count\n"),
        dir: dir.clone(),
    };
    let opts = TrainOptions {
        steps: cfg.steps,
        seed: cfg.seed,
        checkpoint_every: (cfg.checkpoint_every > 0).then_some(cfg.checkpoint_every),
    };
    let start = Instant::now();
    trainer::train_cached(&mut model, &corpus, &cache, &opts, &mut log)?;
    let elapsed = start.elapsed().as_secs_f64();
    log.metrics.flush()?;
    checkpoint::write_atomic(&dir.join("summary.csv"), log.summary.as_bytes())?;
    checkpoint::save_checkpoint(&dir.join("checkpoint.btck"), &model, cfg.steps)?;
    let backbone_final = model.group_hash(Group::Backbone);
    if backbone_final != backbone_init {
        return Err(Error::Invariant("backbone hash changed".into()).into());
    }
    eprintln!(
        "timing steps={} seconds={elapsed:.3} ms_per_step={:.3}",
        cfg.steps,
        if cfg.steps > 0 { 1e3 * elapsed / cfg.steps as f64 } else { 0.0 }
    );
    println!(
        "trained steps={} trainable={} backbone_hash={} branch_hash={} heads_hash={}",
        cfg.steps,
        model.trainable_count(),
        backbone_final,
        model.group_hash(Group::Branch),
        model.group_hash(Group::Heads)
    );
    Ok(())
}

fn evaluate(common: &Common, ckpt_path: &Path, extra: Overrides) -> CmdResult {
    let cfg = common.resolve(extra)?;
    let corpus = data::load_corpus(&corpus_path(&cfg)?)?;
    let ckpt = checkpoint::load_checkpoint(ckpt_path)?;
    corpus.check_model(ckpt.model.config())?;
    let hash = checkpoint::checkpoint_hash(&ckpt.model, ckpt.step)?;
    let rows = eval::evaluate(&ckpt.model, &corpus, cfg.seed, &hash)?;
    let csv = eval::eval_csv(&rows);
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        checkpoint::write_atomic(&dir.join("eval.csv"), csv.as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

fn gradcheck(common: &Common, h: f64, batch: usize) -> CmdResult {
    let model_cfg = if common.config.is_some() || common.preset.is_some() {
        common.resolve(Overrides::default())?.model
    } else {
        let mut m = ModelConfig::tiny();
        if let Some(r) = common.rho {
            m.mask_ratio = r;
        }
        m.validate()?;
        m
    };
    let seed = common.seed.unwrap_or(0);
    let start = Instant::now();
    let report = trainer::model_grad_check(&model_cfg, seed, batch, h)?;
    println!(
        "gradcheck max_rel_error={:e} parameters={} entries={} worst={} h={h:e} seconds={:.2}",
        report.max_rel_error,
        report.parameters,
        report.entries,
        report.worst_param,
        start.elapsed().as_secs_f64()
    );
    if report.max_rel_error <= GRADCHECK_TOL {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {:e} exceeds {GRADCHECK_TOL:e}",
            report.max_rel_error
        )))
    }
}

fn compare(common: &Common, masking: bool) -> CmdResult {
    let cfg = common.resolve(Overrides::default())?;
    let (name, csv) = if masking {
        let mut ratios: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        if !ratios.contains(&cfg.model.mask_ratio) {
            ratios.push(cfg.model.mask_ratio);
        }
        let mut csv = String::from("rho,masked,branch_multiplies\n");
        for rho in ratios {
            let masked = bt_adapter::config::masked_count(cfg.model.patches, rho);
            if masked >= cfg.model.patches {
                continue;
            }
            let count = bt_adapter::adapter::branch_multiply_count(&cfg.model, rho)?;
            csv.push_str(&format!("{rho},{masked},{count}\n"));
        }
        ("masking.csv", csv)
    } else {
        ("compare.csv", eval::strategy_accounting(&cfg.model)?.csv())
    };
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        checkpoint::write_atomic(&dir.join(name), csv.as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

fn probe_video(cfg: &ModelConfig, seed: u64) -> bt_adapter::Tensor {
    trainer::probe_batch(cfg, 1, seed).remove(0).0
}

fn graft(common: &Common, donor_path: &Path) -> CmdResult {
    let cfg = common.resolve(Overrides::default())?;
    let dir = out_dir(&cfg)?;
    let donor: Checkpoint = checkpoint::load_checkpoint(donor_path)?;
    let mut target = BtModel::new(cfg.model.clone(), cfg.seed)?;
    checkpoint::graft_branch(&donor, &mut target, &probe_video(&cfg.model, cfg.seed))?;
    let path = dir.join("checkpoint.btck");
    checkpoint::save_checkpoint(&path, &target, donor.step)?;
    echo_config(&dir, &cfg)?;
    println!(
        "grafted path={} backbone_hash={} branch_hash={}",
        path.display(),
        target.group_hash(Group::Backbone),
        target.group_hash(Group::Branch)
    );
    Ok(())
}

fn verify_init(common: &Common) -> CmdResult {
    let cfg = common.resolve(Overrides::default())?;
    let model = BtModel::new(cfg.model.clone(), cfg.seed)?;
    let checks = model::verify_init(&model, &probe_video(&cfg.model, cfg.seed), cfg.seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        println!("check name={} passed={} detail={}", c.name, c.passed, c.detail);
        if !c.passed {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("failed checks: {}", failed.join(","))))
    }
}
