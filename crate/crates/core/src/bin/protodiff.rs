use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use protodiff::autoencoder::LatentShape;
use protodiff::mil::read_labels;
use protodiff::pipeline::{
    evaluate_predictions, parse_stages, read_predictions, sample_from_run, CorpusMode, MilTask, Pipeline,
    PipelineConfig, Stage,
};
use protodiff::{Error, Result};

#[derive(Parser)]
#[command(name = "protodiff", version, about = "Prototype-guided synthetic corpus pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
}

// Global seed and output root; both re-key every stage.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Output root for stage directories.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn apply(self, c: &mut PipelineConfig) {
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = self.out {
            c.output_root = o;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run stages in dependency order (all by default).
    Run {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Comma-separated stage names.
        #[arg(long)]
        stages: Option<String>,
    },
    /// Cluster each cohort and merge the prototype table.
    Curate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Directory of `.pemb` cohort files.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[command(flatten)]
        common: Overrides,
    },
    /// Fit the latent autoencoder on the curation embeddings.
    TrainAe {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Directory of `.pemb` files to train on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Latent shape as `h,w,c`.
        #[arg(long, value_parser = parse_latent)]
        latent_dims: Option<LatentShape>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Overrides,
    },
    TrainDiffusion(ConfigArg),
    TrainClassifier(ConfigArg),
    /// Draw guided samples for one prototype into a PSMP file.
    Sample {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        prototype: u32,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        guidance_w: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    BuildDataset {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<CorpusMode>,
        #[arg(long)]
        n_per: Option<usize>,
        #[arg(long)]
        n_per_real: Option<usize>,
        #[arg(long)]
        guidance_w: Option<f64>,
    },
    TrainMil {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_parser = parse_task)]
        task: Option<MilTask>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a finished run, or loose prediction files against a labels CSV.
    Evaluate {
        #[arg(long, conflicts_with_all = ["pred", "truth"])]
        config: Option<PathBuf>,
        /// `name=path`; the first one is the baseline.
        #[arg(long)]
        pred: Vec<String>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, value_parser = parse_task, default_value = "subtype")]
        task: MilTask,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_latent(s: &str) -> std::result::Result<LatentShape, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| format!("bad latent dims {s:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [h, w, c] => Ok(LatentShape::flat(h, w, c)),
        _ => Err(format!("latent dims need h,w,c, got {s:?}")),
    }
}

fn parse_mode(s: &str) -> std::result::Result<CorpusMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown mode {s:?}"))
}

fn parse_task(s: &str) -> std::result::Result<MilTask, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown task {s:?}"))
}

fn run_one(cfg: PipelineConfig, stage: Stage) -> Result<()> {
    let p = Pipeline::new(cfg)?;
    let prov = p.run_stage(stage)?;
    println!("{stage}\t{}\t{}", prov.config_hash, p.stage_dir(stage).display());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { cfg, stages } => {
            let p = Pipeline::new(PipelineConfig::load(&cfg.config)?)?;
            let stages = stages.as_deref().map(parse_stages).transpose()?.unwrap_or_default();
            for prov in p.run(&stages)? {
                println!("{}\t{}\t{}", prov.stage, prov.config_hash, p.stage_dir(prov.stage).display());
            }
            Ok(())
        }
        Command::Curate {
            cfg,
            embeddings,
            k_min,
            k_max,
            restarts,
            common,
        } => {
            let mut c = PipelineConfig::load(&cfg.config)?;
            if let Some(e) = embeddings {
                c.curate.embeddings = e;
            }
            c.curate.k_min = k_min.unwrap_or(c.curate.k_min);
            c.curate.k_max = k_max.unwrap_or(c.curate.k_max);
            c.curate.restarts = restarts.unwrap_or(c.curate.restarts);
            common.apply(&mut c);
            c.validate()?;
            run_one(c, Stage::Curate)
        }
        Command::TrainAe {
            cfg,
            data,
            latent_dims,
            epochs,
            common,
        } => {
            let mut c = PipelineConfig::load(&cfg.config)?;
            if let Some(d) = data {
                c.curate.embeddings = d;
            }
            c.autoencoder.latent = latent_dims.unwrap_or(c.autoencoder.latent);
            c.autoencoder.epochs = epochs.unwrap_or(c.autoencoder.epochs);
            common.apply(&mut c);
            c.validate()?;
            run_one(c, Stage::TrainAe)
        }
        Command::TrainDiffusion(c) => run_one(PipelineConfig::load(&c.config)?, Stage::TrainDiffusion),
        Command::TrainClassifier(c) => run_one(PipelineConfig::load(&c.config)?, Stage::TrainClassifier),
        Command::Sample {
            cfg,
            prototype,
            count,
            guidance_w,
            seed,
            out,
        } => {
            let p = Pipeline::new(PipelineConfig::load(&cfg.config)?)?;
            let set = sample_from_run(&p, prototype, count, guidance_w, seed)?;
            set.save(&out)?;
            println!("{} samples -> {}", set.rows(), out.display());
            Ok(())
        }
        Command::BuildDataset {
            cfg,
            mode,
            n_per,
            n_per_real,
            guidance_w,
        } => {
            let mut c = PipelineConfig::load(&cfg.config)?;
            if let Some(m) = mode {
                c.dataset.mode = m;
            }
            if let Some(n) = n_per {
                c.dataset.n_per = n;
            }
            if n_per_real.is_some() {
                c.dataset.n_per_real = n_per_real;
            }
            if let Some(w) = guidance_w {
                c.dataset.guidance_w = w;
            }
            c.validate()?;
            run_one(c, Stage::BuildDataset)
        }
        Command::TrainMil { cfg, task, hidden, seed } => {
            let mut c = PipelineConfig::load(&cfg.config)?;
            if let Some(t) = task {
                c.mil.task = t;
            }
            if let Some(h) = hidden {
                c.mil.hidden = h;
            }
            if seed.is_some() {
                c.mil.seed = seed;
            }
            c.validate()?;
            run_one(c, Stage::TrainMil)
        }
        Command::Evaluate {
            config: Some(path), ..
        } => {
            let p = Pipeline::new(PipelineConfig::load(&path)?)?;
            p.run_stage(Stage::Evaluate)?;
            let text = std::fs::read_to_string(p.stage_dir(Stage::Evaluate).join("report.txt"))?;
            print!("{text}");
            Ok(())
        }
        Command::Evaluate {
            config: None,
            pred,
            truth,
            task,
            out,
        } => {
            let truth = truth.ok_or_else(|| Error::Config("--truth is required without --config".into()))?;
            if pred.is_empty() {
                return Err(Error::Config("at least one --pred name=path is required".into()));
            }
            let preds = pred
                .iter()
                .map(|spec| {
                    let (name, path) = spec
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("--pred expects name=path, got {spec:?}")))?;
                    read_predictions(path, name)
                })
                .collect::<Result<Vec<_>>>()?;
            let report = evaluate_predictions(task, &preds, &read_labels(&truth)?)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(path, json + "\n")?,
                None => println!("{json}"),
            }
            eprint!("{}", report.table());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("PROTODIFF_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            error!("could not size thread pool: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
