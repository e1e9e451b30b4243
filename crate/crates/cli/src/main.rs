use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mote::harness::{
    ablate, evaluate_split, run_on, settings_for, table, Aggregation, Checkpoint, EvalReport, GridSpec, Prepared,
    RunConfig, Split,
};
use mote::synthdata::{generate_split, SyntheticData};
use mote::{Error, Result};

/// Mixture-of-temporal-experts training and evaluation on synthetic video data.
#[derive(Parser)]
#[command(name = "mote", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and write it to a directory.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, evaluate, and write checkpoint.json, deployed.json, report.json and timing.json.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        inference: InferenceArgs,
        /// Dataset written by `gen-data`; its spec and seed replace the config's.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one or more splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// close, zeroshot, mixed or fewshot:K. Repeatable; defaults to the first three.
        #[arg(long = "split")]
        splits: Vec<String>,
        #[command(flatten)]
        inference: InferenceArgs,
        /// Dataset written by `gen-data`; otherwise regenerated from the checkpoint's config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for eval.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a cartesian grid of configs and write ablation.json and table.txt.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a table from report.json or ablation.json files.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_route: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed_data {
            c.seeds.data = s;
        }
        if let Some(s) = self.seed_init {
            c.seeds.init = s;
        }
        if let Some(s) = self.seed_route {
            c.seeds.route = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Merge,
    Ensemble,
    Random,
}

#[derive(Args)]
struct InferenceArgs {
    #[arg(long, value_enum)]
    tfm: Option<Switch>,
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
}

impl InferenceArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(t) = self.tfm {
            c.tfm.enabled = matches!(t, Switch::On);
        }
        if let Some(a) = self.aggregation {
            c.eval.aggregation = match a {
                AggregationArg::Merge => Aggregation::Merge,
                AggregationArg::Ensemble => Aggregation::Ensemble,
                AggregationArg::Random => Aggregation::Random,
            };
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn prepared_for(config: &mut RunConfig, data: Option<&Path>) -> Result<Prepared> {
    match data {
        Some(dir) => {
            let d = SyntheticData::load_dir(dir)?;
            config.data = d.spec.clone();
            config.seeds.data = d.split.seed;
            config.validate()?;
            Prepared::from_data(d)
        }
        None => Prepared::new(config),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { run, out } => {
            let c = run.load()?;
            let data = generate_split(&c.data, c.seeds.data)?;
            data.save_dir(&out)?;
            println!(
                "wrote {} train, {} close, {} zero-shot episodes to {}",
                data.train.len(),
                data.close_eval.len(),
                data.zeroshot_eval.len(),
                out.display()
            );
        }
        Command::Train {
            run,
            inference,
            data,
            out,
        } => {
            let mut c = run.load()?;
            inference.apply(&mut c);
            let prepared = prepared_for(&mut c, data.as_deref())?;
            create_dir(&out)?;
            write(&out.join("config.toml"), &c.to_toml())?;
            let (ckpt, report, timing) = run_on(&c, &prepared, Some(&out.join("divergence.json")))?;
            ckpt.save(&out.join("checkpoint.json"))?;
            ckpt.deployed()?.save(&out.join("deployed.json"))?;
            report.save(&out.join("report.json"))?;
            write(&out.join("timing.json"), &serde_json::to_string_pretty(&timing)?)?;
            print!("{}", table(&[(report.run_id.clone(), report)]));
        }
        Command::Eval {
            checkpoint,
            splits,
            inference,
            data,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut c = ckpt.config.clone();
            let prepared = prepared_for(&mut c, data.as_deref())?;
            if c.data != ckpt.config.data {
                return Err(Error::Config("dataset spec differs from the checkpoint's".into()));
            }
            inference.apply(&mut c);
            let settings = settings_for(&c);
            let names = if splits.is_empty() {
                vec!["close".to_string(), "zeroshot".into(), "mixed".into()]
            } else {
                splits
            };
            let parsed = names.iter().map(|s| s.parse::<Split>()).collect::<Result<Vec<_>>>()?;
            let mut metrics = BTreeMap::new();
            for split in parsed {
                metrics.insert(split.to_string(), evaluate_split(&ckpt, &prepared, split, &settings)?);
            }
            let json = serde_json::to_string_pretty(&metrics)?;
            println!("{json}");
            if let Some(dir) = out {
                create_dir(&dir)?;
                write(&dir.join("eval.json"), &json)?;
            }
        }
        Command::Ablate { run, grid, out } => {
            let c = run.load()?;
            let text = std::fs::read_to_string(&grid).map_err(|e| Error::Io { path: grid, source: e })?;
            let g = GridSpec::from_toml(&text)?;
            let report = ablate(&c, &g)?;
            create_dir(&out)?;
            write(&out.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
            let t = report.table();
            write(&out.join("table.txt"), &t)?;
            print!("{t}");
        }
        Command::Report { reports, out } => {
            let mut rows = Vec::new();
            for path in &reports {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                match serde_json::from_str::<EvalReport>(&text) {
                    Ok(r) => rows.push((path.display().to_string(), r)),
                    Err(_) => {
                        let a: mote::harness::AblationReport = serde_json::from_str(&text)?;
                        rows.extend(a.runs.into_iter().map(|r| (r.label, r.report)));
                    }
                }
            }
            let t = table(&rows);
            if let Some(p) = out {
                write(&p, &t)?;
            }
            print!("{t}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Divergence(_) => 3,
                _ => 1,
            })
        }
    }
}
