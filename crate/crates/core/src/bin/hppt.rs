use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hppt::digraph::{GraphDump, DEFAULT_TOL};
use hppt::harness::{self, Experiment, ExperimentConfig, Report, Strategy};
use hppt::metrics::majority_vote_part_count;
use hppt::stream::{generate_stream, PORCINE_CLASSES};
use hppt::{ClassId, HpptError, ParsingTree, Result};

#[derive(Parser)]
#[command(name = "hppt", version, about = "Hierarchical prompt trees for class-incremental segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config field, e.g. `--set refine.gamma=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    verbose: bool,
}

impl Common {
    fn load(&self, strategy: Option<&str>) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(s) = strategy {
            overrides.push(format!("strategy=\"{s}\""));
        }
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &overrides)?;
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        cfg.out
            .clone()
            .ok_or_else(|| HpptError::Config("no output directory; pass --out or set `out` in the config".into()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stream and write its manifest and samples.
    Generate(Common),
    /// Run one strategy over the stream.
    Run {
        #[command(flatten)]
        common: Common,
        /// hppt, seq_finetune, independent or joint.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Side-by-side table of two or more report.json files.
    Compare {
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump adjacency, transition matrix, stationary distribution and operator.
    GraphDemo {
        /// Tree JSON; defaults to the porcine layout with its last class as the new leaf.
        #[arg(long)]
        tree: Option<PathBuf>,
        /// Class id of the new leaf.
        #[arg(long)]
        class: Option<u16>,
        #[arg(long, default_value_t = 0.05)]
        gamma: f64,
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        self_loop: f64,
        #[arg(long, default_value_t = 200_000)]
        max_iter: usize,
    },
    /// Majority-vote part counts from a JSON file `{class: {count: frequency}}`.
    Vote { input: PathBuf },
    /// Hierarchical runs over several decay factors.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.2,0.5")]
        gammas: Vec<f64>,
    },
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run_command(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(common) => {
            let cfg = common.load(None)?;
            let out = common.out_dir(&cfg)?;
            let stream = generate_stream(&cfg.stream_config())?;
            stream.write_to_dir(&out)?;
            print_json(&json!({"out": out, "episodes": stream.episodes.len(), "classes": stream.classes.len()}))
        }
        Command::Run { common, strategy } => {
            let cfg = common.load(strategy.as_deref())?;
            let out = common.out_dir(&cfg)?;
            let strategy = cfg.strategy;
            let mut exp = Experiment::new(cfg)?;
            let output = exp.run(strategy)?;
            harness::write_outputs(&out, &exp, &output)?;
            if common.verbose {
                for line in output.trace.iter().filter(|v| v["kind"] == "refine") {
                    eprintln!("{}", serde_json::to_string(line)?);
                }
            }
            print_json(&json!({
                "out": out,
                "strategy": strategy,
                "bwt": output.report.bwt,
                "fwt": output.report.fwt,
                "audits_passed": output.report.audits_passed,
            }))
        }
        Command::Compare { reports, out } => {
            let parsed = reports
                .iter()
                .map(|p| {
                    let text = std::fs::read_to_string(p)?;
                    Ok(serde_json::from_str::<Report>(&text)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let table = harness::compare(&parsed)?;
            let mut csv = Vec::new();
            table.write_csv(&mut csv)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("comparison.csv"), &csv)?;
                std::fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&table)? + "\n")?;
            }
            print!("{}", String::from_utf8_lossy(&csv));
            Ok(())
        }
        Command::GraphDemo {
            tree,
            class,
            gamma,
            alpha,
            self_loop,
            max_iter,
        } => {
            let tree = match tree {
                Some(p) => ParsingTree::from_json(&std::fs::read_to_string(p)?)?,
                None => demo_tree()?,
            };
            let class = match class {
                Some(c) => ClassId(c),
                None => tree
                    .classes()
                    .last()
                    .ok_or_else(|| HpptError::Argument("tree has no leaves".into()))?,
            };
            let leaf = tree.leaf(class)?;
            let dump = GraphDump::build(&tree, leaf, gamma, alpha, self_loop, DEFAULT_TOL, max_iter)?;
            print_json(&dump)
        }
        Command::Vote { input } => {
            let text = std::fs::read_to_string(&input)?;
            let raw: BTreeMap<String, BTreeMap<String, u64>> = serde_json::from_str(&text)?;
            let names: Vec<&String> = raw.keys().collect();
            let mut responses = BTreeMap::new();
            for (i, (_, votes)) in raw.iter().enumerate() {
                let mut parsed = BTreeMap::new();
                for (k, &v) in votes {
                    let count: usize = k
                        .parse()
                        .map_err(|_| HpptError::Format(format!("part count {k:?} is not an integer")))?;
                    parsed.insert(count, v);
                }
                responses.insert(ClassId(i as u16 + 1), parsed);
            }
            let result = majority_vote_part_count(&responses)?;
            let named: BTreeMap<&String, usize> = result.iter().map(|(c, &n)| (names[c.0 as usize - 1], n)).collect();
            print_json(&named)
        }
        Command::Sweep { common, gammas } => {
            let cfg = common.load(Some(Strategy::Hppt.as_str()))?;
            let out = common.out_dir(&cfg)?;
            let pool = harness::thread_pool()?;
            let mut exp = Experiment::new(cfg)?;
            let rows = pool.install(|| exp.sweep_gamma(&gammas))?;
            write_sweep(&out, &rows)?;
            print_json(&rows)
        }
    }
}

fn write_sweep(dir: &Path, rows: &[harness::SweepRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
    let mut csv = String::from("gamma,old_leaf_displacement,bwt,fwt,mean_iou\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.gamma,
            fmt(r.old_leaf_displacement),
            fmt(r.bwt),
            fmt(r.fwt),
            r.mean_iou
        ));
    }
    std::fs::write(dir.join("sweep.csv"), csv)?;
    std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(rows)? + "\n")?;
    Ok(())
}

fn demo_tree() -> Result<ParsingTree> {
    let specs: Vec<(ClassId, usize)> = PORCINE_CLASSES
        .iter()
        .enumerate()
        .map(|(i, &(_, k))| (ClassId(i as u16 + 1), k))
        .collect();
    ParsingTree::new(3, 4, 16, &specs, 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let doc = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{doc}");
            ExitCode::from(if matches!(e, HpptError::Config(_)) { 2 } else { 1 })
        }
    }
}
