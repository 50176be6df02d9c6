use clap::{Parser, Subcommand};
use ctnav::pipeline::{self, Manifest, RunConfig};
use ctnav::Error;
use std::path::PathBuf;
use std::process::ExitCode;

/// Roadmap-guided data collection, transformer training and evaluation.
///
/// Any `--section.field value` flag overrides the matching config field.
#[derive(Parser, Debug)]
#[command(name = "ctnav", version)]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory, overriding `out_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Sample the stored training worlds.
    GenWorlds,
    /// Build a roadmap for every stored world.
    BuildPrm,
    /// Collect roadmap-guided trajectories.
    Collect,
    /// Train a transformer on the collected data.
    Train {
        /// Train without return tokens.
        #[arg(long)]
        bc: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Start from this checkpoint's parameters.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train the value network that sets the initial return.
    TrainValue,
    /// Gather fail/recovery pairs and continue training.
    Finetune {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate trained models on shared episodes.
    Eval,
    /// Plot one evaluation episode as SVG.
    Render {
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-target a trained model to the configured robot.
    TransferInit {
        #[arg(long)]
        source: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Splits `--a.b value` pairs off the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--") {
            Some(key) if key.contains('.') && !key.contains('=') && !key.starts_with('.') => {
                let v = it.next().ok_or_else(|| format!("missing value for --{key}"))?;
                overrides.push((key.to_string(), v));
            }
            Some(kv) if kv.contains('=') && kv.split('=').next().is_some_and(|k| k.contains('.')) => {
                let (k, v) = kv.split_once('=').expect("checked");
                overrides.push((k.to_string(), v.to_string()));
            }
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn init_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("CTNAV_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("CTNAV_THREADS must be a count, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn report(m: &Manifest) {
    for o in &m.outputs {
        println!("wrote {} ({})", o.path.display(), &o.sha256[..12]);
    }
}

fn run(cli: Cli, mut overrides: Vec<(String, String)>) -> Result<(), Error> {
    init_threads()?;
    if let Some(d) = &cli.out_dir {
        overrides.push(("out_dir".into(), d.display().to_string()));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let m = match cli.cmd {
        Cmd::GenWorlds => pipeline::gen_worlds(&cfg)?,
        Cmd::BuildPrm => pipeline::build_prms(&cfg)?,
        Cmd::Collect => pipeline::collect(&cfg)?,
        Cmd::Train { bc, seed, init } => pipeline::train(&cfg, bc, seed, init.as_deref())?,
        Cmd::TrainValue => pipeline::train_value_net(&cfg)?,
        Cmd::Finetune { seed } => pipeline::finetune(&cfg, seed)?,
        Cmd::Eval => {
            let (m, out) = pipeline::evaluate(&cfg)?;
            print!("{}", out.summary.to_table());
            if let Some(g) = out.forgetting {
                println!(
                    "forgetting gate: CT {:.2} -> F-CT {:.2} ({})",
                    g.ct,
                    g.f_ct,
                    if g.passed { "pass" } else { "FAIL" }
                );
            }
            m
        }
        Cmd::Render { index, out } => pipeline::render(&cfg, index, out.as_deref())?,
        Cmd::TransferInit { source, seed } => pipeline::transfer(&cfg, &source, seed)?,
    };
    report(&m);
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_split() {
        let args = ["ctnav", "--train.lr", "1e-4", "train", "--seed", "2", "--eval.protocol.n_envs=3"];
        let (rest, ov) = split_overrides(args.iter().map(|s| s.to_string()).collect()).unwrap();
        assert_eq!(rest, vec!["ctnav", "train", "--seed", "2"]);
        assert_eq!(ov, vec![("train.lr".into(), "1e-4".into()), ("eval.protocol.n_envs".into(), "3".into())]);
        assert!(split_overrides(vec!["ctnav".into(), "--a.b".into()]).is_err());
    }
}
