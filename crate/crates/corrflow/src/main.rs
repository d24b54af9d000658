//! Command-line interface: self tests, gradient sweeps, synthetic
//! training, evaluation, and pairwise inference.
//!
//! Exit codes: 0 success, 1 contract/format error, 2 numeric error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use corrflow::check;
use corrflow::error::{Error, Result};
use corrflow::harness::{
    apply_config, evaluate, flow_to_color, gen_synthetic_pair, read_ppm, train, write_flo,
    write_ppm, EvalSpec, TrainConfig,
};
use corrflow::pyramid::{load_checkpoint, save_checkpoint, Model};
use corrflow::tensor::{Graph, Precision};

#[derive(Parser)]
#[command(name = "corrflow", about = "Dense correspondence with joint feature/cost aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the algebraic-invariant, equivariance, and oracle suites
    Selftest {
        /// randomized trials per invariant
        #[arg(long, default_value_t = 200)]
        trials: u64,
    },
    /// Finite-difference gradient sweep over ops, a full attention
    /// block, and an end-to-end tiny model
    Gradcheck {
        /// random seeds per check
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Train on seeded synthetic warp pairs and write a checkpoint
    TrainSynthetic {
        /// key = value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// checkpoint output path
        #[arg(long, default_value = "corrflow.ckpt")]
        out: PathBuf,
        /// loss log output path (step<TAB>loss lines)
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a held-out synthetic set
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// report output path; stdout when omitted
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic warp pair as PPMs plus its ground-truth .flo
    MakePair {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Estimate flow between two P6 PPM images
    Infer {
        /// image whose grid the flow lives on
        first: PathBuf,
        /// image the flow points into
        second: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// .flo output path
        #[arg(long)]
        out: PathBuf,
        /// optional color-wheel rendering (P6 PPM)
        #[arg(long)]
        vis: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("corrflow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Selftest { trials } => selftest(trials),
        Command::Gradcheck { seeds } => gradcheck(seeds),
        Command::TrainSynthetic { config, out, log } => train_synthetic(config, out, log),
        Command::Eval { checkpoint, config, report } => eval_cmd(checkpoint, config, report),
        Command::MakePair { seed, config, out_dir } => make_pair(seed, config, out_dir),
        Command::Infer { first, second, checkpoint, out, vis } => {
            infer(first, second, checkpoint, out, vis)
        }
    }
}

fn make_pair(seed: u64, config: Option<PathBuf>, out_dir: PathBuf) -> Result<()> {
    let (cfg, _) = load_configs(config)?;
    let pair = gen_synthetic_pair(seed, cfg.model.image_size(), &cfg.warp)?;
    std::fs::create_dir_all(&out_dir)?;
    // the flow grid is the warped view, so it comes first for `infer`
    write_ppm(&pair.target, &out_dir.join("first.ppm"))?;
    write_ppm(&pair.source, &out_dir.join("second.ppm"))?;
    write_flo(&pair.gt_flow, &out_dir.join("gt.flo"))?;
    println!("pair ({}) written to {}", pair.descriptor, out_dir.display());
    Ok(())
}

fn load_configs(path: Option<PathBuf>) -> Result<(TrainConfig, EvalSpec)> {
    let mut train_cfg = TrainConfig::default();
    let mut eval_spec = EvalSpec::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(&p)?;
        apply_config(&text, &mut train_cfg, &mut eval_spec)?;
    }
    Ok((train_cfg, eval_spec))
}

fn report_results(results: &[check::CheckResult]) -> Result<()> {
    let mut failed = 0usize;
    for r in results {
        println!("{}", r.line());
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::numeric(format!("{failed} checks failed")));
    }
    Ok(())
}

fn selftest(trials: u64) -> Result<()> {
    let mut results = check::invariant_suite(trials)?;
    results.extend(check::equivariance_suite(3)?);
    results.extend(check::oracle_suite(trials.min(50))?);
    report_results(&results)
}

fn gradcheck(seeds: u64) -> Result<()> {
    let h = 1e-5;
    let mut results = check::gradcheck_ops(seeds, h, 1e-4)?;
    results.push(check::gradcheck_block(seeds.min(3), h, 1e-4)?);
    results.push(check::gradcheck_end_to_end(seeds.min(3), h, 1e-3)?);
    report_results(&results)
}

fn train_synthetic(config: Option<PathBuf>, out: PathBuf, log: Option<PathBuf>) -> Result<()> {
    let (cfg, _) = load_configs(config)?;
    println!(
        "training: steps={} size={} variant={} kernel={} seed={}",
        cfg.steps,
        cfg.model.image_size(),
        cfg.model.variant.name(),
        cfg.model.kernel.name(),
        cfg.seed
    );
    match cfg.precision {
        Precision::F32 => {
            let outcome = train::<f32>(&cfg)?;
            finish_training(outcome.model, &outcome.loss_log, outcome.aborted, &out, log)
        }
        Precision::F64 => {
            let outcome = train::<f64>(&cfg)?;
            let model = outcome.model.convert::<f32>()?;
            finish_training(model, &outcome.loss_log, outcome.aborted, &out, log)
        }
    }
}

fn finish_training(
    model: Model<f32>,
    loss_log: &str,
    aborted: Option<String>,
    out: &PathBuf,
    log: Option<PathBuf>,
) -> Result<()> {
    if let Some(path) = log {
        std::fs::write(&path, loss_log)?;
        println!("loss log written to {}", path.display());
    }
    save_checkpoint(&model, out)?;
    println!("checkpoint written to {}", out.display());
    match aborted {
        Some(msg) => Err(Error::numeric(format!(
            "{msg}; checkpoint holds the last good parameters"
        ))),
        None => Ok(()),
    }
}

fn eval_cmd(checkpoint: PathBuf, config: Option<PathBuf>, report: Option<PathBuf>) -> Result<()> {
    let (_, spec) = load_configs(config)?;
    let model = load_checkpoint(&checkpoint)?;
    let result = evaluate(&model, &spec)?;
    let text = result.render();
    match report {
        Some(path) => {
            std::fs::write(&path, &text)?;
            println!("report written to {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn infer(
    first: PathBuf,
    second: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
    vis: Option<PathBuf>,
) -> Result<()> {
    let model = load_checkpoint(&checkpoint)?;
    let img_a = read_ppm(&first)?;
    let img_b = read_ppm(&second)?;
    let side = model.cfg.image_size();
    if img_a.h != side || img_a.w != side || img_b.h != side || img_b.w != side {
        return Err(Error::contract(format!(
            "checkpoint expects {side}x{side} images, got {}x{} and {}x{}",
            img_a.w, img_a.h, img_b.w, img_b.h
        )));
    }
    let mut g: Graph<f32> = Graph::new();
    let outputs = model.forward(&mut g, &img_a, &img_b)?;
    let flow = outputs.final_flow.to_field(&g).rescale(side, side);
    write_flo(&flow, &out)?;
    println!("flow written to {}", out.display());
    if let Some(path) = vis {
        let max_mag = flow
            .uv
            .chunks(2)
            .map(|p| ((p[0] * p[0] + p[1] * p[1]) as f64).sqrt())
            .fold(0.0f64, f64::max)
            .max(1e-6);
        let bytes = flow_to_color(&flow, max_mag)?;
        std::fs::write(&path, bytes)?;
        println!("flow rendering written to {}", path.display());
    }
    Ok(())
}
