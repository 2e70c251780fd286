//! `caspl` — command-line front door for the cascade prompt learning lab.
//!
//! Every subcommand reads one JSON run configuration (defaults apply when no
//! file is given), derives all randomness from the global seed, and writes
//! its artifacts under the output workspace. Finished artifacts are reused,
//! so the subcommands compose: `adapt` picks up the datasets, encoders, and
//! boosting checkpoint left behind by earlier invocations — or trains them
//! itself on first use. Same config + seed ⇒ byte-identical artifacts.
//!
//! Exit codes: 0 success, 2 bad configuration or flags, 3 I/O failure,
//! 4 violated internal contract.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use caspl_core::adapt::AdaptVariant;
use caspl_core::error::{Error, Result};
use caspl_core::experiment::{
    adapt_label, load_run_config, mean_std, run_ablate, run_report, AblateGrid, Pipeline,
    RunConfig, Workspace,
};

#[derive(Parser)]
#[command(
    name = "caspl",
    version,
    about = "Two-phase prompt learning on a desk-scale dual encoder",
    after_help = "Artifacts land under --out (or $CASPL_OUT); finished phases are reused."
)]
struct Cli {
    /// JSON run configuration; omit for the built-in desk-scale recipe.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the configuration's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output workspace root.
    #[arg(long, global = true, env = "CASPL_OUT", default_value = "caspl-out")]
    out: PathBuf,

    /// Worker threads for independent ablation cells (each cell itself runs
    /// single-threaded; results are identical for any worker count).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Emit SVG charts next to the metric files.
    #[arg(long, global = true)]
    plots: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the source and shifted datasets plus the separability probe.
    GenData,
    /// Contrastively pretrain the student and teacher encoders.
    Pretrain,
    /// Distill boosting prompts from the teacher on unlabeled images.
    Boost,
    /// Train adapting prompts few-shot, once per configured seed.
    Adapt {
        /// Prompt layout to train (defaults to the configuration's variant).
        #[arg(long)]
        variant: Option<AdaptVariant>,
        /// Labeled images per base class (defaults to the configuration).
        #[arg(long)]
        shots: Option<usize>,
        /// Train without the frozen boosting prompts (the baseline arm).
        #[arg(long)]
        no_cascade: bool,
    },
    /// Zero-shot accuracy, plain vs boosted, on the source and shifted domains.
    Eval,
    /// Run one ablation grid and write its CSV.
    Ablate {
        /// One of: depth-grid, length, unlabeled, equal-vlp, cascade.
        grid: AblateGrid,
    },
    /// Collect every report and grid in the workspace into a summary.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_run_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.plots {
        cfg.plots = true;
    }
    let ws = Workspace::new(&cli.out);

    match cli.cmd {
        Cmd::GenData => gen_data(&cfg, &ws),
        Cmd::Pretrain => pretrain(&cfg, &ws),
        Cmd::Boost => boost(&cfg, &ws),
        Cmd::Adapt { variant, shots, no_cascade } => {
            if let Some(v) = variant {
                cfg.adapt.variant = v;
            }
            if let Some(k) = shots {
                cfg.shots = k;
            }
            adapt(&cfg, &ws, !no_cascade)
        }
        Cmd::Eval => eval(&cfg, &ws),
        Cmd::Ablate { grid } => {
            let path = run_ablate(&cfg, &ws, grid, cli.workers)?;
            println!("{grid}: {}", path.display());
            Ok(())
        }
        Cmd::Report => {
            let (path, table) = run_report(&ws)?;
            print!("{table}");
            println!("summary: {}", path.display());
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let p = Pipeline::new(cfg, ws)?;
    let (source, shifted) = p.gen_data()?;
    for ds in [&source, &shifted] {
        let spec = ds.spec();
        println!(
            "{}: {} classes, {} train / {} test per class, {}x{} px",
            spec.id,
            spec.num_classes(),
            spec.train_per_class,
            spec.test_per_class,
            spec.image_size,
            spec.image_size
        );
    }
    let witness_path = ws.path("data/probe.json");
    let text = std::fs::read_to_string(&witness_path).map_err(|e| Error::io(&witness_path, e))?;
    let witness: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Io { path: witness_path, detail: e.to_string() })?;
    println!(
        "pixel probe: {:.2}% on source, {:.2}% on the shift",
        witness["source_acc"].as_f64().unwrap_or(f64::NAN) * 100.0,
        witness["shifted_acc"].as_f64().unwrap_or(f64::NAN) * 100.0
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let p = Pipeline::new(cfg, ws)?;
    let (student, teacher) = p.pretrain()?;
    for (role, model) in [("student", &student), ("teacher", &teacher)] {
        println!(
            "{role}: depth {}, width {}, {} parameters -> models/{role}.bin",
            model.cfg().depth,
            model.cfg().width,
            model.num_scalars()
        );
    }
    Ok(())
}

fn boost(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let p = Pipeline::new(cfg, ws)?;
    let (text, vision) = p.boost()?;
    println!(
        "boosting prompts: length {}, depth {}, {} parameters -> prompts/boost.bin",
        text.length(),
        text.depth(),
        text.parameter_count() + vision.parameter_count()
    );
    Ok(())
}

fn adapt(cfg: &RunConfig, ws: &Workspace, cascade: bool) -> Result<()> {
    let p = Pipeline::new(cfg, ws)?;
    let variant = cfg.adapt.variant;
    let mut base = Vec::with_capacity(cfg.seeds);
    let mut novel = Vec::with_capacity(cfg.seeds);
    let mut hm = Vec::with_capacity(cfg.seeds);
    for run in 0..cfg.seeds {
        let report = p.adapt(variant, run, cascade)?;
        println!(
            "{}: base {:.2} novel {:.2} hm {:.2}",
            adapt_label(variant, cfg.shots, run, cascade),
            report.base_acc,
            report.novel_acc,
            report.harmonic_mean
        );
        base.push(report.base_acc);
        novel.push(report.novel_acc);
        hm.push(report.harmonic_mean);
    }
    let (bm, bs) = mean_std(&base)?;
    let (nm, ns) = mean_std(&novel)?;
    let (hmm, hms) = mean_std(&hm)?;
    println!(
        "{variant} over {} seed(s): base {bm:.2} ± {bs:.2}, novel {nm:.2} ± {ns:.2}, \
         hm {hmm:.2} ± {hms:.2}",
        cfg.seeds
    );
    Ok(())
}

fn eval(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let p = Pipeline::new(cfg, ws)?;
    let (on_source, on_shifted) = p.eval_zero_shot()?;
    for (name, r) in [("source", &on_source), ("shifted", &on_shifted)] {
        println!(
            "{name} zero-shot: plain {:.2}%, boosted {:.2}%",
            r.plain_acc, r.boosted_acc
        );
    }
    Ok(())
}
