use clap::{Parser, Subcommand};
use isnet::checkpoint::Checkpoint;
use isnet::config::{parse_dataset_spec, parse_train_config};
use isnet::data::generate_dataset;
use isnet::error::{IsnetError, Result};
use isnet::model::Variant;
use isnet::probes::{run_probes, ProbeModule, PASS_THRESHOLD};
use isnet::profiler::{
    giga, mega, profile_variant, variant_row_name, ProbeShape, COMPETITORS, DEFAULT_PROBE,
    REFERENCE_ROWS,
};
use isnet::train::{ablation, evaluate_checkpoint, train};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "isnet", about = "Context-aggregation segmentation trainer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file
    GenData {
        /// Dataset spec file (key = value lines)
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset root
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant
    Train {
        /// Training config file (key = value lines)
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to resume from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root directory
        #[arg(long)]
        data: PathBuf,
        /// Split name (train or val)
        #[arg(long)]
        split: String,
    },
    /// Train all four variants and report held-out mIoU per row
    Ablation {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference verification of module gradients
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Analytic parameter/FLOP accounting at a probe shape
    Profile {
        /// Probe shape NxCxHxW
        #[arg(long, default_value = "1x2048x128x128")]
        shape: String,
        /// Emit a tab-separated table instead of aligned text
        #[arg(long)]
        tsv: bool,
    },
}

fn read_file(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        IsnetError::data(format!("cannot read {}: {e}", path.display()))
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec = parse_dataset_spec(&read_file(&spec)?)?;
            generate_dataset(&spec, &out)?;
            println!(
                "wrote {} samples ({} train / {} val) under {}",
                spec.count,
                spec.count.div_ceil(2),
                spec.count / 2,
                out.display()
            );
        }
        Command::Train { config, resume } => {
            let config = parse_train_config(&read_file(&config)?)?;
            let resumed = match &resume {
                Some(path) => Some(Checkpoint::load(path)?),
                None => None,
            };
            let outcome = train(&config, resumed.as_ref())?;
            for line in &outcome.log {
                println!("{line}");
            }
            if let Some(miou) = outcome.final_miou {
                println!("final mIoU\t{miou:.4}");
            }
            if !config.out_dir.as_os_str().is_empty() {
                println!(
                    "checkpoint written to {}",
                    config.out_dir.join("checkpoint.isnc").display()
                );
            }
        }
        Command::Eval { checkpoint, data, split } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cm = evaluate_checkpoint(&ckpt, &data, &split)?;
            print!("{}", cm.report()?);
        }
        Command::Ablation { config } => {
            let config = parse_train_config(&read_file(&config)?)?;
            let rows = ablation(&config)?;
            println!("variant\tmIoU\treference mIoU (published, full scale)");
            let reference = [36.96, 42.50, 42.89, 44.09];
            for ((variant, miou), reference) in rows.iter().zip(reference) {
                println!("{}\t{miou:.4}\t{reference:.2}", variant.name());
            }
        }
        Command::Gradcheck { module } => {
            let which = ProbeModule::parse(&module)?;
            let reports = run_probes(which)?;
            let mut worst = 0.0f64;
            for (name, report) in &reports {
                let verdict = if report.max_rel_err <= PASS_THRESHOLD { "pass" } else { "FAIL" };
                println!(
                    "{name}: {verdict} (max rel err {:.3e}, {} components)",
                    report.max_rel_err, report.components
                );
                worst = worst.max(report.max_rel_err);
            }
            if worst > PASS_THRESHOLD {
                return Err(IsnetError::Internal(format!(
                    "gradient check failed: max rel err {worst:.3e} above {PASS_THRESHOLD:e}"
                )));
            }
        }
        Command::Profile { shape, tsv } => {
            let shape = ProbeShape::parse(&shape)?;
            let sep = if tsv { "\t" } else { "  " };
            println!("module{sep}params (M){sep}FLOPs (G)");
            for variant in [Variant::Ilcm, Variant::Slcm, Variant::Isnet] {
                let report = profile_variant(variant, &shape)?;
                println!(
                    "{}{sep}{:.2}{sep}{:.2}",
                    variant_row_name(variant),
                    mega(report.total_params()),
                    giga(report.total_flops())
                );
            }
            if shape == DEFAULT_PROBE {
                println!();
                println!("published rows at this probe shape (internal config not public):");
                for (name, params_m, flops_g) in REFERENCE_ROWS {
                    let own = profile_variant(
                        match name {
                            "ILCM" => Variant::Ilcm,
                            "SLCM" => Variant::Slcm,
                            _ => Variant::Isnet,
                        },
                        &shape,
                    )?;
                    println!(
                        "{name}{sep}{params_m:.2}{sep}{flops_g:.2}{sep}(deviation: {:+.2} M, {:+.2} G)",
                        mega(own.total_params()) - params_m,
                        giga(own.total_flops()) - flops_g
                    );
                }
                println!();
                println!("competitor constants for context:");
                for (name, params_m, flops_g) in COMPETITORS {
                    println!("{name}{sep}{params_m:.2}{sep}{flops_g:.2}");
                }
            }
        }
    }
    Ok(())
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
