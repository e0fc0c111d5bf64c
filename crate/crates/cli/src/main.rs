use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use mltn_cli::commands::{cmd_bench, cmd_crossval, cmd_inspect, cmd_synth, cmd_train};
use mltn_cli::{DataSection, ModelKind, TrainConfig};

#[derive(Parser)]
#[command(name = "mltn", version, about = "Multi-layered tensor network classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on one validation fold.
    Train(Overrides),
    /// Train once per fold and report mean ± std AUROC.
    Crossval(Overrides),
    /// Cost estimates, multiply counts and epoch times for several models.
    Bench {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated model list.
        #[arg(long, value_delimiter = ',', default_value = "mltn,lotenet,tenetx,mlp")]
        models: Vec<String>,
        /// Images in the timed synthetic batch.
        #[arg(long, default_value_t = 64)]
        images: usize,
    },
    /// Print parameter counts and the per-layer dimension chain.
    Inspect {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
    },
    /// Write a synthetic blob dataset as IDX files.
    Synth {
        #[arg(long, default_value_t = 640)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_delimiter = ',')]
    strides: Option<Vec<usize>>,
    #[arg(long)]
    bond: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl Overrides {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                TrainConfig::from_toml(&text)?
            }
            None => TrainConfig::default(),
        };
        if let Some(m) = &self.model {
            c.model.kind = ModelKind::parse(m)?;
        }
        if let Some(s) = &self.strides {
            c.model.strides = s.clone();
        }
        if let Some(b) = self.bond {
            c.model.bond_dim = b;
        }
        if let Some(lr) = self.lr {
            c.train.lr = Some(lr);
        }
        if let Some(b) = self.batch {
            c.train.batch_size = b;
        }
        if let Some(e) = self.epochs {
            c.train.max_epochs = e;
        }
        if let Some(p) = self.patience {
            c.train.patience = p;
        }
        if let Some(f) = self.folds {
            c.train.folds = f;
        }
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        if self.clip.is_some() {
            c.train.clip_norm = self.clip;
        }
        Ok(c)
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train(o) => {
            let config = o.resolve()?;
            let s = cmd_train(&config, &o.out)?;
            println!(
                "{} fold {}: best epoch {} of {}, val acc {:.4}, val AUROC {:.4}, {:.3} s/epoch",
                s.model, s.fold, s.best_epoch, s.epochs_run, s.best_val_acc, s.best_val_auroc, s.mean_epoch_seconds
            );
            println!("wrote {}", o.out.display());
        }
        Command::Crossval(o) => {
            let config = o.resolve()?;
            let s = cmd_crossval(&config, &o.out)?;
            for f in &s.folds {
                println!("fold {}: val AUROC {:.4} (best epoch {})", f.fold, f.best_val_auroc, f.best_epoch);
            }
            println!("{}", s.table_row(config.model.kind.name()));
        }
        Command::Bench { overrides, models, images } => {
            let base = overrides.resolve()?;
            let configs = models
                .iter()
                .map(|m| {
                    let mut c = base.clone();
                    c.model.kind = ModelKind::parse(m)?;
                    if c.model.kind == ModelKind::Lotenet && c.model.strides.len() > 1 {
                        c.model.strides.pop();
                    }
                    Ok(c)
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let rows = cmd_bench(&configs, images, Some(&overrides.out))?;
            println!("{}", mltn_cli::commands::BENCH_HEADER);
            for r in rows {
                println!("{}", r.csv_row());
            }
        }
        Command::Inspect { overrides, height, width } => {
            let mut config = overrides.resolve()?;
            if let DataSection::Synth { height: h, width: w, .. } = &mut config.data {
                (*h, *w) = (height, width);
            }
            for line in cmd_inspect(&config, height, width)? {
                println!("{line}");
            }
        }
        Command::Synth { count, height, width, seed, out } => {
            fs::create_dir_all(&out)?;
            let (img, lab) = (out.join("images.idx"), out.join("labels.idx"));
            cmd_synth(count, height, width, seed, &img, &lab)?;
            println!("wrote {} and {}", img.display(), lab.display());
        }
    }
    Ok(())
}
