use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use rangeadapt::config::RunConfig;
use rangeadapt::data_io::{range_histogram, DatasetManifest};
use rangeadapt::dataset::{load_entry, load_split, simulate_to_dir};
use rangeadapt::detector::Detector;
use rangeadapt::checkpoint::Checkpoint;
use rangeadapt::experiment::{probe_features, run_variant, ComparisonTable, Variant};
use rangeadapt::gradsuite::run_suite;
use rangeadapt::lidar_sim::points_in_box;
use rangeadapt::train::{evaluate_detector, train_log_csv, Trainer};
use rangeadapt::Error;

#[derive(Parser)]
#[command(name = "rangeadapt", version, about = "Cross-range adaptation for LiDAR BEV detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a benchmark as KITTI-style files plus a manifest.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Training scenes.
        #[arg(long)]
        scenes: usize,
        /// Evaluation scenes.
        #[arg(long, default_value_t = 0)]
        eval_scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a detector, optionally without the global or local term.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_global: bool,
        #[arg(long)]
        no_local: bool,
        /// Overrides train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a detector checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to config.json next to the checkpoint, if present.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Range histograms and points-per-object by range.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        bin_width: f64,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to run.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Paired-seed baseline vs adapted runs.
    Compare {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Also run the local-only and global-only variants.
        #[arg(long)]
        ablation: bool,
        /// Also train a fresh near/far probe on each model's aligned features.
        #[arg(long)]
        probe: bool,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    /// The parsed config and the exact text to echo into the output directory.
    fn load(&self) -> Result<(RunConfig, String), Error> {
        load_config(self.config.as_deref())
    }
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, String), Error> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let cfg = RunConfig::from_json(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                other => other,
            })?;
            Ok((cfg, text))
        }
        None => {
            let cfg = RunConfig::default();
            let text = cfg.to_json();
            Ok((cfg, text))
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn cmd_simulate(config: &ConfigArg, out: &Path, scenes: usize, eval_scenes: usize, seed: u64) -> Result<(), Error> {
    let (cfg, text) = config.load()?;
    create_dir(out)?;
    write(&out.join("config.json"), text)?;
    let m = simulate_to_dir(out, &[("train", scenes), ("eval", eval_scenes)], seed, &cfg.scene, &cfg.lidar)?;
    info!("wrote {} scenes to {}", m.entries.len(), out.display());
    Ok(())
}

fn cmd_train(config: &ConfigArg, data: &Path, out: &Path, no_global: bool, no_local: bool, seed: Option<u64>) -> Result<(), Error> {
    let (cfg, text) = config.load()?;
    let mut train_cfg = cfg.train.clone().ablate(no_global, no_local);
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let manifest = DatasetManifest::read(data)?;
    manifest.validate_files()?;
    let train = load_split(&manifest, "train", &cfg.grid, &cfg.network)?;
    if train.is_empty() {
        return Err(Error::Input(format!("{}: no scenes in split \"train\"", data.display())));
    }
    create_dir(out)?;
    write(&out.join("config.json"), text)?;
    write(&out.join("seed.txt"), format!("{}\n", train_cfg.seed))?;
    let effective = RunConfig {
        train: train_cfg.clone(),
        ..cfg.clone()
    };
    write(&out.join("effective_config.json"), effective.to_json())?;

    let mut trainer = Trainer::new(train_cfg.clone(), cfg.network.clone(), cfg.grid, train.len())?;
    let log = trainer.run(&train, (train_cfg.steps / 20).max(1))?;
    write(&out.join("train_log.csv"), train_log_csv(&log))?;
    trainer.detector.to_checkpoint()?.write(&out.join("detector.ckpt"))?;
    if let Some(d) = &trainer.discriminator {
        d.to_checkpoint()?.write(&out.join("discriminator.ckpt"))?;
    }
    let eval = load_split(&manifest, "eval", &cfg.grid, &cfg.network)?;
    if eval.is_empty() {
        warn!("no \"eval\" split in {}; metrics not written", data.display());
    } else {
        let r = evaluate_detector(&trainer.detector, &eval, &cfg.grid, &cfg.eval)?;
        write(&out.join("metrics.csv"), r.metrics_csv())?;
        write(&out.join("pr.csv"), r.pr_csv())?;
        print!("{}", r.metrics_csv());
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, config: Option<&Path>, split: &str) -> Result<(), Error> {
    let sibling = checkpoint.parent().map(|p| p.join("config.json"));
    let config = config.map(Path::to_path_buf).or(sibling.filter(|p| p.is_file()));
    let (cfg, _) = load_config(config.as_deref())?;
    let det = Detector::from_checkpoint(&Checkpoint::read(checkpoint)?)?;
    let manifest = DatasetManifest::read(data)?;
    manifest.validate_files()?;
    let samples = load_split(&manifest, split, &cfg.grid, &det.config)?;
    let r = evaluate_detector(&det, &samples, &cfg.grid, &cfg.eval)?;
    create_dir(out)?;
    write(&out.join("metrics.csv"), r.metrics_csv())?;
    write(&out.join("pr.csv"), r.pr_csv())?;
    print!("{}", r.metrics_csv());
    Ok(())
}

fn cmd_stats(data: &Path, out: &Path, bin_width: f64) -> Result<(), Error> {
    if !(bin_width > 0.0) {
        return Err(Error::Config("--bin-width must be positive".into()));
    }
    let manifest = DatasetManifest::read(data)?;
    manifest.validate_files()?;
    let max_range = 80.0;
    let bins = (max_range / bin_width).ceil() as usize;
    let mut splits: Vec<String> = manifest.entries.iter().map(|e| e.split.clone()).collect();
    splits.dedup();
    let mut hist = String::from("split,bin_lo,bin_hi,count\n");
    let mut pts = vec![(0usize, 0usize); bins];
    for split in &splits {
        let mut objects = Vec::new();
        for e in manifest.split(split) {
            let (pc, objs) = load_entry(e)?;
            for o in &objs {
                let b = ((o.range() / bin_width) as usize).min(bins - 1);
                pts[b].0 += 1;
                pts[b].1 += points_in_box(&pc, &o.bbox);
            }
            objects.extend(objs);
        }
        for (i, c) in range_histogram(&objects, bin_width, max_range)?.iter().enumerate() {
            hist.push_str(&format!("{split},{},{},{c}\n", i as f64 * bin_width, (i + 1) as f64 * bin_width));
        }
    }
    let mut table = String::from("bin_lo,bin_hi,n_objects,mean_points\n");
    for (i, (n, total)) in pts.iter().enumerate() {
        let mean = if *n > 0 { format!("{:.2}", *total as f64 / *n as f64) } else { "NA".into() };
        table.push_str(&format!("{},{},{n},{mean}\n", i as f64 * bin_width, (i + 1) as f64 * bin_width));
    }
    create_dir(out)?;
    write(&out.join("range_histogram.csv"), &hist)?;
    write(&out.join("points_per_object.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(seed: u64, seeds: u64) -> Result<bool, Error> {
    let mut ok = true;
    for s in seed..seed + seeds.max(1) {
        let r = run_suite(s)?;
        println!("seed {s}");
        for c in &r.checks {
            println!("  {c}");
        }
        ok &= r.passed();
    }
    println!("{}", if ok { "gradcheck passed" } else { "gradcheck FAILED" });
    Ok(ok)
}

fn cmd_compare(config: &ConfigArg, data: &Path, out: &Path, seeds: u64, ablation: bool, probe: bool) -> Result<(), Error> {
    let (cfg, text) = config.load()?;
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let manifest = DatasetManifest::read(data)?;
    manifest.validate_files()?;
    let train = load_split(&manifest, "train", &cfg.grid, &cfg.network)?;
    let eval = load_split(&manifest, "eval", &cfg.grid, &cfg.network)?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Input(format!("{}: need both \"train\" and \"eval\" splits", data.display())));
    }
    create_dir(out)?;
    write(&out.join("config.json"), text)?;
    let variants: Vec<Variant> = if ablation {
        Variant::ALL.to_vec()
    } else {
        vec![Variant::Baseline, Variant::LocalGlobal]
    };
    let mut table = ComparisonTable::default();
    let mut probe_csv = String::from("variant,seed,near_recall,far_recall,balanced_accuracy\n");
    for seed in 0..seeds {
        for &v in &variants {
            let run = run_variant(v, seed, &cfg.train, &cfg.network, &cfg.grid, &cfg.eval, &train, &eval)?;
            let dir = out.join("runs").join(format!("{}_seed{seed}", v.name().replace(['+', ' '], "")));
            create_dir(&dir)?;
            write(&dir.join("seed.txt"), format!("{seed}\n"))?;
            write(&dir.join("train_log.csv"), run.log_csv())?;
            write(&dir.join("metrics.csv"), run.eval.metrics_csv())?;
            write(&dir.join("pr.csv"), run.eval.pr_csv())?;
            run.detector.to_checkpoint()?.write(&dir.join("detector.ckpt"))?;
            if probe {
                let p = probe_features(&run.detector, &cfg.grid, &train, &eval, &cfg.probe)?;
                probe_csv.push_str(&format!(
                    "{},{seed},{:.4},{:.4},{:.4}\n",
                    v.name(),
                    p.near_recall,
                    p.far_recall,
                    p.balanced_accuracy()
                ));
            }
            table.record(&run);
        }
    }
    let csv = table.to_csv();
    write(&out.join("comparison.csv"), &csv)?;
    if probe {
        write(&out.join("probe.csv"), &probe_csv)?;
    }
    let mut summary = String::from("band,iou,baseline,adapted,mean_diff\n");
    for band in &cfg.eval.bands {
        for &iou in &cfg.eval.ious {
            let d = table.paired_differences(Variant::LocalGlobal, Variant::Baseline, &band.name, iou);
            let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
            let mean_d = (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64);
            summary.push_str(&format!(
                "{},{iou},{},{},{}\n",
                band.name,
                fmt(table.mean(Variant::Baseline, &band.name, iou)),
                fmt(table.mean(Variant::LocalGlobal, &band.name, iou)),
                fmt(mean_d)
            ));
        }
    }
    write(&out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        e if e.is_data_error() => 3,
        Error::Input(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate {
            config,
            out,
            scenes,
            eval_scenes,
            seed,
        } => cmd_simulate(config, out, *scenes, *eval_scenes, *seed),
        Command::Train {
            config,
            data,
            out,
            no_global,
            no_local,
            seed,
        } => cmd_train(config, data, out, *no_global, *no_local, *seed),
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
            split,
        } => cmd_eval(checkpoint, data, out, config.as_deref(), split),
        Command::Stats { data, out, bin_width } => cmd_stats(data, out, *bin_width),
        Command::Gradcheck { seed, seeds } => match cmd_gradcheck(*seed, *seeds) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Compare {
            config,
            data,
            out,
            seeds,
            ablation,
            probe,
        } => cmd_compare(config, data, out, *seeds, *ablation, *probe),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
