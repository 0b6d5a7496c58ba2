use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use aimc::analog::SeedPolicy;
use aimc::config::ExperimentConfig;
use aimc::error::{Error, Result};
use aimc::evalx;
use aimc::network::{self, graph::NetworkSpec, hwa_train};
use aimc::pipeline;
use aimc::rng::derive_seed;
use aimc::synthdata::{gen_sample, Sample};
use aimc::tensor::Tensor;

/// Analog in-memory-computing simulator for toy segmentation networks.
#[derive(Parser)]
#[command(name = "aimc", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Trained checkpoint (required by sweep/uncertainty).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cap internal parallelism; default = available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Master seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic train/test datasets plus a manifest.
    GenData,
    /// Tile-mapping report (utilization, reuse, parameters) for the configured model.
    Analyze,
    /// Train the configured model; writes checkpoint.json and history.csv.
    Train,
    /// Programming-noise sweep of a checkpoint over the test set.
    Sweep,
    /// Monte-Carlo uncertainty maps and pooled density for a checkpoint.
    Uncertainty,
    /// Pipelined vs sequential latency model for the configured model.
    Pipeline,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    fs::create_dir_all(&cfg.output_dir)?;
    // Resolved-config echo, written before any long computation.
    fs::write(cfg.output_dir.join("resolved_config.toml"), cfg.to_toml()?)?;

    match cli.cmd {
        Cmd::GenData => cmd_gen_data(&cfg),
        Cmd::Analyze => cmd_analyze(&cfg),
        Cmd::Train => cmd_train(&cfg),
        Cmd::Sweep => cmd_sweep(&cfg, cli),
        Cmd::Uncertainty => cmd_uncertainty(&cfg, cli),
        Cmd::Pipeline => cmd_pipeline(&cfg),
    }
}

/// Train split uses sample indices [0, n_train); test continues at n_train,
/// so the two draws never collide for a given data seed.
fn train_split(cfg: &ExperimentConfig) -> Vec<Sample> {
    let d = &cfg.data;
    (0..d.n_train as u64)
        .map(|i| gen_sample(d.h, d.w, d.difficulty, d.seed, i))
        .collect()
}

fn test_split(cfg: &ExperimentConfig) -> Vec<Sample> {
    let d = &cfg.data;
    (0..d.n_test as u64)
        .map(|i| gen_sample(d.h, d.w, d.difficulty, d.seed, d.n_train as u64 + i))
        .collect()
}

fn load_required_checkpoint(cli: &Cli) -> Result<NetworkSpec> {
    let path = cli
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("this command requires --checkpoint"))?;
    NetworkSpec::load_checkpoint(path)
}

fn write_gray8(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(t)?;
    let pixels: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::shape("image buffer size mismatch"))?;
    img.save(path).map_err(|e| Error::config(format!("png write {}: {e}", path.display())))
}

/// 16-bit map with [0, 0.5] stretched over the full sample range.
fn write_uncertainty_png(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(t)?;
    let pixels: Vec<u16> = t
        .data()
        .iter()
        .map(|&v| ((v / 0.5).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, pixels)
            .ok_or_else(|| Error::shape("image buffer size mismatch"))?;
    img.save(path).map_err(|e| Error::config(format!("png write {}: {e}", path.display())))
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        s => Err(Error::shape(format!("expected a single-plane image, got {s:?}"))),
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.output_dir.join("data");
    fs::create_dir_all(&dir)?;

    #[derive(serde::Serialize)]
    struct ManifestEntry {
        split: &'static str,
        index: u64,
        seed: u64,
        image: String,
        mask: String,
        fg_fraction: f64,
    }
    #[derive(serde::Serialize)]
    struct Manifest {
        h: usize,
        w: usize,
        difficulty: f64,
        seed: u64,
        samples: Vec<ManifestEntry>,
    }

    let mut samples = Vec::new();
    for (split, set) in [("train", train_split(cfg)), ("test", test_split(cfg))] {
        for s in set {
            let img_name = format!("{split}_{:04}_img.png", s.index);
            let mask_name = format!("{split}_{:04}_mask.png", s.index);
            write_gray8(&dir.join(&img_name), &s.image)?;
            write_gray8(&dir.join(&mask_name), &s.mask)?;
            let fg = s.mask.data().iter().sum::<f64>() / s.mask.len() as f64;
            samples.push(ManifestEntry {
                split,
                index: s.index,
                seed: s.seed,
                image: img_name,
                mask: mask_name,
                fg_fraction: fg,
            });
        }
    }
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            h: cfg.data.h,
            w: cfg.data.w,
            difficulty: cfg.data.difficulty,
            seed: cfg.data.seed,
            samples,
        },
    )?;
    println!(
        "wrote {} train + {} test samples to {}",
        cfg.data.n_train,
        cfg.data.n_test,
        dir.display()
    );
    Ok(())
}

fn build_model(cfg: &ExperimentConfig) -> Result<NetworkSpec> {
    network::build_preset(
        cfg.model.preset_id,
        cfg.model.width_scale,
        cfg.model.attention,
        derive_seed(cfg.seed, "model-init", 0),
    )
}

fn cmd_analyze(cfg: &ExperimentConfig) -> Result<()> {
    let net = build_model(cfg)?;
    let report = network::analyze_network(&net, cfg.tiles, cfg.data.h, cfg.data.w)?;
    let rows: Vec<String> = report
        .layers
        .iter()
        .map(|l| {
            format!(
                "{},{},{},{},{},{},{}",
                l.layer_id, l.weight_rows, l.weight_cols, l.tiles_used, l.utilization, l.reuse,
                l.weight_rows * l.weight_cols
            )
        })
        .collect();
    write_csv(
        &cfg.output_dir.join("mapping_report.csv"),
        "layer,weight_rows,weight_cols,tiles_used,utilization,reuse,mapped_params",
        &rows,
    )?;
    write_json(&cfg.output_dir.join("mapping_summary.json"), &report)?;
    println!(
        "{}: avg tile utilization {:.4}, avg reuse {:.1}, params {}, tiles {}",
        net.preset_id, report.avg_utilization, report.avg_reuse, report.total_params,
        report.total_tiles
    );
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let data: Vec<(Tensor, Tensor)> = train_split(cfg)
        .into_iter()
        .map(|s| (s.image, s.mask))
        .collect();
    let mut net = build_model(cfg)?;
    let mut tcfg = cfg.train;
    // All run-level randomness hangs off the master seed.
    tcfg.seed = derive_seed(cfg.seed, "train", tcfg.seed);
    let history = hwa_train(&mut net, &data, &tcfg)?;

    let ckpt_path = cfg.output_dir.join("checkpoint.json");
    net.save_checkpoint(&ckpt_path)?;
    let rows: Vec<String> = history
        .iter()
        .map(|e| format!("{},{},{}", e.epoch, e.mean_loss, e.train_dice))
        .collect();
    write_csv(&cfg.output_dir.join("history.csv"), "epoch,mean_loss,train_dice", &rows)?;
    let last = history.last().expect("validated epochs >= 1");
    println!(
        "trained {} for {} epochs: final loss {:.4}, train dice {:.4} -> {}",
        net.preset_id,
        history.len(),
        last.mean_loss,
        last.train_dice,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, cli: &Cli) -> Result<()> {
    let net = load_required_checkpoint(cli)?;
    let data = test_split(cfg);
    let result = evalx::noise_sweep(
        &net,
        &data,
        &cfg.sweep.sigmas,
        cfg.sweep.n_seeds,
        &cfg.noise,
        cfg.tiles,
        derive_seed(cfg.seed, "sweep", 0),
    )?;
    let rows: Vec<String> = result
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.preset_id, r.sigma_prog, r.mean_dice, r.std_dice, r.dice_drop, r.n_seeds
            )
        })
        .collect();
    write_csv(
        &cfg.output_dir.join("sweep.csv"),
        "preset,sigma,mean_dice,std_dice,dice_drop,n_seeds",
        &rows,
    )?;
    for r in &result.rows {
        println!(
            "sigma {:>5}: dice {:.4} +/- {:.4} (drop {:.4})",
            r.sigma_prog, r.mean_dice, r.std_dice, r.dice_drop
        );
    }
    Ok(())
}

fn cmd_uncertainty(cfg: &ExperimentConfig, cli: &Cli) -> Result<()> {
    let net = load_required_checkpoint(cli)?;
    let data = test_split(cfg);
    let mut mc_cfg = cfg.noise;
    mc_cfg.seed_policy = SeedPolicy::FreshPerPass;
    let maps_dir = cfg.output_dir.join("uncertainty_maps");
    fs::create_dir_all(&maps_dir)?;

    let mut maps = Vec::with_capacity(data.len());
    let mut per_image_mean = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let map = evalx::mc_uncertainty(
            &net,
            &s.image,
            cfg.uncertainty.n_samples,
            &mc_cfg,
            cfg.tiles,
            derive_seed(cfg.seed, "uncertainty", i as u64),
        )?;
        write_uncertainty_png(&maps_dir.join(format!("map_{i:04}.png")), &map.std)?;
        per_image_mean.push(map.mean_value());
        maps.push(map);
    }
    let density = evalx::uncertainty_density(&maps, cfg.uncertainty.n_bins)?;
    let rows: Vec<String> = density
        .bins
        .iter()
        .map(|b| format!("{},{},{}", b.bin_left, b.bin_right, b.mass))
        .collect();
    write_csv(&cfg.output_dir.join("density.csv"), "bin_left,bin_right,mass", &rows)?;

    #[derive(serde::Serialize)]
    struct Summary<'a> {
        preset: String,
        n_samples: usize,
        sigma_prog: f64,
        pooled_mean_std: f64,
        pooled_median_std: f64,
        pooled_p95_std: f64,
        per_image_mean_std: &'a [f64],
    }
    write_json(
        &cfg.output_dir.join("uncertainty_summary.json"),
        &Summary {
            preset: net.preset_id.to_string(),
            n_samples: cfg.uncertainty.n_samples,
            sigma_prog: mc_cfg.sigma_prog,
            pooled_mean_std: density.mean,
            pooled_median_std: density.median,
            pooled_p95_std: density.p95,
            per_image_mean_std: &per_image_mean,
        },
    )?;
    println!(
        "pooled uncertainty over {} images: mean {:.5}, median {:.5}, p95 {:.5}",
        data.len(),
        density.mean,
        density.median,
        density.p95
    );
    Ok(())
}

fn cmd_pipeline(cfg: &ExperimentConfig) -> Result<()> {
    let net = build_model(cfg)?;
    let hw = cfg.pipeline.input_hw;
    let report = network::analyze_network(&net, cfg.tiles, hw, hw)?;
    let stages = pipeline::stage_times(&report, &cfg.pipeline.timing);

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &k in &cfg.pipeline.k_values {
        let r = pipeline::pipeline_report(&stages, k)?;
        rows.push(format!(
            "{},{},{},{},{},{}",
            k,
            r.latency_pipelined,
            r.latency_sequential,
            r.throughput_pipelined,
            r.throughput_sequential,
            r.speedup
        ));
        reports.push(r);
    }
    write_csv(
        &cfg.output_dir.join("pipeline.csv"),
        "k,latency_pipelined,latency_sequential,throughput_pipelined,throughput_sequential,speedup",
        &rows,
    )?;
    write_json(&cfg.output_dir.join("pipeline.json"), &reports)?;
    let last = reports.last().expect("validated k_values non-empty");
    println!(
        "{} stages, K={}: pipelined {:.3e} s vs sequential {:.3e} s (speedup {:.2}x)",
        stages.len(),
        last.k,
        last.latency_pipelined,
        last.latency_sequential,
        last.speedup
    );
    Ok(())
}
