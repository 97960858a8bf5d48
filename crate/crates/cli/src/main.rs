//! `r2cs`: train, run, and inspect block-based compressive-sensing models.
//!
//! Subcommands: `train`, `reconstruct`, `evaluate`, `gradcheck`, `inspect`.
//! All commands are deterministic for a fixed `--seed`, and every file the
//! tool writes lands atomically (write-temp-then-rename).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use r2cs_core::bundle::{build_variant, ModelBundle};
use r2cs_core::config::parse_config;
use r2cs_core::gradcheck;
use r2cs_core::image_file::{crop_spatial, load_image, pad_reflect, save_image};
use r2cs_core::measurement::{compose_swap, CodedMask, MaskMode};
use r2cs_core::metrics::{clamp_unit, evaluate};
use r2cs_core::model_file;
use r2cs_core::strategy::reconstruct_batch;
use r2cs_core::tensor::Tensor;
use r2cs_core::training::{extract_patches, train};

#[derive(Parser)]
#[command(name = "r2cs", about = "Block-based compressive sensing toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key=value config file.
    Train {
        /// Path to the run configuration.
        config: PathBuf,
    },
    /// Reconstruct images through a trained model.
    Reconstruct {
        /// Trained model file.
        #[arg(long)]
        model: PathBuf,
        /// Images to reconstruct.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Measurement noise level.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Refinement steps; 0 means the model's trained depth.
        #[arg(long, default_value_t = 0)]
        steps: usize,
        /// Noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the coded mask preset (dct, identity); the measurement
        /// weights are recomposed so outputs match the trained preset.
        #[arg(long)]
        mask: Option<String>,
        /// Write each refinement step's first latent channel as a grayscale
        /// PNG into this directory.
        #[arg(long, value_name = "DIR")]
        dump_latent: Option<PathBuf>,
        /// Border handling when the image does not tile into blocks.
        #[arg(long, value_parser = ["reflect"])]
        pad: Option<String>,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Score a trained model over a directory of images.
    Evaluate {
        /// Trained model file.
        #[arg(long)]
        model: PathBuf,
        /// Directory of PNG/PPM/PGM images.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated noise levels.
        #[arg(long, default_value = "0")]
        sigmas: String,
        /// Comma-separated refinement depths.
        #[arg(long, default_value = "0")]
        steps_list: String,
        /// Noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the CSV report.
        #[arg(long, default_value = "quality.csv")]
        out: PathBuf,
    },
    /// Verify every gradient against finite differences.
    Gradcheck {
        /// Float width to check at (32 or 64).
        #[arg(long, default_value_t = 64)]
        bits: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a model file: config, layers, parameter counts.
    Inspect {
        /// Model file to read.
        model: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { config } => cmd_train(&config)?,
        Command::Reconstruct {
            model,
            images,
            sigma,
            steps,
            seed,
            mask,
            dump_latent,
            pad,
            out_dir,
        } => cmd_reconstruct(&model, &images, sigma, steps, seed, mask, dump_latent, pad, &out_dir)?,
        Command::Evaluate { model, data, sigmas, steps_list, seed, out } => {
            cmd_evaluate(&model, &data, &sigmas, &steps_list, seed, &out)?
        }
        Command::Gradcheck { bits, seed } => return cmd_gradcheck(bits, seed),
        Command::Inspect { model } => cmd_inspect(&model)?,
    }
    Ok(ExitCode::SUCCESS)
}

/// Temp-then-rename text write, same discipline the model writer uses.
fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().context("output path needs a file name")?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Loads every PNG/PPM/PGM in a directory, sorted by name; the file stem is
/// the image's identity for split hashing and reports.
fn load_dir(dir: &Path) -> anyhow::Result<Vec<(String, Tensor<f64>)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .map_or(false, |x| matches!(x, "png" | "ppm" | "pgm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no images (png/ppm/pgm) in {}", dir.display());
    }
    paths
        .into_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .context("image path needs a stem")?;
            Ok((stem, load_image(&p)?))
        })
        .collect()
}

fn load_model(path: &Path) -> anyhow::Result<ModelBundle<f64>> {
    model_file::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn cmd_train(config_path: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let run = parse_config(&text)?;
    let data_dir = run.data_dir.clone().context("config needs data_dir")?;
    let model_out = run.model_out.clone().unwrap_or_else(|| "model.r2cs".into());
    let history_out = run.history_out.clone().unwrap_or_else(|| "history.csv".into());

    let images = load_dir(Path::new(&data_dir))?;
    let data = extract_patches(images, run.train.patch_size, run.stride())?;
    println!(
        "dataset: {} images, {} patches of {}",
        data.images.len(),
        data.len(),
        run.train.patch_size
    );

    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let mut bundle = build_variant::<f64>(
        run.variant,
        run.sampling()?,
        run.mask,
        run.widths,
        run.train.t_steps,
        &mut rng,
    )?;
    let report = train(&mut bundle, &data, &run.train)?;

    model_file::save(&bundle, Path::new(&model_out))?;
    write_atomic(Path::new(&history_out), &report.csv())?;
    let manifest = format!("{}.manifest", model_out);
    write_atomic(Path::new(&manifest), &run.echo())?;

    let last = report.train_losses().last().copied().unwrap_or(f64::NAN);
    println!("trained {} steps, final train loss {last:.6}", report.steps_taken);
    println!("model: {model_out}\nhistory: {history_out}\nmanifest: {manifest}");
    Ok(())
}

/// Applies a mask override by recomposing the measurement weights, so the
/// sampling operator is unchanged.
fn swap_mask(bundle: &mut ModelBundle<f64>, preset: &str) -> anyhow::Result<()> {
    let to_mode = MaskMode::parse(preset)?;
    if to_mode == bundle.mask.mode {
        return Ok(());
    }
    let to = CodedMask::<f64>::build(to_mode, &bundle.cfg)?;
    let weights = compose_swap(&bundle.arena.get(bundle.measure).value, &bundle.mask, &to, &bundle.cfg)?;
    bundle.arena.set_value(bundle.measure, weights)?;
    bundle.mask = to;
    Ok(())
}

/// Min-max normalized grayscale view of one latent channel.
fn latent_plane(z: &Tensor<f64>) -> Tensor<f64> {
    let [_, h, w, _] = z.shape();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let plane = Tensor::<f64>::from_fn([1, h, w, 1], |_, y, x, _| z.at(0, y, x, 0));
    for v in plane.data() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    plane.map(|v| (v - lo) / span)
}

#[allow(clippy::too_many_arguments)]
fn cmd_reconstruct(
    model: &Path,
    images: &[PathBuf],
    sigma: f64,
    steps: usize,
    seed: u64,
    mask: Option<String>,
    dump_latent: Option<PathBuf>,
    pad: Option<String>,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let mut bundle = load_model(model)?;
    if let Some(preset) = mask.as_deref() {
        swap_mask(&mut bundle, preset)?;
    }
    std::fs::create_dir_all(out_dir)?;
    if let Some(dir) = &dump_latent {
        std::fs::create_dir_all(dir)?;
    }

    for path in images {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .context("image path needs a stem")?;
        let x = load_image::<f64>(path)?;
        let [_, h, w, _] = x.shape();
        let divisible = h % bundle.cfg.block_h == 0 && w % bundle.cfg.block_w == 0;
        let padded = if divisible {
            x.clone()
        } else if pad.as_deref() == Some("reflect") {
            pad_reflect(&x, bundle.cfg.block_h, bundle.cfg.block_w)?
        } else {
            bail!(
                "{}: {h}x{w} does not tile into {}x{} blocks; pass --pad reflect",
                path.display(),
                bundle.cfg.block_h,
                bundle.cfg.block_w
            );
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = reconstruct_batch(&bundle, &padded, sigma, steps, &mut rng)?;
        let recon = clamp_unit(&crop_spatial(&out.image, h, w)?);
        let dest = out_dir.join(format!("{stem}_recon.png"));
        save_image(&dest, &recon)?;
        println!("{} -> {}", path.display(), dest.display());

        if let Some(dir) = &dump_latent {
            for (t, z) in out.step_latents.iter().enumerate() {
                let dest = dir.join(format!("{stem}_z{t}.png"));
                save_image(&dest, &latent_plane(z))?;
            }
            println!("  latents: {} steps into {}", out.step_latents.len(), dir.display());
        }
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| anyhow::anyhow!("bad {what} entry {t:?}: {e}")))
        .collect()
}

fn cmd_evaluate(
    model: &Path,
    data: &Path,
    sigmas: &str,
    steps_list: &str,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let bundle = load_model(model)?;
    let images = load_dir(data)?;
    let sigmas: Vec<f64> = parse_list(sigmas, "sigma")?;
    let steps: Vec<usize> = parse_list(steps_list, "steps")?;
    if sigmas.is_empty() || steps.is_empty() {
        bail!("need at least one sigma and one steps entry");
    }

    let report = evaluate(&bundle, &images, &sigmas, &steps, seed)?;
    write_atomic(out, &report.csv())?;

    println!("sigma  steps  psnr_db    ssim");
    for (sigma, st, psnr, ssim) in report.group_means() {
        println!("{sigma:<6} {st:<6} {psnr:<10.4} {ssim:.6}");
    }
    println!("report: {} ({} rows)", out.display(), report.rows.len());
    Ok(())
}

fn print_reports(reports: &[gradcheck::CheckReport]) -> bool {
    let mut all_pass = true;
    for r in reports {
        println!(
            "{:<32} max rel err {:>10.3e}  tol {:.0e}  {}",
            r.name,
            r.max_err,
            r.tol,
            if r.pass { "pass" } else { "FAIL" }
        );
        all_pass &= r.pass;
    }
    all_pass
}

fn cmd_gradcheck(bits: u32, seed: u64) -> anyhow::Result<ExitCode> {
    let (all_pass, self_test_caught) = match bits {
        64 => {
            let ok = print_reports(&gradcheck::run_suite::<f64>(seed)?);
            (ok, !gradcheck::corrupted_fixture::<f64>(seed)?.pass)
        }
        32 => {
            let ok = print_reports(&gradcheck::run_suite::<f32>(seed)?);
            (ok, !gradcheck::corrupted_fixture::<f32>(seed)?.pass)
        }
        other => bail!("--bits must be 32 or 64, got {other}"),
    };
    println!(
        "self-test: deliberately corrupted gradients {}",
        if self_test_caught { "detected" } else { "MISSED" }
    );
    if all_pass && self_test_caught {
        println!("gradcheck: all checks passed ({bits}-bit)");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck: FAILED ({bits}-bit)");
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_inspect(model: &Path) -> anyhow::Result<()> {
    let bundle = load_model(model)?;
    let cfg = &bundle.cfg;
    println!("variant: {}", bundle.variant.as_str());
    println!(
        "sampling: {}x{}x{} blocks, rate {} -> {} of {} coefficients",
        cfg.block_h,
        cfg.block_w,
        cfg.channels,
        cfg.rate,
        cfg.m,
        cfg.block_len()
    );
    println!("mask: {}", bundle.mask.mode.as_str());
    println!("refinement depth: {}", bundle.t_steps);

    println!("\nreconstruction net:");
    println!("  #   kind            kernel   in -> out   bn   params");
    let mut net_params = 0usize;
    for row in bundle.net.rows() {
        net_params += row.param_count();
        println!(
            "  {:<3} {:<15} {}x{:<5} {:>4} -> {:<5} {}  {:>7}",
            row.index,
            row.kind,
            row.kernel[0],
            row.kernel[1],
            row.cin,
            row.cout,
            if row.batch_norm { "yes" } else { "no " },
            row.param_count()
        );
    }
    println!("  reconstruction parameters: {net_params}");

    if bundle.gates.is_some() {
        let l = cfg.block_len();
        let m = cfg.m;
        println!("\nrecurrent gates:");
        println!("  scale:     [{m}] -> [{m}]");
        println!("  reset:     [{}] -> [{l}]", 2 * l);
        println!("  update:    [{}] -> [{l}]", 2 * l);
        println!("  candidate: [{m}] -> [{l}]");
    }

    println!("\ntotal parameters: {}", bundle.arena.total_elements());
    if !bundle.meta.is_empty() {
        println!("\ntraining metadata:");
        for (k, v) in &bundle.meta {
            println!("  {k} = {v}");
        }
    }
    Ok(())
}
