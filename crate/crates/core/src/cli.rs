//! Command-line front end. [`run`] parses arguments, executes one command and
//! returns the process exit code.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::{adapt, AdaptationConfig};
use crate::denoise::{denoise, HqsSchedule, DEFAULT_BETA_MULTIPLIERS};
use crate::em::{em_fit_with_inflation, EmConfig};
use crate::error::Error;
use crate::fsio::write_atomic;
use crate::gmm::Gmm;
use crate::image::{add_gaussian_noise, psnr, ImageBuffer};
use crate::manifest::{manifest_path, RunManifest};
use crate::model_io::{load_model, save_model};
use crate::patches::{extract_patches, PatchSet};
use crate::pgm::{read_pgm, write_pgm};
use crate::sure::{sure, SureConfig};
use crate::synthetic::run_toy;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PATCHPRIOR_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "patchprior", version, about = "Patch GMM priors: train, adapt, denoise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a mixture to the patches of every PGM in a directory.
    Train(TrainArgs),
    /// Adapt a generic model to one image.
    Adapt(AdaptArgs),
    /// Denoise a PGM with a model.
    Denoise(DenoiseArgs),
    /// Estimate the residual noise variance left by a pre-filter.
    Sure(SureArgs),
    /// Add white Gaussian noise to a PGM.
    Noise(NoiseArgs),
    /// PSNR between two PGMs.
    Psnr(PsnrArgs),
    /// Two-cluster toy demo; writes CSV files for plotting.
    Toy(ToyArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of training PGMs.
    corpus: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 8)]
    patch_size: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Train on a random subset of at most this many patches.
    #[arg(long)]
    max_patches: Option<usize>,
    /// Noise variance of the corpus, removed from every covariance.
    #[arg(long, default_value_t = 0.0)]
    sigma_tilde: f64,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    /// Generic model.
    model: PathBuf,
    /// Adaptation image: clean or pre-filtered, or the noisy image when
    /// `--sigma-tilde sure` is given.
    image: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// Residual noise variance of the image, or `sure` to pre-filter the
    /// (noisy) image with the generic model and estimate it.
    #[arg(long, default_value = "0")]
    sigma_tilde: String,
    /// Noise level of the image; required with `--sigma-tilde sure`.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 1)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 1)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pre-filter penalty multipliers of `1/sigma^2`, comma separated.
    #[arg(long)]
    betas: Option<String>,
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    model: PathBuf,
    /// Penalty multipliers of `1/sigma^2`, comma separated.
    #[arg(long)]
    betas: Option<String>,
    /// Print a `stage,beta,psnr` CSV trace to stdout.
    #[arg(long)]
    trace: bool,
    /// Clean reference for the PSNR trace.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Prefilter {
    Epll,
    Identity,
}

#[derive(Debug, Args)]
struct SureArgs {
    input: PathBuf,
    #[arg(long)]
    sigma: f64,
    /// Model of the EPLL pre-filter.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Prefilter::Epll)]
    prefilter: Prefilter,
    #[arg(long, default_value_t = 1)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    floor: f64,
    #[arg(long)]
    betas: Option<String>,
}

#[derive(Debug, Args)]
struct NoiseArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PsnrArgs {
    reference: PathBuf,
    test: PathBuf,
}

#[derive(Debug, Args)]
struct ToyArgs {
    /// Output directory for the CSV files.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 400)]
    external_points: usize,
    #[arg(long, default_value_t = 20)]
    target_points: usize,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Runs the command line `argv` (including the program name).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    let out = match cli.command {
        Command::Train(a) => train(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Denoise(a) => denoise_cmd(a),
        Command::Sure(a) => sure_cmd(a),
        Command::Noise(a) => noise_cmd(a),
        Command::Psnr(a) => psnr_cmd(a),
        Command::Toy(a) => toy_cmd(a),
    };
    match out {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn configure_threads() {
    let Ok(value) = std::env::var(THREADS_ENV) else { return };
    match value.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            // Fails only if the pool already exists, e.g. on a second call in-process.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        _ => log::warn!("ignoring {THREADS_ENV}={value}: expected a positive integer"),
    }
}

fn parse_multipliers(text: Option<&str>) -> std::result::Result<Vec<f64>, Failure> {
    let Some(text) = text else {
        return Ok(DEFAULT_BETA_MULTIPLIERS.to_vec());
    };
    text.split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Failure::Usage(format!("--betas expects comma-separated numbers, got {text:?}")))
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn schedule(sigma: f64, betas: Option<&str>) -> std::result::Result<(HqsSchedule, Vec<f64>), Failure> {
    let m = parse_multipliers(betas)?;
    Ok((HqsSchedule::scaled(sigma, &m)?, m))
}

fn write_manifest(m: &RunManifest, output: &Path) -> CmdResult {
    m.write(manifest_path(output))?;
    Ok(())
}

fn pgm_files(dir: &Path) -> crate::Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn train(a: TrainArgs) -> CmdResult {
    let mut m = RunManifest::new("train");
    let t = Instant::now();
    let files = pgm_files(&a.corpus)?;
    if files.is_empty() {
        return Err(Failure::Usage(format!("no .pgm files in {}", a.corpus.display())));
    }
    let sets = files
        .iter()
        .map(|f| extract_patches(&read_pgm(f)?, a.patch_size, a.stride))
        .collect::<crate::Result<Vec<_>>>()?;
    let mut patches = PatchSet::concat(&sets)?;
    if let Some(limit) = a.max_patches {
        if limit < patches.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let mut idx = sample(&mut rng, patches.len(), limit).into_vec();
            idx.sort_unstable();
            patches = patches.select(&idx)?;
        }
    }
    m.timing("load", t.elapsed().as_secs_f64());

    let config = EmConfig {
        components: a.k,
        max_iters: a.iters,
        tol: a.tol,
        seed: a.seed,
        ..EmConfig::default()
    };
    let t = Instant::now();
    let fit = em_fit_with_inflation(&patches, &config, a.sigma_tilde)?;
    m.timing("em", t.elapsed().as_secs_f64());
    save_model(&fit.gmm, &a.output)?;

    m.set("corpus", a.corpus.display())
        .set("corpus_files", files.len())
        .set("output", a.output.display())
        .set("patch_size", a.patch_size)
        .set("stride", a.stride)
        .set("k", a.k)
        .set("seed", a.seed)
        .set("iters", a.iters)
        .set("tol", a.tol)
        .set("max_patches", a.max_patches.map_or("all".to_string(), |v| v.to_string()))
        .set("sigma_tilde_sq", a.sigma_tilde)
        .set("init", format!("{:?}", config.init))
        .set("psd_floor", config.psd_floor)
        .set("patches", patches.len())
        .set("em_iterations", fit.iterations)
        .set("em_converged", fit.converged)
        .set("em_reseeded", fit.reseeded)
        .set("final_mean_log_likelihood", fit.trace.last().copied().unwrap_or(f64::NAN));
    write_manifest(&m, &a.output)
}

fn adapt_cmd(a: AdaptArgs) -> CmdResult {
    let mut m = RunManifest::new("adapt");
    let generic = load_model(&a.model)?;
    let image = read_pgm(&a.image)?;
    let side = crate::denoise::patch_side(&generic)?;

    let (adapt_image, sigma_tilde_sq) = if a.sigma_tilde.trim().eq_ignore_ascii_case("sure") {
        let sigma = a
            .sigma
            .ok_or_else(|| Failure::Usage("--sigma-tilde sure requires --sigma".into()))?;
        let (sched, mult) = schedule(sigma, a.betas.as_deref())?;
        let cfg = SureConfig {
            seed: a.seed,
            probes: a.probes,
            ..SureConfig::default()
        };
        let t = Instant::now();
        let est = sure(&image, sigma, |y| Ok(denoise(y, sigma, &generic, &sched, None)?.image), &cfg)?;
        m.timing("sure", t.elapsed().as_secs_f64());
        m.set("sigma", sigma)
            .set("prefilter_betas", join(&mult))
            .set("sure_delta", cfg.delta)
            .set("sure_probes", cfg.probes)
            .set("sure_floor", cfg.floor)
            .set("sure_raw", est.raw);
        let value = est.sigma_tilde_sq;
        (est.denoised, value)
    } else {
        let value: f64 = a.sigma_tilde.trim().parse().map_err(|_| {
            Failure::Usage(format!("--sigma-tilde expects a number or \"sure\", got {:?}", a.sigma_tilde))
        })?;
        (image, value)
    };

    let patches = extract_patches(&adapt_image, side, a.stride)?;
    let config = AdaptationConfig {
        rho: a.rho,
        sigma_tilde_sq,
        iterations: a.iters,
        ..AdaptationConfig::default()
    };
    let t = Instant::now();
    let (adapted, report) = adapt(&generic, &patches, &config)?;
    m.timing("adapt", t.elapsed().as_secs_f64());
    m.timing("mstep_covariance", report.mstep_seconds);
    save_model(&adapted, &a.output)?;

    let mut text = String::from("iteration,objective\n");
    for (i, v) in report.objective.iter().enumerate() {
        text.push_str(&format!("{},{v}\n", i + 1));
    }
    text.push_str("\ncomponent,n_k,alpha_k\n");
    for (k, (n, al)) in report.counts.iter().zip(&report.alphas).enumerate() {
        text.push_str(&format!("{k},{n},{al}\n"));
    }
    let mut report_name = a.output.file_name().unwrap_or_default().to_os_string();
    report_name.push(".report.csv");
    write_atomic(&a.output.with_file_name(report_name), text.as_bytes())?;

    m.set("model", a.model.display())
        .set("image", a.image.display())
        .set("output", a.output.display())
        .set("rho", a.rho)
        .set("sigma_tilde", &a.sigma_tilde)
        .set("sigma_tilde_sq", sigma_tilde_sq)
        .set("iters", a.iters)
        .set("stride", a.stride)
        .set("seed", a.seed)
        .set("weight_update", format!("{:?}", config.weight_update))
        .set("fast_covariance", config.fast_covariance)
        .set("psd_floor", config.psd_floor)
        .set("patches", patches.len())
        .set("final_objective", report.objective.last().copied().unwrap_or(f64::NAN));
    write_manifest(&m, &a.output)
}

fn denoise_cmd(a: DenoiseArgs) -> CmdResult {
    let mut m = RunManifest::new("denoise");
    let (sched, mult) = schedule(a.sigma, a.betas.as_deref())?;
    let y = read_pgm(&a.input)?;
    let prior: Gmm = load_model(&a.model)?;
    let reference = a.reference.as_ref().map(read_pgm).transpose()?;

    let t = Instant::now();
    let out = denoise(&y, a.sigma, &prior, &sched, reference.as_ref())?;
    m.timing("denoise", t.elapsed().as_secs_f64());
    write_pgm(&a.output, &out.image)?;

    if a.trace {
        let mut stdout = std::io::stdout().lock();
        let mut text = String::from("stage,beta,psnr\n");
        for (j, beta) in sched.betas.iter().enumerate() {
            let p = out.psnr_trace.get(j).map_or(String::new(), |v| format!("{v:.4}"));
            text.push_str(&format!("{},{beta},{p}\n", j + 1));
        }
        let _ = stdout.write_all(text.as_bytes());
    }

    m.set("input", a.input.display())
        .set("output", a.output.display())
        .set("model", a.model.display())
        .set("sigma", a.sigma)
        .set("beta_multipliers", join(&mult))
        .set("betas", join(&sched.betas))
        .set("mode_inflations", join(&sched.mode_inflations))
        .set("data_weight", format!("{:?}", sched.data_weight))
        .set("reference", a.reference.as_ref().map_or("none".to_string(), |p| p.display().to_string()));
    if let Some(p) = out.psnr_trace.last() {
        m.set("psnr", format!("{p:.4}"));
    }
    write_manifest(&m, &a.output)
}

fn sure_cmd(a: SureArgs) -> CmdResult {
    let mut m = RunManifest::new("sure");
    let y = read_pgm(&a.input)?;
    let cfg = SureConfig {
        delta: a.delta,
        seed: a.seed,
        floor: a.floor,
        probes: a.probes,
    };
    let t = Instant::now();
    let est = match a.prefilter {
        Prefilter::Identity => sure(&y, a.sigma, |x| Ok(x.clone()), &cfg)?,
        Prefilter::Epll => {
            let path = a
                .model
                .as_ref()
                .ok_or_else(|| Failure::Usage("--prefilter epll requires --model".into()))?;
            let (sched, mult) = schedule(a.sigma, a.betas.as_deref())?;
            let prior = load_model(path)?;
            m.set("model", path.display()).set("beta_multipliers", join(&mult));
            sure(&y, a.sigma, |x| Ok(denoise(x, a.sigma, &prior, &sched, None)?.image), &cfg)?
        }
    };
    m.timing("sure", t.elapsed().as_secs_f64());
    println!("sigma_tilde_sq={}", est.sigma_tilde_sq);
    println!("ratio={}", est.sigma_tilde_sq.sqrt() / a.sigma);

    m.set("input", a.input.display())
        .set("sigma", a.sigma)
        .set("prefilter", format!("{:?}", a.prefilter))
        .set("delta", a.delta)
        .set("probes", a.probes)
        .set("seed", a.seed)
        .set("floor", a.floor)
        .set("raw", est.raw)
        .set("divergence", est.divergence);
    eprint!("{}", m.to_text());
    Ok(())
}

fn noise_cmd(a: NoiseArgs) -> CmdResult {
    let mut m = RunManifest::new("noise");
    let clean = read_pgm(&a.input)?;
    let noisy = add_gaussian_noise(&clean, a.sigma, a.seed)?;
    write_pgm(&a.output, &noisy)?;
    m.set("input", a.input.display())
        .set("output", a.output.display())
        .set("sigma", a.sigma)
        .set("seed", a.seed);
    write_manifest(&m, &a.output)
}

fn psnr_cmd(a: PsnrArgs) -> CmdResult {
    let mut m = RunManifest::new("psnr");
    let r = read_pgm(&a.reference)?;
    let t: ImageBuffer = read_pgm(&a.test)?;
    let value = psnr(&r, &t)?;
    println!("{value:.4}");
    m.set("reference", a.reference.display())
        .set("test", a.test.display())
        .set("psnr", format!("{value:.4}"));
    eprint!("{}", m.to_text());
    Ok(())
}

fn write_points(path: &Path, points: &PatchSet) -> CmdResult {
    let mut text = String::from("x,y\n");
    for p in points.iter() {
        text.push_str(&format!("{},{}\n", p[0], p[1]));
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn toy_cmd(a: ToyArgs) -> CmdResult {
    let mut m = RunManifest::new("toy");
    std::fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let out = run_toy(a.seed, a.external_points, a.target_points, a.rho)?;
    write_points(&a.output.join("external_points.csv"), &out.external_points)?;
    write_points(&a.output.join("target_points.csv"), &out.target_points)?;

    let (_, target) = crate::synthetic::toy_models();
    let mut text = String::from("model,component,weight,mean_x,mean_y,cov_xx,cov_xy,cov_yy\n");
    for (name, g) in [("target", &target), ("generic", &out.generic), ("scratch", &out.scratch), ("adapted", &out.adapted)] {
        for k in 0..g.components() {
            let (mu, c) = (&g.means()[k], &g.covariances()[k]);
            text.push_str(&format!(
                "{name},{k},{},{},{},{},{},{}\n",
                g.weights()[k],
                mu[0],
                mu[1],
                c[(0, 0)],
                c[(0, 1)],
                c[(1, 1)]
            ));
        }
    }
    let models = a.output.join("models.csv");
    write_atomic(&models, text.as_bytes())?;
    println!("scratch_mean_error={:.6}", out.scratch_error);
    println!("adapted_mean_error={:.6}", out.adapted_error);

    m.set("output", a.output.display())
        .set("seed", a.seed)
        .set("rho", a.rho)
        .set("external_points", a.external_points)
        .set("target_points", a.target_points)
        .set("scratch_mean_error", out.scratch_error)
        .set("adapted_mean_error", out.adapted_error);
    write_manifest(&m, &models)
}
