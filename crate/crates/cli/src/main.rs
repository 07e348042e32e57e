mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser};
use thiserror::Error;

use config::{Cli, Config};
use texfill_core::tensor::load_mask_png;
use texfill_core::{inpaint, FeatureNetwork, ImageBuffer, InpaintJob, RegionSpec, Topology};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Input {
        path: PathBuf,
        source: texfill_core::Error,
    },

    #[error("{path}: {source}")]
    Output {
        path: PathBuf,
        source: texfill_core::Error,
    },

    #[error(transparent)]
    Pipeline(texfill_core::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input { .. } | CliError::Output { .. } => 3,
            CliError::Pipeline(_) => 4,
        }
    }

    fn stage(&self) -> String {
        match self {
            CliError::Usage(_) => "args".into(),
            CliError::Input { .. } | CliError::Output { .. } => "io".into(),
            CliError::Pipeline(texfill_core::Error::Pipeline { stage, .. }) => stage.to_string(),
            CliError::Pipeline(_) => "setup".into(),
        }
    }

    /// `error code=N stage=S message="..."`
    fn line(&self) -> String {
        let message = self.to_string().replace('\\', "\\\\").replace('"', "\\\"");
        let message = message.replace('\n', " ");
        format!(
            "error code={} stage={} message=\"{message}\"",
            self.code(),
            self.stage()
        )
    }
}

fn input<T>(path: &Path, r: texfill_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })
}

fn resolve(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Input {
                path: path.clone(),
                source: e.into(),
            })?;
            Config::from_toml(&text)
                .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))?
        }
        None => Config::default(),
    };
    cfg.apply_flags(cli);
    Ok(cfg.resolve())
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

fn network(cfg: &Config) -> Result<FeatureNetwork, CliError> {
    match (&cfg.weights, cfg.random_weights) {
        (Some(path), None) => input(path, FeatureNetwork::load_weights(path)),
        (None, Some(seed)) => {
            if cfg.width_divisor == 0 {
                return Err(CliError::Usage("width-divisor must be positive".into()));
            }
            FeatureNetwork::random(seed, &Topology::vgg19_narrow(cfg.width_divisor))
                .map_err(CliError::Pipeline)
        }
        _ => Err(CliError::Usage(
            "exactly one of --weights and --random-weights is required".into(),
        )),
    }
}

fn run(args: Vec<OsString>) -> Result<(), CliError> {
    if args.len() <= 1 {
        eprintln!("{}", Cli::command().render_help());
        return Err(CliError::Usage("no arguments given".into()));
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            eprint!("{e}");
            return Err(CliError::Usage(e.kind().to_string()));
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let cfg = resolve(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }

    let image_path = required(&cfg.image, "image")?;
    let mask_path = required(&cfg.mask, "mask")?;
    let out_path = required(&cfg.out, "out")?;
    let net = network(&cfg)?;
    let image = input(image_path, ImageBuffer::load_png(image_path))?;
    let mask = input(mask_path, load_mask_png(mask_path))?;
    let region = input(mask_path, RegionSpec::from_mask(&mask, cfg.psi_band))?;

    let mut job = InpaintJob::new(image, region, net);
    job.weights = cfg.weights();
    job.q = cfg.q;
    job.patch_size = cfg.patch_size;
    job.overlap = cfg.overlap;
    job.stride = cfg.stride;
    job.detail_layers = cfg.detail_layers.clone();
    job.global_layers = cfg.global_layers.clone();
    job.deltas = cfg.delta.clone();
    job.expansions = cfg.expand.clone();
    job.coarse_iterations = cfg.coarse_iters;
    job.fine_iterations = cfg.fine_iters;
    job.coarse_boundary = cfg.coarse_boundary;
    job.greyscale = cfg.greyscale_init;
    job.grey_weights = cfg.grey_weights;
    job.seed = cfg.seed;
    job.init_noise = cfg.init_noise;
    job.dump_dir = cfg.dump_dir.clone();
    job.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let (result, report) = inpaint(&job).map_err(CliError::Pipeline)?;
    result
        .save_png(out_path)
        .map_err(|source| CliError::Output {
            path: out_path.to_path_buf(),
            source,
        })?;
    if let Some(path) = &cfg.report {
        std::fs::write(path, report.to_string()).map_err(|e| CliError::Output {
            path: path.clone(),
            source: e.into(),
        })?;
    }
    log::info!("wrote {}", out_path.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code())
        }
    }
}
