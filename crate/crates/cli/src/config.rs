//! Command-line flags, the optional config file, and their resolution.
//!
//! Every setting comes from exactly one source: a flag if given, else the
//! config file, else the built-in default.

use std::path::PathBuf;

use clap::Parser;
use serde::{Deserialize, Serialize};
use texfill_core::network::DEFAULT_STATISTICS_LAYERS;
use texfill_core::pipeline::{
    DEFAULT_COARSE_ITERATIONS, DEFAULT_DELTAS, DEFAULT_EXPANSIONS, DEFAULT_FINE_ITERATIONS,
    DEFAULT_PATCH_SIZE, DEFAULT_PSI_BAND, DEFAULT_Q, DEFAULT_STRIDE,
};
use texfill_core::tensor::GREY_WEIGHTS;
use texfill_core::LossWeights;

#[derive(Debug, Parser)]
#[command(
    name = "texfill",
    version,
    about = "Fill a rectangular hole in a texture image by patch-wise CNN texture synthesis"
)]
pub struct Cli {
    /// Input RGB image (PNG).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Hole mask (PNG); pixels with luma >= 128 form the hole.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Network weights in TXW1 format.
    #[arg(long, conflicts_with = "random_weights")]
    pub weights: Option<PathBuf>,
    /// Use a seeded random filter bank instead of a weight file.
    #[arg(long, value_name = "SEED")]
    pub random_weights: Option<u64>,
    /// Output PNG.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-stage intermediate images.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
    /// Write the per-patch run report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// TOML file with the same keys as the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,

    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Defaults to a quarter of the patch size.
    #[arg(long)]
    pub overlap: Option<usize>,
    /// Poolings between the detail and the global branch.
    #[arg(long)]
    pub q: Option<usize>,
    /// Reference search stride in pixels.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub wg: Option<f64>,
    #[arg(long)]
    pub wb: Option<f64>,
    #[arg(long)]
    pub ws: Option<f64>,
    #[arg(long)]
    pub wcc: Option<f64>,
    #[arg(long)]
    pub coarse_iters: Option<usize>,
    #[arg(long)]
    pub fine_iters: Option<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub detail_layers: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub global_layers: Option<Vec<String>>,
    /// Shift per detail layer for the cross-correlation loss.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub delta: Option<Vec<usize>>,
    /// Mask expansion per detail layer.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub expand: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the greyscale conversion between the coarse and fine stages.
    #[arg(long)]
    pub no_greyscale_init: bool,
    /// RGB weights of the greyscale conversion.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub grey_weights: Option<Vec<f64>>,
    /// Drop the boundary loss in the coarse stage.
    #[arg(long)]
    pub no_coarse_boundary: bool,
    /// Width of the known band around the hole.
    #[arg(long)]
    pub psi_band: Option<usize>,
    /// Divide every channel count of the random filter bank by this.
    #[arg(long)]
    pub width_divisor: Option<usize>,
    /// Amplitude of uniform noise added to the initial mean fill.
    #[arg(long)]
    pub init_noise: Option<f64>,

    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

/// Fully resolved settings; also the config file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Config {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_weights: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    pub patch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<usize>,
    pub q: usize,
    pub stride: usize,
    pub wd: f64,
    pub wg: f64,
    pub wb: f64,
    pub ws: f64,
    pub wcc: f64,
    pub coarse_iters: usize,
    pub fine_iters: usize,
    pub detail_layers: Vec<String>,
    pub global_layers: Vec<String>,
    pub delta: Vec<usize>,
    pub expand: Vec<usize>,
    pub seed: u64,
    pub greyscale_init: bool,
    pub grey_weights: [f64; 3],
    pub coarse_boundary: bool,
    pub psi_band: usize,
    pub width_divisor: usize,
    pub init_noise: f64,
}

impl Default for Config {
    fn default() -> Self {
        let w = LossWeights::default();
        let layers: Vec<String> = DEFAULT_STATISTICS_LAYERS
            .iter()
            .map(|s| s.to_string())
            .collect();
        Config {
            image: None,
            mask: None,
            weights: None,
            random_weights: None,
            out: None,
            dump_dir: None,
            report: None,
            patch_size: DEFAULT_PATCH_SIZE,
            overlap: None,
            q: DEFAULT_Q,
            stride: DEFAULT_STRIDE,
            wd: w.w_d,
            wg: w.w_g,
            wb: w.w_b,
            ws: w.w_s,
            wcc: w.w_cc,
            coarse_iters: DEFAULT_COARSE_ITERATIONS,
            fine_iters: DEFAULT_FINE_ITERATIONS,
            detail_layers: layers.clone(),
            global_layers: layers,
            delta: DEFAULT_DELTAS.to_vec(),
            expand: DEFAULT_EXPANSIONS.to_vec(),
            seed: 0,
            greyscale_init: true,
            grey_weights: GREY_WEIGHTS,
            coarse_boundary: true,
            psi_band: DEFAULT_PSI_BAND,
            width_divisor: 1,
            init_noise: 0.0,
        }
    }
}

impl Config {
    /// Defaults overlaid with the keys present in a config file.
    pub fn from_toml(text: &str) -> Result<Config, toml::de::Error> {
        let file: toml::Table = text.parse()?;
        let mut table =
            toml::Table::try_from(Config::default()).expect("defaults serialize to a table");
        table.extend(file);
        table.try_into()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies every flag that was given.
    pub fn apply_flags(&mut self, cli: &Cli) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        fn set_opt<T: Clone>(dst: &mut Option<T>, src: &Option<T>) {
            if src.is_some() {
                *dst = src.clone();
            }
        }
        set_opt(&mut self.image, &cli.image);
        set_opt(&mut self.mask, &cli.mask);
        if cli.weights.is_some() {
            self.weights = cli.weights.clone();
            self.random_weights = None;
        }
        if cli.random_weights.is_some() {
            self.random_weights = cli.random_weights;
            self.weights = None;
        }
        set_opt(&mut self.out, &cli.out);
        set_opt(&mut self.dump_dir, &cli.dump_dir);
        set_opt(&mut self.report, &cli.report);
        set(&mut self.patch_size, &cli.patch_size);
        set_opt(&mut self.overlap, &cli.overlap);
        set(&mut self.q, &cli.q);
        set(&mut self.stride, &cli.stride);
        set(&mut self.wd, &cli.wd);
        set(&mut self.wg, &cli.wg);
        set(&mut self.wb, &cli.wb);
        set(&mut self.ws, &cli.ws);
        set(&mut self.wcc, &cli.wcc);
        set(&mut self.coarse_iters, &cli.coarse_iters);
        set(&mut self.fine_iters, &cli.fine_iters);
        set(&mut self.detail_layers, &cli.detail_layers);
        set(&mut self.global_layers, &cli.global_layers);
        set(&mut self.delta, &cli.delta);
        set(&mut self.expand, &cli.expand);
        set(&mut self.seed, &cli.seed);
        if cli.no_greyscale_init {
            self.greyscale_init = false;
        }
        if let Some(w) = &cli.grey_weights {
            self.grey_weights = [w[0], w[1], w[2]];
        }
        if cli.no_coarse_boundary {
            self.coarse_boundary = false;
        }
        set(&mut self.psi_band, &cli.psi_band);
        set(&mut self.width_divisor, &cli.width_divisor);
        set(&mut self.init_noise, &cli.init_noise);
    }

    /// Fills in values derived from others.
    pub fn resolve(mut self) -> Config {
        self.overlap.get_or_insert(self.patch_size / 4);
        self
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_s: self.ws,
            w_cc: self.wcc,
            w_d: self.wd,
            w_g: self.wg,
            w_b: self.wb,
        }
    }
}
