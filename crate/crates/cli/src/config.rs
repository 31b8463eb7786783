//! Command-line arguments and the TOML config file. Every flag has a config
//! key of the same name in the matching section; flags win over the file,
//! the file wins over built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "mad", version, about = "Joint-diffusion panorama generation and evaluation")]
pub struct Cli {
    /// TOML config file; see the README for the schema.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root holding images/, manifests/, reports/ and features/.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one panorama and its manifest.
    Generate(GenArgs),
    /// Score a directory of generated panoramas.
    Evaluate(EvalArgs),
    /// Sweep tau or the attention stages and score every setting.
    Ablate {
        #[command(flatten)]
        sweep: AblateArgs,
        #[command(flatten)]
        gen: GenArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Time one denoising step at several output widths.
    Bench {
        #[command(flatten)]
        bench: BenchArgs,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Train the toy denoiser on synthetic stripe latents.
    Train(TrainArgs),
    /// Regenerate a run from its manifest and check the image hash.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenArgs {
    /// Text prompt.
    #[arg(long)]
    pub prompt: Option<String>,
    /// Output width in pixels [default: 3072].
    #[arg(long)]
    pub width: Option<usize>,
    /// Output height in pixels [default: 512].
    #[arg(long)]
    pub height: Option<usize>,
    /// Pixels per latent cell [default: 8].
    #[arg(long)]
    pub latent_scale: Option<usize>,
    /// View side in latent cells [default: the short latent side].
    #[arg(long)]
    pub view: Option<usize>,
    /// View stride in latent cells [default: view / 4].
    #[arg(long)]
    pub stride: Option<usize>,
    /// Reject widths the stride does not tile exactly.
    #[arg(long)]
    #[serde(default)]
    pub strict: bool,
    /// Number of initial steps with merged attention [default: 15].
    #[arg(long)]
    pub tau: Option<usize>,
    /// Attention stages to merge: all, down, mid, up or none [default: all].
    #[arg(long)]
    pub blocks: Option<String>,
    /// Denoising steps [default: 50, or 4 with the lcm scheduler].
    #[arg(long)]
    pub steps: Option<usize>,
    /// ddim or lcm (consistency sampling) [default: ddim].
    #[arg(long)]
    pub scheduler: Option<String>,
    /// Classifier-free guidance scale [default: 7.5].
    #[arg(long)]
    pub guidance: Option<f64>,
    /// DDIM stochasticity [default: 0].
    #[arg(long)]
    pub eta: Option<f64>,
    /// Seed of the initial noise [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// joint or direct-long [default: joint].
    #[arg(long)]
    pub mode: Option<String>,
    /// Noise predictor; only the bundled toy model ships [default: toy].
    #[arg(long)]
    pub backbone: Option<String>,
    /// Toy weights file (MADTOY1) replacing the bundled weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// toy or external-vae [default: toy].
    #[arg(long)]
    pub decoder: Option<String>,
    /// Scalar type of the computation, f32 or f64 [default: f32].
    #[arg(long)]
    pub precision: Option<String>,
    /// Largest merged token count before a run is refused [default: 262144].
    #[arg(long)]
    pub token_cap: Option<usize>,
    /// Also write the latent after every step under latents/.
    #[arg(long)]
    #[serde(default)]
    pub dump_latents: bool,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    /// Directory of generated panoramas [default: <out>/images].
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// Directory of square reference images (needed for fid, kid, giqa).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Prompt scored by mCLIP [default: the generation prompt].
    #[arg(long)]
    pub caption: Option<String>,
    /// Comma-separated scores: clip, intra, fid, kid, giqa or all [default: all].
    #[arg(long)]
    pub scores: Option<String>,
    /// Crop side in pixels [default: the image height].
    #[arg(long)]
    pub view_px: Option<usize>,
    /// Feature extractor: random-conv or none [default: random-conv].
    #[arg(long)]
    pub extractor: Option<String>,
    /// Text-image embedder: toy or none [default: toy].
    #[arg(long)]
    pub clip: Option<String>,
    /// KID subset size [default: 100].
    #[arg(long)]
    pub kid_subset_size: Option<usize>,
    /// Seed for crop sampling and KID subsets [default: 0].
    #[arg(long)]
    pub eval_seed: Option<u64>,
    /// Report file name under reports/ [default: evaluation].
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct AblateArgs {
    /// `tau=0,5,15` or `blocks=none,mid,down,up,all`.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Images per setting, with seeds counting up from --seed [default: 4].
    #[arg(long)]
    pub seeds: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct BenchArgs {
    /// Comma-separated output widths in pixels.
    #[arg(long)]
    pub widths: Option<String>,
    /// Comma-separated modes: direct-long, joint-tau0, joint-tau-full [default: all].
    #[arg(long)]
    pub modes: Option<String>,
    /// Timed repetitions per point; the fastest is kept [default: 3].
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Optimizer steps [default: 5000].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed of the initial weights and of the data stream [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Side of the training latents [default: 16].
    #[arg(long)]
    pub size: Option<usize>,
    /// Batch size [default: 4].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Peak learning rate [default: 0.002].
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Architecture, desk or default [default: desk].
    #[arg(long)]
    pub arch: Option<String>,
    /// Weights file to write [default: <out>/weights/toy-stripes.madw].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ReplayArgs {
    /// Manifest to replay.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Toy weights file, when the run did not use the bundled weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub generate: GenArgs,
    #[serde(default)]
    pub evaluate: EvalArgs,
    #[serde(default)]
    pub ablate: AblateArgs,
    #[serde(default)]
    pub bench: BenchArgs,
    #[serde(default)]
    pub train: TrainArgs,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Field-wise `flag.or(file)`.
pub trait Layer {
    fn over(self, file: Self) -> Self;
}

macro_rules! layer {
    ($ty:ty { $($opt:ident),* } { $($flag:ident),* }) => {
        impl Layer for $ty {
            fn over(self, file: Self) -> Self {
                Self {
                    $($opt: self.$opt.or(file.$opt),)*
                    $($flag: self.$flag || file.$flag,)*
                }
            }
        }
    };
}

layer!(GenArgs {
    prompt, width, height, latent_scale, view, stride, tau, blocks, steps, scheduler, guidance, eta, seed, mode,
    backbone, weights, decoder, precision, token_cap
} { strict, dump_latents });
layer!(EvalArgs { generated, reference, caption, scores, view_px, extractor, clip, kid_subset_size, eval_seed, name } {});
layer!(AblateArgs { sweep, seeds } {});
layer!(BenchArgs { widths, modes, repeats } {});
layer!(TrainArgs { steps, seed, size, batch, learning_rate, arch, output } {});
