//! Command options, shared between the flag parser and the JSON config file.
//!
//! Every option is optional at parse time. A config file supplies a base
//! object (top-level globals plus one section per subcommand); flags given on
//! the command line replace the matching keys. Defaults are applied only when
//! a command resolves its options.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Failure;

pub const EPS_HELP: &str = "\
Radius convention: Wasserstein radii on the command line and in reports are
given as ε·n_pixel, the customary reporting unit. Internally the radius is
ε = value / (height · width) of the (possibly downsampled) images, in units of
normalized mass times pixel distance. For example `--eps 10` on 14×14 images
is ε = 10/196 ≈ 0.051. ℓ∞ and ℓ2 radii are raw pixel distances.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.";

#[derive(Parser, Debug)]
#[command(name = "wasserball", version, about = "Wasserstein-ball adversarial attacks, audits and defenses", after_help = EPS_HELP)]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batch work (1 runs sequentially).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Report path; the report goes to stdout when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a classifier, optionally with Wasserstein adversarial training.
    #[command(after_help = EPS_HELP)]
    Train(TrainOpts),
    /// Accuracy under PGD attack over a grid of radii.
    #[command(after_help = EPS_HELP)]
    Attack(AttackOpts),
    /// Run one constrained Sinkhorn projection and print its diagnostics.
    #[command(after_help = EPS_HELP)]
    Project(ProjectOpts),
    /// Distances and accuracy under translation, rotation and blur.
    Perturb(PerturbOpts),
    /// Misclassification under dimming, which normalized distances cannot see.
    DimDemo(DimOpts),
    /// Wasserstein and ℓ2 distances from one reference image to the others.
    Distances(DistanceOpts),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Attack(_) => "attack",
            Command::Project(_) => "project",
            Command::Perturb(_) => "perturb",
            Command::DimDemo(_) => "dim-demo",
            Command::Distances(_) => "distances",
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOpts {
    /// Directory with train-/test-images.idx3-ubyte and matching label files
    /// [default: the bundled MNIST subset].
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Use seeded synthetic digits instead of IDX files.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub synthetic: bool,
    /// Use only the first N images.
    #[arg(long, value_name = "N")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Block-average images by this factor after loading [default: 1].
    #[arg(long, value_name = "K")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub downsample: Option<usize>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOpts {
    #[command(flatten)]
    pub data: DataOpts,
    /// linear-softmax or conv-small [default: conv-small].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    /// [default: 10]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// [default: 0.1 linear-softmax, 0.05 conv-small]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    /// Train on Wasserstein PGD examples with a geometric radius schedule.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub adversarial: bool,
    /// First radius of the schedule, ε·n_pixel [default: 0.1].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_start: Option<f64>,
    /// Last radius of the schedule, ε·n_pixel [default: 10].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_end: Option<f64>,
    /// PGD steps per training example [default: 40].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack_steps: Option<usize>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    /// Where to write the trained model [default: --out with extension
    /// .ckpt, else model.ckpt].
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThreatOpts {
    /// wasserstein, linf or l2 [default: wasserstein].
    #[arg(long = "threat")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// l2_steepest or linf_sign [default: l2_steepest for wasserstein,
    /// linf_sign for linf, l2_steepest for l2].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_kind: Option<String>,
    /// Step size [default: 0.06 for wasserstein, a quarter of the smallest
    /// positive radius for ℓp].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// [default: 200]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Transport window width in pixels, odd [default: 5].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Entropic regularization of the projection [default: 3000].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Reuse the projection duals between steps [default: true].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<bool>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackOpts {
    #[command(flatten)]
    pub data: DataOpts,
    /// Model to attack.
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Ascending radius grid, comma separated; ε·n_pixel for wasserstein
    /// [default: 0,5,10,20,50,100,200,500,1000].
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub eps: Vec<f64>,
    #[command(flatten)]
    pub threat: ThreatOpts,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectOpts {
    /// Project [0, 1] onto the ball of radius 0.5 around [1, 0] on a 1×2 grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub toy: bool,
    #[command(flatten)]
    pub data: DataOpts,
    /// Index of the image whose ball is projected onto [default: 0].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    /// Index of the image to project [default: same as --index].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    /// Radius, ε·n_pixel [default: 10; 1 with --toy].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Regularization; repeat to compare several [default: 3000].
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub lambda: Vec<f64>,
    /// Transport window width, odd [default: 5; global with --toy].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Sweep cap [default: 400].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_sweeps: Option<usize>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbOpts {
    #[command(flatten)]
    pub data: DataOpts,
    /// Translation amounts in percent of the width, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub translate: Vec<f64>,
    /// Rotation angles in degrees.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub rotate: Vec<f64>,
    /// Odd Gaussian kernel widths in pixels.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub blur: Vec<f64>,
    /// Distance metrics: l2, wasserstein [default: both].
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<String>,
    /// Also report accuracy of this model under each perturbation.
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimOpts {
    #[command(flatten)]
    pub data: DataOpts,
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Brightness divisor [default: 30].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factor: Option<f64>,
    /// Radius used for the ball audit, ε·n_pixel [default: 10].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceOpts {
    #[command(flatten)]
    pub data: DataOpts,
    /// Reference image index [default: 0].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    /// exact or entropic [default: exact].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Regularization for the entropic mode [default: 3000].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Transport window width, odd; omit for global support.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
}

/// Values shared by every command after merging.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Globals {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Reads a config file into an object.
pub fn read_config(path: &Path) -> Result<Map<String, Value>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Failure::usage(format!("config {}: top level must be an object", path.display()))),
        Err(e) => Err(Failure::usage(format!("config {}: {e}", path.display()))),
    }
}

/// Overlays `flags` on `base` key by key, recursing into objects.
fn overlay(base: &mut Value, flags: Value) {
    match (base, flags) {
        (Value::Object(b), Value::Object(f)) => {
            for (k, v) in f {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, f) => *b = f,
    }
}

/// Merges the config-file section `section` (if any) with the parsed flags.
pub fn merge<T: Serialize + DeserializeOwned>(file: Option<&Value>, flags: &T, section: &str) -> Result<T, Failure> {
    let mut base = file.cloned().unwrap_or_else(|| Value::Object(Map::new()));
    if !base.is_object() {
        return Err(Failure::usage(format!("config section `{section}` must be an object")));
    }
    let flags = serde_json::to_value(flags).map_err(|e| Failure::usage(e.to_string()))?;
    overlay(&mut base, flags);
    serde_json::from_value(base).map_err(|e| Failure::usage(format!("config section `{section}`: {e}")))
}
