use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use timeweaver::checkpoint::Checkpoint;
use timeweaver::conditioning::{
    identity_separation, train_identity_encoder_with, IdentityEncoder, IdentityTrainConfig, ReferenceEntry, ReferenceSet,
};
use timeweaver::config::Config;
use timeweaver::diffusion::{RestorationModel, TrainState};
use timeweaver::evalkit::{
    run_age_gap_sweep, run_guidance_ablation, run_identity_ablation, train_age_estimator, AgeEstimator, AgeTrainConfig,
    EvalContext,
};
use timeweaver::guidance::{restore_batch, GuidanceConfig};
use timeweaver::synthlab::{build_dataset_with, AgeSpread, Dataset, DatasetOptions, Split};
use timeweaver::{BinaryMask, ImageTensor};

mod manifest;

use manifest::{hash_inputs, png_files, RunManifest};

const IDENTITY_PREFIX: &str = "idenc.";
const AGE_PREFIX: &str = "age.";

/// Cross-age reference-based face restoration on synthetic faces.
#[derive(Parser, Debug)]
#[command(name = "timeweaver", version)]
struct Cli {
    /// Artifact root for default outputs and run manifests.
    #[arg(long, env = "TIMEWEAVER_HOME", default_value = "timeweaver-home", global = true)]
    home: PathBuf,
    /// Configuration file (TOML); absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic face dataset with degraded inputs and a manifest.
    Synth(SynthArgs),
    /// Train the identity encoder and the age estimator.
    TrainEncoders(EncoderArgs),
    /// Train the restoration model.
    Train(TrainArgs),
    /// Restore one degraded image from a directory of references.
    Restore(RestoreArgs),
    /// Run an evaluation suite and write JSON and Markdown reports.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    identities: usize,
    #[arg(long)]
    per_identity: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training sets keep each identity within `synthlab.train_age_radius` years;
    /// test sets draw ages over the full range.
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Id of the first identity (use disjoint ranges for disjoint splits).
    #[arg(long, default_value_t = 0)]
    first_identity: u64,
}

#[derive(Args, Debug)]
struct EncoderArgs {
    #[arg(long)]
    data: PathBuf,
    /// Optimization steps for each encoder.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint [default: <home>/encoders.ckpt]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Variant {
    Full,
    NoGlobal,
    NoFacial,
    NoMask,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Total planned steps (fixes the phase split and loss warm-up).
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Encoder checkpoint [default: <home>/encoders.ckpt]
    #[arg(long)]
    encoders: Option<PathBuf>,
    /// Continue from a training checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many steps and save a resumable checkpoint.
    #[arg(long)]
    stop_at: Option<usize>,
    /// Identity-conditioning variant applied before the adapter phase.
    #[arg(long, value_enum)]
    variant: Option<Variant>,
    /// Output checkpoint [default: <home>/model.ckpt]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RestoreArgs {
    /// Degraded 32x32 input image.
    #[arg(long)]
    lq: PathBuf,
    /// Directory of reference PNGs; organ masks are read from `<refs>/masks/<name>` when present.
    #[arg(long)]
    refs: PathBuf,
    /// Target age in years; omit for unguided restoration.
    #[arg(long)]
    age: Option<u32>,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    n_opt: usize,
    #[arg(long, default_value_t = 1.0)]
    eta: f32,
    #[arg(long)]
    no_ttab: bool,
    #[arg(long)]
    no_aagg: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model checkpoint [default: <home>/model.ckpt]
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output PNG; a `.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Agegap,
    Identity,
    Guidance,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    /// Model checkpoint (the `full` variant for the identity suite).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Encoder checkpoint providing the age estimator [default: <home>/encoders.ckpt]
    #[arg(long)]
    encoders: Option<PathBuf>,
    /// Extra identity variants as `label=FILE` (no_global, no_facial, no_mask).
    #[arg(long = "variant", value_parser = parse_variant)]
    variants: Vec<(String, PathBuf)>,
    /// Report directory [default: <home>/reports]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (label, path) = s.split_once('=').ok_or_else(|| format!("expected label=FILE, got `{s}`"))?;
    if !["no_global", "no_facial", "no_mask"].contains(&label) {
        return Err(format!("unknown variant `{label}`"));
    }
    Ok((label.to_string(), PathBuf::from(path)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    match &cli.command {
        Command::Synth(a) => synth(cli, &config, a),
        Command::TrainEncoders(a) => train_encoders(cli, &config, a),
        Command::Train(a) => train(cli, &config, a),
        Command::Restore(a) => restore(cli, &config, a),
        Command::Eval(a) => eval(cli, &config, a),
    }
}

fn finish(cli: &Cli, m: RunManifest) -> Result<()> {
    let path = m.finish(&cli.home)?;
    log::info!("run manifest: {}", path.display());
    Ok(())
}

fn synth(cli: &Cli, config: &Config, a: &SynthArgs) -> Result<()> {
    let (split, age_spread) = match a.split {
        SplitArg::Train if config.synthlab.train_age_radius > 0 => {
            (Split::Train, AgeSpread::Narrow { radius: config.synthlab.train_age_radius })
        }
        SplitArg::Train => (Split::Train, AgeSpread::Wide),
        SplitArg::Test => (Split::Test, AgeSpread::Wide),
    };
    let opts = DatasetOptions {
        split,
        first_identity: a.first_identity,
        age_spread,
        degrade: config.synthlab.degrade.clone(),
        occlusion_prob: config.synthlab.occlusion_prob,
        ..Default::default()
    };
    let mut m = RunManifest::begin("synth", config, a.seed, hash_inputs(&[])?);
    let manifest = build_dataset_with(a.identities, a.per_identity, &a.out, a.seed, &opts)?;
    m.outputs.push(a.out.clone());
    m.metric("records", manifest.records.len());
    m.metric("identities", manifest.identity_count());
    println!("wrote {} records to {}", manifest.records.len(), a.out.display());
    finish(cli, m)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn encoders_path(cli: &Cli, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cli.home.join("encoders.ckpt"))
}

fn load_encoders(path: &Path) -> Result<(IdentityEncoder, AgeEstimator)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading encoders {}", path.display()))?;
    if ck.meta["kind"] != "encoders" {
        bail!("{} is not an encoder checkpoint", path.display());
    }
    Ok((IdentityEncoder::from_checkpoint(&ck, IDENTITY_PREFIX)?, AgeEstimator::from_checkpoint(&ck, AGE_PREFIX)?))
}

fn train_encoders(cli: &Cli, config: &Config, a: &EncoderArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut m = RunManifest::begin("train-encoders", config, a.seed, hash_inputs(&[&a.data])?);
    let e = &config.encoders;
    let id_cfg = IdentityTrainConfig {
        dim: config.conditioning.d_id,
        steps: a.steps.unwrap_or(e.id_steps),
        batch: e.id_batch,
        lr: e.id_lr,
        margin: e.margin,
        scale: e.scale,
        seed: a.seed,
    };
    let identity = train_identity_encoder_with(&ds, &id_cfg)?;
    let age_cfg = AgeTrainConfig { steps: a.steps.unwrap_or(e.age_steps), batch: e.age_batch, lr: e.age_lr, seed: a.seed };
    let age = train_age_estimator(&ds, &age_cfg)?;
    let sep = identity_separation(&identity, &ds);
    let mae = age.validation_mae(&ds)?;
    println!("identity separation {:.3} (train), age MAE {mae:.2} years (train)", sep.gap());

    let mut ck = Checkpoint::new(serde_json::json!({ "kind": "encoders", "seed": a.seed }));
    identity.add_to_checkpoint(&mut ck, IDENTITY_PREFIX);
    age.add_to_checkpoint(&mut ck, AGE_PREFIX);
    let out = encoders_path(cli, &a.out);
    ck.save(&out)?;
    m.outputs.push(out);
    m.metric("identity_separation", sep);
    m.metric("age_mae_train", mae);
    finish(cli, m)
}

fn train(cli: &Cli, config: &Config, a: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let enc_path = encoders_path(cli, &a.encoders);
    let mut inputs: Vec<&Path> = vec![&a.data];
    let mut state = match &a.resume {
        Some(p) => {
            inputs.push(p);
            let s = TrainState::load(p).with_context(|| format!("loading {}", p.display()))?;
            if s.total_steps != a.steps {
                bail!("checkpoint plans {} steps, --steps is {}", s.total_steps, a.steps);
            }
            s
        }
        None => {
            inputs.push(&enc_path);
            let (identity, _) = load_encoders(&enc_path)?;
            TrainState::new(config, identity, a.steps, a.seed)?
        }
    };
    let effective = state.model.config.clone();
    let mut m = RunManifest::begin("train", &effective, state.seed(), hash_inputs(&inputs)?);
    if let Some(v) = a.variant {
        let beta = effective.conditioning.beta;
        match v {
            Variant::Full => state.set_variant(true, true, beta)?,
            Variant::NoGlobal => state.set_variant(false, true, beta)?,
            Variant::NoFacial => state.set_variant(true, false, beta)?,
            Variant::NoMask => state.set_variant(true, true, 0.0)?,
        }
    }
    let until = a.stop_at.unwrap_or(a.steps).min(a.steps);
    let start = state.step;
    state.run(&ds, until)?;
    let out = a.out.clone().unwrap_or_else(|| cli.home.join("model.ckpt"));
    state.save(&out)?;
    println!("trained steps {start}..{} of {}, checkpoint {}", state.step, a.steps, out.display());

    let curve: Vec<(usize, f64, f64)> =
        state.log.iter().map(|r| (r.step, r.loss.l_diff, r.loss.l_ea_dists)).collect();
    m.outputs.push(out);
    m.metric("steps_done", state.step);
    m.metric("loss_curve", curve);
    m.metric("drop_events", state.drop_events);
    m.metric("adapter_instances", state.adapter_instances);
    m.metric("drop_frequency", state.drop_frequency());
    finish(cli, m)
}

fn load_refs(dir: &Path) -> Result<ReferenceSet> {
    let files = png_files(dir)?;
    if files.is_empty() {
        bail!("no reference images in {}", dir.display());
    }
    let mut entries = Vec::new();
    for f in files {
        let image = ImageTensor::load_png(&f)?;
        let mask_path = dir.join("masks").join(f.file_name().expect("file name"));
        let organ_mask = if mask_path.is_file() {
            BinaryMask::load_png(&mask_path)?
        } else {
            log::warn!("no organ mask for {}; patch weights fall back to uniform", f.display());
            BinaryMask::empty(image.height(), image.width())
        };
        entries.push(ReferenceEntry { image, organ_mask, valid: true });
    }
    Ok(ReferenceSet::new(entries)?)
}

fn restore(cli: &Cli, config: &Config, a: &RestoreArgs) -> Result<()> {
    let ckpt = a.ckpt.clone().unwrap_or_else(|| cli.home.join("model.ckpt"));
    let model = RestorationModel::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let lq = ImageTensor::load_png(&a.lq)?;
    let refs = load_refs(&a.refs)?;
    let cfg = GuidanceConfig {
        tau: a.age,
        n_opt: a.n_opt,
        eta: a.eta,
        ttab_enabled: !a.no_ttab,
        aagg_enabled: !a.no_aagg,
        sampler_steps: a.steps,
    };
    let mut m = RunManifest::begin("restore", config, a.seed, hash_inputs(&[&ckpt, &a.lq, &a.refs])?);
    let (mut images, report) = restore_batch(&model, &[&lq], &[&refs], &cfg, &[a.seed])?;
    images.remove(0).save_png(&a.out)?;
    let sidecar = a.out.with_extension("json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", sidecar.display()))?;
    println!("restored {} -> {}", a.lq.display(), a.out.display());
    m.outputs.push(a.out.clone());
    m.outputs.push(sidecar);
    m.metric("guidance", &cfg);
    finish(cli, m)
}

fn eval(cli: &Cli, config: &Config, a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let enc_path = encoders_path(cli, &a.encoders);
    let (_, age) = load_encoders(&enc_path)?;
    let model = RestorationModel::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let mut inputs: Vec<&Path> = vec![&a.ckpt, &a.data, &enc_path];
    inputs.extend(a.variants.iter().map(|(_, p)| p.as_path()));
    let mut m = RunManifest::begin("eval", config, a.seed, hash_inputs(&inputs)?);
    let ctx = EvalContext { identity: &model.identity, age: &age, config, seed: a.seed };
    let (report, stem) = match a.suite {
        Suite::Agegap => (run_age_gap_sweep(&ctx, &model, &ds)?, "agegap"),
        Suite::Guidance => (run_guidance_ablation(&ctx, &model, &ds)?, "guidance"),
        Suite::Identity => {
            let mut loaded = Vec::new();
            for (label, path) in &a.variants {
                loaded.push((label.as_str(), RestorationModel::load(path).with_context(|| format!("loading {}", path.display()))?));
            }
            let mut variants: Vec<(&str, &RestorationModel)> = vec![("full", &model)];
            variants.extend(loaded.iter().map(|(l, m)| (*l, m)));
            (run_identity_ablation(&ctx, &variants, &ds)?, "identity")
        }
    };
    let dir = a.out.clone().unwrap_or_else(|| cli.home.join("reports"));
    let written = report.write(&dir, stem)?;
    print!("{}", report.to_markdown());
    m.outputs.extend(written);
    m.metric("report", &report);
    finish(cli, m)
}
