//! `mkfusion`: generate a benchmark bundle, train, evaluate, retrieve.
//!
//! Every value can come from a flag, from `--config <json>` (keys spelled as
//! the long flags, `_` or `-`), or from the built-in default, in that order. Seeds fall
//! back to `MKFUSION_SEED` before the default.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};
use mkfusion_core::data::{generate_synthetic, SyntheticSpec};
use mkfusion_core::eval::{
    evaluate, prototypes_for_species, retrieve_topk, EvalConfig, EvalMode, DEFAULT_N_SYN, DEFAULT_TOP_K,
};
use mkfusion_core::model::{FusionMode, MkfnetModel};
use mkfusion_core::train::{Checkpoint, TrainConfig, Trainer};
use mkfusion_core::{DatasetBundle, SampleAccess};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const SEED_ENV: &str = "MKFUSION_SEED";
const DEFAULT_SEED: u64 = 1;

#[derive(Parser)]
#[command(name = "mkfusion", version, about = "Multi-knowledge fusion GAN for generalized zero-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic hierarchical benchmark bundle.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and a per-loop report.
    Train(TrainArgs),
    /// Score a checkpoint on the bundle's test samples.
    Eval(EvalArgs),
    /// Rank unseen test samples by similarity to one unseen class.
    Retrieve(RetrieveArgs),
}

/// Fills every unset flag from the config file.
macro_rules! overlay {
    ($t:ident { $($f:ident),* $(,)? }) => {
        impl $t {
            fn overlay(self, file: $t) -> $t {
                $t { config: self.config, $($f: self.$f.or(file.$f)),* }
            }
        }
    };
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct GenDataArgs {
    /// JSON file with defaults for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    families: Option<usize>,
    /// Genera per family.
    #[arg(long)]
    genera: Option<usize>,
    /// Species per genus.
    #[arg(long)]
    species: Option<usize>,
    /// Samples per species.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    vis_dim: Option<usize>,
    #[arg(long)]
    sem_dim: Option<usize>,
    /// Fraction of species held out as unseen, in (0, 1).
    #[arg(long)]
    unseen_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output bundle path.
    #[arg(long)]
    out: Option<PathBuf>,
}
overlay!(GenDataArgs { families, genera, species, samples, vis_dim, sem_dim, unseen_frac, seed, out });

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Dataset bundle.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Outer loops in total (including loops already in a resumed checkpoint).
    #[arg(long)]
    steps: Option<usize>,
    /// Loop after which the new-feature generator starts.
    #[arg(long)]
    n_nfg: Option<usize>,
    /// Stability above which offspring join the enhanced pool.
    #[arg(long)]
    kappa1: Option<f64>,
    /// Stability below which offspring join the novel pool.
    #[arg(long)]
    kappa2: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Share of each seen species kept out of training for seen-class tests.
    #[arg(long)]
    holdout: Option<f64>,
    /// adaptive or summing.
    #[arg(long, value_parser = parse_lowercase::<FusionMode>)]
    fusion: Option<FusionMode>,
    /// Continue from a checkpoint written by an earlier `train`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Fill the report's seconds column (makes the report run-dependent).
    #[arg(long, num_args = 0, default_missing_value = "true")]
    timing: Option<bool>,
}
overlay!(TrainArgs {
    data,
    out,
    steps,
    n_nfg,
    kappa1,
    kappa2,
    lambda,
    seed,
    batch_size,
    learning_rate,
    holdout,
    fusion,
    resume,
    timing,
});

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Generated features averaged into each class prototype [default: 60].
    #[arg(long)]
    n_syn: Option<usize>,
    /// zsl or gzsl [default: gzsl].
    #[arg(long, value_parser = parse_lowercase::<EvalMode>)]
    mode: Option<EvalMode>,
    /// Retrieval depth for precision@k [default: 5].
    #[arg(long)]
    k: Option<usize>,
    /// Prototype noise seed [default: the checkpoint's training seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}
overlay!(EvalArgs { data, checkpoint, n_syn, mode, k, seed, out });

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct RetrieveArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Unseen species id to retrieve.
    #[arg(long)]
    class: Option<usize>,
    /// [default: 5]
    #[arg(long)]
    k: Option<usize>,
    /// [default: 60]
    #[arg(long)]
    n_syn: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}
overlay!(RetrieveArgs { data, checkpoint, class, k, n_syn, seed, out });

fn parse_lowercase<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unrecognized value {s:?}"))
}

fn with_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    // Keys may be spelled like the flags (`n-nfg`) or like the manifest (`n_nfg`).
    let value = match value {
        serde_json::Value::Object(map) => {
            serde_json::Value::Object(map.into_iter().map(|(k, v)| (k.replace('_', "-"), v)).collect())
        }
        other => other,
    };
    serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(SEED_ENV),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.with_context(|| format!("missing --{flag}"))
}

/// Writes through a sibling temp file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().with_context(|| format!("{} has no file name", path.display()))?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    version: &'static str,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<&'static str, String>,
    outputs: BTreeMap<&'static str, String>,
    started: String,
    finished: String,
}

impl RunManifest {
    fn new(command: &'static str, seed: u64, config: impl Serialize, started: String) -> Result<Self> {
        Ok(Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started,
            finished: String::new(),
        })
    }

    fn input(mut self, key: &'static str, p: &Path) -> Self {
        self.inputs.insert(key, p.display().to_string());
        self
    }

    fn output(&mut self, key: &'static str, p: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(p, bytes)?;
        self.outputs.insert(key, p.display().to_string());
        Ok(())
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.finished = now();
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

/// `dir/stem.manifest.json` for a single-file output.
fn sibling_manifest(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    DatasetBundle::load(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

/// Restores the model and checks that it fits the bundle.
fn model_for(ckpt: &Checkpoint, bundle: &DatasetBundle) -> Result<MkfnetModel> {
    let (model, _) = ckpt.restore()?;
    let (m, d) = (&model.config, bundle.dims());
    ensure!(
        m.visual_dim == d.visual,
        "dimension mismatch: checkpoint visual dim {} vs dataset {}",
        m.visual_dim,
        d.visual
    );
    ensure!(
        m.semantic_dim == d.semantic,
        "dimension mismatch: checkpoint semantic dim {} vs dataset {}",
        m.semantic_dim,
        d.semantic
    );
    ensure!(
        m.seen_classes == bundle.seen_species().len(),
        "dimension mismatch: checkpoint has {} seen classes, dataset {}",
        m.seen_classes,
        bundle.seen_species().len()
    );
    Ok(model)
}

fn gen_data(flags: GenDataArgs) -> Result<()> {
    let started = now();
    let file: GenDataArgs = with_config(flags.config.as_deref())?;
    let a = flags.overlay(file);
    let out = required(a.out, "out")?;
    let seed = a.seed.or(env_seed()?).unwrap_or(DEFAULT_SEED);
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        families: a.families.unwrap_or(d.families),
        genera_per_family: a.genera.unwrap_or(d.genera_per_family),
        species_per_genus: a.species.unwrap_or(d.species_per_genus),
        samples_per_species: a.samples.unwrap_or(d.samples_per_species),
        visual_dim: a.vis_dim.unwrap_or(d.visual_dim),
        semantic_dim: a.sem_dim.unwrap_or(d.semantic_dim),
        unseen_fraction: a.unseen_frac.unwrap_or(d.unseen_fraction),
        ..d
    };
    let bundle = generate_synthetic(&spec, seed)?;
    let mut manifest = RunManifest::new("gen-data", seed, &spec, started)?;
    let mut json = bundle.to_json();
    json.push('\n');
    manifest.output("dataset", &out, json.as_bytes())?;
    manifest.finish(&sibling_manifest(&out))?;
    eprintln!(
        "wrote {}: {} classes ({} unseen), {} samples",
        out.display(),
        bundle.classes.len(),
        bundle.splits.unseen.len(),
        bundle.samples.len()
    );
    Ok(())
}

fn train(flags: TrainArgs) -> Result<()> {
    let started = now();
    let file: TrainArgs = with_config(flags.config.as_deref())?;
    let a = flags.overlay(file);
    let data = required(a.data, "data")?;
    let out = required(a.out, "out")?;
    let bundle = load_bundle(&data)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let c = &ckpt.config;
            // A resumed run keeps its configuration; only the loop budget may grow.
            let same = [
                ("n-nfg", a.n_nfg.is_none_or(|v| v == c.n_nfg)),
                ("kappa1", a.kappa1.is_none_or(|v| v == c.kappa1)),
                ("kappa2", a.kappa2.is_none_or(|v| v == c.kappa2)),
                ("lambda", a.lambda.is_none_or(|v| v == c.lambda)),
                ("seed", a.seed.is_none_or(|v| v == c.seed)),
                ("batch-size", a.batch_size.is_none_or(|v| v == c.batch_size)),
                ("learning-rate", a.learning_rate.is_none_or(|v| v == c.learning_rate)),
                ("holdout", a.holdout.is_none_or(|v| v == c.holdout)),
                ("fusion", a.fusion.is_none_or(|v| v == c.fusion)),
            ];
            if let Some((flag, _)) = same.iter().find(|(_, ok)| !ok) {
                bail!("--{flag} differs from the checkpoint being resumed");
            }
            let mut t = Trainer::resume(&ckpt, &bundle).with_context(|| format!("cannot resume {}", path.display()))?;
            if let Some(steps) = a.steps {
                ensure!(
                    steps >= t.completed_loops(),
                    "--steps {steps} is below the {} loops already completed",
                    t.completed_loops()
                );
                t.config.steps = steps;
            }
            t
        }
        None => {
            let d = TrainConfig::default();
            let config = TrainConfig {
                steps: a.steps.unwrap_or(d.steps),
                n_nfg: a.n_nfg.unwrap_or(d.n_nfg),
                kappa1: a.kappa1.unwrap_or(d.kappa1),
                kappa2: a.kappa2.unwrap_or(d.kappa2),
                lambda: a.lambda.unwrap_or(d.lambda),
                seed: a.seed.or(env_seed()?).unwrap_or(DEFAULT_SEED),
                batch_size: a.batch_size.unwrap_or(d.batch_size),
                learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
                holdout: a.holdout.unwrap_or(d.holdout),
                fusion: a.fusion.unwrap_or(d.fusion),
                ..d
            };
            Trainer::new(config, &bundle)?
        }
    };
    let first = trainer.completed_loops();
    trainer.run()?;

    create_dir(&out)?;
    let config = trainer.config.clone();
    let mut manifest = RunManifest::new("train", config.seed, &config, started)?.input("data", &data);
    if let Some(r) = &a.resume {
        manifest = manifest.input("resume", r);
    }
    let timing = a.timing.unwrap_or(false);
    let mut ckpt = trainer.checkpoint();
    if !timing {
        // Wall-clock times would make otherwise identical checkpoints differ.
        ckpt.training.iter_mut().flat_map(|t| &mut t.report.records).for_each(|r| r.seconds = 0.0);
    }
    let mut ckpt = ckpt.to_json();
    ckpt.push('\n');
    manifest.output("checkpoint", &out.join("checkpoint.json"), ckpt.as_bytes())?;
    let report = trainer.report.to_csv(timing);
    manifest.output("report", &out.join("report.csv"), report.as_bytes())?;
    manifest.finish(&out.join("manifest.json"))?;
    let last = trainer.report.records.last();
    eprintln!(
        "trained loops {}..{} into {}; pools: {} enhanced, {} novel",
        first + 1,
        trainer.completed_loops(),
        out.display(),
        last.map_or(0, |r| r.enhanced_size),
        last.map_or(0, |r| r.novel_size)
    );
    Ok(())
}

fn eval(flags: EvalArgs) -> Result<()> {
    let started = now();
    let file: EvalArgs = with_config(flags.config.as_deref())?;
    let a = flags.overlay(file);
    let data = required(a.data, "data")?;
    let ckpt_path = required(a.checkpoint, "checkpoint")?;
    let out = required(a.out, "out")?;
    let bundle = load_bundle(&data)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let model = model_for(&ckpt, &bundle)?;
    let cfg = EvalConfig {
        mode: a.mode.unwrap_or(EvalMode::Gzsl),
        n_syn: a.n_syn.unwrap_or(DEFAULT_N_SYN),
        seed: a.seed.or(env_seed()?).unwrap_or(ckpt.seed),
        holdout: ckpt.config.holdout,
        top_k: a.k.unwrap_or(DEFAULT_TOP_K),
    };
    let result = evaluate(&model, &bundle, &cfg)?;

    create_dir(&out)?;
    let mut manifest =
        RunManifest::new("eval", cfg.seed, &cfg, started)?.input("data", &data).input("checkpoint", &ckpt_path);
    manifest.output("metrics", &out.join("metrics.txt"), result.metrics.to_text().as_bytes())?;
    manifest.output("metrics_csv", &out.join("metrics.csv"), result.metrics.to_csv().as_bytes())?;
    manifest.output("per_class", &out.join("per_class.csv"), result.per_class_csv().as_bytes())?;
    if let Some(curve) = &result.curve {
        manifest.output("curve", &out.join("curve.csv"), curve.to_csv().as_bytes())?;
        manifest.output("curve_svg", &out.join("curve.svg"), curve.to_svg().as_bytes())?;
    }
    manifest.finish(&out.join("manifest.json"))?;
    let m = &result.metrics;
    match &m.gzsl {
        Some(g) => eprintln!(
            "top1_unseen={:.4} S={:.4} U={:.4} H={:.4} H_best={:.4} AUSUC={:.4}",
            m.top1_unseen, g.seen, g.unseen, g.h, g.h_best, g.ausuc
        ),
        None => eprintln!("top1_unseen={:.4}", m.top1_unseen),
    }
    Ok(())
}

fn retrieve(flags: RetrieveArgs) -> Result<()> {
    let started = now();
    let file: RetrieveArgs = with_config(flags.config.as_deref())?;
    let a = flags.overlay(file);
    let data = required(a.data, "data")?;
    let ckpt_path = required(a.checkpoint, "checkpoint")?;
    let class = required(a.class, "class")?;
    let out = required(a.out, "out")?;
    let bundle = load_bundle(&data)?;
    ensure!(bundle.class(class).is_some(), "unknown class id {class}");
    ensure!(
        bundle.unseen_species().contains(&class),
        "class {class} is a seen class; retrieval ranks the unseen test samples against an unseen class"
    );
    let ckpt = load_checkpoint(&ckpt_path)?;
    let model = model_for(&ckpt, &bundle)?;
    let k = a.k.unwrap_or(DEFAULT_TOP_K);
    let n_syn = a.n_syn.unwrap_or(DEFAULT_N_SYN);
    let seed = a.seed.or(env_seed()?).unwrap_or(ckpt.seed);
    let protos = prototypes_for_species(&model, &bundle, &[class], n_syn, seed)?;
    let pool: Vec<(usize, &[f64])> = bundle.unseen_sample_ids().into_iter().map(|i| (i, bundle.visual(i))).collect();
    let ranked = retrieve_topk(&protos, &pool, class, k)?;

    let mut csv = String::from("rank,sample_id,similarity\n");
    for (r, (id, sim)) in ranked.iter().enumerate() {
        csv.push_str(&format!("{},{id},{sim}\n", r + 1));
    }
    #[derive(Serialize)]
    struct Resolved {
        class: usize,
        k: usize,
        n_syn: usize,
        seed: u64,
    }
    let mut manifest = RunManifest::new("retrieve", seed, Resolved { class, k, n_syn, seed }, started)?
        .input("data", &data)
        .input("checkpoint", &ckpt_path);
    manifest.output("ranking", &out, csv.as_bytes())?;
    manifest.finish(&sibling_manifest(&out))?;
    let hits = ranked.iter().filter(|(id, _)| bundle.sample_species(*id) == class).count();
    eprintln!("class {class}: {hits}/{} of the top {k} belong to the class", ranked.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Retrieve(a) => retrieve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
