//! Adversarial training schedule.
//!
//! Each outer loop optionally runs a new-feature generation round (once the
//! loop index exceeds `n_nfg`), then performs [`CRITIC_STEPS`] discriminator
//! updates followed by one joint generator + fusion update. Generators step
//! on their own level losses only; the fusion module steps on the fusion
//! loss, which also carries the enhanced and novel regularizers.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    compute_visual_centers, derive_knowledge_datasets_for, holdout_split, KnowledgeDatasets, LabelSpace, Level,
    SampleAccess, VisualCenters,
};
use crate::error::{TensorError, TrainError};
use crate::model::{
    center_rows, loss_discriminator, loss_fusion, loss_generator, one_hot, FusionMode, MkfnetModel, ModelConfig,
    Trainable,
};
use crate::nfg::{generation_round, loss_er, loss_nr, ParentSource, Pools, Thresholds};
use crate::optim::AdamState;
use crate::tensor::{clip_weights, Graph, Tensor};

type Result<T> = std::result::Result<T, TrainError>;

/// Discriminator updates per outer loop.
pub const CRITIC_STEPS: usize = 5;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "mkfusion-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub n_nfg: usize,
    pub kappa1: f64,
    pub kappa2: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub noise_dim: usize,
    pub clip: f64,
    pub seed: u64,
    pub offspring_budget: usize,
    /// Fraction of each seen species' samples held out for seen-class testing.
    pub holdout: f64,
    pub fusion: FusionMode,
    pub gen_hidden: usize,
    pub disc_hidden: [usize; 2],
    pub fusion_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            n_nfg: 3,
            kappa1: 0.8,
            kappa2: 0.2,
            lambda: 1.0,
            batch_size: 64,
            learning_rate: 1e-3,
            noise_dim: 32,
            clip: 0.01,
            seed: 1,
            offspring_budget: 64,
            holdout: 0.2,
            fusion: FusionMode::Adaptive,
            gen_hidden: 256,
            disc_hidden: [256, 128],
            fusion_hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<Thresholds> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return bad("clip constant must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("holdout must lie in [0, 1)");
        }
        if self.noise_dim < 1 || self.gen_hidden < 1 || self.fusion_hidden < 1 || self.disc_hidden.contains(&0) {
            return bad("layer widths must be at least 1");
        }
        Thresholds::new(self.kappa1, self.kappa2)
            .map_err(|_| TrainError::Config(format!("kappa1 ({}) must exceed kappa2 ({})", self.kappa1, self.kappa2)))
    }

    pub fn model_config(&self, visual_dim: usize, semantic_dim: usize, seen_classes: usize) -> ModelConfig {
        ModelConfig {
            visual_dim,
            semantic_dim,
            seen_classes,
            noise_dim: self.noise_dim,
            gen_hidden: self.gen_hidden,
            disc_hidden: self.disc_hidden,
            fusion_hidden: self.fusion_hidden,
            fusion: self.fusion,
            ..ModelConfig::default()
        }
    }
}

/// One outer loop's losses and bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// 1-based outer loop index.
    pub outer_loop: usize,
    /// Mean critic loss over the loop's discriminator updates.
    pub l_d: f64,
    pub l_g_species: f64,
    pub l_g_genus: f64,
    pub l_g_family: f64,
    pub l_fm: f64,
    pub l_er: f64,
    pub l_nr: f64,
    pub enhanced_size: usize,
    pub novel_size: usize,
    pub seconds: f64,
    pub disc_updates: usize,
    pub gen_updates: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
}

pub const REPORT_HEADER: &str =
    "loop,l_d,l_g_species,l_g_genus,l_g_family,l_fm,l_er,l_nr,enhanced_size,novel_size,seconds";

impl TrainReport {
    /// CSV rows; with `timing` off the `seconds` column is left empty so that
    /// identical runs produce identical bytes.
    pub fn write_csv<W: Write>(&self, mut w: W, timing: bool) -> std::io::Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        for r in &self.records {
            let secs = if timing { format!("{:.6}", r.seconds) } else { String::new() };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.outer_loop,
                r.l_d,
                r.l_g_species,
                r.l_g_genus,
                r.l_g_family,
                r.l_fm,
                r.l_er,
                r.l_nr,
                r.enhanced_size,
                r.novel_size,
                secs
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self, timing: bool) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, timing).expect("write to vec");
        String::from_utf8(buf).expect("ascii csv")
    }
}

/// Everything derived from the bundle once, before the first loop.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub datasets: KnowledgeDatasets,
    pub centers: [VisualCenters; 3],
    pub labels: LabelSpace,
    pub parents: ParentSource,
    /// Class-head index of every species-level entry.
    pub heads: Vec<usize>,
    pub train_ids: Vec<usize>,
}

impl TrainingData {
    /// Reads only the visual vectors of seen, non-held-out samples.
    pub fn prepare<A: SampleAccess + ?Sized>(access: &A, holdout: f64) -> Result<Self> {
        let (train_ids, _) = holdout_split(access, holdout);
        let seen = access.seen_species();
        let datasets = derive_knowledge_datasets_for(access, seen, &train_ids)?;
        let centers = [
            compute_visual_centers(datasets.get(Level::Family))?,
            compute_visual_centers(datasets.get(Level::Genus))?,
            compute_visual_centers(datasets.get(Level::Species))?,
        ];
        let labels = LabelSpace::new(seen, access.classes())?;
        let heads = datasets
            .get(Level::Species)
            .entries
            .iter()
            .map(|e| labels.head_index(e.species_id).expect("entry species is seen"))
            .collect();
        let parents = ParentSource::from_datasets(&datasets);
        Ok(Self { datasets, centers, labels, parents, heads, train_ids })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Optimizers {
    generators: [AdamState; 3],
    discriminator: AdamState,
    fusion: AdamState,
}

impl Optimizers {
    fn new(lr: f64) -> Self {
        Self {
            generators: [AdamState::new(lr), AdamState::new(lr), AdamState::new(lr)],
            discriminator: AdamState::new(lr),
            fusion: AdamState::new(lr),
        }
    }
}

/// Resumable training state.
#[derive(Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: MkfnetModel,
    pub pools: Pools,
    pub report: TrainReport,
    thresholds: Thresholds,
    optim: Optimizers,
    rng: ChaCha8Rng,
    completed: usize,
    data: TrainingData,
}

struct Batch {
    semantics: Tensor,
    real: Tensor,
    targets: Tensor,
    /// Class ids per level, indexed by [`Level::index`].
    classes: [Vec<usize>; 3],
}

impl Trainer {
    pub fn new<A: SampleAccess + ?Sized>(config: TrainConfig, access: &A) -> Result<Self> {
        let thresholds = config.validate()?;
        let data = TrainingData::prepare(access, config.holdout)?;
        let dims = access.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = MkfnetModel::init(config.model_config(dims.visual, dims.semantic, data.labels.len()), &mut rng);
        let optim = Optimizers::new(config.learning_rate);
        Ok(Self {
            config,
            model,
            pools: Pools::default(),
            report: TrainReport::default(),
            thresholds,
            optim,
            rng,
            completed: 0,
            data,
        })
    }

    pub fn completed_loops(&self) -> usize {
        self.completed
    }

    /// Adam step counts: discriminator, each generator, fusion.
    pub fn optimizer_steps(&self) -> (u64, [u64; 3], u64) {
        let g = &self.optim.generators;
        (self.optim.discriminator.step, [g[0].step, g[1].step, g[2].step], self.optim.fusion.step)
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    pub fn is_finished(&self) -> bool {
        self.completed >= self.config.steps
    }

    /// Runs loops until `steps` are completed.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    /// Runs at most `n` more loops.
    pub fn run_for(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            if self.is_finished() {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (MkfnetModel, Pools, TrainReport) {
        (self.model, self.pools, self.report)
    }

    /// One outer loop.
    pub fn step(&mut self) -> Result<&TrainRecord> {
        let outer = self.completed + 1;
        let start = Instant::now();
        if self.data.is_empty() {
            return Err(TrainError::Config("no training samples".into()));
        }
        let tag = |e: TrainError, what: &'static str| match e {
            TrainError::Tensor(TensorError::NonFinite { .. }) => TrainError::NonFinite { what, outer_loop: outer },
            other => other,
        };
        if outer > self.config.n_nfg {
            generation_round(
                &self.model,
                &self.data.parents,
                &self.data.centers,
                self.thresholds,
                self.config.offspring_budget,
                &mut self.pools,
                &mut self.rng,
            )
            .map_err(|e| tag(e.into(), "offspring stability"))?;
        }
        let (disc_before, gen_before) = (self.optim.discriminator.step, self.optim.generators[0].step);
        let mut l_d = 0.0;
        for _ in 0..CRITIC_STEPS {
            l_d += self.critic_step().map_err(|e| tag(e, "critic loss"))?;
        }
        let record = self.generator_step(outer, l_d / CRITIC_STEPS as f64).map_err(|e| tag(e, "generator loss"))?;
        let record = TrainRecord {
            seconds: start.elapsed().as_secs_f64(),
            disc_updates: (self.optim.discriminator.step - disc_before) as usize,
            gen_updates: (self.optim.generators[0].step - gen_before) as usize,
            ..record
        };
        self.report.records.push(record);
        self.completed = outer;
        Ok(self.report.records.last().expect("just pushed"))
    }

    fn sample_batch(&mut self) -> Result<Batch> {
        let n = self.data.len();
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.random_range(0..n)).collect();
        let species = self.data.datasets.get(Level::Species);
        let semantics =
            Tensor::from_rows(&idx.iter().map(|&i| species.entries[i].semantic.as_slice()).collect::<Vec<_>>())?;
        let real = Tensor::from_rows(&idx.iter().map(|&i| species.entries[i].visual.as_slice()).collect::<Vec<_>>())?;
        let heads: Vec<usize> = idx.iter().map(|&i| self.data.heads[i]).collect();
        let targets = one_hot(&heads, self.data.labels.len())?;
        let classes =
            Level::ALL.map(|l| idx.iter().map(|&i| self.data.datasets.get(l).entries[i].class_id).collect::<Vec<_>>());
        Ok(Batch { semantics, real, targets, classes })
    }

    fn critic_step(&mut self) -> Result<f64> {
        let batch = self.sample_batch()?;
        self.model.zero_grad();
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, Trainable { discriminator: true, ..Default::default() })?;
        let xs = self.model.forward_levels(&mut g, &bound, &batch.semantics, &mut self.rng)?;
        let fake = self.model.fuse_on(&mut g, &bound, xs)?;
        let real = g.constant(&batch.real)?;
        let loss = loss_discriminator(&mut g, &bound.discriminator, real, fake, &batch.targets)?;
        g.backward(loss.total)?;
        self.model.discriminator.absorb_grads(&g, &bound.discriminator)?;
        self.optim.discriminator.step(&mut self.model.discriminator.params_mut())?;
        clip_weights(self.model.discriminator.critic_params_mut(), self.config.clip);
        Ok(g.value(loss.total).item()?)
    }

    fn generator_step(&mut self, outer: usize, l_d: f64) -> Result<TrainRecord> {
        let batch = self.sample_batch()?;
        self.model.zero_grad();
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, Trainable { generators: true, fusion: true, discriminator: false })?;
        let xs = self.model.forward_levels(&mut g, &bound, &batch.semantics, &mut self.rng)?;
        let mut level_losses = [0.0; 3];
        let mut total = None;
        for level in Level::ALL {
            let k = level.index();
            let centers = center_rows(&self.data.centers[k], &batch.classes[k])?;
            let lg = loss_generator(&mut g, &bound.discriminator, xs[k], &batch.targets, &centers)?;
            level_losses[k] = g.value(lg.total).item()?;
            total = Some(match total {
                None => lg.total,
                Some(t) => g.add(t, lg.total)?,
            });
        }
        let detached = [g.detach(xs[0])?, g.detach(xs[1])?, g.detach(xs[2])?];
        let fused = self.model.fuse_on(&mut g, &bound, detached)?;
        let er = loss_er(
            &mut g,
            &self.model,
            &bound,
            &self.pools,
            &self.data.labels,
            self.config.batch_size,
            &mut self.rng,
        )?;
        let nr = loss_nr(
            &mut g,
            &self.model,
            &bound,
            &self.pools,
            self.config.lambda,
            self.config.batch_size,
            &mut self.rng,
        )?;
        let l_er = er.map(|v| g.value(v).data()[0]).unwrap_or(0.0);
        let l_nr = nr.map(|v| g.value(v).data()[0]).unwrap_or(0.0);
        let fm = loss_fusion(&mut g, &bound.discriminator, fused, &batch.targets, er, nr)?;
        let l_fm = g.value(fm).item()?;
        let total = g.add(total.expect("three levels"), fm)?;
        g.backward(total)?;
        for (gen, bg) in self.model.generators.iter_mut().zip(&bound.generators) {
            gen.absorb_grads(&g, bg)?;
        }
        self.model.fusion.absorb_grads(&g, &bound.fusion)?;
        for (k, gen) in self.model.generators.iter_mut().enumerate() {
            self.optim.generators[k].step(&mut gen.params_mut())?;
        }
        if self.model.config.fusion == FusionMode::Adaptive {
            self.optim.fusion.step(&mut self.model.fusion.params_mut())?;
        }
        self.model.zero_grad();
        Ok(TrainRecord {
            outer_loop: outer,
            l_d,
            l_g_species: level_losses[Level::Species.index()],
            l_g_genus: level_losses[Level::Genus.index()],
            l_g_family: level_losses[Level::Family.index()],
            l_fm,
            l_er,
            l_nr,
            enhanced_size: self.pools.enhanced.len(),
            novel_size: self.pools.novel.len(),
            seconds: 0.0,
            disc_updates: 0,
            gen_updates: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model, &self.pools, &self.config);
        ckpt.training = Some(TrainingState {
            completed_loops: self.completed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            optimizers: serde_json::to_value(&self.optim).expect("optimizer state serializes"),
            report: self.report.clone(),
        });
        ckpt
    }

    /// Rebuilds a trainer from a checkpoint that carries training state.
    pub fn resume<A: SampleAccess + ?Sized>(ckpt: &Checkpoint, access: &A) -> Result<Self> {
        let state =
            ckpt.training.as_ref().ok_or_else(|| TrainError::Checkpoint("checkpoint has no training state".into()))?;
        let mut trainer = Trainer::new(ckpt.config.clone(), access)?;
        let (model, pools) = ckpt.restore()?;
        if model.config != trainer.model.config {
            return Err(TrainError::Checkpoint("model shape does not match the dataset".into()));
        }
        trainer.model = model;
        trainer.pools = pools;
        trainer.optim = serde_json::from_value(state.optimizers.clone())
            .map_err(|e| TrainError::Checkpoint(format!("optimizer state: {e}")))?;
        let pos: u128 = state
            .rng_word_pos
            .parse()
            .map_err(|_| TrainError::Checkpoint(format!("bad rng position {:?}", state.rng_word_pos)))?;
        trainer.rng.set_word_pos(pos);
        trainer.completed = state.completed_loops;
        trainer.report = state.report.clone();
        Ok(trainer)
    }
}

/// Trains from scratch for `config.steps` loops.
pub fn train<A: SampleAccess + ?Sized>(config: TrainConfig, access: &A) -> Result<(MkfnetModel, Pools, TrainReport)> {
    let mut t = Trainer::new(config, access)?;
    t.run()?;
    Ok(t.into_parts())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub completed_loops: usize,
    /// ChaCha word position of the training stream, as a decimal string.
    pub rng_word_pos: String,
    pub optimizers: serde_json::Value,
    pub report: TrainReport,
}

/// On-disk model, pools and configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub params: BTreeMap<String, ParamEntry>,
    /// `enhanced/<level>/<class>` → `[n, T]`, `novel/<index>` → `[1, T]`.
    pub pools: BTreeMap<String, ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn from_model(model: &MkfnetModel, pools: &Pools, config: &TrainConfig) -> Self {
        let params = model
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, ParamEntry { shape: t.shape().to_vec(), values: t.data().to_vec() }))
            .collect();
        let mut pool_map = BTreeMap::new();
        let mut grouped: BTreeMap<(Level, usize), Vec<f64>> = BTreeMap::new();
        let mut counts: BTreeMap<(Level, usize), usize> = BTreeMap::new();
        for (l, c, t) in pools.enhanced.iter() {
            grouped.entry((l, c)).or_default().extend_from_slice(t);
            *counts.entry((l, c)).or_default() += 1;
        }
        for ((l, c), values) in grouped {
            let n = counts[&(l, c)];
            let width = values.len() / n;
            pool_map.insert(format!("enhanced/{}/{}", l.name(), c), ParamEntry { shape: vec![n, width], values });
        }
        for (i, t) in pools.novel.entries.iter().enumerate() {
            pool_map.insert(format!("novel/{i}"), ParamEntry { shape: vec![1, t.len()], values: t.clone() });
        }
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed: config.seed,
            config: config.clone(),
            model_config: model.config.clone(),
            params,
            pools: pool_map,
            training: None,
        }
    }

    /// Rebuilds the model and pools.
    pub fn restore(&self) -> Result<(MkfnetModel, Pools)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = MkfnetModel::init(self.model_config.clone(), &mut rng);
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(model.params_mut()) {
            let entry =
                self.params.get(name).ok_or_else(|| TrainError::Checkpoint(format!("missing parameter {name}")))?;
            if entry.shape != p.shape() || entry.values.len() != p.len() {
                return Err(TrainError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    entry.shape,
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(&entry.values);
        }
        let mut pools = Pools::default();
        let mut novel: Vec<(usize, Vec<f64>)> = Vec::new();
        for (key, entry) in &self.pools {
            let parts: Vec<&str> = key.split('/').collect();
            let bad = || TrainError::Checkpoint(format!("bad pool key {key}"));
            match parts.as_slice() {
                ["enhanced", level, class] => {
                    let level = Level::parse(level).ok_or_else(bad)?;
                    let class: usize = class.parse().map_err(|_| bad())?;
                    let width = *entry.shape.get(1).ok_or_else(bad)?;
                    if width == 0 || entry.values.len() != entry.shape[0] * width {
                        return Err(bad());
                    }
                    for row in entry.values.chunks(width) {
                        pools.enhanced.push(level, class, row.to_vec());
                    }
                }
                ["novel", idx] => novel.push((idx.parse().map_err(|_| bad())?, entry.values.clone())),
                _ => return Err(bad()),
            }
        }
        novel.sort_by_key(|(i, _)| *i);
        pools.novel.entries = novel.into_iter().map(|(_, v)| v).collect();
        Ok((model, pools))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| {
            TrainError::Checkpoint(format!("parse error at line {}, column {}: {e}", e.line(), e.column()))
        })?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if let Some(v) = version {
            if v != CHECKPOINT_VERSION as u64 {
                return Err(TrainError::Version { found: v as u32, expected: CHECKPOINT_VERSION });
            }
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| TrainError::Checkpoint(format!("invalid checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Checkpoint(format!("unknown format {:?}", ckpt.format)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
