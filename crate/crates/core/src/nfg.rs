//! New-feature generation: genetic offspring of class semantics.
//!
//! Parents are drawn from one class at one knowledge level. Mutation scales
//! (or, for zero entries, shifts) a random subset of positions; crossover
//! copies a random subset from the second parent. Offspring are pushed
//! through the fused generator and compared with the class's visual center:
//! stable ones join the enhanced pool of that class, divergent ones the
//! unlabeled novel pool.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::data::{KnowledgeDatasets, LabelSpace, Level, VisualCenters};
use crate::error::NfgError;
use crate::model::{adversarial_classification, BoundModel, MkfnetModel};
use crate::tensor::{cosine, Graph, Tensor, Var};

type Result<T> = std::result::Result<T, NfgError>;

/// Coefficients and positions for one mutation/crossover pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneticDraw {
    pub r1: f64,
    pub r2: f64,
    /// `⌊d·r1⌋` distinct positions to mutate.
    pub loc1: Vec<usize>,
    /// `⌊d·r2⌋` distinct positions to take from the second parent.
    pub loc2: Vec<usize>,
}

impl GeneticDraw {
    pub fn sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let r1: f64 = rng.random();
        let r2: f64 = rng.random();
        let n1 = ((dim as f64 * r1).floor() as usize).min(dim);
        let n2 = ((dim as f64 * r2).floor() as usize).min(dim);
        let loc1 = index::sample(rng, dim, n1).into_vec();
        let loc2 = index::sample(rng, dim, n2).into_vec();
        Self { r1, r2, loc1, loc2 }
    }
}

/// Mutates `parent` at `draw.loc1`, drawing a fresh `r ~ U(0,1)` per position:
/// non-zero entries are multiplied by `r`, zero entries get `r` added.
pub fn mutate_with<R: Rng + ?Sized>(parent: &[f64], draw: &GeneticDraw, rng: &mut R) -> Vec<f64> {
    let mut out = parent.to_vec();
    for &p in &draw.loc1 {
        let r: f64 = rng.random();
        if out[p] != 0.0 {
            out[p] *= r;
        } else {
            out[p] += r;
        }
    }
    out
}

/// Copy of `a` with positions `draw.loc2` taken from `b`.
pub fn crossover_with(a: &[f64], b: &[f64], draw: &GeneticDraw) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(NfgError::Dim(a.len(), b.len()));
    }
    let mut out = a.to_vec();
    for &p in &draw.loc2 {
        out[p] = b[p];
    }
    Ok(out)
}

pub fn mutate<R: Rng + ?Sized>(parent: &[f64], rng: &mut R) -> Vec<f64> {
    let draw = GeneticDraw::sample(parent.len(), rng);
    mutate_with(parent, &draw, rng)
}

pub fn crossover<R: Rng + ?Sized>(a: &[f64], b: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(NfgError::Dim(a.len(), b.len()));
    }
    let draw = GeneticDraw::sample(a.len(), rng);
    crossover_with(a, b, &draw)
}

/// One draw, two children: `(mutated a, a crossed with b)`.
pub fn offspring<R: Rng + ?Sized>(a: &[f64], b: &[f64], rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(NfgError::Dim(a.len(), b.len()));
    }
    let draw = GeneticDraw::sample(a.len(), rng);
    let v_mut = mutate_with(a, &draw, rng);
    let v_cross = crossover_with(a, b, &draw)?;
    Ok((v_mut, v_cross))
}

/// Offspring judged stable, grouped by the parents' `(level, class)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnhancedPool {
    entries: BTreeMap<(Level, usize), Vec<Vec<f64>>>,
}

impl EnhancedPool {
    pub fn push(&mut self, level: Level, class: usize, t: Vec<f64>) {
        self.entries.entry((level, class)).or_default().push(t);
    }

    pub fn get(&self, level: Level, class: usize) -> &[Vec<f64>] {
        self.entries.get(&(level, class)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries in key order, flattened.
    pub fn iter(&self) -> impl Iterator<Item = (Level, usize, &[f64])> {
        self.entries.iter().flat_map(|(&(l, c), v)| v.iter().map(move |t| (l, c, t.as_slice())))
    }
}

/// Unlabeled offspring that drifted away from their parents' class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NovelPool {
    pub entries: Vec<Vec<f64>>,
}

impl NovelPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pools {
    pub enhanced: EnhancedPool,
    pub novel: NovelPool,
}

/// Stability thresholds; construction enforces `kappa1 > kappa2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    kappa1: f64,
    kappa2: f64,
}

impl Thresholds {
    pub const DEFAULT: Thresholds = Thresholds { kappa1: 0.8, kappa2: 0.2 };

    pub fn new(kappa1: f64, kappa2: f64) -> Result<Self> {
        if kappa1 <= kappa2 || !kappa1.is_finite() || !kappa2.is_finite() {
            return Err(NfgError::Thresholds { kappa1, kappa2 });
        }
        Ok(Self { kappa1, kappa2 })
    }

    pub fn kappa1(&self) -> f64 {
        self.kappa1
    }

    pub fn kappa2(&self) -> f64 {
        self.kappa2
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Enhanced,
    Novel,
    Discarded,
}

pub fn classify_stability(d: f64, th: Thresholds) -> Selection {
    if d > th.kappa1 {
        Selection::Enhanced
    } else if d < th.kappa2 {
        Selection::Novel
    } else {
        Selection::Discarded
    }
}

/// Files `t` into the pool its stability `d` selects.
pub fn select(t: Vec<f64>, d: f64, th: Thresholds, pools: &mut Pools, level: Level, class: usize) -> Selection {
    let s = classify_stability(d, th);
    match s {
        Selection::Enhanced => pools.enhanced.push(level, class, t),
        Selection::Novel => pools.novel.entries.push(t),
        Selection::Discarded => {}
    }
    s
}

/// Distinct species semantics of every class at every level.
#[derive(Clone, Debug, PartialEq)]
pub struct ParentSource {
    classes: [BTreeMap<usize, Vec<Vec<f64>>>; 3],
}

impl ParentSource {
    pub fn from_datasets(ds: &KnowledgeDatasets) -> Self {
        let mut classes: [BTreeMap<usize, Vec<Vec<f64>>>; 3] = Default::default();
        for level in Level::ALL {
            let d = ds.get(level);
            let mut seen_species: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
            for e in &d.entries {
                seen_species.entry(e.class_id).or_default().entry(e.species_id).or_insert_with(|| e.semantic.clone());
            }
            classes[level.index()] = seen_species.into_iter().map(|(c, m)| (c, m.into_values().collect())).collect();
        }
        Self { classes }
    }

    pub fn semantics(&self, level: Level, class: usize) -> &[Vec<f64>] {
        self.classes[level.index()].get(&class).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parents {
    pub level: Level,
    pub class: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Uniform level, uniform class at that level, then two parents from the
/// class's semantics plus its enhanced entries (with replacement only when a
/// single candidate exists).
pub fn sample_parents<R: Rng + ?Sized>(source: &ParentSource, pools: &Pools, rng: &mut R) -> Result<Parents> {
    let levels: Vec<Level> = Level::ALL.into_iter().filter(|l| !source.classes[l.index()].is_empty()).collect();
    if levels.is_empty() {
        return Err(NfgError::EmptyDataset);
    }
    let level = levels[rng.random_range(0..levels.len())];
    let classes: Vec<usize> = source.classes[level.index()].keys().copied().collect();
    let class = classes[rng.random_range(0..classes.len())];
    let base = source.semantics(level, class);
    let extra = pools.enhanced.get(level, class);
    let n = base.len() + extra.len();
    let pick = |i: usize| if i < base.len() { base[i].clone() } else { extra[i - base.len()].clone() };
    let (ia, ib) = if n == 1 {
        (0, 0)
    } else {
        let idx = index::sample(rng, n, 2);
        (idx.index(0), idx.index(1))
    };
    Ok(Parents { level, class, a: pick(ia), b: pick(ib) })
}

/// Cosine between the fused generation for `t` and `center`.
pub fn stability<R: Rng + ?Sized>(model: &MkfnetModel, t: &[f64], center: &[f64], rng: &mut R) -> Result<f64> {
    let x = model.synthesize(&Tensor::from_rows(&[t])?, rng)?;
    cosine(x.data(), center).ok_or(crate::error::TensorError::ZeroNorm { op: "stability" }.into())
}

/// Outcome counts of one generation round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RoundStats {
    pub enhanced: usize,
    pub novel: usize,
    pub discarded: usize,
}

/// Generates `budget` offspring (half mutations, half crossovers, paired
/// from shared draws), scores them against their class centers and files
/// them into `pools`.
pub fn generation_round<R: Rng + ?Sized>(
    model: &MkfnetModel,
    source: &ParentSource,
    centers: &[VisualCenters; 3],
    th: Thresholds,
    budget: usize,
    pools: &mut Pools,
    rng: &mut R,
) -> Result<RoundStats> {
    let mut children: Vec<(Level, usize, Vec<f64>)> = Vec::with_capacity(budget);
    while children.len() < budget {
        let p = sample_parents(source, pools, rng)?;
        let (v_mut, v_cross) = offspring(&p.a, &p.b, rng)?;
        children.push((p.level, p.class, v_mut));
        if children.len() < budget {
            children.push((p.level, p.class, v_cross));
        }
    }
    let mut stats = RoundStats::default();
    if children.is_empty() {
        return Ok(stats);
    }
    let rows: Vec<&[f64]> = children.iter().map(|(_, _, t)| t.as_slice()).collect();
    let x = model.synthesize(&Tensor::from_rows(&rows)?, rng)?;
    for (i, (level, class, t)) in children.into_iter().enumerate() {
        let center = centers[level.index()]
            .get(class)
            .ok_or(crate::error::ModelError::MissingCenter { level: level.name(), class })?;
        let d = cosine(x.row(i), center).ok_or(crate::error::TensorError::ZeroNorm { op: "stability" })?;
        match select(t, d, th, pools, level, class) {
            Selection::Enhanced => stats.enhanced += 1,
            Selection::Novel => stats.novel += 1,
            Selection::Discarded => stats.discarded += 1,
        }
    }
    Ok(stats)
}

/// Fused features for `t`, with the generators cut off the tape so only the
/// fusion module (and anything downstream) receives gradients.
pub fn fused_from_frozen_generators<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &MkfnetModel,
    bound: &BoundModel,
    t: &Tensor,
    rng: &mut R,
) -> Result<Var> {
    let xs = model.forward_levels(g, bound, t, rng)?;
    let xs = [g.detach(xs[0])?, g.detach(xs[1])?, g.detach(xs[2])?];
    Ok(model.fuse_on(g, bound, xs)?)
}

/// Enhanced regularizer: adversarial + classification on a minibatch of
/// enhanced semantics, labeled with their class's seen species.
///
/// Returns `None` for an empty pool.
pub fn loss_er<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &MkfnetModel,
    bound: &BoundModel,
    pools: &Pools,
    labels: &LabelSpace,
    batch: usize,
    rng: &mut R,
) -> Result<Option<Var>> {
    let all: Vec<(Level, usize, &[f64])> = pools.enhanced.iter().collect();
    if all.is_empty() {
        return Ok(None);
    }
    let picked = index::sample(rng, all.len(), batch.min(all.len())).into_vec();
    let mut rows = Vec::with_capacity(picked.len());
    let mut targets = Vec::with_capacity(picked.len());
    for i in picked {
        let (level, class, t) = all[i];
        rows.push(t);
        targets.push(
            labels
                .soft_target(level, class)
                .ok_or(crate::error::ModelError::MissingCenter { level: level.name(), class })?,
        );
    }
    let t = Tensor::from_rows(&rows)?;
    let y = Tensor::from_rows(&targets)?;
    let fused = fused_from_frozen_generators(g, model, bound, &t, rng)?;
    let (adv, cls) = adversarial_classification(g, &bound.discriminator, fused, &y)?;
    Ok(Some(g.add(adv, cls)?))
}

/// Novel regularizer: `+mean realness + λ·mean ‖softmax(logits) − uniform‖²`.
///
/// Returns `None` for an empty pool.
pub fn loss_nr<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &MkfnetModel,
    bound: &BoundModel,
    pools: &Pools,
    lambda: f64,
    batch: usize,
    rng: &mut R,
) -> Result<Option<Var>> {
    if pools.novel.is_empty() {
        return Ok(None);
    }
    let picked = index::sample(rng, pools.novel.len(), batch.min(pools.novel.len())).into_vec();
    let rows: Vec<&[f64]> = picked.iter().map(|&i| pools.novel.entries[i].as_slice()).collect();
    let t = Tensor::from_rows(&rows)?;
    let fused = fused_from_frozen_generators(g, model, bound, &t, rng)?;
    Ok(Some(novel_terms(g, &bound.discriminator, fused, lambda)?))
}

/// The two novel-regularizer terms on an already generated batch.
pub fn novel_terms(
    g: &mut Graph,
    disc: &crate::model::BoundDiscriminator,
    x: Var,
    lambda: f64,
) -> std::result::Result<Var, crate::error::TensorError> {
    let (realness, logits) = disc.forward(g, x)?;
    let adv = g.mean(realness)?;
    let p = g.softmax_rows(logits)?;
    let (n, k) = (g.value(p).rows(), g.value(p).cols());
    let uniform = g.constant(&Tensor::new(vec![n, k], vec![1.0 / k as f64; n * k])?)?;
    let dist = g.l2_sq_dist(p, uniform)?;
    let dist = g.mean(dist)?;
    let dist = g.scalar_mul(dist, lambda)?;
    g.add(adv, dist)
}

/// The uniform class target of the novel regularizer.
pub fn uniform_target(classes: usize) -> Vec<f64> {
    vec![1.0 / classes as f64; classes]
}
