//! Family > Genus > Species datasets.
//!
//! A [`DatasetBundle`] holds per-class semantics and per-sample visual
//! features. Training code never touches the bundle directly; it reads through
//! [`SampleAccess`] so that an auditing wrapper can observe every visual read.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Family,
    Genus,
    Species,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Family, Level::Genus, Level::Species];

    pub fn name(self) -> &'static str {
        match self {
            Level::Family => "family",
            Level::Genus => "genus",
            Level::Species => "species",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Level> {
        Level::ALL.into_iter().find(|l| l.name() == s)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub visual: usize,
    pub semantic: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub species_id: usize,
    pub genus_id: usize,
    pub family_id: usize,
    pub name: String,
    pub semantic: Vec<f64>,
}

impl ClassRecord {
    pub fn class_at(&self, level: Level) -> usize {
        match level {
            Level::Family => self.family_id,
            Level::Genus => self.genus_id,
            Level::Species => self.species_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub species_id: usize,
    pub visual: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

/// Classes, samples and the seen/unseen split, as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub dims: Dims,
    pub classes: Vec<ClassRecord>,
    pub samples: Vec<Sample>,
    pub splits: Splits,
}

/// Read access to a bundle, as seen by training and evaluation code.
///
/// Sample ids are positions in the bundle's sample list.
pub trait SampleAccess {
    fn dims(&self) -> Dims;
    fn classes(&self) -> &[ClassRecord];
    fn seen_species(&self) -> &[usize];
    fn unseen_species(&self) -> &[usize];
    fn sample_count(&self) -> usize;
    /// Label of a sample. Labels are metadata and are not audited.
    fn sample_species(&self, id: usize) -> usize;
    fn visual(&self, id: usize) -> &[f64];

    fn class(&self, species_id: usize) -> Option<&ClassRecord> {
        self.classes().iter().find(|c| c.species_id == species_id)
    }

    /// Ids of all samples whose species is in the seen split.
    fn seen_sample_ids(&self) -> Vec<usize> {
        let seen: BTreeSet<usize> = self.seen_species().iter().copied().collect();
        (0..self.sample_count()).filter(|&i| seen.contains(&self.sample_species(i))).collect()
    }

    fn unseen_sample_ids(&self) -> Vec<usize> {
        let unseen: BTreeSet<usize> = self.unseen_species().iter().copied().collect();
        (0..self.sample_count()).filter(|&i| unseen.contains(&self.sample_species(i))).collect()
    }
}

impl SampleAccess for DatasetBundle {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    fn seen_species(&self) -> &[usize] {
        &self.splits.seen
    }

    fn unseen_species(&self) -> &[usize] {
        &self.splits.unseen
    }

    fn sample_count(&self) -> usize {
        self.samples.len()
    }

    fn sample_species(&self, id: usize) -> usize {
        self.samples[id].species_id
    }

    fn visual(&self, id: usize) -> &[f64] {
        &self.samples[id].visual
    }
}

impl DatasetBundle {
    pub fn empty(dims: Dims) -> Self {
        Self { dims, classes: Vec::new(), samples: Vec::new(), splits: Splits::default() }
    }

    /// Checks the structural invariants a loaded or generated bundle must satisfy.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut species = BTreeSet::new();
        let mut genus_family = BTreeMap::new();
        for c in &self.classes {
            if !species.insert(c.species_id) {
                return Err(DataError::Invalid(format!("duplicate species id {}", c.species_id)));
            }
            if c.semantic.len() != self.dims.semantic {
                return Err(DataError::Invalid(format!(
                    "class {} semantic has {} entries, expected {}",
                    c.species_id,
                    c.semantic.len(),
                    self.dims.semantic
                )));
            }
            if c.semantic.iter().any(|x| !x.is_finite()) {
                return Err(DataError::Invalid(format!("class {} semantic is not finite", c.species_id)));
            }
            if let Some(prev) = genus_family.insert(c.genus_id, c.family_id) {
                if prev != c.family_id {
                    return Err(DataError::Invalid(format!(
                        "genus {} maps to families {} and {}",
                        c.genus_id, prev, c.family_id
                    )));
                }
            }
        }
        let seen: BTreeSet<usize> = self.splits.seen.iter().copied().collect();
        let unseen: BTreeSet<usize> = self.splits.unseen.iter().copied().collect();
        if let Some(id) = seen.intersection(&unseen).next() {
            return Err(DataError::Invalid(format!("species {id} is both seen and unseen")));
        }
        for id in seen.iter().chain(&unseen) {
            if !species.contains(id) {
                return Err(DataError::UnknownSpecies(*id));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            if !species.contains(&s.species_id) {
                return Err(DataError::UnknownSpecies(s.species_id));
            }
            if !seen.contains(&s.species_id) && !unseen.contains(&s.species_id) {
                return Err(DataError::Invalid(format!("sample {i} (species {}) is in neither split", s.species_id)));
            }
            if s.visual.len() != self.dims.visual {
                return Err(DataError::Invalid(format!(
                    "sample {i} visual has {} entries, expected {}",
                    s.visual.len(),
                    self.dims.visual
                )));
            }
            if s.visual.iter().any(|x| !x.is_finite()) {
                return Err(DataError::Invalid(format!("sample {i} visual is not finite")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let bundle: DatasetBundle = serde_json::from_str(text).map_err(json_error)?;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn json_error(e: serde_json::Error) -> DataError {
    let msg = e.to_string();
    if let Some(rest) = msg.strip_prefix("missing field `") {
        if let Some(end) = rest.find('`') {
            return DataError::MissingField(rest[..end].to_string());
        }
    }
    DataError::Parse { line: e.line(), column: e.column(), message: msg }
}

/// species → genus → family maps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeHierarchy {
    genus_of: BTreeMap<usize, usize>,
    family_of: BTreeMap<usize, usize>,
}

impl KnowledgeHierarchy {
    pub fn from_classes(classes: &[ClassRecord]) -> Self {
        let mut h = Self::default();
        for c in classes {
            h.genus_of.insert(c.species_id, c.genus_id);
            h.family_of.insert(c.species_id, c.family_id);
        }
        h
    }

    /// The class a species belongs to at `level`.
    pub fn class_of(&self, level: Level, species: usize) -> Option<usize> {
        match level {
            Level::Species => self.genus_of.contains_key(&species).then_some(species),
            Level::Genus => self.genus_of.get(&species).copied(),
            Level::Family => self.family_of.get(&species).copied(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeEntry {
    pub sample_id: usize,
    pub species_id: usize,
    pub class_id: usize,
    pub visual: Vec<f64>,
    pub semantic: Vec<f64>,
}

/// One knowledge level: every training sample relabeled to its class at that level.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeDataset {
    pub level: Level,
    pub entries: Vec<KnowledgeEntry>,
    /// Sorted class ids at this level covered by the contributing species.
    pub class_ids: Vec<usize>,
    /// Seen species that fall under each class, sorted.
    pub members: BTreeMap<usize, Vec<usize>>,
}

impl KnowledgeDataset {
    pub fn class_count(&self) -> usize {
        self.class_ids.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The three relabeled views of one sample list, indexed by [`Level::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeDatasets {
    pub levels: [KnowledgeDataset; 3],
}

impl KnowledgeDatasets {
    pub fn get(&self, level: Level) -> &KnowledgeDataset {
        &self.levels[level.index()]
    }
}

/// Derives the three knowledge datasets over all seen samples.
pub fn derive_knowledge_datasets<A: SampleAccess + ?Sized>(access: &A) -> Result<KnowledgeDatasets, DataError> {
    let ids = access.seen_sample_ids();
    derive_knowledge_datasets_for(access, access.seen_species(), &ids)
}

/// Derives the knowledge datasets over `sample_ids`, with classes spanned by `species`.
///
/// Entries keep the species semantic at every level; only the class id changes.
pub fn derive_knowledge_datasets_for<A: SampleAccess + ?Sized>(
    access: &A,
    species: &[usize],
    sample_ids: &[usize],
) -> Result<KnowledgeDatasets, DataError> {
    let hierarchy = KnowledgeHierarchy::from_classes(access.classes());
    let semantics: BTreeMap<usize, &[f64]> =
        access.classes().iter().map(|c| (c.species_id, c.semantic.as_slice())).collect();
    let build = |level: Level| -> Result<KnowledgeDataset, DataError> {
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &s in species {
            let c = hierarchy.class_of(level, s).ok_or(DataError::MissingHierarchy(s))?;
            members.entry(c).or_default().push(s);
        }
        members.values_mut().for_each(|v| {
            v.sort_unstable();
            v.dedup()
        });
        let mut entries = Vec::with_capacity(sample_ids.len());
        for &id in sample_ids {
            let s = access.sample_species(id);
            let class_id = hierarchy.class_of(level, s).ok_or(DataError::MissingHierarchy(s))?;
            let semantic = semantics.get(&s).ok_or(DataError::UnknownSpecies(s))?.to_vec();
            entries.push(KnowledgeEntry {
                sample_id: id,
                species_id: s,
                class_id,
                visual: access.visual(id).to_vec(),
                semantic,
            });
        }
        let class_ids = members.keys().copied().collect();
        Ok(KnowledgeDataset { level, entries, class_ids, members })
    };
    Ok(KnowledgeDatasets { levels: [build(Level::Family)?, build(Level::Genus)?, build(Level::Species)?] })
}

/// Maps seen species to class-head indices and level classes to their member heads.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSpace {
    species: Vec<usize>,
    members: [BTreeMap<usize, Vec<usize>>; 3],
}

impl LabelSpace {
    /// `seen` gives the class-head order; hierarchy lookups come from `classes`.
    pub fn new(seen: &[usize], classes: &[ClassRecord]) -> Result<Self, DataError> {
        let hierarchy = KnowledgeHierarchy::from_classes(classes);
        let mut members: [BTreeMap<usize, Vec<usize>>; 3] = Default::default();
        for (head, &s) in seen.iter().enumerate() {
            for level in Level::ALL {
                let c = hierarchy.class_of(level, s).ok_or(DataError::MissingHierarchy(s))?;
                members[level.index()].entry(c).or_default().push(head);
            }
        }
        Ok(Self { species: seen.to_vec(), members })
    }

    pub fn len(&self) -> usize {
        self.species.len()
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    pub fn species(&self) -> &[usize] {
        &self.species
    }

    pub fn head_index(&self, species: usize) -> Option<usize> {
        self.species.iter().position(|&s| s == species)
    }

    /// Uniform distribution over the seen species under `class` at `level`.
    pub fn soft_target(&self, level: Level, class: usize) -> Option<Vec<f64>> {
        let heads = self.members[level.index()].get(&class)?;
        let mut y = vec![0.0; self.species.len()];
        for &h in heads {
            y[h] = 1.0 / heads.len() as f64;
        }
        Some(y)
    }
}

/// Mean visual vector per class at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualCenters {
    pub level: Level,
    pub centers: BTreeMap<usize, Vec<f64>>,
}

impl VisualCenters {
    pub fn get(&self, class_id: usize) -> Option<&[f64]> {
        self.centers.get(&class_id).map(Vec::as_slice)
    }
}

pub fn compute_visual_centers(ds: &KnowledgeDataset) -> Result<VisualCenters, DataError> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for e in &ds.entries {
        let (sum, n) = sums.entry(e.class_id).or_insert_with(|| (vec![0.0; e.visual.len()], 0));
        for (s, x) in sum.iter_mut().zip(&e.visual) {
            *s += x;
        }
        *n += 1;
    }
    let mut centers = BTreeMap::new();
    for &c in &ds.class_ids {
        let (sum, n) = sums.remove(&c).ok_or(DataError::EmptyClass(c))?;
        centers.insert(c, sum.into_iter().map(|s| s / n as f64).collect());
    }
    // entries whose class is outside `class_ids` still get a center
    for (c, (sum, n)) in sums {
        centers.insert(c, sum.into_iter().map(|s| s / n as f64).collect());
    }
    Ok(VisualCenters { level: ds.level, centers })
}

/// Splits seen samples into training and held-out seen-test ids.
///
/// For every seen species the last `round(n * fraction)` samples (in bundle
/// order) are held out, keeping at least one training sample per species.
pub fn holdout_split<A: SampleAccess + ?Sized>(access: &A, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut per_species: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for id in access.seen_sample_ids() {
        per_species.entry(access.sample_species(id)).or_default().push(id);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ids in per_species.values() {
        let n = ids.len();
        let held = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
        train.extend_from_slice(&ids[..n - held]);
        test.extend_from_slice(&ids[n - held..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Parameters of the hierarchical Gaussian benchmark.
///
/// Each level draws a latent code of `latent_per_level` standard normals and
/// projects it into visual space through a fixed random matrix. A species mean
/// is the sum of its family, genus and species projections scaled by the
/// level sigmas; samples add isotropic noise. Semantics are a fixed random
/// linear map of the concatenated latent codes plus noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub families: usize,
    pub genera_per_family: usize,
    pub species_per_genus: usize,
    pub samples_per_species: usize,
    pub visual_dim: usize,
    pub semantic_dim: usize,
    pub latent_per_level: usize,
    pub sigma_family: f64,
    pub sigma_genus: f64,
    pub sigma_species: f64,
    pub sigma_noise: f64,
    pub semantic_noise: f64,
    pub unseen_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            families: 3,
            genera_per_family: 3,
            species_per_genus: 4,
            samples_per_species: 20,
            visual_dim: 32,
            semantic_dim: 16,
            latent_per_level: 4,
            sigma_family: 1.0,
            sigma_genus: 0.7,
            sigma_species: 0.5,
            sigma_noise: 0.4,
            semantic_noise: 0.05,
            unseen_fraction: 0.17,
        }
    }
}

impl SyntheticSpec {
    pub fn species_count(&self) -> usize {
        self.families * self.genera_per_family * self.species_per_genus
    }

    pub fn unseen_count(&self) -> usize {
        let n = self.species_count();
        ((n as f64 * self.unseen_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
    }

    fn validate(&self) -> Result<(), DataError> {
        let counts = [
            ("families", self.families),
            ("genera_per_family", self.genera_per_family),
            ("species_per_genus", self.species_per_genus),
            ("samples_per_species", self.samples_per_species),
            ("visual_dim", self.visual_dim),
            ("semantic_dim", self.semantic_dim),
            ("latent_per_level", self.latent_per_level),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(DataError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !(self.unseen_fraction > 0.0 && self.unseen_fraction < 1.0) {
            return Err(DataError::InvalidConfig(format!(
                "unseen fraction {} must lie in (0, 1)",
                self.unseen_fraction
            )));
        }
        if self.species_count() < 2 {
            return Err(DataError::InvalidConfig("need at least two species to split".into()));
        }
        let sigmas = [self.sigma_family, self.sigma_genus, self.sigma_species, self.sigma_noise, self.semantic_noise];
        if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(DataError::InvalidConfig("sigmas must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// `[rows × cols]` projection with N(0, 1/cols) entries, applied as `m · v`.
fn project(m: &[f64], v: &[f64], rows: usize) -> Vec<f64> {
    let cols = v.len();
    (0..rows).map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).fold(0.0, |s, (a, b)| s + a * b)).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<DatasetBundle, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, t, l) = (spec.visual_dim, spec.semantic_dim, spec.latent_per_level);
    let proj_scale = 1.0 / (l as f64).sqrt();
    let p_family = normal_vec(&mut rng, v * l, proj_scale);
    let p_genus = normal_vec(&mut rng, v * l, proj_scale);
    let p_species = normal_vec(&mut rng, v * l, proj_scale);
    let sem_map = normal_vec(&mut rng, t * 3 * l, 1.0 / ((3 * l) as f64).sqrt());

    let mut classes = Vec::with_capacity(spec.species_count());
    let mut means = Vec::with_capacity(spec.species_count());
    let mut genus_id = 0;
    let mut species_id = 0;
    for f in 0..spec.families {
        let uf = normal_vec(&mut rng, l, 1.0);
        let mf = project(&p_family, &uf, v);
        for g in 0..spec.genera_per_family {
            let ug = normal_vec(&mut rng, l, 1.0);
            let mg = project(&p_genus, &ug, v);
            for s in 0..spec.species_per_genus {
                let us = normal_vec(&mut rng, l, 1.0);
                let ms = project(&p_species, &us, v);
                let mean: Vec<f64> = (0..v)
                    .map(|j| spec.sigma_family * mf[j] + spec.sigma_genus * mg[j] + spec.sigma_species * ms[j])
                    .collect();
                let latent: Vec<f64> = uf.iter().chain(&ug).chain(&us).copied().collect();
                let noise = normal_vec(&mut rng, t, spec.semantic_noise);
                let semantic = project(&sem_map, &latent, t).iter().zip(noise).map(|(a, b)| a + b).collect();
                classes.push(ClassRecord {
                    species_id,
                    genus_id,
                    family_id: f,
                    name: format!("f{f}-g{g}-s{s}"),
                    semantic,
                });
                means.push(mean);
                species_id += 1;
            }
            genus_id += 1;
        }
    }

    let mut samples = Vec::with_capacity(classes.len() * spec.samples_per_species);
    for (c, mean) in classes.iter().zip(&means) {
        for _ in 0..spec.samples_per_species {
            let noise = normal_vec(&mut rng, v, spec.sigma_noise);
            samples.push(Sample {
                species_id: c.species_id,
                visual: mean.iter().zip(noise).map(|(m, n)| m + n).collect(),
            });
        }
    }

    let unseen = pick_unseen(&classes, spec.unseen_count(), &mut rng);
    let seen = classes.iter().map(|c| c.species_id).filter(|s| !unseen.contains(s)).collect();
    let bundle = DatasetBundle {
        dims: Dims { visual: v, semantic: t },
        classes,
        samples,
        splits: Splits { seen, unseen: unseen.into_iter().collect() },
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Uniformly shuffled species, skipping any whose genus would lose its last
/// seen member until no other candidates remain.
fn pick_unseen(classes: &[ClassRecord], count: usize, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    let mut order: Vec<&ClassRecord> = classes.iter().collect();
    order.shuffle(rng);
    let mut remaining: BTreeMap<usize, usize> = BTreeMap::new();
    for c in classes {
        *remaining.entry(c.genus_id).or_default() += 1;
    }
    let mut unseen = BTreeSet::new();
    for c in &order {
        if unseen.len() == count {
            break;
        }
        let left = remaining.get_mut(&c.genus_id).expect("genus counted");
        if *left > 1 {
            *left -= 1;
            unseen.insert(c.species_id);
        }
    }
    for c in &order {
        if unseen.len() == count {
            break;
        }
        unseen.insert(c.species_id);
    }
    unseen
}
