//! Test-time synthesis, ZSL/GZSL classification and retrieval.
//!
//! Prototypes are means of fused generations conditioned on class semantics.
//! Real samples are classified by cosine similarity to the prototypes. The
//! seen-unseen curve uses calibrated stacking: a constant `gamma` is
//! subtracted from every seen-class score before the argmax.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{holdout_split, SampleAccess};
use crate::error::EvalError;
use crate::model::MkfnetModel;
use crate::tensor::{cosine, seq_sum, Tensor};

type Result<T> = std::result::Result<T, EvalError>;

pub const DEFAULT_N_SYN: usize = 60;
pub const DEFAULT_TOP_K: usize = 5;
pub const GAMMA_POINTS: usize = 201;
pub const GAMMA_RANGE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypes {
    pub n_syn: usize,
    pub prototypes: BTreeMap<usize, Vec<f64>>,
}

impl ClassPrototypes {
    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.prototypes.get(&class).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// Keeps only the listed classes.
    pub fn restrict(&self, classes: &[usize]) -> Result<ClassPrototypes> {
        let mut prototypes = BTreeMap::new();
        for &c in classes {
            let p = self.prototypes.get(&c).ok_or(EvalError::UnknownClass(c))?;
            prototypes.insert(c, p.clone());
        }
        Ok(ClassPrototypes { n_syn: self.n_syn, prototypes })
    }
}

/// Noise stream for one class: the seed picks the key, the class id the stream.
pub fn class_rng(seed: u64, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64);
    rng
}

/// Fused generations for one class, `n` rows.
pub fn synthesize_class(model: &MkfnetModel, semantic: &[f64], n: usize, seed: u64, class: usize) -> Result<Tensor> {
    let rows: Vec<&[f64]> = vec![semantic; n];
    let t = Tensor::from_rows(&rows)?;
    Ok(model.synthesize(&t, &mut class_rng(seed, class))?)
}

/// Column means of a `[n, d]` tensor, summed in row order.
pub fn column_mean(t: &Tensor) -> Vec<f64> {
    let (n, d) = (t.rows(), t.cols());
    (0..d).map(|j| (0..n).map(|i| t.data()[i * d + j]).sum::<f64>() / n as f64).collect()
}

/// One prototype per `(class id, semantic vector)`.
pub fn synthesize_prototypes(
    model: &MkfnetModel,
    semantics: &[(usize, &[f64])],
    n_syn: usize,
    seed: u64,
) -> Result<ClassPrototypes> {
    if n_syn == 0 {
        return Err(EvalError::NoSamples);
    }
    let mut prototypes = BTreeMap::new();
    for &(class, t) in semantics {
        let gen = synthesize_class(model, t, n_syn, seed, class)?;
        prototypes.insert(class, column_mean(&gen));
    }
    Ok(ClassPrototypes { n_syn, prototypes })
}

/// Prototypes for the given species, using their class-record semantics.
pub fn prototypes_for_species<A: SampleAccess + ?Sized>(
    model: &MkfnetModel,
    access: &A,
    species: &[usize],
    n_syn: usize,
    seed: u64,
) -> Result<ClassPrototypes> {
    let mut semantics = Vec::with_capacity(species.len());
    for &s in species {
        let rec = access.class(s).ok_or(EvalError::UnknownClass(s))?;
        semantics.push((s, rec.semantic.as_slice()));
    }
    synthesize_prototypes(model, &semantics, n_syn, seed)
}

/// Cosine similarity of `x` to every prototype, in class-id order.
pub fn class_scores(prototypes: &ClassPrototypes, x: &[f64]) -> Result<Vec<(usize, f64)>> {
    if prototypes.is_empty() {
        return Err(EvalError::NoPrototypes);
    }
    prototypes.prototypes.iter().map(|(&c, p)| cosine(x, p).map(|s| (c, s)).ok_or(EvalError::ZeroNorm)).collect()
}

/// Index of the largest score; ties go to the earliest entry.
fn argmax(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

pub fn classify_top1(prototypes: &ClassPrototypes, x: &[f64]) -> Result<usize> {
    let scores = class_scores(prototypes, x)?;
    Ok(scores[argmax(scores.iter().map(|&(_, s)| s))].0)
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u > 0.0 {
        2.0 * s * u / (s + u)
    } else {
        0.0
    }
}

/// Per-class accuracy: correct and total counts per true class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub counts: BTreeMap<usize, (usize, usize)>,
}

impl ClassCounts {
    pub fn record(&mut self, class: usize, correct: bool) {
        let e = self.counts.entry(class).or_default();
        e.0 += correct as usize;
        e.1 += 1;
    }

    /// Mean of per-class accuracies.
    pub fn mean_accuracy(&self) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        self.counts.values().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / self.counts.len() as f64
    }
}

/// Similarity scores of labelled test samples against a joint label space.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    /// Class ids, ascending; columns of `scores`.
    pub classes: Vec<usize>,
    pub is_seen: Vec<bool>,
    pub seen_rows: Vec<(usize, Vec<f64>)>,
    pub unseen_rows: Vec<(usize, Vec<f64>)>,
}

impl ScoredSet {
    pub fn new(classes: Vec<usize>, seen: &BTreeSet<usize>) -> Self {
        let is_seen = classes.iter().map(|c| seen.contains(c)).collect();
        Self { classes, is_seen, seen_rows: Vec::new(), unseen_rows: Vec::new() }
    }

    /// Scores every sample against all prototypes.
    pub fn from_samples(
        prototypes: &ClassPrototypes,
        seen: &BTreeSet<usize>,
        seen_samples: &[(usize, &[f64])],
        unseen_samples: &[(usize, &[f64])],
    ) -> Result<Self> {
        let mut set = Self::new(prototypes.prototypes.keys().copied().collect(), seen);
        for &(label, x) in seen_samples {
            set.seen_rows.push((label, class_scores(prototypes, x)?.into_iter().map(|(_, s)| s).collect()));
        }
        for &(label, x) in unseen_samples {
            set.unseen_rows.push((label, class_scores(prototypes, x)?.into_iter().map(|(_, s)| s).collect()));
        }
        Ok(set)
    }

    pub fn predict(&self, scores: &[f64], gamma: f64) -> usize {
        let i = argmax(scores.iter().zip(&self.is_seen).map(|(&s, &seen)| if seen { s - gamma } else { s }));
        self.classes[i]
    }

    fn counts(&self, rows: &[(usize, Vec<f64>)], gamma: f64) -> ClassCounts {
        let mut counts = ClassCounts::default();
        for (label, scores) in rows {
            counts.record(*label, self.predict(scores, gamma) == *label);
        }
        counts
    }

    /// `(S, U)` at the given calibration offset.
    pub fn accuracies(&self, gamma: f64) -> Result<(f64, f64)> {
        if self.seen_rows.is_empty() || self.unseen_rows.is_empty() {
            return Err(EvalError::EmptyEvalSet);
        }
        Ok((self.counts(&self.seen_rows, gamma).mean_accuracy(), self.counts(&self.unseen_rows, gamma).mean_accuracy()))
    }

    pub fn per_class_counts(&self, gamma: f64) -> ClassCounts {
        let mut c = self.counts(&self.seen_rows, gamma);
        c.counts.extend(self.counts(&self.unseen_rows, gamma).counts);
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub gamma: f64,
    pub seen: f64,
    pub unseen: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeenUnseenCurve {
    pub points: Vec<CurvePoint>,
}

/// `n` evenly spaced values over `[-range, range]`.
pub fn gamma_grid(n: usize, range: f64) -> Vec<f64> {
    if n < 2 {
        return vec![0.0];
    }
    (0..n).map(|i| -range + 2.0 * range * i as f64 / (n - 1) as f64).collect()
}

/// Sweeps `gammas` and keeps extending both ends by the grid step until
/// seen accuracy reaches 0 at the top and unseen accuracy reaches 0 at the
/// bottom.
pub fn seen_unseen_curve(set: &ScoredSet, gammas: &[f64]) -> Result<SeenUnseenCurve> {
    let mut gammas: Vec<f64> = gammas.to_vec();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    if gammas.is_empty() {
        gammas.push(0.0);
    }
    let step = if gammas.len() > 1 { (gammas[gammas.len() - 1] - gammas[0]) / (gammas.len() - 1) as f64 } else { 1.0 };
    let step = if step > 0.0 { step } else { 1.0 };
    let mut points = Vec::with_capacity(gammas.len());
    for &g in &gammas {
        let (s, u) = set.accuracies(g)?;
        points.push(CurvePoint { gamma: g, seen: s, unseen: u });
    }
    // Scores are cosines, so a finite extension always saturates; the cap is a guard.
    let mut budget = 10_000;
    while points[0].unseen > 0.0 && budget > 0 {
        let g = points[0].gamma - step;
        let (s, u) = set.accuracies(g)?;
        points.insert(0, CurvePoint { gamma: g, seen: s, unseen: u });
        budget -= 1;
    }
    while points[points.len() - 1].seen > 0.0 && budget > 0 {
        let g = points[points.len() - 1].gamma + step;
        let (s, u) = set.accuracies(g)?;
        points.push(CurvePoint { gamma: g, seen: s, unseen: u });
        budget -= 1;
    }
    Ok(SeenUnseenCurve { points })
}

impl SeenUnseenCurve {
    /// Point with the largest harmonic mean; ties go to the smallest |gamma|.
    pub fn best_h(&self) -> Option<CurvePoint> {
        let mut best: Option<(f64, CurvePoint)> = None;
        for p in &self.points {
            let h = harmonic_mean(p.seen, p.unseen);
            let better = match best {
                None => true,
                Some((bh, bp)) => h > bh || (h == bh && p.gamma.abs() < bp.gamma.abs()),
            };
            if better {
                best = Some((h, *p));
            }
        }
        best.map(|(_, p)| p)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma,S,U\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.gamma, p.seen, p.unseen);
        }
        out
    }

    /// Standalone SVG plot of U against S on the unit square.
    pub fn to_svg(&self) -> String {
        let size = 400.0;
        let pad = 40.0;
        let mut pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.seen, p.unseen)).collect();
        sort_curve(&mut pts);
        let coords: Vec<String> = pts
            .iter()
            .map(|&(s, u)| {
                format!("{:.2},{:.2}", pad + s.clamp(0.0, 1.0) * size, pad + (1.0 - u.clamp(0.0, 1.0)) * size)
            })
            .collect();
        let w = size + 2.0 * pad;
        format!(
            concat!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\" viewBox=\"0 0 {w} {w}\">\n",
                "<rect x=\"{p}\" y=\"{p}\" width=\"{s}\" height=\"{s}\" fill=\"none\" stroke=\"#888\"/>\n",
                "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{pts}\"/>\n",
                "<text x=\"{cx}\" y=\"{by}\" text-anchor=\"middle\" font-size=\"14\">seen accuracy</text>\n",
                "<text x=\"14\" y=\"{cx}\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 14 {cx})\">unseen accuracy</text>\n",
                "</svg>\n"
            ),
            w = w,
            p = pad,
            s = size,
            pts = coords.join(" "),
            cx = pad + size / 2.0,
            by = w - 10.0,
        )
    }
}

fn sort_curve(pts: &mut [(f64, f64)]) {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
}

/// Trapezoidal area under U(S), points ordered by S ascending (U descending
/// on ties), coordinates clipped to the unit square.
pub fn ausuc(curve: &SeenUnseenCurve) -> Result<f64> {
    if curve.points.len() < 2 {
        return Err(EvalError::ShortCurve(curve.points.len()));
    }
    let mut pts: Vec<(f64, f64)> =
        curve.points.iter().map(|p| (p.seen.clamp(0.0, 1.0), p.unseen.clamp(0.0, 1.0))).collect();
    sort_curve(&mut pts);
    let area = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum::<f64>();
    Ok(area.clamp(0.0, 1.0))
}

/// Pool samples ranked by cosine similarity to `class`'s prototype,
/// descending, ties by sample id; at most `k` entries.
pub fn retrieve_topk(
    prototypes: &ClassPrototypes,
    pool: &[(usize, &[f64])],
    class: usize,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let proto = prototypes.get(class).ok_or(EvalError::UnknownClass(class))?;
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let mut ranked = pool
        .iter()
        .map(|&(id, x)| cosine(proto, x).map(|s| (id, s)).ok_or(EvalError::ZeroNorm))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Zsl,
    Gzsl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub n_syn: usize,
    pub seed: u64,
    /// Must match the fraction used in training so the seen test set is disjoint.
    pub holdout: f64,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mode: EvalMode::Gzsl, n_syn: DEFAULT_N_SYN, seed: 1, holdout: 0.2, top_k: DEFAULT_TOP_K }
    }
}

/// Headline numbers. GZSL fields are `None` in ZSL mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1_unseen: f64,
    /// Mean precision@k of unseen-class retrieval from the unseen pool.
    pub precision_at_k: f64,
    pub k: usize,
    pub gzsl: Option<GzslMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GzslMetrics {
    /// Uncalibrated (gamma = 0).
    pub seen: f64,
    pub unseen: f64,
    pub h: f64,
    /// At the best-H calibration offset.
    pub gamma_best: f64,
    pub seen_best: f64,
    pub unseen_best: f64,
    pub h_best: f64,
    pub ausuc: f64,
}

impl Metrics {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let mut f = vec![("top1_unseen", self.top1_unseen.to_string())];
        if let Some(g) = &self.gzsl {
            f.extend([
                ("S", g.seen.to_string()),
                ("U", g.unseen.to_string()),
                ("H", g.h.to_string()),
                ("gamma_best", g.gamma_best.to_string()),
                ("S_best", g.seen_best.to_string()),
                ("U_best", g.unseen_best.to_string()),
                ("H_best", g.h_best.to_string()),
                ("AUSUC", g.ausuc.to_string()),
            ]);
        }
        f.push(("k", self.k.to_string()));
        f.push(("precision_at_k", self.precision_at_k.to_string()));
        f
    }

    /// One `key=value` per line.
    pub fn to_text(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_csv(&self) -> String {
        let f = self.fields();
        let keys: Vec<&str> = f.iter().map(|(k, _)| *k).collect();
        let vals: Vec<&str> = f.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", keys.join(","), vals.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub metrics: Metrics,
    pub curve: Option<SeenUnseenCurve>,
    /// Per true class `(correct, total)`; GZSL at gamma = 0, otherwise ZSL.
    pub per_class: ClassCounts,
    pub prototypes: ClassPrototypes,
}

impl EvalOutput {
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,correct,total\n");
        for (c, (k, n)) in &self.per_class.counts {
            let _ = writeln!(out, "{c},{k},{n}");
        }
        out
    }
}

fn labelled<'a, A: SampleAccess + ?Sized>(access: &'a A, ids: &[usize]) -> Vec<(usize, &'a [f64])> {
    ids.iter().map(|&i| (access.sample_species(i), access.visual(i))).collect()
}

/// Full evaluation of a trained model.
pub fn evaluate<A: SampleAccess + ?Sized>(model: &MkfnetModel, access: &A, cfg: &EvalConfig) -> Result<EvalOutput> {
    let seen: Vec<usize> = access.seen_species().to_vec();
    let unseen: Vec<usize> = access.unseen_species().to_vec();
    let mut all: Vec<usize> = seen.iter().chain(&unseen).copied().collect();
    all.sort_unstable();
    let prototypes = prototypes_for_species(model, access, &all, cfg.n_syn, cfg.seed)?;
    let unseen_protos = prototypes.restrict(&unseen)?;

    let unseen_ids = access.unseen_sample_ids();
    if unseen_ids.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let unseen_samples = labelled(access, &unseen_ids);
    let mut zsl = ClassCounts::default();
    for &(label, x) in &unseen_samples {
        zsl.record(label, classify_top1(&unseen_protos, x)? == label);
    }

    let mut precision = Vec::with_capacity(unseen.len());
    for &c in &unseen {
        let hits = retrieve_topk(&unseen_protos, &unseen_samples_by_id(access, &unseen_ids), c, cfg.top_k)?;
        let correct = hits.iter().filter(|(id, _)| access.sample_species(*id) == c).count();
        precision.push(correct as f64 / hits.len().max(1) as f64);
    }
    let precision_at_k = if precision.is_empty() { 0.0 } else { seq_sum(&precision) / precision.len() as f64 };

    let (metrics, curve, per_class) = match cfg.mode {
        EvalMode::Zsl => {
            (Metrics { top1_unseen: zsl.mean_accuracy(), precision_at_k, k: cfg.top_k, gzsl: None }, None, zsl)
        }
        EvalMode::Gzsl => {
            let (_, seen_test) = holdout_split(access, cfg.holdout);
            if seen_test.is_empty() {
                return Err(EvalError::EmptyEvalSet);
            }
            let seen_set: BTreeSet<usize> = seen.iter().copied().collect();
            let set = ScoredSet::from_samples(&prototypes, &seen_set, &labelled(access, &seen_test), &unseen_samples)?;
            let (s, u) = set.accuracies(0.0)?;
            let curve = seen_unseen_curve(&set, &gamma_grid(GAMMA_POINTS, GAMMA_RANGE))?;
            let best = curve.best_h().expect("curve is nonempty");
            let gzsl = GzslMetrics {
                seen: s,
                unseen: u,
                h: harmonic_mean(s, u),
                gamma_best: best.gamma,
                seen_best: best.seen,
                unseen_best: best.unseen,
                h_best: harmonic_mean(best.seen, best.unseen),
                ausuc: ausuc(&curve)?,
            };
            let per_class = set.per_class_counts(0.0);
            (
                Metrics { top1_unseen: zsl.mean_accuracy(), precision_at_k, k: cfg.top_k, gzsl: Some(gzsl) },
                Some(curve),
                per_class,
            )
        }
    };
    Ok(EvalOutput { metrics, curve, per_class, prototypes })
}

fn unseen_samples_by_id<'a, A: SampleAccess + ?Sized>(access: &'a A, ids: &[usize]) -> Vec<(usize, &'a [f64])> {
    ids.iter().map(|&i| (i, access.visual(i))).collect()
}
