//! Browser demo. Each exported function takes plain numbers and returns a
//! JSON string for `www/index.html` to draw; the same logic is callable from
//! Rust through the `*_report` functions.

use std::collections::BTreeSet;

use mkfusion_core::eval::{
    ausuc, gamma_grid, harmonic_mean, seen_unseen_curve, CurvePoint, ScoredSet, GAMMA_POINTS, GAMMA_RANGE,
};
use mkfusion_core::model::{fuse_baseline, weighted_sum, FusionWeights};
use mkfusion_core::nfg::{crossover_with, mutate_with, GeneticDraw};
use mkfusion_core::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct GeneticReport {
    pub r1: f64,
    pub r2: f64,
    pub loc1: Vec<usize>,
    pub loc2: Vec<usize>,
    pub mutated: Vec<f64>,
    pub crossed: Vec<f64>,
}

/// One draw applied to a parent pair: the mutated first parent and the
/// crossover of both.
pub fn genetic_report(a: &[f64], b: &[f64], seed: u64) -> Result<GeneticReport, String> {
    if a.len() != b.len() || a.is_empty() {
        return Err(format!("parents need the same non-zero length (got {} and {})", a.len(), b.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = GeneticDraw::sample(a.len(), &mut rng);
    draw.loc1.sort_unstable();
    draw.loc2.sort_unstable();
    let mutated = mutate_with(a, &draw, &mut rng);
    let crossed = crossover_with(a, b, &draw).map_err(|e| e.to_string())?;
    Ok(GeneticReport { r1: draw.r1, r2: draw.r2, loc1: draw.loc1, loc2: draw.loc2, mutated, crossed })
}

#[derive(Debug, Serialize)]
pub struct FusionReport {
    /// `(family, genus, species)`.
    pub weights: [f64; 3],
    pub fused: Vec<f64>,
    pub baseline: Vec<f64>,
    pub equals_baseline: bool,
}

/// Normalized weights for three level scores and the fused feature of three
/// level features, next to the plain average.
pub fn fusion_report(scores: [f64; 3], features: [&[f64]; 3]) -> Result<FusionReport, String> {
    if scores.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err("scores must be positive".into());
    }
    let w = FusionWeights::from_scores(scores);
    let rows = features.map(|f| Tensor::new(vec![1, f.len()], f.to_vec()));
    let [f, g, s] = rows;
    let xs = [f.map_err(|e| e.to_string())?, g.map_err(|e| e.to_string())?, s.map_err(|e| e.to_string())?];
    let baseline = fuse_baseline([&xs[0], &xs[1], &xs[2]]).map_err(|e| e.to_string())?;
    let mut graph = Graph::new();
    let fused = (|| {
        let vars = [graph.constant(&xs[0])?, graph.constant(&xs[1])?, graph.constant(&xs[2])?];
        let rho = w.as_array().map(|r| Tensor::new(vec![1, 1], vec![r]));
        let mut rv = Vec::with_capacity(3);
        for r in rho {
            rv.push(graph.constant(&r?)?);
        }
        let out = weighted_sum(&mut graph, vars, [rv[0], rv[1], rv[2]])?;
        Ok::<_, mkfusion_core::TensorError>(graph.value(out).data().to_vec())
    })()
    .map_err(|e| e.to_string())?;
    Ok(FusionReport {
        weights: w.as_array(),
        equals_baseline: fused == baseline.data(),
        fused,
        baseline: baseline.data().to_vec(),
    })
}

#[derive(Debug, Serialize)]
pub struct CurveReport {
    pub points: Vec<CurvePoint>,
    pub ausuc: f64,
    /// Uncalibrated operating point.
    pub at_zero: CurvePoint,
    pub h_at_zero: f64,
    pub best: CurvePoint,
    pub h_best: f64,
    pub svg: String,
}

/// Toy scores for `classes` seen and `classes` unseen classes: each sample
/// scores `separation` higher on its own class, seen classes get an extra
/// `seen_bias`, plus unit Gaussian noise. The curve sweeps the calibration
/// offset as in evaluation.
pub fn curve_report(
    separation: f64,
    seen_bias: f64,
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<CurveReport, String> {
    if classes == 0 || per_class == 0 {
        return Err("need at least one class and one sample per class".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..2 * classes).collect();
    let seen: BTreeSet<usize> = (0..classes).collect();
    let mut set = ScoredSet::new(all.clone(), &seen);
    for &label in &all {
        for _ in 0..per_class {
            let scores: Vec<f64> = all
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z + if c == label { separation } else { 0.0 } + if seen.contains(&c) { seen_bias } else { 0.0 }
                })
                .collect();
            if seen.contains(&label) {
                set.seen_rows.push((label, scores));
            } else {
                set.unseen_rows.push((label, scores));
            }
        }
    }
    // Scores here are not bounded by one, so widen the grid with them.
    let range = GAMMA_RANGE.max(separation.abs() + seen_bias.abs() + 4.0);
    let curve = seen_unseen_curve(&set, &gamma_grid(GAMMA_POINTS, range)).map_err(|e| e.to_string())?;
    let (s0, u0) = set.accuracies(0.0).map_err(|e| e.to_string())?;
    let best = curve.best_h().ok_or("empty curve")?;
    Ok(CurveReport {
        ausuc: ausuc(&curve).map_err(|e| e.to_string())?,
        at_zero: CurvePoint { gamma: 0.0, seen: s0, unseen: u0 },
        h_at_zero: harmonic_mean(s0, u0),
        h_best: harmonic_mean(best.seen, best.unseen),
        best,
        svg: curve.to_svg(),
        points: curve.points,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e)).and_then(|v| serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string())))
}

#[wasm_bindgen]
pub fn genetic(a: Vec<f64>, b: Vec<f64>, seed: u32) -> Result<String, JsError> {
    to_js(genetic_report(&a, &b, seed as u64))
}

/// `features` holds the family, genus and species features back to back.
#[wasm_bindgen]
pub fn fusion(family: f64, genus: f64, species: f64, features: Vec<f64>) -> Result<String, JsError> {
    if !features.len().is_multiple_of(3) {
        return Err(JsError::new("features must hold three equal-length vectors"));
    }
    let d = features.len() / 3;
    to_js(fusion_report([family, genus, species], [&features[..d], &features[d..2 * d], &features[2 * d..]]))
}

#[wasm_bindgen]
pub fn curve(separation: f64, seen_bias: f64, classes: u32, per_class: u32, seed: u32) -> Result<String, JsError> {
    to_js(curve_report(separation, seen_bias, classes as usize, per_class as usize, seed as u64))
}
