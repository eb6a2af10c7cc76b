//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use mkfusion_core::audit::AuditedBundle;
use mkfusion_core::data::{generate_synthetic, ClassRecord, LabelSpace, Level, SampleAccess, SyntheticSpec};
use mkfusion_core::eval::{
    ausuc, classify_top1, evaluate, gamma_grid, harmonic_mean, prototypes_for_species, seen_unseen_curve,
    ClassPrototypes, EvalConfig, EvalMode, ScoredSet, GAMMA_POINTS, GAMMA_RANGE,
};
use mkfusion_core::model::{
    fuse_baseline, loss_discriminator, loss_fusion, loss_generator, BoundModel, FusionMode, FusionNet, FusionWeights,
    MkfnetModel, ModelConfig, Trainable,
};
use mkfusion_core::nfg::{crossover_with, loss_er, loss_nr, mutate_with, GeneticDraw, Pools};
use mkfusion_core::train::{Checkpoint, TrainConfig, Trainer, CRITIC_STEPS};
use mkfusion_core::{DatasetBundle, Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("gradient correctness", criterion_1),
        ("fusion-weight properties", criterion_2),
        ("genetic-operator properties", criterion_3),
        ("metric oracles", criterion_4),
        ("end-to-end desk-scale GZSL", criterion_5),
        ("ablation ordering", criterion_6),
        ("training schedule", criterion_7),
        ("determinism and persistence", criterion_8),
        ("zero-shot access audit", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(format!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            )),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS [{secs:.1}s] {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL [{secs:.1}s] {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn default_bundle(seed: u64) -> DatasetBundle {
    generate_synthetic(&SyntheticSpec::default(), seed).expect("default bundle")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- criterion 1

const FD_H: f64 = 1e-5;

fn grad_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= f64::max(1e-6, 1e-4 * analytic.abs().max(numeric.abs()))
}

/// Checks every input coordinate of one op, reduced to a scalar through a
/// fixed random weighting of its output.
fn check_op(
    name: &str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
) -> Result<usize, String> {
    let eval = |inputs: &[Tensor], weights: Option<&Tensor>| -> (f64, Option<Vec<Vec<f64>>>, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap_or_else(|e| panic!("{name}: {e}"));
        let shape = g.value(out).shape().to_vec();
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                uniform(&mut r, &shape, -1.0, 1.0)
            }
        };
        let wv = g.constant(&w).unwrap();
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).item().unwrap();
        let grads = if weights.is_none() {
            g.backward(loss).unwrap();
            Some(
                vars.iter()
                    .map(|&v| g.grad(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
                    .collect(),
            )
        } else {
            None
        };
        (value, grads, w)
    };
    let (_, grads, w) = eval(&inputs, None);
    let grads = grads.unwrap();
    let mut checked = 0;
    for (i, g) in grads.iter().enumerate() {
        for (j, &analytic) in g.iter().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += FD_H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= FD_H;
            let numeric = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * FD_H);
            if !grad_close(analytic, numeric) {
                return Err(format!("{name}: input {i}[{j}] analytic {analytic} vs numeric {numeric}"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn op_checks() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total = 0;
    let m = |rng: &mut ChaCha8Rng, r: usize, c: usize| uniform(rng, &[r, c], -1.0, 1.0);
    let pos = |rng: &mut ChaCha8Rng, r: usize, c: usize| uniform(rng, &[r, c], 0.5, 1.5);
    let (a, b) = (m(&mut rng, 3, 4), m(&mut rng, 4, 2));
    total += check_op("matmul", vec![a, b], |g, v| g.matmul(v[0], v[1]))?;
    let (a, b) = (m(&mut rng, 3, 4), m(&mut rng, 3, 4));
    total += check_op("add", vec![a, b], |g, v| g.add(v[0], v[1]))?;
    let (a, b) = (m(&mut rng, 3, 4), m(&mut rng, 1, 4));
    total += check_op("add_row_broadcast", vec![a, b], |g, v| g.add(v[0], v[1]))?;
    let (a, b) = (m(&mut rng, 3, 4), m(&mut rng, 1, 4));
    total += check_op("sub_row_broadcast", vec![a, b], |g, v| g.sub(v[0], v[1]))?;
    let (a, b) = (m(&mut rng, 3, 4), m(&mut rng, 3, 4));
    total += check_op("mul", vec![a, b], |g, v| g.mul(v[0], v[1]))?;
    let (a, b) = (m(&mut rng, 3, 4), m(&mut rng, 3, 1));
    total += check_op("mul_col_broadcast", vec![a, b], |g, v| g.mul(v[0], v[1]))?;
    let (a, b) = (m(&mut rng, 3, 4), pos(&mut rng, 3, 4));
    total += check_op("div", vec![a, b], |g, v| g.div(v[0], v[1]))?;
    let (a, b) = (m(&mut rng, 3, 4), pos(&mut rng, 3, 1));
    total += check_op("div_col_broadcast", vec![a, b], |g, v| g.div(v[0], v[1]))?;
    total += check_op("scalar_mul", vec![m(&mut rng, 3, 4)], |g, v| g.scalar_mul(v[0], -2.5))?;
    total += check_op("mean", vec![m(&mut rng, 3, 4)], |g, v| g.mean(v[0]))?;
    total += check_op("sum", vec![m(&mut rng, 3, 4)], |g, v| g.sum(v[0]))?;
    total += check_op("sum_rows", vec![m(&mut rng, 3, 4)], |g, v| g.sum_rows(v[0]))?;
    total += check_op("leaky_relu", vec![m(&mut rng, 3, 4)], |g, v| g.leaky_relu(v[0], 0.2))?;
    total += check_op("sigmoid", vec![m(&mut rng, 3, 4)], |g, v| g.sigmoid(v[0]))?;
    total += check_op("softmax_rows", vec![m(&mut rng, 3, 4)], |g, v| g.softmax_rows(v[0]))?;
    total += check_op("log", vec![pos(&mut rng, 3, 4)], |g, v| g.log(v[0]))?;
    total += check_op("square", vec![m(&mut rng, 3, 4)], |g, v| g.square(v[0]))?;
    let (a, b) = (m(&mut rng, 3, 4), m(&mut rng, 3, 4));
    total += check_op("l2_sq_dist", vec![a, b], |g, v| g.l2_sq_dist(v[0], v[1]))?;
    let (a, b) = (m(&mut rng, 3, 4), m(&mut rng, 3, 4));
    total += check_op("cosine", vec![a, b], |g, v| g.cosine(v[0], v[1]))?;
    let target = {
        let raw = pos(&mut rng, 3, 4);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let r = raw.row(i);
                let s: f64 = r.iter().sum();
                r.iter().map(|x| x / s).collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    total += check_op("cross_entropy", vec![m(&mut rng, 3, 4)], move |g, v| g.cross_entropy(v[0], &target))?;
    Ok(total)
}

fn grad_model_config() -> ModelConfig {
    ModelConfig {
        visual_dim: 6,
        semantic_dim: 5,
        seen_classes: 4,
        noise_dim: 3,
        gen_hidden: 14,
        disc_hidden: [12, 8],
        fusion_hidden: 12,
        leaky_slope: 0.2,
        fusion: FusionMode::Adaptive,
    }
}

/// Compares analytic and central-difference gradients on `coords` random
/// coordinates of the parameters whose names start with `prefix`.
fn model_gradcheck(
    model: &mut MkfnetModel,
    prefix: &str,
    trainable: Trainable,
    coords: usize,
    loss: &dyn Fn(&MkfnetModel, &mut Graph, &BoundModel) -> Var,
) -> Result<usize, String> {
    model.zero_grad();
    let mut g = Graph::new();
    let b = model.bind(&mut g, trainable).unwrap();
    let v = loss(model, &mut g, &b);
    g.backward(v).unwrap();
    model.absorb_grads(&g, &b).unwrap();
    let mut candidates = Vec::new();
    for (i, (name, t)) in model.named_params().into_iter().enumerate() {
        if name.starts_with(prefix) {
            let grad = t.grad().ok_or_else(|| format!("{name} has no gradient"))?;
            for (j, &gj) in grad.iter().enumerate() {
                candidates.push((i, j, gj, name.clone()));
            }
        }
    }
    if candidates.len() < coords {
        return Err(format!("{prefix}: only {} coordinates", candidates.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let picked = rand::seq::index::sample(&mut rng, candidates.len(), coords).into_vec();
    let value = |model: &MkfnetModel| {
        let mut g = Graph::new();
        let b = model.bind(&mut g, Trainable::default()).unwrap();
        let v = loss(model, &mut g, &b);
        g.value(v).item().unwrap()
    };
    for k in picked {
        let (i, j, analytic, ref name) = candidates[k];
        let orig = model.params_mut()[i].data()[j];
        model.params_mut()[i].data_mut()[j] = orig + FD_H;
        let fp = value(model);
        model.params_mut()[i].data_mut()[j] = orig - FD_H;
        let fm = value(model);
        model.params_mut()[i].data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * FD_H);
        if !grad_close(analytic, numeric) {
            return Err(format!("{name}[{j}]: analytic {analytic} vs numeric {numeric}"));
        }
    }
    model.zero_grad();
    Ok(coords)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let op_coords = op_checks()?;
    let cfg = grad_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model = MkfnetModel::init(cfg.clone(), &mut rng);
    // Make the leaky slopes matter and the critic non-trivial.
    for p in model.params_mut() {
        for x in p.data_mut() {
            *x *= 2.0;
        }
    }
    let batch = 5;
    let t = uniform(&mut rng, &[batch, cfg.semantic_dim], -1.0, 1.0);
    let real = uniform(&mut rng, &[batch, cfg.visual_dim], -1.0, 1.0);
    let centers = uniform(&mut rng, &[batch, cfg.visual_dim], -1.0, 1.0);
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.seen_classes).collect();
    let targets = mkfusion_core::model::one_hot(&labels, cfg.seen_classes).unwrap();

    let mut coords = 0;
    let l_d = |m: &MkfnetModel, g: &mut Graph, b: &BoundModel| {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let xs = m.forward_levels(g, b, &t, &mut r).unwrap();
        let fake = m.fuse_on(g, b, xs).unwrap();
        let real = g.constant(&real).unwrap();
        loss_discriminator(g, &b.discriminator, real, fake, &targets).unwrap().total
    };
    coords += model_gradcheck(&mut model, "disc/", Trainable { discriminator: true, ..Default::default() }, 200, &l_d)
        .map_err(|e| format!("L_D: {e}"))?;

    for level in Level::ALL {
        let k = level.index();
        let l_g = |m: &MkfnetModel, g: &mut Graph, b: &BoundModel| {
            let mut r = ChaCha8Rng::seed_from_u64(2);
            let xs = m.forward_levels(g, b, &t, &mut r).unwrap();
            loss_generator(g, &b.discriminator, xs[k], &targets, &centers).unwrap().total
        };
        let prefix = format!("gen/{}/", level.name());
        coords += model_gradcheck(&mut model, &prefix, Trainable { generators: true, ..Default::default() }, 200, &l_g)
            .map_err(|e| format!("L_G {}: {e}", level.name()))?;
    }

    let classes: Vec<ClassRecord> = (0..cfg.seen_classes)
        .map(|s| ClassRecord {
            species_id: s,
            genus_id: s / 2,
            family_id: 0,
            name: format!("s{s}"),
            semantic: t.row(s % batch).to_vec(),
        })
        .collect();
    let seen: Vec<usize> = (0..cfg.seen_classes).collect();
    let label_space = LabelSpace::new(&seen, &classes).unwrap();
    let mut pools = Pools::default();
    for (level, class) in [(Level::Species, 1), (Level::Genus, 0), (Level::Family, 0), (Level::Genus, 1)] {
        pools.enhanced.push(level, class, uniform(&mut rng, &[1, cfg.semantic_dim], -1.0, 1.0).into_data());
    }
    for _ in 0..3 {
        pools.novel.entries.push(uniform(&mut rng, &[1, cfg.semantic_dim], -1.0, 1.0).into_data());
    }
    let l_fm = |m: &MkfnetModel, g: &mut Graph, b: &BoundModel| {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let xs = m.forward_levels(g, b, &t, &mut r).unwrap();
        let xs = [g.detach(xs[0]).unwrap(), g.detach(xs[1]).unwrap(), g.detach(xs[2]).unwrap()];
        let fused = m.fuse_on(g, b, xs).unwrap();
        let er = loss_er(g, m, b, &pools, &label_space, 4, &mut r).unwrap();
        let nr = loss_nr(g, m, b, &pools, 1.0, 4, &mut r).unwrap();
        assert!(er.is_some() && nr.is_some());
        loss_fusion(g, &b.discriminator, fused, &targets, er, nr).unwrap()
    };
    coords += model_gradcheck(&mut model, "fusion/", Trainable { fusion: true, ..Default::default() }, 200, &l_fm)
        .map_err(|e| format!("L_FM: {e}"))?;

    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 30.0,
        format!("{op_coords} op coordinates, {coords} loss coordinates (L_D, 3 x L_G, L_FM at 200 each) in {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = ModelConfig { visual_dim: 8, fusion_hidden: 6, ..ModelConfig::default() };
    let mut worst_sum = 0.0f64;
    let mut rows_checked = 0;
    for trial in 0..1000 {
        let net = FusionNet::init(&cfg, &mut rng);
        let rows = 1 + trial % 3;
        let scale = (rng.random_range(-3.0..3.0f64)).exp();
        let xs: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[rows, cfg.visual_dim], -scale, scale)).collect();
        let (_, weights) = net.fuse([&xs[0], &xs[1], &xs[2]], 0.2).map_err(|e| e.to_string())?;
        for w in weights {
            worst_sum = worst_sum.max((w.sum() - 1.0).abs());
            if w.as_array().iter().any(|&r| !(r > 0.0 && r < 1.0)) {
                return Err(format!("trial {trial}: weight outside (0,1): {:?}", w.as_array()));
            }
            rows_checked += 1;
        }
    }
    if worst_sum > 1e-9 {
        return Err(format!("max |sum rho - 1| = {worst_sum:e}"));
    }
    let zero = FusionNet::zeros(cfg.visual_dim, cfg.fusion_hidden);
    let xs: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[4, cfg.visual_dim], -2.0, 2.0)).collect();
    let (fused, weights) = zero.fuse([&xs[0], &xs[1], &xs[2]], 0.2).map_err(|e| e.to_string())?;
    let uniform_ok = weights.iter().all(|w| *w == FusionWeights::UNIFORM && w.as_array() == [1.0 / 3.0; 3]);
    let baseline = fuse_baseline([&xs[0], &xs[1], &xs[2]]).map_err(|e| e.to_string())?;
    let same = fused.data() == baseline.data();
    check(
        uniform_ok && same,
        format!(
            "{rows_checked} rows, max |sum rho - 1| = {worst_sum:.1e}; uniform scores -> (1/3,1/3,1/3): {uniform_ok}; equals summing baseline exactly: {same}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut identities = 0;
    for trial in 0..10_000 {
        let d = rng.random_range(1..=40);
        let mut parent: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut other: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        for i in 0..d {
            if rng.random_bool(0.3) {
                parent[i] = 0.0;
            }
            if rng.random_bool(0.1) {
                other[i] = 0.0;
            }
        }
        let draw = if trial % 10 == 0 {
            // Force ⌊d·r⌋ = 0 on both operators.
            GeneticDraw { r1: 0.5 / 41.0, r2: 0.9 / 41.0, loc1: Vec::new(), loc2: Vec::new() }
        } else {
            GeneticDraw::sample(d, &mut rng)
        };
        if draw.loc1.len() != (d as f64 * draw.r1).floor() as usize
            || draw.loc2.len() != (d as f64 * draw.r2).floor() as usize
        {
            return Err(format!("trial {trial}: location counts do not match floor(d r)"));
        }
        let mut replay = rng.clone();
        let v_mut = mutate_with(&parent, &draw, &mut rng);
        let mut expected = parent.clone();
        for &p in &draw.loc1 {
            let r: f64 = replay.random();
            expected[p] = if parent[p] != 0.0 { parent[p] * r } else { parent[p] + r };
        }
        if v_mut != expected {
            return Err(format!("trial {trial}: mutation differs from the multiply/add rule"));
        }
        for p in 0..d {
            if !draw.loc1.contains(&p) && v_mut[p] != parent[p] {
                return Err(format!("trial {trial}: mutation touched undrawn position {p}"));
            }
        }
        let v_cross = crossover_with(&parent, &other, &draw).map_err(|e| e.to_string())?;
        for p in 0..d {
            let want = if draw.loc2.contains(&p) { other[p] } else { parent[p] };
            if v_cross[p] != want || (v_cross[p] != parent[p] && v_cross[p] != other[p]) {
                return Err(format!("trial {trial}: crossover position {p} not from the right parent"));
            }
        }
        if draw.loc1.is_empty() {
            if v_mut != parent {
                return Err(format!("trial {trial}: empty mutation draw is not the identity"));
            }
            identities += 1;
        }
        if draw.loc2.is_empty() {
            if v_cross != parent {
                return Err(format!("trial {trial}: empty crossover draw is not the identity"));
            }
            identities += 1;
        }
    }
    Ok(format!("10000 trials, {identities} zero-count draws were identities"))
}

// ---------------------------------------------------------------- criterion 4

fn one_hot_oracle() -> ScoredSet {
    let seen: std::collections::BTreeSet<usize> = [0, 1, 2].into_iter().collect();
    let mut set = ScoredSet::new((0..6).collect(), &seen);
    for c in 0..6 {
        for _ in 0..3 {
            let mut s = vec![0.0; 6];
            s[c] = 1.0;
            if c < 3 {
                set.seen_rows.push((c, s));
            } else {
                set.unseen_rows.push((c, s));
            }
        }
    }
    set
}

fn criterion_4() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, s, u, want) in [("aPY", 94.0, 30.2, 45.7), ("AwA1", 92.9, 65.0, 76.4)] {
        let h = harmonic_mean(s, u);
        let pass = (h - want).abs() <= 0.05;
        ok &= pass;
        notes.push(format!(
            "{name} H({s},{u}) = {h:.4} vs {want} (|diff| {:.4}, {})",
            (h - want).abs(),
            if pass { "ok" } else { "outside 0.05" }
        ));
    }

    let curve =
        seen_unseen_curve(&one_hot_oracle(), &gamma_grid(GAMMA_POINTS, GAMMA_RANGE)).map_err(|e| e.to_string())?;
    let area = ausuc(&curve).map_err(|e| e.to_string())?;
    let area_ok = (area - 1.0).abs() <= 1e-9;
    ok &= area_ok;
    notes.push(format!("one-hot oracle AUSUC = {area}"));

    // Saturation and identity on random score matrices.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sat_ok = true;
    for _ in 0..50 {
        let k = rng.random_range(3..8);
        let n_seen = rng.random_range(1..k);
        let seen: std::collections::BTreeSet<usize> = (0..n_seen).collect();
        let protos = ClassPrototypes {
            n_syn: 1,
            prototypes: (0..k).map(|c| (c, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())).collect(),
        };
        let samples: Vec<(usize, Vec<f64>)> =
            (0..20).map(|i| (i % k, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let seen_s: Vec<(usize, &[f64])> =
            samples.iter().filter(|s| s.0 < n_seen).map(|s| (s.0, s.1.as_slice())).collect();
        let unseen_s: Vec<(usize, &[f64])> =
            samples.iter().filter(|s| s.0 >= n_seen).map(|s| (s.0, s.1.as_slice())).collect();
        let set = ScoredSet::from_samples(&protos, &seen, &seen_s, &unseen_s).map_err(|e| e.to_string())?;
        let curve = seen_unseen_curve(&set, &gamma_grid(GAMMA_POINTS, GAMMA_RANGE)).map_err(|e| e.to_string())?;
        let first = curve.points[0];
        let last = curve.points[curve.points.len() - 1];
        sat_ok &= first.unseen == 0.0 && last.seen == 0.0;
        let (s_hi, _) = set.accuracies(1e6).map_err(|e| e.to_string())?;
        let (_, u_lo) = set.accuracies(-1e6).map_err(|e| e.to_string())?;
        sat_ok &= s_hi == 0.0 && u_lo == 0.0;
        // gamma = 0 equals plain argmax over all prototypes.
        let (s0, u0) = set.accuracies(0.0).map_err(|e| e.to_string())?;
        let acc = |rows: &[(usize, &[f64])]| {
            let mut per: std::collections::BTreeMap<usize, (f64, f64)> = Default::default();
            for &(l, x) in rows {
                let e = per.entry(l).or_default();
                e.0 += (classify_top1(&protos, x).unwrap() == l) as u8 as f64;
                e.1 += 1.0;
            }
            per.values().map(|(c, n)| c / n).sum::<f64>() / per.len() as f64
        };
        sat_ok &= (s0 - acc(&seen_s)).abs() < 1e-12 && (u0 - acc(&unseen_s)).abs() < 1e-12;
    }
    ok &= sat_ok;
    notes.push(format!("saturation endpoints and gamma=0 identity on 50 random score sets: {sat_ok}"));
    check(ok, notes.join("; "))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let bundle = default_bundle(1);
    if bundle.classes.len() != 36 || bundle.splits.unseen.len() != 6 {
        return Err(format!("bundle has {} classes, {} unseen", bundle.classes.len(), bundle.splits.unseen.len()));
    }
    let cfg = TrainConfig { steps: 300, seed: 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg.clone(), &bundle).map_err(|e| e.to_string())?;
    trainer.run().map_err(|e| e.to_string())?;
    let out = evaluate(&trainer.model, &bundle, &EvalConfig { seed: 1, holdout: cfg.holdout, ..EvalConfig::default() })
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let g = out.metrics.gzsl.expect("gzsl metrics");
    let ok = out.metrics.top1_unseen >= 0.40 && g.h >= 0.30 && g.ausuc >= 0.25 && secs <= 300.0;
    check(
        ok,
        format!(
            "unseen Top-1 {:.3} (>= 0.40), S {:.3}, U {:.3}, H {:.3} (>= 0.30), H_best {:.3}, AUSUC {:.3} (>= 0.25), {secs:.1}s (<= 300)",
            out.metrics.top1_unseen, g.seen, g.unseen, g.h, g.h_best, g.ausuc
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let bundle = default_bundle(1);
    let mut sums = [0.0; 3];
    let mut per_seed = Vec::new();
    for seed in 1..=5u64 {
        let base = TrainConfig { seed, ..TrainConfig::default() };
        let variants = [
            base.clone(),
            TrainConfig { n_nfg: base.steps, ..base.clone() },
            TrainConfig { n_nfg: base.steps, fusion: FusionMode::Summing, ..base.clone() },
        ];
        let mut hs = [0.0; 3];
        for (i, v) in variants.into_iter().enumerate() {
            let holdout = v.holdout;
            let mut t = Trainer::new(v, &bundle).map_err(|e| e.to_string())?;
            t.run().map_err(|e| e.to_string())?;
            let out = evaluate(&t.model, &bundle, &EvalConfig { seed, holdout, ..EvalConfig::default() })
                .map_err(|e| e.to_string())?;
            hs[i] = out.metrics.gzsl.expect("gzsl").h;
            sums[i] += hs[i];
        }
        per_seed.push(format!("seed {seed}: {:.3}/{:.3}/{:.3}", hs[0], hs[1], hs[2]));
    }
    let [nfg, mk, base] = sums.map(|s| s / 5.0);
    let ok = nfg >= mk - 0.02 && mk >= base - 0.02;
    check(
        ok,
        format!(
            "mean H: MKFNet-NFG {nfg:.4}, MKFNet {mk:.4}, summing {base:.4} (need NFG >= MKFNet - 0.02 and MKFNet >= summing - 0.02); {}",
            per_seed.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let bundle = default_bundle(1);
    let cfg = TrainConfig { steps: 8, seed: 7, ..TrainConfig::default() };
    let n_nfg = cfg.n_nfg;
    let mut t = Trainer::new(cfg, &bundle).map_err(|e| e.to_string())?;
    while !t.is_finished() {
        let r = t.step().map_err(|e| e.to_string())?.clone();
        let (disc, gens, fusion) = t.optimizer_steps();
        let loops = r.outer_loop as u64;
        if r.disc_updates != CRITIC_STEPS || disc != 5 * loops {
            return Err(format!("loop {loops}: {} critic updates this loop, {disc} total", r.disc_updates));
        }
        if r.gen_updates != 1 || gens.iter().any(|&g| g != loops) || fusion != loops {
            return Err(format!("loop {loops}: generator/fusion step counts {gens:?}/{fusion}"));
        }
        let pool_sizes = (t.pools.enhanced.len(), t.pools.novel.len());
        if r.outer_loop <= n_nfg && pool_sizes != (0, 0) {
            return Err(format!("loop {loops}: pools {pool_sizes:?} before the NFG start"));
        }
    }
    let grown = t.pools.enhanced.len() + t.pools.novel.len();
    check(
        grown > 0,
        format!(
            "8 loops: 5 critic updates and 1 generator/fusion update per loop (Adam counters {:?}); pools empty through loop {n_nfg}, {grown} entries after",
            t.optimizer_steps()
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn criterion_8() -> Outcome {
    let bundle = default_bundle(1);
    let cfg = TrainConfig { steps: 12, seed: 3, ..TrainConfig::default() };
    let run = |cfg: &TrainConfig| {
        let mut t = Trainer::new(cfg.clone(), &bundle).unwrap();
        t.run().unwrap();
        t
    };
    let a = run(&cfg);
    let b = run(&cfg);
    let (ha, hb) = (sha256_hex(a.report.to_csv(false).as_bytes()), sha256_hex(b.report.to_csv(false).as_bytes()));
    if ha != hb {
        return Err(format!("report hashes differ: {ha} vs {hb}"));
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ckpt.json");
    let mut first = Trainer::new(cfg.clone(), &bundle).map_err(|e| e.to_string())?;
    first.run_for(6).map_err(|e| e.to_string())?;
    first.checkpoint().save(&path).map_err(|e| e.to_string())?;
    drop(first);
    let ckpt = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::resume(&ckpt, &bundle).map_err(|e| e.to_string())?;
    resumed.run().map_err(|e| e.to_string())?;

    let eval_cfg = EvalConfig { seed: 3, ..EvalConfig::default() };
    let ma = evaluate(&a.model, &bundle, &eval_cfg).map_err(|e| e.to_string())?.metrics;
    let mr = evaluate(&resumed.model, &bundle, &eval_cfg).map_err(|e| e.to_string())?.metrics;
    let (ga, gr) = (ma.gzsl.unwrap(), mr.gzsl.unwrap());
    let diffs = [
        (ma.top1_unseen - mr.top1_unseen).abs(),
        (ga.seen - gr.seen).abs(),
        (ga.unseen - gr.unseen).abs(),
        (ga.h - gr.h).abs(),
        (ga.ausuc - gr.ausuc).abs(),
    ];
    let worst = diffs.iter().cloned().fold(0.0, f64::max);
    let param_diff = a
        .model
        .named_params()
        .iter()
        .zip(resumed.model.named_params())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    let csv_same = a.report.to_csv(false) == resumed.report.to_csv(false);
    check(
        worst <= 1e-9 && csv_same,
        format!(
            "report sha256 {} on both runs; split run (6 + 6 via checkpoint) vs straight: max metric diff {worst:e}, max parameter diff {param_diff:e}, reports equal: {csv_same}",
            &ha[..16]
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Outcome {
    let bundle = default_bundle(1);
    let audited = AuditedBundle::new(&bundle);
    let cfg = TrainConfig { steps: 10, seed: 9, ..TrainConfig::default() };
    let holdout = cfg.holdout;
    let mut t = Trainer::new(cfg, &audited).map_err(|e| e.to_string())?;
    t.run().map_err(|e| e.to_string())?;
    let train_reads = audited.visual_reads();
    let unseen_in_training = audited.unseen_visual_reads();
    let train_ids: std::collections::BTreeSet<usize> = t.data().train_ids.iter().copied().collect();
    let only_train = train_reads.is_subset(&train_ids);

    let checkpoint = t.checkpoint();
    let resumed = Trainer::resume(&checkpoint, &audited).map_err(|e| e.to_string())?;
    drop(resumed);
    let unseen_after_resume = audited.unseen_visual_reads();

    audited.reset();
    let unseen = bundle.splits.unseen.clone();
    prototypes_for_species(&t.model, &audited, &unseen, 60, 1).map_err(|e| e.to_string())?;
    let proto_reads = audited.visual_reads().len();

    // Positive control: evaluation reads unseen test visuals, and the wrapper sees them.
    evaluate(&t.model, &audited, &EvalConfig { mode: EvalMode::Zsl, holdout, ..EvalConfig::default() })
        .map_err(|e| e.to_string())?;
    let control = audited.unseen_visual_reads().len();
    let expected_control = audited.unseen_sample_ids().len();

    check(
        unseen_in_training.is_empty()
            && unseen_after_resume.is_empty()
            && only_train
            && proto_reads == 0
            && control == expected_control,
        format!(
            "training read {} visuals, {} unseen, all from the training split: {only_train}; resume read {} unseen; prototype synthesis read {proto_reads}; control: evaluation read {control}/{expected_control} unseen visuals",
            train_reads.len(),
            unseen_in_training.len(),
            unseen_after_resume.len()
        ),
    )
}
