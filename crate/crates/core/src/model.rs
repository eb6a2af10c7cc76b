//! Generators, discriminator, adaptive fusion and their losses.
//!
//! Networks own their parameters as [`Tensor`]s. Each forward pass binds them
//! onto a [`Graph`] (trainable or frozen) and the caller pulls gradients back
//! with `absorb_grads` after calling backward.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Level, VisualCenters};
use crate::error::{ModelError, TensorError};
use crate::tensor::{Graph, Tensor, Var};

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Learned per-level importance weights.
    Adaptive,
    /// Plain average of the three level features.
    Summing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub visual_dim: usize,
    pub semantic_dim: usize,
    pub seen_classes: usize,
    pub noise_dim: usize,
    pub gen_hidden: usize,
    pub disc_hidden: [usize; 2],
    pub fusion_hidden: usize,
    pub leaky_slope: f64,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            visual_dim: 32,
            semantic_dim: 16,
            seen_classes: 30,
            noise_dim: 32,
            gen_hidden: 256,
            disc_hidden: [256, 128],
            fusion_hidden: 64,
            leaky_slope: 0.2,
            fusion: FusionMode::Adaptive,
        }
    }
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        Self {
            weight: Tensor::parameter(vec![fan_in, fan_out], w).expect("non-empty layer"),
            bias: Tensor::parameter(vec![1, fan_out], b).expect("non-empty layer"),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::parameter(vec![fan_in, fan_out], vec![0.0; fan_in * fan_out]).expect("non-empty layer"),
            bias: Tensor::parameter(vec![1, fan_out], vec![0.0; fan_out]).expect("non-empty layer"),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> std::result::Result<BoundLinear, TensorError> {
        let bind = |g: &mut Graph, t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
        Ok(BoundLinear { weight: bind(g, &self.weight)?, bias: bind(g, &self.bias)? })
    }

    pub fn absorb_grads(&mut self, g: &Graph, b: &BoundLinear) -> std::result::Result<(), TensorError> {
        if let Some(gw) = g.grad(b.weight) {
            self.weight.accumulate_grad(gw)?;
        }
        if let Some(gb) = g.grad(b.bias) {
            self.bias.accumulate_grad(gb)?;
        }
        Ok(())
    }

    fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> std::result::Result<Var, TensorError> {
        let y = g.matmul(x, self.weight)?;
        g.add(y, self.bias)
    }
}

/// One knowledge-level generator: `(t ⊕ z) → hidden (leaky-relu) → visual`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    pub level: Level,
    pub noise_dim: usize,
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGenerator {
    hidden: BoundLinear,
    output: BoundLinear,
    slope: f64,
}

impl GeneratorNet {
    pub fn init<R: Rng + ?Sized>(level: Level, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            level,
            noise_dim: cfg.noise_dim,
            hidden: Linear::init(cfg.semantic_dim + cfg.noise_dim, cfg.gen_hidden, rng),
            output: Linear::init(cfg.gen_hidden, cfg.visual_dim, rng),
        }
    }

    pub fn semantic_dim(&self) -> usize {
        self.hidden.fan_in() - self.noise_dim
    }

    pub fn visual_dim(&self) -> usize {
        self.output.fan_out()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, slope: f64) -> std::result::Result<BoundGenerator, TensorError> {
        Ok(BoundGenerator { hidden: self.hidden.bind(g, trainable)?, output: self.output.bind(g, trainable)?, slope })
    }

    pub fn absorb_grads(&mut self, g: &Graph, b: &BoundGenerator) -> std::result::Result<(), TensorError> {
        self.hidden.absorb_grads(g, &b.hidden)?;
        self.output.absorb_grads(g, &b.output)
    }

    /// Generator input `[t | z]`, checking both dimensions.
    pub fn input(&self, t: &Tensor, z: &Tensor) -> Result<Tensor> {
        if t.cols() != self.semantic_dim() {
            return Err(ModelError::Dim { what: "semantic", expected: self.semantic_dim(), got: t.cols() });
        }
        if z.cols() != self.noise_dim {
            return Err(ModelError::Dim { what: "noise", expected: self.noise_dim, got: z.cols() });
        }
        if t.rows() != z.rows() {
            return Err(ModelError::Dim { what: "noise rows", expected: t.rows(), got: z.rows() });
        }
        concat_cols(t, z)
    }

    /// Inference-only forward pass.
    pub fn generate(&self, t: &Tensor, z: &Tensor, slope: f64) -> Result<Tensor> {
        let input = self.input(t, z)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, slope)?;
        let x = g.constant(&input)?;
        let y = b.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.hidden.params().into_iter().chain(self.output.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let Self { hidden, output, .. } = self;
        hidden.params_mut().into_iter().chain(output.params_mut()).collect()
    }
}

impl BoundGenerator {
    pub fn forward(&self, g: &mut Graph, input: Var) -> std::result::Result<Var, TensorError> {
        let h = self.hidden.forward(g, input)?;
        let h = g.leaky_relu(h, self.slope)?;
        self.output.forward(g, h)
    }
}

/// Shared two-layer trunk with a realness head and a seen-class head.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet {
    pub trunk1: Linear,
    pub trunk2: Linear,
    pub realness: Linear,
    pub classes: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDiscriminator {
    trunk1: BoundLinear,
    trunk2: BoundLinear,
    realness: BoundLinear,
    classes: BoundLinear,
    slope: f64,
}

impl DiscriminatorNet {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let [h1, h2] = cfg.disc_hidden;
        Self {
            trunk1: Linear::init(cfg.visual_dim, h1, rng),
            trunk2: Linear::init(h1, h2, rng),
            realness: Linear::init(h2, 1, rng),
            classes: Linear::init(h2, cfg.seen_classes, rng),
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes.fan_out()
    }

    pub fn visual_dim(&self) -> usize {
        self.trunk1.fan_in()
    }

    pub fn bind(
        &self,
        g: &mut Graph,
        trainable: bool,
        slope: f64,
    ) -> std::result::Result<BoundDiscriminator, TensorError> {
        Ok(BoundDiscriminator {
            trunk1: self.trunk1.bind(g, trainable)?,
            trunk2: self.trunk2.bind(g, trainable)?,
            realness: self.realness.bind(g, trainable)?,
            classes: self.classes.bind(g, trainable)?,
            slope,
        })
    }

    pub fn absorb_grads(&mut self, g: &Graph, b: &BoundDiscriminator) -> std::result::Result<(), TensorError> {
        self.trunk1.absorb_grads(g, &b.trunk1)?;
        self.trunk2.absorb_grads(g, &b.trunk2)?;
        self.realness.absorb_grads(g, &b.realness)?;
        self.classes.absorb_grads(g, &b.classes)
    }

    /// Inference-only `(realness [n,1], logits [n,K])`.
    pub fn discriminate(&self, x: &Tensor, slope: f64) -> Result<(Tensor, Tensor)> {
        if x.cols() != self.visual_dim() {
            return Err(ModelError::Dim { what: "visual", expected: self.visual_dim(), got: x.cols() });
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, slope)?;
        let xv = g.constant(x)?;
        let (r, l) = b.forward(&mut g, xv)?;
        Ok((g.value(r).clone(), g.value(l).clone()))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        [&self.trunk1, &self.trunk2, &self.realness, &self.classes].into_iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let Self { trunk1, trunk2, realness, classes } = self;
        [trunk1, trunk2, realness, classes].into_iter().flat_map(|l| l.params_mut()).collect()
    }

    /// Parameters under the Lipschitz constraint: the trunk and the realness head.
    pub fn critic_params_mut(&mut self) -> Vec<&mut Tensor> {
        let Self { trunk1, trunk2, realness, .. } = self;
        [trunk1, trunk2, realness].into_iter().flat_map(|l| l.params_mut()).collect()
    }
}

impl BoundDiscriminator {
    pub fn forward(&self, g: &mut Graph, x: Var) -> std::result::Result<(Var, Var), TensorError> {
        let h = self.trunk1.forward(g, x)?;
        let h = g.leaky_relu(h, self.slope)?;
        let h = self.trunk2.forward(g, h)?;
        let h = g.leaky_relu(h, self.slope)?;
        let realness = self.realness.forward(g, h)?;
        let logits = self.classes.forward(g, h)?;
        Ok((realness, logits))
    }
}

/// Per-level scalar scoring network: `sigmoid(W2 · leaky(W1 x + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBranch {
    pub hidden: Linear,
    pub score: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNet {
    /// Indexed by [`Level::index`].
    pub branches: [FusionBranch; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct BoundFusion {
    branches: [(BoundLinear, BoundLinear); 3],
    slope: f64,
}

/// Importance weights of one row, `(family, genus, species)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub family: f64,
    pub genus: f64,
    pub species: f64,
}

impl FusionWeights {
    pub const UNIFORM: FusionWeights = FusionWeights { family: 1.0 / 3.0, genus: 1.0 / 3.0, species: 1.0 / 3.0 };

    /// Normalizes three positive raw scores by their sum.
    pub fn from_scores(scores: [f64; 3]) -> Self {
        let total = scores[0] + scores[1] + scores[2];
        Self { family: scores[0] / total, genus: scores[1] / total, species: scores[2] / total }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.family, self.genus, self.species]
    }

    pub fn sum(&self) -> f64 {
        self.family + self.genus + self.species
    }
}

impl FusionNet {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut branch = || FusionBranch {
            hidden: Linear::init(cfg.visual_dim, cfg.fusion_hidden, rng),
            score: Linear::init(cfg.fusion_hidden, 1, rng),
        };
        Self { branches: [branch(), branch(), branch()] }
    }

    pub fn zeros(visual_dim: usize, hidden: usize) -> Self {
        let branch = || FusionBranch { hidden: Linear::zeros(visual_dim, hidden), score: Linear::zeros(hidden, 1) };
        Self { branches: [branch(), branch(), branch()] }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, slope: f64) -> std::result::Result<BoundFusion, TensorError> {
        let mut bound = Vec::with_capacity(3);
        for b in &self.branches {
            bound.push((b.hidden.bind(g, trainable)?, b.score.bind(g, trainable)?));
        }
        Ok(BoundFusion { branches: [bound[0], bound[1], bound[2]], slope })
    }

    pub fn absorb_grads(&mut self, g: &Graph, b: &BoundFusion) -> std::result::Result<(), TensorError> {
        for (branch, (h, s)) in self.branches.iter_mut().zip(&b.branches) {
            branch.hidden.absorb_grads(g, h)?;
            branch.score.absorb_grads(g, s)?;
        }
        Ok(())
    }

    /// Inference-only adaptive fusion of three `[n, V]` batches ordered
    /// family, genus, species.
    pub fn fuse(&self, xs: [&Tensor; 3], slope: f64) -> Result<(Tensor, Vec<FusionWeights>)> {
        check_same_shape(xs)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, slope)?;
        let vars = [g.constant(xs[0])?, g.constant(xs[1])?, g.constant(xs[2])?];
        let (fused, rho) = b.forward(&mut g, vars)?;
        let n = xs[0].rows();
        let weights = (0..n)
            .map(|i| FusionWeights {
                family: g.value(rho[0]).data()[i],
                genus: g.value(rho[1]).data()[i],
                species: g.value(rho[2]).data()[i],
            })
            .collect();
        Ok((g.value(fused).clone(), weights))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.branches.iter().flat_map(|b| b.hidden.params().into_iter().chain(b.score.params())).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.branches
            .iter_mut()
            .flat_map(|b| {
                let FusionBranch { hidden, score } = b;
                hidden.params_mut().into_iter().chain(score.params_mut())
            })
            .collect()
    }
}

impl BoundFusion {
    /// Raw per-level scores `s`, each `[n, 1]` in (0, 1).
    pub fn scores(&self, g: &mut Graph, xs: [Var; 3]) -> std::result::Result<[Var; 3], TensorError> {
        let mut out = [xs[0]; 3];
        for (k, (hidden, score)) in self.branches.iter().enumerate() {
            let h = hidden.forward(g, xs[k])?;
            let h = g.leaky_relu(h, self.slope)?;
            let s = score.forward(g, h)?;
            out[k] = g.sigmoid(s)?;
        }
        Ok(out)
    }

    /// `(fused [n,V], ρ per level [n,1])`.
    pub fn forward(&self, g: &mut Graph, xs: [Var; 3]) -> std::result::Result<(Var, [Var; 3]), TensorError> {
        let s = self.scores(g, xs)?;
        let total = g.add(s[0], s[1])?;
        let total = g.add(total, s[2])?;
        let rho = [g.div(s[0], total)?, g.div(s[1], total)?, g.div(s[2], total)?];
        let fused = weighted_sum(g, xs, rho)?;
        Ok((fused, rho))
    }
}

/// `Σ_l ρ_l ⊙ x_l`, with each `ρ_l` an `[n, 1]` column.
pub fn weighted_sum(g: &mut Graph, xs: [Var; 3], rho: [Var; 3]) -> std::result::Result<Var, TensorError> {
    let a = g.mul(xs[0], rho[0])?;
    let b = g.mul(xs[1], rho[1])?;
    let c = g.mul(xs[2], rho[2])?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Summing baseline: the average of the three level features.
///
/// Computed as the same weighted sum as adaptive fusion with every weight
/// 1/3, so both paths agree bit for bit when the learned weights are uniform.
pub fn fuse_baseline_graph(g: &mut Graph, xs: [Var; 3]) -> std::result::Result<Var, TensorError> {
    let n = g.value(xs[0]).rows();
    let third = g.constant(&Tensor::new(vec![n, 1], vec![1.0 / 3.0; n])?)?;
    weighted_sum(g, xs, [third; 3])
}

pub fn fuse_baseline(xs: [&Tensor; 3]) -> Result<Tensor> {
    check_same_shape(xs)?;
    let mut g = Graph::new();
    let vars = [g.constant(xs[0])?, g.constant(xs[1])?, g.constant(xs[2])?];
    let out = fuse_baseline_graph(&mut g, vars)?;
    Ok(g.value(out).clone())
}

fn check_same_shape(xs: [&Tensor; 3]) -> Result<()> {
    for x in &xs[1..] {
        if x.shape() != xs[0].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "fuse",
                lhs: xs[0].shape().to_vec(),
                rhs: x.shape().to_vec(),
            }
            .into());
        }
    }
    Ok(())
}

pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(ModelError::Dim { what: "concat rows", expected: a.rows(), got: b.rows() });
    }
    let (ca, cb) = (a.cols(), b.cols());
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.rows() {
        data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Ok(Tensor::new(vec![a.rows(), ca + cb], data)?)
}

/// One noise matrix per generator, drawn row by row (family, genus, species
/// for row 0, then row 1, ...) so a batch of `n` is a prefix of a batch of `2n`.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, noise_dim: usize) -> [Tensor; 3] {
    let mut bufs = [
        Vec::with_capacity(rows * noise_dim),
        Vec::with_capacity(rows * noise_dim),
        Vec::with_capacity(rows * noise_dim),
    ];
    for _ in 0..rows {
        for buf in bufs.iter_mut() {
            for _ in 0..noise_dim {
                let z: f64 = StandardNormal.sample(rng);
                buf.push(z);
            }
        }
    }
    bufs.map(|b| Tensor::new(vec![rows, noise_dim], b).expect("noise shape"))
}

/// Rows of `[n, K]` one-hot targets.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(ModelError::Dim { what: "label", expected: classes, got: l });
        }
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}

/// Stacks the center of each label's class into an `[n, V]` target matrix.
pub fn center_rows(centers: &VisualCenters, labels: &[usize]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(labels.len());
    for &l in labels {
        rows.push(centers.get(l).ok_or(ModelError::MissingCenter { level: centers.level.name(), class: l })?);
    }
    Ok(Tensor::from_rows(&rows)?)
}

/// The full network: three generators, a discriminator and the fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct MkfnetModel {
    pub config: ModelConfig,
    /// Indexed by [`Level::index`].
    pub generators: [GeneratorNet; 3],
    pub discriminator: DiscriminatorNet,
    pub fusion: FusionNet,
}

/// Parameters of one forward pass bound onto a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundModel {
    pub generators: [BoundGenerator; 3],
    pub discriminator: BoundDiscriminator,
    pub fusion: BoundFusion,
}

/// Which parameter groups receive gradients in a bound forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Trainable {
    pub generators: bool,
    pub discriminator: bool,
    pub fusion: bool,
}

impl MkfnetModel {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let generators = Level::ALL.map(|l| GeneratorNet::init(l, &config, rng));
        let discriminator = DiscriminatorNet::init(&config, rng);
        let fusion = FusionNet::init(&config, rng);
        Self { config, generators, discriminator, fusion }
    }

    pub fn generator(&self, level: Level) -> &GeneratorNet {
        &self.generators[level.index()]
    }

    pub fn slope(&self) -> f64 {
        self.config.leaky_slope
    }

    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> std::result::Result<BoundModel, TensorError> {
        let s = self.slope();
        let gens = [
            self.generators[0].bind(g, trainable.generators, s)?,
            self.generators[1].bind(g, trainable.generators, s)?,
            self.generators[2].bind(g, trainable.generators, s)?,
        ];
        Ok(BoundModel {
            generators: gens,
            discriminator: self.discriminator.bind(g, trainable.discriminator, s)?,
            fusion: self.fusion.bind(g, trainable.fusion, s)?,
        })
    }

    pub fn absorb_grads(&mut self, g: &Graph, b: &BoundModel) -> std::result::Result<(), TensorError> {
        for (gen, bg) in self.generators.iter_mut().zip(&b.generators) {
            gen.absorb_grads(g, bg)?;
        }
        self.discriminator.absorb_grads(g, &b.discriminator)?;
        self.fusion.absorb_grads(g, &b.fusion)
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Fuses three level features on the graph with the configured mode.
    pub fn fuse_on(&self, g: &mut Graph, b: &BoundModel, xs: [Var; 3]) -> std::result::Result<Var, TensorError> {
        match self.config.fusion {
            FusionMode::Adaptive => Ok(b.fusion.forward(g, xs)?.0),
            FusionMode::Summing => fuse_baseline_graph(g, xs),
        }
    }

    /// Level features and fused output for semantics `t` with fresh noise.
    pub fn forward_levels<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        b: &BoundModel,
        t: &Tensor,
        rng: &mut R,
    ) -> Result<[Var; 3]> {
        let z = sample_noise(rng, t.rows(), self.config.noise_dim);
        let mut xs = Vec::with_capacity(3);
        for (k, gen) in self.generators.iter().enumerate() {
            let input = g.constant(&gen.input(t, &z[k])?)?;
            xs.push(b.generators[k].forward(g, input)?);
        }
        Ok([xs[0], xs[1], xs[2]])
    }

    /// Inference: fused visual features for each semantic row, with fresh noise.
    pub fn synthesize<R: Rng + ?Sized>(&self, t: &Tensor, rng: &mut R) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::default())?;
        let xs = self.forward_levels(&mut g, &b, t, rng)?;
        let fused = self.fuse_on(&mut g, &b, xs)?;
        Ok(g.value(fused).clone())
    }

    /// `(name, parameter)` pairs in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for gen in &self.generators {
            let l = gen.level.name();
            out.push((format!("gen/{l}/hidden/weight"), &gen.hidden.weight));
            out.push((format!("gen/{l}/hidden/bias"), &gen.hidden.bias));
            out.push((format!("gen/{l}/output/weight"), &gen.output.weight));
            out.push((format!("gen/{l}/output/bias"), &gen.output.bias));
        }
        let d = &self.discriminator;
        for (n, layer) in
            [("trunk1", &d.trunk1), ("trunk2", &d.trunk2), ("realness", &d.realness), ("classes", &d.classes)]
        {
            out.push((format!("disc/{n}/weight"), &layer.weight));
            out.push((format!("disc/{n}/bias"), &layer.bias));
        }
        for (level, b) in Level::ALL.iter().zip(&self.fusion.branches) {
            let l = level.name();
            out.push((format!("fusion/{l}/hidden/weight"), &b.hidden.weight));
            out.push((format!("fusion/{l}/hidden/bias"), &b.hidden.bias));
            out.push((format!("fusion/{l}/score/weight"), &b.score.weight));
            out.push((format!("fusion/{l}/score/bias"), &b.score.bias));
        }
        out
    }

    /// Mutable parameters in the same order as [`MkfnetModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let Self { generators, discriminator, fusion, .. } = self;
        let mut out: Vec<&mut Tensor> = Vec::new();
        for gen in generators.iter_mut() {
            out.extend(gen.params_mut());
        }
        out.extend(discriminator.params_mut());
        out.extend(fusion.params_mut());
        out
    }
}

/// Terms of a generator loss, each a scalar node.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adversarial: Var,
    pub classification: Var,
    pub knowledge: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorLoss {
    pub total: Var,
    pub wasserstein: Var,
    pub classification: Var,
}

/// Knowledge regularizer: mean over rows of `‖generated − center‖²`.
pub fn loss_kr(g: &mut Graph, generated: Var, centers: &Tensor) -> std::result::Result<Var, TensorError> {
    let c = g.constant(centers)?;
    let d = g.l2_sq_dist(generated, c)?;
    g.mean(d)
}

/// Generator loss of one level: `−mean realness + CE(class head, species) + L_KR`.
pub fn loss_generator(
    g: &mut Graph,
    disc: &BoundDiscriminator,
    generated: Var,
    species_targets: &Tensor,
    centers: &Tensor,
) -> std::result::Result<GeneratorLoss, TensorError> {
    let (realness, logits) = disc.forward(g, generated)?;
    let r = g.mean(realness)?;
    let adversarial = g.scalar_mul(r, -1.0)?;
    let classification = g.cross_entropy(logits, species_targets)?;
    let knowledge = loss_kr(g, generated, centers)?;
    let total = g.add(adversarial, classification)?;
    let total = g.add(total, knowledge)?;
    Ok(GeneratorLoss { total, adversarial, classification, knowledge })
}

/// Critic loss: `mean D(fake) − mean D(real) + CE(class head on real, labels)`.
pub fn loss_discriminator(
    g: &mut Graph,
    disc: &BoundDiscriminator,
    real: Var,
    fake: Var,
    targets: &Tensor,
) -> std::result::Result<DiscriminatorLoss, TensorError> {
    let (r_real, logits_real) = disc.forward(g, real)?;
    let (r_fake, _) = disc.forward(g, fake)?;
    let m_fake = g.mean(r_fake)?;
    let m_real = g.mean(r_real)?;
    let wasserstein = g.sub(m_fake, m_real)?;
    let classification = g.cross_entropy(logits_real, targets)?;
    let total = g.add(wasserstein, classification)?;
    Ok(DiscriminatorLoss { total, wasserstein, classification })
}

/// `−mean realness + CE(class head, targets)` on a batch of generated features.
///
/// This is the supervised adversarial pair shared by the fusion loss and the
/// enhanced-feature regularizer.
pub fn adversarial_classification(
    g: &mut Graph,
    disc: &BoundDiscriminator,
    x: Var,
    targets: &Tensor,
) -> std::result::Result<(Var, Var), TensorError> {
    let (realness, logits) = disc.forward(g, x)?;
    let r = g.mean(realness)?;
    let adv = g.scalar_mul(r, -1.0)?;
    let cls = g.cross_entropy(logits, targets)?;
    Ok((adv, cls))
}

/// Fusion loss: adversarial + classification on fused features, plus the
/// enhanced and novel regularizers when present.
pub fn loss_fusion(
    g: &mut Graph,
    disc: &BoundDiscriminator,
    fused: Var,
    targets: &Tensor,
    enhanced: Option<Var>,
    novel: Option<Var>,
) -> std::result::Result<Var, TensorError> {
    let (adv, cls) = adversarial_classification(g, disc, fused, targets)?;
    let mut total = g.add(adv, cls)?;
    for extra in [enhanced, novel].into_iter().flatten() {
        total = g.add(total, extra)?;
    }
    Ok(total)
}
