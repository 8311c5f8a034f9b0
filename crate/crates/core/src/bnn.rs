//! Fully connected Bayesian network with per-layer slope scales, its priors,
//! and the mean-field Gaussian family over the pre-last-layer parameters.
//!
//! Hidden layer `k` computes `z_k = σ(s_k (h_{k−1}^{−1/2} W_{k−1} z_{k−1} + b_{k−1}))`
//! and the head is `h_ℓ^{−1/2} W_ℓ z_ℓ + b_ℓ`. Rows of an input batch are
//! processed together, so weights are stored input-major (`[h_{k−1}, h_k]`)
//! and a batch `X: [n, m]` flows as `X W + b`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dist::{self, LN_2PI};
use crate::error::{Error, Result};
use crate::ndiff::{Array, Graph, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

pub const SCALE_PRIOR_SHAPE: f64 = 2.0;
pub const SCALE_PRIOR_RATE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply<'g>(self, v: &Var<'g>) -> Var<'g> {
        match self {
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize, activation: Activation) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::Contract("a network needs at least one hidden layer".into()));
        }
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::Contract(format!(
                "all widths must be positive (input {input_dim}, hidden {hidden:?}, output {output_dim})"
            )));
        }
        Ok(NetworkSpec {
            input_dim,
            hidden,
            output_dim,
            activation,
        })
    }

    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    /// Width `h_ℓ` of the last hidden layer.
    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("validated")
    }

    fn fan_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden[layer - 1]
        }
    }

    /// Shapes of the Φ blocks in storage order: per hidden layer, the
    /// weight, the bias row, then the log-scale.
    pub fn phi_shapes(&self) -> Vec<(BlockKind, Vec<usize>)> {
        let mut out = Vec::with_capacity(3 * self.depth());
        for k in 0..self.depth() {
            out.push((BlockKind::Weight, vec![self.fan_in(k), self.hidden[k]]));
            out.push((BlockKind::Bias, vec![1, self.hidden[k]]));
            out.push((BlockKind::LogScale, vec![]));
        }
        out
    }

    pub fn phi_len(&self) -> usize {
        self.phi_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Weight,
    Bias,
    LogScale,
}

/// One draw of Φ as graph nodes. `scales` are in natural (positive) space.
#[derive(Clone, Debug)]
pub struct Phi<'g> {
    pub weights: Vec<Var<'g>>,
    pub biases: Vec<Var<'g>>,
    pub scales: Vec<Var<'g>>,
}

impl<'g> Phi<'g> {
    /// Wraps fixed values as constants of `graph`.
    pub fn constant(graph: &'g Graph, weights: &[Array], biases: &[Array], scales: &[f64]) -> Self {
        Phi {
            weights: weights.iter().map(|w| graph.constant(w.clone())).collect(),
            biases: biases.iter().map(|b| graph.constant(b.clone())).collect(),
            scales: scales.iter().map(|s| graph.scalar(*s)).collect(),
        }
    }

    fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let l = spec.depth();
        if self.weights.len() != l || self.biases.len() != l || self.scales.len() != l {
            return Err(Error::dim("Phi", format!("expected {l} layers")));
        }
        for k in 0..l {
            let want = [spec.fan_in(k), spec.hidden[k]];
            if self.weights[k].shape() != want {
                return Err(Error::dim(
                    "Phi",
                    format!("weight {k} has shape {:?}, expected {want:?}", self.weights[k].shape()),
                ));
            }
            if self.biases[k].value().len() != spec.hidden[k] {
                return Err(Error::dim("Phi", format!("bias {k} has the wrong length")));
            }
        }
        Ok(())
    }
}

/// Last hidden layer activations `z_ℓ` for every row of `x: [n, m]`.
pub fn features<'g>(spec: &NetworkSpec, phi: &Phi<'g>, x: &Var<'g>) -> Result<Var<'g>> {
    phi.check(spec)?;
    if x.cols() != spec.input_dim || !x.value().is_matrix() {
        return Err(Error::dim(
            "features",
            format!("input {:?} does not have {} columns", x.shape(), spec.input_dim),
        ));
    }
    let mut z = *x;
    for k in 0..spec.depth() {
        let pre = z
            .matmul(&phi.weights[k])?
            .scale(1.0 / (spec.fan_in(k) as f64).sqrt())
            .add(&phi.biases[k].reshape(&[1, spec.hidden[k]])?)?;
        z = spec.activation.apply(&pre.mul(&phi.scales[k])?);
    }
    Ok(z)
}

/// Network output given Φ and an explicit last layer `w: [h_ℓ, k]`, `b: [1, k]`.
pub fn output<'g>(spec: &NetworkSpec, phi: &Phi<'g>, w: &Var<'g>, b: &Var<'g>, x: &Var<'g>) -> Result<Var<'g>> {
    if w.shape() != [spec.feature_dim(), spec.output_dim] || b.value().len() != spec.output_dim {
        return Err(Error::dim("output", "last layer does not match the network shape"));
    }
    let z = features(spec, phi, x)?;
    z.matmul(w)?
        .scale(1.0 / (spec.feature_dim() as f64).sqrt())
        .add(&b.reshape(&[1, spec.output_dim])?)
}

/// `log p(Φ)`: standard normal on weights and biases, Gamma(2, 1) on each scale.
pub fn prior_logdensity<'g>(phi: &Phi<'g>, graph: &'g Graph) -> Result<Var<'g>> {
    let mut total = graph.scalar(0.0);
    for v in phi.weights.iter().chain(&phi.biases) {
        let n = v.value().len() as f64;
        total = total.add(&v.square().sum().scale(-0.5).add_scalar(-0.5 * LN_2PI * n))?;
    }
    for s in &phi.scales {
        if !(s.item() > 0.0) {
            return Err(Error::Support {
                dist: "Gamma",
                detail: format!("scale {} is not positive", s.item()),
            });
        }
        total = total.add(&dist::gamma_logpdf(s, SCALE_PRIOR_SHAPE, SCALE_PRIOR_RATE)?)?;
    }
    Ok(total)
}

/// Draws Φ from its prior.
pub fn prior_sample<'g, R: Rng + ?Sized>(spec: &NetworkSpec, graph: &'g Graph, rng: &mut R) -> Phi<'g> {
    let gamma = dist::GammaParams::new(SCALE_PRIOR_SHAPE, SCALE_PRIOR_RATE).expect("constants");
    let mut phi = Phi {
        weights: vec![],
        biases: vec![],
        scales: vec![],
    };
    for (kind, shape) in spec.phi_shapes() {
        match kind {
            BlockKind::Weight => phi.weights.push(graph.constant(dist::standard_normal(rng, &shape))),
            BlockKind::Bias => phi.biases.push(graph.constant(dist::standard_normal(rng, &shape))),
            BlockKind::LogScale => phi.scales.push(graph.scalar(gamma.sample(rng))),
        }
    }
    phi
}

/// Variational parameters for one Φ block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    pub mean: Array,
    pub log_scale: Array,
}

/// Independent Gaussians over every entry of Φ, with the slope scales in log space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldState {
    pub blocks: Vec<Block>,
}

pub const INIT_MEAN_SD: f64 = 0.1;
pub const INIT_SCALE: f64 = 0.05;

impl MeanFieldState {
    /// Means drawn from `N(0, 0.1²)`, every scale `0.05`.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_MEAN_SD).expect("constants");
        let blocks = spec
            .phi_shapes()
            .into_iter()
            .map(|(kind, shape)| {
                let n: usize = shape.iter().product();
                let mean =
                    Array::new(shape.clone(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape product");
                Block {
                    kind,
                    mean,
                    log_scale: Array::full(&shape, INIT_SCALE.ln()),
                }
            })
            .collect();
        MeanFieldState { blocks }
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes = spec.phi_shapes();
        if shapes.len() != self.blocks.len() {
            return Err(Error::Schema(format!(
                "mean-field state has {} blocks, network needs {}",
                self.blocks.len(),
                shapes.len()
            )));
        }
        for (i, ((kind, shape), b)) in shapes.iter().zip(&self.blocks).enumerate() {
            if *kind != b.kind || b.mean.shape() != shape.as_slice() || b.log_scale.shape() != shape.as_slice() {
                return Err(Error::Schema(format!("block {i} does not match the network")));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| 2 * b.mean.len()).sum()
    }

    /// Registers the variational parameters on `graph`; `trainable` decides
    /// whether they are gradient leaves.
    pub fn register<'g>(&self, graph: &'g Graph, trainable: bool) -> VariationalVars<'g> {
        let leaf = |a: &Array| {
            if trainable {
                graph.param(a.clone())
            } else {
                graph.constant(a.clone())
            }
        };
        VariationalVars {
            kinds: self.blocks.iter().map(|b| b.kind).collect(),
            means: self.blocks.iter().map(|b| leaf(&b.mean)).collect(),
            log_scales: self.blocks.iter().map(|b| leaf(&b.log_scale)).collect(),
        }
    }

    /// Φ at the variational mean (scales `exp(mean)`), as plain arrays.
    pub fn mean_phi(&self) -> (Vec<Array>, Vec<Array>, Vec<f64>) {
        let (mut w, mut b, mut s) = (vec![], vec![], vec![]);
        for blk in &self.blocks {
            match blk.kind {
                BlockKind::Weight => w.push(blk.mean.clone()),
                BlockKind::Bias => b.push(blk.mean.clone()),
                BlockKind::LogScale => s.push(blk.mean.item().exp()),
            }
        }
        (w, b, s)
    }
}

/// Graph handles for a [`MeanFieldState`].
#[derive(Clone, Debug)]
pub struct VariationalVars<'g> {
    pub kinds: Vec<BlockKind>,
    pub means: Vec<Var<'g>>,
    pub log_scales: Vec<Var<'g>>,
}

/// Pathwise draw `u = μ + e^{log σ} ε` with `s = exp(u)` for the scale
/// blocks. The returned `log q` is the density of the draw in s-space, i.e.
/// the Gaussian log-density of `u` minus `u` for every scale entry.
pub fn mf_sample<'g, R: Rng + ?Sized>(vars: &VariationalVars<'g>, rng: &mut R) -> Result<(Phi<'g>, Var<'g>)> {
    let graph = vars.means[0].graph();
    let mut phi = Phi {
        weights: vec![],
        biases: vec![],
        scales: vec![],
    };
    let mut log_q = graph.scalar(0.0);
    for ((kind, mean), log_scale) in vars.kinds.iter().zip(&vars.means).zip(&vars.log_scales) {
        let eps = dist::standard_normal(rng, &mean.shape());
        let u = mean.add(&log_scale.exp().mul(&graph.constant(eps.clone()))?)?;
        // log N(u; μ, σ) = −ε²/2 − log σ − log(2π)/2; the quadratic term has
        // zero pathwise derivative, so ε enters as a constant.
        let n = eps.len() as f64;
        let quad = -0.5 * eps.data().iter().map(|e| e * e).sum::<f64>() - 0.5 * LN_2PI * n;
        let lq = log_scale.sum().neg().add_scalar(quad);
        log_q = log_q.add(&lq)?;
        match kind {
            BlockKind::Weight => phi.weights.push(u),
            BlockKind::Bias => phi.biases.push(u),
            BlockKind::LogScale => {
                log_q = log_q.sub(&u.sum())?;
                phi.scales.push(u.exp());
            }
        }
    }
    Ok((phi, log_q))
}

/// Entropy of the unconstrained Gaussian family, `Σ (log σ + ½ log 2πe)`.
pub fn mf_entropy<'g>(vars: &VariationalVars<'g>) -> Result<Var<'g>> {
    let graph = vars.means[0].graph();
    let mut total = graph.scalar(0.0);
    for ls in &vars.log_scales {
        let n = ls.value().len() as f64;
        total = total.add(&ls.sum().add_scalar(0.5 * (1.0 + LN_2PI) * n))?;
    }
    Ok(total)
}

/// Versioned on-disk form of a network and its variational state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub version: u32,
    pub spec: NetworkSpec,
    pub state: MeanFieldState,
}

impl NetworkCheckpoint {
    pub fn new(spec: NetworkSpec, state: MeanFieldState) -> Self {
        NetworkCheckpoint {
            version: CHECKPOINT_VERSION,
            spec,
            state,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: NetworkCheckpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.state.validate(&ck.spec)?;
        Ok(ck)
    }
}
