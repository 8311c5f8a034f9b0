//! Uni-modal, joint and layered surrogates trained by stochastic variational
//! inference with a collapsed (or conditionally sampled) conjugate last layer.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::bnn::{self, Activation, MeanFieldState, NetworkSpec, VariationalVars};
use crate::conjlayer::{self, ConjugatePrior, MissingMask};
use crate::dist::NigParams;
use crate::error::{Error, Result};
use crate::ndiff::{Array, Graph, Var};

pub const MODEL_VERSION: u32 = 1;

/// Complete observations of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityData {
    pub name: String,
    pub x: Array,
    pub y: Array,
}

impl ModalityData {
    pub fn new(name: impl Into<String>, x: Array, y: Array) -> Result<Self> {
        if x.rows() != y.rows() || !x.is_matrix() || !y.is_matrix() {
            return Err(Error::dim(
                "ModalityData",
                format!("X {:?} vs Y {:?}", x.shape(), y.shape()),
            ));
        }
        Ok(ModalityData {
            name: name.into(),
            x,
            y,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }
}

/// Main modality first, then auxiliaries, all over the same input space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub main: ModalityData,
    pub aux: Vec<ModalityData>,
}

impl TrainingData {
    pub fn input_dim(&self) -> usize {
        self.main.x.cols()
    }

    fn check(&self) -> Result<()> {
        let m = self.input_dim();
        if self.aux.iter().any(|a| a.x.cols() != m) {
            return Err(Error::dim("TrainingData", "modalities disagree on the input dimension"));
        }
        Ok(())
    }
}

/// Rows of all modalities merged on identical inputs, with NaN where a
/// modality is unobserved.
#[derive(Clone, Debug)]
pub struct JointLayout {
    pub x: Array,
    pub y: Array,
    pub mask: MissingMask,
    pub slices: Vec<(usize, usize)>,
}

pub fn joint_layout(data: &TrainingData) -> Result<JointLayout> {
    data.check()?;
    let modalities: Vec<&ModalityData> = std::iter::once(&data.main).chain(&data.aux).collect();
    let mut slices = vec![];
    let mut k = 0;
    for md in &modalities {
        slices.push((k, k + md.y.cols()));
        k += md.y.cols();
    }
    let m = data.input_dim();
    // The j-th occurrence of an input within a modality lands on the j-th
    // merged row for that input, so replicated inputs stay separate rows.
    let mut index: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
    let mut xs: Vec<Vec<f64>> = vec![];
    let mut rows: Vec<Vec<f64>> = vec![];
    for (mi, md) in modalities.iter().enumerate() {
        let (lo, hi) = slices[mi];
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for i in 0..md.n() {
            let key: Vec<u64> = md.x.row_slice(i).iter().map(|v| v.to_bits()).collect();
            let occurrence = seen.entry(key.clone()).or_insert(0);
            let slots = index.entry(key).or_default();
            if *occurrence == slots.len() {
                xs.push(md.x.row_slice(i).to_vec());
                rows.push(vec![f64::NAN; k]);
                slots.push(xs.len() - 1);
            }
            let r = slots[*occurrence];
            *occurrence += 1;
            rows[r][lo..hi].copy_from_slice(md.y.row_slice(i));
        }
    }
    let n = xs.len();
    let x = Array::matrix(n, m, xs.concat())?;
    let y = Array::matrix(n, k, rows.concat())?;
    let mask = MissingMask::from_nan(&y)?;
    Ok(JointLayout { x, y, mask, slices })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Unimodal,
    Joint,
    Layered,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Unimodal => "unimodal",
            ModelKind::Joint => "joint",
            ModelKind::Layered => "layered",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: vec![256, 256],
            activation: Activation::Tanh,
        }
    }
}

/// One network, its variational state and its last-layer prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub spec: NetworkSpec,
    pub state: MeanFieldState,
    pub prior: ConjugatePrior,
}

impl Surrogate {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, arch: &Architecture, rng: &mut R) -> Result<Self> {
        let spec = NetworkSpec::new(input_dim, arch.hidden.clone(), output_dim, arch.activation)?;
        let state = MeanFieldState::init(&spec, rng);
        let prior = ConjugatePrior::default_for(output_dim, spec.feature_dim());
        Ok(Surrogate { spec, state, prior })
    }

    fn design<'g>(&self, phi: &bnn::Phi<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        conjlayer::design_matrix(&bnn::features(&self.spec, phi, x)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelState {
    Unimodal {
        net: Surrogate,
    },
    Joint {
        net: Surrogate,
        column_priors: Vec<NigParams>,
        /// Output column range of each modality, main first.
        slices: Vec<(usize, usize)>,
    },
    Layered {
        aux: Vec<Surrogate>,
        main: Surrogate,
    },
}

impl ModelState {
    pub fn init<R: Rng + ?Sized>(
        kind: ModelKind,
        data: &TrainingData,
        arch: &Architecture,
        rng: &mut R,
    ) -> Result<Self> {
        data.check()?;
        let m = data.input_dim();
        let k_main = data.main.y.cols();
        Ok(match kind {
            ModelKind::Unimodal => ModelState::Unimodal {
                net: Surrogate::new(m, k_main, arch, rng)?,
            },
            ModelKind::Joint => {
                let k: usize = k_main + data.aux.iter().map(|a| a.y.cols()).sum::<usize>();
                let net = Surrogate::new(m, k, arch, rng)?;
                let column_priors = net.prior.column_priors()?;
                let slices = joint_layout(data)?.slices;
                ModelState::Joint {
                    net,
                    column_priors,
                    slices,
                }
            }
            ModelKind::Layered => {
                let aux = data
                    .aux
                    .iter()
                    .map(|a| Surrogate::new(m, a.y.cols(), arch, rng))
                    .collect::<Result<Vec<_>>>()?;
                let extra: usize = data.aux.iter().map(|a| a.y.cols()).sum();
                let main = Surrogate::new(m + extra, k_main, arch, rng)?;
                ModelState::Layered { aux, main }
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelState::Unimodal { .. } => ModelKind::Unimodal,
            ModelState::Joint { .. } => ModelKind::Joint,
            ModelState::Layered { .. } => ModelKind::Layered,
        }
    }

    /// Networks in a fixed order (auxiliaries before the main network).
    pub fn networks(&self) -> Vec<&Surrogate> {
        match self {
            ModelState::Unimodal { net } | ModelState::Joint { net, .. } => vec![net],
            ModelState::Layered { aux, main } => aux.iter().chain(std::iter::once(main)).collect(),
        }
    }

    fn networks_mut(&mut self) -> Vec<&mut Surrogate> {
        match self {
            ModelState::Unimodal { net } | ModelState::Joint { net, .. } => vec![net],
            ModelState::Layered { aux, main } => aux.iter_mut().chain(std::iter::once(main)).collect(),
        }
    }

    pub fn register<'g>(&self, g: &'g Graph, trainable: bool) -> Vec<VariationalVars<'g>> {
        self.networks().iter().map(|n| n.state.register(g, trainable)).collect()
    }
}

/// Data arranged once for repeated ELBO evaluation.
enum Prepared<'d> {
    Plain(&'d TrainingData),
    Joint(JointLayout),
}

fn prepare<'d>(model: &ModelState, data: &'d TrainingData) -> Result<Prepared<'d>> {
    data.check()?;
    Ok(match model {
        ModelState::Joint { .. } => Prepared::Joint(joint_layout(data)?),
        _ => Prepared::Plain(data),
    })
}

fn surrogate_term<'g, R: Rng + ?Sized>(
    net: &Surrogate,
    vars: &VariationalVars<'g>,
    rng: &mut R,
) -> Result<(bnn::Phi<'g>, Var<'g>)> {
    let g = vars.means[0].graph();
    let (phi, _) = bnn::mf_sample(vars, rng)?;
    // −log q is replaced by its closed-form expectation over the Gaussian
    // part plus the exact log-Jacobian of the scale transform; the gradient
    // is unchanged and the estimator loses the χ² noise of −½ε².
    let mut term = bnn::prior_logdensity(&phi, g)?.add(&bnn::mf_entropy(vars)?)?;
    for s in &phi.scales {
        term = term.add(&s.ln().sum())?;
    }
    debug_assert_eq!(phi.weights.len(), net.spec.depth());
    Ok((phi, term))
}

/// One draw of the ELBO estimator as a graph node.
fn elbo_draw<'g, R: Rng + ?Sized>(
    model: &ModelState,
    prepared: &Prepared<'_>,
    vars: &[VariationalVars<'g>],
    rng: &mut R,
) -> Result<Var<'g>> {
    let g = vars[0].means[0].graph();
    match (model, prepared) {
        (ModelState::Unimodal { net }, Prepared::Plain(data)) => {
            let (phi, term) = surrogate_term(net, &vars[0], rng)?;
            let z = net.design(&phi, &g.constant(data.main.x.clone()))?;
            conjlayer::log_marginal_var(&net.prior, &z, &g.constant(data.main.y.clone()))?.add(&term)
        }
        (ModelState::Joint { net, column_priors, .. }, Prepared::Joint(layout)) => {
            let (phi, term) = surrogate_term(net, &vars[0], rng)?;
            let z = net.design(&phi, &g.constant(layout.x.clone()))?;
            if layout.mask.is_complete() {
                return conjlayer::log_marginal_var(&net.prior, &z, &g.constant(layout.y.clone()))?.add(&term);
            }
            let imp = conjlayer::impute_and_update(&net.prior, column_priors, &z, &layout.y, &layout.mask, rng)?;
            let evidence = conjlayer::evidence_from_posterior(&net.prior, &imp.posterior, layout.x.rows())?;
            evidence.add(&term)?.sub(&imp.log_q_miss)
        }
        (ModelState::Layered { aux, main }, Prepared::Plain(data)) => {
            let x_main = g.constant(data.main.x.clone());
            let mut inputs = vec![x_main];
            let mut total = g.scalar(0.0);
            for (i, (net, md)) in aux.iter().zip(&data.aux).enumerate() {
                let (phi, term) = surrogate_term(net, &vars[i], rng)?;
                let n_aux = md.n();
                let both = Var::vcat(&[g.constant(md.x.clone()), x_main])?;
                let z_all = net.design(&phi, &both)?;
                let z = z_all.gather_rows(&(0..n_aux).collect::<Vec<_>>())?;
                let z_main = z_all.gather_rows(&(n_aux..n_aux + data.main.n()).collect::<Vec<_>>())?;
                let y = g.constant(md.y.clone());
                let post = conjlayer::posterior_update_var(&net.prior, &z, &y)?;
                let draw = conjlayer::sample_posterior_var(&post, rng)?;
                let k = net.spec.output_dim;
                let prior_logp = conjlayer::last_layer_logdensity(
                    &draw,
                    net.prior.nu,
                    &g.constant(net.prior.v.clone()),
                    &g.constant(Array::zeros(&[net.prior.p(), k])),
                    &g.constant(net.prior.lambda.clone()),
                )?;
                let q_logp =
                    conjlayer::last_layer_logdensity(&draw, post.nu, &post.v()?, &post.w_hat, &post.lambda()?)?;
                let lik = conjlayer::data_loglik(&z, &y, &draw)?;
                total = total.add(&lik.add(&prior_logp)?.sub(&q_logp)?.add(&term)?)?;
                inputs.push(z_main.matmul(&draw.coef)?);
            }
            let (phi, term) = surrogate_term(main, &vars[aux.len()], rng)?;
            let z = main.design(&phi, &Var::hcat(&inputs)?)?;
            let lm = conjlayer::log_marginal_var(&main.prior, &z, &g.constant(data.main.y.clone()))?;
            total.add(&lm)?.add(&term)
        }
        _ => Err(Error::Contract("prepared data does not match the model kind".into())),
    }
}

fn elbo_mean<'g, R: Rng + ?Sized>(
    model: &ModelState,
    prepared: &Prepared<'_>,
    vars: &[VariationalVars<'g>],
    rng: &mut R,
    n_mc: usize,
) -> Result<Var<'g>> {
    if n_mc == 0 {
        return Err(Error::Contract("n_mc must be positive".into()));
    }
    let mut acc = elbo_draw(model, prepared, vars, rng)?;
    for _ in 1..n_mc {
        acc = acc.add(&elbo_draw(model, prepared, vars, rng)?)?;
    }
    Ok(acc.scale(1.0 / n_mc as f64))
}

/// ELBO estimate and its gradient with respect to every variational
/// parameter, in [`ModelState::networks`] order, as `(mean, log_scale)` per block.
pub fn elbo_with_gradient<R: Rng + ?Sized>(
    model: &ModelState,
    data: &TrainingData,
    rng: &mut R,
    n_mc: usize,
) -> Result<(f64, Vec<Vec<(Array, Array)>>)> {
    let prepared = prepare(model, data)?;
    elbo_grad_prepared(model, &prepared, rng, n_mc)
}

fn elbo_grad_prepared<R: Rng + ?Sized>(
    model: &ModelState,
    prepared: &Prepared<'_>,
    rng: &mut R,
    n_mc: usize,
) -> Result<(f64, Vec<Vec<(Array, Array)>>)> {
    let g = Graph::new();
    let vars = model.register(&g, true);
    let elbo = elbo_mean(model, prepared, &vars, rng, n_mc)?;
    let value = elbo.item();
    if !value.is_finite() {
        return Ok((value, vec![]));
    }
    let grads = g.backward(elbo)?;
    let out = vars
        .iter()
        .map(|v| {
            v.means
                .iter()
                .zip(&v.log_scales)
                .map(|(m, s)| (grads.wrt(m), grads.wrt(s)))
                .collect()
        })
        .collect();
    Ok((value, out))
}

/// Monte Carlo ELBO estimate averaged over `n_mc` draws.
pub fn elbo<R: Rng + ?Sized>(model: &ModelState, data: &TrainingData, rng: &mut R, n_mc: usize) -> Result<f64> {
    let prepared = prepare(model, data)?;
    let g = Graph::new();
    let vars = model.register(&g, false);
    Ok(elbo_mean(model, &prepared, &vars, rng, n_mc)?.item())
}

fn expect_kind(model: &ModelState, kind: ModelKind) -> Result<()> {
    if model.kind() != kind {
        return Err(Error::Contract(format!(
            "expected a {} model, got {}",
            kind.name(),
            model.kind().name()
        )));
    }
    Ok(())
}

pub fn elbo_unimodal<R: Rng + ?Sized>(
    model: &ModelState,
    data: &TrainingData,
    rng: &mut R,
    n_mc: usize,
) -> Result<f64> {
    expect_kind(model, ModelKind::Unimodal)?;
    elbo(model, data, rng, n_mc)
}

pub fn elbo_joint<R: Rng + ?Sized>(model: &ModelState, data: &TrainingData, rng: &mut R, n_mc: usize) -> Result<f64> {
    expect_kind(model, ModelKind::Joint)?;
    elbo(model, data, rng, n_mc)
}

pub fn elbo_layered<R: Rng + ?Sized>(model: &ModelState, data: &TrainingData, rng: &mut R, n_mc: usize) -> Result<f64> {
    expect_kind(model, ModelKind::Layered)?;
    elbo(model, data, rng, n_mc)
}

// ------------------------------------------------------------------ training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub n_mc: usize,
    pub window: usize,
    pub significance: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 1e-2,
            max_epochs: 5000,
            n_mc: 1,
            window: 50,
            significance: 0.05,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.max_epochs == 0 || self.n_mc == 0 || self.window < 3 {
            return Err(Error::Contract(
                "learning rate, max epochs and MC samples must be positive and the window at least 3".into(),
            ));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::Contract(format!(
                "significance {} is not in (0, 1)",
                self.significance
            )));
        }
        Ok(())
    }
}

/// `true` when an OLS fit of `losses` against their index shows no
/// significant downward slope: the one-sided t-test of `slope ≥ 0` is not
/// rejected at `significance`.
pub fn should_stop(losses: &[f64], significance: f64) -> bool {
    let w = losses.len();
    if w < 3 {
        return false;
    }
    let wf = w as f64;
    let t_mean = (wf - 1.0) / 2.0;
    let y_mean = losses.iter().sum::<f64>() / wf;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (i, y) in losses.iter().enumerate() {
        let dt = i as f64 - t_mean;
        sxx += dt * dt;
        sxy += dt * (y - y_mean);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * t_mean;
    let sse: f64 = losses
        .iter()
        .enumerate()
        .map(|(i, y)| (y - intercept - slope * i as f64).powi(2))
        .sum();
    let se = (sse / (wf - 2.0) / sxx).sqrt();
    if !(se > 0.0) {
        return slope >= 0.0;
    }
    let t = StudentsT::new(0.0, 1.0, wf - 2.0).expect("df > 0");
    let p = t.cdf(slope / se);
    p >= significance
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Vec<(Array, Array)>>,
    v: Vec<Vec<(Array, Array)>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(model: &ModelState, lr: f64) -> Self {
        let zeros: Vec<Vec<(Array, Array)>> = model
            .networks()
            .iter()
            .map(|n| {
                n.state
                    .blocks
                    .iter()
                    .map(|b| (Array::zeros(b.mean.shape()), Array::zeros(b.mean.shape())))
                    .collect()
            })
            .collect();
        Adam {
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Ascent step along `grads`.
    fn step(&mut self, model: &mut ModelState, grads: &[Vec<(Array, Array)>]) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let lr = self.lr;
        let update = |p: &mut Array, g: &Array, m: &mut Array, v: &mut Array| {
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * gi;
                let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] += lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            }
        };
        for (ni, net) in model.networks_mut().into_iter().enumerate() {
            for (bi, block) in net.state.blocks.iter_mut().enumerate() {
                let (gm, gs) = &grads[ni][bi];
                let (mm, ms) = &mut self.m[ni][bi];
                let (vm, vs) = &mut self.v[ni][bi];
                update(&mut block.mean, gm, mm, vm);
                update(&mut block.log_scale, gs, ms, vs);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Negative ELBO per epoch.
    pub loss_trace: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
}

/// Adam ascent on the ELBO, one full-batch step per epoch, stopped by the
/// windowed slope test or at `max_epochs`.
pub fn fit(model: &mut ModelState, data: &TrainingData, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    let prepared = prepare(model, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.max_epochs.min(10_000));
    for epoch in 0..cfg.max_epochs {
        let (value, grads) = elbo_grad_prepared(model, &prepared, &mut rng, cfg.n_mc).map_err(|e| match e {
            Error::Numerical { context, detail } => Error::Numerical {
                context: format!("epoch {epoch}: {context}"),
                detail,
            },
            other => other,
        })?;
        let loss = -value;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, trace });
        }
        adam.step(model, &grads);
        let done = epoch + 1;
        if done % cfg.window == 0 && should_stop(&trace[done - cfg.window..], cfg.significance) {
            log::debug!("stop rule met after {done} epochs");
            return Ok(FitReport {
                epochs: done,
                loss_trace: trace,
                converged: true,
            });
        }
    }
    Ok(FitReport {
        epochs: trace.len(),
        loss_trace: trace,
        converged: false,
    })
}

// ---------------------------------------------------------------- prediction

/// Per query point, an `[n_samples, k]` array of mean draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPredictive {
    pub samples: Vec<Array>,
}

fn phi_draw<'g, R: Rng + ?Sized>(net: &Surrogate, g: &'g Graph, rng: &mut R) -> Result<bnn::Phi<'g>> {
    Ok(bnn::mf_sample(&net.state.register(g, false), rng)?.0)
}

/// One posterior draw of the full output at `xq` (all modalities for the
/// joint model), shape `[n_query, k]`.
fn predict_draw<R: Rng + ?Sized>(
    model: &ModelState,
    prepared: &Prepared<'_>,
    xq: &Array,
    rng: &mut R,
) -> Result<Array> {
    let g = Graph::new();
    let q = g.constant(xq.clone());
    let out = match (model, prepared) {
        (ModelState::Unimodal { net }, Prepared::Plain(data)) => {
            let phi = phi_draw(net, &g, rng)?;
            let z = net.design(&phi, &g.constant(data.main.x.clone()))?;
            let post = conjlayer::posterior_update_var(&net.prior, &z, &g.constant(data.main.y.clone()))?;
            let draw = conjlayer::sample_posterior_var(&post, rng)?;
            net.design(&phi, &q)?.matmul(&draw.coef)?
        }
        (ModelState::Joint { net, column_priors, .. }, Prepared::Joint(layout)) => {
            let phi = phi_draw(net, &g, rng)?;
            let z = net.design(&phi, &g.constant(layout.x.clone()))?;
            let post = if layout.mask.is_complete() {
                conjlayer::posterior_update_var(&net.prior, &z, &g.constant(layout.y.clone()))?
            } else {
                conjlayer::impute_and_update(&net.prior, column_priors, &z, &layout.y, &layout.mask, rng)?.posterior
            };
            let draw = conjlayer::sample_posterior_var(&post, rng)?;
            net.design(&phi, &q)?.matmul(&draw.coef)?
        }
        (ModelState::Layered { aux, main }, Prepared::Plain(data)) => {
            let x_main = g.constant(data.main.x.clone());
            let (mut train_in, mut query_in) = (vec![x_main], vec![q]);
            for (net, md) in aux.iter().zip(&data.aux) {
                let phi = phi_draw(net, &g, rng)?;
                let z = net.design(&phi, &g.constant(md.x.clone()))?;
                let post = conjlayer::posterior_update_var(&net.prior, &z, &g.constant(md.y.clone()))?;
                let draw = conjlayer::sample_posterior_var(&post, rng)?;
                train_in.push(net.design(&phi, &x_main)?.matmul(&draw.coef)?);
                query_in.push(net.design(&phi, &q)?.matmul(&draw.coef)?);
            }
            let phi = phi_draw(main, &g, rng)?;
            let z = main.design(&phi, &Var::hcat(&train_in)?)?;
            let post = conjlayer::posterior_update_var(&main.prior, &z, &g.constant(data.main.y.clone()))?;
            let draw = conjlayer::sample_posterior_var(&post, rng)?;
            main.design(&phi, &Var::hcat(&query_in)?)?.matmul(&draw.coef)?
        }
        _ => return Err(Error::Contract("prepared data does not match the model kind".into())),
    };
    let value = (*out.value()).clone();
    Ok(value)
}

/// Draws of every output column at `xq`; for the joint model this includes
/// the auxiliary blocks.
pub fn predict_full<R: Rng + ?Sized>(
    model: &ModelState,
    data: &TrainingData,
    xq: &Array,
    n_samples: usize,
    rng: &mut R,
) -> Result<PosteriorPredictive> {
    if xq.cols() != data.input_dim() {
        return Err(Error::dim("predict", "query inputs do not match the training inputs"));
    }
    let prepared = prepare(model, data)?;
    let draws = (0..n_samples)
        .map(|_| predict_draw(model, &prepared, xq, rng))
        .collect::<Result<Vec<_>>>()?;
    let k = draws.first().map(|d| d.cols()).unwrap_or(0);
    let samples = (0..xq.rows())
        .map(|i| {
            let data: Vec<f64> = draws.iter().flat_map(|d| d.row_slice(i).to_vec()).collect();
            Array::matrix(n_samples, k, data).expect("consistent draws")
        })
        .collect();
    Ok(PosteriorPredictive { samples })
}

/// Posterior draws of the main-modality mean at `xq`.
pub fn predict<R: Rng + ?Sized>(
    model: &ModelState,
    data: &TrainingData,
    xq: &Array,
    n_samples: usize,
    rng: &mut R,
) -> Result<PosteriorPredictive> {
    let full = predict_full(model, data, xq, n_samples, rng)?;
    match model {
        ModelState::Joint { slices, .. } => {
            let (lo, hi) = slices[0];
            Ok(PosteriorPredictive {
                samples: full.samples.iter().map(|s| s.select_cols(lo, hi)).collect(),
            })
        }
        _ => Ok(full),
    }
}

// ---------------------------------------------------------------- checkpoint

/// Versioned container for a trained model and the data it conditions on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub model: ModelState,
    pub data: TrainingData,
    pub report: Option<FitReport>,
}

impl ModelCheckpoint {
    pub fn new(model: ModelState, data: TrainingData, report: Option<FitReport>) -> Self {
        ModelCheckpoint {
            version: MODEL_VERSION,
            model,
            data,
            report,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: ModelCheckpoint = serde_json::from_str(text)?;
        if ck.version != MODEL_VERSION {
            return Err(Error::Schema(format!(
                "model checkpoint version {} is not supported (expected {MODEL_VERSION})",
                ck.version
            )));
        }
        for net in ck.model.networks() {
            net.state.validate(&net.spec)?;
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{self, gaussian_kl};

    fn small_arch() -> Architecture {
        Architecture {
            hidden: vec![8],
            activation: Activation::Tanh,
        }
    }

    fn linear_data(n: usize, seed: u64) -> TrainingData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array::matrix(n, 1, (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()).unwrap();
        let y = x
            .map(|v| 0.8 * v + 0.1)
            .add(&dist::standard_normal(&mut rng, &[n, 1]).scale(0.05))
            .unwrap();
        TrainingData {
            main: ModalityData::new("main", x, y).unwrap(),
            aux: vec![],
        }
    }

    #[test]
    fn joint_layout_merges_identical_inputs() {
        let main = ModalityData::new("m", Array::column(&[0.0, 1.0]), Array::column(&[5.0, 6.0])).unwrap();
        let aux = ModalityData::new(
            "a",
            Array::column(&[1.0, 2.0]),
            Array::from_rows(&[vec![7.0, 8.0], vec![9.0, 10.0]]).unwrap(),
        )
        .unwrap();
        let layout = joint_layout(&TrainingData { main, aux: vec![aux] }).unwrap();
        assert_eq!(layout.x.data(), &[0.0, 1.0, 2.0]);
        assert_eq!(layout.slices, vec![(0, 1), (1, 3)]);
        assert!(layout.y.get(0, 1).is_nan() && layout.y.get(2, 0).is_nan());
        assert_eq!(layout.y.row_slice(1), &[6.0, 7.0, 8.0]);
        assert!(!layout.mask.is_observed(0, 2) && layout.mask.is_observed(1, 2));
    }

    #[test]
    fn joint_layout_keeps_replicated_inputs() {
        let main = ModalityData::new("m", Array::column(&[0.0, 0.0, 1.0]), Array::column(&[1.0, 2.0, 3.0])).unwrap();
        let aux = ModalityData::new("a", Array::column(&[0.0]), Array::column(&[4.0])).unwrap();
        let layout = joint_layout(&TrainingData { main, aux: vec![aux] }).unwrap();
        assert_eq!(layout.x.data(), &[0.0, 0.0, 1.0]);
        assert_eq!(layout.y.row_slice(0), &[1.0, 4.0]);
        assert_eq!(layout.y.get(1, 0), 2.0);
        assert!(layout.y.get(1, 1).is_nan());
    }

    #[test]
    fn empty_data_elbo_is_negative_kl() {
        // With n = 0 the evidence is 0, so the estimator is log p(Φ) − log q(Φ).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = TrainingData {
            main: ModalityData::new("m", Array::zeros(&[0, 1]), Array::zeros(&[0, 1])).unwrap(),
            aux: vec![],
        };
        let model = ModelState::init(ModelKind::Unimodal, &data, &small_arch(), &mut rng).unwrap();
        let net = &model.networks()[0];
        // Gaussian blocks are closed form; the scale block is handled by MC.
        let n = 20_000;
        let vals: Vec<f64> = (0..n).map(|_| elbo(&model, &data, &mut rng, 1).unwrap()).collect();
        let m = vals.iter().sum::<f64>() / n as f64;
        let se = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt();
        let mut kl = 0.0;
        let mut scale_part = 0.0;
        for b in &net.state.blocks {
            for (mu, ls) in b.mean.data().iter().zip(b.log_scale.data()) {
                match b.kind {
                    bnn::BlockKind::LogScale => {
                        // E_q[log Gamma(e^u; 2, 1) + u] − E_q[log N(u)] with u ~ N(μ, σ²):
                        // log Gamma(s;2,1) = log s − s, so the integrand is 2u − e^u.
                        let s2 = (2.0 * ls).exp();
                        scale_part += 2.0 * mu - (mu + 0.5 * s2).exp() + 0.5 * (1.0 + dist::LN_2PI) + ls;
                    }
                    _ => kl += gaussian_kl(*mu, ls.exp(), 0.0, 1.0),
                }
            }
        }
        let want = scale_part - kl;
        assert!((m - want).abs() < 3.0 * se, "{m} vs {want} (se {se})");
    }

    #[test]
    fn collapsed_family_has_zero_estimator_variance() {
        let data = linear_data(6, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = ModelState::init(ModelKind::Unimodal, &data, &small_arch(), &mut rng).unwrap();
        if let ModelState::Unimodal { net } = &mut model {
            for b in &mut net.state.blocks {
                b.log_scale = b.log_scale.map(|_| -800.0);
            }
        }
        let a = elbo(&model, &data, &mut rng, 1).unwrap();
        let b = elbo(&model, &data, &mut rng, 1).unwrap();
        // every Φ-dependent term is deterministic once the scales vanish
        assert_eq!(a, b);
    }

    #[test]
    fn stop_rule_definition() {
        let decreasing: Vec<f64> = (0..50).map(|i| 100.0 - i as f64).collect();
        assert!(!should_stop(&decreasing, 0.05));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f64> = dist::standard_normal(&mut rng, &[50]).into_data();
        assert!(should_stop(&noise, 0.05));
        assert!(should_stop(&[1.0; 50], 0.05));
        let data = linear_data(5, 1);
        let mut model = ModelState::init(ModelKind::Unimodal, &data, &small_arch(), &mut rng).unwrap();
        let cfg = FitConfig {
            max_epochs: 200,
            ..FitConfig::default()
        };
        let report = fit(&mut model, &data, &cfg).unwrap();
        assert_eq!(report.loss_trace.len(), report.epochs);
        assert!(report.epochs % cfg.window == 0 || report.epochs == cfg.max_epochs);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = linear_data(8, 4);
        let cfg = FitConfig {
            max_epochs: 60,
            seed: 11,
            ..FitConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut model = ModelState::init(ModelKind::Unimodal, &data, &small_arch(), &mut rng).unwrap();
            let r = fit(&mut model, &data, &cfg).unwrap();
            (r.loss_trace, model)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(ma, mb);
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = linear_data(6, 5);
        data.main.y.set(2, 0, f64::NAN);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = ModelState::init(ModelKind::Unimodal, &data, &small_arch(), &mut rng).unwrap();
        let err = fit(&mut model, &data, &FitConfig::default()).unwrap_err();
        assert!(
            matches!(err, Error::Divergence { epoch: 0, .. } | Error::Numerical { .. }),
            "{err}"
        );
    }

    #[test]
    fn structural_reductions_without_auxiliaries() {
        let data = linear_data(7, 6);
        let arch = small_arch();
        let uni = ModelState::init(ModelKind::Unimodal, &data, &arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let joint = ModelState::init(ModelKind::Joint, &data, &arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let layered = ModelState::init(ModelKind::Layered, &data, &arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let e = |m: &ModelState| elbo(m, &data, &mut ChaCha8Rng::seed_from_u64(3), 2).unwrap();
        assert_eq!(e(&uni), e(&joint));
        assert_eq!(e(&uni), e(&layered));
        assert!(elbo_joint(&uni, &data, &mut ChaCha8Rng::seed_from_u64(0), 1).is_err());
    }

    #[test]
    fn prediction_shapes_and_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let main = linear_data(6, 7).main;
        let aux = ModalityData::new(
            "aux",
            main.x.clone(),
            Array::matrix(6, 2, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        )
        .unwrap();
        let data = TrainingData { main, aux: vec![aux] };
        let model = ModelState::init(ModelKind::Joint, &data, &small_arch(), &mut rng).unwrap();
        let xq = Array::column(&[0.1, 0.5]);
        let one = predict(&model, &data, &xq, 1, &mut rng).unwrap();
        assert_eq!(one.samples.len(), 2);
        assert_eq!(one.samples[0].shape(), &[1, 1]);
        let full = predict_full(&model, &data, &xq, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let main_only = predict(&model, &data, &xq, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        if let ModelState::Joint { slices, .. } = &model {
            for (f, m) in full.samples.iter().zip(&main_only.samples) {
                let parts: Vec<Array> = slices.iter().map(|(lo, hi)| f.select_cols(*lo, *hi)).collect();
                let refs: Vec<&Array> = parts.iter().collect();
                assert_eq!(&Array::hcat(&refs).unwrap(), f);
                assert_eq!(&parts[0], m);
            }
        }
    }

    #[test]
    fn identical_query_points_share_draws() {
        let data = linear_data(6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = ModelState::init(ModelKind::Unimodal, &data, &small_arch(), &mut rng).unwrap();
        let pred = predict(&model, &data, &Array::column(&[0.3, 0.3]), 20, &mut rng).unwrap();
        assert_eq!(pred.samples[0], pred.samples[1]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = linear_data(4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = ModelState::init(ModelKind::Layered, &data, &small_arch(), &mut rng).unwrap();
        let ck = ModelCheckpoint::new(model, data, None);
        let back = ModelCheckpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
    }
}
