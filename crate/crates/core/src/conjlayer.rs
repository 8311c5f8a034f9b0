//! Conjugate Matrix-Normal/Wishart last layer.
//!
//! Given features `Z: [n, h+1]` (leading column of ones) and responses
//! `Y: [n, k]`, the last layer `B = [b; W]` and noise precision `Σ⁻¹` have
//! prior `Σ⁻¹ ~ Wishart(ν₀, V₀)`, `B | Σ ~ MatrixNormal(0, Λ₀, Σ)`. Everything
//! here is written on graph nodes so that gradients reach the network
//! parameters through `Z`; the plain-array functions are thin wrappers.
//!
//! Partially observed responses are handled column by column: each missing
//! block is drawn from the Normal-inverse-gamma regression predictive of its
//! column given that column's observed rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{self, MvStudentTParams, NigParams};
use crate::error::{Error, Result};
use crate::ndiff::{Array, Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugatePrior {
    pub nu: f64,
    /// Wishart scale `V₀`, `[k, k]`.
    pub v: Array,
    /// Row covariance `Λ₀`, `[h+1, h+1]`.
    pub lambda: Array,
}

impl ConjugatePrior {
    pub fn new(nu: f64, v: Array, lambda: Array) -> Result<Self> {
        let k = v.rows();
        if !(nu > k as f64 - 1.0) {
            return Err(Error::Support {
                dist: "Wishart",
                detail: format!("nu0 = {nu} must exceed k - 1 = {}", k as f64 - 1.0),
            });
        }
        v.cholesky()?;
        lambda.cholesky()?;
        Ok(ConjugatePrior { nu, v, lambda })
    }

    /// `ν₀ = k + 2`, `V₀ = I / (k + 2)`, `Λ₀ = I`.
    pub fn default_for(k: usize, features: usize) -> Self {
        let c = k as f64 + 2.0;
        ConjugatePrior {
            nu: c,
            v: Array::eye(k).scale(1.0 / c),
            lambda: Array::eye(features + 1),
        }
    }

    pub fn k(&self) -> usize {
        self.v.rows()
    }

    pub fn p(&self) -> usize {
        self.lambda.rows()
    }

    /// Per-column NIG priors matched to the marginal scale of this prior:
    /// coefficient precision `Λ₀⁻¹`, shape `ν₀/2`, scale `(V₀⁻¹)_jj / 2`.
    pub fn column_priors(&self) -> Result<Vec<NigParams>> {
        let precision = self.lambda.inverse_spd()?;
        let v_inv = self.v.inverse_spd()?;
        (0..self.k())
            .map(|j| NigParams::new(precision.clone(), self.nu / 2.0, v_inv.get(j, j) / 2.0))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugatePosterior {
    pub nu: f64,
    pub v: Array,
    pub w_hat: Array,
    pub lambda: Array,
}

/// Posterior quantities as graph nodes.
#[derive(Clone, Debug)]
pub struct PosteriorVars<'g> {
    pub nu: f64,
    /// `V_n⁻¹`.
    pub v_inv: Var<'g>,
    pub w_hat: Var<'g>,
    /// `Λ_n⁻¹ = Λ₀⁻¹ + ZᵀZ`.
    pub precision: Var<'g>,
}

impl<'g> PosteriorVars<'g> {
    pub fn v(&self) -> Result<Var<'g>> {
        let eye = self.v_inv.graph().constant(Array::eye(self.v_inv.rows()));
        spd(self.v_inv.solve_spd(&eye), "V_n", &self.v_inv)
    }

    pub fn lambda(&self) -> Result<Var<'g>> {
        let eye = self.precision.graph().constant(Array::eye(self.precision.rows()));
        spd(self.precision.solve_spd(&eye), "Lambda_n", &self.precision)
    }

    pub fn to_arrays(&self) -> Result<ConjugatePosterior> {
        Ok(ConjugatePosterior {
            nu: self.nu,
            v: symmetric_copy(&self.v()?.value()),
            w_hat: (*self.w_hat.value()).clone(),
            lambda: symmetric_copy(&self.lambda()?.value()),
        })
    }
}

fn symmetric_copy(a: &Array) -> Array {
    a.symmetrized()
}

/// Converts a failed factorization into a numerical error carrying the
/// matrix condition estimate.
fn spd<'g>(r: Result<Var<'g>>, what: &str, m: &Var<'g>) -> Result<Var<'g>> {
    r.map_err(|e| match e {
        Error::NotPositiveDefinite { .. } | Error::NotSymmetric { .. } => Error::Numerical {
            context: format!("conjugate update ({what})"),
            detail: format!("{e}; condition estimate {:.3e}", m.value().condition_estimate()),
        },
        other => other,
    })
}

/// `[1, h^{−1/2} z_ℓ]` for a feature block `z: [n, h]`.
pub fn design_matrix<'g>(z: &Var<'g>) -> Result<Var<'g>> {
    let (n, h) = (z.rows(), z.cols());
    let ones = z.graph().constant(Array::full(&[n, 1], 1.0));
    Var::hcat(&[ones, z.scale(1.0 / (h as f64).sqrt())])
}

pub fn design_matrix_array(z: &Array) -> Array {
    let g = Graph::new();
    let d = design_matrix(&g.constant(z.clone())).expect("matrix input");
    (*d.value()).clone()
}

fn check_shapes(prior: &ConjugatePrior, z: &Var<'_>, y: &Var<'_>) -> Result<()> {
    if z.rows() != y.rows() || z.cols() != prior.p() || y.cols() != prior.k() {
        return Err(Error::dim(
            "posterior_update",
            format!(
                "Z {:?}, Y {:?} against prior with p = {}, k = {}",
                z.shape(),
                y.shape(),
                prior.p(),
                prior.k()
            ),
        ));
    }
    Ok(())
}

/// Full-conditional update of the last layer given complete data.
pub fn posterior_update_var<'g>(prior: &ConjugatePrior, z: &Var<'g>, y: &Var<'g>) -> Result<PosteriorVars<'g>> {
    let g = z.graph();
    let n = z.rows();
    if n == 0 {
        return Ok(PosteriorVars {
            nu: prior.nu,
            v_inv: g.constant(prior.v.inverse_spd()?),
            w_hat: g.constant(Array::zeros(&[prior.p(), prior.k()])),
            precision: g.constant(prior.lambda.inverse_spd()?),
        });
    }
    check_shapes(prior, z, y)?;
    let lambda0_inv = g.constant(prior.lambda.inverse_spd()?);
    let precision = lambda0_inv.add(&z.t().matmul(z)?)?;
    let w_hat = spd(precision.solve_spd(&z.t().matmul(y)?), "Lambda_n", &precision)?;
    let resid = y.sub(&z.matmul(&w_hat)?)?;
    let v_inv = g
        .constant(prior.v.inverse_spd()?)
        .add(&resid.t().matmul(&resid)?)?
        .add(&w_hat.t().matmul(&lambda0_inv.matmul(&w_hat)?)?)?;
    Ok(PosteriorVars {
        nu: prior.nu + n as f64,
        v_inv,
        w_hat,
        precision,
    })
}

pub fn posterior_update(prior: &ConjugatePrior, z: &Array, y: &Array) -> Result<ConjugatePosterior> {
    let g = Graph::new();
    posterior_update_var(prior, &g.constant(z.clone()), &g.constant(y.clone()))?.to_arrays()
}

/// Collapsed evidence `log p(Y | Z)` with the last layer and noise integrated out.
pub fn log_marginal_var<'g>(prior: &ConjugatePrior, z: &Var<'g>, y: &Var<'g>) -> Result<Var<'g>> {
    let post = posterior_update_var(prior, z, y)?;
    evidence_from_posterior(prior, &post, z.rows())
}

/// Collapsed evidence from an already computed update on `n` rows.
pub fn evidence_from_posterior<'g>(prior: &ConjugatePrior, post: &PosteriorVars<'g>, n: usize) -> Result<Var<'g>> {
    let n = n as f64;
    let k = prior.k();
    let kf = k as f64;
    let v0_inv_logdet = -prior.v.logdet_spd()?;
    let c = -0.5 * n * kf * std::f64::consts::PI.ln() - 0.5 * kf * prior.lambda.logdet_spd()?
        + 0.5 * prior.nu * v0_inv_logdet
        + dist::mlgamma(k, post.nu / 2.0)?
        - dist::mlgamma(k, prior.nu / 2.0)?;
    let lambda_term = spd(post.precision.logdet_spd(), "Lambda_n", &post.precision)?.scale(-0.5 * kf);
    let v_term = spd(post.v_inv.logdet_spd(), "V_n", &post.v_inv)?.scale(-0.5 * post.nu);
    Ok(lambda_term.add(&v_term)?.add_scalar(c))
}

pub fn log_marginal(prior: &ConjugatePrior, z: &Array, y: &Array) -> Result<f64> {
    let g = Graph::new();
    Ok(log_marginal_var(prior, &g.constant(z.clone()), &g.constant(y.clone()))?.item())
}

/// One draw of the last layer.
#[derive(Clone, Debug)]
pub struct LastLayerVars<'g> {
    /// `[b; W]`, shape `[h+1, k]`.
    pub coef: Var<'g>,
    /// `Σ⁻¹` and its lower factor `C` (`Σ⁻¹ = C Cᵀ`).
    pub sigma_inv: Var<'g>,
    pub sigma_inv_factor: Var<'g>,
}

impl<'g> LastLayerVars<'g> {
    pub fn bias(&self) -> Result<Var<'g>> {
        self.coef.gather_rows(&[0])
    }

    pub fn weights(&self) -> Result<Var<'g>> {
        let rows: Vec<usize> = (1..self.coef.rows()).collect();
        self.coef.gather_rows(&rows)
    }

    /// `Σ = C⁻ᵀ C⁻¹`.
    pub fn sigma(&self) -> Result<Var<'g>> {
        let k = self.sigma_inv_factor.rows();
        let eye = self.coef.graph().constant(Array::eye(k));
        let c_inv = self.sigma_inv_factor.solve_lower(&eye)?;
        c_inv.t().matmul(&c_inv)
    }
}

/// `Σ⁻¹ ~ Wishart(ν_n, V_n)` by Bartlett, then
/// `[b W] = Ŵ_n + L_Λ E C⁻¹` which is `MatrixNormal(Ŵ_n, Λ_n, Σ)`.
pub fn sample_posterior_var<'g, R: Rng + ?Sized>(post: &PosteriorVars<'g>, rng: &mut R) -> Result<LastLayerVars<'g>> {
    let g = post.w_hat.graph();
    let k = post.v_inv.rows();
    let (sigma_inv, c) = dist::wishart_sample(post.nu, &post.v()?, rng)?;
    let c_inv = c.solve_lower(&g.constant(Array::eye(k)))?;
    let row_factor = post.lambda()?.cholesky()?;
    // col_factor Rᵀ = C⁻¹, so R = C⁻ᵀ and R Rᵀ = Σ
    let coef = dist::matrix_normal_sample(&post.w_hat, &row_factor, &c_inv.t(), rng)?;
    Ok(LastLayerVars {
        coef,
        sigma_inv,
        sigma_inv_factor: c,
    })
}

#[derive(Clone, Debug)]
pub struct LastLayerDraw {
    pub w: Array,
    pub b: Array,
    pub sigma: Array,
}

pub fn sample_posterior<R: Rng + ?Sized>(post: &ConjugatePosterior, rng: &mut R) -> Result<LastLayerDraw> {
    let g = Graph::new();
    let vars = PosteriorVars {
        nu: post.nu,
        v_inv: g.constant(post.v.inverse_spd()?),
        w_hat: g.constant(post.w_hat.clone()),
        precision: g.constant(post.lambda.inverse_spd()?),
    };
    let draw = sample_posterior_var(&vars, rng)?;
    Ok(LastLayerDraw {
        w: (*draw.weights()?.value()).clone(),
        b: (*draw.bias()?.value()).clone(),
        sigma: draw.sigma()?.value().symmetrized(),
    })
}

/// `log p(Σ⁻¹ | ν, V) + log p(B | M, Λ, Σ)` for a last-layer draw.
pub fn last_layer_logdensity<'g>(
    draw: &LastLayerVars<'g>,
    nu: f64,
    v: &Var<'g>,
    mean: &Var<'g>,
    row_cov: &Var<'g>,
) -> Result<Var<'g>> {
    dist::wishart_logpdf(&draw.sigma_inv, nu, v)?.add(&dist::matrix_normal_logpdf(
        &draw.coef,
        mean,
        row_cov,
        &draw.sigma_inv,
    )?)
}

/// `log p(Y | Z, B, Σ)` with rows `y_i ~ N(Bᵀ z_i, Σ)`.
pub fn data_loglik<'g>(z: &Var<'g>, y: &Var<'g>, draw: &LastLayerVars<'g>) -> Result<Var<'g>> {
    let eye = z.graph().constant(Array::eye(z.rows()));
    dist::matrix_normal_logpdf(y, &z.matmul(&draw.coef)?, &eye, &draw.sigma_inv)
}

// ------------------------------------------------------------ missing data

/// Observation mask, `true` where a response entry is observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingMask {
    rows: usize,
    cols: usize,
    observed: Vec<bool>,
}

impl MissingMask {
    pub fn new(rows: usize, cols: usize, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != rows * cols {
            return Err(Error::dim("MissingMask", "mask length is not rows * cols"));
        }
        let m = MissingMask { rows, cols, observed };
        for j in 0..cols {
            if rows > 0 && m.observed_rows(j).is_empty() {
                return Err(Error::Contract(format!("response column {j} is never observed")));
            }
        }
        Ok(m)
    }

    pub fn all_observed(rows: usize, cols: usize) -> Self {
        MissingMask {
            rows,
            cols,
            observed: vec![true; rows * cols],
        }
    }

    /// Marks a missing value wherever `y` is NaN.
    pub fn from_nan(y: &Array) -> Result<Self> {
        Self::new(y.rows(), y.cols(), y.data().iter().map(|v| !v.is_nan()).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.cols + j]
    }

    pub fn observed_rows(&self, j: usize) -> Vec<usize> {
        (0..self.rows).filter(|&i| self.is_observed(i, j)).collect()
    }

    pub fn missing_rows(&self, j: usize) -> Vec<usize> {
        (0..self.rows).filter(|&i| !self.is_observed(i, j)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|b| *b)
    }
}

/// Student-t predictive whose location and shape are graph nodes.
#[derive(Clone, Debug)]
pub struct PredictiveVars<'g> {
    pub dof: f64,
    pub loc: Var<'g>,
    pub shape: Var<'g>,
}

impl PredictiveVars<'_> {
    pub fn to_params(&self) -> Result<MvStudentTParams> {
        MvStudentTParams::new(self.dof, (*self.loc.value()).clone(), self.shape.value().symmetrized())
    }
}

fn nig_predictive<'g>(
    dof: f64,
    scale_ratio: Var<'g>,
    precision: &Var<'g>,
    mean: &Var<'g>,
    z_miss: &Var<'g>,
) -> Result<PredictiveVars<'g>> {
    let g = z_miss.graph();
    let r = z_miss.rows();
    let loc = z_miss.matmul(mean)?;
    let spread = z_miss.matmul(&precision.solve_spd(&z_miss.t())?)?;
    let spread = spread.add(&spread.t())?.scale(0.5);
    let shape = g.constant(Array::eye(r)).add(&spread)?.mul(&scale_ratio)?;
    Ok(PredictiveVars { dof, loc, shape })
}

/// Prior predictive `MvT(2a₀, 0, (b₀/a₀)(I + Z A₀⁻¹ Zᵀ))`.
pub fn prior_predictive_var<'g>(nig: &NigParams, z_miss: &Var<'g>) -> Result<PredictiveVars<'g>> {
    let g = z_miss.graph();
    let p = nig.precision.rows();
    nig_predictive(
        2.0 * nig.shape,
        g.scalar(nig.scale / nig.shape),
        &g.constant(nig.precision.clone()),
        &g.constant(Array::zeros(&[p, 1])),
        z_miss,
    )
}

/// Posterior predictive of the missing rows of one column.
pub fn columnwise_predictive_var<'g>(
    nig: &NigParams,
    z_obs: &Var<'g>,
    y_obs: &Var<'g>,
    z_miss: &Var<'g>,
) -> Result<PredictiveVars<'g>> {
    let n = z_obs.rows();
    if n == 0 {
        return Err(Error::Contract(
            "column predictive needs at least one observation".into(),
        ));
    }
    if y_obs.rows() != n || y_obs.cols() != 1 {
        return Err(Error::dim(
            "columnwise_predictive",
            "y_obs must be a column matching Z_obs",
        ));
    }
    let g = z_obs.graph();
    let precision = g.constant(nig.precision.clone()).add(&z_obs.t().matmul(z_obs)?)?;
    let zty = z_obs.t().matmul(y_obs)?;
    let mean = precision.solve_spd(&zty)?;
    let a_n = nig.shape + n as f64 / 2.0;
    let fit = y_obs.square().sum().sub(&zty.mul(&mean)?.sum())?;
    let b_n = fit.scale(0.5).add_scalar(nig.scale);
    nig_predictive(2.0 * a_n, b_n.scale(1.0 / a_n), &precision, &mean, z_miss)
}

pub fn columnwise_predictive(
    nig: &NigParams,
    z_obs: &Array,
    y_obs: &Array,
    z_miss: &Array,
) -> Result<MvStudentTParams> {
    if z_miss.rows() == 0 {
        return MvStudentTParams::new(2.0 * nig.shape, Array::zeros(&[0, 1]), Array::zeros(&[0, 0]));
    }
    let g = Graph::new();
    columnwise_predictive_var(
        nig,
        &g.constant(z_obs.clone()),
        &g.constant(y_obs.clone()),
        &g.constant(z_miss.clone()),
    )?
    .to_params()
}

pub fn prior_predictive(nig: &NigParams, z_miss: &Array) -> Result<MvStudentTParams> {
    let g = Graph::new();
    prior_predictive_var(nig, &g.constant(z_miss.clone()))?.to_params()
}

/// Completed responses, the imputation log-density, and the resulting posterior.
#[derive(Clone, Debug)]
pub struct Imputation<'g> {
    pub y_filled: Var<'g>,
    pub log_q_miss: Var<'g>,
    pub posterior: PosteriorVars<'g>,
}

/// Minimum observed rows in a column before its data are used to form the
/// predictive; sparser columns fall back to the prior predictive.
pub const MIN_OBSERVED_FOR_UPDATE: usize = 2;

/// Draws each column's missing block from its predictive (pathwise in `Z`),
/// accumulates the log-density of the draws, then updates on completed data.
///
/// Missing entries of `y` are ignored and may hold any value.
pub fn impute_and_update<'g, R: Rng + ?Sized>(
    prior: &ConjugatePrior,
    nigs: &[NigParams],
    z: &Var<'g>,
    y: &Array,
    mask: &MissingMask,
    rng: &mut R,
) -> Result<Imputation<'g>> {
    let g = z.graph();
    let (n, k) = (y.rows(), y.cols());
    if mask.rows() != n || mask.cols() != k || nigs.len() != k || z.rows() != n {
        return Err(Error::dim(
            "impute_and_update",
            "mask, responses, features and priors disagree",
        ));
    }
    let mut log_q = g.scalar(0.0);
    let mut columns = Vec::with_capacity(k);
    for j in 0..k {
        let miss = mask.missing_rows(j);
        let observed_values: Vec<f64> = (0..n)
            .map(|i| if mask.is_observed(i, j) { y.get(i, j) } else { 0.0 })
            .collect();
        let base = g.constant(Array::column(&observed_values));
        if miss.is_empty() {
            columns.push(base);
            continue;
        }
        let obs = mask.observed_rows(j);
        let z_miss = z.gather_rows(&miss)?;
        let pred = if obs.len() < MIN_OBSERVED_FOR_UPDATE {
            prior_predictive_var(&nigs[j], &z_miss)?
        } else {
            let y_obs = g.constant(Array::column(&obs.iter().map(|&i| y.get(i, j)).collect::<Vec<_>>()));
            columnwise_predictive_var(&nigs[j], &z.gather_rows(&obs)?, &y_obs, &z_miss)?
        };
        let draw = dist::mvt_sample(pred.dof, &pred.loc, &pred.shape, rng)?;
        log_q = log_q.add(&dist::mvt_logpdf(&draw, pred.dof, &pred.loc, &pred.shape)?)?;
        let mut scatter = Array::zeros(&[n, miss.len()]);
        for (c, &i) in miss.iter().enumerate() {
            scatter.set(i, c, 1.0);
        }
        columns.push(base.add(&g.constant(scatter).matmul(&draw)?)?);
    }
    let y_filled = Var::hcat(&columns)?;
    let posterior = posterior_update_var(prior, z, &y_filled)?;
    Ok(Imputation {
        y_filled,
        log_q_miss: log_q,
        posterior,
    })
}
