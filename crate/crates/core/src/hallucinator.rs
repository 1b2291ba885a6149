//! Hard-positive generation in feature space.
//!
//! A query feature `q` is first pushed away from its positive key `k` along their
//! difference, `q' = (1 + lambda) q - lambda k` with `lambda ~ U(beta1, beta2)`. A small
//! learnable MLP then maps the concatenation `(q, q')` to the hallucinated feature.
//! With zero layers the MLP is skipped and `q'` is returned as is.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Mlp};
use crate::rng::Rng;

/// Bounds of the uniform distribution `lambda` is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationConfig {
    pub beta1: f64,
    pub beta2: f64,
}

impl ExtrapolationConfig {
    /// `(0.0, 1.0)`: the best-performing range in the extrapolation-range ablation. Default.
    pub const WIDE: ExtrapolationConfig = ExtrapolationConfig {
        beta1: 0.0,
        beta2: 1.0,
    };
    /// `(0.0, 0.1)`: the range listed with the method description and training setup.
    pub const NARROW: ExtrapolationConfig = ExtrapolationConfig {
        beta1: 0.0,
        beta2: 0.1,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.beta1.is_finite() && self.beta2.is_finite()) {
            return Err(Error::config("hallucinator.beta1", "beta1 and beta2 must be finite"));
        }
        if self.beta1 > self.beta2 {
            return Err(Error::config("hallucinator.beta2", "beta1 must not exceed beta2"));
        }
        Ok(())
    }
}

impl Default for ExtrapolationConfig {
    fn default() -> Self {
        ExtrapolationConfig::WIDE
    }
}

/// Draws `lambda ~ U(beta1, beta2)`.
pub fn sample_lambda(cfg: &ExtrapolationConfig, rng: &mut Rng) -> f64 {
    let u: f64 = rng.gen();
    let lambda = cfg.beta1 + (cfg.beta2 - cfg.beta1) * u;
    lambda.min(cfg.beta2)
}

/// `(1 + lambda) q - lambda k` on plain vectors.
pub fn extrapolate(q: &[f64], k: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if q.len() != k.len() {
        return Err(Error::ShapeMismatch {
            op: "extrapolate",
            lhs: vec![q.len()],
            rhs: vec![k.len()],
        });
    }
    if !lambda.is_finite() {
        return Err(Error::NonFinite { op: "extrapolate" });
    }
    Ok(q.iter().zip(k).map(|(a, b)| (1.0 + lambda) * a - lambda * b).collect())
}

/// Row-wise extrapolation on the tape: row `i` uses `lambdas[i]`.
///
/// Gradient reaches `k` only if `k` is live on the tape.
pub fn extrapolate_rows(tape: &mut Tape, q: Var, k: Var, lambdas: &[f64]) -> Result<Var> {
    if tape.value(q).shape() != tape.value(k).shape() {
        return Err(Error::ShapeMismatch {
            op: "extrapolate",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(k).shape().to_vec(),
        });
    }
    let keep: Vec<f64> = lambdas.iter().map(|l| 1.0 + l).collect();
    let push: Vec<f64> = lambdas.iter().map(|l| -l).collect();
    let a = tape.scale_rows(q, &keep)?;
    let b = tape.scale_rows(k, &push)?;
    tape.add(a, b)
}

/// Learnable part of the hallucinator: `n` dense layers `2d -> 2d -> ... -> d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HallucinatorParams {
    pub feature_dim: usize,
    pub mlp: Mlp,
}

impl HallucinatorParams {
    pub fn n_layers(&self) -> usize {
        self.mlp.layers.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.mlp.param_ids()
    }
}

/// Registers `n` layers in `store` with Glorot-uniform weights and zero biases.
pub fn init_hallucinator(store: &mut ParamStore, d: usize, n: usize, rng: &mut Rng) -> Result<HallucinatorParams> {
    if d == 0 {
        return Err(Error::Invalid("hallucinator feature width must be positive".into()));
    }
    let mut widths = vec![2 * d; n];
    if n > 0 {
        widths.push(d);
    }
    Ok(HallucinatorParams {
        feature_dim: d,
        mlp: Mlp::new(store, "hallucinator", &widths, rng),
    })
}

/// `H(q, q')`: the MLP applied to `concat(q, q')`, or `q'` itself when there are no layers.
/// Output is not normalized.
pub fn hallucinate(
    tape: &mut Tape,
    store: &ParamStore,
    q: Var,
    q_prime: Var,
    params: &HallucinatorParams,
) -> Result<Var> {
    let (sq, sp) = (tape.value(q).shape(), tape.value(q_prime).shape());
    let d = params.feature_dim;
    if sq != sp || sq.last() != Some(&d) {
        return Err(Error::ShapeMismatch {
            op: "hallucinate",
            lhs: sq.to_vec(),
            rhs: sp.to_vec(),
        });
    }
    if params.n_layers() == 0 {
        return Ok(q_prime);
    }
    let joint = tape.concat_features(q, q_prime)?;
    params.mlp.forward(tape, store, Binding::Train, joint)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HallucinatorConfig {
    pub enabled: bool,
    pub n: usize,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for HallucinatorConfig {
    fn default() -> Self {
        HallucinatorConfig {
            enabled: true,
            n: 3,
            beta1: ExtrapolationConfig::WIDE.beta1,
            beta2: ExtrapolationConfig::WIDE.beta2,
        }
    }
}

impl HallucinatorConfig {
    pub fn extrapolation(&self) -> ExtrapolationConfig {
        ExtrapolationConfig {
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }

    /// Pass-through configuration: `lambda = 0`, no layers.
    pub fn identity() -> Self {
        HallucinatorConfig {
            enabled: true,
            n: 0,
            beta1: 0.0,
            beta2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.extrapolation().validate()
    }
}

/// Hallucinator parameters plus the extrapolation range they are used with.
#[derive(Clone, Debug, PartialEq)]
pub struct Hallucinator {
    pub params: HallucinatorParams,
    pub extrapolation: ExtrapolationConfig,
}

impl Hallucinator {
    pub fn new(store: &mut ParamStore, d: usize, cfg: &HallucinatorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Hallucinator {
            params: init_hallucinator(store, d, cfg.n, rng)?,
            extrapolation: cfg.extrapolation(),
        })
    }

    /// Unnormalized hard positive for each row of `q`.
    pub fn generate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        k: Var,
        lambdas: &[f64],
    ) -> Result<Var> {
        let q_prime = extrapolate_rows(tape, q, k, lambdas)?;
        hallucinate(tape, store, q, q_prime, &self.params)
    }

    pub fn sample_lambdas(&self, count: usize, rng: &mut Rng) -> Vec<f64> {
        (0..count).map(|_| sample_lambda(&self.extrapolation, rng)).collect()
    }
}
