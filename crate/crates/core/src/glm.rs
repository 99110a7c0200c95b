//! Weighted logistic regression: likelihood, IRLS fitting, AIC, Wald
//! intervals, and prediction.
//!
//! The linear predictor is `eta = alpha(segment) + sum_i beta_i * x_i` and
//! the response probability is `sigma(eta)`. When the day-segment term is
//! active the single intercept is replaced by three per-segment intercepts
//! (no global intercept column), so the reported coefficients are directly
//! the per-segment levels.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{ActionKind, Dataset, ScalingParams, Term};
use crate::features::DaySegment;
use crate::linalg::PivotedCholesky;

/// Probability clamp used inside log-likelihood evaluations.
const PROB_EPS: f64 = 1e-12;
/// Floor for IRLS working weights, protecting the normal equations when a
/// fitted probability saturates.
const WORK_WEIGHT_FLOOR: f64 = 1e-10;

/// Identifier of one fitted coefficient. Declaration order fixes the
/// design-matrix column order: intercept block first, numeric terms after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefKey {
    Alpha,
    AlphaDs1,
    AlphaDs2,
    AlphaDs3,
    TIndoor,
    LogCo2,
    Rh,
    TOutsideAvg,
}

impl CoefKey {
    pub fn as_str(&self) -> &'static str {
        match self {
            CoefKey::Alpha => "alpha",
            CoefKey::AlphaDs1 => "alpha_ds1",
            CoefKey::AlphaDs2 => "alpha_ds2",
            CoefKey::AlphaDs3 => "alpha_ds3",
            CoefKey::TIndoor => "t_indoor",
            CoefKey::LogCo2 => "log_co2",
            CoefKey::Rh => "rh",
            CoefKey::TOutsideAvg => "t_outside_avg",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        [
            CoefKey::Alpha,
            CoefKey::AlphaDs1,
            CoefKey::AlphaDs2,
            CoefKey::AlphaDs3,
            CoefKey::TIndoor,
            CoefKey::LogCo2,
            CoefKey::Rh,
            CoefKey::TOutsideAvg,
        ]
        .into_iter()
        .find(|k| k.as_str() == raw)
    }

    pub fn from_term(term: Term) -> Self {
        match term {
            Term::TIndoor => CoefKey::TIndoor,
            Term::LogCo2 => CoefKey::LogCo2,
            Term::Rh => CoefKey::Rh,
            Term::TOutsideAvg => CoefKey::TOutsideAvg,
        }
    }

    pub fn as_term(&self) -> Option<Term> {
        match self {
            CoefKey::TIndoor => Some(Term::TIndoor),
            CoefKey::LogCo2 => Some(Term::LogCo2),
            CoefKey::Rh => Some(Term::Rh),
            CoefKey::TOutsideAvg => Some(Term::TOutsideAvg),
        _ => None,
        }
    }

    pub fn is_intercept(&self) -> bool {
        matches!(
            self,
            CoefKey::Alpha | CoefKey::AlphaDs1 | CoefKey::AlphaDs2 | CoefKey::AlphaDs3
        )
    }
}

impl fmt::Display for CoefKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn segment_key(segment: DaySegment) -> CoefKey {
    match segment {
        DaySegment::Ds1 => CoefKey::AlphaDs1,
        DaySegment::Ds2 => CoefKey::AlphaDs2,
        DaySegment::Ds3 => CoefKey::AlphaDs3,
    }
}

/// Which predictors enter the model. When `segment_term` is set, three
/// per-segment intercepts replace the single global intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ModelSpec {
    pub numeric_terms: std::collections::BTreeSet<Term>,
    pub segment_term: bool,
}

impl ModelSpec {
    pub fn intercept_only() -> Self {
        Self::default()
    }

    pub fn new(numeric_terms: impl IntoIterator<Item = Term>, segment_term: bool) -> Self {
        Self {
            numeric_terms: numeric_terms.into_iter().collect(),
            segment_term,
        }
    }

    /// Ordered coefficient keys: the intercept block, then numeric terms.
    pub fn coef_keys(&self) -> Vec<CoefKey> {
        let mut keys = if self.segment_term {
            vec![CoefKey::AlphaDs1, CoefKey::AlphaDs2, CoefKey::AlphaDs3]
        } else {
            vec![CoefKey::Alpha]
        };
        keys.extend(self.numeric_terms.iter().map(|&t| CoefKey::from_term(t)));
        keys
    }

    pub fn n_params(&self) -> usize {
        self.numeric_terms.len() + if self.segment_term { 3 } else { 1 }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<&str> = self.numeric_terms.iter().map(|t| t.as_str()).collect();
        if self.segment_term {
            parts.push("segment");
        }
        if parts.is_empty() {
            f.write_str("intercept-only")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

/// Per-class observation weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_pos: f64,
    pub w_neg: f64,
}

impl ClassWeights {
    pub fn unit() -> Self {
        Self {
            w_pos: 1.0,
            w_neg: 1.0,
        }
    }

    pub fn weight_for(&self, label: bool) -> f64 {
        if label {
            self.w_pos
        } else {
            self.w_neg
        }
    }
}

/// Weighting policy used by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    None,
    #[default]
    Balanced,
}

/// Balanced weights: `w_c = n_total / (2 * n_c)`, so each class carries the
/// same total weighted mass.
pub fn balanced_weights(ds: &Dataset) -> Result<ClassWeights, FitError> {
    let n_pos = ds.n_positive();
    let n_neg = ds.n_negative();
    if n_pos == 0 || n_neg == 0 {
        return Err(FitError::InvalidInput(
            "balanced weights need both classes present".into(),
        ));
    }
    let n = ds.len() as f64;
    Ok(ClassWeights {
        w_pos: n / (2.0 * n_pos as f64),
        w_neg: n / (2.0 * n_neg as f64),
    })
}

/// Resolves a weighting policy against a dataset.
pub fn class_weights(ds: &Dataset, weighting: Weighting) -> Result<ClassWeights, FitError> {
    match weighting {
        Weighting::None => Ok(ClassWeights::unit()),
        Weighting::Balanced => balanced_weights(ds),
    }
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("design matrix is rank deficient (rank {rank} of {dim} columns)")]
    SingularDesign { rank: usize, dim: usize },
    #[error("quasi-separation detected: |eta| exceeded {cap} at the optimum")]
    Separation { cap: f64, model: Box<FittedModel> },
    #[error("dataset lacks term `{0}` required by the model")]
    MissingTerm(Term),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("missing value for model term `{0}`")]
    MissingTerm(String),
}

/// A fitted logistic model.
///
/// `coefficients` maximize the weighted likelihood. `log_likelihood` (and
/// through it `aic`) is the unweighted log-likelihood evaluated at the
/// weighting-corrected coefficients — see
/// [`FittedModel::corrected_coefficients`] — so model comparison is not
/// distorted by the weighting scheme. With equal weights the correction
/// vanishes and this is the ordinary maximized log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub action: ActionKind,
    pub coefficients: BTreeMap<CoefKey, f64>,
    /// Row-major covariance over `spec.coef_keys()` order.
    pub covariance: Vec<f64>,
    pub log_likelihood: f64,
    pub aic: f64,
    pub n_params: usize,
    pub scaling: Option<ScalingParams>,
    pub converged: bool,
    pub iterations: usize,
    pub weights: ClassWeights,
    /// Weighted deviance after each accepted IRLS step.
    pub deviance_trace: Vec<f64>,
    /// Final pass snapshot for seeding follow-up fits (selection only).
    pub(crate) warm_state: Option<std::sync::Arc<WarmState>>,
}

impl FittedModel {
    /// Builds a model from known coefficients, e.g. a loaded artifact.
    pub fn from_coefficients(
        action: ActionKind,
        coefficients: BTreeMap<CoefKey, f64>,
        scaling: Option<ScalingParams>,
    ) -> Result<Self, FitError> {
        let segment_term = coefficients.contains_key(&CoefKey::AlphaDs1)
            || coefficients.contains_key(&CoefKey::AlphaDs2)
            || coefficients.contains_key(&CoefKey::AlphaDs3);
        if segment_term && coefficients.contains_key(&CoefKey::Alpha) {
            return Err(FitError::InvalidInput(
                "coefficients mix a global intercept with segment intercepts".into(),
            ));
        }
        if segment_term
            && !(coefficients.contains_key(&CoefKey::AlphaDs1)
                && coefficients.contains_key(&CoefKey::AlphaDs2)
                && coefficients.contains_key(&CoefKey::AlphaDs3))
        {
            return Err(FitError::InvalidInput(
                "segment intercepts require all three alpha_ds* values".into(),
            ));
        }
        if !segment_term && !coefficients.contains_key(&CoefKey::Alpha) {
            return Err(FitError::InvalidInput("missing intercept".into()));
        }
        let numeric_terms = coefficients.keys().filter_map(|k| k.as_term()).collect();
        let spec = ModelSpec {
            numeric_terms,
            segment_term,
        };
        let p = spec.n_params();
        Ok(Self {
            spec,
            action,
            coefficients,
            covariance: vec![0.0; p * p],
            log_likelihood: f64::NAN,
            aic: f64::NAN,
            n_params: p,
            scaling,
            converged: true,
            iterations: 0,
            weights: ClassWeights::unit(),
            deviance_trace: Vec::new(),
            warm_state: None,
        })
    }

    /// Coefficients ordered to match `spec.coef_keys()`.
    pub fn coefficient_vector(&self) -> Vec<f64> {
        self.spec
            .coef_keys()
            .iter()
            .map(|k| self.coefficients.get(k).copied().unwrap_or(0.0))
            .collect()
    }

    /// Shift a class-weighted fit leaves on every intercept:
    /// `ln(w_pos / w_neg)`. Zero for equal weights.
    pub fn intercept_shift(&self) -> f64 {
        (self.weights.w_pos / self.weights.w_neg).ln()
    }

    /// Coefficients on the unweighted (population) scale: intercepts are
    /// corrected by [`Self::intercept_shift`], slopes are untouched.
    pub fn corrected_coefficients(&self) -> BTreeMap<CoefKey, f64> {
        let shift = self.intercept_shift();
        self.coefficients
            .iter()
            .map(|(&key, &value)| {
                let corrected = if key.is_intercept() { value - shift } else { value };
                (key, corrected)
            })
            .collect()
    }

    /// Probability for a single observation given as term values plus a
    /// segment (required when the model uses per-segment intercepts).
    pub fn predict_probability(
        &self,
        values: &BTreeMap<Term, f64>,
        segment: Option<DaySegment>,
    ) -> Result<f64, PredictError> {
        let mut eta = if self.spec.segment_term {
            let segment =
                segment.ok_or_else(|| PredictError::MissingTerm("segment".to_string()))?;
            self.coefficients[&segment_key(segment)]
        } else {
            self.coefficients[&CoefKey::Alpha]
        };
        for &term in &self.spec.numeric_terms {
            let x = values
                .get(&term)
                .copied()
                .ok_or_else(|| PredictError::MissingTerm(term.to_string()))?;
            eta += self.coefficients[&CoefKey::from_term(term)] * x;
        }
        Ok(sigmoid(eta))
    }

    /// Probabilities for every row of a dataset.
    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<f64>, PredictError> {
        let design = Design::build(ds, &self.spec)
            .map_err(|e| PredictError::MissingTerm(e.to_string()))?;
        let beta = self.coefficient_vector();
        Ok((0..design.n)
            .map(|i| sigmoid(design.eta(i, &beta)))
            .collect())
    }
}

/// Logistic function evaluated branch-wise so that `sigmoid(-z)` and
/// `1 - sigmoid(z)` agree to within one ulp for all `z`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Design {
    n: usize,
    p: usize,
    /// Row-major `n x p`.
    x: Vec<f64>,
}

impl Design {
    fn build(ds: &Dataset, spec: &ModelSpec) -> Result<Self, FitError> {
        Self::build_into(ds, spec, Vec::new())
    }

    /// Builds into a recycled buffer to spare repeated large allocations
    /// during stepwise search.
    fn build_into(ds: &Dataset, spec: &ModelSpec, mut x: Vec<f64>) -> Result<Self, FitError> {
        let keys = spec.coef_keys();
        let p = keys.len();
        let n = ds.len();
        x.clear();
        x.resize(n * p, 0.0);
        for (j, key) in keys.iter().enumerate() {
            match key {
                CoefKey::Alpha => {
                    for i in 0..n {
                        x[i * p + j] = 1.0;
                    }
                }
                CoefKey::AlphaDs1 | CoefKey::AlphaDs2 | CoefKey::AlphaDs3 => {
                    let target = match key {
                        CoefKey::AlphaDs1 => DaySegment::Ds1,
                        CoefKey::AlphaDs2 => DaySegment::Ds2,
                        _ => DaySegment::Ds3,
                    };
                    for (i, &seg) in ds.segments().iter().enumerate() {
                        x[i * p + j] = if seg == target { 1.0 } else { 0.0 };
                    }
                }
                numeric => {
                    let term = numeric.as_term().expect("numeric key");
                    let col = ds.feature(term).ok_or(FitError::MissingTerm(term))?;
                    for i in 0..n {
                        x[i * p + j] = col[i];
                    }
                }
            }
        }
        Ok(Self { n, p, x })
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    fn eta(&self, i: usize, beta: &[f64]) -> f64 {
        self.row(i)
            .iter()
            .zip(beta)
            .map(|(x, b)| x * b)
            .sum()
    }
}

fn row_weights(ds: &Dataset, w: &ClassWeights) -> Vec<f64> {
    ds.labels().iter().map(|&y| w.weight_for(y)).collect()
}

/// Weighted Bernoulli log-likelihood at explicit coefficients:
/// `sum_i w(y_i) * (y_i ln p_i + (1 - y_i) ln(1 - p_i))` with probabilities
/// clamped to `[1e-12, 1 - 1e-12]`.
pub fn log_likelihood(
    spec: &ModelSpec,
    coefficients: &BTreeMap<CoefKey, f64>,
    ds: &Dataset,
    w: &ClassWeights,
) -> Result<f64, FitError> {
    let design = Design::build(ds, spec)?;
    let beta: Vec<f64> = spec
        .coef_keys()
        .iter()
        .map(|k| coefficients.get(k).copied().unwrap_or(0.0))
        .collect();
    let mut total = 0.0;
    for (i, &y) in ds.labels().iter().enumerate() {
        let p = sigmoid(design.eta(i, &beta)).clamp(PROB_EPS, 1.0 - PROB_EPS);
        let term = if y { p.ln() } else { (1.0 - p).ln() };
        total += w.weight_for(y) * term;
    }
    Ok(total)
}

/// Analytic gradient of [`log_likelihood`] with respect to the coefficient
/// vector in `spec.coef_keys()` order: `X^T (w .* (y - p))`.
pub fn log_likelihood_gradient(
    spec: &ModelSpec,
    coefficients: &BTreeMap<CoefKey, f64>,
    ds: &Dataset,
    w: &ClassWeights,
) -> Result<Vec<f64>, FitError> {
    let design = Design::build(ds, spec)?;
    let beta: Vec<f64> = spec
        .coef_keys()
        .iter()
        .map(|k| coefficients.get(k).copied().unwrap_or(0.0))
        .collect();
    let mut grad = vec![0.0; design.p];
    for (i, &y) in ds.labels().iter().enumerate() {
        let p = sigmoid(design.eta(i, &beta));
        let r = w.weight_for(y) * ((y as u8 as f64) - p);
        for (g, x) in grad.iter_mut().zip(design.row(i)) {
            *g += r * x;
        }
    }
    Ok(grad)
}

/// Solver controls for [`fit`].
#[derive(Debug, Clone, Default)]
pub struct FitControl {
    /// Relative deviance-change convergence threshold. Zero uses 1e-8.
    pub tol: f64,
    /// Iteration cap. Zero uses 100.
    pub max_iter: usize,
    /// Warm-start coefficients; missing keys start at zero, and intercept
    /// keys fall back across the single/per-segment parameterizations.
    pub init: Option<BTreeMap<CoefKey, f64>>,
    /// |eta| threshold for the separation guard. Zero uses 30.
    pub separation_cap: f64,
}

impl FitControl {
    fn tol(&self) -> f64 {
        if self.tol > 0.0 {
            self.tol
        } else {
            1e-8
        }
    }

    fn max_iter(&self) -> usize {
        if self.max_iter > 0 {
            self.max_iter
        } else {
            100
        }
    }

    fn cap(&self) -> f64 {
        if self.separation_cap > 0.0 {
            self.separation_cap
        } else {
            30.0
        }
    }
}

fn initial_beta(spec: &ModelSpec, ctrl: &FitControl, ds: &Dataset, w: &ClassWeights) -> Vec<f64> {
    let keys = spec.coef_keys();
    let Some(init) = &ctrl.init else {
        // Cold start: intercepts at the logit of the weighted prevalence,
        // slopes at zero. Saves an IRLS iteration or two over all-zeros.
        let pos_mass = w.w_pos * ds.n_positive() as f64;
        let neg_mass = w.w_neg * ds.n_negative() as f64;
        let prevalence = (pos_mass / (pos_mass + neg_mass)).clamp(1e-6, 1.0 - 1e-6);
        let alpha0 = (prevalence / (1.0 - prevalence)).ln();
        return keys
            .iter()
            .map(|k| if k.is_intercept() { alpha0 } else { 0.0 })
            .collect();
    };
    let alpha_fallback = || {
        let alphas: Vec<f64> = [CoefKey::AlphaDs1, CoefKey::AlphaDs2, CoefKey::AlphaDs3]
            .iter()
            .filter_map(|k| init.get(k).copied())
            .collect();
        if alphas.is_empty() {
            0.0
        } else {
            alphas.iter().sum::<f64>() / alphas.len() as f64
        }
    };
    keys.iter()
        .map(|key| match init.get(key) {
            Some(&v) => v,
            None if key.is_intercept() => match key {
                CoefKey::Alpha => alpha_fallback(),
                _ => init.get(&CoefKey::Alpha).copied().unwrap_or(0.0),
            },
            None => 0.0,
        })
        .collect()
}

/// Per-pass accumulators: weighted deviance plus the Newton ingredients at
/// the same coefficients.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PassState {
    dev: f64,
    max_abs_eta: f64,
    info: Vec<f64>,
    grad: Vec<f64>,
    prob: Vec<f64>,
}

impl PassState {
    fn new(n: usize, p: usize) -> Self {
        Self {
            dev: 0.0,
            max_abs_eta: 0.0,
            info: vec![0.0; p * p],
            grad: vec![0.0; p],
            prob: vec![0.0; n],
        }
    }
}

/// A converged fit's final pass, kept so that a follow-up fit over a
/// superset of columns can skip its seeding pass: starting the new
/// coefficients at zero leaves every row's linear predictor unchanged, so
/// probabilities and deviance carry over and only the entries involving
/// new columns need computing.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct WarmState {
    keys: Vec<CoefKey>,
    beta: Vec<f64>,
    state: PassState,
}

/// Recycled buffers for back-to-back fits on one dataset.
#[derive(Debug, Default)]
pub(crate) struct FitScratch {
    design: Vec<f64>,
    trial_prob: Vec<f64>,
}

/// One fused pass over the rows: fills deviance, probabilities, gradient,
/// and the weighted information matrix at `beta`.
///
/// The intercept block is handled through per-row bank indices (`banks[i]`
/// names the row's intercept column): the indicator columns are one-hot,
/// so each row touches only its own bank's accumulators and the dense
/// update runs over just the numeric columns. Monomorphized over the
/// numeric count so the inner loops unroll.
fn fused_pass(
    design: &Design,
    banks: &[u8],
    bwidth: usize,
    labels: &[bool],
    wrow: &[f64],
    beta: &[f64],
    out: &mut PassState,
) {
    let numeric = design.p - bwidth;
    macro_rules! dispatch {
        ($($k:literal),*) => {
            match numeric {
                $($k => fused_pass_banked::<$k>(design, banks, bwidth, labels, wrow, beta, out),)*
                _ => fused_pass_generic(design, labels, wrow, beta, out),
            }
        };
    }
    dispatch!(0, 1, 2, 3, 4)
}

/// First half of the row kernel: everything up to the shared reciprocal.
/// `den` is the product of the two denominators the row needs (softplus
/// argument and probability), so a whole pair of rows can share a single
/// division. Branch-free throughout: labels and linear-predictor signs are
/// effectively random, so data-dependent branches would mispredict half
/// the time.
#[derive(Clone, Copy)]
struct RowKernel {
    a: f64,
    e: f64,
    c: f64,
    sign: f64,
    den: f64,
}

#[inline(always)]
fn row_kernel_prep(eta: f64) -> RowKernel {
    let a = -eta.abs();
    let e = fast::exp_nonpos(a);
    // softplus(a) = ln(1 + e) via 2 atanh(s), halving arguments above
    // sqrt(2): with c the halving flag, s = (e - c) / (e + 2 + c). The
    // probability needs e / (1 + e); both quotients come from one
    // reciprocal of the product denominator.
    let c = (e > fast::SQRT_2_M1) as u8 as f64;
    let den = (e + 2.0 + c) * (1.0 + e);
    RowKernel {
        a,
        e,
        c,
        sign: (eta >= 0.0) as u8 as f64,
        den,
    }
}

/// Second half: finish probability and log-likelihood given the reciprocal
/// of `den`.
#[inline(always)]
fn row_kernel_finish(k: RowKernel, recip: f64, y: bool) -> (f64, f64) {
    let s = (k.e - k.c) * (1.0 + k.e) * recip;
    let softplus = fast::LN_2 * k.c + fast::atanh2(s);
    let p_neg = k.e * (k.e + 2.0 + k.c) * recip;
    let p = p_neg + k.sign * (1.0 - 2.0 * p_neg);
    let yf = y as u8 as f64;
    // ln p when y = 1 and ln (1-p) when y = 0 collapse to one expression:
    // the |eta| term appears exactly when the label disagrees with the
    // predictor sign.
    let mismatch = k.sign + yf - 2.0 * k.sign * yf;
    (p, k.a * mismatch - softplus)
}

#[inline(always)]
fn row_prob_ll(eta: f64, y: bool) -> (f64, f64) {
    let k = row_kernel_prep(eta);
    row_kernel_finish(k, 1.0 / k.den, y)
}

/// Two rows are folded per accumulator visit, halving the traffic on the
/// stack-resident accumulators. `K` is the number of numeric columns; the
/// intercept block contributes through the bank index only.
#[inline(always)]
fn fused_pass_banked<const K: usize>(
    design: &Design,
    banks: &[u8],
    bwidth: usize,
    labels: &[bool],
    wrow: &[f64],
    beta: &[f64],
    out: &mut PassState,
) {
    let p = design.p;
    debug_assert_eq!(p, bwidth + K);
    debug_assert!(bwidth <= 3);
    let ln_prob_eps = PROB_EPS.ln();
    // Intercept-diagonal, intercept gradient, intercept-by-numeric cross
    // block, numeric information triangle, numeric gradient.
    let mut diag = [0.0_f64; 3];
    let mut g_int = [0.0_f64; 3];
    let mut cross = [[0.0_f64; K]; 3];
    let mut nmat = [[0.0_f64; K]; K];
    let mut g_num = [0.0_f64; K];
    let mut dev = 0.0;
    let mut max_eta_even = 0.0_f64;
    let mut max_eta_odd = 0.0_f64;
    let b_num: &[f64; K] = (&beta[bwidth..]).try_into().expect("beta length");
    let n = design.n;
    let paired = n / 2 * 2;

    for ((((chunk, prob2), w2), y2), bank2) in design.x[..paired * p]
        .chunks_exact(2 * p)
        .zip(out.prob[..paired].chunks_exact_mut(2))
        .zip(wrow[..paired].chunks_exact(2))
        .zip(labels[..paired].chunks_exact(2))
        .zip(banks[..paired].chunks_exact(2))
    {
        let nums0: &[f64; K] = (&chunk[bwidth..bwidth + K]).try_into().expect("row");
        let nums1: &[f64; K] = (&chunk[p + bwidth..p + bwidth + K]).try_into().expect("row");
        let (bank0, bank1) = (bank2[0] as usize, bank2[1] as usize);
        let mut eta0 = beta[bank0];
        let mut eta1 = beta[bank1];
        for k in 0..K {
            eta0 += nums0[k] * b_num[k];
            eta1 += nums1[k] * b_num[k];
        }
        max_eta_even = max_eta_even.max(eta0.abs());
        max_eta_odd = max_eta_odd.max(eta1.abs());
        // One division serves both rows of the pair.
        let k0 = row_kernel_prep(eta0);
        let k1 = row_kernel_prep(eta1);
        let shared = 1.0 / (k0.den * k1.den);
        let (p0, ll0) = row_kernel_finish(k0, shared * k1.den, y2[0]);
        let (p1, ll1) = row_kernel_finish(k1, shared * k0.den, y2[1]);
        prob2[0] = p0;
        prob2[1] = p1;
        dev -= 2.0 * (w2[0] * ll0.max(ln_prob_eps) + w2[1] * ll1.max(ln_prob_eps));
        let v0 = (w2[0] * p0 * (1.0 - p0)).max(WORK_WEIGHT_FLOOR);
        let v1 = (w2[1] * p1 * (1.0 - p1)).max(WORK_WEIGHT_FLOOR);
        let r0 = w2[0] * ((y2[0] as u8 as f64) - p0);
        let r1 = w2[1] * ((y2[1] as u8 as f64) - p1);
        diag[bank0] += v0;
        g_int[bank0] += r0;
        diag[bank1] += v1;
        g_int[bank1] += r1;
        for k in 0..K {
            let x0 = nums0[k];
            let x1 = nums1[k];
            let vk0 = v0 * x0;
            let vk1 = v1 * x1;
            cross[bank0][k] += vk0;
            cross[bank1][k] += vk1;
            g_num[k] += r0 * x0 + r1 * x1;
            for l in k..K {
                nmat[k][l] += vk0 * nums0[l] + vk1 * nums1[l];
            }
        }
    }
    if n % 2 == 1 {
        let i = n - 1;
        let row = design.row(i);
        let nums: &[f64; K] = (&row[bwidth..bwidth + K]).try_into().expect("row");
        let bank = banks[i] as usize;
        let mut eta = beta[bank];
        for k in 0..K {
            eta += nums[k] * b_num[k];
        }
        max_eta_even = max_eta_even.max(eta.abs());
        let (w, y) = (wrow[i], labels[i]);
        let (pi, ll) = row_prob_ll(eta, y);
        out.prob[i] = pi;
        dev -= 2.0 * w * ll.max(ln_prob_eps);
        let v = (w * pi * (1.0 - pi)).max(WORK_WEIGHT_FLOOR);
        let r = w * ((y as u8 as f64) - pi);
        diag[bank] += v;
        g_int[bank] += r;
        for k in 0..K {
            let vk = v * nums[k];
            cross[bank][k] += vk;
            g_num[k] += r * nums[k];
            for l in k..K {
                nmat[k][l] += vk * nums[l];
            }
        }
    }

    // Assemble the full symmetric information matrix and gradient. Cross
    // terms between different intercept banks are exactly zero because the
    // indicator columns are disjoint.
    out.info.fill(0.0);
    for s in 0..bwidth {
        out.grad[s] = g_int[s];
        out.info[s * p + s] = diag[s];
        for k in 0..K {
            let v = cross[s][k];
            out.info[s * p + bwidth + k] = v;
            out.info[(bwidth + k) * p + s] = v;
        }
    }
    for k in 0..K {
        out.grad[bwidth + k] = g_num[k];
        for l in k..K {
            let v = nmat[k][l];
            out.info[(bwidth + k) * p + (bwidth + l)] = v;
            out.info[(bwidth + l) * p + (bwidth + k)] = v;
        }
    }
    out.dev = dev;
    out.max_abs_eta = max_eta_even.max(max_eta_odd);
}

/// Polynomial kernels for the fitter's hot loop. Both are accurate to a
/// few 1e-14 relative, well inside the 1e-8 deviance tolerances the solver
/// works to; everything reported to callers is recomputed with `std` math.
mod fast {
    const LOG2_E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    pub(super) const LN_2: f64 = std::f64::consts::LN_2;
    /// sqrt(2) - 1, the halving cutoff for `ln(1 + e)` on `e` in `[0, 1]`.
    pub(super) const SQRT_2_M1: f64 = std::f64::consts::SQRT_2 - 1.0;

    /// Round-to-nearest-even without a libm call: adding and subtracting
    /// 1.5 * 2^52 forces the rounding in the FP unit. Valid for |x| < 2^51.
    #[inline(always)]
    fn round_magic(x: f64) -> f64 {
        const MAGIC: f64 = 6_755_399_441_055_744.0;
        (x + MAGIC) - MAGIC
    }

    /// `exp(x)` for `x <= 0`. Cody-Waite reduction with a degree-11
    /// Taylor tail; underflows to zero below the f64 range of interest.
    #[inline(always)]
    pub(super) fn exp_nonpos(x: f64) -> f64 {
        if x < -700.0 {
            return 0.0;
        }
        let k = round_magic(x * LOG2_E);
        let r = (x - k * LN2_HI) - k * LN2_LO;
        // Estrin-style split keeps the dependency chain short.
        let r2 = r * r;
        let r4 = r2 * r2;
        let q0 = 1.0 + r + r2 * (0.5 + r * 1.666_666_666_666_666_6e-1);
        let q1 = 4.166_666_666_666_666_4e-2
            + r * 8.333_333_333_333_333e-3
            + r2 * (1.388_888_888_888_889e-3 + r * 1.984_126_984_126_984e-4);
        let q2 = 2.480_158_730_158_73e-5
            + r * 2.755_731_922_398_589_3e-6
            + r2 * (2.755_731_922_398_589e-7 + r * 2.505_210_838_544_172e-8);
        let p = q0 + r4 * (q1 + r4 * q2);
        let ki = k as i64;
        if ki < -1000 {
            return 0.0;
        }
        let scale = f64::from_bits(((1023 + ki) as u64) << 52);
        p * scale
    }

    /// `2 atanh(s)` for `|s| <= sqrt(2) - 1 mapped range`, the odd series
    /// through `s^15`.
    #[inline(always)]
    pub(super) fn atanh2(s: f64) -> f64 {
        let z = s * s;
        s * (2.0
            + z * (6.666_666_666_666_666e-1
                + z * (0.4
                    + z * (2.857_142_857_142_857e-1
                        + z * (2.222_222_222_222_222e-1
                            + z * (1.818_181_818_181_818_2e-1
                                + z * (1.538_461_538_461_538_5e-1
                                    + z * 1.333_333_333_333_333_3e-1)))))))
    }

}

fn fused_pass_generic(
    design: &Design,
    labels: &[bool],
    wrow: &[f64],
    beta: &[f64],
    out: &mut PassState,
) {
    let p = design.p;
    out.info.fill(0.0);
    out.grad.fill(0.0);
    let mut dev = 0.0;
    let mut max_abs_eta = 0.0_f64;
    for i in 0..design.n {
        let row = design.row(i);
        let eta = design.eta(i, beta);
        max_abs_eta = max_abs_eta.max(eta.abs());
        let pi = sigmoid(eta);
        out.prob[i] = pi;
        let w = wrow[i];
        let y = labels[i];
        let pc = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
        dev -= 2.0 * w * if y { pc.ln() } else { (1.0 - pc).ln() };
        let v = (w * pi * (1.0 - pi)).max(WORK_WEIGHT_FLOOR);
        let r = w * ((y as u8 as f64) - pi);
        for a in 0..p {
            let xa = row[a];
            out.grad[a] += r * xa;
            let va = v * xa;
            for bcol in a..p {
                out.info[a * p + bcol] += va * row[bcol];
            }
        }
    }
    for a in 0..p {
        for bcol in 0..a {
            out.info[a * p + bcol] = out.info[bcol * p + a];
        }
    }
    out.dev = dev;
    out.max_abs_eta = max_abs_eta;
}

/// Maximizes the weighted log-likelihood by iteratively reweighted least
/// squares with step-halving. Convergence is a relative change in weighted
/// deviance below `tol`; hitting the iteration cap returns the partial model
/// with `converged = false`. The covariance is the inverse of the final
/// weighted information matrix.
pub fn fit(
    ds: &Dataset,
    spec: &ModelSpec,
    w: &ClassWeights,
    ctrl: &FitControl,
) -> Result<FittedModel, FitError> {
    fit_seeded(ds, spec, w, ctrl, None, false, None)
}

/// Maps the parent snapshot onto the new column layout when the starting
/// coefficients reproduce the parent's linear predictor exactly: shared
/// keys must start at the parent values, new numerics at zero, and a
/// single-intercept parent may expand to three equal segment intercepts.
/// Fills `state` and returns true on success.
fn try_apply_seed(
    ws: &WarmState,
    keys: &[CoefKey],
    design: &Design,
    labels: &[bool],
    wrow: &[f64],
    beta: &[f64],
    state: &mut PassState,
) -> bool {
    let p_new = keys.len();
    let p_old = ws.keys.len();
    if ws.state.prob.len() != design.n {
        return false;
    }
    let alpha_expansion = ws.keys.contains(&CoefKey::Alpha) && !keys.contains(&CoefKey::Alpha);
    let mut old_to_new: Vec<Option<usize>> = Vec::with_capacity(p_old);
    let mut copied = vec![false; p_new];
    for (i_old, key) in ws.keys.iter().enumerate() {
        if *key == CoefKey::Alpha && alpha_expansion {
            old_to_new.push(None);
            continue;
        }
        let Some(j) = keys.iter().position(|k| k == key) else {
            return false;
        };
        if beta[j] != ws.beta[i_old] {
            return false;
        }
        old_to_new.push(Some(j));
        copied[j] = true;
    }
    if alpha_expansion {
        let alpha_idx = ws.keys.iter().position(|k| *k == CoefKey::Alpha).unwrap();
        let alpha_old = ws.beta[alpha_idx];
        for ds_key in [CoefKey::AlphaDs1, CoefKey::AlphaDs2, CoefKey::AlphaDs3] {
            let Some(j) = keys.iter().position(|k| *k == ds_key) else {
                return false;
            };
            if beta[j] != alpha_old {
                return false;
            }
        }
    }
    for (j, &was_copied) in copied.iter().enumerate() {
        if !was_copied {
            let starts_at_zero = beta[j] == 0.0;
            let is_expanded_alpha = alpha_expansion && keys[j].is_intercept();
            if !starts_at_zero && !is_expanded_alpha {
                return false;
            }
        }
    }

    // Linear predictors match the parent's, so probabilities, deviance,
    // and the eta bound carry over unchanged.
    state.prob.copy_from_slice(&ws.state.prob);
    state.dev = ws.state.dev;
    state.max_abs_eta = ws.state.max_abs_eta;
    state.info.fill(0.0);
    state.grad.fill(0.0);
    for (i_old, &target_a) in old_to_new.iter().enumerate() {
        let Some(a) = target_a else { continue };
        state.grad[a] = ws.state.grad[i_old];
        for (j_old, &target_c) in old_to_new.iter().enumerate() {
            if let Some(c) = target_c {
                state.info[a * p_new + c] = ws.state.info[i_old * p_old + j_old];
            }
        }
    }

    // One cheap pass fills every entry touching a new column; no
    // transcendentals are needed because the probabilities are known.
    let new_cols: Vec<usize> = (0..p_new).filter(|&j| !copied[j]).collect();
    for i in 0..design.n {
        let row = design.row(i);
        let pi = state.prob[i];
        let wr = wrow[i];
        let v = (wr * pi * (1.0 - pi)).max(WORK_WEIGHT_FLOOR);
        let r = wr * ((labels[i] as u8 as f64) - pi);
        for &j in &new_cols {
            let xj = row[j];
            if xj == 0.0 {
                continue;
            }
            state.grad[j] += r * xj;
            let vj = v * xj;
            for c in 0..p_new {
                state.info[j * p_new + c] += vj * row[c];
            }
        }
    }
    // Mirror the freshly computed rows onto their columns.
    for &j in &new_cols {
        for c in 0..p_new {
            if !new_cols.contains(&c) {
                state.info[c * p_new + j] = state.info[j * p_new + c];
            }
        }
    }
    true
}

pub(crate) fn fit_seeded(
    ds: &Dataset,
    spec: &ModelSpec,
    w: &ClassWeights,
    ctrl: &FitControl,
    warm: Option<&WarmState>,
    keep_state: bool,
    mut scratch: Option<&mut FitScratch>,
) -> Result<FittedModel, FitError> {
    if ds.is_empty() {
        return Err(FitError::InvalidInput("empty dataset".into()));
    }
    if ds.n_positive() == 0 || ds.n_negative() == 0 {
        return Err(FitError::InvalidInput(
            "both classes must be present".into(),
        ));
    }
    if !(w.w_pos > 0.0 && w.w_neg > 0.0 && w.w_pos.is_finite() && w.w_neg.is_finite()) {
        return Err(FitError::InvalidInput("weights must be positive".into()));
    }

    let design_buf = scratch
        .as_mut()
        .map(|s| std::mem::take(&mut s.design))
        .unwrap_or_default();
    let design = Design::build_into(ds, spec, design_buf)?;
    let n = design.n;
    let p = design.p;
    let labels = ds.labels();
    let wrow = row_weights(ds, w);
    let keys = spec.coef_keys();

    // Intercept bank per row: a single global intercept is bank 0, the
    // per-segment parameterization maps DS1/DS2/DS3 onto banks 0/1/2
    // matching the column order.
    let bwidth = if spec.segment_term { 3 } else { 1 };
    let banks: Vec<u8> = if spec.segment_term {
        ds.segments()
            .iter()
            .map(|s| match s {
                DaySegment::Ds1 => 0,
                DaySegment::Ds2 => 1,
                DaySegment::Ds3 => 2,
            })
            .collect()
    } else {
        vec![0; n]
    };

    let mut beta = initial_beta(spec, ctrl, ds, w);
    let mut state = PassState::new(n, p);
    let seeded = warm
        .map(|ws| try_apply_seed(ws, &keys, &design, labels, &wrow, &beta, &mut state))
        .unwrap_or(false);
    if !seeded {
        fused_pass(&design, &banks, bwidth, labels, &wrow, &beta, &mut state);
    }
    let mut trial_prob = scratch
        .as_mut()
        .map(|s| std::mem::take(&mut s.trial_prob))
        .unwrap_or_default();
    trial_prob.clear();
    trial_prob.resize(n, 0.0);
    let mut trial = PassState {
        dev: 0.0,
        max_abs_eta: 0.0,
        info: vec![0.0; p * p],
        grad: vec![0.0; p],
        prob: trial_prob,
    };
    let mut trace = vec![state.dev];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=ctrl.max_iter() {
        iterations = iter;
        let chol = PivotedCholesky::new(&state.info, p)
            .map_err(|e| FitError::SingularDesign { rank: e.rank, dim: p })?;
        let delta = chol.solve(&state.grad);

        let slack = 1e-12 * (1.0 + state.dev.abs());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=20 {
            let candidate: Vec<f64> = beta
                .iter()
                .zip(&delta)
                .map(|(b, d)| b + step * d)
                .collect();
            fused_pass(&design, &banks, bwidth, labels, &wrow, &candidate, &mut trial);
            if trial.dev <= state.dev + slack {
                beta = candidate;
                std::mem::swap(&mut state, &mut trial);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Step-halving stalled; keep the previous iterate.
            break;
        }
        let rel = (trial.dev - state.dev).abs() / (state.dev.abs() + 1e-10);
        trace.push(state.dev);
        if rel < ctrl.tol() {
            converged = true;
            break;
        }
    }

    // `state` holds the information matrix and probabilities at the final
    // accepted coefficients.
    let separated = state.max_abs_eta > ctrl.cap();
    let covariance = match PivotedCholesky::new(&state.info, p) {
        Ok(chol) => chol.inverse(),
        Err(_) if separated => {
            // Saturated weights can make the information matrix numerically
            // singular; the separation error below carries the capped model.
            vec![f64::NAN; p * p]
        }
        Err(e) => return Err(FitError::SingularDesign { rank: e.rank, dim: p }),
    };

    // Unweighted log-likelihood at the weighting-corrected coefficients
    // feeds AIC, so model comparison stays on the population scale whatever
    // the weights. The shift is zero for equal weights, in which case this
    // is the plain log-likelihood at the fitted coefficients.
    let shift = (w.w_pos / w.w_neg).ln();
    let mut unweighted_ll = 0.0;
    if shift == 0.0 {
        for (i, &y) in labels.iter().enumerate() {
            let pc = state.prob[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
            unweighted_ll += if y { pc.ln() } else { (1.0 - pc).ln() };
        }
    } else {
        for (i, &y) in labels.iter().enumerate() {
            let pc = sigmoid(design.eta(i, &beta) - shift).clamp(PROB_EPS, 1.0 - PROB_EPS);
            unweighted_ll += if y { pc.ln() } else { (1.0 - pc).ln() };
        }
    }

    if let Some(s) = scratch {
        s.design = design.x;
        s.trial_prob = trial.prob;
    }

    let coefficients: BTreeMap<CoefKey, f64> =
        keys.iter().copied().zip(beta.iter().copied()).collect();
    let warm_state = keep_state.then(|| {
        std::sync::Arc::new(WarmState {
            keys: keys.clone(),
            beta: beta.clone(),
            state,
        })
    });
    let model = FittedModel {
        spec: spec.clone(),
        action: ds.action(),
        coefficients,
        covariance,
        log_likelihood: unweighted_ll,
        aic: compute_aic(p, unweighted_ll),
        n_params: p,
        scaling: ds.scaling().cloned(),
        converged,
        iterations,
        weights: *w,
        deviance_trace: trace,
        warm_state,
    };

    if separated {
        return Err(FitError::Separation {
            cap: ctrl.cap(),
            model: Box::new(model),
        });
    }
    Ok(model)
}

/// `AIC = 2k - 2 ln L`.
pub fn compute_aic(n_params: usize, log_likelihood: f64) -> f64 {
    2.0 * n_params as f64 - 2.0 * log_likelihood
}

/// AIC of a fitted model.
pub fn aic(model: &FittedModel) -> f64 {
    model.aic
}

/// One Wald confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldInterval {
    pub lo: f64,
    pub hi: f64,
    /// Set when the standard error is zero and the interval collapses.
    pub degenerate: bool,
}

impl WaldInterval {
    pub fn contains(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }
}

/// Wald intervals `coef ± z_{(1+level)/2} * se` from the model covariance.
pub fn wald_ci(
    model: &FittedModel,
    level: f64,
) -> Result<BTreeMap<CoefKey, WaldInterval>, FitError> {
    if !(0.0 < level && level < 1.0) {
        return Err(FitError::InvalidInput(format!(
            "confidence level {level} must lie in (0, 1)"
        )));
    }
    let keys = model.spec.coef_keys();
    let p = keys.len();
    let z = normal_quantile(0.5 * (1.0 + level));
    let mut out = BTreeMap::new();
    for (i, key) in keys.iter().enumerate() {
        let var = model.covariance[i * p + i];
        if !var.is_finite() || var < 0.0 {
            return Err(FitError::InvalidInput(format!(
                "covariance for {key} is not finite"
            )));
        }
        let se = var.sqrt();
        let coef = model.coefficients[key];
        out.insert(
            *key,
            WaldInterval {
                lo: coef - z * se,
                hi: coef + z * se,
                degenerate: se == 0.0,
            },
        );
    }
    Ok(out)
}

/// Standard normal quantile (inverse CDF), Wichura's AS 241 double-precision
/// rational approximations.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile defined on (0, 1), got {p}");
    // Coefficients listed from the constant term upward.
    fn horner(coeffs: &[f64], x: f64) -> f64 {
        coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = horner(
            &[
                3.387_132_872_796_366_5,
                1.331_416_678_917_843_8e2,
                1.971_590_950_306_551_3e3,
                1.373_169_376_550_946e4,
                4.592_195_393_154_987e4,
                6.726_577_092_700_87e4,
                3.343_057_558_358_813e4,
                2.509_080_928_730_122_7e3,
            ],
            r,
        );
        let den = horner(
            &[
                1.0,
                4.231_333_070_160_091e1,
                6.871_870_074_920_579e2,
                5.394_196_021_424_751e3,
                2.121_379_430_158_659_7e4,
                3.930_789_580_009_271e4,
                2.872_908_573_572_194_3e4,
                5.226_495_278_852_545_5e3,
            ],
            r,
        );
        return q * num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        let num = horner(
            &[
                1.423_437_110_749_683_5,
                4.630_337_846_156_545,
                5.769_497_221_460_691,
                3.647_848_324_763_204_5,
                1.270_458_252_452_368_4,
                2.417_807_251_774_506e-1,
                2.272_384_498_926_918_4e-2,
                7.745_450_142_783_414e-4,
            ],
            r,
        );
        let den = horner(
            &[
                1.0,
                2.053_191_626_637_758_8,
                1.676_384_830_183_803_8,
                6.897_673_349_851e-1,
                1.481_039_764_274_800_8e-1,
                1.519_866_656_361_645_7e-2,
                5.475_938_084_995_345e-4,
                1.050_750_071_644_416_9e-9,
            ],
            r,
        );
        num / den
    } else {
        let r = r - 5.0;
        let num = horner(
            &[
                6.657_904_643_501_103,
                5.463_784_911_164_114,
                1.784_826_539_917_291_3,
                2.965_605_718_285_048_9e-1,
                2.653_218_952_657_612_4e-2,
                1.242_660_947_388_078_4e-3,
                2.711_555_568_743_487_6e-5,
                2.010_334_399_292_288_1e-7,
            ],
            r,
        );
        let den = horner(
            &[
                1.0,
                5.998_322_065_558_88e-1,
                1.369_298_809_227_358e-1,
                1.487_536_129_085_061_5e-2,
                7.868_691_311_456_133e-4,
                1.846_318_317_510_054_8e-5,
                1.421_511_758_316_446e-7,
                2.044_263_103_389_939_8e-15,
            ],
            r,
        );
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}
