//! Explicit constants behind the existence, a priori and contraction
//! conditions for delay BSDEs, and a grid search for admissible `(β, γ)`.
//!
//! Notation: `K` is the squared Lipschitz constant of the generator,
//! `ᾱ = max(α_Y[-T,0), α_Z[-T,0))`, `L = K·ᾱ` and
//! `α̃(β) = max(∫e^{-βs}α_Y(ds), ∫e^{-βs}α_Z(ds))`.

use std::str::FromStr;

use serde::Serialize;

use crate::delay_measure::DelayMeasure;
use crate::error::{Error, Result};

/// Structural data entering every constant.
#[derive(Debug, Clone)]
pub struct StructuralParams {
    pub k: f64,
    pub horizon: f64,
    pub p: f64,
    pub m: usize,
    pub alpha_y: DelayMeasure,
    pub alpha_z: DelayMeasure,
    pub beta: f64,
    pub gamma: f64,
}

impl StructuralParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 2.0) {
            return Err(Error::InvalidParameter(format!("p must be at least 2, got {}", self.p)));
        }
        if self.m == 0 {
            return Err(Error::InvalidParameter("dimension m must be positive".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.k >= 0.0) {
            return Err(Error::InvalidParameter(format!("K must be nonnegative, got {}", self.k)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be nonnegative, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn lipschitz_l(&self) -> f64 {
        self.k * alpha_bar(&self.alpha_y, &self.alpha_z)
    }

    pub fn alpha_tilde(&self) -> f64 {
        alpha_tilde(&self.alpha_y, &self.alpha_z, self.beta)
    }

    pub fn with_beta_gamma(&self, beta: f64, gamma: f64) -> Self {
        Self { beta, gamma, ..self.clone() }
    }
}

pub fn alpha_bar(alpha_y: &DelayMeasure, alpha_z: &DelayMeasure) -> f64 {
    alpha_y.total_mass().max(alpha_z.total_mass())
}

pub fn alpha_tilde(alpha_y: &DelayMeasure, alpha_z: &DelayMeasure, beta: f64) -> f64 {
    alpha_y.exp_weighted_mass(beta).max(alpha_z.exp_weighted_mass(beta))
}

/// Burkholder–Davis–Gundy constant `d_{p/2} = m^{p/2+1} (p/(p-1))^{p²/2} (p(p-1)/2)^{p/2}`.
pub fn bdg_constant(p: f64, m: usize) -> Result<f64> {
    if !(p > 2.0) {
        return Err(Error::InvalidParameter("d_{p/2} defined for p>2 only".into()));
    }
    if m == 0 {
        return Err(Error::InvalidParameter("dimension m must be positive".into()));
    }
    let m = m as f64;
    Ok(m.powf(p / 2.0 + 1.0) * (p / (p - 1.0)).powf(p * p / 2.0) * (p * (p - 1.0) / 2.0).powf(p / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DConstants {
    pub d1: f64,
    pub d2: f64,
    /// Only defined for `p > 2`; `-∞` on the singular boundary `γ <= α̃L`.
    pub d3: Option<f64>,
}

pub fn d_constants(params: &StructuralParams) -> Result<DConstants> {
    params.validate()?;
    if !(params.gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {}", params.gamma)));
    }
    let (p, gamma) = (params.p, params.gamma);
    let al = params.alpha_tilde() * params.lipschitz_l();
    let d1 = params.beta - gamma - al / gamma;
    let d2 = 1.0 - al / gamma;
    let d3 = if p > 2.0 {
        if gamma <= al || d2 <= 0.0 {
            Some(f64::NEG_INFINITY)
        } else {
            let d = bdg_constant(p, params.m)?;
            let half = p / 2.0;
            let ratio = p / (p - 2.0);
            Some(
                1.0 - 2f64.powf(4.0 * p - 4.0)
                    * d
                    * d
                    * ratio.powf(half)
                    * (al / (gamma - al)).powf(half)
                    * d2.powf(-half)
                    - (al / gamma * params.horizon).powf(half) * ratio.powf(half) * 2f64.powf(p - 2.0),
            )
        }
    } else {
        None
    };
    Ok(DConstants { d1, d2, d3 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CpConstants {
    pub gamma3: f64,
    pub cp1: f64,
    pub cp2: f64,
    pub cp3: f64,
    pub cp4: f64,
    pub cp: f64,
}

/// `γ₃`, `C_p¹..C_p⁴` and `C_p = max(C_p¹ + C_p³, C_p² + C_p⁴)` of the `p > 2`
/// a priori estimate, transcribed term by term.
pub fn cp_constant(params: &StructuralParams) -> Result<CpConstants> {
    let p = params.p;
    if !(p > 2.0) {
        return Err(Error::InvalidParameter("C_p defined for p>2 only".into()));
    }
    let DConstants { d2, d3, .. } = d_constants(params)?;
    let d3 = d3.unwrap_or(f64::NEG_INFINITY);
    if !(d2 > 0.0) || !(d3 > 0.0) {
        return Err(Error::Infeasible(format!(
            "a priori estimate infeasible at (β,γ)=({}, {}): D2={d2}, D3={d3}",
            params.beta, params.gamma
        )));
    }
    let gamma = params.gamma;
    let al = params.alpha_tilde() * params.lipschitz_l();
    let d = bdg_constant(p, params.m)?;
    let half = p / 2.0;
    let two = |e: f64| 2f64.powf(e);
    let ratio = p / (p - 2.0);
    let r = al / (gamma - al);
    let t_half = params.horizon.powf(half);

    let gamma3 = 0.5 * d3 * ((p - 2.0) / p).powf(half) * (gamma - al).powf(half)
        / (two(1.5 * p - 2.0) * (gamma - al).powf(half) + two(2.5 * p - 3.0) * al.powf(half));

    let front = 2.0 * (1.0 + t_half) / d3 * ratio.powf(half);
    let terminal_factor = two(p - 2.0) + two(1.5 * p - 2.0) * r.powf(half);
    let driver_factor = two(1.5 * p - 2.0) + two(2.5 * p - 3.0) * r.powf(half);
    let cp1 = front * terminal_factor;
    let cp2 = front * driver_factor / gamma3;

    let z_front = 2.0 / d3 * ratio.powf(half) * d2.powf(-half);
    let bdg_term = two(3.0 * p - 2.0) * d * d * d2.powf(-half) + two(1.5 * p - 1.0) * gamma3;
    let cp3 = z_front * (two(half) + bdg_term * terminal_factor);
    // the exponent p/2 sits on the whole bracket here, unlike in C_p²
    let cp4 = z_front
        * (bdg_term * (two(1.5 * p - 2.0) + two(2.5 * p - 3.0) * r).powf(half) / gamma3 + two(1.5 * p - 1.0) * gamma3);

    Ok(CpConstants { gamma3, cp1, cp2, cp3, cp4, cp: (cp1 + cp3).max(cp2 + cp4) })
}

/// Left-hand sides of a smallness condition, one per delay measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub lhs_y: f64,
    pub lhs_z: f64,
    pub feasible: bool,
}

impl ConditionCheck {
    fn new(lhs_y: f64, lhs_z: f64) -> Self {
        Self { lhs_y, lhs_z, feasible: lhs_y < 1.0 && lhs_z < 1.0 }
    }

    pub fn max_lhs(&self) -> f64 {
        self.lhs_y.max(self.lhs_z)
    }
}

/// `(8T + 1/β) L ∫e^{-βu}ρ(du) max{1,T} < 1` for `ρ ∈ {α_Y, α_Z}` (the `p = 2` condition).
pub fn check_existence(params: &StructuralParams) -> Result<ConditionCheck> {
    params.validate()?;
    if !(params.beta > 0.0) {
        return Err(Error::InvalidParameter("β must be positive".into()));
    }
    let t = params.horizon;
    let l = params.lipschitz_l();
    let lhs = |rho: &DelayMeasure| (8.0 * t + 1.0 / params.beta) * l * rho.exp_weighted_mass(params.beta) * t.max(1.0);
    Ok(ConditionCheck::new(lhs(&params.alpha_y), lhs(&params.alpha_z)))
}

/// `2^{p/2-1} C_p (L T ∫e^{-βs}ρ(ds))^{p/2} max{1, T^{p/2}} < 1` (the `p > 2` condition).
pub fn check_contraction(params: &StructuralParams) -> Result<ConditionCheck> {
    let cp = cp_constant(params)?.cp;
    let (p, t) = (params.p, params.horizon);
    let l = params.lipschitz_l();
    let lhs = |rho: &DelayMeasure| {
        2f64.powf(p / 2.0 - 1.0)
            * cp
            * (l * t * rho.exp_weighted_mass(params.beta)).powf(p / 2.0)
            * t.powf(p / 2.0).max(1.0)
    };
    Ok(ConditionCheck::new(lhs(&params.alpha_y), lhs(&params.alpha_z)))
}

/// Every constant at one `(β, γ)`, with `None` where a quantity is undefined.
#[derive(Debug, Clone, Serialize)]
pub struct ConstantsReport {
    pub beta: f64,
    pub gamma: f64,
    pub alpha_bar: f64,
    pub alpha_tilde: f64,
    pub l: f64,
    pub d_half_p: Option<f64>,
    pub d1: Option<f64>,
    pub d2: Option<f64>,
    pub d3: Option<f64>,
    pub cp: Option<CpConstants>,
    pub existence: Option<ConditionCheck>,
    pub contraction: Option<ConditionCheck>,
    pub feasible_existence: bool,
    pub feasible_apriori: bool,
    pub feasible_contraction: bool,
}

impl ConstantsReport {
    pub fn evaluate(params: &StructuralParams) -> Self {
        let d = d_constants(params).ok();
        let cp = cp_constant(params).ok();
        let existence = check_existence(params).ok();
        let contraction = check_contraction(params).ok();
        let feasible_apriori = d.is_some_and(|d| d.d1 > 0.0 && d.d2 > 0.0 && d.d3.is_none_or(|d3| d3 > 0.0));
        Self {
            beta: params.beta,
            gamma: params.gamma,
            alpha_bar: alpha_bar(&params.alpha_y, &params.alpha_z),
            alpha_tilde: params.alpha_tilde(),
            l: params.lipschitz_l(),
            d_half_p: bdg_constant(params.p, params.m).ok(),
            d1: d.map(|d| d.d1),
            d2: d.map(|d| d.d2),
            d3: d.and_then(|d| d.d3),
            cp,
            existence,
            contraction,
            feasible_existence: existence.is_some_and(|c| c.feasible),
            feasible_apriori,
            feasible_contraction: contraction.is_some_and(|c| c.feasible),
        }
    }

    /// Smallest slack among the conditions relevant for this `p`; positive
    /// means every condition holds. For `p = 2` the existence condition is the
    /// `(8T + 1/β)` one, for `p > 2` it is the contraction condition.
    pub fn margin(&self, p: f64) -> Option<f64> {
        let (d1, d2) = (self.d1?, self.d2?);
        if p > 2.0 {
            let d3 = self.d3?;
            let c = self.contraction?;
            Some(d1.min(d2).min(d3).min(1.0 - c.max_lhs()))
        } else {
            let c = self.existence?;
            Some(d1.min(d2).min(1.0 - c.max_lhs()))
        }
    }
}

/// Inclusive linear grid `lo, ..., hi` with `n` points, parsed from `lo:hi:n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl ParamGrid {
    pub fn values(&self) -> Vec<f64> {
        match self.n {
            0 => Vec::new(),
            1 => vec![self.lo],
            n => (0..n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64).collect(),
        }
    }
}

impl FromStr for ParamGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("grid must look like lo:hi:n, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if !(hi >= lo) || n == 0 {
            return Err(bad());
        }
        Ok(Self { lo, hi, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeasiblePoint {
    pub beta: f64,
    pub gamma: f64,
    pub margin: f64,
}

/// Evaluates every `(β, γ)` pair of the two grids and returns the one with the
/// largest positive margin; ties go to the smallest `β`, then smallest `γ`.
pub fn search_feasible(params: &StructuralParams, betas: &ParamGrid, gammas: &ParamGrid) -> Option<FeasiblePoint> {
    let mut betas = betas.values();
    let mut gammas = gammas.values();
    betas.sort_by(f64::total_cmp);
    gammas.sort_by(f64::total_cmp);
    let mut best: Option<FeasiblePoint> = None;
    for &beta in &betas {
        for &gamma in &gammas {
            let report = ConstantsReport::evaluate(&params.with_beta_gamma(beta, gamma));
            let Some(margin) = report.margin(params.p) else { continue };
            if margin > 0.0 && best.is_none_or(|b| margin > b.margin) {
                best = Some(FeasiblePoint { beta, gamma, margin });
            }
        }
    }
    best
}
