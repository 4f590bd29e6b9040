//! Execution probabilities of the sniping race.
//!
//! Every participant (the traders and the market maker) reaches the stale
//! quote after an exponential transit time plus a head-start offset set by
//! the speed bump. Deterministic designs have a closed form; random designs
//! are handled either by the published Ψ expression or exactly, by averaging
//! the offset race over every equally likely combination of delay draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Design, MarketConfig, RoundSpec, SpeedBumpSpec, TechnologyTier};

/// Rates of one race as seen from trader `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceParams {
    pub own_rate: f64,
    pub rival_rates: Vec<f64>,
    pub mm_rate: f64,
    pub bump: Option<SpeedBumpSpec>,
}

impl RaceParams {
    pub fn new(own_rate: f64, rival_rates: Vec<f64>, mm_rate: f64) -> Self {
        RaceParams { own_rate, rival_rates, mm_rate, bump: None }
    }

    pub fn with_bump(mut self, bump: Option<SpeedBumpSpec>) -> Self {
        self.bump = bump;
        self
    }

    pub fn design(&self) -> Design {
        Design::of(self.bump.as_ref())
    }

    fn total_rate(&self) -> f64 {
        self.own_rate + self.rival_sum() + self.mm_rate
    }

    fn rival_sum(&self) -> f64 {
        self.rival_rates.iter().sum()
    }

    fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.own_rate) || !pos(self.mm_rate) {
            return Err(Error::domain(format!(
                "own and market-maker rates must be positive (got {}, {})",
                self.own_rate, self.mm_rate
            )));
        }
        if let Some(r) = self.rival_rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(Error::domain(format!("rival rate must be >= 0, got {r}")));
        }
        Ok(())
    }

    /// Rates laid out as `[own, rivals.., market maker]`.
    fn lineup(&self) -> Vec<f64> {
        let mut rates = Vec::with_capacity(self.rival_rates.len() + 2);
        rates.push(self.own_rate);
        rates.extend_from_slice(&self.rival_rates);
        rates.push(self.mm_rate);
        rates
    }
}

/// Which expression answers random symmetric designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbEngine {
    /// The published Ψ closed form (two traders only).
    PaperFormula,
    /// Exact enumeration of delay draws.
    Exact,
}

impl ProbEngine {
    pub fn name(&self) -> &'static str {
        match self {
            ProbEngine::PaperFormula => "paper",
            ProbEngine::Exact => "exact",
        }
    }
}

impl std::str::FromStr for ProbEngine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" | "paper-formula" => Ok(ProbEngine::PaperFormula),
            "exact" => Ok(ProbEngine::Exact),
            other => Err(Error::domain(format!("unknown engine `{other}` (paper | exact)"))),
        }
    }
}

/// Closed form for deterministic bumps: traders delayed by `delta`, the
/// market maker by `delta_mm ∈ {0, delta}`.
pub fn exec_prob_deterministic(params: &RaceParams, delta: f64, delta_mm: f64) -> Result<f64> {
    params.validate()?;
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::domain(format!("delta must be >= 0, got {delta}")));
    }
    let tol = 1e-12 * delta.max(1.0);
    if (delta_mm - delta).abs() > tol && delta_mm.abs() > tol {
        return Err(Error::UnsupportedDesign(format!(
            "market-maker delay {delta_mm} must be 0 or equal to the trader delay {delta}"
        )));
    }
    let head_start = (delta - delta_mm).max(0.0);
    Ok((-params.mm_rate * head_start).exp() * params.own_rate / params.total_rate())
}

/// Probability that participant `winner` arrives strictly first when every
/// participant `k` arrives at `offsets[k] + X_k`, `X_k ~ Exp(rates[k])`.
///
/// Integrates the winner's density against the product of survival
/// functions, segment by segment between the sorted offsets. A zero rate
/// means the participant never arrives.
pub fn exec_prob_offsets(rates: &[f64], offsets: &[f64], winner: usize) -> Result<f64> {
    if rates.len() != offsets.len() || rates.is_empty() {
        return Err(Error::domain(format!(
            "rates ({}) and offsets ({}) must have the same non-zero length",
            rates.len(),
            offsets.len()
        )));
    }
    if winner >= rates.len() {
        return Err(Error::domain(format!("winner index {winner} out of range")));
    }
    if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::domain(format!("rates must be finite and >= 0, got {r}")));
    }
    if let Some(o) = offsets.iter().find(|o| !(o.is_finite() && **o >= 0.0)) {
        return Err(Error::domain(format!("offsets must be finite and >= 0, got {o}")));
    }
    if rates.iter().all(|&r| r == 0.0) {
        return Err(Error::domain("at least one participant needs a positive rate"));
    }
    Ok(offset_race(rates, offsets, winner))
}

fn offset_race(rates: &[f64], offsets: &[f64], winner: usize) -> f64 {
    let own_rate = rates[winner];
    if own_rate == 0.0 {
        return 0.0;
    }
    let start = offsets[winner];

    // Survival of rival k starts decaying at max(offset_k, start).
    let mut active_rate = own_rate;
    let mut pending: Vec<(f64, f64)> = Vec::with_capacity(rates.len());
    for (k, (&r, &o)) in rates.iter().zip(offsets).enumerate() {
        if k == winner || r == 0.0 {
            continue;
        }
        if o <= start {
            active_rate += r;
        } else {
            pending.push((o, r));
        }
    }
    // log of (winner survival × rival survival) at the segment start; the
    // rivals active from `start` contribute their pre-start decay here.
    let mut log_surv: f64 = rates
        .iter()
        .zip(offsets)
        .enumerate()
        .filter(|&(k, (&r, &o))| k != winner && r > 0.0 && o <= start)
        .map(|(_, (&r, &o))| -r * (start - o))
        .sum();
    pending.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut prob = 0.0;
    let mut seg_start = start;
    for (o, r) in pending {
        let width = o - seg_start;
        if width > 0.0 {
            prob += own_rate / active_rate * log_surv.exp() * -(-active_rate * width).exp_m1();
            log_surv -= active_rate * width;
        }
        active_rate += r;
        seg_start = o;
    }
    prob + own_rate / active_rate * log_surv.exp()
}

/// `e^{Δx} + e^{-Δx}`.
fn two_cosh(x: f64, delta: f64) -> f64 {
    2.0 * (delta * x).cosh()
}

/// The published Ψ closed form for a symmetric random bump with one rival.
///
/// Returned verbatim: it is not a probability in general. With identical
/// rates at Δ = 3 it gives ≈ 0.3975 where exchangeability forces 1/3, and
/// it exceeds 1 for large `Δ·λ`. Use [`exec_prob_random_exact`] for the
/// true value.
pub fn exec_prob_random_paper(params: &RaceParams, delta: f64) -> Result<f64> {
    if params.rival_rates.len() != 1 {
        return Err(Error::UnsupportedDesign(format!(
            "the closed form covers exactly one rival, got {}",
            params.rival_rates.len()
        )));
    }
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::domain(format!("delta must be >= 0, got {delta}")));
    }
    let own = params.own_rate;
    let rival = params.rival_rates[0];
    let mm = params.mm_rate;
    if !(own.is_finite() && own > 0.0) {
        return Err(Error::domain(format!("own rate must be positive, got {own}")));
    }
    if !(rival.is_finite() && rival >= 0.0 && mm.is_finite() && mm >= 0.0) {
        return Err(Error::domain("rival and market-maker rates must be >= 0"));
    }
    Ok(paper_psi(rival, mm, delta) / 27.0 * own / (own + rival + mm))
}

fn paper_psi(rival: f64, mm: f64, delta: f64) -> f64 {
    let f = |x: f64| two_cosh(x, delta);
    3.0 + f(rival)
        + f(mm)
        + f(rival + mm)
        + f(0.5 * rival + mm)
        + f(rival + 0.5 * mm)
        + f(0.5 * rival - 0.5 * mm)
        + 2.0 * f(0.5 * rival)
        + 2.0 * f(0.5 * mm)
        + 2.0 * f(0.5 * rival + 0.5 * mm)
}

/// Equally weighted delay states of a random bump.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEnumeration {
    /// Per-state offsets laid out as `[traders.., market maker]`, with weight.
    pub states: Vec<(Vec<f64>, f64)>,
}

impl StateEnumeration {
    /// All `3^k` draw combinations, where `k` counts the delayed participants:
    /// every trader, plus the market maker when `symmetric`.
    pub fn random(n_traders: usize, delta: f64, symmetric: bool) -> Self {
        let support = [0.5 * delta, delta, 1.5 * delta];
        let drawn = n_traders + usize::from(symmetric);
        let count = 3usize.pow(drawn as u32);
        let weight = 1.0 / count as f64;
        let states = (0..count)
            .map(|mut code| {
                let mut offsets = vec![0.0; n_traders + 1];
                for slot in offsets.iter_mut().take(drawn) {
                    *slot = support[code % 3];
                    code /= 3;
                }
                (offsets, weight)
            })
            .collect();
        StateEnumeration { states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Exact execution probability under a random bump, any number of rivals.
pub fn exec_prob_random_exact(params: &RaceParams, delta: f64, symmetric: bool) -> Result<f64> {
    params.validate()?;
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::domain(format!("delta must be >= 0, got {delta}")));
    }
    let rates = params.lineup();
    let n_traders = rates.len() - 1;
    if delta == 0.0 {
        return Ok(offset_race(&rates, &vec![0.0; rates.len()], 0));
    }
    let states = StateEnumeration::random(n_traders, delta, symmetric);
    Ok(states
        .states
        .iter()
        .map(|(offsets, w)| w * offset_race(&rates, offsets, 0))
        .sum())
}

/// Execution probability for the bump carried by `params`.
///
/// Deterministic designs and the no-bump case use the exact closed form
/// under both engines; the asymmetric random design has no published closed
/// form and is always enumerated.
pub fn exec_prob(params: &RaceParams, engine: ProbEngine) -> Result<f64> {
    let delta = params.bump.map_or(0.0, |b| b.mean_delay);
    match params.design() {
        Design::NoBump => exec_prob_deterministic(params, 0.0, 0.0),
        Design::SymmetricDeterministic => exec_prob_deterministic(params, delta, delta),
        Design::AsymmetricDeterministic => exec_prob_deterministic(params, delta, 0.0),
        Design::SymmetricRandom => match engine {
            ProbEngine::PaperFormula => {
                params.validate()?;
                exec_prob_random_paper(params, delta)
            }
            ProbEngine::Exact => exec_prob_random_exact(params, delta, true),
        },
        Design::AsymmetricRandom => exec_prob_random_exact(params, delta, false),
    }
}

/// Step used for central differences in the own rate.
pub fn rate_step(rate: f64) -> f64 {
    1e-6 * rate.abs().max(1.0)
}

/// `∂P/∂λ_i` for the bump carried by `params`.
pub fn marginal_exec_prob(params: &RaceParams, engine: ProbEngine) -> Result<f64> {
    params.validate()?;
    let delta = params.bump.map_or(0.0, |b| b.mean_delay);
    let others = params.rival_sum() + params.mm_rate;
    let total = params.total_rate();
    let closed = |head_start: f64| (-params.mm_rate * head_start).exp() * others / (total * total);
    match (params.design(), engine) {
        (Design::NoBump, _) | (Design::SymmetricDeterministic, _) => Ok(closed(0.0)),
        (Design::AsymmetricDeterministic, _) => Ok(closed(delta)),
        (Design::SymmetricRandom, ProbEngine::PaperFormula) => {
            if params.rival_rates.len() != 1 {
                return Err(Error::UnsupportedDesign(format!(
                    "the closed form covers exactly one rival, got {}",
                    params.rival_rates.len()
                )));
            }
            Ok(paper_psi(params.rival_rates[0], params.mm_rate, delta) / 27.0 * others
                / (total * total))
        }
        _ => {
            let h = rate_step(params.own_rate);
            let at = |rate: f64| {
                let mut p = params.clone();
                p.own_rate = rate;
                exec_prob(&p, engine)
            };
            if params.own_rate > h {
                Ok((at(params.own_rate + h)? - at(params.own_rate - h)?) / (2.0 * h))
            } else {
                Ok((at(params.own_rate + h)? - at(params.own_rate)?) / h)
            }
        }
    }
}

/// `dλ/dℓ` for the technology curve.
pub fn marginal_rate(tier: &TechnologyTier, invest: f64, endowment: f64) -> Result<f64> {
    tier.arrival_rate(invest, endowment)?;
    if invest == 0.0 {
        return if tier.gamma > 1.0 {
            Ok(0.0)
        } else if tier.gamma == 1.0 {
            Ok(tier.psi / endowment)
        } else {
            Err(Error::domain(format!(
                "marginal rate is unbounded at zero investment for gamma = {}",
                tier.gamma
            )))
        };
    }
    let u = invest / endowment;
    Ok(tier.psi * tier.gamma * u.powf(tier.gamma - 1.0) / endowment)
}

/// Race seen by the trader investing `invest` against `rival_invests`.
pub fn race_for(
    invest: f64,
    rival_invests: &[f64],
    round: &RoundSpec,
    tier: &TechnologyTier,
    config: &MarketConfig,
) -> Result<RaceParams> {
    let own_rate = tier.arrival_rate(invest, round.endowment)?;
    let rival_rates = rival_invests
        .iter()
        .map(|&l| tier.arrival_rate(l, round.endowment))
        .collect::<Result<Vec<_>>>()?;
    Ok(RaceParams::new(own_rate, rival_rates, config.mm_rate).with_bump(round.bump))
}

/// Marginal prize-weighted execution probability minus the unit marginal
/// cost of investing one more ECoin.
///
/// A sign change of the residual on `(0, ω)` marks an interior candidate
/// optimum; a residual still positive at `ℓ = ω` means a corner at full
/// investment.
pub fn foc_residual(
    invest: f64,
    rival_invests: &[f64],
    round: &RoundSpec,
    tier: &TechnologyTier,
    config: &MarketConfig,
    engine: ProbEngine,
) -> Result<f64> {
    let params = race_for(invest, rival_invests, round, tier, config)?;
    let dp = marginal_exec_prob(&params, engine)?;
    let dl = marginal_rate(tier, invest, round.endowment)?;
    Ok(config.prize * dp * dl - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn bump(design: Design, delta: f64) -> Option<SpeedBumpSpec> {
        design.bump(delta).unwrap()
    }

    fn equal_params(design: Design, delta: f64) -> RaceParams {
        RaceParams::new(0.2, vec![0.2], 0.2).with_bump(bump(design, delta))
    }

    /// Trapezoid quadrature of the winner's density against rival survivals
    /// on a fine grid over [offset_w, offset_w + 60/λ_min].
    fn quadrature(rates: &[f64], offsets: &[f64], w: usize) -> f64 {
        let lw = rates[w];
        let lmin = rates.iter().cloned().filter(|r| *r > 0.0).fold(f64::INFINITY, f64::min);
        let a = offsets[w];
        let b = a + 60.0 / lmin;
        let n = 400_000;
        let h = (b - a) / n as f64;
        let g = |t: f64| {
            let mut v = lw * (-lw * (t - a)).exp();
            for (k, (&r, &o)) in rates.iter().zip(offsets).enumerate() {
                if k != w && t > o {
                    v *= (-r * (t - o)).exp();
                }
            }
            v
        };
        let mut s = 0.5 * (g(a) + g(b));
        for i in 1..n {
            s += g(a + i as f64 * h);
        }
        s * h
    }

    #[test]
    fn deterministic_symmetric_is_one_third() {
        for delta in [0.0, 1.0, 3.0, 5.0] {
            let p = exec_prob_deterministic(&equal_params(Design::NoBump, 0.0), delta, delta).unwrap();
            assert_relative_eq!(p, 1.0 / 3.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn deterministic_zero_bump() {
        let p = exec_prob_deterministic(&RaceParams::new(0.5, vec![0.2], 0.2), 0.0, 0.0).unwrap();
        assert_relative_eq!(p, 0.5 / 0.9, max_relative = 1e-15);
    }

    #[test]
    fn deterministic_asymmetric_spot_value() {
        let p = exec_prob_deterministic(&equal_params(Design::NoBump, 0.0), 5.0, 0.0).unwrap();
        assert_relative_eq!(p, 0.1226264803904807738651745900538202891486, max_relative = 1e-14);
    }

    #[test]
    fn deterministic_rejects_other_market_maker_delays() {
        let p = equal_params(Design::NoBump, 0.0);
        assert!(matches!(
            exec_prob_deterministic(&p, 3.0, 1.0),
            Err(Error::UnsupportedDesign(_))
        ));
        assert!(matches!(
            exec_prob_deterministic(&p, 3.0, 4.0),
            Err(Error::UnsupportedDesign(_))
        ));
    }

    #[test]
    fn offsets_symmetric() {
        for w in 0..3 {
            let p = exec_prob_offsets(&[0.2; 3], &[1.0; 3], w).unwrap();
            assert_relative_eq!(p, 1.0 / 3.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn offsets_single_breakpoint() {
        // 1 - 0.5 e^{-1}, evaluated at 40 digits
        let p = exec_prob_offsets(&[0.2, 0.2], &[0.0, 5.0], 0).unwrap();
        assert_relative_eq!(p, 0.8160602794142788392022381149192695662771, max_relative = 1e-14);
        assert_relative_eq!(p, quadrature(&[0.2, 0.2], &[0.0, 5.0], 0), max_relative = 1e-7);
    }

    #[test]
    fn offsets_match_quadrature() {
        let rates = [0.35, 1.2, 0.2, 0.6];
        let offsets = [1.5, 0.0, 4.5, 2.25];
        for w in 0..4 {
            let exact = exec_prob_offsets(&rates, &offsets, w).unwrap();
            assert_relative_eq!(exact, quadrature(&rates, &offsets, w), max_relative = 1e-6);
        }
    }

    #[test]
    fn offsets_errors() {
        assert!(exec_prob_offsets(&[0.2, 0.2], &[0.0], 0).is_err());
        assert!(exec_prob_offsets(&[], &[], 0).is_err());
        assert!(exec_prob_offsets(&[0.2], &[0.0], 1).is_err());
        assert!(exec_prob_offsets(&[0.2, -0.1], &[0.0, 0.0], 0).is_err());
        assert!(exec_prob_offsets(&[0.0, 0.0], &[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn offsets_matches_eq8_generalisation() {
        // A market-maker head start d reproduces e^{-λ_M d}·λ_i/Σλ.
        let p = exec_prob_offsets(&[0.5, 0.3, 0.2], &[2.0, 2.0, 0.0], 0).unwrap();
        let closed = (-0.2f64 * 2.0).exp() * 0.5 / 1.0;
        assert_relative_eq!(p, closed, max_relative = 1e-14);
    }

    #[test]
    fn published_formula_spot_value() {
        let p = exec_prob_random_paper(&equal_params(Design::NoBump, 0.0), 3.0).unwrap();
        // mpmath, 40 digits
        assert!((p - 0.3975319325359613907130948809301985989093).abs() < 1e-12);
    }

    #[test]
    fn published_formula_degenerate_cases() {
        let params = RaceParams::new(0.5, vec![0.2], 0.2);
        let p0 = exec_prob_random_paper(&params, 0.0).unwrap();
        assert_relative_eq!(p0, 0.5 / 0.9, max_relative = 1e-14);
        let alone = RaceParams::new(0.5, vec![0.0], 0.0);
        assert_relative_eq!(exec_prob_random_paper(&alone, 4.0).unwrap(), 1.0, max_relative = 1e-15);
        let two = RaceParams::new(0.5, vec![0.2, 0.2], 0.2);
        assert!(matches!(exec_prob_random_paper(&two, 1.0), Err(Error::UnsupportedDesign(_))));
        assert!(exec_prob_random_paper(&params, -1.0).is_err());
    }

    #[test]
    fn state_counts() {
        let sym = StateEnumeration::random(2, 3.0, true);
        assert_eq!(sym.len(), 27);
        let asym = StateEnumeration::random(2, 3.0, false);
        assert_eq!(asym.len(), 9);
        for e in [&sym, &asym] {
            let total: f64 = e.states.iter().map(|s| s.1).sum();
            assert_relative_eq!(total, 1.0, max_relative = 1e-14);
        }
        assert!(asym.states.iter().all(|(o, _)| o[2] == 0.0));
        assert!(sym.states.iter().all(|(o, _)| o.iter().all(|x| [1.5, 3.0, 4.5].contains(x))));
    }

    #[test]
    fn exact_random_symmetry() {
        for delta in [0.5, 1.0, 3.0, 5.0] {
            let p = exec_prob_random_exact(&equal_params(Design::NoBump, 0.0), delta, true).unwrap();
            assert!((p - 1.0 / 3.0).abs() < 1e-12, "{delta}: {p}");
            let three = RaceParams::new(0.2, vec![0.2, 0.2], 0.2);
            let p = exec_prob_random_exact(&three, delta, true).unwrap();
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_random_zero_delta() {
        let params = RaceParams::new(0.5, vec![0.2, 0.9], 0.2);
        let det = exec_prob_deterministic(&params, 0.0, 0.0).unwrap();
        for sym in [true, false] {
            let p = exec_prob_random_exact(&params, 0.0, sym).unwrap();
            assert!((p - det).abs() < 1e-12);
        }
        let paper = exec_prob_random_paper(&RaceParams::new(0.5, vec![0.2], 0.2), 0.0).unwrap();
        let exact = exec_prob_random_exact(&RaceParams::new(0.5, vec![0.2], 0.2), 0.0, true).unwrap();
        assert!((paper - exact).abs() < 1e-12);
    }

    #[test]
    fn published_and_exact_diverge_for_positive_delta() {
        let p = equal_params(Design::SymmetricRandom, 3.0);
        let paper = exec_prob(&p, ProbEngine::PaperFormula).unwrap();
        let exact = exec_prob(&p, ProbEngine::Exact).unwrap();
        assert!(paper - exact > 0.06);
    }

    #[test]
    fn marginal_zero_bump() {
        let p = equal_params(Design::NoBump, 0.0);
        let d = marginal_exec_prob(&p, ProbEngine::Exact).unwrap();
        assert_relative_eq!(d, 0.4 / 0.36, max_relative = 1e-14);
    }

    #[test]
    fn marginal_asymmetric_spot_value() {
        let p = equal_params(Design::AsymmetricDeterministic, 5.0);
        let d = marginal_exec_prob(&p, ProbEngine::Exact).unwrap();
        let h = 1e-5;
        let fd = (exec_prob_deterministic(&RaceParams::new(0.2 + h, vec![0.2], 0.2), 5.0, 0.0).unwrap()
            - exec_prob_deterministic(&RaceParams::new(0.2 - h, vec![0.2], 0.2), 5.0, 0.0).unwrap())
            / (2.0 * h);
        assert_relative_eq!(d, fd, max_relative = 1e-8);
        assert_relative_eq!(d, (-1.0f64).exp() * 0.4 / 0.36, max_relative = 1e-14);
    }

    #[test]
    fn marginal_symmetric_deterministic_ignores_delta() {
        let d1 = marginal_exec_prob(&equal_params(Design::SymmetricDeterministic, 1.0), ProbEngine::Exact);
        let d5 = marginal_exec_prob(&equal_params(Design::SymmetricDeterministic, 5.0), ProbEngine::Exact);
        assert_eq!(d1.unwrap(), d5.unwrap());
    }

    #[test]
    fn marginal_closed_forms_match_finite_differences() {
        let cases = [
            (Design::NoBump, 0.0, ProbEngine::Exact),
            (Design::SymmetricDeterministic, 3.0, ProbEngine::Exact),
            (Design::AsymmetricDeterministic, 1.0, ProbEngine::PaperFormula),
            (Design::AsymmetricDeterministic, 5.0, ProbEngine::Exact),
            (Design::SymmetricRandom, 3.0, ProbEngine::PaperFormula),
        ];
        for (design, delta, engine) in cases {
            let p = RaceParams::new(0.7, vec![0.45], 0.2).with_bump(bump(design, delta));
            let d = marginal_exec_prob(&p, engine).unwrap();
            let h = rate_step(p.own_rate);
            let mut up = p.clone();
            up.own_rate += h;
            let mut down = p.clone();
            down.own_rate -= h;
            let fd = (exec_prob(&up, engine).unwrap() - exec_prob(&down, engine).unwrap()) / (2.0 * h);
            assert_relative_eq!(d, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn foc_residual_corners() {
        let tier = TechnologyTier::low_cost();
        let cfg = MarketConfig::theory();
        let round = RoundSpec::standalone(None, 10.0).unwrap();
        // Zero investment: dλ/dℓ = 0 for γ > 1, only the cost remains.
        let r0 = foc_residual(0.0, &[5.0], &round, &tier, &cfg, ProbEngine::Exact).unwrap();
        assert_eq!(r0, -1.0);
        // Large asymmetric bump: marginal benefit collapses everywhere.
        let slow = RoundSpec::standalone(bump(Design::AsymmetricDeterministic, 40.0), 10.0).unwrap();
        for i in 0..=100 {
            let l = 0.1 * i as f64;
            let r = foc_residual(l, &[0.0], &slow, &tier, &cfg, ProbEngine::Exact).unwrap();
            assert!(r < 0.0, "residual {r} at {l}");
        }
    }

    #[test]
    fn marginal_rate_matches_finite_difference() {
        for tier in TechnologyTier::canonical() {
            for l in [0.5, 3.0, 7.25, 9.5] {
                let h = 1e-6;
                let fd = (tier.arrival_rate(l + h, 10.0).unwrap() - tier.arrival_rate(l - h, 10.0).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(marginal_rate(&tier, l, 10.0).unwrap(), fd, max_relative = 1e-7);
            }
        }
    }

    proptest! {
        #[test]
        fn offsets_partition_unity(
            rates in prop::collection::vec(0.05f64..3.0, 1..6),
            raw in prop::collection::vec(0.0f64..8.0, 6),
        ) {
            let offsets = &raw[..rates.len()];
            let total: f64 = (0..rates.len())
                .map(|w| exec_prob_offsets(&rates, offsets, w).unwrap())
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-12, "sum {}", total);
            for w in 0..rates.len() {
                let p = exec_prob_offsets(&rates, offsets, w).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }

        #[test]
        fn rival_order_is_irrelevant(
            own in 0.1f64..2.0,
            rivals in prop::collection::vec(0.1f64..2.0, 1..4),
            delta in 0.0f64..6.0,
            design_idx in 0usize..4,
        ) {
            let design = Design::BUMPED[design_idx];
            let p = RaceParams::new(own, rivals.clone(), 0.2).with_bump(bump(design, delta));
            let mut rev = rivals.clone();
            rev.reverse();
            let q = RaceParams::new(own, rev, 0.2).with_bump(bump(design, delta));
            let a = exec_prob(&p, ProbEngine::Exact).unwrap();
            let b = exec_prob(&q, ProbEngine::Exact).unwrap();
            prop_assert!((a - b).abs() < 1e-13);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn asymmetric_deterministic_decreases_in_delta(
            own in 0.1f64..2.0, rival in 0.1f64..2.0, d in 0.0f64..6.0, step in 0.01f64..3.0,
        ) {
            let p = RaceParams::new(own, vec![rival], 0.2);
            let a = exec_prob_deterministic(&p, d, 0.0).unwrap();
            let b = exec_prob_deterministic(&p, d + step, 0.0).unwrap();
            prop_assert!(b < a);
            let s1 = exec_prob_deterministic(&p, d, d).unwrap();
            let s2 = exec_prob_deterministic(&p, d + step, d + step).unwrap();
            prop_assert_eq!(s1, s2);
        }
    }
}
