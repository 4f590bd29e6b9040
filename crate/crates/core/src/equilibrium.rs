//! Best responses and symmetric Nash equilibria in speed investment.
//!
//! A trader's payoff is `Σ·P(λ(ℓ)) + (ω − ℓ)`: the prize times the
//! execution probability, plus the rebated part of the endowment. Because
//! the technology curve is convex near zero the payoff can have an interior
//! peak and a competing corner at `ℓ = 0`, so best responses scan a grid
//! before refining with golden-section search.

use serde::{Deserialize, Serialize};

use crate::analytics::{exec_prob, race_for, ProbEngine};
use crate::error::Result;
use crate::exec::{map_slice, Execution};
use crate::model::{Design, MarketConfig, RoundSpec, TechnologyTier};
use crate::optimize::golden_section_max;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Points of the coarse best-response grid over `[0, ω]`.
    pub grid_points: usize,
    /// Weight on the best response in each damped update.
    pub damping: f64,
    /// Convergence threshold on `|BR(ℓ) − ℓ|`, as a fraction of ω.
    pub tol_frac: f64,
    pub max_iter: usize,
    /// Golden-section bracket width, as a fraction of ω.
    pub refine_tol_frac: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            grid_points: 201,
            damping: 0.5,
            tol_frac: 1e-4,
            max_iter: 500,
            refine_tol_frac: 1e-9,
        }
    }
}

/// Expected payoff of investing `invest` against `rival_invests`.
pub fn objective(
    invest: f64,
    rival_invests: &[f64],
    round: &RoundSpec,
    tier: &TechnologyTier,
    config: &MarketConfig,
    engine: ProbEngine,
) -> Result<f64> {
    let params = race_for(invest, rival_invests, round, tier, config)?;
    Ok(config.prize * exec_prob(&params, engine)? + round.endowment - invest)
}

pub fn best_response(
    rival_invests: &[f64],
    round: &RoundSpec,
    tier: &TechnologyTier,
    config: &MarketConfig,
    engine: ProbEngine,
) -> Result<f64> {
    best_response_with(rival_invests, round, tier, config, engine, &SolverOptions::default())
}

/// Global maximizer of [`objective`] over `[0, ω]`.
///
/// Every interior local maximum of the coarse grid is refined on its two
/// neighbouring cells; the best refined point or corner wins, with ties
/// going to the smaller investment.
pub fn best_response_with(
    rival_invests: &[f64],
    round: &RoundSpec,
    tier: &TechnologyTier,
    config: &MarketConfig,
    engine: ProbEngine,
    opts: &SolverOptions,
) -> Result<f64> {
    let omega = round.endowment;
    let n = opts.grid_points.max(3);
    let grid: Vec<f64> = (0..n).map(|k| omega * k as f64 / (n - 1) as f64).collect();
    let values = grid
        .iter()
        .map(|&l| objective(l, rival_invests, round, tier, config, engine))
        .collect::<Result<Vec<_>>>()?;

    let mut best = (grid[0], values[0]);
    let mut consider = |x: f64, v: f64| {
        if v > best.1 {
            best = (x, v);
        }
    };
    for k in 1..n - 1 {
        if values[k] >= values[k - 1] && values[k] >= values[k + 1] && values[k] > values[k - 1].min(values[k + 1]) {
            let f = |l: f64| {
                objective(l, rival_invests, round, tier, config, engine).unwrap_or(f64::NEG_INFINITY)
            };
            let (x, v) = golden_section_max(f, grid[k - 1], grid[k + 1], opts.refine_tol_frac * omega);
            if v >= values[k] {
                consider(x, v);
            } else {
                consider(grid[k], values[k]);
            }
        }
    }
    consider(grid[n - 1], values[n - 1]);
    Ok(best.0)
}

/// Outcome of a symmetric equilibrium solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub invests: Vec<f64>,
    pub rates: Vec<f64>,
    /// Execution probability per trader, then the market maker's
    /// cancellation probability (`1 − Σ` trader probabilities).
    pub exec_probs: Vec<f64>,
    pub expected_profits: Vec<f64>,
    pub iterations: usize,
    /// `|BR(ℓ) − ℓ|` at the returned point.
    pub residual: f64,
    /// Trader sits at 0 or ω (within the convergence tolerance).
    pub corner_flags: Vec<bool>,
    pub converged: bool,
    pub method: SolveMethod,
    /// Damped iterates, starting from ω/2.
    pub trajectory: Vec<f64>,
    pub engine: ProbEngine,
    pub design: Design,
}

impl EquilibriumResult {
    pub fn invest(&self) -> f64 {
        self.invests[0]
    }
}

pub fn solve_symmetric_equilibrium(
    round: &RoundSpec,
    tier: &TechnologyTier,
    config: &MarketConfig,
    engine: ProbEngine,
) -> Result<EquilibriumResult> {
    solve_symmetric_equilibrium_with(round, tier, config, engine, &SolverOptions::default())
}

/// How the returned investment was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    DampedIteration,
    /// Bisection on `BR(ℓ) − ℓ` after the damped iteration cycled.
    Bisection,
}

/// Symmetric pure-strategy equilibrium.
///
/// Runs the damped best-response iteration `ℓ ← (1 − α)ℓ + α·BR(ℓ)` from
/// `ω/2`, all rivals playing the current iterate. If that cycles, bisection
/// on `g(ℓ) = BR(ℓ) − ℓ` (non-negative at 0, non-positive at ω) looks for
/// the crossing. When the best response jumps over the diagonal there is no
/// symmetric pure equilibrium: the result then has `converged = false`,
/// carries the damped trajectory, and reports the jump point as `invests`.
pub fn solve_symmetric_equilibrium_with(
    round: &RoundSpec,
    tier: &TechnologyTier,
    config: &MarketConfig,
    engine: ProbEngine,
    opts: &SolverOptions,
) -> Result<EquilibriumResult> {
    config.validate()?;
    tier.validate()?;
    let omega = round.endowment;
    let n_rivals = config.n_traders - 1;
    let tol = opts.tol_frac * omega;
    let br_at = |l: f64| best_response_with(&vec![l; n_rivals], round, tier, config, engine, opts);

    let mut invest = 0.5 * omega;
    let mut trajectory = vec![invest];
    let mut converged = false;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut method = SolveMethod::DampedIteration;
    while iterations < opts.max_iter {
        iterations += 1;
        let br = br_at(invest)?;
        residual = (br - invest).abs();
        if residual < tol {
            converged = true;
            invest = br;
            break;
        }
        invest = ((1.0 - opts.damping) * invest + opts.damping * br).clamp(0.0, omega);
        trajectory.push(invest);
    }

    if !converged {
        method = SolveMethod::Bisection;
        let (mut lo, mut hi) = (0.0, omega);
        let g_lo = br_at(lo)? - lo;
        let g_hi = br_at(hi)? - hi;
        iterations += 2;
        if g_lo.abs() < tol {
            (converged, invest, residual) = (true, lo, g_lo.abs());
        } else if g_hi.abs() < tol {
            (converged, invest, residual) = (true, hi, g_hi.abs());
        } else {
            while hi - lo > 1e-3 * tol {
                let mid = 0.5 * (lo + hi);
                let g = br_at(mid)? - mid;
                iterations += 1;
                if g.abs() < tol {
                    (converged, invest, residual) = (true, mid, g.abs());
                    break;
                }
                if g > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            if !converged {
                invest = 0.5 * (lo + hi);
                residual = (br_at(invest)? - invest).abs();
                log::warn!(
                    "no symmetric pure equilibrium for {} Δ={} ω={} ({}): best response jumps across ℓ={invest:.4}",
                    round.design(),
                    round.mean_delay(),
                    omega,
                    tier.label
                );
            }
        }
    }

    let rate = tier.arrival_rate(invest, omega)?;
    let p = exec_prob(&race_for(invest, &vec![invest; n_rivals], round, tier, config)?, engine)?;
    let n = config.n_traders;
    let mut exec_probs = vec![p; n];
    exec_probs.push(1.0 - p * n as f64);
    let profit = config.prize * p + omega - invest;
    let corner = invest <= tol || invest >= omega - tol;
    Ok(EquilibriumResult {
        invests: vec![invest; n],
        rates: vec![rate; n],
        exec_probs,
        expected_profits: vec![profit; n],
        iterations,
        residual,
        corner_flags: vec![corner; n],
        converged,
        method,
        trajectory,
        engine,
        design: round.design(),
    })
}

/// One comparative-statics cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticsCell {
    pub design: Design,
    pub delta: f64,
    pub endowment: f64,
    pub tier: TechnologyTier,
}

impl StaticsCell {
    pub fn round(&self) -> Result<RoundSpec> {
        RoundSpec::standalone(self.design.bump(self.delta)?, self.endowment)
    }
}

/// The canonical grid for one tier: three bump sizes × four designs × two
/// endowments, plus the no-bump cell at ω = 10.
pub fn canonical_grid(tier: &TechnologyTier) -> Vec<StaticsCell> {
    let mut cells = vec![StaticsCell {
        design: Design::NoBump,
        delta: 0.0,
        endowment: 10.0,
        tier: tier.clone(),
    }];
    for design in Design::BUMPED {
        for delta in [1.0, 3.0, 5.0] {
            for endowment in [10.0, 20.0] {
                cells.push(StaticsCell { design, delta, endowment, tier: tier.clone() });
            }
        }
    }
    cells
}

/// One output row of [`comparative_statics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticsRow {
    pub design: Design,
    pub delta: f64,
    pub endowment: f64,
    pub tier: String,
    pub engine: ProbEngine,
    pub invest: f64,
    pub invest_frac: f64,
    pub exec_prob: f64,
    pub profit: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Solver error for this cell, if any; the numeric fields are NaN then.
    pub error: Option<String>,
}

impl StaticsRow {
    pub const CSV_HEADER: [&'static str; 11] = [
        "design", "delta", "endowment", "tier", "engine", "invest", "invest_frac", "exec_prob",
        "profit", "converged", "iterations",
    ];

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.design.to_string(),
            format!("{}", self.delta),
            format!("{}", self.endowment),
            self.tier.clone(),
            self.engine.name().to_string(),
            format!("{:.6}", self.invest),
            format!("{:.6}", self.invest_frac),
            format!("{:.6}", self.exec_prob),
            format!("{:.6}", self.profit),
            u8::from(self.converged).to_string(),
            self.iterations.to_string(),
        ]
    }
}

/// Solves every cell (concurrently when `exec` allows); a failing cell
/// yields a row carrying the error instead of aborting the table.
pub fn comparative_statics(
    grid: &[StaticsCell],
    config: &MarketConfig,
    engine: ProbEngine,
    exec: Execution,
) -> Vec<StaticsRow> {
    map_slice(grid, exec, |cell| {
        let solved = cell
            .round()
            .and_then(|round| solve_symmetric_equilibrium(&round, &cell.tier, config, engine));
        let base = StaticsRow {
            design: cell.design,
            delta: cell.delta,
            endowment: cell.endowment,
            tier: cell.tier.label.clone(),
            engine,
            invest: f64::NAN,
            invest_frac: f64::NAN,
            exec_prob: f64::NAN,
            profit: f64::NAN,
            converged: false,
            iterations: 0,
            error: None,
        };
        match solved {
            Ok(eq) => StaticsRow {
                invest: eq.invest(),
                invest_frac: eq.invest() / cell.endowment,
                exec_prob: eq.exec_probs[0],
                profit: eq.expected_profits[0],
                converged: eq.converged,
                iterations: eq.iterations,
                ..base
            },
            Err(e) => StaticsRow { error: Some(e.to_string()), ..base },
        }
    })
}

/// A directional comparison between comparative-statics rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub hypothesis: String,
    pub description: String,
    pub holds: bool,
}

fn find<'a>(rows: &'a [StaticsRow], design: Design, delta: f64, endowment: f64, tier: &str) -> Option<&'a StaticsRow> {
    rows.iter().find(|r| {
        r.design == design && r.delta == delta && r.endowment == endowment && r.tier == tier && r.error.is_none()
    })
}

/// Evaluates the directional predictions on whatever cells `rows` contains.
///
/// Tolerance for "equal" comparisons is `1e-3·ω`. H3 is only asserted
/// under the published formula; with the exact engine its direction is
/// reported with `holds` describing the observed sign.
pub fn hypothesis_checks(rows: &[StaticsRow]) -> Vec<HypothesisCheck> {
    let mut checks = Vec::new();
    let mut tiers: Vec<&str> = rows.iter().map(|r| r.tier.as_str()).collect();
    tiers.dedup();
    tiers.sort();
    tiers.dedup();
    let mut endowments: Vec<f64> = rows.iter().map(|r| r.endowment).collect();
    endowments.sort_by(f64::total_cmp);
    endowments.dedup();

    for tier in &tiers {
        for &omega in &endowments {
            let tol = 1e-3 * omega;
            let series = |design: Design| -> Option<Vec<f64>> {
                [1.0, 3.0, 5.0]
                    .iter()
                    .map(|&d| find(rows, design, d, omega, tier).map(|r| r.invest))
                    .collect()
            };
            if let Some(s) = series(Design::SymmetricDeterministic) {
                let spread = s.iter().cloned().fold(f64::MIN, f64::max) - s.iter().cloned().fold(f64::MAX, f64::min);
                checks.push(HypothesisCheck {
                    hypothesis: "H1".into(),
                    description: format!("{tier} ω={omega}: sym-det ℓ* over Δ=1,3,5 = {s:.4?}"),
                    holds: spread <= tol,
                });
            }
            if let Some(s) = series(Design::AsymmetricDeterministic) {
                let weak = s[0] + tol >= s[1] && s[1] + tol >= s[2];
                let interior = |x: f64| x > tol && x < omega - tol;
                let strict = (0..2).all(|k| !(interior(s[k]) || interior(s[k + 1])) || s[k] > s[k + 1]);
                checks.push(HypothesisCheck {
                    hypothesis: "H2".into(),
                    description: format!("{tier} ω={omega}: asym-det ℓ* over Δ=1,3,5 = {s:.4?}"),
                    holds: weak && strict,
                });
            }
            if let Some(s) = series(Design::SymmetricRandom) {
                let increasing = s[0] <= s[1] + tol && s[1] <= s[2] + tol;
                checks.push(HypothesisCheck {
                    hypothesis: "H3".into(),
                    description: format!("{tier} ω={omega}: sym-rand ℓ* over Δ=1,3,5 = {s:.4?}"),
                    holds: increasing,
                });
            }
        }
    }

    // H4: relative investment falls with the endowment, cell by cell.
    for r in rows.iter().filter(|r| r.endowment == 10.0 && r.error.is_none()) {
        if let Some(hi) = find(rows, r.design, r.delta, 20.0, &r.tier) {
            checks.push(HypothesisCheck {
                hypothesis: "H4".into(),
                description: format!(
                    "{} {} Δ={}: ℓ*/ω {:.4} (ω=10) vs {:.4} (ω=20)",
                    r.tier, r.design, r.delta, r.invest_frac, hi.invest_frac
                ),
                holds: hi.invest_frac <= r.invest_frac + 1e-3,
            });
        }
    }

    // H5: cheaper technology, more relative investment, in the no-bump cell.
    for &omega in &endowments {
        let fracs: Option<Vec<f64>> = ["high-cost", "medium-cost", "low-cost"]
            .iter()
            .map(|t| find(rows, Design::NoBump, 0.0, omega, t).map(|r| r.invest_frac))
            .collect();
        if let Some(f) = fracs {
            checks.push(HypothesisCheck {
                hypothesis: "H5".into(),
                description: format!("no bump ω={omega}: ℓ*/ω high→low cost = {f:.4?}"),
                holds: f[0] <= f[1] + 1e-3 && f[1] <= f[2] + 1e-3,
            });
        }
    }
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round(design: Design, delta: f64, omega: f64) -> RoundSpec {
        RoundSpec::standalone(design.bump(delta).unwrap(), omega).unwrap()
    }

    #[test]
    fn no_prize_means_no_investment() {
        let cfg = MarketConfig { prize: 0.0, ..MarketConfig::theory() };
        let br = best_response(&[5.0], &round(Design::NoBump, 0.0, 10.0), &TechnologyTier::low_cost(), &cfg, ProbEngine::Exact)
            .unwrap();
        assert_eq!(br, 0.0);
    }

    #[test]
    fn huge_asymmetric_bump_gives_zero_corner() {
        let cfg = MarketConfig::theory();
        let r = round(Design::AsymmetricDeterministic, 30.0, 10.0);
        let tier = TechnologyTier::low_cost();
        // grid oracle: the objective never exceeds its value at zero
        let at0 = objective(0.0, &[0.0], &r, &tier, &cfg, ProbEngine::Exact).unwrap();
        for k in 1..=1000 {
            let l = 10.0 * k as f64 / 1000.0;
            assert!(objective(l, &[0.0], &r, &tier, &cfg, ProbEngine::Exact).unwrap() < at0);
        }
        assert_eq!(best_response(&[0.0], &r, &tier, &cfg, ProbEngine::Exact).unwrap(), 0.0);
    }

    #[test]
    fn best_response_beats_every_grid_point() {
        let cfg = MarketConfig::theory();
        for tier in TechnologyTier::canonical() {
            for (design, delta) in [(Design::NoBump, 0.0), (Design::AsymmetricRandom, 3.0), (Design::SymmetricRandom, 5.0)] {
                let r = round(design, delta, 20.0);
                let br = best_response(&[7.0], &r, &tier, &cfg, ProbEngine::Exact).unwrap();
                let best = objective(br, &[7.0], &r, &tier, &cfg, ProbEngine::Exact).unwrap();
                for k in 0..=2000 {
                    let l = 20.0 * k as f64 / 2000.0;
                    let v = objective(l, &[7.0], &r, &tier, &cfg, ProbEngine::Exact).unwrap();
                    assert!(best >= v - 1e-9, "{design} {}: {best} < {v} at {l}", tier.label);
                }
            }
        }
    }

    #[test]
    fn foc_vanishes_at_interior_best_response() {
        let cfg = MarketConfig::theory();
        let tier = TechnologyTier::high_cost();
        let r = round(Design::SymmetricRandom, 3.0, 20.0);
        let br = best_response(&[5.0], &r, &tier, &cfg, ProbEngine::Exact).unwrap();
        assert!(br > 1.0 && br < 19.0, "{br}");
        let res = crate::analytics::foc_residual(br, &[5.0], &r, &tier, &cfg, ProbEngine::Exact).unwrap();
        assert!(res.abs() < 1e-5, "residual {res} at {br}");
    }

    #[test]
    fn symmetric_deterministic_equilibrium_ignores_delta() {
        let cfg = MarketConfig::theory();
        let tier = TechnologyTier::medium_cost();
        let eqs: Vec<_> = [1.0, 3.0, 5.0]
            .iter()
            .map(|&d| solve_symmetric_equilibrium(&round(Design::SymmetricDeterministic, d, 10.0), &tier, &cfg, ProbEngine::Exact).unwrap())
            .collect();
        for e in &eqs {
            assert!(e.converged);
            assert!(e.residual <= 1e-4 * 10.0);
            assert!((e.invest() - eqs[0].invest()).abs() <= 1e-3 * 10.0);
        }
        let nb = solve_symmetric_equilibrium(&round(Design::NoBump, 0.0, 10.0), &tier, &cfg, ProbEngine::Exact).unwrap();
        assert!((nb.invest() - eqs[0].invest()).abs() <= 1e-3 * 10.0);
    }

    #[test]
    fn failed_solve_keeps_trajectory() {
        let cfg = MarketConfig::theory();
        let opts = SolverOptions { max_iter: 1, ..Default::default() };
        let r = solve_symmetric_equilibrium_with(&round(Design::NoBump, 0.0, 10.0), &TechnologyTier::low_cost(), &cfg, ProbEngine::Exact, &opts)
            .unwrap();
        if !r.converged {
            assert_eq!(r.trajectory.len(), 2);
            assert_eq!(r.method, SolveMethod::Bisection);
        }
    }

    #[test]
    fn canonical_grid_has_25_cells() {
        let g = canonical_grid(&TechnologyTier::high_cost());
        assert_eq!(g.len(), 25);
        assert_eq!(g.iter().filter(|c| c.design == Design::NoBump).count(), 1);
    }

    #[test]
    fn failing_cell_is_reported_not_fatal() {
        let tier = TechnologyTier::high_cost();
        let cells = vec![
            StaticsCell { design: Design::NoBump, delta: 0.0, endowment: 10.0, tier: tier.clone() },
            StaticsCell { design: Design::SymmetricRandom, delta: 3.0, endowment: 10.0, tier: tier.clone() },
        ];
        // the published formula only covers two traders
        let cfg = MarketConfig::default();
        let rows = comparative_statics(&cells, &cfg, ProbEngine::PaperFormula, Execution::Sequential);
        assert!(rows[0].error.is_none());
        assert!(rows[1].error.is_some());
        assert!(rows[1].invest.is_nan());
    }

    #[test]
    fn converged_equilibrium_is_a_fixed_point_on_a_fine_grid() {
        let cfg = MarketConfig::theory();
        for tier in TechnologyTier::canonical() {
            for (design, delta, omega) in [(Design::NoBump, 0.0, 10.0), (Design::AsymmetricRandom, 3.0, 20.0), (Design::AsymmetricDeterministic, 1.0, 20.0)] {
                let r = round(design, delta, omega);
                let e = solve_symmetric_equilibrium(&r, &tier, &cfg, ProbEngine::Exact).unwrap();
                if !e.converged {
                    continue;
                }
                let l = e.invest();
                let best = objective(l, &[l], &r, &tier, &cfg, ProbEngine::Exact).unwrap();
                for k in 0..=10_000 {
                    let x = omega * k as f64 / 10_000.0;
                    let v = objective(x, &[l], &r, &tier, &cfg, ProbEngine::Exact).unwrap();
                    assert!(best >= v - 1e-6, "{} {design}: deviation to {x} pays {v} > {best}", tier.label);
                }
            }
        }
    }

    #[test]
    fn jump_over_the_diagonal_is_reported_as_failure() {
        let cfg = MarketConfig::theory();
        let tier = TechnologyTier::low_cost();
        let r = round(Design::AsymmetricDeterministic, 5.0, 20.0);
        let e = solve_symmetric_equilibrium(&r, &tier, &cfg, ProbEngine::Exact).unwrap();
        assert!(!e.converged);
        assert_eq!(e.method, SolveMethod::Bisection);
        let l = e.invest();
        let below = best_response(&[l - 0.01], &r, &tier, &cfg, ProbEngine::Exact).unwrap();
        let above = best_response(&[l + 0.01], &r, &tier, &cfg, ProbEngine::Exact).unwrap();
        assert!(below > l && above < l, "{below} {l} {above}");
    }
}
