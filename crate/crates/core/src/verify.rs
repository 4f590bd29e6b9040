//! Oracle cross-checks.
//!
//! Every closed form is compared with an independent computation: exact
//! execution probabilities with Monte Carlo win frequencies, the within
//! estimator with explicit dummy-variable OLS, and the clustered covariance
//! with a brute-force pairwise assembly.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analytics::{exec_prob, exec_prob_offsets, ProbEngine, RaceParams, StateEnumeration};
use crate::econometrics::oracle::{brute_force_cgm, dummy_ols, random_panel};
use crate::econometrics::{clustered_vcov, fit_fe_ols, ClusterDim, VcovOptions};
use crate::error::Result;
use crate::exec::Execution;
use crate::model::{Design, BASE_RATE};
use crate::race::{monte_carlo_race, SeedSpec};

/// One design cell of the probability cross-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbCell {
    pub design: Design,
    pub delta: f64,
    /// Trader rates; trader 0 is the one whose probability is checked.
    pub rates: Vec<f64>,
    pub mm_rate: f64,
}

impl ProbCell {
    fn params(&self) -> Result<RaceParams> {
        Ok(RaceParams::new(self.rates[0], self.rates[1..].to_vec(), self.mm_rate)
            .with_bump(self.design.bump(self.delta)?))
    }

    /// Offsets of every equally likely bump state, `[traders.., market maker]`.
    fn offset_states(&self) -> Vec<Vec<f64>> {
        let n = self.rates.len();
        match self.design {
            Design::NoBump => vec![vec![0.0; n + 1]],
            Design::SymmetricDeterministic => vec![vec![self.delta; n + 1]],
            Design::AsymmetricDeterministic => {
                let mut o = vec![self.delta; n];
                o.push(0.0);
                vec![o]
            }
            Design::SymmetricRandom | Design::AsymmetricRandom => {
                let sym = self.design == Design::SymmetricRandom;
                StateEnumeration::random(n, self.delta, sym).states.into_iter().map(|(o, _)| o).collect()
            }
        }
    }
}

/// Rate configurations: equal base rates, a fast and a slow focal trader
/// against one rival, and two three-trader mixes of full-investment rates
/// from the canonical tiers.
pub fn rate_configurations() -> Vec<Vec<f64>> {
    vec![
        vec![0.2, 0.2],
        vec![0.5, 0.2],
        vec![0.2, 0.8],
        vec![2.0, 0.5, 0.8],
        vec![0.8, 0.8, 0.2],
    ]
}

/// Four bumped designs × Δ ∈ {0, 1, 3, 5} × every rate configuration.
pub fn oracle_cells() -> Vec<ProbCell> {
    let mut cells = Vec::new();
    for design in Design::BUMPED {
        for delta in [0.0, 1.0, 3.0, 5.0] {
            for rates in rate_configurations() {
                cells.push(ProbCell { design, delta, rates, mm_rate: BASE_RATE });
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbComparison {
    pub cell: ProbCell,
    pub exact: f64,
    pub monte_carlo: f64,
    pub std_error: f64,
    /// Standard errors between the estimate and the exact value.
    pub z: f64,
}

/// Exact probability of trader 0 against its Monte Carlo frequency, cell
/// by cell. Cell `k` simulates on substream group `k`.
pub fn compare_probabilities(cells: &[ProbCell], reps: u64, seed: u64, exec: Execution) -> Result<Vec<ProbComparison>> {
    cells
        .iter()
        .enumerate()
        .map(|(k, cell)| {
            let params = cell.params()?;
            let exact = exec_prob(&params, ProbEngine::Exact)?;
            let spec = SeedSpec::new(seed).at(0, k as u64, 0);
            let mc = monte_carlo_race(&cell.rates, cell.mm_rate, params.bump.as_ref(), reps, &spec, exec)?;
            Ok(ProbComparison {
                cell: cell.clone(),
                exact,
                monte_carlo: mc.estimates[0],
                std_error: (exact * (1.0 - exact) / reps as f64).sqrt(),
                z: mc.z_score(0, exact),
            })
        })
        .collect()
}

/// Largest `|Σ_k P(k wins) − 1|` over every bump state of every cell.
pub fn max_offset_sum_error(cells: &[ProbCell]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for cell in cells {
        let mut rates = cell.rates.clone();
        rates.push(cell.mm_rate);
        for offsets in cell.offset_states() {
            let total = (0..rates.len())
                .map(|w| exec_prob_offsets(&rates, &offsets, w))
                .sum::<Result<f64>>()?;
            worst = worst.max((total - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Largest coefficient gap between the within estimator and dummy OLS on
/// `panels` random panels of at most 200 rows and up to three FE dimensions.
pub fn fe_dummy_max_diff(panels: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..panels {
        let (data, spec) = random_panel(&mut rng, 200);
        let fit = fit_fe_ols(&spec, &data)?;
        let x = spec.regressors.iter().map(|r| data.numeric(r).map(<[f64]>::to_vec)).collect::<Result<Vec<_>>>()?;
        let fe = spec.fixed_effects.iter().map(|f| data.codes(f).map(|c| c.0)).collect::<Result<Vec<_>>>()?;
        let oracle = dummy_ols(data.numeric(&spec.dependent)?, &x, &fe)?;
        for (a, b) in fit.coefficients.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn toy_design(rng: &mut ChaCha8Rng, n: usize, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let x = DMatrix::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
    let e = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (x, e)
}

/// Largest entry gap between the inclusion–exclusion covariance and the
/// brute-force assembly on `panels` toy panels with 1–3 dimensions, with
/// and without small-sample factors.
pub fn cgm_max_diff(panels: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..panels {
        let n = rng.random_range(6..60);
        let k = rng.random_range(1..4);
        let (x, e) = toy_design(&mut rng, n, k);
        let dims: Vec<Vec<usize>> = (0..1 + case % 3)
            .map(|_| {
                let g = rng.random_range(2..=(n / 2).max(2));
                (0..n).map(|i| if i < g { i } else { rng.random_range(0..g) }).collect()
            })
            .collect();
        let named: Vec<ClusterDim> =
            dims.iter().enumerate().map(|(i, c)| ClusterDim::new(format!("d{i}"), c.clone())).collect();
        for small_sample in [false, true] {
            let fast = clustered_vcov(&x, &e, &named, &VcovOptions { small_sample, repair: false })?;
            let slow = brute_force_cgm(&x, &e, &dims, small_sample);
            worst = worst.max((&fast.vcov - slow).amax());
        }
    }
    Ok(worst)
}

/// Gap between one-dimensional clustering on singleton clusters (no
/// small-sample factor) and the heteroskedasticity-robust sandwich.
pub fn singleton_identity_diff(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 40;
    let (x, e) = toy_design(&mut rng, n, 3);
    let v = clustered_vcov(&x, &e, &[ClusterDim::new("obs", (0..n).collect())], &VcovOptions { small_sample: false, repair: false })?;
    let bread = (x.transpose() * &x).try_inverse().expect("full-rank toy design");
    let mut meat = DMatrix::<f64>::zeros(3, 3);
    for i in 0..n {
        let xi = x.row(i).transpose();
        meat += &xi * xi.transpose() * (e[i] * e[i]);
    }
    Ok((v.vcov - &bread * meat * &bread).amax())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub reps: u64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { reps: 1_000_000, seed: 1 }
    }
}

/// Runs the whole oracle battery. Errors inside a check count as failures.
pub fn run_all(opts: &VerifyOptions, exec: Execution) -> Vec<Check> {
    let cells = oracle_cells();
    let mut checks = Vec::new();
    let mut push = |name: &str, outcome: Result<(bool, String)>| {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, e.to_string()));
        checks.push(Check { name: name.into(), passed, detail });
    };

    push(
        "probabilities vs Monte Carlo",
        compare_probabilities(&cells, opts.reps, opts.seed, exec).map(|rows| {
            let worst = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
            let bad = rows.iter().filter(|r| r.z.abs() > 3.0).count();
            (bad == 0, format!("{} cells, {bad} beyond 3 SE, max |z| = {worst:.2}", rows.len()))
        }),
    );
    push(
        "offset race probabilities sum to one",
        max_offset_sum_error(&cells).map(|e| (e <= 1e-12, format!("max error {e:.2e}"))),
    );
    push(
        "within estimator vs dummy OLS",
        fe_dummy_max_diff(50, opts.seed).map(|d| (d <= 1e-8, format!("50 panels, max gap {d:.2e}"))),
    );
    push(
        "clustered covariance vs brute force",
        cgm_max_diff(20, opts.seed).map(|d| (d <= 1e-10, format!("20 panels, max gap {d:.2e}"))),
    );
    push(
        "singleton clusters equal the robust sandwich",
        singleton_identity_diff(opts.seed).map(|d| (d <= 1e-12, format!("max gap {d:.2e}"))),
    );
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eighty_cells() {
        let cells = oracle_cells();
        assert_eq!(cells.len(), 80);
        assert!(max_offset_sum_error(&cells).unwrap() <= 1e-12);
    }

    #[test]
    fn small_battery_runs() {
        let checks = run_all(&VerifyOptions { reps: 20_000, seed: 3 }, Execution::Parallel);
        assert_eq!(checks.len(), 5);
        for c in &checks[1..] {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
