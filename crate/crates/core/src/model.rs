//! Market-design parameters and the speed-technology curve.
//!
//! A trader who invests `ℓ` out of an endowment `ω` gets an exponential
//! order-transit time with rate `λ₀ + ψ·(ℓ/ω)^γ`. Rates are per second,
//! delays in seconds and money in ECoins throughout the crate.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Baseline order arrival rate shared by all canonical tiers and the market maker.
pub const BASE_RATE: f64 = 0.2;

/// Size of the stale-quote profit opportunity.
pub const PRIZE: f64 = 100.0;

/// Parameters of one speed-technology tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechnologyTier {
    pub lambda0: f64,
    pub psi: f64,
    pub gamma: f64,
    pub label: String,
}

impl TechnologyTier {
    pub fn new(lambda0: f64, psi: f64, gamma: f64, label: impl Into<String>) -> Result<Self> {
        let tier = TechnologyTier { lambda0, psi, gamma, label: label.into() };
        tier.validate()?;
        Ok(tier)
    }

    pub fn high_cost() -> Self {
        TechnologyTier { lambda0: BASE_RATE, psi: 0.30, gamma: 1.25, label: "high-cost".into() }
    }

    pub fn medium_cost() -> Self {
        TechnologyTier { lambda0: BASE_RATE, psi: 0.60, gamma: 1.50, label: "medium-cost".into() }
    }

    pub fn low_cost() -> Self {
        TechnologyTier { lambda0: BASE_RATE, psi: 1.80, gamma: 1.80, label: "low-cost".into() }
    }

    /// The three lab tiers, most expensive first.
    pub fn canonical() -> [TechnologyTier; 3] {
        [Self::high_cost(), Self::medium_cost(), Self::low_cost()]
    }

    /// Looks up a canonical tier by label (`high-cost`, `medium-cost`, `low-cost`).
    pub fn by_label(label: &str) -> Result<Self> {
        Self::canonical()
            .into_iter()
            .find(|t| t.label == label)
            .ok_or_else(|| {
                Error::domain(format!(
                    "unknown tier `{label}` (expected high-cost, medium-cost or low-cost)"
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.lambda0) && ok(self.psi) && ok(self.gamma)) {
            return Err(Error::domain(format!(
                "tier `{}` needs lambda0, psi, gamma > 0 (got {}, {}, {})",
                self.label, self.lambda0, self.psi, self.gamma
            )));
        }
        Ok(())
    }

    /// Arrival rate reached by investing `invest` out of `endowment`.
    pub fn arrival_rate(&self, invest: f64, endowment: f64) -> Result<f64> {
        arrival_rate(self, invest, endowment)
    }

    /// Arrival rate as a function of the invested fraction `ℓ/ω`.
    pub(crate) fn rate_at_fraction(&self, frac: f64) -> f64 {
        self.lambda0 + self.psi * frac.powf(self.gamma)
    }
}

fn check_invest(invest: f64, endowment: f64) -> Result<()> {
    if !(endowment.is_finite() && endowment > 0.0) {
        return Err(Error::domain(format!("endowment must be positive, got {endowment}")));
    }
    if !(invest.is_finite() && (0.0..=endowment).contains(&invest)) {
        return Err(Error::domain(format!(
            "investment {invest} outside [0, {endowment}]"
        )));
    }
    Ok(())
}

/// `λ₀ + ψ·(ℓ/ω)^γ`.
pub fn arrival_rate(tier: &TechnologyTier, invest: f64, endowment: f64) -> Result<f64> {
    check_invest(invest, endowment)?;
    Ok(tier.rate_at_fraction(invest / endowment))
}

/// Expected order arrival time for an exponential transit at `rate` plus a bump.
pub fn expected_arrival_time(rate: f64, bump_delay: f64) -> Result<f64> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::domain(format!("rate must be positive, got {rate}")));
    }
    if !(bump_delay.is_finite() && bump_delay >= 0.0) {
        return Err(Error::domain(format!("bump delay must be non-negative, got {bump_delay}")));
    }
    Ok(1.0 / rate + bump_delay)
}

/// Derivative of the expected transit time `1/λ` with respect to the investment.
///
/// At zero investment the derivative is the one-sided limit, which is 0 for
/// `γ > 1` and undefined otherwise.
pub fn marginal_expected_time(tier: &TechnologyTier, invest: f64, endowment: f64) -> Result<f64> {
    check_invest(invest, endowment)?;
    if invest == 0.0 {
        if tier.gamma > 1.0 {
            return Ok(0.0);
        }
        return Err(Error::domain(format!(
            "marginal expected time is singular at zero investment for gamma = {}",
            tier.gamma
        )));
    }
    let u = invest / endowment;
    let boost = tier.psi * u.powf(tier.gamma);
    let rate = tier.lambda0 + boost;
    Ok(-tier.gamma * boost / (invest * rate * rate))
}

/// Cross-partial `∂²(1/λ)/∂ℓ∂ω`.
///
/// Positive only while `ψ(ℓ/ω)^γ < λ₀`; it turns negative once the technology
/// boost exceeds the baseline rate.
pub fn expected_time_cross_partial(
    tier: &TechnologyTier,
    invest: f64,
    endowment: f64,
) -> Result<f64> {
    check_invest(invest, endowment)?;
    let u = invest / endowment;
    let boost = tier.psi * u.powf(tier.gamma);
    let rate = tier.lambda0 + boost;
    let g = tier.gamma;
    Ok(g * g * tier.psi * u.powf(g - 1.0) * (tier.lambda0 - boost)
        / (endowment * endowment * rate.powi(3)))
}

/// Exchange speed bump applied in a round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedBumpSpec {
    /// Mean delay Δ in seconds.
    pub mean_delay: f64,
    /// The market maker's cancellations are delayed too.
    pub symmetric: bool,
    /// Each participant draws its delay from {0.5Δ, Δ, 1.5Δ}.
    pub random: bool,
}

impl SpeedBumpSpec {
    pub fn new(mean_delay: f64, symmetric: bool, random: bool) -> Result<Self> {
        if !(mean_delay.is_finite() && mean_delay >= 0.0) {
            return Err(Error::domain(format!("mean delay must be >= 0, got {mean_delay}")));
        }
        Ok(SpeedBumpSpec { mean_delay, symmetric, random })
    }

    pub fn design(&self) -> Design {
        match (self.symmetric, self.random) {
            (true, false) => Design::SymmetricDeterministic,
            (false, false) => Design::AsymmetricDeterministic,
            (true, true) => Design::SymmetricRandom,
            (false, true) => Design::AsymmetricRandom,
        }
    }

    /// Delay applied to the market maker under a deterministic bump.
    pub fn market_maker_delay(&self) -> f64 {
        if self.symmetric {
            self.mean_delay
        } else {
            0.0
        }
    }

    /// The three equally likely delays of a random bump.
    pub fn delay_support(&self) -> [f64; 3] {
        let d = self.mean_delay;
        [0.5 * d, d, 1.5 * d]
    }

    /// True when the bump changes nothing (Δ = 0).
    pub fn is_inert(&self) -> bool {
        self.mean_delay == 0.0
    }
}

/// The four speed-bump designs plus the no-bump baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    NoBump,
    SymmetricDeterministic,
    AsymmetricDeterministic,
    SymmetricRandom,
    AsymmetricRandom,
}

impl Design {
    pub const BUMPED: [Design; 4] = [
        Design::SymmetricDeterministic,
        Design::AsymmetricDeterministic,
        Design::SymmetricRandom,
        Design::AsymmetricRandom,
    ];

    pub fn short_name(&self) -> &'static str {
        match self {
            Design::NoBump => "none",
            Design::SymmetricDeterministic => "sym-det",
            Design::AsymmetricDeterministic => "asym-det",
            Design::SymmetricRandom => "sym-rand",
            Design::AsymmetricRandom => "asym-rand",
        }
    }

    /// Builds the bump for this design at mean delay `delta` (`None` for no bump).
    pub fn bump(&self, delta: f64) -> Result<Option<SpeedBumpSpec>> {
        let (symmetric, random) = match self {
            Design::NoBump => return Ok(None),
            Design::SymmetricDeterministic => (true, false),
            Design::AsymmetricDeterministic => (false, false),
            Design::SymmetricRandom => (true, true),
            Design::AsymmetricRandom => (false, true),
        };
        SpeedBumpSpec::new(delta, symmetric, random).map(Some)
    }

    pub fn of(bump: Option<&SpeedBumpSpec>) -> Design {
        match bump {
            Some(b) if !b.is_inert() => b.design(),
            _ => Design::NoBump,
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" | "no-bump" => Design::NoBump,
            "sym-det" => Design::SymmetricDeterministic,
            "asym-det" => Design::AsymmetricDeterministic,
            "sym-rand" => Design::SymmetricRandom,
            "asym-rand" => Design::AsymmetricRandom,
            other => {
                return Err(Error::domain(format!(
                    "unknown design `{other}`; valid designs: none, sym-det, asym-det, sym-rand, asym-rand"
                )))
            }
        })
    }
}

/// One round of the lab protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSpec {
    /// 1-based round index.
    pub index: u32,
    pub bump: Option<SpeedBumpSpec>,
    /// Endowment ω in ECoins.
    pub endowment: f64,
    pub training: bool,
}

impl RoundSpec {
    /// A free-standing round (index 0) used by solvers and probes.
    pub fn standalone(bump: Option<SpeedBumpSpec>, endowment: f64) -> Result<Self> {
        if !(endowment.is_finite() && endowment > 0.0) {
            return Err(Error::domain(format!("endowment must be positive, got {endowment}")));
        }
        Ok(RoundSpec { index: 0, bump, endowment, training: false })
    }

    pub fn design(&self) -> Design {
        Design::of(self.bump.as_ref())
    }

    pub fn mean_delay(&self) -> f64 {
        self.bump.map_or(0.0, |b| b.mean_delay)
    }
}

/// Market-wide parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    /// Prize Σ captured by the first arriving trader.
    pub prize: f64,
    /// Market maker cancellation rate λ_M.
    pub mm_rate: f64,
    /// Traders per group.
    pub n_traders: usize,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig { prize: PRIZE, mm_rate: BASE_RATE, n_traders: 3 }
    }
}

impl MarketConfig {
    /// The two-trader, one-market-maker setting used for the theory.
    pub fn theory() -> Self {
        MarketConfig { n_traders: 2, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prize.is_finite() && self.prize >= 0.0) {
            return Err(Error::domain(format!("prize must be >= 0, got {}", self.prize)));
        }
        if !(self.mm_rate.is_finite() && self.mm_rate > 0.0) {
            return Err(Error::domain(format!("mm_rate must be > 0, got {}", self.mm_rate)));
        }
        if self.n_traders == 0 {
            return Err(Error::domain("n_traders must be at least 1"));
        }
        Ok(())
    }
}

/// Tiers plus market configuration as read from a JSON file.
///
/// ```json
/// { "tiers": [{"lambda0": 0.2, "psi": 0.3, "gamma": 1.25, "label": "high-cost"}],
///   "prize": 100, "mm_rate": 0.2, "n_traders": 3 }
/// ```
/// Missing keys fall back to the canonical values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_tiers")]
    pub tiers: Vec<TechnologyTier>,
    #[serde(flatten)]
    pub market: MarketConfig,
}

fn default_tiers() -> Vec<TechnologyTier> {
    TechnologyTier::canonical().to_vec()
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { tiers: default_tiers(), market: MarketConfig::default() }
    }
}

#[derive(Deserialize)]
struct PartialModelConfig {
    #[serde(default = "default_tiers")]
    tiers: Vec<TechnologyTier>,
    prize: Option<f64>,
    mm_rate: Option<f64>,
    n_traders: Option<usize>,
}

impl ModelConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: PartialModelConfig = serde_json::from_str(s)?;
        let d = MarketConfig::default();
        let cfg = ModelConfig {
            tiers: p.tiers,
            market: MarketConfig {
                prize: p.prize.unwrap_or(d.prize),
                mm_rate: p.mm_rate.unwrap_or(d.mm_rate),
                n_traders: p.n_traders.unwrap_or(d.n_traders),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiers.is_empty() {
            return Err(Error::domain("model config lists no tiers"));
        }
        for t in &self.tiers {
            t.validate()?;
        }
        self.market.validate()
    }

    pub fn tier(&self, label: &str) -> Result<&TechnologyTier> {
        self.tiers
            .iter()
            .find(|t| t.label == label)
            .ok_or_else(|| Error::domain(format!("no tier labelled `{label}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn table_endpoints() {
        let expected = [(0.2, 2.0), (0.2, 1.25), (0.2, 0.5)];
        for (tier, (t0, t1)) in TechnologyTier::canonical().iter().zip(expected) {
            let slow = expected_arrival_time(arrival_rate(tier, 0.0, 10.0).unwrap(), 0.0).unwrap();
            let fast = expected_arrival_time(arrival_rate(tier, 10.0, 10.0).unwrap(), 0.0).unwrap();
            assert_relative_eq!(slow, 1.0 / t0, max_relative = 1e-12);
            assert_relative_eq!(fast, t1, max_relative = 1e-12);
        }
    }

    #[test]
    fn arrival_rate_examples() {
        let high = TechnologyTier::high_cost();
        assert_eq!(arrival_rate(&high, 0.0, 10.0).unwrap(), 0.2);
        let low = TechnologyTier::low_cost();
        assert_relative_eq!(arrival_rate(&low, 20.0, 20.0).unwrap(), 2.0, max_relative = 1e-15);
        // 0.2 + 0.3 * 0.5^1.25 evaluated at 40 digits
        assert_relative_eq!(
            arrival_rate(&high, 5.0, 10.0).unwrap(),
            0.326134462288057181454668821434982234256,
            max_relative = 1e-15
        );
    }

    #[test]
    fn arrival_rate_rejects_bad_inputs() {
        let t = TechnologyTier::medium_cost();
        assert!(matches!(arrival_rate(&t, -0.1, 10.0), Err(Error::Domain(_))));
        assert!(matches!(arrival_rate(&t, 10.5, 10.0), Err(Error::Domain(_))));
        assert!(matches!(arrival_rate(&t, 0.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(arrival_rate(&t, f64::NAN, 10.0), Err(Error::Domain(_))));
    }

    #[test]
    fn expected_time_examples() {
        assert_eq!(expected_arrival_time(0.2, 0.0).unwrap(), 5.0);
        assert_eq!(expected_arrival_time(2.0, 0.5).unwrap(), 1.0);
        assert_eq!(expected_arrival_time(0.2, 7.5).unwrap(), 12.5);
        assert!(expected_arrival_time(0.0, 1.0).is_err());
        assert!(expected_arrival_time(-1.0, 1.0).is_err());
    }

    #[test]
    fn marginal_time_at_full_investment() {
        let t = TechnologyTier::medium_cost();
        let v = marginal_expected_time(&t, 10.0, 10.0).unwrap();
        assert_relative_eq!(v, -0.140625, max_relative = 1e-14);
    }

    #[test]
    fn marginal_time_at_origin() {
        assert_eq!(marginal_expected_time(&TechnologyTier::high_cost(), 0.0, 10.0).unwrap(), 0.0);
        let linear = TechnologyTier::new(0.2, 0.5, 1.0, "linear").unwrap();
        assert!(marginal_expected_time(&linear, 0.0, 10.0).is_err());
        assert!(marginal_expected_time(&linear, 1.0, 10.0).unwrap() < 0.0);
    }

    #[test]
    fn tier_validation() {
        assert!(TechnologyTier::new(0.0, 0.3, 1.2, "x").is_err());
        assert!(TechnologyTier::new(0.2, -0.3, 1.2, "x").is_err());
        assert!(TechnologyTier::by_label("medium-cost").is_ok());
        assert!(TechnologyTier::by_label("free").is_err());
    }

    #[test]
    fn design_parsing_round_trips() {
        for d in Design::BUMPED.iter().chain([Design::NoBump].iter()) {
            assert_eq!(d.short_name().parse::<Design>().unwrap(), *d);
        }
        assert!("sideways".parse::<Design>().is_err());
        let b = Design::AsymmetricRandom.bump(3.0).unwrap().unwrap();
        assert_eq!(b.design(), Design::AsymmetricRandom);
        assert_eq!(Design::of(Some(&SpeedBumpSpec::new(0.0, true, true).unwrap())), Design::NoBump);
    }

    #[test]
    fn model_config_json() {
        let cfg = ModelConfig::from_json_str(
            r#"{"tiers":[{"lambda0":0.2,"psi":0.6,"gamma":1.5,"label":"medium-cost"}],
                "prize":100,"mm_rate":0.25,"n_traders":2}"#,
        )
        .unwrap();
        assert_eq!(cfg.tiers.len(), 1);
        assert_eq!(cfg.market.mm_rate, 0.25);
        assert_eq!(cfg.market.n_traders, 2);
        let defaults = ModelConfig::from_json_str("{}").unwrap();
        assert_eq!(defaults, ModelConfig::default());
        assert!(ModelConfig::from_json_str(r#"{"mm_rate": 0}"#).is_err());
    }
}
