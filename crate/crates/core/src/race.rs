//! Seeded Monte Carlo simulation of single sniping races.
//!
//! Randomness is addressed by coordinates rather than consumed from a shared
//! generator: a ChaCha8 key is built from `(master seed, session, group,
//! round)`, the stream id is the replication index and each
//! `(participant, draw)` pair owns a fixed 64-bit word of that stream.
//! Identical coordinates therefore always see the same uniform, regardless
//! of which thread asks or in which order.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::model::{MarketConfig, RoundSpec, SpeedBumpSpec, TechnologyTier};

/// Coordinates of a random substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub session: u64,
    pub group: u64,
    pub round: u64,
    pub replication: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64) -> Self {
        SeedSpec { master_seed, ..Default::default() }
    }

    pub fn at(self, session: u64, group: u64, round: u64) -> Self {
        SeedSpec { session, group, round, ..self }
    }

    pub fn replication(self, replication: u64) -> Self {
        SeedSpec { replication, ..self }
    }

    fn key(&self) -> [u8; 32] {
        let mut key = [0u8; 32];
        for (chunk, v) in key
            .chunks_exact_mut(8)
            .zip([self.master_seed, self.session, self.group, self.round])
        {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        key
    }

    /// Generator for auxiliary draws of `participant` (agent policies),
    /// kept on a stream disjoint from every race replication.
    pub fn aux_rng(&self, participant: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_stream((1 << 63) | participant as u64);
        rng
    }
}

/// Per-participant draw slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Draw {
    Latency = 0,
    Bump = 1,
}

const SLOTS_PER_PARTICIPANT: u128 = 2;

/// Random substream for one replication.
pub struct Substream {
    rng: ChaCha8Rng,
}

impl Substream {
    pub fn new(seed: &SeedSpec) -> Self {
        let mut rng = ChaCha8Rng::from_seed(seed.key());
        rng.set_stream(seed.replication);
        Substream { rng }
    }

    /// Uniform on the open interval (0, 1) at `(participant, draw)`.
    pub fn uniform(&mut self, participant: usize, draw: Draw) -> f64 {
        // one u64 (two 32-bit words) per slot
        let pos = 2 * (participant as u128 * SLOTS_PER_PARTICIPANT + draw as u128);
        if self.rng.get_word_pos() != pos {
            self.rng.set_word_pos(pos);
        }
        self.rng.sample(Open01)
    }
}

/// Maps a uniform to a bump delay: `Δ` when deterministic, otherwise one of
/// `{0.5Δ, Δ, 1.5Δ}` with equal probability.
pub fn bump_from_uniform(bump: &SpeedBumpSpec, u: f64) -> f64 {
    if !bump.random {
        return bump.mean_delay;
    }
    let idx = ((u * 3.0) as usize).min(2);
    bump.delay_support()[idx]
}

/// Draws the bump delay of `participant` from its substream slot.
pub fn draw_bump(bump: &SpeedBumpSpec, stream: &mut Substream, participant: usize) -> f64 {
    bump_from_uniform(bump, stream.uniform(participant, Draw::Bump))
}

/// Exponential transit time by inverse CDF. A zero rate never arrives.
pub fn exponential_from_uniform(rate: f64, u: f64) -> f64 {
    if rate == 0.0 {
        f64::INFINITY
    } else {
        -u.ln() / rate
    }
}

/// Who reached the stale quote first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Winner {
    Trader(usize),
    MarketMaker,
}

/// Raw race draws without money attached.
#[derive(Debug, Clone, PartialEq)]
pub struct RaceDraw {
    /// Transit plus bump, per trader.
    pub arrival_times: Vec<f64>,
    pub mm_time: f64,
    /// Realized bumps, traders first, market maker last.
    pub realized_bumps: Vec<f64>,
    pub winner: Winner,
    /// Two participants hit the identical arrival time; the lowest index won.
    pub tie_broken: bool,
}

/// Runs one race. Traders occupy participant slots `0..n`, the market
/// maker slot `n`.
pub fn simulate_race(
    rates: &[f64],
    mm_rate: f64,
    bump: Option<&SpeedBumpSpec>,
    stream: &mut Substream,
) -> RaceDraw {
    let n = rates.len();
    let mut realized_bumps = Vec::with_capacity(n + 1);
    let mut arrival_times = Vec::with_capacity(n);
    for (p, &rate) in rates.iter().enumerate() {
        let transit = exponential_from_uniform(rate, stream.uniform(p, Draw::Latency));
        let delay = bump.map_or(0.0, |b| draw_bump(b, stream, p));
        realized_bumps.push(delay);
        arrival_times.push(transit + delay);
    }
    let mm_transit = exponential_from_uniform(mm_rate, stream.uniform(n, Draw::Latency));
    let mm_delay = match bump {
        Some(b) if b.symmetric => draw_bump(b, stream, n),
        _ => 0.0,
    };
    realized_bumps.push(mm_delay);
    let mm_time = mm_transit + mm_delay;

    let mut best = 0usize;
    let mut best_time = f64::INFINITY;
    let mut tie_broken = false;
    for (p, &t) in arrival_times.iter().chain(std::iter::once(&mm_time)).enumerate() {
        if t < best_time {
            best = p;
            best_time = t;
            tie_broken = false;
        } else if t == best_time && t.is_finite() {
            tie_broken = true;
        }
    }
    if tie_broken {
        log::debug!("arrival tie at {best_time}s resolved for participant {best}");
    }
    let winner = if best == n { Winner::MarketMaker } else { Winner::Trader(best) };
    RaceDraw { arrival_times, mm_time, realized_bumps, winner, tie_broken }
}

/// One simulated round with payoffs.
#[derive(Debug, Clone, PartialEq)]
pub struct RaceOutcome {
    pub arrival_times: Vec<f64>,
    pub mm_time: f64,
    pub realized_bumps: Vec<f64>,
    pub winner: Winner,
    /// `(ω − ℓ_i) + Σ·[i won]` per trader.
    pub payoffs: Vec<f64>,
    pub rates: Vec<f64>,
    pub tie_broken: bool,
}

fn trader_rates(
    round: &RoundSpec,
    invests: &[f64],
    tier: &TechnologyTier,
    config: &MarketConfig,
) -> Result<Vec<f64>> {
    if invests.len() != config.n_traders {
        return Err(Error::domain(format!(
            "expected {} investments, got {}",
            config.n_traders,
            invests.len()
        )));
    }
    invests.iter().map(|&l| tier.arrival_rate(l, round.endowment)).collect()
}

/// Simulates one round: latency and bump draws, winner, payoffs.
pub fn simulate_round(
    round: &RoundSpec,
    invests: &[f64],
    tier: &TechnologyTier,
    config: &MarketConfig,
    seed: &SeedSpec,
) -> Result<RaceOutcome> {
    let rates = trader_rates(round, invests, tier, config)?;
    let mut stream = Substream::new(seed);
    let race = simulate_race(&rates, config.mm_rate, round.bump.as_ref(), &mut stream);
    let payoffs = invests
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let prize = if race.winner == Winner::Trader(i) { config.prize } else { 0.0 };
            round.endowment - l + prize
        })
        .collect();
    Ok(RaceOutcome {
        arrival_times: race.arrival_times,
        mm_time: race.mm_time,
        realized_bumps: race.realized_bumps,
        winner: race.winner,
        payoffs,
        rates,
        tie_broken: race.tie_broken,
    })
}

/// Win frequencies with binomial standard errors; traders first, market
/// maker last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub wins: Vec<u64>,
    pub n_reps: u64,
}

impl McEstimate {
    fn from_wins(wins: Vec<u64>, n_reps: u64) -> Self {
        let n = n_reps as f64;
        let estimates: Vec<f64> = wins.iter().map(|&w| w as f64 / n).collect();
        let std_errors = estimates.iter().map(|p| (p * (1.0 - p) / n).sqrt()).collect();
        McEstimate { estimates, std_errors, wins, n_reps }
    }

    /// Number of standard errors between the estimate for `idx` and `p`.
    /// Uses the standard error implied by `p` itself so that an estimate
    /// of exactly 0 or 1 is still judged.
    pub fn z_score(&self, idx: usize, p: f64) -> f64 {
        let se = (p * (1.0 - p) / self.n_reps as f64).sqrt();
        let diff = self.estimates[idx] - p;
        if se == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / se
        }
    }
}

const BATCH: u64 = 8192;

/// Monte Carlo win frequencies for an arbitrary rate configuration.
pub fn monte_carlo_race(
    rates: &[f64],
    mm_rate: f64,
    bump: Option<&SpeedBumpSpec>,
    n_reps: u64,
    seed: &SeedSpec,
    exec: Execution,
) -> Result<McEstimate> {
    if n_reps == 0 {
        return Err(Error::domain("n_reps must be at least 1"));
    }
    if rates.iter().chain(std::iter::once(&mm_rate)).any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::domain("rates must be finite and >= 0"));
    }
    let slots = rates.len() + 1;
    let batches = n_reps.div_ceil(BATCH);
    let counts = map_indexed(batches as usize, exec, |b| {
        let mut wins = vec![0u64; slots];
        let lo = b as u64 * BATCH;
        let hi = (lo + BATCH).min(n_reps);
        for rep in lo..hi {
            let mut stream = Substream::new(&seed.replication(rep));
            let race = simulate_race(rates, mm_rate, bump, &mut stream);
            match race.winner {
                Winner::Trader(i) => wins[i] += 1,
                Winner::MarketMaker => wins[slots - 1] += 1,
            }
        }
        wins
    });
    let mut wins = vec![0u64; slots];
    for batch in counts {
        for (w, c) in wins.iter_mut().zip(batch) {
            *w += c;
        }
    }
    Ok(McEstimate::from_wins(wins, n_reps))
}

/// Monte Carlo execution probabilities for a round and investment profile.
pub fn monte_carlo_exec_prob(
    round: &RoundSpec,
    invests: &[f64],
    tier: &TechnologyTier,
    config: &MarketConfig,
    n_reps: u64,
    seed: &SeedSpec,
    exec: Execution,
) -> Result<McEstimate> {
    let rates = trader_rates(round, invests, tier, config)?;
    monte_carlo_race(&rates, config.mm_rate, round.bump.as_ref(), n_reps, seed, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Design;

    #[test]
    fn deterministic_bump_is_exact() {
        let b = SpeedBumpSpec::new(3.0, true, false).unwrap();
        let mut s = Substream::new(&SeedSpec::new(1));
        for p in 0..10 {
            assert_eq!(draw_bump(&b, &mut s, p), 3.0);
        }
    }

    #[test]
    fn random_bump_frequencies() {
        let b = SpeedBumpSpec::new(1.0, false, true).unwrap();
        let n = 3_000_000u64;
        let mut counts = [0u64; 3];
        for rep in 0..n / 3 {
            let mut s = Substream::new(&SeedSpec::new(9).replication(rep));
            for p in 0..3 {
                let v = draw_bump(&b, &mut s, p);
                let idx = [0.5, 1.0, 1.5].iter().position(|x| *x == v).expect("off-support draw");
                counts[idx] += 1;
            }
        }
        let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 3.0).abs() < 3.0 * sigma, "{counts:?}");
        }
        let zero = SpeedBumpSpec::new(0.0, true, true).unwrap();
        assert_eq!(bump_from_uniform(&zero, 0.9), 0.0);
    }

    #[test]
    fn exponential_mean() {
        let rate = 0.35;
        let n = 1_000_000u64;
        let mut sum = 0.0;
        for rep in 0..n {
            let mut s = Substream::new(&SeedSpec::new(4).replication(rep));
            sum += exponential_from_uniform(rate, s.uniform(0, Draw::Latency));
        }
        let mean = sum / n as f64;
        let se = (1.0 / rate) / (n as f64).sqrt();
        assert!((mean - 1.0 / rate).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn coordinates_are_stable_and_distinct() {
        let seed = SeedSpec::new(77).at(1, 2, 3).replication(4);
        let mut a = Substream::new(&seed);
        let mut b = Substream::new(&seed);
        // reading order must not matter
        let a1 = a.uniform(2, Draw::Bump);
        let a0 = a.uniform(0, Draw::Latency);
        let b0 = b.uniform(0, Draw::Latency);
        let b1 = b.uniform(2, Draw::Bump);
        assert_eq!((a0, a1), (b0, b1));
        assert_ne!(a0, a1);
        let mut other = Substream::new(&seed.replication(5));
        assert_ne!(other.uniform(0, Draw::Latency), a0);
        let mut other = Substream::new(&SeedSpec::new(77).at(1, 2, 4).replication(4));
        assert_ne!(other.uniform(0, Draw::Latency), a0);
    }

    #[test]
    fn round_is_reproducible_and_pays_correctly() {
        let round = RoundSpec::standalone(Design::SymmetricRandom.bump(3.0).unwrap(), 20.0).unwrap();
        let cfg = MarketConfig::default();
        let tier = TechnologyTier::medium_cost();
        let seed = SeedSpec::new(5).at(0, 1, 7);
        let a = simulate_round(&round, &[5.0, 10.0, 20.0], &tier, &cfg, &seed).unwrap();
        let b = simulate_round(&round, &[5.0, 10.0, 20.0], &tier, &cfg, &seed).unwrap();
        assert_eq!(a, b);
        let prize_paid: f64 = a.payoffs.iter().zip([5.0, 10.0, 20.0]).map(|(p, l)| p - (20.0 - l)).sum();
        assert!(prize_paid == 0.0 || prize_paid == 100.0);
        assert_eq!(prize_paid == 100.0, matches!(a.winner, Winner::Trader(_)));
        assert!(a.payoffs.iter().all(|p| *p >= 0.0));
        assert_eq!(a.realized_bumps.len(), 4);
    }

    #[test]
    fn round_rejects_bad_investments() {
        let round = RoundSpec::standalone(None, 10.0).unwrap();
        let cfg = MarketConfig::default();
        let tier = TechnologyTier::high_cost();
        let seed = SeedSpec::new(1);
        assert!(simulate_round(&round, &[1.0, 2.0], &tier, &cfg, &seed).is_err());
        assert!(simulate_round(&round, &[1.0, 2.0, 11.0], &tier, &cfg, &seed).is_err());
    }

    #[test]
    fn asymmetric_market_maker_is_undelayed() {
        let round = RoundSpec::standalone(Design::AsymmetricRandom.bump(5.0).unwrap(), 10.0).unwrap();
        let out = simulate_round(
            &round,
            &[0.0; 3],
            &TechnologyTier::low_cost(),
            &MarketConfig::default(),
            &SeedSpec::new(3),
        )
        .unwrap();
        assert_eq!(out.realized_bumps[3], 0.0);
        assert!(out.realized_bumps[..3].iter().all(|b| [2.5, 5.0, 7.5].contains(b)));
    }

    #[test]
    fn zero_reps_rejected() {
        assert!(monte_carlo_race(&[0.2], 0.2, None, 0, &SeedSpec::new(1), Execution::Sequential).is_err());
    }

    #[test]
    fn estimates_sum_to_one_and_are_execution_independent() {
        let bump = Design::SymmetricRandom.bump(3.0).unwrap();
        let seq = monte_carlo_race(&[0.5, 0.2], 0.2, bump.as_ref(), 50_000, &SeedSpec::new(2), Execution::Sequential)
            .unwrap();
        let par = monte_carlo_race(&[0.5, 0.2], 0.2, bump.as_ref(), 50_000, &SeedSpec::new(2), Execution::Parallel)
            .unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.wins.iter().sum::<u64>(), 50_000);
    }
}
