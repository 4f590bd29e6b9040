//! The 32-round laboratory protocol played by simulated agents.
//!
//! Each group keeps one technology tier for the whole session. In every
//! round each trader's policy picks an investment, the race is simulated on
//! the round's own random coordinates and one [`RoundRecord`] per trader is
//! emitted. Groups are independent and may run concurrently; records always
//! come back sorted by group, round and participant.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::ProbEngine;
use crate::equilibrium::{best_response, solve_symmetric_equilibrium};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, map_slice, Execution};
use crate::model::{MarketConfig, RoundSpec, SpeedBumpSpec, TechnologyTier};
use crate::race::{simulate_round, SeedSpec, Winner};

/// Number of leading training rounds.
pub const TRAINING_ROUNDS: u32 = 4;

// (Δ, symmetric, random, ω); Δ = 0 rows carry no bump.
const TABLE: [(f64, bool, bool, f64); 32] = [
    (5.0, true, false, 20.0),
    (1.0, false, true, 10.0),
    (3.0, true, true, 20.0),
    (0.0, false, false, 10.0),
    (1.0, true, true, 10.0),
    (5.0, false, true, 20.0),
    (3.0, true, true, 10.0),
    (1.0, true, false, 20.0),
    (5.0, true, true, 10.0),
    (0.0, false, false, 20.0),
    (1.0, true, false, 10.0),
    (5.0, false, false, 20.0),
    (3.0, false, true, 10.0),
    (1.0, true, true, 20.0),
    (5.0, true, false, 10.0),
    (0.0, false, false, 10.0),
    (3.0, true, true, 20.0),
    (5.0, false, false, 10.0),
    (1.0, false, true, 20.0),
    (5.0, true, false, 20.0),
    (3.0, false, false, 10.0),
    (0.0, false, false, 20.0),
    (5.0, true, true, 20.0),
    (3.0, true, false, 10.0),
    (1.0, false, true, 10.0),
    (3.0, false, false, 20.0),
    (5.0, false, true, 10.0),
    (0.0, false, false, 10.0),
    (1.0, false, false, 20.0),
    (3.0, true, false, 20.0),
    (3.0, false, true, 20.0),
    (1.0, false, false, 10.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub rounds: Vec<RoundSpec>,
}

/// The fixed 32-round sequence: rounds 1–4 train, then four no-bump rounds
/// and every bumped design × Δ × ω cell once.
pub fn build_schedule() -> Schedule {
    let rounds = TABLE
        .iter()
        .enumerate()
        .map(|(i, &(delta, symmetric, random, endowment))| RoundSpec {
            index: i as u32 + 1,
            bump: (delta > 0.0).then_some(SpeedBumpSpec { mean_delay: delta, symmetric, random }),
            endowment,
            training: (i as u32) < TRAINING_ROUNDS,
        })
        .collect();
    Schedule { rounds }
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn analysis_rounds(&self) -> impl Iterator<Item = &RoundSpec> {
        self.rounds.iter().filter(|r| !r.training)
    }

    /// SHA-256 of the schedule's JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schedule serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// How a simulated trader chooses its investment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AgentPolicy {
    /// Symmetric equilibrium of the round's design (exact engine, group size).
    Equilibrium,
    /// Invests `fraction·ω` every round.
    FixedFraction { fraction: f64 },
    /// Best response to the rivals' previous investments plus
    /// `Normal(0, scale·ω)` noise.
    NoisyBestResponse { scale: f64 },
    /// Uniform on `[0, ω]`.
    UniformRandom,
}

impl AgentPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AgentPolicy::FixedFraction { fraction } if !fraction.is_finite() => {
                Err(Error::domain(format!("fixed fraction must be finite, got {fraction}")))
            }
            AgentPolicy::NoisyBestResponse { scale } if !(scale.is_finite() && scale >= 0.0) => {
                Err(Error::domain(format!("noise scale must be finite and ≥ 0, got {scale}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AgentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentPolicy::Equilibrium => write!(f, "equilibrium"),
            AgentPolicy::FixedFraction { fraction } => write!(f, "fixed:{fraction}"),
            AgentPolicy::NoisyBestResponse { scale } => write!(f, "noisy-br:{scale}"),
            AgentPolicy::UniformRandom => write!(f, "uniform"),
        }
    }
}

impl FromStr for AgentPolicy {
    type Err = Error;

    /// Parses `equilibrium`, `fixed:F`, `noisy-br:S` or `uniform`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |what: &str| -> Result<f64> {
            arg.ok_or_else(|| Error::Spec(format!("policy `{name}` needs a {what}, e.g. `{name}:0.5`")))?
                .parse()
                .map_err(|_| Error::Spec(format!("bad {what} in policy `{s}`")))
        };
        let policy = match name {
            "equilibrium" => AgentPolicy::Equilibrium,
            "fixed" | "fixed-fraction" => AgentPolicy::FixedFraction { fraction: num("fraction")? },
            "noisy-br" | "noisy-best-response" => AgentPolicy::NoisyBestResponse { scale: num("scale")? },
            "uniform" | "uniform-random" => AgentPolicy::UniformRandom,
            _ => {
                return Err(Error::Spec(format!(
                    "unknown policy `{s}` (expected equilibrium, fixed:F, noisy-br:S, uniform)"
                )))
            }
        };
        if arg.is_some() && matches!(policy, AgentPolicy::Equilibrium | AgentPolicy::UniformRandom) {
            return Err(Error::Spec(format!("policy `{name}` takes no argument")));
        }
        policy.validate()?;
        Ok(policy)
    }
}

/// Technology tier per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TierAssignment {
    /// One label per group, cycled if shorter than the number of groups.
    Explicit(Vec<String>),
    /// Uniform over the configured tiers, drawn from the session seed.
    SeededRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session_id: u64,
    pub n_groups: usize,
    /// One policy per trader slot, or a single policy for everyone.
    pub policies: Vec<AgentPolicy>,
    pub tier_assignment: TierAssignment,
    pub tiers: Vec<TechnologyTier>,
    pub market: MarketConfig,
    pub master_seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            session_id: 1,
            n_groups: 18,
            policies: vec![AgentPolicy::Equilibrium],
            tier_assignment: TierAssignment::SeededRandom,
            tiers: TechnologyTier::canonical().to_vec(),
            market: MarketConfig::default(),
            master_seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        if self.n_groups == 0 {
            return Err(Error::domain("a session needs at least one group"));
        }
        if self.tiers.is_empty() {
            return Err(Error::domain("no technology tiers configured"));
        }
        for t in &self.tiers {
            t.validate()?;
        }
        if !(self.policies.len() == 1 || self.policies.len() == self.market.n_traders) {
            return Err(Error::domain(format!(
                "need 1 or {} policies, got {}",
                self.market.n_traders,
                self.policies.len()
            )));
        }
        for p in &self.policies {
            p.validate()?;
        }
        if let TierAssignment::Explicit(labels) = &self.tier_assignment {
            if labels.is_empty() {
                return Err(Error::domain("explicit tier assignment is empty"));
            }
            for l in labels {
                self.tier(l)?;
            }
        }
        Ok(())
    }

    fn tier(&self, label: &str) -> Result<&TechnologyTier> {
        self.tiers
            .iter()
            .find(|t| t.label == label)
            .ok_or_else(|| Error::domain(format!("unknown tier `{label}`")))
    }

    pub fn policy(&self, slot: usize) -> AgentPolicy {
        if self.policies.len() == 1 {
            self.policies[0]
        } else {
            self.policies[slot]
        }
    }

    /// Tier label of each group (1-based groups in order).
    pub fn resolve_tiers(&self) -> Result<Vec<String>> {
        (1..=self.n_groups as u64)
            .map(|g| match &self.tier_assignment {
                TierAssignment::Explicit(labels) => Ok(labels[(g as usize - 1) % labels.len()].clone()),
                TierAssignment::SeededRandom => {
                    // round 0 is not part of the schedule, so its coordinates are free
                    let mut rng = SeedSpec::new(self.master_seed).at(self.session_id, g, 0).aux_rng(0);
                    Ok(self.tiers[rng.random_range(0..self.tiers.len())].label.clone())
                }
            })
            .collect()
    }
}

/// One participant in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub session_id: u64,
    pub group_id: u64,
    pub participant_id: u64,
    pub round: u32,
    pub training: bool,
    pub endowment: f64,
    pub bump_mean: f64,
    /// Not applicable (`None`) in rounds without a bump.
    pub bump_symmetric: Option<bool>,
    pub bump_random: Option<bool>,
    pub realized_bump: f64,
    pub tier: String,
    pub invest: f64,
    pub invest_frac: f64,
    pub arrival_rate: f64,
    pub arrival_time: f64,
    pub won: bool,
    pub won_previous: bool,
    pub payoff: f64,
    /// The policy's choice fell outside `[0, ω]` and was clamped.
    pub clamped: bool,
}

pub const CSV_HEADER: [&str; 19] = [
    "session_id",
    "group_id",
    "participant_id",
    "round",
    "training",
    "endowment",
    "bump_mean",
    "bump_symmetric",
    "bump_random",
    "realized_bump",
    "tier",
    "invest",
    "invest_frac",
    "arrival_rate",
    "arrival_time",
    "won",
    "won_previous",
    "payoff",
    "clamped",
];

type CellKey = (String, String);

fn cell_key(tier: &str, round: &RoundSpec) -> CellKey {
    (tier.to_string(), format!("{}|{}|{}", round.design(), round.mean_delay(), round.endowment))
}

/// Symmetric equilibrium investment for every (tier, round design) the
/// session needs, solved once per cell.
fn equilibrium_table(
    schedule: &Schedule,
    labels: &[String],
    config: &SessionConfig,
    exec: Execution,
) -> Result<BTreeMap<CellKey, f64>> {
    let mut cells: BTreeMap<CellKey, (TechnologyTier, RoundSpec)> = BTreeMap::new();
    for label in labels {
        let tier = config.tier(label)?;
        for r in &schedule.rounds {
            cells.entry(cell_key(label, r)).or_insert_with(|| (tier.clone(), r.clone()));
        }
    }
    let entries: Vec<_> = cells.into_iter().collect();
    let solved = map_slice(&entries, exec, |(_, (tier, round))| {
        let eq = solve_symmetric_equilibrium(round, tier, &config.market, ProbEngine::Exact)?;
        if !eq.converged {
            log::warn!(
                "{} {} Δ={} ω={}: no symmetric pure equilibrium, playing the best-response jump point",
                tier.label,
                round.design(),
                round.mean_delay(),
                round.endowment
            );
        }
        Ok(eq.invest())
    });
    entries
        .into_iter()
        .zip(solved)
        .map(|((k, _), v)| v.map(|v| (k, v)))
        .collect()
}

struct GroupContext<'a> {
    config: &'a SessionConfig,
    schedule: &'a Schedule,
    equilibria: &'a BTreeMap<CellKey, f64>,
}

fn choose(
    ctx: &GroupContext<'_>,
    policy: AgentPolicy,
    slot: usize,
    round: &RoundSpec,
    tier: &TechnologyTier,
    prev_fracs: Option<&[f64]>,
    seed: &SeedSpec,
) -> Result<f64> {
    let omega = round.endowment;
    Ok(match policy {
        AgentPolicy::Equilibrium => ctx.equilibria[&cell_key(&tier.label, round)],
        AgentPolicy::FixedFraction { fraction } => fraction * omega,
        AgentPolicy::UniformRandom => seed.aux_rng(slot).random::<f64>() * omega,
        AgentPolicy::NoisyBestResponse { scale } => {
            let rivals: Vec<f64> = (0..ctx.config.market.n_traders)
                .filter(|&j| j != slot)
                .map(|j| prev_fracs.map_or(0.5, |f| f[j]) * omega)
                .collect();
            let br = best_response(&rivals, round, tier, &ctx.config.market, ProbEngine::Exact)?;
            let noise = Normal::new(0.0, scale * omega).map_err(|e| Error::domain(e.to_string()))?;
            br + noise.sample(&mut seed.aux_rng(slot))
        }
    })
}

fn run_group(ctx: &GroupContext<'_>, group: u64, label: &str) -> Result<Vec<RoundRecord>> {
    let config = ctx.config;
    let n = config.market.n_traders;
    let tier = config.tier(label)?;
    let mut records = Vec::with_capacity(n * ctx.schedule.len());
    let mut prev_fracs: Option<Vec<f64>> = None;
    let mut prev_won = vec![false; n];
    for round in &ctx.schedule.rounds {
        let seed = SeedSpec::new(config.master_seed).at(config.session_id, group, u64::from(round.index));
        let omega = round.endowment;
        let mut invests = Vec::with_capacity(n);
        let mut clamped = Vec::with_capacity(n);
        for slot in 0..n {
            let raw = choose(ctx, config.policy(slot), slot, round, tier, prev_fracs.as_deref(), &seed)?;
            if !raw.is_finite() {
                return Err(Error::domain(format!("policy produced {raw} in round {}", round.index)));
            }
            let l = raw.clamp(0.0, omega);
            clamped.push(l != raw);
            invests.push(l);
        }
        let outcome = simulate_round(round, &invests, tier, &config.market, &seed)?;
        for slot in 0..n {
            let won = outcome.winner == Winner::Trader(slot);
            records.push(RoundRecord {
                session_id: config.session_id,
                group_id: group,
                participant_id: (group - 1) * n as u64 + slot as u64 + 1,
                round: round.index,
                training: round.training,
                endowment: omega,
                bump_mean: round.mean_delay(),
                bump_symmetric: round.bump.map(|b| b.symmetric),
                bump_random: round.bump.map(|b| b.random),
                realized_bump: outcome.realized_bumps[slot],
                tier: tier.label.clone(),
                invest: invests[slot],
                invest_frac: invests[slot] / omega,
                arrival_rate: outcome.rates[slot],
                arrival_time: outcome.arrival_times[slot],
                won,
                won_previous: prev_won[slot],
                payoff: outcome.payoffs[slot],
                clamped: clamped[slot],
            });
            prev_won[slot] = won;
        }
        prev_fracs = Some(invests.iter().map(|l| l / omega).collect());
    }
    Ok(records)
}

/// Plays the full schedule for every group.
pub fn run_session(config: &SessionConfig, exec: Execution) -> Result<Vec<RoundRecord>> {
    run_session_with(config, &build_schedule(), exec)
}

pub fn run_session_with(config: &SessionConfig, schedule: &Schedule, exec: Execution) -> Result<Vec<RoundRecord>> {
    config.validate()?;
    let labels = config.resolve_tiers()?;
    let needs_eq = (0..config.market.n_traders).any(|s| config.policy(s) == AgentPolicy::Equilibrium);
    let equilibria = if needs_eq {
        let mut distinct = labels.clone();
        distinct.sort();
        distinct.dedup();
        equilibrium_table(schedule, &distinct, config, exec)?
    } else {
        BTreeMap::new()
    };
    let ctx = GroupContext { config, schedule, equilibria: &equilibria };
    let groups = map_indexed(labels.len(), exec, |g| run_group(&ctx, g as u64 + 1, &labels[g]));
    let mut records = Vec::with_capacity(labels.len() * config.market.n_traders * schedule.len());
    for g in groups {
        records.extend(g?);
    }
    Ok(records)
}

/// Records outside the training rounds; an empty result is an error.
pub fn analysis_records(records: &[RoundRecord]) -> Result<Vec<RoundRecord>> {
    let out: Vec<_> = records.iter().filter(|r| !r.training).cloned().collect();
    if out.is_empty() {
        return Err(Error::EmptyDataset("no records outside the training rounds".into()));
    }
    Ok(out)
}

/// `x` rounded to six significant digits, printed in its shortest form.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", if x == 0.0 { 0.0 } else { x });
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("valid float literal");
    format!("{rounded}")
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn opt_flag(b: Option<bool>) -> &'static str {
    b.map_or("", flag)
}

impl RoundRecord {
    fn csv_fields(&self) -> [String; 19] {
        [
            self.session_id.to_string(),
            self.group_id.to_string(),
            self.participant_id.to_string(),
            self.round.to_string(),
            flag(self.training).into(),
            format_sig6(self.endowment),
            format_sig6(self.bump_mean),
            opt_flag(self.bump_symmetric).into(),
            opt_flag(self.bump_random).into(),
            format_sig6(self.realized_bump),
            self.tier.clone(),
            format_sig6(self.invest),
            format_sig6(self.invest_frac),
            format_sig6(self.arrival_rate),
            format_sig6(self.arrival_time),
            flag(self.won).into(),
            flag(self.won_previous).into(),
            format_sig6(self.payoff),
            flag(self.clamped).into(),
        ]
    }

    fn from_csv(row: &csv::StringRecord, line: u64) -> Result<Self> {
        let bad = |col: usize| Error::Spec(format!("line {line}: bad value `{}` in column {}", &row[col], CSV_HEADER[col]));
        let int = |col: usize| row[col].parse::<u64>().map_err(|_| bad(col));
        let num = |col: usize| row[col].parse::<f64>().map_err(|_| bad(col));
        let boolean = |col: usize| match &row[col] {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(col)),
        };
        let opt = |col: usize| if row[col].is_empty() { Ok(None) } else { boolean(col).map(Some) };
        Ok(RoundRecord {
            session_id: int(0)?,
            group_id: int(1)?,
            participant_id: int(2)?,
            round: row[3].parse().map_err(|_| bad(3))?,
            training: boolean(4)?,
            endowment: num(5)?,
            bump_mean: num(6)?,
            bump_symmetric: opt(7)?,
            bump_random: opt(8)?,
            realized_bump: num(9)?,
            tier: row[10].to_string(),
            invest: num(11)?,
            invest_frac: num(12)?,
            arrival_rate: num(13)?,
            arrival_time: num(14)?,
            won: boolean(15)?,
            won_previous: boolean(16)?,
            payoff: num(17)?,
            clamped: boolean(18)?,
        })
    }
}

/// Writes records as CSV (header plus one row each).
pub fn write_csv<W: Write>(records: &[RoundRecord], out: W) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("refusing to export an empty record list".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record(r.csv_fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(records: &[RoundRecord], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("refusing to export an empty record list".into()));
    }
    write_csv(records, BufWriter::new(File::create(path)?))
}

pub fn read_csv_from<R: Read>(input: R) -> Result<Vec<RoundRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Spec(format!(
            "unexpected CSV header; expected {}",
            CSV_HEADER.join(",")
        )));
    }
    rdr.records()
        .enumerate()
        .map(|(i, row)| RoundRecord::from_csv(&row?, i as u64 + 2))
        .collect()
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    read_csv_from(BufReader::new(File::open(path)?))
}

/// Provenance written next to a session's CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub master_seed: u64,
    pub session_id: u64,
    pub n_groups: usize,
    pub n_traders: usize,
    pub policies: Vec<AgentPolicy>,
    pub group_tiers: Vec<String>,
    pub tiers: Vec<TechnologyTier>,
    pub schedule_hash: String,
    pub n_records: usize,
}

impl SessionManifest {
    pub fn new(config: &SessionConfig, n_records: usize) -> Result<Self> {
        Ok(SessionManifest {
            master_seed: config.master_seed,
            session_id: config.session_id,
            n_groups: config.n_groups,
            n_traders: config.market.n_traders,
            policies: config.policies.clone(),
            group_tiers: config.resolve_tiers()?,
            tiers: config.tiers.clone(),
            schedule_hash: build_schedule().hash(),
            n_records,
        })
    }
}
