use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use speedbump::analytics::{exec_prob, ProbEngine, RaceParams};
use speedbump::econometrics::{coefficient_csv, default_battery, run_battery, Battery, Dataset};
use speedbump::equilibrium::{canonical_grid, comparative_statics, hypothesis_checks, StaticsCell, StaticsRow};
use speedbump::model::{Design, ModelConfig, SpeedBumpSpec, TechnologyTier};
use speedbump::race::{monte_carlo_race, SeedSpec};
use speedbump::session::{read_csv_from, run_session, write_csv, RoundRecord, SessionConfig, SessionManifest, TierAssignment};
use speedbump::verify::{run_all, VerifyOptions};
use speedbump::Error;

use crate::output::{FileDigest, Outcome};
use crate::{AnalyzeArgs, EngineChoice, Failure, Format, ProbeArgs, RaceArgs, SessionArgs, SimulateArgs, SolveArgs, VerifyArgs};

const DESIGN_MATRIX: &str = "\
valid design cells:
  none       Δ = 0    no bump
  sym-det    Δ ≥ 0    traders and market maker delayed by Δ
  asym-det   Δ ≥ 0    traders delayed by Δ, market maker undelayed
  sym-rand   Δ ≥ 0    everyone draws a delay from {0.5Δ, Δ, 1.5Δ}
  asym-rand  Δ ≥ 0    traders draw from {0.5Δ, Δ, 1.5Δ}, market maker undelayed";

fn design_cell(design: &str, delta: f64) -> Result<(Design, Option<SpeedBumpSpec>), Failure> {
    let invalid = |why: String| Failure::Usage(format!("{why}\n{DESIGN_MATRIX}"));
    let d: Design = design.parse().map_err(|_| invalid(format!("unknown design `{design}`")))?;
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(invalid(format!("Δ must be ≥ 0, got {delta}")));
    }
    if d == Design::NoBump && delta != 0.0 {
        return Err(invalid(format!("design `none` takes Δ = 0, got {delta}")));
    }
    Ok((d, d.bump(delta)?))
}

fn load_model(path: Option<&Path>) -> Result<ModelConfig, Failure> {
    Ok(match path {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    })
}

struct Race {
    bump: Option<SpeedBumpSpec>,
    rates: Vec<f64>,
    mm_rate: f64,
}

impl Race {
    fn resolve(a: &RaceArgs, model: &ModelConfig) -> Result<Self, Failure> {
        let (_, bump) = design_cell(&a.design, a.delta)?;
        let (rates, mm_rate) = match (&a.rates, &a.tier, &a.invests) {
            (Some(r), None, None) => {
                if r.0.len() < 2 {
                    return Err(Failure::Usage(
                        "--rates lists the trader rates then the market maker rate (at least two values)".into(),
                    ));
                }
                let (mm, traders) = r.0.split_last().expect("two or more rates");
                (traders.to_vec(), *mm)
            }
            (None, Some(label), Some(invests)) => {
                let tier = model.tier(label)?;
                let rates = invests
                    .0
                    .iter()
                    .map(|&l| tier.arrival_rate(l, a.endowment))
                    .collect::<Result<Vec<_>, Error>>()?;
                (rates, a.mm_rate)
            }
            _ => return Err(Failure::Usage("give either --rates or --tier with --invests".into())),
        };
        Ok(Race { bump, rates, mm_rate })
    }

    /// The race as seen by trader `i`.
    fn params_for(&self, i: usize) -> RaceParams {
        let rivals = self.rates.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &r)| r).collect();
        RaceParams::new(self.rates[i], rivals, self.mm_rate).with_bump(self.bump)
    }

    fn label(i: usize, n: usize) -> String {
        if i == n {
            "market maker".into()
        } else {
            format!("trader {}", i + 1)
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn csv_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable output");
    s.push('\n');
    s.into_bytes()
}

#[derive(Serialize)]
struct ProbeRow {
    participant: String,
    paper: Option<f64>,
    exact: Option<f64>,
    monte_carlo: Option<f64>,
    mc_std_error: Option<f64>,
}

pub fn probe(a: &ProbeArgs) -> Result<Outcome, Failure> {
    let race = Race::resolve(&a.race, &ModelConfig::default())?;
    let n = race.rates.len();
    let mc = match a.mc {
        Some(0) => return Err(Failure::Usage("--mc needs at least one race".into())),
        Some(reps) => Some(monte_carlo_race(
            &race.rates,
            race.mm_rate,
            race.bump.as_ref(),
            reps,
            &SeedSpec::new(a.seed),
            a.common.exec(),
        )?),
        None => None,
    };
    let want_paper = a.engine != EngineChoice::Exact;
    let want_exact = a.engine != EngineChoice::Paper;
    let mut rows = Vec::with_capacity(n + 1);
    for i in 0..n {
        let params = race.params_for(i);
        let exact = if want_exact { Some(exec_prob(&params, ProbEngine::Exact)?) } else { None };
        let paper = if want_paper {
            match exec_prob(&params, ProbEngine::PaperFormula) {
                Ok(p) => Some(p),
                Err(Error::UnsupportedDesign(_)) => None,
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };
        rows.push(ProbeRow {
            participant: Race::label(i, n),
            paper,
            exact,
            monte_carlo: mc.as_ref().map(|m| m.estimates[i]),
            mc_std_error: mc.as_ref().map(|m| m.std_errors[i]),
        });
    }
    let rest = |f: fn(&ProbeRow) -> Option<f64>| -> Option<f64> {
        rows.iter().map(f).sum::<Option<f64>>().map(|s| 1.0 - s)
    };
    rows.push(ProbeRow {
        participant: Race::label(n, n),
        paper: rest(|r| r.paper),
        exact: rest(|r| r.exact),
        monte_carlo: mc.as_ref().map(|m| m.estimates[n]),
        mc_std_error: mc.as_ref().map(|m| m.std_errors[n]),
    });

    let mut o = Outcome::default();
    let rates: Vec<String> = race.rates.iter().map(|r| r.to_string()).collect();
    writeln!(
        o.text,
        "design {}, Δ = {}, trader rates {}, market maker rate {}",
        a.race.design,
        a.race.delta,
        rates.join(" "),
        race.mm_rate
    )
    .unwrap();
    writeln!(o.text, "{:<14} {:>10} {:>10} {:>12} {:>10}", "participant", "paper", "exact", "monte carlo", "mc se").unwrap();
    for r in &rows {
        writeln!(
            o.text,
            "{:<14} {:>10} {:>10} {:>12} {:>10}",
            r.participant,
            cell(r.paper),
            cell(r.exact),
            cell(r.monte_carlo),
            r.mc_std_error.map_or_else(|| "n/a".into(), |s| format!("{s:.2e}"))
        )
        .unwrap();
    }
    for r in &rows[..n] {
        if let (Some(p), Some(e)) = (r.paper, r.exact) {
            if (p - e).abs() > 1e-6 {
                writeln!(
                    o.text,
                    "discrepancy: published formula gives {p:.4} for {}, exact enumeration {e:.4}{}",
                    r.participant,
                    if p > 1.0 { " (not a probability)" } else { "" }
                )
                .unwrap();
            }
        }
    }
    match a.common.format {
        Format::Csv => {
            let mut s = String::from("participant,paper,exact,monte_carlo,mc_std_error\n");
            for r in &rows {
                writeln!(
                    s,
                    "{},{},{},{},{}",
                    r.participant,
                    csv_cell(r.paper),
                    csv_cell(r.exact),
                    csv_cell(r.monte_carlo),
                    csv_cell(r.mc_std_error)
                )
                .unwrap();
            }
            o.file("probe.csv", s);
        }
        Format::Json => o.file("probe.json", json_bytes(&rows)),
    }
    Ok(o)
}

pub fn solve(a: &SolveArgs) -> Result<Outcome, Failure> {
    let mut model = load_model(a.model.as_deref())?;
    model.market.n_traders = a.traders;
    model.validate()?;
    let engine = match a.engine {
        EngineChoice::Paper => ProbEngine::PaperFormula,
        EngineChoice::Exact => ProbEngine::Exact,
        EngineChoice::Both => return Err(Failure::Usage("solve takes --engine paper or --engine exact".into())),
    };
    let tiers: Vec<TechnologyTier> = match &a.tier {
        Some(label) => vec![model.tier(label)?.clone()],
        None => model.tiers.clone(),
    };
    let cells: Vec<StaticsCell> = if a.grid.is_some() {
        tiers.iter().flat_map(canonical_grid).collect()
    } else {
        let design = a
            .design
            .as_deref()
            .ok_or_else(|| Failure::Usage("give --grid canonical or a single cell with --design".into()))?;
        let delta = a.delta.unwrap_or(0.0);
        let (design, _) = design_cell(design, delta)?;
        let endowment = a.endowment.unwrap_or(10.0);
        tiers.iter().map(|t| StaticsCell { design, delta, endowment, tier: t.clone() }).collect()
    };
    let rows = comparative_statics(&cells, &model.market, engine, a.common.exec());
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(Failure::Domain(rows[0].error.clone().unwrap_or_default()));
    }

    let mut o = Outcome::default();
    writeln!(
        o.text,
        "{:<10} {:>4} {:>5} {:<12} {:>9} {:>7} {:>8} {:>9}  converged",
        "design", "Δ", "ω", "tier", "ℓ*", "ℓ*/ω", "P(exec)", "profit"
    )
    .unwrap();
    for r in &rows {
        if let Some(e) = &r.error {
            writeln!(o.text, "{:<10} {:>4} {:>5} {:<12} error: {e}", r.design, r.delta, r.endowment, r.tier).unwrap();
            continue;
        }
        writeln!(
            o.text,
            "{:<10} {:>4} {:>5} {:<12} {:>9.4} {:>7.4} {:>8.4} {:>9.4}  {}",
            r.design.to_string(),
            r.delta,
            r.endowment,
            r.tier,
            r.invest,
            r.invest_frac,
            r.exec_prob,
            r.profit,
            if r.converged { "yes" } else { "no (no symmetric pure equilibrium)" }
        )
        .unwrap();
    }
    match a.common.format {
        Format::Csv => {
            let mut s = StaticsRow::CSV_HEADER.join(",");
            s.push('\n');
            for r in &rows {
                s.push_str(&r.csv_fields().join(","));
                s.push('\n');
            }
            o.file("statics.csv", s);
        }
        Format::Json => o.file("statics.json", json_bytes(&rows)),
    }
    if a.grid.is_some() {
        let checks = hypothesis_checks(&rows);
        writeln!(o.text, "\ndirectional predictions ({} engine):", engine.name()).unwrap();
        for c in &checks {
            writeln!(o.text, "{} {}: {}", c.hypothesis, if c.holds { "holds" } else { "fails" }, c.description).unwrap();
        }
        o.file("hypotheses.json", json_bytes(&checks));
    }
    o.details = Some(json!({ "model": model }));
    Ok(o)
}

#[derive(Serialize)]
struct SimRow {
    participant: String,
    estimate: f64,
    std_error: f64,
    wins: u64,
    exact: f64,
    z: f64,
}

pub fn simulate(a: &SimulateArgs) -> Result<Outcome, Failure> {
    if a.reps == 0 {
        return Err(Failure::Usage("--reps must be at least 1".into()));
    }
    let race = Race::resolve(&a.race, &ModelConfig::default())?;
    let n = race.rates.len();
    let mc = monte_carlo_race(&race.rates, race.mm_rate, race.bump.as_ref(), a.reps, &SeedSpec::new(a.seed), a.common.exec())?;
    let mut exact = (0..n).map(|i| exec_prob(&race.params_for(i), ProbEngine::Exact)).collect::<Result<Vec<_>, _>>()?;
    exact.push(1.0 - exact.iter().sum::<f64>());
    let rows: Vec<SimRow> = (0..=n)
        .map(|i| SimRow {
            participant: Race::label(i, n),
            estimate: mc.estimates[i],
            std_error: mc.std_errors[i],
            wins: mc.wins[i],
            exact: exact[i],
            z: mc.z_score(i, exact[i]),
        })
        .collect();

    let mut o = Outcome::default();
    writeln!(o.text, "{} races, seed {}", a.reps, a.seed).unwrap();
    writeln!(o.text, "{:<14} {:>10} {:>10} {:>10} {:>7}", "participant", "estimate", "std err", "exact", "z").unwrap();
    for r in &rows {
        writeln!(o.text, "{:<14} {:>10.6} {:>10.2e} {:>10.6} {:>7.2}", r.participant, r.estimate, r.std_error, r.exact, r.z)
            .unwrap();
    }
    match a.common.format {
        Format::Csv => {
            let mut s = String::from("participant,estimate,std_error,wins,exact,z\n");
            for r in &rows {
                writeln!(s, "{},{},{},{},{},{}", r.participant, r.estimate, r.std_error, r.wins, r.exact, r.z).unwrap();
            }
            o.file("simulate.csv", s);
        }
        Format::Json => o.file("simulate.json", json_bytes(&rows)),
    }
    Ok(o)
}

fn design_label(r: &RoundRecord) -> &'static str {
    match (r.bump_symmetric, r.bump_random) {
        (Some(true), Some(false)) => "sym-det",
        (Some(false), Some(false)) => "asym-det",
        (Some(true), Some(true)) => "sym-rand",
        (Some(false), Some(true)) => "asym-rand",
        _ => "none",
    }
}

pub fn session(a: &SessionArgs) -> Result<Outcome, Failure> {
    let mut model = load_model(a.model.as_deref())?;
    model.market.n_traders = a.traders;
    let config = SessionConfig {
        session_id: a.session_id,
        n_groups: a.groups,
        policies: a.policy.0.clone(),
        tier_assignment: match &a.tiers {
            Some(t) => TierAssignment::Explicit(t.0.clone()),
            None => TierAssignment::SeededRandom,
        },
        tiers: model.tiers.clone(),
        market: model.market.clone(),
        master_seed: a.seed,
    };
    config.validate()?;
    let records = run_session(&config, a.common.exec())?;
    let manifest = SessionManifest::new(&config, records.len())?;
    let (name, data) = match a.common.format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_csv(&records, &mut buf)?;
            ("session.csv", buf)
        }
        Format::Json => ("session.json", json_bytes(&records)),
    };

    let mut o = Outcome::default();
    if a.common.out.is_some() {
        writeln!(
            o.text,
            "{} round records: {} groups × {} traders × 32 rounds",
            records.len(),
            a.groups,
            a.traders
        )
        .unwrap();
        writeln!(o.text, "mean relative investment outside training rounds:").unwrap();
        for design in ["none", "sym-det", "asym-det", "sym-rand", "asym-rand"] {
            let fracs: Vec<f64> = records
                .iter()
                .filter(|r| !r.training && design_label(r) == design)
                .map(|r| r.invest_frac)
                .collect();
            if !fracs.is_empty() {
                writeln!(o.text, "  {design:<10} {:.4}", fracs.iter().sum::<f64>() / fracs.len() as f64).unwrap();
            }
        }
        o.file(name, data);
    } else {
        o.text = String::from_utf8(data).expect("utf-8 output");
    }
    o.details = Some(json!({ "session": manifest }));
    Ok(o)
}

pub fn analyze(a: &AnalyzeArgs) -> Result<Outcome, Failure> {
    let is_json = a.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let bytes = fs::read(&a.input).map_err(|e| Failure::Io(format!("{}: {e}", a.input.display())))?;
    let records: Vec<RoundRecord> = if is_json {
        serde_json::from_slice(&bytes).map_err(|e| Failure::Domain(format!("{}: {e}", a.input.display())))?
    } else {
        read_csv_from(bytes.as_slice())?
    };
    let battery = match &a.battery {
        Some(p) => Battery::load(p)?,
        None => default_battery(),
    };
    let data = Dataset::from_records(&records)?;
    let report = run_battery(&data, &battery, a.common.exec())?;
    if report.fits().is_empty() {
        let why: Vec<String> = report.failures().iter().map(|(m, e)| format!("{m}: {e}")).collect();
        return Err(Failure::Domain(format!("no model could be estimated\n{}", why.join("\n"))));
    }

    let mut o = Outcome::default();
    o.text = report.render();
    o.file("tables.txt", o.text.clone());
    match a.common.format {
        Format::Csv => o.file("coefficients.csv", coefficient_csv(&report.fits())),
        Format::Json => o.file("report.json", json_bytes(&report)),
    }
    o.inputs.push(FileDigest::of_path(&a.input)?);
    if let Some(p) = &a.battery {
        o.inputs.push(FileDigest::of_path(p)?);
    }
    Ok(o)
}

pub fn verify(a: &VerifyArgs) -> Result<Outcome, Failure> {
    if a.reps == 0 {
        return Err(Failure::Usage("--reps must be at least 1".into()));
    }
    let checks = run_all(&VerifyOptions { reps: a.reps, seed: a.seed }, a.common.exec());
    let mut o = Outcome::default();
    for c in &checks {
        writeln!(o.text, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail).unwrap();
    }
    match a.common.format {
        Format::Csv => {
            let mut s = String::from("check,passed,detail\n");
            for c in &checks {
                writeln!(s, "\"{}\",{},\"{}\"", c.name, c.passed, c.detail.replace('"', "\"\"")).unwrap();
            }
            o.file("verify.csv", s);
        }
        Format::Json => o.file("verify.json", json_bytes(&checks)),
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        o.failed = Some(format!("{failed} of {} checks failed", checks.len()));
    }
    Ok(o)
}
