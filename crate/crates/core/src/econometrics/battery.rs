use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fit::{f_test, fit_fe_ols, FTest, FitResult};
use super::report::{render_columns, render_effects};
use super::spec::{Filter, PanelSpec, Restriction};
use super::Dataset;
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layout {
    /// One column per model.
    #[default]
    Columns,
    /// One row per model showing the constant and one term.
    Effects { term: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub title: String,
    #[serde(default)]
    pub layout: Layout,
    pub models: Vec<PanelSpec>,
}

/// Joint F-test of `restrictions` in the model called `model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub model: String,
    pub restrictions: Vec<String>,
}

/// A set of tables of specifications plus hypothesis tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub tables: Vec<TableSpec>,
    #[serde(default)]
    pub tests: Vec<TestSpec>,
}

impl Battery {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let b: Battery = serde_json::from_str(s)?;
        b.validate()?;
        Ok(b)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let names: Vec<&str> = self.tables.iter().flat_map(|t| t.models.iter().map(|m| m.name.as_str())).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Spec(format!("model name `{n}` used twice")));
            }
        }
        for t in &self.tables {
            for m in &t.models {
                m.terms()?;
            }
        }
        for t in &self.tests {
            if !names.contains(&t.model.as_str()) {
                return Err(Error::Spec(format!("test refers to unknown model `{}`", t.model)));
            }
            for r in &t.restrictions {
                r.parse::<Restriction>()?;
            }
        }
        Ok(())
    }

    pub fn model(&self, name: &str) -> Option<&PanelSpec> {
        self.tables.iter().flat_map(|t| &t.models).find(|m| m.name == name)
    }
}

const FULL_TERMS: [&str; 9] = [
    "delta_std",
    "d_s",
    "d_r",
    "d_s*d_r",
    "delta_std*d_s",
    "delta_std*d_r",
    "delta_std*d_s*d_r",
    "endowment_std",
    "won_previous",
];

fn lab_model(name: &str, regressors: &[&str], group_fe: bool) -> PanelSpec {
    let mut m = PanelSpec::new(name, regressors);
    m.fixed_effects = if group_fe {
        vec!["participant_id".into(), "group_id".into()]
    } else {
        vec!["participant_id".into()]
    };
    m.clusters = vec!["participant_id".into(), "group_id".into(), "round".into()];
    m
}

/// The lab analysis: bump-vs-no-bump effects by design subsample, the
/// full design-interaction model with control variants, the same model by
/// technology tier, and F-tests of the symmetric size effects.
pub fn default_battery() -> Battery {
    let subsamples: [(&str, &[&str]); 9] = [
        ("overall", &[]),
        ("random", &["none", "sym-rand", "asym-rand"]),
        ("deterministic", &["none", "sym-det", "asym-det"]),
        ("symmetric", &["none", "sym-det", "sym-rand"]),
        ("asymmetric", &["none", "asym-det", "asym-rand"]),
        ("random-symmetric", &["none", "sym-rand"]),
        ("random-asymmetric", &["none", "asym-rand"]),
        ("deterministic-symmetric", &["none", "sym-det"]),
        ("deterministic-asymmetric", &["none", "asym-det"]),
    ];
    let effects = subsamples
        .iter()
        .map(|(name, designs)| {
            let mut m = lab_model(name, &["d_bump"], true);
            if !designs.is_empty() {
                m.filters.push(Filter::text("design", designs));
            }
            m
        })
        .collect();

    let without = |drop: Option<&str>| -> Vec<&str> { FULL_TERMS.iter().copied().filter(|t| Some(*t) != drop).collect() };
    let mut main = Vec::new();
    for (offset, group_fe) in [(0, true), (3, false)] {
        for (i, drop) in [None, Some("won_previous"), Some("endowment_std")].into_iter().enumerate() {
            main.push(lab_model(&format!("main-{}", offset + i + 1), &without(drop), group_fe));
        }
    }

    let tiers = ["low-cost", "medium-cost", "high-cost"]
        .iter()
        .map(|t| {
            let mut m = lab_model(&format!("tier-{t}"), &FULL_TERMS, true);
            m.filters.push(Filter::text("tier", &[t]));
            m
        })
        .collect();

    Battery {
        tables: vec![
            TableSpec {
                title: "Relative investment: effect of a speed bump by design subsample".into(),
                layout: Layout::Effects { term: "d_bump".into() },
                models: effects,
            },
            TableSpec {
                title: "Relative investment: design interactions".into(),
                layout: Layout::Columns,
                models: main,
            },
            TableSpec {
                title: "Relative investment by technology tier".into(),
                layout: Layout::Columns,
                models: tiers,
            },
        ],
        tests: vec![
            TestSpec { model: "main-1".into(), restrictions: vec!["delta_std + delta_std*d_s = 0".into()] },
            TestSpec {
                model: "main-1".into(),
                restrictions: vec!["delta_std + delta_std*d_s + delta_std*d_r + delta_std*d_s*d_r = 0".into()],
            },
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub name: String,
    pub fit: Option<FitResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub title: String,
    pub layout: Layout,
    pub models: Vec<ModelOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub model: String,
    pub restrictions: Vec<String>,
    pub result: Option<FTest>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryReport {
    pub tables: Vec<TableReport>,
    pub tests: Vec<TestReport>,
}

impl BatteryReport {
    pub fn fits(&self) -> Vec<&FitResult> {
        self.tables.iter().flat_map(|t| t.models.iter().filter_map(|m| m.fit.as_ref())).collect()
    }

    pub fn fit(&self, name: &str) -> Option<&FitResult> {
        self.fits().into_iter().find(|f| f.name == name)
    }

    pub fn failures(&self) -> Vec<(&str, &str)> {
        self.tables
            .iter()
            .flat_map(|t| t.models.iter())
            .filter_map(|m| m.error.as_deref().map(|e| (m.name.as_str(), e)))
            .collect()
    }

    /// Plain-text rendering of every table and test.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            let fits: Vec<&FitResult> = t.models.iter().filter_map(|m| m.fit.as_ref()).collect();
            out.push_str(&match &t.layout {
                Layout::Columns => render_columns(&t.title, &fits),
                Layout::Effects { term } => render_effects(&t.title, &fits, term),
            });
            for m in &t.models {
                if let Some(e) = &m.error {
                    writeln!(out, "model {} not estimated: {e}", m.name).unwrap();
                }
            }
            out.push('\n');
        }
        if !self.tests.is_empty() {
            writeln!(out, "F-tests").unwrap();
        }
        for t in &self.tests {
            let what = t.restrictions.join("; ");
            match (&t.result, &t.error) {
                (Some(r), _) => writeln!(
                    out,
                    "{}: {what}: F({}, {}) = {:.3}, p = {:.3}",
                    t.model, r.df_num, r.df_den, r.statistic, r.p_value
                )
                .unwrap(),
                (None, Some(e)) => writeln!(out, "{}: {what}: not computed: {e}", t.model).unwrap(),
                (None, None) => {}
            }
        }
        out
    }
}

/// Fits every model (concurrently when allowed) and runs the tests. A
/// model that cannot be estimated is reported, not fatal.
pub fn run_battery(data: &Dataset, battery: &Battery, exec: Execution) -> Result<BatteryReport> {
    battery.validate()?;
    let specs: Vec<&PanelSpec> = battery.tables.iter().flat_map(|t| &t.models).collect();
    let mut outcomes = map_slice(&specs, exec, |spec| match fit_fe_ols(spec, data) {
        Ok(fit) => ModelOutcome { name: spec.name.clone(), fit: Some(fit), error: None },
        Err(e) => ModelOutcome { name: spec.name.clone(), fit: None, error: Some(e.to_string()) },
    })
    .into_iter();
    let tables: Vec<TableReport> = battery
        .tables
        .iter()
        .map(|t| TableReport {
            title: t.title.clone(),
            layout: t.layout.clone(),
            models: outcomes.by_ref().take(t.models.len()).collect(),
        })
        .collect();
    let report = BatteryReport { tables, tests: Vec::new() };
    let tests = battery
        .tests
        .iter()
        .map(|t| {
            let result = match report.fit(&t.model) {
                None => Err(Error::Spec(format!("model `{}` was not estimated", t.model))),
                Some(fit) => t
                    .restrictions
                    .iter()
                    .map(|r| r.parse())
                    .collect::<Result<Vec<Restriction>>>()
                    .and_then(|rs| f_test(fit, &rs)),
            };
            TestReport {
                model: t.model.clone(),
                restrictions: t.restrictions.clone(),
                result: result.as_ref().ok().copied(),
                error: result.err().map(|e| e.to_string()),
            }
        })
        .collect();
    Ok(BatteryReport { tests, ..report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_battery_is_valid_and_round_trips() {
        let b = default_battery();
        b.validate().unwrap();
        assert_eq!(b.tables[0].models.len(), 9);
        assert_eq!(b.tables[1].models.len(), 6);
        let json = serde_json::to_string_pretty(&b).unwrap();
        assert_eq!(Battery::from_json_str(&json).unwrap(), b);
    }

    #[test]
    fn battery_rejects_duplicates_and_dangling_tests() {
        let mut b = default_battery();
        b.tables[1].models[1].name = "main-1".into();
        assert!(b.validate().is_err());
        let mut b = default_battery();
        b.tests[0].model = "nope".into();
        assert!(b.validate().is_err());
    }
}
