//! Fixed-effects panel regression with multi-way clustered inference.
//!
//! Fixed effects are absorbed by alternating projections, the demeaned
//! system is solved by QR, and standard errors combine one-way cluster
//! sandwiches by inclusion–exclusion over the cluster dimensions. Model
//! batteries are plain data ([`Battery`]) so any table of specifications
//! can be run on any dataset of round records.

mod battery;
mod fit;
pub mod oracle;
mod report;
mod spec;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::session::RoundRecord;

pub use battery::{default_battery, run_battery, Battery, BatteryReport, Layout, ModelOutcome, TableReport, TableSpec, TestReport, TestSpec};
pub use fit::{
    absorb, clustered_vcov, f_test, fit_fe_ols, ClusterDim, FTest, FitResult, VcovOptions, VcovResult,
    DEMEAN_MAX_SWEEPS, DEMEAN_TOL,
};
pub use report::{coefficient_csv, render_columns, render_effects, stars, summarize};
pub use spec::{Filter, FilterValue, PanelSpec, Restriction, Term};

/// Column-oriented dataset of numeric and text variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    n: usize,
    numeric: BTreeMap<String, Vec<f64>>,
    text: BTreeMap<String, Vec<String>>,
}

impl Dataset {
    pub fn new(n: usize) -> Self {
        Dataset { n, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn add_numeric(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        self.check_new(&name, values.len())?;
        self.numeric.insert(name, values);
        Ok(())
    }

    pub fn add_text(&mut self, name: impl Into<String>, values: Vec<String>) -> Result<()> {
        let name = name.into();
        self.check_new(&name, values.len())?;
        self.text.insert(name, values);
        Ok(())
    }

    /// Overwrites an existing numeric column.
    pub fn replace_numeric(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.n {
            return Err(Error::Spec(format!("column `{name}` has {} rows, dataset has {}", values.len(), self.n)));
        }
        let slot = self
            .numeric
            .get_mut(name)
            .ok_or_else(|| Error::Spec(format!("no numeric column `{name}`")))?;
        *slot = values;
        Ok(())
    }

    fn check_new(&self, name: &str, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::Spec(format!("column `{name}` has {len} rows, dataset has {}", self.n)));
        }
        if self.has(name) {
            return Err(Error::Spec(format!("duplicate column `{name}`")));
        }
        Ok(())
    }

    pub fn has(&self, name: &str) -> bool {
        self.numeric.contains_key(name) || self.text.contains_key(name)
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        self.numeric
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Spec(format!("no numeric column `{name}`")))
    }

    pub fn text(&self, name: &str) -> Result<&[String]> {
        self.text
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Spec(format!("no text column `{name}`")))
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.numeric.keys().chain(self.text.keys()).map(String::as_str).collect()
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            n: idx.len(),
            numeric: self.numeric.iter().map(|(k, v)| (k.clone(), idx.iter().map(|&i| v[i]).collect())).collect(),
            text: self.text.iter().map(|(k, v)| (k.clone(), idx.iter().map(|&i| v[i].clone()).collect())).collect(),
        }
    }

    /// Dense level codes `0..G` of a numeric or text column, in sorted
    /// order of the distinct values.
    pub fn codes(&self, name: &str) -> Result<(Vec<usize>, usize)> {
        if let Some(v) = self.numeric.get(name) {
            let mut levels: Vec<f64> = v.clone();
            levels.sort_by(f64::total_cmp);
            levels.dedup_by(|a, b| a.total_cmp(b).is_eq());
            let codes = v
                .iter()
                .map(|x| levels.binary_search_by(|l| l.total_cmp(x)).expect("level present"))
                .collect();
            Ok((codes, levels.len()))
        } else {
            let v = self.text(name)?;
            let mut levels: Vec<&String> = v.iter().collect();
            levels.sort();
            levels.dedup();
            let codes = v.iter().map(|x| levels.binary_search(&x).expect("level present")).collect();
            Ok((codes, levels.len()))
        }
    }

    /// Panel variables from round records.
    ///
    /// Numeric: ids, `round`, `training`, `endowment`, `delta`, the design
    /// dummies `d_bump`, `d_s`, `d_r`, `d_asym` (all 0 without a bump),
    /// outcomes and flags. Text: `tier`, `design`.
    pub fn from_records(records: &[RoundRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset("no round records".into()));
        }
        let mut d = Dataset::new(records.len());
        let num = |f: &dyn Fn(&RoundRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        d.add_numeric("session_id", num(&|r| r.session_id as f64))?;
        d.add_numeric("group_id", num(&|r| r.group_id as f64))?;
        d.add_numeric("participant_id", num(&|r| r.participant_id as f64))?;
        d.add_numeric("round", num(&|r| f64::from(r.round)))?;
        d.add_numeric("training", num(&|r| b(r.training)))?;
        d.add_numeric("endowment", num(&|r| r.endowment))?;
        d.add_numeric("delta", num(&|r| r.bump_mean))?;
        d.add_numeric("d_bump", num(&|r| b(r.bump_symmetric.is_some())))?;
        d.add_numeric("d_s", num(&|r| b(r.bump_symmetric == Some(true))))?;
        d.add_numeric("d_r", num(&|r| b(r.bump_random == Some(true))))?;
        d.add_numeric("d_asym", num(&|r| b(r.bump_symmetric == Some(false))))?;
        d.add_numeric("realized_bump", num(&|r| r.realized_bump))?;
        d.add_numeric("invest", num(&|r| r.invest))?;
        d.add_numeric("invest_frac", num(&|r| r.invest_frac))?;
        d.add_numeric("arrival_rate", num(&|r| r.arrival_rate))?;
        d.add_numeric("arrival_time", num(&|r| r.arrival_time))?;
        d.add_numeric("won", num(&|r| b(r.won)))?;
        d.add_numeric("won_previous", num(&|r| b(r.won_previous)))?;
        d.add_numeric("payoff", num(&|r| r.payoff))?;
        d.add_numeric("clamped", num(&|r| b(r.clamped)))?;
        d.add_text("tier", records.iter().map(|r| r.tier.clone()).collect())?;
        d.add_text(
            "design",
            records
                .iter()
                .map(|r| match (r.bump_symmetric, r.bump_random) {
                    (Some(s), Some(rand)) => {
                        format!("{}-{}", if s { "sym" } else { "asym" }, if rand { "rand" } else { "det" })
                    }
                    _ => "none".to_string(),
                })
                .collect(),
        )?;
        Ok(d)
    }
}

/// Zero mean, unit sample standard deviation (denominator `n − 1`).
pub fn standardize(values: &[f64], name: &str) -> Result<Vec<f64>> {
    let n = values.len();
    let distinct = values.iter().any(|&v| v != values[0]);
    if n < 2 || !distinct {
        return Err(Error::DegenerateColumn(name.to_string()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_schedule_delta() {
        let mut delta = vec![0.0; 4];
        for d in [1.0, 3.0, 5.0] {
            delta.extend(std::iter::repeat_n(d, 8));
        }
        let mean = delta.iter().sum::<f64>() / 28.0;
        assert!((mean - 2.5714285714).abs() < 1e-9);
        let z = standardize(&delta, "delta").unwrap();
        // one standard deviation of the schedule's delays is about two seconds
        let sd = (delta[4] - delta[0]) / (z[4] - z[0]);
        assert!((sd - 1.9).abs() < 0.05, "{sd}");
        let again = standardize(&z, "z").unwrap();
        for (a, b) in z.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_two_points() {
        let z = standardize(&[10.0, 20.0], "endowment").unwrap();
        assert!((z[0] + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((z[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(standardize(&[3.0, 3.0], "c"), Err(Error::DegenerateColumn(_))));
        assert!(standardize(&[3.0], "c").is_err());
    }

    #[test]
    fn codes_are_dense_and_sorted() {
        let mut d = Dataset::new(5);
        d.add_numeric("g", vec![7.0, 3.0, 7.0, 9.0, 3.0]).unwrap();
        d.add_text("t", ["b", "a", "b", "c", "a"].map(String::from).to_vec()).unwrap();
        assert_eq!(d.codes("g").unwrap(), (vec![1, 0, 1, 2, 0], 3));
        assert_eq!(d.codes("t").unwrap(), (vec![1, 0, 1, 2, 0], 3));
        assert!(d.add_numeric("g", vec![0.0; 5]).is_err());
        assert!(d.add_numeric("h", vec![0.0; 4]).is_err());
        assert_eq!(d.select(&[3, 0]).numeric("g").unwrap(), &[9.0, 7.0]);
    }
}
