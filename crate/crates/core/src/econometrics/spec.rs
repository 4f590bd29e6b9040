use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{standardize, Dataset};
use crate::error::{Error, Result};

/// A regressor: the product of one or more columns. A factor named
/// `x_std` is column `x` standardized on the estimation sample, unless
/// the dataset has a column literally named `x_std`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub factors: Vec<String>,
}

impl Term {
    pub fn name(&self) -> String {
        self.factors.join("*")
    }

    pub(crate) fn evaluate(&self, data: &Dataset) -> Result<Vec<f64>> {
        let mut out = vec![1.0; data.len()];
        for f in &self.factors {
            let col = factor_column(data, f)?;
            for (o, v) in out.iter_mut().zip(col) {
                *o *= v;
            }
        }
        Ok(out)
    }
}

fn factor_column(data: &Dataset, factor: &str) -> Result<Vec<f64>> {
    if let Ok(v) = data.numeric(factor) {
        return Ok(v.to_vec());
    }
    match factor.strip_suffix("_std") {
        Some(base) if data.has(base) => standardize(data.numeric(base)?, base),
        _ => Err(Error::Spec(format!("unknown column `{factor}`"))),
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let factors: Vec<String> = s.split('*').map(|f| f.trim().to_string()).collect();
        if factors.iter().any(String::is_empty) {
            return Err(Error::Spec(format!("malformed term `{s}`")));
        }
        Ok(Term { factors })
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FilterValue {
    Number(f64),
    Text(String),
}

/// Keeps rows whose `column` equals one of `one_of`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    pub column: String,
    pub one_of: Vec<FilterValue>,
}

impl Filter {
    pub fn text(column: &str, values: &[&str]) -> Self {
        Filter {
            column: column.into(),
            one_of: values.iter().map(|v| FilterValue::Text(v.to_string())).collect(),
        }
    }

    fn keeps(&self, data: &Dataset) -> Result<Vec<bool>> {
        if let Ok(v) = data.numeric(&self.column) {
            return Ok(v
                .iter()
                .map(|x| self.one_of.iter().any(|f| matches!(f, FilterValue::Number(y) if y == x)))
                .collect());
        }
        let v = data.text(&self.column)?;
        Ok(v.iter()
            .map(|x| self.one_of.iter().any(|f| matches!(f, FilterValue::Text(y) if y == x)))
            .collect())
    }
}

fn yes() -> bool {
    true
}

fn invest_frac() -> String {
    "invest_frac".into()
}

/// One regression: dependent variable, terms, absorbed fixed effects,
/// cluster dimensions and sample filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub name: String,
    #[serde(default = "invest_frac")]
    pub dependent: String,
    #[serde(default)]
    pub regressors: Vec<String>,
    #[serde(default)]
    pub fixed_effects: Vec<String>,
    #[serde(default)]
    pub clusters: Vec<String>,
    #[serde(default)]
    pub filters: Vec<Filter>,
    /// Drops rows with `training = 1` when the column exists.
    #[serde(default = "yes")]
    pub exclude_training: bool,
    /// Apply `G/(G−1)·(N−1)/(N−K)` to every cluster component.
    #[serde(default = "yes")]
    pub small_sample: bool,
}

impl PanelSpec {
    pub fn new(name: &str, regressors: &[&str]) -> Self {
        PanelSpec {
            name: name.into(),
            dependent: invest_frac(),
            regressors: regressors.iter().map(|s| s.to_string()).collect(),
            fixed_effects: Vec::new(),
            clusters: Vec::new(),
            filters: Vec::new(),
            exclude_training: true,
            small_sample: true,
        }
    }

    pub fn terms(&self) -> Result<Vec<Term>> {
        let terms: Vec<Term> = self.regressors.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        for (i, t) in terms.iter().enumerate() {
            if terms[..i].contains(t) {
                return Err(Error::Spec(format!("term `{t}` listed twice")));
            }
        }
        Ok(terms)
    }

    /// Estimation sample after filters.
    pub fn sample(&self, data: &Dataset) -> Result<Dataset> {
        let mut keep = vec![true; data.len()];
        if self.exclude_training {
            if let Ok(t) = data.numeric("training") {
                for (k, &v) in keep.iter_mut().zip(t) {
                    *k &= v == 0.0;
                }
            }
        }
        for f in &self.filters {
            for (k, ok) in keep.iter_mut().zip(f.keeps(data)?) {
                *k &= ok;
            }
        }
        let idx: Vec<usize> = (0..data.len()).filter(|&i| keep[i]).collect();
        if idx.is_empty() {
            return Err(Error::EmptyDataset(format!("model `{}` selects no rows", self.name)));
        }
        Ok(data.select(&idx))
    }
}

/// `Σ wⱼ·βⱼ = target`, written like `delta_std + delta_std*d_s = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Restriction {
    pub weights: Vec<(String, f64)>,
    pub target: f64,
}

impl FromStr for Restriction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Spec(format!("malformed restriction `{s}`"));
        let (lhs, rhs) = s.split_once('=').ok_or_else(bad)?;
        let target: f64 = rhs.trim().parse().map_err(|_| bad())?;
        let mut weights = Vec::new();
        let mut sign = 1.0;
        let mut pending = String::new();
        let mut flush = |pending: &mut String, sign: f64| -> Result<()> {
            let t = pending.trim();
            if t.is_empty() {
                return Err(bad());
            }
            // an optional leading numeric factor is the weight
            let (w, term) = match t.split_once('*') {
                Some((head, rest)) if head.trim().parse::<f64>().is_ok() => {
                    (head.trim().parse::<f64>().unwrap(), rest.trim())
                }
                _ => match t.parse::<f64>() {
                    Ok(0.0) => (0.0, ""),
                    _ => (1.0, t),
                },
            };
            if !term.is_empty() {
                weights.push((term.parse::<Term>()?.name(), sign * w));
            }
            pending.clear();
            Ok(())
        };
        for (i, c) in lhs.trim().char_indices() {
            match c {
                '+' | '-' if i == 0 => sign = if c == '-' { -1.0 } else { 1.0 },
                '+' | '-' => {
                    flush(&mut pending, sign)?;
                    sign = if c == '-' { -1.0 } else { 1.0 };
                }
                _ => pending.push(c),
            }
        }
        flush(&mut pending, sign)?;
        Ok(Restriction { weights, target })
    }
}

impl fmt::Display for Restriction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.weights.is_empty() {
            write!(f, "0")?;
        }
        for (i, (t, w)) in self.weights.iter().enumerate() {
            let sign = if *w < 0.0 { "-" } else if i > 0 { "+" } else { "" };
            let sep = if i > 0 { " " } else { "" };
            let space = if i > 0 { " " } else { "" };
            if w.abs() == 1.0 {
                write!(f, "{sep}{sign}{space}{t}")?;
            } else {
                write!(f, "{sep}{sign}{space}{}*{t}", w.abs())?;
            }
        }
        write!(f, " = {}", self.target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restriction_parsing() {
        let r: Restriction = "delta_std + delta_std*d_s = 0".parse().unwrap();
        assert_eq!(r.weights, vec![("delta_std".into(), 1.0), ("delta_std*d_s".into(), 1.0)]);
        assert_eq!(r.target, 0.0);
        let r: Restriction = "-x + 2*y*z - 0.5*w = 1.5".parse().unwrap();
        assert_eq!(r.weights, vec![("x".into(), -1.0), ("y*z".into(), 2.0), ("w".into(), -0.5)]);
        assert_eq!(r.target, 1.5);
        assert_eq!(r.to_string(), "-x + 2*y*z - 0.5*w = 1.5");
        let null: Restriction = "0 = 0".parse().unwrap();
        assert!(null.weights.is_empty());
        assert!("x + = 0".parse::<Restriction>().is_err());
        assert!("x".parse::<Restriction>().is_err());
    }

    #[test]
    fn filters_and_training() {
        let mut d = Dataset::new(4);
        d.add_numeric("training", vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        d.add_text("tier", ["a", "a", "b", "a"].map(String::from).to_vec()).unwrap();
        let mut spec = PanelSpec::new("m", &[]);
        spec.filters.push(Filter::text("tier", &["a"]));
        assert_eq!(spec.sample(&d).unwrap().len(), 2);
        spec.filters.push(Filter::text("tier", &["c"]));
        assert!(matches!(spec.sample(&d), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn std_factor_uses_estimation_sample() {
        let mut d = Dataset::new(3);
        d.add_numeric("x", vec![1.0, 2.0, 3.0]).unwrap();
        let t: Term = "x_std*x".parse().unwrap();
        assert_eq!(t.evaluate(&d).unwrap(), vec![-1.0, 0.0, 3.0]);
        assert!("nope_std".parse::<Term>().unwrap().evaluate(&d).is_err());
    }
}
