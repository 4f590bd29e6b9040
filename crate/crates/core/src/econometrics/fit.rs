use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use super::spec::{PanelSpec, Restriction};
use super::Dataset;
use crate::error::{Error, Result};

/// Convergence threshold on the largest change in one demeaning sweep,
/// relative to the column's scale.
pub const DEMEAN_TOL: f64 = 1e-10;
pub const DEMEAN_MAX_SWEEPS: usize = 10_000;

/// Relative norm below which a demeaned regressor counts as collinear.
const COLLINEAR_TOL: f64 = 1e-9;

/// Sweeps group means out of every column until no entry moves by more
/// than [`DEMEAN_TOL`] (relative). `dims` holds `(codes, levels)` per
/// fixed-effect dimension. Returns the number of sweeps used.
///
/// Alternating projections converge linearly, so a small step can hide a
/// large remaining distance; the step is inflated by `ρ/(1 − ρ)`, with `ρ`
/// the observed contraction ratio, before comparing with the tolerance.
pub fn absorb(columns: &mut [Vec<f64>], dims: &[(Vec<usize>, usize)]) -> Result<usize> {
    let mut sweeps_used = 0;
    for col in columns.iter_mut() {
        let scale = col.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut sweeps = 0;
        let mut prev_change = f64::INFINITY;
        loop {
            if sweeps == DEMEAN_MAX_SWEEPS {
                return Err(Error::NonConvergence { what: "fixed-effect demeaning".into(), iterations: sweeps });
            }
            sweeps += 1;
            let mut max_change = 0.0f64;
            for (codes, levels) in dims {
                let mut sums = vec![0.0; *levels];
                let mut counts = vec![0usize; *levels];
                for (&c, &v) in codes.iter().zip(col.iter()) {
                    sums[c] += v;
                    counts[c] += 1;
                }
                for (s, &n) in sums.iter_mut().zip(&counts) {
                    if n > 0 {
                        *s /= n as f64;
                    }
                }
                for (&c, v) in codes.iter().zip(col.iter_mut()) {
                    *v -= sums[c];
                }
                max_change = sums.iter().fold(max_change, |m, s| m.max(s.abs()));
            }
            let ratio = max_change / prev_change;
            let remaining = if ratio < 1.0 { max_change * ratio / (1.0 - ratio) } else { max_change };
            if max_change.max(remaining) <= DEMEAN_TOL * scale || max_change == 0.0 {
                break;
            }
            prev_change = max_change;
        }
        sweeps_used = sweeps_used.max(sweeps);
    }
    Ok(sweeps_used)
}

/// One clustering dimension: a label per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDim {
    pub name: String,
    pub codes: Vec<usize>,
}

impl ClusterDim {
    pub fn new(name: impl Into<String>, codes: Vec<usize>) -> Self {
        ClusterDim { name: name.into(), codes }
    }

    /// Codes relabelled by first appearance, so equal partitions compare equal.
    fn canonical(&self) -> Vec<usize> {
        let mut map = HashMap::new();
        self.codes
            .iter()
            .map(|c| {
                let next = map.len();
                *map.entry(*c).or_insert(next)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VcovOptions {
    /// Multiply each component by `G/(G−1)·(N−1)/(N−K)`.
    pub small_sample: bool,
    /// Truncate negative eigenvalues at zero when a variance comes out negative.
    pub repair: bool,
}

impl Default for VcovOptions {
    fn default() -> Self {
        VcovOptions { small_sample: true, repair: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VcovResult {
    pub vcov: DMatrix<f64>,
    pub repaired: bool,
    /// Number of clusters per dimension.
    pub counts: Vec<usize>,
}

fn inverse_gram(design: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = design.clone().qr().r();
    let r_inv = r
        .try_inverse()
        .ok_or_else(|| Error::Collinear(vec!["design matrix is rank deficient".into()]))?;
    Ok(&r_inv * r_inv.transpose())
}

/// Multi-way cluster-robust covariance of OLS coefficients by
/// inclusion–exclusion: `V = Σ_S (−1)^{|S|+1} V_S` over non-empty subsets
/// `S` of the dimensions, each `V_S` a one-way sandwich on the
/// intersection clusters of `S`.
pub fn clustered_vcov(
    design: &DMatrix<f64>,
    residuals: &[f64],
    dims: &[ClusterDim],
    opts: &VcovOptions,
) -> Result<VcovResult> {
    let (n, k) = design.shape();
    if residuals.len() != n {
        return Err(Error::domain(format!("{} residuals for {n} observations", residuals.len())));
    }
    if dims.is_empty() || dims.len() > 3 {
        return Err(Error::Spec(format!("need 1 to 3 cluster dimensions, got {}", dims.len())));
    }
    let canon: Vec<Vec<usize>> = dims.iter().map(ClusterDim::canonical).collect();
    let mut counts = Vec::with_capacity(dims.len());
    for (i, d) in dims.iter().enumerate() {
        if d.codes.len() != n {
            return Err(Error::domain(format!("cluster `{}` has {} labels for {n} rows", d.name, d.codes.len())));
        }
        if dims[..i].iter().any(|e| e.name == d.name) || canon[..i].contains(&canon[i]) {
            return Err(Error::Spec(format!("cluster dimension `{}` listed twice", d.name)));
        }
        let g = canon[i].iter().max().map_or(0, |m| m + 1);
        if g < 2 {
            return Err(Error::domain(format!("cluster dimension `{}` has a single cluster", d.name)));
        }
        counts.push(g);
    }
    if n <= k {
        return Err(Error::domain(format!("{n} observations for {k} coefficients")));
    }

    let bread = inverse_gram(design)?;
    let mut total = DMatrix::<f64>::zeros(k, k);
    for mask in 1u32..(1 << dims.len()) {
        let members: Vec<usize> = (0..dims.len()).filter(|d| mask & (1 << d) != 0).collect();
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut scores: Vec<DVector<f64>> = Vec::new();
        for i in 0..n {
            let key: Vec<usize> = members.iter().map(|&d| canon[d][i]).collect();
            let next = index.len();
            let g = *index.entry(key).or_insert(next);
            if g == scores.len() {
                scores.push(DVector::zeros(k));
            }
            scores[g] += design.row(i).transpose() * residuals[i];
        }
        let mut meat = DMatrix::<f64>::zeros(k, k);
        for s in &scores {
            meat += s * s.transpose();
        }
        let g = scores.len() as f64;
        let factor = if opts.small_sample {
            g / (g - 1.0) * (n as f64 - 1.0) / (n - k) as f64
        } else {
            1.0
        };
        let sign = if members.len() % 2 == 1 { 1.0 } else { -1.0 };
        total += (&bread * meat * &bread) * (sign * factor);
    }
    let mut vcov = (&total + total.transpose()) * 0.5;
    let mut repaired = false;
    if opts.repair && (0..k).any(|i| vcov[(i, i)] < 0.0) {
        let eig = SymmetricEigen::new(vcov.clone());
        let clipped = eig.eigenvalues.map(|v| v.max(0.0));
        vcov = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        vcov = (&vcov + vcov.transpose()) * 0.5;
        repaired = true;
        log::warn!("clustered covariance had a negative variance; eigenvalues truncated at zero");
    }
    Ok(VcovResult { vcov, repaired, counts })
}

/// Estimates of one fitted specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub name: String,
    pub dependent: String,
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    /// `mean(y) − mean(X)·β` with its standard error, t and p.
    pub intercept: [f64; 4],
    /// Coefficient covariance over `terms`.
    pub vcov: Vec<Vec<f64>>,
    pub n_obs: usize,
    pub r_squared_within: f64,
    pub r_squared: f64,
    pub fe_dims: Vec<String>,
    pub cluster_dims: Vec<String>,
    pub cluster_counts: Vec<usize>,
    /// Denominator degrees of freedom for t and F tests.
    pub df_resid: f64,
    pub vcov_repaired: bool,
    pub demean_sweeps: usize,
    #[serde(skip)]
    pub residuals: Vec<f64>,
    /// Regressor columns after absorbing the fixed effects.
    #[serde(skip)]
    pub demeaned: Vec<Vec<f64>>,
}

impl FitResult {
    pub fn index(&self, term: &str) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    pub fn coef(&self, term: &str) -> Option<f64> {
        self.index(term).map(|i| self.coefficients[i])
    }

    pub fn se(&self, term: &str) -> Option<f64> {
        self.index(term).map(|i| self.std_errors[i])
    }

    pub fn p_value(&self, term: &str) -> Option<f64> {
        self.index(term).map(|i| self.p_values[i])
    }
}

fn two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

fn unique_names(kind: &str, names: &[String]) -> Result<()> {
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::Spec(format!("{kind} dimension `{n}` listed twice")));
        }
    }
    Ok(())
}

/// Names regressors that are (numerically) linear combinations of earlier
/// ones once the fixed effects are absorbed.
fn collinear_terms(names: &[String], raw: &[Vec<f64>], demeaned: &[Vec<f64>]) -> Vec<String> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut bad = Vec::new();
    for (j, col) in demeaned.iter().enumerate() {
        let n = raw[j].len() as f64;
        let mean = raw[j].iter().sum::<f64>() / n;
        let scale = raw[j].iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        let mut r = col.clone();
        // two Gram–Schmidt passes for stability
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
                for (ri, qi) in r.iter_mut().zip(q) {
                    *ri -= dot * qi;
                }
            }
        }
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if scale == 0.0 || norm <= COLLINEAR_TOL * scale {
            bad.push(names[j].clone());
        } else {
            basis.push(r.iter().map(|v| v / norm).collect());
        }
    }
    bad
}

/// Fixed-effects OLS with clustered standard errors.
pub fn fit_fe_ols(spec: &PanelSpec, data: &Dataset) -> Result<FitResult> {
    unique_names("fixed-effect", &spec.fixed_effects)?;
    unique_names("cluster", &spec.clusters)?;
    let sample = spec.sample(data)?;
    let n = sample.len();
    let terms = spec.terms()?;
    let names: Vec<String> = terms.iter().map(|t| t.name()).collect();
    let k = terms.len();
    let y = sample.numeric(&spec.dependent)?.to_vec();
    let raw: Vec<Vec<f64>> = terms.iter().map(|t| t.evaluate(&sample)).collect::<Result<_>>()?;
    if n <= k + 1 {
        return Err(Error::domain(format!("model `{}`: {n} observations for {k} regressors", spec.name)));
    }

    let mut fe: Vec<(Vec<usize>, usize)> = spec.fixed_effects.iter().map(|f| sample.codes(f)).collect::<Result<_>>()?;
    if fe.is_empty() {
        fe.push((vec![0; n], 1));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let y_bar = mean(&y);
    let x_bar: Vec<f64> = raw.iter().map(|c| mean(c)).collect();
    let mut columns = raw.clone();
    columns.push(y.clone());
    let sweeps = absorb(&mut columns, &fe)?;
    let y_dm = columns.pop().expect("dependent column");
    let x_dm = columns;

    let bad = collinear_terms(&names, &raw, &x_dm);
    if !bad.is_empty() {
        return Err(Error::Collinear(bad));
    }

    // Means added back plus a constant column: slopes equal the within
    // estimator and the constant is mean(y) − mean(X)·β.
    let design = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { x_dm[j - 1][i] + x_bar[j - 1] });
    let target = DVector::from_iterator(n, y_dm.iter().map(|v| v + y_bar));
    let qr = design.clone().qr();
    let qtb = qr.q().transpose() * &target;
    let beta = qr
        .r()
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::Collinear(names.clone()))?;
    let residuals: Vec<f64> = (0..n)
        .map(|i| y_dm[i] - (0..k).map(|j| x_dm[j][i] * beta[j + 1]).sum::<f64>())
        .collect();
    let rss: f64 = residuals.iter().map(|e| e * e).sum();
    let tss_within: f64 = y_dm.iter().map(|v| v * v).sum();
    let tss: f64 = y.iter().map(|v| (v - y_bar).powi(2)).sum();

    let (dims, clustered) = if spec.clusters.is_empty() {
        (vec![ClusterDim::new("observation", (0..n).collect())], false)
    } else {
        let dims = spec
            .clusters
            .iter()
            .map(|c| sample.codes(c).map(|(codes, _)| ClusterDim::new(c.clone(), codes)))
            .collect::<Result<Vec<_>>>()?;
        (dims, true)
    };
    let opts = VcovOptions { small_sample: spec.small_sample, repair: true };
    let v = clustered_vcov(&design, &residuals, &dims, &opts)?;
    let df = if clustered {
        (*v.counts.iter().min().expect("at least one dimension") - 1) as f64
    } else {
        (n - k - 1) as f64
    };

    let se = |j: usize| v.vcov[(j, j)].max(0.0).sqrt();
    let t = |j: usize| beta[j] / se(j);
    Ok(FitResult {
        name: spec.name.clone(),
        dependent: spec.dependent.clone(),
        terms: names,
        coefficients: (1..=k).map(|j| beta[j]).collect(),
        std_errors: (1..=k).map(se).collect(),
        t_stats: (1..=k).map(t).collect(),
        p_values: (1..=k).map(|j| two_sided_p(t(j), df)).collect(),
        intercept: [beta[0], se(0), t(0), two_sided_p(t(0), df)],
        vcov: (1..=k).map(|i| (1..=k).map(|j| v.vcov[(i, j)]).collect()).collect(),
        n_obs: n,
        r_squared_within: if tss_within > 0.0 { 1.0 - rss / tss_within } else { f64::NAN },
        r_squared: if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN },
        fe_dims: spec.fixed_effects.clone(),
        cluster_dims: if clustered { spec.clusters.clone() } else { Vec::new() },
        cluster_counts: if clustered { v.counts.clone() } else { Vec::new() },
        df_resid: df,
        vcov_repaired: v.repaired,
        demean_sweeps: sweeps,
        residuals,
        demeaned: x_dm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FTest {
    pub statistic: f64,
    pub p_value: f64,
    pub df_num: f64,
    pub df_den: f64,
}

/// Joint Wald test of linear restrictions using the fit's covariance,
/// referred to `F(q, df_resid)`.
pub fn f_test(fit: &FitResult, restrictions: &[Restriction]) -> Result<FTest> {
    let q = restrictions.len();
    if q == 0 {
        return Err(Error::Spec("no restrictions to test".into()));
    }
    let k = fit.terms.len();
    let mut r = DMatrix::<f64>::zeros(q, k);
    let mut d = DVector::<f64>::zeros(q);
    for (row, res) in restrictions.iter().enumerate() {
        for (term, w) in &res.weights {
            let j = fit
                .index(term)
                .ok_or_else(|| Error::Spec(format!("restriction term `{term}` is not in model `{}`", fit.name)))?;
            r[(row, j)] += w;
        }
        if r.row(row).iter().all(|&w| w == 0.0) && res.target != 0.0 {
            return Err(Error::Spec(format!("restriction `{res}` can never hold")));
        }
        let lhs: f64 = (0..k).map(|j| r[(row, j)] * fit.coefficients[j]).sum();
        d[row] = lhs - res.target;
    }
    let v = DMatrix::from_fn(k, k, |i, j| fit.vcov[i][j]);
    let m = &r * v * r.transpose();
    let m_pinv = m
        .clone()
        .pseudo_inverse(1e-12 * m.amax().max(f64::MIN_POSITIVE))
        .map_err(|e| Error::domain(e.to_string()))?;
    let statistic = ((d.transpose() * m_pinv * &d)[(0, 0)] / q as f64).max(0.0);
    let p_value = if statistic == 0.0 {
        1.0
    } else {
        FisherSnedecor::new(q as f64, fit.df_resid)
            .map_err(|e| Error::domain(e.to_string()))?
            .sf(statistic)
    };
    Ok(FTest { statistic, p_value, df_num: q as f64, df_den: fit.df_resid })
}
