//! Independent reference computations and synthetic panels used to check
//! the estimator: explicit dummy-variable OLS, a pairwise brute-force
//! multi-way cluster covariance, and data generators with known truth.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::spec::PanelSpec;
use super::Dataset;
use crate::error::{Error, Result};

/// Slopes from OLS on `[X, 1, dummies]`, one dummy per level of every
/// fixed-effect dimension. Redundant dummy columns are dropped by a
/// Gram–Schmidt pass before a QR least-squares solve.
pub fn dummy_ols(y: &[f64], x: &[Vec<f64>], fe_codes: &[Vec<usize>]) -> Result<Vec<f64>> {
    let n = y.len();
    let k = x.len();
    let mut candidates: Vec<Vec<f64>> = x.to_vec();
    candidates.push(vec![1.0; n]);
    for codes in fe_codes {
        let levels = codes.iter().max().map_or(0, |m| m + 1);
        for l in 0..levels {
            candidates.push(codes.iter().map(|&c| if c == l { 1.0 } else { 0.0 }).collect());
        }
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept: Vec<&Vec<f64>> = Vec::new();
    for (j, col) in candidates.iter().enumerate() {
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut r = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
                for (ri, qi) in r.iter_mut().zip(q) {
                    *ri -= dot * qi;
                }
            }
        }
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 * norm0 {
            basis.push(r.iter().map(|v| v / norm).collect());
            kept.push(col);
        } else if j < k {
            return Err(Error::Collinear(vec![format!("regressor {j}")]));
        }
    }
    let a = DMatrix::from_fn(n, kept.len(), |i, j| kept[j][i]);
    let qr = a.qr();
    let sol = qr
        .r()
        .solve_upper_triangular(&(qr.q().transpose() * DVector::from_column_slice(y)))
        .ok_or_else(|| Error::domain("singular dummy design"))?;
    Ok((0..k).map(|j| sol[j]).collect())
}

/// Multi-way clustered covariance assembled the slow way: for every
/// subset of dimensions, sum `x_i e_i e_j x_j'` over all pairs sharing a
/// cluster in each dimension of the subset.
pub fn brute_force_cgm(design: &DMatrix<f64>, residuals: &[f64], dims: &[Vec<usize>], small_sample: bool) -> DMatrix<f64> {
    let (n, k) = design.shape();
    let bread = (design.transpose() * design).try_inverse().expect("full-rank design");
    let mut v = DMatrix::<f64>::zeros(k, k);
    for mask in 1u32..(1 << dims.len()) {
        let members: Vec<&Vec<usize>> = dims.iter().enumerate().filter(|(d, _)| mask & (1 << d) != 0).map(|(_, c)| c).collect();
        let same = |i: usize, j: usize| members.iter().all(|c| c[i] == c[j]);
        let mut meat = DMatrix::<f64>::zeros(k, k);
        for i in 0..n {
            for j in 0..n {
                if same(i, j) {
                    let xi = design.row(i).transpose() * residuals[i];
                    let xj = design.row(j) * residuals[j];
                    meat += xi * xj;
                }
            }
        }
        // clusters counted as distinct representatives
        let g = (0..n).filter(|&i| (0..i).all(|j| !same(i, j))).count() as f64;
        let factor = if small_sample { g / (g - 1.0) * (n as f64 - 1.0) / (n - k) as f64 } else { 1.0 };
        let sign = if members.len() % 2 == 1 { 1.0 } else { -1.0 };
        v += (&bread * meat * &bread) * (sign * factor);
    }
    v
}

/// A random small panel: `n` rows, 1–3 crossed fixed-effect dimensions,
/// 1–4 continuous regressors and a dependent variable with level effects.
/// Columns are `y`, `x1..`, `fe1..` and `cl1..` (cluster labels, coarser
/// than the rows). The returned spec absorbs every `fe` column.
pub fn random_panel(rng: &mut ChaCha8Rng, max_obs: usize) -> (Dataset, PanelSpec) {
    let n = rng.random_range(30..=max_obs);
    let n_fe = rng.random_range(1..=3);
    let k = rng.random_range(1..=4);
    let mut data = Dataset::new(n);
    let mut effects = vec![0.0; n];
    let mut fe_names = Vec::new();
    for d in 0..n_fe {
        let levels = rng.random_range(2..=(n / 6).max(3));
        let level_fx: Vec<f64> = (0..levels).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
        let codes: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        for (e, &c) in effects.iter_mut().zip(&codes) {
            *e += level_fx[c as usize];
        }
        let name = format!("fe{}", d + 1);
        data.add_numeric(name.clone(), codes).unwrap();
        fe_names.push(name);
    }
    let mut y = effects;
    let mut names = Vec::new();
    for j in 0..k {
        let beta: f64 = rng.random_range(-2.0..2.0);
        let x: Vec<f64> = y.iter().map(|fx| 0.3 * fx + rng.sample::<f64, _>(StandardNormal)).collect();
        for (yi, xi) in y.iter_mut().zip(&x) {
            *yi += beta * xi;
        }
        let name = format!("x{}", j + 1);
        data.add_numeric(name.clone(), x).unwrap();
        names.push(name);
    }
    for yi in y.iter_mut() {
        *yi += rng.sample::<f64, _>(StandardNormal);
    }
    data.add_numeric("y", y).unwrap();
    for d in 0..3 {
        let g = rng.random_range(2..=(n / 4).max(2));
        data.add_numeric(format!("cl{}", d + 1), (0..n).map(|_| rng.random_range(0..g) as f64).collect())
            .unwrap();
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut spec = PanelSpec::new("random", &refs);
    spec.dependent = "y".into();
    spec.fixed_effects = fe_names;
    spec.exclude_training = false;
    (data, spec)
}

/// Replaces `spec.dependent` on the estimation sample of `skeleton` with
/// `α_i + Σ truth_j·term_j + N(0, noise_sd)`, where `α_i` is a
/// `N(0.6, 0.1)` effect per level of the first fixed-effect dimension.
/// Returns the sample with the synthetic dependent variable.
pub fn synthetic_outcome(skeleton: &Dataset, spec: &PanelSpec, truth: &[f64], noise_sd: f64, seed: u64) -> Result<Dataset> {
    let terms = spec.terms()?;
    if truth.len() != terms.len() {
        return Err(Error::domain(format!("{} true coefficients for {} terms", truth.len(), terms.len())));
    }
    let sample = spec.sample(skeleton)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let effect_dim = spec
        .fixed_effects
        .first()
        .ok_or_else(|| Error::Spec("synthetic outcome needs a fixed-effect dimension".into()))?;
    let (codes, levels) = sample.codes(effect_dim)?;
    let alpha_dist = Normal::new(0.6, 0.1).expect("valid normal");
    let alpha: Vec<f64> = (0..levels).map(|_| alpha_dist.sample(&mut rng)).collect();
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::domain(e.to_string()))?;
    let mut y: Vec<f64> = codes.iter().map(|&c| alpha[c]).collect();
    for (t, b) in terms.iter().zip(truth) {
        for (yi, xi) in y.iter_mut().zip(t.evaluate(&sample)?) {
            *yi += b * xi;
        }
    }
    for yi in y.iter_mut() {
        *yi += noise.sample(&mut rng);
    }
    let mut out = sample;
    out.replace_numeric(&spec.dependent, y)?;
    Ok(out)
}
