use std::fmt::Write;

use super::fit::FitResult;

/// Significance marks: `***` below 0.01, `**` below 0.05, `*` below 0.1.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

fn coef_cell(b: f64, p: f64) -> String {
    format!("{b:.3}{}", stars(p))
}

fn t_cell(t: f64) -> String {
    format!("({t:.2})")
}

const NOTE: &str = "t-statistics in parentheses. *** p<0.01, ** p<0.05, * p<0.1.";

/// One column per fit: coefficients with stars, t-statistics beneath,
/// then observations, within R² and fixed-effect flags.
pub fn render_columns(title: &str, fits: &[&FitResult]) -> String {
    let mut terms: Vec<&str> = Vec::new();
    for f in fits {
        for t in &f.terms {
            if !terms.contains(&t.as_str()) {
                terms.push(t);
            }
        }
    }
    let mut fe: Vec<&str> = Vec::new();
    for f in fits {
        for d in &f.fe_dims {
            if !fe.contains(&d.as_str()) {
                fe.push(d);
            }
        }
    }
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    if !terms.is_empty() {
        rows.push((
            "Constant".into(),
            fits.iter().map(|f| coef_cell(f.intercept[0], f.intercept[3])).collect(),
        ));
        rows.push((String::new(), fits.iter().map(|f| t_cell(f.intercept[2])).collect()));
        for t in &terms {
            rows.push((
                t.to_string(),
                fits.iter()
                    .map(|f| f.index(t).map_or(String::new(), |j| coef_cell(f.coefficients[j], f.p_values[j])))
                    .collect(),
            ));
            rows.push((
                String::new(),
                fits.iter().map(|f| f.index(t).map_or(String::new(), |j| t_cell(f.t_stats[j]))).collect(),
            ));
        }
    }
    rows.push(("Observations".into(), fits.iter().map(|f| f.n_obs.to_string()).collect()));
    if !terms.is_empty() {
        rows.push(("R-squared (within)".into(), fits.iter().map(|f| format!("{:.3}", f.r_squared_within)).collect()));
        for d in &fe {
            rows.push((
                format!("{d} FE"),
                fits.iter()
                    .map(|f| if f.fe_dims.iter().any(|x| x == d) { "Yes" } else { "No" }.to_string())
                    .collect(),
            ));
        }
    }

    let label_w = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max(8);
    let col_w = rows
        .iter()
        .flat_map(|(_, c)| c.iter().map(|s| s.chars().count()))
        .chain(fits.iter().map(|f| f.name.chars().count()))
        .max()
        .unwrap_or(0)
        .max(8)
        + 2;
    let mut out = String::new();
    writeln!(out, "{title}").unwrap();
    let mut header = format!("{:label_w$}", "");
    for f in fits {
        write!(header, "{:>col_w$}", f.name).unwrap();
    }
    writeln!(out, "{}", header.trim_end()).unwrap();
    writeln!(out, "{}", "-".repeat(label_w + col_w * fits.len())).unwrap();
    for (label, cells) in &rows {
        let mut line = format!("{label:label_w$}");
        for c in cells {
            write!(line, "{c:>col_w$}").unwrap();
        }
        writeln!(out, "{}", line.trim_end()).unwrap();
    }
    if !terms.is_empty() {
        writeln!(out, "{NOTE}").unwrap();
        if let Some(f) = fits.iter().find(|f| !f.cluster_dims.is_empty()) {
            writeln!(out, "Clustered standard errors ({}).", f.cluster_dims.join(", ")).unwrap();
        }
    }
    out
}

/// A single fit as a one-column table.
pub fn summarize(fit: &FitResult) -> String {
    render_columns(&fit.name, &[fit])
}

/// One row per fit: the constant and the effect of `term`, t beneath.
pub fn render_effects(title: &str, fits: &[&FitResult], term: &str) -> String {
    let label_w = fits.iter().map(|f| f.name.chars().count()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    writeln!(out, "{title}").unwrap();
    writeln!(out, "{:label_w$}{:>14}{:>14}", "Sample", "Constant", term).unwrap();
    writeln!(out, "{}", "-".repeat(label_w + 28)).unwrap();
    for f in fits {
        let (b, t) = match f.index(term) {
            Some(j) => (coef_cell(f.coefficients[j], f.p_values[j]), t_cell(f.t_stats[j])),
            None => (String::new(), String::new()),
        };
        writeln!(out, "{:label_w$}{:>14}{:>14}", f.name, format!("{:.3}", f.intercept[0]), b).unwrap();
        writeln!(out, "{}", format!("{:label_w$}{:>14}{:>14}", "", "", t).trim_end()).unwrap();
    }
    writeln!(out, "{NOTE}").unwrap();
    out
}

/// Long-format coefficient table: one CSV row per fit × term.
pub fn coefficient_csv(fits: &[&FitResult]) -> String {
    let mut out = String::from("model,term,estimate,std_error,t_stat,p_value,n_obs,r_squared_within\n");
    for f in fits {
        let mut row = |term: &str, b: f64, se: f64, t: f64, p: f64| {
            writeln!(
                out,
                "{},{term},{b:.10e},{se:.10e},{t:.6},{p:.6},{},{:.6}",
                f.name, f.n_obs, f.r_squared_within
            )
            .unwrap();
        };
        let [b, se, t, p] = f.intercept;
        row("_cons", b, se, t, p);
        for j in 0..f.terms.len() {
            row(&f.terms[j], f.coefficients[j], f.std_errors[j], f.t_stats[j], f.p_values[j]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_thresholds() {
        assert_eq!(stars(0.04), "**");
        assert_eq!(stars(0.09), "*");
        assert_eq!(stars(0.001), "***");
        assert_eq!(stars(0.2), "");
        assert_eq!(stars(0.01), "**");
    }
}
