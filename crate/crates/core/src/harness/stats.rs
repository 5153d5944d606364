use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    /// The mean difference exceeds the null value.
    Greater,
    /// The mean difference is below the null value.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub mean: f64,
    pub std_dev: f64,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// One-sided one-sample t-test on paired differences `after - before`
/// against the null mean `mu0`. With zero spread the p-value is 0 when the
/// mean lies strictly on the alternative's side of `mu0` and 1 otherwise.
pub fn one_sided_paired_t(before: &[f64], after: &[f64], mu0: f64, alt: Alternative) -> Result<TTest> {
    if before.len() != after.len() || before.len() < 2 {
        return Err(Error::invalid(format!(
            "paired test needs two equally long samples of at least 2 (got {} and {})",
            before.len(),
            after.len()
        )));
    }
    let d: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let df = n - 1.0;
    let side = match alt {
        Alternative::Greater => mean - mu0,
        Alternative::Less => mu0 - mean,
    };
    if sd == 0.0 {
        let p = if side > 0.0 { 0.0 } else { 1.0 };
        return Ok(TTest { mean, std_dev: 0.0, t: f64::INFINITY.copysign(mean - mu0), df, p_value: p });
    }
    let t = (mean - mu0) / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    let p_value = match alt {
        Alternative::Greater => 1.0 - dist.cdf(t),
        Alternative::Less => dist.cdf(t),
    };
    Ok(TTest { mean, std_dev: sd, t, df, p_value })
}
