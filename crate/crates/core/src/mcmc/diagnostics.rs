//! Convergence and Monte Carlo error diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Potential scale reduction factor
/// `sqrt(((n - 1) / n * W + B / n) / W)`, where `W` is the mean within-chain
/// variance and `B` is `n` times the variance of the chain means.
///
/// Values are floored at 1.0. Constant chains with equal means give 1.0;
/// constant chains with different means give `+inf`.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "gelman_rubin needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Dimension("chains must have equal lengths".into()));
    }
    if n < 2 {
        return Err(Error::InsufficientData("chains need at least 2 draws".into()));
    }
    let means: Vec<f64> = chains.iter().map(|c| stats::mean(c)).collect();
    let within = chains.iter().map(|c| stats::sample_variance(c)).sum::<f64>() / chains.len() as f64;
    let nf = n as f64;
    let between = nf * stats::sample_variance(&means);
    if within == 0.0 {
        return Ok(if between == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let r = (((nf - 1.0) / nf * within + between / nf) / within).sqrt();
    Ok(r.max(1.0))
}

/// Batch-means standard error of the mean with `floor(sqrt(n))` batches.
pub fn mc_error(draws: &[f64]) -> Result<f64> {
    let n = draws.len();
    if n < 100 {
        return Err(Error::InsufficientData(format!(
            "mc_error needs at least 100 draws, got {n}"
        )));
    }
    // batch means of a constant chain can differ in the last bit
    if draws.iter().all(|&x| x == draws[0]) {
        return Ok(0.0);
    }
    let n_batches = (n as f64).sqrt().floor() as usize;
    let batch_len = n / n_batches;
    let used = n_batches * batch_len;
    let batch_means: Vec<f64> = draws[..used].chunks_exact(batch_len).map(stats::mean).collect();
    let var_bm = batch_len as f64 * stats::sample_variance(&batch_means);
    Ok((var_bm / used as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub median: f64,
    pub lower95: f64,
    pub upper95: f64,
    /// `None` with fewer than 100 pooled draws.
    pub mc_error: Option<f64>,
    /// `None` with a single chain.
    pub r_hat: Option<f64>,
}

impl PosteriorSummary {
    /// `"median (lower to upper)"` with two decimals.
    pub fn formatted(&self) -> String {
        format!("{:.2} ({:.2} to {:.2})", self.median, self.lower95, self.upper95)
    }
}

pub fn summarize_param(pooled: &[f64], per_chain: &[&[f64]]) -> Result<PosteriorSummary> {
    if pooled.is_empty() {
        return Err(Error::InsufficientData("no draws to summarize".into()));
    }
    let s = stats::sorted(pooled);
    let r_hat = if per_chain.len() >= 2 {
        Some(gelman_rubin(per_chain)?)
    } else {
        None
    };
    Ok(PosteriorSummary {
        median: stats::quantile_sorted(&s, 0.5),
        lower95: stats::quantile_sorted(&s, 0.025),
        upper95: stats::quantile_sorted(&s, 0.975),
        mc_error: mc_error(pooled).ok(),
        r_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identical_chains_give_one() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = gelman_rubin(&[&a, &a]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_by_four() {
        // means 2.5 and 4.5, within variances 5/3 each, B = 4 * 2 = 8:
        // ((3/4)(5/3) + 8/4) / (5/3) = 39/20
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [3.0, 4.0, 5.0, 6.0];
        let r = gelman_rubin(&[&a, &b]).unwrap();
        assert!((r - (39.0f64 / 20.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn separated_chains_are_flagged() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 10.0).collect();
        assert!(gelman_rubin(&[&a, &b]).unwrap() > 5.0);
    }

    #[test]
    fn degenerate_inputs() {
        let a = [1.0; 20];
        let b = [2.0; 20];
        assert_eq!(gelman_rubin(&[&a, &a]).unwrap(), 1.0);
        assert_eq!(gelman_rubin(&[&a, &b]).unwrap(), f64::INFINITY);
        assert!(gelman_rubin(&[&a]).is_err());
        assert!(gelman_rubin(&[&a, &b[..10]]).is_err());
    }

    #[test]
    fn mc_error_of_constant_is_zero() {
        assert_eq!(mc_error(&[3.5; 400]).unwrap(), 0.0);
        assert!(mc_error(&[1.0; 99]).is_err());
    }

    #[test]
    fn summary_examples() {
        let c = [1.0, 2.0, 3.0, 4.0, 5.0];
        let pooled: Vec<f64> = c.iter().chain(&c).copied().collect();
        let s = summarize_param(&pooled, &[&c, &c]).unwrap();
        assert_eq!(s.median, 3.0);
        assert!(s.lower95 <= s.median && s.median <= s.upper95);

        let k = [0.7; 200];
        let pooled: Vec<f64> = k.iter().chain(&k).copied().collect();
        let s = summarize_param(&pooled, &[&k, &k]).unwrap();
        assert_eq!((s.median, s.lower95, s.upper95), (0.7, 0.7, 0.7));
        assert_eq!(s.mc_error, Some(0.0));
        assert_eq!(s.r_hat, Some(1.0));

        let one = summarize_param(&k, &[&k]).unwrap();
        assert_eq!(one.r_hat, None);
    }

    #[test]
    fn formatted_interval() {
        let s = PosteriorSummary {
            median: 1.744,
            lower95: 0.851,
            upper95: 3.4666,
            mc_error: None,
            r_hat: None,
        };
        assert_eq!(s.formatted(), "1.74 (0.85 to 3.47)");
    }
}
