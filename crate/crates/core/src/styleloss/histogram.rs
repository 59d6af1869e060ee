//! Binned densities and monotone histogram matching.
//!
//! The CDF of a binned density is treated as piecewise linear inside each
//! bin, so matching a sample against its own histogram is the identity.

use crate::error::{Error, Result};

/// Bin edges plus masses summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityHistogram {
    edges: Vec<f64>,
    masses: Vec<f64>,
}

impl DensityHistogram {
    pub fn new(edges: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() || edges.len() != masses.len() + 1 {
            return Err(Error::invalid("histogram needs bins + 1 edges and at least one bin"));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid("histogram edges must be finite and strictly increasing"));
        }
        if masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::invalid("histogram masses must be finite and nonnegative"));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("histogram masses sum to {total}, not 1")));
        }
        Ok(Self { edges, masses })
    }

    /// Empirical histogram of `values` over `edges`; the last bin is closed.
    pub fn from_samples(values: &[f64], edges: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("histogram of an empty sample"));
        }
        let mut counts = vec![0.0; edges.len().saturating_sub(1)];
        for &v in values {
            let b = bin_of(edges, v).ok_or_else(|| Error::invalid(format!("value {v} outside histogram range")))?;
            counts[b] += 1.0;
        }
        let n = values.len() as f64;
        Self::new(edges.to_vec(), counts.into_iter().map(|c| c / n).collect())
    }

    /// Bin-wise mean of histograms sharing the same edges.
    pub fn average(hists: &[DensityHistogram]) -> Result<Self> {
        let first = hists.first().ok_or_else(|| Error::invalid("average of no histograms"))?;
        if hists.iter().any(|h| h.edges != first.edges) {
            return Err(Error::invalid("histograms to average must share edges"));
        }
        let k = hists.len() as f64;
        let masses = (0..first.masses.len())
            .map(|b| hists.iter().map(|h| h.masses[b]).sum::<f64>() / k)
            .collect();
        Self::new(first.edges.clone(), masses)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    fn cumulative(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.masses.len() + 1);
        c.push(0.0);
        for m in &self.masses {
            c.push(c.last().unwrap() + m);
        }
        c
    }

    /// Piecewise-linear CDF.
    pub fn cdf(&self, x: f64) -> f64 {
        let Some(b) = bin_of(&self.edges, x) else {
            return if x < self.edges[0] { 0.0 } else { 1.0 };
        };
        let c = self.cumulative();
        let t = (x - self.edges[b]) / (self.edges[b + 1] - self.edges[b]);
        (c[b] + t * self.masses[b]).min(1.0)
    }

    /// Inverse of [`DensityHistogram::cdf`], skipping empty bins.
    pub fn quantile(&self, u: f64) -> f64 {
        let c = self.cumulative();
        let u = u.clamp(0.0, 1.0);
        for b in 0..self.masses.len() {
            if self.masses[b] > 0.0 && u <= c[b + 1] {
                let t = ((u - c[b]) / self.masses[b]).clamp(0.0, 1.0);
                return self.edges[b] + t * (self.edges[b + 1] - self.edges[b]);
            }
        }
        *self.edges.last().unwrap()
    }
}

/// `n + 1` evenly spaced edges spanning `[lo, hi]`, or `None` when the
/// range is empty.
pub fn uniform_edges(lo: f64, hi: f64, n: usize) -> Option<Vec<f64>> {
    if !(hi > lo) || n == 0 {
        return None;
    }
    let mut e: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    e[n] = hi;
    Some(e)
}

fn bin_of(edges: &[f64], v: f64) -> Option<usize> {
    let nb = edges.len().checked_sub(1)?;
    if nb == 0 || !(v >= edges[0] && v <= edges[nb]) {
        return None;
    }
    let b = edges.partition_point(|&e| e <= v).saturating_sub(1);
    Some(b.min(nb - 1))
}

/// Monotone remap of `values` so their binned distribution follows
/// `target`. The sample is binned on the target's edges when it fits inside
/// them, otherwise on as many even bins over its own range. Returns the
/// input unchanged when that histogram already equals the target (within
/// 1e-12 per bin).
pub fn match_histogram(values: &[f64], target: &DensityHistogram) -> Result<Vec<f64>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let edges = target.edges();
    let inside = lo >= edges[0] && hi <= edges[edges.len() - 1];
    let source = if inside {
        let source = DensityHistogram::from_samples(values, edges)?;
        if source
            .masses
            .iter()
            .zip(&target.masses)
            .all(|(a, b)| (a - b).abs() <= 1e-12)
        {
            return Ok(values.to_vec());
        }
        source
    } else {
        match uniform_edges(lo, hi, target.masses.len()) {
            Some(own) => DensityHistogram::from_samples(values, &own)?,
            // a constant sample maps to the target median
            None => return Ok(vec![target.quantile(0.5); values.len()]),
        }
    };
    Ok(values.iter().map(|&v| target.quantile(source.cdf(v))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn validation() {
        assert!(DensityHistogram::new(vec![0.0, 1.0], vec![1.0]).is_ok());
        assert!(DensityHistogram::new(vec![0.0, 1.0], vec![0.5]).is_err());
        assert!(DensityHistogram::new(vec![1.0, 0.0], vec![1.0]).is_err());
        assert!(DensityHistogram::new(vec![0.0, 1.0, 2.0], vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn matching_against_own_histogram_is_identity() {
        let v = [0.0, 0.3, 0.31, 0.9, 1.0, 0.5];
        let edges = uniform_edges(0.0, 1.0, 4).unwrap();
        let own = DensityHistogram::from_samples(&v, &edges).unwrap();
        assert_eq!(match_histogram(&v, &own).unwrap(), v.to_vec());
    }

    #[test]
    fn matching_moves_mass_to_target() {
        // all mass of the target sits in the top bin
        let edges = uniform_edges(0.0, 1.0, 4).unwrap();
        let target = DensityHistogram::new(edges.clone(), vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let v = [0.1, 0.2, 0.6, 0.9];
        let out = match_histogram(&v, &target).unwrap();
        assert!(out.iter().all(|&x| (0.75..=1.0).contains(&x)), "{out:?}");
        assert!(out.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn cdf_and_quantile_are_inverse() {
        let h = DensityHistogram::new(vec![0.0, 1.0, 2.0, 4.0], vec![0.25, 0.0, 0.75]).unwrap();
        for x in [0.0, 0.5, 1.0, 2.5, 3.9, 4.0] {
            let back = h.quantile(h.cdf(x));
            // the empty middle bin collapses onto its lower edge
            let expect = if (1.0..=2.0).contains(&x) { 1.0 } else { x };
            assert!((back - expect).abs() < 1e-12, "{x} -> {back}");
        }
    }

    proptest! {
        #[test]
        fn matching_is_monotone(v in prop::collection::vec(-5.0f64..5.0, 2..30),
                                m in prop::collection::vec(0.0f64..1.0, 8)) {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(hi > lo && m.iter().sum::<f64>() > 0.0);
            let s: f64 = m.iter().sum();
            let target = DensityHistogram::new(uniform_edges(lo, hi, 8).unwrap(),
                                               m.iter().map(|x| x / s).collect()).unwrap();
            let out = match_histogram(&v, &target).unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] <= v[j] {
                        prop_assert!(out[i] <= out[j] + 1e-12);
                    }
                }
            }
        }
    }
}
