//! Run summaries: accuracy per domain, loss and distance traces, and
//! per-class latent log-likelihood histograms.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::FlowModel;

pub const HISTOGRAM_BINS: usize = 64;

/// Fixed log-likelihood range `[−4d, 2d]` for latent dimension `d`.
pub fn histogram_range(dim: usize) -> (f64, f64) {
    (-4.0 * dim as f64, 2.0 * dim as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub domain: String,
    pub class: usize,
    pub lo: f64,
    pub hi: f64,
    /// One count per bin; values outside `[lo, hi)` land in the edge bins.
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(domain: &str, class: usize, values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo < hi) || bins == 0 {
            return Err(Error::Contract(format!("bad histogram range [{lo}, {hi}) with {bins} bins")));
        }
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            if v.is_nan() {
                return Err(Error::NonFinite { op: "histogram" });
            }
            let bin = ((v - lo) / width).floor();
            let bin = if bin < 0.0 { 0 } else { (bin as usize).min(bins - 1) };
            counts[bin] += 1;
        }
        Ok(Self {
            domain: domain.to_string(),
            class,
            lo,
            hi,
            counts,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + i as f64 * width, self.lo + (i + 1) as f64 * width)
    }
}

/// Shared area of the two normalized histograms, in `[0, 1]`.
pub fn overlap_coefficient(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("histograms with {} and {} bins", a.len(), b.len())));
    }
    let (na, nb) = (a.iter().sum::<usize>() as f64, b.iter().sum::<usize>() as f64);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("overlap of an empty histogram".into()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x as f64 / na).min(y as f64 / nb)).sum())
}

/// Histogram of `log p(x, c)` for each class present in `ds`.
pub fn latent_histograms(flow: &FlowModel, ds: &Dataset, domain: &str) -> Result<Vec<Histogram>> {
    let ll = flow.dataset_log_likelihood(ds)?;
    let (lo, hi) = histogram_range(flow.dim());
    (0..ds.class_count)
        .filter_map(|c| {
            let values: Vec<f64> = ll.iter().zip(&ds.labels).filter(|(_, &l)| l == c).map(|(&v, _)| v).collect();
            (!values.is_empty()).then(|| Histogram::build(domain, c, &values, lo, hi, HISTOGRAM_BINS))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub mode: String,
    pub seed: u64,
    pub source_domain: String,
    pub accuracy: Vec<DomainAccuracy>,
    /// Mean classifier loss per block of minimization steps.
    pub clf_loss: Vec<f64>,
    /// Mean flow NLL per block; for the baseline this is the reference flow.
    pub flow_nll: Vec<f64>,
    pub distances: Vec<f64>,
    pub histograms: Vec<Histogram>,
}

impl TrainingReport {
    pub fn validate(&self) -> Result<()> {
        for row in &self.accuracy {
            if !(0.0..=1.0).contains(&row.accuracy) {
                return Err(Error::Contract(format!("accuracy {} for {} outside [0, 1]", row.accuracy, row.domain)));
            }
        }
        for h in &self.histograms {
            if h.counts.len() != HISTOGRAM_BINS {
                return Err(Error::Contract(format!("histogram for {}/{} has {} bins", h.domain, h.class, h.counts.len())));
            }
        }
        Ok(())
    }

    pub fn histogram(&self, domain: &str, class: usize) -> Option<&Histogram> {
        self.histograms.iter().find(|h| h.domain == domain && h.class == class)
    }

    /// Overlap coefficient between two domains for every class both contain.
    pub fn overlaps(&self, a: &str, b: &str) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        for ha in self.histograms.iter().filter(|h| h.domain == a) {
            if let Some(hb) = self.histogram(b, ha.class) {
                out.push((ha.class, overlap_coefficient(&ha.counts, &hb.counts)?));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outliers_land_in_edge_bins() {
        let h = Histogram::build("d", 0, &[-100.0, 0.0, 0.5, 9.99, 10.0, 1e9], 0.0, 10.0, 10).unwrap();
        assert_eq!(h.counts, vec![3, 0, 0, 0, 0, 0, 0, 0, 0, 3]);
        assert_eq!(h.total(), 6);
        assert_eq!(h.bin_edges(3), (3.0, 4.0));
    }

    #[test]
    fn overlap_bounds() {
        assert_eq!(overlap_coefficient(&[1, 2, 3], &[2, 4, 6]).unwrap(), 1.0);
        assert_eq!(overlap_coefficient(&[1, 0], &[0, 5]).unwrap(), 0.0);
        assert!((overlap_coefficient(&[1, 1], &[1, 0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(overlap_coefficient(&[0, 0], &[1, 0]).is_err());
    }

    #[test]
    fn range_scales_with_dimension() {
        assert_eq!(histogram_range(256), (-1024.0, 512.0));
    }
}
