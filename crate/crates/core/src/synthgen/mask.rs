use serde::{Deserialize, Serialize};

use crate::neurocore::RandomStream;
use crate::{Error, Result};

/// Per-sample, per-modality presence flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessMask {
    pub num_modalities: usize,
    /// Row-major `n × m`; `true` means present.
    pub present: Vec<bool>,
    pub rate: f64,
}

impl MissingnessMask {
    pub fn all_present(n: usize, m: usize) -> Self {
        Self {
            num_modalities: m,
            present: vec![true; n * m],
            rate: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        if self.num_modalities == 0 {
            0
        } else {
            self.present.len() / self.num_modalities
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn is_present(&self, sample: usize, modality: usize) -> bool {
        self.present[sample * self.num_modalities + modality]
    }

    pub fn row(&self, sample: usize) -> &[bool] {
        &self.present[sample * self.num_modalities..(sample + 1) * self.num_modalities]
    }

    /// Empirical absence frequency of one modality.
    pub fn absence_frequency(&self, modality: usize) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        let absent = (0..n).filter(|&s| !self.is_present(s, modality)).count();
        absent as f64 / n as f64
    }

    pub fn any_missing(&self) -> bool {
        self.present.iter().any(|p| !p)
    }
}

/// Independent Bernoulli(`rate`) absences; rows that come out fully absent are redrawn.
pub fn sample_mask(n: usize, m: usize, rate: f64, stream: &mut RandomStream) -> Result<MissingnessMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::input(format!("missingness rate {rate} outside [0, 1)")));
    }
    if m == 0 {
        return Err(Error::input("mask needs at least one modality"));
    }
    let mut present = Vec::with_capacity(n * m);
    let mut row = vec![true; m];
    for _ in 0..n {
        loop {
            for p in row.iter_mut() {
                *p = !stream.bernoulli(rate);
            }
            if row.iter().any(|p| *p) {
                break;
            }
        }
        present.extend_from_slice(&row);
    }
    Ok(MissingnessMask {
        num_modalities: m,
        present,
        rate,
    })
}

/// Per-modality absence probability after fully-absent rows are redrawn:
/// `(r − r^m) / (1 − r^m)`.
pub fn expected_absence_rate(rate: f64, m: usize) -> f64 {
    let all = rate.powi(m as i32);
    (rate - all) / (1.0 - all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_keeps_everything() {
        let mut s = RandomStream::new(1);
        let mask = sample_mask(500, 3, 0.0, &mut s).unwrap();
        assert!(!mask.any_missing());
    }

    #[test]
    fn rate_must_be_below_one() {
        let mut s = RandomStream::new(1);
        assert!(sample_mask(10, 2, 1.0, &mut s).is_err());
    }
}
