//! Magnitude encoding of scalar intensities.
//!
//! Each scalar `x` in `[-1, 1]` becomes a `d`-vector of bumps centred on an
//! even grid `c_j = 2j/(d-1) - 1`. The Gaussian variant uses
//! `exp(-(x - c_j)^2 / (2 sigma^2))`; the triangle variant is a pair of
//! opposing ReLU ramps reaching zero at the neighbouring centres.

use crate::error::{invalid, Error, Result};

/// Tolerance for inputs slightly outside `[-1, 1]`; such values are clamped.
pub const DOMAIN_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Gaussian,
    Triangle,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Variant::Gaussian),
            "triangle" => Ok(Variant::Triangle),
            _ => Err(invalid!("unknown encoding variant {s:?}")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Gaussian => "gaussian",
            Variant::Triangle => "triangle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MEConfig {
    pub d: usize,
    pub sigma: f64,
    pub variant: Variant,
}

impl MEConfig {
    pub fn gaussian(d: usize, sigma: f64) -> Result<Self> {
        let cfg = MEConfig {
            d,
            sigma,
            variant: Variant::Gaussian,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn triangle(d: usize) -> Result<Self> {
        let cfg = MEConfig {
            d,
            sigma: 1.0,
            variant: Variant::Triangle,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(invalid!(
                "encoding dimensionality must be >= 2, got {}",
                self.d
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid!(
                "encoding sigma must be positive, got {}",
                self.sigma
            ));
        }
        Ok(())
    }

    /// Centre of component `j`. Computed as `(2j - (d-1)) / (d-1)` so that
    /// `center(d-1-j) == -center(j)` holds exactly.
    pub fn center(&self, j: usize) -> f64 {
        let span = (self.d - 1) as f64;
        (2.0 * j as f64 - span) / span
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.d).map(|j| self.center(j)).collect()
    }

    /// Spacing between neighbouring centres.
    pub fn gap(&self) -> f64 {
        2.0 / (self.d - 1) as f64
    }

    /// Encodes one scalar into `out[..d]`.
    pub fn encode_scalar(&self, x: f64, out: &mut [f64]) -> Result<()> {
        let x = check_domain(x)?;
        match self.variant {
            Variant::Gaussian => {
                let denom = 2.0 * self.sigma * self.sigma;
                for (j, o) in out[..self.d].iter_mut().enumerate() {
                    let diff = x - self.center(j);
                    *o = (-(diff * diff) / denom).exp();
                }
            }
            Variant::Triangle => {
                let span = (self.d - 1) as f64;
                for (j, o) in out[..self.d].iter_mut().enumerate() {
                    // |x - c_j| / gap, with gap = 2/(d-1)
                    let dist = (x - self.center(j)).abs() * span / 2.0;
                    *o = (1.0 - dist).max(0.0);
                }
            }
        }
        Ok(())
    }

    /// Encodes `n` scalars into an `n x d` row-major array.
    pub fn encode(&self, xs: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        let mut out = vec![0.0; xs.len() * self.d];
        for (x, row) in xs.iter().zip(out.chunks_mut(self.d)) {
            self.encode_scalar(*x, row)?;
        }
        Ok(out)
    }

    /// Lookup table for 8-bit pixels `p` mapped to `p / 127.5 - 1`; row `p`
    /// holds the `d` components.
    pub fn byte_table(&self) -> Result<Vec<f32>> {
        self.validate()?;
        let mut row = vec![0.0; self.d];
        let mut table = Vec::with_capacity(256 * self.d);
        for p in 0..=255u8 {
            self.encode_scalar(crate::data::byte_to_unit(p) as f64, &mut row)?;
            table.extend(row.iter().map(|&v| v as f32));
        }
        Ok(table)
    }
}

/// Gaussian magnitude encoding; output is `n x d` row-major.
pub fn magnitude_encode_gaussian(xs: &[f64], cfg: &MEConfig) -> Result<Vec<f64>> {
    MEConfig {
        variant: Variant::Gaussian,
        ..*cfg
    }
    .encode(xs)
}

/// Triangle (ReLU ramp) magnitude encoding; output is `n x d` row-major.
pub fn magnitude_encode_triangle(xs: &[f64], cfg: &MEConfig) -> Result<Vec<f64>> {
    MEConfig {
        variant: Variant::Triangle,
        ..*cfg
    }
    .encode(xs)
}

fn check_domain(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite("magnitude encoding input".into()));
    }
    if x.abs() > 1.0 + DOMAIN_SLACK {
        return Err(invalid!("magnitude encoding input {x} outside [-1, 1]"));
    }
    Ok(x.clamp(-1.0, 1.0))
}

/// Index of the largest component; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
