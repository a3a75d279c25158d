//! Correlation traces and their CSV form.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Raw coincidence data behind a measured trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCounts {
    pub pairs: Vec<u64>,
    /// Expected pair count per bin for uncorrelated streams (the g²
    /// normalization denominator).
    pub expected: Vec<f64>,
}

/// g²(τ) sampled on a τ grid (µs), with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTrace {
    pub tau: Vec<f64>,
    pub g2: Vec<f64>,
    pub stderr: Vec<f64>,
    pub counts: Option<PairCounts>,
    /// Histogram bin width in µs, for binned traces.
    pub bin_width: Option<f64>,
}

impl CorrelationTrace {
    /// A noiseless model trace (zero standard errors).
    pub fn deterministic(tau: Vec<f64>, g2: Vec<f64>) -> Self {
        let stderr = vec![0.0; g2.len()];
        CorrelationTrace {
            tau,
            g2,
            stderr,
            counts: None,
            bin_width: None,
        }
    }

    pub fn with_errors(tau: Vec<f64>, g2: Vec<f64>, stderr: Vec<f64>) -> Self {
        CorrelationTrace {
            tau,
            g2,
            stderr,
            counts: None,
            bin_width: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.stderr.iter().any(|&e| e > 0.0)
    }

    /// Maps g² to 1 + β(g² − 1), scaling errors by β.
    pub fn with_contrast(mut self, beta: f64) -> Self {
        for v in &mut self.g2 {
            *v = 1.0 + beta * (*v - 1.0);
        }
        for e in &mut self.stderr {
            *e *= beta;
        }
        self
    }

    /// Writes `tau_us,g2,stderr` (plus `pairs` when counts are present).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        match &self.counts {
            Some(c) => {
                writeln!(out, "tau_us,g2,stderr,pairs")?;
                for i in 0..self.len() {
                    writeln!(
                        out,
                        "{:e},{:e},{:e},{}",
                        self.tau[i], self.g2[i], self.stderr[i], c.pairs[i]
                    )?;
                }
            }
            None => {
                writeln!(out, "tau_us,g2,stderr")?;
                for i in 0..self.len() {
                    writeln!(out, "{:e},{:e},{:e}", self.tau[i], self.g2[i], self.stderr[i])?;
                }
            }
        }
        Ok(())
    }

    /// Reads the CSV written by [`write_csv`](Self::write_csv). Lines starting
    /// with `#` are skipped. A `pairs` column is read but the expected counts
    /// are reconstructed as pairs/g².
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut tau = Vec::new();
        let mut g2 = Vec::new();
        let mut stderr = Vec::new();
        let mut pairs = Vec::new();
        let mut header_seen = false;
        let mut has_pairs = false;
        let mut offset = 0u64;
        for line in input.lines() {
            let line = line?;
            let this_offset = offset;
            offset += line.len() as u64 + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if !header_seen {
                let cols: Vec<&str> = trimmed.split(',').map(str::trim).collect();
                if cols.len() < 2 || cols[0] != "tau_us" || cols[1] != "g2" {
                    return Err(Error::Parse {
                        offset: this_offset,
                        reason: format!("expected header `tau_us,g2[,stderr[,pairs]]`, got `{trimmed}`"),
                    });
                }
                has_pairs = cols.get(3) == Some(&"pairs");
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            let num = |i: usize| -> Result<f64> {
                fields
                    .get(i)
                    .ok_or_else(|| Error::Parse {
                        offset: this_offset,
                        reason: format!("missing column {i}"),
                    })?
                    .parse::<f64>()
                    .map_err(|e| Error::Parse {
                        offset: this_offset,
                        reason: e.to_string(),
                    })
            };
            tau.push(num(0)?);
            g2.push(num(1)?);
            stderr.push(if fields.len() > 2 { num(2)? } else { 0.0 });
            if has_pairs {
                pairs.push(num(3)? as u64);
            }
        }
        if !header_seen {
            return Err(Error::Parse {
                offset: 0,
                reason: "missing header".into(),
            });
        }
        let counts = has_pairs.then(|| {
            let expected = pairs
                .iter()
                .zip(&g2)
                .map(|(&p, &g)| if g > 0.0 { p as f64 / g } else { 0.0 })
                .collect();
            PairCounts { pairs, expected }
        });
        let bin_width = if tau.len() > 1 { Some(tau[1] - tau[0]) } else { None };
        Ok(CorrelationTrace {
            tau,
            g2,
            stderr,
            counts: counts.clone(),
            bin_width: counts.and(bin_width),
        })
    }
}

/// A uniform grid of `n` points on [0, t_max].
pub fn uniform_grid(t_max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| t_max * i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let tr = CorrelationTrace::with_errors(
            vec![0.0, 0.1, 0.2],
            vec![0.54, 0.8, 1.0 / 3.0],
            vec![0.0, 1e-3, 2e-3],
        );
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("tau_us,g2,stderr\n"));
        let back = CorrelationTrace::read_csv(&buf[..]).unwrap();
        assert_eq!(back.tau, tr.tau);
        assert_eq!(back.g2, tr.g2);
        assert_eq!(back.stderr, tr.stderr);
    }

    #[test]
    fn bad_header() {
        let err = CorrelationTrace::read_csv(&b"# c\nfoo,bar\n1,2\n"[..]).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 4, .. }));
    }

    #[test]
    fn contrast_mapping() {
        let tr = CorrelationTrace::deterministic(vec![0.0, 1.0], vec![0.5, 1.0]).with_contrast(0.4);
        assert!((tr.g2[0] - 0.8).abs() < 1e-15);
        assert_eq!(tr.g2[1], 1.0);
    }
}
