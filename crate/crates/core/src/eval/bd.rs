//! Bjontegaard delta rate between two rate-quality curves.
//!
//! Each curve is fitted with a least-squares cubic of log10(rate) as a
//! function of quality (centered for conditioning); the fitted polynomials are
//! integrated in closed form over the overlapping quality interval and the
//! averaged log-rate difference is mapped back to a percentage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct RdPoint {
    /// Rate in bits per dimension; must be > 0.
    pub rate: f64,
    /// Quality in dB (higher is better).
    pub quality: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RdCurve {
    points: Vec<RdPoint>,
    /// Run hashes or file names the points came from.
    pub provenance: Vec<String>,
}

impl RdCurve {
    /// Sorts by rate and validates positivity/finiteness.
    pub fn new(mut points: Vec<RdPoint>, provenance: Vec<String>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("a curve needs at least one point"));
        }
        for p in &points {
            if !(p.rate > 0.0) || !p.rate.is_finite() || !p.quality.is_finite() {
                return Err(Error::invalid(format!(
                    "invalid rd point (rate {}, quality {})",
                    p.rate, p.quality
                )));
            }
        }
        points.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        Ok(RdCurve { points, provenance })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn scale_rates(&self, factor: f64) -> Result<RdCurve> {
        RdCurve::new(
            self.points
                .iter()
                .map(|p| RdPoint {
                    rate: p.rate * factor,
                    quality: p.quality,
                })
                .collect(),
            self.provenance.clone(),
        )
    }
}

/// Cubic fit in centered quality coordinates: y ~ c0 + c1 t + c2 t^2 + c3 t^3
/// with t = quality - center and y = log10(rate).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PolyFit {
    pub center: f64,
    pub coeffs: [f64; 4],
    pub rms_residual: f64,
}

impl PolyFit {
    pub fn eval(&self, quality: f64) -> f64 {
        let t = quality - self.center;
        self.coeffs[0] + t * (self.coeffs[1] + t * (self.coeffs[2] + t * self.coeffs[3]))
    }

    /// Closed-form definite integral over [lo, hi] in quality units.
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |q: f64| {
            let t = q - self.center;
            t * (self.coeffs[0]
                + t * (self.coeffs[1] / 2.0 + t * (self.coeffs[2] / 3.0 + t * self.coeffs[3] / 4.0)))
        };
        anti(hi) - anti(lo)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BdDiagnostics {
    pub anchor_fit: PolyFit,
    pub test_fit: PolyFit,
    pub anchor_monotone_projected: bool,
    pub test_monotone_projected: bool,
    pub fit_kind: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BdResult {
    /// Negative means the test curve spends less rate at equal quality.
    pub bd_rate_percent: f64,
    /// Overlapping quality interval the integral ran over, in dB.
    pub overlap_db: (f64, f64),
    pub diagnostics: BdDiagnostics,
}

/// Pool-adjacent-violators projection to a non-decreasing quality sequence.
/// Returns the projected values and whether anything changed.
fn monotone_projection(values: &[f64]) -> (Vec<f64>, bool) {
    #[derive(Clone, Copy)]
    struct Block {
        sum: f64,
        count: usize,
    }
    let mut blocks: Vec<Block> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push(Block { sum: v, count: 1 });
        while blocks.len() >= 2 {
            let last = blocks[blocks.len() - 1];
            let prev = blocks[blocks.len() - 2];
            if prev.sum / prev.count as f64 > last.sum / last.count as f64 {
                blocks.pop();
                let top = blocks.last_mut().expect("non-empty");
                top.sum += last.sum;
                top.count += last.count;
            } else {
                break;
            }
        }
    }
    let mut projected = Vec::with_capacity(values.len());
    for b in &blocks {
        let mean = b.sum / b.count as f64;
        projected.extend(std::iter::repeat(mean).take(b.count));
    }
    let changed = projected
        .iter()
        .zip(values)
        .any(|(a, b)| (a - b).abs() > 0.0);
    (projected, changed)
}

fn fit_curve(curve: &RdCurve) -> Result<(PolyFit, bool, Vec<f64>)> {
    let n = curve.points.len();
    let raw_q: Vec<f64> = curve.points.iter().map(|p| p.quality).collect();
    let (quality, projected) = monotone_projection(&raw_q);
    if projected {
        log::warn!("rd curve is not monotone in quality; applying monotone projection");
    }
    let y: Vec<f64> = curve.points.iter().map(|p| p.rate.log10()).collect();
    let center = quality.iter().sum::<f64>() / n as f64;
    let t: Vec<f64> = quality.iter().map(|q| q - center).collect();

    // Normal equations for the cubic least-squares fit.
    let mut ata = [[0.0f64; 4]; 4];
    let mut aty = [0.0f64; 4];
    for k in 0..n {
        let mut powers = [1.0f64; 4];
        for i in 1..4 {
            powers[i] = powers[i - 1] * t[k];
        }
        for i in 0..4 {
            aty[i] += powers[i] * y[k];
            for j in 0..4 {
                ata[i][j] += powers[i] * powers[j];
            }
        }
    }
    let coeffs = solve4(ata, aty)?;
    let fit = PolyFit {
        center,
        coeffs,
        rms_residual: {
            let mut ss = 0.0;
            for k in 0..n {
                let pred = coeffs[0]
                    + t[k] * (coeffs[1] + t[k] * (coeffs[2] + t[k] * coeffs[3]));
                ss += (pred - y[k]) * (pred - y[k]);
            }
            (ss / n as f64).sqrt()
        },
    };
    Ok((fit, projected, quality))
}

/// Gaussian elimination with partial pivoting on a 4x4 system.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Result<[f64; 4]> {
    for col in 0..4 {
        let mut pivot = col;
        for row in col + 1..4 {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::invalid(
                "degenerate rd curve: cubic fit is singular (duplicate qualities?)",
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 4];
    for col in (0..4).rev() {
        let mut s = b[col];
        for k in col + 1..4 {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

/// BD-Rate of `test` against `anchor`, in percent.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<BdResult> {
    if anchor.points.len() < 4 || test.points.len() < 4 {
        return Err(Error::invalid(format!(
            "bd-rate needs >= 4 points per curve, got {} and {}",
            anchor.points.len(),
            test.points.len()
        )));
    }
    let (anchor_fit, anchor_proj, anchor_q) = fit_curve(anchor)?;
    let (test_fit, test_proj, test_q) = fit_curve(test)?;

    let lo = anchor_q
        .first()
        .copied()
        .expect("validated")
        .max(test_q.first().copied().expect("validated"));
    let hi = anchor_q
        .last()
        .copied()
        .expect("validated")
        .min(test_q.last().copied().expect("validated"));
    if !(hi > lo) {
        return Err(Error::NoOverlap(format!(
            "quality ranges [{:.4}, {:.4}] and [{:.4}, {:.4}] do not overlap",
            anchor_q.first().unwrap(),
            anchor_q.last().unwrap(),
            test_q.first().unwrap(),
            test_q.last().unwrap()
        )));
    }

    let avg_diff = (test_fit.integral(lo, hi) - anchor_fit.integral(lo, hi)) / (hi - lo);
    let bd_rate_percent = (10f64.powf(avg_diff) - 1.0) * 100.0;
    Ok(BdResult {
        bd_rate_percent,
        overlap_db: (lo, hi),
        diagnostics: BdDiagnostics {
            anchor_fit,
            test_fit,
            anchor_monotone_projected: anchor_proj,
            test_monotone_projected: test_proj,
            fit_kind: "least-squares-cubic".to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn four_point_curve() -> RdCurve {
        RdCurve::new(
            vec![
                RdPoint { rate: 0.25, quality: 30.0 },
                RdPoint { rate: 0.5, quality: 33.0 },
                RdPoint { rate: 1.0, quality: 36.0 },
                RdPoint { rate: 2.0, quality: 39.0 },
            ],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn identical_curves_give_exact_zero() {
        let c = four_point_curve();
        let r = bd_rate(&c, &c).unwrap();
        assert_eq!(r.bd_rate_percent, 0.0);
    }

    #[test]
    fn constant_rate_scaling_is_exact() {
        let anchor = four_point_curve();
        let test = anchor.scale_rates(1.10).unwrap();
        let r = bd_rate(&anchor, &test).unwrap();
        assert_abs_diff_eq!(r.bd_rate_percent, 10.0, epsilon = 1e-9);

        let test = anchor.scale_rates(0.97).unwrap();
        let r = bd_rate(&anchor, &test).unwrap();
        assert_abs_diff_eq!(r.bd_rate_percent, -3.0, epsilon = 1e-6);
    }

    /// Simpson-rule oracle over the fitted polynomials.
    fn bd_by_quadrature(r: &BdResult) -> f64 {
        let (lo, hi) = r.overlap_db;
        let n = 20_000usize;
        let h = (hi - lo) / n as f64;
        let f = |q: f64| r.diagnostics.test_fit.eval(q) - r.diagnostics.anchor_fit.eval(q);
        let mut s = f(lo) + f(hi);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(lo + k as f64 * h);
        }
        let integral = s * h / 3.0;
        (10f64.powf(integral / (hi - lo)) - 1.0) * 100.0
    }

    #[test]
    fn closed_form_integral_matches_quadrature() {
        let anchor = four_point_curve();
        let test = RdCurve::new(
            vec![
                RdPoint { rate: 0.23, quality: 30.2 },
                RdPoint { rate: 0.46, quality: 33.1 },
                RdPoint { rate: 0.95, quality: 36.3 },
                RdPoint { rate: 1.9, quality: 38.8 },
            ],
            vec![],
        )
        .unwrap();
        let r = bd_rate(&anchor, &test).unwrap();
        let oracle = bd_by_quadrature(&r);
        assert_abs_diff_eq!(r.bd_rate_percent, oracle, epsilon = 1e-9);
    }

    #[test]
    fn antisymmetry_within_fit_tolerance() {
        let anchor = four_point_curve();
        let test = anchor.scale_rates(0.9).unwrap();
        let fwd = bd_rate(&anchor, &test).unwrap().bd_rate_percent / 100.0;
        let rev = bd_rate(&test, &anchor).unwrap().bd_rate_percent / 100.0;
        assert_abs_diff_eq!(fwd, -rev / (1.0 + rev), epsilon = 1e-9);
    }

    #[test]
    fn too_few_points_rejected() {
        let c = RdCurve::new(
            vec![
                RdPoint { rate: 0.5, quality: 30.0 },
                RdPoint { rate: 1.0, quality: 33.0 },
                RdPoint { rate: 2.0, quality: 36.0 },
            ],
            vec![],
        )
        .unwrap();
        assert!(matches!(bd_rate(&c, &c), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn disjoint_quality_ranges_rejected() {
        let a = four_point_curve();
        let b = RdCurve::new(
            vec![
                RdPoint { rate: 0.25, quality: 50.0 },
                RdPoint { rate: 0.5, quality: 53.0 },
                RdPoint { rate: 1.0, quality: 56.0 },
                RdPoint { rate: 2.0, quality: 59.0 },
            ],
            vec![],
        )
        .unwrap();
        assert!(matches!(bd_rate(&a, &b), Err(Error::NoOverlap(_))));
    }

    #[test]
    fn non_monotone_curve_is_projected_with_flag() {
        let a = four_point_curve();
        let wobbly = RdCurve::new(
            vec![
                RdPoint { rate: 0.25, quality: 30.0 },
                RdPoint { rate: 0.5, quality: 34.0 },
                RdPoint { rate: 1.0, quality: 33.0 },
                RdPoint { rate: 2.0, quality: 39.0 },
            ],
            vec![],
        )
        .unwrap();
        let r = bd_rate(&a, &wobbly).unwrap();
        assert!(r.diagnostics.test_monotone_projected);
        assert!(!r.diagnostics.anchor_monotone_projected);
        assert!(r.bd_rate_percent.is_finite());
    }

    #[test]
    fn curve_points_are_sorted_by_rate() {
        let c = RdCurve::new(
            vec![
                RdPoint { rate: 2.0, quality: 39.0 },
                RdPoint { rate: 0.25, quality: 30.0 },
            ],
            vec![],
        )
        .unwrap();
        assert!(c.points()[0].rate < c.points()[1].rate);
    }

    #[test]
    fn nonpositive_rate_rejected() {
        assert!(RdCurve::new(vec![RdPoint { rate: 0.0, quality: 30.0 }], vec![]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 64, .. ProptestConfig::default() })]

        /// The x c rate-scaling family must return (c - 1) * 100 exactly up to
        /// integration roundoff, regardless of the base curve.
        #[test]
        fn scaling_family_is_exact(
            c in 0.5f64..2.0,
            rates in prop::collection::vec(0.05f64..4.0, 4..7),
        ) {
            let mut sorted = rates.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
            prop_assume!(sorted.len() >= 4);
            let points: Vec<RdPoint> = sorted
                .iter()
                .enumerate()
                .map(|(i, &r)| RdPoint { rate: r, quality: 28.0 + 3.0 * i as f64 })
                .collect();
            let anchor = RdCurve::new(points, vec![]).unwrap();
            let test = anchor.scale_rates(c).unwrap();
            let r = bd_rate(&anchor, &test).unwrap();
            prop_assert!((r.bd_rate_percent - (c - 1.0) * 100.0).abs() <= 1e-9 * (1.0 + c * 100.0));
        }
    }
}
