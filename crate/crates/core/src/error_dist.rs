//! Log-concave error distributions `F_Z` for the transformed outcome.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::math;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Error distribution of `h(Y | x)`.
///
/// The shift predictor reads as a probit, log-odds or log-hazard effect for
/// the three kinds respectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorDistribution {
    #[serde(rename = "gaussian")]
    Gaussian,
    #[serde(rename = "logistic")]
    Logistic,
    #[serde(rename = "minev")]
    MinExtremeValue,
}

impl ErrorDistribution {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "gaussian" => Ok(Self::Gaussian),
            "logistic" => Ok(Self::Logistic),
            "minev" => Ok(Self::MinExtremeValue),
            other => Err(CoreError::Config(format!(
                "unknown error distribution `{other}` (expected gaussian, logistic or minev)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Logistic => "logistic",
            Self::MinExtremeValue => "minev",
        }
    }

    /// `F_Z(z)`; rejects non-finite input.
    pub fn cdf(&self, z: f64) -> Result<f64> {
        check_finite(z)?;
        Ok(self.cdf_unchecked(z))
    }

    /// `log f_Z(z)`; rejects non-finite input.
    pub fn log_pdf(&self, z: f64) -> Result<f64> {
        check_finite(z)?;
        Ok(self.log_pdf_unchecked(z))
    }

    /// `F_Z^{-1}(p)` for `p` in the open unit interval.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(CoreError::OutOfRange(format!("probability {p} outside (0, 1)")));
        }
        Ok(match self {
            Self::Gaussian => gaussian_quantile(p),
            Self::Logistic => math::ln(p) - math::ln_1p(-p),
            Self::MinExtremeValue => math::ln(-math::ln_1p(-p)),
        })
    }

    #[inline]
    pub fn cdf_unchecked(&self, z: f64) -> f64 {
        match self {
            Self::Gaussian => 0.5 * math::erfc(-z / core::f64::consts::SQRT_2),
            Self::Logistic => math::sigmoid(z),
            Self::MinExtremeValue => -math::exp_m1(-math::exp(z)),
        }
    }

    #[inline]
    pub fn log_pdf_unchecked(&self, z: f64) -> f64 {
        match self {
            Self::Gaussian => -0.5 * z * z - LN_SQRT_2PI,
            Self::Logistic => {
                let a = z.abs();
                -a - 2.0 * math::ln_1p(math::exp(-a))
            }
            Self::MinExtremeValue => z - math::exp(z),
        }
    }

    #[inline]
    pub fn pdf(&self, z: f64) -> f64 {
        math::exp(self.log_pdf_unchecked(z))
    }

    /// `d/dz log f_Z(z)`.
    #[inline]
    pub fn score(&self, z: f64) -> f64 {
        match self {
            Self::Gaussian => -z,
            Self::Logistic => 1.0 - 2.0 * math::sigmoid(z),
            Self::MinExtremeValue => 1.0 - math::exp(z),
        }
    }
}

impl core::str::FromStr for ErrorDistribution {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

fn check_finite(z: f64) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFinite { what: "transformed outcome", row: 0 })
    }
}

/// Acklam's rational approximation followed by one Newton step on `Phi`.
fn gaussian_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;
    let x = if p < P_LOW {
        let q = math::sqrt(-2.0 * math::ln(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = math::sqrt(-2.0 * math::ln_1p(-p));
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let g = ErrorDistribution::Gaussian;
    // upper tail residual via the survival function keeps precision near p = 1
    let resid = if x > 0.0 {
        (1.0 - p) - 0.5 * math::erfc(x / core::f64::consts::SQRT_2)
    } else {
        p - g.cdf_unchecked(x)
    };
    let step = resid / g.pdf(x);
    if x > 0.0 {
        x - step
    } else {
        x + step
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [ErrorDistribution; 3] =
        [ErrorDistribution::Gaussian, ErrorDistribution::Logistic, ErrorDistribution::MinExtremeValue];

    /// Bisection on the CDF, independent of the closed-form quantiles.
    fn bisect_quantile(d: ErrorDistribution, p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if d.cdf_unchecked(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(ErrorDistribution::Logistic.cdf(0.0).unwrap(), 0.5);
        assert!((ErrorDistribution::MinExtremeValue.cdf(0.0).unwrap() - 0.632_120_558_828_557_7).abs() < 1e-15);
        assert_eq!(ErrorDistribution::Gaussian.cdf(0.0).unwrap(), 0.5);
        assert!(ErrorDistribution::Gaussian.cdf(f64::NAN).is_err());
        assert!(ErrorDistribution::Logistic.cdf(f64::INFINITY).is_err());
    }

    #[test]
    fn log_pdf_examples() {
        assert!((ErrorDistribution::Gaussian.log_pdf(0.0).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-15);
        assert!((ErrorDistribution::Logistic.log_pdf(0.0).unwrap() - 0.25_f64.ln()).abs() < 1e-15);
        assert_eq!(ErrorDistribution::MinExtremeValue.log_pdf(0.0).unwrap(), -1.0);
        let far = ErrorDistribution::Logistic.log_pdf(700.0).unwrap();
        assert!(far.is_finite() && (far + 700.0).abs() < 1e-9);
        assert!((ErrorDistribution::Logistic.log_pdf(-700.0).unwrap() - far).abs() < 1e-12);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(ErrorDistribution::Logistic.quantile(0.5).unwrap(), 0.0);
        let p = 1.0 - (-1.0_f64).exp();
        assert!(ErrorDistribution::MinExtremeValue.quantile(p).unwrap().abs() < 1e-15);
        // bisection oracle for Phi^{-1}(0.975), frozen: 1.959963984540054
        let oracle = bisect_quantile(ErrorDistribution::Gaussian, 0.975);
        assert!((oracle - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((ErrorDistribution::Gaussian.quantile(0.975).unwrap() - oracle).abs() < 1e-12);
        for bad in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(ErrorDistribution::Gaussian.quantile(bad).is_err());
        }
    }

    #[test]
    fn round_trips() {
        for d in ALL {
            for k in 0..=120 {
                let z = -6.0 + 0.1 * k as f64;
                let p = d.cdf(z).unwrap();
                // tails where p or 1 - p has lost its digits
                if p.min(1.0 - p) < 1e-9 {
                    continue;
                }
                let back = d.quantile(d.cdf(z).unwrap()).unwrap();
                assert!((back - z).abs() < 1e-8, "{d:?} z={z} back={back}");
            }
            for k in 1..1000 {
                let p = k as f64 / 1000.0;
                assert!((d.cdf(d.quantile(p).unwrap()).unwrap() - p).abs() < 1e-8);
            }
            for &p in &[1e-12, 1e-6, 1.0 - 1e-6] {
                assert!((d.quantile(p).unwrap() - bisect_quantile(d, p)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn log_pdf_is_log_of_cdf_derivative() {
        for d in ALL {
            for k in 0..=40 {
                let z = -5.0 + 0.25 * k as f64;
                let h = 1e-5;
                if d.log_pdf(z).unwrap() < -12.0 {
                    continue;
                }
                let fd = (d.cdf_unchecked(z + h) - d.cdf_unchecked(z - h)) / (2.0 * h);
                assert!((fd.ln() - d.log_pdf(z).unwrap()).abs() < 1e-5, "{d:?} at {z}");
            }
        }
    }

    #[test]
    fn score_matches_finite_difference() {
        for d in ALL {
            for k in 0..=20 {
                let z = -4.0 + 0.4 * k as f64;
                let h = 1e-6;
                let fd = (d.log_pdf_unchecked(z + h) - d.log_pdf_unchecked(z - h)) / (2.0 * h);
                assert!((fd - d.score(z)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn log_concavity() {
        for d in ALL {
            let grid: alloc::vec::Vec<f64> = (0..=200).map(|k| -8.0 + 0.08 * k as f64).collect();
            let lp: alloc::vec::Vec<f64> = grid.iter().map(|&z| d.log_pdf_unchecked(z)).collect();
            let slope: alloc::vec::Vec<f64> = lp.windows(2).map(|w| w[1] - w[0]).collect();
            assert!(slope.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{d:?}");
        }
    }

    #[test]
    fn cdf_is_increasing() {
        for d in ALL {
            let mut prev = 0.0;
            for k in 0..=100 {
                let c = d.cdf(-5.0 + 0.1 * k as f64).unwrap();
                assert!(c <= 1.0);
                assert!(c > prev || c == 1.0);
                prev = c;
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for d in ALL {
            assert_eq!(ErrorDistribution::parse(d.name()).unwrap(), d);
        }
        assert!(ErrorDistribution::parse("cauchy").is_err());
    }
}
