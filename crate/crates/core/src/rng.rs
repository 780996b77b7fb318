//! Deterministic, seedable random number generation.
//!
//! Every scenario (and every auxiliary purpose such as parameter
//! initialization or minibatch sampling) owns its own [`RngStream`],
//! identified by `(seed, stream_id)`. Streams are backed by ChaCha12, a
//! counter-based generator whose output is a pure function of its key and
//! stream id, so path generation can be sharded across workers in any order
//! without changing a single bit of the result.
//!
//! Normal draws use the inverse CDF (Wichura's AS 241 rational
//! approximation) rather than rejection or Box-Muller, so a draw consumes
//! exactly one uniform and never branches on the sample value.

use rand_chacha::ChaCha12Rng;
use rand_core::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Stream id namespaces so scenario streams never collide with the
/// auxiliary ones used by training.
pub mod purpose {
    /// Offset for network-initialization streams.
    pub const INIT: u64 = 1 << 48;
    /// Offset for minibatch-sampling streams.
    pub const MINIBATCH: u64 = 2 << 48;
    /// Offset for test/evaluation batches (scenario id = offset + path).
    pub const EVAL: u64 = 3 << 48;
}

/// One independent random stream, identified by `(seed, stream_id)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    #[serde(skip, default = "dummy_rng")]
    rng: ChaCha12Rng,
}

fn dummy_rng() -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(0)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id.into());
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw on the open interval (0, 1).
    ///
    /// 53-bit mantissa, shifted off zero so inverse-CDF transforms never see
    /// an endpoint.
    pub fn uniform(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 11; // 53 random bits
        (bits as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal draw via the inverse CDF.
    pub fn standard_normal(&mut self) -> f64 {
        let u = self.uniform();
        inverse_normal_cdf(u)
    }

    /// Poisson draw with the given mean.
    ///
    /// Knuth's product method below `mean = 30`, Hörmann's transformed
    /// rejection (PTRS) above. Both consume uniforms from this stream only.
    pub fn poisson(&mut self, mean: f64) -> Result<u64> {
        if !mean.is_finite() || mean < 0.0 {
            return Err(Error::Domain(format!("poisson mean {mean} must be >= 0")));
        }
        if mean == 0.0 {
            return Ok(0);
        }
        if mean < 30.0 {
            let limit = (-mean).exp();
            let mut k = 0u64;
            let mut prod = self.uniform();
            while prod > limit {
                k += 1;
                prod *= self.uniform();
            }
            Ok(k)
        } else {
            Ok(self.poisson_ptrs(mean))
        }
    }

    /// PTRS transformed rejection (Hörmann 1993), valid for mean >= 10.
    fn poisson_ptrs(&mut self, mu: f64) -> u64 {
        let smu = mu.sqrt();
        let log_mu = mu.ln();
        let b = 0.931 + 2.53 * smu;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);

        loop {
            let u = self.uniform() - 0.5;
            let v = self.uniform();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + mu + 0.43).floor();
            if us >= 0.07 && v <= v_r {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln()
                <= k * log_mu - mu - ln_factorial(k)
            {
                return k as u64;
            }
        }
    }

    /// Gamma draw with the given shape and scale (Marsaglia-Tsang, with the
    /// `U^(1/shape)` boost for shape < 1).
    pub fn gamma(&mut self, shape: f64, scale: f64) -> Result<f64> {
        if !(shape > 0.0) || !(scale > 0.0) {
            return Err(Error::Domain(format!(
                "gamma shape {shape} and scale {scale} must be > 0"
            )));
        }
        if shape < 1.0 {
            let g = self.gamma_shape_ge1(shape + 1.0);
            let u = self.uniform();
            return Ok(g * u.powf(1.0 / shape) * scale);
        }
        Ok(self.gamma_shape_ge1(shape) * scale)
    }

    fn gamma_shape_ge1(&mut self, shape: f64) -> f64 {
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (3.0 * d.sqrt());
        loop {
            let x = self.standard_normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.uniform();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return d * v;
            }
            if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Noncentral chi-squared draw, implemented as the exact
    /// Poisson(noncentrality/2) mixture of Gamma(dof/2 + N, 2) variables.
    ///
    /// Valid for any dof > 0, including dof < 1 (the Feller-violating CIR
    /// regime needs it).
    pub fn noncentral_chisq(&mut self, dof: f64, noncentrality: f64) -> Result<f64> {
        if !(dof > 0.0) || !dof.is_finite() {
            return Err(Error::Domain(format!("noncentral chisq dof {dof} must be > 0")));
        }
        if !(noncentrality >= 0.0) || !noncentrality.is_finite() {
            return Err(Error::Domain(format!(
                "noncentrality {noncentrality} must be >= 0"
            )));
        }
        let n = self.poisson(noncentrality / 2.0)?;
        self.gamma(dof / 2.0 + n as f64, 2.0)
    }

    /// Uniform integer in [0, bound), by rejection on the top range.
    pub fn uniform_index(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let r = self.rng.next_u64();
            if r < zone {
                return (r % bound) as usize;
            }
        }
    }
}

/// ln(k!) for real k >= 0 (Stirling series above 9, table below).
fn ln_factorial(k: f64) -> f64 {
    const TABLE: [f64; 10] = [
        0.0,
        0.0,
        0.6931471805599453,
        1.791759469228055,
        3.1780538303479458,
        4.787491742782046,
        6.579251212010101,
        8.525161361065415,
        10.60460290274525,
        12.801827480081469,
    ];
    if k < 10.0 {
        return TABLE[k as usize];
    }
    let n = k + 1.0;
    let n2 = n * n;
    (n - 0.5) * n.ln() - n + 0.5 * (2.0 * std::f64::consts::PI).ln()
        + 1.0 / (12.0 * n)
        - 1.0 / (360.0 * n * n2)
        + 1.0 / (1260.0 * n2 * n2 * n)
}

/// Inverse standard normal CDF, Wichura's algorithm AS 241 (PPND16).
///
/// Relative accuracy about 1e-16 over (0, 1); pure rational arithmetic plus
/// one sqrt/log in the tails, so results are identical wherever IEEE-754
/// doubles are.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(
            r,
            &[
                3.387_132_872_796_366_608,
                1.331_416_678_917_843_774_5e2,
                1.971_590_950_306_551_442_7e3,
                1.373_169_376_550_946_112_5e4,
                4.592_195_393_154_987_145_7e4,
                6.726_577_092_700_870_085_3e4,
                3.343_057_558_358_812_810_5e4,
                2.509_080_928_730_122_672_7e3,
            ],
        ) / poly(
            r,
            &[
                1.0,
                4.231_333_070_160_091_125_2e1,
                6.871_870_074_920_579_083e2,
                5.394_196_021_424_751_107_7e3,
                2.121_379_430_158_659_586_7e4,
                3.930_789_580_009_271_061e4,
                2.872_908_573_572_194_267_4e4,
                5.226_495_278_852_545_561e3,
            ],
        );
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(
            r,
            &[
                1.423_437_110_749_683_577_3,
                4.630_337_846_156_545_295_9,
                5.769_497_221_460_691_405_5,
                3.647_848_324_763_204_605,
                1.270_458_252_452_368_382_6,
                2.417_807_251_774_506_117_7e-1,
                2.272_384_498_926_918_458_3e-2,
                7.745_450_142_783_414_076_4e-4,
            ],
        ) / poly(
            r,
            &[
                1.0,
                2.053_191_626_637_758_821_9,
                1.676_384_830_183_803_849_4,
                6.897_673_349_851_000_045_5e-1,
                1.481_039_764_274_800_745_9e-1,
                1.519_866_656_361_645_719_7e-2,
                5.475_938_084_995_344_946e-4,
                1.050_750_071_644_416_843_2e-9,
            ],
        )
    } else {
        let r = r - 5.0;
        poly(
            r,
            &[
                6.657_904_643_501_103_777_2,
                5.463_784_911_164_114_369_9,
                1.784_826_539_917_291_335_8,
                2.965_605_718_285_048_912_3e-1,
                2.653_218_952_657_612_309_3e-2,
                1.242_660_947_388_078_438_6e-3,
                2.711_555_568_743_487_578_2e-5,
                2.010_334_399_292_288_132_7e-7,
            ],
        ) / poly(
            r,
            &[
                1.0,
                5.998_322_065_558_879_376_9e-1,
                1.369_298_809_227_358_053_1e-1,
                1.487_536_129_085_061_485_3e-2,
                7.868_691_311_456_132_591e-4,
                1.846_318_317_510_054_681_8e-5,
                1.421_511_758_316_445_888_7e-7,
                2.044_263_103_389_939_785_6e-15,
            ],
        )
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

fn poly(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_is_identical() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        for _ in 0..100 {
            assert_eq!(a.standard_normal(), b.standard_normal());
        }
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngStream::new(42, 0);
        let mut b = RngStream::new(42, 1);
        let same = (0..32).filter(|_| a.uniform() == b.uniform()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn inverse_cdf_known_quantiles() {
        assert!((inverse_normal_cdf(0.5)).abs() < 1e-15);
        // one point per branch: central, intermediate, far tail
        assert!((inverse_normal_cdf(0.6) - 0.2533471031357997).abs() < 1e-12);
        assert!((inverse_normal_cdf(0.8413447460685429) - 1.0).abs() < 1e-12);
        assert!((inverse_normal_cdf(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((inverse_normal_cdf(0.025) + 1.959963984540054).abs() < 1e-12);
        assert!((inverse_normal_cdf(0.999_999) - 4.753424308822899).abs() < 1e-9);
    }

    #[test]
    fn normal_moments() {
        let mut s = RngStream::new(1, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let x = s.standard_normal();
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn poisson_moments_across_regimes() {
        for &mean in &[0.7, 5.0, 14.6, 50.0, 500.0] {
            let mut s = RngStream::new(3, mean as u64);
            let n = 200_000;
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for _ in 0..n {
                let k = s.poisson(mean).unwrap() as f64;
                sum += k;
                sum2 += k * k;
            }
            let m = sum / n as f64;
            let v = sum2 / n as f64 - m * m;
            // mean and variance are both `mean`; allow 5 sigma MC error
            let tol = 5.0 * (mean / n as f64).sqrt();
            assert!((m - mean).abs() < tol, "mean {m} vs {mean}");
            assert!((v - mean).abs() < 6.0 * tol * (2.0 * mean).sqrt().max(1.0), "var {v} vs {mean}");
        }
    }

    #[test]
    fn gamma_moments_small_shape() {
        // shape 0.02 is the CIR regime used by the baseline market params
        let shape = 0.02;
        let mut s = RngStream::new(9, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += s.gamma(shape, 2.0).unwrap();
        }
        let m = sum / n as f64;
        let expect = shape * 2.0;
        let sd = (shape * 4.0 / n as f64).sqrt();
        assert!((m - expect).abs() < 5.0 * sd, "mean {m} vs {expect}");
    }

    #[test]
    fn noncentral_chisq_central_case() {
        let dof = 3.0;
        let mut s = RngStream::new(5, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += s.noncentral_chisq(dof, 0.0).unwrap();
        }
        let m = sum / n as f64;
        assert!((m - dof).abs() / dof < 0.01, "mean {m}");
    }

    #[test]
    fn noncentral_chisq_first_moment_and_support() {
        let (dof, nc) = (0.04, 14.6);
        let mut s = RngStream::new(6, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        for _ in 0..n {
            let x = s.noncentral_chisq(dof, nc).unwrap();
            sum += x;
            min = min.min(x);
        }
        let m = sum / n as f64;
        let expect = dof + nc;
        assert!((m - expect).abs() / expect < 0.01, "mean {m} vs {expect}");
        assert!(min >= 0.0);
        // 5 sigma moment check: var = 2(dof + 2 nc)
        let sd_mean = (2.0 * (dof + 2.0 * nc) / n as f64).sqrt();
        assert!((m - expect).abs() < 5.0 * sd_mean);
    }

    #[test]
    fn invalid_parameters_error() {
        let mut s = RngStream::new(0, 0);
        assert!(s.noncentral_chisq(-1.0, 0.0).is_err());
        assert!(s.noncentral_chisq(1.0, -0.5).is_err());
        assert!(s.gamma(0.0, 1.0).is_err());
        assert!(s.poisson(f64::NAN).is_err());
    }
}
