//! Error-function family.
//!
//! Rational Chebyshev approximations of W. J. Cody (Math. Comp. 23, 1969), the
//! same coefficient sets used by SPECFUN `CALERF`. Maximum relative error is
//! below 1.2e-16 in each of the three intervals `|x| ≤ 0.46875`,
//! `0.46875 < |x| ≤ 4` and `|x| > 4`. The `exp(-x²)` factor is split as
//! `exp(-x̃²)·exp(-(x - x̃)(x + x̃))` with `x̃` rounded to 1/16 so it carries
//! no cancellation error.

use std::f64::consts::PI;

const SMALL: f64 = 0.468_75;
/// erfc underflows to zero beyond this point.
const ERFC_ZERO: f64 = 26.543;
/// erfcx overflows below this point.
const ERFCX_NEG_LIMIT: f64 = -26.628;

const A: [f64; 5] = [
    3.161_123_743_870_565_6,
    113.864_154_151_050_16,
    377.485_237_685_302_02,
    3_209.377_589_138_469_5,
    0.185_777_706_184_603_15,
];
const B: [f64; 4] = [
    23.601_290_952_344_122,
    244.024_637_934_444_17,
    1_282.616_526_077_372_3,
    2_844.236_833_439_170_6,
];
const C: [f64; 9] = [
    0.564_188_496_988_670_09,
    8.883_149_794_388_376,
    66.119_190_637_141_63,
    298.635_138_197_400_13,
    881.952_221_241_769_1,
    1_712.047_612_634_070_6,
    2_051.078_377_826_071_5,
    1_230.339_354_797_997_2,
    2.153_115_354_744_038_5e-8,
];
const D: [f64; 8] = [
    15.744_926_110_709_835,
    117.693_950_891_312_5,
    537.181_101_862_009_9,
    1_621.389_574_566_690_2,
    3_290.799_235_733_459_6,
    4_362.619_090_143_247,
    3_439.367_674_143_721_6,
    1_230.339_354_803_749_4,
];
const P: [f64; 6] = [
    0.305_326_634_961_232_34,
    0.360_344_899_949_804_44,
    0.125_781_726_111_229_25,
    0.016_083_785_148_742_277,
    6.587_491_615_298_378e-4,
    0.016_315_387_137_302_098,
];
const Q: [f64; 5] = [
    2.568_520_192_289_822,
    1.872_952_849_923_460_4,
    0.527_905_102_951_428_4,
    0.060_518_341_312_441_32,
    0.002_335_204_976_268_691_8,
];

/// erf(x)/x on |x| ≤ 0.46875, argument z = x².
#[inline]
fn small_ratio(z: f64) -> f64 {
    let num = (((A[4] * z + A[0]) * z + A[1]) * z + A[2]) * z + A[3];
    let den = (((z + B[0]) * z + B[1]) * z + B[2]) * z + B[3];
    num / den
}

/// erfcx(y) for 0.46875 < y ≤ 4.
#[inline]
fn middle_erfcx(y: f64) -> f64 {
    let mut num = C[8] * y;
    let mut den = y;
    for i in 0..7 {
        num = (num + C[i]) * y;
        den = (den + D[i]) * y;
    }
    (num + C[7]) / (den + D[7])
}

/// erfcx(y) for y > 4.
#[inline]
fn tail_erfcx(y: f64) -> f64 {
    let z = 1.0 / (y * y);
    let mut num = P[5] * z;
    let mut den = z;
    for i in 0..4 {
        num = (num + P[i]) * z;
        den = (den + Q[i]) * z;
    }
    let r = z * (num + P[4]) / (den + Q[4]);
    (1.0 / PI.sqrt() - r) / y
}

#[inline]
fn erfcx_positive(y: f64) -> f64 {
    if y <= 4.0 {
        middle_erfcx(y)
    } else {
        tail_erfcx(y)
    }
}

/// `exp(-y²)` without the rounding error of squaring `y` first.
#[inline]
fn exp_neg_sq(y: f64) -> f64 {
    let yt = (y * 16.0).trunc() / 16.0;
    (-yt * yt).exp() * (-(y - yt) * (y + yt)).exp()
}

#[inline]
fn exp_pos_sq(y: f64) -> f64 {
    let yt = (y * 16.0).trunc() / 16.0;
    (yt * yt).exp() * ((y - yt) * (y + yt)).exp()
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let y = x.abs();
    if y <= SMALL {
        return x * small_ratio(y * y);
    }
    let tail = if y >= ERFC_ZERO { 0.0 } else { erfcx_positive(y) * exp_neg_sq(y) };
    if x < 0.0 {
        tail - 1.0
    } else {
        1.0 - tail
    }
}

/// Complementary error function `1 − erf(x)`.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let y = x.abs();
    if y <= SMALL {
        return 1.0 - x * small_ratio(y * y);
    }
    let tail = if y >= ERFC_ZERO { 0.0 } else { erfcx_positive(y) * exp_neg_sq(y) };
    if x < 0.0 {
        2.0 - tail
    } else {
        tail
    }
}

/// Scaled complementary error function `exp(x²)·erfc(x)`.
///
/// Finite for every `x > −26.628`; returns `f64::INFINITY` below that.
pub fn erfcx(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let y = x.abs();
    if y <= SMALL {
        let z = y * y;
        return z.exp() * (1.0 - x * small_ratio(z));
    }
    if x < ERFCX_NEG_LIMIT {
        return f64::INFINITY;
    }
    let r = erfcx_positive(y);
    if x < 0.0 {
        2.0 * exp_pos_sq(y) - r
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values computed with 40-digit arithmetic (mpmath).
    const ERFC_TABLE: [(f64, f64); 10] = [
        (0.5, 0.479_500_122_186_953_462_317_253_3),
        (1.0, 0.157_299_207_050_285_130_658_779_4),
        (2.0, 0.004_677_734_981_047_265_837_930_744),
        (3.0, 2.209_049_699_858_544_137_277_613e-5),
        (5.0, 1.537_459_794_428_034_850_188_343e-12),
        (-1.0, 1.842_700_792_949_714_869_341_221),
        (-3.0, 1.999_977_909_503_001_414_558_627),
        (6.0, 2.151_973_671_249_891_311_659_335e-17),
        (10.0, 2.088_487_583_762_544_757_000_786e-45),
        (27.0, 5.237_048_923_789_255_685_016_068e-319),
    ];

    #[test]
    fn erfc_reference_table() {
        for (x, want) in ERFC_TABLE {
            let got = erfc(x);
            if x.abs() <= 6.0 {
                assert!((got - want).abs() <= 1e-14, "erfc({x}) = {got}, want {want}");
            }
            if x >= 26.543 {
                // below the underflow cut-off
                assert_eq!(got, 0.0);
            } else if x > 0.0 {
                assert!(((got - want) / want).abs() <= 1e-12, "erfc({x}) = {got}, want {want}");
            }
        }
    }

    #[test]
    fn erfc_special_points() {
        assert_eq!(erfc(0.0), 1.0);
        assert!((erfc(1.0) - 0.157_299_207).abs() < 1e-9);
        assert_eq!(erfc(-40.0), 2.0);
        assert!(erfc(f64::NAN).is_nan());
        assert_eq!(erf(0.0), 0.0);
    }

    #[test]
    fn erfcx_matches_scaled_erfc_where_representable() {
        for i in -200..=200 {
            let x = i as f64 * 0.05;
            let direct = (x * x).exp() * erfc(x);
            let scaled = erfcx(x);
            assert!(((direct - scaled) / scaled).abs() < 1e-13, "x={x}");
        }
    }

    #[test]
    fn erfcx_large_argument_asymptotics() {
        // erfcx(x) ≈ 1/(x√π)·(1 − 1/(2x²) + 3/(4x⁴))
        for x in [50.0f64, 200.0, 1e4] {
            let asym = 1.0 / (x * PI.sqrt()) * (1.0 - 0.5 / (x * x) + 0.75 / x.powi(4));
            assert!(((erfcx(x) - asym) / asym).abs() < 1e-9);
        }
        assert!(erfcx(1e300) > 0.0);
        assert_eq!(erfcx(-30.0), f64::INFINITY);
    }

    #[test]
    fn erfc_symmetry_and_monotonicity() {
        let mut prev = erfc(-10.0);
        for i in 1..=4000 {
            let x = -10.0 + i as f64 * 0.005;
            let v = erfc(x);
            assert!(v <= prev, "not monotone at {x}");
            assert!((v + erfc(-x) - 2.0).abs() < 1e-13, "symmetry at {x}");
            prev = v;
        }
    }
}
