//! Bessel function of the first kind, order zero.
//!
//! Cephes-style rational approximation: on [0, 5] a rational polynomial
//! pinned at the first two zeros of J0, beyond 5 the Hankel asymptotic
//! expansion. Peak error is a few ulp over the whole real line, which is
//! far below the quadrature tolerances that consume it.

use std::f64::consts::FRAC_PI_4;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

// First two zeros of J0, squared.
const DR1: f64 = 5.783_185_962_946_785;
const DR2: f64 = 30.471_262_343_662_087;

const RP: [f64; 4] = [
    -4.794_432_209_782_018e9,
    1.956_174_919_465_565_7e12,
    -2.492_483_443_609_677_2e14,
    9.708_622_510_473_064e15,
];
const RQ: [f64; 8] = [
    4.995_631_471_526_51e2,
    1.737_854_016_763_747e5,
    4.844_096_583_399_621e7,
    1.118_555_370_453_568_3e10,
    2.112_775_201_154_892e12,
    3.105_182_298_574_225_6e14,
    3.181_219_559_432_049_6e16,
    1.710_862_940_810_431_5e18,
];
const PP: [f64; 7] = [
    7.969_367_292_973_471e-4,
    8.283_523_921_074_408e-2,
    1.239_533_716_464_143,
    5.447_250_030_587_687,
    8.747_165_001_998_17,
    5.303_240_382_353_949,
    1.0,
];
const PQ: [f64; 7] = [
    9.244_088_105_588_637e-4,
    8.562_884_743_544_745e-2,
    1.253_527_439_010_589_5,
    5.470_977_403_304_171,
    8.761_908_832_370_695,
    5.306_052_882_353_947,
    1.0,
];
const QP: [f64; 8] = [
    -1.136_638_388_984_691_6e-2,
    -1.282_527_186_705_093_1,
    -1.955_395_442_577_359_7e1,
    -9.320_601_521_237_683e1,
    -1.776_811_679_804_880_6e2,
    -1.470_775_051_549_511_8e2,
    -5.141_053_267_665_993e1,
    -6.050_143_506_007_285,
];
const QQ: [f64; 7] = [
    6.431_782_561_181_78e1,
    8.564_300_259_769_806e2,
    3.882_401_836_054_016_3e3,
    7.240_467_741_956_525e3,
    5.930_727_011_873_169e3,
    2.062_093_316_603_278_3e3,
    2.420_057_402_402_914e2,
];

fn poly(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().fold(0.0, |acc, &c| acc * x + c)
}

/// `poly` with an implicit leading coefficient of 1.
fn poly1(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().fold(1.0, |acc, &c| acc * x + c)
}

pub fn j0(x: f64) -> f64 {
    let x = x.abs();
    if x <= 5.0 {
        let z = x * x;
        if x < 1e-5 {
            return 1.0 - z / 4.0;
        }
        let p = (z - DR1) * (z - DR2);
        return p * poly(z, &RP) / poly1(z, &RQ);
    }
    let w = 5.0 / x;
    let q = 25.0 / (x * x);
    let p = poly(q, &PP) / poly(q, &PQ);
    let r = poly(q, &QP) / poly1(q, &QQ);
    let xn = x - FRAC_PI_4;
    (p * xn.cos() - w * r * xn.sin()) * SQRT_2_OVER_PI / x.sqrt()
}
