//! Independent Rényi-divergence oracle for the subsampled Gaussian
//! mechanism, shared by the unit tests and the acceptance harness.
//!
//! The first 27 grid rows form the full q × σ × α product
//! {0.001, 0.01, 0.1} × {0.8, 1, 2} × {2, 8, 32}.

/// `ln A_α` by composite Simpson integration of
/// `μ₀(z)·((1−q) + q·exp((2z−1)/(2σ²)))^α` in log space, `μ₀ = N(0, σ²)`.
pub fn quadrature_log_a(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let log_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let (l1q, lq) = ((-q).ln_1p(), q.ln());
    let f = |z: f64| {
        let u = lq + (2.0 * z - 1.0) / (2.0 * s2);
        let (hi, lo) = if u > l1q { (u, l1q) } else { (l1q, u) };
        let mix = hi + (lo - hi).exp().ln_1p();
        -z * z / (2.0 * s2) + log_norm + alpha * mix
    };
    let lo = -16.0 * sigma - 1.0;
    let hi = alpha + 16.0 * sigma + 1.0;
    let n = 400_000usize;
    let h = (hi - lo) / n as f64;
    let vals: Vec<f64> = (0..=n).map(|i| f(lo + i as f64 * h)).collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for (i, v) in vals.iter().enumerate() {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * (v - m).exp();
    }
    m + (acc * h / 3.0).ln()
}

pub fn quadrature_rdp(q: f64, sigma: f64, alpha: f64) -> f64 {
    quadrature_log_a(q, sigma, alpha) / (alpha - 1.0)
}

/// Values of the same integral evaluated at 25+ significant digits with an
/// arbitrary-precision adaptive quadrature.
pub const HIGH_PRECISION_GRID: [(f64, f64, f64, f64); 30] = [
    (0.001, 0.8, 2.0, 3.7707260727711085471e-6),
    (0.001, 0.8, 8.0, 0.000017707299049079511146),
    (0.001, 0.8, 32.0, 17.869413905566823516),
    (0.001, 1.0, 2.0, 1.7182803522145153698e-6),
    (0.001, 1.0, 8.0, 6.9879416490941471102e-6),
    (0.001, 1.0, 32.0, 8.8694139056023260027),
    (0.001, 2.0, 2.0, 2.8402537635253047106e-7),
    (0.001, 2.0, 8.0, 1.1382237177147441081e-6),
    (0.001, 2.0, 32.0, 4.5873148985516597903e-6),
    (0.01, 0.8, 2.0, 0.00037700224391936001834),
    (0.01, 0.8, 8.0, 0.98915276906843018612),
    (0.01, 0.8, 32.0, 20.246275937044548092),
    (0.01, 1.0, 2.0, 0.00017181342207454793814),
    (0.01, 1.0, 8.0, 0.00089364390760603189425),
    (0.01, 1.0, 32.0, 11.246275937048068857),
    (0.01, 2.0, 2.0, 0.000028402138324224848533),
    (0.01, 2.0, 8.0, 0.00011575614792991031737),
    (0.01, 2.0, 32.0, 0.00050289464686279097404),
    (0.1, 0.8, 2.0, 0.037013791056266179653),
    (0.1, 0.8, 8.0, 3.6186574224443500396),
    (0.1, 0.8, 32.0, 22.623137968522272705),
    (0.1, 1.0, 2.0, 0.017036863236176551662),
    (0.1, 1.0, 8.0, 1.3783614113481265741),
    (0.1, 1.0, 32.0, 13.623137968522595297),
    (0.1, 2.0, 2.0, 0.0028362282662636226261),
    (0.1, 2.0, 8.0, 0.013725430103219919584),
    (0.1, 2.0, 32.0, 1.6272023010194358905),
    (0.01, 1.0, 1.5, 0.00012725374332744983881),
    (0.01, 1.0, 1.75, 0.00014938884720031511328),
    (0.05, 1.3, 2.5, 0.0025790612065503974239),
];
