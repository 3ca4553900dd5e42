//! Free-space propagation: exact spherical-wave channel from a uniform linear
//! array, plane-wave gain for the relay-to-user hop, and the decode-and-forward
//! rate.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Boundary `2 D^2 / lambda` between the near-field and far-field regions.
pub fn rayleigh_distance(aperture: f64, wavelength: f64) -> Result<f64> {
    if !(aperture > 0.0 && wavelength > 0.0) {
        return Err(Error::Config(format!(
            "aperture {aperture} and wavelength {wavelength} must be positive"
        )));
    }
    Ok(2.0 * aperture * aperture / wavelength)
}

/// Element positions of an `n`-element ULA on the x-axis, centered at the
/// origin, with the given spacing.
pub fn ula_positions(n: usize, spacing: f64) -> Vec<[f64; 3]> {
    let center = (n as f64 - 1.0) / 2.0;
    (0..n)
        .map(|i| [(i as f64 - center) * spacing, 0.0, 0.0])
        .collect()
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Spherical-wave channel: element `n` is `lambda / (4 pi r_n) * exp(-j 2 pi r_n / lambda)`
/// with `r_n` the exact distance from element `n` to `point`.
pub fn spherical_channel(elements: &[[f64; 3]], wavelength: f64, point: [f64; 3]) -> Result<Vec<Complex64>> {
    elements
        .iter()
        .enumerate()
        .map(|(n, &e)| {
            let r = distance(e, point);
            if r == 0.0 {
                return Err(Error::Singularity(format!("receiver coincides with antenna {n}")));
            }
            let amp = wavelength / (4.0 * PI * r);
            Ok(Complex64::from_polar(amp, -2.0 * PI * r / wavelength))
        })
        .collect()
}

/// Free-space power gain `(lambda / (4 pi r))^2`.
pub fn free_space_gain(wavelength: f64, a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    let r = distance(a, b);
    if r == 0.0 {
        return Err(Error::Singularity("transmitter and receiver coincide".into()));
    }
    let amp = wavelength / (4.0 * PI * r);
    Ok(amp * amp)
}

/// Half-duplex decode-and-forward rate in bits/s/Hz with maximum-ratio
/// transmission on the first hop.
pub fn two_hop_rate(h: &[Complex64], gain: f64, p_bs: f64, p_uav: f64, noise: f64) -> Result<f64> {
    if p_bs < 0.0 || p_uav < 0.0 || p_bs.is_nan() || p_uav.is_nan() {
        return Err(Error::Domain(format!("negative power ({p_bs}, {p_uav})")));
    }
    if !(noise > 0.0) {
        return Err(Error::Domain(format!("noise power {noise} must be positive")));
    }
    let array_gain: f64 = h.iter().map(Complex64::norm_sqr).sum();
    let snr1 = p_bs * array_gain / noise;
    let snr2 = p_uav * gain / noise;
    Ok(0.5 * (1.0 + snr1).log2().min((1.0 + snr2).log2()))
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rayleigh_examples() {
        assert!((rayleigh_distance(0.5, 0.01).unwrap() - 50.0).abs() < 1e-12);
        assert!((rayleigh_distance(0.315, 0.01).unwrap() - 19.845).abs() < 1e-9);
        let a = rayleigh_distance(0.3, 0.01).unwrap();
        let b = rayleigh_distance(0.3, 0.02).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
        assert!(rayleigh_distance(0.0, 0.01).is_err());
        assert!(rayleigh_distance(0.1, -1.0).is_err());
    }

    #[test]
    fn equidistant_elements_match() {
        let el = ula_positions(2, 0.005);
        let h = spherical_channel(&el, 0.01, [0.0, 3.0, 4.0]).unwrap();
        assert_eq!(h[0], h[1]);
    }

    #[test]
    fn magnitude_falls_with_distance() {
        let el = [[0.0, 0.0, 0.0]];
        let mags: Vec<f64> = [1.0, 2.0, 7.5, 40.0]
            .iter()
            .map(|&r| spherical_channel(&el, 0.01, [r, 0.0, 0.0]).unwrap()[0].norm())
            .collect();
        assert!(mags.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn coincident_receiver_is_singular() {
        let el = ula_positions(3, 0.005);
        assert!(matches!(
            spherical_channel(&el, 0.01, el[1]),
            Err(Error::Singularity(_))
        ));
        assert!(free_space_gain(0.01, [1.0, 1.0, 0.0], [1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn free_space_gain_examples() {
        let g1 = free_space_gain(0.01, [0.0; 3], [100.0, 0.0, 0.0]).unwrap();
        assert!((g1 - 6.332573977646111e-11).abs() < 1e-20);
        let g2 = free_space_gain(0.01, [0.0; 3], [200.0, 0.0, 0.0]).unwrap();
        assert!((g2 / g1 - 0.25).abs() < 1e-12);
        let shifted = free_space_gain(0.01, [5.0, -3.0, 2.0], [105.0, -3.0, 2.0]).unwrap();
        assert!((shifted - g1).abs() < 1e-22);
    }

    #[test]
    fn rate_examples() {
        let h = vec![Complex64::new(1.0, 0.0)];
        assert_eq!(two_hop_rate(&h, 1.0, 0.0, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(two_hop_rate(&h, 1.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        // SNR1 = SNR2 = 3
        assert!((two_hop_rate(&h, 3.0, 3.0, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            two_hop_rate(&h, 1.0, -0.1, 1.0, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn wrap_phase_range() {
        for a in [-10.0, -PI, 0.0, PI, 3.5, 100.0] {
            let w = wrap_phase(a);
            assert!(w > -PI && w <= PI, "{a} -> {w}");
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }
}
