//! Projection-based source-separation metrics.
//!
//! An estimate is decomposed against the reference sources as
//! `ŝ = s_target + e_interf + e_artif`, where `s_target` is the component
//! collinear with the reference, `e_interf` lives in the span of the other
//! sources, and `e_artif` is whatever remains outside the source span.
//! SDR/SIR/SAR are energy ratios over that decomposition. This is the pure
//! projection decomposition (no allowed-distortion filtering), computed in
//! `f64` regardless of the waveform scalar type.

use ndarray::{Array1, Array2};

use crate::audio::Waveform;
use crate::error::{MageError, Result};
use crate::linalg::{solve_sym, sym_condition};
use crate::scalar::Scalar;

/// Energy floor guarding ratio denominators.
pub const ENERGY_FLOOR: f64 = 1e-12;
/// Metrics are clamped to this many dB on either side.
pub const DB_CLAMP: f64 = 100.0;
/// Gram matrices with a condition number above this are rejected.
pub const GRAM_CONDITION_LIMIT: f64 = 1e8;

/// Decomposition of an estimate into target, interference, and artifact
/// components (all waveform-length vectors; their sum reproduces the
/// estimate).
#[derive(Debug, Clone)]
pub struct BssDecomposition {
    pub s_target: Array1<f64>,
    pub e_interf: Array1<f64>,
    pub e_artif: Array1<f64>,
}

/// Decomposes `estimate` against `sources`, treating `sources[target_index]`
/// as the reference.
pub fn bss_decompose<T: Scalar>(
    estimate: &Waveform<T>,
    sources: &[&Waveform<T>],
    target_index: usize,
) -> Result<BssDecomposition> {
    if sources.is_empty() {
        return Err(MageError::InvalidArgument(
            "need at least one reference source".into(),
        ));
    }
    if target_index >= sources.len() {
        return Err(MageError::InvalidArgument(format!(
            "target index {target_index} out of range for {} sources",
            sources.len()
        )));
    }
    let len = estimate.len();
    for (i, s) in sources.iter().enumerate() {
        if s.len() != len {
            return Err(MageError::Shape(format!(
                "source {i} has {} samples, estimate has {len}",
                s.len()
            )));
        }
    }

    let est = to_f64(estimate);
    let srcs: Vec<Array1<f64>> = sources.iter().map(|s| to_f64(s)).collect();

    let target = &srcs[target_index];
    let target_energy: f64 = target.dot(target);
    if target_energy <= ENERGY_FLOOR {
        return Err(MageError::InvalidArgument(
            "reference source has (near-)zero energy".into(),
        ));
    }

    // s_target: projection of the estimate onto the reference source.
    let s_target = target * (est.dot(target) / target_energy);

    // P_S(est): orthogonal projection onto the span of all sources, via the
    // normal equations with the source Gram matrix.
    let k = srcs.len();
    let mut gram = Array2::<f64>::zeros((k, k));
    let mut rhs = Array1::<f64>::zeros(k);
    for i in 0..k {
        for j in 0..k {
            gram[(i, j)] = srcs[i].dot(&srcs[j]);
        }
        rhs[i] = srcs[i].dot(&est);
    }
    let cond = sym_condition(&gram)?;
    if !cond.is_finite() || cond > GRAM_CONDITION_LIMIT {
        return Err(MageError::Numeric(format!(
            "sources are nearly linearly dependent (Gram condition {cond:.3e})"
        )));
    }
    let coeffs = solve_sym(&gram, &rhs)?;
    let mut projected = Array1::<f64>::zeros(len);
    for (c, s) in coeffs.iter().zip(&srcs) {
        projected = projected + s * *c;
    }

    let e_interf = &projected - &s_target;
    let e_artif = &est - &projected;
    Ok(BssDecomposition {
        s_target,
        e_interf,
        e_artif,
    })
}

/// Signal-to-distortion, signal-to-interference, and signal-to-artifact
/// ratios (dB, clamped to ±100).
pub fn sdr_sir_sar(dec: &BssDecomposition) -> (f64, f64, f64) {
    let target_energy = energy(&dec.s_target);
    let interf_energy = energy(&dec.e_interf);
    let artif_energy = energy(&dec.e_artif);
    let total_err = energy(&(&dec.e_interf + &dec.e_artif));
    let tgt_plus_interf = energy(&(&dec.s_target + &dec.e_interf));

    let sdr = ratio_db(target_energy, total_err);
    let sir = ratio_db(target_energy, interf_energy);
    let sar = ratio_db(tgt_plus_interf, artif_energy);
    (sdr, sir, sar)
}

/// Convenience wrapper: decompose and score in one call.
pub fn separation_metrics<T: Scalar>(
    estimate: &Waveform<T>,
    sources: &[&Waveform<T>],
    target_index: usize,
) -> Result<(f64, f64, f64)> {
    Ok(sdr_sir_sar(&bss_decompose(
        estimate,
        sources,
        target_index,
    )?))
}

fn energy(x: &Array1<f64>) -> f64 {
    x.dot(x)
}

fn ratio_db(num: f64, den: f64) -> f64 {
    let r = 10.0 * (num.max(ENERGY_FLOOR) / den.max(ENERGY_FLOOR)).log10();
    r.clamp(-DB_CLAMP, DB_CLAMP)
}

fn to_f64<T: Scalar>(w: &Waveform<T>) -> Array1<f64> {
    Array1::from_iter(w.samples.iter().map(|&s| s.to_f64c()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn wf(samples: &[f64]) -> Waveform<f64> {
        Waveform::new(Array1::from_vec(samples.to_vec()), 4410).unwrap()
    }

    #[test]
    fn exact_estimate_has_zero_errors() {
        let s = wf(&[0.5, -0.2, 0.8, 0.1]);
        let n = wf(&[0.1, 0.9, -0.3, 0.2]);
        let dec = bss_decompose(&s, &[&s, &n], 0).unwrap();
        for i in 0..4 {
            assert_relative_eq!(dec.s_target[i], s.samples[i], epsilon = 1e-12);
            assert_relative_eq!(dec.e_interf[i], 0.0, epsilon = 1e-12);
            assert_relative_eq!(dec.e_artif[i], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn orthonormal_two_source_hand_case() {
        // s=[1,0], n=[0,1], estimate=[1,1]: target [1,0], interference [0,1].
        let s = wf(&[1.0, 0.0]);
        let n = wf(&[0.0, 1.0]);
        let est = wf(&[1.0, 1.0]);
        let dec = bss_decompose(&est, &[&s, &n], 0).unwrap();
        assert_relative_eq!(dec.s_target[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(dec.s_target[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(dec.e_interf[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(dec.e_interf[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(dec.e_artif[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(dec.e_artif[1], 0.0, epsilon = 1e-12);

        let (sdr, sir, sar) = sdr_sir_sar(&dec);
        assert_relative_eq!(sdr, 0.0, epsilon = 1e-9);
        assert_relative_eq!(sir, 0.0, epsilon = 1e-9);
        assert_relative_eq!(sar, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn artifact_only_hand_case() {
        // s=[1,0,0], n=[0,1,0], estimate=[1,0,1]: the third axis is outside
        // the source span, so it is all artifact.
        let s = wf(&[1.0, 0.0, 0.0]);
        let n = wf(&[0.0, 1.0, 0.0]);
        let est = wf(&[1.0, 0.0, 1.0]);
        let dec = bss_decompose(&est, &[&s, &n], 0).unwrap();
        assert_relative_eq!(dec.s_target[0], 1.0, epsilon = 1e-12);
        for i in 0..3 {
            assert_relative_eq!(dec.e_interf[i], 0.0, epsilon = 1e-12);
        }
        assert_relative_eq!(dec.e_artif[2], 1.0, epsilon = 1e-12);

        let (sdr, sir, sar) = sdr_sir_sar(&dec);
        assert_relative_eq!(sdr, 0.0, epsilon = 1e-9);
        assert_relative_eq!(sir, 100.0, epsilon = 1e-9);
        assert_relative_eq!(sar, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn scaled_estimate_hits_all_clamps() {
        let s = wf(&[0.4, -0.6, 0.2]);
        let n = wf(&[0.3, 0.3, -0.5]);
        let est = Waveform::new(s.samples.clone() * 2.0, 4410).unwrap();
        let dec = bss_decompose(&est, &[&s, &n], 0).unwrap();
        let (sdr, sir, sar) = sdr_sir_sar(&dec);
        assert_eq!(sdr, 100.0);
        assert_eq!(sir, 100.0);
        assert_eq!(sar, 100.0);
    }

    #[test]
    fn zero_energy_reference_is_an_error() {
        let s = wf(&[0.0, 0.0]);
        let n = wf(&[0.0, 1.0]);
        let est = wf(&[1.0, 1.0]);
        assert!(bss_decompose(&est, &[&s, &n], 0).is_err());
    }

    #[test]
    fn collinear_sources_are_rejected() {
        let s = wf(&[1.0, 2.0, 3.0]);
        let n = wf(&[2.0, 4.0, 6.0]);
        let est = wf(&[1.0, 1.0, 1.0]);
        let err = bss_decompose(&est, &[&s, &n], 0).unwrap_err();
        assert!(matches!(err, MageError::Numeric(_)));
    }

    #[test]
    fn two_sample_case_matches_normal_equation_oracle() {
        // For 2-sample signals with 2 sources the projection is onto all of
        // R^2 whenever the sources are independent; solve the 2x2 normal
        // equations directly as the oracle.
        let cases = [
            ([0.9, 0.1], [0.2, -0.7], [0.5, 0.5]),
            ([1.0, 0.4], [0.3, 1.1], [-0.2, 0.8]),
            ([0.6, -0.6], [0.5, 0.5], [1.0, 0.0]),
        ];
        for (sa, sb, e) in cases {
            let s = wf(&sa);
            let n = wf(&sb);
            let est = wf(&e);
            let dec = bss_decompose(&est, &[&s, &n], 0).unwrap();

            // Oracle: solve [ [saa, sab], [sab, sbb] ] c = [sae, sbe].
            let saa = sa[0] * sa[0] + sa[1] * sa[1];
            let sbb = sb[0] * sb[0] + sb[1] * sb[1];
            let sab = sa[0] * sb[0] + sa[1] * sb[1];
            let sae = sa[0] * e[0] + sa[1] * e[1];
            let sbe = sb[0] * e[0] + sb[1] * e[1];
            let det = saa * sbb - sab * sab;
            let ca = (sae * sbb - sbe * sab) / det;
            let cb = (saa * sbe - sab * sae) / det;
            for i in 0..2 {
                let proj = ca * sa[i] + cb * sb[i];
                let s_t = (sae / saa) * sa[i];
                assert_relative_eq!(dec.s_target[i], s_t, epsilon = 1e-9);
                assert_relative_eq!(dec.e_interf[i], proj - s_t, epsilon = 1e-9);
                assert_relative_eq!(dec.e_artif[i], e[i] - proj, epsilon = 1e-9);
            }
        }
    }
}
