//! Detection and identification statistics.
//!
//! Under the null hypothesis the decoded bits are i.i.d. fair coins, so the
//! number of matching bits `M` is Binomial(k, 1/2). Two tail conventions
//! appear: [`fpr_closed_form`] is `P(M > τ)` and [`fpr_at_least`] is
//! `P(M ≥ τ)`. Verdicts use `detected == (M ≥ τ)` together with
//! `P(M ≥ τ)`, and [`detection_threshold`] picks `τ` under that convention.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nets::Model;
use crate::registry::{RegistryRecord, WatermarkMessage};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn check_len(a: &[u8], b: &[u8]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "matching_bits",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// Number of positions where the two bit strings agree.
pub fn matching_bits(m: &[u8], decoded: &[u8]) -> Result<usize> {
    check_len(m, decoded)?;
    Ok(m.iter().zip(decoded).filter(|(a, b)| a == b).count())
}

pub fn bit_accuracy(m: &[u8], decoded: &[u8]) -> Result<f64> {
    if m.is_empty() {
        return Err(invalid("bit_accuracy of empty messages"));
    }
    Ok(matching_bits(m, decoded)? as f64 / m.len() as f64)
}

/// Hard decisions `sigmoid(logit) > 0.5`, i.e. `logit > 0`.
pub fn decode_logits(logits: &[f32]) -> Vec<u8> {
    logits.iter().map(|&l| u8::from(l > 0.0)).collect()
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// `Σ_{j=from..=k} C(k, j) / 2^k` by log-space terms, summed smallest first.
fn binomial_upper_tail(from: u64, k: u64) -> f64 {
    if from > k {
        return 0.0;
    }
    if from == 0 {
        return 1.0;
    }
    let ln2k = k as f64 * std::f64::consts::LN_2;
    let mut terms: Vec<f64> = (from..=k).map(|j| (ln_choose(k, j) - ln2k).exp()).collect();
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    terms.iter().sum::<f64>().min(1.0)
}

fn check_tau(tau: usize, k: usize) -> Result<()> {
    if tau > k {
        return Err(invalid(format!("threshold {tau} outside 0..={k}")));
    }
    Ok(())
}

/// `P(M > τ)` for `M ~ Binomial(k, 1/2)`, equal to `I_{1/2}(τ+1, k−τ)`.
pub fn fpr_closed_form(tau: usize, k: usize) -> Result<f64> {
    check_tau(tau, k)?;
    Ok(binomial_upper_tail(tau as u64 + 1, k as u64))
}

/// `P(M ≥ τ)` for `M ~ Binomial(k, 1/2)`.
pub fn fpr_at_least(tau: usize, k: usize) -> Result<f64> {
    check_tau(tau, k)?;
    Ok(binomial_upper_tail(tau as u64, k as u64))
}

/// Probability that at least one of `n` independent null candidates passes a
/// test with per-candidate false-positive rate `fpr`: `1 − (1 − fpr)^n`.
pub fn global_fpr_from(fpr: f64, n: u64) -> f64 {
    if n == 0 || fpr <= 0.0 {
        return 0.0;
    }
    if fpr >= 1.0 {
        return 1.0;
    }
    -((n as f64) * (-fpr).ln_1p()).exp_m1()
}

/// Global FPR of the `P(M > τ)` test over `n` candidates.
pub fn global_fpr(tau: usize, k: usize, n: u64) -> Result<f64> {
    Ok(global_fpr_from(fpr_closed_form(tau, k)?, n))
}

fn check_target(target: f64) -> Result<()> {
    if !(target > 0.0 && target < 1.0) && target != 1.0 {
        return Err(invalid(format!("target FPR must lie in (0, 1], got {target}")));
    }
    Ok(())
}

/// Smallest `τ` with `1 − (1 − P(M > τ))^n ≤ target`.
pub fn choose_threshold(k: usize, target: f64, n: u64) -> Result<usize> {
    check_target(target)?;
    for tau in 0..=k {
        if global_fpr(tau, k, n)? <= target {
            return Ok(tau);
        }
    }
    unreachable!("P(M > k) = 0 always meets the target")
}

/// Smallest `τ` with `1 − (1 − P(M ≥ τ))^n ≤ target`, the threshold used
/// by [`DetectionVerdict`] and [`IdentificationVerdict`]. Errors when even
/// `τ = k` is too permissive.
pub fn detection_threshold(k: usize, target: f64, n: u64) -> Result<usize> {
    check_target(target)?;
    for tau in 0..=k {
        if global_fpr_from(fpr_at_least(tau, k)?, n) <= target {
            return Ok(tau);
        }
    }
    Err(Error::UnreachableFpr {
        target,
        min_achievable: global_fpr_from(fpr_at_least(k, k)?, n),
    })
}

/// Empirical `P(M > τ)` with uniformly random decoded bits.
pub fn fpr_monte_carlo(tau: usize, k: usize, samples: usize, rng: &mut Rng) -> Result<f64> {
    check_tau(tau, k)?;
    if samples == 0 {
        return Err(invalid("fpr_monte_carlo needs at least one sample"));
    }
    let mut hits = 0usize;
    for _ in 0..samples {
        // Matches against the all-zero message are the zero bits.
        let mut remaining = k;
        let mut ones = 0usize;
        while remaining > 0 {
            let take = remaining.min(64);
            let word = rng.next_u64();
            let word = if take == 64 { word } else { word & ((1u64 << take) - 1) };
            ones += word.count_ones() as usize;
            remaining -= take;
        }
        if k - ones > tau {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples as f64)
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)` for `a, b > 0`, `0 ≤ x ≤ 1`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(x, a, b) / a
    } else {
        1.0 - front * beta_cf(1.0 - x, b, a) / b
    }
}

/// `P(M > τ)` through `I_{1/2}(τ+1, k−τ)`; an independent route to
/// [`fpr_closed_form`].
pub fn fpr_incomplete_beta(tau: usize, k: usize) -> Result<f64> {
    check_tau(tau, k)?;
    if tau == k {
        return Ok(0.0);
    }
    Ok(regularized_incomplete_beta(0.5, tau as f64 + 1.0, (k - tau) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub matched_bits: usize,
    pub threshold: usize,
    pub k: usize,
    /// `P(M ≥ τ)` under the null.
    pub fpr_at_tau: f64,
    pub detected: bool,
}

impl DetectionVerdict {
    pub fn from_bits(m: &[u8], decoded: &[u8], threshold: usize) -> Result<Self> {
        let k = m.len();
        let matched_bits = matching_bits(m, decoded)?;
        Ok(Self {
            matched_bits,
            threshold,
            k,
            fpr_at_tau: fpr_at_least(threshold, k)?,
            detected: matched_bits >= threshold,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationVerdict {
    pub best_user_id: String,
    pub best_score: usize,
    pub threshold: usize,
    /// `1 − (1 − P(M ≥ τ))^N` with `N` the number of candidates.
    pub global_fpr: f64,
    pub candidates: usize,
    pub identified: bool,
}

impl IdentificationVerdict {
    /// Scores every candidate; ties go to the earliest record.
    pub fn from_bits(decoded: &[u8], candidates: &[RegistryRecord], threshold: usize) -> Result<Self> {
        let first = candidates.first().ok_or(Error::EmptyRegistry)?;
        let k = first.message.len();
        let mut best = (matching_bits(first.message.bits(), decoded)?, 0usize);
        for (i, rec) in candidates.iter().enumerate().skip(1) {
            let score = matching_bits(rec.message.bits(), decoded)?;
            if score > best.0 {
                best = (score, i);
            }
        }
        Ok(Self {
            best_user_id: candidates[best.1].user_id.clone(),
            best_score: best.0,
            threshold,
            global_fpr: global_fpr_from(fpr_at_least(threshold, k)?, candidates.len() as u64),
            candidates: candidates.len(),
            identified: best.0 >= threshold,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub tau: usize,
    pub tpr_empirical: f64,
    /// `P(M ≥ τ)`, matching the detection rule `M ≥ τ`.
    pub fpr_closed_form: f64,
}

/// TPR (`M ≥ τ`) over `(true message, decoded bits)` pairs and closed-form
/// FPR for every `τ = 0..=k`.
pub fn roc_from_bits(pairs: &[(WatermarkMessage, Vec<u8>)]) -> Result<Vec<RocPoint>> {
    let k = pairs.first().ok_or_else(|| invalid("roc sweep over an empty set"))?.0.len();
    let mut counts = vec![0usize; k + 1];
    for (m, d) in pairs {
        if m.len() != k {
            return Err(invalid("roc sweep over messages of mixed length"));
        }
        counts[matching_bits(m.bits(), d)?] += 1;
    }
    let mut points = Vec::with_capacity(k + 1);
    let mut at_least = pairs.len();
    for (tau, &c) in counts.iter().enumerate() {
        points.push(RocPoint {
            tau,
            tpr_empirical: at_least as f64 / pairs.len() as f64,
            fpr_closed_form: fpr_at_least(tau, k)?,
        });
        at_least -= c;
    }
    Ok(points)
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("tau,tpr,fpr\n");
    for p in points {
        let _ = writeln!(s, "{},{},{:e}", p.tau, p.tpr_empirical, p.fpr_closed_form);
    }
    s
}

/// Extracts `image` with `model`'s extractor and tests it against `m`.
pub fn detect(model: &Model, image: &Tensor, m: &WatermarkMessage, threshold: usize) -> Result<DetectionVerdict> {
    let decoded = decode_logits(&model.extract(image)?);
    DetectionVerdict::from_bits(m.bits(), &decoded, threshold)
}

/// Extracts `image` and scores it against every registered message.
pub fn identify(model: &Model, image: &Tensor, candidates: &[RegistryRecord], threshold: usize) -> Result<IdentificationVerdict> {
    if candidates.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    let decoded = decode_logits(&model.extract(image)?);
    IdentificationVerdict::from_bits(&decoded, candidates, threshold)
}

/// ROC over `(image, true message)` pairs.
pub fn roc_sweep(model: &Model, set: &[(Tensor, WatermarkMessage)]) -> Result<Vec<RocPoint>> {
    let pairs = set
        .iter()
        .map(|(img, m)| Ok((m.clone(), decode_logits(&model.extract(img)?))))
        .collect::<Result<Vec<_>>>()?;
    roc_from_bits(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_examples() {
        assert_eq!(matching_bits(&[1, 0, 1, 0], &[1, 1, 1, 0]).unwrap(), 3);
        assert_eq!(matching_bits(&[1, 0], &[0, 1]).unwrap(), 0);
        assert!(matching_bits(&[1, 0], &[1]).is_err());
        let m: Vec<u8> = (0..48).map(|i| (i % 2) as u8).collect();
        let mut d = m.clone();
        for b in d.iter_mut().take(12) {
            *b ^= 1;
        }
        assert_eq!(bit_accuracy(&m, &d).unwrap(), 0.75);
    }

    #[test]
    fn tail_edge_cases() {
        assert_eq!(fpr_closed_form(2, 2).unwrap(), 0.0);
        assert_eq!(fpr_closed_form(0, 2).unwrap(), 0.75);
        assert_eq!(fpr_at_least(0, 5).unwrap(), 1.0);
        assert!(fpr_closed_form(3, 2).is_err());
    }

    #[test]
    fn global_fpr_examples() {
        assert_eq!(global_fpr(5, 16, 0).unwrap(), 0.0);
        assert_eq!(global_fpr(5, 16, 1).unwrap(), fpr_closed_form(5, 16).unwrap());
        let g = global_fpr_from(1e-6, 1000);
        assert!((g - 9.995e-4).abs() < 1e-7, "{g}");
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(choose_threshold(16, 1.0, 1).unwrap(), 0);
        assert_eq!(choose_threshold(16, 1e-6, 1).unwrap(), 16);
        assert!(matches!(
            detection_threshold(16, 1e-6, 1),
            Err(Error::UnreachableFpr { .. })
        ));
        assert_eq!(detection_threshold(16, 1.0, 1).unwrap(), 0);
    }

    #[test]
    fn lanczos_gamma_integers() {
        for n in 1..20u64 {
            let exact = ln_factorial(n - 1);
            assert!((ln_gamma(n as f64) - exact).abs() < 1e-12 * exact.max(1.0));
        }
    }

    #[test]
    fn identification_ties_go_to_first() {
        let recs: Vec<RegistryRecord> = ["a", "b"]
            .iter()
            .map(|u| RegistryRecord {
                user_id: u.to_string(),
                message: WatermarkMessage::new(vec![1, 1, 0, 0, 1, 1, 0, 0]).unwrap(),
                created_at: String::new(),
                note: String::new(),
            })
            .collect();
        let v = IdentificationVerdict::from_bits(&[1, 1, 0, 0, 1, 1, 0, 0], &recs, 8).unwrap();
        assert_eq!(v.best_user_id, "a");
        assert!(v.identified);
        assert!(IdentificationVerdict::from_bits(&[0; 8], &[], 8).is_err());
    }
}
