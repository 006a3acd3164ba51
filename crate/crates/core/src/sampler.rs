//! Top-k sampling with temperature.

use rand::Rng;

use crate::config::SamplerConfig;
use crate::error::{CoreError, CoreResult};
use crate::scalar::Scalar;

/// Divide logits by the temperature, keep the k largest (ties broken by
/// lower token id), renormalize and sample. k = 1 reduces to argmax, as does
/// the temperature -> 0+ limit over the retained set.
pub fn top_k_sample<S: Scalar, R: Rng>(
    logits: &[S],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> CoreResult<u32> {
    let v = logits.len();
    if cfg.k == 0 || cfg.k > v {
        return Err(CoreError::InvalidConfig {
            detail: format!("top-k {} out of range for vocab {v}", cfg.k),
        });
    }
    if cfg.temperature <= 0.0 {
        return Err(CoreError::InvalidConfig {
            detail: format!("temperature must be positive, got {}", cfg.temperature),
        });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::NonFinite {
            context: "sampler logits".into(),
        });
    }
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(cfg.k);
    if cfg.k == 1 {
        return Ok(order[0] as u32);
    }
    let temp = S::from_f64(cfg.temperature);
    let max = logits[order[0]] / temp;
    let weights: Vec<S> = order
        .iter()
        .map(|&i| (logits[i] / temp - max).exp())
        .collect();
    let mut total = S::zero();
    for &w in &weights {
        total += w;
    }
    let u = S::from_f64(rng.gen::<f64>()) * total;
    let mut acc = S::zero();
    for (w, &i) in weights.iter().zip(&order) {
        acc += *w;
        if u < acc {
            return Ok(i as u32);
        }
    }
    Ok(*order.last().unwrap() as u32)
}

/// Greedy argmax with the same lower-id tie rule.
pub fn argmax<S: Scalar>(logits: &[S]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k1_is_always_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.3f64, 2.0, -1.0, 2.0, 0.9];
        let cfg = SamplerConfig {
            k: 1,
            temperature: 0.9,
            seed: 0,
        };
        for _ in 0..200 {
            assert_eq!(top_k_sample(&logits, &cfg, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn full_k_temperature_one_matches_softmax_within_3_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = [0.5f64, -0.25, 1.5, 0.0, -1.0, 0.75, 0.1, -0.6];
        let cfg = SamplerConfig {
            k: logits.len(),
            temperature: 1.0,
            seed: 0,
        };
        let n = 100_000usize;
        let mut counts = vec![0usize; logits.len()];
        for _ in 0..n {
            counts[top_k_sample(&logits, &cfg, &mut rng).unwrap() as usize] += 1;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (i, &e) in exps.iter().enumerate() {
            let p = e / z;
            let freq = counts[i] as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "token {i}: freq {freq} vs p {p} (3 sigma {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn tiny_temperature_approaches_argmax_of_retained() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = [0.0f64, 0.5, 0.49, -2.0];
        let cfg = SamplerConfig {
            k: 3,
            temperature: 1e-9,
            seed: 0,
        };
        for _ in 0..100 {
            assert_eq!(top_k_sample(&logits, &cfg, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = SamplerConfig {
            k: 5,
            temperature: 1.0,
            seed: 0,
        };
        assert!(top_k_sample(&[0.0f64; 3], &cfg, &mut rng).is_err());
        let cfg2 = SamplerConfig {
            k: 2,
            temperature: 1.0,
            seed: 0,
        };
        assert!(top_k_sample(&[f64::NAN, 0.0, 1.0], &cfg2, &mut rng).is_err());
    }
}
