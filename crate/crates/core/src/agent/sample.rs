// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;

use super::forward::ActionDistribution;
use crate::world::Action;

/// Lowest index among the maxima.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `p` with uniform `u ∈ [0,1)`.
fn categorical(p: &[f32], u: f32) -> usize {
    let mut acc = 0.0f32;
    let mut last_positive = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last_positive = i;
        }
        acc += pi;
        if u < acc {
            return i;
        }
    }
    last_positive
}

fn tempered(logits: &[f32], probs: &[f32], temperature: f32) -> Vec<f32> {
    if temperature == 1.0 {
        return probs.to_vec();
    }
    let mut p: Vec<f32> = logits.iter().map(|&l| l / temperature).collect();
    crate::numerics::kernels::softmax_in_place(&mut p);
    p
}

/// Per-factor category indices. A factor listed in `gates` is forced to its
/// inactive category when its probability of being active is below the
/// paired threshold. Exactly one uniform is drawn per factor,
/// whatever the temperature, so that sampling variants sharing an rng stay
/// aligned.
pub fn sample_indices<R: Rng + ?Sized>(
    dist: &ActionDistribution,
    temperature: f32,
    rng: &mut R,
    gates: &[(usize, f64)],
) -> Vec<usize> {
    let mut out = Vec::with_capacity(dist.probs.len());
    for (f, (logits, probs)) in dist.logits.iter().zip(&dist.probs).enumerate() {
        let u: f32 = rng.gen();
        let forced = gates.iter().any(|&(gf, th)| gf == f && dist.p_active(f) < th);
        let idx = if forced {
            0
        } else if temperature <= 0.0 {
            argmax(logits)
        } else {
            categorical(&tempered(logits, probs, temperature), u)
        };
        out.push(idx);
    }
    out
}

pub fn to_action(idx: &[usize]) -> Action {
    let mut a = [0usize; 4];
    for (d, &s) in a.iter_mut().zip(idx) {
        *d = s;
    }
    Action::from_indices(a).unwrap_or(Action::NOOP)
}

pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, temperature: f32, rng: &mut R) -> Action {
    to_action(&sample_indices(dist, temperature, rng, &[]))
}

/// Samples with factor `factor` forced inactive unless its probability of
/// being active reaches `threshold`.
pub fn gated_sample<R: Rng + ?Sized>(
    dist: &ActionDistribution,
    factor: usize,
    threshold: f64,
    temperature: f32,
    rng: &mut R,
) -> Action {
    to_action(&sample_indices(dist, temperature, rng, &[(factor, threshold)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(p: Vec<Vec<f32>>) -> ActionDistribution {
        ActionDistribution::from_probs(p)
    }

    fn three_way() -> ActionDistribution {
        dist(vec![vec![0.4, 0.4, 0.2, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]])
    }

    #[test]
    fn temperature_zero_breaks_ties_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_indices(&three_way(), 0.0, &mut rng, &[])[0], 0);
    }

    #[test]
    fn certain_attack_is_always_chosen() {
        let d = dist(vec![vec![1.0, 0.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0, 0.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(sample_action(&d, 1.0, &mut rng).attack);
        }
    }

    #[test]
    fn empirical_frequencies_match() {
        // Oracle: expected counts 0.4/0.4/0.2 of 10,000 draws.
        let d = three_way();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            counts[sample_indices(&d, 1.0, &mut rng, &[])[0]] += 1;
        }
        for (c, p) in counts.iter().zip([0.4, 0.4, 0.2, 0.0, 0.0]) {
            assert!((*c as f64 / 10_000.0 - p).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn gate_zero_is_ungated_and_gate_one_blocks() {
        let d = dist(vec![vec![0.2; 5], vec![0.2; 5], vec![0.3, 0.7], vec![0.25; 4]]);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let mut c = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            assert_eq!(sample_action(&d, 1.0, &mut a), gated_sample(&d, 2, 0.0, 1.0, &mut b));
            assert!(!gated_sample(&d, 2, 1.0, 1.0, &mut c).attack);
        }
    }

    #[test]
    fn gate_permits_confident_attacks() {
        let d = dist(vec![vec![1.0, 0.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0, 0.0], vec![0.0001, 0.9999], vec![1.0, 0.0, 0.0, 0.0]]);
        assert!(d.p_active(2) >= 0.99);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fired = (0..100).filter(|_| gated_sample(&d, 2, 0.99, 1.0, &mut rng).attack).count();
        assert!(fired > 90);
    }
}
