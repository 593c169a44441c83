//! Masked categorical distributions against independent reference
//! computations.

use maskrl_core::maskdist::{approx_kl, head_sizes, CompositeDistribution, MaskedCategorical, ValidityMask, NUM_HEADS};
use maskrl_core::numerics::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FILL: f64 = -1e8;

fn reference_log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// log π′(a) computed without the tape.
fn reference_masked_log_prob(logits: &[f64], mask: &[bool], a: usize) -> f64 {
    let masked: Vec<f64> = logits.iter().zip(mask).map(|(&l, &m)| if m { l } else { FILL }).collect();
    reference_log_softmax(&masked)[a]
}

fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>, usize) {
    let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let p_valid = rng.random_range(0.1..0.9);
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(p_valid)).collect();
    let forced = rng.random_range(0..n);
    mask[forced] = true;
    let valid: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let a = valid[rng.random_range(0..valid.len())];
    (logits, mask, a)
}

#[test]
fn masked_logits_get_exactly_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sizes = [4usize, 16, 576];
    for case in 0..1000 {
        let n = sizes[case % sizes.len()];
        let (logits, mask, a) = random_case(&mut rng, n);
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(vec![n], logits.clone()).unwrap();
        let d = MaskedCategorical::new(&mut tape, x, Some(&mask), FILL).unwrap();
        let lp = d.log_prob(&mut tape, &[a]).unwrap();
        let want = reference_masked_log_prob(&logits, &mask, a);
        assert!((tape.value(lp)[0] - want).abs() < 1e-12);
        let g = tape.backward(lp).unwrap().get_or_zeros(x, n);
        let h = 1e-5;
        for i in 0..n {
            if !mask[i] {
                assert_eq!(g[i], 0.0, "case {case}: masked logit {i} has gradient {}", g[i]);
                continue;
            }
            let mut p = logits.clone();
            p[i] += h;
            let mut m = logits.clone();
            m[i] -= h;
            let fd = (reference_masked_log_prob(&p, &mask, a) - reference_masked_log_prob(&m, &mask, a)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-6, "case {case}, n {n}, logit {i}: analytic {} vs fd {fd}", g[i]);
        }
    }
}

#[test]
fn masked_sampling_matches_analytic_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cases: Vec<(Vec<f64>, Vec<bool>)> = vec![
        (vec![1.0; 4], vec![true, true, false, true]),
        (vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.3], vec![true, false, true, true, false, true]),
    ];
    for (logits, mask) in cases {
        let n = logits.len();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, n], logits.clone()).unwrap();
        let d = MaskedCategorical::new(&mut tape, x, Some(&mask), FILL).unwrap();
        let draws = 100_000;
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            counts[d.sample(&tape, &mut rng)[0]] += 1;
        }
        let valid: Vec<f64> = logits.iter().zip(&mask).filter(|(_, &m)| m).map(|(&l, _)| l).collect();
        let z: f64 = valid.iter().map(|l| l.exp()).sum();
        for i in 0..n {
            if !mask[i] {
                assert_eq!(counts[i], 0, "masked index {i} drawn");
            } else {
                let p = logits[i].exp() / z;
                let f = counts[i] as f64 / draws as f64;
                assert!((f - p).abs() < 0.01, "index {i}: {f} vs {p}");
            }
        }
    }
}

#[test]
fn approx_kl_estimates_analytic_kl() {
    let p: [f64; 3] = [0.5, 0.3, 0.2];
    let q: [f64; 3] = [0.25, 0.25, 0.5];
    let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 200_000;
    let mut old = Vec::with_capacity(n);
    let mut new = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let i = if u < p[0] {
            0
        } else if u < p[0] + p[1] {
            1
        } else {
            2
        };
        old.push(p[i].ln());
        new.push(q[i].ln());
    }
    let est = approx_kl(&old, &new);
    let diffs: Vec<f64> = old.iter().zip(&new).map(|(o, n)| o - n).collect();
    let var = diffs.iter().map(|d| (d - est).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((est - kl).abs() < 3.0 * se, "estimate {est} vs {kl} (se {se})");
}

#[test]
fn composite_log_prob_is_sum_of_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for map in [4usize, 10] {
        let sizes = head_sizes(map, map);
        for _ in 0..20 {
            let rows = 3;
            let mut tape = Tape::<f64>::new();
            let mut logits = Vec::new();
            let mut raw = Vec::new();
            for &s in &sizes {
                let v: Vec<f64> = (0..rows * s).map(|_| rng.random_range(-2.0..2.0)).collect();
                logits.push(tape.constant(vec![rows, s], v.clone()).unwrap());
                raw.push(v);
            }
            let masks: Vec<ValidityMask> = (0..rows)
                .map(|_| {
                    ValidityMask::new(
                        sizes
                            .iter()
                            .map(|&s| {
                                let mut h: Vec<bool> = (0..s).map(|_| rng.random_bool(0.5)).collect();
                                h[rng.random_range(0..s)] = true;
                                h
                            })
                            .collect(),
                    )
                    .unwrap()
                })
                .collect();
            let refs: Vec<&ValidityMask> = masks.iter().collect();
            let d = CompositeDistribution::new(&mut tape, &logits, Some(&refs), FILL).unwrap();
            let actions = d.sample(&tape, &mut rng);
            let total = d.log_prob(&mut tape, &actions).unwrap();
            for r in 0..rows {
                let mut want = 0.0;
                for h in 0..NUM_HEADS {
                    let s = sizes[h];
                    let row = &raw[h][r * s..(r + 1) * s];
                    let m = masks[r].head(h);
                    assert!(m[actions[r][h]], "sampled a masked component");
                    want += reference_masked_log_prob(row, m, actions[r][h]);
                }
                assert!((tape.value(total)[r] - want).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn head_sizes_follow_map() {
    assert_eq!(head_sizes(4, 4), [16, 6, 4, 4, 4, 4, 7, 16]);
    assert_eq!(head_sizes(24, 24), [576, 6, 4, 4, 4, 4, 7, 576]);
}
