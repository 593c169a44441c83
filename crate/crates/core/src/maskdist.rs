//! Masked and composite categorical distributions.
//!
//! Masking replaces the logits of invalid choices with a large negative
//! constant before the softmax. It is implemented as a select (identity on
//! valid entries, constant elsewhere), so the gradient reaching a masked raw
//! logit is exactly zero and the result is the policy gradient of the masked
//! policy itself.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{NumericsError, Real, Tape, Var};

/// Logit written into masked entries.
pub const DEFAULT_MASK_VALUE: f64 = -1e8;

/// Number of action components of a composite action.
pub const NUM_HEADS: usize = 8;

/// Heads that carry a state-dependent mask in the experiments
/// (source unit and attack target).
pub const MASKED_HEADS: [usize; 2] = [0, 7];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mask for head {head} has no valid entry")]
    EmptyHead { head: usize },
    #[error("mask for head {head} has length {got}, expected {expected}")]
    LengthMismatch { head: usize, expected: usize, got: usize },
    #[error("expected {expected} heads, got {got}")]
    HeadCount { expected: usize, got: usize },
    #[error("action component {head} = {index} is outside [0, {size})")]
    ActionOutOfRange { head: usize, index: usize, size: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = MaskError> = std::result::Result<T, E>;

/// Component ranges for an `h×w` map: source unit, action type, move,
/// harvest, return, produce direction, produce type, attack target.
pub fn head_sizes(height: usize, width: usize) -> [usize; NUM_HEADS] {
    let cells = height * width;
    [cells, 6, 4, 4, 4, 4, 7, cells]
}

/// Per-head validity vectors. Every head keeps at least one valid entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    heads: Vec<Vec<bool>>,
}

impl ValidityMask {
    pub fn new(heads: Vec<Vec<bool>>) -> Result<Self> {
        if let Some(head) = heads.iter().position(|h| !h.iter().any(|&v| v)) {
            return Err(MaskError::EmptyHead { head });
        }
        Ok(Self { heads })
    }

    pub fn all_valid(sizes: &[usize]) -> Self {
        Self {
            heads: sizes.iter().map(|&n| vec![true; n]).collect(),
        }
    }

    pub fn head(&self, i: usize) -> &[bool] {
        &self.heads[i]
    }

    pub fn heads(&self) -> &[Vec<bool>] {
        &self.heads
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.heads.iter().map(Vec::len).collect()
    }

    pub fn valid_count(&self, head: usize) -> usize {
        self.heads[head].iter().filter(|&&v| v).count()
    }

    /// All heads concatenated.
    pub fn flatten(&self) -> Vec<bool> {
        self.heads.concat()
    }

    pub fn from_flat(sizes: &[usize], flat: &[bool]) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if flat.len() != total {
            return Err(MaskError::LengthMismatch {
                head: 0,
                expected: total,
                got: flat.len(),
            });
        }
        let mut heads = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &n in sizes {
            heads.push(flat[off..off + n].to_vec());
            off += n;
        }
        Self::new(heads)
    }

    pub fn check_sizes(&self, sizes: &[usize]) -> Result<()> {
        if self.heads.len() != sizes.len() {
            return Err(MaskError::HeadCount {
                expected: sizes.len(),
                got: self.heads.len(),
            });
        }
        for (head, (h, &n)) in self.heads.iter().zip(sizes).enumerate() {
            if h.len() != n {
                return Err(MaskError::LengthMismatch {
                    head,
                    expected: n,
                    got: h.len(),
                });
            }
        }
        Ok(())
    }
}

/// Replaces logits of invalid entries with `fill`.
///
/// `mask` covers one row (`n` entries, shared by all rows) or the whole
/// `[rows, n]` tensor. Every row must keep at least one valid entry.
pub fn apply_mask<T: Real>(tape: &mut Tape<T>, logits: Var, mask: &[bool], fill: T) -> Result<Var> {
    let n = *tape.shape(logits).last().expect("non-empty shape");
    let total = tape.value(logits).len();
    let full: Vec<bool> = if mask.len() == n {
        mask.iter().copied().cycle().take(total).collect()
    } else if mask.len() == total {
        mask.to_vec()
    } else {
        return Err(MaskError::LengthMismatch {
            head: 0,
            expected: n,
            got: mask.len(),
        });
    };
    if full.chunks_exact(n).any(|row| !row.iter().any(|&v| v)) {
        return Err(MaskError::EmptyHead { head: 0 });
    }
    Ok(tape.mask_fill(logits, &full, fill)?)
}

/// A batch of (optionally masked) categorical distributions over the last
/// axis of a `[rows, n]` logits node.
#[derive(Clone, Copy, Debug)]
pub struct MaskedCategorical {
    log_probs: Var,
    rows: usize,
    n: usize,
}

impl MaskedCategorical {
    pub fn new<T: Real>(tape: &mut Tape<T>, logits: Var, mask: Option<&[bool]>, fill: T) -> Result<Self> {
        let n = *tape.shape(logits).last().expect("non-empty shape");
        let rows = tape.value(logits).len() / n;
        let masked = match mask {
            Some(m) => apply_mask(tape, logits, m, fill)?,
            None => logits,
        };
        let log_probs = tape.log_softmax(masked)?;
        Ok(Self { log_probs, rows, n })
    }

    /// Uses the default mask constant `-1e8`.
    pub fn with_default_fill<T: Real>(tape: &mut Tape<T>, logits: Var, mask: Option<&[bool]>) -> Result<Self> {
        Self::new(tape, logits, mask, T::from_f64_lossy(DEFAULT_MASK_VALUE))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// `[rows, n]` log-probabilities.
    pub fn log_probs(&self) -> Var {
        self.log_probs
    }

    /// Log-probability of `actions[r]` in row `r`. Masked indices are allowed
    /// and give a very negative value (about `fill`).
    pub fn log_prob<T: Real>(&self, tape: &mut Tape<T>, actions: &[usize]) -> Result<Var> {
        Ok(tape.gather(self.log_probs, actions)?)
    }

    /// `-Σ p log p` per row; fully suppressed entries contribute exactly 0.
    pub fn entropy<T: Real>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let p = tape.exp(self.log_probs)?;
        let plogp = tape.mul(p, self.log_probs)?;
        let s = tape.sum_last_axis(plogp)?;
        Ok(tape.scale(s, -T::one())?)
    }

    pub fn probs<T: Real>(&self, tape: &Tape<T>) -> Vec<T> {
        tape.value(self.log_probs).iter().map(|l| l.exp()).collect()
    }

    /// Draws one index per row.
    pub fn sample<T: Real, R: Rng + ?Sized>(&self, tape: &Tape<T>, rng: &mut R) -> Vec<usize> {
        tape.value(self.log_probs)
            .chunks_exact(self.n)
            .map(|row| sample_row(row, rng))
            .collect()
    }
}

fn sample_row<T: Real, R: Rng + ?Sized>(log_probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        let p = lp.as_f64().exp();
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    // rounding left `cum` a hair below 1
    last_positive
}

/// `mean(old - new)`, the usual sample estimate of KL(old ‖ new) when the
/// actions were drawn from the old policy.
pub fn approx_kl(old_log_probs: &[f64], new_log_probs: &[f64]) -> f64 {
    assert_eq!(old_log_probs.len(), new_log_probs.len(), "approx_kl: length mismatch");
    assert!(!old_log_probs.is_empty(), "approx_kl: empty batch");
    let total: f64 = old_log_probs.iter().zip(new_log_probs).map(|(o, n)| o - n).sum();
    total / old_log_probs.len() as f64
}

/// Independent heads whose joint log-probability is the sum of head
/// log-probabilities.
#[derive(Clone, Debug)]
pub struct CompositeDistribution {
    heads: Vec<MaskedCategorical>,
}

impl CompositeDistribution {
    /// `head_logits[d]` is `[rows, size_d]`. `masks`, when given, holds one
    /// [`ValidityMask`] per row.
    pub fn new<T: Real>(
        tape: &mut Tape<T>,
        head_logits: &[Var],
        masks: Option<&[&ValidityMask]>,
        fill: T,
    ) -> Result<Self> {
        if head_logits.len() != NUM_HEADS {
            return Err(MaskError::HeadCount {
                expected: NUM_HEADS,
                got: head_logits.len(),
            });
        }
        let sizes: Vec<usize> = head_logits
            .iter()
            .map(|&v| *tape.shape(v).last().expect("non-empty shape"))
            .collect();
        if let Some(ms) = masks {
            for m in ms {
                m.check_sizes(&sizes)?;
            }
        }
        let mut heads = Vec::with_capacity(NUM_HEADS);
        for (d, &logits) in head_logits.iter().enumerate() {
            let flat: Option<Vec<bool>> = masks.and_then(|ms| {
                // all-true heads are left unmasked: identical values, fewer nodes
                if ms.iter().all(|m| m.head(d).iter().all(|&v| v)) {
                    None
                } else {
                    Some(ms.iter().flat_map(|m| m.head(d).iter().copied()).collect())
                }
            });
            heads.push(MaskedCategorical::new(tape, logits, flat.as_deref(), fill)?);
        }
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[MaskedCategorical] {
        &self.heads
    }

    pub fn rows(&self) -> usize {
        self.heads[0].rows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.heads.iter().map(MaskedCategorical::size).collect()
    }

    /// One composite action per row; heads are drawn in order within a row.
    pub fn sample<T: Real, R: Rng + ?Sized>(&self, tape: &Tape<T>, rng: &mut R) -> Vec<[usize; NUM_HEADS]> {
        let rows: Vec<&[T]> = self.heads.iter().map(|h| tape.value(h.log_probs())).collect();
        (0..self.rows())
            .map(|r| {
                let mut a = [0usize; NUM_HEADS];
                for (d, head) in self.heads.iter().enumerate() {
                    let n = head.size();
                    a[d] = sample_row(&rows[d][r * n..(r + 1) * n], rng);
                }
                a
            })
            .collect()
    }

    /// Per-head `[rows]` log-probabilities.
    pub fn head_log_probs<T: Real>(&self, tape: &mut Tape<T>, actions: &[[usize; NUM_HEADS]]) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(NUM_HEADS);
        for (d, head) in self.heads.iter().enumerate() {
            let idx: Vec<usize> = actions.iter().map(|a| a[d]).collect();
            if let Some(&index) = idx.iter().find(|&&i| i >= head.size()) {
                return Err(MaskError::ActionOutOfRange {
                    head: d,
                    index,
                    size: head.size(),
                });
            }
            out.push(head.log_prob(tape, &idx)?);
        }
        Ok(out)
    }

    /// `Σ_d log π(a^d | s)` per row.
    pub fn log_prob<T: Real>(&self, tape: &mut Tape<T>, actions: &[[usize; NUM_HEADS]]) -> Result<Var> {
        let parts = self.head_log_probs(tape, actions)?;
        sum_vars(tape, &parts)
    }

    /// Sum of head entropies per row.
    pub fn entropy<T: Real>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let parts: Vec<Var> = self
            .heads
            .iter()
            .map(|h| h.entropy(tape))
            .collect::<Result<_>>()?;
        sum_vars(tape, &parts)
    }
}

fn sum_vars<T: Real>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}
