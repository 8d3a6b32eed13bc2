//! Linear-chain CRF output layer.
//!
//! Scores a tag path as emission scores plus adjacent-tag transition scores,
//! with dedicated START/STOP states. The log-partition runs the forward
//! recursion in log space on the autodiff tape, so the negative log-likelihood
//! is differentiable end to end. Viterbi decoding is a pure dynamic program
//! over the same scores, with optional BIO-validity masking at decode time
//! only; training stays unconstrained.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::schema::LabelSchema;

/// Additive penalty standing in for minus infinity. Large enough to dominate
/// any realistic path score while keeping log-space arithmetic NaN-free.
pub const FORBIDDEN_SCORE: f64 = -1e4;

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("LengthMismatch: {0} tags for {1} emission rows")]
    LengthMismatch(usize, usize),
    #[error("LabelOutOfRange: label {0} with {1} labels")]
    LabelOutOfRange(usize, usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Transition table over `L` labels plus START/STOP, stored as one
/// `(L+2) x (L+2)` parameter. START has no incoming and STOP no outgoing
/// scored transitions; the recursions simply never read those entries.
#[derive(Debug, Clone)]
pub struct CrfLayer {
    pub transitions: ParamId,
    num_labels: usize,
}

/// Decode-time additive mask over label-to-label moves.
#[derive(Debug, Clone)]
pub struct TransitionMask {
    num_labels: usize,
    /// (L+1) x L: row L holds START->label penalties.
    penalty: Vec<f64>,
}

impl TransitionMask {
    fn allow_all(num_labels: usize) -> Self {
        Self {
            num_labels,
            penalty: vec![0.0; (num_labels + 1) * num_labels],
        }
    }

    fn forbid(&mut self, from: usize, to: usize) {
        self.penalty[from * self.num_labels + to] = FORBIDDEN_SCORE;
    }

    fn from_start(&self, to: usize) -> f64 {
        self.penalty[self.num_labels * self.num_labels + to]
    }

    fn between(&self, from: usize, to: usize) -> f64 {
        self.penalty[from * self.num_labels + to]
    }

    /// Mask forbidding BIO-invalid moves for a schema's tag layout:
    /// `O -> I-x`, `B-x -> I-y` and `I-x -> I-y` for `x != y`, and
    /// `START -> I-x`.
    pub fn bio(schema: &LabelSchema) -> Self {
        let n_types = schema.num_types();
        let num_labels = schema.num_tags();
        let mut mask = Self::allow_all(num_labels);
        let begin = |i: usize| 1 + 2 * i;
        let inside = |i: usize| 2 + 2 * i;
        for y in 0..n_types {
            mask.forbid(0, inside(y)); // O -> I-y
            mask.forbid(num_labels, inside(y)); // START -> I-y
            for x in 0..n_types {
                if x != y {
                    mask.forbid(begin(x), inside(y));
                    mask.forbid(inside(x), inside(y));
                }
            }
        }
        mask
    }
}

impl CrfLayer {
    /// Registers the transition parameter, initialized uniformly at the
    /// Glorot bound for its fan.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        num_labels: usize,
        rng: &mut R,
    ) -> Result<Self, CrfError> {
        let n = num_labels + 2;
        let bound = (6.0 / (n + n) as f64).sqrt();
        let transitions = store.add(name, Tensor::uniform(&[n, n], bound, rng))?;
        Ok(Self {
            transitions,
            num_labels,
        })
    }

    /// Wraps an already-registered transition parameter (model loading).
    pub fn from_param(transitions: ParamId, num_labels: usize) -> Self {
        Self {
            transitions,
            num_labels,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn start(&self) -> usize {
        self.num_labels
    }

    fn stop(&self) -> usize {
        self.num_labels + 1
    }

    fn check_emissions(&self, tape: &Tape, emissions: Var) -> Result<(usize, usize), CrfError> {
        let shape = tape.value(emissions).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.num_labels {
            return Err(AutodiffError::ShapeMismatch(format!(
                "emissions {:?}, expected (T, {})",
                shape, self.num_labels
            ))
            .into());
        }
        Ok((shape[0], shape[1]))
    }

    fn check_tags(&self, tags: &[usize], steps: usize) -> Result<(), CrfError> {
        if tags.len() != steps {
            return Err(CrfError::LengthMismatch(tags.len(), steps));
        }
        if let Some(&bad) = tags.iter().find(|&&y| y >= self.num_labels) {
            return Err(CrfError::LabelOutOfRange(bad, self.num_labels));
        }
        Ok(())
    }

    /// Path score of `tags` under the emissions:
    /// `sum_t em[t, y_t] + trans[START, y_0] + sum trans[y_t, y_{t+1}] +
    /// trans[y_last, STOP]`.
    pub fn score_sequence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        emissions: Var,
        tags: &[usize],
    ) -> Result<Var, CrfError> {
        let trans = tape.param(store, self.transitions);
        self.score_sequence_with(tape, emissions, trans, tags)
    }

    fn score_sequence_with(
        &self,
        tape: &mut Tape,
        emissions: Var,
        trans: Var,
        tags: &[usize],
    ) -> Result<Var, CrfError> {
        let (steps, _) = self.check_emissions(tape, emissions)?;
        self.check_tags(tags, steps)?;

        let em_idx: Vec<(usize, usize)> = tags.iter().enumerate().map(|(t, &y)| (t, y)).collect();
        let mut tr_idx = Vec::with_capacity(steps + 1);
        tr_idx.push((self.start(), tags[0]));
        for w in tags.windows(2) {
            tr_idx.push((w[0], w[1]));
        }
        tr_idx.push((tags[steps - 1], self.stop()));

        let em_picks = tape.gather_entries(emissions, &em_idx)?;
        let em_sum = tape.sum(em_picks);
        let tr_picks = tape.gather_entries(trans, &tr_idx)?;
        let tr_sum = tape.sum(tr_picks);
        Ok(tape.add(em_sum, tr_sum)?)
    }

    /// log of the sum over all `L^T` tag paths of `exp(path score)`, via the
    /// forward recursion with log-sum-exp.
    pub fn log_partition(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        emissions: Var,
    ) -> Result<Var, CrfError> {
        let trans = tape.param(store, self.transitions);
        self.log_partition_with(tape, emissions, trans)
    }

    fn log_partition_with(
        &self,
        tape: &mut Tape,
        emissions: Var,
        trans: Var,
    ) -> Result<Var, CrfError> {
        let (steps, labels) = self.check_emissions(tape, emissions)?;

        let rows = tape.slice(trans, 0, 0, labels)?;
        let trans_ll = tape.slice(rows, 1, 0, labels)?;
        let start_row = tape.row(trans, self.start())?;
        let from_start = tape.slice(start_row, 0, 0, labels)?;
        let stop_col = tape.slice(rows, 1, self.stop(), 1)?;
        let to_stop = tape.flatten(stop_col)?;

        let em0 = tape.row(emissions, 0)?;
        let mut alpha = tape.add(from_start, em0)?;
        for t in 1..steps {
            let scores = tape.add_col(trans_ll, alpha)?;
            let reduced = tape.log_sum_exp_axis(scores, 0)?;
            let em_t = tape.row(emissions, t)?;
            alpha = tape.add(reduced, em_t)?;
        }
        let final_scores = tape.add(alpha, to_stop)?;
        Ok(tape.log_sum_exp(final_scores)?)
    }

    /// Negative log-likelihood of the gold path: `log_partition - score`.
    pub fn nll(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        emissions: Var,
        gold: &[usize],
    ) -> Result<Var, CrfError> {
        let trans = tape.param(store, self.transitions);
        let log_z = self.log_partition_with(tape, emissions, trans)?;
        let gold_score = self.score_sequence_with(tape, emissions, trans, gold)?;
        Ok(tape.sub(log_z, gold_score)?)
    }

    /// Max-score path and its (unmasked) score. With a mask, forbidden moves
    /// are penalized out of the argmax but the returned score is the true
    /// score of the returned path. Ties break toward the lower label index.
    pub fn viterbi(
        &self,
        store: &ParamStore,
        emissions: &Tensor,
        mask: Option<&TransitionMask>,
    ) -> Result<(Vec<usize>, f64), CrfError> {
        let trans = store.value(self.transitions);
        viterbi_decode(emissions, trans, self.num_labels, mask)
    }
}

/// Plain-score accumulation shared by decoding and the enumeration oracle:
/// strictly left to right, one addition at a time.
pub fn path_score(emissions: &Tensor, trans: &Tensor, labels: usize, tags: &[usize]) -> f64 {
    let (start, stop) = (labels, labels + 1);
    let mut s = trans.at(start, tags[0]);
    s += emissions.at(0, tags[0]);
    for t in 1..tags.len() {
        s += trans.at(tags[t - 1], tags[t]);
        s += emissions.at(t, tags[t]);
    }
    s += trans.at(tags[tags.len() - 1], stop);
    s
}

fn viterbi_decode(
    emissions: &Tensor,
    trans: &Tensor,
    labels: usize,
    mask: Option<&TransitionMask>,
) -> Result<(Vec<usize>, f64), CrfError> {
    let shape = emissions.shape();
    if shape.len() != 2 || shape[1] != labels {
        return Err(AutodiffError::ShapeMismatch(format!(
            "emissions {:?}, expected (T, {})",
            shape, labels
        ))
        .into());
    }
    let steps = shape[0];
    let (start, stop) = (labels, labels + 1);

    let start_pen = |j: usize| mask.map_or(0.0, |m| m.from_start(j));
    let move_pen = |i: usize, j: usize| mask.map_or(0.0, |m| m.between(i, j));

    let mut dp: Vec<f64> = (0..labels)
        .map(|j| (trans.at(start, j) + start_pen(j)) + emissions.at(0, j))
        .collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(steps);

    for t in 1..steps {
        let mut next = vec![f64::NEG_INFINITY; labels];
        let mut arg = vec![0usize; labels];
        for j in 0..labels {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for i in 0..labels {
                let cand = (dp[i] + (trans.at(i, j) + move_pen(i, j))) + emissions.at(t, j);
                if cand > best {
                    best = cand;
                    best_i = i;
                }
            }
            next[j] = best;
            arg[j] = best_i;
        }
        back.push(arg);
        dp = next;
    }

    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for (j, v) in dp.iter().enumerate() {
        let cand = v + trans.at(j, stop);
        if cand > best {
            best = cand;
            last = j;
        }
    }

    let mut tags = vec![last; steps];
    for t in (1..steps).rev() {
        tags[t - 1] = back[t - 1][tags[t]];
    }
    let score = path_score(emissions, trans, labels, &tags);
    Ok((tags, score))
}
