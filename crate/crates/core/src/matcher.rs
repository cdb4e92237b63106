//! Short-term and long-term association scoring.
//!
//! Both matchers share one embedder MLP and own structurally identical,
//! independently weighted transformer stacks: a one-layer encoder that
//! enhances history embeddings by self-attention, and a one-layer decoder
//! that reads current-frame embeddings against the enhanced history. Raw
//! association scores are scaled dot products between the projected decoder
//! output and the enhanced history, arranged with one row per trajectory
//! query and a fixed-zero null column for the no-association outcome.

use crate::error::Result;
use crate::geometry::{gt_assign, BBox, GtTrack};
use crate::math::layers::{linear_t, mlp_t, transformer_layer_t, Linear, TransformerLayer};
use crate::math::matrix::{softmax_row, Matrix};
use crate::math::tape::{NllTerm, Tape, Var};

/// Which matcher to score with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatcherKind {
    ShortTerm,
    LongTerm,
}

/// Encoder/decoder pair plus the score projection for one matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherBranch<T> {
    pub encoder: TransformerLayer<T>,
    pub decoder: TransformerLayer<T>,
    pub score_proj: Linear<T>,
}

impl<T> MatcherBranch<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MatcherBranch<U> {
        MatcherBranch {
            encoder: self.encoder.map(f),
            decoder: self.decoder.map(f),
            score_proj: self.score_proj.map(f),
        }
    }
}

/// All matcher weights: shared two-layer embedder MLP plus the two branches.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams<T> {
    pub embedder: [Linear<T>; 2],
    pub st: MatcherBranch<T>,
    pub lt: MatcherBranch<T>,
}

impl<T> MatcherParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MatcherParams<U> {
        MatcherParams {
            embedder: [self.embedder[0].map(f), self.embedder[1].map(f)],
            st: self.st.map(f),
            lt: self.lt.map(f),
        }
    }

    pub fn branch(&self, kind: MatcherKind) -> &MatcherBranch<T> {
        match kind {
            MatcherKind::ShortTerm => &self.st,
            MatcherKind::LongTerm => &self.lt,
        }
    }
}

/// Association scores between trajectory queries (rows) and current-frame
/// instances, with the null column appended last and fixed at raw score 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AssocMatrix {
    scores: Matrix,
}

impl AssocMatrix {
    fn new(scores: Matrix) -> Self {
        debug_assert!(scores.cols() >= 1);
        AssocMatrix { scores }
    }

    pub fn empty(instance_count: usize) -> Self {
        AssocMatrix {
            scores: Matrix::zeros(0, instance_count + 1),
        }
    }

    /// Trajectory-query rows.
    pub fn rows(&self) -> usize {
        self.scores.rows()
    }

    pub fn instance_count(&self) -> usize {
        self.scores.cols() - 1
    }

    pub fn null_col(&self) -> usize {
        self.scores.cols() - 1
    }

    pub fn raw(&self) -> &Matrix {
        &self.scores
    }

    /// Softmax distribution of one row over instances ∪ {∅}.
    pub fn distribution(&self, row: usize) -> Result<Vec<f64>> {
        assoc_distribution(self.scores.row(row))
    }

    /// P(instance | trajectory query) from the row softmax.
    pub fn match_probability(&self, row: usize, instance: usize) -> Result<f64> {
        Ok(self.distribution(row)?[instance])
    }
}

/// Softmax over one raw score row whose null slot (last entry) must be 0.
pub fn assoc_distribution(row: &[f64]) -> Result<Vec<f64>> {
    debug_assert_eq!(row.last(), Some(&0.0), "null slot must carry raw score 0");
    softmax_row(row)
}

/// Filtered instances of one frame, the matcher's training input.
#[derive(Debug, Clone)]
pub struct ClipFrame {
    pub frame: u64,
    pub boxes: Vec<BBox>,
    pub queries: Vec<Vec<f64>>,
}

impl ClipFrame {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Per-frame embeddings of a clip, living on a tape.
pub struct EmbeddingBatch {
    /// N×D embeddings of every filtered instance, frames concatenated.
    pub all: Var,
    /// (start row, length) per frame.
    pub spans: Vec<(usize, usize)>,
}

impl EmbeddingBatch {
    pub fn total(&self) -> usize {
        self.spans.last().map(|(s, l)| s + l).unwrap_or(0)
    }
}

/// Map instance queries to embeddings through the shared MLP.
pub fn embed(queries: &Matrix, p: &MatcherParams<Matrix>) -> Result<Matrix> {
    crate::math::layers::mlp_forward(queries, &[p.embedder[0].clone(), p.embedder[1].clone()])
}

fn embed_t(tape: &mut Tape, p: &MatcherParams<Var>, queries: Var) -> Result<Var> {
    mlp_t(tape, queries, &[&p.embedder[0], &p.embedder[1]])
}

/// Embed a whole clip onto the tape.
pub fn embed_batch_t(
    tape: &mut Tape,
    p: &MatcherParams<Var>,
    frames: &[ClipFrame],
    query_dim: usize,
) -> Result<EmbeddingBatch> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut spans = Vec::with_capacity(frames.len());
    for f in frames {
        spans.push((rows.len(), f.queries.len()));
        rows.extend(f.queries.iter().cloned());
    }
    let queries = if rows.is_empty() {
        Matrix::zeros(0, query_dim)
    } else {
        Matrix::from_rows(&rows)?
    };
    let q = tape.leaf(queries);
    let all = embed_t(tape, p, q)?;
    Ok(EmbeddingBatch { all, spans })
}

/// Raw score matrix (trajectory-query rows × current instances) for one
/// branch, given history/current embedding nodes. The null column is not yet
/// appended.
fn raw_scores_t(
    tape: &mut Tape,
    branch: &MatcherBranch<Var>,
    enhanced_history: Var,
    current: Var,
) -> Result<Var> {
    let dim = tape.value(current).cols();
    let decoded = transformer_layer_t(tape, current, enhanced_history, &branch.decoder)?;
    let projected = linear_t(tape, decoded, &branch.score_proj)?;
    let scores = tape.matmul_transpose_b(projected, enhanced_history)?;
    let scores = tape.scale(scores, 1.0 / (dim as f64).sqrt());
    Ok(tape.transpose(scores))
}

fn scores_with_null_t(
    tape: &mut Tape,
    branch: &MatcherBranch<Var>,
    history: Var,
    current: Var,
) -> Result<Var> {
    let enhanced = transformer_layer_t(tape, history, history, &branch.encoder)?;
    let raw = raw_scores_t(tape, branch, enhanced, current)?;
    Ok(tape.append_zero_col(raw))
}

/// Association scores between each history embedding (row) and each current
/// instance, with the null column appended. Empty history yields a matrix
/// with zero rows: the caller starts new trajectories.
pub fn pairwise_scores(
    current: &Matrix,
    history: &Matrix,
    which: MatcherKind,
    p: &MatcherParams<Matrix>,
) -> Result<AssocMatrix> {
    if history.rows() == 0 {
        return Ok(AssocMatrix::empty(current.rows()));
    }
    let mut tape = Tape::new();
    let branch = p.branch(which).map(&mut |m: &Matrix| tape.leaf(m.clone()));
    let cur = tape.leaf(current.clone());
    let hist = tape.leaf(history.clone());
    let scores = scores_with_null_t(&mut tape, &branch, hist, cur)?;
    Ok(AssocMatrix::new(tape.value(scores).clone()))
}

/// α̂ table: per track, per clip frame, the matched filtered-instance index.
pub fn assign_tracks(frames: &[ClipFrame], gt: &[GtTrack]) -> Vec<Vec<Option<usize>>> {
    gt.iter()
        .map(|track| {
            frames
                .iter()
                .map(|f| gt_assign(&f.boxes, track.box_at(f.frame)))
                .collect()
        })
        .collect()
}

fn matched_set(assignments: &[Vec<Option<usize>>], t: usize, len: usize) -> Vec<bool> {
    let mut matched = vec![false; len];
    for track in assignments {
        if let Some(j) = track[t] {
            matched[j] = true;
        }
    }
    matched
}

/// Short-term loss on the tape: for each track with a query at frame t−1,
/// the negative log-likelihood of its frame-t assignment; unmatched frame
/// t−1 embeddings train toward the null outcome.
pub fn st_association_loss_t(
    tape: &mut Tape,
    p: &MatcherParams<Var>,
    batch: &EmbeddingBatch,
    frames: &[ClipFrame],
    assignments: &[Vec<Option<usize>>],
) -> Result<Var> {
    let mut pieces = Vec::new();
    for t in 1..frames.len() {
        let (prev_start, prev_len) = batch.spans[t - 1];
        let (cur_start, cur_len) = batch.spans[t];
        if prev_len == 0 {
            continue;
        }
        let hist = tape.gather_rows(batch.all, (prev_start..prev_start + prev_len).collect());
        let cur = tape.gather_rows(batch.all, (cur_start..cur_start + cur_len).collect());
        let scores = scores_with_null_t(tape, &p.st, hist, cur)?;
        let null = cur_len;

        let mut terms = Vec::new();
        for track in assignments {
            if let Some(j) = track[t - 1] {
                terms.push(NllTerm {
                    row: j,
                    target: track[t].unwrap_or(null),
                    weight: 1.0,
                });
            }
        }
        let matched = matched_set(assignments, t - 1, prev_len);
        for (j, &m) in matched.iter().enumerate() {
            if !m {
                terms.push(NllTerm {
                    row: j,
                    target: null,
                    weight: 1.0,
                });
            }
        }
        if !terms.is_empty() {
            pieces.push((tape.assoc_nll(scores, terms), 1.0));
        }
    }
    Ok(tape.add_scaled(pieces))
}

/// Long-term loss on the tape: every matched embedding of a track serves as
/// a trajectory query against every clip frame; unmatched embeddings train
/// toward the null outcome at every frame.
pub fn lt_association_loss_t(
    tape: &mut Tape,
    p: &MatcherParams<Var>,
    batch: &EmbeddingBatch,
    frames: &[ClipFrame],
    assignments: &[Vec<Option<usize>>],
) -> Result<Var> {
    if batch.total() == 0 {
        return Ok(tape.add_scaled(Vec::new()));
    }
    let enhanced = transformer_layer_t(tape, batch.all, batch.all, &p.lt.encoder)?;

    // all (row, is-track, target-per-frame) queries share the same score
    // matrix per target frame
    let mut track_rows: Vec<(usize, usize)> = Vec::new(); // (global row, track idx)
    for (k, track) in assignments.iter().enumerate() {
        for (w, a) in track.iter().enumerate() {
            if let Some(j) = a {
                track_rows.push((batch.spans[w].0 + j, k));
            }
        }
    }
    let mut bg_rows: Vec<usize> = Vec::new();
    for (w, f) in frames.iter().enumerate() {
        let matched = matched_set(assignments, w, f.len());
        for (j, &m) in matched.iter().enumerate() {
            if !m {
                bg_rows.push(batch.spans[w].0 + j);
            }
        }
    }

    let mut pieces = Vec::new();
    for t in 0..frames.len() {
        let (cur_start, cur_len) = batch.spans[t];
        let cur = tape.gather_rows(batch.all, (cur_start..cur_start + cur_len).collect());
        let raw = raw_scores_t(tape, &p.lt, enhanced, cur)?;
        let scores = tape.append_zero_col(raw);
        let null = cur_len;

        let mut terms = Vec::new();
        for &(row, k) in &track_rows {
            terms.push(NllTerm {
                row,
                target: assignments[k][t].unwrap_or(null),
                weight: 1.0,
            });
        }
        for &row in &bg_rows {
            terms.push(NllTerm {
                row,
                target: null,
                weight: 1.0,
            });
        }
        if !terms.is_empty() {
            pieces.push((tape.assoc_nll(scores, terms), 1.0));
        }
    }
    Ok(tape.add_scaled(pieces))
}

/// Combined association loss on the tape.
pub fn association_loss_t(
    tape: &mut Tape,
    p: &MatcherParams<Var>,
    frames: &[ClipFrame],
    gt: &[GtTrack],
    query_dim: usize,
) -> Result<Var> {
    let batch = embed_batch_t(tape, p, frames, query_dim)?;
    let assignments = assign_tracks(frames, gt);
    let st = st_association_loss_t(tape, p, &batch, frames, &assignments)?;
    let lt = lt_association_loss_t(tape, p, &batch, frames, &assignments)?;
    Ok(tape.add_scaled(vec![(st, 1.0), (lt, 1.0)]))
}

fn bind_matcher(tape: &mut Tape, p: &MatcherParams<Matrix>) -> (MatcherParams<Var>, Vec<Var>) {
    let mut leaves = Vec::new();
    let vars = p.map(&mut |m: &Matrix| {
        let v = tape.leaf(m.clone());
        leaves.push(v);
        v
    });
    (vars, leaves)
}

fn run_matcher_loss(
    frames: &[ClipFrame],
    gt: &[GtTrack],
    p: &MatcherParams<Matrix>,
    query_dim: usize,
    which: Option<MatcherKind>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (vars, _) = bind_matcher(&mut tape, p);
    let batch = embed_batch_t(&mut tape, &vars, frames, query_dim)?;
    let assignments = assign_tracks(frames, gt);
    let loss = match which {
        Some(MatcherKind::ShortTerm) => {
            st_association_loss_t(&mut tape, &vars, &batch, frames, &assignments)?
        }
        Some(MatcherKind::LongTerm) => {
            lt_association_loss_t(&mut tape, &vars, &batch, frames, &assignments)?
        }
        None => {
            let st = st_association_loss_t(&mut tape, &vars, &batch, frames, &assignments)?;
            let lt = lt_association_loss_t(&mut tape, &vars, &batch, frames, &assignments)?;
            tape.add_scaled(vec![(st, 1.0), (lt, 1.0)])
        }
    };
    Ok(tape.scalar(loss))
}

/// Short-term association + background loss for a clip.
pub fn st_association_loss(
    frames: &[ClipFrame],
    gt: &[GtTrack],
    p: &MatcherParams<Matrix>,
    query_dim: usize,
) -> Result<f64> {
    run_matcher_loss(frames, gt, p, query_dim, Some(MatcherKind::ShortTerm))
}

/// Long-term association + background loss for a clip.
pub fn lt_association_loss(
    frames: &[ClipFrame],
    gt: &[GtTrack],
    p: &MatcherParams<Matrix>,
    query_dim: usize,
) -> Result<f64> {
    run_matcher_loss(frames, gt, p, query_dim, Some(MatcherKind::LongTerm))
}

/// Full association loss (short-term + long-term, association + background).
pub fn association_loss(
    frames: &[ClipFrame],
    gt: &[GtTrack],
    p: &MatcherParams<Matrix>,
    query_dim: usize,
) -> Result<f64> {
    run_matcher_loss(frames, gt, p, query_dim, None)
}

/// Association loss with gradients for every matcher parameter.
pub fn association_loss_grad(
    frames: &[ClipFrame],
    gt: &[GtTrack],
    p: &MatcherParams<Matrix>,
    query_dim: usize,
) -> Result<(f64, MatcherParams<Matrix>)> {
    let mut tape = Tape::new();
    let (vars, leaves) = bind_matcher(&mut tape, p);
    let loss = association_loss_t(&mut tape, &vars, frames, gt, query_dim)?;
    let value = tape.scalar(loss);
    let grads = tape.gradients_for(loss, &leaves)?;
    let mut it = grads.into_iter();
    let grad = p.map(&mut |_| it.next().expect("gradient per leaf"));
    Ok((value, grad))
}
