//! Swap-in prediction.
//!
//! Transfers are classified by size. Swap traffic feeds a history of
//! swap-in batches (a batch is the set of copies between two sync calls,
//! unordered internally) and the set of outstanding blocks (swapped out, not
//! yet returned). Three patterns are recognized:
//!
//! * repetitive: the flat swap-in sequence repeats a cycle of distinct blocks
//!   (model offloading walks the same layers every iteration);
//! * LIFO: each batch returns the most recently swapped-out blocks
//!   (request-wise KV-cache swapping);
//! * FIFO: each batch returns the oldest outstanding blocks
//!   (layer-wise KV-cache swapping).
//!
//! When several fit, repetitive wins over LIFO, which wins over FIFO.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory_model::BlockId;
use crate::secure_channel::MAX_MESSAGE_BYTES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferClass {
    SwapModelWeights,
    SwapKvCache,
    SmallIo,
}

impl TransferClass {
    pub fn is_swap(self) -> bool {
        !matches!(self, TransferClass::SmallIo)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub layer_param_bytes: u64,
    pub kv_block_bytes: u64,
}

impl ModelProfile {
    pub fn new(name: impl Into<String>, layer_param_bytes: u64, kv_block_bytes: u64) -> Self {
        ModelProfile {
            name: name.into(),
            layer_param_bytes,
            kv_block_bytes,
        }
    }
}

impl Default for ModelProfile {
    fn default() -> Self {
        ModelProfile::new("desk", 4 << 20, 1 << 20)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub small_io_threshold: u64,
    pub swap_min: u64,
    pub chunk_bytes: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            small_io_threshold: 8 << 10,
            swap_min: 128 << 10,
            chunk_bytes: MAX_MESSAGE_BYTES,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PredictorError {
    #[error("profile {0:?} uses the same size for layers and KV blocks")]
    AmbiguousProfile(String),
    #[error("swap-in of block {0} that was never swapped out")]
    UnknownBlock(BlockId),
    #[error("transfer size must be positive")]
    ZeroSize,
}

/// Message sizes a transfer of `total` bytes produces after chunking.
pub fn chunk_sizes(total: u64, chunk: u64) -> Vec<u64> {
    if total <= chunk {
        return vec![total];
    }
    let mut sizes = vec![chunk];
    if !total.is_multiple_of(chunk) {
        sizes.push(total % chunk);
    }
    sizes
}

/// Number of channel messages needed for `total` bytes.
pub fn chunk_count(total: u64, chunk: u64) -> u64 {
    total.div_ceil(chunk).max(1)
}

pub fn classify(
    size: u64,
    profile: &ModelProfile,
    thresholds: &Thresholds,
) -> Result<TransferClass, PredictorError> {
    if profile.layer_param_bytes == profile.kv_block_bytes {
        return Err(PredictorError::AmbiguousProfile(profile.name.clone()));
    }
    if size == 0 {
        return Err(PredictorError::ZeroSize);
    }
    let chunk = thresholds.chunk_bytes;
    if size == profile.layer_param_bytes
        || chunk_sizes(profile.layer_param_bytes, chunk).contains(&size)
    {
        return Ok(TransferClass::SwapModelWeights);
    }
    if size == profile.kv_block_bytes || chunk_sizes(profile.kv_block_bytes, chunk).contains(&size)
    {
        return Ok(TransferClass::SwapKvCache);
    }
    if size >= thresholds.small_io_threshold {
        log::warn!(
            "transfer of {size} bytes matches no swap unit of profile {:?}; treating as small I/O",
            profile.name
        );
    }
    Ok(TransferClass::SmallIo)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapBatch {
    /// Blocks in the order they were requested (the order carries no meaning
    /// for the application).
    pub blocks: Vec<BlockId>,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Pattern {
    Repetitive { cycle: Vec<BlockId> },
    Lifo,
    Fifo,
    Unknown,
}

impl Pattern {
    pub fn name(&self) -> &'static str {
        match self {
            Pattern::Repetitive { .. } => "repetitive",
            Pattern::Lifo => "lifo",
            Pattern::Fifo => "fifo",
            Pattern::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternHypothesis {
    pub pattern: Pattern,
    pub confidence: u32,
}

impl PatternHypothesis {
    pub fn unknown() -> Self {
        PatternHypothesis {
            pattern: Pattern::Unknown,
            confidence: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub block: BlockId,
    pub predicted_iv: u64,
    pub leeway: u64,
    /// Channel messages (and therefore IVs) the block occupies.
    pub iv_span: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LeewayPolicy {
    Fixed {
        ivs: u64,
    },
    /// Lead slack is the largest recently measured slack between planning
    /// and batch start; the inter-batch gap is the lower median of recent
    /// gaps. Both capped at `max`.
    Adaptive {
        max: u64,
    },
}

impl Default for LeewayPolicy {
    fn default() -> Self {
        LeewayPolicy::Adaptive { max: 8 }
    }
}

/// Structured predictor decision, exported with run reports.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PredictorLog {
    Lock {
        batch: u64,
        pattern: String,
        confidence: u32,
    },
    Contradiction {
        batch: u64,
        pattern: String,
    },
}

const GAP_WINDOW: usize = 8;

#[derive(Clone, Debug)]
struct ClosedBatch {
    batch: SwapBatch,
    lifo_ok: bool,
    fifo_ok: bool,
}

#[derive(Clone, Debug)]
pub struct Predictor {
    chunk_bytes: u64,
    leeway: LeewayPolicy,
    /// Outstanding blocks by swap-out sequence number (oldest first).
    outstanding: BTreeMap<u64, BlockId>,
    outstanding_info: HashMap<BlockId, (u64, u64)>,
    next_out_seq: u64,
    history: Vec<ClosedBatch>,
    open: Vec<BlockId>,
    open_snapshot: Vec<BlockId>,
    flat: Vec<BlockId>,
    epoch_batch: usize,
    epoch_flat: usize,
    hypothesis: PatternHypothesis,
    recent_gaps: VecDeque<u64>,
    recent_slack: VecDeque<u64>,
    gap_since_batch: u64,
    log: Vec<PredictorLog>,
}

impl Predictor {
    pub fn new(chunk_bytes: u64, leeway: LeewayPolicy) -> Self {
        Predictor {
            chunk_bytes,
            leeway,
            outstanding: BTreeMap::new(),
            outstanding_info: HashMap::new(),
            next_out_seq: 0,
            history: Vec::new(),
            open: Vec::new(),
            open_snapshot: Vec::new(),
            flat: Vec::new(),
            epoch_batch: 0,
            epoch_flat: 0,
            hypothesis: PatternHypothesis::unknown(),
            recent_gaps: VecDeque::new(),
            recent_slack: VecDeque::new(),
            gap_since_batch: 0,
            log: Vec::new(),
        }
    }

    pub fn observe_swap_out(&mut self, block: BlockId, len: u64) {
        if let Some((seq, _)) = self.outstanding_info.remove(&block) {
            self.outstanding.remove(&seq);
        }
        let seq = self.next_out_seq;
        self.next_out_seq += 1;
        self.outstanding.insert(seq, block);
        self.outstanding_info.insert(block, (seq, len));
    }

    /// Record one swap-in request of the currently open batch.
    pub fn observe_swap_in(&mut self, block: BlockId) -> Result<(), PredictorError> {
        let (seq, _) = self
            .outstanding_info
            .remove(&block)
            .ok_or(PredictorError::UnknownBlock(block))?;
        if self.open.is_empty() {
            self.open_snapshot = self.outstanding.values().copied().collect();
            self.recent_gaps.push_back(self.gap_since_batch);
            if self.recent_gaps.len() > GAP_WINDOW {
                self.recent_gaps.pop_front();
            }
        }
        self.gap_since_batch = 0;
        self.outstanding.remove(&seq);
        self.open.push(block);
        self.flat.push(block);
        Ok(())
    }

    /// Record a whole batch at once.
    pub fn observe_swap_in_batch(&mut self, batch: &SwapBatch) -> Result<(), PredictorError> {
        for b in &batch.blocks {
            self.observe_swap_in(*b)?;
        }
        self.close_batch();
        Ok(())
    }

    /// An IV was consumed by a transfer the predictor did not foresee.
    pub fn note_unpredicted_iv(&mut self) {
        self.gap_since_batch += 1;
    }

    /// Sync boundary: close the open batch and refresh the hypothesis.
    pub fn close_batch(&mut self) {
        if self.open.is_empty() {
            return;
        }
        let blocks = std::mem::take(&mut self.open);
        let snapshot = std::mem::take(&mut self.open_snapshot);
        let k = blocks.len();
        let mut sorted = blocks.clone();
        sorted.sort();
        let set_eq = |slice: &[BlockId]| {
            let mut s = slice.to_vec();
            s.sort();
            s == sorted
        };
        let lifo_ok = snapshot.len() >= k && set_eq(&snapshot[snapshot.len() - k..]);
        let fifo_ok = snapshot.len() >= k && set_eq(&snapshot[..k]);
        let seq = self.history.len() as u64;
        self.history.push(ClosedBatch {
            batch: SwapBatch { blocks, seq },
            lifo_ok,
            fifo_ok,
        });

        let before = self.hypothesis.clone();
        let mut next = self.recognize();
        if before.pattern != Pattern::Unknown && !self.consistent_with(&before.pattern) {
            self.log.push(PredictorLog::Contradiction {
                batch: seq,
                pattern: before.pattern.name().to_string(),
            });
            // Restart warmup with the contradicting batch as first evidence.
            self.epoch_batch = self.history.len() - 1;
            self.epoch_flat = self.flat.len() - k;
            next = self.recognize();
        }
        if next.pattern != Pattern::Unknown && next.pattern != before.pattern {
            self.log.push(PredictorLog::Lock {
                batch: seq,
                pattern: next.pattern.name().to_string(),
                confidence: next.confidence,
            });
        }
        self.hypothesis = next;
    }

    fn consistent_with(&self, pattern: &Pattern) -> bool {
        let last = self.history.last().expect("called after push");
        match pattern {
            Pattern::Lifo => last.lifo_ok,
            Pattern::Fifo => last.fifo_ok,
            Pattern::Repetitive { cycle } => {
                let epoch = &self.flat[self.epoch_flat..];
                is_periodic(epoch, cycle.len())
            }
            Pattern::Unknown => true,
        }
    }

    /// Classify the evidence gathered since the last contradiction.
    pub fn recognize(&self) -> PatternHypothesis {
        let seq = &self.flat[self.epoch_flat..];
        if let Some(period) = smallest_cycle(seq) {
            return PatternHypothesis {
                pattern: Pattern::Repetitive {
                    cycle: seq[..period].to_vec(),
                },
                confidence: (seq.len() - period) as u32,
            };
        }
        // Only the trailing run of agreeing batches counts as evidence.
        let batches = &self.history[self.epoch_batch..];
        let lifo = batches.iter().rev().take_while(|b| b.lifo_ok).count();
        let fifo = batches.iter().rev().take_while(|b| b.fifo_ok).count();
        if lifo >= 2 && lifo >= fifo {
            return PatternHypothesis {
                pattern: Pattern::Lifo,
                confidence: lifo as u32,
            };
        }
        if fifo >= 2 {
            return PatternHypothesis {
                pattern: Pattern::Fifo,
                confidence: fifo as u32,
            };
        }
        PatternHypothesis::unknown()
    }

    pub fn hypothesis(&self) -> &PatternHypothesis {
        &self.hypothesis
    }

    pub fn outstanding(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.outstanding.values().copied()
    }

    pub fn is_outstanding(&self, block: BlockId) -> bool {
        self.outstanding_info.contains_key(&block)
    }

    pub fn block_len(&self, block: BlockId) -> Option<u64> {
        self.outstanding_info.get(&block).map(|(_, len)| *len)
    }

    pub fn history(&self) -> impl Iterator<Item = &SwapBatch> {
        self.history.iter().map(|c| &c.batch)
    }

    pub fn open_batch(&self) -> &[BlockId] {
        &self.open
    }

    pub fn log(&self) -> &[PredictorLog] {
        &self.log
    }

    /// Unpredicted IVs consumed since the last swap-in.
    pub fn gap_since_batch(&self) -> u64 {
        self.gap_since_batch
    }

    /// Records the IVs consumed between planning a batch and its first swap-in.
    pub fn note_slack(&mut self, ivs: u64) {
        self.recent_slack.push_back(ivs);
        if self.recent_slack.len() > GAP_WINDOW {
            self.recent_slack.pop_front();
        }
    }

    /// IVs to leave free before the first planned batch.
    pub fn leeway(&self) -> u64 {
        match self.leeway {
            LeewayPolicy::Fixed { ivs } => ivs,
            LeewayPolicy::Adaptive { max } => self
                .recent_slack
                .iter()
                .copied()
                .max()
                .unwrap_or(0)
                .min(max),
        }
    }

    /// IVs to leave free between consecutive planned batches.
    pub fn batch_gap(&self) -> u64 {
        match self.leeway {
            LeewayPolicy::Fixed { ivs } => ivs,
            LeewayPolicy::Adaptive { max } => {
                let mut v: Vec<u64> = self.recent_gaps.iter().copied().collect();
                if v.is_empty() {
                    return 0;
                }
                v.sort_unstable();
                v[(v.len() - 1) / 2].min(max)
            }
        }
    }

    /// Size of the next batch, taken from the last closed one.
    pub fn expected_batch_size(&self) -> usize {
        self.history
            .last()
            .map_or(1, |b| b.batch.blocks.len())
            .max(1)
    }

    /// Blocks expected next, in request order: the rest of the open batch
    /// followed by `depth` further batches. Only outstanding blocks appear.
    pub fn predicted_order(&self, depth: usize) -> Vec<BlockId> {
        let k = self.expected_batch_size();
        let rest = if self.open.is_empty() {
            0
        } else {
            k.saturating_sub(self.open.len())
        };
        let want = rest + depth * k;
        if want == 0 {
            return Vec::new();
        }
        match &self.hypothesis.pattern {
            Pattern::Unknown => Vec::new(),
            Pattern::Lifo => self
                .outstanding
                .values()
                .rev()
                .take(want)
                .copied()
                .collect(),
            Pattern::Fifo => self.outstanding.values().take(want).copied().collect(),
            Pattern::Repetitive { cycle } => {
                let Some(last) = self.flat.last() else {
                    return Vec::new();
                };
                let Some(pos) = cycle.iter().position(|b| b == last) else {
                    return Vec::new();
                };
                (1..=cycle.len())
                    .map(|step| cycle[(pos + step) % cycle.len()])
                    .take_while(|b| self.is_outstanding(*b))
                    .take(want)
                    .collect()
            }
        }
    }

    /// Predictions with IVs assigned back to back from
    /// `current_iv + leeway`.
    pub fn predict_next(&self, current_iv: u64, leeway: u64, depth: usize) -> Vec<Prediction> {
        let mut iv = current_iv + leeway;
        self.predicted_order(depth)
            .into_iter()
            .map(|block| {
                let span = chunk_count(self.block_len(block).unwrap_or(1), self.chunk_bytes);
                let p = Prediction {
                    block,
                    predicted_iv: iv,
                    leeway,
                    iv_span: span,
                };
                iv += span;
                p
            })
            .collect()
    }
}

fn is_periodic(seq: &[BlockId], period: usize) -> bool {
    period > 0 && (period..seq.len()).all(|i| seq[i] == seq[i - period])
}

/// Smallest period `p` such that `seq` repeats its first `p` (distinct)
/// elements and at least one element past the first cycle was observed.
fn smallest_cycle(seq: &[BlockId]) -> Option<usize> {
    (1..seq.len()).find(|&p| {
        let head = &seq[..p];
        let distinct = head.iter().collect::<std::collections::HashSet<_>>().len() == p;
        distinct && is_periodic(seq, p)
    })
}

/// Positional comparison of predicted and actual swap-in order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub scored: u64,
    pub hits: u64,
}

impl SequenceScore {
    pub fn record(&mut self, predicted: &[BlockId], actual: &[BlockId]) {
        for (i, a) in actual.iter().enumerate() {
            self.scored += 1;
            if predicted.get(i) == Some(a) {
                self.hits += 1;
            }
        }
    }

    pub fn rate(&self) -> f64 {
        if self.scored == 0 {
            0.0
        } else {
            self.hits as f64 / self.scored as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u64]) -> Vec<BlockId> {
        v.iter().map(|&x| BlockId(x)).collect()
    }

    fn predictor() -> Predictor {
        Predictor::new(MAX_MESSAGE_BYTES, LeewayPolicy::Fixed { ivs: 0 })
    }

    #[test]
    fn classify_by_size() {
        let profile = ModelProfile::new("t", 4 << 20, 1 << 20);
        let th = Thresholds::default();
        assert_eq!(
            classify(4096, &profile, &th).unwrap(),
            TransferClass::SmallIo
        );
        assert_eq!(
            classify(4 << 20, &profile, &th).unwrap(),
            TransferClass::SwapModelWeights
        );
        assert_eq!(
            classify(1 << 20, &profile, &th).unwrap(),
            TransferClass::SwapKvCache
        );
        assert_eq!(
            classify(200 << 10, &profile, &th).unwrap(),
            TransferClass::SmallIo
        );
        assert_eq!(
            classify(0, &profile, &th).unwrap_err(),
            PredictorError::ZeroSize
        );
    }

    #[test]
    fn classify_chunked_kv_block() {
        // A KV block spanning several chunks: every message size it produces
        // classifies as KV.
        let profile = ModelProfile::new("big", 5 << 20, (2 << 20) + 12_345);
        let th = Thresholds {
            chunk_bytes: 1 << 20,
            ..Thresholds::default()
        };
        let sizes = chunk_sizes(profile.kv_block_bytes, th.chunk_bytes);
        assert_eq!(sizes, vec![1 << 20, 12_345]);
        // The full-chunk size is shared with the layer profile, so only the
        // remainder and the whole block are unambiguous KV sizes.
        assert_eq!(
            classify(12_345, &profile, &th).unwrap(),
            TransferClass::SwapKvCache
        );
        assert_eq!(
            classify(profile.kv_block_bytes, &profile, &th).unwrap(),
            TransferClass::SwapKvCache
        );
    }

    #[test]
    fn ambiguous_profile_rejected() {
        let profile = ModelProfile::new("same", 1 << 20, 1 << 20);
        assert!(matches!(
            classify(10, &profile, &Thresholds::default()),
            Err(PredictorError::AmbiguousProfile(_))
        ));
    }

    #[test]
    fn outstanding_tracking() {
        let mut p = predictor();
        p.observe_swap_out(BlockId(1), 10);
        assert_eq!(p.outstanding().collect::<Vec<_>>(), ids(&[1]));
        p.observe_swap_in_batch(&SwapBatch {
            blocks: ids(&[1]),
            seq: 0,
        })
        .unwrap();
        assert_eq!(p.outstanding().count(), 0);
        assert_eq!(
            p.observe_swap_in(BlockId(9)).unwrap_err(),
            PredictorError::UnknownBlock(BlockId(9))
        );
    }

    /// Offload cycle over layers 1, 3, 4: initial swap-out of all, then each
    /// layer is swapped in, computed, and swapped back out.
    fn feed_offload(p: &mut Predictor, iterations: usize) {
        for l in [1, 3, 4] {
            p.observe_swap_out(BlockId(l), 10);
        }
        for _ in 0..iterations {
            for l in [1, 3, 4] {
                p.observe_swap_in(BlockId(l)).unwrap();
                p.close_batch();
                p.observe_swap_out(BlockId(l), 10);
            }
        }
    }

    #[test]
    fn recognizes_repetitive_cycle() {
        let mut p = predictor();
        feed_offload(&mut p, 2);
        assert_eq!(
            p.hypothesis().pattern,
            Pattern::Repetitive {
                cycle: ids(&[1, 3, 4])
            }
        );
    }

    #[test]
    fn repetitive_predicts_following_layer() {
        let mut p = predictor();
        feed_offload(&mut p, 2);
        p.observe_swap_in(BlockId(1)).unwrap();
        p.close_batch();
        let preds = p.predict_next(20, 0, 1);
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].block, BlockId(3));
        assert_eq!(preds[0].predicted_iv, 20);
    }

    #[test]
    fn recognizes_lifo() {
        let mut p = predictor();
        for r in [1, 2, 3] {
            p.observe_swap_out(BlockId(r), 10);
        }
        assert_eq!(p.predict_next(0, 0, 3), vec![]);
        for r in [3, 2] {
            p.observe_swap_in_batch(&SwapBatch {
                blocks: ids(&[r]),
                seq: 0,
            })
            .unwrap();
        }
        assert_eq!(p.hypothesis().pattern, Pattern::Lifo);
        p.observe_swap_in_batch(&SwapBatch {
            blocks: ids(&[1]),
            seq: 0,
        })
        .unwrap();
        assert_eq!(p.hypothesis().pattern, Pattern::Lifo);
    }

    #[test]
    fn lifo_prediction_order() {
        let mut p = predictor();
        // Two warmup episodes lock LIFO.
        for r in [10, 11] {
            p.observe_swap_out(BlockId(r), 10);
        }
        for r in [11, 10] {
            p.observe_swap_in_batch(&SwapBatch {
                blocks: ids(&[r]),
                seq: 0,
            })
            .unwrap();
        }
        for r in [1, 2, 3] {
            p.observe_swap_out(BlockId(r), 10);
        }
        let preds = p.predict_next(5, 2, 3);
        assert_eq!(
            preds.iter().map(|p| p.block).collect::<Vec<_>>(),
            ids(&[3, 2, 1])
        );
        assert_eq!(
            preds.iter().map(|p| p.predicted_iv).collect::<Vec<_>>(),
            vec![7, 8, 9]
        );
    }

    #[test]
    fn recognizes_fifo() {
        let mut p = predictor();
        for l in 1..=4 {
            p.observe_swap_out(BlockId(l), 10);
        }
        for l in 1..=2 {
            p.observe_swap_in_batch(&SwapBatch {
                blocks: ids(&[l]),
                seq: 0,
            })
            .unwrap();
        }
        assert_eq!(p.hypothesis().pattern, Pattern::Fifo);
        assert_eq!(p.predicted_order(2), ids(&[3, 4]));
    }

    #[test]
    fn contradiction_resets_to_unknown() {
        let mut p = predictor();
        for r in 1..=5 {
            p.observe_swap_out(BlockId(r), 10);
        }
        for r in [5, 4] {
            p.observe_swap_in_batch(&SwapBatch {
                blocks: ids(&[r]),
                seq: 0,
            })
            .unwrap();
        }
        assert_eq!(p.hypothesis().pattern, Pattern::Lifo);
        // Oldest outstanding comes back: not LIFO.
        p.observe_swap_in_batch(&SwapBatch {
            blocks: ids(&[1]),
            seq: 0,
        })
        .unwrap();
        assert_eq!(p.hypothesis().pattern, Pattern::Unknown);
        assert!(matches!(
            p.log().last(),
            Some(PredictorLog::Contradiction { .. })
        ));
        assert!(p.predict_next(0, 0, 1).is_empty());
    }

    #[test]
    fn unordered_batches_check_as_sets() {
        let mut p = predictor();
        for r in 1..=6 {
            p.observe_swap_out(BlockId(r), 10);
        }
        p.observe_swap_in_batch(&SwapBatch {
            blocks: ids(&[5, 6]),
            seq: 0,
        })
        .unwrap();
        p.observe_swap_in_batch(&SwapBatch {
            blocks: ids(&[3, 4]),
            seq: 1,
        })
        .unwrap();
        assert_eq!(p.hypothesis().pattern, Pattern::Lifo);
        assert_eq!(p.predicted_order(1), ids(&[2, 1]));
    }

    #[test]
    fn chunked_predictions_reserve_spans() {
        let mut p = Predictor::new(4, LeewayPolicy::Fixed { ivs: 0 });
        for r in 1..=3 {
            p.observe_swap_out(BlockId(r), 10); // 3 chunks each
        }
        for r in [3, 2] {
            p.observe_swap_in_batch(&SwapBatch {
                blocks: ids(&[r]),
                seq: 0,
            })
            .unwrap();
        }
        p.observe_swap_out(BlockId(7), 4);
        let preds = p.predict_next(100, 0, 2);
        assert_eq!(
            preds
                .iter()
                .map(|p| (p.block.0, p.predicted_iv, p.iv_span))
                .collect::<Vec<_>>(),
            vec![(7, 100, 1), (1, 101, 3)]
        );
    }

    #[test]
    fn adaptive_leeway_tracks_gaps() {
        let mut p = Predictor::new(MAX_MESSAGE_BYTES, LeewayPolicy::Adaptive { max: 8 });
        for r in 1..=3 {
            p.observe_swap_out(BlockId(r), 10);
        }
        p.note_unpredicted_iv();
        p.note_unpredicted_iv();
        p.observe_swap_in(BlockId(3)).unwrap();
        p.close_batch();
        assert_eq!(p.batch_gap(), 2);
        for _ in 0..20 {
            p.note_unpredicted_iv();
        }
        p.observe_swap_in(BlockId(2)).unwrap();
        assert_eq!(p.batch_gap(), 2);
        assert_eq!(p.leeway(), 0);
        p.note_slack(3);
        p.note_slack(30);
        assert_eq!(p.leeway(), 8);
    }

    #[test]
    fn sequence_score_is_positional() {
        let mut s = SequenceScore::default();
        s.record(&ids(&[1, 2, 3]), &ids(&[2, 3, 1]));
        assert_eq!(s, SequenceScore { scored: 3, hits: 0 });
        s.record(&ids(&[4]), &ids(&[4]));
        assert_eq!(s.hits, 1);
    }
}
