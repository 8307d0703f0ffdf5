use rand::seq::SliceRandom;

use crate::diffcore::rng::StreamKey;
use crate::error::{Error, Result};
use crate::textdata::{PAD, SOS};

/// Padded batch of encoded sequences (`<sos> … <eos>`), row-major `B×L`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    ids: Vec<usize>,
    lengths: Vec<usize>,
    width: usize,
}

impl SequenceBatch {
    /// Pads `seqs` with `<pad>` to the longest length.
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("cannot batch zero sequences".into()));
        }
        if let Some(s) = seqs.iter().find(|s| s.len() < 2 || s[0] != SOS) {
            return Err(Error::InvalidArgument(format!(
                "sequence {s:?} is not framed by <sos> ... <eos>"
            )));
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        Self::with_width(seqs, width)
    }

    /// Pads to an explicit width (at least the longest sequence).
    pub fn with_width(seqs: &[Vec<usize>], width: usize) -> Result<Self> {
        let longest = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if width < longest {
            return Err(Error::InvalidArgument(format!("width {width} < longest sequence {longest}")));
        }
        let mut ids = vec![PAD; seqs.len() * width];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * width..b * width + s.len()].copy_from_slice(s);
        }
        Ok(Self {
            ids,
            lengths: seqs.iter().map(Vec::len).collect(),
            width,
        })
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    /// Padded length `L`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn id(&self, b: usize, t: usize) -> usize {
        self.ids[b * self.width + t]
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.width..b * self.width + self.lengths[b]]
    }

    /// `true` at real (non-pad) positions.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.rows())
            .flat_map(|b| (0..self.width).map(move |t| t < self.lengths[b]))
            .collect()
    }

    /// Number of decoder input positions `L - 1`.
    pub fn input_width(&self) -> usize {
        self.width - 1
    }

    /// Decoder inputs (positions `0..L-1`) in time-major order `t * B + b`.
    pub fn inputs_time_major(&self) -> Vec<usize> {
        self.time_major(0)
    }

    /// Decoder targets (positions `1..L`) in time-major order.
    pub fn targets_time_major(&self) -> Vec<usize> {
        self.time_major(1)
    }

    /// All `L` positions in time-major order.
    pub fn all_time_major(&self) -> Vec<usize> {
        (0..self.width)
            .flat_map(|t| (0..self.rows()).map(move |b| self.id(b, t)))
            .collect()
    }

    fn time_major(&self, offset: usize) -> Vec<usize> {
        (0..self.input_width())
            .flat_map(|t| (0..self.rows()).map(move |b| self.id(b, t + offset)))
            .collect()
    }

    /// Row-major `B×(L-1)` flags of decoder inputs that may be dropped:
    /// `<sos>` and every word, never `<eos>` or padding.
    pub fn eligible(&self) -> Vec<bool> {
        (0..self.rows())
            .flat_map(|b| (0..self.input_width()).map(move |t| t + 1 < self.lengths[b]))
            .collect()
    }

    pub fn eligible_counts(&self) -> Vec<usize> {
        self.lengths.iter().map(|&n| n - 1).collect()
    }

    /// Number of predicted tokens (words plus `<eos>`).
    pub fn target_count(&self) -> usize {
        self.lengths.iter().map(|&n| n - 1).sum()
    }
}

/// Example ordering within an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OrderPolicy {
    Sequential,
    #[default]
    Shuffled,
    /// Shuffle, then group sequences of similar length into the same batch.
    Bucketed,
}

/// Splits example indices `0..lengths.len()` into batches for one epoch.
pub fn epoch_batches(
    lengths: &[usize],
    batch_size: usize,
    policy: OrderPolicy,
    key: StreamKey,
) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    let mut rng = key.rng();
    if policy != OrderPolicy::Sequential {
        order.shuffle(&mut rng);
    }
    if policy == OrderPolicy::Bucketed {
        for window in order.chunks_mut(batch_size * 50) {
            window.sort_by_key(|&i| lengths[i]);
        }
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if policy == OrderPolicy::Bucketed {
        batches.shuffle(&mut rng);
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pads_to_longest() {
        let b = SequenceBatch::new(&[vec![1, 5, 2], vec![1, 2]]).unwrap();
        assert_eq!(b.ids(), &[1, 5, 2, 1, 2, 0]);
        assert_eq!(b.lengths(), &[3, 2]);
        assert_eq!(b.pad_mask(), vec![true, true, true, true, true, false]);
        assert_eq!(b.eligible(), vec![true, true, true, false]);
        assert_eq!(b.inputs_time_major(), vec![1, 1, 5, 2]);
        assert_eq!(b.targets_time_major(), vec![5, 2, 2, 0]);
    }

    #[test]
    fn single_sequence_has_no_padding() {
        let b = SequenceBatch::new(&[vec![1, 7, 8, 2]]).unwrap();
        assert!(b.pad_mask().iter().all(|&m| m));
        assert!(SequenceBatch::new(&[]).is_err());
    }

    #[test]
    fn epoch_batches_cover_every_index_once() {
        let lengths: Vec<usize> = (0..103).map(|i| 3 + i % 7).collect();
        for policy in [OrderPolicy::Sequential, OrderPolicy::Shuffled, OrderPolicy::Bucketed] {
            let key = StreamKey::new(3, "epoch");
            let bs = epoch_batches(&lengths, 10, policy, key);
            assert_eq!(bs, epoch_batches(&lengths, 10, policy, key));
            let mut all: Vec<usize> = bs.concat();
            all.sort();
            assert_eq!(all, (0..103).collect::<Vec<_>>());
        }
    }

    proptest! {
        #[test]
        fn pad_mask_counts_equal_lengths(lens in prop::collection::vec(2usize..9, 1..6)) {
            let seqs: Vec<Vec<usize>> = lens
                .iter()
                .map(|&n| {
                    let mut s = vec![SOS];
                    s.extend(std::iter::repeat_n(7, n - 2));
                    s.push(2);
                    s
                })
                .collect();
            let b = SequenceBatch::new(&seqs).unwrap();
            let mask = b.pad_mask();
            for (r, &n) in lens.iter().enumerate() {
                let row = &mask[r * b.width()..(r + 1) * b.width()];
                prop_assert_eq!(row.iter().filter(|&&m| m).count(), n);
                for t in 0..b.width() {
                    prop_assert_eq!(b.id(r, t) == PAD, t >= n);
                }
            }
        }
    }
}
