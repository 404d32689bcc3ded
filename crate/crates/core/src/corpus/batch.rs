use autodiff::RngStream;

use super::vocab::PAD;

/// Example indices grouped into minibatches after an rng-driven shuffle.
pub fn batch_iterate(n_examples: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n_examples).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Id sequences right-padded with PAD, plus their true lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `keep[i * B + b]` is true when step `i` of row `b` is real.
    pub fn time_major_mask(&self) -> Vec<bool> {
        let b = self.len();
        let mut keep = vec![false; self.max_len * b];
        for (row, &len) in self.lengths.iter().enumerate() {
            for i in 0..len {
                keep[i * b + row] = true;
            }
        }
        keep
    }

    /// Ids in time-major order, matching [`PaddedBatch::time_major_mask`].
    pub fn time_major_ids(&self) -> Vec<usize> {
        let b = self.len();
        let mut out = vec![PAD; self.max_len * b];
        for (row, seq) in self.ids.iter().enumerate() {
            for (i, &id) in seq.iter().enumerate() {
                out[i * b + row] = id;
            }
        }
        out
    }
}

pub fn pad_sequences(seqs: &[Vec<usize>]) -> PaddedBatch {
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let ids = seqs
        .iter()
        .map(|s| {
            let mut row = s.clone();
            row.resize(max_len, PAD);
            row
        })
        .collect();
    PaddedBatch { ids, lengths, max_len }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes() {
        let mut rng = RngStream::new(3);
        let sizes: Vec<usize> = batch_iterate(5, 2, &mut rng).iter().map(Vec::len).collect();
        assert_eq!(sizes, [2, 2, 1]);
    }

    #[test]
    fn same_seed_same_order() {
        let a = batch_iterate(50, 7, &mut RngStream::new(11));
        let b = batch_iterate(50, 7, &mut RngStream::new(11));
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn padding_and_time_major_layout() {
        let p = pad_sequences(&[vec![5, 6, 7], vec![8]]);
        assert_eq!(p.ids, vec![vec![5, 6, 7], vec![8, PAD, PAD]]);
        assert_eq!(p.lengths, [3, 1]);
        assert_eq!(p.time_major_ids(), [5, 8, 6, PAD, 7, PAD]);
        assert_eq!(p.time_major_mask(), [true, true, true, false, true, false]);
    }
}
