use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Stream, TrainExample};

/// Which stream feeds each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Only(Stream),
    /// `ratio` caption steps, then one instruction step, repeating.
    Interleaved { ratio: usize },
}

impl Schedule {
    pub fn only(stream: Stream) -> Self {
        Schedule::Only(stream)
    }

    pub fn interleaved(ratio: usize) -> Self {
        Schedule::Interleaved { ratio: ratio.max(1) }
    }

    pub fn stream_at(&self, step: usize) -> Stream {
        match *self {
            Schedule::Only(s) => s,
            Schedule::Interleaved { ratio } => {
                if step % (ratio + 1) < ratio {
                    Stream::Caption
                } else {
                    Stream::Instruction
                }
            }
        }
    }

    pub fn uses(&self, stream: Stream) -> bool {
        match *self {
            Schedule::Only(s) => s == stream,
            Schedule::Interleaved { .. } => true,
        }
    }
}

/// Endless batches over a dataset: a seeded permutation per epoch,
/// reshuffled whenever it runs out.
pub struct StreamCursor<'d> {
    data: &'d [TrainExample],
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    epochs: usize,
}

impl<'d> StreamCursor<'d> {
    pub fn new(data: &'d [TrainExample], seed: u64) -> Self {
        let mut c = Self {
            data,
            order: (0..data.len()).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epochs: 0,
        };
        c.order.shuffle(&mut c.rng);
        c
    }

    /// Completed passes over the data.
    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<&'d TrainExample> {
        let mut out = Vec::with_capacity(size);
        if self.data.is_empty() {
            return out;
        }
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epochs += 1;
            }
            out.push(&self.data[self.order[self.pos]]);
            self.pos += 1;
        }
        out
    }
}
