//! Byte tokenization, chunking and batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::model::{BOS, MASK_ID};

/// BOS followed by the raw bytes of one document.
pub fn tokenize(bytes: &[u8]) -> Vec<u16> {
    let mut out = Vec::with_capacity(bytes.len() + 1);
    out.push(BOS as u16);
    out.extend(bytes.iter().map(|&b| b as u16));
    out
}

/// Reads a file, or every regular file of a directory in name order; each
/// file is one document.
pub fn ingest(path: &Path) -> Result<Vec<u16>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path)? {
            let p = entry?.path();
            if p.is_file() {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut tokens = Vec::new();
    for f in &files {
        let bytes = fs::read(f)?;
        if !bytes.is_empty() {
            tokens.extend(tokenize(&bytes));
        }
    }
    if tokens.is_empty() {
        bail!(Data, "corpus {} is empty", path.display());
    }
    Ok(tokens)
}

/// Non-overlapping windows of `len` tokens; the ragged tail is dropped.
pub fn windows(tokens: &[u16], len: usize) -> impl Iterator<Item = &[u16]> {
    tokens.chunks_exact(len.max(1))
}

/// Seeded permutation of `0..n`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    /// Splits windows of `n + 1` tokens into inputs and next-token targets.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a [u16]>) -> Self {
        let (inputs, targets) = windows
            .into_iter()
            .map(|w| {
                let w: Vec<usize> = w.iter().map(|&t| t as usize).collect();
                (w[..w.len() - 1].to_vec(), w[1..].to_vec())
            })
            .unzip();
        Self { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Mask@k: puts the reserved mask id at input position `k` (0-based) of
/// every sequence and at the matching target slot. `None` is a no-op.
pub fn mask_at_insert(batch: &mut Batch, k: Option<usize>, n_ctx: usize) -> Result<()> {
    let Some(k) = k else { return Ok(()) };
    check_mask_position(k, n_ctx)?;
    for (x, y) in batch.inputs.iter_mut().zip(batch.targets.iter_mut()) {
        if k >= x.len() {
            bail!(Config, "mask position {} beyond sequence length {}", k, x.len());
        }
        x[k] = MASK_ID;
        y[k - 1] = MASK_ID;
    }
    Ok(())
}

pub fn check_mask_position(k: usize, n_ctx: usize) -> Result<()> {
    if k < 2 || k >= n_ctx {
        bail!(Config, "mask position must satisfy 2 <= k < {}, got {}", n_ctx, k);
    }
    Ok(())
}

/// Train/validation split of a token stream with an epoch-wise seeded
/// shuffle of the training windows.
#[derive(Debug, Clone)]
pub struct Dataset {
    train: Vec<u16>,
    val: Vec<u16>,
    window: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Dataset {
    /// The last `val_fraction` of the stream is held out.
    pub fn new(tokens: Vec<u16>, n_ctx: usize, val_fraction: f64, seed: u64) -> Result<Self> {
        let window = n_ctx + 1;
        let val_len = ((tokens.len() as f64 * val_fraction) as usize).max(window);
        if tokens.len() < val_len + window {
            bail!(
                Data,
                "corpus of {} tokens is too small for a {}-token window and {} validation tokens",
                tokens.len(),
                window,
                val_len
            );
        }
        let split = tokens.len() - val_len;
        let train = tokens[..split].to_vec();
        let val = tokens[split..].to_vec();
        let order = shuffled_order(train.len() / window, seed);
        Ok(Self { train, val, window, seed, epoch: 0, order, cursor: 0 })
    }

    pub fn train_windows(&self) -> usize {
        self.order.len()
    }

    pub fn val_tokens(&self) -> &[u16] {
        &self.val
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn window_at(&self, idx: usize) -> &[u16] {
        &self.train[idx * self.window..(idx + 1) * self.window]
    }

    pub fn next_batch(&mut self, size: usize) -> Batch {
        let mut picked = Vec::with_capacity(size);
        while picked.len() < size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.order = shuffled_order(self.order.len(), self.seed.wrapping_add(self.epoch));
                self.cursor = 0;
            }
            picked.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        Batch::from_windows(picked.into_iter().map(|i| self.window_at(i)))
    }
}
