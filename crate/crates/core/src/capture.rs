//! Recorded attention weights for diagnostics.

use std::io::Write;

use crate::error::Result;

/// Lower-triangular `n×n` weights of one (layer, head, sequence), packed by
/// rows and stored at 32-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub layer: usize,
    pub head: usize,
    pub seq: usize,
    pub n: usize,
    packed: Vec<f32>,
}

impl HeadWeights {
    pub fn new(layer: usize, head: usize, seq: usize, n: usize) -> Self {
        Self { layer, head, seq, n, packed: vec![0.0; n * (n + 1) / 2] }
    }

    /// Row `i` (0-based), entries for keys `0..=i`.
    pub fn row(&self, i: usize) -> &[f32] {
        let start = i * (i + 1) / 2;
        &self.packed[start..start + i + 1]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let start = i * (i + 1) / 2;
        &mut self.packed[start..start + i + 1]
    }

    /// `α_ij`, exactly 0 above the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f32 {
        if j > i {
            0.0
        } else {
            self.row(i)[j]
        }
    }
}

/// All weights captured during one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightCapture {
    pub heads: Vec<HeadWeights>,
}

impl WeightCapture {
    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn extend(&mut self, other: WeightCapture) {
        self.heads.extend(other.heads);
    }

    /// CSV with columns `layer,head,i,j,alpha` (sequence 0 only, 0-based
    /// indices, lower triangle).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "head", "i", "j", "alpha"])?;
        for hw in self.heads.iter().filter(|h| h.seq == 0) {
            for i in 0..hw.n {
                for (j, a) in hw.row(i).iter().enumerate() {
                    w.write_record(&[
                        hw.layer.to_string(),
                        hw.head.to_string(),
                        i.to_string(),
                        j.to_string(),
                        a.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}
