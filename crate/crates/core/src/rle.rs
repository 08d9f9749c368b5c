//! Run-length wire format for binary masks: row-major scan, alternating run
//! lengths, first run counts zeros (and may be 0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

pub fn encode(mask: &Mask) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len = 0u32;
    for &v in mask.data() {
        let bit = (v != 0) as u8;
        if bit != current {
            runs.push(len);
            current = bit;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

pub fn decode(height: usize, width: usize, runs: &[u32]) -> Result<Mask> {
    let total = height * width;
    let mut data = Vec::with_capacity(total);
    for (i, &r) in runs.iter().enumerate() {
        if data.len() + r as usize > total {
            return Err(Error::Input(format!("runs exceed {height}x{width} at run {i}")));
        }
        data.extend(std::iter::repeat_n((i % 2) as u8, r as usize));
    }
    if data.len() != total {
        return Err(Error::Input(format!("runs cover {} of {total} pixels", data.len())));
    }
    Grid::from_vec(height, width, data)
}

/// One view's mask as sent over the wire.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedMask {
    pub view: usize,
    pub h: usize,
    pub w: usize,
    pub rle: Vec<u32>,
}

impl EncodedMask {
    pub fn new(view: usize, mask: &Mask) -> Self {
        Self {
            view,
            h: mask.height(),
            w: mask.width(),
            rle: encode(mask),
        }
    }

    pub fn decode(&self) -> Result<Mask> {
        decode(self.h, self.w, &self.rle)
    }
}
