//! Integer label maps for segmentation targets.

use crate::error::{Error, Result};

/// Per-pixel class ids for a batch, stored row-major (batch, height, width).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl Labels {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Labels> {
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Shape("zero-sized label map".into()));
        }
        if data.len() != n * h * w {
            return Err(Error::Shape(format!(
                "label data length {} does not match {n}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Labels { n, h, w, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Labels {
        Labels { n, h, w, data: vec![0; n * h * w] }
    }

    #[inline]
    pub fn get(&self, n: usize, i: usize, j: usize) -> u8 {
        self.data[(n * self.h + i) * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, n: usize, i: usize, j: usize, v: u8) {
        self.data[(n * self.h + i) * self.w + j] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Stack single-image label maps into one batch.
    pub fn stack(items: &[&Labels]) -> Result<Labels> {
        if items.is_empty() {
            return Err(Error::Shape("empty label stack".into()));
        }
        let (h, w) = (items[0].h, items[0].w);
        if items.iter().any(|l| l.n != 1 || l.h != h || l.w != w) {
            return Err(Error::Shape("label stack entries must be single images of one size".into()));
        }
        let mut data = Vec::with_capacity(items.len() * h * w);
        for l in items {
            data.extend_from_slice(&l.data);
        }
        Labels::new(items.len(), h, w, data)
    }

    /// Horizontal mirror of a single-image label map.
    pub fn flipped_horizontal(&self) -> Labels {
        let mut out = self.clone();
        for n in 0..self.n {
            for i in 0..self.h {
                for j in 0..self.w {
                    out.set(n, i, j, self.get(n, i, self.w - 1 - j));
                }
            }
        }
        out
    }
}
