//! Pre-tokenized datasets and the `VFTK` cache format.
//!
//! Layout: magic `VFTK`, `u32` image count, then per image a `u16` class
//! id, `u16` grid height, `u16` grid width and `h*w` `u16` token ids, all
//! little-endian.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{ensure, Error, Result};
use crate::image::{write_atomic, Image};
use crate::prompts::ClassIndex;
use crate::rng::{self, Rng, Stream};
use crate::tokenizer::{encode, Codebook, TokenGrid};

const MAGIC: &[u8; 4] = b"VFTK";

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDataset {
    pub grids: Vec<TokenGrid>,
    pub labels: Vec<u16>,
    pub classes: usize,
}

impl TokenDataset {
    pub fn new(grids: Vec<TokenGrid>, labels: Vec<u16>, classes: usize) -> Result<Self> {
        ensure!(grids.len() == labels.len(), "grids and labels differ in length");
        ensure!(
            labels.iter().all(|&l| (l as usize) < classes),
            "label out of range for {classes} classes"
        );
        if let Some(g) = grids.first() {
            ensure!(
                grids.iter().all(|x| x.h() == g.h() && x.w() == g.w()),
                "all grids must share one shape"
            );
        }
        Ok(Self {
            grids,
            labels,
            classes,
        })
    }

    /// Encodes every image with the codebook (in parallel, order kept).
    pub fn from_images(images: &[Image], labels: &[u16], classes: usize, cb: &Codebook) -> Result<Self> {
        let grids: Result<Vec<TokenGrid>> =
            crate::par::map_slice(images, |img| encode(img, cb)).into_iter().collect();
        Self::new(grids?, labels.to_vec(), classes)
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.grids.first().map(|g| (g.h(), g.w()))
    }

    pub fn class_index(&self) -> ClassIndex {
        ClassIndex::new(&self.labels, self.classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.grids.len() as u32).to_le_bytes());
        for (g, l) in self.grids.iter().zip(&self.labels) {
            ensure!(g.ids().iter().all(|&t| t <= u16::MAX as u32), "token id exceeds u16");
            for v in [*l, g.h() as u16, g.w() as u16] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for &t in g.ids() {
                buf.extend_from_slice(&(t as u16).to_le_bytes());
            }
        }
        write_atomic(path, &buf)
    }

    /// `classes` is not stored in the file; it is taken as `max label + 1`
    /// unless given.
    pub fn load(path: &Path, classes: Option<usize>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: "VFTK".into(),
            });
        }
        let mut r = Reader { bytes: &bytes, pos: 4 };
        let n = r.u32()? as usize;
        let mut grids = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (l, h, w) = (r.u16()?, r.u16()? as usize, r.u16()? as usize);
            let ids = (0..h * w).map(|_| r.u16().map(u32::from)).collect::<Result<Vec<_>>>()?;
            labels.push(l);
            grids.push(TokenGrid::new(h, w, ids)?);
        }
        ensure!(r.pos == bytes.len(), "trailing bytes in token cache");
        let classes = classes.unwrap_or_else(|| labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0));
        Self::new(grids, labels, classes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!("need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Epoch-shuffled index stream.
pub struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl Batcher {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..len).collect(),
            cursor: 0,
            rng: rng::stream(seed, Stream::DataOrder),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TokenDataset {
        let grids = (0..5)
            .map(|i| TokenGrid::new(2, 3, (0..6).map(|j| (i * 7 + j) as u32).collect()).unwrap())
            .collect();
        TokenDataset::new(grids, vec![0, 1, 2, 1, 0], 3).unwrap()
    }

    #[test]
    fn cache_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.vftk");
        let d = sample();
        d.save(&p).unwrap();
        assert_eq!(TokenDataset::load(&p, Some(3)).unwrap(), d);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 8 + 5 * (6 + 12));
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(TokenDataset::load(&p, None), Err(Error::Truncated(_))));
    }

    #[test]
    fn batcher_visits_every_index_each_epoch() {
        let mut b = Batcher::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next_batch(2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut a = Batcher::new(10, 3);
        let mut c = Batcher::new(10, 3);
        assert_eq!(a.next_batch(7), c.next_batch(7));
    }
}
