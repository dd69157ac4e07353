//! Synthetic datasets with known important regions.
//!
//! * Patch images: 16×16 grayscale noise with one 4×4 textured patch whose
//!   texture (cross, solid, stripes) is the label and whose position is uniform.
//! * Token sequences: length-32 id sequences over a 64-token vocabulary where
//!   the majority of a few sentiment tokens decides the label.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 16;
pub const PATCH_SIDE: usize = 4;
pub const NUM_IMAGE_CLASSES: usize = 3;
pub const SEQ_LEN: usize = 32;
pub const VOCAB: usize = 64;
pub const UNK_TOKEN: usize = 0;
pub const POS_TOKENS: std::ops::RangeInclusive<usize> = 1..=5;
pub const NEG_TOKENS: std::ops::RangeInclusive<usize> = 6..=10;
pub const FILLER_START: usize = 11;
const BACKGROUND_MAX: f64 = 0.3;

const DATASET_MAGIC: &[u8; 4] = b"PIBA";
const DATASET_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Inside an `h×w` image and covering less than a third of it.
    pub fn is_valid_for(&self, h: usize, w: usize) -> bool {
        self.height > 0
            && self.width > 0
            && self.top + self.height <= h
            && self.left + self.width <= w
            && (self.area() as f64) / ((h * w) as f64) < 0.33
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split code {c}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        SplitSizes { train, val, test }
    }

    fn check(&self) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::invalid("every split needs at least one sample"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchImageSet {
    /// `[n, 1, 16, 16]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub bboxes: Vec<BBox>,
    pub split: Split,
}

impl PatchImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image `i` as `[1, 16, 16]`.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        self.images.row(i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeqSet {
    /// Row-major `[n, SEQ_LEN]` token ids.
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub key_positions: Vec<Vec<usize>>,
    pub split: Split,
}

impl TokenSeqSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: T,
    pub val: T,
    pub test: T,
}

impl<T> Splits<T> {
    pub fn get(&self, split: Split) -> &T {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub type PatchDataset = Splits<PatchImageSet>;
pub type TokenDataset = Splits<TokenSeqSet>;

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Patch(PatchDataset),
    Token(TokenDataset),
}

/// Whether pixel `(i, j)` of the 4×4 patch is lit for a texture class.
pub fn texture_on(label: usize, i: usize, j: usize) -> bool {
    match label {
        // diagonal cross
        0 => i == j || i + j == PATCH_SIDE - 1,
        // solid square
        1 => true,
        // anti-diagonal stripes, two pixels wide
        _ => matches!((i + j) % 4, 1 | 2),
    }
}

fn split_stream(seed: u64, split: Split) -> RngStream {
    RngStream::new(seed, 100 + split.code() as u64)
}

fn gen_patch_split(seed: u64, n: usize, split: Split) -> PatchImageSet {
    let mut rng = split_stream(seed, split);
    let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_IMAGE_CLASSES).collect();
    rng.shuffle(&mut labels);
    let side = IMAGE_SIDE;
    let mut data = Vec::with_capacity(n * side * side);
    let mut bboxes = Vec::with_capacity(n);
    for &label in &labels {
        let top = rng.below(side - PATCH_SIDE + 1);
        let left = rng.below(side - PATCH_SIDE + 1);
        let bbox = BBox {
            top,
            left,
            height: PATCH_SIDE,
            width: PATCH_SIDE,
        };
        for r in 0..side {
            for c in 0..side {
                let noise = rng.uniform() * BACKGROUND_MAX;
                let lit = bbox.contains(r, c) && texture_on(label, r - top, c - left);
                let v = if lit { 1.0 } else { noise };
                // stored as f32 on disk
                data.push(v as f32 as f64);
            }
        }
        bboxes.push(bbox);
    }
    PatchImageSet {
        images: Tensor::from_raw(vec![n, 1, side, side], data),
        labels,
        bboxes,
        split,
    }
}

/// Three splits of patch images, deterministic in `seed`.
pub fn gen_patch_dataset(seed: u64, sizes: SplitSizes) -> Result<PatchDataset> {
    sizes.check()?;
    Ok(Splits {
        train: gen_patch_split(seed, sizes.train, Split::Train),
        val: gen_patch_split(seed, sizes.val, Split::Val),
        test: gen_patch_split(seed, sizes.test, Split::Test),
    })
}

/// Label rule: 0 (positive) when positive tokens outnumber negative ones, 1 when
/// negative ones do, `None` on a tie.
pub fn majority_label(seq: &[usize]) -> Option<usize> {
    let pos = seq.iter().filter(|t| POS_TOKENS.contains(t)).count();
    let neg = seq.iter().filter(|t| NEG_TOKENS.contains(t)).count();
    match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => Some(0),
        std::cmp::Ordering::Less => Some(1),
        std::cmp::Ordering::Equal => None,
    }
}

fn gen_token_split(seed: u64, n: usize, split: Split) -> TokenSeqSet {
    let mut rng = split_stream(seed, split);
    let mut wanted: Vec<usize> = (0..n).map(|i| i % 2).collect();
    rng.shuffle(&mut wanted);
    let mut sequences = Vec::with_capacity(n);
    let mut keys = Vec::with_capacity(n);
    for &want in &wanted {
        // Redraw until the majority matches the balanced target label; this also
        // rejects ties.
        let (seq, pos) = loop {
            let k = 1 + rng.below(4);
            let mut positions = rng.sample_indices(SEQ_LEN, k);
            positions.sort_unstable();
            let mut seq: Vec<usize> = (0..SEQ_LEN).map(|_| FILLER_START + rng.below(VOCAB - FILLER_START)).collect();
            for &p in &positions {
                seq[p] = if rng.below(2) == 0 {
                    *POS_TOKENS.start() + rng.below(5)
                } else {
                    *NEG_TOKENS.start() + rng.below(5)
                };
            }
            if majority_label(&seq) == Some(want) {
                break (seq, positions);
            }
        };
        sequences.push(seq);
        keys.push(pos);
    }
    TokenSeqSet {
        sequences,
        labels: wanted,
        key_positions: keys,
        split,
    }
}

/// Three splits of token sequences, deterministic in `seed`.
pub fn gen_token_dataset(seed: u64, sizes: SplitSizes) -> Result<TokenDataset> {
    sizes.check()?;
    Ok(Splits {
        train: gen_token_split(seed, sizes.train, Split::Train),
        val: gen_token_split(seed, sizes.val, Split::Val),
        test: gen_token_split(seed, sizes.test, Split::Test),
    })
}

/// Index into a length-`n` axis with symmetric reflection that does not repeat
/// the edge sample (`d c b | a b c d | c b a`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalized 1-D Gaussian taps; `sigma = 0` gives the delta kernel.
pub fn gaussian_taps(kernel_size: usize, sigma: f64) -> Vec<f64> {
    let half = (kernel_size / 2) as isize;
    if sigma <= 0.0 {
        return (-half..=half).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    }
    let raw: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with reflect padding over the last two axes.
pub fn blur_image(img: &Tensor, kernel_size: usize, sigma: f64) -> Result<Tensor> {
    if kernel_size % 2 == 0 {
        return Err(Error::invalid(format!("blur kernel size must be odd, got {kernel_size}")));
    }
    if img.rank() < 2 {
        return Err(Error::shape("blur_image", format!("{:?}", img.shape())));
    }
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = img.len() / (h * w);
    let taps = gaussian_taps(kernel_size, sigma);
    let half = (kernel_size / 2) as isize;
    let mut out = vec![0.0; img.len()];
    let mut tmp = vec![0.0; h * w];
    for p in 0..planes {
        let src = &img.data()[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                tmp[r * w + c] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * src[r * w + reflect(c as isize + k as isize - half, w)])
                    .sum();
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                dst[r * w + c] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp[reflect(r as isize + k as isize - half, h) * w + c])
                    .sum();
            }
        }
    }
    Ok(Tensor::from_raw(s.to_vec(), out))
}

fn write_patch_split(w: &mut Writer, set: &PatchImageSet) {
    w.section(b"SPLT", |s| {
        s.u32(set.split.code());
        s.u32(set.len() as u32);
    });
    w.section(b"IMGS", |s| {
        for &v in set.images.data() {
            s.f32(v as f32);
        }
    });
    w.section(b"LABL", |s| {
        for &l in &set.labels {
            s.u32(l as u32);
        }
    });
    w.section(b"BBOX", |s| {
        for b in &set.bboxes {
            for v in [b.top, b.left, b.height, b.width] {
                s.u32(v as u32);
            }
        }
    });
}

fn write_token_split(w: &mut Writer, set: &TokenSeqSet) {
    w.section(b"SPLT", |s| {
        s.u32(set.split.code());
        s.u32(set.len() as u32);
    });
    w.section(b"SEQS", |s| {
        for seq in &set.sequences {
            for &t in seq {
                s.u32(t as u32);
            }
        }
    });
    w.section(b"LABL", |s| {
        for &l in &set.labels {
            s.u32(l as u32);
        }
    });
    w.section(b"KEYS", |s| {
        for keys in &set.key_positions {
            s.u32(keys.len() as u32);
            for &k in keys {
                s.u32(k as u32);
            }
        }
    });
}

/// Serializes a dataset to the `PIBA` format.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
    match ds {
        Dataset::Patch(d) => {
            w.section(b"META", |s| {
                s.u32(0);
                s.u32(3);
                s.u32(IMAGE_SIDE as u32);
                s.u32(IMAGE_SIDE as u32);
            });
            for set in [&d.train, &d.val, &d.test] {
                write_patch_split(&mut w, set);
            }
        }
        Dataset::Token(d) => {
            w.section(b"META", |s| {
                s.u32(1);
                s.u32(3);
                s.u32(SEQ_LEN as u32);
                s.u32(VOCAB as u32);
            });
            for set in [&d.train, &d.val, &d.test] {
                write_token_split(&mut w, set);
            }
        }
    }
    w.finish()
}

fn read_u32s(r: &mut Reader, n: usize) -> Result<Vec<usize>> {
    (0..n).map(|_| r.u32().map(|v| v as usize)).collect()
}

fn read_header(r: &mut Reader, expected: Split) -> Result<usize> {
    let mut s = r.section(b"SPLT")?;
    let split = Split::from_code(s.u32()?)?;
    if split != expected {
        return Err(Error::Format(format!("expected split {expected:?}, found {split:?}")));
    }
    let n = s.u32()? as usize;
    s.expect_done("SPLT")?;
    Ok(n)
}

fn read_patch_split(r: &mut Reader, expected: Split, h: usize, w: usize) -> Result<PatchImageSet> {
    let n = read_header(r, expected)?;
    let mut s = r.section(b"IMGS")?;
    let data = (0..n * h * w).map(|_| s.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    s.expect_done("IMGS")?;
    let mut s = r.section(b"LABL")?;
    let labels = read_u32s(&mut s, n)?;
    s.expect_done("LABL")?;
    let mut s = r.section(b"BBOX")?;
    let mut bboxes = Vec::with_capacity(n);
    for _ in 0..n {
        let v = read_u32s(&mut s, 4)?;
        bboxes.push(BBox {
            top: v[0],
            left: v[1],
            height: v[2],
            width: v[3],
        });
    }
    s.expect_done("BBOX")?;
    Ok(PatchImageSet {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels,
        bboxes,
        split: expected,
    })
}

fn read_token_split(r: &mut Reader, expected: Split, len: usize) -> Result<TokenSeqSet> {
    let n = read_header(r, expected)?;
    let mut s = r.section(b"SEQS")?;
    let sequences = (0..n).map(|_| read_u32s(&mut s, len)).collect::<Result<Vec<_>>>()?;
    s.expect_done("SEQS")?;
    let mut s = r.section(b"LABL")?;
    let labels = read_u32s(&mut s, n)?;
    s.expect_done("LABL")?;
    let mut s = r.section(b"KEYS")?;
    let mut key_positions = Vec::with_capacity(n);
    for _ in 0..n {
        let k = s.u32()? as usize;
        key_positions.push(read_u32s(&mut s, k)?);
    }
    s.expect_done("KEYS")?;
    Ok(TokenSeqSet {
        sequences,
        labels,
        key_positions,
        split: expected,
    })
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, DATASET_MAGIC, DATASET_VERSION)?;
    let mut meta = r.section(b"META")?;
    let kind = meta.u32()?;
    let splits = meta.u32()?;
    let (a, b) = (meta.u32()? as usize, meta.u32()? as usize);
    meta.expect_done("META")?;
    if splits != 3 {
        return Err(Error::Format(format!("expected 3 splits, found {splits}")));
    }
    let ds = match kind {
        0 => Dataset::Patch(Splits {
            train: read_patch_split(&mut r, Split::Train, a, b)?,
            val: read_patch_split(&mut r, Split::Val, a, b)?,
            test: read_patch_split(&mut r, Split::Test, a, b)?,
        }),
        1 => Dataset::Token(Splits {
            train: read_token_split(&mut r, Split::Train, a)?,
            val: read_token_split(&mut r, Split::Val, a)?,
            test: read_token_split(&mut r, Split::Test, a)?,
        }),
        k => return Err(Error::Format(format!("unknown dataset kind {k}"))),
    };
    r.expect_done("dataset")?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}
