//! Synthetic twin-pair corpus: each video shows a sequence of glyphs, one
//! per frame, and its twin shows the same frames reversed. Captions spell
//! the glyphs in temporal order, so only an order-aware encoder can tell
//! twins apart.
//!
//! Corpus file layout (all integers little-endian):
//!
//! ```text
//! "BTA1" | u32 header_len | header JSON
//! per sample:
//!   u32 pair_id | u8 split (0 train, 1 held-out) | u8 reversed
//!   u16 caption_len | caption_len × u32 token id
//!   u32 T | u32 N | u32 P | T·N·P × f64 video, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{self, normal_vec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BTA1";
const MAX_COS: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub pairs: usize,
    pub held_out_pairs: usize,
    /// Glyph prototype count (G).
    pub glyphs: usize,
    pub noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pairs: 32,
            held_out_pairs: 8,
            glyphs: 10,
            noise_std: 0.05,
        }
    }
}

/// Unit glyph prototypes with pairwise |cos| ≤ 0.3.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphLibrary {
    prototypes: Vec<Vec<f64>>,
}

impl GlyphLibrary {
    pub fn new(count: usize, dim: usize, seed: u64) -> Result<Self> {
        if count < 8 {
            return Err(Error::Data(format!("need at least 8 glyphs, asked for {count}")));
        }
        let mut rng = rng::rng(rng::derive(seed, "glyphs"));
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while prototypes.len() < count {
            attempts += 1;
            if attempts > 1_000_000 {
                return Err(Error::Data(format!(
                    "could not place {count} glyphs in {dim} dimensions"
                )));
            }
            let mut v = normal_vec(&mut rng, dim, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            if prototypes.iter().all(|p| cosine(p, &v).abs() <= MAX_COS) {
                prototypes.push(v);
            }
        }
        Ok(Self { prototypes })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.prototypes[i]
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldOut => "held-out",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "held-out" | "heldout" | "test" => Ok(Split::HeldOut),
            other => Err(Error::Data(format!("unknown split {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[T, N, P]`.
    pub video: Tensor,
    pub caption: Vec<u32>,
    pub pair_id: u32,
    pub reversed: bool,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub seed: u64,
    pub data: DataConfig,
    pub frames: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub vocab_size: usize,
    /// Token id placed between glyph ids.
    pub sep_token: u32,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// Indices of samples in a split, in corpus order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// `(forward, reversed)` sample indices of each pair in a split.
    pub fn twin_pairs(&self, split: Split) -> Vec<(usize, usize)> {
        let idx = self.split_indices(split);
        let mut out = Vec::new();
        for &i in &idx {
            let s = &self.samples[i];
            if s.reversed {
                continue;
            }
            if let Some(&j) = idx
                .iter()
                .find(|&&j| self.samples[j].pair_id == s.pair_id && self.samples[j].reversed)
            {
                out.push((i, j));
            }
        }
        out
    }

    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        let h = &self.header;
        if (h.frames, h.patches, h.patch_dim) != (cfg.frames, cfg.patches, cfg.patch_dim) {
            return Err(Error::Data(format!(
                "corpus videos are {}x{}x{}, model expects {}x{}x{}",
                h.frames, h.patches, h.patch_dim, cfg.frames, cfg.patches, cfg.patch_dim
            )));
        }
        if h.vocab_size > cfg.vocab_size || 2 * cfg.frames - 1 > cfg.text_len {
            return Err(Error::Data("corpus captions do not fit the text encoder".into()));
        }
        Ok(())
    }
}

/// Caption for a glyph sequence: `g1 SEP g2 SEP … gT`.
pub fn caption_for(glyphs: &[usize], sep: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(2 * glyphs.len());
    for (i, &g) in glyphs.iter().enumerate() {
        if i > 0 {
            out.push(sep);
        }
        out.push(g as u32);
    }
    out
}

fn draw_sequence(rng: &mut rand_chacha::ChaCha8Rng, g: usize, t: usize) -> Vec<usize> {
    if g >= t {
        let mut all: Vec<usize> = (0..g).collect();
        all.shuffle(rng);
        all.truncate(t);
        all
    } else {
        (0..t).map(|_| rng.random_range(0..g)).collect()
    }
}

/// Builds `2 · pairs` samples; the last `held_out_pairs` pairs form the held-out split.
pub fn gen_dataset(cfg: &ModelConfig, data: &DataConfig, seed: u64) -> Result<Corpus> {
    if data.pairs < 4 {
        return Err(Error::Data(format!("need at least 4 pairs, asked for {}", data.pairs)));
    }
    if data.held_out_pairs >= data.pairs {
        return Err(Error::Data("held-out pairs must leave training pairs".into()));
    }
    if data.glyphs + 1 > cfg.vocab_size {
        return Err(Error::Data(format!(
            "vocabulary {} cannot hold {} glyphs and a separator",
            cfg.vocab_size, data.glyphs
        )));
    }
    let t = cfg.frames;
    if 2 * t - 1 > cfg.text_len {
        return Err(Error::Data(format!(
            "captions of {} tokens exceed text_len {}",
            2 * t - 1,
            cfg.text_len
        )));
    }
    let library = GlyphLibrary::new(data.glyphs, cfg.patch_dim, seed)?;
    let sep = data.glyphs as u32;
    let mut rng = rng::rng(rng::derive(seed, "sequences"));
    let mut sequences: Vec<Vec<usize>> = Vec::with_capacity(data.pairs);
    let mut attempts = 0usize;
    while sequences.len() < data.pairs {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Data("not enough distinct glyph sequences".into()));
        }
        let s = draw_sequence(&mut rng, data.glyphs, t);
        let r: Vec<usize> = s.iter().rev().copied().collect();
        if s == r || sequences.iter().any(|o| *o == s || *o == r) {
            continue;
        }
        sequences.push(s);
    }

    let (n, p) = (cfg.patches, cfg.patch_dim);
    let mut samples = Vec::with_capacity(2 * data.pairs);
    for (pair, seq) in sequences.iter().enumerate() {
        let mut noise_rng = rng::rng(rng::derive_index(seed, "noise", pair as u64));
        let noise = normal_vec(&mut noise_rng, t * n * p, data.noise_std);
        let mut frames = Vec::with_capacity(t * n * p);
        for (i, &g) in seq.iter().enumerate() {
            let proto = library.get(g);
            for j in 0..n {
                let base = (i * n + j) * p;
                frames.extend(proto.iter().zip(&noise[base..base + p]).map(|(a, b)| a + b));
            }
        }
        let video = Tensor::new(vec![t, n, p], frames)?;
        let split = if pair >= data.pairs - data.held_out_pairs {
            Split::HeldOut
        } else {
            Split::Train
        };
        let rev: Vec<usize> = seq.iter().rev().copied().collect();
        let twin = crate::model::reverse_frames(&video)?;
        samples.push(Sample {
            video,
            caption: caption_for(seq, sep),
            pair_id: pair as u32,
            reversed: false,
            split,
        });
        samples.push(Sample {
            video: twin,
            caption: caption_for(&rev, sep),
            pair_id: pair as u32,
            reversed: true,
            split,
        });
    }
    let header = CorpusHeader {
        seed,
        data: *data,
        frames: t,
        patches: n,
        patch_dim: p,
        vocab_size: data.glyphs + 1,
        sep_token: sep,
        samples: samples.len(),
    };
    Ok(Corpus { header, samples })
}

/// Batches of sample positions (into `indices`) for one epoch.
///
/// Twin pairs are shuffled as units and kept adjacent, so most batches
/// contain both orders of the same glyph sequence. The trailing short batch
/// is dropped.
pub fn batch_iter(
    corpus: &Corpus,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if indices.is_empty() {
        return Err(Error::Data("empty split".into()));
    }
    if batch_size == 0 || batch_size > indices.len() {
        return Err(Error::Data(format!(
            "batch size {batch_size} invalid for split of {}",
            indices.len()
        )));
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in indices {
        let pid = corpus.samples[i].pair_id;
        match groups
            .iter_mut()
            .find(|g| corpus.samples[g[0]].pair_id == pid)
        {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    let mut rng = rng::rng(rng::derive_index(seed, "epoch", epoch));
    groups.shuffle(&mut rng);
    for g in groups.iter_mut() {
        g.shuffle(&mut rng);
    }
    let order: Vec<usize> = groups.into_iter().flatten().collect();
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&corpus.header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for s in &corpus.samples {
        w.write_all(&s.pair_id.to_le_bytes())?;
        w.write_all(&[matches!(s.split, Split::HeldOut) as u8, s.reversed as u8])?;
        w.write_all(&(s.caption.len() as u16).to_le_bytes())?;
        for id in &s.caption {
            w.write_all(&id.to_le_bytes())?;
        }
        for &d in s.video.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&s.video.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_corpus<R: Read>(mut r: R) -> Result<Corpus> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Corrupt("corpus magic mismatch".into()));
    }
    let len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: CorpusHeader = serde_json::from_slice(&header)?;
    let mut samples = Vec::with_capacity(header.samples);
    for _ in 0..header.samples {
        let pair_id = read_u32(&mut r)?;
        let mut flags = [0u8; 4];
        r.read_exact(&mut flags)?;
        let split = match flags[0] {
            0 => Split::Train,
            1 => Split::HeldOut,
            x => return Err(Error::Corrupt(format!("bad split tag {x}"))),
        };
        let reversed = flags[1] != 0;
        let cap_len = u16::from_le_bytes([flags[2], flags[3]]) as usize;
        let caption = (0..cap_len).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let shape = (0..3)
            .map(|_| Ok(read_u32(&mut r)? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        samples.push(Sample {
            video: Tensor::new(shape, data)?,
            caption,
            pair_id,
            reversed,
            split,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Corrupt(format!("{} trailing bytes in corpus", rest.len())));
    }
    Ok(Corpus { header, samples })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf)?;
    crate::checkpoint::write_atomic(path, &buf)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path)?;
    read_corpus(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, DataConfig) {
        (
            ModelConfig::default(),
            DataConfig {
                pairs: 4,
                held_out_pairs: 1,
                ..DataConfig::default()
            },
        )
    }

    #[test]
    fn glyphs_are_unit_and_spread() {
        let lib = GlyphLibrary::new(10, 16, 3).unwrap();
        assert_eq!(lib.len(), 10);
        for i in 0..10 {
            let n: f64 = lib.get(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(cosine(lib.get(i), lib.get(j)).abs() <= 0.3);
            }
        }
        assert_eq!(lib, GlyphLibrary::new(10, 16, 3).unwrap());
        assert!(GlyphLibrary::new(7, 16, 3).is_err());
    }

    #[test]
    fn counts_and_twins() {
        let (cfg, data) = small();
        let c = gen_dataset(&cfg, &data, 1).unwrap();
        assert_eq!(c.samples.len(), 8);
        let mut ids: Vec<u32> = c.samples.iter().map(|s| s.pair_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        for pair in c.samples.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            assert_eq!(a.split, b.split);
            assert_ne!(a.caption, b.caption);
            assert_eq!(crate::model::reverse_frames(&a.video).unwrap(), b.video);
        }
        assert_eq!(c.twin_pairs(Split::HeldOut).len(), 1);
    }

    #[test]
    fn rejects_small_vocabulary() {
        let (mut cfg, data) = small();
        cfg.vocab_size = 10;
        assert!(matches!(gen_dataset(&cfg, &data, 1), Err(Error::Data(_))));
    }

    #[test]
    fn file_round_trip_is_byte_stable() {
        let (cfg, data) = small();
        let c = gen_dataset(&cfg, &data, 9).unwrap();
        let mut a = Vec::new();
        write_corpus(&c, &mut a).unwrap();
        let mut b = Vec::new();
        write_corpus(&gen_dataset(&cfg, &data, 9).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(read_corpus(a.as_slice()).unwrap(), c);
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(read_corpus(bad.as_slice()).is_err());
    }

    #[test]
    fn batches_are_deterministic_and_vary_by_epoch() {
        let (cfg, _) = small();
        let data = DataConfig::default();
        let c = gen_dataset(&cfg, &data, 2).unwrap();
        let idx = c.split_indices(Split::Train);
        let a = batch_iter(&c, &idx, 8, 5, 0).unwrap();
        assert_eq!(a, batch_iter(&c, &idx, 8, 5, 0).unwrap());
        assert_ne!(a, batch_iter(&c, &idx, 8, 5, 1).unwrap());
        assert_eq!(a.len(), idx.len() / 8);
        let all = batch_iter(&c, &idx, idx.len(), 5, 0).unwrap();
        assert_eq!(all.len(), 1);
        let mut sorted = all[0].clone();
        sorted.sort_unstable();
        assert_eq!(sorted, idx);
        assert!(batch_iter(&c, &[], 1, 0, 0).is_err());
    }
}
