//! Token-aligned mid-layer activation shards.
//!
//! Shard file layout, little-endian:
//!
//! ```text
//! "XACT" | version u32 | header_len u32 | header (UTF-8 JSON) | rows × d_model f32
//! ```
//!
//! The JSON header carries `source`, `d_model`, `rows`, `dtype` and
//! `alignment_key`. All shards of one extraction share a `positions.tsv`
//! sidecar (`row \t sequence_index \t position`).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::toylm::Checkpoint;
use crate::util::{mix_seed, rng, write_atomic};
use crate::{Error, Result};

pub const SHARD_MAGIC: &[u8; 4] = b"XACT";
pub const SHARD_VERSION: u32 = 1;
pub const POSITIONS_FILE: &str = "positions.tsv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub source: String,
    pub d_model: usize,
    pub rows: usize,
    pub dtype: String,
    pub alignment_key: String,
}

/// A read-only, memory-mapped activation matrix for one source.
#[derive(Debug)]
pub struct ActivationShard {
    path: PathBuf,
    header: ShardHeader,
    map: Mmap,
    offset: usize,
}

impl ActivationShard {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    pub fn source(&self) -> &str {
        &self.header.source
    }

    pub fn rows(&self) -> usize {
        self.header.rows
    }

    pub fn d_model(&self) -> usize {
        self.header.d_model
    }

    pub fn alignment_key(&self) -> &str {
        &self.header.alignment_key
    }

    /// Writes a shard from an in-memory matrix.
    pub fn write(path: &Path, source: &str, alignment_key: &str, data: &Array2<f32>) -> Result<()> {
        let (rows, d_model) = data.dim();
        let mut w = ShardWriter::create(path, source, d_model, rows, alignment_key)?;
        for row in data.rows() {
            w.push_row(row.iter().copied())?;
        }
        w.finish()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        // SAFETY: shards are immutable once renamed into place.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
        if map.len() < 12 || &map[..4] != SHARD_MAGIC {
            return Err(Error::format(path, "not an XACT shard"));
        }
        let version = u32::from_le_bytes(map[4..8].try_into().unwrap());
        if version != SHARD_VERSION {
            return Err(Error::format(path, format!("unsupported shard version {version}")));
        }
        let hlen = u32::from_le_bytes(map[8..12].try_into().unwrap()) as usize;
        let offset = 12 + hlen;
        let header_bytes = map.get(12..offset).ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: ShardHeader =
            serde_json::from_slice(header_bytes).map_err(|e| Error::format(path, format!("header: {e}")))?;
        if header.dtype != "f32-le" {
            return Err(Error::format(path, format!("unsupported dtype {}", header.dtype)));
        }
        let expected = offset + header.rows * header.d_model * 4;
        if map.len() != expected {
            return Err(Error::format(
                path,
                format!("size {} does not match header ({expected} bytes expected)", map.len()),
            ));
        }
        Ok(ActivationShard {
            path: path.to_path_buf(),
            header,
            map,
            offset,
        })
    }

    /// Copies row `i` into `out` as f64.
    pub fn read_row(&self, i: usize, out: &mut [f64]) {
        let d = self.header.d_model;
        assert!(i < self.header.rows && out.len() == d);
        let start = self.offset + i * d * 4;
        for (o, b) in out.iter_mut().zip(self.map[start..start + d * 4].chunks_exact(4)) {
            *o = f64::from(f32::from_le_bytes(b.try_into().unwrap()));
        }
    }

    /// Gathers `rows` into a matrix, each row divided by `scale`.
    pub fn gather(&self, rows: &[usize], scale: f64) -> Array2<f64> {
        let d = self.header.d_model;
        let mut out = Array2::zeros((rows.len(), d));
        for (k, &r) in rows.iter().enumerate() {
            let mut row = out.row_mut(k);
            let slice = row.as_slice_mut().unwrap();
            self.read_row(r, slice);
            if scale != 1.0 {
                slice.iter_mut().for_each(|v| *v /= scale);
            }
        }
        out
    }
}

/// Streams rows into a shard file; the file appears atomically on `finish`.
pub struct ShardWriter {
    path: PathBuf,
    tmp: PathBuf,
    out: BufWriter<File>,
    expected: usize,
    d_model: usize,
    written: usize,
}

impl ShardWriter {
    pub fn create(path: &Path, source: &str, d_model: usize, rows: usize, alignment_key: &str) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        let header = ShardHeader {
            source: source.to_string(),
            d_model,
            rows,
            dtype: "f32-le".into(),
            alignment_key: alignment_key.to_string(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut head = Vec::with_capacity(12 + json.len());
        head.extend_from_slice(SHARD_MAGIC);
        head.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        head.extend_from_slice(&(json.len() as u32).to_le_bytes());
        head.extend_from_slice(&json);
        out.write_all(&head).map_err(|e| Error::io(&tmp, e))?;
        Ok(ShardWriter {
            path: path.to_path_buf(),
            tmp,
            out,
            expected: rows,
            d_model,
            written: 0,
        })
    }

    pub fn push_row(&mut self, row: impl IntoIterator<Item = f32>) -> Result<()> {
        let mut n = 0;
        for v in row {
            self.out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&self.tmp, e))?;
            n += 1;
        }
        if n != self.d_model {
            return Err(Error::Input(format!("row of width {n}, expected {}", self.d_model)));
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.written != self.expected {
            return Err(Error::Input(format!(
                "shard {} received {} of {} rows",
                self.path.display(),
                self.written,
                self.expected
            )));
        }
        let file = self.out.into_inner().map_err(|e| Error::io(&self.tmp, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&self.tmp, e))?;
        std::fs::rename(&self.tmp, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}

/// Row → (sequence index, position) map shared by every shard of an extraction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PositionMap {
    pub entries: Vec<(usize, usize)>,
}

impl PositionMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("row\tsequence_index\tposition\n");
        for (r, (q, p)) in self.entries.iter().enumerate() {
            s.push_str(&format!("{r}\t{q}\t{p}\n"));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let bad = |m: &str| Error::Validation {
                path: path.to_path_buf(),
                line: n + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad("expected 3 tab-separated fields"));
            }
            let nums: Vec<usize> = f
                .iter()
                .map(|x| x.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("non-integer field"))?;
            if nums[0] != entries.len() {
                return Err(bad("rows must be numbered consecutively from 0"));
            }
            entries.push((nums[1], nums[2]));
        }
        Ok(PositionMap { entries })
    }

    /// Hash binding the map to the token content of the sequences it indexes.
    pub fn alignment_key(&self, sequences: &[Vec<u32>]) -> String {
        let mut h = Sha256::new();
        let n_seq = self.entries.last().map_or(0, |e| e.0 + 1);
        for s in &sequences[..n_seq] {
            h.update((s.len() as u64).to_le_bytes());
            for t in s {
                h.update(t.to_le_bytes());
            }
        }
        for (q, p) in &self.entries {
            h.update((*q as u64).to_le_bytes());
            h.update((*p as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Rows for whole sequences, skipping `skip` tokens, until at least
/// `n_tokens` rows are collected.
pub fn plan_positions(sequences: &[Vec<u32>], n_tokens: usize, skip: &[u32]) -> Result<PositionMap> {
    let mut entries = Vec::with_capacity(n_tokens);
    for (q, s) in sequences.iter().enumerate() {
        if entries.len() >= n_tokens {
            break;
        }
        entries.extend(s.iter().enumerate().filter(|(_, t)| !skip.contains(t)).map(|(p, _)| (q, p)));
    }
    if entries.len() < n_tokens {
        return Err(Error::Input(format!(
            "corpus provides only {} usable tokens, {n_tokens} requested",
            entries.len()
        )));
    }
    Ok(PositionMap { entries })
}

/// Path of the shard for `source` within an extraction directory.
pub fn shard_path(dir: &Path, source: &str) -> PathBuf {
    dir.join(format!("{source}.xact"))
}

/// Captures mid-layer activations of every checkpoint over the same rows and
/// writes one shard per checkpoint plus the shared position map into `dir`.
/// BOS and PAD positions are excluded.
pub fn extract(
    ckpts: &[&Checkpoint],
    sequences: &[Vec<u32>],
    n_tokens: usize,
    bos: u32,
    pad: u32,
    dir: &Path,
) -> Result<Vec<ActivationShard>> {
    let first = ckpts.first().ok_or_else(|| Error::Input("no checkpoints to extract from".into()))?;
    if let Some(c) = ckpts.iter().find(|c| c.config != first.config) {
        return Err(Error::Input(format!(
            "checkpoint {} has a different model configuration from {}",
            c.id, first.id
        )));
    }
    for (i, a) in ckpts.iter().enumerate() {
        if ckpts[..i].iter().any(|b| b.id == a.id) {
            return Err(Error::Input(format!("duplicate checkpoint id {}", a.id)));
        }
    }
    if n_tokens == 0 {
        return Err(Error::Input("n_tokens must be positive".into()));
    }
    let map = plan_positions(sequences, n_tokens, &[bos, pad])?;
    let key = map.alignment_key(sequences);
    let d = first.config.d_model;
    let mut writers = ckpts
        .iter()
        .map(|c| ShardWriter::create(&shard_path(dir, &c.id), &c.id, d, map.len(), &key))
        .collect::<Result<Vec<_>>>()?;

    let mut r = 0;
    while r < map.len() {
        let q = map.entries[r].0;
        let end = r + map.entries[r..].iter().take_while(|e| e.0 == q).count();
        for (c, w) in ckpts.iter().zip(writers.iter_mut()) {
            let acts = c.capture_midlayer(&sequences[q])?;
            for &(_, p) in &map.entries[r..end] {
                w.push_row(acts.row(p).iter().map(|&v| v as f32))?;
            }
        }
        r = end;
    }
    for w in writers {
        w.finish()?;
    }
    write_atomic(&dir.join(POSITIONS_FILE), map.to_tsv().as_bytes())?;
    ckpts.iter().map(|c| ActivationShard::open(&shard_path(dir, &c.id))).collect()
}

/// Per-source scale `s_c`; normalized activations are `x_c / s_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub source: String,
    pub scale: f64,
}

/// Chooses `s_c` so that the mean norm of `x_c / s_c` over `sample` evenly
/// spaced rows is `sqrt(d_model)`.
pub fn estimate_norm(shard: &ActivationShard, sample: usize) -> Result<NormStats> {
    let rows = shard.rows();
    if sample == 0 || sample > rows {
        return Err(Error::Input(format!("norm sample {sample} must be in 1..={rows}")));
    }
    let d = shard.d_model();
    let mut buf = vec![0.0; d];
    let mut total = 0.0;
    for k in 0..sample {
        shard.read_row(k * rows / sample, &mut buf);
        total += buf.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let mean = total / sample as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Input(format!(
            "shard {} has zero activations on the norm sample",
            shard.source()
        )));
    }
    Ok(NormStats {
        source: shard.source().to_string(),
        scale: mean / (d as f64).sqrt(),
    })
}

/// One aligned minibatch: the same shard rows from every source, normalized.
#[derive(Debug, Clone)]
pub struct Batch {
    pub epoch: usize,
    pub rows: Vec<usize>,
    pub xs: Vec<Array2<f64>>,
}

/// Endless shuffled minibatches over aligned shards. Each epoch is a fresh
/// seeded permutation; its last batch may be short.
pub struct BatchStream<'a> {
    shards: Vec<&'a ActivationShard>,
    scales: Vec<f64>,
    batch_tokens: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn rows(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            shuffle(&mut self.order, self.seed, self.epoch);
        }
        let end = (self.cursor + self.batch_tokens).min(self.order.len());
        let rows = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let xs = self
            .shards
            .iter()
            .zip(&self.scales)
            .map(|(s, &scale)| s.gather(&rows, scale))
            .collect();
        Some(Batch {
            epoch: self.epoch,
            rows,
            xs,
        })
    }
}

fn shuffle(order: &mut [usize], seed: u64, epoch: usize) {
    order.iter_mut().enumerate().for_each(|(i, v)| *v = i);
    order.shuffle(&mut rng(mix_seed(seed, epoch as u64)));
}

/// Checks that shards are mutually aligned and match `norms` source by source.
pub fn check_aligned(shards: &[&ActivationShard], norms: &[NormStats]) -> Result<()> {
    let first = shards.first().ok_or_else(|| Error::Input("no shards".into()))?;
    for s in shards {
        if s.alignment_key() != first.alignment_key() || s.rows() != first.rows() || s.d_model() != first.d_model() {
            return Err(Error::Input(format!(
                "shard {} is not aligned with {}",
                s.source(),
                first.source()
            )));
        }
    }
    if norms.len() != shards.len() {
        return Err(Error::Input(format!("{} norm records for {} shards", norms.len(), shards.len())));
    }
    for (s, n) in shards.iter().zip(norms) {
        if s.source() != n.source {
            return Err(Error::Input(format!("norm record {} does not match shard {}", n.source, s.source())));
        }
        if !(n.scale > 0.0) {
            return Err(Error::Input(format!("non-positive scale for {}", n.source)));
        }
    }
    Ok(())
}

pub fn stream_batches<'a>(
    shards: &[&'a ActivationShard],
    norms: &[NormStats],
    batch_tokens: usize,
    seed: u64,
) -> Result<BatchStream<'a>> {
    check_aligned(shards, norms)?;
    let rows = shards[0].rows();
    if batch_tokens == 0 || batch_tokens > rows {
        return Err(Error::Input(format!("batch_tokens {batch_tokens} must be in 1..={rows}")));
    }
    let mut order = vec![0; rows];
    shuffle(&mut order, seed, 0);
    Ok(BatchStream {
        shards: shards.to_vec(),
        scales: norms.iter().map(|n| n.scale).collect(),
        batch_tokens,
        seed,
        epoch: 0,
        order,
        cursor: 0,
    })
}
