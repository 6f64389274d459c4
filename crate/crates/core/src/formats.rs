//! On-disk formats: binary weights and features, JSON-lines transcripts and
//! alignments, run configuration JSON, and atomic file writes.
//!
//! Binary files are little-endian. Weights (`SPWT`) carry a header of
//! `version, layers, dim, ff_dim, heads, vocab` as `u32`, then for each layer
//! the sixteen parameter blocks of [`EncoderLayerWeights::blocks`], then the
//! CTC weight and bias, all as `f32`. Features (`SPFT`) carry
//! `version, frames, dim` as `u32` followed by row-major `f32` data.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::block::BlockConfig;
use crate::ctc::{Transcript, WordSpan};
use crate::encoder::{EncoderLayerWeights, EncoderWeights, ModelDims};
use crate::error::{Result, SpiralError};
use crate::metrics::AlignedWord;
use crate::schedule::{EngineMode, SpiralConfig};
use crate::tensor::{FeatureMatrix, PositionalEncoding};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"SPWT";
pub const FEATURES_MAGIC: &[u8; 4] = b"SPFT";
pub const FORMAT_VERSION: u32 = 1;

pub const LAYER_BLOCK_NAMES: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2", "ln1_scale", "ln1_offset",
    "ln2_scale", "ln2_offset",
];

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| SpiralError::format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(SpiralError::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(SpiralError::format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| SpiralError::format("block length overflows"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(SpiralError::format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| SpiralError::format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_weights(w: &EncoderWeights) -> Result<Vec<u8>> {
    w.validate()?;
    let d = w.dims;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    for v in [FORMAT_VERSION as usize, d.layers, d.dim, d.ff_dim, d.heads, d.vocab] {
        put_u32(&mut out, v)?;
    }
    for layer in &w.layers {
        for block in layer.blocks() {
            put_f32s(&mut out, block);
        }
    }
    put_f32s(&mut out, &w.ctc_weight);
    put_f32s(&mut out, &w.ctc_bias);
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<EncoderWeights> {
    let mut r = Reader::new(bytes);
    r.magic(WEIGHTS_MAGIC)?;
    let dims = ModelDims {
        layers: r.u32()?,
        dim: r.u32()?,
        ff_dim: r.u32()?,
        heads: r.u32()?,
        vocab: r.u32()?,
    };
    if dims.dim == 0 || dims.heads == 0 || !dims.dim.is_multiple_of(dims.heads) {
        return Err(SpiralError::format(format!(
            "dim {} is not divisible by {} heads",
            dims.dim, dims.heads
        )));
    }
    let lens = EncoderLayerWeights::block_lens(dims.dim, dims.ff_dim);
    let mut layers = Vec::with_capacity(dims.layers.min(1024));
    for _ in 0..dims.layers {
        let mut layer = EncoderLayerWeights::zeros(dims.dim, dims.ff_dim, dims.heads);
        for (slot, len) in layer.blocks_mut().into_iter().zip(lens) {
            *slot = r.f32s(len)?;
        }
        layers.push(layer);
    }
    let classes = dims.vocab + 1;
    let ctc_weight = r.f32s(dims.dim * classes)?;
    let ctc_bias = r.f32s(classes)?;
    r.finish()?;
    let w = EncoderWeights {
        dims,
        layers,
        ctc_weight,
        ctc_bias,
        positional: PositionalEncoding::default(),
    };
    w.validate()?;
    Ok(w)
}

/// Human-readable mirror of a weight file header.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub magic: String,
    pub version: u32,
    pub layers: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub layer_blocks: Vec<BlockEntry>,
    pub ctc_weight_len: usize,
    pub ctc_bias_len: usize,
    pub total_bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub len: usize,
}

pub fn weight_manifest(w: &EncoderWeights) -> Result<WeightManifest> {
    let bytes = encode_weights(w)?;
    let d = w.dims;
    let lens = EncoderLayerWeights::block_lens(d.dim, d.ff_dim);
    Ok(WeightManifest {
        magic: "SPWT".into(),
        version: FORMAT_VERSION,
        layers: d.layers,
        dim: d.dim,
        ff_dim: d.ff_dim,
        heads: d.heads,
        vocab: d.vocab,
        layer_blocks: LAYER_BLOCK_NAMES
            .iter()
            .zip(lens)
            .map(|(n, len)| BlockEntry { name: n.to_string(), len })
            .collect(),
        ctc_weight_len: w.ctc_weight.len(),
        ctc_bias_len: w.ctc_bias.len(),
        total_bytes: bytes.len(),
        sha256: sha256_hex(&bytes),
    })
}

/// Path of the JSON manifest written next to a weight file.
pub fn manifest_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write `path` and its JSON manifest.
pub fn write_weights(path: &Path, w: &EncoderWeights) -> Result<()> {
    atomic_write(path, &encode_weights(w)?)?;
    write_json(&manifest_path(path), &weight_manifest(w)?)
}

pub fn read_weights(path: &Path) -> Result<EncoderWeights> {
    decode_weights(&fs::read(path)?)
}

pub fn encode_features(m: &FeatureMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * m.data().len());
    out.extend_from_slice(FEATURES_MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize)?;
    put_u32(&mut out, m.rows())?;
    put_u32(&mut out, m.cols())?;
    put_f32s(&mut out, m.data());
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURES_MAGIC)?;
    let frames = r.u32()?;
    let dim = r.u32()?;
    let n = frames
        .checked_mul(dim)
        .ok_or_else(|| SpiralError::format("feature size overflows"))?;
    let data = r.f32s(n)?;
    r.finish()?;
    FeatureMatrix::from_vec(frames, dim, data)
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    atomic_write(path, &encode_features(m)?)
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    decode_features(&fs::read(path)?)
}

/// One frame per line, values separated by commas or whitespace. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_features_csv(text: &str) -> Result<FeatureMatrix> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f32>()
                    .map_err(|e| SpiralError::format(format!("line {}: {s:?}: {e}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(SpiralError::format(format!(
                    "line {} has {} values, expected {}",
                    n + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(SpiralError::EmptyInput("CSV contains no frames".into()));
    }
    FeatureMatrix::from_rows(&rows, cols)
}

pub fn read_features_csv(path: &Path) -> Result<FeatureMatrix> {
    parse_features_csv(&fs::read_to_string(path)?)
}

/// Read `.spft` or `.csv` by extension.
pub fn read_features_any(path: &Path) -> Result<FeatureMatrix> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_features_csv(path),
        _ => read_features(path),
    }
}

/// Feature files under `path`, keyed by file stem and sorted. A single file
/// yields one utterance.
pub fn list_feature_files(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if path.is_dir() {
        let mut out = Vec::new();
        for entry in fs::read_dir(path)? {
            let p = entry?.path();
            if matches!(p.extension().and_then(|e| e.to_str()), Some("spft" | "csv")) {
                out.push((stem(&p), p));
            }
        }
        out.sort();
        Ok(out)
    } else {
        Ok(vec![(stem(path), path.to_path_buf())])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub utt_id: String,
    pub tokens: Vec<usize>,
    #[serde(default)]
    pub words: Vec<WordSpan>,
}

impl TranscriptRecord {
    pub fn transcript(&self) -> Transcript {
        Transcript {
            tokens: self.tokens.clone(),
            words: self.words.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub utt_id: String,
    pub words: Vec<AlignedWord>,
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| SpiralError::format(format!("line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(&fs::read_to_string(path)?)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    atomic_write(path, to_jsonl(records)?.as_bytes())
}

fn default_frame_ms() -> f64 {
    40.0
}

fn yes() -> bool {
    true
}

/// Flat run configuration: block geometry plus layer schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n_left: usize,
    pub n_center: usize,
    pub n_right: usize,
    #[serde(default = "default_frame_ms")]
    pub frame_ms: f64,
    pub total_layers: usize,
    #[serde(default = "one")]
    pub pitch: usize,
    #[serde(default = "yes")]
    pub cache_combination: bool,
    #[serde(default)]
    pub layer0_cache: bool,
    #[serde(default)]
    pub mode: EngineMode,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn new(block: BlockConfig, schedule: SpiralConfig) -> Self {
        RunConfig {
            n_left: block.n_left,
            n_center: block.n_center,
            n_right: block.n_right,
            frame_ms: block.frame_ms,
            total_layers: schedule.total_layers,
            pitch: schedule.pitch,
            cache_combination: schedule.cache_combination,
            layer0_cache: schedule.layer0_cache,
            mode: schedule.mode,
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig::new(self.n_left, self.n_center, self.n_right).with_frame_ms(self.frame_ms)
    }

    pub fn schedule(&self) -> SpiralConfig {
        SpiralConfig {
            total_layers: self.total_layers,
            pitch: self.pitch,
            cache_combination: self.cache_combination,
            layer0_cache: self.layer0_cache,
            mode: self.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        self.schedule().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| SpiralError::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write through a temporary file in the destination directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| SpiralError::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims { layers: 2, dim: 4, ff_dim: 6, heads: 2, vocab: 3 }
    }

    #[test]
    fn weights_round_trip() {
        let w = EncoderWeights::random(dims(), 1);
        let bytes = encode_weights(&w).unwrap();
        let per_layer: usize = EncoderLayerWeights::block_lens(4, 6).iter().sum();
        assert_eq!(bytes.len(), 4 + 6 * 4 + 4 * (2 * per_layer + 4 * 4 + 4));
        assert_eq!(decode_weights(&bytes).unwrap(), w);
    }

    #[test]
    fn weights_header_layout() {
        let bytes = encode_weights(&EncoderWeights::random(dims(), 1)).unwrap();
        assert_eq!(&bytes[..4], b"SPWT");
        let words: Vec<u32> = bytes[4..28]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![1, 2, 4, 6, 2, 3]);
    }

    #[test]
    fn weights_first_value_is_wq_of_layer_one() {
        let w = EncoderWeights::random(dims(), 9);
        let bytes = encode_weights(&w).unwrap();
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), w.layers[0].wq[0]);
        let n = bytes.len();
        assert_eq!(f32::from_le_bytes(bytes[n - 4..].try_into().unwrap()), *w.ctc_bias.last().unwrap());
    }

    #[test]
    fn weights_rejects_corruption() {
        let bytes = encode_weights(&EncoderWeights::random(dims(), 1)).unwrap();
        assert!(matches!(decode_weights(&bytes[..bytes.len() - 1]), Err(SpiralError::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_weights(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_weights(&bad).is_err());
        let mut ver = bytes;
        ver[4] = 2;
        assert!(decode_weights(&ver).is_err());
    }

    #[test]
    fn manifest_mirrors_header() {
        let w = EncoderWeights::random(dims(), 1);
        let m = weight_manifest(&w).unwrap();
        assert_eq!((m.layers, m.dim, m.ff_dim, m.heads, m.vocab), (2, 4, 6, 2, 3));
        assert_eq!(m.layer_blocks.len(), 16);
        assert_eq!(m.layer_blocks[8].name, "w1");
        assert_eq!(m.total_bytes, encode_weights(&w).unwrap().len());
    }

    #[test]
    fn features_round_trip_and_layout() {
        let m = FeatureMatrix::from_vec(2, 3, vec![1.0, -2.5, 0.0, 3.25, 4.0, f32::MIN_POSITIVE]).unwrap();
        let b = encode_features(&m).unwrap();
        assert_eq!(&b[..4], b"SPFT");
        assert_eq!(&b[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(decode_features(&b).unwrap(), m);
    }

    #[test]
    fn csv_import() {
        let m = parse_features_csv("# frames\n1, 2,3\n\n4 5 6\n").unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 3));
        assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);
        assert!(parse_features_csv("1,2\n3\n").is_err());
        assert!(parse_features_csv("1,x\n").is_err());
        assert!(matches!(parse_features_csv("\n"), Err(SpiralError::EmptyInput(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![
            AlignmentRecord {
                utt_id: "u1".into(),
                words: vec![AlignedWord { text: "a".into(), start_ms: 0.0, end_ms: 80.0 }],
            },
            AlignmentRecord { utt_id: "u2".into(), words: vec![] },
        ];
        let text = to_jsonl(&recs).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_jsonl::<AlignmentRecord>(&text).unwrap(), recs);
        let t: Vec<TranscriptRecord> =
            parse_jsonl(r#"{"utt_id":"x","tokens":[1,2],"words":[{"text":"ab","token_span":[0,2]}]}"#).unwrap();
        assert_eq!(t[0].transcript().words[0].token_span, (0, 2));
    }

    #[test]
    fn run_config_json() {
        let c = RunConfig::from_json(r#"{"n_left":30,"n_center":2,"n_right":8,"total_layers":12,"pitch":4}"#)
            .unwrap();
        assert_eq!(c.frame_ms, 40.0);
        assert!(c.cache_combination);
        assert_eq!(c.schedule(), SpiralConfig::spiral(12, 4));
        let err = RunConfig::from_json(r#"{"n_left":1,"n_center":2,"n_right":1,"total_layers":12,"pitch":5}"#)
            .unwrap_err();
        assert!(err.to_string().contains("divisible"));
        assert!(RunConfig::from_json(r#"{"n_left":1,"n_center":2,"n_right":1,"total_layers":4,"typo":1}"#).is_err());
        let b = RunConfig::from_json(r#"{"n_left":1,"n_center":2,"n_right":1,"total_layers":6,"mode":"baseline","cache_combination":false}"#).unwrap();
        assert_eq!(b.schedule(), SpiralConfig::baseline(6));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.bin");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn weight_files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.spwt");
        let w = EncoderWeights::random(dims(), 3);
        write_weights(&p, &w).unwrap();
        assert_eq!(read_weights(&p).unwrap(), w);
        let m: WeightManifest = serde_json::from_str(&fs::read_to_string(manifest_path(&p)).unwrap()).unwrap();
        assert_eq!(m.sha256, sha256_hex(&fs::read(&p).unwrap()));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
