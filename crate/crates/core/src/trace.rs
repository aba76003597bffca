//! Memory-access traces and the datasets built from them.
//!
//! A trace is a sequence of `(instr_id, pc, addr)` records. Each history
//! window of `T` accesses becomes one [`Sample`]: a `T x S` matrix of
//! address segments plus a multi-hot delta bitmap label computed over the
//! following `W` accesses.
//!
//! Delta bitmap layout for half-width `R` (`D_O = 2R` bits):
//!
//! ```text
//! bit 0     -> delta -R
//! bit R - 1 -> delta -1
//! bit R     -> delta +1
//! bit 2R-1  -> delta +R
//! ```
//!
//! Delta 0 has no bit.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cache-line offset bits: 64-byte blocks.
pub const BLOCK_OFFSET_BITS: u32 = 6;
/// Blocks per 4 KB page.
pub const BLOCKS_PER_PAGE: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub instr_id: u64,
    pub pc: u64,
    pub addr: u64,
}

impl TraceRecord {
    pub fn block(&self) -> u64 {
        self.addr >> BLOCK_OFFSET_BITS
    }
}

/// Trace file formats understood by [`parse_trace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceFormat {
    /// `instr_id,0xpc,0xaddr` per line, `#` comments.
    #[default]
    Csv,
}

impl FromStr for TraceFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            other => Err(Error::config(format!("unknown trace format '{other}'"))),
        }
    }
}

pub fn parse_trace(path: &Path, format: TraceFormat) -> Result<Vec<TraceRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        TraceFormat::Csv => parse_trace_reader(BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        }),
    }
}

/// Parses the CSV trace format from any reader. Line numbers are 1-based.
pub fn parse_trace_reader(reader: impl BufRead) -> Result<Vec<TraceRecord>> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Io {
            path: "<trace>".into(),
            source: e,
        })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rec = parse_line(line).map_err(|msg| Error::Parse { line: lineno, msg })?;
        if let Some(prev) = out.last() {
            if rec.instr_id < prev.instr_id {
                return Err(Error::Ordering {
                    line: lineno,
                    prev: prev.instr_id,
                    found: rec.instr_id,
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

fn parse_line(line: &str) -> std::result::Result<TraceRecord, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 fields, found {}", fields.len()));
    }
    let instr_id = fields[0]
        .parse::<u64>()
        .map_err(|e| format!("instr_id '{}': {e}", fields[0]))?;
    Ok(TraceRecord {
        instr_id,
        pc: parse_hex(fields[1])?,
        addr: parse_hex(fields[2])?,
    })
}

fn parse_hex(s: &str) -> std::result::Result<u64, String> {
    let digits = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .ok_or_else(|| format!("'{s}' lacks 0x prefix"))?;
    u64::from_str_radix(digits, 16).map_err(|e| format!("'{s}': {e}"))
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut s = String::from("# instr_id,pc,addr\n");
    for r in records {
        s.push_str(&format!("{},{:#x},{:#x}\n", r.instr_id, r.pc, r.addr));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    /// History length `T`.
    pub history: usize,
    /// Page-address bit width `p`.
    pub page_bits: u32,
    /// Block-index bit width `c`; also the segment width.
    pub block_bits: u32,
    /// Look-forward window `W`.
    pub lookahead: usize,
    /// Delta bitmap half-width `R`.
    pub delta_range: usize,
    /// When non-zero, `ceil(pc_bits / c)` PC segments are appended to each row.
    pub pc_bits: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            history: 9,
            page_bits: 36,
            block_bits: 6,
            lookahead: 10,
            delta_range: 64,
            pc_bits: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.lookahead == 0 || self.delta_range == 0 {
            return Err(Error::config("T, W and R must all be >= 1"));
        }
        if self.block_bits == 0 || self.block_bits > 16 {
            return Err(Error::config("segment width c must be in 1..=16"));
        }
        if self.page_bits == 0 || self.page_bits + self.block_bits > 64 {
            return Err(Error::config("p + c must be in 1..=64 bits"));
        }
        if self.pc_bits > 64 {
            return Err(Error::config("pc_bits must be <= 64"));
        }
        Ok(())
    }

    /// Address segment count `S = ceil(p / c) + 1`.
    pub fn segments(&self) -> usize {
        self.page_bits.div_ceil(self.block_bits) as usize + 1
    }

    pub fn pc_segments(&self) -> usize {
        self.pc_bits.div_ceil(self.block_bits) as usize
    }

    /// Columns of the input matrix: address segments plus optional PC segments.
    pub fn input_width(&self) -> usize {
        self.segments() + self.pc_segments()
    }

    /// Delta bitmap size `D_O = 2R`.
    pub fn output_size(&self) -> usize {
        2 * self.delta_range
    }

    /// Feature scale mapping a segment value into `[0, 1)`.
    pub fn feature_scale(&self) -> f64 {
        1.0 / f64::from(1u32 << self.block_bits)
    }
}

/// Splits a block address into `S` segments of `c` bits, most-significant first.
pub fn segment_address(block_addr: u64, cfg: &DatasetConfig) -> Result<Vec<u32>> {
    let width = cfg.page_bits + cfg.block_bits;
    if width < 64 && block_addr >> width != 0 {
        return Err(Error::Range(format!(
            "block address {block_addr:#x} wider than {width} bits"
        )));
    }
    Ok(split_bits(block_addr, cfg.segments(), cfg.block_bits))
}

fn split_bits(value: u64, segments: usize, bits: u32) -> Vec<u32> {
    let mask = (1u64 << bits) - 1;
    (0..segments)
        .map(|i| {
            let shift = (segments - 1 - i) as u32 * bits;
            if shift >= 64 {
                0
            } else {
                ((value >> shift) & mask) as u32
            }
        })
        .collect()
}

/// Bit index for a block delta, or `None` when `d == 0` or `|d| > R`.
pub fn delta_to_bit(delta: i64, range: usize) -> Option<usize> {
    let r = range as i64;
    match delta {
        d if d < -r || d > r || d == 0 => None,
        d if d < 0 => Some((d + r) as usize),
        d => Some((d + r - 1) as usize),
    }
}

pub fn bit_to_delta(bit: usize, range: usize) -> i64 {
    let (b, r) = (bit as i64, range as i64);
    if b < r {
        b - r
    } else {
        b - r + 1
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Row-major `T x width` segment matrix.
    pub x: Vec<u32>,
    pub width: usize,
    pub pcs: Vec<u64>,
    /// Delta bitmap, entries 0 or 1.
    pub y: Vec<u8>,
}

impl Sample {
    pub fn history(&self) -> usize {
        self.pcs.len()
    }

    /// Model input: segments scaled into `[0, 1)`.
    pub fn features(&self, scale: f64) -> Tensor {
        Tensor::matrix(
            self.history(),
            self.width,
            self.x.iter().map(|&v| f64::from(v) * scale).collect(),
        )
        .expect("sample shape is consistent by construction")
    }

    pub fn label(&self) -> Vec<f64> {
        self.y.iter().map(|&b| f64::from(b)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub history: usize,
    pub width: usize,
    pub outputs: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Chronological split: the first `fraction` of samples and the rest.
    pub fn split(&self, fraction: f64) -> (Dataset, Dataset) {
        let cut = ((self.len() as f64) * fraction).round() as usize;
        let cut = cut.min(self.len());
        let head = Dataset {
            samples: self.samples[..cut].to_vec(),
            ..self.clone_empty()
        };
        let tail = Dataset {
            samples: self.samples[cut..].to_vec(),
            ..self.clone_empty()
        };
        (head, tail)
    }

    pub fn subset(&self, max: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(max).cloned().collect(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Dataset {
        Dataset {
            history: self.history,
            width: self.width,
            outputs: self.outputs,
            samples: Vec::new(),
        }
    }

    fn record_size(&self) -> usize {
        self.history * self.width * 4 + self.history * 8 + self.outputs
    }

    /// `TDS1` layout: magic, then `T`, `S`, `D_O` as u32 LE, then one
    /// fixed-size record per sample: `T*S` u32 segments, `T` u64 PCs,
    /// `D_O` label bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.magic(b"TDS1");
        w.len_u32(self.history)?;
        w.len_u32(self.width)?;
        w.len_u32(self.outputs)?;
        for s in &self.samples {
            for &v in &s.x {
                w.u32(v);
            }
            for &pc in &s.pcs {
                w.u64(pc);
            }
            w.bytes(&s.y);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(bytes);
        r.expect_magic(b"TDS1")?;
        let mut ds = Dataset {
            history: r.usize()?,
            width: r.usize()?,
            outputs: r.usize()?,
            samples: Vec::new(),
        };
        let size = ds.record_size();
        if size == 0 || r.remaining() % size != 0 {
            return Err(Error::Format(format!(
                "payload of {} bytes is not a multiple of the {size}-byte record",
                r.remaining()
            )));
        }
        while r.remaining() > 0 {
            let x = (0..ds.history * ds.width)
                .map(|_| r.u32())
                .collect::<Result<Vec<_>>>()?;
            let pcs = (0..ds.history).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let y = r.take(ds.outputs)?.to_vec();
            if y.iter().any(|&b| b > 1) {
                return Err(Error::Format("label byte outside {0,1}".into()));
            }
            ds.samples.push(Sample {
                x,
                width: ds.width,
                pcs,
                y,
            });
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&read_file(path)?)
    }

    /// Checks that this dataset was produced with `cfg`.
    pub fn check_config(&self, cfg: &DatasetConfig) -> Result<()> {
        if self.history != cfg.history || self.width != cfg.input_width() || self.outputs != cfg.output_size() {
            return Err(Error::config(format!(
                "dataset is T={} S={} D_O={}, config expects T={} S={} D_O={}",
                self.history,
                self.width,
                self.outputs,
                cfg.history,
                cfg.input_width(),
                cfg.output_size()
            )));
        }
        Ok(())
    }
}

/// Delta bitmap for position `t` of `blocks`.
pub fn delta_label(blocks: &[u64], t: usize, cfg: &DatasetConfig) -> Vec<u8> {
    let mut y = vec![0u8; cfg.output_size()];
    let here = blocks[t] as i128;
    let end = (t + cfg.lookahead).min(blocks.len() - 1);
    for &b in &blocks[t + 1..=end] {
        let d = b as i128 - here;
        if d.unsigned_abs() > cfg.delta_range as u128 {
            continue;
        }
        if let Some(bit) = delta_to_bit(d as i64, cfg.delta_range) {
            y[bit] = 1;
        }
    }
    y
}

/// Builds one sample per position `t` in `[T-1, N-W-1]`.
pub fn build_dataset(records: &[TraceRecord], cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (t_len, w_len) = (cfg.history, cfg.lookahead);
    let needed = t_len + w_len;
    if records.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            got: records.len(),
        });
    }
    let blocks: Vec<u64> = records.iter().map(TraceRecord::block).collect();
    let segmented: Vec<Vec<u32>> = records
        .iter()
        .map(|r| {
            let mut row = segment_address(r.block(), cfg)?;
            if cfg.pc_bits > 0 {
                let pc = if cfg.pc_bits < 64 {
                    r.pc & ((1u64 << cfg.pc_bits) - 1)
                } else {
                    r.pc
                };
                row.extend(split_bits(pc, cfg.pc_segments(), cfg.block_bits));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let width = cfg.input_width();
    let samples = (t_len - 1..records.len() - w_len)
        .map(|t| {
            let window = t + 1 - t_len..=t;
            Sample {
                x: segmented[window.clone()].iter().flatten().copied().collect(),
                width,
                pcs: records[window].iter().map(|r| r.pc).collect(),
                y: delta_label(&blocks, t, cfg),
            }
        })
        .collect();
    Ok(Dataset {
        history: t_len,
        width,
        outputs: cfg.output_size(),
        samples,
    })
}

/// Synthetic access patterns standing in for real workloads.
#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticPattern {
    /// Constant block stride from `start`.
    Stride { stride: i64, start: u64 },
    /// Round-robin interleaving of one stride stream per entry.
    InterleavedStride { strides: Vec<i64> },
    /// Uniform blocks within a set of `pages` pages; one page of the set is
    /// replaced every `rotate_every` accesses.
    RandomInPages { pages: usize, rotate_every: usize },
}

impl FromStr for SyntheticPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stride" => Ok(SyntheticPattern::Stride {
                stride: 1,
                start: 1 << 20,
            }),
            "interleaved-stride" => Ok(SyntheticPattern::InterleavedStride {
                strides: vec![1, 3, -2],
            }),
            "random-in-pages" => Ok(SyntheticPattern::RandomInPages {
                pages: 4,
                rotate_every: 256,
            }),
            other => Err(Error::config(format!("unknown synthetic pattern '{other}'"))),
        }
    }
}

impl fmt::Display for SyntheticPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticPattern::Stride { .. } => f.write_str("stride"),
            SyntheticPattern::InterleavedStride { .. } => f.write_str("interleaved-stride"),
            SyntheticPattern::RandomInPages { .. } => f.write_str("random-in-pages"),
        }
    }
}

/// A pattern plus a probability of replacing each access with a nearby
/// random block (within +-48 blocks of where the pattern would have gone).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub pattern: SyntheticPattern,
    pub noise: f64,
}

impl From<SyntheticPattern> for SyntheticSpec {
    fn from(pattern: SyntheticPattern) -> Self {
        SyntheticSpec { pattern, noise: 0.0 }
    }
}

const STREAM_SPACING: u64 = 1 << 24;
const NOISE_SPREAD: i64 = 48;

pub fn generate_synthetic_trace(spec: &SyntheticSpec, length: usize, seed: u64) -> Result<Vec<TraceRecord>> {
    if length == 0 {
        return Err(Error::config("synthetic trace length must be >= 1"));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::config("noise probability must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: Vec<(u64, u64)> = Vec::with_capacity(length);
    match &spec.pattern {
        SyntheticPattern::Stride { stride, start } => {
            for i in 0..length {
                let b = start.wrapping_add_signed(stride.wrapping_mul(i as i64));
                blocks.push((b, 0));
            }
        }
        SyntheticPattern::InterleavedStride { strides } => {
            if strides.is_empty() {
                return Err(Error::config("interleaved-stride needs at least one stream"));
            }
            let m = strides.len();
            for i in 0..length {
                let s = i % m;
                let base = STREAM_SPACING * (s as u64 + 1);
                let b = base.wrapping_add_signed(strides[s].wrapping_mul((i / m) as i64));
                blocks.push((b, s as u64));
            }
        }
        SyntheticPattern::RandomInPages { pages, rotate_every } => {
            if *pages == 0 || *rotate_every == 0 {
                return Err(Error::config("random-in-pages needs pages >= 1 and rotate_every >= 1"));
            }
            let mut set: Vec<u64> = (0..*pages).map(|_| rng.gen_range(1u64 << 10..1u64 << 20)).collect();
            let mut victim = 0;
            for i in 0..length {
                if i > 0 && i % rotate_every == 0 {
                    set[victim] = rng.gen_range(1u64 << 10..1u64 << 20);
                    victim = (victim + 1) % set.len();
                }
                let page = set[rng.gen_range(0..set.len())];
                let b = page * BLOCKS_PER_PAGE + rng.gen_range(0..BLOCKS_PER_PAGE);
                blocks.push((b, 0));
            }
        }
    }

    let mut instr_id = 0u64;
    let records = blocks
        .into_iter()
        .map(|(block, stream)| {
            let noisy = spec.noise > 0.0 && rng.gen_bool(spec.noise);
            let (block, pc) = if noisy {
                let off = rng.gen_range(-NOISE_SPREAD..=NOISE_SPREAD);
                (block.wrapping_add_signed(off), 0x50_0000 + stream * 4)
            } else {
                (block, 0x40_0000 + stream * 4)
            };
            instr_id += rng.gen_range(1..=8);
            let offset = rng.gen_range(0..1u64 << BLOCK_OFFSET_BITS);
            TraceRecord {
                instr_id,
                pc,
                addr: (block << BLOCK_OFFSET_BITS) | offset,
            }
        })
        .collect();
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blocks_to_records(blocks: &[u64]) -> Vec<TraceRecord> {
        blocks
            .iter()
            .enumerate()
            .map(|(i, &b)| TraceRecord {
                instr_id: i as u64,
                pc: 0x400000,
                addr: b << BLOCK_OFFSET_BITS,
            })
            .collect()
    }

    #[test]
    fn parses_a_well_formed_line() {
        let recs = parse_trace_reader("# header\n12,0x400a2f,0x7f3b1040\n".as_bytes()).unwrap();
        assert_eq!(
            recs,
            vec![TraceRecord {
                instr_id: 12,
                pc: 0x400a2f,
                addr: 0x7f3b1040
            }]
        );
    }

    #[test]
    fn arity_violation_reports_line() {
        let err = parse_trace_reader("12,0x400a2f\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn decreasing_instr_id_is_an_ordering_error() {
        let err = parse_trace_reader("10,0x1,0x2\n7,0x1,0x2\n".as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            Error::Ordering {
                line: 2,
                prev: 10,
                found: 7
            }
        ));
    }

    #[test]
    fn empty_input_is_empty_trace() {
        assert!(parse_trace_reader("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn segment_counts() {
        let cfg = DatasetConfig {
            page_bits: 36,
            block_bits: 6,
            ..Default::default()
        };
        assert_eq!(cfg.segments(), 7);
        assert_eq!(segment_address(0, &cfg).unwrap(), vec![0; 7]);
    }

    #[test]
    fn segments_are_most_significant_first() {
        let cfg = DatasetConfig {
            page_bits: 6,
            block_bits: 6,
            ..Default::default()
        };
        assert_eq!(cfg.segments(), 2);
        assert_eq!(segment_address(0b000001_000010, &cfg).unwrap(), vec![1, 2]);
        assert!(matches!(segment_address(1 << 12, &cfg), Err(Error::Range(_))));
    }

    #[test]
    fn delta_bit_layout() {
        let r = 64;
        assert_eq!(delta_to_bit(-64, r), Some(0));
        assert_eq!(delta_to_bit(-1, r), Some(63));
        assert_eq!(delta_to_bit(1, r), Some(64));
        assert_eq!(delta_to_bit(64, r), Some(127));
        assert_eq!(delta_to_bit(0, r), None);
        assert_eq!(delta_to_bit(65, r), None);
        for bit in 0..2 * r {
            assert_eq!(delta_to_bit(bit_to_delta(bit, r), r), Some(bit));
        }
    }

    #[test]
    fn hand_computed_window_label() {
        let cfg = DatasetConfig {
            history: 2,
            lookahead: 2,
            delta_range: 4,
            ..Default::default()
        };
        let ds = build_dataset(&blocks_to_records(&[100, 101, 102, 103, 104]), &cfg).unwrap();
        assert_eq!(ds.len(), 5 - 2 - 2 + 1);
        let first = &ds.samples[0];
        let set: Vec<usize> = (0..8).filter(|&i| first.y[i] == 1).collect();
        assert_eq!(set, vec![delta_to_bit(1, 4).unwrap(), delta_to_bit(2, 4).unwrap()]);
        assert_eq!(first.history(), 2);
        assert_eq!(first.x.len(), 2 * cfg.segments());
    }

    #[test]
    fn repeated_block_gives_empty_labels() {
        let cfg = DatasetConfig {
            history: 3,
            lookahead: 4,
            delta_range: 8,
            ..Default::default()
        };
        let ds = build_dataset(&blocks_to_records(&[77; 20]), &cfg).unwrap();
        assert!(ds.samples.iter().all(|s| s.y.iter().all(|&b| b == 0)));
    }

    #[test]
    fn far_deltas_are_clipped() {
        let cfg = DatasetConfig {
            history: 1,
            lookahead: 2,
            delta_range: 4,
            ..Default::default()
        };
        let ds = build_dataset(&blocks_to_records(&[0, 100, 200, 300, 400]), &cfg).unwrap();
        assert!(ds.samples.iter().all(|s| s.y.iter().all(|&b| b == 0)));
    }

    #[test]
    fn too_short_trace_is_insufficient() {
        let cfg = DatasetConfig {
            history: 4,
            lookahead: 4,
            ..Default::default()
        };
        let err = build_dataset(&blocks_to_records(&[1; 7]), &cfg).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { needed: 8, got: 7 }));
    }

    #[test]
    fn pc_segments_are_appended() {
        let cfg = DatasetConfig {
            history: 1,
            lookahead: 1,
            pc_bits: 24,
            ..Default::default()
        };
        let ds = build_dataset(&blocks_to_records(&[5, 6]), &cfg).unwrap();
        assert_eq!(ds.width, 7 + 4);
        // 0x400000 = 0b010000_000000_000000_000000
        assert_eq!(&ds.samples[0].x[7..], &[16, 0, 0, 0]);
    }

    #[test]
    fn stride_generator() {
        let spec = SyntheticSpec::from(SyntheticPattern::Stride { stride: 2, start: 0 });
        let t = generate_synthetic_trace(&spec, 5, 1).unwrap();
        let blocks: Vec<u64> = t.iter().map(TraceRecord::block).collect();
        assert_eq!(blocks, vec![0, 2, 4, 6, 8]);
        assert!(t.windows(2).all(|w| w[0].instr_id <= w[1].instr_id));
    }

    #[test]
    fn generators_are_deterministic() {
        for id in ["stride", "interleaved-stride", "random-in-pages"] {
            let spec = SyntheticSpec {
                pattern: id.parse().unwrap(),
                noise: 0.1,
            };
            let a = generate_synthetic_trace(&spec, 500, 42).unwrap();
            let b = generate_synthetic_trace(&spec, 500, 42).unwrap();
            assert_eq!(a, b, "{id}");
        }
    }

    #[test]
    fn interleaved_streams() {
        let spec = SyntheticSpec::from(SyntheticPattern::InterleavedStride { strides: vec![1, 10] });
        let blocks: Vec<u64> = generate_synthetic_trace(&spec, 40, 3)
            .unwrap()
            .iter()
            .map(TraceRecord::block)
            .collect();
        for i in (2..40).step_by(2) {
            assert_eq!(blocks[i] - blocks[i - 2], 1);
        }
        for i in (3..40).step_by(2) {
            assert_eq!(blocks[i] - blocks[i - 2], 10);
        }
    }

    #[test]
    fn random_in_pages_stays_in_page_set() {
        let spec = SyntheticSpec::from(SyntheticPattern::RandomInPages {
            pages: 3,
            rotate_every: 1000,
        });
        let t = generate_synthetic_trace(&spec, 900, 9).unwrap();
        let mut pages: Vec<u64> = t.iter().map(|r| r.block() / BLOCKS_PER_PAGE).collect();
        pages.sort_unstable();
        pages.dedup();
        assert!(pages.len() <= 3);
    }

    #[test]
    fn unknown_pattern_is_config_error() {
        assert!(matches!("zigzag".parse::<SyntheticPattern>(), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_bytes_round_trip() {
        let cfg = DatasetConfig::default();
        let spec = SyntheticSpec {
            pattern: "interleaved-stride".parse().unwrap(),
            noise: 0.2,
        };
        let trace = generate_synthetic_trace(&spec, 60, 5).unwrap();
        let ds = build_dataset(&trace, &cfg).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TDS1");
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn segments_recover_block_address(block in 0u64..(1u64 << 42)) {
            let cfg = DatasetConfig::default();
            let segs = segment_address(block, &cfg).unwrap();
            prop_assert!(segs.iter().all(|&s| s < 64));
            let back = segs.iter().fold(0u64, |acc, &s| (acc << 6) | u64::from(s));
            prop_assert_eq!(back, block);
        }

        #[test]
        fn labels_match_brute_force(
            deltas in proptest::collection::vec(-12i64..12, 12..40),
            t_len in 1usize..4,
            w_len in 1usize..5,
            range in 1usize..10,
        ) {
            let mut blocks = vec![1_000u64];
            for d in &deltas {
                let last = *blocks.last().unwrap();
                blocks.push(last.wrapping_add_signed(*d));
            }
            let cfg = DatasetConfig { history: t_len, lookahead: w_len, delta_range: range, ..Default::default() };
            let ds = build_dataset(&blocks_to_records(&blocks), &cfg).unwrap();
            prop_assert_eq!(ds.len(), blocks.len() - t_len - w_len + 1);
            for (i, s) in ds.samples.iter().enumerate() {
                let t = i + t_len - 1;
                for bit in 0..cfg.output_size() {
                    let d = bit_to_delta(bit, range);
                    let seen = (t + 1..=t + w_len).any(|u| blocks[u] as i64 - blocks[t] as i64 == d);
                    prop_assert_eq!(s.y[bit] == 1, seen);
                }
            }
        }
    }
}
