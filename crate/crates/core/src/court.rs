//! Half-court geometry, the block partition, and shot binning.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;

use crate::error::{Error, Result};

/// Length of the offensive half court (baseline to half-court line), in feet.
pub const COURT_LENGTH: f64 = 47.0;
/// Width of the court, in feet.
pub const COURT_WIDTH: f64 = 50.0;

/// A single field goal attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotRecord {
    pub player_id: String,
    pub x: f64,
    pub y: f64,
    pub made: Option<bool>,
}

impl ShotRecord {
    pub fn new(player_id: impl Into<String>, x: f64, y: f64) -> Self {
        Self {
            player_id: player_id.into(),
            x,
            y,
            made: None,
        }
    }

    pub fn in_half_court(&self) -> bool {
        (0.0..=COURT_LENGTH).contains(&self.x) && (0.0..=COURT_WIDTH).contains(&self.y)
    }
}

/// Regular rectangular partition of the half court.
///
/// Block `j` sits at `row = j / nx`, `col = j % nx`, where `col` indexes the
/// x axis and `row` the y axis. Blocks are half-open on their upper edges except
/// the last block along each axis, which is closed so every point of the court
/// lands in exactly one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CourtGrid {
    pub block_len_x: f64,
    pub block_len_y: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Default for CourtGrid {
    fn default() -> Self {
        Self::standard()
    }
}

impl CourtGrid {
    /// 1 ft x 2 ft blocks: 47 x 25 = 1175 blocks.
    pub const fn standard() -> Self {
        Self {
            block_len_x: 1.0,
            block_len_y: 2.0,
            nx: 47,
            ny: 25,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.nx * self.ny
    }

    pub fn block_area(&self) -> f64 {
        self.block_len_x * self.block_len_y
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.ny && col < self.nx);
        row * self.nx + col
    }

    pub fn row_col(&self, j: usize) -> (usize, usize) {
        (j / self.nx, j % self.nx)
    }

    /// Centroid of block `j` in court feet.
    pub fn centroid(&self, j: usize) -> (f64, f64) {
        let (row, col) = self.row_col(j);
        (
            (col as f64 + 0.5) * self.block_len_x,
            (row as f64 + 0.5) * self.block_len_y,
        )
    }

    /// Block containing the point, or `None` outside the court.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        let col = axis_bin(x, self.block_len_x, self.nx)?;
        let row = axis_bin(y, self.block_len_y, self.ny)?;
        Some(self.index(row, col))
    }
}

fn axis_bin(v: f64, width: f64, count: usize) -> Option<usize> {
    let upper = width * count as f64;
    if !(0.0..=upper).contains(&v) {
        return None;
    }
    // closed upper edge on the last block
    Some(((v / width).floor() as usize).min(count - 1))
}

/// Per-player block counts, `n x J`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    pub player_ids: Vec<String>,
    pub y: Array2<u32>,
}

impl CountMatrix {
    pub fn new(player_ids: Vec<String>, y: Array2<u32>) -> Result<Self> {
        if player_ids.len() != y.nrows() {
            return Err(Error::Dimension(format!(
                "{} player ids for {} count rows",
                player_ids.len(),
                y.nrows()
            )));
        }
        Ok(Self { player_ids, y })
    }

    pub fn n_players(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_blocks(&self) -> usize {
        self.y.ncols()
    }

    pub fn row_total(&self, i: usize) -> u64 {
        self.y.row(i).iter().map(|&v| v as u64).sum()
    }

    /// Keeps only the given blocks, in the given order.
    pub fn select_blocks(&self, blocks: &[usize]) -> Self {
        let y = self.y.select(ndarray::Axis(1), blocks);
        Self {
            player_ids: self.player_ids.clone(),
            y,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let mut header = vec!["player_id".to_string()];
        header.extend((0..self.n_blocks()).map(|j| j.to_string()));
        w.write_record(&header)?;
        for (i, id) in self.player_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.y.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(BufReader::new(file));
        let n_blocks = r.headers()?.len().saturating_sub(1);
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != n_blocks + 1 {
                return Err(Error::Format {
                    path: path.into(),
                    message: format!("row {} has {} fields, expected {}", line + 1, rec.len(), n_blocks + 1),
                });
            }
            ids.push(rec[0].to_string());
            for field in rec.iter().skip(1) {
                let v: u32 = field.trim().parse().map_err(|_| Error::Format {
                    path: path.into(),
                    message: format!("row {}: '{field}' is not a nonnegative integer count", line + 1),
                })?;
                values.push(v);
            }
        }
        let y = Array2::from_shape_vec((ids.len(), n_blocks), values)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(ids, y)
    }

    /// Compact little-endian cache: magic, n, J, ids, then counts row-major.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::with_capacity(16 + 4 * self.y.len());
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&(self.n_players() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.n_blocks() as u64).to_le_bytes());
        for id in &self.player_ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for v in self.y.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |message: &str| Error::Format {
            path: path.into(),
            message: message.to_string(),
        };
        let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
        if cur.take(CACHE_MAGIC.len()).ok_or_else(|| bad("truncated header"))? != CACHE_MAGIC {
            return Err(bad("not a count-matrix cache"));
        }
        let n = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let j = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = cur.u32().ok_or_else(|| bad("truncated player id"))? as usize;
            let raw = cur.take(len).ok_or_else(|| bad("truncated player id"))?;
            ids.push(String::from_utf8(raw.to_vec()).map_err(|_| bad("player id is not UTF-8"))?);
        }
        let mut values = Vec::with_capacity(n * j);
        for _ in 0..n * j {
            values.push(cur.u32().ok_or_else(|| bad("truncated counts"))?);
        }
        let y = Array2::from_shape_vec((n, j), values).map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(ids, y)
    }

    /// Reads either format, choosing by the cache magic.
    pub fn read_any(path: &Path) -> Result<Self> {
        let mut head = [0u8; 8];
        let is_cache = File::open(path)
            .and_then(|mut f| f.read(&mut head))
            .map(|read| read == 8 && &head == CACHE_MAGIC)
            .map_err(|e| Error::io(path, e))?;
        if is_cache {
            Self::read_binary(path)
        } else {
            Self::read_csv(path)
        }
    }
}

const CACHE_MAGIC: &[u8; 8] = b"MFMZCNT1";

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, len: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + len)?;
        self.pos += len;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Bins shot records into a count matrix with one row per declared player.
///
/// Every record must fall inside the half court and belong to one of `players`.
pub fn bin_shots(records: &[ShotRecord], grid: &CourtGrid, players: &[String]) -> Result<CountMatrix> {
    let row_of: HashMap<&str, usize> = players
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    if row_of.len() != players.len() {
        return Err(Error::PlayerFilter("duplicate player id in player list".into()));
    }
    let mut y = Array2::<u32>::zeros((players.len(), grid.n_blocks()));
    for (index, rec) in records.iter().enumerate() {
        let j = grid.locate(rec.x, rec.y).ok_or(Error::OutOfDomain {
            index,
            x: rec.x,
            y: rec.y,
        })?;
        let i = *row_of.get(rec.player_id.as_str()).ok_or_else(|| {
            Error::PlayerFilter(format!(
                "record {index} belongs to player '{}' who is not in the player list",
                rec.player_id
            ))
        })?;
        y[[i, j]] += 1;
    }
    CountMatrix::new(players.to_vec(), y)
}

/// Distinct player ids in order of first appearance.
pub fn players_in_order(records: &[ShotRecord]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.player_id.as_str()))
        .map(|r| r.player_id.clone())
        .collect()
}

/// Histogram buckets for [`count_histogram`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CountBucket {
    Exactly(u32),
    SixPlus,
}

impl std::fmt::Display for CountBucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CountBucket::Exactly(k) => write!(f, "{k}"),
            CountBucket::SixPlus => f.write_str("6+"),
        }
    }
}

/// Number of blocks holding 0, 1, ..., 5 and 6 or more shots for one player.
pub fn count_histogram(counts: &CountMatrix, player: usize) -> Result<BTreeMap<CountBucket, usize>> {
    if player >= counts.n_players() {
        return Err(Error::Parameter(format!(
            "player index {player} out of range for {} players",
            counts.n_players()
        )));
    }
    let mut hist: BTreeMap<CountBucket, usize> = (0..=5)
        .map(CountBucket::Exactly)
        .chain(std::iter::once(CountBucket::SixPlus))
        .map(|b| (b, 0))
        .collect();
    for &v in counts.y.row(player) {
        let bucket = if v >= 6 {
            CountBucket::SixPlus
        } else {
            CountBucket::Exactly(v)
        };
        *hist.get_mut(&bucket).unwrap() += 1;
    }
    Ok(hist)
}

/// Options applied while reading raw shot files.
#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Map full-court coordinates onto the offensive half by a 180 degree rotation.
    pub reflect: bool,
    /// Keep only players with at least this many attempts.
    pub min_attempts: usize,
    /// Player ids dropped regardless of attempt count.
    pub exclude: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawShot {
    player_id: String,
    x: f64,
    y: f64,
    #[serde(default, deserialize_with = "parse_made")]
    made: Option<bool>,
}

fn parse_made<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<bool>, D::Error> {
    let raw: Option<String> = Option::deserialize(d)?;
    Ok(match raw.as_deref().map(str::trim) {
        None | Some("") => None,
        Some("1") | Some("true") | Some("TRUE") | Some("True") => Some(true),
        Some("0") | Some("false") | Some("FALSE") | Some("False") => Some(false),
        Some(other) => return Err(serde::de::Error::custom(format!("bad made flag '{other}'"))),
    })
}

/// Reads a `player_id,x,y[,made]` shot file and applies the ingest filters.
pub fn read_shots(path: &Path, opts: &IngestOptions) -> Result<Vec<ShotRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let mut records = Vec::new();
    for (index, row) in reader.deserialize::<RawShot>().enumerate() {
        let raw = row?;
        let (mut x, mut y) = (raw.x, raw.y);
        if opts.reflect && x > COURT_LENGTH && x <= 2.0 * COURT_LENGTH {
            x = 2.0 * COURT_LENGTH - x;
            y = COURT_WIDTH - y;
        }
        let rec = ShotRecord {
            player_id: raw.player_id,
            x,
            y,
            made: raw.made,
        };
        if !rec.in_half_court() {
            return Err(Error::OutOfDomain { index, x: raw.x, y: raw.y });
        }
        records.push(rec);
    }
    Ok(filter_players(records, opts))
}

/// Drops excluded players and those below the attempt threshold.
pub fn filter_players(records: Vec<ShotRecord>, opts: &IngestOptions) -> Vec<ShotRecord> {
    let mut attempts: HashMap<&str, usize> = HashMap::new();
    for r in &records {
        *attempts.entry(r.player_id.as_str()).or_default() += 1;
    }
    let keep: std::collections::HashSet<String> = attempts
        .into_iter()
        .filter(|(id, n)| *n >= opts.min_attempts && !opts.exclude.iter().any(|e| e == id))
        .map(|(id, _)| id.to_string())
        .collect();
    records
        .into_iter()
        .filter(|r| keep.contains(&r.player_id))
        .collect()
}
