//! Chunked on-disk storage for tall matrices of measurement columns.
//!
//! A chunked store is a directory:
//!
//! ```text
//! manifest.toml          layout description (see `Manifest`)
//! chunk-00000.bin        columns [0, c) as raw little-endian f64, column-major
//! chunk-00000.cols       "start end" lines recording which columns were written
//! chunk-00001.bin        columns [c, 2c)
//! ...
//! ```
//!
//! Independent writers may fill disjoint column ranges concurrently.
//! [`MatrixStore::merge`] streams a complete store into a single file made of
//! an 8-byte magic, a little-endian `u64` header length, the TOML manifest,
//! and one contiguous data segment. Both forms read back bit-exactly through
//! the same [`MatrixStore`] API.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::linalg::Block;

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64-le";
pub const MANIFEST_FILE: &str = "manifest.toml";
const MERGED_MAGIC: &[u8; 8] = b"SKOVMAT1";
const ELEM: usize = std::mem::size_of::<f64>();

/// Columns held in memory at once while merging; the transient buffer is
/// `MERGE_BUFFER_COLUMNS × rows` elements.
pub const MERGE_BUFFER_COLUMNS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    #[default]
    Chunked,
    Merged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub file: String,
    pub col_start: usize,
    pub col_end: usize,
    /// CRC-32 of the chunk's bytes, recorded by [`MatrixStore::finalize`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crc32: Option<u32>,
}

impl ChunkEntry {
    pub fn width(&self) -> usize {
        self.col_end - self.col_start
    }

    fn range(&self) -> Range<usize> {
        self.col_start..self.col_end
    }
}

/// Self-describing layout. Readers ignore fields they do not know.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default)]
    pub layout: Layout,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub chunk_cols: usize,
    pub chunks: Vec<ChunkEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Manifest {
    fn new(rows: usize, cols: usize, chunk_cols: usize, metadata: BTreeMap<String, String>) -> Self {
        let chunks = (0..cols.div_ceil(chunk_cols))
            .map(|c| ChunkEntry {
                file: format!("chunk-{c:05}.bin"),
                col_start: c * chunk_cols,
                col_end: ((c + 1) * chunk_cols).min(cols),
                crc32: None,
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            layout: Layout::Chunked,
            rows,
            cols,
            dtype: DTYPE.into(),
            chunk_cols,
            chunks,
            metadata,
        }
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            reason,
        };
        if self.format_version > FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", self.format_version)));
        }
        if self.dtype != DTYPE {
            return Err(bad(format!("unsupported dtype '{}'", self.dtype)));
        }
        if self.rows == 0 || self.cols == 0 || self.chunk_cols == 0 {
            return Err(bad("rows, cols and chunk_cols must be positive".into()));
        }
        let mut next = 0;
        for (id, c) in self.chunks.iter().enumerate() {
            if c.col_start != next || c.col_end <= c.col_start {
                return Err(bad(format!("chunk {id} range {}..{} is not contiguous", c.col_start, c.col_end)));
            }
            next = c.col_end;
        }
        if next != self.cols {
            return Err(bad(format!("chunks cover {next} of {} columns", self.cols)));
        }
        Ok(())
    }

    fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// One problem found by [`MatrixStore::verify`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkIssue {
    pub chunk: usize,
    pub reason: String,
}

impl From<ChunkIssue> for Error {
    fn from(issue: ChunkIssue) -> Self {
        Error::Integrity {
            chunk: issue.chunk,
            reason: issue.reason,
        }
    }
}

#[derive(Debug)]
enum Backing {
    Chunked { dir: PathBuf },
    Merged { file: PathBuf, data_offset: u64 },
}

/// A chunked or merged column store.
#[derive(Debug)]
pub struct MatrixStore {
    manifest: Manifest,
    backing: Backing,
    in_flight: Mutex<Vec<Range<usize>>>,
}

struct RangeGuard<'a> {
    store: &'a MatrixStore,
    range: Range<usize>,
}

impl Drop for RangeGuard<'_> {
    fn drop(&mut self) {
        let mut held = self.store.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(pos) = held.iter().position(|r| *r == self.range) {
            held.swap_remove(pos);
        }
    }
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Creates an empty chunked layout at `dir`. An existing store (or empty
/// directory) at `dir` is replaced only when `overwrite` is set; any other
/// existing path is refused.
pub fn create_layout(
    dir: &Path,
    rows: usize,
    cols: usize,
    chunk_cols: usize,
    overwrite: bool,
    metadata: BTreeMap<String, String>,
) -> Result<MatrixStore> {
    if rows == 0 || cols == 0 || chunk_cols == 0 {
        return Err(param_err!("rows, cols and chunk_cols must be positive"));
    }
    if dir.exists() {
        let is_store = dir.join(MANIFEST_FILE).is_file();
        let is_empty_dir = dir.is_dir() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if !overwrite || !(is_store || is_empty_dir) {
            return Err(Error::io(
                dir,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    if overwrite {
                        "refusing to replace a path that is not a matrix store"
                    } else {
                        "path exists (pass overwrite to replace)"
                    },
                ),
            ));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest::new(rows, cols, chunk_cols, metadata);
    write_manifest(dir, &manifest)?;
    Ok(MatrixStore {
        manifest,
        backing: Backing::Chunked { dir: dir.to_path_buf() },
        in_flight: Mutex::new(Vec::new()),
    })
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, manifest.to_toml()).map_err(|e| Error::io(&tmp, e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes
        .chunks_exact(ELEM)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
}

impl MatrixStore {
    /// Opens a chunked store directory or a merged file.
    pub fn open(path: &Path) -> Result<Self> {
        let (manifest, backing) = if path.is_dir() {
            let mpath = path.join(MANIFEST_FILE);
            let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Manifest {
                path: mpath.clone(),
                reason: e.to_string(),
            })?;
            manifest.validate(&mpath)?;
            (manifest, Backing::Chunked { dir: path.to_path_buf() })
        } else {
            let (manifest, data_offset) = read_merged_header(path)?;
            (
                manifest,
                Backing::Merged {
                    file: path.to_path_buf(),
                    data_offset,
                },
            )
        };
        Ok(Self {
            manifest,
            backing,
            in_flight: Mutex::new(Vec::new()),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn rows(&self) -> usize {
        self.manifest.rows
    }

    pub fn cols(&self) -> usize {
        self.manifest.cols
    }

    pub fn chunks(&self) -> &[ChunkEntry] {
        &self.manifest.chunks
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.manifest.metadata
    }

    pub fn is_merged(&self) -> bool {
        matches!(self.backing, Backing::Merged { .. })
    }

    fn check_range(&self, col_start: usize, width: usize) -> Result<()> {
        if col_start.checked_add(width).is_none_or(|end| end > self.cols()) {
            return Err(shape_err!(
                "columns {col_start}..{} outside 0..{}",
                col_start.saturating_add(width),
                self.cols()
            ));
        }
        Ok(())
    }

    fn chunk_dir(&self) -> Result<&Path> {
        match &self.backing {
            Backing::Chunked { dir } => Ok(dir),
            Backing::Merged { file, .. } => Err(Error::Contract(format!(
                "{} is a merged store and is read-only",
                file.display()
            ))),
        }
    }

    fn chunk_ids(&self, range: Range<usize>) -> impl Iterator<Item = (usize, &ChunkEntry)> {
        self.chunks()
            .iter()
            .enumerate()
            .filter(move |(_, c)| overlaps(&c.range(), &range))
    }

    fn acquire(&self, range: Range<usize>) -> Result<RangeGuard<'_>> {
        let mut held = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(other) = held.iter().find(|r| overlaps(r, &range)) {
            return Err(Error::Contract(format!(
                "columns {}..{} overlap an in-flight write of {}..{}",
                range.start, range.end, other.start, other.end
            )));
        }
        held.push(range.clone());
        Ok(RangeGuard { store: self, range })
    }

    /// Writes `block` into columns `col_start..col_start + block.ncols()`.
    /// Concurrent calls on disjoint ranges are safe; overlapping in-flight
    /// ranges are rejected.
    pub fn write_columns(&self, col_start: usize, block: &Block) -> Result<()> {
        let dir = self.chunk_dir()?;
        if block.nrows() != self.rows() {
            return Err(shape_err!("block has {} rows, store has {}", block.nrows(), self.rows()));
        }
        let width = block.ncols();
        self.check_range(col_start, width)?;
        if width == 0 {
            return Ok(());
        }
        let range = col_start..col_start + width;
        let _guard = self.acquire(range.clone())?;
        let rows = self.rows();
        for (_, chunk) in self.chunk_ids(range.clone()) {
            let lo = range.start.max(chunk.col_start);
            let hi = range.end.min(chunk.col_end);
            let values = &block.as_slice()[(lo - col_start) * rows..(hi - col_start) * rows];
            let path = dir.join(&chunk.file);
            let file = OpenOptions::new()
                .create(true)
                .truncate(false)
                .write(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let offset = ((lo - chunk.col_start) * rows * ELEM) as u64;
            file.write_all_at(&to_bytes(values), offset).map_err(|e| Error::io(&path, e))?;
            file.sync_data().map_err(|e| Error::io(&path, e))?;

            let log = dir.join(written_log(&chunk.file));
            let mut log_file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log)
                .map_err(|e| Error::io(&log, e))?;
            log_file
                .write_all(format!("{lo} {hi}\n").as_bytes())
                .map_err(|e| Error::io(&log, e))?;
        }
        Ok(())
    }

    /// Reads columns `col_start..col_start + width` bit-exactly.
    pub fn read_columns(&self, col_start: usize, width: usize) -> Result<Block> {
        self.check_range(col_start, width)?;
        let rows = self.rows();
        let mut bytes = vec![0u8; rows * width * ELEM];
        if width > 0 {
            let range = col_start..col_start + width;
            match &self.backing {
                Backing::Chunked { dir } => {
                    for (id, chunk) in self.chunk_ids(range.clone()) {
                        let lo = range.start.max(chunk.col_start);
                        let hi = range.end.min(chunk.col_end);
                        let path = dir.join(&chunk.file);
                        let file = File::open(&path).map_err(|_| Error::Integrity {
                            chunk: id,
                            reason: format!("chunk file {} is missing", chunk.file),
                        })?;
                        let dest = &mut bytes[(lo - col_start) * rows * ELEM..(hi - col_start) * rows * ELEM];
                        file.read_exact_at(dest, ((lo - chunk.col_start) * rows * ELEM) as u64)
                            .map_err(|e| Error::io(&path, e))?;
                    }
                }
                Backing::Merged { file, data_offset } => {
                    let handle = File::open(file).map_err(|e| Error::io(file, e))?;
                    handle
                        .read_exact_at(&mut bytes, data_offset + (col_start * rows * ELEM) as u64)
                        .map_err(|e| Error::io(file, e))?;
                }
            }
        }
        Ok(Block::from_iterator(rows, width, from_bytes(&bytes)))
    }

    /// The whole matrix.
    pub fn read_all(&self) -> Result<Block> {
        self.read_columns(0, self.cols())
    }

    /// Streams each chunk's bytes, one column at a time, into `visit`.
    fn stream_chunk(&self, id: usize, mut visit: impl FnMut(&[u8]) -> Result<()>) -> Result<()> {
        let chunk = &self.chunks()[id];
        let col_bytes = self.rows() * ELEM;
        let mut buf = vec![0u8; MERGE_BUFFER_COLUMNS * col_bytes];
        let (path, base) = match &self.backing {
            Backing::Chunked { dir } => (dir.join(&chunk.file), 0),
            Backing::Merged { file, data_offset } => (file.clone(), data_offset + (chunk.col_start * col_bytes) as u64),
        };
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut col = 0;
        while col < chunk.width() {
            let n = MERGE_BUFFER_COLUMNS.min(chunk.width() - col);
            let dest = &mut buf[..n * col_bytes];
            file.read_exact_at(dest, base + (col * col_bytes) as u64)
                .map_err(|e| Error::io(&path, e))?;
            visit(dest)?;
            col += n;
        }
        Ok(())
    }

    fn written_ranges(&self, dir: &Path, chunk: &ChunkEntry) -> Vec<Range<usize>> {
        let Ok(text) = fs::read_to_string(dir.join(written_log(&chunk.file))) else {
            return Vec::new();
        };
        let mut ranges: Vec<Range<usize>> = text
            .lines()
            .filter_map(|l| {
                let mut it = l.split_whitespace().map(str::parse::<usize>);
                match (it.next(), it.next()) {
                    (Some(Ok(a)), Some(Ok(b))) => Some(a..b),
                    _ => None,
                }
            })
            .collect();
        ranges.sort_by_key(|r| r.start);
        ranges
    }

    /// The chunk's CRC, or the first problem found with it.
    fn check_chunk(&self, id: usize) -> Result<std::result::Result<u32, ChunkIssue>> {
        let chunk = &self.chunks()[id];
        let issue = |reason: String| Ok(Err(ChunkIssue { chunk: id, reason }));
        let expected_len = (chunk.width() * self.rows() * ELEM) as u64;
        if let Backing::Chunked { dir } = &self.backing {
            let path = dir.join(&chunk.file);
            let Ok(meta) = fs::metadata(&path) else {
                return issue(format!("chunk file {} is missing", chunk.file));
            };
            if meta.len() != expected_len {
                return issue(format!("chunk file has {} bytes, expected {expected_len}", meta.len()));
            }
            let mut covered = chunk.col_start;
            for r in self.written_ranges(dir, chunk) {
                if r.start > covered {
                    break;
                }
                covered = covered.max(r.end);
            }
            if covered < chunk.col_end {
                return issue(format!("column {covered} was never written"));
            }
        }
        let mut hasher = crc32fast::Hasher::new();
        self.stream_chunk(id, |bytes| {
            hasher.update(bytes);
            Ok(())
        })?;
        let crc = hasher.finalize();
        match chunk.crc32 {
            Some(recorded) if recorded != crc => {
                issue(format!("checksum mismatch: recorded {recorded:08x}, found {crc:08x}"))
            }
            _ => Ok(Ok(crc)),
        }
    }

    /// Checks every chunk for presence, length, full column coverage and
    /// (when recorded) its checksum. Returns the issues found, if any.
    pub fn verify(&self) -> Result<Vec<ChunkIssue>> {
        Ok(self.scan()?.into_iter().filter_map(|r| r.err()).collect())
    }

    /// Per-chunk CRC on success, or the issue found.
    fn scan(&self) -> Result<Vec<std::result::Result<u32, ChunkIssue>>> {
        if let Backing::Merged { file, data_offset } = &self.backing {
            let len = fs::metadata(file).map_err(|e| Error::io(file, e))?.len();
            let expected = data_offset + (self.rows() * self.cols() * ELEM) as u64;
            if len != expected {
                let chunk = self.chunks().len().saturating_sub(1);
                return Ok(vec![Err(ChunkIssue {
                    chunk,
                    reason: format!("merged file has {len} bytes, expected {expected}"),
                })]);
            }
        }
        (0..self.chunks().len()).map(|id| self.check_chunk(id)).collect()
    }

    /// Records per-chunk checksums in the manifest. Fails with an integrity
    /// error if any chunk is incomplete.
    pub fn finalize(&mut self) -> Result<()> {
        let dir = self.chunk_dir()?.to_path_buf();
        let crcs = self.complete_checksums()?;
        for (chunk, crc) in self.manifest.chunks.iter_mut().zip(crcs) {
            chunk.crc32 = Some(crc);
        }
        write_manifest(&dir, &self.manifest)
    }

    fn complete_checksums(&self) -> Result<Vec<u32>> {
        self.scan()?
            .into_iter()
            .map(|r| r.map_err(Error::from))
            .collect()
    }

    /// Streams the store into a single file at `out`, holding at most
    /// [`MERGE_BUFFER_COLUMNS`] columns in memory. The output records the
    /// same layout and per-chunk checksums, so merging is idempotent.
    pub fn merge(&self, out: &Path, overwrite: bool) -> Result<()> {
        if out.exists() && (!overwrite || out.is_dir()) {
            return Err(Error::io(
                out,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output exists"),
            ));
        }
        let crcs = self.complete_checksums()?;
        let mut manifest = self.manifest.clone();
        manifest.layout = Layout::Merged;
        for (chunk, crc) in manifest.chunks.iter_mut().zip(crcs) {
            chunk.crc32 = Some(crc);
        }
        let header = manifest.to_toml();

        let tmp = out.with_extension("merging");
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut writer = BufWriter::new(file);
        let io = |e| Error::io(&tmp, e);
        writer.write_all(MERGED_MAGIC).map_err(io)?;
        writer.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        writer.write_all(header.as_bytes()).map_err(io)?;
        for id in 0..self.chunks().len() {
            self.stream_chunk(id, |bytes| writer.write_all(bytes).map_err(|e| Error::io(&tmp, e)))?;
        }
        let file = writer.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, out).map_err(|e| Error::io(out, e))
    }
}

fn written_log(chunk_file: &str) -> String {
    match chunk_file.strip_suffix(".bin") {
        Some(stem) => format!("{stem}.cols"),
        None => format!("{chunk_file}.cols"),
    }
}

fn read_merged_header(path: &Path) -> Result<(Manifest, u64)> {
    let bad = |reason: &str| Error::Manifest {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut prefix = [0u8; 16];
    file.read_exact(&mut prefix).map_err(|_| bad("file too short for a merged store"))?;
    if &prefix[..8] != MERGED_MAGIC {
        return Err(bad("not a merged matrix store"));
    }
    let header_len = u64::from_le_bytes(prefix[8..].try_into().expect("8 bytes"));
    if header_len > 64 << 20 {
        return Err(bad("implausible header length"));
    }
    let mut header = vec![0u8; header_len as usize];
    file.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let text = String::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| bad(&e.to_string()))?;
    manifest.validate(path)?;
    Ok((manifest, 16 + header_len))
}
