//! Tensor archives: a binary data file of named matrix records plus a plain
//! text index (`<name> <byte offset>` per line) for random access. Records
//! use the parameter-container encoding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::container::read_record;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn index_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_os_string();
    s.push(".idx");
    PathBuf::from(s)
}

pub struct ArchiveWriter {
    w: BufWriter<File>,
    path: String,
    index: Vec<(String, u64)>,
    offset: u64,
}

impl ArchiveWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let file = File::create(path).map_err(|e| Error::io(&p, e))?;
        Ok(ArchiveWriter {
            w: BufWriter::new(file),
            path: p,
            index: Vec::new(),
            offset: 0,
        })
    }

    pub fn write(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        if name.split_whitespace().count() != 1 {
            return Err(Error::Config(format!(
                "archive record name {name:?} must be a single token"
            )));
        }
        self.index.push((name.to_string(), self.offset));
        let io_err = |e| Error::io(&self.path, e);
        let name_bytes = name.as_bytes();
        self.w
            .write_all(&(name_bytes.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        self.w.write_all(name_bytes).map_err(io_err)?;
        self.w
            .write_all(&[0u8, 0u8, tensor.rank() as u8])
            .map_err(io_err)?;
        for &d in tensor.shape() {
            self.w
                .write_all(&(d as u64).to_le_bytes())
                .map_err(io_err)?;
        }
        for &v in tensor.data() {
            self.w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        self.offset +=
            4 + name_bytes.len() as u64 + 3 + 8 * tensor.rank() as u64 + 8 * tensor.numel() as u64;
        Ok(())
    }

    /// Flush the data file and write the text index next to it.
    pub fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))?;
        let ipath = format!("{}.idx", self.path);
        let mut out = String::new();
        for (name, off) in &self.index {
            out.push_str(&format!("{name} {off}\n"));
        }
        std::fs::write(&ipath, out).map_err(|e| Error::io(&ipath, e))
    }
}

pub struct ArchiveReader {
    file: File,
    path: String,
    index: BTreeMap<String, u64>,
    order: Vec<String>,
}

impl ArchiveReader {
    pub fn open(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&p, e))?;
        let ipath = index_path(path);
        let ip = ipath.display().to_string();
        let ifile = File::open(&ipath).map_err(|e| Error::io(&ip, e))?;
        let mut index = BTreeMap::new();
        let mut order = Vec::new();
        for (lineno, line) in BufReader::new(ifile).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&ip, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (name, off) = match (parts.next(), parts.next(), parts.next()) {
                (Some(n), Some(o), None) => (n, o),
                _ => {
                    return Err(Error::format(
                        &ip,
                        format!("line {}: expected `name offset`", lineno + 1),
                    ))
                }
            };
            let off: u64 = off
                .parse()
                .map_err(|_| Error::format(&ip, format!("line {}: bad offset", lineno + 1)))?;
            if index.insert(name.to_string(), off).is_some() {
                return Err(Error::format(&ip, format!("duplicate record {name}")));
            }
            order.push(name.to_string());
        }
        Ok(ArchiveReader {
            file,
            path: p,
            index,
            order,
        })
    }

    /// Record names in file order.
    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&mut self, name: &str) -> Result<Tensor> {
        let off = *self
            .index
            .get(name)
            .ok_or_else(|| Error::State(format!("archive {} has no record {name}", self.path)))?;
        self.file
            .seek(SeekFrom::Start(off))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut r = BufReader::new(&self.file);
        let (got, tensor) = read_record(&mut r, &self.path)?;
        if got != name {
            return Err(Error::format(
                &self.path,
                format!("index points at {got}, expected {name}"),
            ));
        }
        Ok(tensor)
    }
}
