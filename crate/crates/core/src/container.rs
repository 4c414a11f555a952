//! On-disk container for adapters and dense parameter sets.
//!
//! Binary layout (all integers `u32` little-endian, floats `f64` little-endian):
//!
//! ```text
//! magic "LRAD" | version | rank | site_count
//! per site:    id_len | id (utf-8) | d_out | d_in
//! per site:    B (d_out x rank, row-major) then A (rank x d_in, row-major)
//! ```
//!
//! A rank of 0 marks a dense container: each site stores a single row-major
//! `d_out x d_in` matrix in place of the factor pair.
//!
//! The text variant carries the same fields in the same order, one
//! matrix row per line, floats printed in shortest round-trip form.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adapter::{DenseParams, LowRankDelta, Matrix, SiteFactors, SiteShape};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LRAD";
pub const FORMAT_VERSION: u32 = 1;
const TEXT_HEADER: &str = "lowrank-container";

#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    LowRank(LowRankDelta),
    Dense(DenseParams),
}

impl Container {
    pub fn into_low_rank(self) -> Result<LowRankDelta> {
        match self {
            Container::LowRank(d) => Ok(d),
            Container::Dense(_) => Err(Error::Format("expected a low-rank container".into())),
        }
    }

    pub fn into_dense(self) -> Result<DenseParams> {
        match self {
            Container::Dense(d) => Ok(d),
            Container::LowRank(_) => Err(Error::Format("expected a dense container".into())),
        }
    }

    fn rank(&self) -> usize {
        match self {
            Container::LowRank(d) => d.rank(),
            Container::Dense(_) => 0,
        }
    }

    fn layout(&self) -> Vec<SiteShape> {
        match self {
            Container::LowRank(d) => d.layout(),
            Container::Dense(d) => d.layout(),
        }
    }

    /// Matrices in payload order.
    fn matrices(&self) -> Vec<(&'static str, &str, &Matrix)> {
        match self {
            Container::LowRank(d) => d
                .sites()
                .iter()
                .flat_map(|s| [("B", s.id.as_str(), &s.b), ("A", s.id.as_str(), &s.a)])
                .collect(),
            Container::Dense(d) => d
                .sites()
                .iter()
                .map(|(id, w)| ("W", id.as_str(), w))
                .collect(),
        }
    }
}

fn assemble(rank: usize, layout: Vec<SiteShape>, mut mats: Vec<Matrix>) -> Result<Container> {
    if rank == 0 {
        let sites = layout.into_iter().zip(mats).map(|(s, w)| (s.id, w)).collect();
        Ok(Container::Dense(DenseParams::new(sites)?))
    } else {
        let mut sites = Vec::with_capacity(layout.len());
        let mut it = mats.drain(..);
        for shape in layout {
            let b = it.next().ok_or_else(|| Error::Format("missing B".into()))?;
            let a = it.next().ok_or_else(|| Error::Format("missing A".into()))?;
            sites.push(SiteFactors::new(shape.id, b, a));
        }
        Ok(Container::LowRank(LowRankDelta::new(sites)?))
    }
}

fn payload_shapes(rank: usize, layout: &[SiteShape]) -> Vec<(usize, usize)> {
    layout
        .iter()
        .flat_map(|s| {
            if rank == 0 {
                vec![(s.d_out, s.d_in)]
            } else {
                vec![(s.d_out, rank), (rank, s.d_in)]
            }
        })
        .collect()
}

pub fn write_binary<W: Write>(mut w: W, c: &Container) -> Result<()> {
    let layout = c.layout();
    w.write_all(MAGIC)?;
    for v in [FORMAT_VERSION, c.rank() as u32, layout.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in &layout {
        w.write_all(&(s.id.len() as u32).to_le_bytes())?;
        w.write_all(s.id.as_bytes())?;
        w.write_all(&(s.d_out as u32).to_le_bytes())?;
        w.write_all(&(s.d_in as u32).to_le_bytes())?;
    }
    for (_, _, m) in c.matrices() {
        for r in 0..m.nrows() {
            for col in 0..m.ncols() {
                w.write_all(&m[(r, col)].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Container> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = read_u32(&mut r)? as usize;
    let n_sites = read_u32(&mut r)? as usize;
    let mut layout = Vec::with_capacity(n_sites);
    for _ in 0..n_sites {
        let len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| Error::Format("site id not utf-8".into()))?;
        let d_out = read_u32(&mut r)? as usize;
        let d_in = read_u32(&mut r)? as usize;
        layout.push(SiteShape { id, d_out, d_in });
    }
    let mut mats = Vec::new();
    for (rows, cols) in payload_shapes(rank, &layout) {
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        mats.push(Matrix::from_row_slice(rows, cols, &data));
    }
    assemble(rank, layout, mats)
}

pub fn write_text<W: Write>(mut w: W, c: &Container) -> Result<()> {
    let layout = c.layout();
    writeln!(w, "{TEXT_HEADER} {FORMAT_VERSION}")?;
    writeln!(w, "rank {}", c.rank())?;
    writeln!(w, "sites {}", layout.len())?;
    for s in &layout {
        writeln!(w, "site {} {} {}", s.id, s.d_out, s.d_in)?;
    }
    for (tag, id, m) in c.matrices() {
        writeln!(w, "{tag} {id}")?;
        for r in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:?}", m[(r, c)])).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_text<R: BufRead>(r: R) -> Result<Container> {
    let mut lines = r
        .lines()
        .map(|l| l.map_err(Error::from))
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()));
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .unwrap_or_else(|| Err(Error::Format(format!("unexpected end of input, wanted {what}"))))
    };
    let bad = |line: &str| Error::Format(format!("malformed line `{line}`"));
    let parse_usize = |s: &str, line: &str| s.parse::<usize>().map_err(|_| bad(line));

    let header = next("header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(TEXT_HEADER) {
        return Err(bad(&header));
    }
    let version: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(&header))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let keyed = |line: &str, key: &str| -> Result<usize> {
        match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            [k, v] if *k == key => parse_usize(v, line),
            _ => Err(bad(line)),
        }
    };
    let rank = keyed(&next("rank")?, "rank")?;
    let n_sites = keyed(&next("sites")?, "sites")?;
    let mut layout = Vec::with_capacity(n_sites);
    for _ in 0..n_sites {
        let line = next("site")?;
        match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["site", id, d_out, d_in] => layout.push(SiteShape {
                id: id.to_string(),
                d_out: parse_usize(d_out, &line)?,
                d_in: parse_usize(d_in, &line)?,
            }),
            _ => return Err(bad(&line)),
        }
    }
    let mut mats = Vec::new();
    for (rows, cols) in payload_shapes(rank, &layout) {
        let _tag = next("matrix tag")?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = next("matrix row")?;
            let row = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(&line)))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != cols {
                return Err(bad(&line));
            }
            data.extend(row);
        }
        mats.push(Matrix::from_row_slice(rows, cols, &data));
    }
    assemble(rank, layout, mats)
}

/// Writes the text variant for `.txt` paths and the binary one otherwise.
pub fn save(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "txt") {
        write_text(&mut w, c)?;
    } else {
        write_binary(&mut w, c)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads either variant, sniffing the magic bytes.
pub fn load(path: impl AsRef<Path>) -> Result<Container> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(MAGIC) {
        read_binary(bytes.as_slice())
    } else {
        read_text(BufReader::new(bytes.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_delta() -> LowRankDelta {
        LowRankDelta::new(vec![
            SiteFactors::new(
                "lm_head",
                Matrix::from_row_slice(2, 1, &[0.1, -3.5e-7]),
                Matrix::from_row_slice(1, 3, &[1.0, 2.0, f64::MIN_POSITIVE]),
            ),
            SiteFactors::new(
                "proj",
                Matrix::from_row_slice(1, 1, &[7.25]),
                Matrix::from_row_slice(1, 2, &[-0.0, 1.0 / 3.0]),
            ),
        ])
        .unwrap()
    }

    #[test]
    fn binary_header_layout() {
        let mut buf = Vec::new();
        write_binary(&mut buf, &Container::LowRank(sample_delta())).unwrap();
        assert_eq!(&buf[..4], b"LRAD");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 7);
        assert_eq!(&buf[20..27], b"lm_head");
        // header: 16 + (4+7+8) + (4+4+8); payload: (2+3) + (1+2) floats
        assert_eq!(buf.len(), 16 + 19 + 16 + 8 * 8);
        // first payload float is B[0,0] of the first site
        let off = 16 + 19 + 16;
        assert_eq!(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()), 0.1);
    }

    #[test]
    fn text_and_binary_agree() {
        let c = Container::LowRank(sample_delta());
        let mut bin = Vec::new();
        write_binary(&mut bin, &c).unwrap();
        let mut txt = Vec::new();
        write_text(&mut txt, &c).unwrap();
        assert_eq!(read_binary(bin.as_slice()).unwrap(), c);
        assert_eq!(read_text(txt.as_slice()).unwrap(), c);
    }

    #[test]
    fn dense_roundtrip_uses_rank_zero() {
        let dense = DenseParams::single("lm_head", Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let c = Container::Dense(dense);
        let mut bin = Vec::new();
        write_binary(&mut bin, &c).unwrap();
        assert_eq!(u32::from_le_bytes(bin[8..12].try_into().unwrap()), 0);
        assert_eq!(read_binary(bin.as_slice()).unwrap(), c);
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let mut bin = Vec::new();
        write_binary(&mut bin, &Container::LowRank(sample_delta())).unwrap();
        assert!(read_binary(&bin[..bin.len() - 3]).is_err());
        bin[0] = b'X';
        assert!(matches!(read_binary(bin.as_slice()), Err(Error::Format(_))));
        assert!(read_text("lowrank-container 1\nrank x\n".as_bytes()).is_err());
    }
}
