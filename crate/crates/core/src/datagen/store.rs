//! On-disk corpus layout.
//!
//! A corpus directory holds `meta.json` plus `train.bin`, `valid.bin` and
//! `test.bin`. Each partition file is little-endian:
//!
//! ```text
//! u64 record count
//! per record:
//!   u32 T
//!   T × D_f  f64   fbank view, row-major
//!   T × D_u  f64   unit view, row-major
//!   T        u32   target ids
//! ```
//!
//! `D_f` and `D_u` come from `meta.json`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Codebook, Corpus, CorpusSpec, MultiViewExample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "mvfuse-corpus/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusMeta {
    pub format: String,
    pub spec: CorpusSpec,
    pub fbank_dim: usize,
    pub unit_dim: usize,
    pub codebook: Vec<Vec<f64>>,
    pub codebook_distortion: f64,
    pub unit_range: [f64; 2],
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cb = corpus.codebook.centroids();
    let meta = CorpusMeta {
        format: FORMAT.to_string(),
        spec: corpus.spec.clone(),
        fbank_dim: corpus.fbank_dim(),
        unit_dim: corpus.unit_dim(),
        codebook: (0..corpus.codebook.k())
            .map(|i| cb.row(i).to_vec())
            .collect(),
        codebook_distortion: corpus.codebook_distortion,
        unit_range: [corpus.unit_range.0, corpus.unit_range.1],
        n_train: corpus.train.len(),
        n_valid: corpus.valid.len(),
        n_test: corpus.test.len(),
    };
    let path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    for (name, part) in [
        ("train", &corpus.train),
        ("valid", &corpus.valid),
        ("test", &corpus.test),
    ] {
        write_partition(&dir.join(format!("{name}.bin")), part)?;
    }
    Ok(())
}

pub fn write_partition(path: &Path, examples: &[MultiViewExample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(&(examples.len() as u64).to_le_bytes())?;
    for e in examples {
        put(&(e.len() as u32).to_le_bytes())?;
        for v in e.x_fbank.data().iter().chain(e.x_unit.data()) {
            put(&v.to_le_bytes())?;
        }
        for &t in &e.targets {
            put(&(t as u32).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_exact<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, "truncated partition file")
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(buf)
}

pub fn read_partition(
    path: &Path,
    fbank_dim: usize,
    unit_dim: usize,
    vocab: usize,
) -> Result<Vec<MultiViewExample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let count = u64::from_le_bytes(read_exact::<8>(&mut r, path)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    let read_f64s = |r: &mut BufReader<fs::File>, n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|_| Ok(f64::from_le_bytes(read_exact::<8>(r, path)?)))
            .collect()
    };
    for _ in 0..count {
        let t = u32::from_le_bytes(read_exact::<4>(&mut r, path)?) as usize;
        if t == 0 {
            return Err(Error::format(path, "record with zero length"));
        }
        let xf = read_f64s(&mut r, t * fbank_dim)?;
        let xu = read_f64s(&mut r, t * unit_dim)?;
        let mut targets = Vec::with_capacity(t);
        for _ in 0..t {
            let id = u32::from_le_bytes(read_exact::<4>(&mut r, path)?) as usize;
            if id >= vocab {
                return Err(Error::format(
                    path,
                    format!("target id {id} >= vocab {vocab}"),
                ));
            }
            targets.push(id);
        }
        out.push(MultiViewExample {
            x_fbank: Tensor::new(vec![t, fbank_dim], xf)?,
            x_unit: Tensor::new(vec![t, unit_dim], xu)?,
            targets,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    Ok(out)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CorpusMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if meta.format != FORMAT {
        return Err(Error::format(
            &path,
            format!("unsupported corpus format {:?}", meta.format),
        ));
    }
    let k = meta.codebook.len();
    let codebook = Codebook::new(
        Tensor::from_rows(&meta.codebook).map_err(|e| Error::format(&path, e.to_string()))?,
    )
    .map_err(|e| Error::format(&path, e.to_string()))?;
    debug_assert_eq!(codebook.k(), k);
    let v = meta.spec.vocab_size;
    let part = |name: &str, n: usize| -> Result<Vec<MultiViewExample>> {
        let p = dir.join(format!("{name}.bin"));
        let examples = read_partition(&p, meta.fbank_dim, meta.unit_dim, v)?;
        if examples.len() != n {
            return Err(Error::format(
                &p,
                format!("{} records, meta.json says {n}", examples.len()),
            ));
        }
        Ok(examples)
    };
    Ok(Corpus {
        train: part("train", meta.n_train)?,
        valid: part("valid", meta.n_valid)?,
        test: part("test", meta.n_test)?,
        spec: meta.spec,
        codebook,
        codebook_distortion: meta.codebook_distortion,
        unit_range: (meta.unit_range[0], meta.unit_range[1]),
    })
}
