//! On-disk formats: scene splits, cached context probabilities, parameter
//! checkpoints and the dataset manifest.
//!
//! All binary files are little-endian and start with a four-byte magic and
//! a `u32` version.
//!
//! ```text
//! split       b"WSDS" u32 1  u64 n   n × scene record
//! probs       b"WCTX" u32 1  u64 n   n × (u32 C, u32 J, f64 × C·J class-major)
//! checkpoint  b"WCKP" u32 1  u32 n   n × (u32 len, name bytes, u32 rank,
//!                                         u32 × rank dims, f64 × product)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Params, Tensor};
use crate::error::{Error, Result};
use crate::scene::{generate_scene, read_f64, read_u32, read_u64, Scene};
use crate::score::ScoreMatrix;

use super::config::ExperimentConfig;

const VERSION: u32 = 1;

/// Which half of the benchmark a scene belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Scene seed: splits occupy disjoint halves of a `2^32` block per data
/// seed.
pub fn scene_seed(data_seed: u64, split: Split, index: usize) -> u64 {
    let half = match split {
        Split::Train => 0,
        Split::Eval => 1 << 31,
    };
    (data_seed << 32) + half + index as u64
}

pub fn generate_split(config: &ExperimentConfig, split: Split) -> Result<Vec<Scene>> {
    let n = match split {
        Split::Train => config.train_scenes,
        Split::Eval => config.eval_scenes,
    };
    (0..n)
        .map(|i| generate_scene(scene_seed(config.data_seed, split, i), &config.scene))
        .collect()
}

fn header<W: Write>(out: &mut W, magic: &[u8; 4]) -> Result<()> {
    out.write_all(magic)?;
    out.write_all(&VERSION.to_le_bytes())?;
    Ok(())
}

fn check_header<R: Read>(input: &mut R, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut m = [0u8; 4];
    input.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    let v = read_u32(input)?;
    if v != VERSION {
        return Err(Error::Format(format!("unsupported {what} version {v}")));
    }
    Ok(())
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    header(&mut out, b"WSDS")?;
    out.write_all(&(scenes.len() as u64).to_le_bytes())?;
    for s in scenes {
        s.write_to(&mut out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let mut input = BufReader::new(File::open(path)?);
    check_header(&mut input, b"WSDS", "scene split")?;
    let n = read_u64(&mut input)?;
    (0..n).map(|_| Scene::read_from(&mut input)).collect()
}

pub fn write_probs(path: &Path, probs: &[ScoreMatrix]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    header(&mut out, b"WCTX")?;
    out.write_all(&(probs.len() as u64).to_le_bytes())?;
    for p in probs {
        out.write_all(&(p.classes() as u32).to_le_bytes())?;
        out.write_all(&(p.proposals() as u32).to_le_bytes())?;
        for v in p.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_probs(path: &Path) -> Result<Vec<ScoreMatrix>> {
    let mut input = BufReader::new(File::open(path)?);
    check_header(&mut input, b"WCTX", "context probability")?;
    let n = read_u64(&mut input)?;
    (0..n)
        .map(|_| {
            let c = read_u32(&mut input)? as usize;
            let j = read_u32(&mut input)? as usize;
            let data = (0..c * j).map(|_| read_f64(&mut input)).collect::<Result<_>>()?;
            ScoreMatrix::new(c, j, data)
        })
        .collect()
}

pub fn write_params(path: &Path, params: &Params) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    header(&mut out, b"WCKP")?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<Params> {
    let mut input = BufReader::new(File::open(path)?);
    check_header(&mut input, b"WCKP", "checkpoint")?;
    let n = read_u32(&mut input)?;
    let mut params = Params::new();
    for _ in 0..n {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data: Vec<f64> = (0..count).map(|_| read_f64(&mut input)).collect::<Result<_>>()?;
        let value = if rank == 0 {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(shape, data)?
        };
        params.add(name, value);
    }
    Ok(params)
}

/// Plain-text manifest with one `key = value` line per entry.
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let text: String = entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}
