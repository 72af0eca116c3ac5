//! Binary parameter snapshots.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes   b"GRLMLP\0\x01"
//! version    u32       1
//! role_len   u32       then role_len bytes of UTF-8 (e.g. "actor", "guide_q")
//! head       u8        0 = identity, 1 = tanh-scaled
//! bound      f64       output bound (0 for identity)
//! n_sizes    u32       then n_sizes × u32 layer sizes
//! params     f64 ...   per layer: weights row-major (out × in), then bias
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Dense, Mlp, OutputHead};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GRLMLP\0\x01";
pub const VERSION: u32 = 1;

pub fn write_snapshot<W: Write>(mut w: W, net: &Mlp, role: &str) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(role.len() as u32).to_le_bytes())?;
    w.write_all(role.as_bytes())?;
    let (tag, bound) = match net.head() {
        OutputHead::Identity => (0u8, 0.0),
        OutputHead::TanhScaled(b) => (1u8, b),
    };
    w.write_all(&[tag])?;
    w.write_all(&bound.to_le_bytes())?;
    let sizes = net.layer_sizes();
    w.write_all(&(sizes.len() as u32).to_le_bytes())?;
    for s in sizes {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    for v in net.flat_params() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Reads a snapshot, returning its role tag and the network.
pub fn read_snapshot<R: Read>(mut r: R) -> Result<(String, Mlp)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let role_len = read_u32(&mut r)? as usize;
    if role_len > 1024 {
        return Err(Error::Snapshot("role tag too long".into()));
    }
    let mut role = vec![0u8; role_len];
    r.read_exact(&mut role)?;
    let role = String::from_utf8(role).map_err(|_| Error::Snapshot("role is not UTF-8".into()))?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let bound = read_f64(&mut r)?;
    let head = match tag[0] {
        0 => OutputHead::Identity,
        1 => OutputHead::TanhScaled(bound),
        t => return Err(Error::Snapshot(format!("unknown output head {t}"))),
    };
    let n_sizes = read_u32(&mut r)? as usize;
    if !(2..=64).contains(&n_sizes) {
        return Err(Error::Snapshot(format!("implausible layer count {n_sizes}")));
    }
    let sizes = (0..n_sizes)
        .map(|_| read_u32(&mut r).map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    if sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
        return Err(Error::Snapshot(format!("implausible layer sizes {sizes:?}")));
    }
    let mut layers = Vec::with_capacity(n_sizes - 1);
    for w in sizes.windows(2) {
        let (inp, out) = (w[0], w[1]);
        let weights = (0..inp * out)
            .map(|_| read_f64(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let bias = (0..out).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        layers.push(Dense {
            weights: Array2::from_shape_vec((out, inp), weights).expect("sized above"),
            bias: Array1::from(bias),
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Snapshot("trailing bytes after parameters".into()));
    }
    Ok((role, Mlp::from_layers(layers, head)?))
}

pub fn save(path: &Path, net: &Mlp, role: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_snapshot(&mut w, net, role)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, Mlp)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_snapshot(BufReader::new(File::open(path)?))
}

/// Loads a snapshot and checks its role tag.
pub fn load_role(path: &Path, role: &str) -> Result<Mlp> {
    let (found, net) = load(path)?;
    if found != role {
        return Err(Error::Snapshot(format!(
            "{} holds role {found:?}, expected {role:?}",
            path.display()
        )));
    }
    Ok(net)
}
