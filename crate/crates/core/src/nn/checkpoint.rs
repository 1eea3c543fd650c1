//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "CEMB"            4 bytes
//! version           u32
//! layer count       u32
//! per layer:
//!   activation      u8   (0 = identity, 1 = relu)
//!   rows, cols      u32, u32
//!   weights         rows*cols f64, row-major
//!   bias            rows f64
//! bottleneck index  u32
//! ```

use std::io::{Read, Write};

use super::matrix::Matrix;
use super::network::{Activation, AffineLayer, DenseNetwork, Layer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CEMB";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(net: &DenseNetwork, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_u32(&mut out, net.layers().len())?;
    for layer in net.layers() {
        let tag: u8 = match layer.activation {
            Activation::Identity => 0,
            Activation::Relu => 1,
        };
        out.write_all(&[tag])?;
        write_u32(&mut out, layer.affine.outputs())?;
        write_u32(&mut out, layer.affine.inputs())?;
        for v in layer.affine.weights.as_slice().iter().chain(&layer.affine.bias) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    write_u32(&mut out, net.bottleneck())?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<DenseNetwork> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input, "layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for idx in 0..count {
        let mut tag = [0u8; 1];
        read_exact(&mut input, &mut tag, "activation tag")?;
        let activation = match tag[0] {
            0 => Activation::Identity,
            1 => Activation::Relu,
            t => return Err(Error::Checkpoint(format!("layer {idx}: unknown activation tag {t}"))),
        };
        let rows = read_u32(&mut input, "rows")? as usize;
        let cols = read_u32(&mut input, "cols")? as usize;
        let weights = read_f64s(&mut input, rows * cols)?;
        let bias = read_f64s(&mut input, rows)?;
        let weights = Matrix::from_vec(rows, cols, weights)
            .map_err(|e| Error::Checkpoint(format!("layer {idx}: {e}")))?;
        let affine = AffineLayer::new(weights, bias)
            .map_err(|e| Error::Checkpoint(format!("layer {idx}: {e}")))?;
        layers.push(Layer::new(affine, activation));
    }
    let bottleneck = read_u32(&mut input, "bottleneck index")? as usize;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    DenseNetwork::new(layers, bottleneck).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn write_u32<W: Write>(out: &mut W, value: usize) -> Result<()> {
    let v = u32::try_from(value)
        .map_err(|_| Error::Checkpoint(format!("{value} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n.min(1 << 20));
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(input, &mut b, "parameters")?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_net() -> DenseNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        DenseNetwork::glorot(
            &[3, 5, 2, 4],
            &[Activation::Relu, Activation::Identity, Activation::Identity],
            1,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = sample_net();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.fingerprint(), net.fingerprint());
        assert_eq!(back, net);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_layout() {
        let net = sample_net();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CEMB");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(buf[12], 1);
        let tail = &buf[buf.len() - 4..];
        assert_eq!(u32::from_le_bytes(tail.try_into().unwrap()), 1);
        let expected = 4 + 4 + 4 + 4 + (3 * 9) + 8 * net.param_count();
        assert_eq!(buf.len(), expected);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_checkpoint(&sample_net(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }
}
