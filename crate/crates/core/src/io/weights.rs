//! MNBW weight files: bit-exact serialization of a model's trainable
//! parameters.
//!
//! Layout (all multi-byte integers little-endian):
//!
//! ```text
//! magic  4 bytes  "MNBW"
//! version u16     currently 1
//! tensor_count u32
//! then per tensor:
//!   name_len u32, name UTF-8
//!   dtype u8        0 = 32-bit float, 1 = 1-bit packed
//!   ndim u32, dims u32 × ndim
//!   payload         dtype 0: f32 LE, row-major
//!                   dtype 1: one row per output channel covering the
//!                            remaining dims row-major, LSB-first,
//!                            bit 1 = +1, zero-padded to a 64-bit boundary
//! ```
//!
//! Binary-conv weights are stored packed (dtype 1), so the file size tracks
//! the cost model's size_bytes. BatchNorm running statistics are state,
//! not parameters, and are not serialized; fold them into gamma/beta first
//! (see `ModelGraph::fold_batchnorm_stats`) when exporting for inference.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Param};
use crate::tensor::{sign_forward, BitTensor, Tensor};

const MAGIC: &[u8; 4] = b"MNBW";
const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_PACKED: u8 = 1;

/// Serializes every trainable parameter of `graph` to `path`. Binary-conv
/// weights (latent or already packed) are written packed.
pub fn export_weights(graph: &ModelGraph, path: &Path) -> Result<()> {
    let binary: std::collections::BTreeSet<String> =
        graph.binary_weight_names().into_iter().collect();
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(graph.parameters.len() as u32).to_le_bytes())?;
    for (name, param) in &graph.parameters {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        match param {
            Param::Fp(t) if binary.contains(name) => {
                write_packed(&mut w, &sign_forward(t))?;
            }
            Param::Bits(b) => write_packed(&mut w, b)?,
            Param::Fp(t) => {
                w.write_all(&[DTYPE_F32])?;
                write_dims(&mut w, t.shape())?;
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_dims(w: &mut impl Write, shape: (usize, usize, usize, usize)) -> Result<()> {
    w.write_all(&4u32.to_le_bytes())?;
    for d in [shape.0, shape.1, shape.2, shape.3] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

/// Writes a packed tensor as per-output-channel rows: for output channel
/// `oc`, the (c, h, w) bits in row-major order, LSB-first, padded with
/// zeros to a 64-bit boundary.
fn write_packed(w: &mut impl Write, bits: &BitTensor) -> Result<()> {
    w.write_all(&[DTYPE_PACKED])?;
    let (oc, c, kh, kw) = bits.shape();
    write_dims(w, bits.shape())?;
    let row_bits = c * kh * kw;
    let row_words = row_bits.div_ceil(64);
    for o in 0..oc {
        let mut row = vec![0u64; row_words];
        let mut bit = 0usize;
        for ci in 0..c {
            for hi in 0..kh {
                for wi in 0..kw {
                    if bits.at(o, ci, hi, wi) > 0.0 {
                        row[bit / 64] |= 1u64 << (bit % 64);
                    }
                    bit += 1;
                }
            }
        }
        for word in row {
            w.write_all(&word.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Byte reader that tracks its offset for parse diagnostics.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn new(inner: R) -> Self {
        Cursor { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::parse(at, format!("truncated file while reading {what}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }
}

/// Reads an MNBW file back into a parameter map. The magic and version are
/// validated before any payload is touched.
pub fn import_weights(path: &Path) -> Result<BTreeMap<String, Param>> {
    let file = File::open(path)?;
    let mut r = Cursor::new(BufReader::new(file));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::parse(0, format!("bad magic {magic:02x?}, expected \"MNBW\"")));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut params = BTreeMap::new();
    for i in 0..count {
        let at = r.offset;
        let name_len = r.u32("name length")? as usize;
        if name_len > 4096 {
            return Err(Error::parse(at, format!("unreasonable name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::parse(at, "tensor name is not UTF-8"))?;
        let dtype = r.u8("dtype")?;
        let ndim = r.u32("ndim")? as usize;
        if ndim != 4 {
            return Err(Error::parse(at, format!("tensor {name}: expected 4 dims, got {ndim}")));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.u32("dim")? as usize;
        }
        let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(
            || Error::parse(at, format!("tensor {name}: dimension overflow {dims:?}")),
        )?;
        let shape = (dims[0], dims[1], dims[2], dims[3]);
        let param = match dtype {
            DTYPE_F32 => {
                let mut data = Vec::with_capacity(len);
                for _ in 0..len {
                    data.push(r.f32("f32 payload")?);
                }
                Param::Fp(Tensor::new(shape, data).map_err(|e| {
                    Error::parse(at, format!("tensor {name}: {e}"))
                })?)
            }
            DTYPE_PACKED => {
                let (oc, c, kh, kw) = shape;
                let row_bits = c * kh * kw;
                let row_words = row_bits.div_ceil(64);
                let mut bits = BitTensor::zeros(shape);
                for o in 0..oc {
                    let mut row = vec![0u64; row_words];
                    for word in row.iter_mut() {
                        *word = r.u64("packed payload")?;
                    }
                    // pad region must read as zero
                    if row_bits % 64 != 0 {
                        let mask = !0u64 << (row_bits % 64);
                        if row[row_words - 1] & mask != 0 {
                            return Err(Error::parse(
                                at,
                                format!("tensor {name}: nonzero pad bits in row {o}"),
                            ));
                        }
                    }
                    let mut bit = 0usize;
                    for ci in 0..c {
                        for hi in 0..kh {
                            for wi in 0..kw {
                                let plus = (row[bit / 64] >> (bit % 64)) & 1 == 1;
                                bits.set_bit(o, ci, hi, wi, plus);
                                bit += 1;
                            }
                        }
                    }
                }
                Param::Bits(bits)
            }
            other => {
                return Err(Error::parse(at, format!("tensor {name}: unknown dtype {other}")))
            }
        };
        if params.insert(name.clone(), param).is_some() {
            return Err(Error::parse(at, format!("duplicate tensor {name} (record {i})")));
        }
    }
    Ok(params)
}

impl ModelGraph {
    /// Replaces this graph's parameters with an imported map, checking
    /// that every expected parameter is present with a matching shape.
    pub fn load_parameters(&mut self, imported: BTreeMap<String, Param>) -> Result<()> {
        for (name, current) in &self.parameters {
            let new = imported.get(name).ok_or_else(|| {
                Error::contract(format!("import: parameter {name} missing from file"))
            })?;
            if new.shape() != current.shape() {
                return Err(Error::contract(format!(
                    "import: parameter {name} has shape {:?}, graph expects {:?}",
                    new.shape(),
                    current.shape()
                )));
            }
        }
        if imported.len() != self.parameters.len() {
            return Err(Error::contract(format!(
                "import: file has {} tensors, graph expects {}",
                imported.len(),
                self.parameters.len()
            )));
        }
        self.parameters = imported;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, GRAPH_INPUT};
    use crate::ops::ConvParams;
    use tempfile::tempdir;

    #[test]
    fn empty_graph_writes_header_only() {
        let g = GraphBuilder::new(0).finish((1, 1, 1), None);
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.mnbw");
        export_weights(&g, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 10); // magic + version + count
        assert_eq!(&bytes[..4], b"MNBW");
        assert_eq!(import_weights(&path).unwrap().len(), 0);
    }

    #[test]
    fn round_trip_preserves_fp_and_binarized_weights() {
        let mut b = GraphBuilder::new(77);
        let bn = b.batchnorm("bn", 5, GRAPH_INPUT);
        let sg = b.sign("sg", bn);
        b.binary_conv("conv", ConvParams::new(5, 3, (3, 3)).padding(1), sg)
            .unwrap();
        let g = b.finish((5, 4, 4), None);
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.mnbw");
        export_weights(&g, &path).unwrap();
        let imported = import_weights(&path).unwrap();

        match (&g.parameters["bn.gamma"], &imported["bn.gamma"]) {
            (Param::Fp(a), Param::Fp(b)) => assert_eq!(a, b),
            _ => panic!("gamma dtype changed"),
        }
        // binary conv comes back packed, equal to sign(latent)
        match (&g.parameters["conv.weight"], &imported["conv.weight"]) {
            (Param::Fp(latent), Param::Bits(bits)) => {
                assert_eq!(&sign_forward(latent), bits);
                assert!(bits.pads_are_zero());
            }
            _ => panic!("conv weight dtypes unexpected"),
        }
        // a second export of the imported map is byte-identical
        let mut g2 = g.clone();
        g2.load_parameters(imported).unwrap();
        let path2 = dir.path().join("w2.mnbw");
        export_weights(&g2, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_are_parse_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.mnbw");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00").unwrap();
        match import_weights(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, b"MNBW\x01\x00\x05\x00\x00\x00").unwrap();
        match import_weights(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset >= 10),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_shape_on_load_is_contract_error() {
        let mut b = GraphBuilder::new(1);
        b.batchnorm("bn", 4, GRAPH_INPUT);
        let g = b.finish((4, 2, 2), None);
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.mnbw");
        export_weights(&g, &path).unwrap();

        let mut b = GraphBuilder::new(1);
        b.batchnorm("bn", 8, GRAPH_INPUT);
        let mut other = b.finish((8, 2, 2), None);
        let imported = import_weights(&path).unwrap();
        assert!(matches!(
            other.load_parameters(imported),
            Err(Error::Contract(_))
        ));
    }
}
