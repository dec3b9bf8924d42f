//! Binary checkpoint format.
//!
//! Layout: magic `PCDQ`, version `u16`, record count `u32`, then one record
//! per tensor: name length `u16`, UTF-8 name, `rows: u32`, `cols: u32`, and
//! `rows * cols` little-endian `f64` values. All integers little-endian.
//! The first record, `__arch__`, encodes the architecture descriptor so a
//! checkpoint alone reconstructs the network. Round trips are bitwise exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ArchDescriptor, InputShape, Network, Variant};
use crate::activations::ActivationKind;
use crate::equilibrium::SolverSettings;
use crate::error::{Error, Result};
use crate::numeric::Rng;

const MAGIC: &[u8; 4] = b"PCDQ";
const VERSION: u16 = 1;
const ARCH_RECORD: &str = "__arch__";
const ARCH_FIELDS: usize = 12;

fn activation_id(kind: ActivationKind) -> f64 {
    ActivationKind::ALL.iter().position(|&k| k == kind).expect("kind in ALL") as f64
}

fn activation_from_id(id: f64) -> Result<ActivationKind> {
    ActivationKind::ALL
        .get(id as usize)
        .copied()
        .filter(|_| id.fract() == 0.0 && id >= 0.0)
        .ok_or_else(|| Error::Checkpoint(format!("unknown activation id {id}")))
}

fn encode_arch(desc: &ArchDescriptor) -> Vec<f64> {
    let (kind, a, b, c) = match desc.input {
        InputShape::Features(n) => (0.0, n as f64, 1.0, 1.0),
        InputShape::Image { channels, height, width } => {
            (1.0, channels as f64, height as f64, width as f64)
        }
    };
    vec![
        desc.variant.index() as f64,
        if desc.convolutional { 1.0 } else { 0.0 },
        activation_id(desc.activation),
        desc.channels as f64,
        desc.classes as f64,
        kind,
        a,
        b,
        c,
        desc.solver.tolerance,
        desc.solver.max_iters as f64,
        desc.solver.backward_max_iters as f64,
    ]
}

fn decode_arch(values: &[f64]) -> Result<ArchDescriptor> {
    if values.len() != ARCH_FIELDS {
        return Err(Error::Checkpoint(format!(
            "architecture record has {} fields, expected {ARCH_FIELDS}",
            values.len()
        )));
    }
    let variant = Variant::from_index(values[0] as u8)
        .ok_or_else(|| Error::Checkpoint(format!("unknown variant {}", values[0])))?;
    let input = if values[5] == 0.0 {
        InputShape::Features(values[6] as usize)
    } else {
        InputShape::Image {
            channels: values[6] as usize,
            height: values[7] as usize,
            width: values[8] as usize,
        }
    };
    Ok(ArchDescriptor {
        variant,
        convolutional: values[1] != 0.0,
        activation: activation_from_id(values[2])?,
        channels: values[3] as usize,
        classes: values[4] as usize,
        input,
        solver: SolverSettings {
            tolerance: values[9],
            max_iters: values[10] as usize,
            backward_max_iters: values[11] as usize,
        },
    })
}

fn write_record(w: &mut impl Write, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Checkpoint(format!("record name too long: {name}")));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Serialize the network (parameters, batch-norm running statistics, and the
/// architecture descriptor) to `path`.
pub fn checkpoint_save(network: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let tensors = network.tensor_data();
    w.write_all(&(1 + tensors.len() as u32).to_le_bytes())?;
    let arch = encode_arch(&network.descriptor());
    write_record(&mut w, ARCH_RECORD, 1, arch.len(), &arch)?;
    for (spec, data) in tensors {
        write_record(&mut w, spec.name, spec.rows, spec.cols, data)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| {
            Error::Checkpoint(format!("file truncated at byte {} while reading {what}", self.offset))
        })?;
        self.offset += buf.len();
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            self.take(&mut b, what)?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    }
}

/// Reconstruct a network from a checkpoint written by [`checkpoint_save`].
pub fn checkpoint_load(path: &Path) -> Result<Network> {
    let mut r = Cursor { inner: BufReader::new(File::open(path)?), offset: 0 };
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("record count")? as usize;
    let mut records: Vec<(String, usize, usize, Vec<f64>)> = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let mut name = vec![0u8; name_len];
        r.take(&mut name, "record name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("record {i} name is not UTF-8")))?;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("record {name} size overflows")))?;
        let data = r.f64s(len, &name)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("record {name} contains non-finite values")));
        }
        records.push((name, rows, cols, data));
    }
    // Anything after the table is corruption.
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::Checkpoint(format!("trailing bytes after record table at byte {}", r.offset)));
    }

    let (first_name, _, _, arch_values) =
        records.first().ok_or_else(|| Error::Checkpoint("empty checkpoint".into()))?;
    if first_name != ARCH_RECORD {
        return Err(Error::Checkpoint(format!("first record is {first_name}, expected {ARCH_RECORD}")));
    }
    let desc = decode_arch(arch_values)?;
    let mut network = Network::build(desc, &mut Rng::new(0))?;

    let mut by_name: std::collections::HashMap<&str, (usize, usize, &[f64])> = records
        [1..]
        .iter()
        .map(|(n, r, c, d)| (n.as_str(), (*r, *c, d.as_slice())))
        .collect();
    for (spec, slot) in network.tensor_data_mut() {
        let (rows, cols, data) = by_name.remove(spec.name).ok_or_else(|| {
            Error::Checkpoint(format!("missing tensor record {}", spec.name))
        })?;
        if rows != spec.rows || cols != spec.cols {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {rows}x{cols}, expected {}x{}",
                spec.name, spec.rows, spec.cols
            )));
        }
        slot.copy_from_slice(data);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unknown tensor record {extra}")));
    }
    Ok(network)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_pcdeq_l;
    use crate::numeric::Matrix;

    fn sample_network(seed: u64) -> Network {
        let mut rng = Rng::new(seed);
        build_pcdeq_l(
            Variant::Two,
            ActivationKind::Sigmoid,
            6,
            InputShape::Features(10),
            4,
            SolverSettings::default(),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.pcdq");
        let mut net = sample_network(11);
        // Push some state through batch norm so running stats are nontrivial.
        let mut rng = Rng::new(12);
        let x = Matrix::from_vec(8, 10, (0..80).map(|_| rng.normal()).collect()).unwrap();
        net.forward_train(&x).unwrap();
        checkpoint_save(&net, &path).unwrap();
        let loaded = checkpoint_load(&path).unwrap();
        assert_eq!(loaded.descriptor(), net.descriptor());
        for ((sa, da), (sb, db)) in net.tensor_data().iter().zip(loaded.tensor_data().iter()) {
            assert_eq!(sa.name, sb.name);
            assert_eq!(da, db, "tensor {} differs", sa.name);
        }
        // Saving the loaded network reproduces the byte stream.
        let path2 = dir.path().join("net2.pcdq");
        checkpoint_save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.pcdq");
        checkpoint_save(&sample_network(13), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        let err = checkpoint_load(&cut).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn corrupt_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.pcdq");
        checkpoint_save(&sample_network(14), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = path.with_extension("badmagic");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(checkpoint_load(&bad), Err(Error::Checkpoint(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 0xFF; // version low byte
        let bad = path.with_extension("badver");
        std::fs::write(&bad, &bytes).unwrap();
        let err = checkpoint_load(&bad).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn evaluation_survives_the_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.pcdq");
        let net = sample_network(15);
        let mut rng = Rng::new(16);
        let x = Matrix::from_vec(5, 10, (0..50).map(|_| rng.normal()).collect()).unwrap();
        let before = net.forward_eval(&x).unwrap();
        checkpoint_save(&net, &path).unwrap();
        let after = checkpoint_load(&path).unwrap().forward_eval(&x).unwrap();
        assert_eq!(before.data(), after.data());
    }
}
