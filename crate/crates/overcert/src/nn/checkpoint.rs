//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//!   magic "OCKP" | u16 version | u8 bn_mode | f64 inference_temperature |
//!   u32 layer count | per layer: u8 kind, dims, freeze flag, parameter
//!   tensors (dense: weights+bias; batch_norm: gamma, beta, running mean,
//!   running variance). Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{BnMode, Layer, Network};

const MAGIC: &[u8; 4] = b"OCKP";
const VERSION: u16 = 1;

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn fail(&self, message: &str) -> Error {
        Error::Format {
            offset: self.offset,
            message: message.to_string(),
        }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            message: "truncated file".into(),
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_network(network: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let mode: u8 = match network.bn_mode {
        BnMode::RunningStats => 0,
        BnMode::BatchStats => 1,
    };
    w.write_all(&[mode])?;
    w.write_all(&network.inference_temperature.to_le_bytes())?;
    w.write_all(&(network.layers.len() as u32).to_le_bytes())?;
    for (layer, frozen) in network.layers.iter().zip(&network.freeze_mask) {
        w.write_all(&[*frozen as u8])?;
        match layer {
            Layer::Dense {
                weights,
                bias,
                input_dim,
                output_dim,
            } => {
                w.write_all(&[0u8])?;
                w.write_all(&(*input_dim as u32).to_le_bytes())?;
                w.write_all(&(*output_dim as u32).to_le_bytes())?;
                write_f64s(&mut w, weights)?;
                write_f64s(&mut w, bias)?;
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                dim,
            } => {
                w.write_all(&[1u8])?;
                w.write_all(&(*dim as u32).to_le_bytes())?;
                write_f64s(&mut w, gamma)?;
                write_f64s(&mut w, beta)?;
                write_f64s(&mut w, running_mean)?;
                write_f64s(&mut w, running_var)?;
            }
            Layer::Relu { dim } => {
                w.write_all(&[2u8])?;
                w.write_all(&(*dim as u32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    let magic = r.bytes::<4>()?;
    if &magic != MAGIC {
        return Err(r.fail("bad magic, not a checkpoint file"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.fail(&format!("unsupported checkpoint version {version}")));
    }
    let bn_mode = match r.u8()? {
        0 => BnMode::RunningStats,
        1 => BnMode::BatchStats,
        v => return Err(r.fail(&format!("unknown bn mode {v}"))),
    };
    let temperature = r.f64()?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(r.fail("non-positive inference temperature"));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    let mut freeze_mask = Vec::with_capacity(count);
    for _ in 0..count {
        freeze_mask.push(r.u8()? != 0);
        match r.u8()? {
            0 => {
                let input_dim = r.u32()? as usize;
                let output_dim = r.u32()? as usize;
                let weights = r.f64_vec(input_dim * output_dim)?;
                let bias = r.f64_vec(output_dim)?;
                layers.push(Layer::Dense {
                    weights,
                    bias,
                    input_dim,
                    output_dim,
                });
            }
            1 => {
                let dim = r.u32()? as usize;
                layers.push(Layer::BatchNorm {
                    gamma: r.f64_vec(dim)?,
                    beta: r.f64_vec(dim)?,
                    running_mean: r.f64_vec(dim)?,
                    running_var: r.f64_vec(dim)?,
                    dim,
                });
            }
            2 => {
                let dim = r.u32()? as usize;
                layers.push(Layer::Relu { dim });
            }
            k => return Err(r.fail(&format!("unknown layer kind {k}"))),
        }
    }
    Ok(Network {
        layers,
        freeze_mask,
        bn_mode,
        inference_temperature: temperature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn sample_network() -> Network {
        let mut l1 = Layer::dense(3, 4);
        if let Layer::Dense { weights, bias, .. } = &mut l1 {
            for (i, w) in weights.iter_mut().enumerate() {
                *w = (i as f64) * 0.37 - 1.1;
            }
            bias.copy_from_slice(&[0.1, -0.2, 0.3, -0.4]);
        }
        let mut net = Network::new(vec![l1, Layer::batch_norm(4), Layer::relu(4), Layer::dense(4, 2)]).unwrap();
        net.freeze_mask[3] = true;
        net.inference_temperature = 1.75;
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = sample_network();
        save_network(&net, &path).unwrap();
        let loaded = load_network(&path).unwrap();
        assert_eq!(net.param_checksum(), loaded.param_checksum());
        assert_eq!(net.freeze_mask, loaded.freeze_mask);
        assert_eq!(net.inference_temperature, loaded.inference_temperature);
        // Saving again yields byte-identical files.
        let path2 = dir.path().join("net2.ckpt");
        save_network(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_network(&sample_network(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        let tpath = dir.path().join("cut.ckpt");
        std::fs::File::create(&tpath)
            .unwrap()
            .write_all(cut)
            .unwrap();
        match load_network(&tpath) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(matches!(
            load_network(&path),
            Err(Error::Format { offset: 4, .. })
        ));
    }
}
