//! File formats. Volumes and masks use a one-line ASCII header followed by
//! a little-endian payload; checkpoints bundle the network settings with
//! every parameter tensor. Both formats round-trip bitwise.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::{network_from_text, network_to_text};
use crate::error::{Error, Result};
use crate::nn::{param_specs, NetworkConfig, NetworkParams};
use crate::preprocess::{LabelMask, Volume};
use crate::tensor::Tensor;

const VOL_MAGIC: &str = "gtvvol1";
const CKPT_MAGIC: &[u8] = b"gtvckpt1\n";

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path_str(path), e))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path_str(path), e))?))
}

fn volume_header(dtype: &str, dims: &[usize; 3], spacing: &[f64; 3]) -> String {
    format!(
        "{} {} {} {} {} {} {} {}\n",
        VOL_MAGIC, dtype, dims[0], dims[1], dims[2], spacing[0], spacing[1], spacing[2]
    )
}

struct VolumeHeader {
    dtype: String,
    dims: [usize; 3],
    spacing: [f64; 3],
}

fn read_volume_header(r: &mut impl BufRead, path: &Path) -> Result<VolumeHeader> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::io(path_str(path), e))?;
    if line.last() != Some(&b'\n') {
        return Err(Error::format(path_str(path), "missing header line"));
    }
    line.pop();
    let text = std::str::from_utf8(&line)
        .map_err(|_| Error::format(path_str(path), "header is not ASCII"))?;
    let tokens: Vec<&str> = text.split(' ').collect();
    if tokens.is_empty() || tokens[0] != VOL_MAGIC {
        let found = tokens.first().copied().unwrap_or("");
        if found.starts_with("gtvvol") {
            return Err(Error::UnknownVersion {
                path: path_str(path),
                found: found.to_string(),
                supported: VOL_MAGIC,
            });
        }
        return Err(Error::format(path_str(path), format!("bad magic {:?}", found)));
    }
    if tokens.len() != 8 {
        return Err(Error::format(
            path_str(path),
            format!("header has {} fields, expected 8", tokens.len()),
        ));
    }
    let parse_dim = |s: &str| -> Result<usize> {
        let d: usize = s
            .parse()
            .map_err(|_| Error::format(path_str(path), format!("bad dimension {:?}", s)))?;
        if d == 0 {
            return Err(Error::format(path_str(path), "zero dimension"));
        }
        Ok(d)
    };
    let parse_sp = |s: &str| -> Result<f64> {
        let v: f64 = s
            .parse()
            .map_err(|_| Error::format(path_str(path), format!("bad spacing {:?}", s)))?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::format(path_str(path), format!("non-positive spacing {:?}", s)));
        }
        Ok(v)
    };
    Ok(VolumeHeader {
        dtype: tokens[1].to_string(),
        dims: [parse_dim(tokens[2])?, parse_dim(tokens[3])?, parse_dim(tokens[4])?],
        spacing: [parse_sp(tokens[5])?, parse_sp(tokens[6])?, parse_sp(tokens[7])?],
    })
}

fn read_payload(r: &mut impl BufRead, path: &Path, expected: u64) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path_str(path), e))?;
    if payload.len() as u64 != expected {
        return Err(Error::PayloadLength {
            path: path_str(path),
            expected,
            actual: payload.len() as u64,
        });
    }
    Ok(payload)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut w = create(path)?;
    let io_err = |e| Error::io(path_str(path), e);
    w.write_all(volume_header("f32", &v.dims, &v.spacing).as_bytes()).map_err(io_err)?;
    for &x in &v.data {
        w.write_f32::<LittleEndian>(x).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut r = open(path)?;
    let h = read_volume_header(&mut r, path)?;
    if h.dtype != "f32" {
        return Err(Error::format(
            path_str(path),
            format!("dtype {:?} is not a scalar volume (expected f32)", h.dtype),
        ));
    }
    let numel = h.dims[0] * h.dims[1] * h.dims[2];
    let payload = read_payload(&mut r, path, numel as u64 * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::new(h.dims, h.spacing, data)
}

pub fn write_mask(path: &Path, m: &LabelMask) -> Result<()> {
    let mut w = create(path)?;
    let io_err = |e| Error::io(path_str(path), e);
    w.write_all(volume_header("u8", &m.dims, &m.spacing).as_bytes()).map_err(io_err)?;
    w.write_all(&m.data).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let mut r = open(path)?;
    let h = read_volume_header(&mut r, path)?;
    if h.dtype != "u8" {
        return Err(Error::format(
            path_str(path),
            format!("dtype {:?} is not a mask (expected u8)", h.dtype),
        ));
    }
    let numel = h.dims[0] * h.dims[1] * h.dims[2];
    let data = read_payload(&mut r, path, numel as u64)?;
    LabelMask::new(h.dims, h.spacing, data)
}

/// Writes the network settings and every parameter tensor. Map order fixes
/// the tensor order, so identical params yield identical bytes.
pub fn save_checkpoint(path: &Path, params: &NetworkParams, config: &NetworkConfig) -> Result<()> {
    let specs = param_specs(config)?;
    if specs.len() != params.len() {
        return Err(Error::invalid(
            "save_checkpoint",
            format!("{} tensors for a config expecting {}", params.len(), specs.len()),
        ));
    }
    let mut w = create(path)?;
    let io_err = |e| Error::io(path_str(path), e);
    w.write_all(CKPT_MAGIC).map_err(io_err)?;
    let blob = network_to_text(config).into_bytes();
    w.write_u32::<LittleEndian>(blob.len() as u32).map_err(io_err)?;
    w.write_all(&blob).map_err(io_err)?;
    w.write_u32::<LittleEndian>(params.len() as u32).map_err(io_err)?;
    for (name, t) in params.tensors() {
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32).map_err(io_err)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32).map_err(io_err)?;
        }
        for &x in t.data() {
            w.write_f32::<LittleEndian>(x).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a checkpoint and validates every tensor name and shape against the
/// embedded config, restoring trainability flags from the architecture.
pub fn load_checkpoint(path: &Path) -> Result<(NetworkParams, NetworkConfig)> {
    let mut r = open(path)?;
    let io_err = |e| Error::io(path_str(path), e);
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic).map_err(io_err)?;
    if magic != CKPT_MAGIC {
        if magic.starts_with(b"gtvckpt") {
            return Err(Error::UnknownVersion {
                path: path_str(path),
                found: String::from_utf8_lossy(&magic).trim_end().to_string(),
                supported: "gtvckpt1",
            });
        }
        return Err(Error::format(path_str(path), "bad checkpoint magic"));
    }
    let blob_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob).map_err(io_err)?;
    let text = String::from_utf8(blob)
        .map_err(|_| Error::format(path_str(path), "config blob is not UTF-8"))?;
    let config = network_from_text(&text)?;

    let count = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut params = NetworkParams::new();
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format(path_str(path), "tensor name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(io_err)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f32::<LittleEndian>().map_err(io_err)?);
        }
        params.insert(name, Tensor::from_vec(&shape, data)?);
    }

    let specs = param_specs(&config)?;
    if specs.len() != params.len() {
        return Err(Error::format(
            path_str(path),
            format!("checkpoint has {} tensors, config expects {}", params.len(), specs.len()),
        ));
    }
    for spec in &specs {
        let t = params.get_mut(&spec.name).map_err(|_| {
            Error::format(path_str(path), format!("missing tensor {}", spec.name))
        })?;
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::format(
                path_str(path),
                format!(
                    "tensor {} has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                ),
            ));
        }
        t.requires_grad = spec.trainable;
    }
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use crate::tape::{GradTape, Mode};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("gtvseg-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn random_volume(rng: &mut ChaCha8Rng) -> Volume {
        let dims = [
            rng.random_range(1..6usize),
            rng.random_range(1..8usize),
            rng.random_range(1..8usize),
        ];
        let spacing = [
            rng.random_range(0.5..4.0f64),
            rng.random_range(0.5..4.0f64),
            rng.random_range(0.5..4.0f64),
        ];
        let data = (0..dims[0] * dims[1] * dims[2])
            .map(|_| rng.random_range(-1000.0..1000.0))
            .collect();
        Volume::new(dims, spacing, data).unwrap()
    }

    #[test]
    fn volume_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..10 {
            let v = random_volume(&mut rng);
            let path = tmp(&format!("vol_{}.gtvvol", i));
            write_volume(&path, &v).unwrap();
            let r = read_volume(&path).unwrap();
            assert_eq!(r.dims, v.dims);
            assert_eq!(r.spacing, v.spacing);
            assert_eq!(
                r.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn mask_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = [3usize, 5, 7];
        let data: Vec<u8> = (0..105).map(|_| rng.random_range(0..2u8)).collect();
        let m = LabelMask::new(dims, [3.0, 1.0, 1.0], data).unwrap();
        let path = tmp("mask.gtvvol");
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
    }

    #[test]
    fn header_errors_are_distinct() {
        let path = tmp("bad_header.gtvvol");

        std::fs::write(&path, b"gtvvol2 f32 1 1 1 3 1 1\n\0\0\0\0").unwrap();
        assert!(matches!(read_volume(&path), Err(Error::UnknownVersion { .. })));

        std::fs::write(&path, b"volume f32 1 1 1 3 1 1\n\0\0\0\0").unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));

        std::fs::write(&path, b"gtvvol1 f32 1 1 1 3 1\n\0\0\0\0").unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));

        std::fs::write(&path, b"no newline at all").unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let path = tmp("short.gtvvol");
        std::fs::write(&path, b"gtvvol1 f32 1 2 2 3 1 1\n\0\0\0\0").unwrap();
        match read_volume(&path) {
            Err(Error::PayloadLength { expected, actual, .. }) => {
                assert_eq!(expected, 16);
                assert_eq!(actual, 4);
            }
            other => panic!("expected payload error, got {:?}", other.map(|v| v.dims)),
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected_both_ways() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_volume(&mut rng);
        let vp = tmp("as_vol.gtvvol");
        write_volume(&vp, &v).unwrap();
        assert!(matches!(read_mask(&vp), Err(Error::Format { .. })));

        let m = LabelMask::new([1, 1, 2], [3.0, 1.0, 1.0], vec![0, 1]).unwrap();
        let mp = tmp("as_mask.gtvvol");
        write_mask(&mp, &m).unwrap();
        assert!(matches!(read_volume(&mp), Err(Error::Format { .. })));
    }

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            base_channels: vec![2, 2, 2, 2],
            patch_shape: [2, 8, 8],
            ..Default::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_pass() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 5).unwrap();
        let path = tmp("net.gtvckpt");
        save_checkpoint(&path, &params, &cfg).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        for (name, t) in params.tensors() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            assert_eq!(
                l.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                "{} not bitwise identical",
                name
            );
            assert_eq!(l.requires_grad, t.requires_grad, "{} trainability", name);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f32> = (0..2 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |p: &NetworkParams| {
            let mut tape: GradTape<f32> = GradTape::new();
            let x = tape.leaf(Tensor::from_vec(&[1, 1, 2, 8, 8], data.clone()).unwrap());
            let out = crate::nn::unet_forward(&mut tape, x, p, &cfg, Mode::Eval).unwrap();
            tape.value(out.probs).data().to_vec()
        };
        assert_eq!(run(&params), run(&loaded));
    }

    #[test]
    fn checkpoint_rejects_mismatched_config() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 5).unwrap();
        let path = tmp("net_mismatch.gtvckpt");
        save_checkpoint(&path, &params, &cfg).unwrap();

        // Rewrite the blob to claim different channels; shapes then clash.
        let bytes = std::fs::read(&path).unwrap();
        let blob_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let mut text = String::from_utf8(bytes[13..13 + blob_len].to_vec()).unwrap();
        text = text.replace("2,2,2,2", "4,4,4,4");
        let mut patched = Vec::new();
        patched.extend_from_slice(&bytes[..9]);
        patched.extend_from_slice(&(text.len() as u32).to_le_bytes());
        patched.extend_from_slice(text.as_bytes());
        patched.extend_from_slice(&bytes[13 + blob_len..]);
        std::fs::write(&path, patched).unwrap();

        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("enc1.conv1.weight"), "error should name the tensor: {}", err);
    }

    #[test]
    fn checkpoint_magic_gates() {
        let path = tmp("corrupt.gtvckpt");
        std::fs::write(&path, b"gtvckpt2\n....").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::UnknownVersion { .. })));
        std::fs::write(&path, b"whatever!\n...").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
