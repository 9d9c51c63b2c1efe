//! Persisted prior-network weights plus the fixed noise input they were fitted to.
//!
//! File layout (little endian):
//!
//! ```text
//! b"DIPSTATE"  u32 version
//! u32 len + fingerprint (utf-8)
//! u32 len + DipConfig (json)
//! u32 image height, u32 image width
//! u32 channels, u32 height, u32 width, f32 × c·h·w      base input
//! u64 count, f32 × count                                  weights
//! [u8; 32]                                                sha-256 of everything above
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::DipConfig;
use super::network::Hourglass;
use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::nn::{export_state, import_state, Layer, Shape, Tensor};

const MAGIC: &[u8; 8] = b"DIPSTATE";
pub const STATE_FORMAT_VERSION: u32 = 1;

/// Independent random streams derived from one seed.
pub(crate) const STREAM_WEIGHTS: u64 = 0;
pub(crate) const STREAM_BASE_INPUT: u64 = 1;
pub(crate) const STREAM_PERTURB: u64 = 2;

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Weights, architecture fingerprint, and the base noise input of a prior network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub fingerprint: String,
    pub config: DipConfig,
    pub image_height: usize,
    pub image_width: usize,
    pub base_input: Tensor,
    pub weights: Vec<f32>,
}

/// Draws the fixed `U(0, amplitude)` input for an image of the given size.
pub fn base_input(config: &DipConfig, seed: u64, height: usize, width: usize) -> Result<Tensor> {
    let (hp, wp) = config.padded_size(height, width)?;
    let shape = Shape::new(1, config.input_channels, hp, wp);
    let mut rng = seeded(seed, STREAM_BASE_INPUT);
    let amp = config.input_noise_amplitude;
    let data = (0..shape.len()).map(|_| rng.random::<f32>() * amp).collect();
    Ok(Tensor::from_vec(shape, data))
}

/// Randomly initializes a prior network for images of `height × width`.
pub fn build_network(config: &DipConfig, seed: u64, height: usize, width: usize) -> Result<NetworkState> {
    config.validate()?;
    let base_input = base_input(config, seed, height, width)?;
    let net = Hourglass::new(config, &mut seeded(seed, STREAM_WEIGHTS));
    Ok(NetworkState {
        fingerprint: config.fingerprint(),
        config: config.clone(),
        image_height: height,
        image_width: width,
        base_input,
        weights: export_state(&net),
    })
}

impl NetworkState {
    pub(crate) fn instantiate(&self) -> Result<Hourglass> {
        if self.fingerprint != self.config.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: self.config.fingerprint(),
                found: self.fingerprint.clone(),
            });
        }
        let mut net = Hourglass::new(&self.config, &mut seeded(0, STREAM_WEIGHTS));
        if !import_state(&mut net, &self.weights) {
            return Err(Error::Data(format!(
                "state holds {} weights, architecture needs {}",
                self.weights.len(),
                export_state(&net).len()
            )));
        }
        Ok(net)
    }

    /// Rejects the state unless it was produced by a structurally identical config.
    pub fn check_compatible(&self, config: &DipConfig) -> Result<()> {
        let expected = config.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Output of the network on its unperturbed base input, cropped to the image size.
    pub fn forward(&self) -> Result<Image> {
        let net = self.instantiate()?;
        let out = net.infer(self.base_input.clone());
        crop_output(&out, self.image_height, self.image_width)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(crate::nn::parameter_count(&self.instantiate()?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.write_u32::<LE>(STATE_FORMAT_VERSION).unwrap();
        write_blob(&mut buf, self.fingerprint.as_bytes());
        write_blob(&mut buf, &serde_json::to_vec(&self.config).expect("config serializes"));
        buf.write_u32::<LE>(self.image_height as u32).unwrap();
        buf.write_u32::<LE>(self.image_width as u32).unwrap();
        let s = self.base_input.shape;
        for d in [s.c, s.h, s.w] {
            buf.write_u32::<LE>(d as u32).unwrap();
        }
        for v in &self.base_input.data {
            buf.write_f32::<LE>(*v).unwrap();
        }
        buf.write_u64::<LE>(self.weights.len() as u64).unwrap();
        for v in &self.weights {
            buf.write_f32::<LE>(*v).unwrap();
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a network state file"));
        }
        let (payload, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Cursor::new(&payload[MAGIC.len()..]);
        let eof = |_| corrupt("truncated");
        let version = r.read_u32::<LE>().map_err(eof)?;
        if version != STATE_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                expected: STATE_FORMAT_VERSION,
                found: version,
            });
        }
        let fingerprint = String::from_utf8(read_blob(&mut r).map_err(eof)?)
            .map_err(|_| corrupt("fingerprint is not utf-8"))?;
        let config: DipConfig = serde_json::from_slice(&read_blob(&mut r).map_err(eof)?)
            .map_err(|e| corrupt(&format!("config: {e}")))?;
        let image_height = r.read_u32::<LE>().map_err(eof)? as usize;
        let image_width = r.read_u32::<LE>().map_err(eof)? as usize;
        let (c, h, w) = (
            r.read_u32::<LE>().map_err(eof)? as usize,
            r.read_u32::<LE>().map_err(eof)? as usize,
            r.read_u32::<LE>().map_err(eof)? as usize,
        );
        let shape = Shape::new(1, c, h, w);
        let base = read_f32s(&mut r, shape.len()).map_err(eof)?;
        let count = r.read_u64::<LE>().map_err(eof)? as usize;
        let weights = read_f32s(&mut r, count).map_err(eof)?;
        if r.position() as usize != payload.len() - MAGIC.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            fingerprint,
            config,
            image_height,
            image_width,
            base_input: Tensor::from_vec(shape, base),
            weights,
        })
    }
}

fn write_blob(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.write_u32::<LE>(bytes.len() as u32).unwrap();
    buf.extend_from_slice(bytes);
}

fn read_blob(r: &mut Cursor<&[u8]>) -> std::io::Result<Vec<u8>> {
    let len = r.read_u32::<LE>()? as usize;
    let mut out = vec![0; len];
    r.read_exact(&mut out)?;
    Ok(out)
}

fn read_f32s(r: &mut Cursor<&[u8]>, count: usize) -> std::io::Result<Vec<f32>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if count.saturating_mul(4) > remaining {
        return Err(std::io::ErrorKind::UnexpectedEof.into());
    }
    let mut out = vec![0.0; count];
    r.read_f32_into::<LE>(&mut out)?;
    Ok(out)
}

pub fn save_state(state: &NetworkState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, state.to_bytes()).at(path)
}

pub fn load_state(path: impl AsRef<Path>) -> Result<NetworkState> {
    let path = path.as_ref();
    let bytes = fs::read(path).at(path)?;
    NetworkState::from_bytes(&bytes, path)
}

/// Loads a state and checks it can warm-start runs of `config`.
pub fn load_state_for(path: impl AsRef<Path>, config: &DipConfig) -> Result<NetworkState> {
    let state = load_state(path)?;
    state.check_compatible(config)?;
    Ok(state)
}

/// Crops a `1×3×Hp×Wp` network output to `height × width` and clamps it into an image.
pub(crate) fn crop_output(out: &Tensor, height: usize, width: usize) -> Result<Image> {
    let s = out.shape;
    let mut planar = Vec::with_capacity(3 * height * width);
    for c in 0..3 {
        for y in 0..height {
            let row = &out.data[(c * s.h + y) * s.w..][..width];
            planar.extend_from_slice(row);
        }
    }
    Image::from_planar(height, width, &planar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DipConfig {
        let mut c = DipConfig::uniform(2, 4, 1);
        c.input_channels = 3;
        c
    }

    #[test]
    fn same_seed_builds_identical_weights() {
        let a = build_network(&small(), 7, 8, 8).unwrap();
        let b = build_network(&small(), 7, 8, 8).unwrap();
        assert_eq!(a, b);
        let c = build_network(&small(), 8, 8, 8).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let state = build_network(&small(), 1, 9, 8).unwrap();
        save_state(&state, &path).unwrap();
        let back = load_state(&path).unwrap();
        assert_eq!(state, back);
        assert_eq!(state.forward().unwrap(), back.forward().unwrap());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        save_state(&build_network(&small(), 1, 8, 8).unwrap(), &path).unwrap();
        let mut other = small();
        other.filters_down = vec![5, 5];
        assert!(matches!(load_state_for(&path, &other), Err(Error::FingerprintMismatch { .. })));
        let mut same_structure = small();
        same_structure.learning_rate = 0.1;
        assert!(load_state_for(&path, &same_structure).is_ok());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let mut bytes = build_network(&small(), 1, 8, 8).unwrap().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_state(&path), Err(Error::Corrupt { .. })));
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_state(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn too_small_image_is_rejected() {
        assert!(matches!(
            build_network(&DipConfig::default(), 0, 31, 64),
            Err(Error::ImageTooSmall { .. })
        ));
    }
}
