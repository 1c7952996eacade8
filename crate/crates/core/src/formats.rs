//! Binary containers: tensor archives, checkpoints and ensemble (`Z`) files.
//!
//! Tensor archive layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SELFENST"
//! version   u32
//! count     u64
//! count x { name_len u32, name bytes (utf-8), rank u32, rank x u64 extents,
//!           product(extents) x f32 }
//! ```
//!
//! A checkpoint is a tensor archive holding every trainable parameter under
//! its own name, each running mean under `<name>` plus its update count
//! under `<name>.updates`, and the Adam moments under `adam.m.<param>` and
//! `adam.v.<param>` with the step count under `adam.step`. Counters are
//! stored as 24-bit limbs so they survive the f32 payload exactly.
//!
//! Ensemble file layout:
//!
//! ```text
//! magic     8 bytes  "SELFENSZ"
//! version   u32
//! rows      u64
//! classes   u64
//! alpha     f64
//! epoch     u64
//! counters  rows x u64
//! Z         rows x classes x f32, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::augment::ZcaTransform;
use crate::consistency::EnsembleState;
use crate::error::{Error, Result};
use crate::nn::NetworkParams;
use crate::optimize::AdamState;
use crate::tensor::{Real, Tensor};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"SELFENST";
pub const ARCHIVE_VERSION: u32 = 1;
pub const ENSEMBLE_MAGIC: &[u8; 8] = b"SELFENSZ";
pub const ENSEMBLE_VERSION: u32 = 1;

const LIMB_BITS: u32 = 24;
const LIMBS: usize = 3;

/// Ordered collection of named f32 tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor<f32>)>,
}

impl TensorArchive {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `origin` only labels error messages.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, origin);
        r.magic(ARCHIVE_MAGIC)?;
        r.version(ARCHIVE_VERSION)?;
        let count = r.u64()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| r.fail("tensor name is not utf-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| r.fail(format!("tensor '{name}' extents overflow")))?;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| r.fail("payload too large"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.fail(e.to_string()))?;
            entries.push((name, t));
        }
        r.finish()?;
        Ok(TensorArchive { entries })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TensorArchive::from_bytes(&bytes, &path.display().to_string())
    }

    fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("archive has no tensor '{name}'")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], origin: &'a str) -> Self {
        Reader { bytes, pos: 0, origin }
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::format(self.origin, reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8).map_err(|_| self.fail("file too short for header"))?;
        if got != expected {
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn version(&mut self, expected: u32) -> Result<()> {
        let v = self.u32()?;
        if v != expected {
            return Err(self.fail(format!("unsupported version {v}, expected {expected}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn encode_count(v: u64) -> Tensor<f32> {
    let mask = (1u64 << LIMB_BITS) - 1;
    let limbs = (0..LIMBS)
        .map(|k| ((v >> (k as u32 * LIMB_BITS)) & mask) as f32)
        .collect();
    Tensor::new(vec![LIMBS], limbs).expect("limb tensor")
}

fn decode_count(t: &Tensor<f32>, name: &str) -> Result<u64> {
    if t.shape() != [LIMBS] {
        return Err(Error::config(format!("counter '{name}' has shape {:?}", t.shape())));
    }
    let mut v = 0u64;
    for (k, &limb) in t.data().iter().enumerate() {
        if !(limb >= 0.0 && limb < (1u64 << LIMB_BITS) as f32 && limb.fract() == 0.0) {
            return Err(Error::config(format!("counter '{name}' has invalid limb {limb}")));
        }
        v |= (limb as u64) << (k as u32 * LIMB_BITS);
    }
    Ok(v)
}

/// Parameters, running means and (optionally) optimizer state.
pub fn checkpoint_archive<R: Real>(params: &NetworkParams<R>, adam: Option<&AdamState<R>>) -> TensorArchive {
    let mut a = TensorArchive::default();
    for p in params.trainable() {
        a.push(p.name.clone(), p.value.cast());
    }
    for rm in params.running_means() {
        a.push(rm.name.clone(), rm.value.cast());
        a.push(format!("{}.updates", rm.name), encode_count(rm.updates));
    }
    if let Some(s) = adam {
        for (p, (m, v)) in params.trainable().iter().zip(s.first.iter().zip(&s.second)) {
            a.push(format!("adam.m.{}", p.name), m.cast());
            a.push(format!("adam.v.{}", p.name), v.cast());
        }
        a.push("adam.step", encode_count(s.step));
    }
    a
}

/// Overwrites `params` (and `adam`, when given) from a checkpoint archive.
/// Shapes must match the network the parameters were built for.
pub fn restore_checkpoint<R: Real>(
    archive: &TensorArchive,
    params: &mut NetworkParams<R>,
    adam: Option<&mut AdamState<R>>,
) -> Result<()> {
    let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<R>> {
        let t = archive.require(name)?;
        if t.shape() != shape {
            return Err(Error::config(format!(
                "checkpoint tensor '{name}' has shape {:?}, network expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t.cast())
    };
    let mut restored = Vec::with_capacity(params.trainable().len());
    for p in params.trainable() {
        restored.push(fetch(&p.name, p.value.shape())?);
    }
    let mut running = Vec::new();
    for rm in params.running_means() {
        let v = fetch(&rm.name, rm.value.shape())?;
        let name = format!("{}.updates", rm.name);
        running.push((v, decode_count(archive.require(&name)?, &name)?));
    }
    if let Some(state) = adam {
        let mut first = Vec::new();
        let mut second = Vec::new();
        for p in params.trainable() {
            first.push(fetch(&format!("adam.m.{}", p.name), p.value.shape())?);
            second.push(fetch(&format!("adam.v.{}", p.name), p.value.shape())?);
        }
        let step = decode_count(archive.require("adam.step")?, "adam.step")?;
        state.restore(first, second, step)?;
    }
    for (p, v) in params.trainable_mut().iter_mut().zip(restored) {
        p.value = v;
    }
    for (rm, (v, updates)) in params.running_means_mut().iter_mut().zip(running) {
        rm.value = v;
        rm.updates = updates;
    }
    Ok(())
}

pub fn save_checkpoint<R: Real>(path: &Path, params: &NetworkParams<R>, adam: Option<&AdamState<R>>) -> Result<()> {
    checkpoint_archive(params, adam).write_file(path)
}

pub fn load_checkpoint<R: Real>(
    path: &Path,
    params: &mut NetworkParams<R>,
    adam: Option<&mut AdamState<R>>,
) -> Result<()> {
    let archive = TensorArchive::read_file(path)?;
    restore_checkpoint(&archive, params, adam).map_err(|e| match e {
        Error::Config(reason) => Error::format(path.display().to_string(), reason),
        other => other,
    })
}

pub fn ensemble_to_bytes<R: Real>(state: &EnsembleState<R>) -> Vec<u8> {
    let (n, c) = (state.rows(), state.classes());
    let mut out = Vec::with_capacity(44 + n * 8 + n * c * 4);
    out.extend_from_slice(ENSEMBLE_MAGIC);
    out.extend_from_slice(&ENSEMBLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(c as u64).to_le_bytes());
    out.extend_from_slice(&state.alpha().to_le_bytes());
    out.extend_from_slice(&state.epoch().to_le_bytes());
    for &t in state.counters() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for &v in state.raw().data() {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    out
}

pub fn ensemble_from_bytes<R: Real>(bytes: &[u8], origin: &str) -> Result<EnsembleState<R>> {
    let mut r = Reader::new(bytes, origin);
    r.magic(ENSEMBLE_MAGIC)?;
    r.version(ENSEMBLE_VERSION)?;
    let n = r.u64()? as usize;
    let c = r.u64()? as usize;
    let alpha = r.f64()?;
    let epoch = r.u64()?;
    let expected = n
        .checked_mul(8)
        .and_then(|a| n.checked_mul(c).and_then(|b| b.checked_mul(4)).and_then(|b| a.checked_add(b)))
        .ok_or_else(|| r.fail("header extents overflow"))?;
    if bytes.len() - r.pos != expected {
        return Err(r.fail(format!(
            "header promises {n}x{c} ensemble ({expected} bytes) but {} bytes follow",
            bytes.len() - r.pos
        )));
    }
    let counters = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let payload = r.take(n * c * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| R::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    let z = Tensor::new(vec![n, c], data)?;
    EnsembleState::from_parts(z, alpha, counters, epoch).map_err(|e| r.fail(e.to_string()))
}

pub fn save_ensemble<R: Real>(path: &Path, state: &EnsembleState<R>) -> Result<()> {
    fs::write(path, ensemble_to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load_ensemble<R: Real>(path: &Path) -> Result<EnsembleState<R>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ensemble_from_bytes(&bytes, &path.display().to_string())
}

pub fn zca_archive<R: Real>(t: &ZcaTransform<R>) -> TensorArchive {
    let mut a = TensorArchive::default();
    a.push("zca.mean", t.mean.cast());
    a.push("zca.matrix", t.matrix.cast());
    a.push("zca.epsilon", Tensor::scalar(t.epsilon as f32));
    a
}

pub fn zca_from_archive<R: Real>(a: &TensorArchive) -> Result<ZcaTransform<R>> {
    let mean = a.require("zca.mean")?.cast();
    let matrix: Tensor<R> = a.require("zca.matrix")?.cast();
    let epsilon = a.require("zca.epsilon")?.data().first().copied().unwrap_or(0.0) as f64;
    let d = mean.len();
    if matrix.shape() != [d, d] {
        return Err(Error::config(format!(
            "whitening matrix shape {:?} does not match mean length {d}",
            matrix.shape()
        )));
    }
    Ok(ZcaTransform { mean, matrix, epsilon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::build_small_network;
    use crate::layers::Preset;
    use crate::rng::{self, Stream};

    #[test]
    fn archive_round_trip() {
        let mut a = TensorArchive::default();
        a.push("x", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, 7.0]).unwrap());
        a.push("scalar", Tensor::scalar(4.0));
        let bytes = a.to_bytes();
        let b = TensorArchive::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes(), bytes);
        for cut in [0, 7, 12, 20, bytes.len() - 1] {
            assert!(matches!(
                TensorArchive::from_bytes(&bytes[..cut], "mem"),
                Err(Error::Format { .. })
            ));
        }
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(TensorArchive::from_bytes(&bad, "mem").is_err());
    }

    #[test]
    fn counters_survive_limbs() {
        for v in [0u64, 1, 999, (1 << 24) + 5, 123_456_789_012, (1 << 60) + 3] {
            assert_eq!(decode_count(&encode_count(v), "c").unwrap(), v);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let layers = build_small_network(Preset::CnnSmall, &[1, 6, 6], 3).unwrap();
        let mut p: NetworkParams<f32> =
            NetworkParams::init(&layers, &[1, 6, 6], &mut rng::stream(3, Stream::Init)).unwrap();
        let width = p.running_means()[0].value.len();
        p.running_means_mut()[0].push(&vec![0.5; width]);
        let mut adam = AdamState::new(&p, 0.999).unwrap();
        adam.step = 77;
        adam.first[0].data_mut()[0] = 0.25;
        let a = checkpoint_archive(&p, Some(&adam));
        let mut q: NetworkParams<f32> =
            NetworkParams::init(&layers, &[1, 6, 6], &mut rng::stream(4, Stream::Init)).unwrap();
        let mut adam2 = AdamState::new(&q, 0.999).unwrap();
        restore_checkpoint(&TensorArchive::from_bytes(&a.to_bytes(), "m").unwrap(), &mut q, Some(&mut adam2)).unwrap();
        assert_eq!(p, q);
        assert_eq!(adam, adam2);
    }

    #[test]
    fn ensemble_round_trip_and_truncation() {
        let mut s: EnsembleState<f32> = EnsembleState::new(5, 3, 0.6).unwrap();
        s.update(&[1, 3], &Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        s.finish_epoch();
        let bytes = ensemble_to_bytes(&s);
        assert_eq!(bytes.len(), 8 + 4 + 8 + 8 + 8 + 8 + 5 * 8 + 15 * 4);
        let back: EnsembleState<f32> = ensemble_from_bytes(&bytes, "z").unwrap();
        assert_eq!(back, s);
        assert!(matches!(ensemble_from_bytes::<f32>(&bytes[..bytes.len() - 4], "z"), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(ensemble_from_bytes::<f32>(&wrong, "z"), Err(Error::Format { .. })));
    }
}
