//! Weight storage: the DFMW container format, manifest validation, and
//! seeded deterministic initialization.
//!
//! File layout, all little-endian, no padding:
//!
//! ```text
//! magic   4 bytes  "DFMW"
//! version u32      currently 1
//! count   u32      number of entries
//! entry   repeated count times:
//!   name_len u16, name utf-8, ndim u8, dims u32 x ndim,
//!   dtype u8 (0 = f32), payload 4 * prod(dims) bytes
//! ```
//!
//! BatchNorm parameters are stored unfolded (gamma, beta, running mean,
//! running variance as separate entries); folding into conv weights happens
//! when a model is built from the store.

use crate::error::{Error, Result};
use indexmap::IndexMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"DFMW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// splitmix64 step: advances the state by the golden-ratio increment and
/// returns the mixed output. The i-th output of a stream seeded with `s`
/// equals `mix(s + (i+1) * 0x9E3779B97F4A7C15)`, so streams are also
/// random-access by flat index.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a 64-bit hash, used to key per-entry init streams by name.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Uniform f32 in [lo, hi) from the top 24 bits of a splitmix64 output.
pub fn uniform_f32(state: &mut u64, lo: f32, hi: f32) -> f32 {
    let u = (splitmix64(state) >> 40) as f64 / (1u64 << 24) as f64;
    (lo as f64 + u * (hi as f64 - lo as f64)) as f32
}

/// What role a manifest entry plays; decides how seeded init fills it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EntryKind {
    /// Conv or fully-connected weight; drawn uniform in +-sqrt(1/fan_in).
    Weight,
    /// Additive bias; initialized to zero.
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub kind: EntryKind,
}

/// Ordered list of every entry a weight store must contain, with shapes.
#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, kind: EntryKind) {
        self.entries.push(ManifestEntry {
            name: name.into(),
            dims,
            kind,
        });
    }

    /// Total number of f32 values across all entries.
    pub fn value_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.dims.iter().product::<usize>())
            .sum()
    }
}

/// One stored array: shape plus flat f32 payload.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn value_count(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Ordered map from hierarchical entry name to stored tensor. Iteration and
/// serialization follow insertion order, so save -> load -> save reproduces
/// a file byte for byte.
#[derive(Clone, Debug, Default)]
pub struct ModelWeights {
    entries: IndexMap<String, WeightTensor>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(Error::WeightShape {
                name,
                expected: dims,
                found: vec![data.len()],
            });
        }
        if self.entries.contains_key(&name) {
            return Err(Error::WeightStore(format!("duplicate entry '{name}'")));
        }
        self.entries.insert(name, WeightTensor { dims, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut WeightTensor> {
        self.entries.get_mut(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &WeightTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total f32 values stored.
    pub fn value_count(&self) -> usize {
        self.entries.values().map(|t| t.value_count()).sum()
    }

    /// Serializes in insertion order. Returns the number of bytes written.
    pub fn save(&self, w: &mut impl Write) -> Result<u64> {
        let mut written = 0u64;
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        written += 12;
        for (name, t) in &self.entries {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::WeightStore(format!("entry name too long: '{name}'")));
            }
            if t.dims.iter().any(|&d| d > u32::MAX as usize) {
                return Err(Error::WeightStore(format!(
                    "entry '{name}' dimension exceeds u32"
                )));
            }
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&[t.dims.len() as u8])?;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&[DTYPE_F32])?;
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
            written += 2 + name_bytes.len() as u64 + 1 + 4 * t.dims.len() as u64 + 1
                + 4 * t.data.len() as u64;
        }
        Ok(written)
    }

    pub fn save_to_path(&self, path: &Path) -> Result<u64> {
        let mut w = BufWriter::new(File::create(path)?);
        let n = self.save(&mut w)?;
        w.flush()?;
        Ok(n)
    }

    /// Parses a store without checking it against any manifest. Magic,
    /// version, dtype, truncation, and value finiteness are still enforced.
    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::TruncatedPayload("file header".into()))?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = read_u32(r, "file header")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = read_u32(r, "file header")?;
        let mut out = ModelWeights::new();
        for i in 0..count {
            let ctx = format!("entry {i} header");
            let name_len = read_u16(r, &ctx)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)
                .map_err(|_| Error::TruncatedPayload(ctx.clone()))?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::WeightStore(format!("entry {i}: name is not utf-8")))?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)
                .map_err(|_| Error::TruncatedPayload(name.clone()))?;
            let mut dims = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                dims.push(read_u32(r, &name)? as usize);
            }
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)
                .map_err(|_| Error::TruncatedPayload(name.clone()))?;
            if dtype[0] != DTYPE_F32 {
                return Err(Error::WeightStore(format!(
                    "entry '{name}': unsupported dtype {}",
                    dtype[0]
                )));
            }
            let count: usize = dims.iter().product();
            let mut payload = vec![0u8; count * 4];
            r.read_exact(&mut payload)
                .map_err(|_| Error::TruncatedPayload(name.clone()))?;
            let mut data = Vec::with_capacity(count);
            for (j, chunk) in payload.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                if !v.is_finite() {
                    return Err(Error::WeightNonFinite {
                        name,
                        index: j,
                    });
                }
                data.push(v);
            }
            out.insert(name, dims, data)?;
        }
        Ok(out)
    }

    pub fn load_from_path(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::load(&mut r)
    }

    /// Checks that exactly the manifest's entries are present, each with its
    /// expected shape.
    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        for entry in &manifest.entries {
            match self.entries.get(&entry.name) {
                None => return Err(Error::MissingEntry(entry.name.clone())),
                Some(t) if t.dims != entry.dims => {
                    return Err(Error::WeightShape {
                        name: entry.name.clone(),
                        expected: entry.dims.clone(),
                        found: t.dims.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        if self.entries.len() != manifest.entries.len() {
            let expected: std::collections::HashSet<&str> =
                manifest.entries.iter().map(|e| e.name.as_str()).collect();
            for name in self.entries.keys() {
                if !expected.contains(name.as_str()) {
                    return Err(Error::UnexpectedEntry(name.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn load_validated(r: &mut impl Read, manifest: &Manifest) -> Result<Self> {
        let w = Self::load(r)?;
        w.validate(manifest)?;
        Ok(w)
    }
}

/// Fills a manifest with deterministic pseudo-random values. Each entry gets
/// its own splitmix64 stream seeded with `seed + fnv1a64(name)`; weights are
/// drawn uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)] where fan_in is the
/// product of all dimensions after the first, biases are zero, and
/// BatchNorm entries form an identity transform (gamma 1, beta 0, mean 0,
/// variance 1). Bit-identical across platforms.
pub fn init_random(manifest: &Manifest, seed: u64) -> ModelWeights {
    let mut out = ModelWeights::new();
    for entry in &manifest.entries {
        let count: usize = entry.dims.iter().product();
        let data = match entry.kind {
            EntryKind::Weight => {
                let fan_in: usize = entry.dims.iter().skip(1).product::<usize>().max(1);
                let bound = (1.0 / fan_in as f64).sqrt();
                let mut state = seed.wrapping_add(fnv1a64(entry.name.as_bytes()));
                (0..count)
                    .map(|_| {
                        let u = (splitmix64(&mut state) >> 40) as f64 / (1u64 << 24) as f64;
                        ((2.0 * u - 1.0) * bound) as f32
                    })
                    .collect()
            }
            EntryKind::Bias | EntryKind::BnBeta | EntryKind::BnMean => vec![0.0; count],
            EntryKind::BnGamma | EntryKind::BnVar => vec![1.0; count],
        };
        out.insert(entry.name.clone(), entry.dims.clone(), data)
            .expect("manifest names are unique");
    }
    out
}

fn read_u16(r: &mut impl Read, ctx: &str) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)
        .map_err(|_| Error::TruncatedPayload(ctx.to_string()))?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read, ctx: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::TruncatedPayload(ctx.to_string()))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_weights() -> ModelWeights {
        let mut w = ModelWeights::new();
        w.insert("a.conv.weight", vec![2, 3, 1, 1], (0..6).map(|i| i as f32 * 0.5 - 1.0).collect())
            .unwrap();
        w.insert("a.bn.gamma", vec![2], vec![1.0, 2.0]).unwrap();
        w.insert("b.fc.bias", vec![4], vec![0.0, -0.25, 0.5, 3.0]).unwrap();
        w
    }

    fn sample_manifest() -> Manifest {
        let mut m = Manifest::default();
        m.push("a.conv.weight", vec![2, 3, 1, 1], EntryKind::Weight);
        m.push("a.bn.gamma", vec![2], EntryKind::BnGamma);
        m.push("b.fc.bias", vec![4], EntryKind::Bias);
        m
    }

    #[test]
    fn splitmix64_known_answer() {
        // Reference output of the canonical splitmix64 for seed 0.
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(&mut s), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(splitmix64(&mut s), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn stream_output_is_random_access_by_index() {
        let seed = 0xDEAD_BEEF_u64;
        let mut s = seed;
        let sequential: Vec<u64> = (0..8).map(|_| splitmix64(&mut s)).collect();
        for (i, &expect) in sequential.iter().enumerate() {
            let mut jump = seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            assert_eq!(splitmix64(&mut jump), expect);
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let w = sample_weights();
        let mut buf = Vec::new();
        let n = w.save(&mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        let loaded = ModelWeights::load(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.len(), w.len());
        for ((an, at), (bn, bt)) in w.entries().zip(loaded.entries()) {
            assert_eq!(an, bn);
            assert_eq!(at, bt);
        }
        let mut buf2 = Vec::new();
        loaded.save(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn serialized_size_matches_layout_arithmetic() {
        let w = sample_weights();
        let mut buf = Vec::new();
        w.save(&mut buf).unwrap();
        let expected: usize = 12
            + (2 + "a.conv.weight".len() + 1 + 4 * 4 + 1 + 4 * 6)
            + (2 + "a.bn.gamma".len() + 1 + 4 + 1 + 4 * 2)
            + (2 + "b.fc.bias".len() + 1 + 4 + 1 + 4 * 4);
        assert_eq!(buf.len(), expected);
    }

    #[test]
    fn empty_store_is_twelve_bytes() {
        let w = ModelWeights::new();
        let mut buf = Vec::new();
        assert_eq!(w.save(&mut buf).unwrap(), 12);
        let loaded = ModelWeights::load(&mut buf.as_slice()).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn bad_magic_is_detected() {
        let mut buf = Vec::new();
        sample_weights().save(&mut buf).unwrap();
        buf[0] = b'X';
        let err = ModelWeights::load(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::BadMagic));
    }

    #[test]
    fn version_mismatch_is_detected() {
        let mut buf = Vec::new();
        sample_weights().save(&mut buf).unwrap();
        buf[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = ModelWeights::load(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion(7)));
    }

    #[test]
    fn truncated_payload_names_the_entry() {
        let mut buf = Vec::new();
        sample_weights().save(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = ModelWeights::load(&mut buf.as_slice()).unwrap_err();
        match err {
            Error::TruncatedPayload(name) => assert_eq!(name, "b.fc.bias"),
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_names_entry_and_index() {
        let mut buf = Vec::new();
        sample_weights().save(&mut buf).unwrap();
        // Overwrite the second value of the trailing 4-element bias.
        let start = buf.len() - 3 * 4;
        buf[start..start + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = ModelWeights::load(&mut buf.as_slice()).unwrap_err();
        match err {
            Error::WeightNonFinite { name, index } => {
                assert_eq!(name, "b.fc.bias");
                assert_eq!(index, 1);
            }
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn validate_reports_missing_shape_and_unexpected() {
        let manifest = sample_manifest();
        let w = sample_weights();
        assert!(w.validate(&manifest).is_ok());

        let mut missing = ModelWeights::new();
        missing
            .insert("a.conv.weight", vec![2, 3, 1, 1], vec![0.0; 6])
            .unwrap();
        let err = missing.validate(&manifest).unwrap_err();
        assert!(matches!(err, Error::MissingEntry(n) if n == "a.bn.gamma"));

        let mut wrong = sample_weights();
        wrong.get_mut("a.bn.gamma").unwrap().dims = vec![1, 2];
        wrong.get_mut("a.bn.gamma").unwrap().data = vec![1.0, 2.0];
        let err = wrong.validate(&manifest).unwrap_err();
        assert!(matches!(err, Error::WeightShape { name, .. } if name == "a.bn.gamma"));

        let mut extra = sample_weights();
        extra.insert("z.rogue", vec![1], vec![0.0]).unwrap();
        let err = extra.validate(&manifest).unwrap_err();
        assert!(matches!(err, Error::UnexpectedEntry(n) if n == "z.rogue"));
    }

    #[test]
    fn init_random_is_deterministic_and_seed_sensitive() {
        let manifest = sample_manifest();
        let mut a = Vec::new();
        init_random(&manifest, 42).save(&mut a).unwrap();
        let mut b = Vec::new();
        init_random(&manifest, 42).save(&mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        init_random(&manifest, 43).save(&mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_random_respects_fan_in_bound_and_fills_identity_bn() {
        let mut m = Manifest::default();
        m.push("w", vec![8, 16, 1, 1], EntryKind::Weight);
        m.push("b", vec![8], EntryKind::Bias);
        m.push("g", vec![8], EntryKind::BnGamma);
        m.push("m", vec![8], EntryKind::BnMean);
        m.push("v", vec![8], EntryKind::BnVar);
        let w = init_random(&m, 7);
        let bound = (1.0f64 / 16.0).sqrt() as f32;
        let weights = &w.get("w").unwrap().data;
        assert!(weights.iter().all(|v| v.abs() <= bound));
        assert!(weights.iter().any(|v| v.abs() > bound * 0.5));
        assert!(w.get("b").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(w.get("g").unwrap().data.iter().all(|&v| v == 1.0));
        assert!(w.get("m").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(w.get("v").unwrap().data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn init_random_differs_between_entries_with_same_shape() {
        let mut m = Manifest::default();
        m.push("one", vec![4, 4, 1, 1], EntryKind::Weight);
        m.push("two", vec![4, 4, 1, 1], EntryKind::Weight);
        let w = init_random(&m, 0);
        assert_ne!(w.get("one").unwrap().data, w.get("two").unwrap().data);
    }

    #[test]
    fn non_ascii_names_roundtrip() {
        let mut w = ModelWeights::new();
        w.insert("Ω.weight", vec![1], vec![0.5]).unwrap();
        let mut buf = Vec::new();
        w.save(&mut buf).unwrap();
        let loaded = ModelWeights::load(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.get("Ω.weight").unwrap().data, vec![0.5]);
    }

    #[test]
    fn duplicate_insert_is_rejected() {
        let mut w = ModelWeights::new();
        w.insert("x", vec![1], vec![0.0]).unwrap();
        let err = w.insert("x", vec![1], vec![1.0]).unwrap_err();
        assert!(matches!(err, Error::WeightStore(_)));
    }
}
