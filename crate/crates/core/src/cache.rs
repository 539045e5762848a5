//! Binary coefficient cache.
//!
//! Layout (all integers little-endian, counts u64, floats IEEE-754 binary64):
//!
//! ```text
//! magic    "OCTB1"
//! meta     ell f64, active_radius f64, kernel id (u64 len + utf8 bytes),
//!          quadrature orders (cell, loss, gain, sphere_s, sphere_theta) u64 x5,
//!          correction flag u8, drop_tolerance f64, leak_budget f64
//! geometry M u64, centers (3 x f64 per cell), volume f64, d f64
//! loss     n_classes u64, per class: rep (3 x i64), loss f64, factor f64
//! gain     per class: n_entries u64, entries (offset 3 x i64, value f64)
//! trailer  FNV-1a 64-bit hash of everything above
//! ```

use crate::coefficients::{BuildParams, CoefficientMeta, CoefficientSet, OffsetClass};
use crate::lattice::VelocityLattice;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 5] = b"OCTB1";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a coefficient cache (bad magic)")]
    BadMagic,
    #[error("truncated or malformed cache file: {0}")]
    Truncated(String),
    #[error("content hash mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    HashMismatch { stored: u64, computed: u64 },
    #[error("cache metadata disagrees with the request: {0}")]
    MetaMismatch(String),
    #[error(transparent)]
    Lattice(#[from] crate::lattice::LatticeError),
}

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CacheError> {
        if self.pos + n > self.buf.len() {
            return Err(CacheError::Truncated(format!(
                "need {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8, CacheError> {
        Ok(self.take(1, what)?[0])
    }
    fn u64(&mut self, what: &str) -> Result<u64, CacheError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn i64(&mut self, what: &str) -> Result<i64, CacheError> {
        Ok(i64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64, CacheError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> Result<String, CacheError> {
        let n = self.u64(what)? as usize;
        if n > 1 << 20 {
            return Err(CacheError::Truncated(format!("{what} length {n} implausible")));
        }
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CacheError::Truncated(format!("{what} is not utf-8")))
    }
}

/// Serialize a coefficient set to its canonical byte representation.
pub fn to_bytes(set: &CoefficientSet) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    let meta = set.meta();
    w.f64(meta.ell);
    w.f64(meta.active_radius);
    w.str(&meta.kernel_id);
    w.u64(meta.params.cell_order as u64);
    w.u64(meta.params.loss_order as u64);
    w.u64(meta.params.gain_order as u64);
    w.u64(meta.params.sphere_s as u64);
    w.u64(meta.params.sphere_theta as u64);
    w.u8(meta.corrected as u8);
    w.f64(meta.params.drop_tolerance);
    w.f64(meta.params.leak_budget);

    let lattice = set.lattice();
    w.u64(lattice.len() as u64);
    for cell in lattice.cells() {
        let c = cell.center(meta.ell);
        w.f64(c[0]);
        w.f64(c[1]);
        w.f64(c[2]);
    }
    w.f64(0.5 * meta.ell.powi(3));
    w.f64(set.d());

    let classes = set.classes();
    w.u64(classes.len() as u64);
    for class in classes {
        w.i64(class.rep[0]);
        w.i64(class.rep[1]);
        w.i64(class.rep[2]);
        w.f64(class.loss);
        w.f64(class.factor);
    }
    for class in classes {
        w.u64(class.entries.len() as u64);
        for (off, v) in &class.entries {
            w.i64(off[0]);
            w.i64(off[1]);
            w.i64(off[2]);
            w.f64(*v);
        }
    }
    let h = fnv1a64(&w.buf);
    w.u64(h);
    w.buf
}

/// Write a coefficient cache file.
pub fn save_coefficients(set: &CoefficientSet, path: &Path) -> Result<(), CacheError> {
    let bytes = to_bytes(set);
    let mut f = std::fs::File::create(path).map_err(|e| CacheError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(&bytes).map_err(|e| CacheError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Read and verify a coefficient cache file; the lattice is rebuilt from the
/// stored metadata and cross-checked against the stored centers.
pub fn load_coefficients(path: &Path) -> Result<CoefficientSet, CacheError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CacheError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    from_bytes(&bytes)
}

/// Deserialize a coefficient set from bytes, verifying the content hash.
pub fn from_bytes(bytes: &[u8]) -> Result<CoefficientSet, CacheError> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CacheError::Truncated("file shorter than header".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CacheError::BadMagic);
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(CacheError::HashMismatch { stored, computed });
    }

    let mut r = Reader::new(body);
    r.take(MAGIC.len(), "magic")?;
    let ell = r.f64("ell")?;
    let active_radius = r.f64("active_radius")?;
    let kernel_id = r.str("kernel id")?;
    let cell_order = r.u64("cell order")? as usize;
    let loss_order = r.u64("loss order")? as usize;
    let gain_order = r.u64("gain order")? as usize;
    let sphere_s = r.u64("sphere s order")? as usize;
    let sphere_theta = r.u64("sphere theta order")? as usize;
    let corrected = r.u8("correction flag")? != 0;
    let drop_tolerance = r.f64("drop tolerance")?;
    let leak_budget = r.f64("leak budget")?;

    let m = r.u64("cell count")? as usize;
    let lattice = VelocityLattice::build(ell, active_radius)?;
    if lattice.len() != m {
        return Err(CacheError::Truncated(format!(
            "stored cell count {m} disagrees with rebuilt lattice ({})",
            lattice.len()
        )));
    }
    for cell in lattice.cells() {
        let want = cell.center(ell);
        for (axis, wv) in want.iter().enumerate() {
            let got = r.f64("cell center")?;
            if got.to_bits() != wv.to_bits() {
                return Err(CacheError::Truncated(format!(
                    "stored center {got} does not match lattice center {wv} (axis {axis})"
                )));
            }
        }
    }
    let volume = r.f64("volume")?;
    if (volume - 0.5 * ell.powi(3)).abs() > 1e-12 * volume.abs().max(1.0) {
        return Err(CacheError::Truncated(format!(
            "stored volume {volume} inconsistent with cell width {ell}"
        )));
    }
    let d = r.f64("d scalar")?;

    let n_classes = r.u64("class count")? as usize;
    if n_classes > 1 << 32 {
        return Err(CacheError::Truncated("class count implausible".into()));
    }
    let mut classes: Vec<OffsetClass> = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let rep = [r.i64("rep")?, r.i64("rep")?, r.i64("rep")?];
        let loss = r.f64("class loss")?;
        let factor = r.f64("class factor")?;
        classes.push(OffsetClass {
            rep,
            loss,
            factor,
            entries: Vec::new(),
        });
    }
    for class in classes.iter_mut() {
        let n = r.u64("entry count")? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let off = [r.i64("offset")?, r.i64("offset")?, r.i64("offset")?];
            let v = r.f64("gain value")?;
            entries.push((off, v));
        }
        class.entries = entries;
    }
    if r.pos != body.len() {
        return Err(CacheError::Truncated(format!(
            "{} trailing bytes after gain block",
            body.len() - r.pos
        )));
    }

    let meta = CoefficientMeta {
        ell,
        active_radius,
        kernel_id,
        params: BuildParams {
            cell_order,
            loss_order,
            gain_order,
            sphere_s,
            sphere_theta,
            drop_tolerance,
            leak_budget,
        },
        corrected,
    };
    Ok(CoefficientSet::from_parts(lattice, meta, d, classes))
}

/// Reject a loaded set whose build metadata disagrees with the expectation.
pub fn verify_meta(set: &CoefficientSet, expected: &CoefficientMeta) -> Result<(), CacheError> {
    let got = set.meta();
    if got.ell != expected.ell || got.active_radius != expected.active_radius {
        return Err(CacheError::MetaMismatch(format!(
            "lattice (ell={}, R={}) vs requested (ell={}, R={})",
            got.ell, got.active_radius, expected.ell, expected.active_radius
        )));
    }
    if got.kernel_id != expected.kernel_id {
        return Err(CacheError::MetaMismatch(format!(
            "kernel '{}' vs requested '{}'",
            got.kernel_id, expected.kernel_id
        )));
    }
    if got.params != expected.params {
        return Err(CacheError::MetaMismatch(
            "quadrature orders or tolerances differ".into(),
        ));
    }
    Ok(())
}

/// Content hash of a set's canonical byte representation.
pub fn content_hash(set: &CoefficientSet) -> u64 {
    let bytes = to_bytes(set);
    u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{build_coefficients, BuildParams};
    use crate::kernel::KernelModel;

    fn small_set() -> CoefficientSet {
        let lat = VelocityLattice::build(1.0, 1.0).unwrap();
        let kernel = KernelModel::hard_sphere(1.0).unwrap();
        let params = BuildParams {
            cell_order: 3,
            loss_order: 3,
            gain_order: 2,
            sphere_s: 8,
            sphere_theta: 8,
            ..BuildParams::default()
        };
        build_coefficients(&lat, &kernel, &params)
            .unwrap()
            .enforce_conservation()
    }

    #[test]
    fn fnv_vector() {
        // standard FNV-1a test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn round_trip_bit_identical() {
        let set = small_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("coeffs.octb");
        save_coefficients(&set, &path).unwrap();
        let loaded = load_coefficients(&path).unwrap();
        assert_eq!(to_bytes(&set), to_bytes(&loaded));
        assert_eq!(content_hash(&set), content_hash(&loaded));
        // numeric payloads compare bit-identical
        for (a, b) in set.classes().iter().zip(loaded.classes()) {
            assert_eq!(a.rep, b.rep);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.factor.to_bits(), b.factor.to_bits());
            assert_eq!(a.entries.len(), b.entries.len());
            for ((o1, v1), (o2, v2)) in a.entries.iter().zip(&b.entries) {
                assert_eq!(o1, o2);
                assert_eq!(v1.to_bits(), v2.to_bits());
            }
        }
    }

    #[test]
    fn corrupted_byte_fails_hash() {
        let set = small_set();
        let mut bytes = to_bytes(&set);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match from_bytes(&bytes) {
            Err(CacheError::HashMismatch { .. }) => {}
            other => panic!("expected hash mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_detected() {
        let set = small_set();
        let bytes = to_bytes(&set);
        let cut = &bytes[..bytes.len() - 16];
        assert!(matches!(
            from_bytes(cut),
            Err(CacheError::HashMismatch { .. }) | Err(CacheError::Truncated(_))
        ));
        assert!(matches!(
            from_bytes(&bytes[..4]),
            Err(CacheError::Truncated(_)) | Err(CacheError::BadMagic)
        ));
    }

    #[test]
    fn bad_magic_detected() {
        let set = small_set();
        let mut bytes = to_bytes(&set);
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(CacheError::BadMagic)));
    }

    #[test]
    fn meta_mismatch_detected() {
        let set = small_set();
        let mut expected = set.meta().clone();
        expected.ell = 2.0;
        assert!(matches!(
            verify_meta(&set, &expected),
            Err(CacheError::MetaMismatch(_))
        ));
        let mut expected = set.meta().clone();
        expected.kernel_id = "vhs(other)".into();
        assert!(matches!(
            verify_meta(&set, &expected),
            Err(CacheError::MetaMismatch(_))
        ));
        assert!(verify_meta(&set, set.meta()).is_ok());
    }

    #[test]
    fn rebuild_gives_identical_hash() {
        let a = small_set();
        let b = small_set();
        assert_eq!(content_hash(&a), content_hash(&b));
    }
}
