//! Versioned binary cache for assembled collision matrices and transport
//! moments, so parameter sweeps never re-integrate the collision kernel.
//!
//! The file layout is a fixed header (format version, grid size, assembly
//! scheme, auxiliary-quadrature parameters, tolerances) followed by
//! length-prefixed row-major `f64` blocks and a trailing FNV-1a checksum.
//! The cache key — and hence the file name — hashes every parameter that
//! influences the assembled numbers, so stale files are never read back.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::collision::{
    assemble_collision, build_quadrature, transport_coefficients, CollisionMatrices, MacroMoments,
    Scheme, AUX_AZIMUTH_COUNT, AUX_POLAR_COUNT, AUX_RADIAL_COUNT, AUX_RADIAL_CUTOFF,
    NULLSPACE_TOL, SOLVE_TOL,
};
use crate::{Error, Result};

/// Bumped whenever the file layout or the assembly algorithm changes.
const FORMAT_VERSION: u64 = 1;

const MAGIC: &[u8; 8] = b"VMBCACHE";

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn scheme_code(s: Scheme) -> u64 {
    match s {
        Scheme::TensorHermite => 0,
        Scheme::SymmetryReduced => 1,
    }
}

fn scheme_from_code(c: u64) -> Result<Scheme> {
    match c {
        0 => Ok(Scheme::TensorHermite),
        1 => Ok(Scheme::SymmetryReduced),
        other => Err(Error::Cache(format!("unknown scheme code {other}"))),
    }
}

/// File name for the cache entry keyed by `(N, scheme, tolerances)` plus the
/// auxiliary-quadrature parameters; the short hash pins every number that
/// affects the stored matrices.
pub fn cache_file_name(n: usize, scheme: Scheme) -> String {
    let mut key = Vec::new();
    push_u64(&mut key, FORMAT_VERSION);
    push_u64(&mut key, n as u64);
    push_u64(&mut key, scheme_code(scheme));
    push_u64(&mut key, AUX_RADIAL_COUNT as u64);
    push_u64(&mut key, AUX_POLAR_COUNT as u64);
    push_u64(&mut key, AUX_AZIMUTH_COUNT as u64);
    push_f64(&mut key, AUX_RADIAL_CUTOFF);
    push_f64(&mut key, NULLSPACE_TOL);
    push_f64(&mut key, SOLVE_TOL);
    format!(
        "collision_n{:02}_{}_{:016x}.bin",
        n,
        scheme.as_str(),
        fnv1a64(&key)
    )
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_block<'a>(buf: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>, len: usize) {
    push_u64(buf, len as u64);
    let mut count = 0usize;
    for &v in values {
        push_f64(buf, v);
        count += 1;
    }
    debug_assert_eq!(count, len, "block length mismatch");
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Cache("truncated cache file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn block(&mut self, expected: usize) -> Result<Vec<f64>> {
        let len = self.u64()? as usize;
        if len != expected {
            return Err(Error::Cache(format!(
                "block length {len} does not match expected {expected}"
            )));
        }
        let raw = self.take(8 * len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serialize assembled matrices and moments to `dir`, returning the path.
pub fn save_collision(
    dir: &Path,
    c: &CollisionMatrices,
    m: &MacroMoments,
) -> Result<PathBuf> {
    let nv = c.n_nodes();
    let n = c.quadrature.per_axis_count;
    let mut buf = Vec::with_capacity(2 * nv * nv * 8 + 16 * nv * 8 + 4096);
    buf.extend_from_slice(MAGIC);
    push_u64(&mut buf, FORMAT_VERSION);
    push_u64(&mut buf, n as u64);
    push_u64(&mut buf, scheme_code(c.quadrature.scheme));
    push_u64(&mut buf, AUX_RADIAL_COUNT as u64);
    push_u64(&mut buf, AUX_POLAR_COUNT as u64);
    push_u64(&mut buf, AUX_AZIMUTH_COUNT as u64);
    push_f64(&mut buf, AUX_RADIAL_CUTOFF);
    push_f64(&mut buf, NULLSPACE_TOL);
    push_f64(&mut buf, SOLVE_TOL);
    push_u64(&mut buf, nv as u64);
    push_block(&mut buf, c.quadrature.nodes.iter(), 3 * nv);
    push_block(&mut buf, c.quadrature.weights.iter(), nv);
    push_block(&mut buf, c.nu_diag.iter(), nv);
    push_block(&mut buf, c.k_mat.iter(), nv * nv);
    push_block(&mut buf, c.l_mat.iter(), nv * nv);
    push_block(&mut buf, c.chi_basis.iter(), 5 * nv);
    let scalars = [
        c.gap_mu,
        c.max_complement_eigenvalue,
        c.pre_deflation_residuals[0],
        c.pre_deflation_residuals[1],
        c.pre_deflation_residuals[2],
        c.pre_deflation_residuals[3],
        c.pre_deflation_residuals[4],
        c.pre_deflation_residual,
        c.nu0,
        c.nu1,
        m.m11,
        m.m22,
        m.m33,
        m.m44,
        m.m14,
        m.m41,
    ];
    push_block(&mut buf, scalars.iter(), scalars.len());
    let checksum = fnv1a64(&buf);
    push_u64(&mut buf, checksum);

    std::fs::create_dir_all(dir)?;
    let path = dir.join(cache_file_name(n, c.quadrature.scheme));
    // Write to a sibling temp file first so concurrent readers never see a
    // partially written entry.
    let tmp = path.with_extension("bin.tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&buf)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Load a cache entry if present. Returns `Ok(None)` when no file exists for
/// the key; corrupt or mismatched files are hard errors.
pub fn load_collision(
    dir: &Path,
    n: usize,
    scheme: Scheme,
) -> Result<Option<(CollisionMatrices, MacroMoments)>> {
    let path = dir.join(cache_file_name(n, scheme));
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Cache(format!("{}: file too short", path.display())));
    }
    let (head, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a64(head);
    if stored != actual {
        return Err(Error::Cache(format!(
            "{}: checksum mismatch (stored {stored:016x}, computed {actual:016x})",
            path.display()
        )));
    }
    let mut cur = Cursor::new(head);
    if cur.take(8)? != MAGIC {
        return Err(Error::Cache(format!("{}: bad magic", path.display())));
    }
    let version = cur.u64()?;
    if version != FORMAT_VERSION {
        return Err(Error::Cache(format!(
            "{}: format version {version} (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    let n_stored = cur.u64()? as usize;
    let scheme_stored = scheme_from_code(cur.u64()?)?;
    let nr = cur.u64()? as usize;
    let nth = cur.u64()? as usize;
    let nph = cur.u64()? as usize;
    let rcut = cur.f64()?;
    let nstol = cur.f64()?;
    let svtol = cur.f64()?;
    if n_stored != n
        || scheme_stored != scheme
        || nr != AUX_RADIAL_COUNT
        || nth != AUX_POLAR_COUNT
        || nph != AUX_AZIMUTH_COUNT
        || rcut != AUX_RADIAL_CUTOFF
        || nstol != NULLSPACE_TOL
        || svtol != SOLVE_TOL
    {
        return Err(Error::Cache(format!(
            "{}: header parameters do not match the requested key",
            path.display()
        )));
    }
    let nv = cur.u64()? as usize;
    if nv != n * n * n {
        return Err(Error::Cache(format!(
            "{}: node count {nv} inconsistent with N = {n}",
            path.display()
        )));
    }
    let nodes = cur.block(3 * nv)?;
    let weights = cur.block(nv)?;
    let nu = cur.block(nv)?;
    let k = cur.block(nv * nv)?;
    let l = cur.block(nv * nv)?;
    let chi = cur.block(5 * nv)?;
    let scalars = cur.block(16)?;

    // Rebuild the quadrature from code (deterministic) and insist it matches
    // the stored grid bitwise; catches silent changes in the node generator.
    let quadrature = build_quadrature(n, scheme)?;
    let nodes_arr = Array2::from_shape_vec((nv, 3), nodes)
        .map_err(|e| Error::Cache(format!("node block shape: {e}")))?;
    let weights_arr = Array1::from_vec(weights);
    if nodes_arr != quadrature.nodes || weights_arr != quadrature.weights {
        return Err(Error::Cache(format!(
            "{}: stored grid differs from the generator output; \
             rebuild the cache",
            path.display()
        )));
    }

    let k_mat = Array2::from_shape_vec((nv, nv), k)
        .map_err(|e| Error::Cache(format!("kernel block shape: {e}")))?;
    let l_mat = Array2::from_shape_vec((nv, nv), l)
        .map_err(|e| Error::Cache(format!("operator block shape: {e}")))?;
    let chi_basis = Array2::from_shape_vec((5, nv), chi)
        .map_err(|e| Error::Cache(format!("invariant block shape: {e}")))?;

    let moments = MacroMoments {
        m11: scalars[10],
        m22: scalars[11],
        m33: scalars[12],
        m44: scalars[13],
        m14: scalars[14],
        m41: scalars[15],
        kappa0: -scalars[11],
        kappa1: -scalars[13],
    };
    let c = CollisionMatrices::from_parts(
        quadrature,
        Array1::from_vec(nu),
        k_mat,
        l_mat,
        chi_basis,
        scalars[0],
        scalars[1],
        [scalars[2], scalars[3], scalars[4], scalars[5], scalars[6]],
        scalars[7],
        scalars[8],
        scalars[9],
    )?;
    Ok(Some((c, moments)))
}

/// Fetch from the cache or assemble from scratch (and populate the cache).
pub fn load_or_assemble(
    cache_dir: Option<&Path>,
    n: usize,
    scheme: Scheme,
) -> Result<(CollisionMatrices, MacroMoments)> {
    if let Some(dir) = cache_dir {
        if let Some(hit) = load_collision(dir, n, scheme)? {
            return Ok(hit);
        }
    }
    let q = build_quadrature(n, scheme)?;
    let c = assemble_collision(q)?;
    let m = transport_coefficients(&c)?;
    if let Some(dir) = cache_dir {
        save_collision(dir, &c, &m)?;
    }
    Ok((c, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_miss_tamper_and_hit() {
        let dir = std::env::temp_dir().join(format!("vmb-cache-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);

        // Miss on an empty directory.
        std::fs::create_dir_all(&dir).unwrap();
        assert!(load_collision(&dir, 8, Scheme::TensorHermite)
            .unwrap()
            .is_none());

        let (c, m) = load_or_assemble(Some(&dir), 8, Scheme::TensorHermite).unwrap();
        let path = dir.join(cache_file_name(8, Scheme::TensorHermite));
        assert!(path.exists());

        // Hit: every stored array and scalar comes back bitwise identical.
        let (c2, m2) = load_or_assemble(Some(&dir), 8, Scheme::TensorHermite).unwrap();
        assert_eq!(c.l_mat, c2.l_mat);
        assert_eq!(c.k_mat, c2.k_mat);
        assert_eq!(c.nu_diag, c2.nu_diag);
        assert_eq!(c.chi_basis, c2.chi_basis);
        assert_eq!(c.gap_mu, c2.gap_mu);
        assert_eq!(c.pre_deflation_residual, c2.pre_deflation_residual);
        assert_eq!(m.m22, m2.m22);
        assert_eq!(m.kappa1, m2.kappa1);

        // The loaded solver must behave identically to the fresh one.
        let g = c.v_times(0, c.chi(2));
        let a = c.solve_linv_p1(g.view()).unwrap();
        let b = c2.solve_linv_p1(g.view()).unwrap();
        let diff = (&a - &b).iter().fold(0.0_f64, |mx, v| mx.max(v.abs()));
        assert!(diff < 1e-12);

        // Different key → separate file name, not a false hit.
        assert!(load_collision(&dir, 8, Scheme::SymmetryReduced)
            .unwrap()
            .is_none());

        // Tampering breaks the checksum loudly.
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_collision(&dir, 8, Scheme::TensorHermite);
        assert!(err.is_err(), "tampered file must not load");

        let _ = std::fs::remove_dir_all(&dir);
    }
}
