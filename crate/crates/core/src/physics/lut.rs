//! Profile lookup table and its on-disk container.
//!
//! Binary layout (all multi-byte fields little-endian):
//!
//! ```text
//! magic      8 bytes  "CAVLUT\x00\x01"
//! version    u32      format version (1)
//! microscope 7 x f64  voltage V, wavelength m, wavevector 1/m,
//!                     phase rad/m, absorption 1/m, thickness m, depth m
//! n_radii    u32      then n_radii x f64 radii (nm, ascending)
//! n_defoci   u32      then n_defoci x f64 defoci (um, ascending)
//! n_entries  u32      n_radii * n_defoci records, radius-major:
//!   radius_nm f64, defocus_um f64, beta f64, rho_max f64,
//!   n_samples u32, n_quadrature_nodes u32,
//!   n_samples x (re f64, im f64)
//! ```
//!
//! Round-trips are bit-exact; intensity is rederived as |psi|^2 on load,
//! which reproduces the original samples exactly (same expression).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use super::{ContrastProfile, GridSpec, MicroscopeParams, PhysicsError, SimulationRequest};

pub const LUT_FORMAT_VERSION: u32 = 1;
const MAGIC: [u8; 8] = *b"CAVLUT\x00\x01";

/// Immutable store of simulated profiles on a (radius, defocus) grid.
///
/// Lookups quantize to the nearest grid key per axis (equivalently,
/// nearest in normalized grid coordinates on a product grid), with ties
/// resolved toward the smaller key. Safe to share across threads once
/// built.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileLut {
    grid: GridSpec,
    params: MicroscopeParams,
    version: u32,
    /// Radius-major: entry (ri, zi) at ri * n_defoci + zi.
    entries: Vec<ContrastProfile>,
}

impl ProfileLut {
    pub(super) fn from_parts(
        grid: GridSpec,
        params: MicroscopeParams,
        entries: Vec<ContrastProfile>,
    ) -> Self {
        debug_assert_eq!(entries.len(), grid.radii_nm.len() * grid.defoci_um.len());
        Self {
            grid,
            params,
            version: LUT_FORMAT_VERSION,
            entries,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn params(&self) -> &MicroscopeParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ContrastProfile> {
        self.entries.iter()
    }

    /// Nearest grid key for (radius, defocus); ties toward the smaller key.
    pub fn quantize(&self, radius_nm: f64, defocus_um: f64) -> Result<(f64, f64), PhysicsError> {
        if self.entries.is_empty() {
            return Err(PhysicsError::EmptyLut);
        }
        let ri = nearest_index(&self.grid.radii_nm, radius_nm);
        let zi = nearest_index(&self.grid.defoci_um, defocus_um);
        Ok((self.grid.radii_nm[ri], self.grid.defoci_um[zi]))
    }

    /// Profile at the nearest grid key.
    pub fn lookup(&self, radius_nm: f64, defocus_um: f64) -> Result<&ContrastProfile, PhysicsError> {
        if self.entries.is_empty() {
            return Err(PhysicsError::EmptyLut);
        }
        let ri = nearest_index(&self.grid.radii_nm, radius_nm);
        let zi = nearest_index(&self.grid.defoci_um, defocus_um);
        Ok(&self.entries[ri * self.grid.defoci_um.len() + zi])
    }
}

/// Index of the grid value nearest to `v`; exact midpoints resolve to the
/// smaller value.
fn nearest_index(grid: &[f64], v: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &g) in grid.iter().enumerate() {
        let d = (g - v).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_lut(lut: &ProfileLut, path: &Path) -> Result<(), PhysicsError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    write_u32(&mut w, lut.version)?;
    let p = &lut.params;
    for v in [
        p.accelerating_voltage,
        p.wavelength,
        p.wavevector_k,
        p.mean_inner_potential_phase,
        p.absorption_coefficient,
        p.foil_thickness,
        p.cavity_depth,
    ] {
        write_f64(&mut w, v)?;
    }
    write_u32(&mut w, lut.grid.radii_nm.len() as u32)?;
    for &r in &lut.grid.radii_nm {
        write_f64(&mut w, r)?;
    }
    write_u32(&mut w, lut.grid.defoci_um.len() as u32)?;
    for &z in &lut.grid.defoci_um {
        write_f64(&mut w, z)?;
    }
    write_u32(&mut w, lut.entries.len() as u32)?;
    for e in &lut.entries {
        write_f64(&mut w, e.request.cavity_radius_nm)?;
        write_f64(&mut w, e.request.defocus_um)?;
        write_f64(&mut w, e.beta)?;
        write_f64(&mut w, e.rho_max)?;
        write_u32(&mut w, e.psi.len() as u32)?;
        write_u32(&mut w, e.request.n_quadrature_nodes as u32)?;
        for c in &e.psi {
            write_f64(&mut w, c.re)?;
            write_f64(&mut w, c.im)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_lut(path: &Path) -> Result<ProfileLut, PhysicsError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(PhysicsError::LutFormat("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != LUT_FORMAT_VERSION {
        return Err(PhysicsError::LutFormat(format!(
            "unsupported version {version}, expected {LUT_FORMAT_VERSION}"
        )));
    }
    let voltage = read_f64(&mut r)?;
    let wavelength = read_f64(&mut r)?;
    let wavevector = read_f64(&mut r)?;
    let phase = read_f64(&mut r)?;
    let absorption = read_f64(&mut r)?;
    let thickness = read_f64(&mut r)?;
    let depth = read_f64(&mut r)?;
    let params = MicroscopeParams {
        accelerating_voltage: voltage,
        wavelength,
        wavevector_k: wavevector,
        mean_inner_potential_phase: phase,
        absorption_coefficient: absorption,
        foil_thickness: thickness,
        cavity_depth: depth,
    };

    let n_radii = read_u32(&mut r)? as usize;
    let mut radii = Vec::with_capacity(n_radii);
    for _ in 0..n_radii {
        radii.push(read_f64(&mut r)?);
    }
    let n_defoci = read_u32(&mut r)? as usize;
    let mut defoci = Vec::with_capacity(n_defoci);
    for _ in 0..n_defoci {
        defoci.push(read_f64(&mut r)?);
    }
    let n_entries = read_u32(&mut r)? as usize;
    if n_entries != n_radii * n_defoci {
        return Err(PhysicsError::LutFormat(format!(
            "entry count {n_entries} does not match grid {n_radii} x {n_defoci}"
        )));
    }
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let radius_nm = read_f64(&mut r)?;
        let defocus_um = read_f64(&mut r)?;
        let beta = read_f64(&mut r)?;
        let rho_max = read_f64(&mut r)?;
        let n_samples = read_u32(&mut r)? as usize;
        let n_nodes = read_u32(&mut r)? as usize;
        let mut psi = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let re = read_f64(&mut r)?;
            let im = read_f64(&mut r)?;
            psi.push(Complex64::new(re, im));
        }
        let intensity = psi.iter().map(|c: &Complex64| c.norm_sqr()).collect();
        entries.push(ContrastProfile {
            request: SimulationRequest {
                cavity_radius_nm: radius_nm,
                defocus_um,
                params,
                n_radial_samples: n_samples,
                n_quadrature_nodes: n_nodes,
                rho_max,
            },
            beta,
            psi,
            intensity,
            rho_max,
        });
    }
    Ok(ProfileLut {
        grid: GridSpec {
            radii_nm: radii,
            defoci_um: defoci,
        },
        params,
        version,
        entries,
    })
}
