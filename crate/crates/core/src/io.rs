//! Binary columnar persistence for path ensembles and solutions.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "BFNET1"            6 bytes
//! d                   u32
//! n_paths             u64
//! knot count K        u64
//! seed                u64
//! content flags       u32   (1 = X, 2 = ΔW, 4 = ∇X, 8 = Y, 16 = Z, 32 = marks)
//! breakpoint count B  u32, then B × u64 knot indices
//! knot times          K × f64
//! X                   K × n_paths × d          (knot-major)
//! ΔW                  (K-1) × n_paths × d      (interval-major)
//! ∇X                  K × n_paths × d × d
//! Y                   K × n_paths
//! Z                   (K-1) × n_paths × d
//! marks               L × n_paths              (observation-major)
//! ```
//!
//! Sections appear in this order when their flag is set. Solutions carry a
//! JSON sidecar (`<file>.json`) with scheme, regression, observation knots
//! and diagnostics. Marks are the composite terminal parts `g_l(X_{r_l})`
//! that the solver used as regression features.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bsde::{BsdeSolution, Scheme, StepDiagnostics};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, PathEnsemble};
use crate::regression::RegressionConfig;
use crate::timenets::TimeNet;

const MAGIC: &[u8; 6] = b"BFNET1";

pub const HAS_X: u32 = 1;
pub const HAS_DW: u32 = 2;
pub const HAS_FLOW: u32 = 4;
pub const HAS_Y: u32 = 8;
pub const HAS_Z: u32 = 16;
pub const HAS_MARKS: u32 = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub dim: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub flags: u32,
    pub grid: TimeNet,
}

fn write_header(w: &mut impl Write, h: &Header) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(h.dim as u32).to_le_bytes())?;
    w.write_all(&(h.n_paths as u64).to_le_bytes())?;
    w.write_all(&(h.grid.len() as u64).to_le_bytes())?;
    w.write_all(&h.seed.to_le_bytes())?;
    w.write_all(&h.flags.to_le_bytes())?;
    let bps = h.grid.breakpoint_indices();
    w.write_all(&(bps.len() as u32).to_le_bytes())?;
    for &b in bps {
        w.write_all(&(b as u64).to_le_bytes())?;
    }
    write_f64s(w, h.grid.knots())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let magic: [u8; 6] = read_array(r)?;
    if &magic != MAGIC {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "not a BFNET1 file",
        )));
    }
    let dim = read_u32(r)? as usize;
    let n_paths = read_u64(r)? as usize;
    let n_knots = read_u64(r)? as usize;
    let seed = read_u64(r)?;
    let flags = read_u32(r)?;
    let n_bps = read_u32(r)? as usize;
    let bp_idx = (0..n_bps).map(|_| read_u64(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let knots = read_f64s(r, n_knots)?;
    let mut breakpoints = vec![0.0];
    for &i in &bp_idx {
        breakpoints.push(*knots.get(i).ok_or_else(|| corrupt("breakpoint index out of range"))?);
    }
    let grid = TimeNet::from_knots(knots, &breakpoints)?;
    Ok(Header {
        dim,
        n_paths,
        seed,
        flags,
        grid,
    })
}

fn corrupt(msg: &str) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string()))
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Reorders a path-major buffer of `width` entries per (path, slot) to slot-major.
fn slot_major(src: &[f64], n_paths: usize, slots: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for p in 0..n_paths {
        for s in 0..slots {
            let from = (p * slots + s) * width;
            let to = (s * n_paths + p) * width;
            out[to..to + width].copy_from_slice(&src[from..from + width]);
        }
    }
    out
}

fn path_major(src: &[f64], n_paths: usize, slots: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for s in 0..slots {
        for p in 0..n_paths {
            let from = (s * n_paths + p) * width;
            let to = (p * slots + s) * width;
            out[to..to + width].copy_from_slice(&src[from..from + width]);
        }
    }
    out
}

pub fn write_ensemble(path: impl AsRef<Path>, ens: &PathEnsemble) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = ens.dim();
    let m = ens.n_paths();
    let k = ens.grid().len();
    let flags = HAS_X | HAS_DW | if ens.has_flow() { HAS_FLOW } else { 0 };
    write_header(
        &mut w,
        &Header {
            dim: d,
            n_paths: m,
            seed: ens.master_seed(),
            flags,
            grid: ens.grid().clone(),
        },
    )?;
    write_f64s(&mut w, &slot_major(ens.raw_states(), m, k, d))?;
    write_f64s(&mut w, &slot_major(ens.raw_increments(), m, k - 1, d))?;
    if let Some(f) = ens.raw_flow() {
        write_f64s(&mut w, &slot_major(f, m, k, d * d))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an ensemble; the model is not stored and must be supplied.
pub fn read_ensemble(path: impl AsRef<Path>, model: &ForwardModel) -> Result<PathEnsemble> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.dim != model.dim() {
        return Err(Error::Argument(format!(
            "file has dimension {}, model has {}",
            h.dim,
            model.dim()
        )));
    }
    if h.flags & (HAS_X | HAS_DW) != HAS_X | HAS_DW {
        return Err(corrupt("file does not contain states and increments"));
    }
    let (d, m, k) = (h.dim, h.n_paths, h.grid.len());
    let states = path_major(&read_f64s(&mut r, k * m * d)?, m, k, d);
    let increments = path_major(&read_f64s(&mut r, (k - 1) * m * d)?, m, k - 1, d);
    let flow = if h.flags & HAS_FLOW != 0 {
        Some(path_major(&read_f64s(&mut r, k * m * d * d)?, m, k, d * d))
    } else {
        None
    };
    PathEnsemble::from_parts(model.clone(), h.grid, m, h.seed, states, increments, flow)
}

/// Contents of a solution's JSON sidecar.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolutionSidecar {
    pub format: String,
    pub scheme: Scheme,
    pub regression: RegressionConfig,
    pub observed: Vec<usize>,
    pub diagnostics: Vec<StepDiagnostics>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_solution(path: impl AsRef<Path>, sol: &BsdeSolution, seed: u64) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    let d = sol.dim();
    let m = sol.n_paths();
    let k = sol.grid().len();
    write_header(
        &mut w,
        &Header {
            dim: d,
            n_paths: m,
            seed,
            flags: HAS_X | HAS_Y | HAS_Z | if sol.marks().is_empty() { 0 } else { HAS_MARKS },
            grid: sol.grid().clone(),
        },
    )?;
    write_f64s(&mut w, &slot_major(sol.raw_states(), m, k, d))?;
    write_f64s(&mut w, sol.raw_y())?;
    write_f64s(&mut w, sol.raw_z())?;
    write_f64s(&mut w, sol.marks())?;
    w.flush()?;
    let side = SolutionSidecar {
        format: "BFNET1".into(),
        scheme: sol.scheme(),
        regression: *sol.regression(),
        observed: sol.observed().to_vec(),
        diagnostics: sol.diagnostics().to_vec(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(())
}

/// Reads a solution and its sidecar; returns it with the stored seed.
pub fn read_solution(path: impl AsRef<Path>) -> Result<(BsdeSolution, u64)> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.flags & !HAS_MARKS != HAS_X | HAS_Y | HAS_Z {
        return Err(corrupt("file is not a solution"));
    }
    let side: SolutionSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let (d, m, k) = (h.dim, h.n_paths, h.grid.len());
    let states = path_major(&read_f64s(&mut r, k * m * d)?, m, k, d);
    let y = read_f64s(&mut r, k * m)?;
    let z = read_f64s(&mut r, (k - 1) * m * d)?;
    let marks = if h.flags & HAS_MARKS != 0 {
        read_f64s(&mut r, side.observed.len() * m)?
    } else {
        Vec::new()
    };
    let sol = BsdeSolution::from_parts(
        h.grid,
        m,
        d,
        states,
        side.observed,
        marks,
        y,
        z,
        side.scheme,
        side.regression,
        side.diagnostics,
    )?;
    Ok((sol, h.seed))
}

/// Writes serializable rows as CSV with a header, ',' separators and LF endings.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV text of serializable rows.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{:?}", other))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{solve, Generator, TerminalCondition};
    use crate::forward::simulate;
    use crate::gaussian_oracle::TerminalFunction1D;
    use crate::timenets::{build_theta_net, SmoothnessSpec};

    fn grid() -> TimeNet {
        build_theta_net(&SmoothnessSpec::new(vec![0.0, 0.5, 1.0], vec![0.5, 1.0]).unwrap(), 3).unwrap()
    }

    #[test]
    fn ensemble_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("paths.bin");
        let model = ForwardModel::geometric(vec![0.05, 0.0], vec![0.2, 0.3], vec![1.0, 2.0]).unwrap();
        let ens = simulate(&model, &grid(), 37, 9, true).unwrap();
        write_ensemble(&f, &ens).unwrap();
        let back = read_ensemble(&f, &model).unwrap();
        assert!(ens.same_data(&back));
        assert_eq!(back.master_seed(), 9);
        assert_eq!(back.grid().breakpoint_indices(), ens.grid().breakpoint_indices());
        let bytes = std::fs::read(&f).unwrap();
        assert_eq!(&bytes[..6], b"BFNET1");
        assert!(read_ensemble(&f, &ForwardModel::brownian(1).unwrap()).is_err());
    }

    #[test]
    fn solution_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("sol.bin");
        let model = ForwardModel::brownian(1).unwrap();
        let g = grid();
        let ens = simulate(&model, &g, 256, 4, false).unwrap();
        let term = TerminalCondition::at_horizon(TerminalFunction1D::indicator(0.0), 1.0);
        let sol = solve(&model, &Generator::zero(), &term, &g, &ens, &Default::default(), Scheme::Explicit).unwrap();
        write_solution(&f, &sol, 4).unwrap();
        let (back, seed) = read_solution(&f).unwrap();
        assert_eq!(seed, 4);
        assert_eq!(back.raw_y(), sol.raw_y());
        assert_eq!(back.raw_z(), sol.raw_z());
        assert_eq!(back.diagnostics(), sol.diagnostics());
        assert!(sidecar_path(&f).exists());
    }

    #[test]
    fn composite_solution_keeps_its_marks() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("sol.bin");
        let model = ForwardModel::brownian(1).unwrap();
        let g = grid();
        let ens = simulate(&model, &g, 256, 4, false).unwrap();
        let term = TerminalCondition::composite(
            vec![0.5, 1.0],
            vec![TerminalFunction1D::indicator(0.0), TerminalFunction1D::linear()],
            crate::bsde::Combine::Max,
        )
        .unwrap();
        let sol = solve(&model, &Generator::zero(), &term, &g, &ens, &Default::default(), Scheme::Explicit).unwrap();
        assert_eq!(sol.marks().len(), 2 * 256);
        write_solution(&f, &sol, 4).unwrap();
        let (back, _) = read_solution(&f).unwrap();
        assert_eq!(back.marks(), sol.marks());
        let k = g.len() - 2;
        let target = sol.y(k + 1);
        assert_eq!(back.project(target, k).unwrap(), sol.project(target, k).unwrap());
    }

    #[test]
    fn bad_magic_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x.bin");
        std::fs::write(&f, b"NOTBFNET").unwrap();
        let e = read_ensemble(&f, &ForwardModel::brownian(1).unwrap()).unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn csv_layout() {
        #[derive(Serialize)]
        struct Row {
            n: usize,
            value: f64,
        }
        let s = csv_string(&[Row { n: 4, value: 0.5 }, Row { n: 8, value: 0.25 }]).unwrap();
        assert_eq!(s, "n,value\n4,0.5\n8,0.25\n");
    }
}
