//! On-disk formats: the binary state snapshot and the CSV time series.
//!
//! The snapshot is little-endian throughout: an 8-byte magic "BFSISNAP",
//! version u16, the three resolutions as u32, L and t as f64, a field count,
//! then per field a u16 name length, the name bytes, one region tag byte, and
//! the row-major f64 payload (x fastest). Region tags: 0 whole strip, 1 fluid
//! rows, 2 the two wall blocks stacked bottom then top. Reads are checked at
//! every boundary, so truncated or foreign files fail cleanly.

use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::diagnostics::{EnergyReport, RegularityReport, StabilityReport};
use crate::fields::State;
use crate::geometry::{build_grid, DomainSpec, Grid};

const MAGIC: &[u8; 8] = b"BFSISNAP";
const VERSION: u16 = 1;

const TAG_WHOLE: u8 = 0;
const TAG_FLUID: u8 = 1;
const TAG_SOLID: u8 = 2;

/// The six stored fields, in write order.
const FIELDS: [(&str, u8); 6] = [
    ("v_x", TAG_WHOLE),
    ("v_y", TAG_WHOLE),
    ("d", TAG_WHOLE),
    ("w_x", TAG_SOLID),
    ("w_y", TAG_SOLID),
    ("p", TAG_FLUID),
];

#[derive(Debug)]
pub enum SnapshotError {
    Io(io::Error),
    /// Wrong magic, wrong version, bad tag, or an inconsistent directory.
    Format(String),
}

impl std::fmt::Display for SnapshotError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SnapshotError::Io(e) => write!(f, "snapshot i/o: {e}"),
            SnapshotError::Format(m) => write!(f, "snapshot format: {m}"),
        }
    }
}

impl std::error::Error for SnapshotError {}

impl From<io::Error> for SnapshotError {
    fn from(e: io::Error) -> Self {
        SnapshotError::Io(e)
    }
}

fn format_err<T>(msg: impl Into<String>) -> Result<T, SnapshotError> {
    Err(SnapshotError::Format(msg.into()))
}

/// Rows a region tag stores, in storage order.
fn region_rows(grid: &Grid, tag: u8) -> Result<Vec<usize>, SnapshotError> {
    let [gl, gu] = grid.gamma_rows;
    match tag {
        TAG_WHOLE => Ok((0..grid.whole_rows()).collect()),
        TAG_FLUID => Ok((gl..=gu).collect()),
        TAG_SOLID => Ok((0..=gl).chain(gu..grid.whole_rows()).collect()),
        other => format_err(format!("unknown region tag {other}")),
    }
}

fn write_field(
    out: &mut impl Write,
    name: &str,
    tag: u8,
    data: &Array2<f64>,
    grid: &Grid,
) -> Result<(), SnapshotError> {
    out.write_all(&(name.len() as u16).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[tag])?;
    for r in region_rows(grid, tag)? {
        for i in 0..grid.spec.nx {
            out.write_all(&data[[r, i]].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_snapshot(state: &State, grid: &Grid, path: &Path) -> Result<(), SnapshotError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(grid.spec.nx as u32).to_le_bytes())?;
    out.write_all(&(grid.spec.ny_f as u32).to_le_bytes())?;
    out.write_all(&(grid.spec.ny_s as u32).to_le_bytes())?;
    out.write_all(&grid.spec.l.to_le_bytes())?;
    out.write_all(&state.time.to_le_bytes())?;
    out.write_all(&(FIELDS.len() as u32).to_le_bytes())?;
    for (name, tag) in FIELDS {
        let data = match name {
            "v_x" => &state.v.x.data,
            "v_y" => &state.v.y.data,
            "d" => &state.d.data,
            "w_x" => &state.w.x.data,
            "w_y" => &state.w.y.data,
            "p" => &state.p.data,
            _ => unreachable!(),
        };
        write_field(&mut out, name, tag, data, grid)?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact_n(r: &mut impl Read, n: usize) -> Result<Vec<u8>, SnapshotError> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u16(r: &mut impl Read) -> Result<u16, SnapshotError> {
    let b = read_exact_n(r, 2)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(r: &mut impl Read) -> Result<u32, SnapshotError> {
    let b = read_exact_n(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_f64(r: &mut impl Read) -> Result<f64, SnapshotError> {
    let b = read_exact_n(r, 8)?;
    Ok(f64::from_le_bytes(b.try_into().unwrap()))
}

pub struct Snapshot {
    pub domain: DomainSpec,
    pub state: State,
}

/// Read a snapshot back; the grid is rebuilt from the stored resolutions and
/// every byte is accounted for.
pub fn read_snapshot(path: &Path) -> Result<Snapshot, SnapshotError> {
    let mut input = BufReader::new(File::open(path)?);
    let magic = read_exact_n(&mut input, 8)?;
    if magic != MAGIC {
        return format_err("bad magic; not a snapshot file");
    }
    let version = read_u16(&mut input)?;
    if version != VERSION {
        return format_err(format!("unsupported version {version}"));
    }
    let nx = read_u32(&mut input)? as usize;
    let ny_f = read_u32(&mut input)? as usize;
    let ny_s = read_u32(&mut input)? as usize;
    let l = read_f64(&mut input)?;
    let t = read_f64(&mut input)?;
    let spec = DomainSpec { l, nx, ny_f, ny_s };
    let grid = build_grid(spec)
        .map_err(|e| SnapshotError::Format(format!("stored resolutions: {e}")))?;
    let field_count = read_u32(&mut input)? as usize;
    if field_count != FIELDS.len() {
        return format_err(format!(
            "expected {} fields, file declares {field_count}",
            FIELDS.len()
        ));
    }

    let mut state = State::zeros(&grid);
    state.time = t;
    for (expect_name, expect_tag) in FIELDS {
        let name_len = read_u16(&mut input)? as usize;
        if name_len > 64 {
            return format_err(format!("implausible field name length {name_len}"));
        }
        let name_bytes = read_exact_n(&mut input, name_len)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| SnapshotError::Format("field name is not UTF-8".into()))?;
        if name != expect_name {
            return format_err(format!("expected field {expect_name:?}, found {name:?}"));
        }
        let tag = read_exact_n(&mut input, 1)?[0];
        if tag != expect_tag {
            return format_err(format!("field {name:?} has region tag {tag}"));
        }
        let data = match name.as_str() {
            "v_x" => &mut state.v.x.data,
            "v_y" => &mut state.v.y.data,
            "d" => &mut state.d.data,
            "w_x" => &mut state.w.x.data,
            "w_y" => &mut state.w.y.data,
            "p" => &mut state.p.data,
            _ => unreachable!(),
        };
        for r in region_rows(&grid, tag)? {
            for i in 0..nx {
                data[[r, i]] = read_f64(&mut input)?;
            }
        }
    }
    let mut trailer = [0u8; 1];
    match input.read(&mut trailer)? {
        0 => Ok(Snapshot { domain: spec, state }),
        _ => format_err("trailing bytes after the last field"),
    }
}

/// One CSV row type with its fixed header. Floats print in Rust's shortest
/// exact form, so a reread recovers every bit.
pub trait CsvRow {
    const HEADER: &'static str;
    fn row(&self) -> String;
}

impl CsvRow for EnergyReport {
    const HEADER: &'static str =
        "t,kinetic_thermal,elastic,dissipation_rate,source_rate,gronwall_bound";
    fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.t,
            self.kinetic_thermal,
            self.elastic,
            self.dissipation_rate,
            self.source_rate,
            self.gronwall_bound
        )
    }
}

impl CsvRow for StabilityReport {
    const HEADER: &'static str = "t,chi_norm,psi_norm,f_seminorm,m_t,gronwall_envelope";
    fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.t, self.chi_norm, self.psi_norm, self.f_seminorm, self.m_t, self.gronwall_envelope
        )
    }
}

impl CsvRow for RegularityReport {
    const HEADER: &'static str =
        "t,vt_l2,dt_l2,grad_v_solid,dh_v_l2,dh_d_l2,h2_proxy_fluid,pressure_h1";
    fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.t,
            self.vt_l2,
            self.dt_l2,
            self.grad_v_solid,
            self.dh_v_l2,
            self.dh_d_l2,
            self.h2_proxy_fluid,
            self.pressure_h1
        )
    }
}

/// Append one row, writing the header only when the file is empty or new.
pub fn write_timeseries_row<T: CsvRow>(report: &T, path: &Path) -> io::Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if file.metadata()?.len() == 0 {
        writeln!(file, "{}", T::HEADER)?;
    }
    writeln!(file, "{}", report.row())
}
