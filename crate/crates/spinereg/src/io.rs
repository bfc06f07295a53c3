//! File I/O: NIfTI-1 single-file uncompressed `.nii` and a raw+JSON-sidecar
//! fallback, for scalar volumes, label volumes, and displacement fields.
//!
//! NIfTI support is deliberately narrow: 348-byte header, magic `n+1`,
//! `vox_offset = 352`, datatypes uint8 (2), int16 (4) and float32 (16).
//! qform/sform translations are honored for the origin when present,
//! otherwise spacing comes from `pixdim`. The writer always emits float32
//! for scalar volumes and uint8 for label volumes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};

use crate::field::DisplacementField;
use crate::grid::{Grid, LabelVolume, Volume};
use crate::{Error, Result};

const HDR_SIZE: usize = 348;
const VOX_OFFSET: f32 = 352.0;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Result of loading a file whose kind is determined by its datatype:
/// uint8 loads as labels, int16/float32 as scalar data.
#[derive(Debug, Clone)]
pub enum LoadedVolume {
    Scalar(Volume),
    Labels(LabelVolume),
}

impl LoadedVolume {
    pub fn grid(&self) -> &Grid {
        match self {
            LoadedVolume::Scalar(v) => &v.grid,
            LoadedVolume::Labels(l) => &l.grid,
        }
    }

    pub fn into_scalar(self) -> Volume {
        match self {
            LoadedVolume::Scalar(v) => v,
            LoadedVolume::Labels(l) => {
                let data = l.data.iter().map(|&v| v as f32).collect();
                Volume {
                    grid: l.grid,
                    data,
                }
            }
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            LoadedVolume::Labels(l) => Ok(l),
            LoadedVolume::Scalar(v) => {
                let mut data = Vec::with_capacity(v.data.len());
                for &x in &v.data {
                    if x < 0.0 || x.fract() != 0.0 {
                        return Err(Error::Argument(format!(
                            "scalar volume has non-label value {x}; cannot interpret as labels"
                        )));
                    }
                    data.push(x as u32);
                }
                LabelVolume::new(v.grid, data)
            }
        }
    }
}

struct Header {
    dims: [usize; 3],
    nt: usize,
    nu: usize,
    datatype: i16,
    spacing: [f64; 3],
    origin: [f64; 3],
    vox_offset: usize,
    big_endian: bool,
}

fn parse_header(buf: &[u8; HDR_SIZE], path: &Path) -> Result<Header> {
    let sizeof_hdr_le = LittleEndian::read_i32(&buf[0..4]);
    let big_endian = match sizeof_hdr_le {
        348 => false,
        _ if BigEndian::read_i32(&buf[0..4]) == 348 => true,
        other => {
            return Err(Error::format(
                path,
                format!("sizeof_hdr is {other}, expected 348 (NIfTI-1)"),
            ))
        }
    };
    let magic = &buf[344..348];
    if &magic[0..3] != b"n+1" {
        return Err(Error::format(
            path,
            format!("magic is {:?}, expected \"n+1\" (single-file NIfTI-1)", &magic[0..3]),
        ));
    }
    let rd16 = |off: usize| -> i16 {
        if big_endian {
            BigEndian::read_i16(&buf[off..off + 2])
        } else {
            LittleEndian::read_i16(&buf[off..off + 2])
        }
    };
    let rdf32 = |off: usize| -> f32 {
        if big_endian {
            BigEndian::read_f32(&buf[off..off + 4])
        } else {
            LittleEndian::read_f32(&buf[off..off + 4])
        }
    };

    let ndim = rd16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("dim[0] = {ndim} out of range 1..=7")));
    }
    let dim: Vec<i16> = (0..8).map(|i| rd16(40 + 2 * i)).collect();
    let get_dim = |i: usize| -> usize {
        if (i as i16) <= ndim && dim[i] > 0 {
            dim[i] as usize
        } else {
            1
        }
    };
    let dims = [get_dim(1), get_dim(2), get_dim(3)];
    let nt = get_dim(4);
    let nu = get_dim(5);
    if get_dim(6) != 1 || get_dim(7) != 1 {
        return Err(Error::format(path, "dim[6]/dim[7] > 1 unsupported"));
    }

    let datatype = rd16(70);
    if ![DT_UINT8, DT_INT16, DT_FLOAT32].contains(&datatype) {
        return Err(Error::format(
            path,
            format!("datatype {datatype} unsupported (supported: 2=uint8, 4=int16, 16=float32)"),
        ));
    }

    let mut spacing = [0.0f64; 3];
    for a in 0..3 {
        let p = rdf32(76 + 4 * (a + 1)) as f64;
        spacing[a] = if p > 0.0 { p } else { 1.0 };
    }

    let qform_code = rd16(252);
    let sform_code = rd16(254);
    let origin = if sform_code > 0 {
        [rdf32(280 + 12) as f64, rdf32(296 + 12) as f64, rdf32(312 + 12) as f64]
    } else if qform_code > 0 {
        [rdf32(268) as f64, rdf32(272) as f64, rdf32(276) as f64]
    } else {
        [0.0; 3]
    };

    let vox_offset = rdf32(108);
    if vox_offset < HDR_SIZE as f32 {
        return Err(Error::format(path, format!("vox_offset {vox_offset} < 348")));
    }

    Ok(Header {
        dims,
        nt,
        nu,
        datatype,
        spacing,
        origin,
        vox_offset: vox_offset as usize,
        big_endian,
    })
}

fn read_voxels(
    raw: &[u8],
    datatype: i16,
    count: usize,
    big_endian: bool,
    path: &Path,
) -> Result<Vec<f32>> {
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        _ => unreachable!(),
    };
    if raw.len() < count * elem {
        return Err(Error::format(
            path,
            format!(
                "truncated data section: need {} bytes, have {}",
                count * elem,
                raw.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(count);
    match datatype {
        DT_UINT8 => out.extend(raw[..count].iter().map(|&b| b as f32)),
        DT_INT16 => {
            for i in 0..count {
                let v = if big_endian {
                    BigEndian::read_i16(&raw[2 * i..])
                } else {
                    LittleEndian::read_i16(&raw[2 * i..])
                };
                out.push(v as f32);
            }
        }
        DT_FLOAT32 => {
            for i in 0..count {
                let v = if big_endian {
                    BigEndian::read_f32(&raw[4 * i..])
                } else {
                    LittleEndian::read_f32(&raw[4 * i..])
                };
                out.push(v);
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

fn read_nifti_raw(path: &Path) -> Result<(Header, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut hdr_buf = [0u8; HDR_SIZE];
    reader
        .read_exact(&mut hdr_buf)
        .map_err(|e| Error::io(path, e))?;
    let header = parse_header(&hdr_buf, path)?;
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    let skip = header.vox_offset - HDR_SIZE;
    if rest.len() < skip {
        return Err(Error::format(path, "file truncated before vox_offset"));
    }
    let data = rest.split_off(skip);
    Ok((header, data))
}

/// Load a `.nii` or `.raw`+`.json` volume. uint8 data loads as a
/// [`LabelVolume`], int16/float32 as a [`Volume`].
pub fn load_volume(path: impl AsRef<Path>) -> Result<LoadedVolume> {
    let path = path.as_ref();
    if path.extension().and_then(|e| e.to_str()) == Some("raw") {
        return load_raw(path);
    }
    let (header, raw) = read_nifti_raw(path)?;
    if header.nt != 1 || header.nu != 1 {
        return Err(Error::format(
            path,
            "multi-frame file; use load_field for displacement fields",
        ));
    }
    let grid = Grid::new(header.dims, header.spacing, header.origin)?;
    let count = grid.num_voxels();
    let values = read_voxels(&raw, header.datatype, count, header.big_endian, path)?;
    if header.datatype == DT_UINT8 {
        let data = values.into_iter().map(|v| v as u32).collect();
        Ok(LoadedVolume::Labels(LabelVolume::new(grid, data)?))
    } else {
        Ok(LoadedVolume::Scalar(Volume::new(grid, values)?))
    }
}

fn write_header(
    w: &mut impl Write,
    grid: &Grid,
    datatype: i16,
    bitpix: i16,
    nt: usize,
    nu: usize,
    intent_code: i16,
) -> std::io::Result<()> {
    let mut buf = [0u8; HDR_SIZE];
    LittleEndian::write_i32(&mut buf[0..4], 348);
    // dim
    let ndim: i16 = if nu > 1 {
        5
    } else if nt > 1 {
        4
    } else {
        3
    };
    LittleEndian::write_i16(&mut buf[40..42], ndim);
    LittleEndian::write_i16(&mut buf[42..44], grid.dims[0] as i16);
    LittleEndian::write_i16(&mut buf[44..46], grid.dims[1] as i16);
    LittleEndian::write_i16(&mut buf[46..48], grid.dims[2] as i16);
    LittleEndian::write_i16(&mut buf[48..50], nt as i16);
    LittleEndian::write_i16(&mut buf[50..52], nu as i16);
    LittleEndian::write_i16(&mut buf[52..54], 1);
    LittleEndian::write_i16(&mut buf[54..56], 1);
    LittleEndian::write_i16(&mut buf[68..70], intent_code);
    LittleEndian::write_i16(&mut buf[70..72], datatype);
    LittleEndian::write_i16(&mut buf[72..74], bitpix);
    // pixdim
    LittleEndian::write_f32(&mut buf[76..80], 1.0);
    for a in 0..3 {
        LittleEndian::write_f32(&mut buf[80 + 4 * a..84 + 4 * a], grid.spacing[a] as f32);
    }
    LittleEndian::write_f32(&mut buf[92..96], 1.0); // pixdim[4]
    LittleEndian::write_f32(&mut buf[96..100], 1.0); // pixdim[5]
    LittleEndian::write_f32(&mut buf[108..112], VOX_OFFSET);
    LittleEndian::write_f32(&mut buf[112..116], 1.0); // scl_slope
    buf[123] = 2; // xyzt_units: mm
    // qform with identity rotation carries the origin
    LittleEndian::write_i16(&mut buf[252..254], 1);
    LittleEndian::write_f32(&mut buf[256..260], 0.0); // quatern_b
    LittleEndian::write_f32(&mut buf[260..264], 0.0);
    LittleEndian::write_f32(&mut buf[264..268], 0.0);
    for a in 0..3 {
        LittleEndian::write_f32(&mut buf[268 + 4 * a..272 + 4 * a], grid.origin[a] as f32);
    }
    buf[344..348].copy_from_slice(b"n+1\0");
    w.write_all(&buf)?;
    // 4-byte extension flag: no extensions. Data then starts at 352.
    w.write_all(&[0u8; 4])
}

/// Save a scalar volume as float32 NIfTI-1.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().and_then(|e| e.to_str()) == Some("raw") {
        return save_raw_scalar(v, path);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, &v.grid, DT_FLOAT32, 32, 1, 1, 0).map_err(|e| Error::io(path, e))?;
    for &val in &v.data {
        w.write_f32::<LittleEndian>(val).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Save a label volume as uint8 NIfTI-1. Ids must fit in u8.
pub fn save_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(&id) = l.label_ids.iter().find(|&&id| id > 255) {
        return Err(Error::Argument(format!("label id {id} does not fit the uint8 writer")));
    }
    if path.extension().and_then(|e| e.to_str()) == Some("raw") {
        return save_raw_labels(l, path);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, &l.grid, DT_UINT8, 8, 1, 1, 0).map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = l.data.iter().map(|&v| v as u8).collect();
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Save a displacement field as a 5-D NIfTI-1 vector volume
/// (dim = [5, nx, ny, nz, 1, 3], intent code 1007), float32, voxel units.
pub fn save_field(f: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().and_then(|e| e.to_str()) == Some("raw") {
        return save_raw_field(f, path);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, &f.grid, DT_FLOAT32, 32, 1, 3, 1007).map_err(|e| Error::io(path, e))?;
    for channel in [&f.ux, &f.uy, &f.uz] {
        for &val in channel.iter() {
            w.write_f32::<LittleEndian>(val).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load a displacement field saved by [`save_field`] (also accepts 4-D files
/// with three timepoints).
pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    if path.extension().and_then(|e| e.to_str()) == Some("raw") {
        return load_raw_field(path);
    }
    let (header, raw) = read_nifti_raw(path)?;
    let channels = header.nt.max(header.nu);
    if channels != 3 || (header.nt > 1 && header.nu > 1) {
        return Err(Error::format(
            path,
            format!("expected 3 channels (dim[4] or dim[5]), got nt={} nu={}", header.nt, header.nu),
        ));
    }
    if header.datatype != DT_FLOAT32 {
        return Err(Error::format(path, "displacement field must be float32"));
    }
    let grid = Grid::new(header.dims, header.spacing, header.origin)?;
    let n = grid.num_voxels();
    let all = read_voxels(&raw, DT_FLOAT32, 3 * n, header.big_endian, path)?;
    DisplacementField::new(
        grid,
        all[0..n].to_vec(),
        all[n..2 * n].to_vec(),
        all[2 * n..3 * n].to_vec(),
    )
}

// --- raw + JSON sidecar fallback ---

#[derive(serde::Serialize, serde::Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
    #[serde(default)]
    channels: Option<usize>,
    #[serde(default)]
    units: Option<String>,
}

fn sidecar_path(raw_path: &Path) -> std::path::PathBuf {
    raw_path.with_extension("json")
}

fn read_sidecar(raw_path: &Path) -> Result<Sidecar> {
    let sp = sidecar_path(raw_path);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&sp, e.to_string()))
}

fn write_sidecar(raw_path: &Path, sc: &Sidecar) -> Result<()> {
    let sp = sidecar_path(raw_path);
    let text = serde_json::to_string_pretty(sc).expect("sidecar serializes");
    std::fs::write(&sp, text).map_err(|e| Error::io(&sp, e))
}

fn load_raw(path: &Path) -> Result<LoadedVolume> {
    let sc = read_sidecar(path)?;
    let grid = Grid::new(sc.dims, sc.spacing, sc.origin)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = grid.num_voxels();
    match sc.dtype.as_str() {
        "u8" => {
            if bytes.len() < n {
                return Err(Error::format(path, "truncated raw file"));
            }
            let data = bytes[..n].iter().map(|&b| b as u32).collect();
            Ok(LoadedVolume::Labels(LabelVolume::new(grid, data)?))
        }
        "i16" => {
            if bytes.len() < 2 * n {
                return Err(Error::format(path, "truncated raw file"));
            }
            let data = (0..n)
                .map(|i| LittleEndian::read_i16(&bytes[2 * i..]) as f32)
                .collect();
            Ok(LoadedVolume::Scalar(Volume::new(grid, data)?))
        }
        "f32" => {
            if bytes.len() < 4 * n {
                return Err(Error::format(path, "truncated raw file"));
            }
            let data = (0..n).map(|i| LittleEndian::read_f32(&bytes[4 * i..])).collect();
            Ok(LoadedVolume::Scalar(Volume::new(grid, data)?))
        }
        other => Err(Error::format(path, format!("dtype \"{other}\" unsupported"))),
    }
}

fn save_raw_scalar(v: &Volume, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * v.data.len());
    for &val in &v.data {
        bytes.extend_from_slice(&val.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &Sidecar {
            dims: v.grid.dims,
            spacing: v.grid.spacing,
            origin: v.grid.origin,
            dtype: "f32".into(),
            channels: None,
            units: None,
        },
    )
}

fn save_raw_labels(l: &LabelVolume, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = l.data.iter().map(|&v| v as u8).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &Sidecar {
            dims: l.grid.dims,
            spacing: l.grid.spacing,
            origin: l.grid.origin,
            dtype: "u8".into(),
            channels: None,
            units: None,
        },
    )
}

fn save_raw_field(f: &DisplacementField, path: &Path) -> Result<()> {
    let n = f.grid.num_voxels();
    let mut bytes = Vec::with_capacity(12 * n);
    for channel in [&f.ux, &f.uy, &f.uz] {
        for &val in channel.iter() {
            bytes.extend_from_slice(&val.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &Sidecar {
            dims: f.grid.dims,
            spacing: f.grid.spacing,
            origin: f.grid.origin,
            dtype: "f32".into(),
            channels: Some(3),
            units: Some("voxel".into()),
        },
    )
}

fn load_raw_field(path: &Path) -> Result<DisplacementField> {
    let sc = read_sidecar(path)?;
    if sc.channels != Some(3) {
        return Err(Error::format(path, "field sidecar must declare channels: 3"));
    }
    let grid = Grid::new(sc.dims, sc.spacing, sc.origin)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = grid.num_voxels();
    if bytes.len() < 12 * n {
        return Err(Error::format(path, "truncated raw field file"));
    }
    let read_channel = |c: usize| -> Vec<f32> {
        (0..n)
            .map(|i| LittleEndian::read_f32(&bytes[4 * (c * n + i)..]))
            .collect()
    };
    DisplacementField::new(grid, read_channel(0), read_channel(1), read_channel(2))
}
