//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reading and writing.
//!
//! Geometry comes from the sform when present, else the qform, else the
//! bare pixdim diagonal. Affines must be axis aligned; anything else is
//! rejected rather than silently resampled.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

use super::{Grid3, LabelVolume, ScalarKind, ScalarVolume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

/// Decoded image: geometry plus voxel values after slope/intercept scaling.
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub grid: Grid3,
    pub values: Vec<f64>,
    pub datatype: i16,
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn nifti_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Nifti(format!("{}: {msg}", path.display()))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if is_gzip(&raw) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| nifti_err(path, format!("gzip: {e}")))?;
        out
    } else {
        raw
    };
    decode(&bytes).map_err(|e| match e {
        Error::Nifti(msg) => nifti_err(path, msg),
        other => other,
    })
}

pub fn decode(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!("file too small ({} bytes)", bytes.len())));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode_with::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode_with::<BigEndian>(bytes)
    } else {
        Err(Error::Nifti("not a NIfTI-1 file (sizeof_hdr != 348)".into()))
    }
}

fn decode_with<B: ByteOrder>(h: &[u8]) -> Result<NiftiImage> {
    let magic = &h[344..348];
    if magic != b"n+1\0" {
        return Err(Error::Nifti(format!(
            "unsupported magic {:?}; only single-file NIfTI-1 is read",
            String::from_utf8_lossy(magic)
        )));
    }
    let i16_at = |o: usize| B::read_i16(&h[o..o + 2]);
    let f32_at = |o: usize| B::read_f32(&h[o..o + 4]) as f64;

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("bad dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for d in 1..=ndim as usize {
        let v = i16_at(40 + 2 * d);
        if v < 1 {
            return Err(Error::Nifti(format!("bad dim[{d}] = {v}")));
        }
        if d <= 3 {
            dims[d - 1] = v as usize;
        } else if v != 1 {
            return Err(Error::Nifti(format!("only 3D volumes are supported (dim[{d}] = {v})")));
        }
    }
    let datatype = i16_at(70);
    let pixdim: Vec<f64> = (0..8).map(|i| f32_at(76 + 4 * i)).collect();
    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f64) {
        return Err(Error::Nifti(format!("bad vox_offset {vox_offset}")));
    }
    let mut slope = f32_at(112);
    let mut inter = f32_at(116);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
        inter = 0.0;
    }
    let qform_code = i16_at(252);
    let sform_code = i16_at(254);

    let affine = if sform_code > 0 {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(280 + 16 * r + 4 * c);
            }
        }
        m[3][3] = 1.0;
        m
    } else if qform_code > 0 {
        let (b, c, d) = (f32_at(256), f32_at(260), f32_at(264));
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let rot = quaternion_to_rotation(b, c, d);
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            for col in 0..3 {
                let scale = pixdim[col + 1] * if col == 2 { qfac } else { 1.0 };
                m[r][col] = rot[r][col] * scale;
            }
        }
        m[0][3] = f32_at(268);
        m[1][3] = f32_at(272);
        m[2][3] = f32_at(276);
        m[3][3] = 1.0;
        m
    } else {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][i] = if pixdim[i + 1] > 0.0 { pixdim[i + 1] } else { 1.0 };
        }
        m[3][3] = 1.0;
        m
    };
    let grid = Grid3::from_affine(dims, &affine)?;

    let n = grid.len();
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::Nifti(format!("unsupported datatype {other}"))),
    };
    let start = vox_offset as usize;
    let end = start + n * width;
    if h.len() < end {
        return Err(Error::Nifti(format!(
            "truncated data: need {end} bytes, have {}",
            h.len()
        )));
    }
    let data = &h[start..end];
    let raw: Vec<f64> = match datatype {
        DT_UINT8 => data.iter().map(|&v| v as f64).collect(),
        DT_INT8 => data.iter().map(|&v| v as i8 as f64).collect(),
        DT_INT16 => data.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        DT_UINT16 => data.chunks_exact(2).map(|c| B::read_u16(c) as f64).collect(),
        DT_INT32 => data.chunks_exact(4).map(|c| B::read_i32(c) as f64).collect(),
        DT_UINT32 => data.chunks_exact(4).map(|c| B::read_u32(c) as f64).collect(),
        DT_FLOAT32 => data.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        _ => data.chunks_exact(8).map(B::read_f64).collect(),
    };
    let values = if slope == 1.0 && inter == 0.0 {
        raw
    } else {
        raw.into_iter().map(|v| v * slope + inter).collect()
    };
    Ok(NiftiImage {
        grid,
        values,
        datatype,
    })
}

fn quaternion_to_rotation(b: f64, c: f64, d: f64) -> [[f64; 3]; 3] {
    let mut a = 1.0 - (b * b + c * c + d * d);
    let (mut b, mut c, mut d) = (b, c, d);
    if a < 1e-7 {
        let norm = (b * b + c * c + d * d).sqrt();
        b /= norm;
        c /= norm;
        d /= norm;
        a = 0.0;
    } else {
        a = a.sqrt();
    }
    [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ]
}

/// Quaternion (b, c, d) and qfac for a proper or improper rotation.
fn rotation_to_quaternion(r: [[f64; 3]; 3]) -> ([f64; 3], f64) {
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    let mut m = r;
    let qfac = if det < 0.0 {
        for row in m.iter_mut() {
            row[2] = -row[2];
        }
        -1.0
    } else {
        1.0
    };
    let trace = m[0][0] + m[1][1] + m[2][2] + 1.0;
    let (a, mut b, mut c, mut d);
    if trace > 0.5 {
        a = 0.5 * trace.sqrt();
        b = 0.25 * (m[2][1] - m[1][2]) / a;
        c = 0.25 * (m[0][2] - m[2][0]) / a;
        d = 0.25 * (m[1][0] - m[0][1]) / a;
    } else {
        let xd = 1.0 + m[0][0] - (m[1][1] + m[2][2]);
        let yd = 1.0 + m[1][1] - (m[0][0] + m[2][2]);
        let zd = 1.0 + m[2][2] - (m[0][0] + m[1][1]);
        if xd > 1.0 {
            b = 0.5 * xd.sqrt();
            c = 0.25 * (m[0][1] + m[1][0]) / b;
            d = 0.25 * (m[0][2] + m[2][0]) / b;
            a = 0.25 * (m[2][1] - m[1][2]) / b;
        } else if yd > 1.0 {
            c = 0.5 * yd.sqrt();
            b = 0.25 * (m[0][1] + m[1][0]) / c;
            d = 0.25 * (m[1][2] + m[2][1]) / c;
            a = 0.25 * (m[0][2] - m[2][0]) / c;
        } else {
            d = 0.5 * zd.sqrt();
            b = 0.25 * (m[0][2] + m[2][0]) / d;
            c = 0.25 * (m[1][2] + m[2][1]) / d;
            a = 0.25 * (m[1][0] - m[0][1]) / d;
        }
        if a < 0.0 {
            b = -b;
            c = -c;
            d = -d;
        }
    }
    ([b, c, d], qfac)
}

fn encode(grid: &Grid3, datatype: i16, payload: &[u8]) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    LittleEndian::write_i16(&mut h[40..42], 3);
    for (d, &n) in grid.dims().iter().enumerate() {
        let n = i16::try_from(n).expect("dimension checked by caller");
        LittleEndian::write_i16(&mut h[42 + 2 * d..44 + 2 * d], n);
    }
    for d in 3..7 {
        LittleEndian::write_i16(&mut h[42 + 2 * d..44 + 2 * d], 1);
    }
    let bitpix: i16 = match datatype {
        DT_UINT8 => 8,
        DT_UINT16 => 16,
        DT_UINT32 | DT_FLOAT32 => 32,
        _ => 64,
    };
    LittleEndian::write_i16(&mut h[70..72], datatype);
    LittleEndian::write_i16(&mut h[72..74], bitpix);

    let affine = grid.affine();
    let mut rot = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            rot[r][c] = affine[r][c] / grid.spacing()[c];
        }
    }
    let (quat, qfac) = rotation_to_quaternion(rot);
    let mut pixdim = [1.0f32; 8];
    pixdim[0] = qfac as f32;
    for a in 0..3 {
        pixdim[a + 1] = grid.spacing()[a] as f32;
    }
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..80 + 4 * i], *p);
    }
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    h[123] = 2 | 8; // mm, seconds
    let descrip = b"lymphstage";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    LittleEndian::write_i16(&mut h[252..254], 1);
    LittleEndian::write_i16(&mut h[254..256], 1);
    for (i, q) in quat.iter().enumerate() {
        LittleEndian::write_f32(&mut h[256 + 4 * i..260 + 4 * i], *q as f32);
    }
    for w in 0..3 {
        LittleEndian::write_f32(&mut h[268 + 4 * w..272 + 4 * w], affine[w][3] as f32);
    }
    for (r, row) in affine.iter().take(3).enumerate() {
        for (c, v) in row.iter().enumerate() {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..284 + 16 * r + 4 * c], *v as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(payload);
    h
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn check_dims(grid: &Grid3) -> Result<()> {
    if grid.dims().iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Nifti(format!("dims {:?} exceed NIfTI-1 limits", grid.dims())));
    }
    Ok(())
}

/// Writes float32 voxels; gzip-compressed when the path ends in `.gz`.
pub fn write_scalar(path: impl AsRef<Path>, volume: &ScalarVolume) -> Result<()> {
    check_dims(volume.grid())?;
    let mut payload = Vec::with_capacity(volume.values().len() * 4);
    for &v in volume.values() {
        payload.write_f32::<LittleEndian>(v as f32).expect("vec write");
    }
    write_bytes(path.as_ref(), &encode(volume.grid(), DT_FLOAT32, &payload))
}

/// Writes labels as uint8, uint16 or uint32, whichever fits the largest label.
pub fn write_labels(path: impl AsRef<Path>, volume: &LabelVolume) -> Result<()> {
    check_dims(volume.grid())?;
    let max = volume.labels().iter().copied().max().unwrap_or(0);
    let (datatype, payload) = if max <= u8::MAX as u32 {
        (DT_UINT8, volume.labels().iter().map(|&l| l as u8).collect())
    } else if max <= u16::MAX as u32 {
        let mut p = Vec::with_capacity(volume.labels().len() * 2);
        for &l in volume.labels() {
            p.write_u16::<LittleEndian>(l as u16).expect("vec write");
        }
        (DT_UINT16, p)
    } else {
        let mut p = Vec::with_capacity(volume.labels().len() * 4);
        for &l in volume.labels() {
            p.write_u32::<LittleEndian>(l).expect("vec write");
        }
        (DT_UINT32, p)
    };
    write_bytes(path.as_ref(), &encode(volume.grid(), datatype, &payload))
}

pub fn read_scalar(path: impl AsRef<Path>, kind: ScalarKind) -> Result<ScalarVolume> {
    let img = read_image(path)?;
    ScalarVolume::new(img.grid, img.values, kind)
}

/// Reads a label map. Values must be non-negative integers; labels missing
/// from `dictionary` are named `label_<id>`.
pub fn read_labels(path: impl AsRef<Path>, dictionary: BTreeMap<u32, String>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let img = read_image(path)?;
    let mut labels = Vec::with_capacity(img.values.len());
    for v in img.values {
        if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
            return Err(nifti_err(path, format!("label value {v} is not a non-negative integer")));
        }
        labels.push(v as u32);
    }
    LabelVolume::with_default_names(img.grid, labels, dictionary)
}

/// Reads a `{"<id>": "<name>"}` JSON label dictionary.
pub fn read_label_dictionary(path: impl AsRef<Path>) -> Result<BTreeMap<u32, String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, String> = serde_json::from_str(&text)?;
    raw.into_iter()
        .map(|(k, v)| {
            k.trim()
                .parse::<u32>()
                .ok()
                .filter(|&id| id != 0)
                .map(|id| (id, v))
                .ok_or_else(|| Error::InvalidVolume(format!("bad label id {k:?} in {}", path.display())))
        })
        .collect()
}

pub fn write_label_dictionary(path: impl AsRef<Path>, dictionary: &BTreeMap<u32, String>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(dictionary)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::parse_orientation;

    #[test]
    fn scalar_round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        for orient in ["RAS", "LPS", "PIR"] {
            let g = Grid3::new(
                [4, 3, 2],
                [1.5, 2.0, 3.25],
                [-10.5, 20.25, 3.0],
                parse_orientation(orient).unwrap(),
            )
            .unwrap();
            let values: Vec<f64> = (0..g.len()).map(|i| i as f64 * 0.5).collect();
            let v = ScalarVolume::new(g, values, ScalarKind::Suv).unwrap();
            for name in ["a.nii", "a.nii.gz"] {
                let p = dir.path().join(format!("{orient}_{name}"));
                write_scalar(&p, &v).unwrap();
                let back = read_scalar(&p, ScalarKind::Suv).unwrap();
                assert!(back.grid().matches(&g), "{orient}: {}", back.grid());
                assert_eq!(back.values(), v.values());
            }
        }
    }

    #[test]
    fn qform_only_files_decode_the_same_geometry() {
        let g = Grid3::new([2, 2, 2], [1.0, 2.0, 3.0], [5.0, 6.0, 7.0], parse_orientation("LAI").unwrap()).unwrap();
        let v = ScalarVolume::filled(g, 1.0, ScalarKind::Hu).unwrap();
        let mut bytes = encode(&g, DT_FLOAT32, &vec![0u8; 32]);
        // clear sform_code so the quaternion path is used
        LittleEndian::write_i16(&mut bytes[254..256], 0);
        let img = decode(&bytes).unwrap();
        assert!(img.grid.matches(v.grid()), "{}", img.grid);
    }

    #[test]
    fn oblique_sform_is_rejected() {
        let g = Grid3::ras([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let mut bytes = encode(&g, DT_UINT8, &[0u8; 8]);
        LittleEndian::write_f32(&mut bytes[284..288], 0.5); // srow_x[1]
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("oblique"), "{err}");
    }

    #[test]
    fn labels_round_trip_with_dictionary_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid3::ras([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        let labels: Vec<u32> = (0..27).map(|i| if i % 5 == 0 { 300 } else { i % 3 }).collect();
        let dict = BTreeMap::from([
            (1, "liver".to_string()),
            (2, "spleen".to_string()),
            (300, "femur_left".to_string()),
        ]);
        let v = LabelVolume::new(g, labels, dict.clone()).unwrap();
        let p = dir.path().join("l.nii.gz");
        write_labels(&p, &v).unwrap();
        let dp = dir.path().join("l.json");
        write_label_dictionary(&dp, &dict).unwrap();
        let back = read_labels(&p, read_label_dictionary(&dp).unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn garbage_is_an_error_not_a_panic() {
        assert!(decode(&[0u8; 10]).is_err());
        assert!(decode(&[0u8; 400]).is_err());
        let g = Grid3::ras([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let bytes = encode(&g, DT_FLOAT32, &[0u8; 8]);
        assert!(decode(&bytes).unwrap_err().to_string().contains("truncated"));
    }
}
