//! NIfTI-1 volume I/O.
//!
//! Reads and writes single-file NIfTI-1 (`.nii` / `.nii.gz`), producing the
//! engine's canonical [`Volume`]. Only the 348-byte NIfTI-1 header is
//! supported; NIfTI-2 and two-file `.hdr`/`.img` pairs are rejected.
//! Intensities are promoted to f64 on read and the `scl_slope`/`scl_inter`
//! scaling is applied when the slope is nonzero. Orientation fields
//! (qform/sform) are read but not used for geometry; boxes live in voxel
//! index space.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

pub const HEADER_SIZE: usize = 348;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

/// NIfTI-1 header field byte offsets.
mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const REGULAR: usize = 38;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Error)]
pub enum VolumeIoError {
    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("payload shorter than the declared dimensions")]
    TruncatedData,
    #[error("two-file (.hdr/.img) NIfTI is not supported")]
    HeaderOnlyFile,
    #[error("dim[0] invalid under both byte orders")]
    AmbiguousHeader,
    #[error("volumes with a non-trivial dimension {0} are not supported")]
    UnsupportedDimensionality(usize),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Ct,
    Mr,
    Unknown,
}

impl Modality {
    fn tag(self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::Mr => "MR",
            Modality::Unknown => "",
        }
    }

    fn from_descrip(descrip: &str) -> Self {
        match descrip.trim_end_matches('\0').trim() {
            "CT" => Modality::Ct,
            "MR" => Modality::Mr,
            _ => Modality::Unknown,
        }
    }
}

/// 3-D scalar grid in source voxel space, stored in NIfTI element order
/// (x fastest, then y, then z).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Vec<f64>,
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub modality: Modality,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64), modality: Modality) -> Self {
        assert!(dims.0 >= 1 && dims.1 >= 1 && dims.2 >= 1, "dims must be >= 1");
        assert!(
            spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0,
            "spacing must be positive"
        );
        Volume {
            data: vec![0.0; dims.0 * dims.1 * dims.2],
            dims,
            spacing,
            modality,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn numel(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

/// Parsed NIfTI-1 header. Orientation codes are retained for inspection but
/// never applied.
#[derive(Debug, Clone)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub endianness: Endianness,
}

/// Decide byte order from the `dim[0]` range check: a valid header has
/// `dim[0]` in 1..=7 under exactly one interpretation.
pub fn detect_endianness(raw_header: &[u8]) -> Result<Endianness, VolumeIoError> {
    if raw_header.len() < HEADER_SIZE {
        return Err(VolumeIoError::TruncatedData);
    }
    let le = LittleEndian::read_i16(&raw_header[offsets::DIM..offsets::DIM + 2]);
    if (1..=7).contains(&le) {
        return Ok(Endianness::Little);
    }
    let be = BigEndian::read_i16(&raw_header[offsets::DIM..offsets::DIM + 2]);
    if (1..=7).contains(&be) {
        return Ok(Endianness::Big);
    }
    Err(VolumeIoError::AmbiguousHeader)
}

fn parse_header(bytes: &[u8]) -> Result<NiftiHeader, VolumeIoError> {
    let endianness = detect_endianness(bytes)?;
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[offsets::MAGIC..offsets::MAGIC + 4]);
    if &magic == MAGIC_PAIR {
        return Err(VolumeIoError::HeaderOnlyFile);
    }
    if &magic != MAGIC_SINGLE {
        return Err(VolumeIoError::BadMagic(magic));
    }
    match endianness {
        Endianness::Little => parse_header_fields::<LittleEndian>(bytes, endianness),
        Endianness::Big => parse_header_fields::<BigEndian>(bytes, endianness),
    }
}

fn parse_header_fields<E: ByteOrder>(
    bytes: &[u8],
    endianness: Endianness,
) -> Result<NiftiHeader, VolumeIoError> {
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = E::read_i16(&bytes[offsets::DIM + 2 * i..offsets::DIM + 2 * i + 2]);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = E::read_f32(&bytes[offsets::PIXDIM + 4 * i..offsets::PIXDIM + 4 * i + 4]);
    }
    let descrip = String::from_utf8_lossy(&bytes[offsets::DESCRIP..offsets::DESCRIP + 80])
        .trim_end_matches('\0')
        .to_string();
    Ok(NiftiHeader {
        dim,
        datatype: E::read_i16(&bytes[offsets::DATATYPE..offsets::DATATYPE + 2]),
        pixdim,
        vox_offset: E::read_f32(&bytes[offsets::VOX_OFFSET..offsets::VOX_OFFSET + 4]),
        scl_slope: E::read_f32(&bytes[offsets::SCL_SLOPE..offsets::SCL_SLOPE + 4]),
        scl_inter: E::read_f32(&bytes[offsets::SCL_INTER..offsets::SCL_INTER + 4]),
        descrip,
        qform_code: E::read_i16(&bytes[offsets::QFORM_CODE..offsets::QFORM_CODE + 2]),
        sform_code: E::read_i16(&bytes[offsets::SFORM_CODE..offsets::SFORM_CODE + 2]),
        endianness,
    })
}

fn element_size(datatype: i16) -> Result<usize, VolumeIoError> {
    match datatype {
        2 => Ok(1),  // uint8
        4 => Ok(2),  // int16
        8 => Ok(4),  // int32
        16 => Ok(4), // float32
        64 => Ok(8), // float64
        other => Err(VolumeIoError::UnsupportedDatatype(other)),
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Parse a NIfTI-1 volume from raw (possibly gzipped) file bytes.
pub fn read_nifti_bytes(bytes: &[u8]) -> Result<Volume, VolumeIoError> {
    let decompressed;
    let bytes = if is_gzip(bytes) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|_| VolumeIoError::TruncatedData)?;
        decompressed = out;
        &decompressed[..]
    } else {
        bytes
    };
    if bytes.len() < HEADER_SIZE {
        return Err(VolumeIoError::TruncatedData);
    }
    let header = parse_header(&bytes[..HEADER_SIZE])?;

    let ndim = header.dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(VolumeIoError::InvalidHeader(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = header.dim[i + 1];
        if v < 1 {
            return Err(VolumeIoError::InvalidHeader(format!("dim[{}] = {}", i + 1, v)));
        }
        *d = v as usize;
    }
    for (i, &d) in dims.iter().enumerate().skip(3) {
        if d != 1 {
            return Err(VolumeIoError::UnsupportedDimensionality(i + 1));
        }
    }
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let n = nx * ny * nz;

    let elem = element_size(header.datatype)?;
    let offset = header.vox_offset.max(HEADER_SIZE as f32) as usize;
    let need = offset + n * elem;
    if bytes.len() < need {
        return Err(VolumeIoError::TruncatedData);
    }
    let payload = &bytes[offset..need];

    let mut data = vec![0.0f64; n];
    match header.endianness {
        Endianness::Little => decode_payload::<LittleEndian>(payload, header.datatype, &mut data),
        Endianness::Big => decode_payload::<BigEndian>(payload, header.datatype, &mut data),
    }
    // slope 0 means "no scaling" per the NIfTI-1 convention
    if header.scl_slope != 0.0 && !(header.scl_slope == 1.0 && header.scl_inter == 0.0) {
        let s = header.scl_slope as f64;
        let b = header.scl_inter as f64;
        for v in data.iter_mut() {
            *v = s * *v + b;
        }
    }

    let spacing_of = |p: f32| {
        let p = p as f64;
        if p.is_finite() && p > 0.0 {
            p
        } else {
            1.0
        }
    };
    Ok(Volume {
        data,
        dims: (nx, ny, nz),
        spacing: (
            spacing_of(header.pixdim[1]),
            spacing_of(header.pixdim[2]),
            spacing_of(header.pixdim[3]),
        ),
        modality: Modality::from_descrip(&header.descrip),
    })
}

fn decode_payload<E: ByteOrder>(payload: &[u8], datatype: i16, out: &mut [f64]) {
    match datatype {
        2 => {
            for (o, b) in out.iter_mut().zip(payload.iter()) {
                *o = *b as f64;
            }
        }
        4 => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = E::read_i16(&payload[2 * i..2 * i + 2]) as f64;
            }
        }
        8 => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = E::read_i32(&payload[4 * i..4 * i + 4]) as f64;
            }
        }
        16 => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = E::read_f32(&payload[4 * i..4 * i + 4]) as f64;
            }
        }
        64 => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = E::read_f64(&payload[8 * i..8 * i + 8]);
            }
        }
        _ => unreachable!("datatype validated before decoding"),
    }
}

/// Read a `.nii` or `.nii.gz` file.
pub fn read_nifti<P: AsRef<Path>>(path: P) -> Result<Volume, VolumeIoError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    read_nifti_bytes(&bytes)
}

/// Serialize a volume as little-endian float32 NIfTI-1 (datatype 16,
/// `scl_slope` 1, `vox_offset` 352).
pub fn write_nifti_bytes(vol: &Volume) -> Vec<u8> {
    let (nx, ny, nz) = vol.dims;
    let mut header = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut header[offsets::SIZEOF_HDR..offsets::SIZEOF_HDR + 4], 348);
    header[offsets::REGULAR] = b'r';
    let dims = [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut header[offsets::DIM + 2 * i..offsets::DIM + 2 * i + 2], *d);
    }
    LittleEndian::write_i16(&mut header[offsets::DATATYPE..offsets::DATATYPE + 2], 16);
    LittleEndian::write_i16(&mut header[offsets::BITPIX..offsets::BITPIX + 2], 32);
    let pixdims = [
        1.0f32,
        vol.spacing.0 as f32,
        vol.spacing.1 as f32,
        vol.spacing.2 as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (i, p) in pixdims.iter().enumerate() {
        LittleEndian::write_f32(&mut header[offsets::PIXDIM + 4 * i..offsets::PIXDIM + 4 * i + 4], *p);
    }
    LittleEndian::write_f32(&mut header[offsets::VOX_OFFSET..offsets::VOX_OFFSET + 4], 352.0);
    LittleEndian::write_f32(&mut header[offsets::SCL_SLOPE..offsets::SCL_SLOPE + 4], 1.0);
    LittleEndian::write_f32(&mut header[offsets::SCL_INTER..offsets::SCL_INTER + 4], 0.0);
    header[offsets::XYZT_UNITS] = 2; // millimetres
    let tag = vol.modality.tag().as_bytes();
    header[offsets::DESCRIP..offsets::DESCRIP + tag.len()].copy_from_slice(tag);
    header[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC_SINGLE);

    let mut out = Vec::with_capacity(352 + vol.data.len() * 4);
    out.extend_from_slice(&header);
    out.extend_from_slice(&[0u8; 4]); // extension flag bytes, vox_offset = 352
    let mut buf = [0u8; 4];
    for v in &vol.data {
        LittleEndian::write_f32(&mut buf, *v as f32);
        out.extend_from_slice(&buf);
    }
    out
}

/// Write a volume to `.nii` or `.nii.gz` (gzip chosen by file extension).
pub fn write_nifti<P: AsRef<Path>>(vol: &Volume, path: P) -> Result<(), VolumeIoError> {
    let path = path.as_ref();
    let bytes = write_nifti_bytes(vol);
    let mut file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(&mut file, Compression::fast());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        file.write_all(&bytes)?;
    }
    Ok(())
}
