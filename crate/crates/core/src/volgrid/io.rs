//! On-disk formats.
//!
//! * Volumes: `<name>.json` sidecar plus `<name>.raw` little-endian payload.
//! * `FSTK`: magic, u32 version, u8 axis, u32x3 dims, u32 feature_dim,
//!   u8 dtype, 7 pad bytes, payload.
//! * `FVOL`: magic, u32 version, u32x3 dims, u32x3 source dims,
//!   u32 feature_dim, u8 dtype, payload.
//! * `SVOL`: magic, u32 version, u32x3 dims, u8 resolution tag, f32 payload.
//!
//! All integers and payloads are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};

use super::{
    check_len, Axis, Dims, FeatureDtype, FeatureStack, FeatureVolume, GridError, Resolution,
    SimilarityVolume, Volume,
};

const VERSION: u32 = 1;
const FSTK: [u8; 4] = *b"FSTK";
const FVOL: [u8; 4] = *b"FVOL";
const SVOL: [u8; 4] = *b"SVOL";

/// JSON sidecar describing a raw payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub dtype: String,
    #[serde(default = "unit_spacing")]
    pub spacing: [f32; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_range: Option<[f64; 2]>,
    /// Label names, present on label volumes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<BTreeMap<u32, String>>,
}

fn unit_spacing() -> [f32; 3] {
    [1.0; 3]
}

/// Decoded raw payload in its stored type.
#[derive(Clone, Debug, PartialEq)]
pub enum RawSamples {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl RawSamples {
    pub fn len(&self) -> usize {
        match self {
            RawSamples::U8(v) => v.len(),
            RawSamples::U16(v) => v.len(),
            RawSamples::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            RawSamples::U8(_) => "uint8",
            RawSamples::U16(_) => "uint16",
            RawSamples::F32(_) => "f32",
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            RawSamples::U8(v) => v.iter().map(|&x| x as f64).collect(),
            RawSamples::U16(v) => v.iter().map(|&x| x as f64).collect(),
            RawSamples::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

fn dtype_size(dtype: &str) -> Result<usize, GridError> {
    match dtype {
        "uint8" => Ok(1),
        "uint16" => Ok(2),
        "f32" => Ok(4),
        other => Err(GridError::UnsupportedDtype(other.to_string())),
    }
}

/// Sidecar and payload paths for a volume given either file or the stem.
pub fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => (path.with_extension("json"), path.with_extension("raw")),
        _ => {
            let mut j = path.as_os_str().to_owned();
            j.push(".json");
            let mut r = path.as_os_str().to_owned();
            r.push(".raw");
            (PathBuf::from(j), PathBuf::from(r))
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GridError + '_ {
    move |source| GridError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, GridError> {
    fs::read(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), GridError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a sidecar + raw pair without any normalization.
pub fn load_raw(path: &Path) -> Result<(Sidecar, RawSamples), GridError> {
    let (json, raw) = sidecar_paths(path);
    if !json.exists() {
        return Err(GridError::MissingSidecar(json.display().to_string()));
    }
    let sidecar: Sidecar = serde_json::from_slice(&read_file(&json)?)?;
    let size = dtype_size(&sidecar.dtype)?;
    let bytes = read_file(&raw)?;
    let count = Dims(sidecar.dims).len();
    check_len(count * size, bytes.len(), "payload bytes")?;
    let samples = match size {
        1 => RawSamples::U8(bytes),
        2 => RawSamples::U16(
            bytes
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect(),
        ),
        _ => RawSamples::F32(decode_f32(&bytes)),
    };
    Ok((sidecar, samples))
}

/// Writes a sidecar + raw pair. The sidecar's `dims` and `dtype` must agree
/// with the samples.
pub fn save_raw(path: &Path, sidecar: &Sidecar, samples: &RawSamples) -> Result<(), GridError> {
    check_len(Dims(sidecar.dims).len(), samples.len(), "samples")?;
    if sidecar.dtype != samples.dtype() {
        return Err(GridError::Invalid(format!(
            "sidecar dtype {} does not match samples {}",
            sidecar.dtype,
            samples.dtype()
        )));
    }
    let (json, raw) = sidecar_paths(path);
    let bytes = match samples {
        RawSamples::U8(v) => v.clone(),
        RawSamples::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        RawSamples::F32(v) => encode_f32(v),
    };
    write_file(&raw, &bytes)?;
    write_file(&json, &serde_json::to_vec_pretty(sidecar)?)
}

/// Loads a volume and normalizes it to `[0, 1]` by the sidecar's
/// `value_range` (dtype range for integers, `[0, 1]` for f32 when absent).
pub fn load_volume(path: &Path) -> Result<Volume, GridError> {
    let (sidecar, samples) = load_raw(path)?;
    let [lo, hi] = sidecar.value_range.unwrap_or(match samples {
        RawSamples::U8(_) => [0.0, 255.0],
        RawSamples::U16(_) => [0.0, 65535.0],
        RawSamples::F32(_) => [0.0, 1.0],
    });
    if !(hi > lo) {
        return Err(GridError::Invalid(format!("empty value_range [{lo}, {hi}]")));
    }
    let data: Vec<f32> = match &samples {
        RawSamples::F32(v) if lo == 0.0 && hi == 1.0 => {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(GridError::Invalid("non-finite sample".into()));
            }
            v.iter().map(|&x| x.clamp(0.0, 1.0)).collect()
        }
        _ => {
            let raw = samples.to_f64();
            if raw.iter().any(|x| !x.is_finite()) {
                return Err(GridError::Invalid("non-finite sample".into()));
            }
            raw.into_iter()
                .map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0) as f32)
                .collect()
        }
    };
    let name = sidecar_paths(path)
        .0
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Volume::new(name, Dims(sidecar.dims), data)?.with_spacing(sidecar.spacing))
}

/// Writes a volume as f32 with `value_range [0, 1]`; reloading is bit-exact.
pub fn save_volume(v: &Volume, path: &Path) -> Result<(), GridError> {
    let sidecar = Sidecar {
        dims: v.dims.0,
        dtype: "f32".into(),
        spacing: v.spacing,
        value_range: Some([0.0, 1.0]),
        class_names: None,
    };
    save_raw(path, &sidecar, &RawSamples::F32(v.data().to_vec()))
}

fn encode_f32(v: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

fn encode_features(v: &[f32], dtype: FeatureDtype) -> Vec<u8> {
    match dtype {
        FeatureDtype::F32 => encode_f32(v),
        FeatureDtype::F16 => v
            .iter()
            .flat_map(|&x| f16::from_f32(x).to_le_bytes())
            .collect(),
    }
}

fn decode_features(bytes: &[u8], dtype: FeatureDtype) -> Vec<f32> {
    match dtype {
        FeatureDtype::F32 => decode_f32(bytes),
        FeatureDtype::F16 => bytes
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
    }
}

fn feature_dtype(code: u8) -> Result<FeatureDtype, GridError> {
    match code {
        0 => Ok(FeatureDtype::F32),
        1 => Ok(FeatureDtype::F16),
        c => Err(GridError::UnsupportedDtype(format!("code {c}"))),
    }
}

fn dtype_width(dtype: FeatureDtype) -> usize {
    match dtype {
        FeatureDtype::F32 => 4,
        FeatureDtype::F16 => 2,
    }
}

/// Little-endian header cursor.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], GridError> {
        if self.pos + n > self.bytes.len() {
            return Err(GridError::DimMismatch {
                expected: self.pos + n,
                actual: self.bytes.len(),
                unit: "header bytes",
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), GridError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(GridError::BadMagic { expected, found });
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(GridError::VersionUnsupported(version));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, GridError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, GridError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn dims(&mut self) -> Result<Dims, GridError> {
        Ok(Dims([self.u32()? as usize, self.u32()? as usize, self.u32()? as usize]))
    }

    fn payload(&mut self, expected: usize) -> Result<&'a [u8], GridError> {
        let rest = &self.bytes[self.pos..];
        check_len(expected, rest.len(), "payload bytes")?;
        self.pos = self.bytes.len();
        Ok(rest)
    }
}

fn push_dims(out: &mut Vec<u8>, d: Dims) {
    for v in d.0 {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
}

fn header(magic: [u8; 4]) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out
}

pub fn save_feature_stack(s: &FeatureStack, path: &Path) -> Result<(), GridError> {
    let mut out = header(FSTK);
    out.push(s.axis as u8);
    push_dims(&mut out, s.dims);
    out.extend_from_slice(&(s.feature_dim as u32).to_le_bytes());
    out.push(s.dtype as u8);
    out.extend_from_slice(&[0u8; 7]);
    out.extend_from_slice(&encode_features(s.data(), s.dtype));
    write_file(path, &out)
}

pub fn load_feature_stack(path: &Path) -> Result<FeatureStack, GridError> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(FSTK)?;
    let axis_code = r.u8()?;
    let axis = Axis::from_index(axis_code as usize)
        .ok_or_else(|| GridError::Invalid(format!("axis code {axis_code}")))?;
    let dims = r.dims()?;
    let feature_dim = r.u32()? as usize;
    let dtype = feature_dtype(r.u8()?)?;
    r.take(7)?;
    let payload = r.payload(dims.len() * feature_dim * dtype_width(dtype))?;
    Ok(FeatureStack::new(axis, dims, feature_dim, decode_features(payload, dtype))?.with_dtype(dtype))
}

/// Writes a merged feature volume as f32. Norms are recomputed on load.
pub fn save_feature_volume(f: &FeatureVolume, path: &Path) -> Result<(), GridError> {
    save_feature_volume_as(f, path, FeatureDtype::F32)
}

pub fn save_feature_volume_as(
    f: &FeatureVolume,
    path: &Path,
    dtype: FeatureDtype,
) -> Result<(), GridError> {
    let mut out = header(FVOL);
    push_dims(&mut out, f.dims);
    push_dims(&mut out, f.source_dims);
    out.extend_from_slice(&(f.feature_dim as u32).to_le_bytes());
    out.push(dtype as u8);
    out.extend_from_slice(&encode_features(f.data(), dtype));
    write_file(path, &out)
}

pub fn load_feature_volume(path: &Path) -> Result<FeatureVolume, GridError> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(FVOL)?;
    let dims = r.dims()?;
    let source_dims = r.dims()?;
    let feature_dim = r.u32()? as usize;
    let dtype = feature_dtype(r.u8()?)?;
    let payload = r.payload(dims.len() * feature_dim * dtype_width(dtype))?;
    FeatureVolume::new(dims, source_dims, feature_dim, decode_features(payload, dtype))
}

pub fn save_similarity_volume(s: &SimilarityVolume, path: &Path) -> Result<(), GridError> {
    let mut out = header(SVOL);
    push_dims(&mut out, s.dims);
    out.push(s.resolution as u8);
    out.extend_from_slice(&encode_f32(s.data()));
    write_file(path, &out)
}

/// Loads an `SVOL` file; the class id is not stored and is supplied here.
pub fn load_similarity_volume(path: &Path, class_id: u32) -> Result<SimilarityVolume, GridError> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(SVOL)?;
    let dims = r.dims()?;
    let resolution = match r.u8()? {
        0 => Resolution::Low,
        1 => Resolution::Refined,
        t => return Err(GridError::Invalid(format!("resolution tag {t}"))),
    };
    let payload = r.payload(dims.len() * 4)?;
    SimilarityVolume::new(dims, decode_f32(payload), resolution, class_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn uint8_max_maps_to_one() {
        let dir = tmp();
        let p = dir.path().join("v");
        let sidecar = Sidecar {
            dims: [2, 2, 2],
            dtype: "uint8".into(),
            spacing: [1.0; 3],
            value_range: Some([0.0, 255.0]),
            class_names: None,
        };
        save_raw(&p, &sidecar, &RawSamples::U8(vec![255; 8])).unwrap();
        let v = load_volume(&p.with_extension("json")).unwrap();
        assert_eq!(v.dims, Dims::cube(2));
        assert!(v.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn short_payload_is_dim_mismatch() {
        let dir = tmp();
        let p = dir.path().join("v.json");
        fs::write(&p, r#"{"dims":[2,2,2],"dtype":"uint8","spacing":[1,1,1],"value_range":[0,255]}"#).unwrap();
        fs::write(p.with_extension("raw"), [0u8; 7]).unwrap();
        assert!(matches!(
            load_volume(&p),
            Err(GridError::DimMismatch { expected: 8, actual: 7, .. })
        ));
    }

    #[test]
    fn missing_sidecar_and_bad_dtype() {
        let dir = tmp();
        let p = dir.path().join("nothing.json");
        assert!(matches!(load_volume(&p), Err(GridError::MissingSidecar(_))));
        fs::write(&p, r#"{"dims":[1,1,1],"dtype":"float64","value_range":[0,1]}"#).unwrap();
        fs::write(p.with_extension("raw"), [0u8; 8]).unwrap();
        assert!(matches!(load_volume(&p), Err(GridError::UnsupportedDtype(_))));
    }

    #[test]
    fn volume_f32_roundtrip_and_size() {
        let dir = tmp();
        let d = Dims::new(64, 64, 64);
        let data: Vec<f32> = (0..d.len()).map(|i| ((i * 7919) % 1000) as f32 / 999.0).collect();
        let v = Volume::new("v", d, data).unwrap().with_spacing([0.5, 0.5, 2.0]);
        let p = dir.path().join("v.json");
        save_volume(&v, &p).unwrap();
        assert_eq!(fs::metadata(p.with_extension("raw")).unwrap().len(), (d.len() * 4) as u64);
        let back = load_volume(&p).unwrap();
        assert_eq!(back.dims, d);
        assert_eq!(back.spacing, [0.5, 0.5, 2.0]);
        assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let v = Volume::new("v", Dims::cube(1), vec![0.5]).unwrap();
        let err = save_volume(&v, Path::new("/proc/definitely/not/here.json")).unwrap_err();
        assert!(matches!(err, GridError::IoFailure { .. }));
    }

    #[test]
    fn feature_volume_roundtrip_bit_exact() {
        let dir = tmp();
        let d = Dims::cube(8);
        let data: Vec<f32> = (0..d.len() * 16).map(|i| (i as f32 * 0.013).sin() + 1.5).collect();
        let fv = FeatureVolume::new(d, Dims::cube(64), 16, data).unwrap();
        let p = dir.path().join("f.fvol");
        save_feature_volume(&fv, &p).unwrap();
        let back = load_feature_volume(&p).unwrap();
        assert_eq!(back.dims, d);
        assert_eq!(back.source_dims, Dims::cube(64));
        assert!(back.data().iter().zip(fv.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn stack_file_rejected_by_volume_loader() {
        let dir = tmp();
        let d = Dims::new(64, 8, 8);
        let s = FeatureStack::new(Axis::X, d, 384, vec![0.25; d.len() * 384])
            .unwrap()
            .with_dtype(FeatureDtype::F16);
        let p = dir.path().join("s.fstk");
        save_feature_stack(&s, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len() as usize, 33 + d.len() * 384 * 2);
        assert!(matches!(load_feature_volume(&p), Err(GridError::BadMagic { .. })));
        let back = load_feature_stack(&p).unwrap();
        assert_eq!(back.axis, Axis::X);
        assert_eq!(back.dtype, FeatureDtype::F16);
        assert!(back.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn truncated_payloads_rejected() {
        let dir = tmp();
        let fv = FeatureVolume::new(Dims::cube(2), Dims::cube(16), 4, vec![1.0; 32]).unwrap();
        let p = dir.path().join("f.fvol");
        save_feature_volume(&fv, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_feature_volume(&p), Err(GridError::DimMismatch { .. })));

        let s = SimilarityVolume::new(Dims::cube(2), vec![0.5; 8], Resolution::Refined, 3).unwrap();
        let q = dir.path().join("s.svol");
        save_similarity_volume(&s, &q).unwrap();
        let back = load_similarity_volume(&q, 3).unwrap();
        assert_eq!(back, s);
        let mut bytes = fs::read(&q).unwrap();
        bytes.push(0);
        fs::write(&q, &bytes).unwrap();
        assert!(matches!(load_similarity_volume(&q, 3), Err(GridError::DimMismatch { .. })));
    }

    #[test]
    fn version_guard() {
        let dir = tmp();
        let s = SimilarityVolume::zeros(Dims::cube(1), Resolution::Low, 0);
        let p = dir.path().join("s.svol");
        save_similarity_volume(&s, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[4] = 2;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_similarity_volume(&p, 0), Err(GridError::VersionUnsupported(2))));
    }
}
