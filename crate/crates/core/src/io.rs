//! On-disk formats: Gaussian snapshots (FLGS), occupancy dumps (FLOC),
//! volumes (FLVL), camera rigs and pose deltas (JSON), 16-bit PGM images
//! and dataset directories.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraRig, CameraView, Intrinsics, Pose, PoseDelta, RigCamera};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, GaussianSet};
use crate::grid::GridSpec;
use crate::image::Image;
use crate::phantom::PhantomSpec;
use crate::sh;

pub const FLGS_MAGIC: &[u8; 4] = b"FLGS";
pub const FLGS_VERSION: u32 = 1;
pub const FLOC_MAGIC: &[u8; 4] = b"FLOC";
pub const FLVL_MAGIC: &[u8; 4] = b"FLVL";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

struct Cursor<'a> {
    kind: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(kind: &'static str, bytes: &'a [u8]) -> Self {
        Self { kind, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.kind,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(self.kind, "bad magic"));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.kind,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn encode_flgs(set: &GaussianSet) -> Vec<u8> {
    let nc = sh::coeff_count(set.sh_degree);
    let mut out = Vec::with_capacity(16 + set.len() * 4 * (11 + nc));
    out.extend_from_slice(FLGS_MAGIC);
    put_u32(&mut out, FLGS_VERSION);
    put_u32(&mut out, set.len() as u32);
    put_u32(&mut out, set.sh_degree);
    for g in &set.gaussians {
        for v in g.position.iter().chain(&g.log_scale).chain(&g.rotation) {
            put_f32(&mut out, *v);
        }
        put_f32(&mut out, g.opacity_logit);
        for v in &g.sh_coeffs {
            put_f32(&mut out, *v);
        }
    }
    out
}

pub fn decode_flgs(bytes: &[u8]) -> Result<GaussianSet> {
    let mut c = Cursor::new("FLGS", bytes);
    c.magic(FLGS_MAGIC)?;
    let version = c.u32()?;
    if version != FLGS_VERSION {
        return Err(Error::format("FLGS", format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let sh_degree = c.u32()?;
    if sh_degree > sh::MAX_SH_DEGREE {
        return Err(Error::format("FLGS", format!("sh_degree {sh_degree} too large")));
    }
    let nc = sh::coeff_count(sh_degree);
    let expected = 16 + count * 4 * (11 + nc);
    if bytes.len() != expected {
        return Err(Error::format(
            "FLGS",
            format!("{} bytes, expected {expected} for {count} Gaussians", bytes.len()),
        ));
    }
    let mut gaussians = Vec::with_capacity(count);
    for _ in 0..count {
        let position = Vector3::new(c.f32()?, c.f32()?, c.f32()?);
        let log_scale = Vector3::new(c.f32()?, c.f32()?, c.f32()?);
        let rotation = Vector4::new(c.f32()?, c.f32()?, c.f32()?, c.f32()?);
        let opacity_logit = c.f32()?;
        let sh_coeffs = (0..nc).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
        gaussians.push(Gaussian3D {
            position,
            log_scale,
            rotation,
            opacity_logit,
            sh_coeffs,
        });
    }
    c.finish()?;
    GaussianSet::new(gaussians, sh_degree).map_err(|e| Error::format("FLGS", e.to_string()))
}

pub fn write_flgs(path: &Path, set: &GaussianSet) -> Result<()> {
    fs::write(path, encode_flgs(set))?;
    Ok(())
}

pub fn read_flgs(path: &Path) -> Result<GaussianSet> {
    decode_flgs(&fs::read(path)?)
}

fn put_grid_header(out: &mut Vec<u8>, magic: &[u8; 4], spec: &GridSpec) {
    out.extend_from_slice(magic);
    for d in spec.dims {
        put_u32(out, d as u32);
    }
    for v in spec.bbox_min.iter().chain(&spec.bbox_max) {
        put_f32(out, *v);
    }
}

fn read_grid_header(c: &mut Cursor, magic: &[u8; 4]) -> Result<GridSpec> {
    c.magic(magic)?;
    let dims = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
    let min = Vector3::new(c.f32()?, c.f32()?, c.f32()?);
    let max = Vector3::new(c.f32()?, c.f32()?, c.f32()?);
    GridSpec::new(dims, min, max).map_err(|e| Error::format(c.kind, e.to_string()))
}

/// Occupancy dump: per-voxel view-hit counts, saturating at 255.
pub fn encode_floc(spec: &GridSpec, counts: &[u32]) -> Result<Vec<u8>> {
    if counts.len() != spec.voxel_count() {
        return Err(Error::InvalidArgument(format!(
            "{} counts for {} voxels",
            counts.len(),
            spec.voxel_count()
        )));
    }
    let mut out = Vec::with_capacity(40 + counts.len());
    put_grid_header(&mut out, FLOC_MAGIC, spec);
    out.extend(counts.iter().map(|&c| c.min(255) as u8));
    Ok(out)
}

pub fn decode_floc(bytes: &[u8]) -> Result<(GridSpec, Vec<u8>)> {
    let mut c = Cursor::new("FLOC", bytes);
    let spec = read_grid_header(&mut c, FLOC_MAGIC)?;
    let counts = c.take(spec.voxel_count())?.to_vec();
    c.finish()?;
    Ok((spec, counts))
}

pub fn encode_flvl(spec: &GridSpec, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != spec.voxel_count() {
        return Err(Error::InvalidArgument(format!(
            "{} values for {} voxels",
            values.len(),
            spec.voxel_count()
        )));
    }
    let mut out = Vec::with_capacity(40 + 4 * values.len());
    put_grid_header(&mut out, FLVL_MAGIC, spec);
    for v in values {
        put_f32(&mut out, *v);
    }
    Ok(out)
}

pub fn decode_flvl(bytes: &[u8]) -> Result<(GridSpec, Vec<f64>)> {
    let mut c = Cursor::new("FLVL", bytes);
    let spec = read_grid_header(&mut c, FLVL_MAGIC)?;
    let values = (0..spec.voxel_count()).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
    c.finish()?;
    Ok((spec, values))
}

#[derive(Serialize, Deserialize)]
struct RigFile {
    cameras: Vec<RigCameraFile>,
}

#[derive(Serialize, Deserialize)]
struct RigCameraFile {
    id: String,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

pub fn rig_to_json(rig: &CameraRig) -> Result<String> {
    let file = RigFile {
        cameras: rig
            .cameras
            .iter()
            .map(|c| {
                let m = &c.pose.rotation;
                let mut r = [0.0; 9];
                for i in 0..3 {
                    for j in 0..3 {
                        r[3 * i + j] = m[(i, j)];
                    }
                }
                let i = &c.intrinsics;
                RigCameraFile {
                    id: c.id.clone(),
                    width: i.width,
                    height: i.height,
                    fx: i.fx,
                    fy: i.fy,
                    cx: i.cx,
                    cy: i.cy,
                    r,
                    t: c.pose.translation.into(),
                }
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn rig_from_json(text: &str) -> Result<CameraRig> {
    let file: RigFile = serde_json::from_str(text)?;
    let rig = CameraRig {
        cameras: file
            .cameras
            .into_iter()
            .map(|c| RigCamera {
                id: c.id,
                intrinsics: Intrinsics {
                    fx: c.fx,
                    fy: c.fy,
                    cx: c.cx,
                    cy: c.cy,
                    width: c.width,
                    height: c.height,
                },
                pose: Pose {
                    rotation: Matrix3::from_row_slice(&c.r),
                    translation: Vector3::from(c.t),
                },
            })
            .collect(),
    };
    rig.validate()?;
    Ok(rig)
}

pub fn write_rig(path: &Path, rig: &CameraRig) -> Result<()> {
    fs::write(path, rig_to_json(rig)?)?;
    Ok(())
}

pub fn read_rig(path: &Path) -> Result<CameraRig> {
    rig_from_json(&fs::read_to_string(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDeltaRecord {
    pub id: String,
    pub delta_rot: [f64; 3],
    pub delta_t: [f64; 3],
}

impl PoseDeltaRecord {
    pub fn new(id: &str, d: &PoseDelta) -> Self {
        Self {
            id: id.to_string(),
            delta_rot: d.delta_rot.into(),
            delta_t: d.delta_t.into(),
        }
    }

    pub fn delta(&self) -> PoseDelta {
        PoseDelta {
            delta_rot: Vector3::from(self.delta_rot),
            delta_t: Vector3::from(self.delta_t),
        }
    }
}

pub fn write_pose_deltas(path: &Path, views: &[CameraView]) -> Result<()> {
    let records: Vec<_> = views
        .iter()
        .map(|v| PoseDeltaRecord::new(&v.id, &v.pose_delta))
        .collect();
    fs::write(path, serde_json::to_string_pretty(&records)?)?;
    Ok(())
}

pub fn read_pose_deltas(path: &Path) -> Result<Vec<PoseDeltaRecord>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Binary 16-bit PGM; pixels are clamped to `[0, 1]` and scaled to 65535.
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let header = format!("P5\n{} {}\n65535\n", image.width(), image.height());
    let mut out = Vec::with_capacity(header.len() + 2 * image.len());
    out.extend_from_slice(header.as_bytes());
    for v in image.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    // header: magic, width, height, maxval separated by whitespace, with
    // '#' comments allowed; exactly one whitespace byte before the raster
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("PGM", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::format("PGM", format!("unsupported magic {}", fields[0])));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::format("PGM", format!("bad header field {s}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("PGM", format!("bad maxval {maxval}")));
    }
    let bpp = if maxval > 255 { 2 } else { 1 };
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != w * h * bpp {
        return Err(Error::format(
            "PGM",
            format!("raster is {} bytes, expected {}", raster.len(), w * h * bpp),
        ));
    }
    let scale = maxval as f64;
    let data = if bpp == 2 {
        raster
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / scale)
            .collect()
    } else {
        raster.iter().map(|&b| b as f64 / scale).collect()
    };
    Image::from_vec(w, h, data)
}

pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_pgm(image))?;
    f.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(path)?).read_to_end(&mut bytes)?;
    decode_pgm(&bytes)
}

#[derive(Serialize, Deserialize)]
struct PhantomFile {
    seed: Option<u64>,
    components: Vec<PhantomComponentFile>,
}

#[derive(Serialize, Deserialize)]
struct PhantomComponentFile {
    weight: f64,
    mean: [f64; 3],
    covariance: [f64; 9],
}

pub fn phantom_to_json(spec: &PhantomSpec) -> Result<String> {
    let file = PhantomFile {
        seed: spec.seed,
        components: spec
            .components
            .iter()
            .map(|c| {
                let mut cov = [0.0; 9];
                for i in 0..3 {
                    for j in 0..3 {
                        cov[3 * i + j] = c.covariance[(i, j)];
                    }
                }
                PhantomComponentFile {
                    weight: c.weight,
                    mean: c.mean.into(),
                    covariance: cov,
                }
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn phantom_from_json(text: &str) -> Result<PhantomSpec> {
    let file: PhantomFile = serde_json::from_str(text)?;
    let components = file
        .components
        .into_iter()
        .map(|c| crate::phantom::PhantomComponent {
            weight: c.weight,
            mean: Vector3::from(c.mean),
            covariance: Matrix3::from_row_slice(&c.covariance),
        })
        .collect();
    PhantomSpec::new(components, file.seed)
}

pub fn view_file_name(id: &str) -> String {
    format!("view_{id}.pgm")
}

/// Writes `rig.json`, one PGM per camera and optionally `phantom.json`.
pub fn save_dataset(
    dir: &Path,
    rig: &CameraRig,
    images: &[Image],
    phantom: Option<&PhantomSpec>,
) -> Result<()> {
    rig.validate()?;
    if images.len() != rig.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images for {} cameras",
            images.len(),
            rig.len()
        )));
    }
    fs::create_dir_all(dir)?;
    write_rig(&dir.join("rig.json"), rig)?;
    for (cam, im) in rig.cameras.iter().zip(images) {
        write_pgm(&dir.join(view_file_name(&cam.id)), im)?;
    }
    if let Some(p) = phantom {
        fs::write(dir.join("phantom.json"), phantom_to_json(p)?)?;
    }
    Ok(())
}

/// Reads a dataset directory; the phantom is `None` when `phantom.json` is
/// absent.
pub fn load_dataset(dir: &Path) -> Result<(CameraRig, Vec<Image>, Option<PhantomSpec>)> {
    let rig = read_rig(&dir.join("rig.json"))?;
    let mut images = Vec::with_capacity(rig.len());
    for cam in &rig.cameras {
        let im = read_pgm(&dir.join(view_file_name(&cam.id)))?;
        if im.width() != cam.intrinsics.width || im.height() != cam.intrinsics.height {
            return Err(Error::format(
                "dataset",
                format!(
                    "view {} is {}x{}, rig says {}x{}",
                    cam.id,
                    im.width(),
                    im.height(),
                    cam.intrinsics.width,
                    cam.intrinsics.height
                ),
            ));
        }
        images.push(im);
    }
    let phantom_path = dir.join("phantom.json");
    let phantom = if phantom_path.exists() {
        Some(phantom_from_json(&fs::read_to_string(phantom_path)?)?)
    } else {
        None
    };
    Ok((rig, images, phantom))
}
