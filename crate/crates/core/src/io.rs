//! Binary and text file formats: OCC1 grids, PCB1 clouds, scene text, TPL1
//! plane dumps and CKPT1 checkpoints. All binary numbers are little-endian.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{quat_to_matrix, Quaternion, Vec3};
use crate::nn::AdamState;
use crate::pointcloud::PointCloud;
use crate::scene::{OccupancyGrid, PrimitiveKind, SdfPrimitive, SdfScene};
use crate::triplane::TriplaneGroup;

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], format: &'static str, magic: &[u8]) -> Result<Self> {
        if buf.len() < magic.len() || &buf[..magic.len()] != magic {
            return Err(Error::format(format, "bad magic"));
        }
        Ok(Self { buf, at: magic.len(), format })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::format(self.format, "truncated"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.format, "length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::format(self.format, format!("{} trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

pub fn write_occ1(grid: &OccupancyGrid) -> Vec<u8> {
    let mut out = b"OCC1".to_vec();
    for a in 0..3 {
        out.extend((grid.origin[a] as f32).to_le_bytes());
    }
    out.extend((grid.voxel_size as f32).to_le_bytes());
    for d in grid.dims {
        out.extend((d as u32).to_le_bytes());
    }
    out.extend_from_slice(grid.bytes());
    out
}

pub fn read_occ1(buf: &[u8]) -> Result<OccupancyGrid> {
    let mut r = Reader::new(buf, "OCC1", b"OCC1")?;
    let origin = Vec3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64);
    let v = r.f32()? as f64;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let n = dims.iter().map(|&d| d as u64).product::<u64>();
    let bits = r.take(n.div_ceil(8) as usize)?.to_vec();
    r.finish()?;
    OccupancyGrid::from_bits(origin, v, dims, bits).map_err(|e| Error::format("OCC1", e.to_string()))
}

pub fn write_pcb1(cloud: &PointCloud) -> Vec<u8> {
    let mut out = b"PCB1".to_vec();
    out.extend((cloud.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for a in 0..3 {
            out.extend((p[a] as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_pcb1(buf: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new(buf, "PCB1", b"PCB1")?;
    let n = r.u32()? as usize;
    if (buf.len() - 8) != n * 12 {
        return Err(Error::format("PCB1", format!("count {n} does not match {} payload bytes", buf.len() - 8)));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let p = Vec3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::format("PCB1", "non-finite coordinate"));
        }
        points.push(p);
    }
    r.finish()?;
    Ok(PointCloud::new(points))
}

/// One primitive per line: `kind cx cy cz qx qy qz qw params...`, where the
/// quaternion fields hold `(s, vx, vy, vz)` in that order.
pub fn write_scene_text(scene: &SdfScene) -> String {
    let mut out = String::new();
    for o in &scene.objects {
        let q = o.quaternion;
        let t = o.translation;
        let _ = write!(out, "{} {} {} {} {} {} {} {}", o.kind.name(), t.x, t.y, t.z, q.s, q.vx, q.vy, q.vz);
        for p in o.kind.params() {
            let _ = write!(out, " {p}");
        }
        out.push('\n');
    }
    out
}

/// Parses scene text into primitives on the standard desk. Blank lines and
/// lines starting with `#` are skipped.
pub fn read_scene_text(text: &str, rng_seed: u64) -> Result<SdfScene> {
    let mut objects = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.split_whitespace();
        let kind = f.next().unwrap();
        let nums: Vec<f64> = f
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("scene", format!("line {}: {e}", n + 1)))?;
        if nums.len() < 7 {
            return Err(Error::format("scene", format!("line {}: expected pose and parameters", n + 1)));
        }
        let q = Quaternion::new(nums[3], nums[4], nums[5], nums[6]);
        quat_to_matrix(&q).map_err(|e| Error::format("scene", format!("line {}: {e}", n + 1)))?;
        let shape = PrimitiveKind::from_parts(kind, &nums[7..])
            .map_err(|e| Error::format("scene", format!("line {}: {e}", n + 1)))?;
        objects.push(SdfPrimitive::new(shape, q, Vec3::new(nums[0], nums[1], nums[2]))?);
    }
    Ok(SdfScene::desk(objects, rng_seed))
}

/// Plane dump: `TPL1`, u32 K, H, W, C, then every group's three planes as
/// f32 in `[C, H, W]` order. Encoded planes are written when present.
pub fn write_tpl1(groups: &[TriplaneGroup]) -> Result<Vec<u8>> {
    let first = groups.first().ok_or_else(|| Error::InvalidArgument("no groups".into()))?;
    let pick = |g: &TriplaneGroup| g.encoded.clone().unwrap_or_else(|| g.raw.clone());
    let p0 = pick(first);
    let (c, h, w) = (p0[0].channels, p0[0].height, p0[0].width);
    let mut out = b"TPL1".to_vec();
    for v in [groups.len(), h, w, c] {
        out.extend((v as u32).to_le_bytes());
    }
    for g in groups {
        for p in pick(g) {
            if (p.channels, p.height, p.width) != (c, h, w) {
                return Err(Error::shape(
                    format!("[{c}, {h}, {w}]"),
                    format!("[{}, {}, {}]", p.channels, p.height, p.width),
                ));
            }
            for v in &p.data {
                out.extend((*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// `(K, H, W, C, values)` of a TPL1 dump.
pub fn read_tpl1(buf: &[u8]) -> Result<(usize, usize, usize, usize, Vec<f32>)> {
    let mut r = Reader::new(buf, "TPL1", b"TPL1")?;
    let (k, h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = k * 3 * c * h * w;
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        vals.push(r.f32()?);
    }
    r.finish()?;
    Ok((k, h, w, c, vals))
}

/// Contents of a CKPT1 checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub params: Vec<f64>,
    pub adam: Option<AdamState>,
}

/// `CKPT1`, u32 descriptor length + UTF-8 descriptor, u64 parameter count,
/// f64 parameters, then a u8 flag and, when set, the Adam step (u64) and the
/// first and second moment vectors.
pub fn write_ckpt1(ck: &Checkpoint) -> Vec<u8> {
    let mut out = b"CKPT1".to_vec();
    out.extend((ck.descriptor.len() as u32).to_le_bytes());
    out.extend(ck.descriptor.as_bytes());
    out.extend((ck.params.len() as u64).to_le_bytes());
    for p in &ck.params {
        out.extend(p.to_le_bytes());
    }
    match &ck.adam {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend(a.t.to_le_bytes());
            for v in a.m.iter().chain(&a.v) {
                out.extend(v.to_le_bytes());
            }
        }
    }
    out
}

pub fn read_ckpt1(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf, "CKPT1", b"CKPT1")?;
    let len = r.u32()? as usize;
    let descriptor =
        String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format("CKPT1", "descriptor is not UTF-8"))?;
    let n = r.u64()? as usize;
    let params = r.f64s(n)?;
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            Some(AdamState { m, v, t })
        }
        f => return Err(Error::format("CKPT1", format!("bad optimizer flag {f}"))),
    };
    r.finish()?;
    Ok(Checkpoint { descriptor, params, adam })
}
