//! Triangle meshes: STL reading and writing, rigid transforms, and the
//! geometric checks (closedness, signed volume) the rest of the pipeline
//! relies on.
//!
//! All coordinates are millimeters. STL carries no unit metadata, so this is
//! asserted rather than detected.

use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

/// Triangles with an area below this (mm²) are dropped when parsing.
pub const DEGENERATE_AREA: f64 = 1e-12;

const STL_HEADER: &[u8] = b"stlstream binary STL";

#[derive(Debug, Error, PartialEq)]
pub enum StlError {
    #[error("binary STL truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("triangle count mismatch: header declares {declared}, body holds {actual}")]
    CountMismatch { declared: usize, actual: usize },
    #[error("ASCII STL line {line}: {detail}")]
    Ascii { line: usize, detail: String },
    #[error("STL contains no usable triangles")]
    Empty,
    #[error("non-finite coordinate in triangle {0}")]
    NonFinite(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("mesh is not closed: {} boundary edge(s), first {:?}", .boundary.len(), .boundary.first())]
    NotClosed { boundary: Vec<(Vec3, Vec3)> },
    #[error("mesh is empty")]
    Empty,
    #[error("rotation is not proper orthonormal (det = {0})")]
    BadRotation(f64),
}

#[derive(Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl fmt::Debug for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Unit vector, or zero for a zero-length input.
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            Vec3::ZERO
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    /// Exact identity key; `-0.0` and `0.0` map to the same key.
    pub fn key(self) -> [u64; 3] {
        let k = |v: f64| if v == 0.0 { 0u64 } else { v.to_bits() };
        [k(self.x), k(self.y), k(self.z)]
    }

    /// The same point as it will be stored in a binary STL.
    pub fn to_f32_precision(self) -> Vec3 {
        Vec3::new(self.x as f32 as f64, self.y as f32 as f64, self.z as f32 as f64)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A facet. The normal is always derived from the winding (right-hand rule).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub normal: Vec3,
    pub v: [Vec3; 3],
}

impl Triangle {
    pub fn new(v0: Vec3, v1: Vec3, v2: Vec3) -> Self {
        let normal = (v1 - v0).cross(v2 - v0).normalized();
        Self { normal, v: [v0, v1, v2] }
    }

    pub fn area(&self) -> f64 {
        0.5 * (self.v[1] - self.v[0]).cross(self.v[2] - self.v[0]).norm()
    }

    pub fn centroid(&self) -> Vec3 {
        (self.v[0] + self.v[1] + self.v[2]) * (1.0 / 3.0)
    }

    pub fn flipped(&self) -> Triangle {
        Triangle::new(self.v[0], self.v[2], self.v[1])
    }

    fn signed_volume_term(&self) -> f64 {
        self.v[0].dot(self.v[1].cross(self.v[2])) / 6.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Provenance {
    #[default]
    Original,
    Sectioned,
    SupportAugmented,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb { min: self.min.min(o.min), max: self.max.max(o.max) }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: [[f64; 3]; 3],
    translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self, MeshError> {
        let r = rotation;
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(MeshError::BadRotation(det));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-9 {
                    return Err(MeshError::BadRotation(det));
                }
            }
        }
        Ok(Self { rotation, translation })
    }

    pub fn translation(t: Vec3) -> Self {
        Self { translation: t, ..Self::IDENTITY }
    }

    /// Rotation by Euler angles in degrees, applied about X, then Y, then Z.
    pub fn from_euler_deg(x: f64, y: f64, z: f64) -> Self {
        let (sx, cx) = x.to_radians().sin_cos();
        let (sy, cy) = y.to_radians().sin_cos();
        let (sz, cz) = z.to_radians().sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        let rotation = matmul(rz, matmul(ry, rx));
        Self { rotation, translation: Vec3::ZERO }
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        self.rotate(v) + self.translation
    }
}

fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StlFormat {
    Binary,
    Ascii,
}

/// Result of [`parse_stl`].
#[derive(Debug, Clone)]
pub struct ParsedStl {
    pub mesh: Mesh,
    pub format: StlFormat,
    pub dropped_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub triangles: Vec<Triangle>,
    pub provenance: Provenance,
}

impl Mesh {
    pub fn new(triangles: Vec<Triangle>) -> Self {
        Self { triangles, provenance: Provenance::Original }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn aabb(&self) -> Option<Aabb> {
        let mut it = self.triangles.iter().flat_map(|t| t.v.iter().copied());
        let first = it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(Aabb { min, max })
    }

    pub fn extend(&mut self, other: &Mesh) {
        self.triangles.extend_from_slice(&other.triangles);
    }

    pub fn transformed(&self, t: &RigidTransform) -> Mesh {
        let triangles = self
            .triangles
            .iter()
            .map(|tri| Triangle {
                normal: t.rotate(tri.normal),
                v: tri.v.map(|v| t.apply(v)),
            })
            .collect();
        Mesh { triangles, provenance: self.provenance }
    }

    pub fn translated(&self, d: Vec3) -> Mesh {
        self.transformed(&RigidTransform::translation(d))
    }

    /// Translate so the lowest vertex sits at z = 0; XY is untouched.
    pub fn drop_to_bed(&self) -> Mesh {
        match self.aabb() {
            Some(b) if b.min.z != 0.0 => self.translated(Vec3::new(0.0, 0.0, -b.min.z)),
            _ => self.clone(),
        }
    }

    /// Directed edges that have no oppositely oriented partner.
    ///
    /// Vertices are identified by exact coordinates. An undirected edge is
    /// balanced when it is traversed equally often in both directions; every
    /// surplus traversal is reported once.
    pub fn boundary_edges(&self) -> Vec<(Vec3, Vec3)> {
        let mut count: HashMap<([u64; 3], [u64; 3]), (i64, Vec3, Vec3)> = HashMap::new();
        for t in &self.triangles {
            for i in 0..3 {
                let (a, b) = (t.v[i], t.v[(i + 1) % 3]);
                let (ka, kb) = (a.key(), b.key());
                if ka < kb {
                    count.entry((ka, kb)).or_insert((0, a, b)).0 += 1;
                } else {
                    count.entry((kb, ka)).or_insert((0, b, a)).0 -= 1;
                }
            }
        }
        let mut out = Vec::new();
        let mut entries: Vec<_> = count.into_iter().filter(|(_, (c, _, _))| *c != 0).collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for (_, (c, a, b)) in entries {
            let edge = if c > 0 { (a, b) } else { (b, a) };
            for _ in 0..c.unsigned_abs() {
                out.push(edge);
            }
        }
        out
    }

    pub fn is_closed(&self) -> bool {
        !self.triangles.is_empty() && self.boundary_edges().is_empty()
    }

    /// Divergence-theorem volume; positive for outward-oriented closed meshes.
    pub fn signed_volume(&self) -> Result<f64, MeshError> {
        if self.triangles.is_empty() {
            return Err(MeshError::Empty);
        }
        let boundary = self.boundary_edges();
        if !boundary.is_empty() {
            return Err(MeshError::NotClosed { boundary });
        }
        Ok(self.signed_volume_unchecked())
    }

    pub(crate) fn signed_volume_unchecked(&self) -> f64 {
        self.triangles.iter().map(Triangle::signed_volume_term).sum()
    }
}

/// Parse binary or ASCII STL.
///
/// A file that starts with `solid` but whose size matches the binary layout
/// exactly is read as binary. Stored normals are ignored and recomputed from
/// the vertex winding.
pub fn parse_stl(bytes: &[u8]) -> Result<ParsedStl, StlError> {
    let looks_ascii = bytes.len() >= 5 && bytes[..5].eq_ignore_ascii_case(b"solid");
    let binary_size = (bytes.len() >= 84).then(|| {
        let n = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
        84 + 50 * n
    });
    let (raw, format) = if looks_ascii && binary_size != Some(bytes.len()) {
        (parse_ascii(bytes)?, StlFormat::Ascii)
    } else {
        (parse_binary(bytes)?, StlFormat::Binary)
    };

    let mut triangles = Vec::with_capacity(raw.len());
    let mut dropped = 0;
    for (i, v) in raw.into_iter().enumerate() {
        if !v.iter().all(|p| p.is_finite()) {
            return Err(StlError::NonFinite(i));
        }
        let t = Triangle::new(v[0], v[1], v[2]);
        if t.area() < DEGENERATE_AREA {
            dropped += 1;
        } else {
            triangles.push(t);
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} degenerate triangle(s) while parsing STL");
    }
    if triangles.is_empty() {
        return Err(StlError::Empty);
    }
    Ok(ParsedStl { mesh: Mesh::new(triangles), format, dropped_degenerate: dropped })
}

fn parse_binary(bytes: &[u8]) -> Result<Vec<[Vec3; 3]>, StlError> {
    if bytes.len() < 84 {
        return Err(StlError::Truncated { expected: 84, found: bytes.len() });
    }
    let declared = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
    let expected = 84 + 50 * declared;
    if bytes.len() < expected {
        return Err(StlError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(StlError::CountMismatch { declared, actual: (bytes.len() - 84) / 50 });
    }
    let f = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
    Ok((0..declared)
        .map(|i| {
            let base = 84 + 50 * i + 12;
            let p = |k: usize| Vec3::new(f(base + 12 * k), f(base + 12 * k + 4), f(base + 12 * k + 8));
            [p(0), p(1), p(2)]
        })
        .collect())
}

fn parse_ascii(bytes: &[u8]) -> Result<Vec<[Vec3; 3]>, StlError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| StlError::Ascii { line: 0, detail: format!("not UTF-8: {e}") })?;
    let mut out = Vec::new();
    let mut facet: Option<Vec<Vec3>> = None;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let err = |detail: String| StlError::Ascii { line: lineno, detail };
        let mut tok = line.split_whitespace();
        let Some(head) = tok.next() else { continue };
        match head.to_ascii_lowercase().as_str() {
            "solid" | "endsolid" | "outer" | "endloop" => {}
            "facet" => {
                if facet.is_some() {
                    return Err(err("facet opened twice".into()));
                }
                facet = Some(Vec::with_capacity(3));
            }
            "vertex" => {
                let Some(f) = facet.as_mut() else {
                    return Err(err("vertex outside facet".into()));
                };
                let mut c = [0.0; 3];
                for slot in &mut c {
                    let t = tok.next().ok_or_else(|| err("vertex needs 3 coordinates".into()))?;
                    *slot = t.parse().map_err(|_| err(format!("bad number {t:?}")))?;
                }
                f.push(Vec3::new(c[0], c[1], c[2]));
            }
            "endfacet" => {
                let f = facet.take().ok_or_else(|| err("endfacet without facet".into()))?;
                if f.len() != 3 {
                    return Err(StlError::CountMismatch { declared: 3, actual: f.len() });
                }
                out.push([f[0], f[1], f[2]]);
            }
            other => return Err(err(format!("unexpected token {other:?}"))),
        }
    }
    if facet.is_some() {
        return Err(StlError::Ascii { line: text.lines().count(), detail: "unterminated facet".into() });
    }
    Ok(out)
}

/// Serialize a mesh. Binary output uses a fixed banner header and attribute 0;
/// normals are computed from the f32 vertices actually written so that a
/// parse/write cycle is bit-exact.
pub fn write_stl(mesh: &Mesh, format: StlFormat) -> Vec<u8> {
    match format {
        StlFormat::Binary => {
            let mut out = Vec::with_capacity(84 + 50 * mesh.triangles.len());
            let mut header = [b' '; 80];
            header[..STL_HEADER.len()].copy_from_slice(STL_HEADER);
            out.extend_from_slice(&header);
            out.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
            for t in &mesh.triangles {
                let v = t.v.map(Vec3::to_f32_precision);
                let n = Triangle::new(v[0], v[1], v[2]).normal;
                for p in std::iter::once(n).chain(v) {
                    for c in [p.x, p.y, p.z] {
                        out.extend_from_slice(&(c as f32).to_le_bytes());
                    }
                }
                out.extend_from_slice(&0u16.to_le_bytes());
            }
            out
        }
        StlFormat::Ascii => {
            use std::fmt::Write;
            let mut s = String::from("solid stlstream\n");
            for t in &mesh.triangles {
                let n = t.normal;
                let _ = writeln!(s, "  facet normal {:.6e} {:.6e} {:.6e}", n.x, n.y, n.z);
                s.push_str("    outer loop\n");
                for p in t.v {
                    let _ = writeln!(s, "      vertex {:.6} {:.6} {:.6}", p.x, p.y, p.z);
                }
                s.push_str("    endloop\n  endfacet\n");
            }
            s.push_str("endsolid stlstream\n");
            s.into_bytes()
        }
    }
}
