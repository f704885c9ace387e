//! Client-side sectioning: cut a part into closed horizontal slabs one layer
//! tall, and add the guide frame that keeps every slab's footprint identical.

use std::collections::HashMap;
use std::io;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus;
use crate::geom2d::{triangulate, Ring, P2};
use crate::mesh::{write_stl, Aabb, Mesh, MeshError, Provenance, StlFormat, Triangle, Vec3};

/// Vertices within this distance of a cut plane are treated as lying on it.
const PLANE_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SectionError {
    #[error(transparent)]
    Mesh(MeshError),
    #[error("mesh is empty")]
    Empty,
    #[error("mesh is not on the bed (min z = {0})")]
    NotOnBed(f64),
    #[error("layer height {0} must be positive")]
    BadLayerHeight(f64),
    #[error("layer height {h} outside machine range [{min}, {max}]")]
    OutOfRange { h: f64, min: f64, max: f64 },
    #[error("cannot build cross-section at z = {z}: {detail}")]
    Contour { z: f64, detail: String },
    #[error("{0}")]
    Invalid(String),
}

/// One horizontal piece of the job.
#[derive(Debug, Clone, PartialEq)]
pub struct Slab {
    pub index: u32,
    pub z_lo: f64,
    pub z_hi: f64,
    pub body: Mesh,
    pub guide: Mesh,
}

impl Slab {
    /// Body and guide as one mesh, the form that is exported and streamed.
    pub fn merged(&self) -> Mesh {
        let mut m = self.body.clone();
        m.extend(&self.guide);
        m
    }

    pub fn to_stl(&self) -> Vec<u8> {
        write_stl(&self.merged(), StlFormat::Binary)
    }
}

/// Number of slabs for a part `height` tall. A tiny remainder left by
/// floating-point division does not produce an extra slab.
pub fn slab_count(height: f64, h: f64) -> usize {
    (height / h - 1e-9).ceil().max(0.0) as usize
}

/// Split a closed, bed-standing mesh into slabs of height `h`.
pub fn section_mesh(mesh: &Mesh, h: f64, allowed: RangeInclusive<f64>) -> Result<Vec<Slab>, SectionError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(SectionError::BadLayerHeight(h));
    }
    if !allowed.contains(&h) {
        return Err(SectionError::OutOfRange { h, min: *allowed.start(), max: *allowed.end() });
    }
    if mesh.is_empty() {
        return Err(SectionError::Empty);
    }
    mesh.signed_volume().map_err(SectionError::Mesh)?;
    let b = mesh.aabb().ok_or(SectionError::Empty)?;
    if b.min.z.abs() > 1e-6 {
        return Err(SectionError::NotOnBed(b.min.z));
    }
    let height = b.max.z;
    let k = slab_count(height, h);
    let shells = shell_ids(mesh);
    let mut slabs = Vec::with_capacity(k);
    for n in 0..k {
        let z_lo = n as f64 * h;
        let z_hi = if n + 1 == k { height } else { (n + 1) as f64 * h };
        let body = clip_with_shells(mesh, &shells, z_lo, z_hi)?;
        slabs.push(Slab { index: n as u32, z_lo, z_hi, body, guide: Mesh::default() });
    }
    Ok(slabs)
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    In,
    On,
    Out,
}

fn side(s: f64) -> Side {
    if s > PLANE_EPS {
        Side::In
    } else if s >= -PLANE_EPS {
        Side::On
    } else {
        Side::Out
    }
}

/// Point where edge (a, b) meets the plane z = zp. Endpoints are put in a
/// fixed order first so both triangles sharing the edge get identical bits.
fn edge_at_z(a: Vec3, b: Vec3, zp: f64) -> Vec3 {
    let (p, q) = if a.key() <= b.key() { (a, b) } else { (b, a) };
    let t = (zp - p.z) / (q.z - p.z);
    Vec3::new(p.x + (q.x - p.x) * t, p.y + (q.y - p.y) * t, zp)
}

/// Keep the part of a convex polygon where `dist(v) >= 0`.
fn clip_polygon(poly: &[Vec3], zp: f64, dist: impl Fn(Vec3) -> f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (sa, sb) = (side(dist(a)), side(dist(b)));
        if sa != Side::Out {
            out.push(a);
        }
        if (sa == Side::In && sb == Side::Out) || (sa == Side::Out && sb == Side::In) {
            out.push(edge_at_z(a, b, zp));
        }
    }
    out
}

/// Edge-connected shell index of every triangle.
fn shell_ids(mesh: &Mesh) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..mesh.len()).collect();
    let mut owner: HashMap<(Key, Key), usize> = HashMap::new();
    for (ti, t) in mesh.triangles.iter().enumerate() {
        for i in 0..3 {
            let (ka, kb) = (t.v[i].key(), t.v[(i + 1) % 3].key());
            let other = *owner.entry((ka.min(kb), ka.max(kb))).or_insert(ti);
            let (ra, rb) = (find(&mut parent, ti), find(&mut parent, other));
            if ra != rb {
                parent[ra] = rb;
            }
        }
    }
    (0..mesh.len()).map(|i| find(&mut parent, i)).collect()
}

/// The closed portion of `mesh` between two planes, with the cut faces capped.
pub fn clip_slab(mesh: &Mesh, z_lo: f64, z_hi: f64) -> Result<Mesh, SectionError> {
    clip_with_shells(mesh, &shell_ids(mesh), z_lo, z_hi)
}

fn clip_with_shells(mesh: &Mesh, shells: &[usize], z_lo: f64, z_hi: f64) -> Result<Mesh, SectionError> {
    let mut tris = Vec::new();
    let mut shell_of = Vec::new();
    for (t, &shell) in mesh.triangles.iter().zip(shells) {
        let zs = t.v.map(|v| v.z);
        let (mn, mx) = (zs.iter().copied().fold(f64::INFINITY, f64::min), zs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        if mx < z_lo - PLANE_EPS || mn > z_hi + PLANE_EPS {
            continue;
        }
        // facets lying in a cut plane belong to the slab they bound
        let flat = mx - mn <= 2.0 * PLANE_EPS;
        let on_lo = flat && (mn - z_lo).abs() <= PLANE_EPS && (mx - z_lo).abs() <= PLANE_EPS;
        let on_hi = flat && (mn - z_hi).abs() <= PLANE_EPS && (mx - z_hi).abs() <= PLANE_EPS;
        if on_lo || on_hi {
            if (on_lo && t.normal.z < 0.0) || (on_hi && t.normal.z > 0.0) {
                tris.push(*t);
            }
        } else if mn >= z_lo - PLANE_EPS && mx <= z_hi + PLANE_EPS {
            tris.push(*t);
        } else {
            let poly = clip_polygon(&t.v, z_lo, |v| v.z - z_lo);
            let poly = clip_polygon(&poly, z_hi, |v| z_hi - v.z);
            for i in 1..poly.len().saturating_sub(1) {
                let (a, b, c) = (poly[0], poly[i], poly[i + 1]);
                if a != b && b != c && a != c {
                    tris.push(Triangle::new(a, b, c));
                }
            }
        }
        shell_of.resize(tris.len(), shell);
    }
    let caps = build_caps(&tris, &shell_of, z_lo, z_hi)?;
    tris.extend(caps);
    let out = Mesh::new(tris).with_provenance(Provenance::Sectioned);
    let open = out.boundary_edges();
    if !open.is_empty() {
        return Err(SectionError::Contour {
            z: z_lo,
            detail: format!("slab [{z_lo}, {z_hi}] left {} open edge(s), first {:?}", open.len(), open[0]),
        });
    }
    Ok(out)
}

type Key = [u64; 3];

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Cap triangles closing the clipped set. Boundary loops are grouped by the
/// source shell so touching or overlapping shells are capped independently.
fn build_caps(tris: &[Triangle], shell_of: &[usize], z_lo: f64, z_hi: f64) -> Result<Vec<Triangle>, SectionError> {
    // canonical edge -> (balance, oriented endpoints, one owning triangle)
    let mut edges: HashMap<(Key, Key), (i64, Vec3, Vec3, usize)> = HashMap::new();
    for (ti, t) in tris.iter().enumerate() {
        for i in 0..3 {
            let (a, b) = (t.v[i], t.v[(i + 1) % 3]);
            let (ka, kb) = (a.key(), b.key());
            let (key, d, lo, hi) = if ka < kb { ((ka, kb), 1, a, b) } else { ((kb, ka), -1, b, a) };
            edges.entry(key).or_insert((0, lo, hi, ti)).0 += d;
        }
    }
    // per (component, plane): directed cap edges in counter-clockwise-outer form
    let mut groups: HashMap<(usize, bool), Vec<(Vec3, Vec3)>> = HashMap::new();
    let mut keys: Vec<_> = edges.keys().copied().collect();
    keys.sort();
    for key in keys {
        let (bal, lo, hi, ti) = edges[&key];
        if bal == 0 {
            continue;
        }
        // boundary edge as traversed by the clipped surface
        let (a, b) = if bal > 0 { (lo, hi) } else { (hi, lo) };
        let zm = 0.5 * (a.z + b.z);
        let top = (zm - z_hi).abs() < (zm - z_lo).abs();
        let plane = if top { z_hi } else { z_lo };
        if (a.z - plane).abs() > 1e-6 || (b.z - plane).abs() > 1e-6 {
            return Err(SectionError::Contour {
                z: plane,
                detail: format!("open edge {a:?} -> {b:?} is not on a cut plane"),
            });
        }
        let comp = shell_of[ti];
        let list = groups.entry((comp, top)).or_default();
        for _ in 0..bal.unsigned_abs() {
            // the top cap runs opposite to the surface; the bottom cap is mirrored
            list.push(if top { (b, a) } else { (a, b) });
        }
    }
    let mut group_keys: Vec<_> = groups.keys().copied().collect();
    group_keys.sort();
    let mut out = Vec::new();
    for gk in group_keys {
        let top = gk.1;
        let plane = if top { z_hi } else { z_lo };
        let loops = chain_loops(&groups[&gk], plane)?;
        for t in triangulate_loops(&loops) {
            out.push(if top { Triangle::new(t[0], t[1], t[2]) } else { Triangle::new(t[0], t[2], t[1]) });
        }
    }
    Ok(out)
}

/// Join directed edges into closed loops. Where several edges leave one
/// vertex, the sharpest left turn wins, which keeps loops that touch at a
/// vertex apart.
fn chain_loops(edges: &[(Vec3, Vec3)], z: f64) -> Result<Vec<Vec<Vec3>>, SectionError> {
    let mut out_of: HashMap<Key, Vec<usize>> = HashMap::new();
    for (i, (a, _)) in edges.iter().enumerate() {
        out_of.entry(a.key()).or_default().push(i);
    }
    let mut used = vec![false; edges.len()];
    let mut loops = Vec::new();
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let origin = edges[start].0.key();
        let mut ring = vec![edges[start].0];
        let mut cur = start;
        loop {
            let (a, b) = edges[cur];
            if b.key() == origin {
                break;
            }
            ring.push(b);
            let din = (b.x - a.x, b.y - a.y);
            let next = out_of
                .get(&b.key())
                .into_iter()
                .flatten()
                .copied()
                .filter(|&i| !used[i])
                .max_by(|&i, &j| {
                    let turn = |k: usize| {
                        let (p, q) = edges[k];
                        let d = (q.x - p.x, q.y - p.y);
                        (din.0 * d.1 - din.1 * d.0).atan2(din.0 * d.0 + din.1 * d.1)
                    };
                    turn(i).total_cmp(&turn(j)).then(j.cmp(&i))
                });
            let Some(next) = next else {
                return Err(SectionError::Contour { z, detail: format!("cap boundary breaks off at {b:?}") });
            };
            used[next] = true;
            cur = next;
        }
        loops.push(ring);
    }
    Ok(loops)
}

/// Nest loops into outer/hole groups by area sign and containment, then ear
/// clip each group. Returns triangles counter-clockwise in XY.
fn triangulate_loops(loops: &[Vec<Vec3>]) -> Vec<[Vec3; 3]> {
    let flat = |l: &Vec<Vec3>| Ring(l.iter().map(|v| P2::new(v.x, v.y)).collect());
    let rings: Vec<Ring> = loops.iter().map(flat).collect();
    let areas: Vec<f64> = rings.iter().map(Ring::signed_area).collect();
    let outers: Vec<usize> = (0..loops.len()).filter(|&i| areas[i] > 0.0).collect();
    let mut holes_of: HashMap<usize, Vec<usize>> = HashMap::new();
    for h in (0..loops.len()).filter(|&i| areas[i] < 0.0) {
        // a point just on the material side of the hole's first edge
        let r = &rings[h].0;
        let (a, b) = (r[0], r[1 % r.len()]);
        let len = a.dist(b).max(1e-300);
        let nudge = 1e-7 * len.max(1e-3) / len;
        let probe = P2::new(0.5 * (a.x + b.x) - (b.y - a.y) * nudge, 0.5 * (a.y + b.y) + (b.x - a.x) * nudge);
        let owner = outers
            .iter()
            .copied()
            .filter(|&o| rings[o].contains(probe))
            .min_by(|&x, &y| areas[x].total_cmp(&areas[y]));
        match owner {
            Some(o) => holes_of.entry(o).or_default().push(h),
            None => log::warn!("cap hole without enclosing outline dropped"),
        }
    }
    let mut out = Vec::new();
    for o in outers {
        let hs = holes_of.remove(&o).unwrap_or_default();
        let mut verts: Vec<Vec3> = loops[o].clone();
        let hole_pts: Vec<Vec<P2>> = hs.iter().map(|&h| rings[h].0.clone()).collect();
        for &h in &hs {
            verts.extend_from_slice(&loops[h]);
        }
        for t in triangulate(&rings[o].0, &hole_pts) {
            out.push([verts[t[0]], verts[t[1]], verts[t[2]]]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Corner {
    #[default]
    NE,
    NW,
    SE,
    SW,
}

impl std::str::FromStr for Corner {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "NE" => Ok(Corner::NE),
            "NW" => Ok(Corner::NW),
            "SE" => Ok(Corner::SE),
            "SW" => Ok(Corner::SW),
            _ => Err(format!("unknown corner {s:?}")),
        }
    }
}

/// Rectangular frame printed around the part on every layer, plus a small
/// marker block just outside one of its corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuideSpec {
    pub margin: f64,
    pub wall: f64,
    pub dot_size: f64,
    pub dot_corner: Corner,
}

impl Default for GuideSpec {
    fn default() -> Self {
        Self { margin: 2.0, wall: 1.0, dot_size: 2.0, dot_corner: Corner::NE }
    }
}

/// XY rectangle covered by the frame and dot of `guide` around `job`.
pub fn guide_footprint(guide: &GuideSpec, job: &Aabb) -> (P2, P2) {
    let m = guide_mesh(guide, job, 0.0, 1.0).aabb().expect("guide mesh is never empty");
    (P2::new(m.min.x, m.min.y), P2::new(m.max.x, m.max.y))
}

fn guide_mesh(guide: &GuideSpec, job: &Aabb, z_lo: f64, z_hi: f64) -> Mesh {
    let rect = |d: f64| {
        let (x0, y0, x1, y1) = (job.min.x - d, job.min.y - d, job.max.x + d, job.max.y + d);
        vec![P2::new(x0, y0), P2::new(x1, y0), P2::new(x1, y1), P2::new(x0, y1)]
    };
    let outer_d = guide.margin + guide.wall;
    let hole: Vec<P2> = rect(guide.margin).into_iter().rev().collect();
    let mut m = corpus::extrude(&rect(outer_d), &[hole], z_lo, z_hi);
    let (x0, y0, x1, y1) = (job.min.x - outer_d, job.min.y - outer_d, job.max.x + outer_d, job.max.y + outer_d);
    let (g, s) = (guide.margin, guide.dot_size);
    let (dx, dy) = match guide.dot_corner {
        Corner::NE => (x1 + g, y1 + g),
        Corner::NW => (x0 - g - s, y1 + g),
        Corner::SE => (x1 + g, y0 - g - s),
        Corner::SW => (x0 - g - s, y0 - g - s),
    };
    m.extend(&corpus::cuboid(Vec3::new(dx, dy, z_lo), Vec3::new(dx + s, dy + s, z_hi)));
    m.with_provenance(Provenance::Sectioned)
}

/// Attach the guide frame for a job whose XY extent is `job` to `slab`.
pub fn add_guideline(mut slab: Slab, guide: &GuideSpec, job: &Aabb) -> Result<Slab, SectionError> {
    let size = job.size();
    if !(size.x > 0.0 && size.y > 0.0) || !job.min.is_finite() || !job.max.is_finite() {
        return Err(SectionError::Invalid(format!("degenerate job extent {:?}..{:?}", job.min, job.max)));
    }
    if !(guide.margin > 0.0 && guide.wall > 0.0 && guide.dot_size > 0.0) {
        return Err(SectionError::Invalid("guide margin, wall and dot size must be positive".into()));
    }
    slab.guide = guide_mesh(guide, job, slab.z_lo, slab.z_hi);
    Ok(slab)
}

pub fn layer_file_name(n: u32) -> String {
    format!("layer_{n}.stl")
}

/// Write each slab as its own binary STL file in `dir`.
pub fn export_slabs(slabs: &[Slab], dir: &Path) -> io::Result<Vec<PathBuf>> {
    slabs
        .iter()
        .map(|s| {
            let p = dir.join(layer_file_name(s.index));
            std::fs::write(&p, s.to_stl())?;
            Ok(p)
        })
        .collect()
}
