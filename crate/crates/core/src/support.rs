//! Bed-standing support pillars under overhanging facets.
//!
//! Pillars live on a square grid anchored at the origin. Every cell that sits
//! under a qualifying facet gets a column from the bed up to the facet minus a
//! clearance gap. All columns of one job form a single closed heightfield
//! shell kept apart from the part shells (no boolean union).

use std::collections::{BTreeMap, BTreeSet};

use crate::mesh::{Mesh, Provenance, Triangle, Vec3};
use crate::sectioner::SectionError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportSpec {
    /// Facets whose normal is within this angle of -Z need support.
    pub overhang_threshold_deg: f64,
    /// Side of a square pillar; also the grid pitch.
    pub pillar_xy: f64,
    /// Gap left between a pillar top and the facet it supports. Facets whose
    /// centroid is not above this height are left alone.
    pub clearance: f64,
}

impl Default for SupportSpec {
    fn default() -> Self {
        Self { overhang_threshold_deg: 45.0, pillar_xy: 2.0, clearance: 0.3 }
    }
}

impl SupportSpec {
    pub fn validate(&self) -> Result<(), SectionError> {
        let t = self.overhang_threshold_deg;
        if !(t > 0.0 && t < 90.0) {
            return Err(SectionError::Invalid(format!("overhang threshold {t} must be in (0, 90) degrees")));
        }
        if !(self.pillar_xy > 0.0) || !(self.clearance >= 0.0) {
            return Err(SectionError::Invalid("pillar size must be positive and clearance non-negative".into()));
        }
        Ok(())
    }
}

/// Facets that need support under `spec`.
pub fn overhanging_facets<'a>(mesh: &'a Mesh, spec: &SupportSpec) -> impl Iterator<Item = &'a Triangle> + 'a {
    let cos_t = spec.overhang_threshold_deg.to_radians().cos();
    let clearance = spec.clearance;
    mesh.triangles
        .iter()
        .filter(move |t| -t.normal.z > cos_t && t.centroid().z > clearance + 1e-9)
}

/// Part plus support columns. Returns the input unchanged when nothing needs
/// support.
pub fn generate_supports(mesh: &Mesh, spec: &SupportSpec) -> Result<Mesh, SectionError> {
    spec.validate()?;
    if mesh.is_empty() {
        return Err(SectionError::Empty);
    }
    mesh.signed_volume().map_err(SectionError::Mesh)?;
    let b = mesh.aabb().ok_or(SectionError::Empty)?;
    if b.min.z.abs() > 1e-6 {
        return Err(SectionError::NotOnBed(b.min.z));
    }
    let heights = column_heights(mesh, spec);
    if heights.is_empty() {
        return Ok(mesh.clone());
    }
    let mut out = mesh.clone();
    out.extend(&heightfield_shell(&heights, spec.pillar_xy));
    log::debug!("support: {} columns", heights.len());
    Ok(out.with_provenance(Provenance::SupportAugmented))
}

type Cell = (i64, i64);

fn column_heights(mesh: &Mesh, spec: &SupportSpec) -> BTreeMap<Cell, f64> {
    let p = spec.pillar_xy;
    let cell_of = |x: f64| (x / p).floor() as i64;
    let mut heights: BTreeMap<Cell, f64> = BTreeMap::new();
    for t in overhanging_facets(mesh, spec) {
        let zmin = t.v.iter().map(|v| v.z).fold(f64::INFINITY, f64::min);
        let zmax = t.v.iter().map(|v| v.z).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = (t.v[0].min(t.v[1]).min(t.v[2]), t.v[0].max(t.v[1]).max(t.v[2]));
        let mut cells = BTreeSet::new();
        let c = t.centroid();
        cells.insert((cell_of(c.x), cell_of(c.y)));
        for i in cell_of(lo.x)..=cell_of(hi.x) {
            for j in cell_of(lo.y)..=cell_of(hi.y) {
                let (cx, cy) = ((i as f64 + 0.5) * p, (j as f64 + 0.5) * p);
                if in_projection(t, cx, cy) {
                    cells.insert((i, j));
                }
            }
        }
        for (i, j) in cells {
            // lowest point of the facet plane over the cell, kept within the facet
            let (x0, y0) = (i as f64 * p, j as f64 * p);
            let corners = [(x0, y0), (x0 + p, y0), (x0, y0 + p), (x0 + p, y0 + p), (x0 + p / 2.0, y0 + p / 2.0)];
            let z = corners
                .iter()
                .map(|&(x, y)| plane_z(t, x, y).clamp(zmin, zmax))
                .fold(f64::INFINITY, f64::min);
            let top = z - spec.clearance;
            if top <= 1e-6 {
                continue;
            }
            let e = heights.entry((i, j)).or_insert(f64::INFINITY);
            *e = e.min(top);
        }
    }
    // columns must reach the bed without passing through the part
    heights.retain(|&(i, j), top| {
        let (cx, cy) = ((i as f64 + 0.5) * p, (j as f64 + 0.5) * p);
        column_is_clear(mesh, cx, cy, *top)
    });
    heights
}

fn plane_z(t: &Triangle, x: f64, y: f64) -> f64 {
    let n = t.normal;
    let a = t.v[0];
    a.z - (n.x * (x - a.x) + n.y * (y - a.y)) / n.z
}

fn in_projection(t: &Triangle, x: f64, y: f64) -> bool {
    let [a, b, c] = t.v;
    let d = |p: Vec3, q: Vec3| (q.x - p.x) * (y - p.y) - (q.y - p.y) * (x - p.x);
    let (d0, d1, d2) = (d(a, b), d(b, c), d(c, a));
    (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
}

/// True when the vertical segment from the bed to `top` at (x, y) lies
/// outside the part. The query is nudged off grid lines so it never runs
/// exactly along a mesh edge.
fn column_is_clear(mesh: &Mesh, x: f64, y: f64, top: f64) -> bool {
    let (x, y) = (x + 1.234_567e-7, y + 2.345_671e-7);
    let mut winding_above = 0i32;
    for t in &mesh.triangles {
        if t.normal.z == 0.0 || !in_projection(t, x, y) {
            continue;
        }
        let z = plane_z(t, x, y);
        if z > top {
            winding_above += if t.normal.z > 0.0 { 1 } else { -1 };
        } else if z > 1e-6 {
            return false;
        }
    }
    winding_above == 0
}

/// Closed surface of a set of columns over grid cells. Wall sides are split at
/// every height that meets the same vertical grid line so neighboring faces
/// share their edges exactly.
fn heightfield_shell(heights: &BTreeMap<Cell, f64>, p: f64) -> Mesh {
    let h = |c: Cell| heights.get(&c).copied().unwrap_or(0.0);
    let xy = |i: i64, j: i64| (i as f64 * p, j as f64 * p);
    // heights meeting each grid corner
    let mut corner_levels: BTreeMap<Cell, Vec<f64>> = BTreeMap::new();
    for (&(i, j), &top) in heights {
        for c in [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)] {
            let v = corner_levels.entry(c).or_insert_with(|| vec![0.0]);
            v.push(top);
        }
    }
    for v in corner_levels.values_mut() {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let mut tris = Vec::new();
    let quad = |tris: &mut Vec<Triangle>, a: Vec3, b: Vec3, c: Vec3, d: Vec3| {
        tris.push(Triangle::new(a, b, c));
        tris.push(Triangle::new(a, c, d));
    };
    for (&(i, j), &top) in heights {
        let (x0, y0) = xy(i, j);
        let (x1, y1) = xy(i + 1, j + 1);
        quad(&mut tris, Vec3::new(x0, y0, top), Vec3::new(x1, y0, top), Vec3::new(x1, y1, top), Vec3::new(x0, y1, top));
        quad(&mut tris, Vec3::new(x0, y0, 0.0), Vec3::new(x0, y1, 0.0), Vec3::new(x1, y1, 0.0), Vec3::new(x1, y0, 0.0));
        // each side walked counter-clockwise seen from above, with the outward neighbor
        let sides = [
            ((i, j), (i + 1, j), (i, j - 1)),
            ((i + 1, j), (i + 1, j + 1), (i + 1, j)),
            ((i + 1, j + 1), (i, j + 1), (i, j + 1)),
            ((i, j + 1), (i, j), (i - 1, j)),
        ];
        for (pa, pb, nb) in sides {
            let lo = h(nb);
            if lo >= top {
                continue;
            }
            let levels = |c: Cell| -> Vec<f64> {
                corner_levels[&c].iter().copied().filter(|&z| z >= lo && z <= top).collect()
            };
            let (ax, ay) = xy(pa.0, pa.1);
            let (bx, by) = xy(pb.0, pb.1);
            wall(&mut tris, (ax, ay), &levels(pa), (bx, by), &levels(pb));
        }
    }
    Mesh::new(tris)
}

/// Vertical wall from corner `a` to corner `b`, outward normal on the right of
/// a→b seen from above. `la` and `lb` are the ascending heights on each side,
/// sharing the same first and last value.
fn wall(tris: &mut Vec<Triangle>, a: (f64, f64), la: &[f64], b: (f64, f64), lb: &[f64]) {
    let pa = |k: usize| Vec3::new(a.0, a.1, la[k]);
    let pb = |k: usize| Vec3::new(b.0, b.1, lb[k]);
    let (mut i, mut j) = (0, 0);
    // zipper upward: always advance the side whose next level is lower
    while i + 1 < la.len() || j + 1 < lb.len() {
        let advance_a = j + 1 >= lb.len() || (i + 1 < la.len() && la[i + 1] <= lb[j + 1]);
        if advance_a {
            tris.push(Triangle::new(pa(i), pb(j), pa(i + 1)));
            i += 1;
        } else {
            tris.push(Triangle::new(pa(i), pb(j), pb(j + 1)));
            j += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    #[test]
    fn cube_needs_no_support() {
        let m = corpus::cube(10.0);
        assert_eq!(generate_supports(&m, &SupportSpec::default()).unwrap(), m);
    }

    #[test]
    fn wall_orientation_and_closure() {
        let mut heights = BTreeMap::new();
        heights.insert((0, 0), 3.0);
        heights.insert((1, 0), 2.0);
        heights.insert((1, 1), 4.0);
        heights.insert((3, 3), 1.0);
        let shell = heightfield_shell(&heights, 2.0);
        assert!(shell.is_closed(), "{:?}", shell.boundary_edges());
        let expect = 4.0 * (3.0 + 2.0 + 4.0 + 1.0);
        assert!((shell.signed_volume().unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn rejects_floating_mesh() {
        let m = corpus::cube(2.0).translated(Vec3::new(0.0, 0.0, 1.0));
        assert!(matches!(generate_supports(&m, &SupportSpec::default()), Err(SectionError::NotOnBed(_))));
    }

    #[test]
    fn table_and_t_get_closed_columns_that_section_cleanly() {
        for m in [corpus::table(), corpus::t_shape()] {
            let s = generate_supports(&m, &SupportSpec::default()).unwrap();
            assert!(s.len() > m.len());
            assert!(s.is_closed());
            let extra = s.signed_volume().unwrap() - m.signed_volume().unwrap();
            assert!(extra > 0.0);
            let slabs = crate::sectioner::section_mesh(&s, 0.3, 0.1..=0.4).unwrap();
            let sum: f64 = slabs.iter().map(|x| x.body.signed_volume().unwrap()).sum();
            assert!((sum - s.signed_volume().unwrap()).abs() < 1e-6);
        }
    }
}
