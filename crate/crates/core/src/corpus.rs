//! Procedural test parts: boxes, cylinders, cones, spheres, gears and a few
//! compound shapes. All are closed and outward oriented.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::geom2d::{triangulate, P2};
use crate::mesh::{Mesh, Triangle, Vec3};

pub fn cuboid(min: Vec3, max: Vec3) -> Mesh {
    let c = |i: usize| {
        Vec3::new(
            if i & 1 == 0 { min.x } else { max.x },
            if i & 2 == 0 { min.y } else { max.y },
            if i & 4 == 0 { min.z } else { max.z },
        )
    };
    // each face as a counter-clockwise quad seen from outside
    const FACES: [[usize; 4]; 6] = [
        [0, 2, 3, 1], // -z
        [4, 5, 7, 6], // +z
        [0, 1, 5, 4], // -y
        [2, 6, 7, 3], // +y
        [0, 4, 6, 2], // -x
        [1, 3, 7, 5], // +x
    ];
    let mut tris = Vec::with_capacity(12);
    for f in FACES {
        tris.push(Triangle::new(c(f[0]), c(f[1]), c(f[2])));
        tris.push(Triangle::new(c(f[0]), c(f[2]), c(f[3])));
    }
    Mesh::new(tris)
}

/// Axis-aligned cube with one corner at the origin.
pub fn cube(size: f64) -> Mesh {
    cuboid(Vec3::ZERO, Vec3::new(size, size, size))
}

/// Prism from a planar polygon with holes, spanning `z0..z1`.
pub fn extrude(outer: &[P2], holes: &[Vec<P2>], z0: f64, z1: f64) -> Mesh {
    let mut pts = outer.to_vec();
    for h in holes {
        pts.extend_from_slice(h);
    }
    let mut tris = Vec::new();
    for t in triangulate(outer, holes) {
        let p = |i: usize, z: f64| Vec3::new(pts[t[i]].x, pts[t[i]].y, z);
        tris.push(Triangle::new(p(0, z1), p(1, z1), p(2, z1)));
        tris.push(Triangle::new(p(0, z0), p(2, z0), p(1, z0)));
    }
    for ring in std::iter::once(outer).chain(holes.iter().map(Vec::as_slice)) {
        for i in 0..ring.len() {
            let (a, b) = (ring[i], ring[(i + 1) % ring.len()]);
            let a0 = Vec3::new(a.x, a.y, z0);
            let b0 = Vec3::new(b.x, b.y, z0);
            let a1 = Vec3::new(a.x, a.y, z1);
            let b1 = Vec3::new(b.x, b.y, z1);
            tris.push(Triangle::new(a0, b0, b1));
            tris.push(Triangle::new(a0, b1, a1));
        }
    }
    Mesh::new(tris)
}

pub fn circle(r: f64, segments: usize) -> Vec<P2> {
    (0..segments)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / segments as f64;
            P2::new(r * a.cos(), r * a.sin())
        })
        .collect()
}

pub fn cylinder(r: f64, height: f64, segments: usize) -> Mesh {
    extrude(&circle(r, segments), &[], 0.0, height)
}

pub fn tube(r_outer: f64, r_inner: f64, height: f64, segments: usize) -> Mesh {
    let hole: Vec<P2> = circle(r_inner, segments).into_iter().rev().collect();
    extrude(&circle(r_outer, segments), &[hole], 0.0, height)
}

pub fn cone(r: f64, height: f64, segments: usize) -> Mesh {
    let ring = circle(r, segments);
    let apex = Vec3::new(0.0, 0.0, height);
    let center = Vec3::ZERO;
    let mut tris = Vec::new();
    for i in 0..segments {
        let (a, b) = (ring[i], ring[(i + 1) % segments]);
        let a = Vec3::new(a.x, a.y, 0.0);
        let b = Vec3::new(b.x, b.y, 0.0);
        tris.push(Triangle::new(a, b, apex));
        tris.push(Triangle::new(center, b, a));
    }
    Mesh::new(tris)
}

/// Sphere centered at the origin built by subdividing an icosahedron.
pub fn icosphere(r: f64, subdivisions: u32) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0), (1.0, t, 0.0), (-1.0, -t, 0.0), (1.0, -t, 0.0),
        (0.0, -1.0, t), (0.0, 1.0, t), (0.0, -1.0, -t), (0.0, 1.0, -t),
        (t, 0.0, -1.0), (t, 0.0, 1.0), (-t, 0.0, -1.0), (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalized())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalized());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let tris = faces
        .into_iter()
        .map(|[a, b, c]| Triangle::new(verts[a] * r, verts[b] * r, verts[c] * r))
        .collect();
    Mesh::new(tris)
}

/// Spur gear outline with a round bore, extruded to `thickness`.
pub fn gear(teeth: usize, root_r: f64, tip_r: f64, bore_r: f64, thickness: f64) -> Mesh {
    let mut outline = Vec::with_capacity(teeth * 4);
    let pitch = 2.0 * PI / teeth as f64;
    for k in 0..teeth {
        let a = k as f64 * pitch;
        let at = |f: f64, r: f64| {
            let ang = a + f * pitch;
            P2::new(r * ang.cos(), r * ang.sin())
        };
        outline.push(at(0.0, root_r));
        outline.push(at(0.15, tip_r));
        outline.push(at(0.45, tip_r));
        outline.push(at(0.6, root_r));
    }
    let bore: Vec<P2> = circle(bore_r, 24).into_iter().rev().collect();
    extrude(&outline, &[bore], 0.0, thickness)
}

/// Upright T: a square stem carrying a crossbar whose arms overhang.
pub fn t_shape() -> Mesh {
    let mut m = cuboid(Vec3::new(-2.0, -2.0, 0.0), Vec3::new(2.0, 2.0, 4.5));
    m.extend(&cuboid(Vec3::new(-8.0, -2.0, 4.5), Vec3::new(8.0, 2.0, 6.0)));
    m
}

/// A 10×10×1 plate at z 5..6 standing on one 2×2 leg.
pub fn table() -> Mesh {
    let mut m = cuboid(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 5.0));
    m.extend(&cuboid(Vec3::new(-5.0, -5.0, 5.0), Vec3::new(5.0, 5.0, 6.0)));
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_closed_with_expected_volumes() {
        let cases: Vec<(&str, Mesh, f64)> = vec![
            ("cube", cube(10.0), 1000.0),
            ("cuboid", cuboid(Vec3::new(1.0, 2.0, 3.0), Vec3::new(2.0, 4.0, 6.0)), 6.0),
            ("t", t_shape(), 4.0 * 4.0 * 4.5 + 16.0 * 4.0 * 1.5),
            ("table", table(), 4.0 * 5.0 + 100.0),
        ];
        for (name, m, vol) in cases {
            assert!(m.is_closed(), "{name}");
            assert!((m.signed_volume().unwrap() - vol).abs() < 1e-9, "{name}");
        }
        let n = 64;
        let polygon_area = |r: f64| 0.5 * n as f64 * r * r * (2.0 * PI / n as f64).sin();
        let c = cylinder(5.0, 6.0, n);
        assert!((c.signed_volume().unwrap() - polygon_area(5.0) * 6.0).abs() < 1e-9);
        let t = tube(5.0, 3.0, 6.0, n);
        assert!((t.signed_volume().unwrap() - (polygon_area(5.0) - polygon_area(3.0)) * 6.0).abs() < 1e-9);
        let k = cone(5.0, 6.0, n);
        assert!((k.signed_volume().unwrap() - polygon_area(5.0) * 2.0).abs() < 1e-9);
        let g = gear(12, 8.0, 10.0, 3.0, 3.0);
        assert!(g.is_closed());
        assert!(g.signed_volume().unwrap() > 0.0);
        assert!(icosphere(5.0, 2).is_closed());
    }
}
