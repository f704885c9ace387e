//! Planar geometry: points, rings, polygons with holes, ear-clipping
//! triangulation, and the offset/union operations used for toolpaths.

use i_overlay::core::fill_rule::FillRule;
use i_overlay::float::simplify::SimplifyShape;
use i_overlay::mesh::outline::offset::OutlineOffset;
use i_overlay::mesh::style::{LineJoin, OutlineStyle};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct P2 {
    pub x: f64,
    pub y: f64,
}

impl P2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: P2) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }

    pub fn rotated(self, angle_rad: f64) -> P2 {
        let (s, c) = angle_rad.sin_cos();
        P2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// Twice the signed area of triangle (a, b, c); positive when counter-clockwise.
pub fn orient(a: P2, b: P2, c: P2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// A closed ring stored without repeating the first point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ring(pub Vec<P2>);

impl Ring {
    pub fn signed_area(&self) -> f64 {
        let p = &self.0;
        let n = p.len();
        (0..n).map(|i| {
            let (a, b) = (p[i], p[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        }).sum::<f64>()
            * 0.5
    }

    pub fn is_ccw(&self) -> bool {
        self.signed_area() > 0.0
    }

    pub fn reversed(&self) -> Ring {
        Ring(self.0.iter().rev().copied().collect())
    }

    pub fn perimeter(&self) -> f64 {
        let p = &self.0;
        (0..p.len()).map(|i| p[i].dist(p[(i + 1) % p.len()])).sum()
    }

    /// Even-odd containment; points on the boundary may go either way.
    pub fn contains(&self, q: P2) -> bool {
        let p = &self.0;
        let mut inside = false;
        let mut j = p.len().wrapping_sub(1);
        for i in 0..p.len() {
            let (a, b) = (p[i], p[j]);
            if (a.y > q.y) != (b.y > q.y) {
                let x = a.x + (q.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if q.x < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    pub fn bounds(&self) -> Option<(P2, P2)> {
        bounds(self.0.iter().copied())
    }

    /// Rotate the point order so it starts at the lexicographically smallest point.
    pub fn canonical_start(&self) -> Ring {
        let Some(start) = (0..self.0.len()).min_by(|&a, &b| {
            let (p, q) = (self.0[a], self.0[b]);
            p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y))
        }) else {
            return self.clone();
        };
        let mut v = self.0[start..].to_vec();
        v.extend_from_slice(&self.0[..start]);
        Ring(v)
    }
}

pub fn bounds(points: impl IntoIterator<Item = P2>) -> Option<(P2, P2)> {
    let mut it = points.into_iter();
    let f = it.next()?;
    Some(it.fold((f, f), |(lo, hi), p| {
        (P2::new(lo.x.min(p.x), lo.y.min(p.y)), P2::new(hi.x.max(p.x), hi.y.max(p.y)))
    }))
}

/// Outer ring (counter-clockwise) with holes (clockwise).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Region {
    pub outer: Ring,
    pub holes: Vec<Ring>,
}

impl Region {
    pub fn area(&self) -> f64 {
        self.outer.signed_area().abs() - self.holes.iter().map(|h| h.signed_area().abs()).sum::<f64>()
    }

    pub fn contains(&self, q: P2) -> bool {
        self.outer.contains(q) && !self.holes.iter().any(|h| h.contains(q))
    }

    pub fn rings(&self) -> impl Iterator<Item = &Ring> {
        std::iter::once(&self.outer).chain(&self.holes)
    }
}

fn ring_to_path(r: &Ring) -> Vec<[f64; 2]> {
    r.0.iter().map(|p| [p.x, p.y]).collect()
}

fn shapes_to_regions(shapes: Vec<Vec<Vec<[f64; 2]>>>) -> Vec<Region> {
    let ring = |c: &Vec<[f64; 2]>| Ring(c.iter().map(|p| P2::new(p[0], p[1])).collect());
    let mut out: Vec<Region> = shapes
        .into_iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let mut outer = ring(&s[0]);
            if !outer.is_ccw() {
                outer = outer.reversed();
            }
            let holes = s[1..]
                .iter()
                .map(|h| {
                    let h = ring(h);
                    if h.is_ccw() { h.reversed() } else { h }
                })
                .map(|h| h.canonical_start())
                .collect();
            Region { outer: outer.canonical_start(), holes }
        })
        .filter(|r| r.outer.0.len() >= 3)
        .collect();
    out.sort_by(|a, b| {
        let (pa, pb) = (a.outer.0[0], b.outer.0[0]);
        pa.x.total_cmp(&pb.x).then(pa.y.total_cmp(&pb.y))
    });
    out
}

/// Resolve a set of oriented loops (outer counter-clockwise, holes clockwise,
/// possibly overlapping) into disjoint regions under the non-zero fill rule.
pub fn union_loops(loops: &[Ring]) -> Vec<Region> {
    let mut sorted: Vec<Ring> = loops.iter().filter(|r| r.0.len() >= 3).map(Ring::canonical_start).collect();
    sorted.sort_by(|a, b| {
        let (pa, pb) = (a.0[0], b.0[0]);
        pa.x.total_cmp(&pb.x).then(pa.y.total_cmp(&pb.y)).then(a.0.len().cmp(&b.0.len()))
    });
    if sorted.is_empty() {
        return Vec::new();
    }
    let paths: Vec<Vec<[f64; 2]>> = sorted.iter().map(ring_to_path).collect();
    shapes_to_regions(paths.simplify_shape(FillRule::NonZero))
}

/// Offset regions inward by `distance` (> 0). Collapsed parts disappear.
pub fn inset(regions: &[Region], distance: f64) -> Vec<Region> {
    let style = OutlineStyle::new(-distance).line_join(LineJoin::Miter(std::f64::consts::PI / 8.0));
    let mut out = Vec::new();
    for r in regions {
        let shape: Vec<Vec<[f64; 2]>> = r.rings().map(ring_to_path).collect();
        out.extend(shapes_to_regions(shape.outline(&style)));
    }
    out.retain(|r| r.area() > 1e-9);
    out
}

/// Triangulate a polygon with holes by ear clipping.
///
/// `outer` must be counter-clockwise and every hole clockwise. Vertices are
/// numbered outer first, then each hole in order; the returned triangles are
/// counter-clockwise index triples into that numbering. Every input vertex is
/// kept, including collinear ones, so edges shared with adjacent geometry stay
/// matched.
pub fn triangulate(outer: &[P2], holes: &[Vec<P2>]) -> Vec<[usize; 3]> {
    let mut pts: Vec<P2> = outer.to_vec();
    let mut poly: Vec<usize> = (0..outer.len()).collect();
    let mut hole_ranges = Vec::new();
    for h in holes {
        let start = pts.len();
        pts.extend_from_slice(h);
        hole_ranges.push(start..pts.len());
    }
    hole_ranges.retain(|r| r.len() >= 3);
    // bridge holes in order of decreasing rightmost x
    let rightmost = |r: &std::ops::Range<usize>| {
        r.clone().max_by(|&a, &b| pts[a].x.total_cmp(&pts[b].x).then(pts[b].y.total_cmp(&pts[a].y))).unwrap()
    };
    hole_ranges.sort_by(|a, b| pts[rightmost(b)].x.total_cmp(&pts[rightmost(a)].x));
    for r in hole_ranges {
        let m = rightmost(&r);
        let hole: Vec<usize> = r.clone().collect();
        let start = m - r.start;
        let mut seq: Vec<usize> = hole[start..].to_vec();
        seq.extend_from_slice(&hole[..start]);
        seq.push(m);
        match bridge_vertex(&pts, &poly, pts[m]) {
            Some(at) => {
                let p = poly[at];
                let mut merged = Vec::with_capacity(poly.len() + seq.len() + 1);
                merged.extend_from_slice(&poly[..=at]);
                merged.extend_from_slice(&seq);
                merged.push(p);
                merged.extend_from_slice(&poly[at + 1..]);
                poly = merged;
            }
            None => log::warn!("hole could not be bridged; skipped"),
        }
    }
    ear_clip(&pts, poly)
}

/// Position in `poly` of a vertex visible from `m` along the +x ray.
fn bridge_vertex(pts: &[P2], poly: &[usize], m: P2) -> Option<usize> {
    let n = poly.len();
    let mut best: Option<(f64, usize)> = None;
    for i in 0..n {
        let (a, b) = (pts[poly[i]], pts[poly[(i + 1) % n]]);
        // outer edges run counter-clockwise, so the edge seen to the right goes upward
        if a.y > m.y || b.y < m.y || a.y == b.y {
            continue;
        }
        let t = (m.y - a.y) / (b.y - a.y);
        let x = a.x + t * (b.x - a.x);
        if x < m.x {
            continue;
        }
        if best.is_none_or(|(bx, _)| x < bx) {
            let pick = if a.y == m.y {
                i
            } else if b.y == m.y {
                (i + 1) % n
            } else if a.x > b.x {
                i
            } else {
                (i + 1) % n
            };
            best = Some((x, pick));
        }
    }
    let (ix, mut pick) = best?;
    let hit = P2::new(ix, m.y);
    let p = pts[poly[pick]];
    if p == hit {
        return Some(pick);
    }
    // a reflex vertex inside (m, hit, p) would block the bridge; take the one
    // with the smallest angle to the ray
    let mut best_angle = f64::INFINITY;
    let (t0, t1, t2) = if orient(m, hit, p) > 0.0 { (m, hit, p) } else { (m, p, hit) };
    for j in 0..n {
        let q = pts[poly[j]];
        if q == p || q.x < m.x {
            continue;
        }
        let prev = pts[poly[(j + n - 1) % n]];
        let next = pts[poly[(j + 1) % n]];
        if orient(prev, q, next) > 0.0 {
            continue;
        }
        if orient(t0, t1, q) >= 0.0 && orient(t1, t2, q) >= 0.0 && orient(t2, t0, q) >= 0.0 {
            let angle = (q.y - m.y).abs().atan2(q.x - m.x);
            if angle < best_angle || (angle == best_angle && q.x < pts[poly[pick]].x) {
                best_angle = angle;
                pick = j;
            }
        }
    }
    Some(pick)
}

fn ear_clip(pts: &[P2], poly: Vec<usize>) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    let mut idx = poly;
    if idx.len() < 3 {
        return out;
    }
    let mut i = 0;
    let mut stalled = 0;
    let mut strict = true;
    while idx.len() > 3 {
        let n = idx.len();
        let (ip, ic, inx) = ((i + n - 1) % n, i % n, (i + 1) % n);
        let (a, b, c) = (pts[idx[ip]], pts[idx[ic]], pts[idx[inx]]);
        let convex = orient(a, b, c) > 0.0;
        let ear = convex && (!strict || !blocks_ear(pts, &idx, ip, ic, inx));
        if ear {
            out.push([idx[ip], idx[ic], idx[inx]]);
            idx.remove(ic);
            stalled = 0;
            strict = true;
            i = if ic == 0 { 0 } else { ic - 1 };
        } else {
            i = (ic + 1) % n;
            stalled += 1;
            if stalled > n {
                if !strict {
                    log::warn!("ear clipping stalled with {n} vertices left");
                    break;
                }
                strict = false;
                stalled = 0;
            }
        }
    }
    if idx.len() == 3 && orient(pts[idx[0]], pts[idx[1]], pts[idx[2]]) > 0.0 {
        out.push([idx[0], idx[1], idx[2]]);
    }
    out
}

fn blocks_ear(pts: &[P2], idx: &[usize], ip: usize, ic: usize, inx: usize) -> bool {
    let n = idx.len();
    let (a, b, c) = (pts[idx[ip]], pts[idx[ic]], pts[idx[inx]]);
    for j in 0..n {
        if j == ip || j == ic || j == inx {
            continue;
        }
        let q = pts[idx[j]];
        if q == a || q == b || q == c {
            continue;
        }
        let prev = pts[idx[(j + n - 1) % n]];
        let next = pts[idx[(j + 1) % n]];
        if orient(prev, q, next) > 0.0 {
            continue;
        }
        if orient(a, b, q) >= 0.0 && orient(b, c, q) >= 0.0 && orient(c, a, q) >= 0.0 {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, s: f64) -> Vec<P2> {
        vec![P2::new(x0, y0), P2::new(x0 + s, y0), P2::new(x0 + s, y0 + s), P2::new(x0, y0 + s)]
    }

    fn tri_area(pts: &[P2], tris: &[[usize; 3]]) -> f64 {
        tris.iter().map(|t| 0.5 * orient(pts[t[0]], pts[t[1]], pts[t[2]])).sum()
    }

    #[test]
    fn triangulates_square_with_collinear_point() {
        let poly = vec![P2::new(0.0, 0.0), P2::new(5.0, 0.0), P2::new(10.0, 0.0), P2::new(10.0, 10.0), P2::new(0.0, 10.0)];
        let tris = triangulate(&poly, &[]);
        assert_eq!(tris.len(), 3);
        assert!((tri_area(&poly, &tris) - 100.0).abs() < 1e-9);
        assert!(tris.iter().all(|t| orient(poly[t[0]], poly[t[1]], poly[t[2]]) > 0.0));
        // the collinear vertex must be used
        assert!(tris.iter().any(|t| t.contains(&1)));
    }

    #[test]
    fn triangulates_with_holes() {
        let outer = square(0.0, 0.0, 10.0);
        let h1: Vec<P2> = square(2.0, 2.0, 2.0).into_iter().rev().collect();
        let h2: Vec<P2> = square(6.0, 5.0, 3.0).into_iter().rev().collect();
        let tris = triangulate(&outer, &[h1.clone(), h2.clone()]);
        let mut pts = outer.clone();
        pts.extend(h1);
        pts.extend(h2);
        assert!((tri_area(&pts, &tris) - (100.0 - 4.0 - 9.0)).abs() < 1e-9);
        assert_eq!(tris.len(), 12 + 2 * 2 - 2);
    }

    #[test]
    fn hole_aligned_with_outer_vertex() {
        let outer = square(0.0, 0.0, 10.0);
        let hole: Vec<P2> = vec![P2::new(4.0, 4.0), P2::new(4.0, 10.0 - 4.0), P2::new(6.0, 6.0), P2::new(6.0, 4.0)];
        let tris = triangulate(&outer, &[hole.clone()]);
        let mut pts = outer.clone();
        pts.extend(hole);
        assert!((tri_area(&pts, &tris) - 96.0).abs() < 1e-9);
    }

    #[test]
    fn concave_comb() {
        let mut poly = vec![P2::new(0.0, 0.0)];
        for k in 0..6 {
            let x = k as f64 * 2.0;
            poly.push(P2::new(x + 1.0, 0.0));
            poly.push(P2::new(x + 1.0, 5.0));
            poly.push(P2::new(x + 2.0, 5.0));
            poly.push(P2::new(x + 2.0, 0.0));
        }
        poly.push(P2::new(12.0, -2.0));
        poly.push(P2::new(0.0, -2.0));
        // traced clockwise above; flip to counter-clockwise
        poly.reverse();
        let ring = Ring(poly.clone());
        let area = ring.signed_area();
        assert!(area > 0.0);
        let tris = triangulate(&poly, &[]);
        assert!((tri_area(&poly, &tris) - area).abs() < 1e-9);
        assert_eq!(tris.len(), poly.len() - 2);
    }

    #[test]
    fn union_merges_overlap_and_keeps_holes() {
        let a = Ring(square(0.0, 0.0, 4.0));
        let b = Ring(square(2.0, 0.0, 4.0));
        let u = union_loops(&[a, b]);
        assert_eq!(u.len(), 1);
        assert!((u[0].area() - 24.0).abs() < 1e-6);
        let outer = Ring(square(0.0, 0.0, 10.0));
        let hole = Ring(square(3.0, 3.0, 4.0)).reversed();
        let u = union_loops(&[outer, hole]);
        assert_eq!(u.len(), 1);
        assert_eq!(u[0].holes.len(), 1);
        assert!((u[0].area() - 84.0).abs() < 1e-6);
        assert!(u[0].outer.is_ccw() && !u[0].holes[0].is_ccw());
    }

    #[test]
    fn inset_square_and_collapse() {
        let r = union_loops(&[Ring(square(0.0, 0.0, 10.0))]);
        let i = inset(&r, 0.2);
        assert_eq!(i.len(), 1);
        let (lo, hi) = i[0].outer.bounds().unwrap();
        assert!((hi.x - lo.x - 9.6).abs() < 1e-5 && (hi.y - lo.y - 9.6).abs() < 1e-5);
        let thin = union_loops(&[Ring(vec![P2::new(0.0, 0.0), P2::new(10.0, 0.0), P2::new(10.0, 0.3), P2::new(0.0, 0.3)])]);
        assert!(inset(&thin, 0.2).is_empty());
    }

    #[test]
    fn ring_contains() {
        let r = Ring(square(0.0, 0.0, 2.0));
        assert!(r.contains(P2::new(1.0, 1.0)));
        assert!(!r.contains(P2::new(3.0, 1.0)));
    }
}
