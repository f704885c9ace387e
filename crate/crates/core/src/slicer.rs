//! Manufacturer-side slicing of one slab into a single-layer G-code program.
//!
//! Contours are taken at the slab's mid-plane, offset inward for perimeters,
//! and filled with rectilinear lines. The layer prints at
//! `z_offset + layer_height (+ z_allowance)`.

use std::collections::HashMap;
use std::f64::consts::PI;

use thiserror::Error;

use crate::config::{ConfigError, MachineSpec, PrintConfig, Seam};
use crate::gcode::{GcodeCommand, GcodeProgram, LayerPosition, MarkerKind, GUIDE_TAG};
use crate::geom2d::{inset, union_loops, Region, Ring, P2};
use crate::mesh::{Mesh, Triangle, Vec3};
use crate::sectioner::Slab;

/// Open chain ends closer than this are joined when edge topology alone
/// cannot close a contour.
pub const WELD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SliceError {
    #[error("open contour at z = {z}: gap from {from:?} to {to:?}")]
    OpenContour { z: f64, from: P2, to: P2 },
    #[error("layer height {h} outside machine range [{min}, {max}]")]
    LayerHeight { h: f64, min: f64, max: f64 },
    #[error("toolpath point ({x}, {y}, {z}) outside the build volume")]
    OutOfBed { x: f64, y: f64, z: f64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Perimeter,
    Infill,
    /// Support columns are sectioned together with the part and print as
    /// ordinary body paths; this role is kept for callers that slice support
    /// geometry on its own.
    Support,
    Guide,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Toolpath {
    pub role: Role,
    pub points: Vec<P2>,
    pub extruding: bool,
}

impl Toolpath {
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    fn is_closed(&self) -> bool {
        self.points.len() > 2 && self.points.first() == self.points.last()
    }
}

type Key = [u64; 3];
type EdgeKey = (Key, Key);

fn edge_key(a: Vec3, b: Vec3) -> EdgeKey {
    let (ka, kb) = (a.key(), b.key());
    if ka <= kb { (ka, kb) } else { (kb, ka) }
}

fn edge_point(a: Vec3, b: Vec3, z: f64) -> P2 {
    let (p, q) = if a.key() <= b.key() { (a, b) } else { (b, a) };
    let t = (z - p.z) / (q.z - p.z);
    P2::new(p.x + (q.x - p.x) * t, p.y + (q.y - p.y) * t)
}

struct Seg {
    a: P2,
    b: P2,
    ka: EdgeKey,
    kb: EdgeKey,
}

fn triangle_segment(t: &Triangle, z: f64) -> Option<Seg> {
    let above = t.v.map(|v| v.z >= z);
    if above.iter().all(|&x| x) || above.iter().all(|&x| !x) {
        return None;
    }
    let (mut start, mut end) = (None, None);
    for i in 0..3 {
        let (a, b) = (t.v[i], t.v[(i + 1) % 3]);
        match (above[i], above[(i + 1) % 3]) {
            (true, false) => start = Some((edge_point(a, b, z), edge_key(a, b))),
            (false, true) => end = Some((edge_point(a, b, z), edge_key(a, b))),
            _ => {}
        }
    }
    let ((a, ka), (b, kb)) = (start?, end?);
    Some(Seg { a, b, ka, kb })
}

/// Closed contours of `mesh` cut by the plane at `z`: outer boundaries
/// counter-clockwise, holes clockwise.
pub fn cross_section(mesh: &Mesh, z: f64) -> Result<Vec<Ring>, SliceError> {
    let segs: Vec<Seg> = mesh.triangles.iter().filter_map(|t| triangle_segment(t, z)).collect();
    let mut by_start: HashMap<EdgeKey, Vec<usize>> = HashMap::new();
    for (i, s) in segs.iter().enumerate() {
        by_start.entry(s.ka).or_default().push(i);
    }
    for v in by_start.values_mut() {
        v.reverse();
    }
    let mut used = vec![false; segs.len()];
    let mut closed: Vec<Vec<P2>> = Vec::new();
    let mut open: Vec<Vec<P2>> = Vec::new();
    for first in 0..segs.len() {
        if used[first] {
            continue;
        }
        used[first] = true;
        let mut pts = vec![segs[first].a];
        let mut cur = first;
        let done = loop {
            pts.push(segs[cur].b);
            if segs[cur].kb == segs[first].ka {
                pts.pop();
                break true;
            }
            let next = by_start.get_mut(&segs[cur].kb).and_then(|v| {
                while let Some(i) = v.pop() {
                    if !used[i] {
                        return Some(i);
                    }
                }
                None
            });
            match next {
                Some(i) => {
                    used[i] = true;
                    cur = i;
                }
                None => break false,
            }
        };
        if done { closed.push(pts) } else { open.push(pts) }
    }
    closed.extend(weld_open_chains(open, z)?);
    Ok(closed
        .into_iter()
        .map(|mut pts| {
            pts.dedup();
            while pts.len() > 1 && pts.first() == pts.last() {
                pts.pop();
            }
            Ring(pts)
        })
        .filter(|r| r.0.len() >= 3 && r.signed_area().abs() > 1e-12)
        .collect())
}

/// Join open chains whose ends meet within the weld tolerance.
fn weld_open_chains(mut open: Vec<Vec<P2>>, z: f64) -> Result<Vec<Vec<P2>>, SliceError> {
    let mut out = Vec::new();
    while let Some(mut chain) = open.pop() {
        loop {
            let (head, tail) = (chain[0], *chain.last().unwrap());
            if chain.len() > 2 && tail.dist(head) <= WELD_TOLERANCE {
                chain.pop();
                out.push(chain);
                break;
            }
            let next = (0..open.len())
                .filter(|&i| open[i][0].dist(tail) <= WELD_TOLERANCE)
                .min_by(|&i, &j| open[i][0].dist(tail).total_cmp(&open[j][0].dist(tail)));
            match next {
                Some(i) => {
                    let more = open.swap_remove(i);
                    chain.extend_from_slice(&more[1..]);
                }
                None => {
                    let to = open.iter().map(|c| c[0]).chain([head]).min_by(|a, b| a.dist(tail).total_cmp(&b.dist(tail))).unwrap();
                    return Err(SliceError::OpenContour { z, from: tail, to });
                }
            }
        }
    }
    Ok(out)
}

/// Regions of a layer split by what prints them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerRegions {
    pub body: Vec<Region>,
    pub guide: Vec<Region>,
}

/// Separate a merged slab section into part and guide. The frame outline, the
/// frame's inner boundary and the marker dot are the only loops not enclosed
/// by at least two others; everything nested deeper belongs to the part.
pub fn classify_guide(loops: &[Ring]) -> LayerRegions {
    let mut body = Vec::new();
    let mut guide = Vec::new();
    for (i, l) in loops.iter().enumerate() {
        let probe = l.0[0];
        let depth = loops.iter().enumerate().filter(|&(j, o)| j != i && o.contains(probe)).count();
        if depth >= 2 { body.push(l.clone()) } else { guide.push(l.clone()) }
    }
    LayerRegions { body: union_loops(&body), guide: union_loops(&guide) }
}

fn mid_plane(z_lo: f64, z_hi: f64) -> f64 {
    0.5 * (z_lo + z_hi)
}

fn bounds_along(regions: &[Region], angle: f64) -> Option<(f64, f64)> {
    let ys = regions.iter().flat_map(|r| r.rings()).flat_map(|r| r.0.iter()).map(|p| p.rotated(-angle).y);
    ys.fold(None, |acc, y| match acc {
        None => Some((y, y)),
        Some((lo, hi)) => Some((lo.min(y), hi.max(y))),
    })
}

/// Concentric loops per contour. Loop `i` runs `nozzle/2 + i·width` inside
/// the boundary; loops whose offset collapses are dropped. Each loop is
/// closed (first point repeated at the end).
pub fn generate_perimeters(regions: &[Region], config: &PrintConfig, machine: &MachineSpec) -> Vec<Toolpath> {
    perimeters(regions, config, machine, Role::Perimeter)
}

fn perimeters(regions: &[Region], config: &PrintConfig, machine: &MachineSpec, role: Role) -> Vec<Toolpath> {
    let w = machine.extrusion_width();
    let mut out = Vec::new();
    for region in regions {
        let one = std::slice::from_ref(region);
        for i in 0..config.perimeter_count {
            let d = machine.nozzle_diameter / 2.0 + i as f64 * w;
            let loops = inset(one, d);
            if loops.is_empty() {
                break;
            }
            for r in &loops {
                for ring in r.rings() {
                    let mut pts = ring.0.clone();
                    pts.push(pts[0]);
                    out.push(Toolpath { role, points: pts, extruding: true });
                }
            }
        }
    }
    out
}

/// Region the infill lines are clipped to.
pub fn infill_region(regions: &[Region], config: &PrintConfig, machine: &MachineSpec) -> Vec<Region> {
    let w = machine.extrusion_width();
    let d = if config.perimeter_count == 0 {
        w / 2.0
    } else {
        machine.nozzle_diameter / 2.0 + config.perimeter_count as f64 * w - w / 2.0
    };
    inset(regions, d)
}

fn layer_index(config: &PrintConfig) -> u64 {
    (config.z_offset / config.layer_height).round().max(0.0) as u64
}

/// Fill angle of a layer in radians: rotated a quarter turn on odd layers.
pub fn infill_angle(config: &PrintConfig) -> f64 {
    (config.fill_angle + 90.0 * (layer_index(config) % 2) as f64).to_radians()
}

/// Rectilinear lines clipped to `regions` (already inset to where line
/// centers may go). Spacing is `width / density`; the line set is centered on
/// the regions' extent across the fill direction.
pub fn generate_infill(regions: &[Region], config: &PrintConfig, machine: &MachineSpec) -> Vec<Toolpath> {
    let angle = infill_angle(config);
    match bounds_along(regions, angle) {
        Some(extent) => infill_lines(regions, extent, config, machine, Role::Infill),
        None => Vec::new(),
    }
}

fn infill_lines(regions: &[Region], extent: (f64, f64), config: &PrintConfig, machine: &MachineSpec, role: Role) -> Vec<Toolpath> {
    if config.fill_density <= 0.0 || regions.is_empty() {
        return Vec::new();
    }
    let w = machine.extrusion_width();
    let spacing = w / config.fill_density;
    let angle = infill_angle(config);
    let rings: Vec<Vec<P2>> = regions
        .iter()
        .flat_map(|r| r.rings())
        .map(|r| r.0.iter().map(|p| p.rotated(-angle)).collect())
        .collect();
    let (lo, hi) = extent;
    let n = ((hi - lo) / spacing).floor() as i64 + 1;
    let center = 0.5 * (lo + hi);
    let mut out = Vec::new();
    for k in 0..n {
        let y = center + (k as f64 - (n - 1) as f64 / 2.0) * spacing;
        let mut xs: Vec<f64> = Vec::new();
        for r in &rings {
            for i in 0..r.len() {
                let (a, b) = (r[i], r[(i + 1) % r.len()]);
                if (a.y <= y) != (b.y <= y) {
                    xs.push(a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x));
                }
            }
        }
        xs.sort_by(f64::total_cmp);
        let mut segs: Vec<(f64, f64)> = xs.chunks_exact(2).map(|c| (c[0], c[1])).filter(|(a, b)| b - a >= w).collect();
        if k % 2 == 1 {
            segs.reverse();
        }
        for (a, b) in segs {
            let (s, e) = if k % 2 == 0 { (a, b) } else { (b, a) };
            out.push(Toolpath {
                role,
                points: vec![P2::new(s, y).rotated(angle), P2::new(e, y).rotated(angle)],
                extruding: true,
            });
        }
    }
    out
}

/// All toolpaths of one layer in print order: part perimeters, part infill,
/// then the guide frame.
pub fn layer_toolpaths(regions: &LayerRegions, config: &PrintConfig, machine: &MachineSpec) -> Vec<Toolpath> {
    let angle = infill_angle(config);
    let mut out = perimeters(&regions.body, config, machine, Role::Perimeter);
    if let Some(ext) = bounds_along(&regions.body, angle) {
        out.extend(infill_lines(&infill_region(&regions.body, config, machine), ext, config, machine, Role::Infill));
    }
    out.extend(perimeters(&regions.guide, config, machine, Role::Guide));
    if let Some(ext) = bounds_along(&regions.guide, angle) {
        out.extend(infill_lines(&infill_region(&regions.guide, config, machine), ext, config, machine, Role::Guide));
    }
    out
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    let r = (v * s).round() / s;
    if r == 0.0 { 0.0 } else { r }
}

/// Nozzle height of the layer above `config.z_offset`.
pub fn print_z(config: &PrintConfig, machine: &MachineSpec) -> f64 {
    round_to(config.z_offset + config.layer_height + machine.z_allowance, 3)
}

/// One sliced layer and the extrusion bookkeeping the session needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedLayer {
    pub program: GcodeProgram,
    /// Absolute E at the end of the layer.
    pub e_end: f64,
    /// Filament pushed for part paths and for guide paths.
    pub body_e: f64,
    pub guide_e: f64,
}

fn header(p: &mut GcodeProgram, m: &MachineSpec) {
    p.mark(MarkerKind::HeaderStart);
    p.push(GcodeCommand::new('G', 28));
    p.push(GcodeCommand::new('M', 140).with('S', m.bed_temp));
    p.push(GcodeCommand::new('M', 104).with('S', m.hotend_temp));
    p.push(GcodeCommand::new('M', 190).with('S', m.bed_temp));
    p.push(GcodeCommand::new('M', 109).with('S', m.hotend_temp));
    p.push(GcodeCommand::new('M', 82));
    p.push(GcodeCommand::new('G', 92).with('E', 0.0));
    p.mark(MarkerKind::HeaderEnd);
}

fn footer(p: &mut GcodeProgram, m: &MachineSpec) {
    p.mark(MarkerKind::FooterStart);
    p.push(GcodeCommand::new('M', 104).with('S', 0.0));
    p.push(GcodeCommand::new('M', 140).with('S', 0.0));
    p.push(GcodeCommand::new('M', 107));
    p.push(GcodeCommand::new('G', 0).with('X', 0.0).with('Y', 0.0).with('F', m.travel_feed.round()));
    p.push(GcodeCommand::new('M', 84));
    p.mark(MarkerKind::FooterEnd);
}

/// Rotate a closed loop to start at the vertex nearest `from`, lowest index
/// first on ties.
fn seam_start(path: &mut Toolpath, from: P2) {
    if !path.is_closed() {
        return;
    }
    let n = path.points.len() - 1;
    let best = (0..n).min_by(|&i, &j| path.points[i].dist(from).total_cmp(&path.points[j].dist(from)).then(i.cmp(&j))).unwrap();
    let mut pts: Vec<P2> = path.points[best..n].to_vec();
    pts.extend_from_slice(&path.points[..best]);
    pts.push(pts[0]);
    path.points = pts;
}

/// Slice one layer's regions into a complete program (header, layer block,
/// footer) with markers, ready for per-position trimming.
pub fn slice_regions(index: u32, regions: &LayerRegions, config: &PrintConfig, machine: &MachineSpec) -> Result<SlicedLayer, SliceError> {
    config.validate()?;
    let h = config.layer_height;
    if !machine.layer_range().contains(&h) {
        return Err(SliceError::LayerHeight { h, min: machine.layer_height_min, max: machine.layer_height_max });
    }
    let z = print_z(config, machine);
    if z > machine.max_z {
        return Err(SliceError::OutOfBed { x: 0.0, y: 0.0, z });
    }
    let w = machine.extrusion_width();
    let per_mm = h * w / machine.filament_area();
    let feed = if index == 0 { machine.first_layer_feed } else { machine.print_feed }.round();
    let travel = machine.travel_feed.round();

    let mut p = GcodeProgram::default();
    header(&mut p, machine);
    p.mark(MarkerKind::Layer(index));
    p.push(GcodeCommand::new('M', 106).with('S', machine.fan_speed as f64));
    p.push(GcodeCommand::new('G', 0).with('Z', z).with('F', travel));

    let mut e = config.e_offset;
    let (mut body_e, mut guide_e) = (0.0, 0.0);
    let mut at = P2::new(0.0, 0.0);
    for mut path in layer_toolpaths(regions, config, machine) {
        if config.seam == Seam::Nearest {
            seam_start(&mut path, at);
        }
        let guide = path.role == Role::Guide;
        let tag = |c: GcodeCommand| if guide { c.with_comment(GUIDE_TAG) } else { c };
        let pts: Vec<P2> = path.points.iter().map(|q| P2::new(round_to(q.x, 3), round_to(q.y, 3))).collect();
        for q in &pts {
            if q.x < 0.0 || q.y < 0.0 || q.x > machine.bed_x || q.y > machine.bed_y {
                return Err(SliceError::OutOfBed { x: q.x, y: q.y, z });
            }
        }
        if pts[0] != at {
            p.push(tag(GcodeCommand::new('G', 0).with('X', pts[0].x).with('Y', pts[0].y).with('Z', z).with('F', travel)));
        }
        for pair in pts.windows(2) {
            let de = pair[0].dist(pair[1]) * per_mm;
            e += de;
            if guide { guide_e += de } else { body_e += de }
            p.push(tag(GcodeCommand::new('G', 1).with('X', pair[1].x).with('Y', pair[1].y).with('Z', z).with('E', round_to(e, 5)).with('F', feed)));
        }
        at = *pts.last().unwrap();
    }
    footer(&mut p, machine);
    Ok(SlicedLayer { program: p, e_end: e, body_e, guide_e })
}

/// Section a slab that carries its own body and guide meshes.
pub fn slab_regions(slab: &Slab) -> Result<LayerRegions, SliceError> {
    let z = mid_plane(slab.z_lo, slab.z_hi);
    Ok(LayerRegions {
        body: union_loops(&cross_section(&slab.body, z)?),
        guide: union_loops(&cross_section(&slab.guide, z)?),
    })
}

/// Section a slab received as one merged mesh (body and guide together).
pub fn received_regions(mesh: &Mesh, index: u32, h: f64) -> Result<LayerRegions, SliceError> {
    let z_lo = index as f64 * h;
    let top = mesh.aabb().map_or(z_lo + h, |b| b.max.z);
    let z = mid_plane(z_lo, top.min(z_lo + h));
    Ok(classify_guide(&cross_section(mesh, z)?))
}

/// Slice a slab into its program. The full program is returned; trimming by
/// `position` is applied on top with [`crate::gcode::remove_redundant`].
pub fn slice_slab(slab: &Slab, config: &PrintConfig, machine: &MachineSpec, position: LayerPosition) -> Result<GcodeProgram, SliceError> {
    let layer = slice_regions(slab.index, &slab_regions(slab)?, config, machine)?;
    crate::gcode::remove_redundant(&layer.program, position).map_err(|e| SliceError::Config(ConfigError::Invalid(e.to_string())))
}

/// Filament length needed to deposit `volume` mm³.
pub fn filament_for_volume(volume: f64, machine: &MachineSpec) -> f64 {
    volume / (PI * (machine.filament_diameter / 2.0).powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::geom2d::union_loops;

    fn square(s: f64) -> Vec<Region> {
        union_loops(&[Ring(vec![P2::new(0.0, 0.0), P2::new(s, 0.0), P2::new(s, s), P2::new(0.0, s)])])
    }

    #[test]
    fn cube_section_is_square() {
        let loops = cross_section(&corpus::cube(10.0), 5.0).unwrap();
        assert_eq!(loops.len(), 1);
        assert!((loops[0].signed_area() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn tube_section_orientation() {
        let loops = cross_section(&corpus::tube(5.0, 3.0, 6.0, 64), 3.0).unwrap();
        assert_eq!(loops.len(), 2);
        let mut areas: Vec<f64> = loops.iter().map(Ring::signed_area).collect();
        areas.sort_by(f64::total_cmp);
        assert!(areas[0] < 0.0 && areas[1] > 0.0);
        assert!(areas[1] > -areas[0]);
    }

    #[test]
    fn cone_section_area() {
        let loops = cross_section(&corpus::cone(5.0, 6.0, 128), 3.0).unwrap();
        let a: f64 = loops.iter().map(Ring::signed_area).sum();
        let expect = PI * 2.5 * 2.5;
        assert!((a - expect).abs() / expect < 0.02);
    }

    #[test]
    fn open_mesh_reports_gap() {
        let mut m = corpus::cube(10.0);
        m.triangles.retain(|t| t.normal.x < 0.5);
        assert!(matches!(cross_section(&m, 5.0), Err(SliceError::OpenContour { z, .. }) if z == 5.0));
    }

    #[test]
    fn one_perimeter_on_square() {
        let c = PrintConfig { perimeter_count: 1, ..Default::default() };
        let m = MachineSpec::default();
        let p = generate_perimeters(&square(10.0), &c, &m);
        assert_eq!(p.len(), 1);
        assert!(p[0].is_closed());
        let (lo, hi) = crate::geom2d::bounds(p[0].points.iter().copied()).unwrap();
        assert!((hi.x - lo.x - 9.6).abs() < 1e-6 && (hi.y - lo.y - 9.6).abs() < 1e-6);
        assert!(generate_perimeters(&square(10.0), &PrintConfig { perimeter_count: 0, ..c.clone() }, &m).is_empty());
        let sliver = union_loops(&[Ring(vec![P2::new(0.0, 0.0), P2::new(10.0, 0.0), P2::new(10.0, 0.3), P2::new(0.0, 0.3)])]);
        assert!(generate_perimeters(&sliver, &c, &m).is_empty());
    }

    #[test]
    fn solid_infill_line_count() {
        let m = MachineSpec { nozzle_diameter: 0.4, ..Default::default() };
        let c = PrintConfig { fill_density: 1.0, fill_angle: 0.0, ..Default::default() };
        let lines = generate_infill(&square(10.0), &c, &m);
        assert_eq!(lines.len(), (10.0f64 / 0.45).floor() as usize + 1);
        assert!(lines.iter().all(|l| l.points[0].y == l.points[1].y));
        assert!(generate_infill(&square(10.0), &PrintConfig { fill_density: 0.0, ..c }, &m).is_empty());
    }

    #[test]
    fn odd_layers_turn_a_quarter() {
        let m = MachineSpec::default();
        let c = PrintConfig { fill_angle: 0.0, z_offset: 0.3, ..Default::default() };
        let lines = generate_infill(&square(10.0), &c, &m);
        assert!(lines.iter().all(|l| (l.points[0].x - l.points[1].x).abs() < 1e-9));
    }
}
