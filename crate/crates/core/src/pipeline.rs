//! Whole-job geometry steps shared by the streaming client and the
//! one-pass reference slicer.

use thiserror::Error;

use crate::config::{ClientConfig, ConfigError, MachineSpec, PrintConfig};
use crate::gcode::{remove_redundant, validate, GcodeError, GcodeProgram, LayerPosition};
use crate::geom2d::union_loops;
use crate::mesh::{Mesh, MeshError, RigidTransform, Vec3};
use crate::sectioner::{add_guideline, guide_footprint, section_mesh, slab_count, SectionError, Slab};
use crate::slicer::{cross_section, print_z, slice_regions, LayerRegions, SliceError};
use crate::support::{generate_supports, SupportSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Section(#[from] SectionError),
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error(transparent)]
    Gcode(#[from] GcodeError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("job does not fit the machine: {0}")]
    DoesNotFit(String),
    #[error("generated G-code failed validation: {0}")]
    Validation(String),
}

/// Rotate, center on the bed, set down on the bed, then add supports.
pub fn prepare_mesh(mesh: &Mesh, rotate: [f64; 3], support: Option<&SupportSpec>, machine: &MachineSpec) -> Result<Mesh, PipelineError> {
    if mesh.is_empty() {
        return Err(SectionError::Empty.into());
    }
    let r = RigidTransform::from_euler_deg(rotate[0], rotate[1], rotate[2]);
    let m = mesh.transformed(&r);
    let b = m.aabb().ok_or(SectionError::Empty)?;
    let c = b.center();
    let m = m.translated(Vec3::new(machine.bed_x / 2.0 - c.x, machine.bed_y / 2.0 - c.y, 0.0)).drop_to_bed();
    let m = match support {
        Some(s) => generate_supports(&m, s)?,
        None => m,
    };
    let b = m.aabb().ok_or(SectionError::Empty)?;
    if b.min.x < 0.0 || b.min.y < 0.0 || b.max.x > machine.bed_x || b.max.y > machine.bed_y || b.max.z > machine.max_z {
        return Err(PipelineError::DoesNotFit(format!("part spans {:?}..{:?}", b.min, b.max)));
    }
    Ok(m)
}

fn prepared(mesh: &Mesh, cfg: &ClientConfig, machine: &MachineSpec) -> Result<Mesh, PipelineError> {
    prepare_mesh(mesh, cfg.rotate, cfg.supports.then_some(&cfg.support), machine)
}

/// The slabs a client streams: prepared, sectioned, each with the guide frame.
pub fn client_slabs(mesh: &Mesh, cfg: &ClientConfig, machine: &MachineSpec) -> Result<Vec<Slab>, PipelineError> {
    cfg.print.validate()?;
    let m = prepared(mesh, cfg, machine)?;
    let job = m.aabb().ok_or(SectionError::Empty)?;
    let (lo, hi) = guide_footprint(&cfg.guide, &job);
    if lo.x < 0.0 || lo.y < 0.0 || hi.x > machine.bed_x || hi.y > machine.bed_y {
        return Err(PipelineError::DoesNotFit(format!("guide frame spans {lo:?}..{hi:?}")));
    }
    let slabs = section_mesh(&m, cfg.print.layer_height, machine.layer_range())?;
    Ok(slabs.into_iter().map(|s| add_guideline(s, &cfg.guide, &job)).collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonoLayer {
    pub index: u32,
    pub z: f64,
    pub extruded: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonoJob {
    pub program: GcodeProgram,
    pub layers: Vec<MonoLayer>,
}

/// Slice the whole part in one pass, without guide frame, setup and
/// shutdown emitted once.
pub fn monoslice(mesh: &Mesh, cfg: &ClientConfig, machine: &MachineSpec) -> Result<MonoJob, PipelineError> {
    cfg.print.validate()?;
    machine.validate()?;
    let h = cfg.print.layer_height;
    if !machine.layer_range().contains(&h) {
        return Err(SectionError::OutOfRange { h, min: machine.layer_height_min, max: machine.layer_height_max }.into());
    }
    let m = prepared(mesh, cfg, machine)?;
    let top = m.aabb().ok_or(SectionError::Empty)?.max.z;
    let n = slab_count(top, h);
    let mut program = GcodeProgram::default();
    let mut layers = Vec::with_capacity(n);
    let mut e = 0.0;
    for i in 0..n {
        let z_lo = i as f64 * h;
        let z_hi = ((i + 1) as f64 * h).min(top);
        let body = union_loops(&cross_section(&m, 0.5 * (z_lo + z_hi))?);
        let config = PrintConfig { z_offset: z_lo, e_offset: e, ..cfg.print.clone() };
        let layer = slice_regions(i as u32, &LayerRegions { body, guide: Vec::new() }, &config, machine)?;
        e = layer.e_end;
        let part = remove_redundant(&layer.program, LayerPosition::of(i, n))?;
        program.append(&part);
        layers.push(MonoLayer { index: i as u32, z: print_z(&config, machine), extruded: layer.body_e });
    }
    let report = validate(&program, machine);
    if !report.accepted() {
        return Err(PipelineError::Validation(report.summary()));
    }
    Ok(MonoJob { program, layers })
}
