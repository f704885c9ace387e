//! One line per acceptance criterion. Runs without the libtest harness so the
//! lines show up in plain `cargo test` output.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use common::*;
use stlstream::config::{MachineSpec, PrintConfig};
use stlstream::corpus;
use stlstream::gcode::{parse_gcode, remove_redundant, validate, GcodeCommand, LayerPosition, Rule};
use stlstream::mesh::{parse_stl, write_stl, Mesh, StlFormat, Vec3};
use stlstream::pipeline::monoslice;
use stlstream::printer::{dwell_report, Printer, DWELL_THRESHOLD};
use stlstream::protocol::frame::{frame_message, parse_frame, read_message, Kind, Message};
use stlstream::protocol::ledger::replay;
use stlstream::sectioner::{export_slabs, section_mesh};
use stlstream::slicer::{slice_regions, LayerRegions};
use stlstream::support::{generate_supports, SupportSpec};

type Outcome = Result<String, String>;

const H: f64 = 0.3;

fn corpus_models() -> Vec<(&'static str, Mesh)> {
    vec![
        ("cube", corpus::cube(6.0)),
        ("cone", corpus::cone(5.0, 6.0, 48)),
        ("tube", corpus::tube(5.0, 3.0, 6.0, 48)),
        ("t-shape", corpus::t_shape()),
        ("gear", corpus::gear(12, 8.0, 10.0, 3.0, 3.0)),
    ]
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok { Ok(()) } else { Err(msg()) }
}

fn c1_sectioning_count() -> Outcome {
    let t = Instant::now();
    let mesh = corpus::cuboid(Vec3::ZERO, Vec3::new(10.0, 10.0, 3.0));
    let slabs = section_mesh(&mesh, H, 0.1..=0.4).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    export_slabs(&slabs, dir.path()).unwrap();
    let files = std::fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "stl")).count();
    let secs = t.elapsed().as_secs_f64();
    ensure(files == 10, || format!("{files} slab files"))?;
    ensure(secs < 1.0, || format!("took {secs:.3} s"))?;
    Ok(format!("10 slab files in {secs:.3} s"))
}

fn c2_volume_conservation() -> Outcome {
    let t = Instant::now();
    let spec = SupportSpec { clearance: H, ..Default::default() };
    let t_with_supports = generate_supports(&corpus::t_shape(), &spec).map_err(|e| e.to_string())?;
    let models = [
        ("cube", corpus::cube(6.0)),
        ("cone", corpus::cone(5.0, 6.0, 48)),
        ("tube", corpus::tube(5.0, 3.0, 6.0, 48)),
        ("t-shape+supports", t_with_supports),
    ];
    let mut worst: f64 = 0.0;
    for (name, m) in models {
        let v = m.signed_volume().map_err(|e| e.to_string())?;
        let slabs = section_mesh(&m, H, 0.1..=0.4).map_err(|e| format!("{name}: {e}"))?;
        let sum: f64 = slabs.iter().map(|s| s.body.signed_volume().unwrap()).sum();
        let rel = (sum - v).abs() / v;
        worst = worst.max(rel);
        ensure(rel <= 0.005, || format!("{name}: slabs {sum} vs mesh {v}"))?;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.3} s"))?;
    Ok(format!("worst relative error {worst:.2e} in {secs:.3} s"))
}

struct Streamed {
    name: String,
    density: f64,
    cmds: Vec<GcodeCommand>,
    mono: Vec<(f64, f64)>,
    layers: usize,
}

/// All corpus models streamed and sliced in one pass, at both densities.
fn stream_corpus(machine: &MachineSpec) -> Result<(Vec<Streamed>, f64), String> {
    let t = Instant::now();
    let mut out = Vec::new();
    for density in [1.0, 0.7] {
        for (name, mesh) in corpus_models() {
            let cfg = client_config(H, density);
            let job = stream_job(&mesh, &cfg, machine, JobSpec::default());
            if let Some(e) = job.client.error.as_ref().map(|e| e.to_string()).or(job.server.error.as_ref().map(|e| e.to_string())) {
                return Err(format!("{name}@{density}: {e}"));
            }
            let mono = monoslice(&mesh, &cfg, machine).map_err(|e| format!("{name}: {e}"))?;
            let mono_text = parse_gcode(&mono.program.to_text()).unwrap();
            out.push(Streamed {
                name: name.to_string(),
                density,
                cmds: commands(&job.lines),
                mono: extrusion_by_z(&mono_text.commands),
                layers: job.server.report.layers_printed as usize,
            });
        }
    }
    Ok((out, t.elapsed().as_secs_f64()))
}

fn c3_equivalence(jobs: &[Streamed], secs: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for j in jobs {
        let streamed = extrusion_by_z(&j.cmds);
        let tag = format!("{}@{}%", j.name, j.density * 100.0);
        ensure(streamed.len() == j.mono.len(), || format!("{tag}: {} vs {} layers", streamed.len(), j.mono.len()))?;
        for (i, (s, m)) in streamed.iter().zip(&j.mono).enumerate() {
            ensure(s.0 == m.0, || format!("{tag}: layer {i} Z {} vs {}", s.0, m.0))?;
            let rel = (s.1 - m.1).abs() / m.1;
            worst = worst.max(rel);
            ensure(rel <= 0.02, || format!("{tag}: layer {i} extruded {} vs {}", s.1, m.1))?;
        }
    }
    ensure(secs < 30.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{} jobs, worst per-layer difference {:.3}% in {secs:.1} s", jobs.len(), worst * 100.0))
}

fn c4_z_offset(jobs: &[Streamed]) -> Outcome {
    let mut moves = 0;
    for j in jobs {
        let mut layer = None::<usize>;
        let mut last_z = f64::NAN;
        for c in j.cmds.iter().filter(|c| c.is('G', 1) && c.has('E')) {
            let z = c.get('Z').ok_or_else(|| format!("{}: extruding move without Z", j.name))?;
            if z != last_z {
                layer = Some(layer.map_or(0, |n| n + 1));
                last_z = z;
            }
            let n = layer.unwrap();
            ensure((z - (n + 1) as f64 * H).abs() < 1e-9, || format!("{}: layer {n} at Z {z}", j.name))?;
            moves += 1;
        }
        ensure(layer.map_or(0, |n| n + 1) == j.layers, || format!("{}: layer count", j.name))?;
    }
    Ok(format!("{moves} extruding moves at (n+1)·h"))
}

fn count(cmds: &[GcodeCommand], f: impl Fn(&GcodeCommand) -> bool) -> usize {
    cmds.iter().filter(|c| f(c)).count()
}

fn c5_redundant_removal(jobs: &[Streamed]) -> Outcome {
    let heat = |c: &GcodeCommand| (c.is('M', 104) || c.is('M', 140) || c.is('M', 109) || c.is('M', 190)) && c.get('S').is_some_and(|s| s > 0.0);
    let shut = |c: &GcodeCommand| (c.is('M', 104) || c.is('M', 140)) && c.get('S') == Some(0.0) || c.is('M', 107) || c.is('M', 84);
    for j in jobs {
        let c = &j.cmds;
        ensure(j.layers >= 3, || format!("{}: only {} layers", j.name, j.layers))?;
        ensure(count(c, |c| c.is('G', 28)) == 1, || format!("{}: G28 count", j.name))?;
        ensure(count(c, heat) == 4, || format!("{}: heat-up commands {}", j.name, count(c, heat)))?;
        ensure(count(c, shut) == 4, || format!("{}: shutdown commands {}", j.name, count(c, shut)))?;
        let first_e = c.iter().position(|c| c.has('E') && c.is_motion()).unwrap();
        let last_e = c.iter().rposition(|c| c.has('E') && c.is_motion()).unwrap();
        ensure(c[first_e..=last_e].iter().all(|c| !heat(c) && !shut(c) && !c.is('G', 28)), || format!("{}: setup or shutdown between layers", j.name))?;
    }
    // a middle layer on its own
    let m = MachineSpec::default();
    let square = stlstream::geom2d::union_loops(&[stlstream::geom2d::Ring(corpus::circle(5.0, 4).into_iter().map(|p| stlstream::geom2d::P2::new(p.x + 50.0, p.y + 50.0)).collect())]);
    let cfg = PrintConfig { z_offset: 0.6, ..Default::default() };
    let layer = slice_regions(2, &LayerRegions { body: square, guide: vec![] }, &cfg, &m).unwrap();
    let mid = remove_redundant(&layer.program, LayerPosition::Intermediate).unwrap();
    ensure(count(&mid.commands, |c| heat(c) || shut(c) || c.is('G', 28)) == 0, || "intermediate layer keeps setup/shutdown".into())?;
    Ok(format!("{} streamed jobs: one G28, one heat-up block, one shutdown block each", jobs.len()))
}

fn c6_retention(machine: &MachineSpec) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = JobSpec { store: Some(dir.path().to_path_buf()), ..Default::default() };
    let job = stream_job(&corpus::cube(6.0), &client_config(H, 1.0), machine, spec);
    ensure(job.server.error.is_none(), || format!("{:?}", job.server.error))?;
    ensure(job.server.report.layers_printed == 20, || format!("{} layers", job.server.report.layers_printed))?;
    let r = replay(&job.server.ledger);
    ensure(r.violations.is_empty(), || format!("{:?}", r.violations))?;
    ensure(r.max_resident_layers == 2, || format!("max resident {}", r.max_resident_layers))?;
    let left = std::fs::read_dir(dir.path()).unwrap().count();
    ensure(left == 0 && r.leftover.is_empty(), || format!("{left} files left"))?;
    Ok(format!("20 layers, max resident {}, workdir empty", r.max_resident_layers))
}

fn c7_dwell(machine: &MachineSpec) -> Outcome {
    let t = Instant::now();
    let speedup = 20.0;
    let mesh = corpus::cuboid(Vec3::ZERO, Vec3::new(8.0, 8.0, 4.0 * H));
    let cfg = client_config(H, 1.0);
    // layer print time, from an unpaced dry run
    let dry = stream_job(&mesh, &cfg, machine, JobSpec::default());
    let mut spans: Vec<f64> = dry.record.layers[1..].iter().map(|l| l.end - l.start).collect();
    spans.sort_by(f64::total_cmp);
    let layer_time = spans[spans.len() / 2];
    let latency = 0.5 * layer_time;
    let wall = Duration::from_secs_f64(latency / speedup);
    let run = |depth| stream_job(&mesh, &cfg, machine, JobSpec { depth, latency: Some(wall), pace: Some(speedup), store: None });

    let deep = run(2);
    ensure(deep.server.error.is_none(), || format!("{:?}", deep.server.error))?;
    let d2 = dwell_report(&deep.record, DWELL_THRESHOLD);
    ensure(d2.blob_events.is_empty(), || format!("depth 2: {} blob events, max idle {:.3}", d2.blob_events.len(), d2.max_idle()))?;

    let shallow = run(1);
    ensure(shallow.server.error.is_none(), || format!("{:?}", shallow.server.error))?;
    let d1 = dwell_report(&shallow.record, DWELL_THRESHOLD);
    let boundaries = d1.per_layer.len() - 1;
    for (n, l) in d1.per_layer[..boundaries].iter().enumerate() {
        ensure(l.over_threshold >= 1, || format!("depth 1: no blob after layer {n}"))?;
        let err = (l.max_idle - latency).abs() / latency;
        ensure(err <= 0.10, || format!("depth 1: idle {:.3} s after layer {n} vs latency {latency:.3} s", l.max_idle))?;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1} s"))?;
    let idles: Vec<String> = d1.per_layer[..boundaries].iter().map(|l| format!("{:.2}", l.max_idle)).collect();
    Ok(format!(
        "latency {latency:.2} s (layer {layer_time:.2} s): depth 2 max idle {:.2} s, depth 1 idles [{}] s, {secs:.1} s",
        d2.max_idle(),
        idles.join(", ")
    ))
}

fn c8_safety() -> Outcome {
    let m = MachineSpec::default();
    let text = "G28\nM997\nG1 X10 Y10 Z1 F1200\nM999\nM23 gear.gcode\nM104 S300\nG0 X500 Y10\n";
    let p = parse_gcode(text).map_err(|e| e.to_string())?;
    let report = validate(&p, &m);
    let expect = [(2, Rule::ForbiddenCommand), (4, Rule::ForbiddenCommand), (5, Rule::ForbiddenCommand), (6, Rule::HotendLimit), (7, Rule::OutOfBounds)];
    let got: Vec<(usize, Rule)> = report.violations.iter().map(|v| (v.source_line, v.rule)).collect();
    ensure(got == expect, || format!("violations {got:?}"))?;
    let mut sim = Printer::new(m);
    let replies: Vec<String> = text.lines().map(|l| sim.handle_line(l).0).collect();
    for (line, _) in expect {
        ensure(replies[line - 1].starts_with("error:"), || format!("simulator accepted line {line}: {}", replies[line - 1]))?;
    }
    ensure(replies[0] == "ok" && replies[2] == "ok", || "simulator rejected a clean line".into())?;
    Ok("validator flags lines 2,4,5,6,7 and the simulator refuses each".into())
}

fn c9_guide_constancy(jobs: &[Streamed]) -> Outcome {
    let mut worst: f64 = 0.0;
    for j in jobs {
        let b = extrusion_bounds_by_z(&j.cmds);
        for (z, r) in &b {
            let d = (0..4).map(|i| (r[i] - b[0].1[i]).abs()).fold(0.0, f64::max);
            worst = worst.max(d);
            ensure(d <= 1e-6, || format!("{}: Z {z} bounds {r:?} vs {:?}", j.name, b[0].1))?;
        }
    }
    Ok(format!("{} jobs, max bound drift {worst:.1e} mm", jobs.len()))
}

fn c10_fsm_and_fuzz() -> Outcome {
    let failed: Vec<String> = common::scenarios::SCENARIOS
        .iter()
        .filter_map(|(name, run)| run().err().map(|e| format!("{name}: {e}")))
        .collect();
    ensure(failed.is_empty(), || failed.join("; "))?;
    let t = Instant::now();
    let mut rng = StdRng::seed_from_u64(7);
    let seeds: Vec<Vec<u8>> = [
        Message::spec_request(),
        Message::layer_request(3),
        Message::text(Kind::Config, "layer_height=0.3\n"),
        Message::new(Kind::LayerData, 1, vec![7u8; 300]),
    ]
    .iter()
    .map(|m| frame_message(m).unwrap())
    .collect();
    let mut decoded = 0;
    for i in 0..100_000 {
        let mut f = if i % 4 == 0 {
            (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect()
        } else {
            seeds[i % seeds.len()].clone()
        };
        for _ in 0..rng.gen_range(1..4) {
            if f.is_empty() {
                break;
            }
            match rng.gen_range(0..3) {
                0 => {
                    let k = rng.gen_range(0..f.len());
                    f[k] ^= 1 << rng.gen_range(0..8);
                }
                1 => f.truncate(rng.gen_range(0..f.len())),
                _ => f.push(rng.gen()),
            }
        }
        decoded += parse_frame(&f).is_ok() as usize;
        let _ = read_message(&mut &f[..]);
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("fuzz took {secs:.1} s"))?;
    Ok(format!("{} scenarios end in ABORT/ERROR; 100000 fuzzed frames ({decoded} still valid) in {secs:.1} s", common::scenarios::SCENARIOS.len()))
}

fn c11_roundtrips(jobs: &[Streamed]) -> Outcome {
    for (name, m) in corpus_models() {
        let bytes = write_stl(&m, StlFormat::Binary);
        let again = write_stl(&parse_stl(&bytes).map_err(|e| e.to_string())?.mesh, StlFormat::Binary);
        ensure(bytes == again, || format!("{name}: binary STL not bit-exact"))?;
    }
    for j in jobs {
        let text: String = j.cmds.iter().map(|c| format!("{c}\n")).collect();
        let p = parse_gcode(&text).map_err(|e| e.to_string())?;
        let reprinted = parse_gcode(&p.to_text()).map_err(|e| e.to_string())?;
        ensure(p.same_commands(&reprinted), || format!("{}: G-code roundtrip differs", j.name))?;
    }
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..2000 {
        let kind = Kind::ALL[rng.gen_range(0..Kind::ALL.len())];
        let payload: Vec<u8> = (0..rng.gen_range(0..512)).map(|_| rng.gen()).collect();
        let m = Message::new(kind, rng.gen(), payload);
        let (back, used) = parse_frame(&frame_message(&m).unwrap()).map_err(|e| e.to_string())?;
        ensure(back == m && used == 18 + m.payload.len(), || "frame roundtrip differs".into())?;
    }
    Ok("corpus STL bit-exact, streamed G-code reparses equal, 2000 random frames".into())
}

fn main() -> ExitCode {
    let machine = MachineSpec::default();
    let mut results: Vec<(u32, &str, Outcome)> = vec![(1, "sectioning count", c1_sectioning_count()), (2, "volume conservation", c2_volume_conservation())];
    match stream_corpus(&machine) {
        Ok((jobs, secs)) => {
            results.push((3, "streamed vs one-pass equivalence", c3_equivalence(&jobs, secs)));
            results.push((4, "z-offset discipline", c4_z_offset(&jobs)));
            results.push((5, "redundant-command removal", c5_redundant_removal(&jobs)));
            results.push((6, "retention", c6_retention(&machine)));
            results.push((7, "dwell and buffering", c7_dwell(&machine)));
            results.push((8, "safety validation", c8_safety()));
            results.push((9, "guide constancy", c9_guide_constancy(&jobs)));
            results.push((10, "protocol conformance", c10_fsm_and_fuzz()));
            results.push((11, "roundtrips", c11_roundtrips(&jobs)));
        }
        Err(e) => {
            for (n, name) in [(3, "streamed vs one-pass equivalence"), (4, "z-offset discipline"), (5, "redundant-command removal"), (9, "guide constancy"), (11, "roundtrips")] {
                results.push((n, name, Err(format!("streaming failed: {e}"))));
            }
            results.push((6, "retention", c6_retention(&machine)));
            results.push((7, "dwell and buffering", c7_dwell(&machine)));
            results.push((8, "safety validation", c8_safety()));
            results.push((10, "protocol conformance", c10_fsm_and_fuzz()));
        }
    }
    results.sort_by_key(|r| r.0);
    let mut ok = true;
    for (n, name, r) in &results {
        match r {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => {
                ok = false;
                println!("criterion {n:>2} FAIL  {name}: {d}");
            }
        }
    }
    if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
