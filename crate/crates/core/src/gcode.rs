//! G-code programs: parsing and printing, stripping the per-file setup and
//! shutdown blocks of separately sliced layers, and validation against a
//! machine's limits.

use std::fmt;

use thiserror::Error;

use crate::config::MachineSpec;

#[derive(Debug, Error, PartialEq)]
pub enum GcodeError {
    #[error("line {line}: malformed number {token:?}")]
    BadNumber { line: usize, token: String },
    #[error("line {line}: expected a command word, found {found:?}")]
    BadWord { line: usize, found: String },
    #[error("unbalanced {0} markers")]
    Unbalanced(&'static str),
}

/// Commands that take the rest of the line as a free-text argument.
const TEXT_ARG: [(char, u16); 6] = [('M', 23), ('M', 28), ('M', 30), ('M', 32), ('M', 117), ('M', 118)];

const KNOWN: [(char, u16); 34] = [
    ('G', 0), ('G', 1), ('G', 4), ('G', 12), ('G', 20), ('G', 21), ('G', 28), ('G', 90), ('G', 91), ('G', 92),
    ('M', 17), ('M', 18), ('M', 20), ('M', 21), ('M', 22), ('M', 23), ('M', 24), ('M', 25), ('M', 28), ('M', 29),
    ('M', 30), ('M', 32), ('M', 82), ('M', 83), ('M', 84), ('M', 104), ('M', 105), ('M', 106), ('M', 107),
    ('M', 109), ('M', 140), ('M', 190), ('M', 997), ('M', 999),
];

#[derive(Debug, Clone, PartialEq)]
pub struct GcodeCommand {
    pub letter: char,
    pub number: u16,
    /// Parameters in source order. A bare letter (as in `G28 X Y`) has no value.
    pub params: Vec<(char, Option<f64>)>,
    /// Free-text argument of commands such as `M23 file.gcode`.
    pub text: Option<String>,
    pub comment: Option<String>,
    /// 1-based line in the source text; 0 for generated commands.
    pub source_line: usize,
}

impl GcodeCommand {
    pub fn new(letter: char, number: u16) -> Self {
        Self { letter, number, params: Vec::new(), text: None, comment: None, source_line: 0 }
    }

    pub fn with(mut self, letter: char, value: f64) -> Self {
        self.params.push((letter, Some(value)));
        self
    }

    pub fn with_comment(mut self, c: &str) -> Self {
        self.comment = Some(c.to_string());
        self
    }

    pub fn is(&self, letter: char, number: u16) -> bool {
        self.letter == letter && self.number == number
    }

    pub fn code(&self) -> String {
        format!("{}{}", self.letter, self.number)
    }

    pub fn is_known(&self) -> bool {
        KNOWN.contains(&(self.letter, self.number))
    }

    pub fn get(&self, letter: char) -> Option<f64> {
        self.params.iter().find(|(l, _)| *l == letter).and_then(|(_, v)| *v)
    }

    pub fn has(&self, letter: char) -> bool {
        self.params.iter().any(|(l, _)| *l == letter)
    }

    pub fn is_motion(&self) -> bool {
        self.is('G', 0) || self.is('G', 1)
    }

    pub fn is_guide(&self) -> bool {
        self.comment.as_deref() == Some(GUIDE_TAG)
    }

    /// Same command ignoring where it came from.
    pub fn same_as(&self, o: &GcodeCommand) -> bool {
        self.letter == o.letter && self.number == o.number && self.params == o.params && self.text == o.text && self.comment == o.comment
    }
}

impl fmt::Display for GcodeCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.letter, self.number)?;
        for (l, v) in &self.params {
            match v {
                Some(v) => write!(f, " {l}{v}")?,
                None => write!(f, " {l}")?,
            }
        }
        if let Some(t) = &self.text {
            write!(f, " {t}")?;
        }
        if let Some(c) = &self.comment {
            write!(f, " ;{c}")?;
        }
        Ok(())
    }
}

pub const GUIDE_TAG: &str = "GUIDE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerKind {
    HeaderStart,
    HeaderEnd,
    Layer(u32),
    Guide,
    FooterStart,
    FooterEnd,
}

impl fmt::Display for MarkerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MarkerKind::HeaderStart => f.write_str(";HEADER_START"),
            MarkerKind::HeaderEnd => f.write_str(";HEADER_END"),
            MarkerKind::Layer(n) => write!(f, ";LAYER {n}"),
            MarkerKind::Guide => f.write_str(";GUIDE"),
            MarkerKind::FooterStart => f.write_str(";FOOTER_START"),
            MarkerKind::FooterEnd => f.write_str(";FOOTER_END"),
        }
    }
}

impl MarkerKind {
    fn from_comment(c: &str) -> Option<MarkerKind> {
        match c.trim() {
            "HEADER_START" => Some(MarkerKind::HeaderStart),
            "HEADER_END" => Some(MarkerKind::HeaderEnd),
            "FOOTER_START" => Some(MarkerKind::FooterStart),
            "FOOTER_END" => Some(MarkerKind::FooterEnd),
            "GUIDE" => Some(MarkerKind::Guide),
            s => s.strip_prefix("LAYER ").and_then(|n| n.trim().parse().ok()).map(MarkerKind::Layer),
        }
    }
}

/// A section annotation. `at` is the index of the command it precedes; for
/// `Guide` it is the annotated command itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Marker {
    pub kind: MarkerKind,
    pub at: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GcodeProgram {
    pub commands: Vec<GcodeCommand>,
    pub markers: Vec<Marker>,
}

impl GcodeProgram {
    pub fn push(&mut self, c: GcodeCommand) {
        if c.is_guide() {
            self.markers.push(Marker { kind: MarkerKind::Guide, at: self.commands.len() });
        }
        self.commands.push(c);
    }

    pub fn mark(&mut self, kind: MarkerKind) {
        self.markers.push(Marker { kind, at: self.commands.len() });
    }

    /// Render as text, one command per line, with standalone marker lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut m = self.markers.iter().filter(|m| m.kind != MarkerKind::Guide).peekable();
        for (i, c) in self.commands.iter().enumerate() {
            while let Some(mk) = m.next_if(|mk| mk.at <= i) {
                out.push_str(&mk.kind.to_string());
                out.push('\n');
            }
            out.push_str(&c.to_string());
            out.push('\n');
        }
        for mk in m {
            out.push_str(&mk.kind.to_string());
            out.push('\n');
        }
        out
    }

    /// Commands with the guide-annotated ones removed.
    pub fn without_guide(&self) -> GcodeProgram {
        let keep: Vec<bool> = self.commands.iter().map(|c| !c.is_guide()).collect();
        retain(self, &keep)
    }

    pub fn append(&mut self, other: &GcodeProgram) {
        let base = self.commands.len();
        self.markers.extend(other.markers.iter().map(|m| Marker { kind: m.kind, at: m.at + base }));
        self.commands.extend(other.commands.iter().cloned());
    }

    pub fn same_commands(&self, o: &GcodeProgram) -> bool {
        self.commands.len() == o.commands.len() && self.commands.iter().zip(&o.commands).all(|(a, b)| a.same_as(b))
    }
}

impl fmt::Display for GcodeProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Parse one line. Returns `Ok(None)` for blank and comment-only lines.
pub fn parse_line(raw: &str, line_no: usize) -> Result<Option<(GcodeCommand, Option<MarkerKind>)>, GcodeError> {
    let (body, comment) = match raw.find(';') {
        Some(i) => (&raw[..i], Some(raw[i + 1..].trim().to_string())),
        None => (raw, None),
    };
    // drop a checksum and a leading line number
    let body = match body.find('*') {
        Some(i) => &body[..i],
        None => body,
    };
    let mut body = body.trim();
    if let Some(rest) = body.strip_prefix(['N', 'n']) {
        let digits = rest.trim_start_matches(|c: char| c.is_ascii_digit());
        if digits.len() < rest.len() {
            body = digits.trim_start();
        }
    }
    if body.is_empty() {
        return Ok(None);
    }
    let bad_word = || GcodeError::BadWord { line: line_no, found: body.to_string() };
    let mut chars = body.char_indices().peekable();
    let (_, letter) = chars.next().ok_or_else(bad_word)?;
    if !letter.is_ascii_alphabetic() {
        return Err(bad_word());
    }
    let letter = letter.to_ascii_uppercase();
    let num_start = 1;
    let mut num_end = num_start;
    while let Some(&(i, c)) = chars.peek() {
        if c.is_ascii_digit() {
            num_end = i + 1;
            chars.next();
        } else {
            break;
        }
    }
    if num_end == num_start {
        return Err(bad_word());
    }
    let number: u16 = body[num_start..num_end].parse().map_err(|_| bad_word())?;
    let mut cmd = GcodeCommand::new(letter, number);
    cmd.source_line = line_no;
    let rest = &body[num_end..];
    if rest.starts_with('.') {
        // subcodes such as G29.1 are outside the supported dialect
        return Err(bad_word());
    }
    if TEXT_ARG.contains(&(letter, number)) {
        let t = rest.trim();
        if !t.is_empty() {
            cmd.text = Some(t.to_string());
        }
    } else {
        let mut it = rest.char_indices().peekable();
        while let Some((i, c)) = it.next() {
            if c.is_whitespace() {
                continue;
            }
            if !c.is_ascii_alphabetic() {
                let tok = rest[i..].split_whitespace().next().unwrap_or("");
                return Err(GcodeError::BadNumber { line: line_no, token: tok.to_string() });
            }
            let start = i + 1;
            let mut end = start;
            while let Some(&(j, d)) = it.peek() {
                if !(d.is_ascii_digit() || matches!(d, '.' | '-' | '+')) {
                    break;
                }
                end = j + 1;
                it.next();
            }
            let tok = &rest[start..end];
            let value = if tok.is_empty() {
                None
            } else {
                let bad = || GcodeError::BadNumber { line: line_no, token: format!("{c}{tok}") };
                Some(tok.parse::<f64>().map_err(|_| bad())?)
            };
            cmd.params.push((c.to_ascii_uppercase(), value));
        }
    }
    let marker = comment.as_deref().and_then(MarkerKind::from_comment).filter(|k| *k == MarkerKind::Guide);
    cmd.comment = comment.filter(|c| !c.is_empty());
    Ok(Some((cmd, marker)))
}

pub fn parse_gcode(text: &str) -> Result<GcodeProgram, GcodeError> {
    let mut p = GcodeProgram::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        match parse_line(raw, line_no)? {
            Some((cmd, guide)) => {
                if guide.is_some() {
                    p.markers.push(Marker { kind: MarkerKind::Guide, at: p.commands.len() });
                }
                p.commands.push(cmd);
            }
            None => {
                let t = raw.trim();
                if let Some(kind) = t.strip_prefix(';').and_then(MarkerKind::from_comment) {
                    if kind != MarkerKind::Guide {
                        p.mark(kind);
                    }
                }
            }
        }
    }
    Ok(p)
}

/// Where a separately sliced layer falls in the job.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPosition {
    First,
    Intermediate,
    Last,
    /// A single-layer job: keeps both setup and shutdown.
    Only,
}

impl LayerPosition {
    pub fn of(index: usize, total: usize) -> LayerPosition {
        match (index == 0, index + 1 >= total) {
            (true, true) => LayerPosition::Only,
            (true, false) => LayerPosition::First,
            (false, true) => LayerPosition::Last,
            (false, false) => LayerPosition::Intermediate,
        }
    }

    fn keeps_header(self) -> bool {
        matches!(self, LayerPosition::First | LayerPosition::Only)
    }

    fn keeps_footer(self) -> bool {
        matches!(self, LayerPosition::Last | LayerPosition::Only)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemovalMode {
    /// Markers when the program has section markers, classes otherwise.
    Auto,
    Markers,
    Classes,
}

fn retain(p: &GcodeProgram, keep: &[bool]) -> GcodeProgram {
    let mut new_index = Vec::with_capacity(keep.len() + 1);
    let mut n = 0;
    for &k in keep {
        new_index.push(n);
        n += k as usize;
    }
    new_index.push(n);
    let commands = p.commands.iter().zip(keep).filter(|(_, k)| **k).map(|(c, _)| c.clone()).collect();
    let markers = p
        .markers
        .iter()
        .filter(|m| m.kind != MarkerKind::Guide || keep.get(m.at).copied().unwrap_or(false))
        .map(|m| Marker { kind: m.kind, at: new_index[m.at.min(keep.len())] })
        .collect();
    GcodeProgram { commands, markers }
}

/// Command ranges enclosed by a start/end marker pair.
fn regions(p: &GcodeProgram, start: MarkerKind, end: MarkerKind, name: &'static str) -> Result<Vec<(usize, usize)>, GcodeError> {
    let mut out = Vec::new();
    let mut open = None;
    for m in &p.markers {
        if m.kind == start {
            if open.is_some() {
                return Err(GcodeError::Unbalanced(name));
            }
            open = Some(m.at);
        } else if m.kind == end {
            let s = open.take().ok_or(GcodeError::Unbalanced(name))?;
            out.push((s, m.at));
        }
    }
    if open.is_some() {
        return Err(GcodeError::Unbalanced(name));
    }
    Ok(out)
}

fn is_header_class(c: &GcodeCommand) -> bool {
    (c.is('M', 104) || c.is('M', 140)) && c.get('S').is_none_or(|s| s > 0.0)
        || c.is('G', 28)
        || c.is('M', 109)
        || c.is('M', 190)
        || (c.is('G', 92) && c.has('E'))
        || c.is('M', 82)
        || c.is('M', 83)
}

fn is_footer_class(c: &GcodeCommand) -> bool {
    (c.is('M', 104) || c.is('M', 140)) && c.get('S') == Some(0.0) || c.is('M', 107) || c.is('M', 84)
}

/// Strip setup and shutdown blocks that only the first and last layer need.
pub fn remove_redundant(p: &GcodeProgram, position: LayerPosition) -> Result<GcodeProgram, GcodeError> {
    remove_redundant_with(p, position, RemovalMode::Auto)
}

pub fn remove_redundant_with(p: &GcodeProgram, position: LayerPosition, mode: RemovalMode) -> Result<GcodeProgram, GcodeError> {
    let headers = regions(p, MarkerKind::HeaderStart, MarkerKind::HeaderEnd, "header")?;
    let footers = regions(p, MarkerKind::FooterStart, MarkerKind::FooterEnd, "footer")?;
    let use_markers = match mode {
        RemovalMode::Auto => !headers.is_empty() || !footers.is_empty(),
        RemovalMode::Markers => true,
        RemovalMode::Classes => false,
    };
    let mut keep = vec![true; p.commands.len()];
    let mut out_markers = p.markers.clone();
    if use_markers {
        let mut drop = |rs: &[(usize, usize)], start: MarkerKind, end: MarkerKind| {
            for &(s, e) in rs {
                keep[s..e].iter_mut().for_each(|k| *k = false);
            }
            out_markers.retain(|m| m.kind != start && m.kind != end);
        };
        if !position.keeps_header() {
            drop(&headers, MarkerKind::HeaderStart, MarkerKind::HeaderEnd);
        }
        if !position.keeps_footer() {
            drop(&footers, MarkerKind::FooterStart, MarkerKind::FooterEnd);
        }
    } else {
        for (i, c) in p.commands.iter().enumerate() {
            if (!position.keeps_header() && is_header_class(c)) || (!position.keeps_footer() && is_footer_class(c)) {
                keep[i] = false;
            }
        }
        if !position.keeps_footer() {
            // a closing travel to the origin
            if let Some(i) = p.commands.iter().rposition(|c| c.is_motion()) {
                let c = &p.commands[i];
                if !c.has('E') && c.get('X') == Some(0.0) && c.get('Y') == Some(0.0) {
                    keep[i] = false;
                }
            }
            out_markers.retain(|m| m.kind != MarkerKind::FooterStart && m.kind != MarkerKind::FooterEnd);
        }
        if !position.keeps_header() {
            out_markers.retain(|m| m.kind != MarkerKind::HeaderStart && m.kind != MarkerKind::HeaderEnd);
        }
    }
    let tmp = GcodeProgram { commands: p.commands.clone(), markers: out_markers };
    Ok(retain(&tmp, &keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    ForbiddenCommand,
    CommandNotAllowed,
    HotendLimit,
    BedLimit,
    OutOfBounds,
    EReversal,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::ForbiddenCommand => "forbidden-command",
            Rule::CommandNotAllowed => "command-not-allowed",
            Rule::HotendLimit => "hotend-limit",
            Rule::BedLimit => "bed-limit",
            Rule::OutOfBounds => "out-of-bounds",
            Rule::EReversal => "e-reversal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub source_line: usize,
    pub rule: Rule,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn accepted(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> String {
        match self.violations.first() {
            None => "accept".to_string(),
            Some(v) => format!("reject: {} violation(s), first line {} {}: {}", self.violations.len(), v.source_line, v.rule, v.detail),
        }
    }
}

/// Firmware update, restart and SD-card commands are refused on every machine.
pub fn is_always_forbidden(letter: char, number: u16) -> bool {
    letter == 'M' && (number == 997 || number == 999 || (20..=33).contains(&number))
}

/// Modal machine position as seen by both the validator and the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    /// Physical position, including E as total filament pushed.
    pub pos: [f64; 4],
    /// Logical minus physical, per axis, set by G92 and cleared by G28.
    pub offset: [f64; 4],
    pub relative_xyz: bool,
    pub relative_e: bool,
}

impl Default for Kinematics {
    fn default() -> Self {
        Self { pos: [0.0; 4], offset: [0.0; 4], relative_xyz: false, relative_e: false }
    }
}

const AXES: [char; 4] = ['X', 'Y', 'Z', 'E'];

impl Kinematics {
    /// Physical target of a G0/G1.
    pub fn target(&self, c: &GcodeCommand) -> [f64; 4] {
        let mut t = self.pos;
        for (a, axis) in AXES.iter().enumerate() {
            if let Some(v) = c.get(*axis) {
                let relative = if a == 3 { self.relative_e } else { self.relative_xyz };
                t[a] = if relative { self.pos[a] + v } else { v - self.offset[a] };
            }
        }
        t
    }

    /// Apply non-motion modal commands. Returns true when `c` was one of them.
    pub fn apply_modal(&mut self, c: &GcodeCommand) -> bool {
        match (c.letter, c.number) {
            ('G', 90) => self.relative_xyz = false,
            ('G', 91) => self.relative_xyz = true,
            ('M', 82) => self.relative_e = false,
            ('M', 83) => self.relative_e = true,
            ('G', 92) => {
                let any = c.params.iter().any(|(l, _)| AXES.contains(l));
                for (a, axis) in AXES.iter().enumerate() {
                    if !any || c.has(*axis) {
                        let v = c.get(*axis).unwrap_or(0.0);
                        self.offset[a] = v - self.pos[a];
                    }
                }
            }
            ('G', 28) => {
                let any = c.params.iter().any(|(l, _)| matches!(l, 'X' | 'Y' | 'Z'));
                for (a, axis) in AXES[..3].iter().enumerate() {
                    if !any || c.has(*axis) {
                        self.pos[a] = 0.0;
                        self.offset[a] = 0.0;
                    }
                }
            }
            _ => return false,
        }
        true
    }
}

pub fn validate(p: &GcodeProgram, m: &MachineSpec) -> ValidationReport {
    let mut v = Vec::new();
    let mut k = Kinematics::default();
    let mut push = |line: usize, rule: Rule, detail: String| v.push(Violation { source_line: line, rule, detail });
    for (i, c) in p.commands.iter().enumerate() {
        let line = if c.source_line > 0 { c.source_line } else { i + 1 };
        let code = c.code();
        if is_always_forbidden(c.letter, c.number) {
            push(line, Rule::ForbiddenCommand, format!("{code} is never allowed"));
            continue;
        }
        if !m.allowed_commands.contains(&code) {
            push(line, Rule::CommandNotAllowed, format!("{code} is not on the machine allow-list"));
            continue;
        }
        if c.is('M', 104) || c.is('M', 109) {
            if let Some(s) = c.get('S').filter(|&s| s > m.max_hotend_temp) {
                push(line, Rule::HotendLimit, format!("S{s} exceeds {}", m.max_hotend_temp));
            }
        }
        if c.is('M', 140) || c.is('M', 190) {
            if let Some(s) = c.get('S').filter(|&s| s > m.max_bed_temp) {
                push(line, Rule::BedLimit, format!("S{s} exceeds {}", m.max_bed_temp));
            }
        }
        if k.apply_modal(c) {
            continue;
        }
        if c.is_motion() {
            let t = k.target(c);
            let lim = [m.bed_x, m.bed_y, m.max_z];
            let out = (0..3).any(|a| t[a] < -1e-9 || t[a] > lim[a] + 1e-9);
            if out {
                push(line, Rule::OutOfBounds, format!("target ({}, {}, {}) outside build volume", t[0], t[1], t[2]));
                continue;
            }
            let de = t[3] - k.pos[3];
            if de < -m.retraction_allowance - 1e-9 {
                push(line, Rule::EReversal, format!("E moves back by {}", -de));
            }
            k.pos = t;
        }
    }
    ValidationReport { violations: v }
}
