//! Print configuration and machine description, and the `key=value` text
//! format shared by config files and wire payloads.
//!
//! Keys are split in two families. Design-choice keys belong to the client
//! and travel in CONFIG. Machine-choice keys stay with the manufacturer; only
//! a public subset of the machine description is ever sent.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("machine-choice parameter `{0}` is not allowed in a client config")]
    MachineChoice(String),
    #[error("bad value for `{key}`: {value:?}")]
    BadValue { key: String, value: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

/// Parse `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, detail: format!("expected key=value, got {line:?}") });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, detail: "empty key".into() });
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(ConfigError::Duplicate(k.to_string()));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn write_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue { key: key.to_string(), value: v.to_string() })
}

fn finite(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = value(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(ConfigError::BadValue { key: key.to_string(), value: v.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FillPattern {
    #[default]
    Rectilinear,
}

impl FromStr for FillPattern {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "rectilinear" => Ok(FillPattern::Rectilinear),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Seam {
    /// Start each loop at the vertex closest to the nozzle.
    #[default]
    Nearest,
    /// Start each loop at its first vertex.
    Fixed,
}

pub const DESIGN_KEYS: [&str; 5] = ["layer_height", "fill_density", "fill_angle", "fill_pattern", "perimeter_count"];

#[derive(Debug, Clone, PartialEq)]
pub struct PrintConfig {
    pub layer_height: f64,
    pub fill_density: f64,
    /// Degrees.
    pub fill_angle: f64,
    pub fill_pattern: FillPattern,
    pub perimeter_count: u32,
    /// Height of the previous layer's top; set by the session per layer.
    pub z_offset: f64,
    pub seam: Seam,
    /// Absolute E value the layer starts from; set by the session so E keeps
    /// growing across separately sliced layers.
    pub e_offset: f64,
}

impl Default for PrintConfig {
    fn default() -> Self {
        Self {
            layer_height: 0.3,
            fill_density: 1.0,
            fill_angle: 45.0,
            fill_pattern: FillPattern::Rectilinear,
            perimeter_count: 2,
            z_offset: 0.0,
            seam: Seam::Nearest,
            e_offset: 0.0,
        }
    }
}

impl PrintConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.layer_height > 0.0 && self.layer_height.is_finite()) {
            return Err(ConfigError::Invalid(format!("layer height {} must be positive", self.layer_height)));
        }
        if !(0.0..=1.0).contains(&self.fill_density) {
            return Err(ConfigError::Invalid(format!("fill density {} must be in [0, 1]", self.fill_density)));
        }
        if !self.fill_angle.is_finite() {
            return Err(ConfigError::Invalid("fill angle must be finite".into()));
        }
        if self.z_offset < 0.0 {
            return Err(ConfigError::Invalid("z offset must be non-negative".into()));
        }
        Ok(())
    }

    /// Design-choice fields as sent in CONFIG.
    pub fn design_kv(&self) -> String {
        write_kv([
            ("layer_height", self.layer_height.to_string()),
            ("fill_density", self.fill_density.to_string()),
            ("fill_angle", self.fill_angle.to_string()),
            ("fill_pattern", "rectilinear".to_string()),
            ("perimeter_count", self.perimeter_count.to_string()),
        ])
    }

    /// Apply one design-choice key. Returns false for keys outside that family.
    fn set_design(&mut self, k: &str, v: &str) -> Result<bool, ConfigError> {
        match k {
            "layer_height" => self.layer_height = finite(k, v)?,
            "fill_density" => self.fill_density = finite(k, v)?,
            "fill_angle" => self.fill_angle = finite(k, v)?,
            "fill_pattern" => self.fill_pattern = value(k, v)?,
            "perimeter_count" => self.perimeter_count = value(k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parse a CONFIG payload: design-choice keys only, anything else is refused.
    pub fn from_design_kv(text: &str) -> Result<PrintConfig, ConfigError> {
        let mut c = PrintConfig::default();
        for (k, v) in parse_kv(text)? {
            if !c.set_design(&k, &v)? {
                return Err(if is_machine_key(&k) { ConfigError::MachineChoice(k) } else { ConfigError::UnknownKey(k) });
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Client-side settings file: design-choice keys plus the client's own
/// geometry options (supports, guide frame, orientation).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub print: PrintConfig,
    pub supports: bool,
    pub support: crate::support::SupportSpec,
    pub guide: crate::sectioner::GuideSpec,
    /// Euler angles in degrees, applied X then Y then Z.
    pub rotate: [f64; 3],
}

impl Default for ClientConfig {
    fn default() -> Self {
        let print = PrintConfig::default();
        let support = crate::support::SupportSpec { clearance: print.layer_height, ..Default::default() };
        Self { print, supports: true, support, guide: Default::default(), rotate: [0.0; 3] }
    }
}

impl ClientConfig {
    pub fn parse(text: &str) -> Result<ClientConfig, ConfigError> {
        let mut c = ClientConfig::default();
        let mut clearance_set = false;
        for (k, v) in parse_kv(text)? {
            if c.print.set_design(&k, &v)? {
                continue;
            }
            match k.as_str() {
                "supports" => {
                    c.supports = match v.as_str() {
                        "on" | "true" | "1" => true,
                        "off" | "false" | "0" => false,
                        _ => return Err(ConfigError::BadValue { key: k, value: v }),
                    }
                }
                "support_threshold" => c.support.overhang_threshold_deg = finite(&k, &v)?,
                "support_pillar" => c.support.pillar_xy = finite(&k, &v)?,
                "support_clearance" => {
                    c.support.clearance = finite(&k, &v)?;
                    clearance_set = true;
                }
                "guide_margin" => c.guide.margin = finite(&k, &v)?,
                "guide_wall" => c.guide.wall = finite(&k, &v)?,
                "guide_dot_size" => c.guide.dot_size = finite(&k, &v)?,
                "guide_dot_corner" => c.guide.dot_corner = v.parse().map_err(|_| ConfigError::BadValue { key: k, value: v })?,
                "rotate" => c.rotate = parse_triple(&k, &v)?,
                _ if is_machine_key(&k) => return Err(ConfigError::MachineChoice(k)),
                _ => return Err(ConfigError::UnknownKey(k)),
            }
        }
        if !clearance_set {
            c.support.clearance = c.print.layer_height;
        }
        c.print.validate()?;
        Ok(c)
    }
}

pub fn parse_triple(key: &str, v: &str) -> Result<[f64; 3], ConfigError> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(ConfigError::BadValue { key: key.to_string(), value: v.to_string() });
    }
    Ok([finite(key, parts[0])?, finite(key, parts[1])?, finite(key, parts[2])?])
}

pub const PUBLIC_KEYS: [&str; 9] = [
    "bed_x",
    "bed_y",
    "max_z",
    "nozzle_diameter",
    "filament_diameter",
    "layer_height_min",
    "layer_height_max",
    "max_hotend_temp",
    "max_bed_temp",
];

/// Machine-choice keys that are never published. The last three are common
/// slicer names with no field here; they are listed so client configs that
/// carry them are refused rather than silently ignored.
const PRIVATE_KEYS: [&str; 12] = [
    "hotend_temp",
    "bed_temp",
    "fan_speed",
    "travel_feed",
    "print_feed",
    "first_layer_feed",
    "allowed_commands",
    "z_allowance",
    "retraction_allowance",
    "temperature",
    "bridge_fan_speed",
    "disable_fan",
];

pub fn is_machine_key(k: &str) -> bool {
    PUBLIC_KEYS.contains(&k) || PRIVATE_KEYS.contains(&k)
}

pub const DEFAULT_ALLOWED: [&str; 15] = [
    "G0", "G1", "G28", "G90", "G91", "G92", "M82", "M83", "M84", "M104", "M106", "M107", "M109", "M140", "M190",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MachineSpec {
    pub bed_x: f64,
    pub bed_y: f64,
    pub max_z: f64,
    pub nozzle_diameter: f64,
    pub filament_diameter: f64,
    pub max_hotend_temp: f64,
    pub max_bed_temp: f64,
    pub hotend_temp: f64,
    pub bed_temp: f64,
    pub fan_speed: u8,
    /// mm/min.
    pub travel_feed: f64,
    pub print_feed: f64,
    pub first_layer_feed: f64,
    pub layer_height_min: f64,
    pub layer_height_max: f64,
    pub allowed_commands: BTreeSet<String>,
    /// Extra nozzle height added to every layer for shrinkage and overflow.
    pub z_allowance: f64,
    /// Largest tolerated backwards E step.
    pub retraction_allowance: f64,
}

impl Default for MachineSpec {
    fn default() -> Self {
        Self {
            bed_x: 220.0,
            bed_y: 220.0,
            max_z: 250.0,
            nozzle_diameter: 0.4,
            filament_diameter: 1.75,
            max_hotend_temp: 260.0,
            max_bed_temp: 110.0,
            hotend_temp: 200.0,
            bed_temp: 60.0,
            fan_speed: 255,
            travel_feed: 6000.0,
            print_feed: 1800.0,
            first_layer_feed: 1200.0,
            layer_height_min: 0.1,
            layer_height_max: 0.4,
            allowed_commands: DEFAULT_ALLOWED.iter().map(|s| s.to_string()).collect(),
            z_allowance: 0.0,
            retraction_allowance: 0.0,
        }
    }
}

impl MachineSpec {
    pub fn extrusion_width(&self) -> f64 {
        1.125 * self.nozzle_diameter
    }

    pub fn filament_area(&self) -> f64 {
        std::f64::consts::PI * (self.filament_diameter / 2.0).powi(2)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("bed_x", self.bed_x),
            ("bed_y", self.bed_y),
            ("max_z", self.max_z),
            ("nozzle_diameter", self.nozzle_diameter),
            ("filament_diameter", self.filament_diameter),
            ("travel_feed", self.travel_feed),
            ("print_feed", self.print_feed),
            ("first_layer_feed", self.first_layer_feed),
            ("layer_height_min", self.layer_height_min),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{k} must be positive")));
            }
        }
        if self.hotend_temp > self.max_hotend_temp {
            return Err(ConfigError::Invalid("hotend_temp exceeds max_hotend_temp".into()));
        }
        if self.bed_temp > self.max_bed_temp {
            return Err(ConfigError::Invalid("bed_temp exceeds max_bed_temp".into()));
        }
        if self.layer_height_min > self.layer_height_max {
            return Err(ConfigError::Invalid("layer_height_min exceeds layer_height_max".into()));
        }
        Ok(())
    }

    pub fn layer_range(&self) -> std::ops::RangeInclusive<f64> {
        self.layer_height_min..=self.layer_height_max
    }

    pub fn parse(text: &str) -> Result<MachineSpec, ConfigError> {
        let mut m = MachineSpec::default();
        for (k, v) in parse_kv(text)? {
            let key = k.as_str();
            match key {
                "bed_x" => m.bed_x = finite(key, &v)?,
                "bed_y" => m.bed_y = finite(key, &v)?,
                "max_z" => m.max_z = finite(key, &v)?,
                "nozzle_diameter" => m.nozzle_diameter = finite(key, &v)?,
                "filament_diameter" => m.filament_diameter = finite(key, &v)?,
                "max_hotend_temp" => m.max_hotend_temp = finite(key, &v)?,
                "max_bed_temp" => m.max_bed_temp = finite(key, &v)?,
                "hotend_temp" => m.hotend_temp = finite(key, &v)?,
                "bed_temp" => m.bed_temp = finite(key, &v)?,
                "fan_speed" => m.fan_speed = value(key, &v)?,
                "travel_feed" => m.travel_feed = finite(key, &v)?,
                "print_feed" => m.print_feed = finite(key, &v)?,
                "first_layer_feed" => m.first_layer_feed = finite(key, &v)?,
                "layer_height_min" => m.layer_height_min = finite(key, &v)?,
                "layer_height_max" => m.layer_height_max = finite(key, &v)?,
                "z_allowance" => m.z_allowance = finite(key, &v)?,
                "retraction_allowance" => m.retraction_allowance = finite(key, &v)?,
                "allowed_commands" => {
                    m.allowed_commands = v
                        .split(',')
                        .map(|s| s.trim().to_ascii_uppercase())
                        .filter(|s| !s.is_empty())
                        .collect()
                }
                _ => return Err(ConfigError::UnknownKey(k)),
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// The published subset, as sent in SPEC_REPLY.
    pub fn public_kv(&self) -> String {
        write_kv([
            ("bed_x", self.bed_x.to_string()),
            ("bed_y", self.bed_y.to_string()),
            ("max_z", self.max_z.to_string()),
            ("nozzle_diameter", self.nozzle_diameter.to_string()),
            ("filament_diameter", self.filament_diameter.to_string()),
            ("layer_height_min", self.layer_height_min.to_string()),
            ("layer_height_max", self.layer_height_max.to_string()),
            ("max_hotend_temp", self.max_hotend_temp.to_string()),
            ("max_bed_temp", self.max_bed_temp.to_string()),
        ])
    }

    /// Rebuild a machine from its published subset. Private settings take
    /// their defaults; only geometry-relevant values matter to the client.
    pub fn from_public_kv(text: &str) -> Result<MachineSpec, ConfigError> {
        let pairs = parse_kv(text)?;
        for (k, _) in &pairs {
            if !PUBLIC_KEYS.contains(&k.as_str()) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
        for k in PUBLIC_KEYS {
            if !pairs.iter().any(|(p, _)| p == k) {
                return Err(ConfigError::Missing(k.to_string()));
            }
        }
        let mut m = MachineSpec::default();
        let text = write_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())));
        let parsed = MachineSpec::parse(&text)?;
        m.bed_x = parsed.bed_x;
        m.bed_y = parsed.bed_y;
        m.max_z = parsed.max_z;
        m.nozzle_diameter = parsed.nozzle_diameter;
        m.filament_diameter = parsed.filament_diameter;
        m.layer_height_min = parsed.layer_height_min;
        m.layer_height_max = parsed.layer_height_max;
        m.max_hotend_temp = parsed.max_hotend_temp;
        m.max_bed_temp = parsed.max_bed_temp;
        m.hotend_temp = m.hotend_temp.min(m.max_hotend_temp);
        m.bed_temp = m.bed_temp.min(m.max_bed_temp);
        Ok(m)
    }
}
