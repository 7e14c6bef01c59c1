//! Typed circuit description, the netlist text format and builtin fixtures.

mod builtin;
mod parse;

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::waveform::{Pwm, Waveform};

pub use builtin::{
    b6_bridge_reduced, builtin_circuit, half_wave_rectifier, B6Options, BuiltinCircuit, B6_PERIOD,
    B6_V_SWITCHING,
};
pub use parse::{parse_netlist, parse_value};

/// Name of the reference node.
pub const GROUND: &str = "0";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NetlistError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: unknown element kind '{letter}' in '{name}'")]
    UnknownKind {
        line: usize,
        letter: char,
        name: String,
    },
    #[error("dangling node '{node}': only element '{element}' is connected to it")]
    DanglingNode { node: String, element: String },
    #[error("duplicate element name '{0}'")]
    DuplicateName(String),
    #[error("element '{name}': {what} must be positive, got {value}")]
    NonPositive {
        name: String,
        what: &'static str,
        value: f64,
    },
    #[error("element '{0}' connects a node to itself")]
    ShortedElement(String),
    #[error("element '{name}': {reason}")]
    InvalidElement { name: String, reason: String },
    #[error("no element is connected to ground node \"0\"")]
    NoGround,
    #[error(".params: '{0}' is not a resistor, inductor or capacitor of this circuit")]
    UnknownParameter(String),
    #[error("invalid analysis directive: {0}")]
    InvalidDirective(String),
    #[error("unknown builtin circuit '{0}'")]
    UnknownBuiltin(String),
    #[error("invalid builtin option: {0}")]
    InvalidOption(String),
}

pub type Result<T> = std::result::Result<T, NetlistError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementKind {
    Resistor,
    Inductor,
    Capacitor,
    VoltageSource,
    CurrentSource,
    Diode,
    Switch,
}

impl ElementKind {
    pub fn from_letter(c: char) -> Option<Self> {
        Some(match c.to_ascii_uppercase() {
            'R' => ElementKind::Resistor,
            'L' => ElementKind::Inductor,
            'C' => ElementKind::Capacitor,
            'V' => ElementKind::VoltageSource,
            'I' => ElementKind::CurrentSource,
            'D' => ElementKind::Diode,
            'S' => ElementKind::Switch,
            _ => return None,
        })
    }
}

/// Shockley diode model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiodeModel {
    /// Saturation current in A.
    pub saturation_current: f64,
    pub emission: f64,
    /// Thermal voltage in V.
    pub thermal_voltage: f64,
}

impl Default for DiodeModel {
    fn default() -> Self {
        DiodeModel {
            saturation_current: 1e-12,
            emission: 1.0,
            thermal_voltage: 25.85e-3,
        }
    }
}

/// Time-scheduled switch: conductance ramps linearly between `1/r_off` and
/// `1/r_on` over `ramp` seconds at each edge of the PWM schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchModel {
    pub r_on: f64,
    pub r_off: f64,
    pub ramp: f64,
    pub period: f64,
    pub duty: f64,
    pub delay: f64,
}

impl SwitchModel {
    pub const DEFAULT_RAMP: f64 = 10e-9;

    /// On-state fraction in [0, 1] at time `t`.
    pub fn schedule(&self) -> Pwm {
        Pwm {
            low: 0.0,
            high: 1.0,
            period: self.period,
            duty: self.duty,
            rise: self.ramp,
            fall: self.ramp,
            delay: self.delay,
        }
    }

    pub fn conductance(&self, t: f64) -> f64 {
        let on = self.schedule().eval(t);
        let g_off = 1.0 / self.r_off;
        g_off + on * (1.0 / self.r_on - g_off)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Device {
    /// Resistance in Ω.
    Resistor(f64),
    /// Inductance in H.
    Inductor(f64),
    /// Capacitance in F.
    Capacitor(f64),
    VoltageSource(Waveform),
    /// Current flowing from the first node through the source to the second.
    CurrentSource(Waveform),
    Diode(DiodeModel),
    Switch(SwitchModel),
}

/// A two-terminal circuit element. For sources the first node is the
/// positive terminal, for diodes it is the anode.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub nodes: [String; 2],
    pub device: Device,
}

impl Element {
    pub fn new(
        name: impl Into<String>,
        a: impl Into<String>,
        b: impl Into<String>,
        device: Device,
    ) -> Self {
        Element {
            name: name.into(),
            nodes: [a.into(), b.into()],
            device,
        }
    }

    pub fn kind(&self) -> ElementKind {
        match self.device {
            Device::Resistor(_) => ElementKind::Resistor,
            Device::Inductor(_) => ElementKind::Inductor,
            Device::Capacitor(_) => ElementKind::Capacitor,
            Device::VoltageSource(_) => ElementKind::VoltageSource,
            Device::CurrentSource(_) => ElementKind::CurrentSource,
            Device::Diode(_) => ElementKind::Diode,
            Device::Switch(_) => ElementKind::Switch,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |what: &'static str, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(NetlistError::NonPositive {
                    name: self.name.clone(),
                    what,
                    value,
                })
            }
        };
        if self.nodes[0] == self.nodes[1] {
            return Err(NetlistError::ShortedElement(self.name.clone()));
        }
        let invalid = |reason: String| NetlistError::InvalidElement {
            name: self.name.clone(),
            reason,
        };
        match &self.device {
            Device::Resistor(v) | Device::Inductor(v) | Device::Capacitor(v) => {
                positive("value", *v)
            }
            Device::VoltageSource(w) | Device::CurrentSource(w) => w.check().map_err(invalid),
            Device::Diode(d) => {
                positive("IS", d.saturation_current)?;
                positive("N", d.emission)?;
                positive("VT", d.thermal_voltage)
            }
            Device::Switch(s) => {
                positive("RON", s.r_on)?;
                positive("ROFF", s.r_off)?;
                if s.r_off <= s.r_on {
                    return Err(invalid(format!(
                        "ROFF ({}) must exceed RON ({})",
                        s.r_off, s.r_on
                    )));
                }
                s.schedule().check().map_err(invalid)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Resistance,
    Inductance,
    Capacitance,
}

impl ParamKind {
    pub fn unit(self) -> &'static str {
        match self {
            ParamKind::Resistance => "Ohm",
            ParamKind::Inductance => "H",
            ParamKind::Capacitance => "F",
        }
    }
}

/// A differentiable circuit parameter: the value of one R, L or C element.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub id: usize,
    pub name: String,
    /// Index into [`Netlist::elements`].
    pub element: usize,
    pub kind: ParamKind,
    pub nominal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranDirective {
    pub dt: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensDirective {
    pub t_start: f64,
    pub t_end: f64,
    /// QoI selector such as `v(out)`, `v(a,b)` or `i(V1)`.
    pub qoi: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Directives {
    pub tran: Option<TranDirective>,
    pub sens: Option<SensDirective>,
    /// Explicit parameter restriction; `None` means every R, L and C.
    pub params: Option<Vec<String>>,
}

/// A validated circuit.
#[derive(Debug, Clone, PartialEq)]
pub struct Netlist {
    pub title: String,
    /// Node names in order of first appearance, ground first.
    pub nodes: Vec<String>,
    pub elements: Vec<Element>,
    pub params: Vec<Parameter>,
    pub directives: Directives,
}

impl Netlist {
    /// Validates `elements` and enumerates the differentiable parameters.
    pub fn new(
        title: impl Into<String>,
        elements: Vec<Element>,
        directives: Directives,
    ) -> Result<Netlist> {
        let mut seen = HashSet::new();
        for e in &elements {
            if !seen.insert(e.name.to_ascii_lowercase()) {
                return Err(NetlistError::DuplicateName(e.name.clone()));
            }
            e.validate()?;
        }

        let mut nodes = vec![GROUND.to_string()];
        let mut incidence: HashMap<&str, (usize, usize)> = HashMap::new();
        for (i, e) in elements.iter().enumerate() {
            for n in &e.nodes {
                if n != GROUND && !nodes.contains(n) {
                    nodes.push(n.clone());
                }
                incidence.entry(n.as_str()).or_insert((0, i)).0 += 1;
            }
        }
        if !incidence.contains_key(GROUND) {
            return Err(NetlistError::NoGround);
        }
        for node in &nodes[1..] {
            let (count, element) = incidence[node.as_str()];
            // A lone shunt to ground is a closed branch; anything else with one
            // connection is an open end.
            if count == 1 && !elements[element].nodes.iter().any(|n| n == GROUND) {
                return Err(NetlistError::DanglingNode {
                    node: node.clone(),
                    element: elements[element].name.clone(),
                });
            }
        }

        if let Some(tran) = &directives.tran {
            if !(tran.dt > 0.0 && tran.t_end > 0.0 && tran.dt <= tran.t_end) {
                return Err(NetlistError::InvalidDirective(format!(
                    ".tran needs 0 < dt <= t_end, got dt={} t_end={}",
                    tran.dt, tran.t_end
                )));
            }
        }
        if let Some(sens) = &directives.sens {
            if !(sens.t_start >= 0.0 && sens.t_end >= sens.t_start) {
                return Err(NetlistError::InvalidDirective(format!(
                    ".sens window [{}, {}] is empty or negative",
                    sens.t_start, sens.t_end
                )));
            }
        }

        let params = enumerate_params(&elements, directives.params.as_deref())?;
        Ok(Netlist {
            title: title.into(),
            nodes,
            elements,
            params,
            directives,
        })
    }

    pub fn element(&self, name: &str) -> Option<&Element> {
        self.elements
            .iter()
            .find(|e| e.name.eq_ignore_ascii_case(name))
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
    }

    /// Copy of this netlist with parameter `id` set to `value`.
    pub fn with_param_value(&self, id: usize, value: f64) -> Netlist {
        let mut out = self.clone();
        let p = &mut out.params[id];
        p.nominal = value;
        match &mut out.elements[p.element].device {
            Device::Resistor(v) | Device::Inductor(v) | Device::Capacitor(v) => *v = value,
            _ => unreachable!("parameters only reference R, L and C elements"),
        }
        out
    }
}

fn enumerate_params(elements: &[Element], restrict: Option<&[String]>) -> Result<Vec<Parameter>> {
    let differentiable = |e: &Element| match e.device {
        Device::Resistor(v) => Some((ParamKind::Resistance, v)),
        Device::Inductor(v) => Some((ParamKind::Inductance, v)),
        Device::Capacitor(v) => Some((ParamKind::Capacitance, v)),
        _ => None,
    };
    let mut chosen: Vec<usize> = match restrict {
        None => (0..elements.len())
            .filter(|&i| differentiable(&elements[i]).is_some())
            .collect(),
        Some(names) => {
            let mut idx = Vec::with_capacity(names.len());
            for name in names {
                let i = elements
                    .iter()
                    .position(|e| e.name.eq_ignore_ascii_case(name) && differentiable(e).is_some())
                    .ok_or_else(|| NetlistError::UnknownParameter(name.clone()))?;
                if !idx.contains(&i) {
                    idx.push(i);
                }
            }
            idx
        }
    };
    chosen.sort_by(|&a, &b| {
        let (na, nb) = (&elements[a].name, &elements[b].name);
        na.to_ascii_lowercase()
            .cmp(&nb.to_ascii_lowercase())
            .then_with(|| na.cmp(nb))
    });
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(id, element)| {
            let (kind, nominal) = differentiable(&elements[element]).expect("filtered above");
            Parameter {
                id,
                name: elements[element].name.clone(),
                element,
                kind,
                nominal,
            }
        })
        .collect())
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} ", self.name, self.nodes[0], self.nodes[1])?;
        match &self.device {
            Device::Resistor(v) | Device::Inductor(v) | Device::Capacitor(v) => write!(f, "{v:e}"),
            Device::VoltageSource(w) | Device::CurrentSource(w) => write!(f, "{w}"),
            Device::Diode(d) => write!(
                f,
                "IS={:e} N={:e} VT={:e}",
                d.saturation_current, d.emission, d.thermal_voltage
            ),
            Device::Switch(s) => write!(
                f,
                "RON={:e} ROFF={:e} RAMP={:e} PERIOD={:e} DUTY={:e} DELAY={:e}",
                s.r_on, s.r_off, s.ramp, s.period, s.duty, s.delay
            ),
        }
    }
}

/// Serializes to the netlist text format; `parse_netlist` reads it back.
impl fmt::Display for Netlist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.title.is_empty() {
            writeln!(f, ".title {}", self.title)?;
        }
        for e in &self.elements {
            writeln!(f, "{e}")?;
        }
        if let Some(t) = &self.directives.tran {
            writeln!(f, ".tran {:e} {:e}", t.dt, t.t_end)?;
        }
        if let Some(s) = &self.directives.sens {
            writeln!(f, ".sens {:e} {:e} {}", s.t_start, s.t_end, s.qoi)?;
        }
        if let Some(p) = &self.directives.params {
            writeln!(f, ".params {}", p.join(" "))?;
        }
        writeln!(f, ".end")
    }
}
