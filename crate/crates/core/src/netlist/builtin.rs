//! Builtin fixture circuits.
//!
//! Component values are this crate's own defaults; they are chosen to give
//! the qualitative behaviour of the two demonstration circuits (rectifier
//! charge/discharge sawtooth, bridge switching overshoot) and are not taken
//! from any measured design.

use std::str::FromStr;

use super::{
    Device, DiodeModel, Directives, Element, Netlist, NetlistError, Result, SensDirective,
    SwitchModel, TranDirective,
};
use crate::waveform::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinCircuit {
    HalfWaveRectifier,
    B6BridgeReduced,
}

impl FromStr for BuiltinCircuit {
    type Err = NetlistError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half_wave_rectifier" | "rectifier" => Ok(BuiltinCircuit::HalfWaveRectifier),
            "b6_bridge_reduced" | "b6" => Ok(BuiltinCircuit::B6BridgeReduced),
            _ => Err(NetlistError::UnknownBuiltin(s.to_string())),
        }
    }
}

/// Size knobs of the reduced B6 bridge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct B6Options {
    /// RLC ladder stages per parasitic impedance position.
    pub ladder_stages: usize,
    /// Fine timestep written into the `.tran` directive.
    pub dt: f64,
}

impl Default for B6Options {
    fn default() -> Self {
        B6Options {
            ladder_stages: 1,
            dt: 2.5e-9,
        }
    }
}

impl B6Options {
    pub const MAX_STAGES: usize = 64;
}

pub fn builtin_circuit(name: &str, options: B6Options) -> Result<Netlist> {
    match name.parse()? {
        BuiltinCircuit::HalfWaveRectifier => Ok(half_wave_rectifier()),
        BuiltinCircuit::B6BridgeReduced => b6_bridge_reduced(options),
    }
}

/// Sine source, diode, load resistor and smoothing capacitor.
///
/// 10 V / 50 Hz input, R = 100 Ω, C = 1 mF, simulated for five periods.
pub fn half_wave_rectifier() -> Netlist {
    let elements = vec![
        Element::new(
            "Vin",
            "in",
            "0",
            Device::VoltageSource(Waveform::Sine {
                amplitude: 10.0,
                frequency: 50.0,
                phase: 0.0,
            }),
        ),
        Element::new("D1", "in", "out", Device::Diode(DiodeModel::default())),
        Element::new("R1", "out", "0", Device::Resistor(100.0)),
        Element::new("C1", "out", "0", Device::Capacitor(1e-3)),
    ];
    let directives = Directives {
        tran: Some(TranDirective {
            dt: 1e-5,
            t_end: 0.1,
        }),
        sens: Some(SensDirective {
            t_start: 0.08,
            t_end: 0.1,
            qoi: "v(out)".into(),
        }),
        params: None,
    };
    Netlist::new("half-wave rectifier", elements, directives).expect("fixture is valid")
}

/// PWM period of the bridge fixture.
pub const B6_PERIOD: f64 = 20e-6;
/// Instant at which the V-phase high-side switch turns off.
pub const B6_V_SWITCHING: f64 = 18.9e-6;

/// Six-switch bridge with drain-source capacitances, interconnect
/// inductances and `ladder_stages` RLC stages in each phase output line.
pub fn b6_bridge_reduced(options: B6Options) -> Result<Netlist> {
    if options.ladder_stages > B6Options::MAX_STAGES {
        return Err(NetlistError::InvalidOption(format!(
            "ladder_stages must be at most {}, got {}",
            B6Options::MAX_STAGES,
            options.ladder_stages
        )));
    }
    if !(options.dt > 0.0 && options.dt <= 1e-7) {
        return Err(NetlistError::InvalidOption(format!(
            "dt must lie in (0, 100 ns], got {}",
            options.dt
        )));
    }

    let mut el = Vec::new();
    let mut push = |name: &str, a: &str, b: &str, d: Device| el.push(Element::new(name, a, b, d));

    // 12.5 V supply with DC-link capacitor.
    push("Vdc", "p0", "0", Device::VoltageSource(Waveform::Dc(12.5)));
    push("R_dc", "p0", "p1", Device::Resistor(10e-3));
    push("L_dc", "p1", "p", Device::Inductor(20e-9));
    push("C_dclink", "p", "0", Device::Capacitor(10e-6));

    // High-side interconnect chain p -> uh -> vh -> wh.
    push("R_p-uh", "p", "p_uh", Device::Resistor(50e-3));
    push("L_p-uh", "p_uh", "uh_d", Device::Inductor(10e-9));
    push("R_uh-vh3", "uh_d", "uh_vh", Device::Resistor(0.2));
    push("L_uh-vh3", "uh_vh", "vh_d", Device::Inductor(50e-9));
    push("R_vh-wh3", "vh_d", "vh_wh", Device::Resistor(0.2));
    push("L_vh-wh3", "vh_wh", "wh_d", Device::Inductor(50e-9));

    // High-side on-intervals: U [0, 10) µs, V [8.9, 18.9) µs, W [13.3, 23.3) µs.
    let phases = [
        ("u", 0.0),
        ("v", B6_V_SWITCHING - 0.5 * B6_PERIOD),
        ("w", 13.3e-6),
    ];
    for (ph, delay) in phases {
        let sw = |delay: f64| SwitchModel {
            r_on: 10e-3,
            r_off: 1e6,
            ramp: SwitchModel::DEFAULT_RAMP,
            period: B6_PERIOD,
            duty: 0.5,
            delay,
        };
        let drain = format!("{ph}h_d");
        let mid = format!("{ph}_sw");
        push(&format!("S_{ph}h"), &drain, &mid, Device::Switch(sw(delay)));
        push(
            &format!("C_DS_{ph}h"),
            &drain,
            &mid,
            Device::Capacitor(2e-9),
        );
        push(
            &format!("S_{ph}l"),
            &mid,
            "0",
            Device::Switch(sw(delay + 0.5 * B6_PERIOD)),
        );
        push(&format!("C_DS_{ph}l"), &mid, "0", Device::Capacitor(2e-9));

        // Parasitic ladder: series R, series L, shunt C per stage.
        let mut from = mid.clone();
        for k in 1..=options.ladder_stages {
            let a = format!("{ph}_z{k}a");
            let b = format!("{ph}_z{k}");
            push(&format!("R_par_{ph}{k}"), &from, &a, Device::Resistor(0.1));
            push(&format!("L_par_{ph}{k}"), &a, &b, Device::Inductor(5e-9));
            push(
                &format!("C_par_{ph}{k}"),
                &b,
                "0",
                Device::Capacitor(100e-12),
            );
            from = b;
        }

        let winding = format!("{ph}_m");
        push(
            &format!("R_mot_{ph}"),
            &from,
            &winding,
            Device::Resistor(1.0),
        );
        push(
            &format!("L_mot_{ph}"),
            &winding,
            "star",
            Device::Inductor(50e-6),
        );
    }

    let t_end = 19.4e-6;
    let directives = Directives {
        tran: Some(TranDirective {
            dt: options.dt,
            t_end,
        }),
        sens: Some(SensDirective {
            t_start: 18.85e-6,
            t_end,
            qoi: "v(uh_d,u_sw)".into(),
        }),
        params: None,
    };
    Netlist::new(
        format!("B6 bridge, {} ladder stage(s)", options.ladder_stages),
        el,
        directives,
    )
}
