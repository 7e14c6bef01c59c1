//! Modified nodal analysis: assembles
//!
//! ```text
//! Jc φ̇ + Jg φ + i_nl(φ, t) − i_s(t) = 0
//! ```
//!
//! from a [`Netlist`]. Unknowns are the non-ground node voltages followed by
//! one branch current per voltage source and inductor. Branch currents flow
//! from the element's first node through the element to its second node, so
//! a voltage source delivering power carries a negative branch current.
//!
//! Diodes and switches contribute through [`StampedSystem::eval_nonlinear`];
//! no element depends on φ̇ nonlinearly, so the nonlinear part only adds to
//! the effective conductance matrix.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::netlist::{Device, DiodeModel, Netlist, ParamKind, Parameter, SwitchModel, GROUND};
use crate::sparse::SparseMatrix;
use crate::waveform::Waveform;

/// Diode exponent beyond which the Shockley curve is continued linearly.
pub const DIODE_EXP_CLAMP: f64 = 40.0;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MnaError {
    #[error("unknown parameter id {0}")]
    UnknownParameter(usize),
    #[error("unknown node '{0}'")]
    UnknownNode(String),
    #[error("element '{0}' has no branch current")]
    NoBranch(String),
    #[error("invalid selector '{0}': {1}")]
    InvalidSelector(String, String),
}

/// Row assignment of the unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    /// Non-ground node names; node `nodes[i]` owns row `i`.
    pub nodes: Vec<String>,
    /// `(element name, row)` for every voltage source and inductor.
    pub branches: Vec<(String, usize)>,
    /// Per netlist element: the rows of its two terminals (`None` = ground).
    pub terminals: Vec<[Option<usize>; 2]>,
    /// Per netlist element: its branch row, if any.
    pub branch_of: Vec<Option<usize>>,
    pub n_dofs: usize,
}

impl DofMap {
    pub fn node(&self, name: &str) -> Result<Option<usize>, MnaError> {
        if name == GROUND {
            return Ok(None);
        }
        self.nodes
            .iter()
            .position(|n| n == name)
            .map(Some)
            .ok_or_else(|| MnaError::UnknownNode(name.to_string()))
    }

    pub fn branch(&self, element: &str) -> Result<usize, MnaError> {
        self.branches
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(element))
            .map(|&(_, row)| row)
            .ok_or_else(|| MnaError::NoBranch(element.to_string()))
    }

    /// Display names: `v(node)` for node rows, `i(element)` for branch rows.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.nodes.iter().map(|n| format!("v({n})")).collect();
        names.extend(self.branches.iter().map(|(e, _)| format!("i({e})")));
        names
    }
}

pub fn assign_dofs(netlist: &Netlist) -> DofMap {
    let nodes: Vec<String> = netlist
        .nodes
        .iter()
        .filter(|n| *n != GROUND)
        .cloned()
        .collect();
    let row = |name: &str| nodes.iter().position(|n| n == name);
    let terminals = netlist
        .elements
        .iter()
        .map(|e| [row(&e.nodes[0]), row(&e.nodes[1])])
        .collect();
    let mut next = nodes.len();
    let mut branches = Vec::new();
    let branch_of = netlist
        .elements
        .iter()
        .map(|e| match e.device {
            Device::VoltageSource(_) | Device::Inductor(_) => {
                branches.push((e.name.clone(), next));
                next += 1;
                Some(next - 1)
            }
            _ => None,
        })
        .collect();
    DofMap {
        nodes,
        branches,
        terminals,
        branch_of,
        n_dofs: next,
    }
}

/// `±value` two-terminal stamp pattern.
fn stamp_pair(t: &mut Vec<(usize, usize, f64)>, [a, b]: [Option<usize>; 2], value: f64) {
    if let Some(a) = a {
        t.push((a, a, value));
    }
    if let Some(b) = b {
        t.push((b, b, value));
    }
    if let (Some(a), Some(b)) = (a, b) {
        t.push((a, b, -value));
        t.push((b, a, -value));
    }
}

/// Incidence stamp of a branch current: KCL rows of the terminals and the
/// branch-equation row `v_a − v_b`.
fn stamp_incidence(t: &mut Vec<(usize, usize, f64)>, [a, b]: [Option<usize>; 2], br: usize) {
    if let Some(a) = a {
        t.push((a, br, 1.0));
        t.push((br, a, 1.0));
    }
    if let Some(b) = b {
        t.push((b, br, -1.0));
        t.push((br, b, -1.0));
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SourceStamp {
    waveform: Waveform,
    /// `(row, sign)` entries of i_s this source drives.
    rows: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearStamp {
    Diode {
        element: usize,
        terminals: [Option<usize>; 2],
        model: DiodeModel,
    },
    Switch {
        element: usize,
        terminals: [Option<usize>; 2],
        model: SwitchModel,
    },
}

/// Parameter derivative of the stamp matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStamp {
    pub djc: SparseMatrix,
    pub djg: SparseMatrix,
}

/// The assembled DAE. Immutable after construction.
#[derive(Debug, Clone)]
pub struct StampedSystem {
    pub dofs: DofMap,
    pub jc: SparseMatrix,
    pub jg: SparseMatrix,
    jc_dense: DMatrix<f64>,
    jg_dense: DMatrix<f64>,
    sources: Vec<SourceStamp>,
    pub nonlinear: Vec<NonlinearStamp>,
    pub params: Vec<Parameter>,
    pub param_stamps: Vec<ParamStamp>,
}

pub fn stamp_linear(netlist: &Netlist, dofs: &DofMap) -> StampedSystem {
    let n = dofs.n_dofs;
    let mut jc = Vec::new();
    let mut jg = Vec::new();
    let mut sources = Vec::new();
    let mut nonlinear = Vec::new();
    for (i, e) in netlist.elements.iter().enumerate() {
        let term = dofs.terminals[i];
        match &e.device {
            Device::Resistor(r) => stamp_pair(&mut jg, term, 1.0 / r),
            Device::Capacitor(c) => stamp_pair(&mut jc, term, *c),
            Device::Inductor(l) => {
                let br = dofs.branch_of[i].expect("inductors own a branch row");
                stamp_incidence(&mut jg, term, br);
                jc.push((br, br, -l));
            }
            Device::VoltageSource(w) => {
                let br = dofs.branch_of[i].expect("voltage sources own a branch row");
                stamp_incidence(&mut jg, term, br);
                sources.push(SourceStamp {
                    waveform: *w,
                    rows: vec![(br, 1.0)],
                });
            }
            Device::CurrentSource(w) => {
                let mut rows = Vec::new();
                if let Some(a) = term[0] {
                    rows.push((a, -1.0));
                }
                if let Some(b) = term[1] {
                    rows.push((b, 1.0));
                }
                sources.push(SourceStamp { waveform: *w, rows });
            }
            Device::Diode(model) => nonlinear.push(NonlinearStamp::Diode {
                element: i,
                terminals: term,
                model: *model,
            }),
            Device::Switch(model) => nonlinear.push(NonlinearStamp::Switch {
                element: i,
                terminals: term,
                model: *model,
            }),
        }
    }
    let jc = SparseMatrix::from_triplets(n, jc);
    let jg = SparseMatrix::from_triplets(n, jg);
    let mut sys = StampedSystem {
        dofs: dofs.clone(),
        jc_dense: jc.to_dense(),
        jg_dense: jg.to_dense(),
        jc,
        jg,
        sources,
        nonlinear,
        params: netlist.params.clone(),
        param_stamps: Vec::new(),
    };
    sys.param_stamps = netlist
        .params
        .iter()
        .map(|p| param_stamps(netlist, dofs, p).expect("netlist parameters are registered"))
        .collect();
    sys
}

/// `(dJc/dp, dJg/dp)` for one parameter.
pub fn param_stamps(
    netlist: &Netlist,
    dofs: &DofMap,
    p: &Parameter,
) -> Result<ParamStamp, MnaError> {
    if netlist.params.get(p.id).map(|q| q.element) != Some(p.element) {
        return Err(MnaError::UnknownParameter(p.id));
    }
    let n = dofs.n_dofs;
    let term = dofs.terminals[p.element];
    let mut djc = Vec::new();
    let mut djg = Vec::new();
    match p.kind {
        ParamKind::Resistance => stamp_pair(&mut djg, term, -1.0 / (p.nominal * p.nominal)),
        ParamKind::Capacitance => stamp_pair(&mut djc, term, 1.0),
        ParamKind::Inductance => {
            let br = dofs.branch_of[p.element].expect("inductors own a branch row");
            djc.push((br, br, -1.0));
        }
    }
    Ok(ParamStamp {
        djc: SparseMatrix::from_triplets(n, djc),
        djg: SparseMatrix::from_triplets(n, djg),
    })
}

/// DoF map plus all stamps.
pub fn assemble(netlist: &Netlist) -> StampedSystem {
    stamp_linear(netlist, &assign_dofs(netlist))
}

fn branch_voltage(phi: &DVector<f64>, [a, b]: [Option<usize>; 2]) -> f64 {
    a.map_or(0.0, |a| phi[a]) - b.map_or(0.0, |b| phi[b])
}

/// Shockley current and conductance with the exponent continued linearly
/// past [`DIODE_EXP_CLAMP`].
pub fn diode_current(model: &DiodeModel, v: f64) -> (f64, f64) {
    let nvt = model.emission * model.thermal_voltage;
    let x = v / nvt;
    if x <= DIODE_EXP_CLAMP {
        (
            model.saturation_current * x.exp_m1(),
            model.saturation_current * x.exp() / nvt,
        )
    } else {
        let e = DIODE_EXP_CLAMP.exp();
        (
            model.saturation_current * (e * (1.0 + x - DIODE_EXP_CLAMP) - 1.0),
            model.saturation_current * e / nvt,
        )
    }
}

impl StampedSystem {
    pub fn n_dofs(&self) -> usize {
        self.dofs.n_dofs
    }

    pub fn jc_dense(&self) -> &DMatrix<f64> {
        &self.jc_dense
    }

    pub fn jg_dense(&self) -> &DMatrix<f64> {
        &self.jg_dense
    }

    pub fn param_stamp(&self, id: usize) -> Result<&ParamStamp, MnaError> {
        self.param_stamps
            .get(id)
            .ok_or(MnaError::UnknownParameter(id))
    }

    /// Independent source vector `i_s(t)`.
    pub fn source(&self, t: f64) -> DVector<f64> {
        let mut s = DVector::zeros(self.n_dofs());
        for src in &self.sources {
            let v = src.waveform.eval(t);
            for &(row, sign) in &src.rows {
                s[row] += sign * v;
            }
        }
        s
    }

    /// Adds `i_nl(φ, t)` to `current` and `∂i_nl/∂φ` to `jacobian`.
    pub fn add_nonlinear(
        &self,
        phi: &DVector<f64>,
        t: f64,
        current: &mut DVector<f64>,
        jacobian: &mut DMatrix<f64>,
    ) {
        for nl in &self.nonlinear {
            let (term, i, g) = match nl {
                NonlinearStamp::Diode {
                    terminals, model, ..
                } => {
                    let (i, g) = diode_current(model, branch_voltage(phi, *terminals));
                    (*terminals, i, g)
                }
                NonlinearStamp::Switch {
                    terminals, model, ..
                } => {
                    let g = model.conductance(t);
                    (*terminals, g * branch_voltage(phi, *terminals), g)
                }
            };
            let [a, b] = term;
            if let Some(a) = a {
                current[a] += i;
                jacobian[(a, a)] += g;
            }
            if let Some(b) = b {
                current[b] -= i;
                jacobian[(b, b)] += g;
            }
            if let (Some(a), Some(b)) = (a, b) {
                jacobian[(a, b)] -= g;
                jacobian[(b, a)] -= g;
            }
        }
    }

    /// `(i_nl, ∂i_nl/∂φ)` at `(φ, t)`.
    pub fn eval_nonlinear(&self, phi: &DVector<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n_dofs();
        let mut current = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, n);
        self.add_nonlinear(phi, t, &mut current, &mut jac);
        (current, jac)
    }

    /// Static residual `Jg φ + i_nl(φ, t) − i_s(t)` and its Jacobian.
    pub fn static_residual(&self, phi: &DVector<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let mut r = &self.jg_dense * phi - self.source(t);
        let mut jac = self.jg_dense.clone();
        self.add_nonlinear(phi, t, &mut r, &mut jac);
        (r, jac)
    }

    /// Effective conductance matrix `Jg + ∂i_nl/∂φ` linearized at `(φ, t)`.
    pub fn conductance_at(&self, phi: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let mut scratch = DVector::zeros(self.n_dofs());
        let mut jac = self.jg_dense.clone();
        self.add_nonlinear(phi, t, &mut scratch, &mut jac);
        jac
    }
}
