use serde::Serialize;

use crate::system::PowerSystem;

/// What a position of the stacked iterate holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum VarKind {
    Angle,
    Voltage,
    ActiveGen,
    ReactiveGen,
    Charge,
    Discharge,
    Energy,
    EqualityMultiplier,
    Slack,
    InequalityMultiplier,
}

impl VarKind {
    /// Primal quantities (including inequality slacks), as opposed to multipliers.
    pub fn is_primal(self) -> bool {
        !matches!(
            self,
            VarKind::EqualityMultiplier | VarKind::InequalityMultiplier
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            VarKind::Angle => "theta",
            VarKind::Voltage => "v",
            VarKind::ActiveGen => "p_g",
            VarKind::ReactiveGen => "q_g",
            VarKind::Charge => "p_in",
            VarKind::Discharge => "p_out",
            VarKind::Energy => "e",
            VarKind::EqualityMultiplier => "lambda",
            VarKind::Slack => "s",
            VarKind::InequalityMultiplier => "z",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VarInfo {
    pub kind: VarKind,
    pub step: usize,
    /// Bus, generator, device, or constraint index depending on `kind`.
    pub entity: usize,
    /// Owning bus index.
    pub bus: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EqualityKind {
    ActiveBalance { bus: usize },
    ReactiveBalance { bus: usize },
    StorageDynamics { device: usize },
    SlackAngle { bus: usize },
    VoltageSetpoint { bus: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Equality {
    pub kind: EqualityKind,
    pub step: usize,
    pub multiplier: usize,
}

/// One-sided inequality written as `h(x) >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InequalityKind {
    VoltageMin { bus: usize },
    VoltageMax { bus: usize },
    ActiveGenMin { gen: usize },
    ActiveGenMax { gen: usize },
    ReactiveGenMin { gen: usize },
    ReactiveGenMax { gen: usize },
    ChargeMin { device: usize },
    ChargeMax { device: usize },
    DischargeMin { device: usize },
    DischargeMax { device: usize },
    EnergyMin { device: usize },
    EnergyMax { device: usize },
    LineCurrent { branch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Inequality {
    pub kind: InequalityKind,
    pub step: usize,
    pub slack: usize,
    pub multiplier: usize,
}

/// Offsets of each group inside one step block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct StepOffsets {
    angle: usize,
    voltage: usize,
    p_gen: usize,
    q_gen: usize,
    charge: usize,
    discharge: usize,
    energy: usize,
    multipliers: usize,
    pairs: usize,
    size: usize,
}

/// Index map of the stacked N-step iterate.
///
/// Every step occupies one contiguous block of identical shape:
/// `[θ | V | P_G | Q_G | P_in | P_out | E | λ | (s, z)...]`, where `E` at step
/// `t` is the energy at the end of the interval. The equality multipliers are
/// ordered active balance, reactive balance, storage dynamics, slack angle,
/// voltage setpoints; each inequality contributes an adjacent `(s, z)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableLayout {
    pub horizon: usize,
    pub n_bus: usize,
    pub n_gen: usize,
    pub n_storage: usize,
    off: StepOffsets,
    pub vars: Vec<VarInfo>,
    pub equalities: Vec<Equality>,
    pub inequalities: Vec<Inequality>,
}

impl VariableLayout {
    pub fn new(system: &PowerSystem, horizon: usize) -> Self {
        let nb = system.n_buses();
        let ng = system.generators.len();
        let ns = system.storages.len();
        let gen_bus: Vec<usize> = system
            .generators
            .iter()
            .map(|g| system.idx(g.bus))
            .collect();
        let sto_bus: Vec<usize> = system.storages.iter().map(|s| system.idx(s.bus)).collect();

        let mut eq_kinds = Vec::new();
        eq_kinds.extend((0..nb).map(|bus| EqualityKind::ActiveBalance { bus }));
        eq_kinds.extend((0..nb).map(|bus| EqualityKind::ReactiveBalance { bus }));
        eq_kinds.extend((0..ns).map(|device| EqualityKind::StorageDynamics { device }));
        eq_kinds.extend(
            system
                .slack_indices()
                .into_iter()
                .map(|bus| EqualityKind::SlackAngle { bus }),
        );
        eq_kinds.extend(
            (0..nb)
                .filter(|&b| system.buses[b].v_set.is_some())
                .map(|bus| EqualityKind::VoltageSetpoint { bus }),
        );

        let mut ineq_kinds = Vec::new();
        for bus in 0..nb {
            ineq_kinds.push(InequalityKind::VoltageMin { bus });
            ineq_kinds.push(InequalityKind::VoltageMax { bus });
        }
        for gen in 0..ng {
            ineq_kinds.push(InequalityKind::ActiveGenMin { gen });
            ineq_kinds.push(InequalityKind::ActiveGenMax { gen });
            ineq_kinds.push(InequalityKind::ReactiveGenMin { gen });
            ineq_kinds.push(InequalityKind::ReactiveGenMax { gen });
        }
        for device in 0..ns {
            ineq_kinds.push(InequalityKind::ChargeMin { device });
            ineq_kinds.push(InequalityKind::ChargeMax { device });
            ineq_kinds.push(InequalityKind::DischargeMin { device });
            ineq_kinds.push(InequalityKind::DischargeMax { device });
            ineq_kinds.push(InequalityKind::EnergyMin { device });
            ineq_kinds.push(InequalityKind::EnergyMax { device });
        }
        for (branch, br) in system.branches.iter().enumerate() {
            if br.i_max.is_some() {
                ineq_kinds.push(InequalityKind::LineCurrent { branch });
            }
        }

        let angle = 0;
        let voltage = angle + nb;
        let p_gen = voltage + nb;
        let q_gen = p_gen + ng;
        let charge = q_gen + ng;
        let discharge = charge + ns;
        let energy = discharge + ns;
        let multipliers = energy + ns;
        let pairs = multipliers + eq_kinds.len();
        let size = pairs + 2 * ineq_kinds.len();
        let off = StepOffsets {
            angle,
            voltage,
            p_gen,
            q_gen,
            charge,
            discharge,
            energy,
            multipliers,
            pairs,
            size,
        };

        let ineq_bus = |k: &InequalityKind| match *k {
            InequalityKind::VoltageMin { bus } | InequalityKind::VoltageMax { bus } => bus,
            InequalityKind::ActiveGenMin { gen }
            | InequalityKind::ActiveGenMax { gen }
            | InequalityKind::ReactiveGenMin { gen }
            | InequalityKind::ReactiveGenMax { gen } => gen_bus[gen],
            InequalityKind::ChargeMin { device }
            | InequalityKind::ChargeMax { device }
            | InequalityKind::DischargeMin { device }
            | InequalityKind::DischargeMax { device }
            | InequalityKind::EnergyMin { device }
            | InequalityKind::EnergyMax { device } => sto_bus[device],
            // the limit is enforced at the from-end
            InequalityKind::LineCurrent { branch } => system.idx(system.branches[branch].from_bus),
        };
        let eq_bus = |k: &EqualityKind| match *k {
            EqualityKind::ActiveBalance { bus }
            | EqualityKind::ReactiveBalance { bus }
            | EqualityKind::SlackAngle { bus }
            | EqualityKind::VoltageSetpoint { bus } => bus,
            EqualityKind::StorageDynamics { device } => sto_bus[device],
        };

        let mut vars = Vec::with_capacity(size * horizon);
        let mut equalities = Vec::with_capacity(eq_kinds.len() * horizon);
        let mut inequalities = Vec::with_capacity(ineq_kinds.len() * horizon);
        for step in 0..horizon {
            let base = step * size;
            let v = |kind, entity, bus| VarInfo {
                kind,
                step,
                entity,
                bus,
            };
            vars.extend((0..nb).map(|b| v(VarKind::Angle, b, b)));
            vars.extend((0..nb).map(|b| v(VarKind::Voltage, b, b)));
            vars.extend((0..ng).map(|g| v(VarKind::ActiveGen, g, gen_bus[g])));
            vars.extend((0..ng).map(|g| v(VarKind::ReactiveGen, g, gen_bus[g])));
            vars.extend((0..ns).map(|d| v(VarKind::Charge, d, sto_bus[d])));
            vars.extend((0..ns).map(|d| v(VarKind::Discharge, d, sto_bus[d])));
            vars.extend((0..ns).map(|d| v(VarKind::Energy, d, sto_bus[d])));
            for (k, kind) in eq_kinds.iter().enumerate() {
                let e = equalities.len();
                equalities.push(Equality {
                    kind: *kind,
                    step,
                    multiplier: base + multipliers + k,
                });
                vars.push(v(VarKind::EqualityMultiplier, e, eq_bus(kind)));
            }
            for (k, kind) in ineq_kinds.iter().enumerate() {
                let i = inequalities.len();
                let bus = ineq_bus(kind);
                inequalities.push(Inequality {
                    kind: *kind,
                    step,
                    slack: base + pairs + 2 * k,
                    multiplier: base + pairs + 2 * k + 1,
                });
                vars.push(v(VarKind::Slack, i, bus));
                vars.push(v(VarKind::InequalityMultiplier, i, bus));
            }
            debug_assert_eq!(vars.len(), base + size);
        }

        VariableLayout {
            horizon,
            n_bus: nb,
            n_gen: ng,
            n_storage: ns,
            off,
            vars,
            equalities,
            inequalities,
        }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Size of one step block.
    pub fn step_size(&self) -> usize {
        self.off.size
    }

    pub fn angle(&self, bus: usize, t: usize) -> usize {
        t * self.off.size + self.off.angle + bus
    }
    pub fn voltage(&self, bus: usize, t: usize) -> usize {
        t * self.off.size + self.off.voltage + bus
    }
    pub fn p_gen(&self, gen: usize, t: usize) -> usize {
        t * self.off.size + self.off.p_gen + gen
    }
    pub fn q_gen(&self, gen: usize, t: usize) -> usize {
        t * self.off.size + self.off.q_gen + gen
    }
    pub fn charge(&self, device: usize, t: usize) -> usize {
        t * self.off.size + self.off.charge + device
    }
    pub fn discharge(&self, device: usize, t: usize) -> usize {
        t * self.off.size + self.off.discharge + device
    }
    pub fn energy(&self, device: usize, t: usize) -> usize {
        t * self.off.size + self.off.energy + device
    }

    /// Number of equality constraints per step.
    pub fn equalities_per_step(&self) -> usize {
        self.off.pairs - self.off.multipliers
    }

    pub fn inequalities_per_step(&self) -> usize {
        (self.off.size - self.off.pairs) / 2
    }

    /// Number of primal power-system variables (excluding inequality slacks).
    pub fn n_primal(&self) -> usize {
        self.horizon * self.off.multipliers
    }

    pub fn bus_of(&self, i: usize) -> usize {
        self.vars[i].bus
    }

    /// True for positions that get diagonal regularization (primal block).
    pub fn primal_mask(&self) -> Vec<bool> {
        self.vars.iter().map(|v| v.kind.is_primal()).collect()
    }

    /// Variable index sets per bus (S_m).
    pub fn bus_sets(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.n_bus];
        for (i, v) in self.vars.iter().enumerate() {
            sets[v.bus].push(i);
        }
        sets
    }

    /// Equality rows of the constraint residual (multiplier positions) and
    /// inequality rows (`h - s`, at the multiplier positions).
    pub fn constraint_rows(&self) -> Vec<usize> {
        self.equalities
            .iter()
            .map(|e| e.multiplier)
            .chain(self.inequalities.iter().map(|i| i.multiplier))
            .collect()
    }
}
