//! Simulated motor velocity loop: PI feedback with optional feedforward on
//! single- and two-inertia plants, and the prompt/finetune/evaluate protocol
//! comparing physics-based and in-context feedforward.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::behavior::{encode_records, BehaviorModel, EncodedPair, LayerSelector};
use crate::codec::Codec;
use crate::corpus::{CorpusRecord, Split};
use crate::error::{Error, Result};
use crate::signals::{generate, rmse, KindTag, Signal, SignalKind};

/// Velocity beyond which a run counts as unstable.
pub const INSTABILITY_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Dynamics {
    /// `J dω/dt = Kt i_q - b ω - Tc sign(ω)`.
    SingleInertia { j: f64, b: f64, kt: f64, tc: f64 },
    /// Motor and load inertias coupled by a compliant, damped shaft.
    TwoInertia { jm: f64, jl: f64, k: f64, c: f64, bm: f64, bl: f64, kt: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantModel {
    pub dynamics: Dynamics,
    pub dt: f64,
}

impl PlantModel {
    pub fn single_inertia(j: f64, b: f64, kt: f64, tc: f64, dt: f64) -> Result<PlantModel> {
        let p = PlantModel { dynamics: Dynamics::SingleInertia { j, b, kt, tc }, dt };
        p.validate()?;
        Ok(p)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn two_inertia(jm: f64, jl: f64, k: f64, c: f64, bm: f64, bl: f64, kt: f64, dt: f64) -> Result<PlantModel> {
        let p = PlantModel { dynamics: Dynamics::TwoInertia { jm, jl, k, c, bm, bl, kt }, dt };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(field: &'static str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::param(field, format!("must be positive, got {v}")))
            }
        }
        positive("dt", self.dt)?;
        match self.dynamics {
            Dynamics::SingleInertia { j, b, kt, tc } => {
                positive("j", j)?;
                positive("b", b)?;
                positive("kt", kt)?;
                if !(tc.is_finite() && tc >= 0.0) {
                    return Err(Error::param("tc", format!("must be >= 0, got {tc}")));
                }
                if self.dt >= 2.0 * j / b {
                    return Err(Error::param("dt", format!("{} violates the Euler stability bound 2J/b = {}", self.dt, 2.0 * j / b)));
                }
            }
            Dynamics::TwoInertia { jm, jl, k, c, bm, bl, kt } => {
                for (field, v) in [("jm", jm), ("jl", jl), ("k", k), ("c", c), ("bm", bm), ("bl", bl), ("kt", kt)] {
                    positive(field, v)?;
                }
            }
        }
        Ok(())
    }

    /// Rigid-body `(J, b, Kt, Tc)`; the two-inertia plant lumps both masses.
    pub fn rigid(&self) -> (f64, f64, f64, f64) {
        match self.dynamics {
            Dynamics::SingleInertia { j, b, kt, tc } => (j, b, kt, tc),
            Dynamics::TwoInertia { jm, jl, bm, bl, kt, .. } => (jm + jl, bm + bl, kt, 0.0),
        }
    }
}

/// Discrete-time plant state driven by the torque current.
enum PlantState {
    Single { omega: f64, j: f64, b: f64, kt: f64, tc: f64, dt: f64 },
    /// State `[ω_m, ω_l, θ]` with zero-order-hold matrices.
    Two { x: Vector3<f64>, phi: Matrix3<f64>, gamma: Vector3<f64> },
}

impl PlantState {
    fn new(plant: &PlantModel) -> PlantState {
        match plant.dynamics {
            Dynamics::SingleInertia { j, b, kt, tc } => PlantState::Single { omega: 0.0, j, b, kt, tc, dt: plant.dt },
            Dynamics::TwoInertia { jm, jl, k, c, bm, bl, kt } => {
                let (phi, gamma) = two_inertia_zoh(jm, jl, k, c, bm, bl, kt, plant.dt);
                PlantState::Two { x: Vector3::zeros(), phi, gamma }
            }
        }
    }

    fn velocity(&self) -> f64 {
        match self {
            PlantState::Single { omega, .. } => *omega,
            PlantState::Two { x, .. } => x[0],
        }
    }

    fn step(&mut self, iq: f64) {
        match self {
            PlantState::Single { omega, j, b, kt, tc, dt } => {
                let drive = *kt * iq - *b * *omega;
                if *omega == 0.0 && drive.abs() <= *tc {
                    return;
                }
                let dir = if *omega != 0.0 { omega.signum() } else { drive.signum() };
                let next = *omega + *dt / *j * (drive - *tc * dir);
                // Friction alone cannot reverse the motion.
                *omega = if *tc > 0.0 && next * dir < 0.0 && (*kt * iq) * dir <= *tc { 0.0 } else { next };
            }
            PlantState::Two { x, phi, gamma } => {
                *x = *phi * *x + *gamma * iq;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn two_inertia_zoh(jm: f64, jl: f64, k: f64, c: f64, bm: f64, bl: f64, kt: f64, dt: f64) -> (Matrix3<f64>, Vector3<f64>) {
    // Augmented exponential of [[A, B], [0, 0]] * dt gives both matrices.
    let mut m = DMatrix::<f64>::zeros(4, 4);
    m[(0, 0)] = -(bm + c) / jm;
    m[(0, 1)] = c / jm;
    m[(0, 2)] = -k / jm;
    m[(0, 3)] = kt / jm;
    m[(1, 0)] = c / jl;
    m[(1, 1)] = -(bl + c) / jl;
    m[(1, 2)] = k / jl;
    m[(2, 0)] = 1.0;
    m[(2, 1)] = -1.0;
    let e = (m * dt).exp();
    let phi = Matrix3::from_fn(|r, c| e[(r, c)]);
    let gamma = Vector3::new(e[(0, 3)], e[(1, 3)], e[(2, 3)]);
    (phi, gamma)
}

/// Stored mechanical energy of a two-inertia state `[ω_m, ω_l, θ]`.
pub fn two_inertia_energy(plant: &PlantModel, state: [f64; 3]) -> f64 {
    match plant.dynamics {
        Dynamics::TwoInertia { jm, jl, k, .. } => 0.5 * (jm * state[0].powi(2) + jl * state[1].powi(2) + k * state[2].powi(2)),
        Dynamics::SingleInertia { j, .. } => 0.5 * j * state[0].powi(2),
    }
}

/// Open-loop response from an initial state, returning every state visited.
pub fn free_response(plant: &PlantModel, initial: [f64; 3], iq: &[f64]) -> Result<Vec<[f64; 3]>> {
    plant.validate()?;
    let mut state = PlantState::new(plant);
    match &mut state {
        PlantState::Single { omega, .. } => *omega = initial[0],
        PlantState::Two { x, .. } => *x = Vector3::from(initial),
    }
    let mut out = Vec::with_capacity(iq.len() + 1);
    let snapshot = |s: &PlantState| match s {
        PlantState::Single { omega, .. } => [*omega, 0.0, 0.0],
        PlantState::Two { x, .. } => [x[0], x[1], x[2]],
    };
    out.push(snapshot(&state));
    for &u in iq {
        state.step(u);
        out.push(snapshot(&state));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PIGains {
    pub kp: f64,
    pub ki: f64,
    /// Current clamp; the integrator is frozen while the output saturates.
    pub output_limit: f64,
}

impl PIGains {
    pub fn new(kp: f64, ki: f64, output_limit: f64) -> Result<PIGains> {
        let g = PIGains { kp, ki, output_limit };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kp >= 0.0 && self.kp.is_finite()) {
            return Err(Error::param("kp", format!("must be >= 0, got {}", self.kp)));
        }
        if !(self.ki >= 0.0 && self.ki.is_finite()) {
            return Err(Error::param("ki", format!("must be >= 0, got {}", self.ki)));
        }
        if !(self.output_limit > 0.0) {
            return Err(Error::param("output_limit", format!("must be positive, got {}", self.output_limit)));
        }
        Ok(())
    }

    /// Critically damped pole placement on the rigid-body model so that the
    /// loop settles (4 time constants) in `settling_time`.
    pub fn pole_placement(plant: &PlantModel, settling_time: f64, output_limit: f64) -> Result<PIGains> {
        if !(settling_time > 0.0) {
            return Err(Error::param("settling_time", format!("must be positive, got {settling_time}")));
        }
        let (j, b, kt, _) = plant.rigid();
        let wn = 4.0 / settling_time;
        PIGains::new(((2.0 * wn * j - b) / kt).max(0.0), wn * wn * j / kt, output_limit)
    }

    pub fn scaled(&self, factor: f64) -> PIGains {
        PIGains { kp: self.kp * factor, ki: self.ki * factor, output_limit: self.output_limit }
    }
}

/// Measured closed-loop signals, in physical units (scale 1).
#[derive(Clone, Debug, PartialEq)]
pub struct MotorTrace {
    pub omega: Signal,
    pub iq: Signal,
    pub target: Signal,
    /// Largest `|∫e|` reached by the integrator.
    pub integrator_peak: f64,
}

impl MotorTrace {
    pub fn tracking_rmse(&self) -> Result<f64> {
        rmse(&self.omega, &self.target)
    }
}

/// Runs the PI loop from rest. `ω[n]` is measured before `i_q[n]` is applied.
pub fn simulate_closed_loop(plant: &PlantModel, gains: &PIGains, target: &Signal, feedforward: Option<&Signal>) -> Result<MotorTrace> {
    plant.validate()?;
    gains.validate()?;
    let r = target.denormalized();
    let ff = match feedforward {
        Some(f) if f.len() != r.len() => {
            return Err(Error::Dimension(format!("feedforward has {} samples, target {}", f.len(), r.len())));
        }
        Some(f) => f.denormalized(),
        None => vec![0.0; r.len()],
    };
    let integ_bound = gains.output_limit / gains.ki.max(f64::EPSILON);
    let mut state = PlantState::new(plant);
    let (mut integ, mut integ_peak) = (0.0f64, 0.0f64);
    let mut omega = Vec::with_capacity(r.len());
    let mut iq = Vec::with_capacity(r.len());
    for n in 0..r.len() {
        let w = state.velocity();
        if !w.is_finite() || w.abs() > INSTABILITY_LIMIT {
            return Err(Error::Instability { step: n });
        }
        let e = r[n] - w;
        let candidate = (integ + e * plant.dt).clamp(-integ_bound, integ_bound);
        let raw = gains.kp * e + gains.ki * candidate + ff[n];
        let u = if raw.abs() > gains.output_limit {
            (gains.kp * e + gains.ki * integ + ff[n]).clamp(-gains.output_limit, gains.output_limit)
        } else {
            integ = candidate;
            raw
        };
        integ_peak = integ_peak.max(integ.abs());
        omega.push(w);
        iq.push(u);
        state.step(u);
    }
    Ok(MotorTrace { omega: Signal::new(omega)?, iq: Signal::new(iq)?, target: Signal::new(r)?, integrator_peak: integ_peak })
}

/// Inverse-dynamics feedforward from a rigid-body estimate of the plant.
pub fn physics_ff(plant_estimate: &PlantModel, target: &Signal) -> Result<Signal> {
    plant_estimate.validate()?;
    let (j, b, kt, tc) = plant_estimate.rigid();
    let r = target.denormalized();
    let dt = plant_estimate.dt;
    let mut out: Vec<f64> = r
        .windows(2)
        .map(|w| (j * (w[1] - w[0]) / dt + b * w[0] + tc * sign(w[0])) / kt)
        .collect();
    if let Some(&last) = out.last() {
        out.push(last);
    } else {
        out.extend(r.iter().map(|&w| (b * w + tc * sign(w)) / kt));
    }
    Signal::new(out)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Peak-normalized prompt `(ω, i_q)` and the current scale implied for a target.
///
/// The model sees every signal at unit peak. Treating the plant as linear,
/// a target of peak `s_r` needs currents of order `s_iq * s_r / s_ω`, where
/// `s_ω, s_iq` are the prompt peaks.
fn current_scale(prompt: &MotorTrace, target: &Signal) -> Result<f64> {
    let (sw, si, sr) = (prompt.omega.peak(), prompt.iq.peak(), target.peak());
    if sw == 0.0 || si == 0.0 || sr == 0.0 {
        return Err(Error::Domain("prompt and target must be nonzero".into()));
    }
    Ok(si * sr / sw)
}

/// Feedforward current predicted in context from one prompt trace.
pub fn icl_ff(model: &BehaviorModel, codec: &Codec, prompt: &MotorTrace, target: &Signal) -> Result<Signal> {
    let scale = current_scale(prompt, target)?;
    let pred = model.one_shot(codec, &prompt.omega, &prompt.iq, target)?;
    Signal::new(pred.samples().iter().map(|v| v * scale).collect())
}

/// Finetuning example: prompt pair and a query pair whose current is expressed
/// in the same units [`icl_ff`] uses to rescale predictions.
pub fn control_example(codec: &Codec, prompt: &MotorTrace, query: &MotorTrace) -> Result<(EncodedPair, EncodedPair)> {
    let scale = current_scale(prompt, &query.omega)?;
    let record = |x: &Signal, y: &Signal| CorpusRecord {
        system_id: 0,
        pair_index: 0,
        input_kind: KindTag::Chirp,
        x: x.normalize(),
        y: y.normalize(),
        split: Split::Train,
    };
    let mut enc = encode_records(&[record(&prompt.omega, &prompt.iq), record(&query.omega, &query.iq)], codec)?;
    let mut q = enc.pop().expect("two records");
    let p = enc.pop().expect("two records");
    q.y_samples = query.iq.samples().iter().map(|v| (v / scale) as f32).collect();
    Ok((p, q))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedQuery {
    pub name: String,
    pub kind: SignalKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub conditions: Vec<PlantModel>,
    /// Indices of conditions excluded from finetuning.
    pub held_out: Vec<usize>,
    pub length: usize,
    /// Loop settling time of the tuned gains as a fraction of the horizon.
    pub settling_fraction: f64,
    /// Untuned gains as a fraction of the tuned ones.
    pub untuned_factor: f64,
    pub output_limit: f64,
    pub prompt: SignalKind,
    /// Targets of the finetuning query pairs on training conditions.
    pub training_queries: Vec<SignalKind>,
    /// Evaluation targets, reported per name.
    pub queries: Vec<NamedQuery>,
    pub finetune_selector: LayerSelector,
    pub finetune_epochs: usize,
    pub finetune_learning_rate: f64,
}

impl ProtocolConfig {
    /// Five single-inertia loads, the middle one held out.
    pub fn single_inertia() -> ProtocolConfig {
        let conditions = [10.0, 15.0, 20.0, 25.0, 30.0]
            .iter()
            .map(|&j| PlantModel { dynamics: Dynamics::SingleInertia { j, b: 0.2, kt: 1.0, tc: 0.0 }, dt: 1.0 })
            .collect();
        ProtocolConfig { conditions, held_out: vec![2], ..ProtocolConfig::base() }
    }

    /// Three load inertias behind a compliant shaft, finetuned on two.
    pub fn two_inertia() -> ProtocolConfig {
        let conditions = [10.0, 20.0, 30.0]
            .iter()
            .map(|&jl| PlantModel {
                dynamics: Dynamics::TwoInertia { jm: 10.0, jl, k: 5.0, c: 0.5, bm: 0.1, bl: 0.1, kt: 1.0 },
                dt: 1.0,
            })
            .collect();
        ProtocolConfig { conditions, held_out: vec![2], ..ProtocolConfig::base() }
    }

    fn base() -> ProtocolConfig {
        ProtocolConfig {
            conditions: Vec::new(),
            held_out: Vec::new(),
            length: 2048,
            settling_fraction: 0.1,
            untuned_factor: 0.1,
            output_limit: 10.0,
            prompt: SignalKind::default_chirp(),
            training_queries: vec![
                SignalKind::Ramp { amplitude: 1.0, onset: 128, rise: 512 },
                SignalKind::Ramp { amplitude: -1.0, onset: 256, rise: 1024 },
                SignalKind::Step { amplitude: 1.0, onset: 256 },
                SignalKind::Step { amplitude: -1.0, onset: 512 },
                SignalKind::Chirp { amplitude: 1.0, f0: 0.001, f1: 0.03 },
            ],
            queries: vec![
                NamedQuery { name: "ramp".into(), kind: SignalKind::Ramp { amplitude: 1.0, onset: 200, rise: 800 } },
                NamedQuery { name: "step".into(), kind: SignalKind::Step { amplitude: 1.0, onset: 300 } },
            ],
            finetune_selector: LayerSelector::LastPredict,
            finetune_epochs: 20,
            finetune_learning_rate: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::param("conditions", "need at least one plant"));
        }
        for c in &self.conditions {
            c.validate()?;
        }
        if let Some(&i) = self.held_out.iter().find(|&&i| i >= self.conditions.len()) {
            return Err(Error::param("held_out", format!("index {i} out of range")));
        }
        if self.held_out.len() >= self.conditions.len() {
            return Err(Error::param("held_out", "at least one condition must remain for finetuning"));
        }
        if !(self.settling_fraction > 0.0) || !(self.untuned_factor > 0.0) || !(self.output_limit > 0.0) {
            return Err(Error::param("settling_fraction", "settling, untuned factor and output limit must be positive"));
        }
        if self.queries.is_empty() || self.training_queries.is_empty() {
            return Err(Error::param("queries", "need evaluation and training queries"));
        }
        self.prompt.validate(self.length)?;
        for q in self.training_queries.iter().chain(self.queries.iter().map(|q| &q.kind)) {
            q.validate(self.length)?;
        }
        Ok(())
    }
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig::single_inertia()
    }
}

pub const METHODS: [&str; 4] = ["untuned_pi", "tuned_pi", "physics_ff", "icl_ff"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub method: String,
    pub condition: usize,
    pub held_out: bool,
    pub query: String,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub config: ProtocolConfig,
    pub rows: Vec<ControlRow>,
    /// `icl_ff` on held-out conditions before finetuning, per query.
    pub pretrained_icl: Vec<ControlRow>,
    pub finetune_examples: usize,
}

impl ControlReport {
    /// Mean RMSE of a method over held-out conditions and all queries.
    pub fn held_out_mean(&self, method: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .chain(&self.pretrained_icl).filter(|r| r.held_out && r.method == method).map(|r| r.rmse).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
        w.write_record(["method", "condition", "held_out", "query", "rmse"]).map_err(|e| csv_error(&csv_path, e))?;
        for r in self.rows.iter().chain(&self.pretrained_icl) {
            w.write_record([r.method.as_str(), &r.condition.to_string(), &r.held_out.to_string(), &r.query, &format!("{:.6e}", r.rmse)])
                .map_err(|e| csv_error(&csv_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        Ok(())
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Prompting, single-layer finetuning and evaluation of all four methods on
/// every condition. Physics feedforward uses the exact plant parameters.
pub fn experiment_protocol(config: &ProtocolConfig, model: &BehaviorModel, codec: &Codec) -> Result<ControlReport> {
    config.validate()?;
    let t = config.length;
    let prompt_target = generate(&config.prompt, t, 0)?;
    let tuned: Vec<PIGains> = config
        .conditions
        .iter()
        .map(|p| PIGains::pole_placement(p, config.settling_fraction * t as f64 * p.dt, config.output_limit))
        .collect::<Result<_>>()?;
    let untuned: Vec<PIGains> = tuned.iter().map(|g| g.scaled(config.untuned_factor)).collect();
    let prompts: Vec<MotorTrace> = config
        .conditions
        .iter()
        .zip(&untuned)
        .map(|(p, g)| simulate_closed_loop(p, g, &prompt_target, None))
        .collect::<Result<_>>()?;

    let mut examples = Vec::new();
    for (i, plant) in config.conditions.iter().enumerate() {
        if config.held_out.contains(&i) {
            continue;
        }
        for (k, kind) in config.training_queries.iter().enumerate() {
            let target = generate(kind, t, k as u64)?;
            let ff = physics_ff(plant, &target)?;
            let query = simulate_closed_loop(plant, &tuned[i], &target, Some(&ff))?;
            examples.push(control_example(codec, &prompts[i], &query)?);
        }
    }
    let finetuned = model.finetune_single_layer(
        codec,
        &examples,
        config.finetune_selector,
        config.finetune_epochs,
        config.finetune_learning_rate,
    )?;

    let mut rows = Vec::new();
    let mut pretrained_icl = Vec::new();
    for (i, plant) in config.conditions.iter().enumerate() {
        let held_out = config.held_out.contains(&i);
        for q in &config.queries {
            let target = generate(&q.kind, t, 0)?;
            let row = |method: &str, trace: MotorTrace| -> Result<ControlRow> {
                Ok(ControlRow { method: method.into(), condition: i, held_out, query: q.name.clone(), rmse: trace.tracking_rmse()? })
            };
            rows.push(row("untuned_pi", simulate_closed_loop(plant, &untuned[i], &target, None)?)?);
            rows.push(row("tuned_pi", simulate_closed_loop(plant, &tuned[i], &target, None)?)?);
            let ff = physics_ff(plant, &target)?;
            rows.push(row("physics_ff", simulate_closed_loop(plant, &untuned[i], &target, Some(&ff))?)?);
            let ff = icl_ff(&finetuned, codec, &prompts[i], &target)?;
            rows.push(row("icl_ff", simulate_closed_loop(plant, &untuned[i], &target, Some(&ff))?)?);
            if held_out {
                let ff = icl_ff(model, codec, &prompts[i], &target)?;
                pretrained_icl.push(row("icl_ff_pretrained", simulate_closed_loop(plant, &untuned[i], &target, Some(&ff))?)?);
            }
        }
    }
    Ok(ControlReport { config: config.clone(), rows, pretrained_icl, finetune_examples: examples.len() })
}
