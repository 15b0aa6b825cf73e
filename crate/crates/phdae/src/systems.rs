//! Ground-truth systems: the FitzHugh-Nagumo circuit, the DC-microgrid
//! distributed generation unit and transmission line, and dataset
//! generation with optional observation noise.

use std::path::Path;
use std::rc::Rc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::assembly::{LinearRelations, PHDAESystem, Relations, Signal};
use crate::autodiff::{Tape, ValId};
use crate::error::{Error, Result};
use crate::reduction::{ReducedOde, SemiExplicitSystem};
use crate::simulate::{rollout, ClosureField, Trajectory, VectorField};
use crate::topology::{incidence_of, CircuitGraph, ComponentKind, Edge};

pub const FHN_R2: f64 = 0.8;
pub const FHN_L: f64 = 12.5; // 1 / 0.08
pub const FHN_C: f64 = 1.0;
pub const FHN_E: f64 = -0.7;
pub const FHN_I: f64 = 1.0;

/// How differential initial states are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitStyle {
    /// Sample (q_C, phi_L) directly from the uniform range.
    Direct,
    /// Sample the FitzHugh-Nagumo variables (V, W) and map to
    /// (q_C, phi_L) = (C V, L W).
    FhnVoltageRecovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_traj: usize,
    pub steps: usize,
    pub val_traj: usize,
    pub val_steps: usize,
    pub dt: f64,
    pub init_low: f64,
    pub init_high: f64,
    pub init_style: InitStyle,
}

/// A circuit with known component relations and sampling defaults.
pub struct GroundTruthSpec {
    pub name: String,
    pub graph: CircuitGraph,
    pub relations: Rc<dyn Relations>,
    pub sources: Signal,
    pub parameters: serde_json::Value,
    pub sampling: SamplingConfig,
}

impl GroundTruthSpec {
    pub fn build(&self) -> Result<PHDAESystem> {
        let inc = incidence_of(&self.graph)?;
        PHDAESystem::new(inc, self.relations.clone(), self.sources.clone(), vec![])
    }

    pub fn semi_explicit(&self) -> Result<Rc<SemiExplicitSystem>> {
        Ok(Rc::new(SemiExplicitSystem::new(Rc::new(self.build()?))?))
    }
}

/// Nonlinear FitzHugh-Nagumo component relations: cubic resistor, linear
/// second resistor, linear capacitor and inductor.
pub struct FhnRelations;

impl Relations for FhnRelations {
    fn n_r(&self) -> usize {
        2
    }
    fn n_c(&self) -> usize {
        1
    }
    fn n_l(&self) -> usize {
        1
    }

    fn g(&self, t: &Tape, _theta: Option<ValId>, vr: ValId) -> ValId {
        let v1 = t.slice(vr, 0, 1);
        let v2 = t.slice(vr, 1, 1);
        let g1 = t.sub(t.scale(t.powi(v1, 3), 1.0 / 3.0), v1);
        let g2 = t.scale(v2, 1.0 / FHN_R2);
        t.concat(&[g1, g2])
    }

    fn q(&self, t: &Tape, _theta: Option<ValId>, qc: ValId) -> ValId {
        t.scale(qc, 1.0 / FHN_C)
    }

    fn grad_h(&self, t: &Tape, _theta: Option<ValId>, phi: ValId) -> ValId {
        t.scale(phi, 1.0 / FHN_L)
    }

    fn jac_g(&self, t: &Tape, _theta: Option<ValId>, vr: ValId) -> ValId {
        let lanes = t.lanes(vr);
        let v1 = t.slice(vr, 0, 1);
        let dg1 = t.add_c(t.mul(v1, v1), -1.0); // d/dv (v^3/3 - v) = v^2 - 1
        let zeros = t.zeros(2, lanes);
        let dg2 = t.constant(&[1.0 / FHN_R2]);
        t.concat(&[dg1, zeros, dg2])
    }

    fn jvp_q(&self, t: &Tape, _theta: Option<ValId>, _qc: ValId, dqc: ValId) -> ValId {
        t.scale(dqc, 1.0 / FHN_C)
    }

    fn jvp_grad_h(&self, t: &Tape, _theta: Option<ValId>, _phi: ValId, dphi: ValId) -> ValId {
        t.scale(dphi, 1.0 / FHN_L)
    }
}

/// The FitzHugh-Nagumo circuit with the reference parameter values.
pub fn fhn_system() -> GroundTruthSpec {
    use ComponentKind::*;
    // Nodes: ground 0, then 1..3. Edge directions reproduce the reference
    // incidence matrices under the +1-at-tail convention.
    let graph = CircuitGraph::new(
        4,
        vec![
            Edge { id: 0, kind: Capacitor, from: 1, to: 0 },
            Edge { id: 0, kind: Resistor, from: 1, to: 0 },
            Edge { id: 1, kind: Resistor, from: 2, to: 1 },
            Edge { id: 0, kind: Inductor, from: 0, to: 3 },
            Edge { id: 0, kind: VoltageSource, from: 3, to: 2 },
            Edge { id: 0, kind: CurrentSource, from: 1, to: 0 },
        ],
    );
    GroundTruthSpec {
        name: "fhn".into(),
        graph,
        relations: Rc::new(FhnRelations),
        sources: Signal::Constant(vec![FHN_I, FHN_E]),
        parameters: serde_json::json!({
            "R2": FHN_R2, "L": FHN_L, "C": FHN_C, "E": FHN_E, "I": FHN_I,
        }),
        sampling: SamplingConfig {
            n_traj: 30,
            steps: 1000,
            val_traj: 10,
            val_steps: 10000,
            dt: 0.1,
            init_low: -3.0,
            init_high: 3.0,
            init_style: InitStyle::FhnVoltageRecovery,
        },
    }
}

/// Distributed generation unit with linear relations.
pub fn dgu_system(r: f64, l: f64, c: f64) -> GroundTruthSpec {
    use ComponentKind::*;
    let graph = CircuitGraph::new(
        4,
        vec![
            Edge { id: 0, kind: Capacitor, from: 3, to: 0 },
            Edge { id: 0, kind: Resistor, from: 2, to: 1 },
            Edge { id: 0, kind: Inductor, from: 2, to: 3 },
            Edge { id: 0, kind: VoltageSource, from: 1, to: 0 },
            Edge { id: 0, kind: CurrentSource, from: 0, to: 3 },
        ],
    );
    GroundTruthSpec {
        name: "dgu".into(),
        graph,
        relations: Rc::new(LinearRelations::new(vec![r], vec![c], vec![l]).expect("positive")),
        // source magnitudes are not part of the reference values; defaults
        // chosen here and recorded in the dataset manifest
        sources: Signal::Constant(vec![1.0, 1.0]),
        parameters: serde_json::json!({ "R": r, "L": l, "C": c, "i": 1.0, "v": 1.0 }),
        sampling: SamplingConfig {
            n_traj: 30,
            steps: 1000,
            val_traj: 10,
            val_steps: 10000,
            dt: 0.01,
            init_low: -1.0,
            init_high: 1.0,
            init_style: InitStyle::Direct,
        },
    }
}

/// Transmission line: resistor and inductor only. Degenerate on its own
/// (no ground-connected subgraph), meaningful inside compositions.
pub fn tl_system(r_tl: f64, l_tl: f64) -> Result<GroundTruthSpec> {
    use ComponentKind::*;
    if r_tl <= 0.0 || l_tl <= 0.0 {
        return Err(Error::Config("transmission line parameters must be positive".into()));
    }
    let graph = CircuitGraph::new(
        4,
        vec![
            Edge { id: 0, kind: Resistor, from: 1, to: 2 },
            Edge { id: 0, kind: Inductor, from: 3, to: 2 },
        ],
    );
    Ok(GroundTruthSpec {
        name: "tl".into(),
        graph,
        relations: Rc::new(LinearRelations::new(vec![r_tl], vec![], vec![l_tl])?),
        sources: Signal::Constant(vec![]),
        parameters: serde_json::json!({ "R_tl": r_tl, "L_tl": l_tl }),
        sampling: SamplingConfig {
            n_traj: 30,
            steps: 1000,
            val_traj: 10,
            val_steps: 10000,
            dt: 0.01,
            init_low: -1.0,
            init_high: 1.0,
            init_style: InitStyle::Direct,
        },
    })
}

/// Sample transmission-line parameters from U(0.1, 2.0).
pub fn sample_tl_params(rng: &mut impl rand::Rng) -> (f64, f64) {
    let dist = Uniform::new(0.1, 2.0);
    (dist.sample(rng), dist.sample(rng))
}

/// Reference FitzHugh-Nagumo dynamics with stimulus current I = 1.
pub fn fhn_ode_rhs(v: f64, w: f64) -> (f64, f64) {
    (
        v - v.powi(3) / 3.0 - w + FHN_I,
        0.08 * (v + 0.7 - 0.8 * w),
    )
}

/// The reference dynamics as a two-state vector field for the integrator.
pub fn fhn_oracle_field() -> impl VectorField {
    ClosureField {
        state_dim: 2,
        input_dim: 0,
        f: |x: &[f64], _u: &[f64], _t: f64| {
            let (dv, dw) = fhn_ode_rhs(x[0], x[1]);
            vec![dv, dw]
        },
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub system: String,
    pub parameters: serde_json::Value,
    pub dt: f64,
    pub seed: u64,
    pub noise_var: f64,
    pub state_dim: usize,
    pub input_dim: usize,
    pub train_files: Vec<String>,
    pub val_files: Vec<String>,
    pub train_steps: usize,
    pub val_steps: usize,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let file = std::fs::File::open(dir.join("manifest.json"))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DatasetOptions {
    pub n_traj: usize,
    pub steps: usize,
    pub val_traj: usize,
    pub val_steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub noise_var: f64,
}

impl DatasetOptions {
    pub fn from_sampling(s: &SamplingConfig, seed: u64, noise_var: f64) -> Self {
        DatasetOptions {
            n_traj: s.n_traj,
            steps: s.steps,
            val_traj: s.val_traj,
            val_steps: s.val_steps,
            dt: s.dt,
            seed,
            noise_var,
        }
    }
}

fn sample_initial_diff(spec: &GroundTruthSpec, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let s = &spec.sampling;
    let dist = Uniform::new(s.init_low, s.init_high);
    match s.init_style {
        InitStyle::Direct => {
            let se_dim = spec.relations.n_c() + spec.relations.n_l();
            (0..se_dim).map(|_| dist.sample(rng)).collect()
        }
        InitStyle::FhnVoltageRecovery => {
            let v = dist.sample(rng);
            let w = dist.sample(rng);
            vec![FHN_C * v, FHN_L * w]
        }
    }
}

/// Generate one trajectory: sample the differential initial state, solve for
/// consistent algebraic values, integrate, and optionally add observation
/// noise to the stored states. The RNG stream is derived from (seed, index).
pub fn generate_trajectory(
    spec: &GroundTruthSpec,
    se: &Rc<SemiExplicitSystem>,
    steps: usize,
    dt: f64,
    seed: u64,
    index: u64,
    noise_var: f64,
) -> Result<Trajectory> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let v0 = sample_initial_diff(spec, &mut rng);
    let x0 = se.consistent_state(&[], &v0, 0.0)?;
    let field = ReducedOde::new(se.clone());
    let mut traj = rollout(&field, &x0, &spec.sources, steps, dt, 0.0)?;
    if noise_var > 0.0 {
        let normal = Normal::new(0.0, noise_var.sqrt())
            .map_err(|e| Error::Config(format!("bad noise variance: {e}")))?;
        for state in &mut traj.states {
            for v in state.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(traj)
}

/// Generate a dataset directory: training and validation trajectory CSVs
/// plus `manifest.json`. Validation trajectories are always noiseless and
/// use streams after the training ones.
pub fn generate_dataset(
    spec: &GroundTruthSpec,
    dir: &Path,
    opts: &DatasetOptions,
) -> Result<DatasetManifest> {
    let se = spec.semi_explicit()?;
    std::fs::create_dir_all(dir)?;
    let mut train_files = Vec::new();
    for k in 0..opts.n_traj {
        let traj = generate_trajectory(spec, &se, opts.steps, opts.dt, opts.seed, k as u64, opts.noise_var)?;
        let name = format!("train_{k:03}.csv");
        crate::simulate::write_trajectory_csv(&dir.join(&name), &traj)?;
        train_files.push(name);
    }
    let mut val_files = Vec::new();
    for k in 0..opts.val_traj {
        let traj = generate_trajectory(
            spec,
            &se,
            opts.val_steps,
            opts.dt,
            opts.seed,
            (opts.n_traj + k) as u64,
            0.0,
        )?;
        let name = format!("val_{k:03}.csv");
        crate::simulate::write_trajectory_csv(&dir.join(&name), &traj)?;
        val_files.push(name);
    }
    let manifest = DatasetManifest {
        system: spec.name.clone(),
        parameters: spec.parameters.clone(),
        dt: opts.dt,
        seed: opts.seed,
        noise_var: opts.noise_var,
        state_dim: spec.build()?.n(),
        input_dim: spec.sources.dim(),
        train_files,
        val_files,
        train_steps: opts.steps,
        val_steps: opts.val_steps,
    };
    let file = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
    Ok(manifest)
}

/// Look up a ground-truth system by name with default parameters.
pub fn by_name(name: &str) -> Result<GroundTruthSpec> {
    match name {
        "fhn" => Ok(fhn_system()),
        "dgu" => Ok(dgu_system(1.2, 1.8, 2.2)),
        _ => Err(Error::Config(format!(
            "unknown system `{name}` (expected `fhn` or `dgu`)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics;

    #[test]
    fn fhn_relation_values() {
        let spec = fhn_system();
        let t = Tape::new();
        let vr = t.leaf(2, 1, &[1.5, 0.8], false);
        let g = t.value(spec.relations.g(&t, None, vr));
        assert!((g[0] - (-0.375)).abs() < 1e-15); // 1.5^3/3 - 1.5
        assert!((g[1] - 1.0).abs() < 1e-15); // 0.8 / 0.8
        let phi = t.leaf(1, 1, &[2.0], false);
        let gh = t.value(spec.relations.grad_h(&t, None, phi));
        assert!((gh[0] - 0.16).abs() < 1e-15); // 2 / 12.5
    }

    #[test]
    fn fhn_rhs_reference_points() {
        let (dv, dw) = fhn_ode_rhs(0.0, 0.0);
        assert!((dv - 1.0).abs() < 1e-15);
        assert!((dw - 0.056).abs() < 1e-15);
        let (dv, _) = fhn_ode_rhs(1.0, 1.25);
        assert!((dv - (1.0 - 1.0 / 3.0 - 1.25 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn fhn_equilibrium_found_by_newton() {
        // 2D Newton on the reference equations with analytic Jacobian
        let mut v = -1.0;
        let mut w = 0.0;
        for _ in 0..100 {
            let (f1, f2) = fhn_ode_rhs(v, w);
            if f1.abs().max(f2.abs()) <= 1e-14 {
                break;
            }
            let j = [[1.0 - v * v, -1.0], [0.08, -0.064]];
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            let dv = (f1 * j[1][1] - f2 * j[0][1]) / det;
            let dw = (j[0][0] * f2 - j[1][0] * f1) / det;
            v -= dv;
            w -= dw;
        }
        let (f1, f2) = fhn_ode_rhs(v, w);
        assert!(f1.abs().max(f2.abs()) <= 1e-10);
    }

    #[test]
    fn fhn_phdae_matches_reference_dynamics_short_horizon() {
        // e1 tracks V and phi/L tracks W when integrated from a consistent
        // state; short horizon here, the acceptance suite runs t to 100.
        let spec = fhn_system();
        let se = spec.semi_explicit().unwrap();
        let (v0, w0) = (0.0, 0.0);
        let x0 = se
            .consistent_state(&[], &[FHN_C * v0, FHN_L * w0], 0.0)
            .unwrap();
        let dae = ReducedOde::new(se.clone());
        let steps = 1000;
        let dt = 0.01;
        let traj = rollout(&dae, &x0, &spec.sources, steps, dt, 0.0).unwrap();
        let oracle = rollout(
            &fhn_oracle_field(),
            &[v0, w0],
            &Signal::Constant(vec![]),
            steps,
            dt,
            0.0,
        )
        .unwrap();
        let e_idx = se.sys.layout.e_range().start;
        let phi_idx = se.sys.layout.phi_range().start;
        let mut max_v: f64 = 0.0;
        let mut max_w: f64 = 0.0;
        for k in 0..=steps {
            max_v = max_v.max((traj.states[k][e_idx] - oracle.states[k][0]).abs());
            max_w = max_w.max((traj.states[k][phi_idx] / FHN_L - oracle.states[k][1]).abs());
        }
        assert!(max_v <= 1e-7, "V deviation {max_v}");
        assert!(max_w <= 1e-7, "W deviation {max_w}");
    }

    #[test]
    fn dgu_builds_and_reduces() {
        let spec = dgu_system(1.2, 1.8, 2.2);
        let se = spec.semi_explicit().unwrap();
        assert_eq!(se.d(), 2);
        assert_eq!(se.a(), 4);
        let x0 = se.consistent_state(&[], &[0.5, -0.5], 0.0).unwrap();
        let u = spec.sources.eval(0.0);
        let h = se.h_residual(&[], &x0, &u).unwrap();
        assert!(numerics::norm_inf(&h) <= 1e-10);
    }

    #[test]
    fn tl_shape() {
        let spec = tl_system(0.5, 1.0).unwrap();
        let sys = spec.build().unwrap();
        assert_eq!(sys.n(), 4); // 1 flux + 3 nodal voltages
        assert_eq!(sys.incidence.a_c.cols(), 0);
        assert_eq!(sys.incidence.a_v.cols(), 0);
        assert_eq!(sys.incidence.a_i.cols(), 0);
        assert!(tl_system(-0.1, 1.0).is_err());
    }

    #[test]
    fn tl_params_sampled_in_range() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (r, l) = sample_tl_params(&mut rng);
            assert!((0.1..2.0).contains(&r));
            assert!((0.1..2.0).contains(&l));
        }
    }

    #[test]
    fn dataset_deterministic_and_consistent() {
        let spec = fhn_system();
        let dir = tempfile::tempdir().unwrap();
        let opts = DatasetOptions {
            n_traj: 2,
            steps: 50,
            val_traj: 1,
            val_steps: 20,
            dt: 0.1,
            seed: 7,
            noise_var: 0.0,
        };
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        generate_dataset(&spec, &d1, &opts).unwrap();
        generate_dataset(&spec, &d2, &opts).unwrap();
        for name in ["train_000.csv", "train_001.csv", "val_000.csv", "manifest.json"] {
            let a = std::fs::read(d1.join(name)).unwrap();
            let b = std::fs::read(d2.join(name)).unwrap();
            assert_eq!(a, b, "{name} not byte-identical");
        }
    }

    #[test]
    fn noiseless_dataset_satisfies_constraints() {
        let spec = fhn_system();
        let se = spec.semi_explicit().unwrap();
        let traj = generate_trajectory(&spec, &se, 100, 0.1, 11, 0, 0.0).unwrap();
        for k in 0..traj.len() {
            let h = se
                .h_residual(&[], &traj.states[k], &traj.inputs[k])
                .unwrap();
            assert!(numerics::norm_inf(&h) <= 1e-8, "step {k}");
        }
    }

    #[test]
    fn noise_changes_stored_states_only() {
        let spec = fhn_system();
        let se = spec.semi_explicit().unwrap();
        let clean = generate_trajectory(&spec, &se, 50, 0.1, 5, 0, 0.0).unwrap();
        let noisy = generate_trajectory(&spec, &se, 50, 0.1, 5, 0, 0.01).unwrap();
        assert_eq!(clean.times, noisy.times);
        assert_eq!(clean.inputs, noisy.inputs);
        // same underlying trajectory: deviations are observation noise
        let mut max_dev: f64 = 0.0;
        for k in 0..clean.len() {
            for i in 0..clean.state_dim() {
                max_dev = max_dev.max((clean.states[k][i] - noisy.states[k][i]).abs());
            }
        }
        assert!(max_dev > 0.0 && max_dev < 1.0, "max deviation {max_dev}");
    }

    #[test]
    fn by_name_lookup() {
        assert!(by_name("fhn").is_ok());
        assert!(by_name("dgu").is_ok());
        assert!(by_name("unknown").is_err());
    }
}
