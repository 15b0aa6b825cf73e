//! Fixed-step RK4 integration, trajectory rollout under zero-order-hold
//! inputs, and the evaluation metrics (state MSE and constraint violation).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::assembly::Signal;
use crate::error::{Error, Result};

/// A time-dependent vector field dx/dt = F(x, u, t).
pub trait VectorField {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn eval(&self, x: &[f64], u: &[f64], t: f64) -> Result<Vec<f64>>;
}

/// A vector field given by a closure, mainly for tests and oracles.
pub struct ClosureField<F> {
    pub state_dim: usize,
    pub input_dim: usize,
    pub f: F,
}

impl<F> VectorField for ClosureField<F>
where
    F: Fn(&[f64], &[f64], f64) -> Vec<f64>,
{
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn eval(&self, x: &[f64], u: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok((self.f)(x, u, t))
    }
}

/// One classical RK4 step with the input held constant across the step.
pub fn rk4_step(
    field: &dyn VectorField,
    x: &[f64],
    u: &[f64],
    t: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    let n = x.len();
    let k1 = field.eval(x, u, t)?;
    let mut stage = vec![0.0; n];
    for i in 0..n {
        stage[i] = x[i] + 0.5 * dt * k1[i];
    }
    let k2 = field.eval(&stage, u, t + 0.5 * dt)?;
    for i in 0..n {
        stage[i] = x[i] + 0.5 * dt * k2[i];
    }
    let k3 = field.eval(&stage, u, t + 0.5 * dt)?;
    for i in 0..n {
        stage[i] = x[i] + dt * k3[i];
    }
    let k4 = field.eval(&stage, u, t + dt)?;
    let mut next = vec![0.0; n];
    for i in 0..n {
        next[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        if !next[i].is_finite() {
            return Err(Error::NonFinite(format!("rk4 step at t = {t}")));
        }
    }
    Ok(next)
}

/// States, inputs, and times on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    /// Check the uniform-grid invariant.
    pub fn is_uniform(&self, tol: f64) -> bool {
        let dt = self.dt();
        self.times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= tol)
    }
}

/// Integrate `steps` RK4 steps from `x0`, sampling the input signal at the
/// start of each step and holding it (zero-order hold).
pub fn rollout(
    field: &dyn VectorField,
    x0: &[f64],
    signal: &Signal,
    steps: usize,
    dt: f64,
    t0: f64,
) -> Result<Trajectory> {
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    let mut t = t0;
    times.push(t);
    inputs.push(signal.eval(t));
    states.push(x.clone());
    for k in 0..steps {
        let u = signal.eval(t);
        x = rk4_step(field, &x, &u, t, dt).map_err(|e| Error::Integration {
            step: k,
            t,
            source: Box::new(e),
        })?;
        t = t0 + (k + 1) as f64 * dt;
        times.push(t);
        inputs.push(signal.eval(t));
        states.push(x.clone());
    }
    Ok(Trajectory {
        times,
        states,
        inputs,
    })
}

/// Per-time-step state MSE and squared constraint-violation norm.
#[derive(Debug, Clone)]
pub struct MetricsSeries {
    pub times: Vec<f64>,
    pub mse: Vec<f64>,
    pub h_norm_sq: Vec<f64>,
}

/// Compare a predicted trajectory against the truth on the same grid, and
/// evaluate the true algebraic residual on the predicted states.
pub fn metrics<H>(pred: &Trajectory, truth: &Trajectory, mut true_h: H) -> Result<MetricsSeries>
where
    H: FnMut(&[f64], &[f64], f64) -> Result<Vec<f64>>,
{
    if pred.len() != truth.len() {
        return Err(Error::dimension(truth.len(), pred.len(), "trajectory length"));
    }
    for (a, b) in pred.times.iter().zip(&truth.times) {
        if (a - b).abs() > 1e-12 {
            return Err(Error::DataFormat("trajectory grids differ".into()));
        }
    }
    let n = pred.state_dim();
    let mut mse = Vec::with_capacity(pred.len());
    let mut hns = Vec::with_capacity(pred.len());
    for k in 0..pred.len() {
        let xp = &pred.states[k];
        let xt = &truth.states[k];
        let err: f64 = xp
            .iter()
            .zip(xt)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
        mse.push(err);
        let h = true_h(xp, &pred.inputs[k], pred.times[k])?;
        hns.push(h.iter().map(|v| v * v).sum());
    }
    Ok(MetricsSeries {
        times: pred.times.clone(),
        mse,
        h_norm_sq: hns,
    })
}

/// Write a trajectory as CSV with header `t,x0..x{n-1},u0..u{m-1}`.
/// Numbers use shortest round-trip formatting.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n = traj.state_dim();
    let m = traj.input_dim();
    let mut header = String::from("t");
    for i in 0..n {
        header.push_str(&format!(",x{i}"));
    }
    for i in 0..m {
        header.push_str(&format!(",u{i}"));
    }
    writeln!(out, "{header}")?;
    for k in 0..traj.len() {
        let mut line = format!("{}", traj.times[k]);
        for v in &traj.states[k] {
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        for v in &traj.inputs[k] {
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::DataFormat(format!("{}: empty file", path.display())))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") {
        return Err(Error::DataFormat(format!(
            "{}: expected header starting with `t`",
            path.display()
        )));
    }
    let n = cols.iter().filter(|c| c.starts_with('x')).count();
    let m = cols.iter().filter(|c| c.starts_with('u')).count();
    if 1 + n + m != cols.len() {
        return Err(Error::DataFormat(format!(
            "{}: unrecognized columns in header",
            path.display()
        )));
    }
    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        inputs: Vec::new(),
    };
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::DataFormat(format!("bad number `{s}`")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 1 + n + m {
            return Err(Error::DataFormat(format!(
                "{}: row has {} fields, expected {}",
                path.display(),
                vals.len(),
                1 + n + m
            )));
        }
        traj.times.push(vals[0]);
        traj.states.push(vals[1..1 + n].to_vec());
        traj.inputs.push(vals[1 + n..].to_vec());
    }
    Ok(traj)
}

/// Write a metrics series as CSV `t,mse,h_norm_sq`.
pub fn write_metrics_csv(path: &Path, m: &MetricsSeries) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,mse,h_norm_sq")?;
    for k in 0..m.times.len() {
        writeln!(out, "{},{},{}", m.times[k], m.mse[k], m.h_norm_sq[k])?;
    }
    Ok(())
}
