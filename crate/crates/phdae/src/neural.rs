//! Multilayer perceptrons for the unknown component relations g, q, and H,
//! built as tape programs so training can differentiate through them and
//! through the state Jacobians they appear in.
//!
//! The Hamiltonian gradient is always derived from the scalar network by
//! differentiation (never learned as a separate network), which keeps the
//! inductor current field conservative. First derivatives are themselves
//! expressed with primitive tape ops, so the reverse sweep yields the mixed
//! second derivatives the training loss needs.

use std::ops::Range;
use std::path::Path;
use std::rc::Rc;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::Relations;
use crate::autodiff::{Tape, ValId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Fully connected network: affine layers with activation on all but the
/// last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

struct ForwardCache {
    /// Pre-activation of each layer.
    pres: Vec<ValId>,
    /// Output of the final (affine) layer.
    out: ValId,
}

impl Mlp {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        assert!(widths.len() >= 2, "need input and output widths");
        Mlp { widths, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layer_param_ranges(&self, off: usize) -> Vec<(Range<usize>, Range<usize>)> {
        let mut o = off;
        self.widths
            .windows(2)
            .map(|w| {
                let (inn, out) = (w[0], w[1]);
                let wr = o..o + out * inn;
                o += out * inn;
                let br = o..o + out;
                o += out;
                (wr, br)
            })
            .collect()
    }

    fn act(&self, t: &Tape, pre: ValId) -> ValId {
        match self.activation {
            Activation::Relu => t.relu(pre),
            Activation::Tanh => t.tanh(pre),
        }
    }

    fn act_prime(&self, t: &Tape, pre: ValId) -> ValId {
        match self.activation {
            Activation::Relu => t.step(pre),
            Activation::Tanh => {
                let y = t.tanh(pre);
                t.add_c(t.neg(t.mul(y, y)), 1.0)
            }
        }
    }

    /// Second derivative of the activation, contracted with a tangent of
    /// the pre-activation. Zero for relu by convention.
    fn act_dprime_dot(&self, t: &Tape, pre: ValId, dpre: ValId) -> ValId {
        match self.activation {
            Activation::Relu => t.zeros(t.rows(pre), t.lanes(pre)),
            Activation::Tanh => {
                let y = t.tanh(pre);
                let one_minus = t.add_c(t.neg(t.mul(y, y)), 1.0);
                let ddy = t.scale(t.mul(y, one_minus), -2.0);
                t.mul(ddy, dpre)
            }
        }
    }

    fn forward_cached(&self, t: &Tape, theta: ValId, off: usize, x: ValId) -> ForwardCache {
        let nl = self.layer_count();
        let ranges = self.layer_param_ranges(off);
        let mut h = x;
        let mut pres = Vec::with_capacity(nl);
        for (l, (wr, br)) in ranges.iter().enumerate() {
            let (inn, out) = (self.widths[l], self.widths[l + 1]);
            let w = t.slice(theta, wr.start, wr.len());
            let b = t.slice(theta, br.start, br.len());
            let pre = t.add(t.matmul(w, h, out, inn, 1), b);
            pres.push(pre);
            h = if l + 1 < nl { self.act(t, pre) } else { pre };
        }
        ForwardCache { pres, out: h }
    }

    /// Forward pass as tape ops; `x` is `[in_dim x L]`.
    pub fn forward_ops(&self, t: &Tape, theta: ValId, off: usize, x: ValId) -> ValId {
        self.forward_cached(t, theta, off, x).out
    }

    /// Forward pass on plain values.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::dimension(self.in_dim(), x.len(), "mlp input"));
        }
        if params.len() != self.param_count() {
            return Err(Error::dimension(
                self.param_count(),
                params.len(),
                "mlp params",
            ));
        }
        let t = Tape::new();
        let theta = t.leaf(params.len(), 1, params, false);
        let xid = t.leaf(x.len(), 1, x, false);
        Ok(t.value(self.forward_ops(&t, theta, 0, xid)))
    }

    /// Input Jacobian as a per-lane flat `(out*in) x L` value, built from
    /// the layer chain so it stays differentiable with respect to theta.
    pub fn jacobian_ops(&self, t: &Tape, theta: ValId, off: usize, x: ValId) -> ValId {
        let nl = self.layer_count();
        let r = self.in_dim();
        let ranges = self.layer_param_ranges(off);
        if nl == 1 {
            let (wr, _) = &ranges[0];
            return t.slice(theta, wr.start, wr.len());
        }
        let cache = self.forward_cached(t, theta, off, x);
        // A_1 = act'(pre_1) (row-repeated) * W_1
        let w0 = t.slice(theta, ranges[0].0.start, ranges[0].0.len());
        let d0 = self.act_prime(t, cache.pres[0]);
        let mut a = t.mul(t.gather(d0, repeat_rows_idx(self.widths[1], r)), w0);
        for l in 1..nl - 1 {
            let (inn, out) = (self.widths[l], self.widths[l + 1]);
            let wl = t.slice(theta, ranges[l].0.start, ranges[l].0.len());
            let m = t.matmul(wl, a, out, inn, r);
            let dl = self.act_prime(t, cache.pres[l]);
            a = t.mul(t.gather(dl, repeat_rows_idx(out, r)), m);
        }
        let (inn, out) = (self.widths[nl - 1], self.widths[nl]);
        let wl = t.slice(theta, ranges[nl - 1].0.start, ranges[nl - 1].0.len());
        t.matmul(wl, a, out, inn, r)
    }

    /// Forward-mode pass: value and directional derivative along `dx`.
    pub fn jvp_ops(&self, t: &Tape, theta: ValId, off: usize, x: ValId, dx: ValId) -> (ValId, ValId) {
        let nl = self.layer_count();
        let ranges = self.layer_param_ranges(off);
        let mut h = x;
        let mut dh = dx;
        for (l, (wr, br)) in ranges.iter().enumerate() {
            let (inn, out) = (self.widths[l], self.widths[l + 1]);
            let w = t.slice(theta, wr.start, wr.len());
            let b = t.slice(theta, br.start, br.len());
            let pre = t.add(t.matmul(w, h, out, inn, 1), b);
            let dpre = t.matmul(w, dh, out, inn, 1);
            if l + 1 < nl {
                h = self.act(t, pre);
                dh = t.mul(self.act_prime(t, pre), dpre);
            } else {
                h = pre;
                dh = dpre;
            }
        }
        (h, dh)
    }

    /// For a scalar-output network: the gradient with respect to the input,
    /// `[in_dim x L]`.
    pub fn grad_ops(&self, t: &Tape, theta: ValId, off: usize, x: ValId) -> ValId {
        assert_eq!(self.out_dim(), 1, "grad_ops needs a scalar output");
        self.jacobian_ops(t, theta, off, x)
    }

    /// Directional derivative of the input gradient along `dx` (a
    /// Hessian-vector product), for a scalar-output network.
    pub fn grad_jvp_ops(
        &self,
        t: &Tape,
        theta: ValId,
        off: usize,
        x: ValId,
        dx: ValId,
    ) -> ValId {
        assert_eq!(self.out_dim(), 1, "grad_jvp_ops needs a scalar output");
        let nl = self.layer_count();
        let r = self.in_dim();
        let lanes = t.lanes(x);
        if nl == 1 {
            // affine H: constant gradient
            return t.zeros(r, lanes);
        }
        let ranges = self.layer_param_ranges(off);
        // dual forward for pre-activations and their tangents
        let mut h = x;
        let mut dh = dx;
        let mut pres = Vec::with_capacity(nl - 1);
        let mut dpres = Vec::with_capacity(nl - 1);
        for (l, (wr, br)) in ranges.iter().enumerate().take(nl - 1) {
            let (inn, out) = (self.widths[l], self.widths[l + 1]);
            let w = t.slice(theta, wr.start, wr.len());
            let b = t.slice(theta, br.start, br.len());
            let pre = t.add(t.matmul(w, h, out, inn, 1), b);
            let dpre = t.matmul(w, dh, out, inn, 1);
            pres.push(pre);
            dpres.push(dpre);
            h = self.act(t, pre);
            dh = t.mul(self.act_prime(t, pre), dpre);
        }
        // chain with tangents
        let w0 = t.slice(theta, ranges[0].0.start, ranges[0].0.len());
        let rep0 = repeat_rows_idx(self.widths[1], r);
        let d0 = self.act_prime(t, pres[0]);
        let dd0 = self.act_dprime_dot(t, pres[0], dpres[0]);
        let mut a = t.mul(t.gather(d0, rep0.clone()), w0);
        let mut da = t.mul(t.gather(dd0, rep0), w0);
        for l in 1..nl - 1 {
            let (inn, out) = (self.widths[l], self.widths[l + 1]);
            let wl = t.slice(theta, ranges[l].0.start, ranges[l].0.len());
            let m = t.matmul(wl, a, out, inn, r);
            let dm = t.matmul(wl, da, out, inn, r);
            let rep = repeat_rows_idx(out, r);
            let dl = t.gather(self.act_prime(t, pres[l]), rep.clone());
            let ddl = t.gather(self.act_dprime_dot(t, pres[l], dpres[l]), rep);
            a = t.mul(dl, m);
            da = t.add(t.mul(ddl, m), t.mul(dl, dm));
        }
        let (inn, out) = (self.widths[nl - 1], self.widths[nl]);
        let wl = t.slice(theta, ranges[nl - 1].0.start, ranges[nl - 1].0.len());
        t.matmul(wl, da, out, inn, r)
    }
}

fn repeat_rows_idx(q: usize, r: usize) -> Rc<Vec<u32>> {
    let mut idx = Vec::with_capacity(q * r);
    for i in 0..q {
        for _ in 0..r {
            idx.push(i as u32);
        }
    }
    Rc::new(idx)
}

/// Scaled-uniform initialization: weights from U(-s, s) with
/// s = sqrt(6 / (fan_in + fan_out)), biases zero.
pub fn init(m: &Mlp, rng: &mut impl Rng) -> Vec<f64> {
    let mut params = Vec::with_capacity(m.param_count());
    for w in m.widths.windows(2) {
        let (inn, out) = (w[0], w[1]);
        let s = (6.0 / (inn + out) as f64).sqrt();
        let dist = Uniform::new(-s, s);
        for _ in 0..out * inn {
            params.push(dist.sample(rng));
        }
        params.extend(std::iter::repeat(0.0).take(out));
    }
    params
}

/// Flat parameter vector with a name -> range layout map.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    layout: Vec<(String, Range<usize>)>,
}

impl ParamVector {
    pub fn from_segments(segments: Vec<(String, Vec<f64>)>) -> Self {
        let mut data = Vec::new();
        let mut layout = Vec::new();
        for (name, seg) in segments {
            let start = data.len();
            data.extend_from_slice(&seg);
            layout.push((name, start..data.len()));
        }
        ParamVector { data, layout }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.layout
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
    }

    /// Copy of one named segment.
    pub fn unpack(&self, name: &str) -> Option<Vec<f64>> {
        self.range(name).map(|r| self.data[r].to_vec())
    }

    /// Rebuild the flat vector from named segments; inverse of `unpack`.
    pub fn pack(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let r = self
            .range(name)
            .ok_or_else(|| Error::Config(format!("unknown segment `{name}`")))?;
        if r.len() != values.len() {
            return Err(Error::dimension(r.len(), values.len(), "segment length"));
        }
        self.data[r].copy_from_slice(values);
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.layout.iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// Neural component relations: g and q as vector MLPs, H as a scalar MLP
/// whose gradient supplies the inductor currents.
pub struct NeuralRelations {
    pub n_r: usize,
    pub n_c: usize,
    pub n_l: usize,
    pub g_net: Option<Mlp>,
    pub q_net: Option<Mlp>,
    pub h_net: Option<Mlp>,
    g_off: usize,
    q_off: usize,
    h_off: usize,
    total: usize,
}

impl NeuralRelations {
    pub fn new(n_r: usize, n_c: usize, n_l: usize, hidden: &[usize], activation: Activation) -> Self {
        let make = |inn: usize, out: usize| {
            let mut widths = vec![inn];
            widths.extend_from_slice(hidden);
            widths.push(out);
            Mlp::new(widths, activation)
        };
        let g_net = (n_r > 0).then(|| make(n_r, n_r));
        let q_net = (n_c > 0).then(|| make(n_c, n_c));
        let h_net = (n_l > 0).then(|| make(n_l, 1));
        let g_off = 0;
        let q_off = g_off + g_net.as_ref().map_or(0, |m| m.param_count());
        let h_off = q_off + q_net.as_ref().map_or(0, |m| m.param_count());
        let total = h_off + h_net.as_ref().map_or(0, |m| m.param_count());
        NeuralRelations {
            n_r,
            n_c,
            n_l,
            g_net,
            q_net,
            h_net,
            g_off,
            q_off,
            h_off,
            total,
        }
    }

    /// Deterministic initialization of all nets from one seed stream, in
    /// the order (g, q, H).
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.total);
        for net in [&self.g_net, &self.q_net, &self.h_net].into_iter().flatten() {
            params.extend(init(net, rng));
        }
        params
    }

    /// Parameter layout as a named vector (g, q, H segments).
    pub fn param_vector(&self, params: &[f64]) -> ParamVector {
        assert_eq!(params.len(), self.total);
        let mut segs = Vec::new();
        if let Some(m) = &self.g_net {
            segs.push(("g".to_string(), params[self.g_off..self.g_off + m.param_count()].to_vec()));
        }
        if let Some(m) = &self.q_net {
            segs.push(("q".to_string(), params[self.q_off..self.q_off + m.param_count()].to_vec()));
        }
        if let Some(m) = &self.h_net {
            segs.push(("h".to_string(), params[self.h_off..self.h_off + m.param_count()].to_vec()));
        }
        ParamVector::from_segments(segs)
    }

    fn theta(&self, theta: Option<ValId>) -> ValId {
        theta.expect("neural relations need a parameter leaf")
    }
}

impl Relations for NeuralRelations {
    fn n_r(&self) -> usize {
        self.n_r
    }
    fn n_c(&self) -> usize {
        self.n_c
    }
    fn n_l(&self) -> usize {
        self.n_l
    }
    fn param_len(&self) -> usize {
        self.total
    }

    fn g(&self, t: &Tape, theta: Option<ValId>, vr: ValId) -> ValId {
        match &self.g_net {
            Some(m) => m.forward_ops(t, self.theta(theta), self.g_off, vr),
            None => vr,
        }
    }

    fn q(&self, t: &Tape, theta: Option<ValId>, qc: ValId) -> ValId {
        match &self.q_net {
            Some(m) => m.forward_ops(t, self.theta(theta), self.q_off, qc),
            None => qc,
        }
    }

    fn grad_h(&self, t: &Tape, theta: Option<ValId>, phi: ValId) -> ValId {
        match &self.h_net {
            Some(m) => m.grad_ops(t, self.theta(theta), self.h_off, phi),
            None => phi,
        }
    }

    fn jac_g(&self, t: &Tape, theta: Option<ValId>, vr: ValId) -> ValId {
        match &self.g_net {
            Some(m) => m.jacobian_ops(t, self.theta(theta), self.g_off, vr),
            None => t.zeros(0, t.lanes(vr)),
        }
    }

    fn jvp_q(&self, t: &Tape, theta: Option<ValId>, qc: ValId, dqc: ValId) -> ValId {
        match &self.q_net {
            Some(m) => m.jvp_ops(t, self.theta(theta), self.q_off, qc, dqc).1,
            None => dqc,
        }
    }

    fn jvp_grad_h(&self, t: &Tape, theta: Option<ValId>, phi: ValId, dphi: ValId) -> ValId {
        match &self.h_net {
            Some(m) => m.grad_jvp_ops(t, self.theta(theta), self.h_off, phi, dphi),
            None => dphi,
        }
    }
}

/// One serialized network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetSpec {
    pub name: String,
    pub widths: Vec<usize>,
    pub params: Vec<f64>,
}

/// Model checkpoint: layer shapes, activation, flat parameters (full 64-bit
/// decimal round trip through JSON), seed, and training metadata. Optimizer
/// state is included so interrupted runs can resume exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    /// "nphdae" or "node".
    pub kind: String,
    /// Ground-truth system name the model was built for.
    pub system: String,
    pub activation: Activation,
    pub seed: u64,
    pub nets: Vec<NetSpec>,
    #[serde(default)]
    pub meta: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_m: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_s: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn flat_params(&self) -> Vec<f64> {
        self.nets.iter().flat_map(|n| n.params.iter().copied()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}
