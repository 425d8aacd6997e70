//! Neural circuit policy: sparse layered wiring of liquid-time-constant
//! cells, the steering read-out, the exponentially weighted prediction loss,
//! and backpropagation through time over rollouts.
//!
//! Non-sensory neurons are indexed contiguously: inter `0..n_inter`, command
//! `n_inter..n_inter+n_command`, motor at the tail. Sensory inputs live in
//! their own index space `0..n_sensory`.

use crate::error::{Error, Result};
use crate::float::{c, Real};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Sensory(usize),
    Neuron(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Synapse {
    pub src: Source,
    /// Destination neuron index (non-sensory space).
    pub dst: usize,
    /// +1 excitatory, -1 inhibitory; fixes the sign of the reversal init.
    pub polarity: i8,
}

/// Sparse signed topology of the circuit. Reproducible from `(sizes,
/// sparsity, seed)`; the synapse list order is part of the contract because
/// per-synapse parameters are indexed by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WiringSpec {
    pub n_sensory: usize,
    pub n_inter: usize,
    pub n_command: usize,
    pub n_motor: usize,
    pub sparsity: f64,
    pub seed: u64,
    pub synapses: Vec<Synapse>,
}

impl WiringSpec {
    pub fn n_neurons(&self) -> usize {
        self.n_inter + self.n_command + self.n_motor
    }

    pub fn command_range(&self) -> std::ops::Range<usize> {
        self.n_inter..self.n_inter + self.n_command
    }

    pub fn motor_range(&self) -> std::ops::Range<usize> {
        self.n_inter + self.n_command..self.n_neurons()
    }

    /// Checks the degree invariants: every non-sensory neuron has inbound,
    /// every sensory and non-motor neuron has outbound, no self-loops.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.n_neurons();
        let mut inbound = vec![false; n];
        let mut neuron_out = vec![false; n];
        let mut sensory_out = vec![false; self.n_sensory];
        for s in &self.synapses {
            if s.dst >= n {
                return Err(Error::integrity(format!("synapse dst {} out of range", s.dst)));
            }
            inbound[s.dst] = true;
            match s.src {
                Source::Sensory(i) => {
                    if i >= self.n_sensory {
                        return Err(Error::integrity(format!("sensory src {i} out of range")));
                    }
                    sensory_out[i] = true;
                }
                Source::Neuron(i) => {
                    if i >= n {
                        return Err(Error::integrity(format!("neuron src {i} out of range")));
                    }
                    if i == s.dst {
                        return Err(Error::integrity(format!("self-loop on neuron {i}")));
                    }
                    neuron_out[i] = true;
                }
            }
        }
        for (i, &ok) in inbound.iter().enumerate() {
            if !ok {
                return Err(Error::integrity(format!("neuron {i} has no inbound synapse")));
            }
        }
        for (i, &ok) in sensory_out.iter().enumerate() {
            if !ok {
                return Err(Error::integrity(format!("sensory {i} has no outbound synapse")));
            }
        }
        for (i, &ok) in neuron_out.iter().enumerate().take(self.n_inter + self.n_command) {
            if !ok {
                return Err(Error::integrity(format!("neuron {i} has no outbound synapse")));
            }
        }
        Ok(())
    }
}

/// Builds the four candidate banks (sensory→inter, inter→command,
/// command→command without self-loops, command→motor), retains each synapse
/// independently with probability `1 - sparsity`, then repairs the degree
/// invariants with minimal deterministic additions.
pub fn build_wiring(
    n_sensory: usize,
    n_inter: usize,
    n_command: usize,
    n_motor: usize,
    sparsity: f64,
    seed: u64,
) -> Result<WiringSpec> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::config(format!("sparsity must lie in [0,1), got {sparsity}")));
    }
    if n_sensory < 1 || n_inter < 1 || n_command < 1 || n_motor < 1 {
        return Err(Error::config("all layer sizes must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let retain_p = 1.0 - sparsity;
    let inter0 = 0usize;
    let command0 = n_inter;
    let motor0 = n_inter + n_command;

    let mut synapses = Vec::new();
    let keep = |rng: &mut ChaCha8Rng, src: Source, dst: usize, out: &mut Vec<Synapse>| {
        // always consume both draws so the stream layout is fixed
        let u: f64 = rng.gen();
        let polarity = if rng.gen_bool(0.5) { 1i8 } else { -1i8 };
        if u < retain_p {
            out.push(Synapse { src, dst, polarity });
        }
    };
    for s in 0..n_sensory {
        for i in 0..n_inter {
            keep(&mut rng, Source::Sensory(s), inter0 + i, &mut synapses);
        }
    }
    for i in 0..n_inter {
        for cmd in 0..n_command {
            keep(&mut rng, Source::Neuron(inter0 + i), command0 + cmd, &mut synapses);
        }
    }
    for a in 0..n_command {
        for b in 0..n_command {
            if a != b {
                keep(&mut rng, Source::Neuron(command0 + a), command0 + b, &mut synapses);
            }
        }
    }
    for cmd in 0..n_command {
        for m in 0..n_motor {
            keep(&mut rng, Source::Neuron(command0 + cmd), motor0 + m, &mut synapses);
        }
    }

    // repair pass: later steps never invalidate earlier ones
    let mut present: std::collections::HashSet<(Source, usize)> =
        synapses.iter().map(|s| (s.src, s.dst)).collect();
    let add = |rng: &mut ChaCha8Rng,
                   candidates: Vec<(Source, usize)>,
                   present: &mut std::collections::HashSet<(Source, usize)>,
                   out: &mut Vec<Synapse>| {
        let free: Vec<_> = candidates.into_iter().filter(|k| !present.contains(k)).collect();
        let (src, dst) = free[rng.gen_range(0..free.len())];
        let polarity = if rng.gen_bool(0.5) { 1i8 } else { -1i8 };
        present.insert((src, dst));
        out.push(Synapse { src, dst, polarity });
    };

    let has = |synapses: &[Synapse], pred: &dyn Fn(&Synapse) -> bool| synapses.iter().any(pred);
    for s in 0..n_sensory {
        if !has(&synapses, &|sy| sy.src == Source::Sensory(s)) {
            let cands = (0..n_inter).map(|i| (Source::Sensory(s), inter0 + i)).collect();
            add(&mut rng, cands, &mut present, &mut synapses);
        }
    }
    for i in 0..n_inter {
        if !has(&synapses, &|sy| sy.dst == inter0 + i) {
            let cands = (0..n_sensory).map(|s| (Source::Sensory(s), inter0 + i)).collect();
            add(&mut rng, cands, &mut present, &mut synapses);
        }
    }
    for i in 0..n_inter {
        if !has(&synapses, &|sy| sy.src == Source::Neuron(inter0 + i)) {
            let cands = (0..n_command)
                .map(|cmd| (Source::Neuron(inter0 + i), command0 + cmd))
                .collect();
            add(&mut rng, cands, &mut present, &mut synapses);
        }
    }
    for cmd in 0..n_command {
        if !has(&synapses, &|sy| sy.dst == command0 + cmd) {
            let mut cands: Vec<_> = (0..n_inter)
                .map(|i| (Source::Neuron(inter0 + i), command0 + cmd))
                .collect();
            cands.extend(
                (0..n_command)
                    .filter(|&b| b != cmd)
                    .map(|b| (Source::Neuron(command0 + b), command0 + cmd)),
            );
            add(&mut rng, cands, &mut present, &mut synapses);
        }
    }
    for cmd in 0..n_command {
        if !has(&synapses, &|sy| sy.src == Source::Neuron(command0 + cmd)) {
            let mut cands: Vec<_> = (0..n_command)
                .filter(|&b| b != cmd)
                .map(|b| (Source::Neuron(command0 + cmd), command0 + b))
                .collect();
            cands.extend((0..n_motor).map(|m| (Source::Neuron(command0 + cmd), motor0 + m)));
            add(&mut rng, cands, &mut present, &mut synapses);
        }
    }
    for m in 0..n_motor {
        if !has(&synapses, &|sy| sy.dst == motor0 + m) {
            let cands = (0..n_command)
                .map(|cmd| (Source::Neuron(command0 + cmd), motor0 + m))
                .collect();
            add(&mut rng, cands, &mut present, &mut synapses);
        }
    }

    let wiring = WiringSpec {
        n_sensory,
        n_inter,
        n_command,
        n_motor,
        sparsity,
        seed,
        synapses,
    };
    wiring.check_invariants()?;
    Ok(wiring)
}

/// Trainable cell parameters, indexed per neuron (`tau`, `vleak`) and per
/// synapse in wiring order (`w`, `gamma`, `mu`, `a`).
#[derive(Debug, Clone, PartialEq)]
pub struct Ltc<F> {
    pub tau: Array1<F>,
    pub vleak: Array1<F>,
    pub w: Array1<F>,
    pub gamma: Array1<F>,
    pub mu: Array1<F>,
    pub a: Array1<F>,
}

impl<F: Real> Ltc<F> {
    /// Criticality-tuned starting point. Three properties matter jointly: the
    /// divisive fan-in term caps the per-layer small-signal gain, so gate
    /// slopes and reversal magnitudes are sized to keep that gain near one and
    /// let latent perturbations survive the three-stage path to the motor
    /// neuron; reversal magnitudes are rebalanced per destination so
    /// mixed-sign fan-ins cancel and the circuit idles near zero; and gate
    /// midpoints are centered on each source's resting state (found by
    /// relaxing the zero-input dynamics) so every gate starts in its
    /// responsive band instead of saturated.
    pub fn new<R: Rng>(wiring: &WiringSpec, rng: &mut R) -> Self {
        let n = wiring.n_neurons();
        let m = wiring.synapses.len();
        let uni = |rng: &mut R, lo: f64, hi: f64| rng.gen_range(c::<F>(lo)..c::<F>(hi));
        let tau = Array1::from_shape_fn(n, |_| uni(rng, 0.8, 1.2));
        let vleak = Array1::from_shape_fn(n, |_| uni(rng, -0.05, 0.05));
        let w = Array1::from_shape_fn(m, |_| uni(rng, 0.35, 0.65));
        let gamma = Array1::from_shape_fn(m, |_| uni(rng, 3.2, 4.8));
        let mut a = Array1::from_shape_fn(m, |i| {
            let mag = uni(rng, 2.4, 3.6);
            if wiring.synapses[i].polarity >= 0 {
                mag
            } else {
                -mag
            }
        });
        for dst in 0..n {
            let mut pos = F::zero();
            let mut neg = F::zero();
            for (j, syn) in wiring.synapses.iter().enumerate() {
                if syn.dst == dst {
                    let wa = w[j] * a[j];
                    if wa >= F::zero() {
                        pos = pos + wa;
                    } else {
                        neg = neg - wa;
                    }
                }
            }
            if pos > F::zero() && neg > F::zero() {
                let target = (pos * neg).sqrt();
                let (sp, sn) = (target / pos, target / neg);
                for (j, syn) in wiring.synapses.iter().enumerate() {
                    if syn.dst == dst {
                        a[j] = a[j] * if a[j] >= F::zero() { sp } else { sn };
                    }
                }
            }
        }
        let mut ltc = Ltc {
            tau,
            vleak,
            w,
            gamma,
            mu: Array1::zeros(m),
            a,
        };
        let rest = ltc.rest_state(wiring, 60);
        for (j, syn) in wiring.synapses.iter().enumerate() {
            let r = match syn.src {
                Source::Sensory(_) => F::zero(),
                Source::Neuron(i) => rest[i],
            };
            ltc.mu[j] = r + uni(rng, -0.1, 0.1);
        }
        ltc
    }

    /// Fixed point of the zero-input dynamics, approached by iterating the
    /// update rule from a zero state.
    pub fn rest_state(&self, wiring: &WiringSpec, steps: usize) -> Array1<F> {
        let mut x = Array1::zeros(wiring.n_neurons());
        let u = Array1::zeros(wiring.n_sensory);
        for _ in 0..steps {
            x = ltc_step(&x.view(), &u.view(), self, wiring, F::one());
        }
        x
    }

    pub fn zeros_like(&self) -> Self {
        Ltc {
            tau: Array1::zeros(self.tau.dim()),
            vleak: Array1::zeros(self.vleak.dim()),
            w: Array1::zeros(self.w.dim()),
            gamma: Array1::zeros(self.gamma.dim()),
            mu: Array1::zeros(self.mu.dim()),
            a: Array1::zeros(self.a.dim()),
        }
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        f("tau", self.tau.as_slice_mut().expect("contiguous"));
        f("vleak", self.vleak.as_slice_mut().expect("contiguous"));
        f("w", self.w.as_slice_mut().expect("contiguous"));
        f("gamma", self.gamma.as_slice_mut().expect("contiguous"));
        f("mu", self.mu.as_slice_mut().expect("contiguous"));
        f("a", self.a.as_slice_mut().expect("contiguous"));
    }

    /// Clamps the constrained parameters back into their invariant domains
    /// (applied after each optimizer step).
    pub fn project(&mut self) {
        let floor = c::<F>(0.05);
        self.tau.mapv_inplace(|t| t.max(floor));
        self.w.mapv_inplace(|w| w.max(F::zero()));
    }
}

fn logistic<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// One fused semi-implicit integration step for a batch of independent
/// states. `x` is `(batch, n_neurons)`, `u` is `(batch, n_sensory)`.
pub fn ltc_step_batch<F: Real>(
    x: &ArrayView2<F>,
    u: &ArrayView2<F>,
    params: &Ltc<F>,
    wiring: &WiringSpec,
    dt: F,
) -> Array2<F> {
    let (batch, n) = x.dim();
    debug_assert_eq!(n, wiring.n_neurons());
    debug_assert_eq!(u.dim(), (batch, wiring.n_sensory));
    let mut s_w = Array2::<F>::zeros((batch, n));
    let mut s_a = Array2::<F>::zeros((batch, n));
    for (j, syn) in wiring.synapses.iter().enumerate() {
        let (wj, gj, mj, aj) = (params.w[j], params.gamma[j], params.mu[j], params.a[j]);
        for bi in 0..batch {
            let src = match syn.src {
                Source::Sensory(i) => u[[bi, i]],
                Source::Neuron(i) => x[[bi, i]],
            };
            let f = logistic(gj * (src - mj));
            s_w[[bi, syn.dst]] = s_w[[bi, syn.dst]] + wj * f;
            s_a[[bi, syn.dst]] = s_a[[bi, syn.dst]] + wj * f * aj;
        }
    }
    let mut out = Array2::<F>::zeros((batch, n));
    for bi in 0..batch {
        for i in 0..n {
            let num = x[[bi, i]] + dt * (params.vleak[i] / params.tau[i] + s_a[[bi, i]]);
            let den = F::one() + dt * (F::one() / params.tau[i] + s_w[[bi, i]]);
            out[[bi, i]] = num / den;
        }
    }
    out
}

/// Single-state convenience wrapper around [`ltc_step_batch`].
pub fn ltc_step<F: Real>(
    state: &ArrayView1<F>,
    input: &ArrayView1<F>,
    params: &Ltc<F>,
    wiring: &WiringSpec,
    dt: F,
) -> Array1<F> {
    let x = state.to_owned().insert_axis(ndarray::Axis(0));
    let u = input.to_owned().insert_axis(ndarray::Axis(0));
    ltc_step_batch(&x.view(), &u.view(), params, wiring, dt)
        .remove_axis(ndarray::Axis(0))
}

/// Accumulates gradients of one step given `dnext = dL/d(x')`, returning
/// `(dL/dx, dL/du)`.
#[allow(clippy::too_many_arguments)]
fn ltc_step_backward<F: Real>(
    x: &ArrayView2<F>,
    u: &ArrayView2<F>,
    xnext: &ArrayView2<F>,
    dnext: &ArrayView2<F>,
    params: &Ltc<F>,
    wiring: &WiringSpec,
    dt: F,
    grads: &mut Ltc<F>,
) -> (Array2<F>, Array2<F>) {
    let (batch, n) = x.dim();
    // recompute the per-neuron denominators (cheap relative to storing them)
    let mut s_w = Array2::<F>::zeros((batch, n));
    for (j, syn) in wiring.synapses.iter().enumerate() {
        let (wj, gj, mj) = (params.w[j], params.gamma[j], params.mu[j]);
        for bi in 0..batch {
            let src = match syn.src {
                Source::Sensory(i) => u[[bi, i]],
                Source::Neuron(i) => x[[bi, i]],
            };
            s_w[[bi, syn.dst]] = s_w[[bi, syn.dst]] + wj * logistic(gj * (src - mj));
        }
    }
    let mut dnum = Array2::<F>::zeros((batch, n));
    let mut dden = Array2::<F>::zeros((batch, n));
    let mut dx = Array2::<F>::zeros((batch, n));
    let mut du = Array2::<F>::zeros((batch, wiring.n_sensory));
    for bi in 0..batch {
        for i in 0..n {
            let den = F::one() + dt * (F::one() / params.tau[i] + s_w[[bi, i]]);
            let g = dnext[[bi, i]];
            let dn = g / den;
            let dd = -g * xnext[[bi, i]] / den;
            dnum[[bi, i]] = dn;
            dden[[bi, i]] = dd;
            // direct state feed-through and leak parameters
            dx[[bi, i]] = dn;
            let tau = params.tau[i];
            grads.vleak[i] = grads.vleak[i] + dn * dt / tau;
            grads.tau[i] = grads.tau[i]
                - dn * dt * params.vleak[i] / (tau * tau)
                - dd * dt / (tau * tau);
        }
    }
    for (j, syn) in wiring.synapses.iter().enumerate() {
        let (wj, gj, mj, aj) = (params.w[j], params.gamma[j], params.mu[j], params.a[j]);
        for bi in 0..batch {
            let src = match syn.src {
                Source::Sensory(i) => u[[bi, i]],
                Source::Neuron(i) => x[[bi, i]],
            };
            let f = logistic(gj * (src - mj));
            let dn = dnum[[bi, syn.dst]];
            let dd = dden[[bi, syn.dst]];
            // num picks up dt*w*f*a, den picks up dt*w*f
            grads.w[j] = grads.w[j] + dt * f * (dn * aj + dd);
            grads.a[j] = grads.a[j] + dt * wj * f * dn;
            let df = dt * wj * (dn * aj + dd);
            let fprime = f * (F::one() - f);
            grads.gamma[j] = grads.gamma[j] + df * fprime * (src - mj);
            grads.mu[j] = grads.mu[j] - df * fprime * gj;
            let dsrc = df * fprime * gj;
            match syn.src {
                Source::Sensory(i) => du[[bi, i]] = du[[bi, i]] + dsrc,
                Source::Neuron(i) => dx[[bi, i]] = dx[[bi, i]] + dsrc,
            }
        }
    }
    (dx, du)
}

/// Tanh-squashed affine read-out over the motor neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout<F> {
    pub a: Array1<F>,
    /// Single-element bias (kept as a tensor for the parameter visitor).
    pub b: Array1<F>,
}

impl<F: Real> Readout<F> {
    pub fn new<R: Rng>(n_motor: usize, rng: &mut R) -> Self {
        Readout {
            a: Array1::from_shape_fn(n_motor, |_| rng.gen_range(c::<F>(1.0)..c::<F>(3.0))),
            b: Array1::zeros(1),
        }
    }

    /// Sets the bias so the read-out of the given motor state is exactly
    /// zero, keeping the squashing function in its responsive band at rest.
    pub fn center_on(&mut self, rest: &Array1<F>, wiring: &WiringSpec) {
        let mut pre = F::zero();
        for (k, m) in wiring.motor_range().enumerate() {
            pre = pre + self.a[k] * rest[m];
        }
        self.b[0] = -pre;
    }

    pub fn zeros_like(&self) -> Self {
        Readout {
            a: Array1::zeros(self.a.dim()),
            b: Array1::zeros(1),
        }
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        f("a", self.a.as_slice_mut().expect("contiguous"));
        f("b", self.b.as_slice_mut().expect("contiguous"));
    }

    /// Reads one scalar per batch row from the motor slice of `x`.
    pub fn forward(&self, x: &ArrayView2<F>, wiring: &WiringSpec) -> Array1<F> {
        let motor = wiring.motor_range();
        let batch = x.dim().0;
        Array1::from_shape_fn(batch, |bi| {
            let mut pre = self.b[0];
            for (k, m) in motor.clone().enumerate() {
                pre = pre + self.a[k] * x[[bi, m]];
            }
            pre.tanh()
        })
    }

    /// Backward of [`Self::forward`]: accumulates `da`/`db`, adds the state
    /// gradient into `dx`.
    pub fn backward(
        &self,
        x: &ArrayView2<F>,
        y: &ArrayView1<F>,
        dy: &ArrayView1<F>,
        wiring: &WiringSpec,
        grads: &mut Readout<F>,
        dx: &mut Array2<F>,
    ) {
        let motor = wiring.motor_range();
        for bi in 0..x.dim().0 {
            let dpre = dy[bi] * (F::one() - y[bi] * y[bi]);
            grads.b[0] = grads.b[0] + dpre;
            for (k, m) in motor.clone().enumerate() {
                grads.a[k] = grads.a[k] + dpre * x[[bi, m]];
                dx[[bi, m]] = dx[[bi, m]] + dpre * self.a[k];
            }
        }
    }
}

/// Everything the backward pass needs from a rollout.
#[derive(Debug, Clone)]
pub struct RolloutCache<F> {
    /// States `x_0..x_T`; `states[t+1]` is the post-step state of frame `t`.
    pub states: Vec<Array2<F>>,
    /// Input sequence, one `(batch, n_sensory)` array per frame.
    pub inputs: Vec<Array2<F>>,
    /// Read-out outputs, `(batch, T)`.
    pub yhat: Array2<F>,
}

/// Runs the circuit over a latent sequence from `init`, reading out one
/// steering value per frame. `inputs[t]` is `(batch, n_sensory)`.
pub fn rollout<F: Real>(
    inputs: Vec<Array2<F>>,
    params: &Ltc<F>,
    readout: &Readout<F>,
    wiring: &WiringSpec,
    init: Array2<F>,
    dt: F,
) -> Result<RolloutCache<F>> {
    if inputs.is_empty() {
        return Err(Error::dim("rollout requires a non-empty sequence"));
    }
    let batch = init.dim().0;
    if init.dim().1 != wiring.n_neurons() {
        return Err(Error::dim(format!(
            "hidden state width {} != neuron count {}",
            init.dim().1,
            wiring.n_neurons()
        )));
    }
    let t_len = inputs.len();
    let mut states = Vec::with_capacity(t_len + 1);
    states.push(init);
    let mut yhat = Array2::<F>::zeros((batch, t_len));
    for (t, u) in inputs.iter().enumerate() {
        if u.dim() != (batch, wiring.n_sensory) {
            return Err(Error::dim(format!(
                "input {t} has shape {:?}, expected ({batch}, {})",
                u.dim(),
                wiring.n_sensory
            )));
        }
        let next = ltc_step_batch(&states[t].view(), &u.view(), params, wiring, dt);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite hidden state at frame {t}"
            )));
        }
        let y = readout.forward(&next.view(), wiring);
        for bi in 0..batch {
            yhat[[bi, t]] = y[bi];
        }
        states.push(next);
    }
    Ok(RolloutCache {
        states,
        inputs,
        yhat,
    })
}

/// Backpropagation through time. `dyhat` is `(batch, T)`; returns per-frame
/// input gradients.
pub fn rollout_backward<F: Real>(
    cache: &RolloutCache<F>,
    dyhat: &ArrayView2<F>,
    params: &Ltc<F>,
    readout: &Readout<F>,
    wiring: &WiringSpec,
    dt: F,
    ltc_grads: &mut Ltc<F>,
    readout_grads: &mut Readout<F>,
) -> Vec<Array2<F>> {
    let t_len = cache.inputs.len();
    let (batch, n) = cache.states[0].dim();
    let mut dstate = Array2::<F>::zeros((batch, n));
    let mut dinputs = vec![Array2::<F>::zeros((batch, wiring.n_sensory)); t_len];
    for t in (0..t_len).rev() {
        let y_t = cache.yhat.column(t).to_owned();
        let dy_t = dyhat.column(t).to_owned();
        readout.backward(
            &cache.states[t + 1].view(),
            &y_t.view(),
            &dy_t.view(),
            wiring,
            readout_grads,
            &mut dstate,
        );
        let (dx, du) = ltc_step_backward(
            &cache.states[t].view(),
            &cache.inputs[t].view(),
            &cache.states[t + 1].view(),
            &dstate.view(),
            params,
            wiring,
            dt,
            ltc_grads,
        );
        dinputs[t] = du;
        dstate = dx;
    }
    dinputs
}

/// Exponentially weighted squared steering error:
/// `sum_i w_i (yhat_i - y_i)^2 / sum_i w_i` with `w_i = exp(lambda * |y_i|)`.
pub fn pred_loss_and_grad<F: Real>(
    yhat: &ArrayView1<F>,
    y: &ArrayView1<F>,
    lambda: F,
) -> Result<(F, Array1<F>)> {
    if yhat.len() != y.len() {
        return Err(Error::dim(format!(
            "prediction length {} != label length {}",
            yhat.len(),
            y.len()
        )));
    }
    if yhat.is_empty() {
        return Err(Error::dim("pred_loss requires at least one step"));
    }
    if lambda < F::zero() {
        return Err(Error::config("lambda must be >= 0"));
    }
    let mut wsum = F::zero();
    let mut acc = F::zero();
    for (&yh, &yt) in yhat.iter().zip(y.iter()) {
        let w = (lambda * yt.abs()).exp();
        wsum = wsum + w;
        acc = acc + w * (yh - yt) * (yh - yt);
    }
    let loss = acc / wsum;
    let two = c::<F>(2.0);
    let grad = Array1::from_shape_fn(yhat.len(), |i| {
        let w = (lambda * y[i].abs()).exp();
        two * w * (yhat[i] - y[i]) / wsum
    });
    Ok((loss, grad))
}

pub fn pred_loss<F: Real>(yhat: &ArrayView1<F>, y: &ArrayView1<F>, lambda: F) -> Result<F> {
    pred_loss_and_grad(yhat, y, lambda).map(|(l, _)| l)
}
