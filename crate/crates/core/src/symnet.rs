//! Symbolic networks: rational layers interleaved with fixed base activations
//! and a rational output layer that also sees the raw inputs,
//!
//! `x -> r_out((sigma_L . r_L . ... . sigma_1 . r_1)(x), x)`.
//!
//! The trainable parameters are flattened into a [`ParameterVector`]. Each
//! rational unit owns a numerator slice (free coefficients) followed by a raw
//! denominator slice that is mapped through [`project_denominator`] whenever a
//! [`Network`] is compiled, so every evaluation sees a valid denominator.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratfunc::{dot, monomial_count, project_with_jacobian, MonomialBasis, ProjectionJacobian};

/// Exponential activations clamp their argument to `[-EXP_CLAMP, EXP_CLAMP]`.
pub const EXP_CLAMP: f64 = 40.0;

/// Base (non-rational) activation applied componentwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Sine,
    Exponential,
}

impl ActivationKind {
    /// Value and derivative at `z`.
    #[inline]
    pub fn apply(self, z: f64) -> (f64, f64) {
        match self {
            ActivationKind::Sine => {
                let (s, c) = z.sin_cos();
                (s, c)
            }
            ActivationKind::Exponential => {
                if z > EXP_CLAMP {
                    (EXP_CLAMP.exp(), 0.0)
                } else if z < -EXP_CLAMP {
                    ((-EXP_CLAMP).exp(), 0.0)
                } else {
                    let e = z.exp();
                    (e, e)
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Sine => "sine",
            ActivationKind::Exponential => "exponential",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sine" | "sin" => Ok(ActivationKind::Sine),
            "exponential" | "exp" => Ok(ActivationKind::Exponential),
            _ => Err(Error::UnknownActivation(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDegrees {
    pub numerator: usize,
    pub denominator: usize,
}

/// Architecture of a symbolic network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Number of network inputs.
    pub input_dim: usize,
    /// One activation per unit for each hidden layer. The rational map of a
    /// hidden layer has as many components as the layer has units.
    pub hidden: Vec<Vec<ActivationKind>>,
    /// Degrees of every hidden layer followed by the output layer.
    pub degrees: Vec<LayerDegrees>,
    pub floor_epsilon: f64,
    /// Inputs are divided componentwise by these factors before the first
    /// layer. Changing them is a reparameterization, not a change of the
    /// function class.
    pub input_scale: Vec<f64>,
    /// The network output is multiplied by this factor.
    #[serde(default = "unit_scale")]
    pub output_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

/// Default layout: one hidden layer with a sine and an exponential unit,
/// numerator degree 3 and denominator degree 2 everywhere.
pub fn default_parfam_spec(input_dim: usize) -> NetworkSpec {
    let deg = LayerDegrees { numerator: 3, denominator: 2 };
    NetworkSpec {
        input_dim,
        hidden: vec![vec![ActivationKind::Sine, ActivationKind::Exponential]],
        degrees: vec![deg, deg],
        floor_epsilon: crate::ratfunc::DEFAULT_FLOOR_EPSILON,
        input_scale: vec![1.0; input_dim],
        output_scale: 1.0,
    }
}

impl NetworkSpec {
    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    /// Width of the hidden representation fed to the output layer.
    pub fn last_hidden_width(&self) -> usize {
        self.hidden.last().map_or(0, Vec::len)
    }

    /// Input dimension of the output rational (last hidden width plus skip).
    pub fn output_input_dim(&self) -> usize {
        self.last_hidden_width() + self.input_dim
    }

    /// Input dimension of layer `i` (0-based; `i == depth()` is the output).
    pub fn layer_input_dim(&self, i: usize) -> usize {
        if i == 0 && self.depth() > 0 {
            self.input_dim
        } else if i == self.depth() {
            self.output_input_dim()
        } else {
            self.hidden[i - 1].len()
        }
    }

    /// Number of rational components in layer `i`.
    pub fn layer_units(&self, i: usize) -> usize {
        if i == self.depth() {
            1
        } else {
            self.hidden[i].len()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::InvalidSpec("at least one hidden layer is required".into()));
        }
        if self.hidden.iter().any(Vec::is_empty) {
            return Err(Error::InvalidSpec("hidden layers must have at least one unit".into()));
        }
        if self.degrees.len() != self.depth() + 1 {
            return Err(Error::InvalidSpec(format!(
                "expected {} layer degrees, got {}",
                self.depth() + 1,
                self.degrees.len()
            )));
        }
        if !(self.floor_epsilon > 0.0 && self.floor_epsilon < 1.0) {
            return Err(Error::InvalidSpec("floor_epsilon must lie in (0, 1)".into()));
        }
        if self.input_scale.len() != self.input_dim
            || self.input_scale.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::InvalidSpec("input_scale must be positive, one per input".into()));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::InvalidSpec("output_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<ParameterLayout> {
        ParameterLayout::new(self)
    }

    /// Numerator coefficients uniform on `[-1, 1]`, raw denominators equal to
    /// the constant one.
    pub fn init_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterVector> {
        let layout = self.layout()?;
        let mut values = vec![0.0; layout.len()];
        for slot in &layout.slots {
            for v in &mut values[slot.numerator.clone()] {
                *v = rng.random_range(-1.0..=1.0);
            }
            values[slot.denominator.start] = 1.0;
        }
        Ok(ParameterVector(values))
    }

    /// Parameters realizing a polynomial law in the raw inputs on the skip
    /// path: hidden numerators zero, all denominators constant, output
    /// numerator carrying `terms` as `(exponents over inputs, coefficient)`.
    pub fn theta_for_polynomial_law(&self, terms: &[(Vec<u32>, f64)]) -> Result<ParameterVector> {
        let layout = self.layout()?;
        let mut values = vec![0.0; layout.len()];
        for slot in &layout.slots {
            values[slot.denominator.start] = 1.0;
        }
        let out = layout.output_slot();
        let basis = MonomialBasis::new(self.output_input_dim(), self.degrees[self.depth()].numerator)?;
        let hidden = self.last_hidden_width();
        for (exps, coeff) in terms {
            if exps.len() != self.input_dim {
                return Err(Error::DimensionMismatch { expected: self.input_dim, got: exps.len() });
            }
            let mut full = vec![0u32; hidden];
            full.extend_from_slice(exps);
            let j = basis
                .exponents()
                .iter()
                .position(|e| *e == full)
                .ok_or_else(|| Error::InvalidSpec(format!("monomial {exps:?} exceeds degree")))?;
            let scale: f64 = exps
                .iter()
                .zip(&self.input_scale)
                .map(|(&k, s)| s.powi(k as i32))
                .product();
            values[out.numerator.start + j] += coeff * scale / self.output_scale;
        }
        Ok(ParameterVector(values))
    }
}

/// Where one rational component lives inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSlot {
    pub layer: usize,
    pub unit: usize,
    pub n_vars: usize,
    pub numerator: Range<usize>,
    pub denominator: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterLayout {
    slots: Vec<ComponentSlot>,
    len: usize,
}

/// Structured view of one rational component's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentParams {
    pub numerator: Vec<f64>,
    pub denominator_raw: Vec<f64>,
}

impl ParameterLayout {
    fn new(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut slots = Vec::new();
        let mut offset = 0;
        for layer in 0..=spec.depth() {
            let n_vars = spec.layer_input_dim(layer);
            let deg = spec.degrees[layer];
            let n_num = monomial_count(n_vars, deg.numerator)?;
            let n_den = monomial_count(n_vars, deg.denominator)?;
            for unit in 0..spec.layer_units(layer) {
                let numerator = offset..offset + n_num;
                let denominator = numerator.end..numerator.end + n_den;
                offset = denominator.end;
                slots.push(ComponentSlot { layer, unit, n_vars, numerator, denominator });
            }
        }
        Ok(Self { slots, len: offset })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slots(&self) -> &[ComponentSlot] {
        &self.slots
    }

    pub fn output_slot(&self) -> &ComponentSlot {
        self.slots.last().expect("layout has an output component")
    }

    /// True for every flat index holding a numerator coefficient.
    pub fn numerator_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for slot in &self.slots {
            for m in &mut mask[slot.numerator.clone()] {
                *m = true;
            }
        }
        mask
    }

    pub fn decode(&self, theta: &ParameterVector) -> Result<Vec<ComponentParams>> {
        self.check(theta)?;
        Ok(self
            .slots
            .iter()
            .map(|s| ComponentParams {
                numerator: theta.0[s.numerator.clone()].to_vec(),
                denominator_raw: theta.0[s.denominator.clone()].to_vec(),
            })
            .collect())
    }

    pub fn encode(&self, parts: &[ComponentParams]) -> Result<ParameterVector> {
        if parts.len() != self.slots.len() {
            return Err(Error::LayoutMismatch { expected: self.slots.len(), got: parts.len() });
        }
        let mut values = vec![0.0; self.len];
        for (slot, part) in self.slots.iter().zip(parts) {
            if part.numerator.len() != slot.numerator.len()
                || part.denominator_raw.len() != slot.denominator.len()
            {
                return Err(Error::LayoutMismatch {
                    expected: slot.numerator.len() + slot.denominator.len(),
                    got: part.numerator.len() + part.denominator_raw.len(),
                });
            }
            values[slot.numerator.clone()].copy_from_slice(&part.numerator);
            values[slot.denominator.clone()].copy_from_slice(&part.denominator_raw);
        }
        Ok(ParameterVector(values))
    }

    pub fn check(&self, theta: &ParameterVector) -> Result<()> {
        if theta.0.len() != self.len {
            return Err(Error::LayoutMismatch { expected: self.len, got: theta.0.len() });
        }
        Ok(())
    }
}

/// Flat trainable parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

struct CompiledUnit {
    numerator: Vec<f64>,
    denominator: Vec<f64>,
    jacobian: ProjectionJacobian,
    num_range: Range<usize>,
    den_range: Range<usize>,
}

struct CompiledLayer {
    basis: MonomialBasis,
    units: Vec<CompiledUnit>,
    activations: Option<Vec<ActivationKind>>,
}

/// A network with decoded, projected parameters, ready for repeated
/// evaluation.
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<CompiledLayer>,
    n_params: usize,
}

/// Per-point intermediate values kept for the backward pass.
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    monos: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    act_deriv: Vec<Vec<f64>>,
    grad_in: Vec<Vec<f64>>,
    gp: Vec<f64>,
    gq: Vec<f64>,
}

/// Gradient accumulator over many points. Denominator entries hold the
/// gradient with respect to the normalized coefficients until
/// [`Network::finish_gradient`] maps them back to the raw parameters.
pub struct GradAccum {
    values: Vec<f64>,
}

impl GradAccum {
    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

impl Network {
    pub fn new(spec: &NetworkSpec, theta: &ParameterVector) -> Result<Self> {
        let layout = spec.layout()?;
        layout.check(theta)?;
        let mut layers = Vec::with_capacity(spec.depth() + 1);
        let mut slots = layout.slots.iter();
        for layer in 0..=spec.depth() {
            let deg = spec.degrees[layer];
            let n_vars = spec.layer_input_dim(layer);
            let basis = MonomialBasis::new(n_vars, deg.numerator.max(deg.denominator))?;
            let den_basis = MonomialBasis::new(n_vars, deg.denominator)?;
            let mut units = Vec::new();
            for _ in 0..spec.layer_units(layer) {
                let slot = slots.next().expect("layout matches spec");
                let raw = &theta.0[slot.denominator.clone()];
                let (den, jacobian) = project_with_jacobian(raw, &den_basis, spec.floor_epsilon)?;
                units.push(CompiledUnit {
                    numerator: theta.0[slot.numerator.clone()].to_vec(),
                    denominator: den.coeffs().to_vec(),
                    jacobian,
                    num_range: slot.numerator.clone(),
                    den_range: slot.denominator.clone(),
                });
            }
            let activations = (layer < spec.depth()).then(|| spec.hidden[layer].clone());
            layers.push(CompiledLayer { basis, units, activations });
        }
        Ok(Self { spec: spec.clone(), layers, n_params: layout.len() })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Normalized denominator coefficients of component `unit` in `layer`.
    pub fn denominator(&self, layer: usize, unit: usize) -> &[f64] {
        &self.layers[layer].units[unit].denominator
    }

    pub fn numerator(&self, layer: usize, unit: usize) -> &[f64] {
        &self.layers[layer].units[unit].numerator
    }

    pub fn tape(&self) -> Tape {
        let n = self.layers.len();
        let mut t = Tape {
            inputs: Vec::with_capacity(n),
            monos: Vec::with_capacity(n),
            p: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            act_deriv: Vec::with_capacity(n),
            grad_in: Vec::with_capacity(n),
            gp: Vec::new(),
            gq: Vec::new(),
        };
        let mut widest = 0;
        for layer in &self.layers {
            let n_vars = layer.basis.n_vars();
            widest = widest.max(n_vars);
            t.inputs.push(vec![0.0; n_vars]);
            t.monos.push(vec![0.0; layer.basis.len()]);
            t.p.push(vec![0.0; layer.units.len()]);
            t.q.push(vec![0.0; layer.units.len()]);
            t.act_deriv.push(vec![0.0; layer.units.len()]);
            t.grad_in.push(vec![0.0; n_vars]);
        }
        t.gp = vec![0.0; widest];
        t.gq = vec![0.0; widest];
        t
    }

    pub fn accumulator(&self) -> GradAccum {
        GradAccum { values: vec![0.0; self.n_params] }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch { expected: self.spec.input_dim, got: x.len() });
        }
        Ok(())
    }

    /// Forward pass recording intermediates in `tape`. `x` must have
    /// `input_dim` entries.
    pub fn forward_tape(&self, x: &[f64], tape: &mut Tape) -> f64 {
        let depth = self.spec.depth();
        let n_in = self.spec.input_dim;
        for (l, (xi, s)) in x.iter().zip(&self.spec.input_scale).enumerate() {
            tape.inputs[0][l] = xi / s;
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if i == depth && depth > 0 {
                // Skip connection: scaled raw inputs follow the hidden outputs.
                let hidden = self.spec.last_hidden_width();
                let (head, tail) = tape.inputs.split_at_mut(i);
                tail[0][hidden..hidden + n_in].copy_from_slice(&head[0][..n_in]);
            }
            let (inputs, monos) = (&tape.inputs[i], &mut tape.monos[i]);
            layer.basis.eval_into(inputs, monos);
            for (k, unit) in layer.units.iter().enumerate() {
                let p = dot(&unit.numerator, monos);
                let q = dot(&unit.denominator, monos);
                tape.p[i][k] = p;
                tape.q[i][k] = q;
                if let Some(acts) = &layer.activations {
                    let (v, d) = acts[k].apply(p / q);
                    tape.act_deriv[i][k] = d;
                    tape.inputs[i + 1][k] = v;
                }
            }
        }
        self.spec.output_scale * tape.p[depth][0] / tape.q[depth][0]
    }

    /// Backward pass for upstream derivative `upstream` of the output.
    /// Accumulates parameter gradients into `accum` and/or writes the input
    /// gradient (raw input coordinates) into `input_grad`.
    pub fn backward(
        &self,
        tape: &mut Tape,
        upstream: f64,
        mut accum: Option<&mut GradAccum>,
        input_grad: Option<&mut [f64]>,
    ) {
        let depth = self.spec.depth();
        let upstream = upstream * self.spec.output_scale;
        let need_hidden_grads = accum.is_some() || input_grad.is_some();
        // Output-layer upstream is a single scalar; hidden layers take the
        // upstream from the next layer's input gradient.
        for i in (0..=depth).rev() {
            let layer = &self.layers[i];
            let n_vars = layer.basis.n_vars();
            tape.grad_in[i].iter_mut().for_each(|v| *v = 0.0);
            let propagate = need_hidden_grads && (i > 0 || input_grad.is_some());
            for (k, unit) in layer.units.iter().enumerate() {
                let g = if i == depth {
                    upstream
                } else {
                    tape.grad_in[i + 1][k] * tape.act_deriv[i][k]
                };
                if g == 0.0 {
                    continue;
                }
                let p = tape.p[i][k];
                let q = tape.q[i][k];
                let r = p / q;
                let monos = &tape.monos[i];
                if let Some(acc) = accum.as_deref_mut() {
                    let gn = g / q;
                    let gd = -g * r / q;
                    let num = &mut acc.values[unit.num_range.clone()];
                    for (a, m) in num.iter_mut().zip(monos.iter()) {
                        *a += gn * m;
                    }
                    let den = &mut acc.values[unit.den_range.clone()];
                    for (a, m) in den.iter_mut().zip(monos.iter()) {
                        *a += gd * m;
                    }
                }
                if propagate {
                    let gp = &mut tape.gp[..n_vars];
                    let gq = &mut tape.gq[..n_vars];
                    gp.iter_mut().for_each(|v| *v = 0.0);
                    gq.iter_mut().for_each(|v| *v = 0.0);
                    layer.basis.grad_from_values(&unit.numerator, monos, gp);
                    layer.basis.grad_from_values(&unit.denominator, monos, gq);
                    let scale = g / q;
                    for l in 0..n_vars {
                        tape.grad_in[i][l] += scale * (gp[l] - r * gq[l]);
                    }
                }
            }
            if i == depth && depth > 0 {
                // Route the skip part of the output-layer input gradient into
                // the first layer's input gradient after it is computed.
                continue;
            }
        }
        if let Some(out) = input_grad {
            let n_in = self.spec.input_dim;
            let hidden = self.spec.last_hidden_width();
            for l in 0..n_in {
                let mut g = tape.grad_in[depth][hidden + l];
                if depth > 0 {
                    g += tape.grad_in[0][l];
                }
                out[l] = g / self.spec.input_scale[l];
            }
        }
    }

    /// Maps an accumulated gradient to raw-parameter coordinates.
    pub fn finish_gradient(&self, accum: &GradAccum) -> Vec<f64> {
        let mut out = accum.values.clone();
        for layer in &self.layers {
            for unit in &layer.units {
                let g = unit.jacobian.apply_transpose(&accum.values[unit.den_range.clone()]);
                out[unit.den_range.clone()].copy_from_slice(&g);
            }
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut tape = self.tape();
        Ok(self.forward_tape(x, &mut tape))
    }

    pub fn eval_with_input_grad(&self, x: &[f64], tape: &mut Tape, grad: &mut [f64]) -> f64 {
        let v = self.forward_tape(x, tape);
        self.backward(tape, 1.0, None, Some(grad));
        v
    }
}

pub fn forward(spec: &NetworkSpec, theta: &ParameterVector, x: &[f64]) -> Result<f64> {
    Network::new(spec, theta)?.eval(x)
}

/// Gradient of the output with respect to every raw parameter. Clamped
/// denominator coordinates receive zero.
pub fn grad_params(spec: &NetworkSpec, theta: &ParameterVector, x: &[f64]) -> Result<Vec<f64>> {
    let net = Network::new(spec, theta)?;
    net.check_input(x)?;
    let mut tape = net.tape();
    let mut acc = net.accumulator();
    net.forward_tape(x, &mut tape);
    net.backward(&mut tape, 1.0, Some(&mut acc), None);
    Ok(net.finish_gradient(&acc))
}

pub fn grad_input(spec: &NetworkSpec, theta: &ParameterVector, x: &[f64]) -> Result<Vec<f64>> {
    let net = Network::new(spec, theta)?;
    net.check_input(x)?;
    let mut tape = net.tape();
    let mut g = vec![0.0; spec.input_dim];
    net.eval_with_input_grad(x, &mut tape, &mut g);
    Ok(g)
}

pub fn batch_forward(spec: &NetworkSpec, theta: &ParameterVector, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let net = Network::new(spec, theta)?;
    for x in xs {
        net.check_input(x)?;
    }
    let mut tape = net.tape();
    Ok(xs.iter().map(|x| net.forward_tape(x, &mut tape)).collect())
}

/// On-disk checkpoint of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: NetworkSpec,
    pub theta: ParameterVector,
}

pub const CHECKPOINT_FORMAT: &str = "lawforge-network";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(spec: NetworkSpec, theta: ParameterVector) -> Self {
        Self { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, spec, theta }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unexpected checkpoint format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.spec.layout()?.check(&ck.theta)?;
        Ok(ck)
    }
}
