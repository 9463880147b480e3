//! Per-dimension sign-constrained tanh MLP policies.
//!
//! Each latent dimension `i` owns an independent network `π^i` fed with
//! `s1_i = z_i` and, if its integral flag is set, `s2_i = ∫z_i dt`. Fixing the
//! sign of every weight fixes the sign of `∂π^i/∂s` because `tanh' > 0`.
//! The bank output is `a_i = flip_i · scale_i · π^i(s1_i, s2_i)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default magnitude floor for constrained weights.
pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-6;
/// Serialization schema version for policy banks.
pub const POLICY_SCHEMA_VERSION: u32 = 1;
/// Pre-activation magnitude treated as saturated.
pub const SATURATION_INPUT: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("open loop not stable in dimension {dim}: Λ_ii = {value}")]
    UnstableOpenLoop { dim: usize, value: f64 },
    #[error("sign pattern of network {dim} does not fix the sign of its input Jacobian")]
    InconsistentSignPattern { dim: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("policy file: {0}")]
    Parse(String),
}

/// One dense layer, weights stored row-major as `out × inp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub out: usize,
    pub inp: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Required sign per weight: `1`, `-1`, or `0` for unconstrained.
    pub signs: Vec<i8>,
    pub tanh: bool,
}

impl Layer {
    fn validate(&self) -> Result<(), PolicyError> {
        let n = self.out * self.inp;
        if self.out == 0 || self.inp == 0 {
            return Err(PolicyError::InvalidArchitecture("empty layer".into()));
        }
        if self.weights.len() != n || self.signs.len() != n || self.bias.len() != self.out {
            return Err(PolicyError::InvalidArchitecture(format!(
                "layer {}x{} has {} weights, {} signs, {} biases",
                self.out,
                self.inp,
                self.weights.len(),
                self.signs.len(),
                self.bias.len()
            )));
        }
        if self.signs.iter().any(|s| !matches!(s, -1..=1)) {
            return Err(PolicyError::InvalidArchitecture(
                "sign entries must be -1, 0 or 1".into(),
            ));
        }
        if self
            .weights
            .iter()
            .chain(&self.bias)
            .any(|v| !v.is_finite())
        {
            return Err(PolicyError::InvalidArchitecture(
                "non-finite parameter".into(),
            ));
        }
        Ok(())
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out)
            .map(|r| {
                let row = &self.weights[r * self.inp..(r + 1) * self.inp];
                self.bias[r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstrainedMLP {
    pub layers: Vec<Layer>,
    pub weight_floor: f64,
}

/// Hidden widths and output activation for freshly drawn networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub output_tanh: bool,
    pub weight_floor: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            output_tanh: true,
            weight_floor: DEFAULT_WEIGHT_FLOOR,
        }
    }
}

/// How random weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightInit {
    /// Magnitudes are uniform in `[min_abs, max_abs]`.
    pub min_abs: f64,
    pub max_abs: f64,
    /// Biases are uniform in `[-bias_abs, bias_abs]`.
    pub bias_abs: f64,
}

impl Default for WeightInit {
    fn default() -> Self {
        Self {
            min_abs: 0.05,
            max_abs: 0.5,
            bias_abs: 0.1,
        }
    }
}

/// Sign pattern used when drawing networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignMode {
    /// Every weight required positive.
    Positive,
    /// No sign requirement; weight signs drawn at random.
    Free,
}

impl ConstrainedMLP {
    pub fn new(layers: Vec<Layer>, weight_floor: f64) -> Result<Self, PolicyError> {
        let net = Self {
            layers,
            weight_floor,
        };
        net.validate()?;
        Ok(net)
    }

    /// Single tanh neuron `tanh(w·s + b)` over `w.len()` inputs with positive sign requirement.
    pub fn single(w: &[f64], b: f64) -> Self {
        Self {
            layers: vec![Layer {
                out: 1,
                inp: w.len(),
                weights: w.to_vec(),
                bias: vec![b],
                signs: vec![1; w.len()],
                tanh: true,
            }],
            weight_floor: DEFAULT_WEIGHT_FLOOR,
        }
    }

    pub fn random<R: Rng + ?Sized>(
        inputs: usize,
        arch: &Architecture,
        init: &WeightInit,
        mode: SignMode,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        if init.min_abs < 0.0 || init.max_abs < init.min_abs || init.bias_abs < 0.0 {
            return Err(PolicyError::InvalidArchitecture(
                "bad weight init ranges".into(),
            ));
        }
        let mut widths = vec![inputs];
        widths.extend(&arch.hidden);
        widths.push(1);
        let nl = widths.len() - 1;
        let mut layers = Vec::with_capacity(nl);
        for (k, pair) in widths.windows(2).enumerate() {
            let (inp, out) = (pair[0], pair[1]);
            let mut weights = Vec::with_capacity(out * inp);
            let mut signs = Vec::with_capacity(out * inp);
            for _ in 0..out * inp {
                let mag = if init.max_abs > init.min_abs {
                    rng.random_range(init.min_abs..=init.max_abs)
                } else {
                    init.min_abs
                };
                match mode {
                    SignMode::Positive => {
                        weights.push(mag.max(arch.weight_floor));
                        signs.push(1);
                    }
                    SignMode::Free => {
                        let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        weights.push(s * mag);
                        signs.push(0);
                    }
                }
            }
            let bias = (0..out)
                .map(|_| {
                    if init.bias_abs > 0.0 {
                        rng.random_range(-init.bias_abs..=init.bias_abs)
                    } else {
                        0.0
                    }
                })
                .collect();
            layers.push(Layer {
                out,
                inp,
                weights,
                bias,
                signs,
                tanh: k + 1 < nl || arch.output_tanh,
            });
        }
        Self::new(layers, arch.weight_floor)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.layers.is_empty() {
            return Err(PolicyError::InvalidArchitecture("no layers".into()));
        }
        if !(self.weight_floor > 0.0) {
            return Err(PolicyError::InvalidArchitecture(
                "weight floor must be positive".into(),
            ));
        }
        for l in &self.layers {
            l.validate()?;
        }
        for pair in self.layers.windows(2) {
            if pair[0].out != pair[1].inp {
                return Err(PolicyError::InvalidArchitecture(
                    "layer widths do not chain".into(),
                ));
            }
        }
        if self.layers.last().map(|l| l.out) != Some(1) {
            return Err(PolicyError::InvalidArchitecture(
                "output width must be 1".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inp
    }

    pub fn forward(&self, s: &[f64]) -> f64 {
        let mut x = s.to_vec();
        for l in &self.layers {
            x = l.pre_activation(&x);
            if l.tanh {
                x.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        x[0]
    }

    /// Output and input gradient `∂π/∂s`, by the forward chain product
    /// `W_l M_{l−1} W_{l−1} ⋯ M_1 W_1`.
    pub fn forward_with_gradient(&self, s: &[f64]) -> (f64, Vec<f64>) {
        let n0 = s.len();
        let mut x = s.to_vec();
        // jac[k*n0 + j] = ∂x_k/∂s_j
        let mut jac: Vec<f64> = (0..n0 * n0)
            .map(|k| if k / n0 == k % n0 { 1.0 } else { 0.0 })
            .collect();
        for l in &self.layers {
            let mut h = l.pre_activation(&x);
            let mut next = vec![0.0; l.out * n0];
            for r in 0..l.out {
                let row = &l.weights[r * l.inp..(r + 1) * l.inp];
                for (k, w) in row.iter().enumerate() {
                    for j in 0..n0 {
                        next[r * n0 + j] += w * jac[k * n0 + j];
                    }
                }
            }
            if l.tanh {
                for r in 0..l.out {
                    let t = h[r].tanh();
                    let m = 1.0 - t * t;
                    for j in 0..n0 {
                        next[r * n0 + j] *= m;
                    }
                    h[r] = t;
                }
            }
            x = h;
            jac = next;
        }
        (x[0], jac)
    }

    /// Largest `|pre-activation|` over all tanh units at input `s`.
    pub fn max_preactivation(&self, s: &[f64]) -> f64 {
        let mut x = s.to_vec();
        let mut worst = 0.0f64;
        for l in &self.layers {
            x = l.pre_activation(&x);
            if l.tanh {
                worst = x.iter().fold(worst, |m, v| m.max(v.abs()));
                x.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        worst
    }

    /// Snaps every constrained weight to its required sign with magnitude
    /// `max(|w|, ε)`. Unconstrained weights and biases are left alone.
    pub fn project(&self) -> Self {
        let mut out = self.clone();
        let eps = self.weight_floor;
        for l in &mut out.layers {
            for (w, s) in l.weights.iter_mut().zip(&l.signs) {
                if *s != 0 {
                    *w = f64::from(*s) * w.abs().max(eps);
                }
            }
        }
        out
    }

    pub fn is_feasible(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().zip(&l.signs).all(|(w, s)| {
                *s == 0 || (w.signum() == f64::from(*s) && w.abs() >= self.weight_floor)
            })
        })
    }

    /// Sign of `∂π/∂s_j` implied by the sign pattern alone, identical for
    /// every input `j`, or `None` if the pattern does not fix it.
    pub fn structural_sign(&self) -> Option<f64> {
        let n0 = self.input_dim();
        let mut result = None;
        for j in 0..n0 {
            let mut node: Vec<i8> = (0..n0).map(|k| i8::from(k == j)).collect();
            for l in &self.layers {
                let mut next = vec![0i8; l.out];
                for (r, slot) in next.iter_mut().enumerate() {
                    for (k, nk) in node.iter().enumerate() {
                        if *nk == 0 {
                            continue;
                        }
                        let s = l.signs[r * l.inp + k];
                        if s == 0 {
                            return None;
                        }
                        let c = s * nk;
                        if *slot == 0 {
                            *slot = c;
                        } else if *slot != c {
                            return None;
                        }
                    }
                }
                node = next;
            }
            let s = f64::from(node[0]);
            if s == 0.0 {
                return None;
            }
            match result {
                None => result = Some(s),
                Some(prev) if prev != s => return None,
                _ => {}
            }
        }
        result
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(&l.weights);
            out.extend(&l.bias);
        }
    }

    fn read_params(&mut self, p: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyBank {
    pub nets: Vec<ConstrainedMLP>,
    pub flip: Vec<f64>,
    /// Positive output gain per dimension.
    pub scale: Vec<f64>,
    pub integral_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub s2: Vec<f64>,
    pub t: f64,
}

impl PolicyState {
    pub fn zeros(n: usize) -> Self {
        Self {
            s2: vec![0.0; n],
            t: 0.0,
        }
    }

    /// Rectangle-rule accumulation `s2 ← s2 + z·dt`.
    pub fn accumulate(&mut self, z: &[f64], dt: f64) {
        for (s, v) in self.s2.iter_mut().zip(z) {
            *s += v * dt;
        }
        self.t += dt;
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    schema_version: u32,
    bank: PolicyBank,
}

impl PolicyBank {
    pub fn new(
        nets: Vec<ConstrainedMLP>,
        flip: Vec<f64>,
        scale: Vec<f64>,
        integral_mask: Vec<bool>,
    ) -> Result<Self, PolicyError> {
        let bank = Self {
            nets,
            flip,
            scale,
            integral_mask,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let n = self.nets.len();
        for got in [self.flip.len(), self.scale.len(), self.integral_mask.len()] {
            if got != n {
                return Err(PolicyError::DimMismatch { expected: n, got });
            }
        }
        for (i, net) in self.nets.iter().enumerate() {
            net.validate()?;
            let want = 1 + usize::from(self.integral_mask[i]);
            if net.input_dim() != want {
                return Err(PolicyError::DimMismatch {
                    expected: want,
                    got: net.input_dim(),
                });
            }
        }
        if self.flip.iter().any(|f| f.abs() != 1.0) {
            return Err(PolicyError::InvalidArchitecture("flips must be ±1".into()));
        }
        if self.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(PolicyError::InvalidArchitecture(
                "scales must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Bank of freshly drawn networks with unit flips.
    pub fn random<R: Rng + ?Sized>(
        integral_mask: &[bool],
        scale: &[f64],
        arch: &Architecture,
        init: &WeightInit,
        mode: SignMode,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let nets = integral_mask
            .iter()
            .map(|m| ConstrainedMLP::random(1 + usize::from(*m), arch, init, mode, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(
            nets,
            vec![1.0; integral_mask.len()],
            scale.to_vec(),
            integral_mask.to_vec(),
        )
    }

    pub fn dim(&self) -> usize {
        self.nets.len()
    }

    fn check_dims(&self, z: &[f64], ps: &PolicyState) -> Result<(), PolicyError> {
        let n = self.dim();
        for got in [z.len(), ps.s2.len()] {
            if got != n {
                return Err(PolicyError::DimMismatch { expected: n, got });
            }
        }
        Ok(())
    }

    fn net_input(&self, i: usize, z: &[f64], ps: &PolicyState) -> Vec<f64> {
        if self.integral_mask[i] {
            vec![z[i], ps.s2[i]]
        } else {
            vec![z[i]]
        }
    }

    pub fn forward(&self, z: &[f64], ps: &PolicyState) -> Result<Vec<f64>, PolicyError> {
        self.check_dims(z, ps)?;
        Ok((0..self.dim())
            .map(|i| self.flip[i] * self.scale[i] * self.nets[i].forward(&self.net_input(i, z, ps)))
            .collect())
    }

    /// Diagonal entries of `∂a/∂s1` and `∂a/∂s2`, flip and scale included.
    pub fn jacobian(
        &self,
        z: &[f64],
        ps: &PolicyState,
    ) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
        self.check_dims(z, ps)?;
        let mut d1 = Vec::with_capacity(self.dim());
        let mut d2 = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let (_, g) = self.nets[i].forward_with_gradient(&self.net_input(i, z, ps));
            let k = self.flip[i] * self.scale[i];
            d1.push(k * g[0]);
            d2.push(if self.integral_mask[i] { k * g[1] } else { 0.0 });
        }
        Ok((d1, d2))
    }

    /// Largest tanh pre-activation magnitude of any net at `(z, s2)`.
    pub fn max_preactivation(&self, z: &[f64], ps: &PolicyState) -> Result<f64, PolicyError> {
        self.check_dims(z, ps)?;
        Ok((0..self.dim())
            .map(|i| self.nets[i].max_preactivation(&self.net_input(i, z, ps)))
            .fold(0.0, f64::max))
    }

    pub fn project(&self) -> Self {
        Self {
            nets: self.nets.iter().map(ConstrainedMLP::project).collect(),
            ..self.clone()
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.nets.iter().all(ConstrainedMLP::is_feasible)
    }

    /// True when every net fixes its input-gradient sign structurally.
    pub fn has_sign_pattern(&self) -> bool {
        self.nets.iter().all(|n| n.structural_sign().is_some())
    }

    /// Chooses each flip so that `∂a_i/∂s·R_ii < 0` holds structurally.
    pub fn set_flips(&self, r_diag: &[f64], lambda_diag: &[f64]) -> Result<Self, PolicyError> {
        let n = self.dim();
        for got in [r_diag.len(), lambda_diag.len()] {
            if got != n {
                return Err(PolicyError::DimMismatch { expected: n, got });
            }
        }
        if let Some((dim, &value)) = lambda_diag.iter().enumerate().find(|(_, l)| !(**l < 0.0)) {
            return Err(PolicyError::UnstableOpenLoop { dim, value });
        }
        let mut flip = Vec::with_capacity(n);
        for (i, net) in self.nets.iter().enumerate() {
            let s = net
                .structural_sign()
                .ok_or(PolicyError::InconsistentSignPattern { dim: i })?;
            let r = if r_diag[i] > 0.0 { 1.0 } else { -1.0 };
            flip.push(-r * s);
        }
        Ok(Self {
            flip,
            ..self.clone()
        })
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(ConstrainedMLP::param_count).sum()
    }

    /// All weights and biases, net by net, layer by layer, weights before bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for net in &self.nets {
            net.write_params(&mut p);
        }
        p
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self, PolicyError> {
        if p.len() != self.param_count() {
            return Err(PolicyError::DimMismatch {
                expected: self.param_count(),
                got: p.len(),
            });
        }
        let mut out = self.clone();
        let mut k = 0;
        for net in &mut out.nets {
            k += net.read_params(&p[k..]);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = BankFile {
            schema_version: POLICY_SCHEMA_VERSION,
            bank: self.clone(),
        };
        serde_json::to_string_pretty(&file).expect("bank serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PolicyError> {
        let file: BankFile =
            serde_json::from_str(s).map_err(|e| PolicyError::Parse(e.to_string()))?;
        if file.schema_version != POLICY_SCHEMA_VERSION {
            return Err(PolicyError::Parse(format!(
                "unsupported schema version {}",
                file.schema_version
            )));
        }
        file.bank.validate()?;
        Ok(file.bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_bank(w: f64, flip: f64) -> PolicyBank {
        PolicyBank::new(
            vec![ConstrainedMLP::single(&[w], 0.0)],
            vec![flip],
            vec![1.0],
            vec![false],
        )
        .unwrap()
    }

    #[test]
    fn single_neuron_forward() {
        let ps = PolicyState::zeros(1);
        let a = single_bank(2.0, 1.0).forward(&[0.5], &ps).unwrap();
        assert!((a[0] - 1f64.tanh()).abs() < 1e-15);
        assert!((a[0] - 0.76159).abs() < 1e-5);
        let a = single_bank(2.0, -1.0).forward(&[0.5], &ps).unwrap();
        assert!((a[0] + 0.76159).abs() < 1e-5);
    }

    #[test]
    fn minimal_weights_at_origin_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = WeightInit {
            min_abs: 0.0,
            max_abs: 0.0,
            bias_abs: 0.0,
        };
        let bank = PolicyBank::random(
            &[true, false],
            &[1.0, 1.0],
            &Architecture::default(),
            &init,
            SignMode::Positive,
            &mut rng,
        )
        .unwrap();
        assert!(bank.is_feasible());
        let a = bank.forward(&[0.0, 0.0], &PolicyState::zeros(2)).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn single_neuron_jacobian() {
        let ps = PolicyState::zeros(1);
        let (d1, d2) = single_bank(2.0, 1.0).jacobian(&[0.0], &ps).unwrap();
        assert_eq!(d1, vec![2.0]);
        assert_eq!(d2, vec![0.0]);
        let (d1, _) = single_bank(2.0, 1.0).jacobian(&[0.5], &ps).unwrap();
        let t = 1f64.tanh();
        assert!((d1[0] - 2.0 * (1.0 - t * t)).abs() < 1e-15);
        assert!((d1[0] - 0.83995).abs() < 1e-5);
    }

    #[test]
    fn positive_pattern_gives_positive_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = PolicyBank::random(
            &[true],
            &[1.0],
            &Architecture::default(),
            &WeightInit::default(),
            SignMode::Positive,
            &mut rng,
        )
        .unwrap();
        let ps = PolicyState {
            s2: vec![-0.3],
            t: 0.0,
        };
        let (d1, d2) = bank.jacobian(&[0.4], &ps).unwrap();
        assert!(d1[0] > 0.0 && d2[0] > 0.0);
    }

    #[test]
    fn project_examples() {
        let mut net = ConstrainedMLP::single(&[-0.5, 1e-9], 0.3);
        net.weight_floor = 1e-6;
        let p = net.project();
        assert_eq!(p.layers[0].weights, vec![0.5, 1e-6]);
        assert_eq!(p.layers[0].bias, vec![0.3]);
        assert_eq!(p.project(), p);
        assert!(p.is_feasible());
        assert!(!net.is_feasible());
    }

    #[test]
    fn flips_follow_r_sign() {
        let bank = single_bank(1.0, 1.0);
        assert_eq!(bank.set_flips(&[3.0], &[-1.0]).unwrap().flip, vec![-1.0]);
        assert_eq!(bank.set_flips(&[-3.0], &[-1.0]).unwrap().flip, vec![1.0]);
        assert_eq!(
            bank.set_flips(&[3.0], &[0.1]),
            Err(PolicyError::UnstableOpenLoop { dim: 0, value: 0.1 })
        );
    }

    #[test]
    fn negative_output_layer_inverts_structural_sign() {
        let mut net = ConstrainedMLP::single(&[1.0], 0.0);
        net.layers.push(Layer {
            out: 1,
            inp: 1,
            weights: vec![-2.0],
            bias: vec![0.0],
            signs: vec![-1],
            tanh: false,
        });
        assert_eq!(net.structural_sign(), Some(-1.0));
        let bank = PolicyBank::new(vec![net], vec![1.0], vec![1.0], vec![false]).unwrap();
        let flipped = bank.set_flips(&[3.0], &[-1.0]).unwrap();
        assert_eq!(flipped.flip, vec![1.0]);
        let (d1, _) = flipped.jacobian(&[0.2], &PolicyState::zeros(1)).unwrap();
        assert!(d1[0] * 3.0 < 0.0);
    }

    #[test]
    fn free_pattern_has_no_structural_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = PolicyBank::random(
            &[false],
            &[1.0],
            &Architecture::default(),
            &WeightInit::default(),
            SignMode::Free,
            &mut rng,
        )
        .unwrap();
        assert_eq!(
            bank.set_flips(&[1.0], &[-1.0]),
            Err(PolicyError::InconsistentSignPattern { dim: 0 })
        );
    }

    #[test]
    fn dims_checked() {
        let bank = single_bank(1.0, 1.0);
        assert!(matches!(
            bank.forward(&[0.0, 1.0], &PolicyState::zeros(1)),
            Err(PolicyError::DimMismatch { .. })
        ));
    }

    #[test]
    fn params_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = PolicyBank::random(
            &[true, false],
            &[0.5, 2.0],
            &Architecture::default(),
            &WeightInit::default(),
            SignMode::Positive,
            &mut rng,
        )
        .unwrap();
        let p = bank.params();
        assert_eq!(p.len(), bank.param_count());
        assert_eq!(bank.with_params(&p).unwrap(), bank);
        assert!(bank.with_params(&p[1..]).is_err());
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bank = PolicyBank::random(
            &[true, true],
            &[0.2, 0.3],
            &Architecture::default(),
            &WeightInit::default(),
            SignMode::Positive,
            &mut rng,
        )
        .unwrap();
        let text = bank.to_json();
        let back = PolicyBank::from_json(&text).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.to_json(), text);
        assert!(PolicyBank::from_json("{\"schema_version\":2}").is_err());
    }
}
