//! Fixed-architecture dense networks.
//!
//! An [`MlpSpec`] fixes the shapes; parameters live in a flat
//! [`ParamVector`] whose layout is a pure function of the spec. Networks are
//! evaluated generically over [`Dual`] so the same code gives plain values,
//! input derivatives and parameter gradients.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::dual::{Dual, Jet};
use crate::error::{Error, Result};

/// Seedable stream used everywhere randomness is consumed.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
    Offset,
}

/// One tensor in the flat layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorSlot {
    pub layer: usize,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl MlpSpec {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        hidden_widths: Vec<usize>,
        activation: Activation,
        layer_norm: bool,
    ) -> Result<Self> {
        let spec = MlpSpec {
            in_dim,
            out_dim,
            hidden_widths,
            activation,
            layer_norm,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Linear map `in_dim -> out_dim` with bias.
    pub fn linear(in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::new(in_dim, out_dim, Vec::new(), Activation::Identity, false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidConfig("MLP dimensions must be positive".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Tensors in storage order: per hidden layer `W, b[, gain, offset]`,
    /// then the output `W, b`. Layer index counts hidden layers first; the
    /// output layer has index `hidden_widths.len()`.
    pub fn layout(&self) -> Vec<TensorSlot> {
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |layer, kind, rows, cols, slots: &mut Vec<TensorSlot>| {
            slots.push(TensorSlot {
                layer,
                kind,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        };
        let mut fan_in = self.in_dim;
        for (l, &w) in self.hidden_widths.iter().enumerate() {
            push(l, ParamKind::Weight, w, fan_in, &mut slots);
            push(l, ParamKind::Bias, 1, w, &mut slots);
            if self.layer_norm {
                push(l, ParamKind::Gain, 1, w, &mut slots);
                push(l, ParamKind::Offset, 1, w, &mut slots);
            }
            fan_in = w;
        }
        let l = self.hidden_widths.len();
        push(l, ParamKind::Weight, self.out_dim, fan_in, &mut slots);
        push(l, ParamKind::Bias, 1, self.out_dim, &mut slots);
        slots
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(TensorSlot::len).sum()
    }

    /// Flat offset of entry `index` (row-major) of the given tensor.
    pub fn offset(&self, layer: usize, kind: ParamKind, index: usize) -> Option<usize> {
        self.layout()
            .into_iter()
            .find(|s| s.layer == layer && s.kind == kind)
            .filter(|s| index < s.len())
            .map(|s| s.offset + index)
    }
}

/// Flat parameter storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Uniform `[-scale, scale]` weights and biases; layer-norm gains 1 and
/// offsets 0.
pub fn mlp_init(spec: &MlpSpec, scale: f64, rng: &mut Rng) -> Result<ParamVector> {
    let mut out = ParamVector::zeros(spec.param_count());
    init_into(spec, scale, rng, &mut out.0)?;
    Ok(out)
}

pub(crate) fn init_into(spec: &MlpSpec, scale: f64, rng: &mut Rng, dst: &mut [f64]) -> Result<()> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("init scale must be positive, got {scale}")));
    }
    let dist = Uniform::new_inclusive(-scale, scale)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for slot in spec.layout() {
        let range = &mut dst[slot.offset..slot.offset + slot.len()];
        match slot.kind {
            ParamKind::Weight | ParamKind::Bias => {
                range.iter_mut().for_each(|p| *p = dist.sample(rng));
            }
            ParamKind::Gain => range.fill(1.0),
            ParamKind::Offset => range.fill(0.0),
        }
    }
    Ok(())
}

/// Turns a parameter slice into per-tensor vars; `trainable` leaves are
/// recorded on the tape.
pub fn bind(spec: &MlpSpec, params: &[f64], tape: &Tape, trainable: bool) -> Vec<Var> {
    spec.layout()
        .iter()
        .map(|s| {
            let m = Mat::from_shape_vec((s.rows, s.cols), params[s.offset..s.offset + s.len()].to_vec())
                .expect("layout shape");
            if trainable {
                tape.leaf(m)
            } else {
                tape.constant(m)
            }
        })
        .collect()
}

/// Flattens per-tensor gradients back into layout order.
pub fn gather_grads(vars: &[Var], grads: &crate::autodiff::Grads, dst: &mut [f64]) {
    let mut off = 0;
    for v in vars {
        let n = v.value().len();
        if let Some(g) = grads.wrt(v) {
            for (d, x) in dst[off..off + n].iter_mut().zip(g.iter()) {
                *d += x;
            }
        }
        off += n;
    }
}

fn layer_norm<T: Dual>(h: &T, gain: &Var, offset: &Var, width: usize) -> T {
    let centered = normalize(h, width);
    centered.mul_var(gain).add_var(offset)
}

fn normalize<T: Dual>(h: &T, width: usize) -> T {
    let inv_k = 1.0 / width as f64;
    let mean = h.sum_cols().scale(inv_k);
    let c = h.sub(&mean);
    let var = c.square().sum_cols().scale(inv_k);
    let inv_std = var.add_scalar(LAYER_NORM_EPS).unary(crate::autodiff::Fun::Rsqrt);
    c.mul(&inv_std)
}

/// Evaluates the network on a batch `z: B x in_dim`.
pub fn apply<T: Dual>(spec: &MlpSpec, w: &[Var], z: &T) -> T {
    apply_probed(spec, w, z, None)
}

fn apply_probed<T: Dual>(spec: &MlpSpec, w: &[Var], z: &T, mut probe: Option<&mut Vec<T>>) -> T {
    let mut h = z.clone();
    let mut i = 0;
    for &width in &spec.hidden_widths {
        h = h.matmul_t(&w[i]).add_var(&w[i + 1]);
        i += 2;
        if spec.layer_norm {
            if let Some(p) = probe.as_deref_mut() {
                p.push(normalize(&h, width));
            }
            h = layer_norm(&h, &w[i], &w[i + 1], width);
            i += 2;
        }
        h = match spec.activation {
            Activation::Tanh => h.tanh(),
            Activation::Identity => h,
        };
    }
    h.matmul_t(&w[i]).add_var(&w[i + 1])
}

fn check_input(spec: &MlpSpec, params: &ParamVector, z: &[f64]) -> Result<()> {
    if z.len() != spec.in_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.in_dim,
            got: z.len(),
        });
    }
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    Ok(())
}

/// Single-input evaluation.
pub fn mlp_apply(spec: &MlpSpec, params: &ParamVector, z: &[f64]) -> Result<Vec<f64>> {
    check_input(spec, params, z)?;
    let tape = Tape::no_grad();
    let w = bind(spec, params.as_slice(), &tape, false);
    let zin = tape.constant(Mat::from_shape_vec((1, z.len()), z.to_vec()).expect("shape"));
    Ok(apply(spec, &w, &zin).value().iter().copied().collect())
}

/// Input Jacobian `J[i][j] = ∂out_i/∂z_j` by forward mode.
pub fn mlp_jacobian(spec: &MlpSpec, params: &ParamVector, z: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_input(spec, params, z)?;
    let tape = Tape::no_grad();
    let w = bind(spec, params.as_slice(), &tape, false);
    let zin = Jet::seed_coords(tape.constant(Mat::from_shape_vec((1, z.len()), z.to_vec()).expect("shape")));
    let out = apply(spec, &w, &zin);
    Ok((0..spec.out_dim)
        .map(|i| (0..spec.in_dim).map(|j| out.tangent(j).value()[[0, i]]).collect())
        .collect())
}

/// Gradient of `Σ_i c_i out_i(z)` with respect to the parameters.
pub fn mlp_param_grad(spec: &MlpSpec, params: &ParamVector, z: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    check_input(spec, params, z)?;
    let tape = Tape::new();
    let w = bind(spec, params.as_slice(), &tape, true);
    let zin = tape.constant(Mat::from_shape_vec((1, z.len()), z.to_vec()).expect("shape"));
    let coef = tape.constant(Mat::from_shape_vec((1, c.len()), c.to_vec()).expect("shape"));
    let out = apply(spec, &w, &zin).mul(&coef).sum_cols();
    let grads = tape.backward(&out);
    let mut g = vec![0.0; params.len()];
    gather_grads(&w, &grads, &mut g);
    Ok(g)
}

/// Normalized hidden pre-activations (before gain/offset) for each
/// layer-normed hidden layer.
pub fn layer_norm_probe(spec: &MlpSpec, params: &ParamVector, z: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_input(spec, params, z)?;
    let tape = Tape::no_grad();
    let w = bind(spec, params.as_slice(), &tape, false);
    let zin = tape.constant(Mat::from_shape_vec((1, z.len()), z.to_vec()).expect("shape"));
    let mut probe = Vec::new();
    apply_probed(spec, &w, &zin, Some(&mut probe));
    Ok(probe.iter().map(|p| p.value().iter().copied().collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn one_hidden(ln: bool) -> MlpSpec {
        MlpSpec::new(3, 2, vec![5], Activation::Tanh, ln).unwrap()
    }

    #[test]
    fn init_range_and_determinism() {
        let (d, n) = (6.0, 9.0);
        let scale = 1.0 / (d * n);
        let spec = MlpSpec::new(9, 18, vec![32], Activation::Tanh, true).unwrap();
        let a = mlp_init(&spec, scale, &mut rng_from_seed(7)).unwrap();
        let b = mlp_init(&spec, scale, &mut rng_from_seed(7)).unwrap();
        assert_eq!(a, b);
        for slot in spec.layout() {
            let vals = &a.0[slot.offset..slot.offset + slot.len()];
            match slot.kind {
                ParamKind::Gain => assert!(vals.iter().all(|&v| v == 1.0)),
                ParamKind::Offset => assert!(vals.iter().all(|&v| v == 0.0)),
                _ => assert!(vals.iter().all(|&v| v.abs() <= 1.0 / 54.0)),
            }
        }
    }

    #[test]
    fn zero_scale_rejected() {
        let spec = one_hidden(false);
        assert!(matches!(
            mlp_init(&spec, 0.0, &mut rng_from_seed(0)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_linear_map_gives_zero() {
        let spec = MlpSpec::linear(4, 3).unwrap();
        let p = ParamVector::zeros(spec.param_count());
        assert_eq!(mlp_apply(&spec, &p, &[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_linear_layer() {
        let spec = MlpSpec::linear(3, 3).unwrap();
        let mut p = ParamVector::zeros(spec.param_count());
        for i in 0..3 {
            let k = spec.offset(0, ParamKind::Weight, i * 3 + i).unwrap();
            p.0[k] = 1.0;
        }
        let z = [0.25, -1.5, 2.0];
        assert_eq!(mlp_apply(&spec, &p, &z).unwrap(), z.to_vec());
    }

    #[test]
    fn dimension_mismatch() {
        let spec = one_hidden(false);
        let p = ParamVector::zeros(spec.param_count());
        assert_eq!(
            mlp_apply(&spec, &p, &[1.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 1 })
        );
    }

    #[test]
    fn input_jacobian_matches_central_differences() {
        let spec = one_hidden(false);
        let p = mlp_init(&spec, 0.8, &mut rng_from_seed(3)).unwrap();
        let z = [0.3, -0.2, 0.9];
        let jac = mlp_jacobian(&spec, &p, &z).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let fp = mlp_apply(&spec, &p, &zp).unwrap();
            let fm = mlp_apply(&spec, &p, &zm).unwrap();
            for i in 0..2 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let rel = (fd - jac[i][j]).abs() / jac[i][j].abs().max(1e-8);
                assert!(rel < 1e-6, "J[{i}][{j}] rel err {rel}");
            }
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let spec = MlpSpec::new(4, 2, vec![16, 8], Activation::Tanh, true).unwrap();
        let p = mlp_init(&spec, 0.5, &mut rng_from_seed(11)).unwrap();
        let probes = layer_norm_probe(&spec, &p, &[0.1, -0.4, 2.0, 0.7]).unwrap();
        assert_eq!(probes.len(), 2);
        // recompute raw statistics for the first layer to account for the
        // variance floor
        let tape = Tape::no_grad();
        let w = bind(&spec, p.as_slice(), &tape, false);
        let z = tape.constant(Mat::from_shape_vec((1, 4), vec![0.1, -0.4, 2.0, 0.7]).unwrap());
        let raw = z.matmul_t(&w[0]).add(&w[1]);
        let raw: Vec<f64> = raw.value().iter().copied().collect();
        let mu = raw.iter().sum::<f64>() / 16.0;
        let var = raw.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / 16.0;
        for probe in &probes {
            let k = probe.len() as f64;
            let m = probe.iter().sum::<f64>() / k;
            assert!(m.abs() < 1e-12);
        }
        let v0 = probes[0].iter().map(|x| x * x).sum::<f64>() / 16.0;
        assert!((v0 - var / (var + LAYER_NORM_EPS)).abs() < 1e-10);
    }

    #[test]
    fn param_gradient_matches_central_differences() {
        let spec = MlpSpec::new(2, 3, vec![4], Activation::Tanh, true).unwrap();
        let mut rng = rng_from_seed(5);
        let p = mlp_init(&spec, 0.7, &mut rng).unwrap();
        let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let c = [0.3, -1.2, 0.8];
        let g = mlp_param_grad(&spec, &p, &z, &c).unwrap();
        let f = |p: &ParamVector| -> f64 {
            mlp_apply(&spec, p, &z).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for k in 0..p.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.0[k] += h;
            pm.0[k] -= h;
            let fd = (f(&pp) - f(&pm)) / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(1e-6);
            assert!(err < 1e-4, "param {k}: fd {fd} ad {}", g[k]);
        }
    }
}
