//! QuantumNVP: affine coupling layers with complex scaling.
//!
//! Each layer keeps the masked coordinates and maps the rest as
//! `x_i = y_i |s_i|² + t_i`, where `s` and `t` read only `y ⊙ m`. The
//! scaling network emits `2N` reals: the first `N` are real parts and the
//! last `N` imaginary parts of an offset `σ`, and `s = 1 + σ`, so zero
//! output weights give the identity coupling.
//!
//! The Jacobian of one layer is triangular with diagonal `|s_i|²` on the
//! unmasked coordinates, so `log det = Σ 2 log|s_i|` and the phase picks up
//! `Σ arg s_i` over the same coordinates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Var};
use crate::dual::Dual;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, MlpSpec, Rng};

/// Below this `|s|²` the coupling is treated as non-invertible.
pub const SCALE_PINCH_EPS: f64 = 1e-12;

/// Binary mask; `true` entries pass through a layer unchanged.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask(pub Vec<bool>);

impl Mask {
    /// Even coordinates kept when `even_kept`, odd ones otherwise. For a
    /// single coordinate the mask is all-zero (the layer is a pure affine
    /// map of `y` whose coefficients come from the network biases).
    pub fn alternating(n: usize, even_kept: bool) -> Mask {
        if n == 1 {
            return Mask(vec![false]);
        }
        Mask((0..n).map(|i| (i % 2 == 0) == even_kept).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn unmasked(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.0[i]).collect()
    }

    fn as_row(&self) -> Mat {
        Mat::from_shape_fn((1, self.len()), |(_, i)| if self.0[i] { 1.0 } else { 0.0 })
    }

    /// `k x N` selector of the unmasked coordinates.
    fn selector(&self) -> Mat {
        let idx = self.unmasked();
        let mut s = Mat::zeros((idx.len(), self.len()));
        for (r, &i) in idx.iter().enumerate() {
            s[[r, i]] = 1.0;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let kept = self.0.iter().filter(|&&b| b).count();
        if self.is_empty() || kept == self.len() {
            return Err(Error::InvalidConfig("mask must leave a coordinate unmasked".into()));
        }
        if kept == 0 && self.len() > 1 {
            return Err(Error::InvalidConfig("mask must keep a coordinate when N > 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QnvpLayer {
    pub mask: Mask,
    pub s_net: MlpSpec,
    pub t_net: MlpSpec,
}

impl QnvpLayer {
    pub fn param_count(&self) -> usize {
        self.s_net.param_count() + self.t_net.param_count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QnvpModel {
    pub n_dof: usize,
    pub layers: Vec<QnvpLayer>,
}

impl QnvpModel {
    /// `depth` coupling layers with alternating masks starting with the even
    /// coordinates kept. `s` networks have the given hidden widths (tanh,
    /// optional layer norm); `t` networks are linear.
    pub fn new(n_dof: usize, depth: usize, s_hidden: Vec<usize>, layer_norm: bool) -> Result<Self> {
        if n_dof == 0 {
            return Err(Error::InvalidConfig("n_dof must be positive".into()));
        }
        if depth == 0 {
            return Err(Error::InvalidConfig("depth must be at least 1".into()));
        }
        let layers = (0..depth)
            .map(|l| {
                Ok(QnvpLayer {
                    mask: Mask::alternating(n_dof, l % 2 == 0),
                    s_net: MlpSpec::new(n_dof, 2 * n_dof, s_hidden.clone(), Activation::Tanh, layer_norm)?,
                    t_net: MlpSpec::linear(n_dof, n_dof)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = QnvpModel { n_dof, layers };
        m.validate()?;
        Ok(m)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("depth must be at least 1".into()));
        }
        for layer in &self.layers {
            layer.mask.validate()?;
            if layer.mask.len() != self.n_dof
                || layer.s_net.in_dim != self.n_dof
                || layer.s_net.out_dim != 2 * self.n_dof
                || layer.t_net.in_dim != self.n_dof
                || layer.t_net.out_dim != self.n_dof
            {
                return Err(Error::InvalidConfig("layer shapes do not match n_dof".into()));
            }
            if !layer.t_net.hidden_widths.is_empty() {
                return Err(Error::InvalidConfig("translation networks must be linear".into()));
            }
        }
        // A single layer necessarily leaves its kept coordinates alone; deeper
        // stacks must touch every coordinate.
        let covered = (0..self.n_dof).all(|i| self.layers.iter().any(|l| !l.mask.0[i]));
        if self.layers.len() > 1 && !covered {
            return Err(Error::InvalidConfig("every coordinate must be transformed by some layer".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(QnvpLayer::param_count).sum()
    }

    pub fn init(&self, scale: f64, rng: &mut Rng, params: &mut [f64]) -> Result<()> {
        let mut off = 0;
        for layer in &self.layers {
            let ns = layer.s_net.param_count();
            let nt = layer.t_net.param_count();
            nn::init_into(&layer.s_net, scale, rng, &mut params[off..off + ns])?;
            nn::init_into(&layer.t_net, scale, rng, &mut params[off + ns..off + ns + nt])?;
            off += ns + nt;
        }
        Ok(())
    }

    pub fn bind(&self, params: &[f64], tape: &crate::autodiff::Tape, trainable: bool) -> Vec<Var> {
        let mut out = Vec::new();
        let mut off = 0;
        for layer in &self.layers {
            let ns = layer.s_net.param_count();
            let nt = layer.t_net.param_count();
            out.extend(nn::bind(&layer.s_net, &params[off..off + ns], tape, trainable));
            out.extend(nn::bind(&layer.t_net, &params[off + ns..off + ns + nt], tape, trainable));
            off += ns + nt;
        }
        out
    }

    /// Flat offset of the `s`-network output bias for coordinate `coord`
    /// (`imag` selects the imaginary part) in layer `layer`.
    pub fn s_bias_offset(&self, layer: usize, coord: usize, imag: bool) -> usize {
        let base: usize = self.layers[..layer].iter().map(QnvpLayer::param_count).sum();
        let s = &self.layers[layer].s_net;
        let idx = if imag { self.n_dof + coord } else { coord };
        base + s
            .offset(s.hidden_widths.len(), nn::ParamKind::Bias, idx)
            .expect("bias slot")
    }

    /// Flat offset of the `t`-network bias for `coord` in `layer`.
    pub fn t_bias_offset(&self, layer: usize, coord: usize) -> usize {
        let l = &self.layers[layer];
        let base: usize =
            self.layers[..layer].iter().map(QnvpLayer::param_count).sum::<usize>() + l.s_net.param_count();
        base + l.t_net.offset(0, nn::ParamKind::Bias, coord).expect("bias slot")
    }

    /// Maps `y` through every layer; returns `(x, log det, phase)`.
    pub(crate) fn transport<T: Dual>(&self, w: &[Var], y: &T) -> Result<(T, T, T)> {
        let n = self.n_dof;
        let mut x = y.clone();
        let mut log_det: Option<T> = None;
        let mut phase: Option<T> = None;
        let mut wi = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            let ns = layer.s_net.layout().len();
            let nt = layer.t_net.layout().len();
            let ws = &w[wi..wi + ns];
            let wt = &w[wi + ns..wi + ns + nt];
            wi += ns + nt;

            let tape = x.tape();
            let keep = tape.constant(layer.mask.as_row());
            let sel = tape.constant(layer.mask.selector());
            let scatter = tape.constant(layer.mask.selector().t().to_owned());

            let ym = x.mul_var(&keep);
            let raw = nn::apply(&layer.s_net, ws, &ym);
            let re = raw.cols(0, n).add_scalar(1.0).matmul_t(&sel);
            let im = raw.cols(n, n).matmul_t(&sel);
            let mag2 = re.square().add(&im.square());
            check_pinch(li, &layer.mask, mag2.primal())?;
            let t = nn::apply(&layer.t_net, wt, &ym).matmul_t(&sel);
            let yu = x.matmul_t(&sel);
            let moved = yu.mul(&mag2).add(&t);
            x = ym.add(&moved.matmul_t(&scatter));

            let ld = mag2.ln().sum_cols();
            let ph = im.atan2(&re).sum_cols();
            log_det = Some(match log_det {
                Some(acc) => acc.add(&ld),
                None => ld,
            });
            phase = Some(match phase {
                Some(acc) => acc.add(&ph),
                None => ph,
            });
        }
        Ok((x, log_det.expect("depth >= 1"), phase.expect("depth >= 1")))
    }
}

impl QnvpModel {
    /// Exact inverse, layer by layer in reverse order: the kept coordinates
    /// pass through, so `s` and `t` are known and `y_u = (x_u − t_u)/|s_u|²`.
    pub(crate) fn inverse(&self, w: &[Var], x: &Var) -> Result<Var> {
        let n = self.n_dof;
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut wi = 0;
        for layer in &self.layers {
            let ns = layer.s_net.layout().len();
            let nt = layer.t_net.layout().len();
            offsets.push((wi, ns, nt));
            wi += ns + nt;
        }
        let mut y = x.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let (wi, ns, nt) = offsets[li];
            let tape = y.tape().clone();
            let keep = tape.constant(layer.mask.as_row());
            let sel = tape.constant(layer.mask.selector());
            let scatter = tape.constant(layer.mask.selector().t().to_owned());
            let ym = y.mul(&keep);
            let raw = nn::apply(&layer.s_net, &w[wi..wi + ns], &ym);
            let re = raw.cols(0, n).add_scalar(1.0).matmul_t(&sel);
            let im = raw.cols(n, n).matmul_t(&sel);
            let mag2 = re.square().add(&im.square());
            check_pinch(li, &layer.mask, &mag2)?;
            let t = nn::apply(&layer.t_net, &w[wi + ns..wi + ns + nt], &ym).matmul_t(&sel);
            let yu = y.matmul_t(&sel).sub(&t).div(&mag2);
            y = ym.add(&yu.matmul_t(&scatter));
        }
        Ok(y)
    }
}

fn check_pinch(layer: usize, mask: &Mask, mag2: &Var) -> Result<()> {
    let idx = mask.unmasked();
    for row in mag2.value().rows() {
        for (c, &v) in row.iter().enumerate() {
            if !(v > SCALE_PINCH_EPS) {
                return Err(Error::ScalePinch {
                    layer,
                    coord: idx[c],
                    value: v,
                });
            }
        }
    }
    Ok(())
}
