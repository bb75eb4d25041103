//! Forward-mode jets layered over taped [`Var`]s.
//!
//! [`Dual`] is the numeric interface the networks, flows and potentials are
//! written against. It is implemented by
//!
//! * [`Var`]: plain (possibly taped) values,
//! * [`Jet<T>`]: value plus first derivatives along several directions,
//! * [`Jet2<T>`]: value plus first and second derivative along one direction.
//!
//! Jets nest (`Jet<Jet2<Var>>` etc.), which gives exact mixed derivatives of
//! any order the caller composes. Because every component is itself a taped
//! value, parameter gradients of those derivatives come from the tape.
//!
//! Derivative components are `Option`s; `None` means identically zero and
//! costs nothing.

use crate::autodiff::{Fun, Mat, Tape, Var};

pub trait Dual: Clone + Sized {
    /// Embeds a value that is constant along every jet direction.
    fn lift(v: Var) -> Self;
    /// Innermost value.
    fn primal(&self) -> &Var;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn scale(&self, c: f64) -> Self;
    fn add_scalar(&self, c: f64) -> Self;
    fn unary(&self, f: Fun) -> Self;
    /// `self · wᵀ`, linear in `self`.
    fn matmul_t(&self, w: &Var) -> Self;
    fn mul_var(&self, v: &Var) -> Self;
    fn add_var(&self, v: &Var) -> Self;
    fn sum_cols(&self) -> Self;
    fn cols(&self, start: usize, len: usize) -> Self;
    fn concat_cols(parts: &[Self]) -> Self;
    /// `atan2(self, x)` with `self` the imaginary part.
    fn atan2(&self, x: &Self) -> Self;

    fn tape(&self) -> Tape {
        self.primal().tape().clone()
    }

    /// True only when cheaply known to be identically zero.
    fn is_const_zero(&self) -> bool {
        false
    }

    fn constant(&self, m: Mat) -> Self {
        Self::lift(self.tape().constant(m))
    }

    fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    fn square(&self) -> Self {
        self.mul(self)
    }

    fn div(&self, o: &Self) -> Self {
        self.mul(&o.unary(Fun::Recip))
    }

    fn col(&self, j: usize) -> Self {
        self.cols(j, 1)
    }

    fn tanh(&self) -> Self {
        self.unary(Fun::Tanh)
    }

    fn exp(&self) -> Self {
        self.unary(Fun::Exp)
    }

    fn ln(&self) -> Self {
        self.unary(Fun::Ln)
    }

    fn sqrt(&self) -> Self {
        self.unary(Fun::Sqrt)
    }

    fn recip(&self) -> Self {
        self.unary(Fun::Recip)
    }
}

impl Dual for Var {
    fn lift(v: Var) -> Self {
        v
    }
    fn is_const_zero(&self) -> bool {
        Var::is_const_zero(self)
    }
    fn primal(&self) -> &Var {
        self
    }
    fn add(&self, o: &Self) -> Self {
        Var::add(self, o)
    }
    fn sub(&self, o: &Self) -> Self {
        Var::sub(self, o)
    }
    fn mul(&self, o: &Self) -> Self {
        Var::mul(self, o)
    }
    fn div(&self, o: &Self) -> Self {
        Var::div(self, o)
    }
    fn scale(&self, c: f64) -> Self {
        Var::scale(self, c)
    }
    fn add_scalar(&self, c: f64) -> Self {
        Var::add_scalar(self, c)
    }
    fn unary(&self, f: Fun) -> Self {
        Var::unary(self, f)
    }
    fn matmul_t(&self, w: &Var) -> Self {
        Var::matmul_t(self, w)
    }
    fn mul_var(&self, v: &Var) -> Self {
        Var::mul(self, v)
    }
    fn add_var(&self, v: &Var) -> Self {
        Var::add(self, v)
    }
    fn sum_cols(&self) -> Self {
        Var::sum_cols(self)
    }
    fn cols(&self, start: usize, len: usize) -> Self {
        Var::cols(self, start, len)
    }
    fn concat_cols(parts: &[Self]) -> Self {
        Var::concat_cols(parts)
    }
    fn atan2(&self, x: &Self) -> Self {
        Var::atan2(self, x)
    }
}

/// Derivatives of the elementwise functions, expressed in `T` so that they
/// can themselves be differentiated. `fx` is `f(x)`.
fn first_deriv<T: Dual>(f: Fun, x: &T, fx: &T) -> T {
    match f {
        Fun::Tanh => fx.square().neg().add_scalar(1.0),
        Fun::Exp => fx.clone(),
        Fun::Ln => x.recip(),
        Fun::Sqrt => fx.recip().scale(0.5),
        Fun::Rsqrt => fx.square().mul(fx).scale(-0.5),
        Fun::Sin => x.unary(Fun::Cos),
        Fun::Cos => x.unary(Fun::Sin).neg(),
        Fun::Recip => fx.square().neg(),
    }
}

fn second_deriv<T: Dual>(f: Fun, fx: &T, d1: &T) -> T {
    match f {
        Fun::Tanh => fx.mul(d1).scale(-2.0),
        Fun::Exp => fx.clone(),
        Fun::Ln => d1.square().neg(),
        // d/dx (0.5/sqrt x) = -0.25 x^{-3/2} = -d1^3 * 2
        Fun::Sqrt => d1.square().mul(d1).scale(-2.0),
        // d/dx (-0.5 x^{-3/2}) = 0.75 x^{-5/2}
        Fun::Rsqrt => {
            let f2 = fx.square();
            f2.mul(&f2).mul(fx).scale(0.75)
        }
        Fun::Sin => fx.neg(),
        Fun::Cos => fx.neg(),
        Fun::Recip => fx.square().mul(fx).scale(2.0),
    }
}

fn opt_add<T: Dual>(a: &Option<T>, b: &Option<T>) -> Option<T> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.add(b)),
        (Some(a), None) => Some(a.clone()),
        (None, Some(b)) => Some(b.clone()),
        (None, None) => None,
    }
}

fn opt_sub<T: Dual>(a: &Option<T>, b: &Option<T>) -> Option<T> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.sub(b)),
        (Some(a), None) => Some(a.clone()),
        (None, Some(b)) => Some(b.neg()),
        (None, None) => None,
    }
}

fn opt_mul<T: Dual>(a: &Option<T>, f: &T) -> Option<T> {
    a.as_ref().map(|a| a.mul(f))
}

fn opt_map<T: Dual>(a: &Option<T>, f: impl Fn(&T) -> T) -> Option<T> {
    a.as_ref().map(f)
}

/// `T`-level zero that broadcasts against anything.
fn zero_like<T: Dual>(t: &T) -> T {
    t.constant(Mat::zeros((1, 1)))
}

fn unwrap_or_zero<T: Dual>(a: &Option<T>, like: &T) -> T {
    a.clone().unwrap_or_else(|| zero_like(like))
}

/// Drops components that became constant zeros (for `Var` components).
fn prune<T: Dual>(a: Option<T>) -> Option<T> {
    match a {
        Some(v) if is_zero(&v) => None,
        other => other,
    }
}

fn is_zero<T: Dual>(v: &T) -> bool {
    v.is_const_zero()
}

/// Concatenation where some parts may be zero: zeros are materialised with
/// the column width of the matching value part.
fn concat_opt<T: Dual>(parts: &[Option<T>], values: &[T]) -> Option<T> {
    if parts.iter().all(Option::is_none) {
        return None;
    }
    let filled: Vec<T> = parts
        .iter()
        .zip(values)
        .map(|(p, v)| match p {
            Some(p) => p.clone(),
            None => v.constant(Mat::zeros((1, v.primal().shape().1))),
        })
        .collect();
    Some(T::concat_cols(&filled))
}

/// First-order jet along `d.len()` directions.
#[derive(Clone)]
pub struct Jet<T> {
    pub v: T,
    pub d: Vec<Option<T>>,
}

impl<T: Dual> Jet<T> {
    pub fn constant_n(v: T, n: usize) -> Self {
        Jet {
            v,
            d: vec![None; n],
        }
    }

    /// Seeds `v` (shape `B x n`) with the unit tangent `e_k` along
    /// direction `k`, so that `d[k]` carries `∂/∂v_k`.
    pub fn seed_coords(v: T) -> Self {
        let n = v.primal().shape().1;
        let d = (0..n)
            .map(|k| {
                let mut e = Mat::zeros((1, n));
                e[[0, k]] = 1.0;
                Some(v.constant(e))
            })
            .collect();
        Jet { v, d }
    }

    pub fn n_dirs(&self) -> usize {
        self.d.len()
    }

    /// Tangent along `k`, materialising zeros as a broadcastable constant.
    pub fn tangent(&self, k: usize) -> T {
        unwrap_or_zero(&self.d[k], &self.v)
    }
}

impl<T: Dual> Dual for Jet<T> {
    fn lift(v: Var) -> Self {
        // Direction count is fixed by whichever operand carries tangents; an
        // empty list acts as "all zero" and is widened on demand.
        Jet {
            v: T::lift(v),
            d: Vec::new(),
        }
    }

    fn primal(&self) -> &Var {
        self.v.primal()
    }

    fn is_const_zero(&self) -> bool {
        self.d.iter().all(Option::is_none) && self.v.is_const_zero()
    }

    fn add(&self, o: &Self) -> Self {
        let n = self.d.len().max(o.d.len());
        Jet {
            v: self.v.add(&o.v),
            d: (0..n).map(|k| opt_add(&get(&self.d, k), &get(&o.d, k))).collect(),
        }
    }

    fn sub(&self, o: &Self) -> Self {
        let n = self.d.len().max(o.d.len());
        Jet {
            v: self.v.sub(&o.v),
            d: (0..n).map(|k| opt_sub(&get(&self.d, k), &get(&o.d, k))).collect(),
        }
    }

    fn mul(&self, o: &Self) -> Self {
        let n = self.d.len().max(o.d.len());
        Jet {
            v: self.v.mul(&o.v),
            d: (0..n)
                .map(|k| {
                    opt_add(
                        &opt_mul(&get(&self.d, k), &o.v),
                        &opt_mul(&get(&o.d, k), &self.v),
                    )
                })
                .collect(),
        }
    }

    fn scale(&self, c: f64) -> Self {
        Jet {
            v: self.v.scale(c),
            d: self.d.iter().map(|a| opt_map(a, |a| a.scale(c))).collect(),
        }
    }

    fn add_scalar(&self, c: f64) -> Self {
        Jet {
            v: self.v.add_scalar(c),
            d: self.d.clone(),
        }
    }

    fn unary(&self, f: Fun) -> Self {
        let fx = self.v.unary(f);
        if self.d.iter().all(Option::is_none) {
            return Jet {
                v: fx,
                d: self.d.clone(),
            };
        }
        let d1 = first_deriv(f, &self.v, &fx);
        Jet {
            d: self.d.iter().map(|a| opt_mul(a, &d1)).collect(),
            v: fx,
        }
    }

    fn matmul_t(&self, w: &Var) -> Self {
        Jet {
            v: self.v.matmul_t(w),
            d: self
                .d
                .iter()
                .map(|a| prune(opt_map(a, |a| a.matmul_t(w))))
                .collect(),
        }
    }

    fn mul_var(&self, m: &Var) -> Self {
        Jet {
            v: self.v.mul_var(m),
            d: self.d.iter().map(|a| prune(opt_map(a, |a| a.mul_var(m)))).collect(),
        }
    }

    fn add_var(&self, m: &Var) -> Self {
        Jet {
            v: self.v.add_var(m),
            d: self.d.clone(),
        }
    }

    fn sum_cols(&self) -> Self {
        Jet {
            v: self.v.sum_cols(),
            d: self.d.iter().map(|a| opt_map(a, T::sum_cols)).collect(),
        }
    }

    fn cols(&self, start: usize, len: usize) -> Self {
        Jet {
            v: self.v.cols(start, len),
            d: self
                .d
                .iter()
                .map(|a| prune(opt_map(a, |a| a.cols(start, len))))
                .collect(),
        }
    }

    fn concat_cols(parts: &[Self]) -> Self {
        let n = parts.iter().map(|p| p.d.len()).max().unwrap_or(0);
        let values: Vec<T> = parts.iter().map(|p| p.v.clone()).collect();
        let d = (0..n)
            .map(|k| {
                let comps: Vec<Option<T>> = parts.iter().map(|p| get(&p.d, k)).collect();
                concat_opt(&comps, &values)
            })
            .collect();
        Jet {
            v: T::concat_cols(&values),
            d,
        }
    }

    fn atan2(&self, x: &Self) -> Self {
        let n = self.d.len().max(x.d.len());
        let v = self.v.atan2(&x.v);
        let r2 = self.v.square().add(&x.v.square());
        let inv = r2.recip();
        let d = (0..n)
            .map(|k| {
                let dy = get(&self.d, k);
                let dx = get(&x.d, k);
                // (x dy - y dx) / r²
                let num = opt_sub(&opt_mul(&dy, &x.v), &opt_mul(&dx, &self.v));
                opt_mul(&num, &inv)
            })
            .collect();
        Jet { v, d }
    }
}

fn get<T: Clone>(d: &[Option<T>], k: usize) -> Option<T> {
    d.get(k).cloned().flatten()
}

/// Value plus first and second derivative along a single direction.
#[derive(Clone)]
pub struct Jet2<T> {
    pub v: T,
    pub d1: Option<T>,
    pub d2: Option<T>,
}

impl<T: Dual> Jet2<T> {
    /// Seeds a scalar input: `d1 = 1`, `d2 = 0`.
    pub fn seed(v: T) -> Self {
        let one = v.constant(Mat::ones((1, 1)));
        Jet2 {
            v,
            d1: Some(one),
            d2: None,
        }
    }

    pub fn first(&self) -> T {
        unwrap_or_zero(&self.d1, &self.v)
    }

    pub fn second(&self) -> T {
        unwrap_or_zero(&self.d2, &self.v)
    }
}

impl<T: Dual> Dual for Jet2<T> {
    fn lift(v: Var) -> Self {
        Jet2 {
            v: T::lift(v),
            d1: None,
            d2: None,
        }
    }

    fn primal(&self) -> &Var {
        self.v.primal()
    }

    fn is_const_zero(&self) -> bool {
        self.d1.is_none() && self.d2.is_none() && self.v.is_const_zero()
    }

    fn add(&self, o: &Self) -> Self {
        Jet2 {
            v: self.v.add(&o.v),
            d1: opt_add(&self.d1, &o.d1),
            d2: opt_add(&self.d2, &o.d2),
        }
    }

    fn sub(&self, o: &Self) -> Self {
        Jet2 {
            v: self.v.sub(&o.v),
            d1: opt_sub(&self.d1, &o.d1),
            d2: opt_sub(&self.d2, &o.d2),
        }
    }

    fn mul(&self, o: &Self) -> Self {
        // (ab)'' = a''b + 2a'b' + ab''
        let cross = match (&self.d1, &o.d1) {
            (Some(a), Some(b)) => Some(a.mul(b).scale(2.0)),
            _ => None,
        };
        Jet2 {
            v: self.v.mul(&o.v),
            d1: opt_add(&opt_mul(&self.d1, &o.v), &opt_mul(&o.d1, &self.v)),
            d2: opt_add(
                &opt_add(&opt_mul(&self.d2, &o.v), &opt_mul(&o.d2, &self.v)),
                &cross,
            ),
        }
    }

    fn scale(&self, c: f64) -> Self {
        Jet2 {
            v: self.v.scale(c),
            d1: opt_map(&self.d1, |a| a.scale(c)),
            d2: opt_map(&self.d2, |a| a.scale(c)),
        }
    }

    fn add_scalar(&self, c: f64) -> Self {
        Jet2 {
            v: self.v.add_scalar(c),
            d1: self.d1.clone(),
            d2: self.d2.clone(),
        }
    }

    fn unary(&self, f: Fun) -> Self {
        let fx = self.v.unary(f);
        if self.d1.is_none() && self.d2.is_none() {
            return Jet2 {
                v: fx,
                d1: None,
                d2: None,
            };
        }
        let g1 = first_deriv(f, &self.v, &fx);
        let d1 = opt_mul(&self.d1, &g1);
        let curv = self.d1.as_ref().map(|a| {
            let g2 = second_deriv(f, &fx, &g1);
            a.square().mul(&g2)
        });
        let d2 = opt_add(&opt_mul(&self.d2, &g1), &curv);
        Jet2 { v: fx, d1, d2 }
    }

    fn matmul_t(&self, w: &Var) -> Self {
        Jet2 {
            v: self.v.matmul_t(w),
            d1: prune(opt_map(&self.d1, |a| a.matmul_t(w))),
            d2: prune(opt_map(&self.d2, |a| a.matmul_t(w))),
        }
    }

    fn mul_var(&self, m: &Var) -> Self {
        Jet2 {
            v: self.v.mul_var(m),
            d1: prune(opt_map(&self.d1, |a| a.mul_var(m))),
            d2: prune(opt_map(&self.d2, |a| a.mul_var(m))),
        }
    }

    fn add_var(&self, m: &Var) -> Self {
        Jet2 {
            v: self.v.add_var(m),
            d1: self.d1.clone(),
            d2: self.d2.clone(),
        }
    }

    fn sum_cols(&self) -> Self {
        Jet2 {
            v: self.v.sum_cols(),
            d1: opt_map(&self.d1, T::sum_cols),
            d2: opt_map(&self.d2, T::sum_cols),
        }
    }

    fn cols(&self, start: usize, len: usize) -> Self {
        Jet2 {
            v: self.v.cols(start, len),
            d1: prune(opt_map(&self.d1, |a| a.cols(start, len))),
            d2: prune(opt_map(&self.d2, |a| a.cols(start, len))),
        }
    }

    fn concat_cols(parts: &[Self]) -> Self {
        let values: Vec<T> = parts.iter().map(|p| p.v.clone()).collect();
        let d1: Vec<Option<T>> = parts.iter().map(|p| p.d1.clone()).collect();
        let d2: Vec<Option<T>> = parts.iter().map(|p| p.d2.clone()).collect();
        Jet2 {
            v: T::concat_cols(&values),
            d1: concat_opt(&d1, &values),
            d2: concat_opt(&d2, &values),
        }
    }

    fn atan2(&self, x: &Self) -> Self {
        // θ = atan2(b, a) with b = self, a = x:
        // θ'  = (a b' − b a') / r²
        // θ'' = (a b'' − b a'') / r² − (a b' − b a')(2 a a' + 2 b b') / r⁴
        let (a, b) = (&x.v, &self.v);
        let v = b.atan2(a);
        if self.d1.is_none() && self.d2.is_none() && x.d1.is_none() && x.d2.is_none() {
            return Jet2 {
                v,
                d1: None,
                d2: None,
            };
        }
        let inv = a.square().add(&b.square()).recip();
        let num1 = opt_sub(&opt_mul(&self.d1, a), &opt_mul(&x.d1, b));
        let num2 = opt_sub(&opt_mul(&self.d2, a), &opt_mul(&x.d2, b));
        let dr2 = opt_add(&opt_mul(&x.d1, a), &opt_mul(&self.d1, b)).map(|t| t.scale(2.0));
        let d1 = opt_mul(&num1, &inv);
        let corr = match (&d1, &dr2) {
            (Some(t1), Some(dr)) => Some(t1.mul(dr).mul(&inv)),
            _ => None,
        };
        let d2 = opt_sub(&opt_mul(&num2, &inv), &corr);
        Jet2 { v, d1, d2 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar(t: &Tape, x: f64) -> Var {
        t.constant(array![[x]])
    }

    #[test]
    fn second_derivative_of_sin_at_zero() {
        let t = Tape::no_grad();
        let x = Jet2::seed(scalar(&t, 0.0));
        let y = x.unary(Fun::Sin);
        assert_eq!(y.second().item(), 0.0);
        assert!((y.first().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn jet2_composition_matches_closed_form() {
        // f(x) = ln(1 + x²) · tanh(x) / sqrt(2 + x)
        let f = |x: f64| (1.0 + x * x).ln() * x.tanh() / (2.0 + x).sqrt();
        let t = Tape::no_grad();
        let x0 = 0.37;
        let x = Jet2::seed(scalar(&t, x0));
        let y = x
            .square()
            .add_scalar(1.0)
            .ln()
            .mul(&x.tanh())
            .div(&x.add_scalar(2.0).sqrt());
        let h = 1e-4;
        let d1 = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
        let d2 = (f(x0 + h) - 2.0 * f(x0) + f(x0 - h)) / (h * h);
        assert!((y.v.item() - f(x0)).abs() < 1e-15);
        assert!((y.first().item() - d1).abs() < 1e-8);
        assert!((y.second().item() - d2).abs() < 1e-6);
    }

    #[test]
    fn jet2_atan2_matches_finite_differences() {
        let f = |x: f64| (x.sin() + 0.3).atan2(x * x - 0.5);
        let t = Tape::no_grad();
        let x0 = 0.8;
        let x = Jet2::seed(scalar(&t, x0));
        let y = x.unary(Fun::Sin).add_scalar(0.3).atan2(&x.square().add_scalar(-0.5));
        let h = 1e-4;
        let d1 = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
        let d2 = (f(x0 + h) - 2.0 * f(x0) + f(x0 - h)) / (h * h);
        assert!((y.first().item() - d1).abs() < 1e-8);
        assert!((y.second().item() - d2).abs() < 1e-6);
    }

    #[test]
    fn multi_direction_jet_gives_gradient() {
        let t = Tape::no_grad();
        let x = Jet::seed_coords(t.constant(array![[1.0, 2.0]]));
        let y = x.square().sum_cols();
        assert_eq!(y.tangent(0).item(), 2.0);
        assert_eq!(y.tangent(1).item(), 4.0);
    }

    #[test]
    fn nested_jets_give_third_derivative() {
        // d/dx of (tanh)'' = tanh''' ; check via Jet<Jet2<Var>>
        let t = Tape::no_grad();
        let x0 = 0.4;
        let inner = Jet2::seed(scalar(&t, x0));
        let outer = Jet {
            v: inner,
            d: vec![Some(Jet2::lift(scalar(&t, 1.0)))],
        };
        let y = outer.tanh();
        let th = x0.tanh();
        let s = 1.0 - th * th;
        let third = -2.0 * s * s + 4.0 * th * th * s;
        let got = y.d[0].as_ref().unwrap().second().item();
        assert!((got - third).abs() < 1e-12, "{got} vs {third}");
    }

    #[test]
    fn parameter_gradient_through_jet_derivative() {
        // d/dw of d/dx tanh(w x) = d/dw [w (1 - tanh²(w x))]
        let tape = Tape::new();
        let w = tape.leaf(array![[0.7]]);
        let x0 = 0.3;
        let x = Jet2::seed(tape.constant(array![[x0]]));
        let y = x.mul_var(&w).tanh();
        let g = tape.backward(&y.first());
        let f = |w: f64| w * (1.0 - (w * x0).tanh().powi(2));
        let h = 1e-6;
        let fd = (f(0.7 + h) - f(0.7 - h)) / (2.0 * h);
        assert!((g.wrt(&w).unwrap()[[0, 0]] - fd).abs() < 1e-8);
    }
}
