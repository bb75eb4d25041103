//! Reverse-mode differentiation over batched 2-D tensors.
//!
//! A [`Tape`] records every operation whose inputs depend on a trainable
//! leaf. Values are `B x k` matrices (one row per sample); binary
//! elementwise operations broadcast along singleton rows or columns, and the
//! backward pass sums gradients back down to the operand shape.
//!
//! Operations on constants (no trainable ancestor) are evaluated eagerly and
//! never recorded, so forward-mode tangents that are data independent cost
//! nothing at backward time. A tape created with [`Tape::no_grad`] records
//! nothing at all.
//!
//! Higher derivatives are obtained by composing recorded primitives in the
//! forward-mode jets of [`crate::dual`]; the tape itself is first order.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

type BackwardFn = Box<dyn Fn(&Mat, &mut Grads)>;

struct Node {
    backward: Option<BackwardFn>,
}

struct TapeInner {
    nodes: Vec<Node>,
    recording: bool,
}

/// Shared handle to an operation record.
#[derive(Clone)]
pub struct Tape(Rc<RefCell<TapeInner>>);

impl Tape {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner {
            nodes: Vec::new(),
            recording: true,
        })))
    }

    /// A tape that never records; every `Var` created from it is a constant.
    pub fn no_grad() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner {
            nodes: Vec::new(),
            recording: false,
        })))
    }

    pub fn is_recording(&self) -> bool {
        self.0.borrow().recording
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Mat) -> Var {
        let id = {
            let mut inner = self.0.borrow_mut();
            if inner.recording {
                inner.nodes.push(Node { backward: None });
                Some(inner.nodes.len() - 1)
            } else {
                None
            }
        };
        Var {
            tape: self.clone(),
            id,
            val: Rc::new(value),
        }
    }

    pub fn constant(&self, value: Mat) -> Var {
        Var {
            tape: self.clone(),
            id: None,
            val: Rc::new(value),
        }
    }

    pub fn scalar(&self, c: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), c))
    }

    fn push(&self, backward: BackwardFn) -> usize {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(Node {
            backward: Some(backward),
        });
        inner.nodes.len() - 1
    }

    /// Backpropagates from a `1 x 1` output.
    ///
    /// Panics if `out` is not a scalar.
    pub fn backward(&self, out: &Var) -> Grads {
        assert_eq!(out.shape(), (1, 1), "backward needs a scalar output");
        let inner = self.0.borrow();
        let mut grads = Grads {
            g: (0..inner.nodes.len()).map(|_| None).collect(),
        };
        let Some(root) = out.id else {
            return grads;
        };
        grads.g[root] = Some(Mat::ones((1, 1)));
        for i in (0..=root).rev() {
            let Some(node_bw) = inner.nodes[i].backward.as_ref() else {
                continue;
            };
            if let Some(g) = grads.g[i].take() {
                node_bw(&g, &mut grads);
            }
        }
        grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    g: Vec<Option<Mat>>,
}

impl Grads {
    fn accum(&mut self, id: Option<usize>, m: Mat) {
        let Some(id) = id else { return };
        match &mut self.g[id] {
            Some(acc) => *acc += &m,
            slot @ None => *slot = Some(m),
        }
    }

    /// Gradient with respect to a leaf, or `None` if the output does not
    /// depend on it.
    pub fn wrt(&self, v: &Var) -> Option<&Mat> {
        v.id.and_then(|id| self.g[id].as_ref())
    }
}

/// Differentiable matrix value living on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: Option<usize>,
    val: Rc<Mat>,
}

/// Elementwise scalar functions with known derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fun {
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Rsqrt,
    Sin,
    Cos,
    Recip,
}

impl Fun {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Fun::Tanh => x.tanh(),
            Fun::Exp => x.exp(),
            Fun::Ln => x.ln(),
            Fun::Sqrt => x.sqrt(),
            Fun::Rsqrt => 1.0 / x.sqrt(),
            Fun::Sin => x.sin(),
            Fun::Cos => x.cos(),
            Fun::Recip => 1.0 / x,
        }
    }

    /// First derivative given the input `x` and output `fx`.
    pub fn deriv(self, x: f64, fx: f64) -> f64 {
        match self {
            Fun::Tanh => 1.0 - fx * fx,
            Fun::Exp => fx,
            Fun::Ln => 1.0 / x,
            Fun::Sqrt => 0.5 / fx,
            Fun::Rsqrt => -0.5 * fx * fx * fx,
            Fun::Sin => x.cos(),
            Fun::Cos => -x.sin(),
            Fun::Recip => -fx * fx,
        }
    }
}

/// Sums a broadcast gradient back to the operand shape.
fn reduce_to(g: Mat, shape: (usize, usize)) -> Mat {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn zip_broadcast(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    if a.dim() == b.dim() {
        if let (Some(x), Some(y)) = (a.as_slice(), b.as_slice()) {
            let v: Vec<f64> = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
            return Mat::from_shape_vec(a.dim(), v).expect("same shape");
        }
    }
    if b.len() == 1 && !a.is_empty() {
        let c = b[[0, 0]];
        return a.mapv(|x| f(x, c));
    }
    if a.len() == 1 {
        let c = a[[0, 0]];
        return b.mapv(|y| f(c, y));
    }
    let shape = broadcast_shape(a.dim(), b.dim());
    let av = a.broadcast(shape).expect("broadcast");
    let bv = b.broadcast(shape).expect("broadcast");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

impl Var {
    pub fn value(&self) -> &Mat {
        &self.val
    }

    pub fn shape(&self) -> (usize, usize) {
        self.val.dim()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Value of a `1 x 1` var.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.val[[0, 0]]
    }

    /// True for an untracked value that is identically zero.
    pub fn is_const_zero(&self) -> bool {
        self.id.is_none() && self.val.iter().all(|&v| v == 0.0)
    }

    pub fn detach(&self) -> Var {
        Var {
            tape: self.tape.clone(),
            id: None,
            val: self.val.clone(),
        }
    }

    fn wrap(&self, val: Mat, parents: &[&Var], backward: impl Fn(&Mat, &mut Grads) + 'static) -> Var {
        let tracked = parents.iter().any(|p| p.id.is_some()) && self.tape.is_recording();
        let id = if tracked {
            Some(self.tape.push(Box::new(backward)))
        } else {
            None
        };
        Var {
            tape: self.tape.clone(),
            id,
            val: Rc::new(val),
        }
    }

    pub fn add(&self, o: &Var) -> Var {
        let val = zip_broadcast(&self.val, &o.val, |a, b| a + b);
        let (ia, ib) = (self.id, o.id);
        let (sa, sb) = (self.shape(), o.shape());
        self.wrap(val, &[self, o], move |g, gr| {
            gr.accum(ia, reduce_to(g.clone(), sa));
            gr.accum(ib, reduce_to(g.clone(), sb));
        })
    }

    pub fn sub(&self, o: &Var) -> Var {
        let val = zip_broadcast(&self.val, &o.val, |a, b| a - b);
        let (ia, ib) = (self.id, o.id);
        let (sa, sb) = (self.shape(), o.shape());
        self.wrap(val, &[self, o], move |g, gr| {
            gr.accum(ia, reduce_to(g.clone(), sa));
            if ib.is_some() {
                gr.accum(ib, reduce_to(-g, sb));
            }
        })
    }

    pub fn mul(&self, o: &Var) -> Var {
        let val = zip_broadcast(&self.val, &o.val, |a, b| a * b);
        let (ia, ib) = (self.id, o.id);
        let (va, vb) = (self.val.clone(), o.val.clone());
        self.wrap(val, &[self, o], move |g, gr| {
            if ia.is_some() {
                gr.accum(ia, reduce_to(zip_broadcast(g, &vb, |x, y| x * y), va.dim()));
            }
            if ib.is_some() {
                gr.accum(ib, reduce_to(zip_broadcast(g, &va, |x, y| x * y), vb.dim()));
            }
        })
    }

    pub fn div(&self, o: &Var) -> Var {
        let val = zip_broadcast(&self.val, &o.val, |a, b| a / b);
        let (ia, ib) = (self.id, o.id);
        let (va, vb) = (self.val.clone(), o.val.clone());
        let out = Rc::new(val.clone());
        self.wrap(val, &[self, o], move |g, gr| {
            if ia.is_some() {
                gr.accum(ia, reduce_to(zip_broadcast(g, &vb, |x, y| x / y), va.dim()));
            }
            if ib.is_some() {
                let q = zip_broadcast(&out, &vb, |q, b| -q / b);
                gr.accum(ib, reduce_to(zip_broadcast(g, &q, |x, y| x * y), vb.dim()));
            }
        })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        let val = self.val.mapv(|v| v * c);
        let ia = self.id;
        self.wrap(val, &[self], move |g, gr| gr.accum(ia, g * c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let val = self.val.mapv(|v| v + c);
        let ia = self.id;
        self.wrap(val, &[self], move |g, gr| gr.accum(ia, g.clone()))
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn unary(&self, f: Fun) -> Var {
        let val = self.val.mapv(|v| f.eval(v));
        if self.id.is_none() || !self.tape.is_recording() {
            return self.tape.constant(val);
        }
        let mut d = Mat::zeros(val.dim());
        Zip::from(&mut d)
            .and(&*self.val)
            .and(&val)
            .for_each(|d, &x, &fx| *d = f.deriv(x, fx));
        let ia = self.id;
        self.wrap(val, &[self], move |g, gr| gr.accum(ia, g * &d))
    }

    pub fn tanh(&self) -> Var {
        self.unary(Fun::Tanh)
    }

    pub fn exp(&self) -> Var {
        self.unary(Fun::Exp)
    }

    pub fn ln(&self) -> Var {
        self.unary(Fun::Ln)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Fun::Sqrt)
    }

    pub fn recip(&self) -> Var {
        self.unary(Fun::Recip)
    }

    /// `self · wᵀ` for `self: B x k`, `w: m x k`.
    pub fn matmul_t(&self, w: &Var) -> Var {
        let val = self.val.dot(&w.val.t());
        let (ia, iw) = (self.id, w.id);
        let (va, vw) = (self.val.clone(), w.val.clone());
        self.wrap(val, &[self, w], move |g, gr| {
            if ia.is_some() {
                gr.accum(ia, g.dot(&*vw));
            }
            if iw.is_some() {
                gr.accum(iw, g.t().dot(&*va));
            }
        })
    }

    /// Row sums, `B x k -> B x 1`.
    pub fn sum_cols(&self) -> Var {
        let val = self.val.sum_axis(Axis(1)).insert_axis(Axis(1));
        let ia = self.id;
        let shape = self.shape();
        self.wrap(val, &[self], move |g, gr| {
            gr.accum(ia, g.broadcast(shape).expect("broadcast").to_owned())
        })
    }

    /// Column sums over the batch, `B x k -> 1 x k`.
    pub fn sum_rows(&self) -> Var {
        let val = self.val.sum_axis(Axis(0)).insert_axis(Axis(0));
        let ia = self.id;
        let shape = self.shape();
        self.wrap(val, &[self], move |g, gr| {
            gr.accum(ia, g.broadcast(shape).expect("broadcast").to_owned())
        })
    }

    /// Mean of all entries as a `1 x 1` var.
    pub fn mean_all(&self) -> Var {
        let n = self.val.len() as f64;
        self.sum_rows().sum_cols().scale(1.0 / n)
    }

    pub fn cols(&self, start: usize, len: usize) -> Var {
        let val = self.val.slice(s![.., start..start + len]).to_owned();
        let ia = self.id;
        let shape = self.shape();
        self.wrap(val, &[self], move |g, gr| {
            let mut full = Mat::zeros(shape);
            full.slice_mut(s![.., start..start + len]).assign(g);
            gr.accum(ia, full);
        })
    }

    pub fn col(&self, j: usize) -> Var {
        self.cols(j, 1)
    }

    /// Repeats a single-row var to `rows` rows.
    pub fn broadcast_rows(&self, rows: usize) -> Var {
        if self.shape().0 == rows {
            return self.clone();
        }
        let shape = (rows, self.shape().1);
        let val = self.val.broadcast(shape).expect("broadcast").to_owned();
        let ia = self.id;
        self.wrap(val, &[self], move |g, gr| {
            gr.accum(ia, g.sum_axis(Axis(0)).insert_axis(Axis(0)))
        })
    }

    /// Column-wise concatenation; single-row parts are broadcast to the
    /// largest row count.
    pub fn concat_cols(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = parts.iter().map(|p| p.shape().0).max().unwrap_or(1);
        let parts: Vec<Var> = parts.iter().map(|p| p.broadcast_rows(rows)).collect();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape().1).collect();
        let total: usize = widths.iter().sum();
        let mut val = Mat::zeros((rows, total));
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            val.slice_mut(s![.., off..off + w]).assign(p.value());
            off += w;
        }
        let ids: Vec<Option<usize>> = parts.iter().map(|p| p.id).collect();
        let refs: Vec<&Var> = parts.iter().collect();
        parts[0].wrap(val, &refs, move |g, gr| {
            let mut off = 0;
            for (&id, &w) in ids.iter().zip(&widths) {
                if id.is_some() {
                    gr.accum(id, g.slice(s![.., off..off + w]).to_owned());
                }
                off += w;
            }
        })
    }

    /// Elementwise `atan2(self, x)`; `self` is the imaginary part.
    pub fn atan2(&self, x: &Var) -> Var {
        let val = zip_broadcast(&self.val, &x.val, f64::atan2);
        let (iy, ix) = (self.id, x.id);
        let (vy, vx) = (self.val.clone(), x.val.clone());
        self.wrap(val, &[self, x], move |g, gr| {
            let r2 = zip_broadcast(&vy, &vx, |y, x| y * y + x * x);
            if iy.is_some() {
                let d = zip_broadcast(&vx, &r2, |x, r| x / r);
                gr.accum(iy, reduce_to(zip_broadcast(g, &d, |a, b| a * b), vy.dim()));
            }
            if ix.is_some() {
                let d = zip_broadcast(&vy, &r2, |y, r| -y / r);
                gr.accum(ix, reduce_to(zip_broadcast(g, &d, |a, b| a * b), vx.dim()));
            }
        })
    }

    /// Row-wise linear solve `A_b u_b = rhs_b`, where row `b` of `a_cols[k]`
    /// holds row `k` of `A_b` (that is, `A_b[k][i] = a_cols[k][b, i]`).
    ///
    /// With `a_cols[k]` the tangent of `x` along `y_k`, `A_b` is the
    /// transposed Jacobian `(∂x/∂y)ᵀ`, so this turns `y`-gradients into
    /// `x`-gradients. Singular rows produce NaN.
    pub fn solve_rows(a_cols: &[Var], rhs: &Var) -> Var {
        let n = a_cols.len();
        let rows = a_cols
            .iter()
            .map(|a| a.shape().0)
            .chain(std::iter::once(rhs.shape().0))
            .max()
            .unwrap_or(1);
        assert_eq!(rhs.shape().1, n);
        let a_full: Vec<Mat> = a_cols
            .iter()
            .map(|a| {
                assert_eq!(a.shape().1, n);
                a.value().broadcast((rows, n)).expect("broadcast").to_owned()
            })
            .collect();
        let r_full = rhs.value().broadcast((rows, n)).expect("broadcast").to_owned();
        let build = |b: usize| -> DMatrix<f64> {
            DMatrix::from_fn(n, n, |k, i| a_full[k][[b, i]])
        };
        let mut sol = Mat::zeros((rows, n));
        let mut mats = Vec::with_capacity(rows);
        for b in 0..rows {
            let a = build(b);
            let r = DVector::from_fn(n, |k, _| r_full[[b, k]]);
            match a.clone().lu().solve(&r) {
                Some(u) => {
                    for i in 0..n {
                        sol[[b, i]] = u[i];
                    }
                }
                None => sol.row_mut(b).fill(f64::NAN),
            }
            mats.push(a);
        }
        let a_ids: Vec<Option<usize>> = a_cols.iter().map(|a| a.id).collect();
        let a_shapes: Vec<(usize, usize)> = a_cols.iter().map(|a| a.shape()).collect();
        let r_id = rhs.id;
        let r_shape = rhs.shape();
        let sol_rc = Rc::new(sol.clone());
        let mut parents: Vec<&Var> = a_cols.iter().collect();
        parents.push(rhs);
        rhs.wrap(sol, &parents, move |g, gr| {
            // ḡ_rhs = A⁻ᵀ ū ; Ā = −ḡ_rhs uᵀ
            let mut grhs = Mat::zeros((rows, n));
            for (b, a) in mats.iter().enumerate() {
                let ub = DVector::from_fn(n, |i, _| g[[b, i]]);
                match a.transpose().lu().solve(&ub) {
                    Some(v) => {
                        for k in 0..n {
                            grhs[[b, k]] = v[k];
                        }
                    }
                    None => grhs.row_mut(b).fill(f64::NAN),
                }
            }
            for (k, (&id, &shape)) in a_ids.iter().zip(&a_shapes).enumerate() {
                if id.is_none() {
                    continue;
                }
                let mut ga = Mat::zeros((rows, n));
                for b in 0..rows {
                    for i in 0..n {
                        ga[[b, i]] = -grhs[[b, k]] * sol_rc[[b, i]];
                    }
                }
                gr.accum(id, reduce_to(ga, shape));
            }
            if r_id.is_some() {
                gr.accum(r_id, reduce_to(grhs, r_shape));
            }
        })
    }
}
