//! A small reverse-mode differentiation tape over dense matrices.
//!
//! Every node holds a 2-D `f64` array. Binary elementwise operations broadcast
//! along any axis of length one, and the backward pass sums gradients back
//! down to the operand's shape. The primitive set is exactly what the
//! variational objective needs; nothing more.
//!
//! ```
//! use hsbnn::tape::Tape;
//! use ndarray::array;
//!
//! let mut t = Tape::new();
//! let x = t.leaf(array![[1.0, 2.0]]);
//! let y = t.square(x);
//! let s = t.sum(y);
//! t.backward(s);
//! assert_eq!(t.scalar(s), 5.0);
//! assert_eq!(t.grad(x).unwrap(), &array![[2.0, 4.0]]);
//! ```

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    AppendOnes(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Leaves are differentiable; constants are leaves whose
    /// gradient nobody reads.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::Shift(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Column sums: `r×c → 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// Appends a column of ones (the bias input).
    pub fn append_ones(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (r, c) = src.dim();
        let mut v = Array2::ones((r, c + 1));
        v.slice_mut(s![.., ..c]).assign(src);
        self.push(v, Op::AppendOnes(a))
    }

    /// Sum of several nodes of identical shape.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = self.add(acc, *t);
        }
        acc
    }

    /// Gradient of `output` (a 1×1 node) with respect to every node.
    pub fn backward(&mut self, output: Var) {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            match node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, reduce_to(&g, val(a).dim()));
                    accumulate(&mut grads, b, reduce_to(&g, val(b).dim()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, reduce_to(&g, val(a).dim()));
                    accumulate(&mut grads, b, -reduce_to(&g, val(b).dim()));
                }
                Op::Mul(a, b) => {
                    let ga = &g * val(b);
                    let gb = &g * val(a);
                    accumulate(&mut grads, a, reduce_to(&ga, val(a).dim()));
                    accumulate(&mut grads, b, reduce_to(&gb, val(b).dim()));
                }
                Op::Div(a, b) => {
                    let ga = &g / val(b);
                    let gb = -(&ga * &node.value);
                    accumulate(&mut grads, a, reduce_to(&ga, val(a).dim()));
                    accumulate(&mut grads, b, reduce_to(&gb, val(b).dim()));
                }
                Op::Scale(a, k) => accumulate(&mut grads, a, g * k),
                Op::Shift(a) => accumulate(&mut grads, a, g),
                Op::Exp(a) => accumulate(&mut grads, a, g * &node.value),
                Op::Ln(a) => accumulate(&mut grads, a, g / val(a)),
                Op::Sqrt(a) => {
                    let mut ga = g;
                    // at exactly zero the slope is taken as 0 so dead paths stay finite
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, y| *g = if *y > 0.0 { *g * 0.5 / y } else { 0.0 });
                    accumulate(&mut grads, a, ga);
                }
                Op::Square(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(a)).for_each(|g, x| *g *= 2.0 * x);
                    accumulate(&mut grads, a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(a)).for_each(|g, x| {
                        if *x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    accumulate(&mut grads, a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|g, y| *g *= 1.0 - y * y);
                    accumulate(&mut grads, a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(a)).for_each(|g, x| *g *= sigmoid(*x));
                    accumulate(&mut grads, a, ga);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&val(b).t());
                    let gb = val(a).t().dot(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(val(a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, a, ga);
                }
                Op::SumRows(a) => {
                    let ga = g.broadcast(val(a).dim()).expect("row broadcast").to_owned();
                    accumulate(&mut grads, a, ga);
                }
                Op::SumCols(a) => {
                    let ga = g.broadcast(val(a).dim()).expect("column broadcast").to_owned();
                    accumulate(&mut grads, a, ga);
                }
                Op::AppendOnes(a) => {
                    let c = val(a).ncols();
                    accumulate(&mut grads, a, g.slice(s![.., ..c]).to_owned());
                }
            }
        }
        self.grads = grads;
    }

    /// Gradient of the last `backward` output with respect to a leaf, or
    /// `None` when the leaf does not influence it.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Tape::grad`] but zero-filled when the leaf is off every path.
    pub fn grad_or_zero(&self, v: Var) -> Array2<f64> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(self.value(v).dim()))
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back to `shape`.
fn reduce_to(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut out = if shape.0 == 1 && g.nrows() != 1 {
        g.sum_axis(Axis(0)).insert_axis(Axis(0))
    } else {
        g.clone()
    };
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    debug_assert_eq!(out.dim(), shape);
    out
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` at `x0`, coordinate by coordinate.
    fn numeric_grad(x0: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x0.dim());
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut xp = x0.clone();
            xp[[r, c]] += h;
            let mut xm = x0.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(x0: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let y = build(&mut t, x);
        t.backward(y);
        let got = t.grad_or_zero(x);
        let want = numeric_grad(&x0, |xv| {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let y = build(&mut t, x);
            t.scalar(y)
        });
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6 * (1.0 + w.abs()), "{got} vs {want}");
        }
    }

    #[test]
    fn unary_ops() {
        let x0 = array![[0.3, -1.2, 2.0], [0.7, 1.5, -0.4]];
        check(x0.clone(), |t, x| {
            let e = t.exp(x);
            t.sum(e)
        });
        check(x0.clone(), |t, x| {
            let y = t.tanh(x);
            let y = t.square(y);
            t.sum(y)
        });
        check(x0.clone(), |t, x| {
            let y = t.softplus(x);
            let y = t.ln(y);
            t.sum(y)
        });
        check(x0.clone(), |t, x| {
            let y = t.relu(x);
            let y = t.scale(y, 3.0);
            let y = t.shift(y, 1.0);
            let y = t.sqrt(y);
            t.sum(y)
        });
    }

    #[test]
    fn broadcasting_binary_ops() {
        let row = array![[0.5, -2.0, 1.5]];
        let col = array![[1.2], [0.8]];
        let full = array![[0.3, -1.2, 2.0], [0.7, 1.5, -0.4]];
        let c1 = col.clone();
        check(row.clone(), move |t, r| {
            let c = t.leaf(c1.clone());
            let p = t.mul(c, r);
            let q = t.div(p, c);
            let q = t.mul(q, p);
            t.sum(q)
        });
        let f1 = full.clone();
        check(col.clone(), move |t, c| {
            let f = t.leaf(f1.clone());
            let d = t.div(f, c);
            let d = t.sub(d, c);
            let d = t.square(d);
            t.sum(d)
        });
        check(full, |t, f| {
            let s = t.sum(f);
            let ratio = t.div(f, s);
            let r = t.sum_rows(ratio);
            let c = t.sum_cols(f);
            let rc = t.mul(c, r);
            let sq = t.square(rc);
            t.sum(sq)
        });
    }

    #[test]
    fn matmul_and_bias() {
        let a0 = array![[0.3, -1.2], [0.7, 1.5], [0.1, 0.2]];
        let w0 = array![[1.0, 0.5, -0.3], [0.2, -0.7, 0.9], [0.4, 0.1, 0.6]];
        let w1 = w0.clone();
        check(a0.clone(), move |t, a| {
            let w = t.leaf(w1.clone());
            let ab = t.append_ones(a);
            let m = t.matmul(ab, w);
            let m = t.tanh(m);
            t.sum(m)
        });
        check(w0, move |t, w| {
            let a = t.leaf(a0.clone());
            let ab = t.append_ones(a);
            let m = t.matmul(ab, w);
            let m = t.square(m);
            t.sum(m)
        });
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0]]);
        let y = t.leaf(array![[2.0]]);
        let z = t.square(x);
        t.backward(z);
        assert!(t.grad(y).is_none());
        assert_eq!(t.grad_or_zero(y), array![[0.0]]);
        assert_eq!(t.grad(x).unwrap(), &array![[2.0]]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }
}
