//! Reverse-mode differentiation over 2-D `f64` arrays.
//!
//! Operations are recorded in evaluation order; [`Tape::backward`] walks the
//! record once in reverse, so every node is visited exactly once.

use ndarray::{s, Array2, Axis, Zip};

use super::mlp::{relu, softplus};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    /// `x * w^T`
    MatMulT(Var, Var),
    /// Adds a `1 x m` row to every row.
    AddRow(Var, Var),
    Relu(Var),
    Softplus(Var),
    ConcatCols(Var, Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    /// Repeats an `n x 1` column `cols` times.
    RepeatCols(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Array2<f64>),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SumCols(Var),
    Sum(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients for the parameters that appeared on a tape, indexed by id.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn add(&mut self, id: ParamId, g: Array2<f64>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    /// Adds every gradient into the matching parameter's accumulator.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (k, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                store.get_mut(ParamId(k)).grad += g;
            }
        }
    }

    /// Merges another set, adding where both hold a gradient.
    pub fn merge(&mut self, other: Gradients) {
        for (k, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(k), g);
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let v = self.value(x).dot(&self.value(w).t());
        self.push(v, Op::MatMulT(x, w))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(relu);
        self.push(v, Op::Relu(x))
    }

    /// `log1p(exp(-|x|)) + max(x, 0)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(softplus);
        self.push(v, Op::Softplus(x))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts must agree");
        self.push(v, Op::ConcatCols(a, b))
    }

    /// Rows `index[k]` of `table`, stacked.
    pub fn gather_rows(&mut self, table: Var, index: Vec<usize>) -> Var {
        let v = self.value(table).select(Axis(0), &index);
        self.push(v, Op::Gather(table, index))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.len(), rows * cols, "reshape must keep the element count");
        let flat: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).unwrap();
        self.push(v, Op::Reshape(x))
    }

    pub fn repeat_cols(&mut self, column: Var, cols: usize) -> Var {
        let c = self.value(column);
        assert_eq!(c.ncols(), 1, "repeat_cols expects a column");
        let v = c.broadcast((c.nrows(), cols)).unwrap().to_owned();
        self.push(v, Op::RepeatCols(column))
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

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, objective: Var) -> Result<Gradients> {
        let shape = self.value(objective).dim();
        if shape != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar objective, got shape {shape:?}"
            )));
        }
        let mut adj: Vec<Option<Array2<f64>>> = (0..=objective.0).map(|_| None).collect();
        adj[objective.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        fn acc(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut adj[v.0] {
                Some(a) => *a += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=objective.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.add(*id, g),
                Op::MatMulT(x, w) => {
                    let gx = g.dot(self.value(*w));
                    let gw = g.t().dot(self.value(*x));
                    acc(&mut adj, *x, gx);
                    acc(&mut adj, *w, gw);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *row, gr);
                    acc(&mut adj, *x, g);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|g, &a| {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    acc(&mut adj, *x, gx);
                }
                Op::Softplus(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|g, &a| *g *= sigmoid(a));
                    acc(&mut adj, *x, gx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    acc(&mut adj, *a, g.slice(s![.., ..ca]).to_owned());
                    acc(&mut adj, *b, g.slice(s![.., ca..]).to_owned());
                }
                Op::Gather(table, index) => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (row, &k) in g.rows().into_iter().zip(index) {
                        let mut dst = gt.row_mut(k);
                        dst += &row;
                    }
                    acc(&mut adj, *table, gt);
                }
                Op::Reshape(x) => {
                    let dim = self.value(*x).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(&mut adj, *x, Array2::from_shape_vec(dim, flat).unwrap());
                }
                Op::RepeatCols(c) => {
                    acc(&mut adj, *c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, -&g);
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut adj, *a, &g * self.value(*b));
                    acc(&mut adj, *b, &g * self.value(*a));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = &g / bv;
                    let gb = -(&ga * &node.value);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut adj, *a, g * *c),
                Op::AddScalar(a) => acc(&mut adj, *a, g),
                Op::MulConst(a, c) => acc(&mut adj, *a, g * c),
                Op::Exp(a) => acc(&mut adj, *a, g * &node.value),
                Op::Ln(a) => acc(&mut adj, *a, g / self.value(*a)),
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        if x < *lo || x > *hi {
                            *g = 0.0;
                        }
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::SumCols(a) => {
                    let dim = self.value(*a).dim();
                    acc(&mut adj, *a, g.broadcast(dim).unwrap().to_owned());
                }
                Op::Sum(a) => {
                    let dim = self.value(*a).dim();
                    acc(&mut adj, *a, Array2::from_elem(dim, g[[0, 0]]));
                }
            }
        }
        Ok(out)
    }

    /// Runs [`Tape::backward`] and adds the result into the store's
    /// accumulators. Calling it twice doubles the stored gradients.
    pub fn backward_into(&self, objective: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(objective)?.accumulate_into(store);
        Ok(())
    }
}
