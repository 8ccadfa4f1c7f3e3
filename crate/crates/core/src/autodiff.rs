//! Minimal reverse-mode automatic differentiation on dense matrices.
//!
//! A [`Tape`] records a computation graph of `Array2<f64>` values; calling
//! [`Tape::backward`] on a scalar root returns exact gradients for every
//! recorded node. Parameters are borrowed into the tape as leaves so each
//! sample's graph costs only its intermediate values.
//!
//! The op set is the smallest one that covers the models in this crate:
//! matrix products, elementwise maps, row softmaxes, gathers and picks.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Payload<'a> {
    Owned(Array2<f64>),
    Borrowed(&'a Array2<f64>),
}

impl Payload<'_> {
    fn get(&self) -> &Array2<f64> {
        match self {
            Payload::Owned(a) => a,
            Payload::Borrowed(a) => a,
        }
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Softplus(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    MeanRows(usize),
    SumAll(usize),
    ConcatCols(Vec<usize>),
    GatherRow(usize, usize),
    Pick(usize, usize, usize),
}

struct Node<'a> {
    value: Payload<'a>,
    op: Op,
}

/// Reverse-mode tape. Nodes are recorded in topological order by construction.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Payload::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.nodes[v.0].value.get()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[(0, 0)]
    }

    /// Borrow a parameter or input into the tape.
    pub fn leaf(&mut self, value: &'a Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Payload::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned constant node.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// 1x1 constant node.
    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ac, br, "matmul inner dims {ar}x{ac} . {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shapes");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shapes");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shapes");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::MulElem(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn softplus_node(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(value, Op::SoftmaxRows(a.0))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(value, Op::LogSoftmaxRows(a.0))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).nrows() as f64;
        let value = self
            .value(a)
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .mapv(|x| x / n);
        self.push(value, Op::MeanRows(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a.0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|v| self.value(*v).ncols()).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut offset = 0;
        for v in parts {
            let a = self.value(*v);
            assert_eq!(a.nrows(), rows, "concat_cols row mismatch");
            value
                .slice_mut(ndarray::s![.., offset..offset + a.ncols()])
                .assign(a);
            offset += a.ncols();
        }
        self.push(value, Op::ConcatCols(parts.iter().map(|v| v.0).collect()))
    }

    /// Row `index` of a matrix as a 1xC node (embedding lookup).
    pub fn gather_row(&mut self, a: Var, index: usize) -> Result<Var> {
        let m = self.value(a);
        if index >= m.nrows() {
            return Err(Error::Lookup(format!(
                "row {index} out of range for {}x{} table",
                m.nrows(),
                m.ncols()
            )));
        }
        let value = m.row(index).to_owned().insert_axis(Axis(0));
        Ok(self.push(value, Op::GatherRow(a.0, index)))
    }

    /// Element `(row, col)` as a 1x1 node.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a)[(row, col)]);
        self.push(value, Op::Pick(a.0, row, col))
    }

    /// Backpropagate from a scalar root; returns per-node gradients.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be 1x1");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.get().t());
                    let gb = self.nodes[*a].value.get().t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.t().to_owned());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::MulElem(a, b) => {
                    let ga = &g * self.nodes[*b].value.get();
                    let gb = &g * self.nodes[*a].value.get();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, &g * *c);
                }
                Op::Tanh(a) => {
                    let y = self.nodes[id].value.get();
                    accumulate(&mut grads, *a, &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Softplus(a) => {
                    let x = self.nodes[*a].value.get();
                    accumulate(&mut grads, *a, &g * &x.mapv(sigmoid));
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[id].value.get();
                    let mut ga = Array2::zeros(y.dim());
                    for (r, yrow) in y.rows().into_iter().enumerate() {
                        let grow = g.row(r);
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(u, v)| u * v).sum();
                        for c in 0..y.ncols() {
                            ga[(r, c)] = yrow[c] * (grow[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = self.nodes[id].value.get();
                    let mut ga = Array2::zeros(y.dim());
                    for (r, yrow) in y.rows().into_iter().enumerate() {
                        let grow = g.row(r);
                        let gsum: f64 = grow.sum();
                        for c in 0..y.ncols() {
                            ga[(r, c)] = grow[c] - yrow[c].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let n = self.nodes[*a].value.get().nrows();
                    let scale = 1.0 / n as f64;
                    let mut ga = Array2::zeros(self.nodes[*a].value.get().dim());
                    for mut row in ga.rows_mut() {
                        row.assign(&(&g.row(0) * scale));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.nodes[*a].value.get().dim(), g[(0, 0)]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.nodes[*p].value.get().ncols();
                        let gp = g.slice(ndarray::s![.., offset..offset + cols]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        offset += cols;
                    }
                }
                Op::GatherRow(a, index) => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.get().dim());
                    ga.row_mut(*index).assign(&g.row(0));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Pick(a, r, c) => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.get().dim());
                    ga[(*r, *c)] = g[(0, 0)];
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Grads { by_node: grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`], addressed by [`Var`].
pub struct Grads {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient or a zero matrix of the given shape.
    pub fn wrt_or_zero(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.by_node[v.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

/// Central-difference gradient checking for arbitrary named-tensor losses.
pub mod gradcheck {
    use ndarray::Array2;
    use rand::Rng;

    /// Worst coordinate found by [`check`].
    #[derive(Debug, Clone)]
    pub struct FdReport {
        pub max_rel_err: f64,
        pub checked: usize,
    }

    /// Compare `analytic` gradients against central finite differences of
    /// `loss` over `n_coords` random coordinates of `params`.
    ///
    /// The relative error uses `max(|analytic|, |fd|, 1e-6)` as denominator
    /// so coordinates with vanishing gradient do not divide by zero.
    pub fn check<F>(
        params: &[Array2<f64>],
        analytic: &[Array2<f64>],
        loss: F,
        n_coords: usize,
        h: f64,
        rng: &mut impl Rng,
    ) -> FdReport
    where
        F: Fn(&[Array2<f64>]) -> f64,
    {
        assert_eq!(params.len(), analytic.len());
        let mut work: Vec<Array2<f64>> = params.to_vec();
        let mut max_rel_err: f64 = 0.0;
        let mut checked = 0;
        while checked < n_coords {
            let t = rng.gen_range(0..params.len());
            let (rows, cols) = params[t].dim();
            if rows * cols == 0 {
                continue;
            }
            let r = rng.gen_range(0..rows);
            let c = rng.gen_range(0..cols);
            let orig = work[t][(r, c)];
            work[t][(r, c)] = orig + h;
            let up = loss(&work);
            work[t][(r, c)] = orig - h;
            let down = loss(&work);
            work[t][(r, c)] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[t][(r, c)];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
        FdReport {
            max_rel_err,
            checked,
        }
    }
}
