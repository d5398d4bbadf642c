use super::ops::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Ordered set of uniquely named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(invalid!("duplicate parameter name {name}"));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, index: usize) -> &Tensor<T> {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.tensors[index]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_bias(&self, index: usize) -> bool {
        self.names[index].ends_with(".bias")
    }

    /// Stores one gradient per parameter, in set order.
    pub fn set_grads(&mut self, grads: Vec<Tensor<T>>) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(shape_err!(
                "{} gradients for {} parameters",
                grads.len(),
                self.tensors.len()
            ));
        }
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            if g.shape() != p.shape() {
                return Err(shape_err!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            p.set_grad(g.into_data())?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Constant,
    Param(usize),
    Conv {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        rows: usize,
        n: usize,
        m: usize,
    },
    PairLinear {
        input: Var,
        weight: Var,
        bias: Var,
        pairs: Vec<(u32, u32)>,
        d: usize,
        m: usize,
    },
    Relu(Var),
    Mask {
        input: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
    ConcatCols {
        a: Var,
        b: Var,
        rows: usize,
        p: usize,
        q: usize,
    },
    GatherRows {
        input: Var,
        index: Vec<usize>,
        width: usize,
    },
    GroupSum {
        input: Var,
        group: usize,
        width: usize,
        scale: T,
    },
    SegmentSum {
        input: Var,
        offsets: Vec<usize>,
        index: Vec<u32>,
        width: usize,
        scale: T,
    },
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
    SumSquares(Var),
    MeanSquare(Vec<Var>),
    SoftmaxCe {
        scores: Var,
        target: usize,
        probs: Vec<T>,
    },
    SoftmaxCeRows {
        scores: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Conv { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::PairLinear { .. } => "pair_linear",
            Op::Relu(_) => "relu",
            Op::Mask { .. } => "mask",
            Op::Reshape(_) => "reshape",
            Op::ConcatCols { .. } => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::GroupSum { .. } => "group_sum",
            Op::SegmentSum { .. } => "segment_sum",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::MeanSquare(_) => "mean_square",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::SoftmaxCeRows { .. } => "softmax_cross_entropy_rows",
        }
    }
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed primitives over a borrowed parameter set.
///
/// Every recording method validates shapes and rejects non-finite results.
/// [`Graph::backward`] may run once; a second call returns
/// [`Error::GraphConsumed`] until [`Graph::reset`].
pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    consumed: bool,
    trace: Vec<usize>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            consumed: false,
            trace: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    /// Drops every recorded node so the graph can be rebuilt.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
        self.trace.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0] {
            Node {
                op: Op::Param(i), ..
            } => self.params.tensor(*i),
            Node { value: Some(t), .. } => t,
            Node { value: None, .. } => unreachable!("non-param node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Op names in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Node indices visited by the last backward pass, in visit order.
    pub fn adjoint_trace(&self) -> &[usize] {
        &self.trace
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} output (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter index out of range");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        Ok(self.param(i))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let geom = ConvGeom::new(
            x.shape(),
            self.shape(kernel),
            self.shape(bias),
            stride,
            padding,
        )?;
        let out = ops::conv2d_forward(
            x.data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let shape = if x.rank() == 4 {
            vec![geom.n, geom.o, geom.oh, geom.ow]
        } else {
            vec![geom.o, geom.oh, geom.ow]
        };
        let rg = self.req(input) || self.req(kernel) || self.req(bias);
        let op = Op::Conv {
            input,
            kernel,
            bias,
            geom,
        };
        self.push(Tensor::new(&shape, out)?, op, rg)
    }

    /// Row-wise `x W^T + b` for `x` of shape `[rows, n]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (rows, n) = self.matrix_dims(input)?;
        let (m, wn) = match *self.shape(weight) {
            [m, wn] => (m, wn),
            ref s => return Err(shape_err!("linear weight must be rank 2, got {s:?}")),
        };
        if wn != n {
            return Err(shape_err!(
                "linear: input width {n}, weight {:?}",
                self.shape(weight)
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [m] {
                return Err(shape_err!(
                    "linear: bias {:?} for {m} outputs",
                    self.shape(b)
                ));
            }
        }
        let out = ops::linear_forward(
            self.value(input).data(),
            rows,
            n,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            m,
        );
        let rg = self.req(input) || self.req(weight) || bias.is_some_and(|b| self.req(b));
        let op = Op::Linear {
            input,
            weight,
            bias,
            rows,
            n,
            m,
        };
        self.push(Tensor::new(&[rows, m], out)?, op, rg)
    }

    /// Linear layer over all `n * n` ordered row pairs of each group of `n`
    /// consecutive rows. Output rows are ordered `(group, i, j)` row-major.
    pub fn pair_linear(&mut self, input: Var, weight: Var, bias: Var, n: usize) -> Result<Var> {
        let (rows, _) = self.matrix_dims(input)?;
        if n == 0 || rows % n != 0 {
            return Err(shape_err!(
                "pair_linear: {rows} rows not divisible into groups of {n}"
            ));
        }
        self.pair_linear_indexed(input, weight, bias, ops::group_pairs(rows / n, n))
    }

    /// Linear layer over explicit row pairs: output row `p` is
    /// `W concat(x[a], x[b]) + bias` for `pairs[p] = (a, b)`.
    pub fn pair_linear_indexed(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        pairs: Vec<(u32, u32)>,
    ) -> Result<Var> {
        let (rows, d) = self.matrix_dims(input)?;
        let m = match *self.shape(weight) {
            [m, w2] if w2 == 2 * d => m,
            ref s => return Err(shape_err!("pair_linear: weight {s:?} for input width {d}")),
        };
        if self.shape(bias) != [m] {
            return Err(shape_err!(
                "pair_linear: bias {:?} for {m} outputs",
                self.shape(bias)
            ));
        }
        if pairs.is_empty()
            || pairs
                .iter()
                .any(|&(a, b)| a as usize >= rows || b as usize >= rows)
        {
            return Err(shape_err!(
                "pair_linear: pair index out of range for {rows} rows"
            ));
        }
        let out = ops::pair_linear_forward(
            self.value(input).data(),
            rows,
            d,
            self.value(weight).data(),
            self.value(bias).data(),
            m,
            &pairs,
        );
        let rg = self.req(input) || self.req(weight) || self.req(bias);
        let shape = [pairs.len(), m];
        let op = Op::PairLinear {
            input,
            weight,
            bias,
            pairs,
            d,
            m,
        };
        self.push(Tensor::new(&shape, out)?, op, rg)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = ops::relu(self.value(input));
        let rg = self.req(input);
        self.push(out, Op::Relu(input), rg)
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask(&mut self, input: Var, mask: Vec<T>) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.numel() {
            return Err(shape_err!(
                "mask of {} for tensor of {}",
                mask.len(),
                x.numel()
            ));
        }
        let data = x.data().iter().zip(&mask).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.req(input);
        self.push(out, Op::Mask { input, mask }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.req(input);
        self.push(out, Op::Reshape(input), rg)
    }

    /// `[rows, p] ++ [rows, q] -> [rows, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, p) = self.matrix_dims(a)?;
        let (rows_b, q) = self.matrix_dims(b)?;
        if rows != rows_b {
            return Err(shape_err!("concat_cols: {rows} vs {rows_b} rows"));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&da[r * p..(r + 1) * p]);
            out.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        let rg = self.req(a) || self.req(b);
        let op = Op::ConcatCols { a, b, rows, p, q };
        self.push(Tensor::new(&[rows, p + q], out)?, op, rg)
    }

    /// Selects rows of a `[rows, width]` matrix, repetition allowed.
    pub fn gather_rows(&mut self, input: Var, index: Vec<usize>) -> Result<Var> {
        let (rows, width) = self.matrix_dims(input)?;
        if index.is_empty() || index.iter().any(|&i| i >= rows) {
            return Err(shape_err!(
                "gather_rows: index out of range for {rows} rows"
            ));
        }
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in &index {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let rg = self.req(input);
        let shape = [index.len(), width];
        let op = Op::GatherRows {
            input,
            index,
            width,
        };
        self.push(Tensor::new(&shape, out)?, op, rg)
    }

    /// Sums each run of `group` consecutive rows, then multiplies by `scale`.
    pub fn group_sum(&mut self, input: Var, group: usize, scale: T) -> Result<Var> {
        let (rows, width) = self.matrix_dims(input)?;
        if group == 0 || rows % group != 0 {
            return Err(shape_err!(
                "group_sum: {rows} rows not divisible by {group}"
            ));
        }
        let src = self.value(input).data();
        let mut out = vec![T::zero(); rows / group * width];
        for (r, row) in src.chunks(width).enumerate() {
            let dst = &mut out[(r / group) * width..(r / group + 1) * width];
            for (o, &v) in dst.iter_mut().zip(row) {
                *o += v;
            }
        }
        if scale != T::one() {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let rg = self.req(input);
        let op = Op::GroupSum {
            input,
            group,
            width,
            scale,
        };
        self.push(Tensor::new(&[rows / group, width], out)?, op, rg)
    }

    /// Output row `s` is `scale` times the sum of input rows
    /// `index[offsets[s]..offsets[s + 1]]`.
    pub fn segment_sum(
        &mut self,
        input: Var,
        offsets: Vec<usize>,
        index: Vec<u32>,
        scale: T,
    ) -> Result<Var> {
        let (rows, width) = self.matrix_dims(input)?;
        let valid = offsets.len() >= 2
            && offsets[0] == 0
            && offsets.windows(2).all(|w| w[0] < w[1])
            && *offsets.last().expect("non-empty") == index.len()
            && index.iter().all(|&i| (i as usize) < rows);
        if !valid {
            return Err(shape_err!(
                "segment_sum: malformed segments for {rows} rows"
            ));
        }
        let src = self.value(input).data();
        let segments = offsets.len() - 1;
        let mut out = vec![T::zero(); segments * width];
        for (s, dst) in out.chunks_mut(width).enumerate() {
            for &i in &index[offsets[s]..offsets[s + 1]] {
                let row = &src[i as usize * width..(i as usize + 1) * width];
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o += v;
                }
            }
            if scale != T::one() {
                dst.iter_mut().for_each(|v| *v *= scale);
            }
        }
        let rg = self.req(input);
        let op = Op::SegmentSum {
            input,
            offsets,
            index,
            width,
            scale,
        };
        self.push(Tensor::new(&[segments, width], out)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.req(a) || self.req(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, input: Var, c: T) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| v * c).collect())?;
        let rg = self.req(input);
        self.push(out, Op::Scale(input, c), rg)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: T = self.value(input).data().iter().copied().sum();
        let rg = self.req(input);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let s: T = self.value(input).data().iter().map(|&v| v * v).sum();
        let rg = self.req(input);
        self.push(Tensor::scalar(s), Op::SumSquares(input), rg)
    }

    /// Mean of squares over the concatenation of all inputs.
    pub fn mean_square(&mut self, inputs: &[Var]) -> Result<Var> {
        let count: usize = inputs.iter().map(|&v| self.value(v).numel()).sum();
        if count == 0 {
            return Err(invalid!("mean_square of nothing"));
        }
        let total: T = inputs
            .iter()
            .flat_map(|&v| self.value(v).data().iter().map(|&x| x * x))
            .sum();
        let rg = inputs.iter().any(|&v| self.req(v));
        let out = Tensor::scalar(total / T::of(count as f64));
        self.push(out, Op::MeanSquare(inputs.to_vec()), rg)
    }

    /// Softmax cross-entropy of a score vector against a target index.
    pub fn softmax_cross_entropy(&mut self, scores: Var, target: usize) -> Result<Var> {
        let s = self.value(scores).data();
        if target >= s.len() {
            return Err(invalid!(
                "target {target} out of range for {} scores",
                s.len()
            ));
        }
        let (loss, probs) = ops::softmax_ce_forward(s, target);
        let rg = self.req(scores);
        let op = Op::SoftmaxCe {
            scores,
            target,
            probs,
        };
        self.push(Tensor::scalar(loss), op, rg)
    }

    /// Mean softmax cross-entropy over the rows of a `[rows, k]` score
    /// matrix, one target per row.
    pub fn softmax_cross_entropy_rows(&mut self, scores: Var, targets: &[usize]) -> Result<Var> {
        let (rows, k) = self.matrix_dims(scores)?;
        if targets.len() != rows {
            return Err(shape_err!(
                "{} targets for {rows} score rows",
                targets.len()
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(invalid!("target {t} out of range for {k} scores"));
        }
        let mut total = T::zero();
        let mut probs = Vec::with_capacity(rows * k);
        for (row, &t) in self.value(scores).data().chunks(k).zip(targets) {
            let (loss, p) = ops::softmax_ce_forward(row, t);
            total += loss;
            probs.extend(p);
        }
        let rg = self.req(scores);
        let op = Op::SoftmaxCeRows {
            scores,
            targets: targets.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(total / T::of(rows as f64)), op, rg)
    }

    fn matrix_dims(&self, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err!("expected a matrix, got shape {s:?}")),
        }
    }

    /// Reverse-mode pass from a one-element `loss`.
    ///
    /// Returns the gradient of every parameter in set order (zeros for
    /// parameters the loss does not depend on).
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Tensor<T>>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            ));
        }
        self.consumed = true;
        self.trace.clear();

        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut param_grads: Vec<Tensor<T>> = self
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.trace.push(idx);
            self.propagate(idx, g, &mut grads, &mut param_grads)?;
        }
        for (i, g) in param_grads.iter().enumerate() {
            g.ensure_finite(&format!("gradient of {}", self.params.name(i)))?;
        }
        Ok(param_grads)
    }

    fn propagate(
        &self,
        idx: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        param_grads: &mut [Tensor<T>],
    ) -> Result<()> {
        let mut acc = |v: Var, delta: Vec<T>| accumulate(&mut grads[v.0], delta);
        match &self.nodes[idx].op {
            Op::Constant => {}
            Op::Param(i) => {
                for (a, d) in param_grads[*i].data_mut().iter_mut().zip(&g) {
                    *a += *d;
                }
            }
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let cg = ops::conv2d_backward(
                    &g,
                    self.value(*kernel).data(),
                    self.value(*input).data(),
                    geom,
                    self.req(*input),
                );
                if let Some(dx) = cg.input {
                    acc(*input, dx);
                }
                acc(*kernel, cg.kernel);
                acc(*bias, cg.bias);
            }
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                n,
                m,
            } => {
                let (dx, dw, db) = ops::linear_backward(
                    &g,
                    self.value(*input).data(),
                    *rows,
                    *n,
                    self.value(*weight).data(),
                    *m,
                    self.req(*input),
                );
                if let Some(dx) = dx {
                    acc(*input, dx);
                }
                acc(*weight, dw);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::PairLinear {
                input,
                weight,
                bias,
                pairs,
                d,
                m,
            } => {
                let x = self.value(*input);
                let (dx, dw, db) = ops::pair_linear_backward(
                    &g,
                    x.data(),
                    x.numel() / d,
                    *d,
                    self.value(*weight).data(),
                    *m,
                    pairs,
                    self.req(*input),
                );
                if let Some(dx) = dx {
                    acc(*input, dx);
                }
                acc(*weight, dw);
                acc(*bias, db);
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let dx = g
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| d * ops::relu_grad(v))
                    .collect();
                acc(*input, dx);
            }
            Op::Mask { input, mask } => {
                acc(*input, g.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
            Op::Reshape(input) => acc(*input, g),
            Op::ConcatCols { a, b, rows, p, q } => {
                let w = p + q;
                let mut da = Vec::with_capacity(rows * p);
                let mut db = Vec::with_capacity(rows * q);
                for r in 0..*rows {
                    da.extend_from_slice(&g[r * w..r * w + p]);
                    db.extend_from_slice(&g[r * w + p..(r + 1) * w]);
                }
                if self.req(*a) {
                    acc(*a, da);
                }
                if self.req(*b) {
                    acc(*b, db);
                }
            }
            Op::GatherRows {
                input,
                index,
                width,
            } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (r, &i) in index.iter().enumerate() {
                    let dst = &mut dx[i * width..(i + 1) * width];
                    for (o, &v) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *o += v;
                    }
                }
                acc(*input, dx);
            }
            Op::GroupSum {
                input,
                group,
                width,
                scale,
            } => {
                let rows = self.value(*input).numel() / width;
                let mut dx = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    let src = &g[(r / group) * width..(r / group + 1) * width];
                    dx.extend(src.iter().map(|&v| v * *scale));
                }
                acc(*input, dx);
            }
            Op::SegmentSum {
                input,
                offsets,
                index,
                width,
                scale,
            } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (seg, src) in g.chunks(*width).enumerate() {
                    for &i in &index[offsets[seg]..offsets[seg + 1]] {
                        let dst = &mut dx[i as usize * width..(i as usize + 1) * width];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v * *scale;
                        }
                    }
                }
                acc(*input, dx);
            }
            Op::Add(a, b) => {
                if self.req(*a) {
                    acc(*a, g.clone());
                }
                if self.req(*b) {
                    acc(*b, g);
                }
            }
            Op::Scale(input, c) => acc(*input, g.iter().map(|&v| v * *c).collect()),
            Op::Sum(input) => acc(*input, vec![g[0]; self.value(*input).numel()]),
            Op::SumSquares(input) => {
                let two = T::of(2.0) * g[0];
                acc(
                    *input,
                    self.value(*input).data().iter().map(|&x| two * x).collect(),
                );
            }
            Op::MeanSquare(inputs) => {
                let count: usize = inputs.iter().map(|&v| self.value(v).numel()).sum();
                let k = T::of(2.0) * g[0] / T::of(count as f64);
                for &v in inputs {
                    if self.req(v) {
                        acc(v, self.value(v).data().iter().map(|&x| k * x).collect());
                    }
                }
            }
            Op::SoftmaxCe {
                scores,
                target,
                probs,
            } => {
                let mut d: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
                d[*target] -= g[0];
                acc(*scores, d);
            }
            Op::SoftmaxCeRows {
                scores,
                targets,
                probs,
            } => {
                let scale = g[0] / T::of(targets.len() as f64);
                let k = probs.len() / targets.len();
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] -= scale;
                }
                acc(*scores, d);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(existing) => {
            for (a, d) in existing.iter_mut().zip(&delta) {
                *a += *d;
            }
        }
        None => *slot = Some(delta),
    }
}
