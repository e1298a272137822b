//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each builder method computes
//! its forward value eagerly, verifies the result is finite, and appends a
//! node; [`Tape::backward`] walks the nodes in reverse, accumulating
//! gradients in a fixed order so replays are bit-identical. The module also
//! provides [`grad_check`], a central finite-difference oracle that runs
//! entirely in whatever precision the tape carries (use `f64`).

use crate::capsule::{
    apply_perm, apply_perm_backward, caps_perm, capsule_norms_backward, capsule_norms_forward,
    capsule_transform_backward, capsule_transform_forward, CapsMethod, HeadKind,
};
use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_train_forward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, maxpool2x2_backward, maxpool2x2_forward, BatchStats, BnCache, ConvSpec,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Relu,
    Square,
    Sqrt,
    Scale(T),
    Matmul,
    SumAll,
    SumAxis(usize),
    MeanAll,
    Reshape,
    Conv2d { spec: ConvSpec, cols: Tensor<T> },
    MaxPool { argmax: Vec<usize> },
    BatchNorm { cache: BnCache<T> },
    Dense,
    CapsReshape { perm: Vec<usize>, samples: usize },
    CapsTransform { kind: HeadKind },
    CapsNorms,
    SoftmaxXent { labels: Vec<usize>, smoothing: T, probs: Tensor<T> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Scale(_) => "scale",
            Op::Matmul => "matmul",
            Op::SumAll | Op::SumAxis(_) => "sum",
            Op::MeanAll => "mean",
            Op::Reshape => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Dense => "dense",
            Op::CapsReshape { .. } => "caps_reshape",
            Op::CapsTransform { kind } => kind.name(),
            Op::CapsNorms => "caps_norms",
            Op::SoftmaxXent { .. } => "loss_xent",
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients keyed by node id; every requires-grad node has an entry
/// (zeros when unreachable from the loss).
pub struct GradientMap<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_fault: Option<(String, T)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_fault: None,
        }
    }

    /// Scale the computed gradients of every op with this name by `factor`
    /// during backward. Used by the gradient-check harness to prove that a
    /// corrupted gradient is detected; never set in training.
    pub fn set_grad_fault(&mut self, op_name: &str, factor: T) {
        self.grad_fault = Some((op_name.to_string(), factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_ids(&self, ids: &[NodeId]) -> Result<()> {
        for id in ids {
            if id.0 >= self.nodes.len() {
                return Err(Error::config(format!(
                    "node id {} not recorded on this tape",
                    id.0
                )));
            }
        }
        Ok(())
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> Result<NodeId> {
        self.check_ids(&inputs)?;
        value.ensure_finite(op.name())?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(id)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad,
        });
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids(&[a, b])?;
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add, vec![a, b], v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids(&[a, b])?;
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub, vec![a, b], v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids(&[a, b])?;
        let v = self.value(a).mul(self.value(b))?;
        self.push(Op::Mul, vec![a, b], v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids(&[a])?;
        let v = self.value(a).relu();
        self.push(Op::Relu, vec![a], v)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids(&[a])?;
        let v = self.value(a).square();
        self.push(Op::Square, vec![a], v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids(&[a])?;
        let v = self.value(a).sqrt()?;
        self.push(Op::Sqrt, vec![a], v)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.check_ids(&[a])?;
        let v = self.value(a).scale(c);
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids(&[a, b])?;
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::Matmul, vec![a, b], v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids(&[a])?;
        let v = self.value(a).sum(None)?;
        self.push(Op::SumAll, vec![a], v)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_ids(&[a])?;
        let v = self.value(a).sum(Some(axis))?;
        self.push(Op::SumAxis(axis), vec![a], v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids(&[a])?;
        let v = self.value(a).mean(None)?;
        self.push(Op::MeanAll, vec![a], v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check_ids(&[a])?;
        let v = self.value(a).reshape(shape)?;
        self.push(Op::Reshape, vec![a], v)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        self.check_ids(&[x, w])?;
        let (v, cols) = conv2d_forward(self.value(x), self.value(w), spec)?;
        self.push(Op::Conv2d { spec: *spec, cols }, vec![x, w], v)
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_ids(&[x])?;
        let (v, argmax) = maxpool2x2_forward(self.value(x))?;
        self.push(Op::MaxPool { argmax }, vec![x], v)
    }

    /// Train-mode batch norm; also hands the batch moments back to the
    /// caller so it can fold them into the running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        epsilon: T,
    ) -> Result<(NodeId, BatchStats<T>)> {
        self.check_ids(&[x, gamma, beta])?;
        let (v, cache, stats) =
            batchnorm_train_forward(self.value(x), self.value(gamma), self.value(beta), epsilon)?;
        let id = self.push(Op::BatchNorm { cache }, vec![x, gamma, beta], v)?;
        Ok((id, stats))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_ids(&[x, w, bias])?;
        let v = dense_forward(self.value(x), self.value(w), self.value(bias))?;
        self.push(Op::Dense, vec![x, w, bias], v)
    }

    /// Reshape `[N,H,W,C]` feature maps into `[N,j,n]` capsules.
    pub fn caps_reshape(&mut self, x: NodeId, method: CapsMethod, n: Option<usize>) -> Result<NodeId> {
        self.check_ids(&[x])?;
        let maps = self.value(x);
        if maps.rank() != 4 {
            return Err(Error::shape(format!(
                "caps_reshape wants [N,H,W,C], got {:?}",
                maps.shape()
            )));
        }
        let (samples, h, w, c) = (
            maps.shape()[0],
            maps.shape()[1],
            maps.shape()[2],
            maps.shape()[3],
        );
        let (j, n, perm) = caps_perm(h, w, c, method, n)?;
        let v = apply_perm(maps, &perm, samples).reshape(&[samples, j, n])?;
        self.push(Op::CapsReshape { perm, samples }, vec![x], v)
    }

    pub fn caps_transform(&mut self, kind: HeadKind, caps: NodeId, weights: NodeId) -> Result<NodeId> {
        self.check_ids(&[caps, weights])?;
        let v = capsule_transform_forward(kind, self.value(caps), self.value(weights))?;
        self.push(Op::CapsTransform { kind }, vec![caps, weights], v)
    }

    pub fn caps_norms(&mut self, caps: NodeId) -> Result<NodeId> {
        self.check_ids(&[caps])?;
        let v = capsule_norms_forward(self.value(caps))?;
        self.push(Op::CapsNorms, vec![caps], v)
    }

    /// Fused softmax + cross-entropy against a label-smoothed target,
    /// averaged over the batch. Scores are `[N, y]`.
    pub fn softmax_xent(&mut self, scores: NodeId, labels: &[usize], smoothing: T) -> Result<NodeId> {
        self.check_ids(&[scores])?;
        let s = self.value(scores);
        if s.rank() != 2 {
            return Err(Error::shape(format!(
                "softmax_xent wants [N,y] scores, got {:?}",
                s.shape()
            )));
        }
        let (n, y) = (s.shape()[0], s.shape()[1]);
        if labels.len() != n {
            return Err(Error::shape(format!(
                "softmax_xent got {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= y) {
            return Err(Error::config(format!("label {bad} out of range for {y} classes")));
        }
        let (loss, probs) = softmax_xent_forward(s, labels, smoothing);
        self.push(
            Op::SoftmaxXent {
                labels: labels.to_vec(),
                smoothing,
                probs,
            },
            vec![scores],
            loss,
        )
    }

    /// Record a simple op by name; the dynamic entry point behind the typed
    /// builders. Unknown names are a configuration error.
    pub fn record_named(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId> {
        let want = |k: usize| -> Result<()> {
            if inputs.len() != k {
                Err(Error::config(format!(
                    "op '{name}' wants {k} inputs, got {}",
                    inputs.len()
                )))
            } else {
                Ok(())
            }
        };
        match name {
            "add" => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            "sub" => {
                want(2)?;
                self.sub(inputs[0], inputs[1])
            }
            "mul" => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            "matmul" => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            "relu" => {
                want(1)?;
                self.relu(inputs[0])
            }
            "square" => {
                want(1)?;
                self.square(inputs[0])
            }
            "sqrt" => {
                want(1)?;
                self.sqrt(inputs[0])
            }
            "sum" => {
                want(1)?;
                self.sum_all(inputs[0])
            }
            "mean" => {
                want(1)?;
                self.mean_all(inputs[0])
            }
            other => Err(Error::config(format!("unknown op kind '{other}'"))),
        }
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap<T>> {
        if self.nodes.is_empty() {
            return Err(Error::config("backward on an empty graph"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::config(format!("loss node {} not on tape", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            let mut input_grads = self.vjp(&self.nodes[id], &g)?;
            grads[id] = Some(g);
            if let Some((fault_name, factor)) = &self.grad_fault {
                if self.nodes[id].op.name() == fault_name {
                    for ig in input_grads.iter_mut().flatten() {
                        *ig = ig.scale(*factor);
                    }
                }
            }
            for (input, ig) in self.nodes[id].inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(T::one(), &ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        // Requires-grad nodes unreachable from the loss get zero gradients.
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(GradientMap { grads })
    }

    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let val = |i: usize| self.value(node.inputs[i]);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.scale(-T::one()))],
            Op::Mul => vec![Some(g.mul(val(1))?), Some(g.mul(val(0))?)],
            Op::Relu => {
                let x = val(0);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if xv <= T::zero() {
                        *dv = T::zero();
                    }
                }
                vec![Some(d)]
            }
            Op::Square => {
                let two = T::from_f64(2.0);
                vec![Some(g.mul(&val(0).scale(two))?)]
            }
            Op::Sqrt => {
                // d sqrt(x) = 1 / (2 sqrt(x)); forward already rejected x < 0.
                let y = &node.value;
                let mut d = g.clone();
                let half = T::from_f64(0.5);
                for (dv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *dv = *dv * half / yv;
                }
                vec![Some(d)]
            }
            Op::Scale(c) => vec![Some(g.scale(*c))],
            Op::Matmul => {
                let a = val(0);
                let b = val(1);
                vec![
                    Some(g.matmul(&b.transpose2d()?)?),
                    Some(a.transpose2d()?.matmul(g)?),
                ]
            }
            Op::SumAll => {
                let gi = g.item()?;
                vec![Some(Tensor::full(val(0).shape(), gi))]
            }
            Op::SumAxis(axis) => {
                let in_shape = val(0).shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let extent = in_shape[*axis];
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let mut d = vec![T::zero(); val(0).len()];
                for o in 0..outer {
                    for e in 0..extent {
                        for i in 0..inner {
                            d[(o * extent + e) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                vec![Some(Tensor::new(in_shape.to_vec(), d)?)]
            }
            Op::MeanAll => {
                let n = T::from_f64(val(0).len() as f64);
                let gi = g.item()? / n;
                vec![Some(Tensor::full(val(0).shape(), gi))]
            }
            Op::Reshape => vec![Some(g.reshape(val(0).shape())?)],
            Op::Conv2d { spec, cols } => {
                let (dx, dw) = conv2d_backward(val(0).shape(), cols, val(1), g, spec)?;
                vec![Some(dx), Some(dw)]
            }
            Op::MaxPool { argmax } => {
                vec![Some(maxpool2x2_backward(val(0).shape(), argmax, g)?)]
            }
            Op::BatchNorm { cache } => {
                let (dx, dgamma, dbeta) = batchnorm_backward(cache, val(1), g)?;
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::Dense => {
                let (dx, dw, db) = dense_backward(val(0), val(1), g)?;
                vec![Some(dx), Some(dw), Some(db)]
            }
            Op::CapsReshape { perm, samples } => {
                let flat = g.reshape(&[g.len()])?;
                let d = apply_perm_backward(&flat, perm, *samples);
                vec![Some(d.reshape(val(0).shape())?)]
            }
            Op::CapsTransform { kind } => {
                let (dcaps, dw) = capsule_transform_backward(*kind, val(0), val(1), g)?;
                vec![Some(dcaps), Some(dw)]
            }
            Op::CapsNorms => {
                vec![Some(capsule_norms_backward(val(0), &node.value, g)?)]
            }
            Op::SoftmaxXent {
                labels,
                smoothing,
                probs,
            } => {
                let gi = g.item()?;
                vec![Some(softmax_xent_backward(probs, labels, *smoothing, gi))]
            }
        })
    }
}

/// Softmax + cross-entropy with a label-smoothed uniform-prior target:
/// the true class gets `(1-s) + s/y`, the rest `s/y`. Returns the scalar
/// batch-mean loss and the softmax probabilities.
pub fn softmax_xent_forward<T: Scalar>(
    scores: &Tensor<T>,
    labels: &[usize],
    smoothing: T,
) -> (Tensor<T>, Tensor<T>) {
    let (n, y) = (scores.shape()[0], scores.shape()[1]);
    let mut probs = vec![T::zero(); n * y];
    let mut loss = T::zero();
    let uniform = smoothing / T::from_f64(y as f64);
    for r in 0..n {
        let row = &scores.data()[r * y..(r + 1) * y];
        let mut m = T::neg_infinity();
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut denom = T::zero();
        for &v in row {
            denom = denom + (v - m).exp();
        }
        let log_denom = denom.ln();
        let mut row_loss = T::zero();
        for (c, &v) in row.iter().enumerate() {
            let logp = v - m - log_denom;
            probs[r * y + c] = logp.exp();
            let mut target = uniform;
            if c == labels[r] {
                target = target + (T::one() - smoothing);
            }
            row_loss = row_loss - target * logp;
        }
        loss = loss + row_loss;
    }
    loss = loss / T::from_f64(n as f64);
    (
        Tensor::scalar(loss),
        Tensor::new(vec![n, y], probs).expect("probs shape"),
    )
}

/// d loss / d scores = (probs - target) * upstream / N.
pub fn softmax_xent_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    smoothing: T,
    upstream: T,
) -> Tensor<T> {
    let (n, y) = (probs.shape()[0], probs.shape()[1]);
    let uniform = smoothing / T::from_f64(y as f64);
    let scale = upstream / T::from_f64(n as f64);
    let mut d = vec![T::zero(); n * y];
    for r in 0..n {
        for c in 0..y {
            let mut target = uniform;
            if c == labels[r] {
                target = target + (T::one() - smoothing);
            }
            d[r * y + c] = (probs.data()[r * y + c] - target) * scale;
        }
    }
    Tensor::new(vec![n, y], d).expect("grad shape")
}

/// Maximum relative error between the tape gradient and central finite
/// differences of `f` at `point`:
/// `max_i |analytic_i - fd_i| / max(1, |analytic_i|)`.
///
/// `f` receives a fresh tape and the id of the input leaf and must return a
/// scalar loss node. Run this with `T = f64`; callers keep inputs away from
/// non-differentiable points (ReLU kinks, pooling ties).
pub fn grad_check<T, F>(point: &Tensor<T>, h: T, f: F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, NodeId) -> Result<NodeId>,
{
    if h <= T::zero() {
        return Err(Error::domain("grad_check requires h > 0"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let loss = f(&mut tape, x)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::shape(format!(
            "grad_check requires a scalar function, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(x)
        .ok_or_else(|| Error::config("input leaf has no gradient"))?
        .clone();

    let eval = |p: &Tensor<T>| -> Result<T> {
        let mut t = Tape::new();
        let x = t.leaf(p.clone(), false);
        let l = f(&mut t, x)?;
        t.value(l).item()
    };

    let two_h = T::from_f64(2.0) * h;
    let mut max_err = T::zero();
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + h;
        let mut minus = point.clone();
        minus.data_mut()[i] = minus.data()[i] - h;
        let fd = (eval(&plus)? - eval(&minus)?) / two_h;
        let a = analytic.data()[i];
        let err = (a - fd).abs() / T::one().max(a.abs());
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Fill;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn record_computes_forward_eagerly() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]), true);
        let b = tape.leaf(t64(&[3], &[4.0, 5.0, 6.0]), false);
        let m = tape.record_named("mul", &[a, b]).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn relu_is_idempotent_on_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[-1.0, 0.5, 2.0]), false);
        let r1 = tape.relu(x).unwrap();
        let r2 = tape.relu(r1).unwrap();
        assert_eq!(tape.value(r1), tape.value(r2));
    }

    #[test]
    fn unknown_op_kind_is_a_configuration_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[1], &[1.0]), false);
        assert!(matches!(
            tape.record_named("convolve3d", &[a]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backward_on_empty_graph_fails() {
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(NodeId(0)), Err(Error::Config(_))));
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn hadamard_loss_grad_is_the_other_factor() {
        // loss = sum(w . x) => dloss/dw = x.
        let mut tape = Tape::new();
        let w = tape.leaf(t64(&[3], &[0.1, 0.2, 0.3]), true);
        let x = tape.leaf(t64(&[3], &[5.0, 6.0, 7.0]), false);
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[5.0, 6.0, 7.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn square_loss_grad_is_two_w() {
        let mut tape = Tape::new();
        let w = tape.leaf(t64(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = tape.square(w).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        let orphan = tape.leaf(t64(&[3], &[1.0, 1.0, 1.0]), true);
        let loss = tape.sum_all(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(orphan).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_is_linear_over_subgraphs() {
        // grad of (f + g) equals grad f + grad g.
        let x0 = t64(&[4], &[0.7, 1.3, -0.4, 2.2]);
        let build_f = |tape: &mut Tape<f64>, x: NodeId| {
            let sq = tape.square(x)?;
            tape.sum_all(sq)
        };
        let build_g = |tape: &mut Tape<f64>, x: NodeId| {
            let r = tape.relu(x)?;
            tape.sum_all(r)
        };
        let grad_of = |build: &dyn Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let loss = build(&mut tape, x).unwrap();
            let g = tape.backward(loss).unwrap();
            g.get(x).unwrap().clone()
        };
        let gf = grad_of(&build_f);
        let gg = grad_of(&build_g);

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let lf = build_f(&mut tape, x).unwrap();
        let lg = build_g(&mut tape, x).unwrap();
        let total = tape.add(lf, lg).unwrap();
        let gsum = tape.backward(total).unwrap().get(x).unwrap().clone();
        for i in 0..4 {
            assert!((gsum.data()[i] - (gf.data()[i] + gg.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_linear_function_is_exact() {
        let point = t64(&[4], &[0.3, -1.2, 2.0, 0.9]);
        let err = grad_check(&point, 1e-5, |tape, x| {
            let s = tape.scale(x, 3.0)?;
            tape.sum_all(s)
        })
        .unwrap();
        assert!(err <= 1e-10, "err {err}");
    }

    #[test]
    fn grad_check_square_function() {
        let point = t64(&[2], &[1.0, 2.0]);
        let err = grad_check(&point, 1e-5, |tape, x| {
            let sq = tape.square(x)?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(err <= 1e-8, "err {err}");
    }

    #[test]
    fn grad_check_detects_injected_fault() {
        // A mul gradient corrupted by 1% must drive the error above 5e-3.
        let point = t64(&[3], &[0.8, 1.4, -0.6]);
        let other = t64(&[3], &[1.5, -2.0, 0.7]);
        let err = grad_check(&point, 1e-5, |tape, x| {
            tape.set_grad_fault("mul", 1.01);
            let c = tape.leaf(other.clone(), false);
            let m = tape.mul(x, c)?;
            tape.sum_all(m)
        })
        .unwrap();
        assert!(err >= 5e-3, "fault not detected: err {err}");
    }

    #[test]
    fn grad_check_composed_stem_and_head() {
        // Two conv-bn-relu-pool stages followed by the vector-capsule head,
        // the same composition the tiny stem trains, checked against finite
        // differences end to end (input and first conv kernel).
        let mut rng = SeededRng::new(17);
        let spec1 = ConvSpec {
            kernel: 3,
            stride: 1,
            in_channels: 1,
            out_channels: 3,
        };
        let spec2 = ConvSpec {
            kernel: 3,
            stride: 1,
            in_channels: 3,
            out_channels: 4,
        };
        let w1 = spec1.init_weights::<f64>(&mut rng);
        let w2 = spec2.init_weights::<f64>(&mut rng);
        let gamma1 = Tensor::<f64>::ones(&[3]);
        let beta1 = Tensor::<f64>::zeros(&[3]);
        let gamma2 = Tensor::<f64>::ones(&[4]);
        let beta2 = Tensor::<f64>::zeros(&[4]);
        // After 12x12 -> conv 10 -> pool 5 -> conv 3 -> pool 1: 1x1x4 maps.
        let hvc = crate::capsule::init_head_weights::<f64>(HeadKind::Hvc, 1, 4, 4, 3, &mut rng)
            .unwrap();
        let build = |tape: &mut Tape<f64>, x: NodeId, wn1: NodeId| -> Result<NodeId> {
            let wn2 = tape.leaf(w2.clone(), false);
            let gn1 = tape.leaf(gamma1.clone(), false);
            let bn1 = tape.leaf(beta1.clone(), false);
            let gn2 = tape.leaf(gamma2.clone(), false);
            let bn2 = tape.leaf(beta2.clone(), false);
            let hn = tape.leaf(hvc.clone(), false);
            let c1 = tape.conv2d(x, wn1, &spec1)?;
            let (n1, _) = tape.batchnorm_train(c1, gn1, bn1, 1e-3)?;
            let r1 = tape.relu(n1)?;
            let p1 = tape.maxpool2x2(r1)?;
            let c2 = tape.conv2d(p1, wn2, &spec2)?;
            let (n2, _) = tape.batchnorm_train(c2, gn2, bn2, 1e-3)?;
            let r2 = tape.relu(n2)?;
            let p2 = tape.maxpool2x2(r2)?;
            let caps = tape.caps_reshape(p2, CapsMethod::B, None)?;
            let out = tape.caps_transform(HeadKind::Hvc, caps, hn)?;
            let norms = tape.caps_norms(out)?;
            tape.softmax_xent(norms, &[0, 2], 0.0)
        };
        let point = Tensor::<f64>::create(
            &[2, 12, 12, 1],
            Fill::Normal {
                mean: 0.5,
                std: 0.25,
                rng: &mut rng,
            },
        )
        .unwrap();
        let err_x = grad_check(&point, 1e-5, |tape, x| {
            let wn1 = tape.leaf(w1.clone(), false);
            build(tape, x, wn1)
        })
        .unwrap();
        assert!(err_x <= 1e-4, "composed stack err wrt input {err_x}");

        let err_w = grad_check(&w1, 1e-5, |tape, wn1| {
            let x = tape.leaf(point.clone(), false);
            build(tape, x, wn1)
        })
        .unwrap();
        assert!(err_w <= 1e-4, "composed stack err wrt conv weights {err_w}");
    }

    #[test]
    fn softmax_xent_uniform_scores_give_log_y() {
        let scores = Tensor::<f64>::zeros(&[2, 5]);
        let (loss, _) = softmax_xent_forward(&scores, &[1, 3], 0.0);
        assert!((loss.item().unwrap() - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_confident_correct_score_drives_loss_to_zero() {
        let scores = t64(&[1, 3], &[50.0, 0.0, 0.0]);
        let (loss, _) = softmax_xent_forward(&scores, &[0], 0.0);
        assert!(loss.item().unwrap() < 1e-12);
    }

    #[test]
    fn softmax_xent_zero_smoothing_reduces_to_plain_xent() {
        let scores = t64(&[1, 3], &[0.2, -0.4, 1.1]);
        let (loss, probs) = softmax_xent_forward(&scores, &[2], 0.0);
        let expected = -(probs.data()[2]).ln();
        assert!((loss.item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        let huge = tape.leaf(Tensor::<f32>::full(&[2], 1e38), false);
        // 1e38 squared overflows f32 to infinity.
        assert!(matches!(tape.square(huge), Err(Error::Divergence(_))));
    }
}
