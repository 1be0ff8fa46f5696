use std::collections::HashMap;

use super::conv::{self, ConvGeom};
use super::linalg::{self, gemm, Lu};
use super::{for_each_strided, numel, strides, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values for the named free inputs of a graph.
pub type Bindings = HashMap<String, Tensor>;

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    MatMul(NodeId, NodeId),
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    /// Sum over `axes`; the reduced axes are removed from the shape.
    Sum(NodeId, Vec<usize>),
    Reshape(NodeId),
    Transpose(NodeId, Vec<usize>),
    SliceLast(NodeId, usize, usize),
    ConcatLast(Vec<NodeId>),
    SquaredNorm(NodeId),
    /// Trailing-aligned broadcast to the node's shape.
    BroadcastTo(NodeId),
    LogAbsDet(NodeId),
    Inverse(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Input(_) | Const(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            AddScalar(a, _) | MulScalar(a, _) | Exp(a) | Ln(a) | Sigmoid(a) | Relu(a) => vec![*a],
            Sum(a, _) | Reshape(a) | Transpose(a, _) | SliceLast(a, _, _) => vec![*a],
            SquaredNorm(a) | BroadcastTo(a) | LogAbsDet(a) | Inverse(a) => vec![*a],
            Conv3d { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            ConcatLast(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    scope: usize,
}

/// A define-then-run computation graph.
///
/// Nodes are appended in topological order, so a node's index is also its
/// evaluation order. Shapes are inferred and checked when a node is added.
/// Each node carries the scope label that was active when it was created,
/// which lets numerical failures be traced back to a layer.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    scopes: Vec<String>,
    scope: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Node values produced by [`Graph::forward_eval`].
#[derive(Clone, Debug, Default)]
pub struct Values {
    vals: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.vals[id.0]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }
}

/// Gradients of a scalar seed with respect to named graph inputs.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> HashMap<String, Tensor> {
        self.map
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: HashMap::new(),
            scopes: vec![String::new()],
            scope: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Sets the label attached to subsequently created nodes; returns the
    /// previous label so callers can restore it.
    pub fn set_scope(&mut self, label: &str) -> String {
        let previous = self.scopes[self.scope].clone();
        self.scope = match self.scopes.iter().position(|s| s == label) {
            Some(i) => i,
            None => {
                self.scopes.push(label.to_string());
                self.scopes.len() - 1
            }
        };
        previous
    }

    pub fn scope_of(&self, id: NodeId) -> &str {
        &self.scopes[self.nodes[id.0].scope]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            op,
            shape,
            scope: self.scope,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Declares (or re-uses) a named free input.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.inputs.get(name) {
            if self.shape(id) != shape {
                return Err(shape_err(format!(
                    "input `{name}` redeclared with shape {shape:?} (was {:?})",
                    self.shape(id)
                )));
            }
            return Ok(id);
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "div")?;
        Ok(self.push(Op::Div(a, b), s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, s), shape)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::MulScalar(a, s), shape)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.mul_scalar(a, -1.0)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul(a, a), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a), shape)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Ln(a), shape)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu(a), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul: {sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    /// Stride-1 "same" convolution of a `(D, H, W, Cin)` volume with a
    /// `(K, K, K, Cin, Cout)` kernel (K odd) and optional `(Cout)` bias.
    pub fn conv3d(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let ok = si.len() == 4
            && sw.len() == 5
            && sw[0] % 2 == 1
            && sw[0] == sw[1]
            && sw[1] == sw[2]
            && sw[3] == si[3];
        if !ok {
            return Err(shape_err(format!("conv3d: input {si:?}, weight {sw:?}")));
        }
        let cout = sw[4];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err(format!(
                    "conv3d bias {:?}, expected [{cout}]",
                    self.shape(b)
                )));
            }
        }
        let shape = vec![si[0], si[1], si[2], cout];
        Ok(self.push(Op::Conv3d { input, weight, bias }, shape))
    }

    /// Sum over the given axes, which are removed from the result shape.
    pub fn sum(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a);
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&ax| ax >= shape.len()) {
            return Err(shape_err(format!("sum: axes {axes:?} for shape {shape:?}")));
        }
        let out: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !sorted.contains(i))
            .map(|(_, &n)| n)
            .collect();
        Ok(self.push(Op::Sum(a, sorted), out))
    }

    pub fn mean(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let count: usize = axes.iter().filter_map(|&ax| self.shape(a).get(ax)).product();
        let s = self.sum(a, axes)?;
        Ok(self.mul_scalar(s, 1.0 / count as f64))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.push(Op::Sum(a, axes), vec![])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(shape_err(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Axis permutation: output axis `k` is input axis `perm[k]`.
    pub fn transpose(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a);
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if seen != (0..shape.len()).collect::<Vec<_>>() {
            return Err(shape_err(format!("transpose: perm {perm:?} for {shape:?}")));
        }
        let out = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(Op::Transpose(a, perm.to_vec()), out))
    }

    /// Channels `start..end` of the last axis.
    pub fn slice_channels(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let shape = self.shape(a);
        let last = *shape.last().ok_or_else(|| shape_err("slice of a scalar"))?;
        if start >= end || end > last {
            return Err(shape_err(format!("slice {start}..{end} of last axis {last}")));
        }
        let mut out = shape.to_vec();
        *out.last_mut().unwrap() = end - start;
        Ok(self.push(Op::SliceLast(a, start, end), out))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let lead = self.shape(*first).split_last().map(|(_, l)| l.to_vec());
        let lead = lead.ok_or_else(|| shape_err("concat of a scalar"))?;
        let mut channels = 0;
        for &p in parts {
            let (c, l) = self.shape(p).split_last().ok_or_else(|| shape_err("concat of a scalar"))?;
            if l != lead.as_slice() {
                return Err(shape_err(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(*first),
                    self.shape(p)
                )));
            }
            channels += c;
        }
        let mut out = lead;
        out.push(channels);
        Ok(self.push(Op::ConcatLast(parts.to_vec()), out))
    }

    pub fn squared_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SquaredNorm(a), vec![])
    }

    /// Broadcast with trailing-axis alignment (size-1 or missing axes expand).
    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let src = self.shape(a);
        let compatible = src.len() <= shape.len()
            && src
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&s, &t)| s == t || s == 1);
        if !compatible {
            return Err(shape_err(format!("broadcast {src:?} -> {shape:?}")));
        }
        Ok(self.push(Op::BroadcastTo(a), shape.to_vec()))
    }

    pub fn log_abs_det(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != s[1] {
            return Err(shape_err(format!("log|det| of {s:?}")));
        }
        Ok(self.push(Op::LogAbsDet(a), vec![]))
    }

    pub fn inverse(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(shape_err(format!("inverse of {s:?}")));
        }
        Ok(self.push(Op::Inverse(a), s))
    }

    /// Evaluates every node once, in index order.
    pub fn forward_eval(&self, bindings: &Bindings) -> Result<Values> {
        let mut values = Values::default();
        self.resume_eval(&mut values, bindings)?;
        Ok(values)
    }

    /// Evaluates the nodes appended since `values` was last filled. Used to
    /// interleave graph construction with evaluation.
    pub fn resume_eval(&self, values: &mut Values, bindings: &Bindings) -> Result<()> {
        for idx in values.vals.len()..self.nodes.len() {
            let node = &self.nodes[idx];
            let value = match &node.op {
                Op::Input(name) => {
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(shape_err(format!(
                            "input `{name}` bound with {:?}, declared {:?}",
                            t.shape(),
                            node.shape
                        )));
                    }
                    t.clone()
                }
                Op::Const(t) => t.clone(),
                op => Tensor::from_raw(&node.shape, self.eval_op(op, &node.shape, &values.vals)?),
            };
            values.vals.push(value);
        }
        Ok(())
    }

    fn eval_op(&self, op: &Op, shape: &[usize], vals: &[Tensor]) -> Result<Vec<f64>> {
        let v = |id: &NodeId| vals[id.0].data();
        let zip = |a: &NodeId, b: &NodeId, f: fn(f64, f64) -> f64| -> Vec<f64> {
            v(a).iter().zip(v(b)).map(|(&x, &y)| f(x, y)).collect()
        };
        let map = |a: &NodeId, f: &dyn Fn(f64) -> f64| -> Vec<f64> { v(a).iter().map(|&x| f(x)).collect() };
        Ok(match op {
            Op::Input(_) | Op::Const(_) => unreachable!(),
            Op::Add(a, b) => zip(a, b, |x, y| x + y),
            Op::Sub(a, b) => zip(a, b, |x, y| x - y),
            Op::Mul(a, b) => zip(a, b, |x, y| x * y),
            Op::Div(a, b) => zip(a, b, |x, y| x / y),
            Op::AddScalar(a, s) => map(a, &|x| x + s),
            Op::MulScalar(a, s) => map(a, &|x| x * s),
            Op::Exp(a) => map(a, &f64::exp),
            Op::Ln(a) => map(a, &f64::ln),
            Op::Sigmoid(a) => map(a, &sigmoid),
            Op::Relu(a) => map(a, &|x| x.max(0.0)),
            Op::MatMul(a, b) => {
                let (m, k) = (vals[a.0].shape()[0], vals[a.0].shape()[1]);
                linalg::matmul(v(a), v(b), m, k, shape[1])
            }
            Op::Conv3d { input, weight, bias } => {
                let g = self.conv_geom(*input, *weight);
                conv::forward(v(input), v(weight), bias.as_ref().map(v), &g)
            }
            Op::Sum(a, axes) => {
                let in_shape = vals[a.0].shape();
                let mut out = vec![0.0; numel(shape)];
                let os = reduced_strides(in_shape, axes);
                let x = v(a);
                for_each_strided(in_shape, &os, |i, o| out[o] += x[i]);
                out
            }
            Op::Reshape(a) => v(a).to_vec(),
            Op::Transpose(a, perm) => {
                let is = strides(vals[a.0].shape());
                let ps: Vec<usize> = perm.iter().map(|&p| is[p]).collect();
                let x = v(a);
                let mut out = vec![0.0; x.len()];
                for_each_strided(shape, &ps, |o, i| out[o] = x[i]);
                out
            }
            Op::SliceLast(a, start, end) => {
                let c = *vals[a.0].shape().last().unwrap();
                v(a).chunks_exact(c).flat_map(|row| row[*start..*end].iter().copied()).collect()
            }
            Op::ConcatLast(parts) => {
                let rows = numel(shape) / shape.last().unwrap();
                let mut out = Vec::with_capacity(numel(shape));
                for r in 0..rows {
                    for p in parts {
                        let c = *vals[p.0].shape().last().unwrap();
                        out.extend_from_slice(&v(p)[r * c..(r + 1) * c]);
                    }
                }
                out
            }
            Op::SquaredNorm(a) => vec![v(a).iter().map(|x| x * x).sum()],
            Op::BroadcastTo(a) => {
                let bs = broadcast_strides(vals[a.0].shape(), shape);
                let x = v(a);
                let mut out = vec![0.0; numel(shape)];
                for_each_strided(shape, &bs, |o, i| out[o] = x[i]);
                out
            }
            Op::LogAbsDet(a) => {
                let n = shape_n(&vals[a.0]);
                vec![Lu::factor(v(a), n)?.log_abs_det()]
            }
            Op::Inverse(a) => {
                let n = shape_n(&vals[a.0]);
                Lu::factor(v(a), n)?.inverse()
            }
        })
    }

    fn conv_geom(&self, input: NodeId, weight: NodeId) -> ConvGeom {
        let (si, sw) = (self.shape(input), self.shape(weight));
        ConvGeom {
            d: si[0],
            h: si[1],
            w: si[2],
            cin: si[3],
            cout: sw[4],
            k: sw[0],
        }
    }

    /// Reverse-mode gradients of `seed` with respect to every input.
    pub fn backward(&self, values: &Values, seed: NodeId) -> Result<Gradients> {
        self.backward_impl(values, seed, None)
    }

    /// Like [`Graph::backward`] but only propagates along paths that reach
    /// the named inputs, skipping work for everything else.
    pub fn backward_wrt(&self, values: &Values, seed: NodeId, wrt: &[&str]) -> Result<Gradients> {
        self.backward_impl(values, seed, Some(wrt))
    }

    fn backward_impl(&self, values: &Values, seed: NodeId, wrt: Option<&[&str]>) -> Result<Gradients> {
        let seed_shape = self.shape(seed);
        if numel(seed_shape) != 1 {
            return Err(Error::NonScalarSeed(seed_shape.to_vec()));
        }
        if values.len() <= seed.0 {
            return Err(shape_err("backward before forward_eval reached the seed"));
        }
        let n = seed.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.nodes[i].op {
                Op::Input(name) => wrt.is_none_or(|w| w.contains(&name.as_str())),
                Op::Const(_) => false,
                op => op.inputs().iter().any(|j| needs[j.0]),
            };
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[seed.0] = Some(vec![1.0]);
        let mut out = HashMap::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            let node = &self.nodes[i];
            if let Op::Input(name) = &node.op {
                out.insert(name.clone(), Tensor::from_raw(&node.shape, g));
                continue;
            }
            self.propagate(NodeId(i), &g, values, &needs, &mut grads)?;
        }
        Ok(Gradients { map: out })
    }

    fn propagate(
        &self,
        id: NodeId,
        g: &[f64],
        values: &Values,
        needs: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[id.0];
        let val = |n: &NodeId| values.vals[n.0].data();
        let mut acc = |target: NodeId, contrib: Vec<f64>| {
            let slot = &mut grads[target.0];
            match slot {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                None => *slot = Some(contrib),
            }
        };
        let want = |n: &NodeId| needs[n.0];
        match &node.op {
            Op::Input(_) | Op::Const(_) => {}
            Op::Add(a, b) => {
                if want(a) {
                    acc(*a, g.to_vec());
                }
                if want(b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    acc(*a, g.to_vec());
                }
                if want(b) {
                    acc(*b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    acc(*a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if want(b) {
                    acc(*b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                if want(a) {
                    acc(*a, g.iter().zip(val(b)).map(|(g, y)| g / y).collect());
                }
                if want(b) {
                    let c: Vec<f64> = g
                        .iter()
                        .zip(val(a).iter().zip(val(b)))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    acc(*b, c);
                }
            }
            Op::AddScalar(a, _) => acc(*a, g.to_vec()),
            Op::MulScalar(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::Exp(a) => {
                let out = values.vals[id.0].data();
                acc(*a, g.iter().zip(out).map(|(g, e)| g * e).collect());
            }
            Op::Ln(a) => acc(*a, g.iter().zip(val(a)).map(|(g, x)| g / x).collect()),
            Op::Sigmoid(a) => {
                let out = values.vals[id.0].data();
                acc(*a, g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let nn = self.shape(*b)[1];
                if want(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(g, false, val(b), true, &mut ga, m, nn, k, 0.0);
                    acc(*a, ga);
                }
                if want(b) {
                    let mut gb = vec![0.0; k * nn];
                    gemm(val(a), true, g, false, &mut gb, k, m, nn, 0.0);
                    acc(*b, gb);
                }
            }
            Op::Conv3d { input, weight, bias } => {
                let geom = self.conv_geom(*input, *weight);
                if want(input) {
                    acc(*input, conv::backward_input(g, val(weight), &geom));
                }
                if want(weight) {
                    acc(*weight, conv::backward_weight(val(input), g, &geom));
                }
                if let Some(b) = bias {
                    if want(b) {
                        acc(*b, conv::backward_bias(g, geom.cout));
                    }
                }
            }
            Op::Sum(a, axes) => {
                let in_shape = self.shape(*a);
                let os = reduced_strides(in_shape, axes);
                let mut ga = vec![0.0; numel(in_shape)];
                for_each_strided(in_shape, &os, |i, o| ga[i] = g[o]);
                acc(*a, ga);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Transpose(a, perm) => {
                let is = strides(self.shape(*a));
                let ps: Vec<usize> = perm.iter().map(|&p| is[p]).collect();
                let mut ga = vec![0.0; g.len()];
                for_each_strided(&node.shape, &ps, |o, i| ga[i] = g[o]);
                acc(*a, ga);
            }
            Op::SliceLast(a, start, end) => {
                let c = *self.shape(*a).last().unwrap();
                let w = end - start;
                let mut ga = vec![0.0; numel(self.shape(*a))];
                for (row, grow) in ga.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                    row[*start..*end].copy_from_slice(grow);
                }
                acc(*a, ga);
            }
            Op::ConcatLast(parts) => {
                let total = *node.shape.last().unwrap();
                let mut offset = 0;
                for p in parts {
                    let c = *self.shape(*p).last().unwrap();
                    if want(p) {
                        let gp: Vec<f64> = g
                            .chunks_exact(total)
                            .flat_map(|row| row[offset..offset + c].iter().copied())
                            .collect();
                        acc(*p, gp);
                    }
                    offset += c;
                }
            }
            Op::SquaredNorm(a) => acc(*a, val(a).iter().map(|x| 2.0 * x * g[0]).collect()),
            Op::BroadcastTo(a) => {
                let bs = broadcast_strides(self.shape(*a), &node.shape);
                let mut ga = vec![0.0; numel(self.shape(*a))];
                for_each_strided(&node.shape, &bs, |o, i| ga[i] += g[o]);
                acc(*a, ga);
            }
            Op::LogAbsDet(a) => {
                let n = self.shape(*a)[0];
                let inv = Lu::factor(val(a), n)?.inverse();
                // d log|det A| / dA = A^{-T}
                let mut ga = linalg::transpose(&inv, n, n);
                ga.iter_mut().for_each(|x| *x *= g[0]);
                acc(*a, ga);
            }
            Op::Inverse(a) => {
                let n = self.shape(*a)[0];
                let inv = values.vals[id.0].data();
                // dA = -B^T G B^T with B = A^{-1}
                let mut tmp = vec![0.0; n * n];
                gemm(inv, true, g, false, &mut tmp, n, n, n, 0.0);
                let mut ga = vec![0.0; n * n];
                gemm(&tmp, false, inv, true, &mut ga, n, n, n, 0.0);
                ga.iter_mut().for_each(|x| *x = -*x);
                acc(*a, ga);
            }
        }
        Ok(())
    }

    /// First node (in evaluation order) holding a non-finite value.
    pub fn first_non_finite(&self, values: &Values) -> Option<NodeId> {
        values
            .vals
            .iter()
            .position(|t| !t.is_finite())
            .map(NodeId)
    }
}

fn shape_n(t: &Tensor) -> usize {
    t.shape()[0]
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output strides laid over the input shape, zero on reduced axes.
fn reduced_strides(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = in_shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &n)| n)
        .collect();
    let ks = strides(&kept);
    let mut out = vec![0; in_shape.len()];
    let mut k = 0;
    for (i, s) in out.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *s = ks[k];
            k += 1;
        }
    }
    out
}

fn broadcast_strides(src: &[usize], target: &[usize]) -> Vec<usize> {
    let ss = strides(src);
    let lead = target.len() - src.len();
    (0..target.len())
        .map(|i| {
            if i < lead || src[i - lead] == 1 {
                0
            } else {
                ss[i - lead]
            }
        })
        .collect()
}
