use std::cell::RefCell;
use std::collections::BTreeMap;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{NodeId, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static ACTIVE: RefCell<Option<TapeInner>> = const { RefCell::new(None) };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Op {
    Param,
    Const,
    MatMul,
    Add,
    Sub,
    Mul,
    Relu,
    Scale(f64),
    Sum,
    Mean,
    Exp,
    Log,
    ConcatRows,
    L2Norm,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
}

struct TapeInner {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<usize>,
}

impl TapeInner {
    fn push(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }
}

/// Records the application of `op` if any input lives on the active tape.
pub(crate) fn record(
    op: Op,
    inputs: &[&Tensor],
    shape: &[usize],
    value: &Arc<Vec<f64>>,
) -> Option<NodeId> {
    ACTIVE.with(|cell| {
        let mut slot = cell.borrow_mut();
        let tape = slot.as_mut()?;
        let id = tape.id;
        let live = |t: &Tensor| t.node.filter(|n| n.tape == id);
        if !inputs.iter().any(|t| live(t).is_some()) {
            return None;
        }
        let input_ids = inputs
            .iter()
            .map(|t| match live(t) {
                Some(n) => n.index,
                None => tape.push(Node {
                    op: Op::Const,
                    inputs: Vec::new(),
                    shape: t.shape.clone(),
                    value: Arc::clone(&t.data),
                }),
            })
            .collect();
        let index = tape.push(Node {
            op,
            inputs: input_ids,
            shape: shape.to_vec(),
            value: Arc::clone(value),
        });
        Some(NodeId { tape: id, index })
    })
}

/// Thread-confined recording context for one forward/backward cycle.
///
/// Only one tape may be active per thread. Dropping the guard without
/// calling [`GradTape::backward`] discards the recording.
pub struct GradTape {
    id: u64,
    _not_send: PhantomData<*const ()>,
}

impl GradTape {
    pub fn begin() -> Result<Self> {
        ACTIVE.with(|cell| {
            let mut slot = cell.borrow_mut();
            if slot.is_some() {
                return Err(TensorError::TapeActive);
            }
            let id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
            *slot = Some(TapeInner {
                id,
                nodes: Vec::new(),
                params: Vec::new(),
            });
            Ok(Self {
                id,
                _not_send: PhantomData,
            })
        })
    }

    /// Registers `value` as a differentiable leaf and returns the watched copy.
    pub fn param(&self, value: &Tensor) -> Result<Tensor> {
        ACTIVE.with(|cell| {
            let mut slot = cell.borrow_mut();
            let tape = slot
                .as_mut()
                .filter(|t| t.id == self.id)
                .ok_or(TensorError::NoTape)?;
            let index = tape.push(Node {
                op: Op::Param,
                inputs: Vec::new(),
                shape: value.shape.clone(),
                value: Arc::clone(&value.data),
            });
            tape.params.push(index);
            Ok(Tensor::from_parts(
                value.shape.clone(),
                Arc::clone(&value.data),
                Some(NodeId {
                    tape: self.id,
                    index,
                }),
            ))
        })
    }

    /// Number of recorded entries, constants included.
    pub fn len(&self) -> usize {
        ACTIVE.with(|cell| {
            cell.borrow()
                .as_ref()
                .filter(|t| t.id == self.id)
                .map_or(0, |t| t.nodes.len())
        })
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn backward(self, loss: &Tensor) -> Result<Gradients> {
        let owned = ACTIVE.with(|cell| cell.borrow().as_ref().is_some_and(|t| t.id == self.id));
        if !owned {
            return Err(TensorError::NoTape);
        }
        backward(loss)
    }
}

impl Drop for GradTape {
    fn drop(&mut self) {
        let _ = ACTIVE.try_with(|cell| {
            let mut slot = cell.borrow_mut();
            if slot.as_ref().is_some_and(|t| t.id == self.id) {
                *slot = None;
            }
        });
    }
}

/// d(loss)/d(param) for every parameter registered on a tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_node: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, param: &Tensor) -> Option<&Tensor> {
        param.node.and_then(|n| self.by_node.get(&n))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.by_node.iter()
    }
}

/// Runs the reverse sweep for a scalar `loss`, consuming the active tape.
///
/// A loss that does not depend on any recorded value yields all-zero
/// gradients.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(TensorError::NotScalar(loss.shape.clone()));
    }
    let tape = ACTIVE
        .with(|cell| cell.borrow_mut().take())
        .ok_or(TensorError::NoTape)?;

    let mut grads: Vec<Option<Vec<f64>>> = vec![None; tape.nodes.len()];
    if let Some(n) = loss.node.filter(|n| n.tape == tape.id) {
        grads[n.index] = Some(vec![1.0]);
    }

    for i in (0..tape.nodes.len()).rev() {
        let node = &tape.nodes[i];
        if matches!(node.op, Op::Param | Op::Const) {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        propagate(&tape.nodes, node, &g, &mut grads);
    }

    let by_node = tape
        .params
        .iter()
        .map(|&index| {
            let node = &tape.nodes[index];
            let g = grads[index]
                .take()
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            (
                NodeId {
                    tape: tape.id,
                    index,
                },
                Tensor::from_parts(node.shape.clone(), Arc::new(g), None),
            )
        })
        .collect();
    Ok(Gradients { by_node })
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], target: usize, contrib: Vec<f64>) {
    if nodes[target].op == Op::Const {
        return;
    }
    match &mut grads[target] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib),
    }
}

/// Gradient for an operand that may have been scalar-broadcast.
fn reduce_to(len: usize, g: Vec<f64>) -> Vec<f64> {
    if len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn broadcast_get(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let input = |k: usize| &nodes[node.inputs[k]];
    match node.op {
        Op::Param | Op::Const => {}
        Op::MatMul => {
            let (a, b) = (input(0), input(1));
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += g[i * n + j] * b.value[p * n + j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            for p in 0..k {
                for i in 0..m {
                    let aip = a.value[i * k + p];
                    for j in 0..n {
                        gb[p * n + j] += aip * g[i * n + j];
                    }
                }
            }
            accumulate(nodes, grads, node.inputs[0], ga);
            accumulate(nodes, grads, node.inputs[1], gb);
        }
        Op::Add | Op::Sub => {
            let sign = if node.op == Op::Sub { -1.0 } else { 1.0 };
            let ga = reduce_to(input(0).value.len(), g.to_vec());
            let gb = reduce_to(input(1).value.len(), g.iter().map(|v| sign * v).collect());
            accumulate(nodes, grads, node.inputs[0], ga);
            accumulate(nodes, grads, node.inputs[1], gb);
        }
        Op::Mul => {
            let (a, b) = (&input(0).value, &input(1).value);
            let ga = g
                .iter()
                .enumerate()
                .map(|(i, gi)| gi * broadcast_get(b, i))
                .collect();
            let gb = g
                .iter()
                .enumerate()
                .map(|(i, gi)| gi * broadcast_get(a, i))
                .collect();
            accumulate(nodes, grads, node.inputs[0], reduce_to(a.len(), ga));
            accumulate(nodes, grads, node.inputs[1], reduce_to(b.len(), gb));
        }
        Op::Relu => {
            let x = &input(0).value;
            let gx = g
                .iter()
                .zip(x.iter())
                .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(nodes, grads, node.inputs[0], gx);
        }
        Op::Scale(c) => {
            accumulate(nodes, grads, node.inputs[0], g.iter().map(|v| c * v).collect());
        }
        Op::Sum => {
            let n = input(0).value.len();
            accumulate(nodes, grads, node.inputs[0], vec![g[0]; n]);
        }
        Op::Mean => {
            let n = input(0).value.len();
            accumulate(nodes, grads, node.inputs[0], vec![g[0] / n as f64; n]);
        }
        Op::Exp => {
            let gx = g.iter().zip(node.value.iter()).map(|(gi, y)| gi * y).collect();
            accumulate(nodes, grads, node.inputs[0], gx);
        }
        Op::Log => {
            let x = &input(0).value;
            let gx = g.iter().zip(x.iter()).map(|(gi, xi)| gi / xi).collect();
            accumulate(nodes, grads, node.inputs[0], gx);
        }
        Op::ConcatRows => {
            let mut offset = 0;
            for &idx in &node.inputs {
                let len = nodes[idx].value.len();
                accumulate(nodes, grads, idx, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::L2Norm => {
            let x = input(0);
            let cols = *x.shape.last().unwrap_or(&1);
            let gx = x
                .value
                .iter()
                .enumerate()
                .map(|(i, xi)| {
                    let r = i / cols;
                    let norm = node.value[r];
                    if norm > 0.0 {
                        g[r] * xi / norm
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, grads, node.inputs[0], gx);
        }
    }
}

/// `param - eta * grad` for each parameter, returned as detached tensors.
pub fn sgd_step(params: &[Tensor], grads: &Gradients, eta: f64) -> Result<Vec<Tensor>> {
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let g = grads.get(p).ok_or(TensorError::MissingGradient(i))?;
            if g.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let data = p
                .data()
                .iter()
                .zip(g.data())
                .map(|(w, d)| w - eta * d)
                .collect();
            Tensor::new(p.shape().to_vec(), data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let tape = GradTape::begin().unwrap();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn scale_gradient_is_constant() {
        let tape = GradTape::begin().unwrap();
        let x = tape.param(&Tensor::vector(vec![0.5, -1.0]).unwrap()).unwrap();
        let grads = tape.backward(&x.scale(2.5).sum()).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.5, 2.5]);
    }

    #[test]
    fn unreachable_params_get_exact_zero() {
        let tape = GradTape::begin().unwrap();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let y = tape.param(&Tensor::vector(vec![3.0]).unwrap()).unwrap();
        let grads = tape.backward(&x.sum()).unwrap();
        assert_eq!(grads.get(&y).unwrap().data(), &[0.0]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn backward_errors() {
        let loss = Tensor::scalar(1.0);
        assert_eq!(backward(&loss).unwrap_err(), TensorError::NoTape);
        let tape = GradTape::begin().unwrap();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(backward(&x), Err(TensorError::NotScalar(_))));
        assert!(matches!(GradTape::begin(), Err(TensorError::TapeActive)));
        drop(tape);
        assert!(GradTape::begin().is_ok());
    }

    #[test]
    fn tape_is_consumed() {
        let tape = GradTape::begin().unwrap();
        let x = tape.param(&Tensor::scalar(1.0)).unwrap();
        backward(&x).unwrap();
        assert_eq!(tape.param(&x).unwrap_err(), TensorError::NoTape);
        assert_eq!(backward(&x).unwrap_err(), TensorError::NoTape);
    }

    #[test]
    fn sgd_definition() {
        let tape = GradTape::begin().unwrap();
        let w = tape.param(&Tensor::scalar(1.0)).unwrap();
        let grads = tape.backward(&w.scale(2.0)).unwrap();
        let stepped = sgd_step(std::slice::from_ref(&w), &grads, 0.01).unwrap();
        assert_eq!(stepped[0].item(), 0.98);

        let tape = GradTape::begin().unwrap();
        let w = tape.param(&Tensor::scalar(1.0)).unwrap();
        let grads = tape.backward(&Tensor::scalar(0.0)).unwrap();
        assert_eq!(sgd_step(&[w], &grads, 0.01).unwrap()[0].item(), 1.0);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // (w - 3)^2 contracts the error by (1 - 2 eta) per step.
        let mut w = Tensor::scalar(0.0);
        let target = Tensor::scalar(3.0);
        for _ in 0..100 {
            let tape = GradTape::begin().unwrap();
            let wp = tape.param(&w).unwrap();
            let d = wp.sub(&target).unwrap();
            let grads = tape.backward(&d.mul(&d).unwrap().sum()).unwrap();
            w = sgd_step(&[wp], &grads, 0.1).unwrap().remove(0);
        }
        assert!((w.item() - 3.0).abs() < 1e-6);
        assert!((w.item() - 3.0).abs() <= 3.0 * 0.8f64.powi(100) * 1.0001);
    }

    #[test]
    fn sgd_missing_gradient() {
        let grads = Gradients::default();
        let p = Tensor::scalar(1.0);
        assert!(matches!(sgd_step(&[p], &grads, 0.1), Err(TensorError::MissingGradient(0))));
    }
}
