use std::sync::Arc;

use super::tape::{record, Op};
use super::{Result, Tensor, TensorError};

/// Primitive operation selector for [`primitive_forward`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Relu,
    Sub,
    Scale(f64),
    Sum,
    Mean,
    Exp,
    Log,
    ConcatRows,
    L2Norm,
}

/// Applies `kind` to `inputs`, dispatching to the corresponding method.
pub fn primitive_forward(kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity = |name: &'static str, expected: usize| {
        if inputs.len() == expected {
            Ok(())
        } else {
            Err(TensorError::Arity {
                op: name,
                expected,
                got: inputs.len(),
            })
        }
    };
    match kind {
        OpKind::MatMul => arity("matmul", 2).and_then(|_| inputs[0].matmul(inputs[1])),
        OpKind::Add => arity("add", 2).and_then(|_| inputs[0].add(inputs[1])),
        OpKind::Sub => arity("sub", 2).and_then(|_| inputs[0].sub(inputs[1])),
        OpKind::Mul => arity("mul", 2).and_then(|_| inputs[0].mul(inputs[1])),
        OpKind::Relu => arity("relu", 1).map(|_| inputs[0].relu()),
        OpKind::Scale(c) => arity("scale", 1).map(|_| inputs[0].scale(c)),
        OpKind::Sum => arity("sum", 1).map(|_| inputs[0].sum()),
        OpKind::Mean => arity("mean", 1).map(|_| inputs[0].mean()),
        OpKind::Exp => arity("exp", 1).map(|_| inputs[0].exp()),
        OpKind::Log => arity("log", 1).and_then(|_| inputs[0].log()),
        OpKind::ConcatRows => Tensor::concat_rows(inputs),
        OpKind::L2Norm => arity("l2_norm", 1).map(|_| inputs[0].l2_norm()),
    }
}

fn finish(op: Op, inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    let data = Arc::new(data);
    let node = record(op, inputs, &shape, &data);
    Tensor::from_parts(shape, data, node)
}

fn require_2d(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape.len() == 2 && b.shape.len() == 2 {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        })
    }
}

impl Tensor {
    fn zip_with(&self, other: &Tensor, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.data(), other.data());
        let (shape, data) = if self.shape == other.shape {
            (self.shape.clone(), a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect())
        } else if b.len() == 1 {
            (self.shape.clone(), a.iter().map(|x| f(*x, b[0])).collect())
        } else if a.len() == 1 {
            (other.shape.clone(), b.iter().map(|y| f(a[0], *y)).collect())
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        };
        Ok(finish(op, &[self, other], shape, data))
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|v| f(*v)).collect();
        finish(op, &[self], self.shape.clone(), data)
    }

    /// `(m×k)·(k×n) → (m×n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        require_2d("matmul", self, other)?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Ok(finish(Op::MatMul, &[self, other], vec![m, n], out))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, Op::Sub, "sub", |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn relu(&self) -> Tensor {
        self.map(Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(Op::Scale(c), |v| c * v)
    }

    pub fn exp(&self) -> Tensor {
        self.map(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data.iter().find(|v| v.is_nan() || **v <= 0.0) {
            return Err(TensorError::LogDomain(*bad));
        }
        Ok(self.map(Op::Log, f64::ln))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data.iter().sum();
        finish(Op::Sum, &[self], vec![1], vec![s])
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data.iter().sum();
        finish(Op::Mean, &[self], vec![1], vec![s / self.numel() as f64])
    }

    /// Row-wise Euclidean norm: `(r×c) → (r×1)`, vectors reduce to `[1]`.
    pub fn l2_norm(&self) -> Tensor {
        let cols = self.cols();
        let norms: Vec<f64> = self
            .data
            .chunks(cols)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let shape = if self.shape.len() == 2 {
            vec![self.shape[0], 1]
        } else {
            vec![norms.len()]
        };
        finish(Op::L2Norm, &[self], shape, norms)
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Arity {
            op: "concat_rows",
            expected: 1,
            got: 0,
        })?;
        let cols = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.len() != 2 || p.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(p.data());
        }
        Ok(finish(Op::ConcatRows, parts, vec![rows, cols], data))
    }
}
