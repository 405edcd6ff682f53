use super::kernels;
use super::tape::{Op, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Pointwise operations reachable through [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Log,
    Scale,
}

/// Second operand of [`elementwise`]: a tensor of equal shape, a single-element
/// tensor broadcast over the first operand, or a plain constant.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'t> {
    Var(Var<'t>),
    Scalar(f64),
    None,
}

/// Dispatches one of the pointwise ops by tag.
pub fn elementwise<'t>(op: Elementwise, a: Var<'t>, b: Operand<'t>) -> Result<Var<'t>> {
    let need_var = |b: Operand<'t>| match b {
        Operand::Var(v) => Ok(v),
        Operand::Scalar(s) => Ok(a.tape.constant(Tensor::scalar(s))),
        Operand::None => Err(Error::Contract(format!("{op:?} needs a second operand"))),
    };
    match op {
        Elementwise::Add => a.add(need_var(b)?),
        Elementwise::Sub => a.sub(need_var(b)?),
        Elementwise::Mul => a.mul(need_var(b)?),
        Elementwise::Div => a.div(need_var(b)?),
        Elementwise::Relu => a.relu(),
        Elementwise::Exp => a.exp(),
        Elementwise::Log => a.log(),
        Elementwise::Scale => match b {
            Operand::Scalar(s) => a.scale(s),
            _ => Err(Error::Contract("scale takes a scalar constant".into())),
        },
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {t}")))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> super::NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t super::Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_value(self.id, Tensor::numel)
    }

    /// Forward value of a single-element node.
    pub fn item(&self) -> Result<f64> {
        self.tape.with_value(self.id, Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id.0].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    fn unary(
        &self,
        name: &'static str,
        op: Op,
        f: impl Fn(&Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        let value = self.tape.with_value(self.id, f)?;
        self.tape.record(name, value, op)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id.0].value, &nodes[other.id.0].value);
            if b.numel() == 1 {
                let s = b.data()[0];
                a.map(|x| f(x, s))
            } else if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)?
            } else {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
        };
        self.tape.record(name, value, op)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id.0].value, &nodes[other.id.0].value);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?
        };
        self.tape.record("matmul", value, Op::MatMul(self.id, other.id))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let zero = self.tape.with_value(other.id, |b| b.data().contains(&0.0));
        if zero {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    /// Pointwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, mask: &Tensor) -> Result<Var<'t>> {
        let c = self.tape.constant(mask.clone());
        self.mul(c)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::AddScalar(self.id), |a| Ok(a.map(|x| x + s)))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, s), |a| Ok(a.map(|x| x * s)))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |a| Ok(a.map(|x| x.max(0.0))))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), |a| Ok(a.map(f64::exp)))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary("log", Op::Log(self.id), |a| {
            if let Some(bad) = a.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                return Err(Error::domain("log", format!("non-positive argument {bad}")));
            }
            Ok(a.map(f64::ln))
        })
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |a| Ok(a.map(kernels::sigmoid)))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.unary("sqrt", Op::Sqrt(self.id), |a| {
            if let Some(bad) = a.data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
                return Err(Error::domain("sqrt", format!("negative argument {bad}")));
            }
            Ok(a.map(f64::sqrt))
        })
    }

    /// Softmax of `self / temperature` over the last axis.
    pub fn softmax(&self, temperature: f64) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        self.unary("softmax", Op::Softmax(self.id, temperature), |a| {
            Tensor::new(
                a.shape().to_vec(),
                kernels::softmax(a.data(), a.last_dim(), temperature),
            )
        })
    }

    /// `log softmax(self / temperature)` over the last axis.
    pub fn log_softmax(&self, temperature: f64) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        self.unary("log_softmax", Op::LogSoftmax(self.id, temperature), |a| {
            Tensor::new(
                a.shape().to_vec(),
                kernels::log_softmax(a.data(), a.last_dim(), temperature),
            )
        })
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&self) -> Var<'t> {
        let value = self.value();
        self.tape
            .record("stop_gradient", value, Op::StopGradient(self.id))
            .expect("copy of a finite value is finite")
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary("sum", Op::Sum(self.id), |a| {
            Ok(Tensor::scalar(a.data().iter().sum()))
        })
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.unary("mean", Op::Mean(self.id), |a| {
            if a.numel() == 0 {
                return Err(Error::Degenerate("mean of an empty tensor".into()));
            }
            Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64))
        })
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.unary("sum_axis", Op::SumAxis(self.id, axis), |a| {
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(Error::shape("sum_axis", shape, &[axis]));
            }
            let outer: usize = shape[..axis].iter().product();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for (d, v) in data[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(&a.data()[base..base + inner])
                    {
                        *d += v;
                    }
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape.remove(axis);
            Tensor::new(out_shape, data)
        })
    }

    /// Sum over the last axis.
    pub fn sum_last(&self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(Error::shape("sum_last", &[], &[]));
        }
        self.sum_axis(rank - 1)
    }

    /// Mean over the last axis.
    pub fn mean_last(&self) -> Result<Var<'t>> {
        let width = *self.shape().last().ok_or_else(|| Error::shape("mean_last", &[], &[]))?;
        self.sum_last()?.scale(1.0 / width as f64)
    }

    /// Repeats every entry `k` times along a new trailing axis.
    pub fn expand_last(&self, k: usize) -> Result<Var<'t>> {
        self.unary("expand_last", Op::ExpandLast(self.id), |a| {
            let data = a
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, k))
                .collect();
            let mut shape = a.shape().to_vec();
            shape.push(k);
            Tensor::new(shape, data)
        })
    }

    /// Adds a bias vector to every row of a rank-2 tensor.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id.0].value, &nodes[bias.id.0].value);
            if a.rank() != 2 || b.rank() != 1 || a.shape()[1] != b.numel() {
                return Err(Error::shape("add_bias", a.shape(), b.shape()));
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(b.numel()) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        };
        self.tape.record("add_bias", value, Op::AddBias(self.id, bias.id))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        self.unary("reshape", Op::Reshape(self.id), |a| a.clone().reshape(shape.clone()))
    }

    /// Picks entry `index[i]` from the i-th slice along the last axis.
    pub fn gather(&self, index: &[usize]) -> Result<Var<'t>> {
        self.unary("gather", Op::Gather(self.id, index.to_vec()), |a| {
            let width = a.last_dim();
            let rows = a.numel() / width.max(1);
            if index.len() != rows {
                return Err(Error::shape("gather", a.shape(), &[index.len()]));
            }
            if let Some(&bad) = index.iter().find(|&&j| j >= width) {
                return Err(Error::Data(format!("index {bad} out of range for width {width}")));
            }
            let data = index
                .iter()
                .enumerate()
                .map(|(r, &j)| a.data()[r * width + j])
                .collect();
            Tensor::new(a.shape()[..a.rank() - 1].to_vec(), data)
        })
    }

    /// Elementwise binary cross-entropy of probabilities against a fixed target.
    pub fn bce(&self, target: &Tensor) -> Result<Var<'t>> {
        let q = target.data().to_vec();
        self.unary("bce", Op::Bce(self.id, q.clone()), |p| {
            if p.shape() != target.shape() {
                return Err(Error::shape("bce", p.shape(), target.shape()));
            }
            if let Some(bad) = p.data().iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
                return Err(Error::domain("bce", format!("probability {bad} outside (0,1)")));
            }
            let data = p
                .data()
                .iter()
                .zip(&q)
                .map(|(&pi, &qi)| -(qi * pi.ln() + (1.0 - qi) * (1.0 - pi).ln()))
                .collect();
            Tensor::new(p.shape().to_vec(), data)
        })
    }
}

/// Free-function spelling of [`Var::matmul`].
pub fn matmul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.matmul(b)
}

pub fn softmax(z: Var<'_>, temperature: f64) -> Result<Var<'_>> {
    z.softmax(temperature)
}

pub fn log_softmax(z: Var<'_>, temperature: f64) -> Result<Var<'_>> {
    z.log_softmax(temperature)
}

pub fn stop_gradient(a: Var<'_>) -> Var<'_> {
    a.stop_gradient()
}
