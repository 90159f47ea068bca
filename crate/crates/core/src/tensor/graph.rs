use super::kernels::{self, HistRange};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    /// Input and the derivative evaluated during the forward pass.
    Mish(Var, Tensor<T>),
    Concat(Vec<Var>),
    Upsample {
        input: Var,
        factor: usize,
    },
    GlobalAvgPool(Var),
    SoftmaxFirst(Var, Var),
    Affine {
        input: Var,
        scale: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleByChannel {
        input: Var,
        scale: Var,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Laplacian(Var),
    SoftHistogram {
        input: Var,
        bins: usize,
        ranges: Vec<HistRange<T>>,
    },
    SampleNorm(Var),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// A differentiable value: its tensor, the accumulated gradient, and the
/// operation that produced it. Nodes are appended in evaluation order, so the
/// tape is already topologically sorted.
///
/// One graph is driven by one thread at a time; independent graphs can be
/// built concurrently.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    /// A trainable leaf; backward accumulates into its gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a new constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // -----------------------------------------------------------------------
    // Operations

    /// `kernel` is `(c_out, c_in, 3, 3)`, `bias` is `(1, c_out, 1, 1)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let b = self.value(bias);
        if b.shape() != Shape::new(1, b.numel(), 1, 1) {
            return Err(Error::invalid(
                "conv2d",
                format!("bias must be shaped (1, c_out, 1, 1), got {}", b.shape()),
            ));
        }
        let value = kernels::conv2d(self.value(input), self.value(kernel), b.data(), stride)?;
        Ok(self.derived(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn mish(&mut self, input: Var) -> Var {
        if !self.requires_grad(input) {
            let value = kernels::mish(self.value(input));
            return self.push(value, Op::Leaf, false);
        }
        let (value, derivative) = kernels::mish_with_derivative(self.value(input));
        self.derived(value, Op::Mish(input, derivative), &[input])
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let value = kernels::concat_channels(&values)?;
        Ok(self.derived(value, Op::Concat(inputs.to_vec()), inputs))
    }

    pub fn bilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let value = kernels::bilinear_upsample(self.value(input), factor)?;
        Ok(self.derived(value, Op::Upsample { input, factor }, &[input]))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let value = kernels::global_avg_pool(self.value(input));
        self.derived(value, Op::GlobalAvgPool(input), &[input])
    }

    /// Two-way softmax of `a` and `b` per element. The second member is
    /// computed as one minus the first.
    pub fn softmax_pair(&mut self, a: Var, b: Var) -> Result<(Var, Var)> {
        let value = kernels::softmax_first(self.value(a), self.value(b))?;
        let first = self.derived(value, Op::SoftmaxFirst(a, b), &[a, b]);
        let second = self.affine(first, -T::one(), T::one());
        Ok((first, second))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Var {
        let value = self.value(input).map(|x| scale * x + shift);
        self.derived(value, Op::Affine { input, scale }, &[input])
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        self.affine(input, factor, T::zero())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::add(self.value(a), self.value(b))?;
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::sub(self.value(a), self.value(b))?;
        Ok(self.derived(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::zip_with("multiply", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale_by_channel(&mut self, input: Var, scale: Var) -> Result<Var> {
        let value = kernels::scale_by_channel(self.value(input), self.value(scale))?;
        Ok(self.derived(value, Op::ScaleByChannel { input, scale }, &[input, scale]))
    }

    /// Scalar mean squared error.
    pub fn mse(&mut self, x: Var, y: Var) -> Result<Var> {
        let value = kernels::mse(self.value(x), self.value(y))?;
        Ok(self.derived(
            Tensor::scalar(T::from_f64_lossy(value)),
            Op::Mse(x, y),
            &[x, y],
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|v| v.as_f64()).sum();
        self.derived(
            Tensor::scalar(T::from_f64_lossy(total)),
            Op::Sum(input),
            &[input],
        )
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let mean = v.data().iter().map(|x| x.as_f64()).sum::<f64>() / v.numel() as f64;
        self.derived(
            Tensor::scalar(T::from_f64_lossy(mean)),
            Op::Mean(input),
            &[input],
        )
    }

    /// Fixed 4-neighbour Laplacian stencil on every plane.
    pub fn laplacian(&mut self, input: Var) -> Var {
        let value = kernels::laplacian(self.value(input));
        self.derived(value, Op::Laplacian(input), &[input])
    }

    /// Per-sample soft histogram with one value range per sample; see
    /// [`kernels::soft_histogram`].
    pub fn soft_histogram(
        &mut self,
        input: Var,
        bins: usize,
        ranges: Vec<HistRange<T>>,
    ) -> Result<Var> {
        let value = kernels::soft_histogram(self.value(input), bins, &ranges)?;
        Ok(self.derived(
            value,
            Op::SoftHistogram {
                input,
                bins,
                ranges,
            },
            &[input],
        ))
    }

    /// Euclidean norm of each sample, shape `(n, 1, 1, 1)`.
    pub fn sample_norm(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let s = v.shape();
        let data = (0..s.n)
            .map(|n| {
                let sq: f64 = v.sample(n).iter().map(|x| x.as_f64() * x.as_f64()).sum();
                T::from_f64_lossy(sq.sqrt())
            })
            .collect();
        let value = Tensor::new(Shape::new(s.n, 1, 1, 1), data).expect("norm shape");
        self.derived(value, Op::SampleNorm(input), &[input])
    }

    // -----------------------------------------------------------------------
    // Reverse pass

    /// Accumulates `d output / d leaf` into every trainable leaf reachable from
    /// `output`. Gradients from repeated calls add up until [`Self::zero_grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let shape = self.shape(output);
        if shape.numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mut adjoints: Vec<Option<Tensor<T>>> = Vec::new();
        adjoints.resize_with(output.0 + 1, || None);
        adjoints[output.0] = Some(Tensor::ones(shape));

        for i in (0..=output.0).rev() {
            let Some(grad) = adjoints[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                node.grad = Some(match node.grad.take() {
                    Some(acc) => kernels::add(&acc, &grad)?,
                    None => grad,
                });
                continue;
            }
            for (parent, contribution) in self.local_grads(i, &grad)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                let slot = &mut adjoints[parent.0];
                *slot = Some(match slot.take() {
                    Some(acc) => kernels::add(&acc, &contribution)?,
                    None => contribution,
                });
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` with respect to its parents.
    fn local_grads(&self, i: usize, grad: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let scalar_grad = || grad.item();
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let g = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    grad,
                    *stride,
                    needs(*input),
                )?;
                let bias_shape = self.shape(*bias);
                let mut out = vec![
                    (*kernel, g.kernel),
                    (*bias, Tensor::new(bias_shape, g.bias)?),
                ];
                if let Some(dx) = g.input {
                    out.push((*input, dx));
                }
                out
            }
            Op::Mish(input, derivative) => {
                vec![(*input, kernels::mish_backward_cached(derivative, grad))]
            }
            Op::Concat(inputs) => {
                let widths: Vec<usize> = inputs.iter().map(|v| self.shape(*v).c).collect();
                let parts = kernels::split_channels(grad, &widths)?;
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Upsample { input, factor } => vec![(
                *input,
                kernels::bilinear_upsample_backward(self.shape(*input), grad, *factor)?,
            )],
            Op::GlobalAvgPool(input) => vec![(
                *input,
                kernels::global_avg_pool_backward(self.shape(*input), grad),
            )],
            Op::SoftmaxFirst(a, b) => {
                let p = &node.value;
                let da = kernels::zip_with("softmax_pair", p, grad, |p, g| g * p * (T::one() - p))?;
                let db = da.map(|x| -x);
                vec![(*a, da), (*b, db)]
            }
            Op::Affine { input, scale } => vec![(*input, grad.map(|g| g * *scale))],
            Op::Add(a, b) => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Sub(a, b) => vec![(*a, grad.clone()), (*b, grad.map(|g| -g))],
            Op::Mul(a, b) => vec![
                (
                    *a,
                    kernels::zip_with("multiply", grad, self.value(*b), |g, y| g * y)?,
                ),
                (
                    *b,
                    kernels::zip_with("multiply", grad, self.value(*a), |g, x| g * x)?,
                ),
            ],
            Op::ScaleByChannel { input, scale } => {
                let x = self.value(*input);
                let s = x.shape();
                let dx = kernels::scale_by_channel(grad, self.value(*scale))?;
                let ds: Vec<T> = grad
                    .data()
                    .chunks(s.plane())
                    .zip(x.data().chunks(s.plane()))
                    .map(|(g, x)| {
                        T::from_f64_lossy(
                            g.iter().zip(x).map(|(g, x)| g.as_f64() * x.as_f64()).sum(),
                        )
                    })
                    .collect();
                vec![(*input, dx), (*scale, Tensor::new(self.shape(*scale), ds)?)]
            }
            Op::Mse(x, y) => {
                let n = T::from_usize(self.value(*x).numel()).expect("element count");
                let two_g = (T::one() + T::one()) * scalar_grad() / n;
                let dx = kernels::zip_with("mse", self.value(*x), self.value(*y), |a, b| {
                    two_g * (a - b)
                })?;
                let dy = dx.map(|d| -d);
                vec![(*x, dx), (*y, dy)]
            }
            Op::Sum(input) => vec![(*input, Tensor::full(self.shape(*input), scalar_grad()))],
            Op::Mean(input) => {
                let s = self.shape(*input);
                let n = T::from_usize(s.numel()).expect("element count");
                vec![(*input, Tensor::full(s, scalar_grad() / n))]
            }
            Op::Laplacian(input) => vec![(*input, kernels::laplacian(grad))],
            Op::SoftHistogram {
                input,
                bins,
                ranges,
            } => vec![(
                *input,
                kernels::soft_histogram_backward(self.value(*input), *bins, ranges, grad),
            )],
            Op::SampleNorm(input) => {
                let x = self.value(*input);
                let s = x.shape();
                let mut dx = Vec::with_capacity(s.numel());
                for n in 0..s.n {
                    let norm = node.value.data()[n];
                    // The norm is not differentiable at zero; use the zero subgradient.
                    let k = if norm > T::zero() {
                        grad.data()[n] / norm
                    } else {
                        T::zero()
                    };
                    dx.extend(x.sample(n).iter().map(|&v| v * k));
                }
                vec![(*input, Tensor::new(s, dx)?)]
            }
        };
        Ok(out)
    }
}
