//! Dense NCHW tensors in f32 and the small set of elementwise/reduction
//! operations the inference graph is built from. Tensors are immutable once
//! constructed and always hold finite values.

use crate::error::{Error, Result};
use std::fmt;

/// Shape of a rank-4 tensor in NCHW order.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Total number of elements.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Immutable rank-4 tensor. All elements are finite; constructors reject
/// NaN and infinity so downstream kernels never have to re-check.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, validating element count and finiteness.
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::EmptyInput(format!(
                "tensor shape {shape} has a zero dimension"
            )));
        }
        if data.len() != shape.count() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape} needs {} elements, got {}",
                shape.count(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {i} of tensor {shape} is {}",
                data[i]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels whose outputs are finite by
    /// construction. Debug builds still verify the element count.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.count());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::from_parts(shape, vec![0.0; shape.count()])
    }

    pub fn full(shape: Shape, value: f32) -> Result<Self> {
        Tensor::new(shape, vec![value; shape.count()])
    }

    /// A (1,1,1,1) tensor holding one value, for scalar broadcasts.
    pub fn scalar(value: f32) -> Result<Self> {
        Tensor::new(Shape::new(1, 1, 1, 1), vec![value])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.count());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let s = &self.shape;
        debug_assert!(n < s.n && c < s.c && y < s.h && x < s.w);
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    /// Contiguous H*W slice for one (batch, channel) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let s = &self.shape;
        let hw = s.h * s.w;
        let start = (n * s.c + c) * hw;
        &self.data[start..start + hw]
    }

    /// Copies a half-open channel range into a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape;
        if start >= end || end > s.c {
            return Err(Error::InvalidArgument(format!(
                "channel slice {start}..{end} out of range for {} channels",
                s.c
            )));
        }
        let hw = s.h * s.w;
        let out_shape = Shape::new(s.n, end - start, s.h, s.w);
        let mut data = Vec::with_capacity(out_shape.count());
        for n in 0..s.n {
            let base = (n * s.c + start) * hw;
            data.extend_from_slice(&self.data[base..base + (end - start) * hw]);
        }
        Ok(Tensor::from_parts(out_shape, data))
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// How the right-hand operand lines up against the left in an elementwise op.
enum Broadcast {
    Same,
    Scalar,
    PerChannel,
    Spatial,
}

fn resolve_broadcast(a: Shape, b: Shape) -> Result<Broadcast> {
    if b == a {
        return Ok(Broadcast::Same);
    }
    if b == Shape::new(1, 1, 1, 1) {
        return Ok(Broadcast::Scalar);
    }
    if b == Shape::new(1, a.c, 1, 1) {
        return Ok(Broadcast::PerChannel);
    }
    if b == Shape::new(1, 1, a.h, a.w) {
        return Ok(Broadcast::Spatial);
    }
    Err(Error::NotBroadcastable(format!(
        "rhs {b} does not broadcast onto lhs {a}"
    )))
}

fn ewise(a: &Tensor, b: &Tensor, op: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    let sa = a.shape();
    let mode = resolve_broadcast(sa, b.shape())?;
    let hw = sa.h * sa.w;
    let mut out = Vec::with_capacity(sa.count());
    match mode {
        Broadcast::Same => {
            out.extend(a.data().iter().zip(b.data()).map(|(&x, &y)| op(x, y)));
        }
        Broadcast::Scalar => {
            let v = b.data()[0];
            out.extend(a.data().iter().map(|&x| op(x, v)));
        }
        Broadcast::PerChannel => {
            for n in 0..sa.n {
                for c in 0..sa.c {
                    let v = b.data()[c];
                    out.extend(a.plane(n, c).iter().map(|&x| op(x, v)));
                }
            }
        }
        Broadcast::Spatial => {
            let map = b.data();
            for n in 0..sa.n {
                for c in 0..sa.c {
                    let plane = a.plane(n, c);
                    out.extend((0..hw).map(|i| op(plane[i], map[i])));
                }
            }
        }
    }
    Ok(Tensor::from_parts(sa, out))
}

/// Elementwise sum. The right operand may be the same shape, a (1,1,1,1)
/// scalar, a (1,C,1,1) per-channel vector, or a (1,1,H,W) spatial map.
pub fn ewise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ewise(a, b, |x, y| x + y)
}

/// Elementwise product with the same broadcast rules as [`ewise_add`].
pub fn ewise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ewise(a, b, |x, y| x * y)
}

/// Concatenates tensors along the channel axis. Batch and spatial dims must
/// agree across all parts.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::EmptyInput("concat of zero tensors".into()));
    }
    let first = parts[0].shape();
    let mut c_total = 0;
    for t in parts {
        let s = t.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::ShapeMismatch(format!(
                "concat part {s} does not match leading part {first}"
            )));
        }
        c_total += s.c;
    }
    let out_shape = Shape::new(first.n, c_total, first.h, first.w);
    let mut data = Vec::with_capacity(out_shape.count());
    for n in 0..first.n {
        for t in parts {
            let s = t.shape();
            let hw = s.h * s.w;
            let base = n * s.c * hw;
            data.extend_from_slice(&t.data()[base..base + s.c * hw]);
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Global average pool: (N,C,H,W) -> (N,C,1,1). Accumulates in f64 so the
/// mean of values in [lo,hi] stays inside [lo,hi] after rounding back.
pub fn gap(t: &Tensor) -> Tensor {
    let s = t.shape();
    let hw = (s.h * s.w) as f64;
    let mut out = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let sum: f64 = t.plane(n, c).iter().map(|&v| v as f64).sum();
            out.push((sum / hw) as f32);
        }
    }
    Tensor::from_parts(Shape::new(s.n, s.c, 1, 1), out)
}
