use super::{NumError, Real, Tensor};
use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};
use std::cell::{Cell, RefCell};
use std::rc::Rc;

/// Elementwise unary primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Sin,
    Cos,
    Sigmoid,
    Softplus,
    Silu,
    Tanh,
    Square,
    Recip,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Sqrt => "sqrt",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Silu => "silu",
            Unary::Tanh => "tanh",
            Unary::Square => "square",
            Unary::Recip => "recip",
        }
    }

    #[inline]
    fn apply<R: Real>(self, x: R) -> R {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Square => x * x,
            Unary::Recip => x.recip(),
        }
    }

    /// Derivative from input `x` and output `y`.
    #[inline]
    fn deriv<R: Real>(self, x: R, y: R) -> R {
        match self {
            Unary::Neg => -R::one(),
            Unary::Exp => y,
            Unary::Ln => x.recip(),
            Unary::Sqrt => R::lit(0.5) / y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sigmoid => y * (R::one() - y),
            Unary::Softplus => sigmoid(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (R::one() - s)
            }
            Unary::Tanh => R::one() - y * y,
            Unary::Square => x + x,
            Unary::Recip => -y * y,
        }
    }
}

#[inline]
pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug)]
struct ConvSpec {
    stride: usize,
    pad: usize,
    kernel: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    MulScalarVar(usize, usize),
    Scale(usize, R),
    AddScalar(usize),
    Unary(usize, Unary),
    MatMul(usize, usize),
    Sum(usize),
    Reshape(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
    PosEnc(usize, usize),
    FilmSilu {
        x: usize,
        weight: usize,
        bias: usize,
        gamma: usize,
        beta: usize,
        pre: Rc<Array2<R>>,
        gate: Rc<Array2<R>>,
    },
    Composite {
        sigma: usize,
        color: usize,
        t: Rc<Array2<R>>,
        delta: Rc<Array2<R>>,
        far: R,
        eps: R,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        spec: ConvSpec,
        cols: Rc<Array2<R>>,
    },
}

impl<R> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::MulScalarVar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(_, u) => u.name(),
            Op::MatMul(..) => "matmul",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::PosEnc(..) => "posenc",
            Op::FilmSilu { .. } => "film_silu",
            Op::Composite { .. } => "composite",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

struct Node<R> {
    value: Rc<Tensor<R>>,
    op: Op<R>,
    tracked: bool,
}

/// Records primitive evaluations in order so gradients can be replayed in
/// exact reverse order.
///
/// A tape is single-threaded; independent tapes share nothing and may live on
/// different threads.
pub struct Tape<R: Real> {
    nodes: RefCell<Vec<Node<R>>>,
    fault: Cell<Option<&'static str>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, R: Real> {
    tape: &'t Tape<R>,
    idx: usize,
}

impl<R: Real> std::fmt::Debug for Var<'_, R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First primitive that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.fault.get()
    }

    /// Fails with the first recorded non-finite primitive.
    pub fn check(&self) -> Result<(), NumError> {
        match self.fault.get() {
            Some(op) => Err(NumError::NonFinite { op }),
            None => Ok(()),
        }
    }

    /// Tracked leaf: gradients flow into it.
    pub fn param(&self, value: Tensor<R>) -> Var<'_, R> {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&self, value: Tensor<R>) -> Var<'_, R> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: R) -> Var<'_, R> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn push(&self, value: Tensor<R>, op: Op<R>, tracked: bool) -> Var<'_, R> {
        if self.fault.get().is_none() && !value.iter().all(|v| v.is_finite()) {
            self.fault.set(Some(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn value_of(&self, idx: usize) -> Rc<Tensor<R>> {
        self.nodes.borrow()[idx].value.clone()
    }

    fn tracked(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].tracked
    }

    /// Reverse sweep from a scalar `output`; returns the gradient of every
    /// node (zeros for nodes the output does not depend on).
    fn backward(&self, output: usize) -> Result<Vec<Option<Tensor<R>>>, NumError> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output].value.shape().to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(NumError::NotScalar(out_shape));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output] = Some(ArrayD::from_elem(IxDyn(&out_shape), R::one()));
        for idx in (0..=output).rev() {
            let node = &nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(NumError::NonFinite {
                    op: node.op.name(),
                });
            }
            backprop(&nodes, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradients of scalar `output` with respect to `wrt`, in order.
    /// Leaves the output does not reach get all-zero gradients.
    pub fn gradients(&self, output: Var<'_, R>, wrt: &[Var<'_, R>]) -> Result<Vec<Tensor<R>>, NumError> {
        self.check()?;
        let mut grads = self.backward(output.idx)?;
        Ok(wrt
            .iter()
            .map(|v| {
                grads[v.idx]
                    .take()
                    .unwrap_or_else(|| ArrayD::zeros(v.shape()))
            })
            .collect())
    }
}

fn accum<R: Real>(grads: &mut [Option<Tensor<R>>], idx: usize, g: Tensor<R>) {
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn as2<R: Real>(t: &Tensor<R>) -> ArrayView2<'_, R> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn backprop<R: Real>(nodes: &[Node<R>], idx: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
    let tracked = |i: usize| nodes[i].tracked;
    let val = |i: usize| &*nodes[i].value;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if tracked(*a) {
                accum(grads, *a, g.clone());
            }
            if tracked(*b) {
                accum(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if tracked(*a) {
                accum(grads, *a, g.clone());
            }
            if tracked(*b) {
                accum(grads, *b, g.mapv(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if tracked(*a) {
                accum(grads, *a, g * val(*b));
            }
            if tracked(*b) {
                accum(grads, *b, g * val(*a));
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if tracked(*a) {
                accum(grads, *a, g / bv);
            }
            if tracked(*b) {
                let y = val(idx);
                let mut gb = g * y;
                Zip::from(&mut gb).and(bv).for_each(|x, &d| *x = -*x / d);
                accum(grads, *b, gb);
            }
        }
        Op::AddRow(a, row) => {
            if tracked(*a) {
                accum(grads, *a, g.clone());
            }
            if tracked(*row) {
                let gr = as2(g).sum_axis(Axis(0));
                accum(grads, *row, gr.into_shape_with_order(val(*row).raw_dim()).unwrap());
            }
        }
        Op::MulRow(a, row) => {
            let rv = val(*row);
            let r1 = rv.view().into_shape_with_order(rv.len()).unwrap();
            if tracked(*a) {
                let ga = as2(g).to_owned() * &r1;
                accum(grads, *a, ga.into_dyn());
            }
            if tracked(*row) {
                let gr = (as2(g).to_owned() * &as2(val(*a))).sum_axis(Axis(0));
                accum(grads, *row, gr.into_shape_with_order(rv.raw_dim()).unwrap());
            }
        }
        Op::MulCol(a, col) => {
            let cv = val(*col);
            let c2 = cv.view().into_shape_with_order((cv.len(), 1)).unwrap();
            if tracked(*a) {
                let ga = as2(g).to_owned() * &c2;
                accum(grads, *a, ga.into_dyn());
            }
            if tracked(*col) {
                let gc = (as2(g).to_owned() * &as2(val(*a))).sum_axis(Axis(1));
                accum(grads, *col, gc.into_shape_with_order(cv.raw_dim()).unwrap());
            }
        }
        Op::MulScalarVar(a, s) => {
            let sv = val(*s).iter().next().copied().unwrap();
            if tracked(*a) {
                accum(grads, *a, g.mapv(|v| v * sv));
            }
            if tracked(*s) {
                let total: R = Zip::from(g).and(val(*a)).fold(R::zero(), |acc, &x, &y| acc + x * y);
                accum(grads, *s, ArrayD::from_elem(val(*s).raw_dim(), total));
            }
        }
        Op::Scale(a, c) => {
            if tracked(*a) {
                let c = *c;
                accum(grads, *a, g.mapv(|v| v * c));
            }
        }
        Op::AddScalar(a) => {
            if tracked(*a) {
                accum(grads, *a, g.clone());
            }
        }
        Op::Unary(a, u) => {
            if tracked(*a) {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(val(*a))
                    .and(val(idx))
                    .for_each(|gv, &x, &y| *gv = *gv * u.deriv(x, y));
                accum(grads, *a, ga);
            }
        }
        Op::MatMul(a, b) => {
            let g2 = as2(g);
            if tracked(*a) {
                accum(grads, *a, g2.dot(&as2(val(*b)).t()).into_dyn());
            }
            if tracked(*b) {
                accum(grads, *b, as2(val(*a)).t().dot(&g2).into_dyn());
            }
        }
        Op::Sum(a) => {
            if tracked(*a) {
                let gv = *g.iter().next().unwrap();
                accum(grads, *a, ArrayD::from_elem(val(*a).raw_dim(), gv));
            }
        }
        Op::Reshape(a) => {
            if tracked(*a) {
                accum(
                    grads,
                    *a,
                    g.as_standard_layout().into_owned().into_shape_with_order(val(*a).raw_dim()).unwrap(),
                );
            }
        }
        Op::Transpose(a) => {
            if tracked(*a) {
                accum(grads, *a, as2(g).t().as_standard_layout().into_owned().into_dyn());
            }
        }
        Op::ConcatCols(parts) => {
            let g2 = as2(g);
            let mut start = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                if tracked(p) {
                    accum(grads, p, g2.slice(s![.., start..start + w]).to_owned().into_dyn());
                }
                start += w;
            }
        }
        Op::SliceCols(a, start) => {
            if tracked(*a) {
                let av = val(*a);
                let w = g.shape()[1];
                let mut ga = Array2::<R>::zeros((av.shape()[0], av.shape()[1]));
                ga.slice_mut(s![.., *start..*start + w]).assign(&as2(g));
                accum(grads, *a, ga.into_dyn());
            }
        }
        Op::GatherRows(a, index) => {
            if tracked(*a) {
                let av = val(*a);
                let mut ga = Array2::<R>::zeros((av.shape()[0], av.shape()[1]));
                let g2 = as2(g);
                for (row, &src) in index.iter().enumerate() {
                    let mut dst = ga.row_mut(src);
                    dst += &g2.row(row);
                }
                accum(grads, *a, ga.into_dyn());
            }
        }
        Op::PosEnc(x, octaves) => {
            if tracked(*x) {
                let xv = as2(val(*x));
                let g2 = as2(g);
                let (n, d) = xv.dim();
                let mut gx = Array2::<R>::zeros((n, d));
                for i in 0..n {
                    for j in 0..d {
                        let mut acc = g2[[i, j]];
                        let mut freq = R::lit(std::f64::consts::PI);
                        for k in 0..*octaves {
                            let arg = freq * xv[[i, j]];
                            let col_sin = d + 2 * k * d + j;
                            let col_cos = col_sin + d;
                            acc += freq * (g2[[i, col_sin]] * arg.cos() - g2[[i, col_cos]] * arg.sin());
                            freq = freq + freq;
                        }
                        gx[[i, j]] = acc;
                    }
                }
                accum(grads, *x, gx.into_dyn());
            }
        }
        Op::FilmSilu {
            x,
            weight,
            bias,
            gamma,
            beta,
            pre,
            gate,
        } => {
            let g2 = as2(g);
            let gv = val(*gamma);
            let bv = val(*beta);
            let gam = gv.view().into_shape_with_order(gv.len()).unwrap();
            let bet = bv.view().into_shape_with_order(bv.len()).unwrap();
            // gradient at the activation input a = pre * gamma + beta
            let o = gam.len();
            let (gam_v, bet_v) = (gam.to_vec(), bet.to_vec());
            let g_std = g2.as_standard_layout();
            let mut ga = Array2::<R>::zeros(pre.raw_dim());
            let chunks = ga.as_slice_mut().unwrap().chunks_exact_mut(o);
            let inputs = g_std.as_slice().unwrap().chunks_exact(o);
            let pres = pre.as_slice().unwrap().chunks_exact(o);
            let gates = gate.as_slice().unwrap().chunks_exact(o);
            for (((out, gv), u), sg) in chunks.zip(inputs).zip(pres).zip(gates) {
                for j in 0..o {
                    let a = u[j] * gam_v[j] + bet_v[j];
                    out[j] = gv[j] * (sg[j] + a * sg[j] * (R::one() - sg[j]));
                }
            }
            if tracked(*gamma) {
                let gg = (&ga * &**pre).sum_axis(Axis(0));
                accum(grads, *gamma, gg.into_shape_with_order(gv.raw_dim()).unwrap());
            }
            if tracked(*beta) {
                accum(grads, *beta, ga.sum_axis(Axis(0)).into_shape_with_order(bv.raw_dim()).unwrap());
            }
            let gu = ga * &gam;
            if tracked(*bias) {
                let bsh = val(*bias).raw_dim();
                accum(grads, *bias, gu.sum_axis(Axis(0)).into_shape_with_order(bsh).unwrap());
            }
            if tracked(*weight) {
                accum(grads, *weight, as2(val(*x)).t().dot(&gu).into_dyn());
            }
            if tracked(*x) {
                accum(grads, *x, gu.dot(&as2(val(*weight)).t()).into_dyn());
            }
        }
        Op::Composite {
            sigma,
            color,
            t,
            delta,
            far,
            eps,
        } => {
            composite_backward(nodes, idx, *sigma, *color, t, delta, *far, *eps, g, grads);
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            spec,
            cols,
        } => {
            let wv = val(*weight);
            let (o, c, k, _) = wv.dim4();
            let (oh, ow) = spec.out_hw;
            let g2 = g.as_standard_layout().into_owned().into_shape_with_order((o, oh * ow)).unwrap();
            if tracked(*bias) {
                accum(grads, *bias, g2.sum_axis(Axis(1)).into_dyn());
            }
            if tracked(*weight) {
                let gw = g2.dot(&cols.t());
                accum(grads, *weight, gw.as_standard_layout().into_owned().into_shape_with_order((o, c, k, k)).unwrap().into_dyn());
            }
            if tracked(*input) {
                let w2 = wv.view().into_shape_with_order((o, c * k * k)).unwrap();
                let gcols = w2.t().dot(&g2);
                let gx = col2im(&gcols, c, spec);
                accum(grads, *input, gx.into_dyn());
            }
        }
    }
}

trait Dim4 {
    fn dim4(&self) -> (usize, usize, usize, usize);
}

impl<R> Dim4 for Tensor<R> {
    fn dim4(&self) -> (usize, usize, usize, usize) {
        let s = self.shape();
        (s[0], s[1], s[2], s[3])
    }
}

#[allow(clippy::too_many_arguments)]
fn composite_backward<R: Real>(
    nodes: &[Node<R>],
    idx: usize,
    sigma: usize,
    color: usize,
    t: &Array2<R>,
    delta: &Array2<R>,
    far: R,
    eps: R,
    g: &Tensor<R>,
    grads: &mut [Option<Tensor<R>>],
) {
    let sv = as2(&nodes[sigma].value);
    let cv = nodes[color].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let out = as2(&nodes[idx].value);
    let g2 = as2(g);
    let (rays, samples) = sv.dim();
    let mut gsig = Array2::<R>::zeros((rays, samples));
    let mut gcol = Array3::<R>::zeros((rays, samples, 3));
    let mut w = vec![R::zero(); samples];
    let mut t_after = vec![R::zero(); samples];
    let mut q = vec![R::zero(); samples];
    for r in 0..rays {
        let alpha = out[[r, 3]];
        let mut d_num = R::zero();
        let mut trans = R::one();
        for i in 0..samples {
            let e = (-sv[[r, i]] * delta[[r, i]]).exp();
            w[i] = trans * (R::one() - e);
            trans = trans * e;
            t_after[i] = trans;
            d_num += w[i] * t[[r, i]];
        }
        let g_depth = g2[[r, 4]];
        let (g_d, g_a_depth) = if alpha >= eps {
            (g_depth / alpha, -g_depth * d_num / (alpha * alpha))
        } else {
            (g_depth / eps, -g_depth * far / eps)
        };
        let g_a = g2[[r, 3]] + g_a_depth;
        for i in 0..samples {
            q[i] = g2[[r, 0]] * cv[[r, i, 0]]
                + g2[[r, 1]] * cv[[r, i, 1]]
                + g2[[r, 2]] * cv[[r, i, 2]]
                + g_a
                + g_d * t[[r, i]];
            for ch in 0..3 {
                gcol[[r, i, ch]] = w[i] * g2[[r, ch]];
            }
        }
        let mut suffix = R::zero();
        for i in (0..samples).rev() {
            gsig[[r, i]] = delta[[r, i]] * (t_after[i] * q[i] - suffix);
            suffix += w[i] * q[i];
        }
    }
    if nodes[sigma].tracked {
        accum(grads, sigma, gsig.into_dyn());
    }
    if nodes[color].tracked {
        accum(grads, color, gcol.into_dyn());
    }
}

fn im2col<R: Real>(x: &Array3<R>, kernel: usize, stride: usize, pad: usize, out_hw: (usize, usize)) -> Array2<R> {
    let (c, h, w) = x.dim();
    let (oh, ow) = out_hw;
    let mut cols = Array2::<R>::zeros((c * kernel * kernel, oh * ow));
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<R: Real>(cols: &Array2<R>, c: usize, spec: &ConvSpec) -> Array3<R> {
    let (h, w) = spec.in_hw;
    let (oh, ow) = spec.out_hw;
    let k = spec.kernel;
    let mut x = Array3::<R>::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ch * k + ky) * k + kx);
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ch, iy as usize, ix as usize]] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

impl<'t, R: Real> Var<'t, R> {
    pub fn tape(&self) -> &'t Tape<R> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<R>> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.idx)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> R {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn record(&self, value: Tensor<R>, op: Op<R>, inputs: &[usize]) -> Var<'t, R> {
        let tracked = inputs.iter().any(|&i| self.tape.tracked(i));
        self.tape.push(value, op, tracked)
    }

    fn binary(&self, other: Var<'t, R>, f: impl Fn(&Tensor<R>, &Tensor<R>) -> Tensor<R>, op: Op<R>, name: &str) -> Var<'t, R> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "{name}: shape mismatch");
        self.record(f(&a, &b), op, &[self.idx, other.idx])
    }

    pub fn add(&self, other: Var<'t, R>) -> Var<'t, R> {
        self.binary(other, |a, b| a + b, Op::Add(self.idx, other.idx), "add")
    }

    pub fn sub(&self, other: Var<'t, R>) -> Var<'t, R> {
        self.binary(other, |a, b| a - b, Op::Sub(self.idx, other.idx), "sub")
    }

    pub fn mul(&self, other: Var<'t, R>) -> Var<'t, R> {
        self.binary(other, |a, b| a * b, Op::Mul(self.idx, other.idx), "mul")
    }

    pub fn div(&self, other: Var<'t, R>) -> Var<'t, R> {
        self.binary(other, |a, b| a / b, Op::Div(self.idx, other.idx), "div")
    }

    /// `N×D + row` with `row` holding `D` values.
    pub fn add_row(&self, row: Var<'t, R>) -> Var<'t, R> {
        let (a, r) = (self.value(), row.value());
        let r1 = r.view().into_shape_with_order(r.len()).unwrap();
        let out = &as2(&a) + &r1;
        self.record(out.into_dyn(), Op::AddRow(self.idx, row.idx), &[self.idx, row.idx])
    }

    /// `N×D * row` with `row` holding `D` values.
    pub fn mul_row(&self, row: Var<'t, R>) -> Var<'t, R> {
        let (a, r) = (self.value(), row.value());
        let r1 = r.view().into_shape_with_order(r.len()).unwrap();
        let out = &as2(&a) * &r1;
        self.record(out.into_dyn(), Op::MulRow(self.idx, row.idx), &[self.idx, row.idx])
    }

    /// `N×D * col` with `col` holding `N` values.
    pub fn mul_col(&self, col: Var<'t, R>) -> Var<'t, R> {
        let (a, c) = (self.value(), col.value());
        let c2 = c.view().into_shape_with_order((c.len(), 1)).unwrap();
        let out = &as2(&a) * &c2;
        self.record(out.into_dyn(), Op::MulCol(self.idx, col.idx), &[self.idx, col.idx])
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar(&self, s: Var<'t, R>) -> Var<'t, R> {
        let sv = s.item();
        let out = self.value().mapv(|v| v * sv);
        self.record(out, Op::MulScalarVar(self.idx, s.idx), &[self.idx, s.idx])
    }

    pub fn scale(&self, c: R) -> Var<'t, R> {
        let out = self.value().mapv(|v| v * c);
        self.record(out, Op::Scale(self.idx, c), &[self.idx])
    }

    pub fn add_scalar(&self, c: R) -> Var<'t, R> {
        let out = self.value().mapv(|v| v + c);
        self.record(out, Op::AddScalar(self.idx), &[self.idx])
    }

    fn unary(&self, u: Unary) -> Var<'t, R> {
        let out = self.value().mapv(|v| u.apply(v));
        self.record(out, Op::Unary(self.idx, u), &[self.idx])
    }

    pub fn neg(&self) -> Var<'t, R> {
        self.unary(Unary::Neg)
    }
    pub fn exp(&self) -> Var<'t, R> {
        self.unary(Unary::Exp)
    }
    pub fn ln(&self) -> Var<'t, R> {
        self.unary(Unary::Ln)
    }
    pub fn sqrt(&self) -> Var<'t, R> {
        self.unary(Unary::Sqrt)
    }
    pub fn sin(&self) -> Var<'t, R> {
        self.unary(Unary::Sin)
    }
    pub fn cos(&self) -> Var<'t, R> {
        self.unary(Unary::Cos)
    }
    pub fn sigmoid(&self) -> Var<'t, R> {
        self.unary(Unary::Sigmoid)
    }
    pub fn softplus(&self) -> Var<'t, R> {
        self.unary(Unary::Softplus)
    }
    pub fn silu(&self) -> Var<'t, R> {
        self.unary(Unary::Silu)
    }
    pub fn tanh(&self) -> Var<'t, R> {
        self.unary(Unary::Tanh)
    }
    pub fn square(&self) -> Var<'t, R> {
        self.unary(Unary::Square)
    }
    pub fn recip(&self) -> Var<'t, R> {
        self.unary(Unary::Recip)
    }

    pub fn matmul(&self, other: Var<'t, R>) -> Var<'t, R> {
        let (a, b) = (self.value(), other.value());
        let out = as2(&a).dot(&as2(&b));
        self.record(out.into_dyn(), Op::MatMul(self.idx, other.idx), &[self.idx, other.idx])
    }

    pub fn sum(&self) -> Var<'t, R> {
        let total = self.value().sum();
        self.record(ArrayD::from_elem(IxDyn(&[]), total), Op::Sum(self.idx), &[self.idx])
    }

    pub fn mean(&self) -> Var<'t, R> {
        let n = self.value().len();
        self.sum().scale(R::one() / R::from_usize(n).unwrap())
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, R> {
        let out = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count");
        self.record(out, Op::Reshape(self.idx), &[self.idx])
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Var<'t, R> {
        let v = self.value();
        let out = as2(&v).t().as_standard_layout().into_owned();
        self.record(out.into_dyn(), Op::Transpose(self.idx), &[self.idx])
    }

    pub fn concat_cols(parts: &[Var<'t, R>]) -> Var<'t, R> {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| as2(v)).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts");
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        parts[0].record(out.into_dyn(), Op::ConcatCols(idx.clone()), &idx)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t, R> {
        let v = self.value();
        let out = as2(&v).slice(s![.., start..start + len]).to_owned();
        self.record(out.into_dyn(), Op::SliceCols(self.idx, start), &[self.idx])
    }

    pub fn gather_rows(&self, index: Rc<Vec<usize>>) -> Var<'t, R> {
        let v = self.value();
        let out = as2(&v).select(Axis(0), &index);
        self.record(out.into_dyn(), Op::GatherRows(self.idx, index), &[self.idx])
    }

    /// Positional encoding of an `N×D` coordinate block:
    /// `[x, sin(2^k π x), cos(2^k π x)]` for `k < octaves`, octave-major.
    pub fn posenc(&self, octaves: usize) -> Var<'t, R> {
        let v = self.value();
        let xv = as2(&v);
        let (n, d) = xv.dim();
        let width = d + 2 * octaves * d;
        let mut out = Array2::<R>::zeros((n, width));
        for i in 0..n {
            let mut row = out.row_mut(i);
            for j in 0..d {
                row[j] = xv[[i, j]];
            }
            let mut freq = R::lit(std::f64::consts::PI);
            for k in 0..octaves {
                for j in 0..d {
                    let (sn, cs) = (freq * xv[[i, j]]).sin_cos();
                    row[d + 2 * k * d + j] = sn;
                    row[d + 2 * k * d + d + j] = cs;
                }
                freq = freq + freq;
            }
        }
        self.record(out.into_dyn(), Op::PosEnc(self.idx, octaves), &[self.idx])
    }

    /// Fused modulated layer `silu((x W + b) ⊙ γ + β)` for `N×I` input, `I×O`
    /// weight and `O`-element bias, scale and shift.
    pub fn film_silu(&self, weight: Var<'t, R>, bias: Var<'t, R>, gamma: Var<'t, R>, beta: Var<'t, R>) -> Var<'t, R> {
        let (xv, wv, bv, gv, tv) = (self.value(), weight.value(), bias.value(), gamma.value(), beta.value());
        let o = wv.shape()[1];
        assert!(bv.len() == o && gv.len() == o && tv.len() == o, "film_silu: vector lengths");
        let b1 = bv.view().into_shape_with_order(o).unwrap();
        let g1 = gv.view().into_shape_with_order(o).unwrap();
        let t1 = tv.view().into_shape_with_order(o).unwrap();
        let mut pre = as2(&xv).dot(&as2(&wv));
        pre += &b1;
        let mut gate = Array2::<R>::zeros(pre.raw_dim());
        let mut out = Array2::<R>::zeros(pre.raw_dim());
        let (g1, t1) = (g1.to_vec(), t1.to_vec());
        let rows = pre.as_slice().unwrap().chunks_exact(o);
        let gates = gate.as_slice_mut().unwrap().chunks_exact_mut(o);
        for ((u, s), y) in rows.zip(gates).zip(out.as_slice_mut().unwrap().chunks_exact_mut(o)) {
            for j in 0..o {
                let a = u[j] * g1[j] + t1[j];
                s[j] = R::one() / (R::one() + (-a).exp());
                y[j] = a * s[j];
            }
        }
        let ids = [self.idx, weight.idx, bias.idx, gamma.idx, beta.idx];
        let op = Op::FilmSilu {
            x: self.idx,
            weight: weight.idx,
            bias: bias.idx,
            gamma: gamma.idx,
            beta: beta.idx,
            pre: Rc::new(pre),
            gate: Rc::new(gate),
        };
        self.record(out.into_dyn(), op, &ids)
    }

    /// Emission-absorption compositing of `rays×samples` densities (`self`)
    /// and `rays×samples×3` colors. `t` holds sample distances and `delta`
    /// segment lengths. Output is `rays×5`: rgb, alpha, expected depth.
    ///
    /// Depth is `Σ w t / alpha`; when `alpha < eps` the missing mass is
    /// assigned to `far`, so an empty ray reports depth `far`.
    pub fn composite(&self, color: Var<'t, R>, t: Rc<Array2<R>>, delta: Rc<Array2<R>>, far: R, eps: R) -> Var<'t, R> {
        let sv = self.value();
        let cv = color.value();
        let sig = as2(&sv);
        let col = cv.view().into_dimensionality::<ndarray::Ix3>().expect("composite: color rank 3");
        let (rays, samples) = sig.dim();
        assert_eq!(col.dim(), (rays, samples, 3), "composite: color shape");
        assert_eq!(t.dim(), (rays, samples), "composite: t shape");
        assert_eq!(delta.dim(), (rays, samples), "composite: delta shape");
        let mut out = Array2::<R>::zeros((rays, 5));
        for r in 0..rays {
            let mut trans = R::one();
            let (mut cr, mut cg, mut cb, mut dnum) = (R::zero(), R::zero(), R::zero(), R::zero());
            for i in 0..samples {
                let e = (-sig[[r, i]] * delta[[r, i]]).exp();
                let w = trans * (R::one() - e);
                trans = trans * e;
                cr += w * col[[r, i, 0]];
                cg += w * col[[r, i, 1]];
                cb += w * col[[r, i, 2]];
                dnum += w * t[[r, i]];
            }
            // equals the sum of weights, and stays inside [0, 1] under rounding
            let alpha = R::one() - trans;
            let depth = if alpha >= eps {
                dnum / alpha
            } else {
                far + (dnum - alpha * far) / eps
            };
            out[[r, 0]] = cr;
            out[[r, 1]] = cg;
            out[[r, 2]] = cb;
            out[[r, 3]] = alpha;
            out[[r, 4]] = depth;
        }
        self.record(
            out.into_dyn(),
            Op::Composite {
                sigma: self.idx,
                color: color.idx,
                t,
                delta,
                far,
                eps,
            },
            &[self.idx, color.idx],
        )
    }

    /// 2-D convolution of a `C×H×W` image with `O×C×K×K` weights and `O`
    /// biases.
    pub fn conv2d(&self, weight: Var<'t, R>, bias: Var<'t, R>, stride: usize, pad: usize) -> Var<'t, R> {
        let xv = self.value();
        let wv = weight.value();
        let x3 = xv.view().into_dimensionality::<ndarray::Ix3>().expect("conv2d: input rank 3").to_owned();
        let (o, c, k, k2) = wv.dim4();
        assert_eq!(k, k2, "conv2d: square kernels only");
        let (ci, h, w) = x3.dim();
        assert_eq!(ci, c, "conv2d: channel mismatch");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let cols = im2col(&x3, k, stride, pad, (oh, ow));
        let w2 = wv.view().into_shape_with_order((o, c * k * k)).unwrap();
        let mut out = w2.dot(&cols);
        let bv = bias.value();
        for (mut row, &b) in out.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out.as_standard_layout().into_owned().into_shape_with_order((o, oh, ow)).unwrap();
        let spec = ConvSpec {
            stride,
            pad,
            kernel: k,
            in_hw: (h, w),
            out_hw: (oh, ow),
        };
        self.record(
            out.into_dyn(),
            Op::Conv2d {
                input: self.idx,
                weight: weight.idx,
                bias: bias.idx,
                spec,
                cols: Rc::new(cols),
            },
            &[self.idx, weight.idx, bias.idx],
        )
    }
}

/// Evaluates a scalar objective of `params` and its gradient with respect to
/// every parameter. `f` receives one tracked variable per parameter.
pub fn value_and_grad<R, E, F>(params: &[&Tensor<R>], f: F) -> Result<(R, Vec<Tensor<R>>), E>
where
    R: Real,
    E: From<NumError>,
    F: for<'t> FnOnce(&'t Tape<R>, &[Var<'t, R>]) -> Result<Var<'t, R>, E>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, R>> = params.iter().map(|p| tape.param((*p).clone())).collect();
    let out = f(&tape, &vars)?;
    tape.check()?;
    if out.value().len() != 1 {
        return Err(NumError::NotScalar(out.shape()).into());
    }
    let value = out.item();
    let grads = tape.gradients(out, &vars)?;
    Ok((value, grads))
}
