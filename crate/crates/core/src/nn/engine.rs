//! Batched forward, tangent and adjoint passes over a compiled [`Plan`].
//!
//! Activations are `(rows, channels)` matrices with rows ordered
//! `(sample, y, x)`, so flattening an image is a free reshape.
//!
//! The tangent stream carries the directional derivative along a weight
//! direction `v`, the second stream its second derivative along the same
//! line. Relu has zero curvature, so both streams only pick up the
//! `2·V·ȧ` cross term at parametric layers.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::plan::{LayerView, Op, Plan};
use crate::real::Real;

/// Rows of a conv im2col buffer allowed per chunk.
const IM2COL_BUDGET: usize = 1 << 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Order {
    Primal,
    Tangent,
    Second,
}

pub(crate) struct Tape<T> {
    /// Primal input of every op.
    inputs: Vec<Array2<T>>,
    /// Tangent input of every op (empty below `Order::Tangent`).
    tangents: Vec<Array2<T>>,
}

pub(crate) struct Pass<T> {
    pub out: Vec<T>,
    pub tangent: Option<Vec<T>>,
    pub second: Option<Vec<T>>,
    pub tape: Option<Tape<T>>,
}

/// Per-sample adjoint and input of one parametric layer, used to assemble
/// gradient inner products without materializing the Jacobian.
pub(crate) struct LayerFactor<T> {
    pub view: LayerView,
    /// Layer input, `(batch·positions, cin)`.
    pub input: Array2<T>,
    /// Adjoint of the layer output for a unit cotangent per sample,
    /// `(batch·positions, out)`.
    pub delta: Array2<T>,
    pub positions: usize,
    pub conv: Option<(usize, usize, usize)>,
}

fn weights<'a, T: Real>(view: &LayerView, params: &'a [T]) -> ArrayView2<'a, T> {
    let [out, fan_in] = view.weight_shape;
    ArrayView2::from_shape(
        (out, fan_in),
        &params[view.weight_offset..view.weight_offset + out * fan_in],
    )
    .expect("weight slice matches view")
}

fn bias<'a, T: Real>(view: &LayerView, params: &'a [T]) -> Option<&'a [T]> {
    view.bias_offset.map(|b| &params[b..b + view.out()])
}

fn scale<T: Real>(view: &LayerView) -> T {
    T::of(1.0 / (view.fan_in() as f64).sqrt())
}

pub(crate) fn im2col<T: Real>(a: ArrayView2<T>, h: usize, w: usize, cin: usize) -> Array2<T> {
    let rows = a.nrows();
    let mut out = Array2::<T>::zeros((rows, 9 * cin));
    let src = a.as_standard_layout();
    let src = src.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    let per_sample = h * w;
    for r in 0..rows {
        let b = r / per_sample;
        let y = (r % per_sample) / w;
        let x = r % w;
        let row = &mut dst[r * 9 * cin..(r + 1) * 9 * cin];
        for ky in 0..3 {
            let yy = y as isize + ky as isize - 1;
            if yy < 0 || yy >= h as isize {
                continue;
            }
            for kx in 0..3 {
                let xx = x as isize + kx as isize - 1;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                let sr = b * per_sample + yy as usize * w + xx as usize;
                let k = ky * 3 + kx;
                row[k * cin..(k + 1) * cin].copy_from_slice(&src[sr * cin..(sr + 1) * cin]);
            }
        }
    }
    out
}

fn col2im_add<T: Real>(cols: &Array2<T>, h: usize, w: usize, cin: usize, dst: &mut [T], row0: usize) {
    let src = cols.as_slice().expect("contiguous");
    let per_sample = h * w;
    for r in 0..cols.nrows() {
        let gr = row0 + r;
        let b = gr / per_sample;
        let y = (gr % per_sample) / w;
        let x = gr % w;
        let row = &src[r * 9 * cin..(r + 1) * 9 * cin];
        for ky in 0..3 {
            let yy = y as isize + ky as isize - 1;
            if yy < 0 || yy >= h as isize {
                continue;
            }
            for kx in 0..3 {
                let xx = x as isize + kx as isize - 1;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                let dr = b * per_sample + yy as usize * w + xx as usize;
                let k = ky * 3 + kx;
                for (d, s) in dst[dr * cin..(dr + 1) * cin]
                    .iter_mut()
                    .zip(&row[k * cin..(k + 1) * cin])
                {
                    *d += *s;
                }
            }
        }
    }
}

/// Row chunks (whole samples) for conv layers so im2col buffers stay bounded.
fn conv_chunks(rows: usize, h: usize, w: usize, cin: usize) -> Vec<(usize, usize)> {
    let per_sample = h * w;
    let samples = rows / per_sample;
    let per_chunk = (IM2COL_BUDGET / (per_sample * 9 * cin).max(1)).max(1);
    (0..samples)
        .step_by(per_chunk)
        .map(|s0| {
            let s1 = (s0 + per_chunk).min(samples);
            (s0 * per_sample, s1 * per_sample)
        })
        .collect()
}

/// `z = scale · a Wᵀ` for a dense or conv layer (no bias).
fn apply_linear<T: Real>(op: &Op, wmat: ArrayView2<T>, sc: T, a: &Array2<T>) -> Array2<T> {
    match op {
        Op::Dense { .. } => {
            let mut z = a.dot(&wmat.t());
            z.mapv_inplace(|v| v * sc);
            z
        }
        Op::Conv { h, w, cin, view } => {
            let mut z = Array2::<T>::zeros((a.nrows(), view.out()));
            for (r0, r1) in conv_chunks(a.nrows(), *h, *w, *cin) {
                let cols = im2col(a.slice(s![r0..r1, ..]), *h, *w, *cin);
                let mut part = cols.dot(&wmat.t());
                part.mapv_inplace(|v| v * sc);
                z.slice_mut(s![r0..r1, ..]).assign(&part);
            }
            z
        }
        _ => unreachable!("not a parametric op"),
    }
}

/// Adjoint of [`apply_linear`] with respect to its input.
fn adjoint_linear<T: Real>(op: &Op, wmat: ArrayView2<T>, sc: T, delta: &Array2<T>) -> Array2<T> {
    match op {
        Op::Dense { .. } => {
            let mut g = delta.dot(&wmat);
            g.mapv_inplace(|v| v * sc);
            g
        }
        Op::Conv { h, w, cin, .. } => {
            let mut g = Array2::<T>::zeros((delta.nrows(), *cin));
            let dst = g.as_slice_mut().expect("contiguous");
            for (r0, r1) in conv_chunks(delta.nrows(), *h, *w, *cin) {
                let mut cols = delta.slice(s![r0..r1, ..]).dot(&wmat);
                cols.mapv_inplace(|v| v * sc);
                col2im_add(&cols, *h, *w, *cin, dst, r0);
            }
            g
        }
        _ => unreachable!("not a parametric op"),
    }
}

/// Adds `scale · deltaᵀ a` (the weight gradient) into `grad`.
fn accumulate_weight_grad<T: Real>(op: &Op, sc: T, delta: &Array2<T>, a: &Array2<T>, grad: &mut [T]) {
    let view = match op {
        Op::Dense { view } | Op::Conv { view, .. } => view,
        _ => unreachable!("not a parametric op"),
    };
    let [out, fan_in] = view.weight_shape;
    let target = &mut grad[view.weight_offset..view.weight_offset + out * fan_in];
    let mut add = |g: Array2<T>| {
        for (t, v) in target.iter_mut().zip(g.iter()) {
            *t += *v * sc;
        }
    };
    match op {
        Op::Dense { .. } => add(delta.t().dot(a)),
        Op::Conv { h, w, cin, .. } => {
            for (r0, r1) in conv_chunks(a.nrows(), *h, *w, *cin) {
                let cols = im2col(a.slice(s![r0..r1, ..]), *h, *w, *cin);
                add(delta.slice(s![r0..r1, ..]).t().dot(&cols));
            }
        }
        _ => unreachable!(),
    }
}

fn add_bias<T: Real>(z: &mut Array2<T>, b: &[T], bias_std: T) {
    for mut row in z.rows_mut() {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += *bb * bias_std;
        }
    }
}

fn accumulate_bias_grad<T: Real>(view: &LayerView, delta: &Array2<T>, bias_std: T, grad: &mut [T]) {
    if let Some(off) = view.bias_offset {
        let sums = delta.sum_axis(Axis(0));
        for (g, s) in grad[off..off + view.out()].iter_mut().zip(sums.iter()) {
            *g += *s * bias_std;
        }
    }
}

fn relu_mask_apply<T: Real>(z: &Array2<T>, v: &Array2<T>) -> Array2<T> {
    let mut out = v.clone();
    out.zip_mut_with(z, |o, &zz| {
        if zz <= T::zero() {
            *o = T::zero();
        }
    });
    out
}

fn pool_forward<T: Real>(a: &Array2<T>, op: &Op) -> Array2<T> {
    let Op::AvgPool {
        h,
        w,
        c,
        window,
        stride,
        oh,
        ow,
    } = *op
    else {
        unreachable!()
    };
    let batch = a.nrows() / (h * w);
    let mut out = Array2::<T>::zeros((batch * oh * ow, c));
    let src = a.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    let norm = T::of(1.0 / (window * window) as f64);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = (b * oh + oy) * ow + ox;
                let o = &mut dst[orow * c..(orow + 1) * c];
                for dy in 0..window {
                    for dx in 0..window {
                        let irow = (b * h + oy * stride + dy) * w + ox * stride + dx;
                        for (d, s) in o.iter_mut().zip(&src[irow * c..(irow + 1) * c]) {
                            *d += *s;
                        }
                    }
                }
                for d in o.iter_mut() {
                    *d *= norm;
                }
            }
        }
    }
    out
}

fn pool_adjoint<T: Real>(delta: &Array2<T>, op: &Op) -> Array2<T> {
    let Op::AvgPool {
        h,
        w,
        c,
        window,
        stride,
        oh,
        ow,
    } = *op
    else {
        unreachable!()
    };
    let batch = delta.nrows() / (oh * ow);
    let mut out = Array2::<T>::zeros((batch * h * w, c));
    let src = delta.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    let norm = T::of(1.0 / (window * window) as f64);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = (b * oh + oy) * ow + ox;
                let g = &src[orow * c..(orow + 1) * c];
                for dy in 0..window {
                    for dx in 0..window {
                        let irow = (b * h + oy * stride + dy) * w + ox * stride + dx;
                        for (d, s) in dst[irow * c..(irow + 1) * c].iter_mut().zip(g) {
                            *d += *s * norm;
                        }
                    }
                }
            }
        }
    }
    out
}

fn reshape<T: Real>(a: Array2<T>, rows: usize, cols: usize) -> Array2<T> {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_shape_with_order((rows, cols)).expect("element count preserved")
}

/// Runs the network on `x` (`batch × input_len`). With a direction `dir`
/// the tangent (and optionally second) streams are propagated alongside.
pub(crate) fn forward<T: Real>(
    plan: &Plan,
    params: &[T],
    x: ArrayView2<T>,
    dir: Option<&[T]>,
    order: Order,
    keep_tape: bool,
) -> Pass<T> {
    debug_assert!(order == Order::Primal || dir.is_some());
    let batch = x.nrows();
    let (h0, w0, c0) = plan.input;
    let bias_std = T::of(plan.bias_std);
    let mut a = reshape(x.to_owned(), batch * h0 * w0, c0);
    let mut ta = (order >= Order::Tangent).then(|| Array2::<T>::zeros(a.raw_dim()));
    let mut sa = (order >= Order::Second).then(|| Array2::<T>::zeros(a.raw_dim()));
    let mut inputs = Vec::new();
    let mut tangents = Vec::new();

    for op in &plan.ops {
        if keep_tape {
            inputs.push(a.clone());
            if let Some(t) = &ta {
                tangents.push(t.clone());
            }
        }
        match op {
            Op::Dense { view } | Op::Conv { view, .. } => {
                let wm = weights(view, params);
                let sc = scale::<T>(view);
                let mut z = apply_linear(op, wm, sc, &a);
                if let Some(b) = bias(view, params) {
                    add_bias(&mut z, b, bias_std);
                }
                if let (Some(t), Some(d)) = (ta.as_ref(), dir) {
                    let vm = weights(view, d);
                    let va = apply_linear(op, vm, sc, &a);
                    let mut tz = apply_linear(op, wm, sc, t);
                    tz += &va;
                    if let Some(vb) = bias(view, d) {
                        add_bias(&mut tz, vb, bias_std);
                    }
                    if let Some(s2) = sa.as_ref() {
                        let mut sz = apply_linear(op, wm, sc, s2);
                        let cross = apply_linear(op, vm, sc, t);
                        sz.scaled_add(T::of(2.0), &cross);
                        sa = Some(sz);
                    }
                    ta = Some(tz);
                }
                a = z;
            }
            Op::Relu => {
                if let Some(t) = ta.as_ref() {
                    ta = Some(relu_mask_apply(&a, t));
                }
                if let Some(s2) = sa.as_ref() {
                    sa = Some(relu_mask_apply(&a, s2));
                }
                a.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
            }
            Op::AvgPool { .. } => {
                a = pool_forward(&a, op);
                ta = ta.map(|t| pool_forward(&t, op));
                sa = sa.map(|s2| pool_forward(&s2, op));
            }
            Op::Flatten { h, w, c } => {
                let cols = h * w * c;
                a = reshape(a, batch, cols);
                ta = ta.map(|t| reshape(t, batch, cols));
                sa = sa.map(|s2| reshape(s2, batch, cols));
            }
        }
    }
    Pass {
        out: a.column(0).to_vec(),
        tangent: ta.map(|t| t.column(0).to_vec()),
        second: sa.map(|s2| s2.column(0).to_vec()),
        tape: keep_tape.then_some(Tape { inputs, tangents }),
    }
}

/// Reverse pass for the cotangent `cot` on the outputs.
///
/// Returns `Σ_b cot_b ∇f(x_b)`. When `dir` is given (and the tape holds
/// tangents) it also returns `Σ_b cot_b ∇²f(x_b) dir`, obtained by reverse
/// differentiation of the tangent pass.
pub(crate) fn backward<T: Real>(
    plan: &Plan,
    params: &[T],
    dir: Option<&[T]>,
    tape: &Tape<T>,
    cot: &[T],
) -> (Vec<T>, Option<Vec<T>>) {
    let batch = cot.len();
    let bias_std = T::of(plan.bias_std);
    let second = dir.is_some();
    assert!(!second || tape.tangents.len() == plan.ops.len(), "tape lacks tangents");
    let mut grad = vec![T::zero(); plan.num_params];
    let mut hv = second.then(|| vec![T::zero(); plan.num_params]);

    // delta: adjoint of the tangent stream (equivalently the ordinary backprop
    // signal); eps: adjoint of the primal stream through the tangent equations.
    let mut delta = Array2::from_shape_vec((batch, 1), cot.to_vec()).expect("cotangent shape");
    let mut eps = second.then(|| Array2::<T>::zeros((batch, 1)));
    let first_param = plan.views.first().map_or(0, |v| v.layer);

    for (i, op) in plan.ops.iter().enumerate().rev() {
        if i < first_param {
            break;
        }
        let a = &tape.inputs[i];
        match op {
            Op::Dense { view } | Op::Conv { view, .. } => {
                let wm = weights(view, params);
                let sc = scale::<T>(view);
                accumulate_weight_grad(op, sc, &delta, a, &mut grad);
                accumulate_bias_grad(view, &delta, bias_std, &mut grad);
                if let (Some(h), Some(e), Some(d)) = (hv.as_mut(), eps.as_ref(), dir) {
                    let ta = &tape.tangents[i];
                    accumulate_weight_grad(op, sc, &delta, ta, h);
                    accumulate_weight_grad(op, sc, e, a, h);
                    accumulate_bias_grad(view, e, bias_std, h);
                    if i > first_param {
                        let vm = weights(view, d);
                        let mut ne = adjoint_linear(op, wm, sc, e);
                        ne += &adjoint_linear(op, vm, sc, &delta);
                        eps = Some(ne);
                    }
                }
                if i > first_param {
                    delta = adjoint_linear(op, wm, sc, &delta);
                }
            }
            Op::Relu => {
                delta = relu_mask_apply(a, &delta);
                eps = eps.map(|e| relu_mask_apply(a, &e));
            }
            Op::AvgPool { .. } => {
                delta = pool_adjoint(&delta, op);
                eps = eps.map(|e| pool_adjoint(&e, op));
            }
            Op::Flatten { h, w, c } => {
                let rows = batch * h * w;
                delta = reshape(delta, rows, *c);
                eps = eps.map(|e| reshape(e, rows, *c));
            }
        }
    }
    (grad, hv)
}

/// Per-layer inputs and unit-cotangent adjoints for every sample in `x`.
pub(crate) fn layer_factors<T: Real>(plan: &Plan, params: &[T], x: ArrayView2<T>) -> Vec<LayerFactor<T>> {
    let batch = x.nrows();
    let pass = forward(plan, params, x, None, Order::Primal, true);
    let tape = pass.tape.expect("tape kept");
    let mut delta = Array2::<T>::ones((batch, 1));
    let mut factors = Vec::new();
    let first_param = plan.views.first().map_or(0, |v| v.layer);
    for (i, op) in plan.ops.iter().enumerate().rev() {
        if i < first_param {
            break;
        }
        let a = &tape.inputs[i];
        match op {
            Op::Dense { view } => {
                factors.push(LayerFactor {
                    view: view.clone(),
                    input: a.clone(),
                    delta: delta.clone(),
                    positions: 1,
                    conv: None,
                });
                if i > first_param {
                    delta = adjoint_linear(op, weights(view, params), scale::<T>(view), &delta);
                }
            }
            Op::Conv { view, h, w, cin } => {
                factors.push(LayerFactor {
                    view: view.clone(),
                    input: a.clone(),
                    delta: delta.clone(),
                    positions: h * w,
                    conv: Some((*h, *w, *cin)),
                });
                if i > first_param {
                    delta = adjoint_linear(op, weights(view, params), scale::<T>(view), &delta);
                }
            }
            Op::Relu => delta = relu_mask_apply(a, &delta),
            Op::AvgPool { .. } => delta = pool_adjoint(&delta, op),
            Op::Flatten { h, w, c } => delta = reshape(delta, batch * h * w, *c),
        }
    }
    factors.reverse();
    factors
}
