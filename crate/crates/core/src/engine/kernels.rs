//! Forward and input-gradient kernels for the supported op set.
//!
//! Convolutions lower to im2col followed by a dense matrix product; the
//! product itself is delegated to `matrixmultiply`, which is single threaded
//! and therefore reproducible bit for bit.

use crate::graph::{bn_affine, Conv, ModelGraph, Op, Pool};
use crate::tensor::Tensor;

fn widen(data: &[f32]) -> Vec<f64> {
    data.iter().map(|&v| v as f64).collect()
}

/// `c[m×n] = a[m×k] · b[k×n] + beta·c`, all row-major.
fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths are checked above and strides describe dense
    // row-major layouts inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] = aᵀ · b` where `a` is stored `[k×m]` row-major.
fn matmul_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    // SAFETY: as in `matmul`; the transpose is expressed through strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cout: usize,
}

fn conv_geom(graph: &ModelGraph, c: &Conv, input: &[usize], output: &[usize]) -> ConvGeom {
    let ws = &graph.weight(c.weight).shape;
    ConvGeom {
        cin: input[0],
        h: input[1],
        w: input[2],
        kh: ws[2],
        kw: ws[3],
        oh: output[1],
        ow: output[2],
        cout: output[0],
    }
}

/// Source coordinate for output position `o` and kernel offset `k`, if inside the input.
#[inline]
fn src(o: usize, k: usize, stride: usize, dil: usize, pad: usize, len: usize) -> Option<usize> {
    let p = o * stride + k * dil;
    if p < pad || p - pad >= len {
        None
    } else {
        Some(p - pad)
    }
}

fn im2col(x: &[f64], g: &ConvGeom, c: &Conv) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.cin * g.kh * g.kw * p];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let Some(iy) = src(oy, ky, c.strides[0], c.dilations[0], c.pads[0], g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(ix) = src(ox, kx, c.strides[1], c.dilations[1], c.pads[1], g.w) {
                            cols[row + oy * g.ow + ox] = plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, c: &Conv) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let Some(iy) = src(oy, ky, c.strides[0], c.dilations[0], c.pads[0], g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(ix) = src(ox, kx, c.strides[1], c.dilations[1], c.pads[1], g.w) {
                            x[ci * g.h * g.w + iy * g.w + ix] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Weight rows for the selected output channels, as one dense matrix.
fn weight_rows(graph: &ModelGraph, id: crate::graph::WeightId, k: usize, rows: Option<&[usize]>) -> Vec<f64> {
    let w = &graph.weight(id).data;
    match rows {
        None => widen(w),
        Some(rows) => rows.iter().flat_map(|&r| widen(&w[r * k..(r + 1) * k])).collect(),
    }
}

fn conv_forward(graph: &ModelGraph, c: &Conv, x: &Tensor, out_shape: &[usize], rows: Option<&[usize]>) -> Tensor {
    let g = conv_geom(graph, c, x.shape(), out_shape);
    let p = g.oh * g.ow;
    let k = g.cin * g.kh * g.kw;
    let cols = im2col(x.data(), &g, c);
    let bias = c.bias.map(|b| &graph.weight(b).data);
    let mut out = vec![0.0; g.cout * p];
    match rows {
        None => {
            if let Some(b) = bias {
                for (o, chunk) in out.chunks_mut(p).enumerate() {
                    chunk.fill(b[o] as f64);
                }
            }
            matmul(g.cout, k, p, &widen(&graph.weight(c.weight).data), &cols, &mut out, 1.0);
        }
        Some(rows) => {
            let w = weight_rows(graph, c.weight, k, Some(rows));
            let mut part = vec![0.0; rows.len() * p];
            if let Some(b) = bias {
                for (chunk, &o) in part.chunks_mut(p).zip(rows) {
                    chunk.fill(b[o] as f64);
                }
            }
            matmul(rows.len(), k, p, &w, &cols, &mut part, 1.0);
            for (chunk, &o) in part.chunks(p).zip(rows) {
                out[o * p..(o + 1) * p].copy_from_slice(chunk);
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
}

fn conv_backward(graph: &ModelGraph, c: &Conv, x_shape: &[usize], gy: &Tensor, rows: Option<&[usize]>) -> Tensor {
    let g = conv_geom(graph, c, x_shape, gy.shape());
    let p = g.oh * g.ow;
    let k = g.cin * g.kh * g.kw;
    let w = weight_rows(graph, c.weight, k, rows);
    let mut dcols = vec![0.0; k * p];
    match rows {
        None => matmul_at(k, g.cout, p, &w, gy.data(), &mut dcols),
        Some(rows) => {
            let gy_rows: Vec<f64> = rows.iter().flat_map(|&r| gy.data()[r * p..(r + 1) * p].iter().copied()).collect();
            matmul_at(k, rows.len(), p, &w, &gy_rows, &mut dcols);
        }
    }
    Tensor::new(x_shape.to_vec(), col2im(&dcols, &g, c)).expect("conv grad shape")
}

/// Visits every pooling window; `f(out_index, window_input_indices)`.
fn for_each_window(x_shape: &[usize], out_shape: &[usize], p: &Pool, mut f: impl FnMut(usize, &[usize])) {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut idx = Vec::with_capacity(p.kernel[0] * p.kernel[1]);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                idx.clear();
                for ky in 0..p.kernel[0] {
                    let Some(iy) = src(oy, ky, p.strides[0], 1, p.pads[0], h) else {
                        continue;
                    };
                    for kx in 0..p.kernel[1] {
                        if let Some(ix) = src(ox, kx, p.strides[1], 1, p.pads[1], w) {
                            idx.push(ch * h * w + iy * w + ix);
                        }
                    }
                }
                f((ch * oh + oy) * ow + ox, &idx);
            }
        }
    }
}

/// Row-major first maximal element of a window.
fn argmax(x: &[f64], idx: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &i in idx {
        match best {
            Some(b) if x[i] <= x[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

fn pool_divisor(p: &Pool, valid: usize) -> f64 {
    if p.count_include_pad {
        (p.kernel[0] * p.kernel[1]) as f64
    } else {
        valid as f64
    }
}

/// Forward for one op. With `rows`, Conv and Gemm compute only those
/// output channels and leave the rest at zero.
pub(crate) fn forward(
    graph: &ModelGraph,
    op: &Op,
    inputs: &[&Tensor],
    out_shape: &[usize],
    rows: Option<&[usize]>,
) -> Tensor {
    let x = inputs[0];
    match op {
        Op::Conv(c) => conv_forward(graph, c, x, out_shape, rows),
        Op::Relu => Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())
            .expect("relu shape"),
        Op::MaxPool(p) => {
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_window(x.shape(), out_shape, p, |o, idx| {
                out[o] = argmax(x.data(), idx).map_or(0.0, |i| x.data()[i]);
            });
            Tensor::new(out_shape.to_vec(), out).expect("maxpool shape")
        }
        Op::AveragePool(p) => {
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_window(x.shape(), out_shape, p, |o, idx| {
                let s: f64 = idx.iter().map(|&i| x.data()[i]).sum();
                out[o] = s / pool_divisor(p, idx.len());
            });
            Tensor::new(out_shape.to_vec(), out).expect("avgpool shape")
        }
        Op::GlobalAveragePool => Tensor::new(out_shape.to_vec(), x.channel_means()).expect("gap shape"),
        Op::Gemm(g) => {
            let (m, k) = (out_shape[0], x.len());
            let bias = |o: usize| g.bias.map_or(0.0, |b| graph.weight(b).data[o] as f64);
            let out = match rows {
                None => {
                    let mut out: Vec<f64> = (0..m).map(bias).collect();
                    matmul(m, k, 1, &widen(&graph.weight(g.weight).data), x.data(), &mut out, 1.0);
                    out
                }
                Some(rows) => {
                    let w = weight_rows(graph, g.weight, k, Some(rows));
                    let mut part: Vec<f64> = rows.iter().map(|&o| bias(o)).collect();
                    matmul(rows.len(), k, 1, &w, x.data(), &mut part, 1.0);
                    let mut out = vec![0.0; m];
                    for (v, &o) in part.iter().zip(rows) {
                        out[o] = *v;
                    }
                    out
                }
            };
            Tensor::new(out_shape.to_vec(), out).expect("gemm shape")
        }
        Op::Add => {
            let y = inputs[1];
            let data = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
            Tensor::new(out_shape.to_vec(), data).expect("add shape")
        }
        Op::Concat => {
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for t in inputs {
                data.extend_from_slice(t.data());
            }
            Tensor::new(out_shape.to_vec(), data).expect("concat shape")
        }
        Op::Flatten => x.clone().reshape(out_shape.to_vec()).expect("flatten shape"),
        Op::BatchNorm(bn) => {
            let (factor, shift) = bn_affine(graph, bn);
            let mut out = x.clone();
            for (c, (f, s)) in factor.iter().zip(&shift).enumerate() {
                for v in out.channel_mut(c) {
                    *v = *v * f + s;
                }
            }
            out
        }
    }
}

/// Gradients with respect to each activation input, given the output
/// gradient. With `rows`, `gy` must be zero outside those channels.
pub(crate) fn backward(
    graph: &ModelGraph,
    op: &Op,
    inputs: &[&Tensor],
    gy: &Tensor,
    rows: Option<&[usize]>,
) -> Vec<Tensor> {
    let x = inputs[0];
    match op {
        Op::Conv(c) => vec![conv_backward(graph, c, x.shape(), gy, rows)],
        Op::Relu => {
            let data = x
                .data()
                .iter()
                .zip(gy.data())
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect();
            vec![Tensor::new(x.shape().to_vec(), data).expect("relu grad")]
        }
        Op::MaxPool(p) => {
            let mut gx = vec![0.0; x.len()];
            for_each_window(x.shape(), gy.shape(), p, |o, idx| {
                if let Some(i) = argmax(x.data(), idx) {
                    gx[i] += gy.data()[o];
                }
            });
            vec![Tensor::new(x.shape().to_vec(), gx).expect("maxpool grad")]
        }
        Op::AveragePool(p) => {
            let mut gx = vec![0.0; x.len()];
            for_each_window(x.shape(), gy.shape(), p, |o, idx| {
                let share = gy.data()[o] / pool_divisor(p, idx.len());
                for &i in idx {
                    gx[i] += share;
                }
            });
            vec![Tensor::new(x.shape().to_vec(), gx).expect("avgpool grad")]
        }
        Op::GlobalAveragePool => {
            let plane = x.plane();
            let mut gx = Tensor::zeros(x.shape());
            for c in 0..x.channels() {
                let g = gy.data()[c] / plane as f64;
                gx.channel_mut(c).fill(g);
            }
            vec![gx]
        }
        Op::Gemm(g) => {
            let k = x.len();
            let mut gx = vec![0.0; k];
            match rows {
                None => matmul_at(k, gy.len(), 1, &widen(&graph.weight(g.weight).data), gy.data(), &mut gx),
                Some(rows) => {
                    let w = weight_rows(graph, g.weight, k, Some(rows));
                    let gy_rows: Vec<f64> = rows.iter().map(|&r| gy.data()[r]).collect();
                    matmul_at(k, rows.len(), 1, &w, &gy_rows, &mut gx);
                }
            }
            vec![Tensor::new(x.shape().to_vec(), gx).expect("gemm grad")]
        }
        Op::Add => vec![gy.clone(), gy.clone()],
        Op::Concat => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let part = gy.data()[offset..offset + t.len()].to_vec();
                    offset += t.len();
                    Tensor::new(t.shape().to_vec(), part).expect("concat grad")
                })
                .collect()
        }
        Op::Flatten => vec![gy.clone().reshape(x.shape().to_vec()).expect("flatten grad")],
        Op::BatchNorm(bn) => {
            let (factor, _) = bn_affine(graph, bn);
            let mut gx = gy.clone();
            for (c, f) in factor.iter().enumerate() {
                for v in gx.channel_mut(c) {
                    *v *= f;
                }
            }
            vec![gx]
        }
    }
}
