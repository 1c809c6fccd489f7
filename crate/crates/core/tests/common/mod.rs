//! Shared test helpers: fixture paths and a naive reference evaluator.
//!
//! The reference evaluator walks every op with direct nested loops, no
//! im2col and no BLAS, so it shares no code with the engine kernels.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use neurflow::engine::Block;
use neurflow::graph::{Conv, Gemm, GraphBuilder, ModelGraph, Op, Pool};
use neurflow::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn toy_model() -> ModelGraph {
    neurflow::model_io::load_toy_model_files(&fixtures().join("toy/model.toml")).expect("toy model loads")
}

pub fn toy_model_unfolded() -> ModelGraph {
    let dir = fixtures().join("toy");
    let text = std::fs::read_to_string(dir.join("model.toml")).unwrap();
    let blob = std::fs::read(dir.join("model.bin")).unwrap();
    neurflow::model_io::load_toy_model_unfolded(&text, &blob).unwrap()
}

pub fn probe_dir() -> PathBuf {
    fixtures().join("toy/images/probe")
}

pub fn heldout_dir() -> PathBuf {
    fixtures().join("toy/images/heldout")
}

/// Patches of the probe images the toy model assigns to `class`.
pub fn toy_dataset(g: &ModelGraph, class: usize) -> neurflow::patching::PatchDataset {
    neurflow::patching::class_dataset(g, &probe_dir(), class, &Default::default()).expect("toy dataset builds")
}

pub fn toy_taps(g: &ModelGraph) -> neurflow::model_io::TapSpec {
    neurflow::model_io::resolve_taps(g, &neurflow::model_io::TapConfig::auto()).unwrap()
}

/// Spatial mean of every channel, from a flat `[C,H,W]` buffer.
pub fn means(data: &[f64], channels: usize) -> Vec<f64> {
    let plane = data.len() / channels;
    data.chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect()
}

pub fn read_json(rel: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(fixtures().join(rel)).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn floats(v: &serde_json::Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Evaluates every value of the graph by direct definition.
pub fn reference_eval(g: &ModelGraph, input: &Tensor) -> HashMap<String, Vec<f64>> {
    let mut vals: Vec<Vec<f64>> = vec![Vec::new(); g.values().len()];
    vals[g.input().0] = input.data().to_vec();
    for node in g.nodes() {
        let x = &vals[node.inputs[0].0];
        let xs = &g.value(node.inputs[0]).shape;
        let ys = &g.value(node.output).shape;
        let w = |id| g.weight(id).data.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let out: Vec<f64> = match &node.op {
            Op::Conv(c) => {
                let wt = w(c.weight);
                let ws = &g.weight(c.weight).shape;
                let bias = c.bias.map(w);
                let (ci, h, wd) = (xs[0], xs[1] as i64, xs[2] as i64);
                let (co, oh, ow) = (ys[0], ys[1], ys[2]);
                let (kh, kw) = (ws[2], ws[3]);
                let mut out = vec![0.0; co * oh * ow];
                for o in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = bias.as_ref().map_or(0.0, |b| b[o]);
                            for i in 0..ci {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (oy * c.strides[0] + ky * c.dilations[0]) as i64 - c.pads[0] as i64;
                                        let ix = (ox * c.strides[1] + kx * c.dilations[1]) as i64 - c.pads[1] as i64;
                                        if iy < 0 || ix < 0 || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        s += wt[((o * ci + i) * kh + ky) * kw + kx]
                                            * x[(i * h as usize + iy as usize) * wd as usize + ix as usize];
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = s;
                        }
                    }
                }
                out
            }
            Op::Relu => x.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect(),
            Op::MaxPool(p) | Op::AveragePool(p) => {
                let is_max = matches!(node.op, Op::MaxPool(_));
                let (c, h, wd) = (xs[0], xs[1] as i64, xs[2] as i64);
                let (oh, ow) = (ys[1], ys[2]);
                let mut out = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut vals_in = Vec::new();
                            for ky in 0..p.kernel[0] {
                                for kx in 0..p.kernel[1] {
                                    let iy = (oy * p.strides[0] + ky) as i64 - p.pads[0] as i64;
                                    let ix = (ox * p.strides[1] + kx) as i64 - p.pads[1] as i64;
                                    if iy >= 0 && ix >= 0 && iy < h && ix < wd {
                                        vals_in.push(x[(ch * h as usize + iy as usize) * wd as usize + ix as usize]);
                                    }
                                }
                            }
                            out[(ch * oh + oy) * ow + ox] = if is_max {
                                vals_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                let d = if p.count_include_pad {
                                    (p.kernel[0] * p.kernel[1]) as f64
                                } else {
                                    vals_in.len() as f64
                                };
                                vals_in.iter().sum::<f64>() / d
                            };
                        }
                    }
                }
                out
            }
            Op::GlobalAveragePool => {
                let plane = xs[1] * xs[2];
                (0..xs[0])
                    .map(|c| x[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
                    .collect()
            }
            Op::Gemm(gm) => {
                let wt = w(gm.weight);
                let bias = gm.bias.map(w);
                let n_in = x.len();
                (0..ys[0])
                    .map(|o| {
                        let mut s = bias.as_ref().map_or(0.0, |b| b[o]);
                        for i in 0..n_in {
                            s += wt[o * n_in + i] * x[i];
                        }
                        s
                    })
                    .collect()
            }
            Op::Add => {
                let y = &vals[node.inputs[1].0];
                x.iter().zip(y).map(|(a, b)| a + b).collect()
            }
            Op::Concat => node.inputs.iter().flat_map(|v| vals[v.0].iter().copied()).collect(),
            Op::Flatten => x.clone(),
            Op::BatchNorm(bn) => {
                let (s, b, m, v) = (w(bn.scale), w(bn.bias), w(bn.mean), w(bn.var));
                let plane: usize = xs[1..].iter().product();
                x.iter()
                    .enumerate()
                    .map(|(i, xv)| {
                        let c = i / plane;
                        (xv - m[c]) / (v[c] + bn.epsilon as f64).sqrt() * s[c] + b[c]
                    })
                    .collect()
            }
        };
        assert_eq!(out.len(), ys.iter().product::<usize>(), "node {}", node.name);
        vals[node.output.0] = out;
    }
    g.values()
        .iter()
        .zip(vals)
        .map(|(info, v)| (info.name.clone(), v))
        .collect()
}

pub fn conv(b: &mut GraphBuilder, name: &str, w: Vec<usize>, data: Vec<f32>, bias: Option<Vec<f32>>, pad: usize) -> Op {
    let out = w[0];
    let weight = b.weight(&format!("{name}.w"), w, data);
    let bias = bias.map(|d| b.weight(&format!("{name}.b"), vec![out], d));
    Op::Conv(Conv {
        weight,
        bias,
        strides: [1, 1],
        pads: [pad; 4],
        dilations: [1, 1],
    })
}

pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect()
}

/// A conv → relu → maxpool → conv → add(skip) → avgpool → gap → gemm stack
/// with random weights; every op kind with a nontrivial VJP appears once.
pub fn random_net(seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new("x", vec![2, 6, 6]);
    let c1 = conv(&mut b, "c1", vec![3, 2, 3, 3], random_weights(&mut rng, 54), Some(random_weights(&mut rng, 3)), 1);
    b.node("c1", c1, &["x"], "c1").unwrap();
    b.node("r1", Op::Relu, &["c1"], "r1").unwrap();
    let pool = Pool {
        kernel: [2, 2],
        strides: [1, 1],
        pads: [0, 1, 1, 0],
        count_include_pad: false,
    };
    b.node("mp", Op::MaxPool(pool.clone()), &["r1"], "mp").unwrap();
    let c2 = conv(&mut b, "c2", vec![3, 3, 3, 3], random_weights(&mut rng, 81), None, 1);
    b.node("c2", c2, &["mp"], "c2").unwrap();
    b.node("add", Op::Add, &["c2", "mp"], "add").unwrap();
    b.node("r2", Op::Relu, &["add"], "r2").unwrap();
    b.node("cat", Op::Concat, &["r2", "mp"], "cat").unwrap();
    b.node("ap", Op::AveragePool(Pool { count_include_pad: true, ..pool }), &["cat"], "ap").unwrap();
    b.node("gap", Op::GlobalAveragePool, &["ap"], "gap").unwrap();
    b.node("flat", Op::Flatten, &["gap"], "flat").unwrap();
    let w = b.weight("fc.w", vec![4, 6], random_weights(&mut rng, 24));
    let bias = b.weight("fc.b", vec![4], random_weights(&mut rng, 4));
    b.node("fc", Op::Gemm(Gemm { weight: w, bias: Some(bias) }), &["flat"], "logits").unwrap();
    b.finish("logits").unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central finite differences of `<c, f(x)>`.
pub fn fd_vjp(block: &Block, x: &Tensor, c: &Tensor, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fp = block.forward(&xp).unwrap();
            let fm = block.forward(&xm).unwrap();
            let dot = |f: &Tensor| f.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>();
            (dot(&fp) - dot(&fm)) / (2.0 * h)
        })
        .collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Silhouette straight from its definition, sharing nothing with the crate.
pub fn oracle_silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..points.len() {
        let same: Vec<f64> = (0..points.len())
            .filter(|&j| j != i && labels[j] == labels[i])
            .map(|j| dist(&points[i], &points[j]))
            .collect();
        if same.is_empty() {
            continue;
        }
        let a = same.iter().sum::<f64>() / same.len() as f64;
        let mut b = f64::INFINITY;
        for c in labels.iter().copied().collect::<std::collections::BTreeSet<_>>() {
            if c == labels[i] {
                continue;
            }
            let other: Vec<f64> = (0..points.len()).filter(|&j| labels[j] == c).map(|j| dist(&points[i], &points[j])).collect();
            b = b.min(other.iter().sum::<f64>() / other.len() as f64);
        }
        total += (b - a) / a.max(b);
    }
    total / points.len() as f64
}
