//! Brute-force reference implementations and randomized case drivers shared
//! by the integration tests.
#![allow(dead_code)]

use pcqa::evaluation::{krcc, plcc, srcc};
use pcqa::patching::{farthest_point_sampling_from, knn, KdTree};
use pcqa::tensor::{BnMode, Graph, ReduceKind, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const CASES: usize = 200;
pub const TOL: f64 = 1e-12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    pcqa::seed::rng(seed)
}

pub fn randn(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), randn(r, n)).unwrap()
}

/// `|a - b| <= tol * max(1, |b|)` elementwise.
pub fn close(a: &[f64], b: &[f64], tol: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("length {} vs {}", a.len(), b.len()));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if !((x - y).abs() <= tol * y.abs().max(1.0)) {
            return Err(format!("element {i}: {x} vs {y}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- geometry

pub fn random_coords(r: &mut ChaCha8Rng, n: usize, quantize: bool) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            std::array::from_fn(|_| {
                if quantize {
                    r.gen_range(0..4) as f64
                } else {
                    r.gen_range(-1.0..1.0)
                }
            })
        })
        .collect()
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Recomputes every point's distance to the picked set from scratch at each
/// step; the farthest point wins, lowest index on ties.
pub fn fps_oracle(coords: &[[f64; 3]], count: usize, first: usize) -> Vec<usize> {
    let mut picked = vec![first];
    while picked.len() < count {
        let mut best = None;
        for i in 0..coords.len() {
            if picked.contains(&i) {
                continue;
            }
            let m = picked
                .iter()
                .map(|&j| d2(&coords[i], &coords[j]))
                .fold(f64::INFINITY, f64::min);
            match best {
                Some((bd, _)) if m <= bd => {}
                _ => best = Some((m, i)),
            }
        }
        picked.push(best.unwrap().1);
    }
    picked
}

/// Full sort by `(distance, index)`.
pub fn knn_oracle(coords: &[[f64; 3]], q: &[f64; 3], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = coords.iter().enumerate().map(|(i, p)| (d2(p, q), i)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn check_fps(cases: usize, seed: u64) -> Result<usize, String> {
    let mut r = rng(seed);
    for case in 0..cases {
        let n = r.gen_range(1..60);
        let coords = random_coords(&mut r, n, case % 3 == 0);
        let count = r.gen_range(1..=n);
        let first = r.gen_range(0..n);
        let got = farthest_point_sampling_from(&coords, count, first).map_err(|e| e.to_string())?;
        let want = fps_oracle(&coords, count, first);
        if got != want {
            return Err(format!("fps case {case}: {got:?} vs {want:?}"));
        }
    }
    Ok(cases)
}

pub fn check_knn(cases: usize, seed: u64) -> Result<usize, String> {
    let mut r = rng(seed);
    for case in 0..cases {
        let n = r.gen_range(1..200);
        let coords = random_coords(&mut r, n, case % 2 == 0);
        let k = r.gen_range(1..=n);
        let q = if case % 4 == 0 {
            coords[r.gen_range(0..n)]
        } else {
            random_coords(&mut r, 1, false)[0]
        };
        let want = knn_oracle(&coords, &q, k);
        let brute = knn(&coords, &q, k).map_err(|e| e.to_string())?;
        let tree = KdTree::new(&coords).knn(&q, k).map_err(|e| e.to_string())?;
        if brute != want || tree != want {
            return Err(format!("knn case {case}: brute {brute:?} tree {tree:?} oracle {want:?}"));
        }
    }
    Ok(cases)
}

// ---------------------------------------------------------------- metrics

pub fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
    let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sa * sb)
}

/// Rank = 1 + (number strictly below) + (ties - 1) / 2.
pub fn rank_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let below = x.iter().filter(|u| *u < v).count() as f64;
            let equal = x.iter().filter(|u| *u == v).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn srcc_oracle(a: &[f64], b: &[f64]) -> f64 {
    pearson_oracle(&rank_oracle(a), &rank_oracle(b))
}

/// Tau-b from the pair signs and the tie-group sizes.
pub fn krcc_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i < j {
                s += ((a[i] - a[j]).signum() * (b[i] - b[j]).signum()) * f64::from(a[i] != a[j] && b[i] != b[j]);
            }
        }
    }
    let ties = |x: &[f64]| -> f64 {
        let mut sorted = x.to_vec();
        sorted.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let mut t = 0.0;
        let mut run = 1.0;
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                run += 1.0;
            } else {
                t += run * (run - 1.0) / 2.0;
                run = 1.0;
            }
        }
        t + run * (run - 1.0) / 2.0
    };
    let n0 = (n * (n - 1)) as f64 / 2.0;
    s / ((n0 - ties(a)) * (n0 - ties(b))).sqrt()
}

/// Random pairs; every third case draws from a small integer set to force ties.
pub fn random_pairs(r: &mut ChaCha8Rng, case: usize) -> (Vec<f64>, Vec<f64>) {
    let n = r.gen_range(2..50);
    loop {
        let draw = |r: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| if case.is_multiple_of(3) { r.gen_range(0..4) as f64 } else { r.gen_range(-5.0..5.0) })
                .collect()
        };
        let a = draw(r);
        let b = draw(r);
        let varies = |x: &[f64]| x.iter().any(|v| *v != x[0]);
        if varies(&a) && varies(&b) {
            return (a, b);
        }
    }
}

pub fn check_metrics(cases: usize, seed: u64) -> Result<[usize; 3], String> {
    let mut r = rng(seed);
    for case in 0..cases {
        let (a, b) = random_pairs(&mut r, case);
        let p = plcc(&a, &b, false).map_err(|e| e.to_string())?.0;
        let s = srcc(&a, &b).map_err(|e| e.to_string())?;
        let k = krcc(&a, &b).map_err(|e| e.to_string())?;
        close(&[p], &[pearson_oracle(&a, &b)], TOL).map_err(|e| format!("plcc case {case}: {e}"))?;
        close(&[s], &[srcc_oracle(&a, &b)], TOL).map_err(|e| format!("srcc case {case}: {e}"))?;
        close(&[k], &[krcc_oracle(&a, &b)], TOL).map_err(|e| format!("krcc case {case}: {e}"))?;
    }
    Ok([cases; 3])
}

// ---------------------------------------------------------------- tensor ops

/// Direct convolution loop over output positions.
pub fn conv1d_oracle(
    x: &[f64],
    [b, cin, len]: [usize; 3],
    w: &[f64],
    [cout, cin_g, kw]: [usize; 3],
    bias: Option<&[f64]>,
    stride: usize,
    groups: usize,
) -> Vec<f64> {
    let lout = (len - kw) / stride + 1;
    let cout_g = cout / groups;
    let mut out = vec![0.0; b * cout * lout];
    for bi in 0..b {
        for o in 0..cout {
            let g = o / cout_g;
            for t in 0..lout {
                let mut s = bias.map_or(0.0, |bb| bb[o]);
                for ci in 0..cin_g {
                    let c = g * cin_g + ci;
                    for k in 0..kw {
                        s += w[(o * cin_g + ci) * kw + k] * x[(bi * cin + c) * len + t * stride + k];
                    }
                }
                out[(bi * cout + o) * lout + t] = s;
            }
        }
    }
    out
}

pub fn linear_oracle(x: &[f64], rows: usize, fin: usize, w: &[f64], fout: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * fout);
    for r in 0..rows {
        for o in 0..fout {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..fin {
                s += x[r * fin + i] * w[o * fin + i];
            }
            out.push(s);
        }
    }
    out
}

pub fn batchnorm_oracle(
    x: &[f64],
    [outer, ch, inner]: [usize; 3],
    gamma: &[f64],
    beta: &[f64],
    stats: Option<(&[f64], &[f64])>,
    eps: f64,
) -> Vec<f64> {
    let idx = |o: usize, c: usize, i: usize| (o * ch + c) * inner + i;
    let mut out = vec![0.0; x.len()];
    for c in 0..ch {
        let vals: Vec<f64> = (0..outer)
            .flat_map(|o| (0..inner).map(move |i| (o, i)))
            .map(|(o, i)| x[idx(o, c, i)])
            .collect();
        let (m, v) = match stats {
            Some((m, v)) => (m[c], v[c]),
            None => {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                (m, vals.iter().map(|u| (u - m).powi(2)).sum::<f64>() / vals.len() as f64)
            }
        };
        for o in 0..outer {
            for i in 0..inner {
                out[idx(o, c, i)] = gamma[c] * (x[idx(o, c, i)] - m) / (v + eps).sqrt() + beta[c];
            }
        }
    }
    out
}

pub fn reduce_oracle(x: &[f64], shape: &[usize], axis: usize, kind: ReduceKind) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::new();
    for o in 0..outer {
        for i in 0..inner {
            let v: Vec<f64> = (0..n).map(|j| x[(o * n + j) * inner + i]).collect();
            let m = v.iter().sum::<f64>() / n as f64;
            out.push(match kind {
                ReduceKind::Max => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ReduceKind::Mean => m,
                ReduceKind::Variance => v.iter().map(|u| (u - m).powi(2)).sum::<f64>() / n as f64,
            });
        }
    }
    out
}

fn op_err(op: &str, case: usize, e: impl std::fmt::Display) -> String {
    format!("{op} case {case}: {e}")
}

/// Runs every differentiable graph op against its oracle; returns the op
/// names with their case counts.
pub fn check_tensor_ops(cases: usize, seed: u64) -> Result<Vec<(&'static str, usize)>, String> {
    let mut r = rng(seed);
    let mut counts: Vec<(&'static str, usize)> = Vec::new();
    let mut bump = |name: &'static str| match counts.iter_mut().find(|c| c.0 == name) {
        Some(c) => c.1 += 1,
        None => counts.push((name, 1)),
    };
    for case in 0..cases {
        // conv1d
        let groups = [1, 2, 3][case % 3];
        let b = r.gen_range(1..3);
        let cin = groups * r.gen_range(1..3);
        let cout = groups * r.gen_range(1..3);
        let kw = r.gen_range(1..4);
        let stride = r.gen_range(1..4);
        let len = kw + r.gen_range(0..7);
        let x = tensor(&mut r, &[b, cin, len]);
        let w = tensor(&mut r, &[cout, cin / groups, kw]);
        let bias = tensor(&mut r, &[cout]);
        let with_bias = case % 2 == 0;
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(&x), g.input(&w), g.input(&bias));
        let y = g
            .conv1d(xv, wv, with_bias.then_some(bv), stride, groups)
            .map_err(|e| op_err("conv1d", case, e))?;
        let want = conv1d_oracle(
            x.data(),
            [b, cin, len],
            w.data(),
            [cout, cin / groups, kw],
            with_bias.then_some(bias.data()),
            stride,
            groups,
        );
        close(g.value(y), &want, TOL).map_err(|e| op_err("conv1d", case, e))?;
        bump("conv1d");

        // linear
        let rows = r.gen_range(1..6);
        let fin = r.gen_range(1..7);
        let fout = r.gen_range(1..7);
        let x = tensor(&mut r, &[rows, fin]);
        let w = tensor(&mut r, &[fout, fin]);
        let bias = tensor(&mut r, &[fout]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(&x), g.input(&w), g.input(&bias));
        let y = g.linear(xv, wv, Some(bv)).map_err(|e| op_err("linear", case, e))?;
        let want = linear_oracle(x.data(), rows, fin, w.data(), fout, Some(bias.data()));
        close(g.value(y), &want, TOL).map_err(|e| op_err("linear", case, e))?;
        bump("linear");

        // batchnorm, train and eval
        let outer = r.gen_range(2..5);
        let ch = r.gen_range(1..4);
        let inner = if case % 2 == 0 { 1 } else { r.gen_range(1..4) };
        let shape: Vec<usize> = if inner == 1 && case % 4 == 0 { vec![outer, ch] } else { vec![outer, ch, inner] };
        let x = tensor(&mut r, &shape);
        let gamma = tensor(&mut r, &[ch]);
        let beta = tensor(&mut r, &[ch]);
        let rm = randn(&mut r, ch);
        let rv: Vec<f64> = (0..ch).map(|_| r.gen_range(0.1..2.0)).collect();
        for train in [true, false] {
            let mut g = Graph::new();
            let (xv, gv, bv) = (g.input(&x), g.input(&gamma), g.input(&beta));
            let mode = if train { BnMode::Train } else { BnMode::Eval { mean: &rm, var: &rv } };
            let (y, _) = g.batchnorm(xv, gv, bv, mode, 1e-5).map_err(|e| op_err("batchnorm", case, e))?;
            let stats = (!train).then_some((rm.as_slice(), rv.as_slice()));
            let want = batchnorm_oracle(x.data(), [outer, ch, inner], gamma.data(), beta.data(), stats, 1e-5);
            close(g.value(y), &want, TOL).map_err(|e| op_err("batchnorm", case, e))?;
        }
        bump("batchnorm");

        // elu, including large negative inputs
        let n = r.gen_range(1..40);
        let vals: Vec<f64> = (0..n).map(|_| r.gen_range(-30.0..3.0)).collect();
        let x = Tensor::new(vec![n], vals.clone()).unwrap();
        let alpha = r.gen_range(0.5..2.0);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let y = g.elu(xv, alpha);
        let want: Vec<f64> = vals.iter().map(|&v| if v > 0.0 { v } else { alpha * v.exp_m1() }).collect();
        close(g.value(y), &want, TOL).map_err(|e| op_err("elu", case, e))?;
        bump("elu");
        let mut g = Graph::inference();
        let xv = g.input(&x);
        let y = g.elu_consume(xv, alpha);
        close(g.value(y), &want, TOL).map_err(|e| op_err("elu_consume", case, e))?;
        bump("elu_consume");

        // reduce over a random axis
        let rank = r.gen_range(1..4);
        let shape: Vec<usize> = (0..rank).map(|_| r.gen_range(1..5)).collect();
        let axis = r.gen_range(0..rank);
        let x = tensor(&mut r, &shape);
        for kind in [ReduceKind::Max, ReduceKind::Mean, ReduceKind::Variance] {
            for tracked in [false, true] {
                let mut g = Graph::new();
                let t = if tracked { x.clone().with_grad() } else { x.clone() };
                let xv = g.input(&t);
                let y = g.reduce(xv, axis, kind).map_err(|e| op_err("reduce", case, e))?;
                let want = reduce_oracle(x.data(), &shape, axis, kind);
                close(g.value(y), &want, TOL).map_err(|e| op_err("reduce", case, e))?;
            }
        }
        bump("reduce");

        // concat along a random axis
        let rank = r.gen_range(1..4);
        let base: Vec<usize> = (0..rank).map(|_| r.gen_range(1..4)).collect();
        let axis = r.gen_range(0..rank);
        let parts: Vec<Tensor> = (0..r.gen_range(1..4))
            .map(|_| {
                let mut s = base.clone();
                s[axis] = r.gen_range(1..4);
                tensor(&mut r, &s)
            })
            .collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = parts.iter().map(|t| g.input(t)).collect();
        let y = g.concat(&vars, axis).map_err(|e| op_err("concat", case, e))?;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut want = Vec::new();
        for o in 0..outer {
            for p in &parts {
                let d = p.shape()[axis];
                want.extend_from_slice(&p.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        close(g.value(y), &want, 0.0).map_err(|e| op_err("concat", case, e))?;
        bump("concat");

        // elementwise binary and scalar ops
        let shape: Vec<usize> = (0..r.gen_range(1..4)).map(|_| r.gen_range(1..5)).collect();
        let a = tensor(&mut r, &shape);
        let bt = tensor(&mut r, &shape);
        let c: f64 = r.gen_range(-3.0..3.0);
        let mut g = Graph::new();
        let (av, bvv) = (g.input(&a), g.input(&bt));
        let zip = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.data().iter().zip(bt.data()).map(|(x, y)| f(*x, *y)).collect() };
        let add = g.add(av, bvv).unwrap();
        close(g.value(add), &zip(|x, y| x + y), TOL).map_err(|e| op_err("add", case, e))?;
        let sub = g.sub(av, bvv).unwrap();
        close(g.value(sub), &zip(|x, y| x - y), TOL).map_err(|e| op_err("sub", case, e))?;
        let mul = g.mul(av, bvv).unwrap();
        close(g.value(mul), &zip(|x, y| x * y), TOL).map_err(|e| op_err("mul", case, e))?;
        let sc = g.scale(av, c);
        let want: Vec<f64> = a.data().iter().map(|x| x * c).collect();
        close(g.value(sc), &want, TOL).map_err(|e| op_err("scale", case, e))?;
        let asc = g.add_scalar(av, c);
        let want: Vec<f64> = a.data().iter().map(|x| x + c).collect();
        close(g.value(asc), &want, TOL).map_err(|e| op_err("add_scalar", case, e))?;
        let s = g.sum(av);
        close(g.value(s), &[a.data().iter().sum()], TOL).map_err(|e| op_err("sum", case, e))?;
        let m = g.mean(av);
        let want = a.data().iter().sum::<f64>() / a.len() as f64;
        close(g.value(m), &[want], TOL).map_err(|e| op_err("mean", case, e))?;
        let mut g = Graph::inference();
        let (av, bvv) = (g.input(&a), g.input(&bt));
        let add = g.add_consume(av, bvv).unwrap();
        close(g.value(add), &zip(|x, y| x + y), TOL).map_err(|e| op_err("add_consume", case, e))?;
        for name in ["add", "add_consume", "sub", "mul", "scale", "add_scalar", "sum", "mean"] {
            bump(name);
        }

        // gather, narrow, reshape
        let (bb, ch, len) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..6));
        let mcount = r.gen_range(1..6);
        let x = tensor(&mut r, &[bb, ch, len]);
        let idx: Vec<usize> = (0..bb * mcount).map(|_| r.gen_range(0..len)).collect();
        let mut g = Graph::new();
        let xv = g.input(&x);
        let y = g.gather(xv, &idx, mcount).map_err(|e| op_err("gather", case, e))?;
        let mut want = Vec::new();
        for bi in 0..bb {
            for c in 0..ch {
                for j in 0..mcount {
                    want.push(x.data()[(bi * ch + c) * len + idx[bi * mcount + j]]);
                }
            }
        }
        close(g.value(y), &want, 0.0).map_err(|e| op_err("gather", case, e))?;
        bump("gather");

        let axis = r.gen_range(0..3);
        let dim = x.shape()[axis];
        let start = r.gen_range(0..dim);
        let take = r.gen_range(1..=dim - start);
        let nv = g.narrow(xv, axis, start, take).map_err(|e| op_err("narrow", case, e))?;
        let mut want = Vec::new();
        for bi in 0..bb {
            for c in 0..ch {
                for l in 0..len {
                    let pos = [bi, c, l][axis];
                    if pos >= start && pos < start + take {
                        want.push(x.data()[(bi * ch + c) * len + l]);
                    }
                }
            }
        }
        close(g.value(nv), &want, 0.0).map_err(|e| op_err("narrow", case, e))?;
        bump("narrow");

        let rs = g.reshape(xv, &[bb * ch * len]).map_err(|e| op_err("reshape", case, e))?;
        close(g.value(rs), x.data(), 0.0).map_err(|e| op_err("reshape", case, e))?;
        if g.shape(rs) != [bb * ch * len] {
            return Err(op_err("reshape", case, "wrong shape"));
        }
        bump("reshape");
    }
    Ok(counts)
}

// ---------------------------------------------------------------- finite differences

/// Relative error `||a - n|| / max(||a||, ||n||)` between analytic and
/// central-difference gradients of `sum(f(inputs) * r)` for every input.
pub fn grad_check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(&t.clone().with_grad())).collect();
    let y = f(&mut g, &vars);
    let probe = randn(&mut rng(seed), g.value(y).len());
    let shape = g.shape(y).to_vec();
    let loss_of = |g: &mut Graph, y: Var| -> Var {
        let p = g.constant_from(&shape, probe.clone()).unwrap();
        let m = g.mul(y, p).unwrap();
        g.sum(m)
    };
    let l = loss_of(&mut g, y);
    let grads = g.backward(l).unwrap();
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t)).collect();
        let y = f(&mut g, &vars);
        let l = loss_of(&mut g, y);
        g.value(l)[0]
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.of(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let mut ins = inputs.to_vec();
            ins[k].data_mut()[i] += h;
            let up = eval(&ins);
            ins[k].data_mut()[i] -= 2.0 * h;
            let down = eval(&ins);
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Below this gradient norm errors are absolute: a gradient that is zero by
/// construction (a bias feeding a train-mode batch norm) only carries
/// finite-difference round-off.
pub const ZERO_GRAD_NORM: f64 = 1e-6;

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < ZERO_GRAD_NORM {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Values bounded away from zero and from each other, so kinks (ELU at 0,
/// max ties) stay outside the difference stencil.
pub fn spread_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) * 0.13 * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Every op and layer block checked in isolation; returns `(name, rel_err)`.
pub fn layer_grad_checks(seed: u64) -> Vec<(String, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut push = |name: String, e: f64| out.push((name, e));

    for (groups, stride, batch, bias) in [(1, 1, 1, true), (2, 2, 2, true), (3, 1, 2, false), (1, 3, 1, false)] {
        let x = tensor(&mut r, &[batch, 2 * groups, 9]);
        let w = tensor(&mut r, &[2 * groups, 2, 3]);
        let b = tensor(&mut r, &[2 * groups]);
        let e = grad_check(
            &[x, w, b],
            |g, v| g.conv1d(v[0], v[1], bias.then_some(v[2]), stride, groups).unwrap(),
            seed,
        );
        push(format!("conv1d g={groups} s={stride} b={batch}"), e);
    }
    let x2 = tensor(&mut r, &[3, 5]);
    let x3 = tensor(&mut r, &[2, 3, 5]);
    let w = tensor(&mut r, &[4, 5]);
    let b = tensor(&mut r, &[4]);
    push("linear rank2".into(), grad_check(&[x2.clone(), w.clone(), b.clone()], |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(), seed));
    push("linear rank3".into(), grad_check(&[x3, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(), seed));

    for shape in [vec![5, 3], vec![3, 2, 4]] {
        let x = tensor(&mut r, &shape);
        let gamma = tensor(&mut r, &[shape[1]]);
        let beta = tensor(&mut r, &[shape[1]]);
        let e = grad_check(
            &[x.clone(), gamma.clone(), beta.clone()],
            |g, v| g.batchnorm(v[0], v[1], v[2], BnMode::Train, 1e-5).unwrap().0,
            seed,
        );
        push(format!("batchnorm train {shape:?}"), e);
        let (m, var) = (vec![0.1; shape[1]], vec![0.7; shape[1]]);
        let e = grad_check(
            &[x, gamma, beta],
            |g, v| g.batchnorm(v[0], v[1], v[2], BnMode::Eval { mean: &m, var: &var }, 1e-5).unwrap().0,
            seed,
        );
        push(format!("batchnorm eval {shape:?}"), e);
    }

    let x = spread_tensor(&mut r, &[4, 6]);
    push("elu".into(), grad_check(&[x], |g, v| g.elu(v[0], 1.0), seed));

    let x = spread_tensor(&mut r, &[2, 3, 4]);
    for axis in 0..3 {
        for kind in [ReduceKind::Max, ReduceKind::Mean, ReduceKind::Variance] {
            let e = grad_check(std::slice::from_ref(&x), |g, v| g.reduce(v[0], axis, kind).unwrap(), seed);
            push(format!("reduce {kind:?} axis {axis}"), e);
        }
    }

    let a = tensor(&mut r, &[2, 3, 2]);
    let b = tensor(&mut r, &[2, 1, 2]);
    push("concat".into(), grad_check(&[a.clone(), b], |g, v| g.concat(&[v[0], v[1]], 1).unwrap(), seed));
    let c = tensor(&mut r, &[2, 3, 2]);
    push("add".into(), grad_check(&[a.clone(), c.clone()], |g, v| g.add(v[0], v[1]).unwrap(), seed));
    push("sub".into(), grad_check(&[a.clone(), c.clone()], |g, v| g.sub(v[0], v[1]).unwrap(), seed));
    push("mul".into(), grad_check(&[a.clone(), c.clone()], |g, v| g.mul(v[0], v[1]).unwrap(), seed));
    push("mul self".into(), grad_check(std::slice::from_ref(&a), |g, v| g.mul(v[0], v[0]).unwrap(), seed));
    push("scale".into(), grad_check(std::slice::from_ref(&a), |g, v| g.scale(v[0], -1.7), seed));
    push("add_scalar".into(), grad_check(std::slice::from_ref(&a), |g, v| g.add_scalar(v[0], 0.3), seed));
    push("sum".into(), grad_check(std::slice::from_ref(&a), |g, v| g.sum(v[0]), seed));
    push("mean".into(), grad_check(std::slice::from_ref(&a), |g, v| g.mean(v[0]), seed));
    push(
        "gather".into(),
        grad_check(std::slice::from_ref(&a), |g, v| g.gather(v[0], &[1, 1, 0, 0, 1, 0], 3).unwrap(), seed),
    );
    push("narrow".into(), grad_check(std::slice::from_ref(&a), |g, v| g.narrow(v[0], 1, 1, 2).unwrap(), seed));
    push("reshape".into(), grad_check(&[a], |g, v| g.reshape(v[0], &[3, 4]).unwrap(), seed));

    // conv -> batch norm -> ELU -> max, the SGP building block
    let x = tensor(&mut r, &[2, 4, 6]);
    let w = tensor(&mut r, &[4, 2, 1]);
    let gamma = tensor(&mut r, &[4]);
    let beta = tensor(&mut r, &[4]);
    let e = grad_check(
        &[x, w, gamma, beta],
        |g, v| {
            let y = g.conv1d(v[0], v[1], None, 1, 2).unwrap();
            let (y, _) = g.batchnorm(y, v[2], v[3], BnMode::Train, 1e-5).unwrap();
            let y = g.elu(y, 1.0);
            g.reduce(y, 2, ReduceKind::Max).unwrap()
        },
        seed,
    );
    push("conv-bn-elu-max block".into(), e);

    // linear -> batch norm -> ELU, the fusion and weight heads
    let x = tensor(&mut r, &[6, 5]);
    let w = tensor(&mut r, &[3, 5]);
    let b = tensor(&mut r, &[3]);
    let gamma = tensor(&mut r, &[3]);
    let beta = tensor(&mut r, &[3]);
    let e = grad_check(
        &[x, w, b, gamma, beta],
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let (y, _) = g.batchnorm(y, v[3], v[4], BnMode::Train, 1e-5).unwrap();
            g.elu(y, 1.0)
        },
        seed,
    );
    push("linear-bn-elu block".into(), e);
    out
}

// ---------------------------------------------------------------- full model

/// Patch sets of the first `clouds` blob samples under `config`.
pub fn blob_sets(config: &pcqa::network::ModelConfig, clouds: usize, points: usize, seed: u64) -> Vec<pcqa::patching::PatchSet> {
    let samples = pcqa::synthetic::blob_dataset(points, seed).unwrap();
    pcqa::training::prepare_patches(&samples[..clouds], config, None).unwrap()
}

/// Central differences of the train-mode loss against every parameter of the
/// toy network. Returns per-tensor relative errors and the analytic gradient
/// of every parameter, concatenated in name order.
pub fn model_grad_check(seed: u64) -> (Vec<(String, f64)>, Vec<f64>) {
    use pcqa::network::{forward_train, ModelConfig, ModelWeights};
    use pcqa::training::{loss, LossConfig};

    let config = ModelConfig::toy();
    let sets = blob_sets(&config, 2, 300, seed);
    let refs: Vec<_> = sets.iter().collect();
    let y = [0.9, 0.1];
    let cfg = LossConfig::default();
    let loss_value = |w: &ModelWeights| -> f64 {
        let pass = forward_train(&refs, &config, w, seed).unwrap();
        let mut g = pass.graph;
        let l = loss(&mut g, pass.patch_scores, pass.global, &y, &cfg).unwrap();
        g.value(l)[0]
    };
    let weights = ModelWeights::init(&config, seed).unwrap();
    let pass = forward_train(&refs, &config, &weights, seed).unwrap();
    let mut g = pass.graph;
    let l = loss(&mut g, pass.patch_scores, pass.global, &y, &cfg).unwrap();
    let grads = g.backward(l).unwrap();

    let h = 1e-6;
    let names: Vec<String> = weights
        .params()
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.clone())
        .collect();
    let mut report = Vec::new();
    let mut flat = Vec::new();
    for name in names {
        let analytic = grads.param(&name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let n = analytic.len();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let mut w = weights.clone();
            w.params_mut().get_mut(&name).unwrap().data_mut()[i] += h;
            let up = loss_value(&w);
            w.params_mut().get_mut(&name).unwrap().data_mut()[i] -= 2.0 * h;
            let down = loss_value(&w);
            numeric.push((up - down) / (2.0 * h));
        }
        report.push((name, rel_err(&analytic, &numeric)));
        flat.extend(analytic);
    }
    (report, flat)
}
