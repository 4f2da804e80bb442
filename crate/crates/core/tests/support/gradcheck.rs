//! Finite-difference gradient checks against independent f64 forwards.
//!
//! Each case builds an op on the tape (f32, analytic backward) and, separately,
//! evaluates a plain f64 loop implementation of the same function. Numeric
//! gradients come from central differences of the f64 version, so rounding in
//! the f32 forward never enters the comparison.

use hybnn_core::autodiff::{Activation, Mode, Tape, Var};
use hybnn_core::rng::stream_rng;
use hybnn_core::{Result, Tensor};
use rand::Rng;

pub const REL_TOL: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-3;
const H: f64 = 1e-6;
const EPS: f64 = 1e-5;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Case {
    pub name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
    reference: Reference,
}

pub struct Outcome {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL && self.checked > 0
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR)
}

/// Projects the output onto fixed weights so any output shape yields a scalar.
fn probe(len: usize) -> Vec<f64> {
    (0..len).map(|i| ((i as f64 + 1.0) * 0.7317).sin()).collect()
}

pub fn check(case: &Case) -> Outcome {
    let mut tape = Tape::new(Mode::Train);
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars).expect("forward");
    let n_out = tape.value(out).len();
    let w = probe(n_out);
    let loss = if n_out == 1 && tape.value(out).rank() == 0 {
        out
    } else {
        let shape = tape.value(out).shape().to_vec();
        let wt = Tensor::new(&shape, w.iter().map(|&v| v as f32).collect()).unwrap();
        let wv = tape.leaf(wt, false);
        let m = tape.mul(out, wv).unwrap();
        tape.sum(m)
    };
    tape.backward(loss).expect("backward");

    let base: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let objective = |x: &[Vec<f64>]| -> f64 {
        let y = (case.reference)(x);
        assert_eq!(y.len(), n_out, "{}: reference output size", case.name);
        if n_out == 1 && tape.value(out).rank() == 0 {
            y[0]
        } else {
            y.iter().zip(&w).map(|(a, b)| a * (*b as f32) as f64).sum()
        }
    };
    // the tape output must agree with the reference before gradients mean anything
    let y_ref = (case.reference)(&base);
    for (a, b) in tape.value(out).data().iter().zip(&y_ref) {
        assert!(
            (*a as f64 - b).abs() <= 1e-4 * b.abs().max(1.0),
            "{}: forward {a} vs reference {b}",
            case.name
        );
    }

    let (mut worst, mut checked) = (0.0f64, 0usize);
    for (i, v) in vars.iter().enumerate() {
        let g = tape.grad(*v).expect("input gradient");
        for j in 0..base[i].len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            let h = H * base[i][j].abs().max(1.0);
            plus[i][j] += h;
            minus[i][j] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[j] as f64, numeric));
            checked += 1;
        }
    }
    Outcome {
        name: case.name,
        max_rel_err: worst,
        checked,
    }
}

fn rand_tensor(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = stream_rng(seed, 77);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from `kinks` by at least `gap`.
fn away_from(shape: &[usize], seed: u64, lo: f32, hi: f32, kinks: &[f32], gap: f32) -> Tensor {
    let mut t = rand_tensor(shape, seed, lo, hi);
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < gap {
                *v = k + if *v >= k { gap } else { -gap };
            }
        }
    }
    t
}

fn dense_ref(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, i: usize, o: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut s = b.map_or(0.0, |b| b[c]);
            for k in 0..i {
                s += x[r * i + k] * w[c * i + k];
            }
            y[r * o + c] = s;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_ref(
    x: &[f64],
    k: &[f64],
    b: Option<&[f64]>,
    (n, cin, h, w): (usize, usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += k[((co * cin + ci) * kh + ky) * kw + kx]
                                    * x[((s * cin + ci) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    y[((s * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

/// Train-mode batchnorm over `[n, c, spatial]` with biased batch variance.
fn bn_ref(x: &[f64], g: &[f64], b: &[f64], n: usize, c: usize, spatial: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    let m = (n * spatial) as f64;
    for ch in 0..c {
        let idx = |s: usize, p: usize| (s * c + ch) * spatial + p;
        let mut mean = 0.0;
        for s in 0..n {
            for p in 0..spatial {
                mean += x[idx(s, p)];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for s in 0..n {
            for p in 0..spatial {
                var += (x[idx(s, p)] - mean).powi(2);
            }
        }
        var /= m;
        for s in 0..n {
            for p in 0..spatial {
                y[idx(s, p)] = g[ch] * (x[idx(s, p)] - mean) / (var + EPS).sqrt() + b[ch];
            }
        }
    }
    y
}

fn softmax_ce_ref(logits: &[f64], labels: &[usize], k: usize) -> f64 {
    let rows = labels.len();
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = &logits[r * k..(r + 1) * k];
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / rows as f64
}

pub fn cases() -> Vec<Case> {
    let mut v: Vec<Case> = Vec::new();

    v.push(Case {
        name: "dense",
        inputs: vec![rand_tensor(&[3, 5], 1, -1.0, 1.0), rand_tensor(&[4, 5], 2, -1.0, 1.0), rand_tensor(&[4], 3, -1.0, 1.0)],
        build: Box::new(|t, x| t.dense(x[0], x[1], Some(x[2]))),
        reference: Box::new(|x| dense_ref(&x[0], &x[1], Some(&x[2]), 3, 5, 4)),
    });

    for (name, stride, pad, bias) in [("conv2d_s1_p1", 1, 1, true), ("conv2d_s2_p1", 2, 1, false), ("conv2d_s1_p0_cout1", 1, 0, true)] {
        let cout = if name.ends_with("cout1") { 1 } else { 3 };
        let mut inputs = vec![rand_tensor(&[2, 2, 5, 6], 4, -1.0, 1.0), rand_tensor(&[cout, 2, 3, 3], 5, -1.0, 1.0)];
        if bias {
            inputs.push(rand_tensor(&[cout], 6, -1.0, 1.0));
        }
        v.push(Case {
            name,
            inputs,
            build: Box::new(move |t, x| t.conv2d(x[0], x[1], x.get(2).copied(), stride, pad)),
            reference: Box::new(move |x| {
                conv_ref(&x[0], &x[1], x.get(2).map(|b| b.as_slice()), (2, 2, 5, 6), (cout, 3, 3), stride, pad)
            }),
        });
    }

    let stats = (Tensor::zeros(&[3]), Tensor::full(&[3], 1.0));
    let s2 = stats.clone();
    v.push(Case {
        name: "batchnorm_2d",
        inputs: vec![rand_tensor(&[5, 3], 7, -2.0, 2.0), rand_tensor(&[3], 8, 0.5, 1.5), rand_tensor(&[3], 9, -0.5, 0.5)],
        build: Box::new(move |t, x| t.batchnorm(x[0], x[1], x[2], (&s2.0, &s2.1), None, 0.1, EPS as f32)),
        reference: Box::new(|x| bn_ref(&x[0], &x[1], &x[2], 5, 3, 1)),
    });
    let s4 = stats.clone();
    v.push(Case {
        name: "batchnorm_4d",
        inputs: vec![rand_tensor(&[2, 3, 2, 3], 10, -2.0, 2.0), rand_tensor(&[3], 11, 0.5, 1.5), rand_tensor(&[3], 12, -0.5, 0.5)],
        build: Box::new(move |t, x| t.batchnorm(x[0], x[1], x[2], (&s4.0, &s4.1), None, 0.1, EPS as f32)),
        reference: Box::new(|x| bn_ref(&x[0], &x[1], &x[2], 2, 3, 6)),
    });
    let rm = Tensor::new(&[3], vec![0.3, -0.2, 0.1]).unwrap();
    let rv = Tensor::new(&[3], vec![1.5, 0.7, 2.0]).unwrap();
    let (rm2, rv2) = (rm.clone(), rv.clone());
    v.push(Case {
        name: "batchnorm_eval",
        inputs: vec![rand_tensor(&[4, 3], 13, -2.0, 2.0), rand_tensor(&[3], 14, 0.5, 1.5), rand_tensor(&[3], 15, -0.5, 0.5)],
        build: Box::new(move |t, x| {
            let mut e = Tape::new(Mode::Eval);
            std::mem::swap(t, &mut e);
            // rebuild the leaves on an eval-mode tape
            let vals: Vec<Tensor> = x.iter().map(|&v| e.value(v).clone()).collect();
            let ids: Vec<Var> = vals.into_iter().map(|v| t.leaf(v, true)).collect();
            assert_eq!(ids, x, "leaf order preserved");
            t.batchnorm(x[0], x[1], x[2], (&rm2, &rv2), None, 0.1, EPS as f32)
        }),
        reference: Box::new(move |x| {
            let (m, var) = (rm.data(), rv.data());
            (0..12)
                .map(|i| {
                    let c = i % 3;
                    x[1][c] * (x[0][i] - m[c] as f64) / (var[c] as f64 + EPS).sqrt() + x[2][c]
                })
                .collect()
        }),
    });

    v.push(Case {
        name: "relu",
        inputs: vec![away_from(&[4, 5], 16, -2.0, 2.0, &[0.0], 0.05)],
        build: Box::new(|t, x| Ok(t.activation(x[0], Activation::Relu))),
        reference: Box::new(|x| x[0].iter().map(|v| v.max(0.0)).collect()),
    });
    v.push(Case {
        name: "sigmoid",
        inputs: vec![rand_tensor(&[4, 5], 17, -4.0, 4.0)],
        build: Box::new(|t, x| Ok(t.activation(x[0], Activation::Sigmoid))),
        reference: Box::new(|x| x[0].iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()),
    });
    v.push(Case {
        name: "hardtanh",
        inputs: vec![away_from(&[4, 5], 18, -2.0, 2.0, &[-1.0, 1.0], 0.05)],
        build: Box::new(|t, x| Ok(t.activation(x[0], Activation::Hardtanh))),
        reference: Box::new(|x| x[0].iter().map(|v| v.clamp(-1.0, 1.0)).collect()),
    });
    v.push(Case {
        name: "upsample2x",
        inputs: vec![rand_tensor(&[2, 2, 3, 2], 19, -1.0, 1.0)],
        build: Box::new(|t, x| t.upsample2x(x[0])),
        reference: Box::new(|x| {
            let (n, c, h, w) = (2, 2, 3, 2);
            let mut y = vec![0.0; n * c * 4 * h * w];
            for s in 0..n * c {
                for oy in 0..2 * h {
                    for ox in 0..2 * w {
                        y[(s * 2 * h + oy) * 2 * w + ox] = x[0][(s * h + oy / 2) * w + ox / 2];
                    }
                }
            }
            y
        }),
    });
    v.push(Case {
        name: "reshape",
        inputs: vec![rand_tensor(&[2, 3, 2], 20, -1.0, 1.0)],
        build: Box::new(|t, x| t.reshape(x[0], &[3, 4])),
        reference: Box::new(|x| x[0].clone()),
    });
    v.push(Case {
        name: "add",
        inputs: vec![rand_tensor(&[3, 4], 21, -1.0, 1.0), rand_tensor(&[3, 4], 22, -1.0, 1.0)],
        build: Box::new(|t, x| t.add(x[0], x[1])),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
    });
    v.push(Case {
        name: "mul",
        inputs: vec![rand_tensor(&[3, 4], 23, -1.0, 1.0), rand_tensor(&[3, 4], 24, -1.0, 1.0)],
        build: Box::new(|t, x| t.mul(x[0], x[1])),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
    });
    v.push(Case {
        name: "scale",
        inputs: vec![rand_tensor(&[3, 4], 25, -1.0, 1.0)],
        build: Box::new(|t, x| Ok(t.scale(x[0], -2.5))),
        reference: Box::new(|x| x[0].iter().map(|a| a * -2.5f32 as f64).collect()),
    });
    v.push(Case {
        name: "sum",
        inputs: vec![rand_tensor(&[3, 4], 26, -1.0, 1.0)],
        build: Box::new(|t, x| Ok(t.sum(x[0]))),
        reference: Box::new(|x| vec![x[0].iter().sum()]),
    });
    let target = rand_tensor(&[3, 4], 27, 0.0, 1.0);
    let t2 = target.clone();
    v.push(Case {
        name: "bce",
        inputs: vec![rand_tensor(&[3, 4], 28, 0.05, 0.95)],
        build: Box::new(move |t, x| t.bce(x[0], &t2)),
        reference: Box::new(move |x| {
            let n = x[0].len() as f64;
            let s: f64 = x[0]
                .iter()
                .zip(target.data())
                .map(|(&p, &y)| {
                    let y = y as f64;
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum();
            vec![s / n]
        }),
    });
    v.push(Case {
        name: "softmax_ce",
        inputs: vec![rand_tensor(&[4, 3], 29, -2.0, 2.0)],
        build: Box::new(|t, x| t.softmax_ce(x[0], &[0, 2, 1, 2])),
        reference: Box::new(|x| vec![softmax_ce_ref(&x[0], &[0, 2, 1, 2], 3)]),
    });

    // dense -> batchnorm -> relu -> dense -> softmax cross-entropy
    let st = (Tensor::zeros(&[4]), Tensor::full(&[4], 1.0));
    v.push(Case {
        name: "two_layer_net",
        inputs: vec![
            rand_tensor(&[6, 5], 30, -1.0, 1.0),
            rand_tensor(&[4, 5], 31, -1.0, 1.0),
            rand_tensor(&[4], 32, 0.5, 1.5),
            rand_tensor(&[4], 33, 0.2, 0.6),
            rand_tensor(&[2, 4], 34, -1.0, 1.0),
        ],
        build: Box::new(move |t, x| {
            let h = t.dense(x[0], x[1], None)?;
            let h = t.batchnorm(h, x[2], x[3], (&st.0, &st.1), None, 0.1, EPS as f32)?;
            let h = t.relu(h);
            let y = t.dense(h, x[4], None)?;
            t.softmax_ce(y, &[0, 1, 1, 0, 1, 0])
        }),
        reference: Box::new(|x| {
            let h = dense_ref(&x[0], &x[1], None, 6, 5, 4);
            let h: Vec<f64> = bn_ref(&h, &x[2], &x[3], 6, 4, 1).into_iter().map(|v| v.max(0.0)).collect();
            let y = dense_ref(&h, &x[4], None, 6, 4, 2);
            vec![softmax_ce_ref(&y, &[0, 1, 1, 0, 1, 0], 2)]
        }),
    });
    v
}

/// The clipped straight-through rule, checked for exact equality:
/// `d/dx sign(x) := upstream · 1{|x| ≤ 1}`.
pub fn ste_contract_holds() -> bool {
    let xs = [-3.0f32, -1.0000001, -1.0, -0.5, -0.0, 0.0, 0.25, 1.0, 1.0000001, 2.0];
    let mut tape = Tape::new(Mode::Train);
    let x = tape.leaf(Tensor::new(&[xs.len()], xs.to_vec()).unwrap(), true);
    let y = tape.sign_ste(x);
    let up: Vec<f32> = (0..xs.len()).map(|i| 0.5 + i as f32).collect();
    let u = tape.leaf(Tensor::new(&[xs.len()], up.clone()).unwrap(), false);
    let m = tape.mul(y, u).unwrap();
    let l = tape.sum(m);
    tape.backward(l).unwrap();
    let g = tape.grad(x).unwrap();
    let forward_ok = tape
        .value(y)
        .data()
        .iter()
        .zip(&xs)
        .all(|(&s, &v)| s == if v >= 0.0 { 1.0 } else { -1.0 });
    let backward_ok = g
        .data()
        .iter()
        .zip(xs.iter().zip(&up))
        .all(|(&gi, (&v, &u))| gi == if v.abs() <= 1.0 { u } else { 0.0 });
    forward_ok && backward_ok
}
