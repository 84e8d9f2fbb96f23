//! Built-in verification: finite-difference gradient checks for every
//! differentiable operation and loss, naive-loop oracles for the kernels
//! and metrics, and a brute-force oracle for axial attention.
//!
//! Every check uses fixed seeds, so a run is reproducible.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::GrayImage;
use crate::losses::{l_ae, l_feature, l_fuse, l_pixel, l_ssim, l_ssim_bar, LossWeights};
use crate::metrics::{entropy_with_bins, mutual_information, scd, ssim, SsimParams};
use crate::model::{axial_attention, Axis, FeaturePyramid};
use crate::tensor::{grad_check, ops, Tape, Tensor, TensorError, Var};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst observed error.
    pub worst: f64,
    pub tolerance: f64,
    /// Set when the check could not run at all.
    pub error: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.worst <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn first_failure(&self) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| !c.passed())
    }

    /// One `PASS`/`FAIL` line per check.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed() { "PASS" } else { "FAIL" };
            match &c.error {
                Some(e) => out.push_str(&format!("{status} {}: {e}\n", c.name)),
                None => out.push_str(&format!(
                    "{status} {}: worst {:.3e} (tolerance {:.0e})\n",
                    c.name, c.worst, c.tolerance
                )),
            }
        }
        out
    }
}

fn outcome(name: impl Into<String>, tolerance: f64, r: Result<f64, String>) -> CheckOutcome {
    match r {
        Ok(worst) => CheckOutcome {
            name: name.into(),
            worst,
            tolerance,
            error: None,
        },
        Err(e) => CheckOutcome {
            name: name.into(),
            worst: f64::INFINITY,
            tolerance,
            error: Some(e),
        },
    }
}

/// Runs every check with `oracle_cases` random instances per oracle.
pub fn run_with(oracle_cases: usize) -> SelftestReport {
    let start = Instant::now();
    let mut checks = gradient_checks();
    checks.extend(oracle_checks(oracle_cases));
    checks.extend(attention_checks());
    SelftestReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run() -> SelftestReport {
    run_with(100)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so ReLU stays off its kink under probing.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced 0.01 apart, so pooling maxima stay unique.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], rng);
    Tensor::new(shape, order.into_iter().map(|i| i as f64 * 0.01 - 0.3).collect()).expect("shape")
}

/// `sum(x * r)` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(random(tape.shape(x), &mut rng, -1.0, 1.0));
    let p = tape.mul(x, r)?;
    Ok(tape.sum(p))
}

type GradFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;

fn grad_case(name: &str, f: GradFn, inputs: Vec<Tensor>) -> CheckOutcome {
    let r = grad_check(f, &inputs, GRAD_EPS).map_err(|e| e.to_string());
    outcome(format!("{name} gradient"), GRAD_TOLERANCE, r)
}

fn image_tensor(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    random(&[1, n, n], rng, 0.05, 0.95)
}

fn pyramid(vars: &[Var]) -> FeaturePyramid {
    FeaturePyramid { scales: vars.to_vec() }
}

/// Central-difference checks of every tape operation and loss.
pub fn gradient_checks() -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let r = &mut rng;
    let mut out = Vec::new();

    out.push(grad_case(
        "conv2d",
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1)?;
            project(t, y, 1)
        }),
        vec![random(&[2, 7, 6], r, -1.0, 1.0), random(&[3, 2, 3, 3], r, -1.0, 1.0)],
    ));
    out.push(grad_case(
        "conv2d stride 2",
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 2, 0)?;
            project(t, y, 2)
        }),
        vec![random(&[2, 9, 9], r, -1.0, 1.0), random(&[2, 2, 3, 3], r, -1.0, 1.0)],
    ));
    out.push(grad_case(
        "add_channel_bias",
        Box::new(|t, v| {
            let y = t.add_channel_bias(v[0], v[1])?;
            project(t, y, 3)
        }),
        vec![random(&[3, 4, 5], r, -1.0, 1.0), random(&[3], r, -1.0, 1.0)],
    ));
    out.push(grad_case(
        "matmul",
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 4)
        }),
        vec![random(&[5, 4], r, -1.0, 1.0), random(&[4, 6], r, -1.0, 1.0)],
    ));
    out.push(grad_case(
        "batched matmul",
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 5)
        }),
        vec![random(&[3, 4, 2], r, -1.0, 1.0), random(&[3, 2, 5], r, -1.0, 1.0)],
    ));
    out.push(grad_case(
        "softmax",
        Box::new(|t, v| {
            let y = t.softmax(v[0], 1)?;
            project(t, y, 6)
        }),
        vec![random(&[2, 5, 3], r, -2.0, 2.0)],
    ));
    out.push(grad_case(
        "concat",
        Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]], 0)?;
            project(t, y, 7)
        }),
        vec![random(&[2, 3, 3], r, -1.0, 1.0), random(&[1, 3, 3], r, -1.0, 1.0)],
    ));
    out.push(grad_case(
        "upsample_nearest",
        Box::new(|t, v| {
            let y = t.upsample_nearest(v[0], 2)?;
            project(t, y, 8)
        }),
        vec![random(&[2, 3, 4], r, -1.0, 1.0)],
    ));
    out.push(grad_case(
        "max_pool2d",
        Box::new(|t, v| {
            let y = t.max_pool2d(v[0], 2)?;
            project(t, y, 9)
        }),
        vec![distinct(&[2, 6, 6], r)],
    ));
    out.push(grad_case(
        "reshape and permute",
        Box::new(|t, v| {
            let y = t.reshape(v[0], &[3, 2, 4])?;
            let y = t.permute(y, &[2, 0, 1])?;
            project(t, y, 10)
        }),
        vec![random(&[6, 4], r, -1.0, 1.0)],
    ));
    out.push(grad_case(
        "elementwise arithmetic",
        Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(a, v[2])?;
            let m = t.mul(s, v[1])?;
            let d = t.div(m, v[2])?;
            let q = t.square(d)?;
            let q = t.add_scalar(q, 0.5);
            let q = t.mul_scalar(q, -1.5);
            let m = t.mean(q);
            let p = project(t, d, 11)?;
            t.add(m, p)
        }),
        vec![
            random(&[3, 4], r, -1.0, 1.0),
            random(&[3, 4], r, -1.0, 1.0),
            random(&[3, 4], r, 0.5, 1.5),
        ],
    ));
    out.push(grad_case(
        "relu",
        Box::new(|t, v| {
            let y = t.relu(v[0]);
            project(t, y, 12)
        }),
        vec![off_kink(&[4, 5], r)],
    ));
    out.push(grad_case(
        "sigmoid",
        Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, 13)
        }),
        vec![random(&[4, 5], r, -3.0, 3.0)],
    ));

    let w = LossWeights {
        omega_m: vec![1.0, 0.5],
        ..LossWeights::default()
    };
    out.push(grad_case(
        "l_pixel",
        Box::new(|t, v| l_pixel(t, v[0], v[1])),
        vec![image_tensor(8, r), image_tensor(8, r)],
    ));
    out.push(grad_case(
        "l_ssim",
        Box::new(|t, v| l_ssim(t, v[0], v[1])),
        vec![image_tensor(16, r), image_tensor(16, r)],
    ));
    let wa = w.clone();
    out.push(grad_case(
        "l_ae",
        Box::new(move |t, v| l_ae(t, v[0], v[1], &wa)),
        vec![image_tensor(12, r), image_tensor(12, r)],
    ));
    out.push(grad_case(
        "l_ssim_bar",
        Box::new(|t, v| l_ssim_bar(t, v[0], v[1], v[2])),
        vec![image_tensor(14, r), image_tensor(14, r), image_tensor(14, r)],
    ));
    let wf = w.clone();
    out.push(grad_case(
        "l_feature",
        Box::new(move |t, v| {
            let f = pyramid(&v[0..2]);
            let a = pyramid(&v[2..4]);
            let b = pyramid(&v[4..6]);
            l_feature(t, &f, &a, &b, &wf)
        }),
        (0..3)
            .flat_map(|_| [random(&[2, 4, 4], r, -1.0, 1.0), random(&[3, 2, 2], r, -1.0, 1.0)])
            .collect(),
    ));
    let wl = w;
    let mut fuse_inputs = vec![image_tensor(12, r), image_tensor(12, r), image_tensor(12, r)];
    fuse_inputs.extend((0..3).flat_map(|_| [random(&[2, 4, 4], r, -1.0, 1.0), random(&[2, 2, 2], r, -1.0, 1.0)]));
    out.push(grad_case(
        "l_fuse",
        Box::new(move |t, v| {
            let f = pyramid(&v[3..5]);
            let a = pyramid(&v[5..7]);
            let b = pyramid(&v[7..9]);
            l_fuse(t, v[0], v[1], v[2], &f, &a, &b, &wl)
        }),
        fuse_inputs,
    ));
    for (axis, label, seed) in [(Axis::Width, "width", 14), (Axis::Height, "height", 15)] {
        let mut inputs = vec![random(&[4, 3, 5], r, -1.0, 1.0)];
        inputs.extend((0..4).map(|_| random(&[4, 4], r, -0.7, 0.7)));
        out.push(grad_case(
            &format!("axial attention ({label})"),
            Box::new(move |t, v| {
                let a = axial_attention(t, v[0], axis, [v[1], v[2], v[3], v[4]], 2)
                    .map_err(|e| TensorError::Dimension(e.to_string()))?;
                project(t, a.output, seed)
            }),
            inputs,
        ));
    }
    out
}

// Naive loop oracles. They share no code with the kernels they check.

fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xo * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.data()[(c * h + iy as usize) * w + ix as usize]
                                * k.data()[((o * ci + c) * ks + ky) * ks + kx];
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = acc;
            }
        }
    }
    (vec![co, oh, ow], out)
}

fn ssim_oracle(a: &GrayImage, b: &GrayImage) -> f64 {
    let (ws, sigma, k1, k2) = (11usize, 1.5f64, 0.01f64, 0.03f64);
    let (c1, c2) = ((k1 * 1.0f64).powi(2), (k2 * 1.0f64).powi(2));
    let half = (ws / 2) as f64;
    let mut weights = vec![vec![0.0; ws]; ws];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - half, j as f64 - half);
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (w, h) = a.dims();
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - ws {
        for x0 in 0..=w - ws {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..ws {
                for j in 0..ws {
                    let g = weights[i][j] / total;
                    ma += g * a.get(x0 + j, y0 + i);
                    mb += g * b.get(x0 + j, y0 + i);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..ws {
                for j in 0..ws {
                    let g = weights[i][j] / total;
                    let (da, db) = (a.get(x0 + j, y0 + i) - ma, b.get(x0 + j, y0 + i) - mb);
                    va += g * da * da;
                    vb += g * db * db;
                    cov += g * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn bin(p: f64, bins: usize) -> usize {
    let mut k = 0;
    while k + 1 < bins && p >= (k + 1) as f64 / bins as f64 {
        k += 1;
    }
    k
}

fn entropy_oracle(img: &GrayImage, bins: usize) -> f64 {
    let px = img.pixels();
    let n = px.len() as f64;
    let mut h = 0.0;
    for k in 0..bins {
        let c = px.iter().filter(|&&p| bin(p, bins) == k).count();
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.ln() / std::f64::consts::LN_2;
        }
    }
    h
}

fn mi_oracle(a: &GrayImage, b: &GrayImage, bins: usize) -> f64 {
    let n = a.pixels().len() as f64;
    let ia: Vec<usize> = a.pixels().iter().map(|&p| bin(p, bins)).collect();
    let ib: Vec<usize> = b.pixels().iter().map(|&p| bin(p, bins)).collect();
    let mut mi = 0.0;
    for x in 0..bins {
        let px = ia.iter().filter(|&&v| v == x).count() as f64 / n;
        if px == 0.0 {
            continue;
        }
        for y in 0..bins {
            let py = ib.iter().filter(|&&v| v == y).count() as f64 / n;
            let pxy = ia.iter().zip(&ib).filter(|(&u, &v)| u == x && v == y).count() as f64 / n;
            if pxy > 0.0 {
                mi += pxy * (pxy / (px * py)).log2();
            }
        }
    }
    mi
}

fn corr_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let dx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let dy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    num / (dx * dy).sqrt()
}

fn scd_oracle(f: &GrayImage, v: &GrayImage, i: &GrayImage) -> f64 {
    let d1: Vec<f64> = f.pixels().iter().zip(v.pixels()).map(|(a, b)| a - b).collect();
    let d2: Vec<f64> = f.pixels().iter().zip(i.pixels()).map(|(a, b)| a - b).collect();
    corr_oracle(&d1, i.pixels()) + corr_oracle(&d2, v.pixels())
}

fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    GrayImage::new(w, h, (0..w * h).map(|_| rng.gen_range(0.0..=1.0)).collect()).expect("valid image")
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_case(name: &str, cases: usize, seed: u64, mut f: impl FnMut(&mut ChaCha8Rng) -> Result<f64, String>) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        match f(&mut rng) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return outcome(format!("{name} oracle"), ORACLE_TOLERANCE, Err(e)),
        }
    }
    outcome(format!("{name} oracle"), ORACLE_TOLERANCE, Ok(worst))
}

/// Each kernel and metric against its naive loop on `cases` random
/// inputs of at most 16x16.
pub fn oracle_checks(cases: usize) -> Vec<CheckOutcome> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    vec![
        oracle_case("conv2d", cases, 21, |r| {
            let (c, o, k) = (r.gen_range(1..=3), r.gen_range(1..=3), [1, 3, 5][r.gen_range(0..3)]);
            let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=k / 2));
            // output size must be exact
            let fit = |n: usize| n - (n + 2 * pad - k) % stride;
            let (h, w) = (fit(r.gen_range(k..=16)), fit(r.gen_range(k..=16)));
            let x = random(&[c, h, w], r, -1.0, 1.0);
            let kern = random(&[o, c, k, k], r, -1.0, 1.0);
            let got = ops::conv2d(&x, &kern, stride, pad).map_err(|e| err(&e))?;
            let (shape, want) = conv_oracle(&x, &kern, stride, pad);
            if got.shape() != shape.as_slice() {
                return Err(format!("shape {:?}, expected {shape:?}", got.shape()));
            }
            Ok(max_diff(got.data(), &want))
        }),
        oracle_case("matmul", cases, 22, |r| {
            let (n, k, m) = (r.gen_range(1..=16), r.gen_range(1..=16), r.gen_range(1..=16));
            let a = random(&[n, k], r, -1.0, 1.0);
            let b = random(&[k, m], r, -1.0, 1.0);
            let got = ops::matmul(&a, &b).map_err(|e| err(&e))?;
            let mut want = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    for p in 0..k {
                        want[i * m + j] += a.data()[i * k + p] * b.data()[p * m + j];
                    }
                }
            }
            Ok(max_diff(got.data(), &want))
        }),
        oracle_case("ssim", cases, 23, |r| {
            let (w, h) = (r.gen_range(11..=16), r.gen_range(11..=16));
            let a = random_image(w, h, r);
            let b = if r.gen_bool(0.2) { a.clone() } else { random_image(w, h, r) };
            let got = ssim(&a, &b, &SsimParams::default()).map_err(|e| err(&e))?;
            Ok((got - ssim_oracle(&a, &b)).abs())
        }),
        oracle_case("mutual information", cases, 24, |r| {
            let (w, h) = (r.gen_range(1..=16), r.gen_range(1..=16));
            let bins = [2, 8, 16, 256][r.gen_range(0..4)];
            let a = random_image(w, h, r);
            let b = random_image(w, h, r);
            let got = mutual_information(&a, &b, bins).map_err(|e| err(&e))?;
            Ok((got - mi_oracle(&a, &b, bins).max(0.0)).abs())
        }),
        oracle_case("scd", cases, 25, |r| {
            let (w, h) = (r.gen_range(2..=16), r.gen_range(2..=16));
            let (f, v, i) = (random_image(w, h, r), random_image(w, h, r), random_image(w, h, r));
            let got = scd(&f, &v, &i).map_err(|e| err(&e))?;
            Ok((got - scd_oracle(&f, &v, &i)).abs())
        }),
        oracle_case("entropy", cases, 26, |r| {
            let (w, h) = (r.gen_range(1..=16), r.gen_range(1..=16));
            let bins = [2, 16, 256][r.gen_range(0..3)];
            let img = random_image(w, h, r);
            Ok((entropy_with_bins(&img, bins) - entropy_oracle(&img, bins)).abs())
        }),
    ]
}

/// Full softmax attention over `n` tokens of width `c`, with residual.
fn full_attention(tokens: &[Vec<f64>], w: &[Tensor], heads: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (n, c) = (tokens.len(), tokens[0].len());
    let dh = c / heads;
    let proj = |m: &Tensor| -> Vec<Vec<f64>> {
        tokens
            .iter()
            .map(|x| (0..c).map(|j| (0..c).map(|i| x[i] * m.data()[i * c + j]).sum()).collect())
            .collect()
    };
    let (q, k, v) = (proj(&w[0]), proj(&w[1]), proj(&w[2]));
    let mut mixed = vec![vec![0.0; c]; n];
    let mut maps = Vec::new();
    for hd in 0..heads {
        let mut map = vec![vec![0.0; n]; n];
        for a in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|b| (0..dh).map(|d| q[a][hd * dh + d] * k[b][hd * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            for b in 0..n {
                map[a][b] = (logits[b] - top).exp() / z;
                for d in 0..dh {
                    mixed[a][hd * dh + d] += map[a][b] * v[b][hd * dh + d];
                }
            }
        }
        maps.push(map);
    }
    let out = (0..n)
        .map(|t| {
            (0..c)
                .map(|j| tokens[t][j] + (0..c).map(|i| mixed[t][i] * w[3].data()[i * c + j]).sum::<f64>())
                .collect()
        })
        .collect();
    (out, maps)
}

fn attention_case(axis: Axis, n: usize, seed: u64) -> Result<(f64, f64), String> {
    let (c, heads) = (4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = match axis {
        Axis::Width => [c, 1, n],
        Axis::Height => [c, n, 1],
    };
    let x = random(&shape, &mut rng, -1.0, 1.0);
    let w: Vec<Tensor> = (0..4).map(|_| random(&[c, c], &mut rng, -1.0, 1.0)).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv: Vec<Var> = w.iter().map(|t| tape.constant(t.clone())).collect();
    let a = axial_attention(&mut tape, xv, axis, [wv[0], wv[1], wv[2], wv[3]], heads).map_err(|e| e.to_string())?;
    // tokens are the n positions; the spatial layout is contiguous either way
    let tokens: Vec<Vec<f64>> = (0..n).map(|t| (0..c).map(|ch| x.data()[ch * n + t]).collect()).collect();
    let (want, maps) = full_attention(&tokens, &w, heads);
    let got = tape.value(a.output);
    let mut worst = 0.0f64;
    for (t, row) in want.iter().enumerate() {
        for (ch, v) in row.iter().enumerate() {
            worst = worst.max((got.data()[ch * n + t] - v).abs());
        }
    }
    let weights = tape.value(a.weights);
    let mut row_err = 0.0f64;
    for (hd, map) in maps.iter().enumerate() {
        for (i, row) in map.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                worst = worst.max((weights.data()[(hd * n + i) * n + j] - v).abs());
            }
        }
    }
    for row in weights.data().chunks(n) {
        row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((worst, row_err))
}

/// Axial attention on single rows and columns against full attention.
pub fn attention_checks() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut rows = 0.0f64;
    for (axis, label, seed) in [(Axis::Width, "1xN", 31), (Axis::Height, "Nx1", 32)] {
        let mut worst = Ok(0.0f64);
        for n in [1, 2, 5, 9, 16] {
            match attention_case(axis, n, seed + n as u64) {
                Ok((e, r)) => {
                    worst = worst.map(|w| w.max(e));
                    rows = rows.max(r);
                }
                Err(e) => worst = Err(e),
            }
        }
        out.push(outcome(format!("axial attention {label} oracle"), ORACLE_TOLERANCE, worst));
    }
    out.push(outcome("attention rows sum to one", ROW_SUM_TOLERANCE, Ok(rows)));
    out
}
