//! Independent f64 reference implementations used as oracles. These share no
//! code with the library kernels: plain nested loops, no fast paths.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use ranet::builder::{NetworkGraph, StepOp};
use ranet::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha20Rng, shape: [usize; 4]) -> Tensor {
    let data = (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn conv2d_ref(
    x: &[f64],
    w: &[f64],
    xs: [usize; 4],
    ws: [usize; 4],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let [n, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for ni in 0..n {
        for oc in 0..co {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        for fh in 0..kh {
                            for fw in 0..kw {
                                let ih = (r * stride + fh) as isize - padding as isize;
                                let iw = (c * stride + fw) as isize - padding as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * ci + ic) * h + ih as usize) * wd + iw as usize;
                                let wi = ((oc * ci + ic) * kh + fh) * kw + fw;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((ni * co + oc) * oh + r) * ow + c] = acc;
                }
            }
        }
    }
    out
}

/// Train-mode batch norm: per-channel batch statistics, biased variance.
pub fn bn_train_ref(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    shape: [usize; 4],
    eps: f64,
) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let mut sum = 0.0;
        for ni in 0..n {
            for i in 0..hw {
                sum += x[(ni * c + ch) * hw + i];
            }
        }
        let mean = sum / m;
        let mut sq = 0.0;
        for ni in 0..n {
            for i in 0..hw {
                let d = x[(ni * c + ch) * hw + i] - mean;
                sq += d * d;
            }
        }
        let var = sq / m;
        let istd = 1.0 / (var + eps).sqrt();
        for ni in 0..n {
            for i in 0..hw {
                let idx = (ni * c + ch) * hw + i;
                out[idx] = gamma[ch] * (x[idx] - mean) * istd + beta[ch];
            }
        }
    }
    out
}

pub fn bn_eval_ref(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    shape: [usize; 4],
    eps: f64,
) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ch in 0..c {
            let istd = 1.0 / (var[ch] + eps).sqrt();
            for i in 0..hw {
                let idx = (ni * c + ch) * hw + i;
                out[idx] = gamma[ch] * (x[idx] - mean[ch]) * istd + beta[ch];
            }
        }
    }
    out
}

pub fn relu_ref(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn avg_pool_2x2_ref(x: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        for r in 0..oh {
            for col in 0..ow {
                let mut acc = 0.0;
                for dr in 0..2 {
                    for dc in 0..2 {
                        acc += x[nc * h * w + (2 * r + dr) * w + 2 * col + dc];
                    }
                }
                out[nc * oh * ow + r * ow + col] = acc / 4.0;
            }
        }
    }
    out
}

pub fn upsample_2x_ref(x: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let (oh, ow) = (2 * h, 2 * w);
    let clamp = |v: f64, len: usize| ((v.max(0.0)) as usize).min(len - 1);
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        for r in 0..oh {
            for col in 0..ow {
                let sy = r as f64 * 0.5 - 0.25;
                let sx = col as f64 * 0.5 - 0.25;
                let (fy, fx) = (sy.floor(), sx.floor());
                let (ty, tx) = (sy - fy, sx - fx);
                let (y0, y1) = (clamp(fy, h), clamp(fy + 1.0, h));
                let (x0, x1) = (clamp(fx, w), clamp(fx + 1.0, w));
                let at = |yy: usize, xx: usize| x[nc * h * w + yy * w + xx];
                out[nc * oh * ow + r * ow + col] = at(y0, x0) * (1.0 - ty) * (1.0 - tx)
                    + at(y0, x1) * (1.0 - ty) * tx
                    + at(y1, x0) * ty * (1.0 - tx)
                    + at(y1, x1) * ty * tx;
            }
        }
    }
    out
}

pub fn global_avg_pool_ref(x: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    (0..n * c).map(|nc| x[nc * hw..(nc + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

pub fn linear_ref(x: &[f64], w: &[f64], b: &[f64], n: usize, d: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            let mut acc = b[j];
            for k in 0..d {
                acc += x[i * d + k] * w[j * d + k];
            }
            out[i * c + j] = acc;
        }
    }
    out
}

/// Mean cross-entropy of softmaxed logits rows against integer labels.
pub fn softmax_ce_ref(logits: &[f64], labels: &[usize], n: usize, c: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        total += -(row[labels[i]] - max - denom.ln());
    }
    total / n as f64
}

/// Execute a graph's step program naively in f64 on a single sample while
/// counting every multiply-accumulate with a loop counter. Batch norm runs in
/// eval mode off the store's running statistics. Returns per-classifier MAC
/// totals, measured independently of the library's cost annotations.
pub fn naive_mac_count(graph: &NetworkGraph, input: &Tensor) -> Vec<u64> {
    let mut values: Vec<Option<(Vec<f64>, [usize; 4])>> = vec![None; graph.num_values];
    let x: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    values[graph.input_value] = Some((x, input.shape()));
    let mut macs: u64 = 0;
    let mut out = Vec::new();
    let store = &graph.params;
    let mut next_classifier = 0;
    for (si, step) in graph.steps.iter().enumerate() {
        let result: (Vec<f64>, [usize; 4]) = match &step.op {
            StepOp::Conv { kernel, stride, padding } => {
                let (x, xs) = values[step.inputs[0]].clone().unwrap();
                let w = store.get(*kernel);
                let ws = w.value.shape();
                let wd: Vec<f64> = w.value.data().iter().map(|&v| v as f64).collect();
                let [n, ci, h, wid] = xs;
                let [co, _, kh, kw] = ws;
                let oh = (h + 2 * padding - kh) / stride + 1;
                let ow = (wid + 2 * padding - kw) / stride + 1;
                let mut y = vec![0.0; n * co * oh * ow];
                for ni in 0..n {
                    for oc in 0..co {
                        for r in 0..oh {
                            for c in 0..ow {
                                let mut acc = 0.0;
                                for ic in 0..ci {
                                    for fh in 0..kh {
                                        for fw in 0..kw {
                                            // each kernel tap is one MAC,
                                            // padded positions included
                                            macs += 1;
                                            let ih = (r * stride + fh) as isize
                                                - *padding as isize;
                                            let iw = (c * stride + fw) as isize
                                                - *padding as isize;
                                            if ih < 0
                                                || iw < 0
                                                || ih >= h as isize
                                                || iw >= wid as isize
                                            {
                                                continue;
                                            }
                                            acc += x[((ni * ci + ic) * h + ih as usize) * wid
                                                + iw as usize]
                                                * wd[((oc * ci + ic) * kh + fh) * kw + fw];
                                        }
                                    }
                                }
                                y[((ni * co + oc) * oh + r) * ow + c] = acc;
                            }
                        }
                    }
                }
                (y, [n, co, oh, ow])
            }
            StepOp::BatchNorm { gamma, beta, stats } => {
                let (x, xs) = values[step.inputs[0]].clone().unwrap();
                let g: Vec<f64> =
                    store.get(*gamma).value.data().iter().map(|&v| v as f64).collect();
                let b: Vec<f64> =
                    store.get(*beta).value.data().iter().map(|&v| v as f64).collect();
                let s = store.stats(*stats);
                let mean: Vec<f64> = s.mean.iter().map(|&v| v as f64).collect();
                let var: Vec<f64> = s.var.iter().map(|&v| v as f64).collect();
                (bn_eval_ref(&x, &g, &b, &mean, &var, xs, 1e-5), xs)
            }
            StepOp::Relu => {
                let (x, xs) = values[step.inputs[0]].clone().unwrap();
                (relu_ref(&x), xs)
            }
            StepOp::AvgPool2x2 => {
                let (x, xs) = values[step.inputs[0]].clone().unwrap();
                let [n, c, h, w] = xs;
                (avg_pool_2x2_ref(&x, xs), [n, c, h / 2, w / 2])
            }
            StepOp::UpsampleBilinear2x => {
                let (x, xs) = values[step.inputs[0]].clone().unwrap();
                let [n, c, h, w] = xs;
                (upsample_2x_ref(&x, xs), [n, c, 2 * h, 2 * w])
            }
            StepOp::Concat => {
                let parts: Vec<(Vec<f64>, [usize; 4])> =
                    step.inputs.iter().map(|&i| values[i].clone().unwrap()).collect();
                let [n, _, h, w] = parts[0].1;
                let c: usize = parts.iter().map(|p| p.1[1]).sum();
                let mut y = Vec::with_capacity(n * c * h * w);
                for ni in 0..n {
                    for p in &parts {
                        let pc = p.1[1];
                        let hw = h * w;
                        y.extend_from_slice(&p.0[ni * pc * hw..(ni + 1) * pc * hw]);
                    }
                }
                (y, [n, c, h, w])
            }
            StepOp::GlobalAvgPool => {
                let (x, xs) = values[step.inputs[0]].clone().unwrap();
                let [n, c, _, _] = xs;
                (global_avg_pool_ref(&x, xs), [n, c, 1, 1])
            }
            StepOp::Linear { weight, bias } => {
                let (x, xs) = values[step.inputs[0]].clone().unwrap();
                let n = xs[0];
                let d = xs[1] * xs[2] * xs[3];
                let w = store.get(*weight);
                let c = w.value.shape()[0];
                let wd: Vec<f64> = w.value.data().iter().map(|&v| v as f64).collect();
                let bd: Vec<f64> =
                    store.get(*bias).value.data().iter().map(|&v| v as f64).collect();
                let mut y = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        let mut acc = bd[j];
                        for k in 0..d {
                            macs += 1;
                            acc += x[i * d + k] * wd[j * d + k];
                        }
                        y[i * c + j] = acc;
                    }
                }
                (y, [n, c, 1, 1])
            }
        };
        values[step.output] = Some(result);
        if next_classifier < graph.classifier_steps.len()
            && graph.classifier_steps[next_classifier] == si
        {
            out.push(macs);
            next_classifier += 1;
        }
    }
    out
}
