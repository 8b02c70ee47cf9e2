use rand::Rng;

use crate::autograd::tape::{Node, Tape, Var};
use crate::kernels::{self, ConvGeom};
use crate::tensor::split_axis;
use crate::{Error, Result, Tensor};

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
        batch: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

/// Whether normalization uses batch statistics or the running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Inference,
}

/// Per-channel running mean/variance for batch normalization.
///
/// Updated as `running = (1 - momentum)·running + momentum·batch`, starting
/// from mean 0 and variance 1. Variances are population (biased) variances.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Exact Gaussian-error linear unit, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Views a rank-3 `C×H×W` or rank-4 `N×C×H×W` shape as `(N, C, H, W)`.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Rank {
            op,
            expected: 4,
            got: shape.to_vec(),
        }),
    }
}

fn map_unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

impl Tape {
    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = map_unary(&self.value(x), f);
        self.push(out, &[x], op)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            match (av.shape(), bv.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => {
                    Tensor::new(&[m, n], kernels::matmul(av.data(), bv.data(), m, k, n))?
                }
                (l, r) => {
                    return Err(Error::Shape {
                        op: "matmul",
                        lhs: l.to_vec(),
                        rhs: r.to_vec(),
                    })
                }
            }
        };
        Ok(self.push(out, &[a, b], Op::MatMul(a, b)))
    }

    /// Elementwise sum. `rhs` may also match a trailing suffix of `lhs`'s
    /// shape, in which case it is broadcast over the leading dimensions.
    pub fn add(&self, lhs: Var, rhs: Var) -> Result<Var> {
        let out = {
            let (l, r) = (self.value(lhs), self.value(rhs));
            let (ls, rs) = (l.shape(), r.shape());
            if rs.len() > ls.len() || ls[ls.len() - rs.len()..] != *rs {
                return Err(Error::Shape {
                    op: "add",
                    lhs: ls.to_vec(),
                    rhs: rs.to_vec(),
                });
            }
            let rd = r.data();
            let data = if rd.is_empty() {
                l.data().to_vec()
            } else {
                l.data()
                    .chunks(rd.len())
                    .flat_map(|c| c.iter().zip(rd).map(|(a, b)| a + b))
                    .collect()
            };
            Tensor::new(ls, data)?
        };
        Ok(self.push(out, &[lhs, rhs], Op::Add(lhs, rhs)))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.shape() != bv.shape() {
                return Err(Error::Shape {
                    op: "mul",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
            Tensor::new(av.shape(), data)?
        };
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu_scalar, Op::Gelu(x))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if axis >= xv.rank() {
                return Err(Error::InvalidArgument(format!(
                    "softmax axis {axis} out of range for shape {:?}",
                    xv.shape()
                )));
            }
            let (outer, len, inner) = split_axis(xv.shape(), axis);
            let src = xv.data();
            let mut data = vec![0.0; src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let max = (0..len).map(|a| src[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for a in 0..len {
                        let e = (src[idx(a)] - max).exp();
                        data[idx(a)] = e;
                        sum += e;
                    }
                    for a in 0..len {
                        data[idx(a)] /= sum;
                    }
                }
            }
            Tensor::new(xv.shape(), data)?
        };
        Ok(self.push(out, &[x], Op::Softmax { x, axis }))
    }

    /// Normalizes each row over the last dimension with population variance,
    /// then applies `gamma` and `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let (out, xhat, inv_std) = {
            let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
            let d = *xv.shape().last().unwrap_or(&0);
            if gv.shape() != [d] || bv.shape() != [d] || d == 0 {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: gv.shape().to_vec(),
                });
            }
            let rows = xv.len() / d;
            let mut xhat = vec![0.0; xv.len()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; xv.len()];
            for r in 0..rows {
                let row = &xv.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(xv.shape(), out)?, xhat, inv_std)
        };
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Cross-correlation of `C_in×H×W` (or `N×C_in×H×W`) input with
    /// `C_out×C_in×k×k` kernels. No bias.
    pub fn conv2d(&self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (out, geom, batch) = {
            let (xv, kv) = (self.value(x), self.value(kernel));
            let (n, c, h, w) = image_dims("conv2d", xv.shape())?;
            let shape_err = || Error::Shape {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            };
            let &[o, kc, kh, kw] = kv.shape() else {
                return Err(shape_err());
            };
            if kc != c || kh != kw || kh == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
                return Err(shape_err());
            }
            let geom = ConvGeom {
                channels: c,
                height: h,
                width: w,
                kernel: kh,
                stride,
                padding,
            };
            let (oh, ow) = (geom.out_height(), geom.out_width());
            let in_len = c * h * w;
            let out_len = o * oh * ow;
            let ckk = c * kh * kw;
            let (xd, kd) = (xv.data(), kv.data());
            let per_image = crate::parallel::map_range(n, |b| {
                let cols = kernels::im2col(&xd[b * in_len..(b + 1) * in_len], &geom);
                kernels::matmul(kd, &cols, o, ckk, oh * ow)
            });
            let mut data = Vec::with_capacity(n * out_len);
            per_image.into_iter().for_each(|v| data.extend(v));
            let shape: Vec<usize> = if xv.rank() == 3 {
                vec![o, oh, ow]
            } else {
                vec![n, o, oh, ow]
            };
            (Tensor::new(&shape, data)?, geom, n)
        };
        Ok(self.push(
            out,
            &[x, kernel],
            Op::Conv2d {
                x,
                kernel,
                geom,
                batch,
            },
        ))
    }

    /// Per-channel batch normalization over `N×C×H×W` (or `C×H×W`).
    ///
    /// Training mode normalizes with the batch's population statistics and
    /// folds them into `stats`; inference mode uses `stats` and fails if
    /// they were never updated.
    pub fn batch_norm2d(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: NormMode,
        eps: f64,
    ) -> Result<Var> {
        let (out, xhat, inv_std) = {
            let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
            let (n, c, h, w) = image_dims("batch_norm2d", xv.shape())?;
            if gv.shape() != [c] || bv.shape() != [c] || stats.channels() != c {
                return Err(Error::Shape {
                    op: "batch_norm2d",
                    lhs: xv.shape().to_vec(),
                    rhs: gv.shape().to_vec(),
                });
            }
            let hw = h * w;
            let count = (n * hw) as f64;
            let src = xv.data();
            let channel = |ch: usize| {
                (0..n).flat_map(move |b| {
                    let base = (b * c + ch) * hw;
                    base..base + hw
                })
            };
            let (mean, var) = match mode {
                NormMode::Train => {
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for ch in 0..c {
                        let m = channel(ch).map(|i| src[i]).sum::<f64>() / count;
                        mean[ch] = m;
                        var[ch] = channel(ch).map(|i| (src[i] - m).powi(2)).sum::<f64>() / count;
                    }
                    let mom = stats.momentum;
                    for ch in 0..c {
                        stats.mean[ch] = (1.0 - mom) * stats.mean[ch] + mom * mean[ch];
                        stats.var[ch] = (1.0 - mom) * stats.var[ch] + mom * var[ch];
                    }
                    stats.updates += 1;
                    (mean, var)
                }
                NormMode::Inference => {
                    if stats.updates == 0 {
                        return Err(Error::UninitializedStats);
                    }
                    (stats.mean.clone(), stats.var.clone())
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; src.len()];
            let mut out = vec![0.0; src.len()];
            for ch in 0..c {
                for i in channel(ch) {
                    let hval = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = hval;
                    out[i] = hval * gv.data()[ch] + bv.data()[ch];
                }
            }
            (Tensor::new(xv.shape(), out)?, xhat, inv_std)
        };
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == NormMode::Train,
            },
        ))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = image_dims("avg_pool2", xv.shape())?;
            let (oh, ow) = (h / 2, w / 2);
            let src = xv.data();
            let mut data = vec![0.0; n * c * oh * ow];
            for plane in 0..n * c {
                let s = &src[plane * h * w..];
                let d = &mut data[plane * oh * ow..];
                for i in 0..oh {
                    for j in 0..ow {
                        let (r, q) = (2 * i, 2 * j);
                        d[i * ow + j] =
                            0.25 * (s[r * w + q] + s[r * w + q + 1] + s[(r + 1) * w + q] + s[(r + 1) * w + q + 1]);
                    }
                }
            }
            let shape: Vec<usize> = if xv.rank() == 3 {
                vec![c, oh, ow]
            } else {
                vec![n, c, oh, ow]
            };
            Tensor::new(&shape, data)?
        };
        Ok(self.push(out, &[x], Op::AvgPool2(x)))
    }

    /// Spatial mean: `N×C×H×W → N×C` (or `C×H×W → C`).
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = image_dims("global_avg_pool", xv.shape())?;
            let hw = (h * w) as f64;
            let data = xv
                .data()
                .chunks(h * w)
                .map(|p| p.iter().sum::<f64>() / hw)
                .collect();
            let shape: Vec<usize> = if xv.rank() == 3 { vec![c] } else { vec![n, c] };
            Tensor::new(&shape, data)?
        };
        Ok(self.push(out, &[x], Op::GlobalAvgPool(x)))
    }

    /// Inverted dropout. Identity unless `train`; the mask is drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let (out, mask) = {
            let xv = self.value(x);
            let mask: Vec<f64> = (0..xv.len())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
            (Tensor::new(xv.shape(), data)?, mask)
        };
        Ok(self.push(out, &[x], Op::Dropout { x, mask }))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, &[x], Op::Reshape(x)))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let first = vals
                .first()
                .ok_or(Error::EmptyInput("concat needs at least one tensor"))?;
            let rank = first.rank();
            if axis >= rank {
                return Err(Error::InvalidArgument(format!(
                    "concat axis {axis} out of range for rank {rank}"
                )));
            }
            for v in &vals[1..] {
                let ok = v.rank() == rank
                    && (0..rank).all(|d| d == axis || v.shape()[d] == first.shape()[d]);
                if !ok {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
            }
            let (outer, _, inner) = split_axis(first.shape(), axis);
            let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let block = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = total;
            Tensor::new(&shape, data)?
        };
        Ok(self.push(
            out,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if axis >= xv.rank() || start + len > xv.shape()[axis] {
                return Err(Error::InvalidArgument(format!(
                    "narrow({axis}, {start}, {len}) out of range for shape {:?}",
                    xv.shape()
                )));
            }
            let (outer, full, inner) = split_axis(xv.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                data.extend_from_slice(&xv.data()[base..base + len * inner]);
            }
            let mut shape = xv.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, data)?
        };
        Ok(self.push(out, &[x], Op::Narrow { x, axis, start }))
    }

    /// Rank-2 transpose.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let &[r, c] = xv.shape() else {
                return Err(Error::Rank {
                    op: "transpose",
                    expected: 2,
                    got: xv.shape().to_vec(),
                });
            };
            Tensor::new(&[c, r], transpose_data(xv.data(), r, c))?
        };
        Ok(self.push(out, &[x], Op::Transpose(x)))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Mean softmax cross-entropy of `N×K` logits against class indices.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let lv = self.value(logits);
            let &[n, k] = lv.shape() else {
                return Err(Error::Rank {
                    op: "cross_entropy",
                    expected: 2,
                    got: lv.shape().to_vec(),
                });
            };
            if targets.len() != n || targets.iter().any(|&t| t >= k) || n == 0 {
                return Err(Error::InvalidArgument(format!(
                    "cross_entropy: {} targets for {n}×{k} logits",
                    targets.len()
                )));
            }
            let mut probs = vec![0.0; n * k];
            let mut loss = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = &lv.data()[r * k..(r + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for j in 0..k {
                    probs[r * k + j] = (row[j] - lse).exp();
                }
                loss += lse - row[t];
            }
            (loss / n as f64, probs)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }
}

fn transpose_data(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

/// Vector-Jacobian products of `op` given upstream gradient `g` on `out`.
pub(crate) fn vjp(nodes: &[Node], op: &Op, out: &Tensor, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            vec![
                (a.0, kernels::matmul_nt(g, bv.data(), m, n, k)),
                (b.0, kernels::matmul_tn(av.data(), g, m, k, n)),
            ]
        }
        Op::Add(l, r) => {
            let rl = val(r).len().max(1);
            let mut dr = vec![0.0; val(r).len()];
            for chunk in g.chunks(rl) {
                dr.iter_mut().zip(chunk).for_each(|(d, c)| *d += c);
            }
            vec![(l.0, g.to_vec()), (r.0, dr)]
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            vec![
                (a.0, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                (b.0, g.iter().zip(av).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::Scale(x, c) => vec![(x.0, g.iter().map(|v| v * c).collect())],
        Op::Relu(x) => vec![(
            x.0,
            g.iter()
                .zip(val(x).data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Op::Gelu(x) => vec![(
            x.0,
            g.iter().zip(val(x).data()).map(|(g, &x)| g * gelu_grad(x)).collect(),
        )],
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                    for a in 0..len {
                        dx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                    }
                }
            }
            vec![(x.0, dx)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = val(gamma).data();
            let d = gv.len();
            let mut dx = vec![0.0; g.len()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for (r, &is) in inv_std.iter().enumerate() {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for j in 0..d {
                    let dh = gr[j] * gv[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[j];
                    dgamma[j] += gr[j] * hr[j];
                    dbeta[j] += gr[j];
                }
                mean_dh /= d as f64;
                mean_dh_h /= d as f64;
                for j in 0..d {
                    dx[r * d + j] = is * (gr[j] * gv[j] - mean_dh - hr[j] * mean_dh_h);
                }
            }
            vec![(x.0, dx), (gamma.0, dgamma), (beta.0, dbeta)]
        }
        Op::Conv2d {
            x,
            kernel,
            geom,
            batch,
        } => {
            let (xv, kv) = (val(x).data(), val(kernel).data());
            let o = val(kernel).shape()[0];
            let ckk = geom.channels * geom.kernel * geom.kernel;
            let hw_out = geom.out_height() * geom.out_width();
            let in_len = geom.channels * geom.height * geom.width;
            let parts = crate::parallel::map_range(*batch, |b| {
                let gb = &g[b * o * hw_out..(b + 1) * o * hw_out];
                let cols = kernels::im2col(&xv[b * in_len..(b + 1) * in_len], geom);
                let dk = kernels::matmul_nt(gb, &cols, o, hw_out, ckk);
                let dcols = kernels::matmul_tn(kv, gb, o, ckk, hw_out);
                (kernels::col2im(&dcols, geom), dk)
            });
            let mut dx = Vec::with_capacity(batch * in_len);
            let mut dk = vec![0.0; kv.len()];
            for (dxb, dkb) in parts {
                dx.extend(dxb);
                dk.iter_mut().zip(&dkb).for_each(|(a, b)| *a += b);
            }
            vec![(x.0, dx), (kernel.0, dk)]
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let gv = val(gamma).data();
            let (n, c, h, w) = image_dims("batch_norm2d", val(x).shape()).expect("checked in forward");
            let hw = h * w;
            let count = (n * hw) as f64;
            let mut dx = vec![0.0; g.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ch in 0..c {
                let idx = (0..n).flat_map(|b| {
                    let base = (b * c + ch) * hw;
                    base..base + hw
                });
                let mut sum_g = 0.0;
                let mut sum_gh = 0.0;
                for i in idx.clone() {
                    sum_g += g[i];
                    sum_gh += g[i] * xhat[i];
                }
                dgamma[ch] = sum_gh;
                dbeta[ch] = sum_g;
                let scale = gv[ch] * inv_std[ch];
                for i in idx {
                    dx[i] = if *batch_stats {
                        scale * (g[i] - sum_g / count - xhat[i] * sum_gh / count)
                    } else {
                        scale * g[i]
                    };
                }
            }
            vec![(x.0, dx), (gamma.0, dgamma), (beta.0, dbeta)]
        }
        Op::AvgPool2(x) => {
            let (n, c, h, w) = image_dims("avg_pool2", val(x).shape()).expect("checked in forward");
            let (oh, ow) = (h / 2, w / 2);
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let gp = &g[plane * oh * ow..];
                let d = &mut dx[plane * h * w..];
                for i in 0..oh {
                    for j in 0..ow {
                        let v = 0.25 * gp[i * ow + j];
                        let (r, q) = (2 * i, 2 * j);
                        d[r * w + q] += v;
                        d[r * w + q + 1] += v;
                        d[(r + 1) * w + q] += v;
                        d[(r + 1) * w + q + 1] += v;
                    }
                }
            }
            vec![(x.0, dx)]
        }
        Op::GlobalAvgPool(x) => {
            let (_, _, h, w) = image_dims("global_avg_pool", val(x).shape()).expect("checked in forward");
            let hw = h * w;
            let dx = g
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw))
                .collect();
            vec![(x.0, dx)]
        }
        Op::Dropout { x, mask } => vec![(x.0, g.iter().zip(mask).map(|(g, m)| g * m).collect())],
        Op::Reshape(x) => vec![(x.0, g.to_vec())],
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            parts
                .iter()
                .map(|p| {
                    let len = val(p).shape()[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    (p.0, d)
                })
                .collect()
        }
        Op::Narrow { x, axis, start } => {
            let (outer, full, inner) = split_axis(val(x).shape(), *axis);
            let len = out.shape()[*axis];
            let mut dx = vec![0.0; val(x).len()];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(x.0, dx)]
        }
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            vec![(x.0, transpose_data(g, r, c))]
        }
        Op::Sum(x) => vec![(x.0, vec![g[0]; val(x).len()])],
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let n = targets.len();
            let k = probs.len() / n;
            let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / n as f64).collect();
            for (r, &t) in targets.iter().enumerate() {
                d[r * k + t] -= g[0] / n as f64;
            }
            vec![(logits.0, d)]
        }
    }
}
