use super::kernels::{col2im, gemm, gemm_nt, gemm_tn, im2col, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Probability floor used by the KL and boosted cross-entropy losses.
pub const PROB_FLOOR: f64 = 1e-12;

pub const BN_EPS: f64 = 1e-5;

const ROW_SUM_TOL: f64 = 1e-6;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
pub enum BnForward<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one train-mode batch norm evaluation.
/// `var` is the biased (population) variance used for normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    AddRowBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Reshape(Var),
    GlobalAvgPool(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlRows {
        p: Var,
        q: Var,
    },
    BoostedCe {
        probs: Var,
        labels: Vec<usize>,
        runner_up: Vec<usize>,
    },
    CwMargin {
        logits: Var,
        labels: Vec<usize>,
        runner_up: Vec<usize>,
        active: Vec<bool>,
    },
    GatherColumns {
        table: Var,
        columns: Vec<usize>,
    },
    Pick {
        x: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Copies `t` into the graph. The leaf is differentiable iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last backward pass with respect to `v`, if any
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::shape(
                op,
                format!("expected a matrix, got shape {s:?}"),
            )),
        }
    }

    fn check_labels(labels: &[usize], rows: usize, k: usize) -> Result<()> {
        if labels.len() != rows {
            return Err(Error::shape(
                "labels",
                format!("{} labels for a batch of {rows}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Index {
                what: "class labels",
                index: bad,
                bound: k,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.rank2("matmul", a)?;
        let (n2, k) = self.rank2("matmul", b)?;
        if n != n2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}, {n}] x [{n2}, {k}]: inner dimensions differ"),
            ));
        }
        let mut out = vec![0.0; m * k];
        gemm(m, n, k, self.value(a), self.value(b), &mut out);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, k], out, Op::MatMul(a, b), tracked))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let tracked = self.tracked(x);
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::Affine { x, scale },
            tracked,
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|&v| factor * v).collect();
        let tracked = self.tracked(x);
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::Affine { x, scale: factor },
            tracked,
        )
    }

    /// Adds a length-N bias to every row of an M×N matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.rank2("add_row_bias", x)?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for rows of width {n}", self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::AddRowBias(x, bias),
            tracked,
        ))
    }

    /// 2-D cross-correlation (no kernel flip) with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [batch, cin, h, w] = *self.shape(input) else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be B×C×H×W, got {:?}", self.shape(input)),
            ));
        };
        let [cout, wcin, kh, kw] = *self.shape(weight) else {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight must be Cout×Cin×kh×kw, got {:?}",
                    self.shape(weight)
                ),
            ));
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kh}×{kw} larger than padded input {}×{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {cout} output channels", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeometry {
            channels: cin,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let rows = geom.rows();
        let positions = geom.positions();
        let mut cols = vec![0.0; batch * rows * positions];
        let mut out = vec![0.0; batch * cout * positions];
        {
            let x = self.value(input);
            let wv = self.value(weight);
            let bv = bias.map(|b| self.value(b));
            let image_len = cin * h * w;
            for b in 0..batch {
                let col_b = &mut cols[b * rows * positions..(b + 1) * rows * positions];
                im2col(&geom, &x[b * image_len..(b + 1) * image_len], col_b);
                let out_b = &mut out[b * cout * positions..(b + 1) * cout * positions];
                if let Some(bias) = bv {
                    for (o, chunk) in out_b.chunks_mut(positions).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bias[o]);
                    }
                }
                gemm(cout, rows, positions, wv, col_b, out_b);
            }
        }
        let tracked =
            self.tracked(input) || self.tracked(weight) || bias.is_some_and(|b| self.tracked(b));
        let shape = vec![batch, cout, geom.out_h, geom.out_w];
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            tracked,
        ))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), tracked)
    }

    /// Batch normalization over (B, H, W) per channel.
    ///
    /// Returns the batch statistics in train mode; the caller decides
    /// whether to fold them into running statistics.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnForward<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [batch, c, h, w] = *self.shape(x) else {
            return Err(Error::shape(
                "batch_norm2d",
                format!("input must be B×C×H×W, got {:?}", self.shape(x)),
            ));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm2d",
                format!(
                    "affine parameters {:?}/{:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let plane = h * w;
        let count = batch * plane;
        let xv = self.value(x);
        let (mean, var, train) = match mode {
            BnForward::Train => {
                if batch < 2 {
                    return Err(Error::DegenerateBatch(batch));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..batch {
                        let base = (b * c + ch) * plane;
                        s += xv[base..base + plane].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut s2 = 0.0;
                    for b in 0..batch {
                        let base = (b * c + ch) * plane;
                        s2 += xv[base..base + plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = s2 / count as f64;
                }
                (mean, var, true)
            }
            BnForward::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm2d",
                        format!(
                            "running statistics of length {}/{} for {c} channels",
                            mean.len(),
                            var.len()
                        ),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let n = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = n;
                    out[i] = g[ch] * n + bt[ch];
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let stats = train.then_some(BatchStats { mean, var, count });
        let v = self.push(
            self.shape(x).to_vec(),
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            tracked,
        );
        Ok((v, stats))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), tracked))
    }

    /// B×C×H×W → B×C by averaging each plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [batch, c, h, w] = *self.shape(x) else {
            return Err(Error::shape(
                "global_avg_pool",
                format!("input must be B×C×H×W, got {:?}", self.shape(x)),
            ));
        };
        let plane = h * w;
        let out = self
            .value(x)
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let tracked = self.tracked(x);
        Ok(self.push(vec![batch, c], out, Op::GlobalAvgPool(x), tracked))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = self.rank2("softmax", x)?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(k) {
            out.extend(softmax_row(row));
        }
        let tracked = self.tracked(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let tracked = self.tracked(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let tracked = self.tracked(x);
        self.push(Vec::new(), vec![m], Op::Mean(x), tracked)
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, k) = self.rank2("softmax_cross_entropy", logits)?;
        Self::check_labels(labels, rows, k)?;
        let mut probs = Vec::with_capacity(rows * k);
        let mut total = 0.0;
        for (row, &y) in self.value(logits).chunks(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            probs.extend(softmax_row(row));
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Vec::new(),
            vec![total / rows as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    fn check_distribution(&self, what: &'static str, v: Var) -> Result<(usize, usize)> {
        let (rows, k) = self.rank2(what, v)?;
        for (r, row) in self.value(v).chunks(k).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Normalization { what, row: r, sum });
            }
        }
        Ok((rows, k))
    }

    /// Per-row `Σ p·log(p/q)` with `0·log 0 = 0` and `q` floored at
    /// [`PROB_FLOOR`]. Gradient flows into both arguments.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_divergence", p, q)?;
        let (rows, k) = self.check_distribution("kl_divergence reference", p)?;
        self.check_distribution("kl_divergence target", q)?;
        let out = self
            .value(p)
            .chunks(k)
            .zip(self.value(q).chunks(k))
            .map(|(pr, qr)| {
                pr.iter()
                    .zip(qr)
                    .map(|(&pi, &qi)| {
                        if pi > 0.0 {
                            pi * (pi / qi.max(PROB_FLOOR)).ln()
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect();
        let tracked = self.tracked(p) || self.tracked(q);
        Ok(self.push(vec![rows], out, Op::KlRows { p, q }, tracked))
    }

    /// Batch mean of [`Graph::kl_rows`].
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let rows = self.kl_rows(p, q)?;
        Ok(self.mean(rows))
    }

    /// Batch mean of `-log p_y - log(1 - max_{k≠y} p_k)` with both
    /// arguments clamped to `[1e-12, 1-1e-12]`.
    pub fn boosted_cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (rows, k) = self.check_distribution("boosted_cross_entropy", probs)?;
        Self::check_labels(labels, rows, k)?;
        if k < 2 {
            return Err(Error::Config(
                "boosted cross-entropy needs at least 2 classes".into(),
            ));
        }
        let mut total = 0.0;
        let mut runner_up = Vec::with_capacity(rows);
        for (row, &y) in self.value(probs).chunks(k).zip(labels) {
            let j = runner_up_index(row, y);
            total += -clamp_prob(row[y]).ln() - clamp_prob(1.0 - row[j]).ln();
            runner_up.push(j);
        }
        let tracked = self.tracked(probs);
        Ok(self.push(
            Vec::new(),
            vec![total / rows as f64],
            Op::BoostedCe {
                probs,
                labels: labels.to_vec(),
                runner_up,
            },
            tracked,
        ))
    }

    /// Batch mean of `max(Z_y - max_{k≠y} Z_k, -kappa)`.
    pub fn cw_margin(&mut self, logits: Var, labels: &[usize], kappa: f64) -> Result<Var> {
        let (rows, k) = self.rank2("cw_margin", logits)?;
        if k < 2 {
            return Err(Error::Config("C&W margin needs at least 2 classes".into()));
        }
        Self::check_labels(labels, rows, k)?;
        let mut total = 0.0;
        let mut runner_up = Vec::with_capacity(rows);
        let mut active = Vec::with_capacity(rows);
        for (row, &y) in self.value(logits).chunks(k).zip(labels) {
            let j = runner_up_index(row, y);
            let margin = row[y] - row[j];
            if margin > -kappa {
                total += margin;
                active.push(true);
            } else {
                total += -kappa;
                active.push(false);
            }
            runner_up.push(j);
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Vec::new(),
            vec![total / rows as f64],
            Op::CwMargin {
                logits,
                labels: labels.to_vec(),
                runner_up,
                active,
            },
            tracked,
        ))
    }

    /// For an R×K `table`, returns the B×R matrix whose row `b` is column
    /// `columns[b]` of the table. The indices are constants.
    pub fn gather_columns(&mut self, table: Var, columns: &[usize]) -> Result<Var> {
        let (r, k) = self.rank2("gather_columns", table)?;
        if let Some(&bad) = columns.iter().find(|&&c| c >= k) {
            return Err(Error::Index {
                what: "table columns",
                index: bad,
                bound: k,
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(columns.len() * r);
        for &c in columns {
            out.extend((0..r).map(|i| t[i * k + c]));
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            vec![columns.len(), r],
            out,
            Op::GatherColumns {
                table,
                columns: columns.to_vec(),
            },
            tracked,
        ))
    }

    /// Picks `x[b, labels[b]]` from a B×K matrix into a length-B vector.
    pub fn pick(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let (rows, k) = self.rank2("pick", x)?;
        Self::check_labels(labels, rows, k)?;
        let out = self
            .value(x)
            .chunks(k)
            .zip(labels)
            .map(|(row, &y)| row[y])
            .collect();
        let tracked = self.tracked(x);
        Ok(self.push(
            vec![rows],
            out,
            Op::Pick {
                x,
                labels: labels.to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse pass from a scalar `loss`. Each graph supports one backward.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Lifecycle);
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Rank(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, n] = self.nodes[a.0].shape[..] else {
                    unreachable!()
                };
                let k = self.nodes[b.0].shape[1];
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                send(*a, &|da| gemm_nt(m, n, k, g, bv, da));
                send(*b, &|db| gemm_tn(m, n, k, av, g, db));
            }
            Op::Add(a, b) => {
                send(*a, &|d| add_into(d, g));
                send(*b, &|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                send(*a, &|d| add_into(d, g));
                send(*b, &|d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                send(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                send(*b, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Affine { x, scale } => {
                send(*x, &|d| {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b)
                });
            }
            Op::AddRowBias(x, bias) => {
                let n = self.nodes[bias.0].value.len();
                send(*x, &|d| add_into(d, g));
                send(*bias, &|d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let batch = self.nodes[input.0].shape[0];
                let cout = self.nodes[weight.0].shape[0];
                let rows = geom.rows();
                let positions = geom.positions();
                let image_len = geom.channels * geom.height * geom.width;
                let wv = &self.nodes[weight.0].value;
                if let Some(b) = bias {
                    send(*b, &|d| {
                        for (i, chunk) in g.chunks(positions).enumerate() {
                            d[i % cout] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                send(*weight, &|d| {
                    for b in 0..batch {
                        let g_b = &g[b * cout * positions..(b + 1) * cout * positions];
                        let col_b = &cols[b * rows * positions..(b + 1) * rows * positions];
                        gemm_nt(cout, rows, positions, g_b, col_b, d);
                    }
                });
                send(*input, &|d| {
                    let mut dcols = vec![0.0; rows * positions];
                    for b in 0..batch {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        let g_b = &g[b * cout * positions..(b + 1) * cout * positions];
                        gemm_tn(cout, rows, positions, wv, g_b, &mut dcols);
                        col2im(geom, &dcols, &mut d[b * image_len..(b + 1) * image_len]);
                    }
                });
            }
            Op::Relu(x) => {
                let out = &node.value;
                send(*x, &|d| {
                    for i in 0..d.len() {
                        if out[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [batch, c, h, w] = node.shape[..] else {
                    unreachable!()
                };
                let plane = h * w;
                let count = (batch * plane) as f64;
                let gv = &self.nodes[gamma.0].value;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                send(*gamma, &|d| add_into(d, &sum_gx));
                send(*beta, &|d| add_into(d, &sum_g));
                send(*x, &|d| {
                    for b in 0..batch {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let k = gv[ch] * inv_std[ch];
                            for i in base..base + plane {
                                d[i] += if *train {
                                    k * (g[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => send(*x, &|d| add_into(d, g)),
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.nodes[x.0].shape[..] else {
                    unreachable!()
                };
                let plane = h * w;
                send(*x, &|d| {
                    for (chunk, &gi) in d.chunks_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gi / plane as f64);
                    }
                });
            }
            Op::Softmax(x) => {
                let k = node.shape[1];
                let y = &node.value;
                send(*x, &|d| {
                    for ((dr, yr), gr) in d.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..k {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => send(*x, &|d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                send(*x, &|d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let [rows, k] = self.nodes[logits.0].shape[..] else {
                    unreachable!()
                };
                let scale = g[0] / rows as f64;
                send(*logits, &|d| {
                    for (b, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == y { 1.0 } else { 0.0 };
                            d[b * k + j] += scale * (probs[b * k + j] - target);
                        }
                    }
                });
            }
            Op::KlRows { p, q } => {
                let k = self.nodes[p.0].shape[1];
                let (pv, qv) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
                send(*p, &|d| {
                    for i in 0..d.len() {
                        if pv[i] > 0.0 {
                            d[i] += g[i / k] * ((pv[i] / qv[i].max(PROB_FLOOR)).ln() + 1.0);
                        }
                    }
                });
                send(*q, &|d| {
                    for i in 0..d.len() {
                        if qv[i] > PROB_FLOOR {
                            d[i] -= g[i / k] * pv[i] / qv[i];
                        }
                    }
                });
            }
            Op::BoostedCe {
                probs,
                labels,
                runner_up,
            } => {
                let [rows, k] = self.nodes[probs.0].shape[..] else {
                    unreachable!()
                };
                let pv = &self.nodes[probs.0].value;
                let scale = g[0] / rows as f64;
                send(*probs, &|d| {
                    for b in 0..rows {
                        let py = pv[b * k + labels[b]];
                        if in_prob_range(py) {
                            d[b * k + labels[b]] -= scale / py;
                        }
                        let rest = 1.0 - pv[b * k + runner_up[b]];
                        if in_prob_range(rest) {
                            d[b * k + runner_up[b]] += scale / rest;
                        }
                    }
                });
            }
            Op::CwMargin {
                logits,
                labels,
                runner_up,
                active,
            } => {
                let [rows, k] = self.nodes[logits.0].shape[..] else {
                    unreachable!()
                };
                let scale = g[0] / rows as f64;
                send(*logits, &|d| {
                    for b in 0..rows {
                        if active[b] {
                            d[b * k + labels[b]] += scale;
                            d[b * k + runner_up[b]] -= scale;
                        }
                    }
                });
            }
            Op::GatherColumns { table, columns } => {
                let k = self.nodes[table.0].shape[1];
                let r = self.nodes[table.0].shape[0];
                send(*table, &|d| {
                    for (b, &c) in columns.iter().enumerate() {
                        for i in 0..r {
                            d[i * k + c] += g[b * r + i];
                        }
                    }
                });
            }
            Op::Pick { x, labels } => {
                let k = self.nodes[x.0].shape[1];
                send(*x, &|d| {
                    for (b, &y) in labels.iter().enumerate() {
                        d[b * k + y] += g[b];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row.iter().map(move |v| (v - max).exp() / denom)
}

/// Largest entry excluding `exclude`, lowest index on ties.
pub(crate) fn runner_up_index(row: &[f64], exclude: usize) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if i == exclude {
            continue;
        }
        match best {
            Some(b) if v <= row[b] => {}
            _ => best = Some(i),
        }
    }
    best.expect("at least two classes")
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

fn in_prob_range(p: f64) -> bool {
    p > PROB_FLOOR && p < 1.0 - PROB_FLOOR
}
