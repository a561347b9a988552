//! Minimal deterministic tensor engine: an eagerly-evaluated computation
//! graph with reverse-mode gradients over exactly the operations this codec
//! needs, plus named parameter storage with Adam.

pub mod checkpoint;
pub mod kernels;
pub mod layers;
pub mod store;

use std::collections::HashMap;

use crate::entropy::math::{bits_of, gaussian_bin_prob, gaussian_bits_grad, P_MIN};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use store::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Conv { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize, transposed: bool },
    Gdn { x: NodeId, beta_raw: NodeId, gamma_raw: NodeId, inverse: bool },
    LeakyRelu { x: NodeId, slope: f64 },
    Softplus { x: NodeId },
    ChannelAffine { x: NodeId, scale: NodeId, shift: NodeId },
    RowSelect { table: NodeId, row: usize },
    ConcatC(Vec<NodeId>),
    SliceC { x: NodeId, start: usize },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    Warp { src: NodeId, flow: NodeId },
    SumAll(NodeId),
    MeanAll(NodeId),
    Round,
    RateGaussian { v: NodeId, mu: NodeId, sigma: NodeId },
    RateFactorized { v: NodeId, logits: NodeId },
}

/// Eager computation graph. Values are computed as nodes are added; the op
/// tape makes the whole computation differentiable via [`Graph::backward`].
pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Adjoints produced by a backward pass.
pub struct Gradients<T> {
    adjoints: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, n: NodeId) -> Option<&Tensor<T>> {
        self.adjoints.get(n.0).and_then(|o| o.as_ref())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { values: Vec::new(), ops: Vec::new(), param_nodes: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    pub fn value(&self, n: NodeId) -> &Tensor<T> {
        &self.values[n.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Constant input; receives no gradient of its own but participates in
    /// the tape (its adjoint is still available after backward).
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: [usize; 4]) -> NodeId {
        self.leaf(Tensor::zeros(shape))
    }

    /// Parameter node; one graph node per parameter, cached so repeated use
    /// accumulates a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, n);
        n
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what} on {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "add")?;
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "sub")?;
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "mul")?;
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let st = T::from_f64(s);
        let v = self.values[x.0].map(|a| a * st);
        self.push(v, Op::Scale(x, s))
    }

    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<NodeId> {
        let v = if transposed {
            kernels::conv2d_transposed(
                &self.values[x.0],
                &self.values[w.0],
                &self.values[b.0],
                stride,
                pad,
            )?
        } else {
            kernels::conv2d(&self.values[x.0], &self.values[w.0], &self.values[b.0], stride, pad)?
        };
        Ok(self.push(v, Op::Conv { x, w, b, stride, pad, transposed }))
    }

    /// GDN on softplus-reparameterized beta and squared gamma raw values.
    pub fn gdn(
        &mut self,
        x: NodeId,
        beta_raw: NodeId,
        gamma_raw: NodeId,
        inverse: bool,
    ) -> Result<NodeId> {
        let (beta, gamma) = self.gdn_effective(beta_raw, gamma_raw);
        let v = kernels::gdn_forward(&self.values[x.0], &beta, &gamma, inverse)?;
        Ok(self.push(v, Op::Gdn { x, beta_raw, gamma_raw, inverse }))
    }

    fn gdn_effective(&self, beta_raw: NodeId, gamma_raw: NodeId) -> (Vec<T>, Vec<T>) {
        let beta: Vec<T> = self.values[beta_raw.0]
            .data()
            .iter()
            .map(|&b| T::from_f64(softplus(b.as_f64())))
            .collect();
        let gamma: Vec<T> = self.values[gamma_raw.0].data().iter().map(|&g| g * g).collect();
        (beta, gamma)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::from_f64(slope);
        let v = self.values[x.0].map(|a| if a > T::zero() { a } else { a * s });
        self.push(v, Op::LeakyRelu { x, slope })
    }

    /// `offset + ln(1 + e^x)` elementwise.
    pub fn softplus(&mut self, x: NodeId, offset: f64) -> NodeId {
        let v = self.values[x.0].map(|a| T::from_f64(offset + softplus(a.as_f64())));
        self.push(v, Op::Softplus { x })
    }

    /// Channel-wise affine: `out[n,c,h,w] = scale[c] * x[n,c,h,w] + shift[c]`.
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let [_, c, _, _] = self.values[x.0].shape();
        for (node, what) in [(scale, "scale"), (shift, "shift")] {
            if self.values[node.0].shape() != [1, c, 1, 1] {
                return Err(Error::ShapeMismatch(format!(
                    "channel {what} shape {:?} for {c}-channel input",
                    self.values[node.0].shape()
                )));
            }
        }
        let xs = &self.values[x.0];
        let [n, _, h, w] = xs.shape();
        let hw = h * w;
        let mut out = Tensor::zeros(xs.shape());
        let sc = self.values[scale.0].data();
        let sh = self.values[shift.0].data();
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let (s, b) = (sc[cc], sh[cc]);
                for p in 0..hw {
                    out.data_mut()[base + p] = s * xs.data()[base + p] + b;
                }
            }
        }
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }))
    }

    /// Selects row `row` of a `[R, C, 1, 1]` table as a `[1, C, 1, 1]` vector.
    pub fn row_select(&mut self, table: NodeId, row: usize) -> Result<NodeId> {
        let [r, c, _, _] = self.values[table.0].shape();
        if row >= r {
            return Err(Error::Contract(format!("row {row} out of {r}")));
        }
        let data = self.values[table.0].data()[row * c..(row + 1) * c].to_vec();
        let v = Tensor::new([1, c, 1, 1], data)?;
        Ok(self.push(v, Op::RowSelect { table, row }))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| &self.values[p.0]).collect();
        let v = crate::tensor::concat_channels(&tensors)?;
        Ok(self.push(v, Op::ConcatC(parts.to_vec())))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = crate::tensor::slice_channels(&self.values[x.0], start, len)?;
        Ok(self.push(v, Op::SliceC { x, start }))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kernels::avg_pool2(&self.values[x.0])?;
        Ok(self.push(v, Op::AvgPool2(x)))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let v = kernels::upsample_bilinear2(&self.values[x.0]);
        self.push(v, Op::Upsample2(x))
    }

    pub fn warp(&mut self, src: NodeId, flow: NodeId) -> Result<NodeId> {
        let v = kernels::warp_forward(&self.values[src.0], &self.values[flow.0])?;
        Ok(self.push(v, Op::Warp { src, flow }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.values[x.0].sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.values[x.0].numel().max(1);
        let v = Tensor::scalar(self.values[x.0].sum() / T::from_f64(n as f64));
        self.push(v, Op::MeanAll(x))
    }

    /// Nearest-integer rounding; passes no gradient.
    pub fn round(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].map(|a| a.round());
        { let _ = x; self.push(v, Op::Round) }
    }

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Total bits of continuous values `v` under per-element Gaussians
    /// `N(mu, sigma)` integrated over unit bins; differentiable in all three.
    pub fn rate_gaussian(&mut self, v: NodeId, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
        self.binary_shapes(v, mu, "rate_gaussian mu")?;
        self.binary_shapes(v, sigma, "rate_gaussian sigma")?;
        let mut bits = 0.0f64;
        let vd = self.values[v.0].data();
        let md = self.values[mu.0].data();
        let sd = self.values[sigma.0].data();
        for i in 0..vd.len() {
            bits += bits_of(gaussian_bin_prob(md[i].as_f64(), sd[i].as_f64(), vd[i].as_f64()));
        }
        let out = Tensor::scalar(T::from_f64(bits));
        Ok(self.push(out, Op::RateGaussian { v, mu, sigma }))
    }

    /// Total bits of continuous values under the per-channel factorized
    /// model given by `logits` of shape [C, 2S+1, 1, 1]; the continuous
    /// density is piecewise-constant over unit bins.
    pub fn rate_factorized(&mut self, v: NodeId, logits: NodeId) -> Result<NodeId> {
        let [_, c, _, _] = self.values[v.0].shape();
        let [lc, bins, _, _] = self.values[logits.0].shape();
        if lc != c || bins % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "factorized logits {:?} for {c}-channel values",
                self.values[logits.0].shape()
            )));
        }
        let probs = self.factorized_probs(logits);
        let support = (bins as i32 - 1) / 2;
        let vt = &self.values[v.0];
        let [n, _, h, w] = vt.shape();
        let hw = h * w;
        let mut bits = 0.0f64;
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                for p in 0..hw {
                    let x = vt.data()[base + p].as_f64();
                    let (mass, _, _, _) = factorized_mass(&probs[cc], support, x);
                    bits += bits_of(mass);
                }
            }
        }
        let out = Tensor::scalar(T::from_f64(bits));
        Ok(self.push(out, Op::RateFactorized { v, logits }))
    }

    fn factorized_probs(&self, logits: NodeId) -> Vec<Vec<f64>> {
        let lt = &self.values[logits.0];
        let [c, bins, _, _] = lt.shape();
        (0..c)
            .map(|cc| {
                let row: Vec<f64> =
                    (0..bins).map(|k| lt.data()[cc * bins + k].as_f64()).collect();
                softmax(&row)
            })
            .collect()
    }

    /// Reverse-mode differentiation from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        adj[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        let acc = |adj: &mut [Option<Tensor<T>>], n: NodeId, delta: Tensor<T>| {
            match &mut adj[n.0] {
                Some(t) => t.add_assign(&delta).expect("adjoint shape"),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.ops[i] {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(&self.values[b.0], |gv, bv| gv * bv).unwrap();
                let db = g.zip_map(&self.values[a.0], |gv, av| gv * av).unwrap();
                acc(adj, *a, da);
                acc(adj, *b, db);
            }
            Op::Scale(x, s) => {
                let st = T::from_f64(*s);
                acc(adj, *x, g.map(|v| v * st));
            }
            Op::Conv { x, w, b, stride, pad, transposed } => {
                let (dx, dw) = if *transposed {
                    (
                        kernels::conv2d_transposed_dx(
                            g,
                            &self.values[w.0],
                            self.values[x.0].shape(),
                            *stride,
                            *pad,
                        ),
                        kernels::conv2d_transposed_dw(
                            g,
                            &self.values[x.0],
                            self.values[w.0].shape(),
                            *stride,
                            *pad,
                        ),
                    )
                } else {
                    (
                        kernels::conv2d_dx(
                            g,
                            &self.values[w.0],
                            self.values[x.0].shape(),
                            *stride,
                            *pad,
                        ),
                        kernels::conv2d_dw(
                            g,
                            &self.values[x.0],
                            self.values[w.0].shape(),
                            *stride,
                            *pad,
                        ),
                    )
                };
                acc(adj, *x, dx);
                acc(adj, *w, dw);
                acc(adj, *b, kernels::grad_bias(g));
            }
            Op::Gdn { x, beta_raw, gamma_raw, inverse } => {
                let (beta, gamma) = self.gdn_effective(*beta_raw, *gamma_raw);
                let (dx, dbeta_eff, dgamma_eff) =
                    kernels::gdn_backward(&self.values[x.0], &beta, &gamma, *inverse, g);
                acc(adj, *x, dx);
                let braw = &self.values[beta_raw.0];
                let dbraw = Tensor::new(
                    braw.shape(),
                    braw.data()
                        .iter()
                        .zip(&dbeta_eff)
                        .map(|(&r, &d)| d * T::from_f64(sigmoid(r.as_f64())))
                        .collect(),
                )
                .unwrap();
                acc(adj, *beta_raw, dbraw);
                let graw = &self.values[gamma_raw.0];
                let two = T::from_f64(2.0);
                let dgraw = Tensor::new(
                    graw.shape(),
                    graw.data()
                        .iter()
                        .zip(&dgamma_eff)
                        .map(|(&r, &d)| d * two * r)
                        .collect(),
                )
                .unwrap();
                acc(adj, *gamma_raw, dgraw);
            }
            Op::LeakyRelu { x, slope } => {
                let s = T::from_f64(*slope);
                let dx = g
                    .zip_map(&self.values[x.0], |gv, xv| if xv > T::zero() { gv } else { gv * s })
                    .unwrap();
                acc(adj, *x, dx);
            }
            Op::Softplus { x } => {
                let dx = g
                    .zip_map(&self.values[x.0], |gv, xv| {
                        gv * T::from_f64(sigmoid(xv.as_f64()))
                    })
                    .unwrap();
                acc(adj, *x, dx);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xs = &self.values[x.0];
                let [n, c, h, w] = xs.shape();
                let hw = h * w;
                let sc = self.values[scale.0].data();
                let mut dx = Tensor::zeros(xs.shape());
                let mut dscale = Tensor::zeros([1, c, 1, 1]);
                let mut dshift = Tensor::zeros([1, c, 1, 1]);
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * hw;
                        let s = sc[cc];
                        let mut ds = T::zero();
                        let mut db = T::zero();
                        for p in 0..hw {
                            let gv = g.data()[base + p];
                            dx.data_mut()[base + p] = gv * s;
                            ds += gv * xs.data()[base + p];
                            db += gv;
                        }
                        dscale.data_mut()[cc] += ds;
                        dshift.data_mut()[cc] += db;
                    }
                }
                acc(adj, *x, dx);
                acc(adj, *scale, dscale);
                acc(adj, *shift, dshift);
            }
            Op::RowSelect { table, row } => {
                let [r, c, _, _] = self.values[table.0].shape();
                let mut dt = Tensor::zeros([r, c, 1, 1]);
                dt.data_mut()[row * c..(row + 1) * c].copy_from_slice(g.data());
                acc(adj, *table, dt);
            }
            Op::ConcatC(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let pc = self.values[p.0].channels();
                    let dp = crate::tensor::slice_channels(g, c0, pc).unwrap();
                    acc(adj, *p, dp);
                    c0 += pc;
                }
            }
            Op::SliceC { x, start } => {
                let xs = &self.values[x.0];
                let [n, c, h, w] = xs.shape();
                let len = g.channels();
                let mut dx = Tensor::zeros([n, c, h, w]);
                for nn in 0..n {
                    for cc in 0..len {
                        let src = g.index(nn, cc, 0, 0);
                        let dst = dx.index(nn, start + cc, 0, 0);
                        dx.data_mut()[dst..dst + h * w]
                            .copy_from_slice(&g.data()[src..src + h * w]);
                    }
                }
                acc(adj, *x, dx);
            }
            Op::AvgPool2(x) => {
                acc(adj, *x, kernels::avg_pool2_backward(g, self.values[x.0].shape()));
            }
            Op::Upsample2(x) => {
                acc(adj, *x, kernels::upsample_bilinear2_backward(g, self.values[x.0].shape()));
            }
            Op::Warp { src, flow } => {
                let (dsrc, dflow) =
                    kernels::warp_backward(&self.values[src.0], &self.values[flow.0], g);
                acc(adj, *src, dsrc);
                acc(adj, *flow, dflow);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                acc(adj, *x, Tensor::full(self.values[x.0].shape(), gv));
            }
            Op::MeanAll(x) => {
                let n = self.values[x.0].numel().max(1);
                let gv = g.data()[0] / T::from_f64(n as f64);
                acc(adj, *x, Tensor::full(self.values[x.0].shape(), gv));
            }
            Op::Round => {}
            Op::RateGaussian { v, mu, sigma } => {
                let gv = g.data()[0];
                let vd = self.values[v.0].data();
                let md = self.values[mu.0].data();
                let sd = self.values[sigma.0].data();
                let n = vd.len();
                let mut dv = Tensor::zeros(self.values[v.0].shape());
                let mut dmu = Tensor::zeros(self.values[mu.0].shape());
                let mut dsigma = Tensor::zeros(self.values[sigma.0].shape());
                for i in 0..n {
                    let (gdv, gdmu, gds) =
                        gaussian_bits_grad(vd[i].as_f64(), md[i].as_f64(), sd[i].as_f64());
                    dv.data_mut()[i] = gv * T::from_f64(gdv);
                    dmu.data_mut()[i] = gv * T::from_f64(gdmu);
                    dsigma.data_mut()[i] = gv * T::from_f64(gds);
                }
                acc(adj, *v, dv);
                acc(adj, *mu, dmu);
                acc(adj, *sigma, dsigma);
            }
            Op::RateFactorized { v, logits } => {
                let gv = g.data()[0].as_f64();
                let probs = self.factorized_probs(*logits);
                let vt = &self.values[v.0];
                let [n, c, h, w] = vt.shape();
                let hw = h * w;
                let [_, bins, _, _] = self.values[logits.0].shape();
                let support = (bins as i32 - 1) / 2;
                let mut dv = Tensor::zeros(vt.shape());
                let mut dlogits = vec![0.0f64; c * bins];
                // coefficient of the rank-one -p term per channel
                let mut rank1 = vec![0.0f64; c];
                let ln2 = std::f64::consts::LN_2;
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * hw;
                        for p in 0..hw {
                            let x = vt.data()[base + p].as_f64();
                            let (mass, lo_idx, w_lo, w_hi) =
                                factorized_mass(&probs[cc], support, x);
                            if mass <= P_MIN {
                                continue;
                            }
                            let dbits_dmass = -1.0 / (mass * ln2);
                            let row = &probs[cc];
                            let p_lo = if lo_idx >= 0 && (lo_idx as usize) < bins {
                                row[lo_idx as usize]
                            } else {
                                0.0
                            };
                            let hi_idx = lo_idx + 1;
                            let p_hi = if hi_idx >= 0 && (hi_idx as usize) < bins {
                                row[hi_idx as usize]
                            } else {
                                0.0
                            };
                            dv.data_mut()[base + p] +=
                                T::from_f64(gv * dbits_dmass * (p_hi - p_lo));
                            let u = gv * dbits_dmass;
                            if lo_idx >= 0 && (lo_idx as usize) < bins {
                                dlogits[cc * bins + lo_idx as usize] += u * w_lo * p_lo;
                            }
                            if hi_idx >= 0 && (hi_idx as usize) < bins {
                                dlogits[cc * bins + hi_idx as usize] += u * w_hi * p_hi;
                            }
                            rank1[cc] += u * (w_lo * p_lo + w_hi * p_hi);
                        }
                    }
                }
                for cc in 0..c {
                    for k in 0..bins {
                        dlogits[cc * bins + k] -= rank1[cc] * probs[cc][k];
                    }
                }
                let dl = Tensor::new(
                    [c, bins, 1, 1],
                    dlogits.into_iter().map(T::from_f64).collect(),
                )
                .unwrap();
                acc(adj, *v, dv);
                acc(adj, *logits, dl);
            }
        }
    }

    /// Flush parameter adjoints into the store's gradient accumulators.
    pub fn accumulate_param_grads(
        &self,
        grads: &Gradients<T>,
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Param(pid) = op {
                if let Some(g) = grads.wrt(NodeId(i)) {
                    store.accumulate_grad(*pid, g)?;
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Mass of the unit bin `[x-0.5, x+0.5]` under the piecewise-constant
/// density given by integer-bin probabilities over `[-support, support]`.
/// Returns (mass, lower bin index into the probability row, lower weight,
/// upper weight).
fn factorized_mass(probs: &[f64], support: i32, x: f64) -> (f64, i64, f64, f64) {
    let k = x.floor();
    let f = x - k;
    let lo_idx = k as i64 + support as i64;
    let bins = probs.len() as i64;
    let p_lo = if lo_idx >= 0 && lo_idx < bins { probs[lo_idx as usize] } else { 0.0 };
    let hi = lo_idx + 1;
    let p_hi = if hi >= 0 && hi < bins { probs[hi as usize] } else { 0.0 };
    ((1.0 - f) * p_lo + f * p_hi, lo_idx, 1.0 - f, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: [usize; 4], rng: &mut StdRng, lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn linear_conv_weight_gradient_is_input_sum() {
        // loss = sum(conv2d(x)) with a 1x1 kernel: d loss / d w = sum(x).
        let mut g = Graph::<f64>::new();
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::full([1, 1, 1, 1], 0.3)).unwrap();
        let b = store.register("b", Tensor::zeros([1, 1, 1, 1])).unwrap();
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let xn = g.leaf(x);
        let wn = g.param(&store, w);
        let bn = g.param(&store, b);
        let y = g.conv(xn, wn, bn, 1, 0, false).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        g.accumulate_param_grads(&grads, &mut store).unwrap();
        assert!((store.grad(w).data()[0] - 10.0).abs() < 1e-12);
        assert!((store.grad(b).data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_loss_gradient_is_input() {
        // loss = sum(x^2)/2: d loss / d x = x.
        let mut g = Graph::<f64>::new();
        let x = Tensor::new([1, 1, 1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let xn = g.leaf(x.clone());
        let sq = g.mul(xn, xn).unwrap();
        let s = g.sum_all(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        let gx = grads.wrt(xn).unwrap();
        assert!(gx.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let xn = g.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(g.backward(xn).is_err());
    }

    /// Central-difference oracle over every parameter of a small network.
    fn grad_check(
        build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> NodeId,
        store: &mut ParamStore<f64>,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        let grads = g.backward(loss).unwrap();
        g.accumulate_param_grads(&grads, store).unwrap();
        let h = 1e-4;
        let ids: Vec<ParamId> = store.iter_names().map(|(_, id)| id).collect();
        for id in ids {
            let n = store.value(id).numel();
            for i in 0..n {
                let orig = store.value(id).data()[i];
                store.value_mut(id).data_mut()[i] = orig + h;
                let mut gp = Graph::new();
                let lp = build(&mut gp, store);
                let fp = gp.value(lp).item().unwrap();
                store.value_mut(id).data_mut()[i] = orig - h;
                let mut gm = Graph::new();
                let lm = build(&mut gm, store);
                let fm = gm.value(lm).item().unwrap();
                store.value_mut(id).data_mut()[i] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = store.grad(id).data()[i];
                let denom = numeric.abs().max(analytic.abs()).max(1e-4);
                assert!(
                    (numeric - analytic).abs() / denom < tol,
                    "param {} [{i}]: analytic {analytic}, numeric {numeric}",
                    store.name_of(id)
                );
            }
        }
    }

    #[test]
    fn conv_gdn_network_gradients_match_finite_differences() {
        // 3-layer conv+GDN stack against central differences in f64.
        let mut rng = StdRng::seed_from_u64(100);
        let mut store = ParamStore::<f64>::new();
        let w1 = store.register("w1", rand_tensor([3, 2, 3, 3], &mut rng, -0.4, 0.4)).unwrap();
        let b1 = store.register("b1", rand_tensor([1, 3, 1, 1], &mut rng, -0.1, 0.1)).unwrap();
        let br = store.register("gdn.beta", rand_tensor([1, 3, 1, 1], &mut rng, 0.2, 0.8)).unwrap();
        let gr =
            store.register("gdn.gamma", rand_tensor([3, 3, 1, 1], &mut rng, 0.05, 0.3)).unwrap();
        let w2 = store.register("w2", rand_tensor([2, 3, 3, 3], &mut rng, -0.4, 0.4)).unwrap();
        let b2 = store.register("b2", rand_tensor([1, 2, 1, 1], &mut rng, -0.1, 0.1)).unwrap();
        let w3 = store.register("w3", rand_tensor([1, 2, 4, 4], &mut rng, -0.4, 0.4)).unwrap();
        let b3 = store.register("b3", rand_tensor([1, 1, 1, 1], &mut rng, -0.1, 0.1)).unwrap();
        let x = rand_tensor([1, 2, 6, 6], &mut rng, -1.0, 1.0);
        let target = rand_tensor([1, 1, 6, 6], &mut rng, -1.0, 1.0);
        assert!(store.total_values() <= 1000);
        let build = move |g: &mut Graph<f64>, store: &ParamStore<f64>| {
            let xn = g.leaf(x.clone());
            let wn = g.param(store, w1);
            let bn = g.param(store, b1);
            let h1 = g.conv(xn, wn, bn, 2, 1, false).unwrap();
            let brn = g.param(store, br);
            let grn = g.param(store, gr);
            let h2 = g.gdn(h1, brn, grn, false).unwrap();
            let wn2 = g.param(store, w2);
            let bn2 = g.param(store, b2);
            let h3 = g.conv(h2, wn2, bn2, 1, 1, false).unwrap();
            let h4 = g.leaky_relu(h3, 0.01);
            let wn3 = g.param(store, w3);
            let bn3 = g.param(store, b3);
            let h5 = g.conv(h4, wn3, bn3, 2, 1, true).unwrap();
            let tn = g.leaf(target.clone());
            g.mse(h5, tn).unwrap()
        };
        grad_check(build, &mut store, 1e-3);
    }

    #[test]
    fn rate_ops_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(200);
        let mut store = ParamStore::<f64>::new();
        let mu = store.register("mu", rand_tensor([1, 2, 2, 2], &mut rng, -0.8, 0.8)).unwrap();
        let sr = store.register("sraw", rand_tensor([1, 2, 2, 2], &mut rng, -1.0, 1.0)).unwrap();
        let logits =
            store.register("logits", rand_tensor([2, 9, 1, 1], &mut rng, -0.5, 0.5)).unwrap();
        let v = rand_tensor([1, 2, 2, 2], &mut rng, -2.3, 2.3);
        let build = move |g: &mut Graph<f64>, store: &ParamStore<f64>| {
            let vn = g.leaf(v.clone());
            let mun = g.param(store, mu);
            let srn = g.param(store, sr);
            let sigma = g.softplus(srn, 0.11);
            let r1 = g.rate_gaussian(vn, mun, sigma).unwrap();
            let ln = g.param(store, logits);
            let r2 = g.rate_factorized(vn, ln).unwrap();
            g.add(r1, r2).unwrap()
        };
        grad_check(build, &mut store, 1e-3);
    }

    #[test]
    fn warp_and_affine_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(300);
        let mut store = ParamStore::<f64>::new();
        let src = store.register("src", rand_tensor([1, 2, 6, 6], &mut rng, -1.0, 1.0)).unwrap();
        let flw = store
            .register("flow", rand_tensor([1, 2, 6, 6], &mut rng, -0.45, 0.45).map(|v| v + 0.2))
            .unwrap();
        let sc = store.register("scale", rand_tensor([1, 2, 1, 1], &mut rng, 0.5, 1.5)).unwrap();
        let sh = store.register("shift", rand_tensor([1, 2, 1, 1], &mut rng, -0.3, 0.3)).unwrap();
        let build = move |g: &mut Graph<f64>, store: &ParamStore<f64>| {
            let s = g.param(store, src);
            let f = g.param(store, flw);
            let w = g.warp(s, f).unwrap();
            let scn = g.param(store, sc);
            let shn = g.param(store, sh);
            let a = g.channel_affine(w, scn, shn).unwrap();
            let p = g.avg_pool2(a).unwrap();
            let u = g.upsample2(p);
            let sq = g.mul(u, u).unwrap();
            g.sum_all(sq)
        };
        grad_check(build, &mut store, 1e-3);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = StdRng::seed_from_u64(400);
        let x = rand_tensor([2, 3, 16, 16], &mut rng, -1.0, 1.0).cast::<f32>();
        let w = rand_tensor([4, 3, 3, 3], &mut rng, -0.5, 0.5).cast::<f32>();
        let b = rand_tensor([1, 4, 1, 1], &mut rng, -0.5, 0.5).cast::<f32>();
        let run = || {
            let mut g = Graph::<f32>::new();
            let xn = g.leaf(x.clone());
            let wn = g.leaf(w.clone());
            let bn = g.leaf(b.clone());
            let y = g.conv(xn, wn, bn, 2, 1, false).unwrap();
            let z = g.leaky_relu(y, 0.01);
            g.value(z).clone()
        };
        let a = run();
        let bb = run();
        assert_eq!(a.data(), bb.data());
    }
}
