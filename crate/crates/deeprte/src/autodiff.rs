//! Minimal dense-tensor reverse-mode differentiation engine plus the neural
//! primitives the operator network needs: linear layers, tanh, layer
//! normalization, masked softmax, concatenation and a handful of fused
//! batching ops. Values are float64 throughout.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2};
use rand::Rng;

use crate::error::RteError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Recorded primitive operations. Parents are stored by node index; constant
/// payloads (masks, gather indices, integration weights) live in the op.
enum Op {
    Leaf,
    /// `[n, k] x [k, m]`
    MatMul(Var, Var),
    /// `[n, m] + [m]` broadcast over rows
    AddRowBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    /// `exp(-x)` elementwise
    ExpNeg(Var),
    /// Row-wise layer normalization with affine parameters, sigma floored.
    LayerNormRows { x: Var, gamma: Var, beta: Var },
    /// Row-wise softmax of `x + mask`, shift-stabilized. The mask is fixed
    /// data, not a differentiable input.
    MaskedSoftmaxRows { x: Var },
    /// `scores[p, i] = scale * dot(keys[p * group + i], query[p])`
    RowsDotGrouped { keys: Var, query: Var, group: usize, scale: f64 },
    /// Column-wise concatenation of same-row-count matrices.
    ConcatCols(Vec<Var>),
    /// Rows `(u, b, j)`: `[phase[u*dq+j] | bc[b] | exptau[u*dq+j]]`.
    AssembleGreenInput { phase: Array2<f64>, bc: Array2<f64>, exptau: Var, dq: usize },
    /// Per contiguous group of `s.ncols()` rows: `out = s . group`.
    GroupMatMul { x: Var, s: Array2<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    /// `out[u*nq+k] = sum_b x[(u*b_count+b)*nq+k] * bw[b]` for 1-column `x`.
    BoundaryIntegrate { x: Var, bw: Vec<f64>, nq: usize },
    /// Mean squared error against a constant target; scalar output.
    MseLoss { pred: Var, target: Array1<f64> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Layer-norm sigma floor.
pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Entries at or below this additive-mask threshold count as masked.
pub const MASKED_THRESHOLD: f64 = -1e9;

/// Recording tape for one forward pass. Gradients are produced by a single
/// reverse accumulation and the tape is discarded afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn value2(&self, v: Var) -> ndarray::ArrayView2<'_, f64> {
        self.nodes[v.0].value.view().into_dimensionality::<Ix2>().expect("2d value")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.iter().next().copied().expect("scalar value")
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant2(&mut self, value: Array2<f64>) -> Var {
        self.push(value.into_dyn(), Op::Leaf)
    }

    /// Registers a named parameter leaf; its gradient is reported by
    /// [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: ArrayD<f64>) -> Var {
        let var = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value2(a);
        let vb = self.value2(b);
        let out = thin_aware_dot(&va, &vb);
        self.push(out.into_dyn(), Op::MatMul(a, b))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value2(x);
        let vb = self.nodes[bias.0].value.view().into_dimensionality::<Ix1>().expect("1d bias");
        let out = &vx + &vb;
        self.push(out.into_dyn(), Op::AddRowBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn exp_neg(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| (-v).exp());
        self.push(out, Op::ExpNeg(x))
    }

    /// Row-wise layer normalization `gamma * (x - mean) / max(std, eps) + beta`
    /// with population (1/d) variance.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value2(x);
        let g = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().expect("gamma");
        let b = self.nodes[beta.0].value.view().into_dimensionality::<Ix1>().expect("beta");
        let mut out = vx.to_owned();
        for mut row in out.rows_mut() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let sigma = var.sqrt().max(LAYER_NORM_EPS);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / sigma * g[j] + b[j];
            }
        }
        self.push(out.into_dyn(), Op::LayerNormRows { x, gamma, beta })
    }

    /// Shift-stabilized softmax of `x + mask` per row. Fails when a row has
    /// no unmasked entry.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Array2<f64>) -> Result<Var, RteError> {
        let vx = self.value2(x);
        if vx.dim() != mask.dim() {
            return Err(RteError::Shape("softmax mask shape differs from logits".into()));
        }
        let mut out = Array2::<f64>::zeros(vx.dim());
        for (p, row) in vx.rows().into_iter().enumerate() {
            let mut shift = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                let masked = v + mask[(p, j)];
                if mask[(p, j)] > MASKED_THRESHOLD && masked > shift {
                    shift = masked;
                }
            }
            if !shift.is_finite() {
                return Err(RteError::Model(format!("softmax row {p} is fully masked")));
            }
            let mut denom = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v + mask[(p, j)] - shift).exp();
                out[(p, j)] = e;
                denom += e;
            }
            for j in 0..row.len() {
                out[(p, j)] /= denom;
            }
        }
        Ok(self.push(out.into_dyn(), Op::MaskedSoftmaxRows { x }))
    }

    /// Grouped row-wise dot products: `out[p, i] = scale * <keys[p*group+i], query[p]>`.
    pub fn rows_dot_grouped(&mut self, keys: Var, query: Var, group: usize, scale: f64) -> Var {
        let vk = self.value2(keys);
        let vq = self.value2(query);
        let p_count = vq.nrows();
        debug_assert_eq!(vk.nrows(), p_count * group);
        let mut out = Array2::<f64>::zeros((p_count, group));
        for p in 0..p_count {
            let q = vq.row(p);
            for i in 0..group {
                out[(p, i)] = scale * vk.row(p * group + i).dot(&q);
            }
        }
        self.push(out.into_dyn(), Op::RowsDotGrouped { keys, query, group, scale })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value2(*v)).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat cols");
        self.push(out.into_dyn(), Op::ConcatCols(parts.to_vec()))
    }

    /// Assembles the attenuation-MLP input rows `(u, b, j)` from constant
    /// phase coordinates `[U*dq, 4]`, constant boundary coordinates `[B, 4]`
    /// and differentiable `exp(-tau)` features `[U*dq, d_tau]`.
    pub fn assemble_green_input(
        &mut self,
        phase: Array2<f64>,
        bc: Array2<f64>,
        exptau: Var,
        dq: usize,
    ) -> Var {
        let vt = self.value2(exptau);
        let (p_count, d_tau) = vt.dim();
        debug_assert_eq!(phase.nrows(), p_count);
        let u_count = p_count / dq;
        let b_count = bc.nrows();
        let cols = phase.ncols() + bc.ncols() + d_tau;
        let mut out = Array2::<f64>::zeros((u_count * b_count * dq, cols));
        for u in 0..u_count {
            for b in 0..b_count {
                for j in 0..dq {
                    let row = (u * b_count + b) * dq + j;
                    let pj = u * dq + j;
                    for c in 0..phase.ncols() {
                        out[(row, c)] = phase[(pj, c)];
                    }
                    for c in 0..bc.ncols() {
                        out[(row, phase.ncols() + c)] = bc[(b, c)];
                    }
                    for c in 0..d_tau {
                        out[(row, phase.ncols() + bc.ncols() + c)] = vt[(pj, c)];
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::AssembleGreenInput { phase, bc, exptau, dq })
    }

    /// Applies `s` to every contiguous group of `s.ncols()` rows:
    /// `out_group = s . x_group`. The number of output rows per group is
    /// `s.nrows()`.
    pub fn group_matmul(&mut self, x: Var, s: Array2<f64>) -> Var {
        let vx = self.value2(x);
        let (rows, cols) = vx.dim();
        let g_in = s.ncols();
        let g_out = s.nrows();
        debug_assert_eq!(rows % g_in, 0);
        let n_groups = rows / g_in;
        let mut out = Array2::<f64>::zeros((n_groups * g_out, cols));
        for g in 0..n_groups {
            let block = vx.slice(ndarray::s![g * g_in..(g + 1) * g_in, ..]);
            let mixed = s.dot(&block);
            out.slice_mut(ndarray::s![g * g_out..(g + 1) * g_out, ..]).assign(&mixed);
        }
        self.push(out.into_dyn(), Op::GroupMatMul { x, s })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value2(x);
        let mut out = Array2::<f64>::zeros((idx.len(), vx.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&vx.row(i));
        }
        self.push(out.into_dyn(), Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Contracts single-column Green values of rows `(u, b, k)` against
    /// boundary weights: `out[u*nq+k] = sum_b x[(u*b+b)*nq+k] * bw[b]`.
    pub fn boundary_integrate(&mut self, x: Var, bw: Vec<f64>, nq: usize) -> Var {
        let vx = self.value2(x);
        let b_count = bw.len();
        let rows = vx.nrows();
        debug_assert_eq!(rows % (b_count * nq), 0);
        let u_count = rows / (b_count * nq);
        let mut out = Array2::<f64>::zeros((u_count * nq, 1));
        for u in 0..u_count {
            for b in 0..b_count {
                let w = bw[b];
                for k in 0..nq {
                    out[(u * nq + k, 0)] += vx[((u * b_count + b) * nq + k, 0)] * w;
                }
            }
        }
        self.push(out.into_dyn(), Op::BoundaryIntegrate { x, bw, nq })
    }

    /// Mean squared error of a single-column prediction against a constant
    /// target vector; returns a scalar node.
    pub fn mse_loss(&mut self, pred: Var, target: Array1<f64>) -> Var {
        let vp = self.value2(pred);
        debug_assert_eq!(vp.nrows(), target.len());
        let n = target.len() as f64;
        let loss =
            vp.column(0).iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>()
                / n;
        self.push(
            ndarray::arr1(&[loss]).into_dyn(),
            Op::MseLoss { pred, target },
        )
    }

    /// Reverse accumulation from a scalar loss node. Returns gradients for
    /// every registered parameter; parameters the loss does not reach get
    /// zero gradients.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, ArrayD<f64>>, RteError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(RteError::Model("backward expects a scalar loss".into()));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ndarray::ArrayD::ones(self.nodes[loss.0].value.raw_dim()));

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let va = self.value2(*a);
                    let vb = self.value2(*b);
                    accumulate(&mut grads, *a, g.dot(&vb.t()).into_dyn());
                    accumulate(&mut grads, *b, va.t().dot(&g).into_dyn());
                }
                Op::AddRowBias(x, bias) => {
                    let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                    accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).into_dyn());
                    accumulate(&mut grads, *x, gout.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gout.clone());
                    accumulate(&mut grads, *b, gout.clone());
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, gout.mapv(|v| v * c));
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, *x, &gout * &y.mapv(|v| 1.0 - v * v));
                }
                Op::ExpNeg(x) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, *x, -(&gout * y));
                }
                Op::LayerNormRows { x, gamma, beta } => {
                    let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let vx = self.value2(*x);
                    let vg =
                        self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap();
                    let d = vx.ncols();
                    let df = d as f64;
                    let mut dx = Array2::<f64>::zeros(vx.dim());
                    let mut dgamma = Array1::<f64>::zeros(d);
                    let mut dbeta = Array1::<f64>::zeros(d);
                    for (r, row) in vx.rows().into_iter().enumerate() {
                        let mean = row.sum() / df;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                        let sigma = var.sqrt();
                        let floored = sigma.max(LAYER_NORM_EPS);
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / floored).collect();
                        let gy: Vec<f64> = g.row(r).iter().copied().collect();
                        for j in 0..d {
                            dgamma[j] += gy[j] * xhat[j];
                            dbeta[j] += gy[j];
                        }
                        let gxhat: Vec<f64> = (0..d).map(|j| gy[j] * vg[j]).collect();
                        let mean_gxhat = gxhat.iter().sum::<f64>() / df;
                        if sigma > LAYER_NORM_EPS {
                            let mean_gxhat_xhat =
                                gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / df;
                            for j in 0..d {
                                dx[(r, j)] = (gxhat[j] - mean_gxhat - xhat[j] * mean_gxhat_xhat)
                                    / floored;
                            }
                        } else {
                            // Sigma is pinned at the floor: it does not vary
                            // with x, only the centering does.
                            for j in 0..d {
                                dx[(r, j)] = (gxhat[j] - mean_gxhat) / floored;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *gamma, dgamma.into_dyn());
                    accumulate(&mut grads, *beta, dbeta.into_dyn());
                }
                Op::MaskedSoftmaxRows { x, .. } => {
                    let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let y = self.nodes[i].value.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = Array2::<f64>::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = y.row(r).dot(&g.row(r));
                        for j in 0..y.ncols() {
                            dx[(r, j)] = y[(r, j)] * (g[(r, j)] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::RowsDotGrouped { keys, query, group, scale } => {
                    let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let vk = self.value2(*keys);
                    let vq = self.value2(*query);
                    let mut dk = Array2::<f64>::zeros(vk.dim());
                    let mut dq = Array2::<f64>::zeros(vq.dim());
                    for p in 0..vq.nrows() {
                        for idx in 0..*group {
                            let gs = g[(p, idx)] * scale;
                            if gs == 0.0 {
                                continue;
                            }
                            let krow = vk.row(p * group + idx);
                            for c in 0..vq.ncols() {
                                dk[(p * group + idx, c)] += gs * vq[(p, c)];
                                dq[(p, c)] += gs * krow[c];
                            }
                        }
                    }
                    accumulate(&mut grads, *keys, dk.into_dyn());
                    accumulate(&mut grads, *query, dq.into_dyn());
                }
                Op::ConcatCols(parts) => {
                    let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let mut offset = 0;
                    for part in parts {
                        let w = self.value2(*part).ncols();
                        let slice = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, *part, slice.into_dyn());
                        offset += w;
                    }
                }
                Op::AssembleGreenInput { phase, bc, exptau, dq } => {
                    let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let vt = self.value2(*exptau);
                    let (p_count, d_tau) = vt.dim();
                    let b_count = bc.nrows();
                    let u_count = p_count / dq;
                    let base = phase.ncols() + bc.ncols();
                    let mut dt = Array2::<f64>::zeros((p_count, d_tau));
                    for u in 0..u_count {
                        for b in 0..b_count {
                            for j in 0..*dq {
                                let row = (u * b_count + b) * dq + j;
                                for c in 0..d_tau {
                                    dt[(u * dq + j, c)] += g[(row, base + c)];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *exptau, dt.into_dyn());
                }
                Op::GroupMatMul { x, s } => {
                    let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let vx = self.value2(*x);
                    let g_in = s.ncols();
                    let g_out = s.nrows();
                    let n_groups = vx.nrows() / g_in;
                    let st = s.t();
                    let mut dx = Array2::<f64>::zeros(vx.dim());
                    for gi in 0..n_groups {
                        let gblock = g.slice(ndarray::s![gi * g_out..(gi + 1) * g_out, ..]);
                        dx.slice_mut(ndarray::s![gi * g_in..(gi + 1) * g_in, ..])
                            .assign(&st.dot(&gblock));
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::GatherRows { x, idx } => {
                    let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let vx = self.value2(*x);
                    let mut dx = Array2::<f64>::zeros(vx.dim());
                    for (r, &i_src) in idx.iter().enumerate() {
                        let mut drow = dx.row_mut(i_src);
                        drow += &g.row(r);
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::BoundaryIntegrate { x, bw, nq } => {
                    let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let vx = self.value2(*x);
                    let b_count = bw.len();
                    let u_count = vx.nrows() / (b_count * nq);
                    let mut dx = Array2::<f64>::zeros(vx.dim());
                    for u in 0..u_count {
                        for b in 0..b_count {
                            let w = bw[b];
                            for k in 0..*nq {
                                dx[((u * b_count + b) * nq + k, 0)] = g[(u * nq + k, 0)] * w;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::MseLoss { pred, target } => {
                    let gs = gout.iter().next().copied().unwrap();
                    let vp = self.value2(*pred);
                    let n = target.len() as f64;
                    let mut dp = Array2::<f64>::zeros(vp.dim());
                    for r in 0..target.len() {
                        dp[(r, 0)] = gs * 2.0 * (vp[(r, 0)] - target[r]) / n;
                    }
                    accumulate(&mut grads, *pred, dp.into_dyn());
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, var) in &self.params {
            let g = grads[var.0]
                .take()
                .unwrap_or_else(|| ArrayD::zeros(self.nodes[var.0].value.raw_dim()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], var: Var, g: ArrayD<f64>) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

/// Matrix product with a direct-loop path for thin inner dimensions, where
/// the packing overhead of the general kernel dominates.
pub(crate) fn thin_aware_dot(
    a: &ndarray::ArrayView2<'_, f64>,
    b: &ndarray::ArrayView2<'_, f64>,
) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = b.ncols();
    if k > 16 || n < 64 {
        return a.dot(b);
    }
    let mut out = Array2::<f64>::zeros((n, m));
    if let (Some(bs), Some(os)) = (b.as_slice(), out.as_slice_mut()) {
        for (r, arow) in a.rows().into_iter().enumerate() {
            let orow = &mut os[r * m..(r + 1) * m];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bs[kk * m..(kk + 1) * m];
                for c in 0..m {
                    orow[c] += av * brow[c];
                }
            }
        }
    } else {
        return a.dot(b);
    }
    out
}

/// `y = x W (+ b)`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Var {
    let y = tape.matmul(x, w);
    match b {
        Some(bias) => tape.add_row_bias(y, bias),
        None => y,
    }
}

/// `n_layers - 1` tanh-activated hidden layers followed by a linear output
/// projection. Parameters are looked up as `{prefix}/{l}/weight|bias`.
pub fn mlp(
    tape: &mut Tape,
    x: Var,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    n_layers: usize,
) -> Result<Var, RteError> {
    let mut z = x;
    for l in 0..n_layers {
        let w = lookup(vars, &format!("{prefix}/{l}/weight"))?;
        let b = lookup(vars, &format!("{prefix}/{l}/bias"))?;
        z = linear(tape, z, w, Some(b));
        if l + 1 < n_layers {
            z = tape.tanh(z);
        }
    }
    Ok(z)
}

pub fn lookup(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var, RteError> {
    vars.get(name).copied().ok_or_else(|| RteError::Model(format!("missing parameter '{name}'")))
}

/// Initialization rule for one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform on `+-sqrt(6 / (fan_in + fan_out))` for `[fan_in, fan_out]`.
    GlorotUniform,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self { name: name.into(), shape, init }
    }
}

/// Named parameter store with deterministic iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn total_len(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>, RteError> {
        self.tensors.get(name).ok_or_else(|| RteError::Model(format!("missing tensor '{name}'")))
    }

    /// Registers every tensor on a tape as a parameter leaf.
    pub fn register(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.tensors {
            vars.insert(name.clone(), tape.param(name, tensor.clone()));
        }
        vars
    }
}

/// Builds a [`ParamStore`] from specs in order, drawing from `rng`. The same
/// seed and spec list always produce the same store.
pub fn init_params(specs: &[ParamSpec], rng: &mut impl Rng) -> ParamStore {
    let mut tensors = BTreeMap::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f64> = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::GlorotUniform => {
                let (fan_in, fan_out) = match spec.shape.as_slice() {
                    [i, o] => (*i, *o),
                    [o] => (*o, *o),
                    other => (other[0], other[other.len() - 1]),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            }
        };
        tensors.insert(
            spec.name.clone(),
            ArrayD::from_shape_vec(spec.shape.clone(), data).expect("param shape"),
        );
    }
    ParamStore { tensors }
}
