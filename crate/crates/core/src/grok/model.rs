// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm decoder-only transformer with hand-written backpropagation.
//!
//! Rows of every activation matrix are `(example, position)` pairs, example
//! major. The last block only computes the final position, which is all the
//! readout needs.

use serde::{Deserialize, Serialize};

use super::dataset::SEQ_LEN;
use crate::error::{Error, Result};
use crate::numkit::rng::{self, Prng};
use crate::numkit::{gemm, Matrix, Trans};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    LinearUnembed,
    MlpHead,
}

/// Shape of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_width: usize,
    pub head_type: HeadType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    /// `d_model × vocab`.
    Linear { wu: Matrix },
    Mlp {
        w1: Matrix,
        b1: Matrix,
        w2: Matrix,
        b2: Matrix,
    },
}

/// All trainable tensors. Weight matrices are stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embed: Matrix,
    pub pos: Matrix,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
    pub head: HeadParams,
}

fn weight(r: &mut Prng, fan_in: usize, fan_out: usize) -> Matrix {
    rng::gaussian_matrix(r, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

fn ones(n: usize) -> Matrix {
    Matrix::from_fn(1, n, |_, _| 1.0)
}

impl Params {
    /// Gaussian weights with standard deviation `1/√fan_in`, unit norm
    /// gains, zero biases.
    pub fn init(arch: &Arch, r: &mut Prng) -> Self {
        let (d, m, v) = (arch.d_model, arch.mlp_width, arch.vocab);
        let embed = weight(r, d, v).transpose();
        let pos = weight(r, d, SEQ_LEN).transpose();
        let blocks = (0..arch.n_layers)
            .map(|_| BlockParams {
                ln1_g: ones(d),
                ln1_b: Matrix::zeros(1, d),
                wq: weight(r, d, d),
                wk: weight(r, d, d),
                wv: weight(r, d, d),
                wo: weight(r, d, d),
                ln2_g: ones(d),
                ln2_b: Matrix::zeros(1, d),
                w1: weight(r, d, m),
                b1: Matrix::zeros(1, m),
                w2: weight(r, m, d),
                b2: Matrix::zeros(1, d),
            })
            .collect();
        let head = match arch.head_type {
            HeadType::LinearUnembed => HeadParams::Linear { wu: weight(r, d, v) },
            HeadType::MlpHead => HeadParams::Mlp {
                w1: weight(r, d, m),
                b1: Matrix::zeros(1, m),
                w2: weight(r, m, v),
                b2: Matrix::zeros(1, v),
            },
        };
        Self {
            embed,
            pos,
            blocks,
            lnf_g: ones(d),
            lnf_b: Matrix::zeros(1, d),
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Tensors in a fixed order, each with whether weight decay applies.
    pub fn tensors(&self) -> Vec<(&Matrix, bool)> {
        let mut out = vec![(&self.embed, true), (&self.pos, true)];
        for b in &self.blocks {
            out.extend([
                (&b.ln1_g, false),
                (&b.ln1_b, false),
                (&b.wq, true),
                (&b.wk, true),
                (&b.wv, true),
                (&b.wo, true),
                (&b.ln2_g, false),
                (&b.ln2_b, false),
                (&b.w1, true),
                (&b.b1, false),
                (&b.w2, true),
                (&b.b2, false),
            ]);
        }
        out.extend([(&self.lnf_g, false), (&self.lnf_b, false)]);
        match &self.head {
            HeadParams::Linear { wu } => out.push((wu, true)),
            HeadParams::Mlp { w1, b1, w2, b2 } => {
                out.extend([(w1, true), (b1, false), (w2, true), (b2, false)])
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed, &mut self.pos];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b]);
        match &mut self.head {
            HeadParams::Linear { wu } => out.push(wu),
            HeadParams::Mlp { w1, b1, w2, b2 } => out.extend([w1, b1, w2, b2]),
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(t, _)| t.rows() * t.cols()).sum()
    }
}

fn mm(a: &Matrix, ta: Trans, b: &Matrix, tb: Trans) -> Result<Matrix> {
    let rows = if ta == Trans::No { a.rows() } else { a.cols() };
    let cols = if tb == Trans::No { b.cols() } else { b.rows() };
    let mut c = Matrix::zeros(rows, cols);
    gemm(1.0, a, ta, b, tb, 0.0, &mut c)?;
    Ok(c)
}

/// `acc += aᵀ b`.
fn acc_at_b(acc: &mut Matrix, a: &Matrix, b: &Matrix) -> Result<()> {
    gemm(1.0, a, Trans::Yes, b, Trans::No, 1.0, acc)
}

fn add_row_bias(m: &mut Matrix, bias: &Matrix) {
    for i in 0..m.rows() {
        m.row_mut(i).iter_mut().zip(bias.data()).for_each(|(x, b)| *x += b);
    }
}

fn acc_col_sums(acc: &mut Matrix, m: &Matrix) {
    for row in m.iter_rows() {
        acc.data_mut().iter_mut().zip(row).for_each(|(a, x)| *a += x);
    }
}

struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

fn ln_forward(x: &Matrix, g: &Matrix, b: &Matrix) -> (Matrix, LnCache) {
    let d = x.cols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = xhat.row_mut(i);
        let mu = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mu) * r);
        rstd.push(r);
    }
    let y = Matrix::from_fn(x.rows(), x.cols(), |i, j| xhat.get(i, j) * g.get(0, j) + b.get(0, j));
    (y, LnCache { xhat, rstd })
}

fn ln_backward(dy: &Matrix, c: &LnCache, g: &Matrix, dg: &mut Matrix, db: &mut Matrix) -> Matrix {
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    for i in 0..dy.rows() {
        let (dyr, xh) = (dy.row(i), c.xhat.row(i));
        let mut dxhat = vec![0.0; d];
        for j in 0..d {
            dg.data_mut()[j] += dyr[j] * xh[j];
            db.data_mut()[j] += dyr[j];
            dxhat[j] = dyr[j] * g.get(0, j);
        }
        let mean = dxhat.iter().sum::<f64>() / d as f64;
        let mean_x = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = c.rstd[i];
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = r * (dxhat[j] - mean - xh[j] * mean_x);
        }
    }
    dx
}

struct BlockCache {
    /// Query positions computed by this block.
    qpos: Vec<usize>,
    ln1: LnCache,
    y1: Matrix,
    yq: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// `[query row][head][key position]`.
    att: Vec<f64>,
    z: Matrix,
    ln2: LnCache,
    y2: Matrix,
    u: Matrix,
    r: Matrix,
}

fn query_rows(n: usize, qpos: &[usize]) -> Vec<usize> {
    (0..n)
        .flat_map(|b| qpos.iter().map(move |&t| b * SEQ_LEN + t))
        .collect()
}

fn block_forward(p: &BlockParams, arch: &Arch, x: &Matrix, last_only: bool) -> Result<(Matrix, BlockCache)> {
    let n = x.rows() / SEQ_LEN;
    let (d, h) = (arch.d_model, arch.n_heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let qpos: Vec<usize> = if last_only {
        vec![SEQ_LEN - 1]
    } else {
        (0..SEQ_LEN).collect()
    };
    let qrows = query_rows(n, &qpos);

    let (y1, ln1) = ln_forward(x, &p.ln1_g, &p.ln1_b);
    let k = mm(&y1, Trans::No, &p.wk, Trans::No)?;
    let v = mm(&y1, Trans::No, &p.wv, Trans::No)?;
    let yq = y1.select_rows(&qrows);
    let q = mm(&yq, Trans::No, &p.wq, Trans::No)?;

    let nq = qpos.len();
    let mut att = vec![0.0; qrows.len() * h * SEQ_LEN];
    let mut z = Matrix::zeros(qrows.len(), d);
    for i in 0..qrows.len() {
        let (b, t) = (i / nq, qpos[i % nq]);
        for hd in 0..h {
            let cols = hd * dh..(hd + 1) * dh;
            let qi = &q.row(i)[cols.clone()];
            let a = &mut att[(i * h + hd) * SEQ_LEN..(i * h + hd + 1) * SEQ_LEN];
            for (u, s) in a.iter_mut().enumerate().take(t + 1) {
                let kr = &k.row(b * SEQ_LEN + u)[cols.clone()];
                *s = scale * qi.iter().zip(kr).map(|(x, y)| x * y).sum::<f64>();
            }
            crate::numkit::softmax_in_place(&mut a[..=t], 1.0);
            let zr = &mut z.row_mut(i)[cols.clone()];
            for (u, &w) in a.iter().enumerate().take(t + 1) {
                let vr = &v.row(b * SEQ_LEN + u)[cols.clone()];
                zr.iter_mut().zip(vr).for_each(|(o, x)| *o += w * x);
            }
        }
    }
    let mut xm = x.select_rows(&qrows);
    gemm(1.0, &z, Trans::No, &p.wo, Trans::No, 1.0, &mut xm)?;

    let (y2, ln2) = ln_forward(&xm, &p.ln2_g, &p.ln2_b);
    let mut u = mm(&y2, Trans::No, &p.w1, Trans::No)?;
    add_row_bias(&mut u, &p.b1);
    let mut r = u.clone();
    r.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
    let mut out = xm;
    gemm(1.0, &r, Trans::No, &p.w2, Trans::No, 1.0, &mut out)?;
    add_row_bias(&mut out, &p.b2);

    Ok((
        out,
        BlockCache {
            qpos,
            ln1,
            y1,
            yq,
            q,
            k,
            v,
            att,
            z,
            ln2,
            y2,
            u,
            r,
        },
    ))
}

/// Backward through one block; `dout` covers the block's query rows and the
/// result covers every row of its input.
fn block_backward(
    p: &BlockParams,
    g: &mut BlockParams,
    arch: &Arch,
    c: &BlockCache,
    dout: &Matrix,
) -> Result<Matrix> {
    let (d, h) = (arch.d_model, arch.n_heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_rows = c.y1.rows();
    let n = n_rows / SEQ_LEN;
    let nq = c.qpos.len();
    let qrows = query_rows(n, &c.qpos);

    // MLP
    acc_at_b(&mut g.w2, &c.r, dout)?;
    acc_col_sums(&mut g.b2, dout);
    let mut du = mm(dout, Trans::No, &p.w2, Trans::Yes)?;
    for (x, &uu) in du.data_mut().iter_mut().zip(c.u.data()) {
        if uu <= 0.0 {
            *x = 0.0;
        }
    }
    acc_at_b(&mut g.w1, &c.y2, &du)?;
    acc_col_sums(&mut g.b1, &du);
    let dy2 = mm(&du, Trans::No, &p.w1, Trans::Yes)?;
    let mut dxm = ln_backward(&dy2, &c.ln2, &p.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
    dxm.add_scaled(dout, 1.0)?;

    // attention output projection
    acc_at_b(&mut g.wo, &c.z, &dxm)?;
    let dz = mm(&dxm, Trans::No, &p.wo, Trans::Yes)?;

    let mut dq = Matrix::zeros(qrows.len(), d);
    let mut dk = Matrix::zeros(n_rows, d);
    let mut dv = Matrix::zeros(n_rows, d);
    let mut da = [0.0; SEQ_LEN];
    for i in 0..qrows.len() {
        let (b, t) = (i / nq, c.qpos[i % nq]);
        for hd in 0..h {
            let cols = hd * dh..(hd + 1) * dh;
            let a = &c.att[(i * h + hd) * SEQ_LEN..(i * h + hd + 1) * SEQ_LEN];
            let dzi = &dz.row(i)[cols.clone()];
            for u in 0..=t {
                let vr = &c.v.row(b * SEQ_LEN + u)[cols.clone()];
                da[u] = dzi.iter().zip(vr).map(|(x, y)| x * y).sum();
                dv.row_mut(b * SEQ_LEN + u)[cols.clone()]
                    .iter_mut()
                    .zip(dzi)
                    .for_each(|(o, x)| *o += a[u] * x);
            }
            let inner: f64 = (0..=t).map(|u| a[u] * da[u]).sum();
            for u in 0..=t {
                let ds = a[u] * (da[u] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let krow = b * SEQ_LEN + u;
                for (j, col) in cols.clone().enumerate() {
                    let qv = c.q.get(i, col);
                    let kv = c.k.get(krow, col);
                    dq.row_mut(i)[col] += ds * kv;
                    dk.row_mut(krow)[cols.start + j] += ds * qv;
                }
            }
        }
    }
    acc_at_b(&mut g.wq, &c.yq, &dq)?;
    acc_at_b(&mut g.wk, &c.y1, &dk)?;
    acc_at_b(&mut g.wv, &c.y1, &dv)?;

    let mut dy1 = mm(&dk, Trans::No, &p.wk, Trans::Yes)?;
    gemm(1.0, &dv, Trans::No, &p.wv, Trans::Yes, 1.0, &mut dy1)?;
    let dyq = mm(&dq, Trans::No, &p.wq, Trans::Yes)?;
    for (i, &row) in qrows.iter().enumerate() {
        dy1.row_mut(row).iter_mut().zip(dyq.row(i)).for_each(|(o, x)| *o += x);
    }
    let mut dx = ln_backward(&dy1, &c.ln1, &p.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
    for (i, &row) in qrows.iter().enumerate() {
        dx.row_mut(row).iter_mut().zip(dxm.row(i)).for_each(|(o, x)| *o += x);
    }
    Ok(dx)
}

/// Activations kept for the backward pass.
pub struct Forward {
    /// Final-norm output at the last position, one row per example.
    pub hidden: Matrix,
    pub logits: Matrix,
    tokens: Vec<[usize; SEQ_LEN]>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    head_pre: Option<Matrix>,
    head_act: Option<Matrix>,
}

pub fn forward(params: &Params, arch: &Arch, tokens: &[[usize; SEQ_LEN]]) -> Result<Forward> {
    if arch.n_layers == 0 || arch.d_model % arch.n_heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "d_model {} must split over {} heads and n_layers must be ≥ 1",
            arch.d_model, arch.n_heads
        )));
    }
    if let Some(bad) = tokens.iter().flatten().find(|&&t| t >= arch.vocab) {
        return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary")));
    }
    let n = tokens.len();
    let d = arch.d_model;
    let mut x = Matrix::zeros(n * SEQ_LEN, d);
    for (b, seq) in tokens.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            let row = x.row_mut(b * SEQ_LEN + t);
            for ((o, e), p) in row.iter_mut().zip(params.embed.row(tok)).zip(params.pos.row(t)) {
                *o = e + p;
            }
        }
    }
    let mut blocks = Vec::with_capacity(arch.n_layers);
    for (l, bp) in params.blocks.iter().enumerate() {
        let (out, cache) = block_forward(bp, arch, &x, l + 1 == arch.n_layers)?;
        x = out;
        blocks.push(cache);
    }
    let (hidden, lnf) = ln_forward(&x, &params.lnf_g, &params.lnf_b);
    let (logits, head_pre, head_act) = match &params.head {
        HeadParams::Linear { wu } => (mm(&hidden, Trans::No, wu, Trans::No)?, None, None),
        HeadParams::Mlp { w1, b1, w2, b2 } => {
            let mut pre = mm(&hidden, Trans::No, w1, Trans::No)?;
            add_row_bias(&mut pre, b1);
            let mut act = pre.clone();
            act.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
            let mut logits = mm(&act, Trans::No, w2, Trans::No)?;
            add_row_bias(&mut logits, b2);
            (logits, Some(pre), Some(act))
        }
    };
    Ok(Forward {
        hidden,
        logits,
        tokens: tokens.to_vec(),
        blocks,
        lnf,
        head_pre,
        head_act,
    })
}

/// Gradients of a loss with `dlogits = ∂loss/∂logits`.
pub fn backward(params: &Params, arch: &Arch, fwd: &Forward, dlogits: &Matrix) -> Result<Params> {
    let mut g = params.zeros_like();
    let dhidden = match (&params.head, &mut g.head) {
        (HeadParams::Linear { wu }, HeadParams::Linear { wu: gwu }) => {
            acc_at_b(gwu, &fwd.hidden, dlogits)?;
            mm(dlogits, Trans::No, wu, Trans::Yes)?
        }
        (
            HeadParams::Mlp { w1, w2, .. },
            HeadParams::Mlp {
                w1: gw1,
                b1: gb1,
                w2: gw2,
                b2: gb2,
            },
        ) => {
            let act = fwd.head_act.as_ref().expect("mlp head caches activations");
            let pre = fwd.head_pre.as_ref().expect("mlp head caches preactivations");
            acc_at_b(gw2, act, dlogits)?;
            acc_col_sums(gb2, dlogits);
            let mut dpre = mm(dlogits, Trans::No, w2, Trans::Yes)?;
            for (x, &p) in dpre.data_mut().iter_mut().zip(pre.data()) {
                if p <= 0.0 {
                    *x = 0.0;
                }
            }
            acc_at_b(gw1, &fwd.hidden, &dpre)?;
            acc_col_sums(gb1, &dpre);
            mm(&dpre, Trans::No, w1, Trans::Yes)?
        }
        _ => unreachable!("gradient buffers mirror parameters"),
    };
    let mut dx = ln_backward(&dhidden, &fwd.lnf, &params.lnf_g, &mut g.lnf_g, &mut g.lnf_b);
    for l in (0..arch.n_layers).rev() {
        dx = block_backward(&params.blocks[l], &mut g.blocks[l], arch, &fwd.blocks[l], &dx)?;
    }
    for (b, seq) in fwd.tokens.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            let src = dx.row(b * SEQ_LEN + t);
            g.embed.row_mut(tok).iter_mut().zip(src).for_each(|(o, x)| *o += x);
            g.pos.row_mut(t).iter_mut().zip(src).for_each(|(o, x)| *o += x);
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::cross_entropy;

    fn arch(head_type: HeadType) -> Arch {
        Arch {
            vocab: 7,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            mlp_width: 12,
            head_type,
        }
    }

    fn loss(params: &Params, arch: &Arch, tokens: &[[usize; SEQ_LEN]], labels: &[usize]) -> f64 {
        let f = forward(params, arch, tokens).unwrap();
        cross_entropy(&f.logits, labels).unwrap().0
    }

    fn check_gradients(head_type: HeadType) {
        let arch = arch(head_type);
        let mut r = rng::seeded(11);
        let mut params = Params::init(&arch, &mut r);
        // move gains and biases off their initial values so they are exercised
        for t in params.tensors_mut() {
            if t.rows() == 1 {
                let noise = rng::gaussian_matrix(&mut r, 1, t.cols(), 0.3);
                t.add_scaled(&noise, 1.0).unwrap();
            }
        }
        let tokens = [[0, 5, 3, 6], [4, 5, 1, 6], [2, 5, 2, 6]];
        let labels = [1, 4, 0];
        let f = forward(&params, &arch, &tokens).unwrap();
        let (_, dlogits) = cross_entropy(&f.logits, &labels).unwrap();
        let g = backward(&params, &arch, &f, &dlogits).unwrap();
        let step = 1e-5;
        let grads: Vec<Matrix> = g.tensors().into_iter().map(|(t, _)| t.clone()).collect();
        for (ti, grad) in grads.iter().enumerate() {
            for idx in 0..grad.data().len() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data_mut()[idx] += step;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data_mut()[idx] -= step;
                let fd = (loss(&plus, &arch, &tokens, &labels) - loss(&minus, &arch, &tokens, &labels))
                    / (2.0 * step);
                let an = grad.data()[idx];
                assert!(
                    (fd - an).abs() <= 1e-3 * an.abs().max(1e-4),
                    "tensor {ti} entry {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn linear_head_gradients_match_finite_differences() {
        check_gradients(HeadType::LinearUnembed);
    }

    #[test]
    fn mlp_head_gradients_match_finite_differences() {
        check_gradients(HeadType::MlpHead);
    }

    #[test]
    fn last_position_is_causal() {
        // changing only the last token must not change earlier-position
        // contributions; changing the first token must change the output
        let arch = arch(HeadType::LinearUnembed);
        let params = Params::init(&arch, &mut rng::seeded(1));
        let a = forward(&params, &arch, &[[0, 5, 3, 6]]).unwrap().hidden;
        let b = forward(&params, &arch, &[[1, 5, 3, 6]]).unwrap().hidden;
        assert_ne!(a, b);
        assert_eq!(a.shape(), (1, 8));
    }

    #[test]
    fn decay_mask_covers_matrices_only() {
        let arch = arch(HeadType::MlpHead);
        let params = Params::init(&arch, &mut rng::seeded(1));
        for (t, decay) in params.tensors() {
            assert_eq!(decay, t.rows() > 1, "{:?}", t.shape());
        }
        assert_eq!(params.tensors().len(), params.clone().tensors_mut().len());
    }
}
