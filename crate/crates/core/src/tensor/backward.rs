//! Reverse-mode differentiation. `backward` walks the graph once in reverse
//! topological order and accumulates analytic gradients into each node that
//! requires them.

use std::collections::HashSet;

use super::linalg::{for_each_disjoint, gemm, gemm_nt};
use super::ops::{axis_extents, col2im_accumulate, gelu_grad, im2col, permute_data, Op};
use super::{f, Element, Tensor};
use crate::error::{Error, Result};

impl<E: Element> Tensor<E> {
    /// Post-order over the requires-grad subgraph: parents before children.
    fn topo_order(&self) -> Vec<Tensor<E>> {
        enum Visit<E: Element> {
            Enter(Tensor<E>),
            Exit(Tensor<E>),
        }
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![Visit::Enter(self.clone())];
        while let Some(v) = stack.pop() {
            match v {
                Visit::Enter(t) => {
                    if !seen.insert(t.id()) {
                        continue;
                    }
                    stack.push(Visit::Exit(t.clone()));
                    for p in t.op().parents() {
                        if p.requires_grad() {
                            stack.push(Visit::Enter(p));
                        }
                    }
                }
                Visit::Exit(t) => order.push(t),
            }
        }
        order
    }

    /// Run the backward pass seeded with ones. Leaf gradients remain
    /// available through [`Tensor::grad`]; intermediate gradients are
    /// dropped as soon as they have been propagated.
    pub fn backward(&self) -> Result<()> {
        if !self.requires_grad() {
            return Err(Error::Config(
                "backward: tensor does not require gradients".into(),
            ));
        }
        let order = self.topo_order();
        self.accumulate_grad(&vec![E::one(); self.numel()]);
        for node in order.iter().rev() {
            if matches!(node.op(), Op::Leaf) {
                continue;
            }
            let g = node
                .take_node_grad()
                .expect("non-leaf grad missing in reverse topological order");
            propagate(node, &g)?;
        }
        Ok(())
    }
}

fn propagate<E: Element>(node: &Tensor<E>, g: &[E]) -> Result<()> {
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                b.accumulate_grad(g);
            }
        }
        Op::Sub(a, b) => {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                b.accumulate_grad(&neg);
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let bd = b.data();
                let da: Vec<E> = g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect();
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let ad = a.data();
                let db: Vec<E> = g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect();
                b.accumulate_grad(&db);
            }
        }
        Op::Div(a, b) => {
            let bd = b.data();
            if a.requires_grad() {
                let da: Vec<E> = g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv / bv).collect();
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let ad = a.data();
                let db: Vec<E> = g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                b.accumulate_grad(&db);
            }
        }
        Op::Maximum(a, b) => {
            let ad = a.data();
            let bd = b.data();
            if a.requires_grad() {
                let da: Vec<E> = g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&gv, (&av, &bv))| if av >= bv { gv } else { E::zero() })
                    .collect();
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let db: Vec<E> = g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&gv, (&av, &bv))| if av >= bv { E::zero() } else { gv })
                    .collect();
                b.accumulate_grad(&db);
            }
        }
        Op::Affine { x, mul } => {
            if x.requires_grad() {
                let dx: Vec<E> = g.iter().map(|&gv| gv * *mul).collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Relu(x) => {
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<E> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| if xv > E::zero() { gv } else { E::zero() })
                    .collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Gelu(x) => {
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<E> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Sigmoid(x) => {
            if x.requires_grad() {
                let yd = node.data();
                let dx: Vec<E> = g
                    .iter()
                    .zip(yd.iter())
                    .map(|(&gv, &yv)| gv * yv * (E::one() - yv))
                    .collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Softplus(x) => {
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<E> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| gv * super::ops::sigmoid_forward(xv))
                    .collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Exp(x) => {
            if x.requires_grad() {
                let yd = node.data();
                let dx: Vec<E> = g.iter().zip(yd.iter()).map(|(&gv, &yv)| gv * yv).collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Ln(x) => {
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<E> = g.iter().zip(xd.iter()).map(|(&gv, &xv)| gv / xv).collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Abs(x) => {
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<E> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| {
                        if xv > E::zero() {
                            gv
                        } else if xv < E::zero() {
                            -gv
                        } else {
                            E::zero()
                        }
                    })
                    .collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Sqrt(x) => {
            if x.requires_grad() {
                let yd = node.data();
                let half: E = f(0.5);
                let dx: Vec<E> = g
                    .iter()
                    .zip(yd.iter())
                    .map(|(&gv, &yv)| gv * half / yv)
                    .collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Tanh(x) => {
            if x.requires_grad() {
                let yd = node.data();
                let dx: Vec<E> = g
                    .iter()
                    .zip(yd.iter())
                    .map(|(&gv, &yv)| gv * (E::one() - yv * yv))
                    .collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Sin(x) => {
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<E> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| gv * xv.cos())
                    .collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Cos(x) => {
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<E> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| -gv * xv.sin())
                    .collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::AddBias { x, bias } => {
            if x.requires_grad() {
                x.accumulate_grad(g);
            }
            if bias.requires_grad() {
                let block = bias.numel();
                let mut db = vec![E::zero(); block];
                for chunk in g.chunks(block) {
                    for (d, &gv) in db.iter_mut().zip(chunk) {
                        *d = *d + gv;
                    }
                }
                bias.accumulate_grad(&db);
            }
        }
        Op::Matmul { a, b, batch, m, k, n } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            if a.requires_grad() {
                let bd = b.data();
                let mut da = vec![E::zero(); batch * m * k];
                for i in 0..batch {
                    gemm_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &bd[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let ad = a.data();
                let mut db = vec![E::zero(); batch * k * n];
                let mut at = vec![E::zero(); m * k];
                for i in 0..batch {
                    let asl = &ad[i * m * k..(i + 1) * m * k];
                    for r in 0..m {
                        for c in 0..k {
                            at[c * m + r] = asl[r * k + c];
                        }
                    }
                    gemm(
                        &at,
                        &g[i * m * n..(i + 1) * m * n],
                        k,
                        m,
                        n,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                b.accumulate_grad(&db);
            }
        }
        Op::Conv2d { x, w, bias, stride, pad } => {
            conv2d_backward(node, g, x, w, bias.as_ref(), *stride, *pad)?;
        }
        Op::Upsample2x(x) => {
            if x.requires_grad() {
                let s = x.shape();
                let (bc, h, wd) = (s[0] * s[1], s[2], s[3]);
                let mut dx = vec![E::zero(); x.numel()];
                for p in 0..bc {
                    let src = &g[p * 4 * h * wd..(p + 1) * 4 * h * wd];
                    let dst = &mut dx[p * h * wd..(p + 1) * h * wd];
                    for y in 0..h {
                        for xx in 0..wd {
                            let base = 2 * y * 2 * wd + 2 * xx;
                            dst[y * wd + xx] = src[base]
                                + src[base + 1]
                                + src[base + 2 * wd]
                                + src[base + 2 * wd + 1];
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::Softmax { x, axis } => {
            if x.requires_grad() {
                let yd = node.data();
                let (outer, len, inner) = axis_extents(node.shape(), *axis);
                let mut dx = vec![E::zero(); x.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + j;
                        let mut dot = E::zero();
                        for l in 0..len {
                            dot = dot + g[idx(l)] * yd[idx(l)];
                        }
                        for l in 0..len {
                            dx[idx(l)] = yd[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::LayerNorm { x, gamma, beta, axis, eps } => {
            layer_norm_backward(g, x, gamma, beta, *axis, *eps)?;
        }
        Op::BatchNorm { x, gamma, beta, mean, inv_std, training } => {
            batch_norm_backward(g, x, gamma, beta, mean, inv_std, *training)?;
        }
        Op::Reshape(x) => {
            if x.requires_grad() {
                x.accumulate_grad(g);
            }
        }
        Op::Permute { x, perm } => {
            if x.requires_grad() {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let dx = permute_data(g, node.shape(), &inv);
                x.accumulate_grad(&dx);
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, _, inner) = axis_extents(node.shape(), *axis);
            let mut offset = 0usize;
            let total_axis = node.shape()[*axis];
            for part in xs {
                let len = part.shape()[*axis];
                if part.requires_grad() {
                    let mut dp = vec![E::zero(); part.numel()];
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * len * inner;
                        dp[dst..dst + len * inner]
                            .copy_from_slice(&g[src..src + len * inner]);
                    }
                    part.accumulate_grad(&dp);
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start, len } => {
            if x.requires_grad() {
                let (outer, alen, inner) = axis_extents(x.shape(), *axis);
                let mut dx = vec![E::zero(); x.numel()];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            if x.requires_grad() {
                let (outer, len, inner) = axis_extents(x.shape(), *axis);
                let scale: E = if matches!(node.op(), Op::MeanAxis { .. }) {
                    f(1.0 / len as f64)
                } else {
                    E::one()
                };
                let mut dx = vec![E::zero(); x.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for j in 0..inner {
                            dx[base + j] = g[o * inner + j] * scale;
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::SumAll(x) => {
            if x.requires_grad() {
                let dx = vec![g[0]; x.numel()];
                x.accumulate_grad(&dx);
            }
        }
        Op::MeanAll(x) => {
            if x.requires_grad() {
                let scale: E = f(1.0 / x.numel() as f64);
                let dx = vec![g[0] * scale; x.numel()];
                x.accumulate_grad(&dx);
            }
        }
        Op::CrossEntropy { logits, labels, weights, ignore, weight_total } => {
            if logits.requires_grad() {
                let s = logits.shape();
                let (m, k) = (s[0], s[1]);
                let xd = logits.data();
                let gscale = g[0] / *weight_total;
                let mut dx = vec![E::zero(); m * k];
                for (i, &y) in labels.iter().enumerate() {
                    if y == *ignore {
                        continue;
                    }
                    let row = &xd[i * k..(i + 1) * k];
                    let mx = row.iter().fold(row[0], |a, &b| if b > a { b } else { a });
                    let mut denom = E::zero();
                    for &v in row {
                        denom = denom + (v - mx).exp();
                    }
                    let w = weights[y as usize];
                    for c in 0..k {
                        let p = (row[c] - mx).exp() / denom;
                        let delta = if c == y as usize { E::one() } else { E::zero() };
                        dx[i * k + c] = gscale * w * (p - delta);
                    }
                }
                logits.accumulate_grad(&dx);
            }
        }
        Op::MergePanels { preds, conf, batch, interval, stride } => {
            merge_backward(node, g, preds, conf.as_ref(), *batch, *interval, *stride)?;
        }
    }
    Ok(())
}

fn conv2d_backward<E: Element>(
    node: &Tensor<E>,
    g: &[E],
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<()> {
    let xs = x.shape();
    let ws = w.shape();
    let os = node.shape();
    let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (os[2], os[3]);
    let kdim = cin * kh * kw;
    let plane = oh * ow;

    if let Some(bt) = bias {
        if bt.requires_grad() {
            let mut db = vec![E::zero(); cout];
            for bi in 0..b {
                for co in 0..cout {
                    let base = (bi * cout + co) * plane;
                    let mut acc = E::zero();
                    for i in 0..plane {
                        acc = acc + g[base + i];
                    }
                    db[co] = db[co] + acc;
                }
            }
            bt.accumulate_grad(&db);
        }
    }

    if w.requires_grad() {
        let xd = x.data();
        let mut dw = vec![E::zero(); cout * kdim];
        let mut col = vec![E::zero(); kdim * plane];
        let mut scratch = vec![E::zero(); cout * kdim];
        for bi in 0..b {
            im2col(
                &xd[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                cin,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
                &mut col,
            );
            gemm_nt(
                &g[bi * cout * plane..(bi + 1) * cout * plane],
                &col,
                cout,
                plane,
                kdim,
                &mut scratch,
            );
            for (d, &s) in dw.iter_mut().zip(&scratch) {
                *d = *d + s;
            }
        }
        w.accumulate_grad(&dw);
    }

    if x.requires_grad() {
        let wv = w.data();
        let mut wt = vec![E::zero(); kdim * cout];
        for co in 0..cout {
            for kd in 0..kdim {
                wt[kd * cout + co] = wv[co * kdim + kd];
            }
        }
        let mut dx = vec![E::zero(); x.numel()];
        let heavy = b * cout * plane * kdim >= (1 << 18);
        for_each_disjoint(&mut dx, cin * h * wd, b, heavy, |bi, chunk| {
            let mut dcol = vec![E::zero(); kdim * plane];
            gemm(
                &wt,
                &g[bi * cout * plane..(bi + 1) * cout * plane],
                kdim,
                cout,
                plane,
                &mut dcol,
            );
            col2im_accumulate(&dcol, cin, h, wd, kh, kw, stride, pad, oh, ow, chunk);
        });
        x.accumulate_grad(&dx);
    }
    Ok(())
}

fn layer_norm_backward<E: Element>(
    g: &[E],
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    axis: usize,
    eps: E,
) -> Result<()> {
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let xd = x.data();
    let gd = gamma.data();
    let ln: E = f(len as f64);
    let mut dx = vec![E::zero(); x.numel()];
    let mut dgamma = vec![E::zero(); len];
    let mut dbeta = vec![E::zero(); len];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + j;
            let mut mean = E::zero();
            for l in 0..len {
                mean = mean + xd[idx(l)];
            }
            mean = mean / ln;
            let mut var = E::zero();
            for l in 0..len {
                let d = xd[idx(l)] - mean;
                var = var + d * d;
            }
            var = var / ln;
            let inv = E::one() / (var + eps).sqrt();
            let mut mean_h = E::zero();
            let mut mean_hx = E::zero();
            for l in 0..len {
                let xhat = (xd[idx(l)] - mean) * inv;
                let h = g[idx(l)] * gd[l];
                mean_h = mean_h + h;
                mean_hx = mean_hx + h * xhat;
                dgamma[l] = dgamma[l] + g[idx(l)] * xhat;
                dbeta[l] = dbeta[l] + g[idx(l)];
            }
            mean_h = mean_h / ln;
            mean_hx = mean_hx / ln;
            if x.requires_grad() {
                for l in 0..len {
                    let xhat = (xd[idx(l)] - mean) * inv;
                    let h = g[idx(l)] * gd[l];
                    dx[idx(l)] = inv * (h - mean_h - xhat * mean_hx);
                }
            }
        }
    }
    if x.requires_grad() {
        x.accumulate_grad(&dx);
    }
    if gamma.requires_grad() {
        gamma.accumulate_grad(&dgamma);
    }
    if beta.requires_grad() {
        beta.accumulate_grad(&dbeta);
    }
    Ok(())
}

fn batch_norm_backward<E: Element>(
    g: &[E],
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    mean: &[E],
    inv_std: &[E],
    training: bool,
) -> Result<()> {
    let s = x.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let n: E = f((b * hw) as f64);
    let xd = x.data();
    let gd = gamma.data();
    let mut dx = vec![E::zero(); x.numel()];
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for ci in 0..c {
        let (m, inv, gc) = (mean[ci], inv_std[ci], gd[ci]);
        let mut sum_h = E::zero();
        let mut sum_hx = E::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let xhat = (xd[base + i] - m) * inv;
                let gv = g[base + i];
                sum_h = sum_h + gv * gc;
                sum_hx = sum_hx + gv * gc * xhat;
                dgamma[ci] = dgamma[ci] + gv * xhat;
                dbeta[ci] = dbeta[ci] + gv;
            }
        }
        if x.requires_grad() {
            let (mean_h, mean_hx) = if training {
                (sum_h / n, sum_hx / n)
            } else {
                (E::zero(), E::zero())
            };
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for i in 0..hw {
                    let xhat = (xd[base + i] - m) * inv;
                    let h = g[base + i] * gc;
                    dx[base + i] = inv * (h - mean_h - xhat * mean_hx);
                }
            }
        }
    }
    if x.requires_grad() {
        x.accumulate_grad(&dx);
    }
    if gamma.requires_grad() {
        gamma.accumulate_grad(&dgamma);
    }
    if beta.requires_grad() {
        beta.accumulate_grad(&dbeta);
    }
    Ok(())
}

fn merge_backward<E: Element>(
    node: &Tensor<E>,
    g: &[E],
    preds: &Tensor<E>,
    conf: Option<&Tensor<E>>,
    batch: usize,
    interval: usize,
    stride: usize,
) -> Result<()> {
    let s = preds.shape();
    let n = s[0] / batch;
    let (c, h) = (s[1], s[2]);
    let we = n * stride;
    let pd = preds.data();
    let conf_data = conf.map(|t| t.data());
    let out = node.data();
    let mut dpred = vec![E::zero(); preds.numel()];
    let mut dconf = conf.map(|t| vec![E::zero(); t.numel()]);
    let mut den = vec![0.0f64; h * we];
    for b in 0..batch {
        den.fill(0.0);
        for p in 0..n {
            let conf_base = (b * n + p) * h * interval;
            for j in 0..interval {
                let x = (p * stride + j) % we;
                for y in 0..h {
                    let w = match &conf_data {
                        Some(cd) => cd[conf_base + y * interval + j].to_f64x(),
                        None => 1.0,
                    };
                    den[y * we + x] += w;
                }
            }
        }
        for p in 0..n {
            let panel = (b * n + p) * c * h * interval;
            let conf_base = (b * n + p) * h * interval;
            for j in 0..interval {
                let x = (p * stride + j) % we;
                for y in 0..h {
                    let d = den[y * we + x];
                    let w = match &conf_data {
                        Some(cd) => cd[conf_base + y * interval + j].to_f64x(),
                        None => 1.0,
                    };
                    let mut conf_acc = 0.0f64;
                    for ci in 0..c {
                        let gv = g[((b * c + ci) * h + y) * we + x].to_f64x();
                        dpred[panel + (ci * h + y) * interval + j] = dpred
                            [panel + (ci * h + y) * interval + j]
                            + f::<E>(gv * w / d);
                        if dconf.is_some() {
                            let pv = pd[panel + (ci * h + y) * interval + j].to_f64x();
                            let ov = out[((b * c + ci) * h + y) * we + x].to_f64x();
                            conf_acc += gv * (pv - ov) / d;
                        }
                    }
                    if let Some(dc) = dconf.as_mut() {
                        dc[conf_base + y * interval + j] =
                            dc[conf_base + y * interval + j] + f::<E>(conf_acc);
                    }
                }
            }
        }
    }
    if preds.requires_grad() {
        preds.accumulate_grad(&dpred);
    }
    if let (Some(cf), Some(dc)) = (conf, dconf) {
        if cf.requires_grad() {
            cf.accumulate_grad(&dc);
        }
    }
    Ok(())
}
