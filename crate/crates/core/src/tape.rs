//! Reverse-mode differentiation over a flat op tape.
//!
//! Every operation appends one node holding its output tensor and enough
//! of its provenance to run the exact reverse sweep. `backward` walks the
//! nodes in reverse execution order and accumulates gradients into the
//! leaves that were registered as parameters.
//!
//! Every op validates shapes up front and checks its output for NaN/Inf;
//! a non-finite value fails immediately with the op's name.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::tensor::{Real, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    BmmNt { a: Var, b: Var, scale: Real },
    Bmm { a: Var, b: Var },
    Add { a: Var, b: Var },
    MulElem { a: Var, b: Var },
    Scale { x: Var, c: Real },
    Relu { x: Var },
    MaskedSoftmax { x: Var, key_valid: Rc<Vec<bool>>, query_valid: Rc<Vec<bool>> },
    MaskedMean { x: Var, valid: Rc<Vec<bool>> },
    ConcatLast { a: Var, b: Var, da: usize, db: usize },
    BroadcastExpand { s: Var, m: usize },
    RowMask { x: Var, mask: Rc<Vec<bool>> },
    ColScale { x: Var, w: Var },
    Gather { table: Var, idx: Rc<Vec<usize>> },
    GatherSlots { x: Var, slots: Rc<Vec<Option<usize>>> },
    ScatterSlots { x: Var, pos: Rc<Vec<usize>> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Reshape { x: Var },
    Sum { x: Var },
    MeanAbs { a: Var, b: Var },
    RmsNorm { x: Var, eps: Real },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one reverse sweep, keyed by parameter slot.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: usize) -> Option<&Tensor> {
        self.by_param.get(&key)
    }

    /// Add these gradients into `params[key].grad`. Repeated calls without
    /// zeroing accumulate, which is the contract training relies on.
    pub fn accumulate_into(&self, params: &mut [&mut Parameter]) -> Result<()> {
        for (&key, grad) in &self.by_param {
            let p = params
                .get_mut(key)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter slot {}", key)))?;
            if p.grad.shape() != grad.shape() {
                return Err(Error::shape(
                    "accumulate-grads",
                    format!("slot {}: {:?} vs {:?}", key, p.grad.shape(), grad.shape()),
                ));
            }
            for (g, d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
                *g += *d;
            }
        }
        Ok(())
    }
}

/// Flat record of executed ops; owns every intermediate tensor.
pub struct Tape {
    nodes: Vec<Node>,
    score_entries: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), score_entries: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Attention-cost ledger: number of attention-score entries formed so
    /// far on this tape. Incremented by the model when it builds scores.
    pub fn score_entries(&self) -> u64 {
        self.score_entries
    }

    pub fn add_score_entries(&mut self, n: u64) {
        self.score_entries += n;
    }

    fn push(&mut self, op_name: &'static str, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; participates in forward only.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", Op::Leaf { param: None }, value)
    }

    /// Parameter input; gradients are collected under `key`.
    pub fn param(&mut self, key: usize, value: Tensor) -> Result<Var> {
        self.push("param", Op::Leaf { param: Some(key) }, value)
    }

    /// Affine map over the trailing axis: y = x W + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.rank() != 2 {
            return Err(Error::shape("linear", format!("weight must be 2-d, got {:?}", wt.shape())));
        }
        let (din, dout) = (wt.shape()[0], wt.shape()[1]);
        if xt.rank() < 1 || xt.last_dim()? != din {
            return Err(Error::shape(
                "linear",
                format!("input {:?} incompatible with weight {:?}", xt.shape(), wt.shape()),
            ));
        }
        if let Some(bv) = b {
            let bt = self.value(bv);
            if bt.shape() != [dout] {
                return Err(Error::shape("linear", format!("bias {:?}, want [{}]", bt.shape(), dout)));
            }
        }
        let rows = xt.lead_count()?;
        let mut out_shape = xt.shape().to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let mut y = vec![0.0 as Real; rows * dout];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for r in 0..rows {
                let yrow = &mut y[r * dout..(r + 1) * dout];
                if let Some(bv) = b {
                    yrow.copy_from_slice(self.nodes[bv.0].value.data());
                }
                for i in 0..din {
                    let xi = xd[r * din + i];
                    if xi != 0.0 {
                        let wrow = &wd[i * dout..(i + 1) * dout];
                        for (yv, wv) in yrow.iter_mut().zip(wrow) {
                            *yv += xi * *wv;
                        }
                    }
                }
            }
        }
        self.push("linear", Op::Linear { x, w, b }, Tensor::new(out_shape, y)?)
    }

    /// Batched matmul with the second factor transposed: [B,M,K] x [B,N,K]
    /// -> [B,M,N], scaled by `scale`.
    pub fn bmm_nt(&mut self, a: Var, b: Var, scale: Real) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 3 || bt.rank() != 3 || at.shape()[0] != bt.shape()[0] || at.shape()[2] != bt.shape()[2] {
            return Err(Error::shape(
                "bmm_nt",
                format!("{:?} x {:?}", at.shape(), bt.shape()),
            ));
        }
        let (bs, m, k) = (at.shape()[0], at.shape()[1], at.shape()[2]);
        let n = bt.shape()[1];
        let mut y = vec![0.0 as Real; bs * m * n];
        let (ad, bd) = (at.data(), bt.data());
        for bi in 0..bs {
            let abase = bi * m * k;
            let bbase = bi * n * k;
            let ybase = bi * m * n;
            for i in 0..m {
                let arow = &ad[abase + i * k..abase + (i + 1) * k];
                for j in 0..n {
                    let brow = &bd[bbase + j * k..bbase + (j + 1) * k];
                    let dot: Real = arow.iter().zip(brow).map(|(x, z)| x * z).sum();
                    y[ybase + i * n + j] = scale * dot;
                }
            }
        }
        self.push("bmm_nt", Op::BmmNt { a, b, scale }, Tensor::new(vec![bs, m, n], y)?)
    }

    /// Batched matmul: [B,M,N] x [B,N,K] -> [B,M,K].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 3 || bt.rank() != 3 || at.shape()[0] != bt.shape()[0] || at.shape()[2] != bt.shape()[1] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", at.shape(), bt.shape())));
        }
        let (bs, m, n) = (at.shape()[0], at.shape()[1], at.shape()[2]);
        let k = bt.shape()[2];
        let mut y = vec![0.0 as Real; bs * m * k];
        let (ad, bd) = (at.data(), bt.data());
        for bi in 0..bs {
            let abase = bi * m * n;
            let bbase = bi * n * k;
            let ybase = bi * m * k;
            for i in 0..m {
                let yrow = &mut y[ybase + i * k..ybase + (i + 1) * k];
                for j in 0..n {
                    let aij = ad[abase + i * n + j];
                    if aij != 0.0 {
                        let brow = &bd[bbase + j * k..bbase + (j + 1) * k];
                        for (yv, bv) in yrow.iter_mut().zip(brow) {
                            *yv += aij * *bv;
                        }
                    }
                }
            }
        }
        self.push("bmm", Op::Bmm { a, b }, Tensor::new(vec![bs, m, k], y)?)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", at.shape(), bt.shape())));
        }
        let y = Tensor::new(
            at.shape().to_vec(),
            at.data().iter().zip(bt.data()).map(|(x, z)| x + z).collect(),
        )?;
        self.push("add", Op::Add { a, b }, y)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape("mul_elem", format!("{:?} vs {:?}", at.shape(), bt.shape())));
        }
        let y = Tensor::new(
            at.shape().to_vec(),
            at.data().iter().zip(bt.data()).map(|(x, z)| x * z).collect(),
        )?;
        self.push("mul_elem", Op::MulElem { a, b }, y)
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Result<Var> {
        let xt = self.value(x);
        let y = Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|v| c * v).collect())?;
        self.push("scale", Op::Scale { x, c }, y)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let y = Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|&v| v.max(0.0)).collect())?;
        self.push("relu", Op::Relu { x }, y)
    }

    /// Two-layer feed-forward: linear -> ReLU -> linear, no biases.
    pub fn ffn(&mut self, x: Var, w1: Var, w2: Var) -> Result<Var> {
        let h = self.linear(x, w1, None)?;
        let h = self.relu(h)?;
        self.linear(h, w2, None)
    }

    /// Row-wise softmax over the last axis of `[B, M, N]` scores.
    ///
    /// `key_valid` (length B*N) zeroes masked key columns exactly; each row
    /// renormalizes over its valid keys. Rows whose query is masked out
    /// (`query_valid`, length B*M) are defined as uniform over the valid
    /// keys and contribute no gradient; downstream masking discards them.
    pub fn masked_softmax(&mut self, x: Var, key_valid: Rc<Vec<bool>>, query_valid: Rc<Vec<bool>>) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(Error::shape("masked_softmax", format!("want [B,M,N], got {:?}", xt.shape())));
        }
        let (bs, m, n) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        if key_valid.len() != bs * n || query_valid.len() != bs * m {
            return Err(Error::shape(
                "masked_softmax",
                format!("masks {}x{} for scores {:?}", query_valid.len(), key_valid.len(), xt.shape()),
            ));
        }
        let xd = xt.data();
        let mut y = vec![0.0 as Real; bs * m * n];
        for bi in 0..bs {
            let keys = &key_valid[bi * n..(bi + 1) * n];
            let n_valid = keys.iter().filter(|&&v| v).count();
            if n_valid == 0 {
                return Err(Error::invalid("masked_softmax: a batch slice has zero valid keys"));
            }
            for i in 0..m {
                let row = &xd[(bi * m + i) * n..(bi * m + i + 1) * n];
                let out = &mut y[(bi * m + i) * n..(bi * m + i + 1) * n];
                if !query_valid[bi * m + i] {
                    let u = 1.0 / n_valid as Real;
                    for (o, &kv) in out.iter_mut().zip(keys) {
                        *o = if kv { u } else { 0.0 };
                    }
                    continue;
                }
                let mut mx = Real::NEG_INFINITY;
                for (v, &kv) in row.iter().zip(keys) {
                    if kv && *v > mx {
                        mx = *v;
                    }
                }
                let mut sum = 0.0;
                for j in 0..n {
                    if keys[j] {
                        let e = (row[j] - mx).exp();
                        out[j] = e;
                        sum += e;
                    }
                }
                for o in out.iter_mut() {
                    *o /= sum;
                }
            }
        }
        self.push(
            "masked_softmax",
            Op::MaskedSoftmax { x, key_valid, query_valid },
            Tensor::new(vec![bs, m, n], y)?,
        )
    }

    /// Mean over valid slots of `[P, M, D]` -> `[P, D]`; padded slots
    /// contribute neither value nor gradient.
    pub fn masked_mean(&mut self, x: Var, valid: Rc<Vec<bool>>) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(Error::shape("masked_mean", format!("want [P,M,D], got {:?}", xt.shape())));
        }
        let (p, m, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        if valid.len() != p * m {
            return Err(Error::shape("masked_mean", format!("mask len {} for {:?}", valid.len(), xt.shape())));
        }
        let xd = xt.data();
        let mut y = vec![0.0 as Real; p * d];
        for pi in 0..p {
            let cnt = valid[pi * m..(pi + 1) * m].iter().filter(|&&v| v).count();
            if cnt == 0 {
                return Err(Error::invalid("masked_mean: a part has zero valid slots"));
            }
            let inv = 1.0 / cnt as Real;
            for mi in 0..m {
                if valid[pi * m + mi] {
                    let row = &xd[(pi * m + mi) * d..(pi * m + mi + 1) * d];
                    let orow = &mut y[pi * d..(pi + 1) * d];
                    for (o, v) in orow.iter_mut().zip(row) {
                        *o += inv * *v;
                    }
                }
            }
        }
        self.push("masked_mean", Op::MaskedMean { x, valid }, Tensor::new(vec![p, d], y)?)
    }

    /// Concatenate along the trailing axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != bt.rank()
            || at.rank() < 1
            || at.shape()[..at.rank() - 1] != bt.shape()[..bt.rank() - 1]
        {
            return Err(Error::shape("concat_last", format!("{:?} vs {:?}", at.shape(), bt.shape())));
        }
        let (da, db) = (at.last_dim()?, bt.last_dim()?);
        let rows = at.lead_count()?;
        let mut shape = at.shape().to_vec();
        *shape.last_mut().unwrap() = da + db;
        let mut y = vec![0.0 as Real; rows * (da + db)];
        let (ad, bd) = (at.data(), bt.data());
        for r in 0..rows {
            y[r * (da + db)..r * (da + db) + da].copy_from_slice(&ad[r * da..(r + 1) * da]);
            y[r * (da + db) + da..(r + 1) * (da + db)].copy_from_slice(&bd[r * db..(r + 1) * db]);
        }
        self.push("concat_last", Op::ConcatLast { a, b, da, db }, Tensor::new(shape, y)?)
    }

    /// Repeat `[P, D]` rows into `[P, M, D]`; backward sums over M.
    pub fn broadcast_expand(&mut self, s: Var, m: usize) -> Result<Var> {
        let st = self.value(s);
        if st.rank() != 2 {
            return Err(Error::shape("broadcast_expand", format!("want [P,D], got {:?}", st.shape())));
        }
        let (p, d) = (st.shape()[0], st.shape()[1]);
        let sd = st.data();
        let mut y = vec![0.0 as Real; p * m * d];
        for pi in 0..p {
            let row = &sd[pi * d..(pi + 1) * d];
            for mi in 0..m {
                y[(pi * m + mi) * d..(pi * m + mi + 1) * d].copy_from_slice(row);
            }
        }
        self.push("broadcast_expand", Op::BroadcastExpand { s, m }, Tensor::new(vec![p, m, d], y)?)
    }

    /// Zero whole rows over the trailing axis: mask length = lead count.
    pub fn row_mask(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let xt = self.value(x);
        let rows = xt.lead_count()?;
        let d = xt.last_dim()?;
        if mask.len() != rows {
            return Err(Error::shape("row_mask", format!("mask len {} for {:?}", mask.len(), xt.shape())));
        }
        let xd = xt.data();
        let mut y = vec![0.0 as Real; rows * d];
        for r in 0..rows {
            if mask[r] {
                y[r * d..(r + 1) * d].copy_from_slice(&xd[r * d..(r + 1) * d]);
            }
        }
        self.push("row_mask", Op::RowMask { x, mask }, Tensor::new(xt.shape().to_vec(), y)?)
    }

    /// Scale the trailing axis elementwise by a learnable vector `w`.
    pub fn col_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let d = xt.last_dim()?;
        if wt.shape() != [d] {
            return Err(Error::shape("col_scale", format!("{:?} vs {:?}", xt.shape(), wt.shape())));
        }
        let (xd, wd) = (xt.data(), wt.data());
        let y = Tensor::new(
            xt.shape().to_vec(),
            xd.iter().enumerate().map(|(i, v)| v * wd[i % d]).collect(),
        )?;
        self.push("col_scale", Op::ColScale { x, w }, y)
    }

    /// Look entries up from a rank-1 `table`; backward scatter-adds.
    pub fn gather(&mut self, table: Var, idx: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 1 {
            return Err(Error::shape("gather", format!("table must be rank 1, got {:?}", tt.shape())));
        }
        let numel: usize = shape.iter().product();
        if idx.len() != numel {
            return Err(Error::shape("gather", format!("{} indices for shape {:?}", idx.len(), shape)));
        }
        let td = tt.data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= td.len()) {
            return Err(Error::invalid(format!("gather index {} out of table of {}", bad, td.len())));
        }
        let y = Tensor::new(shape, idx.iter().map(|&i| td[i]).collect())?;
        self.push("gather", Op::Gather { table, idx }, y)
    }

    /// Lay `[N, D]` rows out into `[P, M, D]` slots; `None` slots are
    /// zero-padding. Realizes the partition layout on the tape.
    pub fn gather_slots(&mut self, x: Var, slots: Rc<Vec<Option<usize>>>, p: usize, m: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(Error::shape("gather_slots", format!("want [N,D], got {:?}", xt.shape())));
        }
        if slots.len() != p * m {
            return Err(Error::shape("gather_slots", format!("{} slots for {}x{}", slots.len(), p, m)));
        }
        let (n, d) = (xt.shape()[0], xt.shape()[1]);
        let xd = xt.data();
        let mut y = vec![0.0 as Real; p * m * d];
        for (si, slot) in slots.iter().enumerate() {
            if let Some(node) = *slot {
                if node >= n {
                    return Err(Error::invalid(format!("slot node {} out of {}", node, n)));
                }
                y[si * d..(si + 1) * d].copy_from_slice(&xd[node * d..(node + 1) * d]);
            }
        }
        self.push("gather_slots", Op::GatherSlots { x, slots }, Tensor::new(vec![p, m, d], y)?)
    }

    /// Read node rows back out of `[P, M, D]`: `pos[node]` is the flat
    /// slot index `p * M + m` holding that node.
    pub fn scatter_slots(&mut self, x: Var, pos: Rc<Vec<usize>>) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(Error::shape("scatter_slots", format!("want [P,M,D], got {:?}", xt.shape())));
        }
        let (p, m, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let n = pos.len();
        if let Some(&bad) = pos.iter().find(|&&s| s >= p * m) {
            return Err(Error::invalid(format!("slot position {} out of {}x{}", bad, p, m)));
        }
        let xd = xt.data();
        let mut y = vec![0.0 as Real; n * d];
        for (node, &slot) in pos.iter().enumerate() {
            y[node * d..(node + 1) * d].copy_from_slice(&xd[slot * d..(slot + 1) * d]);
        }
        self.push("scatter_slots", Op::ScatterSlots { x, pos }, Tensor::new(vec![n, d], y)?)
    }

    /// `[B, M, H*dh]` -> `[B*H, M, dh]` for per-head attention.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 3 || xt.shape()[2] % heads != 0 {
            return Err(Error::shape(
                "split_heads",
                format!("{:?} not splittable into {} heads", xt.shape(), heads),
            ));
        }
        let (bs, m, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let dh = d / heads;
        let xd = xt.data();
        let mut y = vec![0.0 as Real; bs * m * d];
        for bi in 0..bs {
            for h in 0..heads {
                for mi in 0..m {
                    let src = (bi * m + mi) * d + h * dh;
                    let dst = ((bi * heads + h) * m + mi) * dh;
                    y[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        self.push("split_heads", Op::SplitHeads { x, heads }, Tensor::new(vec![bs * heads, m, dh], y)?)
    }

    /// Inverse of `split_heads`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 3 || xt.shape()[0] % heads != 0 {
            return Err(Error::shape(
                "merge_heads",
                format!("{:?} not mergeable from {} heads", xt.shape(), heads),
            ));
        }
        let (bh, m, dh) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let bs = bh / heads;
        let d = dh * heads;
        let xd = xt.data();
        let mut y = vec![0.0 as Real; bs * m * d];
        for bi in 0..bs {
            for h in 0..heads {
                for mi in 0..m {
                    let src = ((bi * heads + h) * m + mi) * dh;
                    let dst = (bi * m + mi) * d + h * dh;
                    y[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        self.push("merge_heads", Op::MergeHeads { x, heads }, Tensor::new(vec![bs, m, d], y)?)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let y = self.value(x).reshaped(shape)?;
        self.push("reshape", Op::Reshape { x }, y)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: Real = self.value(x).data().iter().sum();
        self.push("sum", Op::Sum { x }, Tensor::scalar(total))
    }

    /// Mean absolute deviation between two same-shape tensors; the
    /// subgradient of |.| at zero is taken as 0.
    pub fn mean_abs_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape("mean_abs_error", format!("{:?} vs {:?}", at.shape(), bt.shape())));
        }
        let n = at.numel() as Real;
        let total: Real = at.data().iter().zip(bt.data()).map(|(x, z)| (x - z).abs()).sum();
        self.push("mean_abs_error", Op::MeanAbs { a, b }, Tensor::scalar(total / n))
    }

    /// Row-wise RMS normalization over the trailing axis (optional
    /// stabilizer; off in the reference configuration).
    pub fn rms_norm(&mut self, x: Var, eps: Real) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim()?;
        let rows = xt.lead_count()?;
        let xd = xt.data();
        let mut y = vec![0.0 as Real; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let ms: Real = row.iter().map(|v| v * v).sum::<Real>() / d as Real;
            let inv = 1.0 / (ms + eps).sqrt();
            for (o, v) in y[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        self.push("rms_norm", Op::RmsNorm { x, eps }, Tensor::new(xt.shape().to_vec(), y)?)
    }

    /// Reverse sweep from a scalar `loss`, seeding d(loss)/d(loss) = `seed`.
    /// Returns gradients keyed by parameter slot.
    pub fn backward(&mut self, loss: Var, seed: Real) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![seed])?);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g); // keep for parameter collection
                }
                Op::Linear { x, w, b } => {
                    let dout = self.nodes[w.0].value.shape()[1];
                    let din = self.nodes[w.0].value.shape()[0];
                    let rows = self.nodes[x.0].value.lead_count()?;
                    let gd = g.data();
                    {
                        let wd = self.nodes[w.0].value.data();
                        let dx = Self::grad_slot(&mut grads, &self.nodes, x);
                        let dxd = dx.data_mut();
                        for r in 0..rows {
                            let grow = &gd[r * dout..(r + 1) * dout];
                            for ii in 0..din {
                                let wrow = &wd[ii * dout..(ii + 1) * dout];
                                let dot: Real = grow.iter().zip(wrow).map(|(a, c)| a * c).sum();
                                dxd[r * din + ii] += dot;
                            }
                        }
                    }
                    {
                        let xd = self.nodes[x.0].value.data().to_vec();
                        let dw = Self::grad_slot(&mut grads, &self.nodes, w);
                        let dwd = dw.data_mut();
                        for r in 0..rows {
                            let grow = &gd[r * dout..(r + 1) * dout];
                            for ii in 0..din {
                                let xi = xd[r * din + ii];
                                if xi != 0.0 {
                                    let drow = &mut dwd[ii * dout..(ii + 1) * dout];
                                    for (dv, gv) in drow.iter_mut().zip(grow) {
                                        *dv += xi * gv;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(bv) = b {
                        let db = Self::grad_slot(&mut grads, &self.nodes, bv);
                        let dbd = db.data_mut();
                        for r in 0..rows {
                            for o in 0..dout {
                                dbd[o] += gd[r * dout + o];
                            }
                        }
                    }
                }
                Op::BmmNt { a, b, scale } => {
                    let (bs, m, k) = {
                        let s = self.nodes[a.0].value.shape();
                        (s[0], s[1], s[2])
                    };
                    let n = self.nodes[b.0].value.shape()[1];
                    let gd = g.data();
                    {
                        let bd = self.nodes[b.0].value.data();
                        let da = Self::grad_slot(&mut grads, &self.nodes, a);
                        let dad = da.data_mut();
                        for bi in 0..bs {
                            for ii in 0..m {
                                let grow = &gd[(bi * m + ii) * n..(bi * m + ii + 1) * n];
                                let darow = &mut dad[(bi * m + ii) * k..(bi * m + ii + 1) * k];
                                for j in 0..n {
                                    let gv = scale * grow[j];
                                    if gv != 0.0 {
                                        let brow = &bd[(bi * n + j) * k..(bi * n + j + 1) * k];
                                        for (dv, bvv) in darow.iter_mut().zip(brow) {
                                            *dv += gv * bvv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let ad = self.nodes[a.0].value.data().to_vec();
                        let db = Self::grad_slot(&mut grads, &self.nodes, b);
                        let dbd = db.data_mut();
                        for bi in 0..bs {
                            for ii in 0..m {
                                let grow = &gd[(bi * m + ii) * n..(bi * m + ii + 1) * n];
                                let arow = &ad[(bi * m + ii) * k..(bi * m + ii + 1) * k];
                                for j in 0..n {
                                    let gv = scale * grow[j];
                                    if gv != 0.0 {
                                        let dbrow = &mut dbd[(bi * n + j) * k..(bi * n + j + 1) * k];
                                        for (dv, av) in dbrow.iter_mut().zip(arow) {
                                            *dv += gv * av;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Bmm { a, b } => {
                    let (bs, m, n) = {
                        let s = self.nodes[a.0].value.shape();
                        (s[0], s[1], s[2])
                    };
                    let k = self.nodes[b.0].value.shape()[2];
                    let gd = g.data();
                    {
                        let bd = self.nodes[b.0].value.data();
                        let da = Self::grad_slot(&mut grads, &self.nodes, a);
                        let dad = da.data_mut();
                        for bi in 0..bs {
                            for ii in 0..m {
                                let grow = &gd[(bi * m + ii) * k..(bi * m + ii + 1) * k];
                                for j in 0..n {
                                    let brow = &bd[(bi * n + j) * k..(bi * n + j + 1) * k];
                                    let dot: Real = grow.iter().zip(brow).map(|(x, z)| x * z).sum();
                                    dad[(bi * m + ii) * n + j] += dot;
                                }
                            }
                        }
                    }
                    {
                        let ad = self.nodes[a.0].value.data().to_vec();
                        let db = Self::grad_slot(&mut grads, &self.nodes, b);
                        let dbd = db.data_mut();
                        for bi in 0..bs {
                            for ii in 0..m {
                                let grow = &gd[(bi * m + ii) * k..(bi * m + ii + 1) * k];
                                for j in 0..n {
                                    let av = ad[(bi * m + ii) * n + j];
                                    if av != 0.0 {
                                        let dbrow = &mut dbd[(bi * n + j) * k..(bi * n + j + 1) * k];
                                        for (dv, gv) in dbrow.iter_mut().zip(grow) {
                                            *dv += av * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    Self::grad_add(&mut grads, &self.nodes, a, g.data(), |v| v);
                    Self::grad_add(&mut grads, &self.nodes, b, g.data(), |v| v);
                }
                Op::MulElem { a, b } => {
                    let bd = self.nodes[b.0].value.data().to_vec();
                    {
                        let da = Self::grad_slot(&mut grads, &self.nodes, a);
                        for (i, dv) in da.data_mut().iter_mut().enumerate() {
                            *dv += g.data()[i] * bd[i];
                        }
                    }
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let db = Self::grad_slot(&mut grads, &self.nodes, b);
                    for (i, dv) in db.data_mut().iter_mut().enumerate() {
                        *dv += g.data()[i] * ad[i];
                    }
                }
                Op::Scale { x, c } => {
                    Self::grad_add(&mut grads, &self.nodes, x, g.data(), |v| c * v);
                }
                Op::Relu { x } => {
                    let xd = self.nodes[x.0].value.data().to_vec();
                    let dx = Self::grad_slot(&mut grads, &self.nodes, x);
                    for (i, dv) in dx.data_mut().iter_mut().enumerate() {
                        if xd[i] > 0.0 {
                            *dv += g.data()[i];
                        }
                    }
                }
                Op::MaskedSoftmax { x, key_valid, query_valid } => {
                    let y = &self.nodes[i].value;
                    let (bs, m, n) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                    let yd = y.data().to_vec();
                    let gd = g.data();
                    let dx = Self::grad_slot(&mut grads, &self.nodes, x);
                    let dxd = dx.data_mut();
                    for bi in 0..bs {
                        let keys = &key_valid[bi * n..(bi + 1) * n];
                        for ii in 0..m {
                            if !query_valid[bi * m + ii] {
                                continue; // defined-constant rows carry no gradient
                            }
                            let base = (bi * m + ii) * n;
                            let mut dot = 0.0;
                            for j in 0..n {
                                if keys[j] {
                                    dot += gd[base + j] * yd[base + j];
                                }
                            }
                            for j in 0..n {
                                if keys[j] {
                                    dxd[base + j] += yd[base + j] * (gd[base + j] - dot);
                                }
                            }
                        }
                    }
                }
                Op::MaskedMean { x, valid } => {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let (p, m, d) = (xs[0], xs[1], xs[2]);
                    let gd = g.data();
                    let dx = Self::grad_slot(&mut grads, &self.nodes, x);
                    let dxd = dx.data_mut();
                    for pi in 0..p {
                        let cnt = valid[pi * m..(pi + 1) * m].iter().filter(|&&v| v).count();
                        let inv = 1.0 / cnt as Real;
                        for mi in 0..m {
                            if valid[pi * m + mi] {
                                let dst = &mut dxd[(pi * m + mi) * d..(pi * m + mi + 1) * d];
                                let src = &gd[pi * d..(pi + 1) * d];
                                for (dv, gv) in dst.iter_mut().zip(src) {
                                    *dv += inv * gv;
                                }
                            }
                        }
                    }
                }
                Op::ConcatLast { a, b, da, db } => {
                    let rows = self.nodes[a.0].value.lead_count()?;
                    let gd = g.data();
                    {
                        let ga = Self::grad_slot(&mut grads, &self.nodes, a);
                        let gad = ga.data_mut();
                        for r in 0..rows {
                            for j in 0..da {
                                gad[r * da + j] += gd[r * (da + db) + j];
                            }
                        }
                    }
                    let gb = Self::grad_slot(&mut grads, &self.nodes, b);
                    let gbd = gb.data_mut();
                    for r in 0..rows {
                        for j in 0..db {
                            gbd[r * db + j] += gd[r * (da + db) + da + j];
                        }
                    }
                }
                Op::BroadcastExpand { s, m } => {
                    let (p, d) = {
                        let sh = self.nodes[s.0].value.shape();
                        (sh[0], sh[1])
                    };
                    let gd = g.data();
                    let ds = Self::grad_slot(&mut grads, &self.nodes, s);
                    let dsd = ds.data_mut();
                    for pi in 0..p {
                        for mi in 0..m {
                            let src = &gd[(pi * m + mi) * d..(pi * m + mi + 1) * d];
                            let dst = &mut dsd[pi * d..(pi + 1) * d];
                            for (dv, gv) in dst.iter_mut().zip(src) {
                                *dv += gv;
                            }
                        }
                    }
                }
                Op::RowMask { x, mask } => {
                    let d = self.nodes[x.0].value.last_dim()?;
                    let gd = g.data();
                    let dx = Self::grad_slot(&mut grads, &self.nodes, x);
                    let dxd = dx.data_mut();
                    for (r, &keep) in mask.iter().enumerate() {
                        if keep {
                            for j in 0..d {
                                dxd[r * d + j] += gd[r * d + j];
                            }
                        }
                    }
                }
                Op::ColScale { x, w } => {
                    let d = self.nodes[w.0].value.shape()[0];
                    let wd = self.nodes[w.0].value.data().to_vec();
                    let gd = g.data();
                    {
                        let dx = Self::grad_slot(&mut grads, &self.nodes, x);
                        for (i, dv) in dx.data_mut().iter_mut().enumerate() {
                            *dv += gd[i] * wd[i % d];
                        }
                    }
                    let xd = self.nodes[x.0].value.data().to_vec();
                    let dw = Self::grad_slot(&mut grads, &self.nodes, w);
                    let dwd = dw.data_mut();
                    for (i, gv) in gd.iter().enumerate() {
                        dwd[i % d] += gv * xd[i];
                    }
                }
                Op::Gather { table, idx } => {
                    let gd = g.data();
                    let dt = Self::grad_slot(&mut grads, &self.nodes, table);
                    let dtd = dt.data_mut();
                    for (i, &slot) in idx.iter().enumerate() {
                        dtd[slot] += gd[i];
                    }
                }
                Op::GatherSlots { x, slots } => {
                    let d = self.nodes[x.0].value.shape()[1];
                    let gd = g.data();
                    let dx = Self::grad_slot(&mut grads, &self.nodes, x);
                    let dxd = dx.data_mut();
                    for (si, slot) in slots.iter().enumerate() {
                        if let Some(node) = *slot {
                            let src = &gd[si * d..(si + 1) * d];
                            let dst = &mut dxd[node * d..(node + 1) * d];
                            for (dv, gv) in dst.iter_mut().zip(src) {
                                *dv += gv;
                            }
                        }
                    }
                }
                Op::ScatterSlots { x, pos } => {
                    let d = self.nodes[x.0].value.shape()[2];
                    let gd = g.data();
                    let dx = Self::grad_slot(&mut grads, &self.nodes, x);
                    let dxd = dx.data_mut();
                    for (node, &slot) in pos.iter().enumerate() {
                        let src = &gd[node * d..(node + 1) * d];
                        let dst = &mut dxd[slot * d..(slot + 1) * d];
                        for (dv, gv) in dst.iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
                Op::SplitHeads { x, heads } => {
                    let (bs, m, d) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1], s[2])
                    };
                    let dh = d / heads;
                    let gd = g.data();
                    let dx = Self::grad_slot(&mut grads, &self.nodes, x);
                    let dxd = dx.data_mut();
                    for bi in 0..bs {
                        for h in 0..heads {
                            for mi in 0..m {
                                let dst = (bi * m + mi) * d + h * dh;
                                let src = ((bi * heads + h) * m + mi) * dh;
                                for j in 0..dh {
                                    dxd[dst + j] += gd[src + j];
                                }
                            }
                        }
                    }
                }
                Op::MergeHeads { x, heads } => {
                    let (bh, m, dh) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1], s[2])
                    };
                    let bs = bh / heads;
                    let d = dh * heads;
                    let gd = g.data();
                    let dx = Self::grad_slot(&mut grads, &self.nodes, x);
                    let dxd = dx.data_mut();
                    for bi in 0..bs {
                        for h in 0..heads {
                            for mi in 0..m {
                                let src = (bi * m + mi) * d + h * dh;
                                let dst = ((bi * heads + h) * m + mi) * dh;
                                for j in 0..dh {
                                    dxd[dst + j] += gd[src + j];
                                }
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    Self::grad_add(&mut grads, &self.nodes, x, g.data(), |v| v);
                }
                Op::Sum { x } => {
                    let gv = g.data()[0];
                    let dx = Self::grad_slot(&mut grads, &self.nodes, x);
                    for dv in dx.data_mut() {
                        *dv += gv;
                    }
                }
                Op::MeanAbs { a, b } => {
                    let gv = g.data()[0];
                    let n = self.nodes[a.0].value.numel() as Real;
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let bd = self.nodes[b.0].value.data().to_vec();
                    {
                        let da = Self::grad_slot(&mut grads, &self.nodes, a);
                        for (i, dv) in da.data_mut().iter_mut().enumerate() {
                            let diff = ad[i] - bd[i];
                            if diff != 0.0 {
                                *dv += gv * diff.signum() / n;
                            }
                        }
                    }
                    let db = Self::grad_slot(&mut grads, &self.nodes, b);
                    for (i, dv) in db.data_mut().iter_mut().enumerate() {
                        let diff = ad[i] - bd[i];
                        if diff != 0.0 {
                            *dv -= gv * diff.signum() / n;
                        }
                    }
                }
                Op::RmsNorm { x, eps } => {
                    let xt = &self.nodes[x.0].value;
                    let d = xt.last_dim()?;
                    let rows = xt.lead_count()?;
                    let xd = xt.data().to_vec();
                    let gd = g.data();
                    let dx = Self::grad_slot(&mut grads, &self.nodes, x);
                    let dxd = dx.data_mut();
                    for r in 0..rows {
                        let row = &xd[r * d..(r + 1) * d];
                        let ms: Real = row.iter().map(|v| v * v).sum::<Real>() / d as Real;
                        let rms = (ms + eps).sqrt();
                        let grow = &gd[r * d..(r + 1) * d];
                        let dot: Real = grow.iter().zip(row).map(|(gv, xv)| gv * xv).sum();
                        let c = dot / (d as Real * rms * rms);
                        for j in 0..d {
                            dxd[r * d + j] += (grow[j] - row[j] * c) / rms;
                        }
                    }
                }
            }
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(key) } = node.op {
                if let Some(g) = grads[i].take() {
                    match out.by_param.entry(key) {
                        std::collections::btree_map::Entry::Vacant(e) => {
                            e.insert(g);
                        }
                        std::collections::btree_map::Entry::Occupied(mut e) => {
                            for (acc, v) in e.get_mut().data_mut().iter_mut().zip(g.data()) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'a mut Tensor {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(nodes[v.0].value.shape().to_vec()));
        }
        slot.as_mut().unwrap()
    }

    fn grad_add(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: &[Real], f: impl Fn(Real) -> Real) {
        let dst = Self::grad_slot(grads, nodes, v);
        for (dv, gv) in dst.data_mut().iter_mut().zip(g) {
            *dv += f(*gv);
        }
    }
}

/// Replicate one per-row mask across a batch, as `masked_softmax` expects.
pub fn replicate_mask(mask: &[bool], batches: usize) -> Rc<Vec<bool>> {
    let mut out = Vec::with_capacity(mask.len() * batches);
    for _ in 0..batches {
        out.extend_from_slice(mask);
    }
    Rc::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// FD-checks d(loss)/d(param 0) for a scalar-valued tape program.
    fn check_param_grad(
        build: impl Fn(&mut Tape, Var) -> Var,
        x0: &Tensor,
        h: f64,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.param(0, x0.clone()).unwrap();
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss, 1.0).unwrap();
        let analytic = grads.get(0).unwrap().data().to_vec();

        let f = |vals: &[Real]| -> Real {
            let mut t = Tape::new();
            let x = t.param(0, Tensor::new(x0.shape().to_vec(), vals.to_vec()).unwrap()).unwrap();
            let loss = build(&mut t, x);
            t.value(loss).item().unwrap()
        };
        let numeric = central_diff(f, x0.data(), h);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < tol, "rel err {} >= {}", err, tol);
    }

    #[test]
    fn linear_identity_and_known_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let b = tape.leaf(Tensor::new(vec![2], vec![3.0, 3.0]).unwrap()).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 5.0]);

        let y2 = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y2).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_gradcheck() {
        let mut r = rng(1);
        let x0 = rand_tensor(&mut r, vec![4, 3, 2]);
        let w0 = rand_tensor(&mut r, vec![2, 5]);
        let b0 = rand_tensor(&mut r, vec![5]);
        // d/dx
        check_param_grad(
            |t, x| {
                let w = t.leaf(w0.clone()).unwrap();
                let b = t.leaf(b0.clone()).unwrap();
                let y = t.linear(x, w, Some(b)).unwrap();
                t.sum(y).unwrap()
            },
            &x0,
            1e-6,
            1e-6,
        );
        // d/dw and d/db through a nonlinearity so the check is not constant
        check_param_grad(
            |t, w| {
                let x = t.leaf(x0.clone()).unwrap();
                let y = t.linear(x, w, None).unwrap();
                let y = t.relu(y).unwrap();
                t.sum(y).unwrap()
            },
            &w0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn softmax_uniform_when_scores_equal() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 3, 3], 0.7)).unwrap();
        let valid = Rc::new(vec![true; 3]);
        let y = tape.masked_softmax(x, valid.clone(), valid).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_masked_column_is_exactly_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 3], vec![0.2, 1.5, -0.4]).unwrap()).unwrap();
        let keys = Rc::new(vec![true, false, true]);
        let q = Rc::new(vec![true]);
        let y = tape.masked_softmax(x, keys, q).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
        // renormalized pair
        let e0 = (0.2f64 - 0.2).exp();
        let e2 = (-0.4f64 - 0.2).exp();
        assert!((d[0] as f64 - e0 / (e0 + e2)).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let x1 = tape.leaf(Tensor::new(vec![1, 1, 3], vec![0.1, 0.9, -0.5]).unwrap()).unwrap();
        let x2 = tape.leaf(Tensor::new(vec![1, 1, 3], vec![100.1, 100.9, 99.5]).unwrap()).unwrap();
        let valid = Rc::new(vec![true; 3]);
        let q = Rc::new(vec![true]);
        let y1 = tape.masked_softmax(x1, valid.clone(), q.clone()).unwrap();
        let y2 = tape.masked_softmax(x2, valid, q).unwrap();
        let (a, b) = (tape.value(y1).clone(), tape.value(y2));
        assert!(a.max_abs_diff(b).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_masked_query_rows_are_uniform_and_gradless() {
        let mut tape = Tape::new();
        let x0 = Tensor::new(vec![1, 2, 3], vec![0.3, -0.2, 0.9, 5.0, 6.0, 7.0]).unwrap();
        let x = tape.param(0, x0).unwrap();
        let keys = Rc::new(vec![true, true, false]);
        let q = Rc::new(vec![true, false]);
        let y = tape.masked_softmax(x, keys, q).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[3..6], &[0.5, 0.5, 0.0]);
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s, 1.0).unwrap();
        let gx = grads.get(0).unwrap().data();
        assert_eq!(&gx[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_empty_key_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 2])).unwrap();
        let keys = Rc::new(vec![false, false]);
        let q = Rc::new(vec![true]);
        assert!(tape.masked_softmax(x, keys, q).is_err());
    }

    #[test]
    fn softmax_gradcheck_through_loss() {
        let mut r = rng(3);
        let x0 = rand_tensor(&mut r, vec![2, 3, 3]);
        let target = rand_tensor(&mut r, vec![2, 3, 3]);
        let keys = Rc::new(vec![true, true, false, true, true, true]);
        let q = Rc::new(vec![true, true, false, true, true, true]);
        check_param_grad(
            |t, x| {
                let y = t.masked_softmax(x, keys.clone(), q.clone()).unwrap();
                let tg = t.leaf(target.clone()).unwrap();
                t.mean_abs_error(y, tg).unwrap()
            },
            &x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn bmm_pair_gradcheck() {
        let mut r = rng(4);
        let a0 = rand_tensor(&mut r, vec![2, 3, 4]);
        let b0 = rand_tensor(&mut r, vec![2, 5, 4]);
        check_param_grad(
            |t, a| {
                let b = t.leaf(b0.clone()).unwrap();
                let s = t.bmm_nt(a, b, 0.5).unwrap();
                let v = t.leaf(rand_tensor(&mut rng(5), vec![2, 5, 3])).unwrap();
                let y = t.bmm(s, v).unwrap();
                let y = t.relu(y).unwrap();
                t.sum(y).unwrap()
            },
            &a0,
            1e-6,
            1e-5,
        );
        check_param_grad(
            |t, b| {
                let a = t.leaf(a0.clone()).unwrap();
                let s = t.bmm_nt(a, b, 1.0).unwrap();
                t.sum(s).unwrap()
            },
            &b0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn ffn_identity_and_clamp() {
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![0.5, 1.5, 0.0, 2.0]).unwrap()).unwrap();
        let w1 = tape.leaf(eye.clone()).unwrap();
        let w2 = tape.leaf(eye).unwrap();
        let y = tape.ffn(x, w1, w2).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let xneg = tape.leaf(Tensor::full(vec![2, 2], -1.0)).unwrap();
        let y2 = tape.ffn(xneg, w1, w2).unwrap();
        assert!(tape.value(y2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_gradcheck() {
        let mut r = rng(6);
        let x0 = rand_tensor(&mut r, vec![3, 4]);
        let w1 = rand_tensor(&mut r, vec![4, 8]);
        let w2 = rand_tensor(&mut r, vec![8, 4]);
        check_param_grad(
            |t, x| {
                let a = t.leaf(w1.clone()).unwrap();
                let b = t.leaf(w2.clone()).unwrap();
                let y = t.ffn(x, a, b).unwrap();
                t.sum(y).unwrap()
            },
            &x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn masked_mean_values_and_padding() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![2, 2, 1], vec![1.0, 3.0, 5.0, 99.0]).unwrap())
            .unwrap();
        let valid = Rc::new(vec![true, true, true, false]);
        let y = tape.masked_mean(x, valid).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 5.0]);
    }

    #[test]
    fn masked_mean_padded_slot_is_inert() {
        let valid = Rc::new(vec![true, false]);
        let run = |pad_val: Real| {
            let x0 = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, pad_val, pad_val]).unwrap();
            let mut tape = Tape::new();
            let x = tape.param(0, x0).unwrap();
            let y = tape.masked_mean(x, valid.clone()).unwrap();
            let s = tape.sum(y).unwrap();
            let out = tape.value(y).clone();
            let g = tape.backward(s, 1.0).unwrap().get(0).unwrap().clone();
            (out, g)
        };
        let (y0, g0) = run(0.0);
        let (y1, g1) = run(123.0);
        assert_eq!(y0, y1);
        assert_eq!(g0, g1);
        assert_eq!(&g0.data()[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn concat_and_expand_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = tape.leaf(Tensor::new(vec![2, 1], vec![9.0, 8.0]).unwrap()).unwrap();
        let y = tape.concat_last(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let s = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let e = tape.broadcast_expand(s, 3).unwrap();
        assert_eq!(tape.value(e).shape(), &[2, 3, 2]);
        for mi in 0..3 {
            assert_eq!(tape.value(e).data()[mi * 2], 1.0);
        }
    }

    #[test]
    fn expand_backward_sums_over_m() {
        let mut tape = Tape::new();
        let s = tape.param(0, Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let e = tape.broadcast_expand(s, 5).unwrap();
        let total = tape.sum(e).unwrap();
        let g = tape.backward(total, 1.0).unwrap();
        for &v in g.get(0).unwrap().data() {
            assert_eq!(v, 5.0);
        }
    }

    #[test]
    fn sum_grad_is_ones_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(0, Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let s = tape.sum(x).unwrap();
        let mut p = Parameter::new(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        {
            let g = tape.backward(s, 1.0).unwrap();
            g.accumulate_into(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.grad.data(), &[1.0, 1.0, 1.0]);
        let g2 = tape.backward(s, 1.0).unwrap();
        g2.accumulate_into(&mut [&mut p]).unwrap();
        assert_eq!(p.grad.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mean_abs_error_matches_bruteforce() {
        let mut r = rng(8);
        let a0 = rand_tensor(&mut r, vec![3, 2, 2]);
        let b0 = rand_tensor(&mut r, vec![3, 2, 2]);
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone()).unwrap();
        let b = tape.leaf(b0.clone()).unwrap();
        let l = tape.mean_abs_error(a, b).unwrap();
        let brute: Real = a0
            .data()
            .iter()
            .zip(b0.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<Real>()
            / 12.0;
        assert!((tape.value(l).item().unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn gather_scatters_gradient_into_table() {
        let mut tape = Tape::new();
        let table = tape.param(0, Tensor::new(vec![3], vec![5.0, 7.0, 11.0]).unwrap()).unwrap();
        let idx = Rc::new(vec![0, 1, 1, 2]);
        let y = tape.gather(table, idx, vec![2, 2]).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0, 7.0, 11.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s, 1.0).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[1.0, 2.0, 1.0]);
    }

    #[test]
    fn layout_slot_roundtrip_and_grads() {
        let mut tape = Tape::new();
        let x0 = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = tape.param(0, x0.clone()).unwrap();
        // parts {0, 2} and {1}; M = 2
        let slots = Rc::new(vec![Some(0), Some(2), Some(1), None]);
        let laid = tape.gather_slots(x, slots, 2, 2).unwrap();
        assert_eq!(
            tape.value(laid).data(),
            &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 0.0, 0.0]
        );
        let pos = Rc::new(vec![0usize, 2, 1]);
        let back = tape.scatter_slots(laid, pos).unwrap();
        assert_eq!(tape.value(back).data(), x0.data());
        let s = tape.sum(back).unwrap();
        let g = tape.backward(s, 1.0).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn split_merge_heads_roundtrip_and_grad() {
        let mut r = rng(9);
        let x0 = rand_tensor(&mut r, vec![2, 3, 4]);
        let mut tape = Tape::new();
        let x = tape.param(0, x0.clone()).unwrap();
        let sp = tape.split_heads(x, 2).unwrap();
        assert_eq!(tape.value(sp).shape(), &[4, 3, 2]);
        let mg = tape.merge_heads(sp, 2).unwrap();
        assert_eq!(tape.value(mg).data(), x0.data());
        let s = tape.sum(mg).unwrap();
        let g = tape.backward(s, 1.0).unwrap();
        assert!(g.get(0).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn col_scale_gradcheck() {
        let mut r = rng(10);
        let x0 = rand_tensor(&mut r, vec![4, 3]);
        let w0 = rand_tensor(&mut r, vec![3]);
        let tgt = rand_tensor(&mut r, vec![4, 3]);
        check_param_grad(
            |t, w| {
                let x = t.leaf(x0.clone()).unwrap();
                let y = t.col_scale(x, w).unwrap();
                let tg = t.leaf(tgt.clone()).unwrap();
                t.mean_abs_error(y, tg).unwrap()
            },
            &w0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn rms_norm_gradcheck() {
        let mut r = rng(11);
        let x0 = rand_tensor(&mut r, vec![3, 4]);
        check_param_grad(
            |t, x| {
                let y = t.rms_norm(x, 1e-6).unwrap();
                let w = t.leaf(rand_tensor(&mut rng(12), vec![3, 4])).unwrap();
                let y = t.mul_elem(y, w).unwrap();
                t.sum(y).unwrap()
            },
            &x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn attention_single_key_passes_value_through() {
        // With M = 1 the softmax weight is 1, so attention returns V.
        let mut tape = Tape::new();
        let v0 = Tensor::new(vec![1, 1, 2], vec![0.3, -0.7]).unwrap();
        let q = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let k = tape.leaf(Tensor::new(vec![1, 1, 2], vec![-1.0, 0.5]).unwrap()).unwrap();
        let v = tape.leaf(v0.clone()).unwrap();
        let s = tape.bmm_nt(q, k, 1.0).unwrap();
        let ones = Rc::new(vec![true]);
        let att = tape.masked_softmax(s, ones.clone(), ones).unwrap();
        assert_eq!(tape.value(att).data(), &[1.0]);
        let y = tape.bmm(att, v).unwrap();
        assert_eq!(tape.value(y).data(), v0.data());
    }

    #[test]
    fn attention_permutation_equivariance() {
        // Permuting rows (queries/keys/values together, no bias, full mask)
        // permutes the outputs identically.
        let mut r = rng(13);
        let x0 = rand_tensor(&mut r, vec![1, 4, 3]);
        let perm = [2usize, 0, 3, 1];
        let mut xp = x0.clone();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..3 {
                xp.data_mut()[i * 3 + j] = x0.data()[p * 3 + j];
            }
        }
        let run = |x0: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone()).unwrap();
            let s = tape.bmm_nt(x, x, 1.0 / (3.0 as Real).sqrt()).unwrap();
            let ones = Rc::new(vec![true; 4]);
            let a = tape.masked_softmax(s, ones.clone(), ones).unwrap();
            let y = tape.bmm(a, x).unwrap();
            tape.value(y).clone()
        };
        let y = run(&x0);
        let yp = run(&xp);
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..3 {
                let a = yp.data()[i * 3 + j];
                let b = y.data()[p * 3 + j];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradcheck() {
        let mut r = rng(14);
        let x0 = rand_tensor(&mut r, vec![2, 3, 4]);
        let wq = rand_tensor(&mut r, vec![4, 4]);
        let wk = rand_tensor(&mut r, vec![4, 4]);
        let wv = rand_tensor(&mut r, vec![4, 4]);
        let tgt = rand_tensor(&mut r, vec![2, 3, 4]);
        let keys = Rc::new(vec![true, true, true, true, true, false]);
        check_param_grad(
            |t, x| {
                let lq = t.leaf(wq.clone()).unwrap();
                let lk = t.leaf(wk.clone()).unwrap();
                let lv = t.leaf(wv.clone()).unwrap();
                let q = t.linear(x, lq, None).unwrap();
                let k = t.linear(x, lk, None).unwrap();
                let v = t.linear(x, lv, None).unwrap();
                let s = t.bmm_nt(q, k, 0.5).unwrap();
                let a = t.masked_softmax(s, keys.clone(), keys.clone()).unwrap();
                let y = t.bmm(a, v).unwrap();
                let tg = t.leaf(tgt.clone()).unwrap();
                t.mean_abs_error(y, tg).unwrap()
            },
            &x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn nan_input_trips_named_error() {
        let mut tape = Tape::new();
        let bad = Tensor::new(vec![2], vec![1.0, Real::NAN]).unwrap();
        match tape.leaf(bad) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "leaf"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn overflow_in_op_trips_named_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 2], Real::MAX / 2.0)).unwrap();
        let err = tape.bmm_nt(x, x, 1.0).unwrap_err();
        match err {
            Error::NonFinite { op } => assert_eq!(op, "bmm_nt"),
            other => panic!("expected NonFinite, got {:?}", other),
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(0, Tensor::zeros(vec![2])).unwrap();
        assert!(tape.backward(x, 1.0).is_err());
    }
}
