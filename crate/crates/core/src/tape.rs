//! Reverse-mode automatic differentiation over a tape of tensor ops.
//!
//! A `Tape` records every operation as it executes. `backward` walks the
//! record once in reverse, handing each node its output gradient and
//! collecting the gradients it produces for its parents. Ops are fused at
//! the level the network needs (a whole LSTM pass is one node), which keeps
//! the tape short and the backward closures cheap.
//!
//! Gradients are verified against central finite differences by
//! `grad_check_multi`; that check is the ground truth for every op here and
//! runs in the test suite and the self-test command.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value on a tape. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn FnOnce(&[Tensor], &Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    out: usize,
    back: BackFn,
}

/// Gradients keyed by `Var`, produced by `Tape::backward`. Slots without
/// gradient flow stay empty; `take_or_zeros` materializes them on demand.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].as_ref()
    }

    pub fn take_or_zeros(&mut self, v: Var) -> Tensor {
        let shape = core::mem::take(&mut self.shapes[v.0]);
        match self.slots[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
}

/// Step used by the finite-difference reference gradient.
pub const GRAD_CHECK_EPS: f64 = 1e-5;
/// Step for checking deep compositions (the whole network): with a dozen
/// chained nonlinearities, 1e-5 leaves small-gradient coordinates below
/// the f64 roundoff floor of the central difference.
pub const GRAD_CHECK_EPS_DEEP: f64 = 1e-4;
/// Largest acceptable relative disagreement between analytic and numeric
/// gradients, measured as |a − n| / max(1e-8, |a| + |n|).
pub const GRAD_CHECK_TOL: f64 = 1e-4;

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    fn push_val(&mut self, t: Tensor, what: &str) -> Result<Var> {
        t.ensure_finite(what)?;
        self.vals.push(t);
        Ok(Var(self.vals.len() - 1))
    }

    fn push_node(&mut self, out: Var, back: BackFn) {
        self.nodes.push(Node { out: out.0, back });
    }

    /// Enters an input or parameter tensor onto the tape.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push_val(t, "leaf")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::Shape(format!(
                "add between {} and {}",
                self.vals[a.0].describe(),
                self.vals[b.0].describe()
            )));
        }
        let mut out = self.vals[a.0].clone();
        out.axpy(1.0, &self.vals[b.0])?;
        let ov = self.push_val(out, "add")?;
        self.push_node(
            ov,
            Box::new(move |_vals, g| vec![(a.0, g.clone()), (b.0, g.clone())]),
        );
        Ok(ov)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let mut out = self.vals[a.0].clone();
        out.scale_in_place(c);
        let ov = self.push_val(out, "scale")?;
        self.push_node(
            ov,
            Box::new(move |_vals, g| {
                let mut ga = g.clone();
                ga.scale_in_place(c);
                vec![(a.0, ga)]
            }),
        );
        Ok(ov)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.vals[a.0].clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let ov = self.push_val(out, "relu")?;
        self.push_node(
            ov,
            Box::new(move |vals, g| {
                let x = &vals[a.0];
                let mut ga = g.clone();
                for (gv, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                vec![(a.0, ga)]
            }),
        );
        Ok(ov)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let mut out = self.vals[a.0].clone();
        for v in out.data_mut() {
            *v = sigmoid_scalar(*v);
        }
        let ov = self.push_val(out, "sigmoid")?;
        self.push_node(
            ov,
            Box::new(move |vals, g| {
                let y = &vals[ov.0];
                let mut ga = g.clone();
                for (gv, yv) in ga.data_mut().iter_mut().zip(y.data()) {
                    *gv *= yv * (1.0 - yv);
                }
                vec![(a.0, ga)]
            }),
        );
        Ok(ov)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let mut out = self.vals[a.0].clone();
        for v in out.data_mut() {
            *v = libm::tanh(*v);
        }
        let ov = self.push_val(out, "tanh")?;
        self.push_node(
            ov,
            Box::new(move |vals, g| {
                let y = &vals[ov.0];
                let mut ga = g.clone();
                for (gv, yv) in ga.data_mut().iter_mut().zip(y.data()) {
                    *gv *= 1.0 - yv * yv;
                }
                vec![(a.0, ga)]
            }),
        );
        Ok(ov)
    }

    /// y = xW + b with x: [n, i], w: [i, o], b: [o]; bias broadcast per row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (&self.vals[x.0], &self.vals[w.0], &self.vals[b.0]);
        if xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 {
            return Err(Error::Shape("linear expects [n,i] x [i,o] + [o]".into()));
        }
        let (n, i) = (xv.dim(0), xv.dim(1));
        let (wi, o) = (wv.dim(0), wv.dim(1));
        if wi != i || bv.len() != o {
            return Err(Error::Shape(format!(
                "linear mismatch: x {}, w {}, b {}",
                xv.describe(),
                wv.describe(),
                bv.describe()
            )));
        }
        let mut out = Tensor::zeros(&[n, o]);
        for r in 0..n {
            let orow = out.row_mut(r);
            orow.copy_from_slice(bv.data());
            let xrow = self.vals[x.0].row(r);
            for (p, &xp) in xrow.iter().enumerate() {
                if xp != 0.0 {
                    let wrow = self.vals[w.0].row(p);
                    for (ov, wv) in orow.iter_mut().zip(wrow) {
                        *ov += xp * wv;
                    }
                }
            }
        }
        let ov = self.push_val(out, "linear")?;
        self.push_node(
            ov,
            Box::new(move |vals, g| {
                let xv = &vals[x.0];
                let wv = &vals[w.0];
                let (n, i) = (xv.dim(0), xv.dim(1));
                let o = wv.dim(1);
                let mut dx = Tensor::zeros(&[n, i]);
                let mut dw = Tensor::zeros(&[i, o]);
                let mut db = Tensor::zeros(&[o]);
                for r in 0..n {
                    let grow = g.row(r);
                    for (dbv, gv) in db.data_mut().iter_mut().zip(grow) {
                        *dbv += gv;
                    }
                    let xrow = xv.row(r);
                    let dxrow = dx.row_mut(r);
                    for p in 0..i {
                        let wrow = wv.row(p);
                        let mut acc = 0.0;
                        for (wq, gq) in wrow.iter().zip(grow) {
                            acc += wq * gq;
                        }
                        dxrow[p] = acc;
                        let xp = xrow[p];
                        if xp != 0.0 {
                            let dwrow = dw.row_mut(p);
                            for (dwv, gq) in dwrow.iter_mut().zip(grow) {
                                *dwv += xp * gq;
                            }
                        }
                    }
                }
                vec![(x.0, dx), (w.0, dw), (b.0, db)]
            }),
        );
        Ok(ov)
    }

    /// Gathers rows of `table` per `indices`. Positions with `active` false
    /// produce zero rows and receive no gradient, so the padding row of an
    /// embedding table is never touched by training.
    pub fn embed(&mut self, table: Var, indices: &[u32], active: &[bool]) -> Result<Var> {
        let tv = &self.vals[table.0];
        if tv.rank() != 2 {
            return Err(Error::Shape("embed table must be rank 2".into()));
        }
        if indices.len() != active.len() {
            return Err(Error::Contract(
                "embed indices and active mask differ in length".into(),
            ));
        }
        let (v, d) = (tv.dim(0), tv.dim(1));
        let n = indices.len();
        let mut out = Tensor::zeros(&[n, d]);
        for (i, (&ix, &on)) in indices.iter().zip(active).enumerate() {
            if !on {
                continue;
            }
            let ix = ix as usize;
            if ix >= v {
                return Err(Error::Validation(format!(
                    "embedding index {ix} outside table of {v} rows"
                )));
            }
            out.row_mut(i).copy_from_slice(self.vals[table.0].row(ix));
        }
        let idx: Vec<u32> = indices.to_vec();
        let act: Vec<bool> = active.to_vec();
        let ov = self.push_val(out, "embed")?;
        self.push_node(
            ov,
            Box::new(move |vals, g| {
                let tv = &vals[table.0];
                let mut dt = Tensor::zeros(&[tv.dim(0), tv.dim(1)]);
                for (i, (&ix, &on)) in idx.iter().zip(&act).enumerate() {
                    if on {
                        let grow = g.row(i);
                        let drow = dt.row_mut(ix as usize);
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                }
                vec![(table.0, dt)]
            }),
        );
        Ok(ov)
    }

    /// Inverted dropout. With `train` false or rate zero this is exactly the
    /// identity (the same Var is returned). Kept units are scaled by
    /// 1/(1-rate) so expectations match eval mode.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        if !rate.is_finite() || !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.vals[x.0].len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                if u >= rate {
                    keep_scale
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = self.vals[x.0].clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let ov = self.push_val(out, "dropout")?;
        self.push_node(
            ov,
            Box::new(move |_vals, g| {
                let mut ga = g.clone();
                for (gv, m) in ga.data_mut().iter_mut().zip(&mask) {
                    *gv *= m;
                }
                vec![(x.0, ga)]
            }),
        );
        Ok(ov)
    }

    /// Same-length 1-d convolution over the first axis. x: [t, ci],
    /// kernels: [k, ci, f] with odd k, bias: [f]; output [t, f]. Positions
    /// past either edge contribute nothing (zero padding).
    pub fn conv1d_same(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (&self.vals[x.0], &self.vals[kernels.0], &self.vals[bias.0]);
        if xv.rank() != 2 || kv.rank() != 3 || bv.rank() != 1 {
            return Err(Error::Shape(
                "conv1d_same expects x [t,ci], kernels [k,ci,f], bias [f]".into(),
            ));
        }
        let (t_len, ci) = (xv.dim(0), xv.dim(1));
        let (k, kci, f) = (kv.dim(0), kv.dim(1), kv.dim(2));
        if k % 2 == 0 {
            return Err(Error::Parameter(format!(
                "conv kernel width {k} must be odd for same-length output"
            )));
        }
        if kci != ci || bv.len() != f {
            return Err(Error::Shape(format!(
                "conv1d_same mismatch: x {}, kernels {}, bias {}",
                xv.describe(),
                kv.describe(),
                bv.describe()
            )));
        }
        let pad = (k - 1) / 2;
        let mut out = Tensor::zeros(&[t_len, f]);
        {
            let xv = &self.vals[x.0];
            let kv = &self.vals[kernels.0];
            let bv = &self.vals[bias.0];
            let kd = kv.data();
            for t in 0..t_len {
                let orow = out.row_mut(t);
                orow.copy_from_slice(bv.data());
                for j in 0..k {
                    let s = t + j;
                    if s < pad || s - pad >= t_len {
                        continue;
                    }
                    let xrow = xv.row(s - pad);
                    for (c, &xc) in xrow.iter().enumerate() {
                        if xc != 0.0 {
                            let krow = &kd[(j * ci + c) * f..(j * ci + c + 1) * f];
                            for (ov, kvv) in orow.iter_mut().zip(krow) {
                                *ov += xc * kvv;
                            }
                        }
                    }
                }
            }
        }
        let ov = self.push_val(out, "conv1d_same")?;
        self.push_node(
            ov,
            Box::new(move |vals, g| {
                let xv = &vals[x.0];
                let kv = &vals[kernels.0];
                let (t_len, ci) = (xv.dim(0), xv.dim(1));
                let (k, _, f) = (kv.dim(0), kv.dim(1), kv.dim(2));
                let pad = (k - 1) / 2;
                let mut dx = Tensor::zeros(&[t_len, ci]);
                let mut dk = Tensor::zeros(&[k, ci, f]);
                let mut db = Tensor::zeros(&[f]);
                let kd = kv.data();
                let dkd = dk.data_mut();
                for t in 0..t_len {
                    let grow = g.row(t);
                    for (dbv, gv) in db.data_mut().iter_mut().zip(grow) {
                        *dbv += gv;
                    }
                    for j in 0..k {
                        let s = t + j;
                        if s < pad || s - pad >= t_len {
                            continue;
                        }
                        let s = s - pad;
                        let xrow = xv.row(s);
                        let dxrow = dx.row_mut(s);
                        for c in 0..ci {
                            let base = (j * ci + c) * f;
                            let krow = &kd[base..base + f];
                            let mut acc = 0.0;
                            for (kvv, gv) in krow.iter().zip(grow) {
                                acc += kvv * gv;
                            }
                            dxrow[c] += acc;
                            let xc = xrow[c];
                            if xc != 0.0 {
                                let dkrow = &mut dkd[base..base + f];
                                for (dkv, gv) in dkrow.iter_mut().zip(grow) {
                                    *dkv += xc * gv;
                                }
                            }
                        }
                    }
                }
                vec![(x.0, dx), (kernels.0, dk), (bias.0, db)]
            }),
        );
        Ok(ov)
    }

    /// Unidirectional LSTM over a sequence. xs: [s, d], wx: [d, 4h],
    /// wh: [h, 4h], b: [4h]; returns all hidden states [s, h]. Gate order in
    /// the packed weight matrices is input, forget, cell, output. Initial
    /// hidden and cell states are zero.
    pub fn lstm_seq(&mut self, xs: Var, wx: Var, wh: Var, b: Var) -> Result<Var> {
        let (xv, wxv, whv, bv) = (
            &self.vals[xs.0],
            &self.vals[wx.0],
            &self.vals[wh.0],
            &self.vals[b.0],
        );
        if xv.rank() != 2 || wxv.rank() != 2 || whv.rank() != 2 || bv.rank() != 1 {
            return Err(Error::Shape(
                "lstm_seq expects xs [s,d], wx [d,4h], wh [h,4h], b [4h]".into(),
            ));
        }
        let (s_len, d) = (xv.dim(0), xv.dim(1));
        let h = whv.dim(0);
        if s_len == 0 {
            return Err(Error::Contract("lstm_seq over an empty sequence".into()));
        }
        if wxv.dim(0) != d || wxv.dim(1) != 4 * h || whv.dim(1) != 4 * h || bv.len() != 4 * h {
            return Err(Error::Shape(format!(
                "lstm_seq mismatch: xs {}, wx {}, wh {}, b {}",
                xv.describe(),
                wxv.describe(),
                whv.describe(),
                bv.describe()
            )));
        }

        let mut out = Tensor::zeros(&[s_len, h]);
        let mut gi = Tensor::zeros(&[s_len, h]);
        let mut gf = Tensor::zeros(&[s_len, h]);
        let mut gg = Tensor::zeros(&[s_len, h]);
        let mut go = Tensor::zeros(&[s_len, h]);
        let mut cs = Tensor::zeros(&[s_len, h]);
        let mut tc = Tensor::zeros(&[s_len, h]);

        {
            let xv = &self.vals[xs.0];
            let wxv = &self.vals[wx.0];
            let whv = &self.vals[wh.0];
            let bv = &self.vals[b.0];
            let mut h_prev = vec![0.0; h];
            let mut c_prev = vec![0.0; h];
            let mut z = vec![0.0; 4 * h];
            for t in 0..s_len {
                z.copy_from_slice(bv.data());
                let xrow = xv.row(t);
                for (p, &xp) in xrow.iter().enumerate() {
                    if xp != 0.0 {
                        for (zv, wv) in z.iter_mut().zip(wxv.row(p)) {
                            *zv += xp * wv;
                        }
                    }
                }
                for (j, &hp) in h_prev.iter().enumerate() {
                    if hp != 0.0 {
                        for (zv, wv) in z.iter_mut().zip(whv.row(j)) {
                            *zv += hp * wv;
                        }
                    }
                }
                for j in 0..h {
                    let iv = sigmoid_scalar(z[j]);
                    let fv = sigmoid_scalar(z[h + j]);
                    let gv = libm::tanh(z[2 * h + j]);
                    let ov = sigmoid_scalar(z[3 * h + j]);
                    let cv = fv * c_prev[j] + iv * gv;
                    let tcv = libm::tanh(cv);
                    let hv = ov * tcv;
                    gi.row_mut(t)[j] = iv;
                    gf.row_mut(t)[j] = fv;
                    gg.row_mut(t)[j] = gv;
                    go.row_mut(t)[j] = ov;
                    cs.row_mut(t)[j] = cv;
                    tc.row_mut(t)[j] = tcv;
                    out.row_mut(t)[j] = hv;
                    h_prev[j] = hv;
                    c_prev[j] = cv;
                }
            }
        }

        let ov = self.push_val(out, "lstm_seq")?;
        self.push_node(
            ov,
            Box::new(move |vals, g| {
                let xv = &vals[xs.0];
                let wxv = &vals[wx.0];
                let whv = &vals[wh.0];
                let hs = &vals[ov.0];
                let (s_len, d) = (xv.dim(0), xv.dim(1));
                let h = whv.dim(0);
                let mut dxs = Tensor::zeros(&[s_len, d]);
                let mut dwx = Tensor::zeros(&[d, 4 * h]);
                let mut dwh = Tensor::zeros(&[h, 4 * h]);
                let mut db = Tensor::zeros(&[4 * h]);
                let mut dh_carry = vec![0.0; h];
                let mut dc_carry = vec![0.0; h];
                let mut dz = vec![0.0; 4 * h];
                let zero_row = vec![0.0; h];
                for t in (0..s_len).rev() {
                    let grow = g.row(t);
                    let c_prev = if t > 0 { cs.row(t - 1) } else { &zero_row[..] };
                    for j in 0..h {
                        let dh = grow[j] + dh_carry[j];
                        let o = go.row(t)[j];
                        let tcv = tc.row(t)[j];
                        let d_o = dh * tcv;
                        let dtc = dh * o;
                        let dc = dc_carry[j] + dtc * (1.0 - tcv * tcv);
                        let iv = gi.row(t)[j];
                        let fv = gf.row(t)[j];
                        let gv = gg.row(t)[j];
                        let df = dc * c_prev[j];
                        let di = dc * gv;
                        let dg = dc * iv;
                        dc_carry[j] = dc * fv;
                        dz[j] = di * iv * (1.0 - iv);
                        dz[h + j] = df * fv * (1.0 - fv);
                        dz[2 * h + j] = dg * (1.0 - gv * gv);
                        dz[3 * h + j] = d_o * o * (1.0 - o);
                    }
                    for (dbv, zv) in db.data_mut().iter_mut().zip(&dz) {
                        *dbv += zv;
                    }
                    let xrow = xv.row(t);
                    let dxrow = dxs.row_mut(t);
                    for p in 0..d {
                        let wrow = wxv.row(p);
                        let mut acc = 0.0;
                        for (wv, zv) in wrow.iter().zip(&dz) {
                            acc += wv * zv;
                        }
                        dxrow[p] = acc;
                        let xp = xrow[p];
                        if xp != 0.0 {
                            for (dwv, zv) in dwx.row_mut(p).iter_mut().zip(&dz) {
                                *dwv += xp * zv;
                            }
                        }
                    }
                    let h_prev = if t > 0 { hs.row(t - 1) } else { &zero_row[..] };
                    for j in 0..h {
                        let wrow = whv.row(j);
                        let mut acc = 0.0;
                        for (wv, zv) in wrow.iter().zip(&dz) {
                            acc += wv * zv;
                        }
                        dh_carry[j] = acc;
                        let hp = h_prev[j];
                        if hp != 0.0 {
                            for (dwv, zv) in dwh.row_mut(j).iter_mut().zip(&dz) {
                                *dwv += hp * zv;
                            }
                        }
                    }
                }
                vec![(xs.0, dxs), (wx.0, dwx), (wh.0, dwh), (b.0, db)]
            }),
        );
        Ok(ov)
    }

    /// Additive attention pooling: weights softmax(v . tanh(W' s_i)) over the
    /// rows of xs, masked positions excluded from the softmax. Returns the
    /// pooled vector and the full weight vector (zeros at masked rows) for
    /// diagnostics.
    pub fn attention_pool(
        &mut self,
        xs: Var,
        w: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<f64>)> {
        let (xv, wv, vv) = (&self.vals[xs.0], &self.vals[w.0], &self.vals[v.0]);
        if xv.rank() != 2 || wv.rank() != 2 || vv.rank() != 1 {
            return Err(Error::Shape(
                "attention_pool expects xs [n,h], w [h,a], v [a]".into(),
            ));
        }
        let (n, h) = (xv.dim(0), xv.dim(1));
        let a = vv.len();
        if wv.dim(0) != h || wv.dim(1) != a {
            return Err(Error::Shape(format!(
                "attention_pool mismatch: xs {}, w {}, v {}",
                xv.describe(),
                wv.describe(),
                vv.describe()
            )));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::Contract("attention mask length mismatch".into()));
            }
        }
        let active: Vec<usize> = match mask {
            Some(m) => (0..n).filter(|&i| m[i]).collect(),
            None => (0..n).collect(),
        };
        if active.is_empty() {
            return Err(Error::Pooling(
                "attention over a fully masked sequence".into(),
            ));
        }

        let k = active.len();
        let mut th = Tensor::zeros(&[k, a]);
        let mut scores = vec![0.0; k];
        {
            let xv = &self.vals[xs.0];
            let wv = &self.vals[w.0];
            let vv = &self.vals[v.0];
            for (r, &i) in active.iter().enumerate() {
                let xrow = xv.row(i);
                let trow = th.row_mut(r);
                for (j, &xj) in xrow.iter().enumerate() {
                    if xj != 0.0 {
                        for (tv, wvv) in trow.iter_mut().zip(wv.row(j)) {
                            *tv += xj * wvv;
                        }
                    }
                }
                let mut u = 0.0;
                for (tv, vvv) in trow.iter_mut().zip(vv.data()) {
                    *tv = libm::tanh(*tv);
                    u += *tv * vvv;
                }
                scores[r] = u;
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut alphas: Vec<f64> = scores.iter().map(|&u| libm::exp(u - max)).collect();
        let z: f64 = alphas.iter().sum();
        for al in &mut alphas {
            *al /= z;
        }

        let mut out = Tensor::zeros(&[h]);
        for (r, &i) in active.iter().enumerate() {
            let al = alphas[r];
            for (ov, xvv) in out.data_mut().iter_mut().zip(self.vals[xs.0].row(i)) {
                *ov += al * xvv;
            }
        }
        let mut full = vec![0.0; n];
        for (r, &i) in active.iter().enumerate() {
            full[i] = alphas[r];
        }

        let ov = self.push_val(out, "attention_pool")?;
        self.push_node(
            ov,
            Box::new(move |vals, g| {
                let xv = &vals[xs.0];
                let wv = &vals[w.0];
                let vv = &vals[v.0];
                let (n, h) = (xv.dim(0), xv.dim(1));
                let a = vv.len();
                let k = active.len();
                let gd = g.data();
                let mut dxs = Tensor::zeros(&[n, h]);
                let mut dw = Tensor::zeros(&[h, a]);
                let mut dv = Tensor::zeros(&[a]);

                let mut dal = vec![0.0; k];
                for (r, &i) in active.iter().enumerate() {
                    let xrow = xv.row(i);
                    let mut acc = 0.0;
                    for (gv, xvv) in gd.iter().zip(xrow) {
                        acc += gv * xvv;
                    }
                    dal[r] = acc;
                    let drow = dxs.row_mut(i);
                    let al = alphas[r];
                    for (dv_, gv) in drow.iter_mut().zip(gd) {
                        *dv_ += al * gv;
                    }
                }
                let s: f64 = alphas.iter().zip(&dal).map(|(a, d)| a * d).sum();
                let mut dt = vec![0.0; a];
                for (r, &i) in active.iter().enumerate() {
                    let du = alphas[r] * (dal[r] - s);
                    let trow = th.row(r);
                    for ((dtv, &tv), &vvv) in dt.iter_mut().zip(trow).zip(vv.data()) {
                        *dtv = du * vvv * (1.0 - tv * tv);
                    }
                    for (dvv, &tv) in dv.data_mut().iter_mut().zip(trow) {
                        *dvv += du * tv;
                    }
                    let xrow = xv.row(i);
                    let drow = dxs.row_mut(i);
                    for j in 0..h {
                        let wrow = wv.row(j);
                        let mut acc = 0.0;
                        for (wvv, dtv) in wrow.iter().zip(&dt) {
                            acc += wvv * dtv;
                        }
                        drow[j] += acc;
                        let xj = xrow[j];
                        if xj != 0.0 {
                            for (dwv, dtv) in dw.row_mut(j).iter_mut().zip(&dt) {
                                *dwv += xj * dtv;
                            }
                        }
                    }
                }
                vec![(xs.0, dxs), (w.0, dw), (v.0, dv)]
            }),
        );
        Ok((ov, full))
    }

    /// Arithmetic mean over the unmasked rows of xs: [n, h] -> [h].
    pub fn mean_pool(&mut self, xs: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = &self.vals[xs.0];
        if xv.rank() != 2 {
            return Err(Error::Shape("mean_pool expects xs [n,h]".into()));
        }
        let (n, h) = (xv.dim(0), xv.dim(1));
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::Contract("mean_pool mask length mismatch".into()));
            }
        }
        let active: Vec<usize> = match mask {
            Some(m) => (0..n).filter(|&i| m[i]).collect(),
            None => (0..n).collect(),
        };
        if active.is_empty() {
            return Err(Error::Pooling("mean over a fully masked sequence".into()));
        }
        let inv = 1.0 / active.len() as f64;
        let mut out = Tensor::zeros(&[h]);
        for &i in &active {
            for (ov, xvv) in out.data_mut().iter_mut().zip(self.vals[xs.0].row(i)) {
                *ov += inv * xvv;
            }
        }
        let ov = self.push_val(out, "mean_pool")?;
        self.push_node(
            ov,
            Box::new(move |vals, g| {
                let xv = &vals[xs.0];
                let (n, h) = (xv.dim(0), xv.dim(1));
                let mut dxs = Tensor::zeros(&[n, h]);
                for &i in &active {
                    for (dv, gv) in dxs.row_mut(i).iter_mut().zip(g.data()) {
                        *dv = inv * gv;
                    }
                }
                vec![(xs.0, dxs)]
            }),
        );
        Ok(ov)
    }

    /// Stacks rank-1 vars of equal length into a [n, d] matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Contract("stack of zero rows".into()));
        }
        let d = self.vals[rows[0].0].len();
        for &r in rows {
            let t = &self.vals[r.0];
            if t.rank() != 1 || t.len() != d {
                return Err(Error::Shape(format!(
                    "stack expects rank-1 rows of length {d}, got {}",
                    t.describe()
                )));
            }
        }
        let n = rows.len();
        let mut out = Tensor::zeros(&[n, d]);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.vals[r.0].data());
        }
        let parents: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let ov = self.push_val(out, "stack")?;
        self.push_node(
            ov,
            Box::new(move |_vals, g| {
                parents
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        (p, Tensor::from_vec(&[g.dim(1)], g.row(i).to_vec()).unwrap())
                    })
                    .collect()
            }),
        );
        Ok(ov)
    }

    /// Flattens each part and concatenates into one rank-1 tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".into()));
        }
        let total: usize = parts.iter().map(|p| self.vals[p.0].len()).sum();
        let mut data = Vec::with_capacity(total);
        for &p in parts {
            data.extend_from_slice(self.vals[p.0].data());
        }
        let parents: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = Tensor::from_vec(&[total], data)?;
        let ov = self.push_val(out, "concat")?;
        self.push_node(
            ov,
            Box::new(move |vals, g| {
                let gd = g.data();
                let mut at = 0;
                parents
                    .iter()
                    .map(|&p| {
                        let shape = vals[p].shape().to_vec();
                        let len = vals[p].len();
                        let slice = gd[at..at + len].to_vec();
                        at += len;
                        (p, Tensor::from_vec(&shape, slice).unwrap())
                    })
                    .collect()
            }),
        );
        Ok(ov)
    }

    /// Views a var under a new shape of equal volume.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.vals[x.0].clone().reshaped(shape)?;
        let ov = self.push_val(out, "reshape")?;
        self.push_node(
            ov,
            Box::new(move |vals, g| {
                let shape = vals[x.0].shape().to_vec();
                vec![(x.0, g.clone().reshaped(&shape).unwrap())]
            }),
        );
        Ok(ov)
    }

    /// Mean squared error over the unmasked elements of pred against a
    /// constant target. An all-masked (or empty) selection yields exactly
    /// zero with zero gradient.
    pub fn mse(&mut self, pred: Var, target: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
        let pv = &self.vals[pred.0];
        if pv.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "mse between {} and {}",
                pv.describe(),
                target.describe()
            )));
        }
        if let Some(m) = mask {
            if m.len() != pv.len() {
                return Err(Error::Contract("mse mask length mismatch".into()));
            }
        }
        target.ensure_finite("mse target")?;
        let m_count = match mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => pv.len(),
        };
        let val = if m_count == 0 {
            0.0
        } else {
            let mut acc = 0.0;
            for (i, (p, t)) in pv.data().iter().zip(target.data()).enumerate() {
                if mask.map_or(true, |m| m[i]) {
                    let d = p - t;
                    acc += d * d;
                }
            }
            acc / m_count as f64
        };
        let target = target.clone();
        let mask: Option<Vec<bool>> = mask.map(|m| m.to_vec());
        let ov = self.push_val(Tensor::scalar(val), "mse")?;
        self.push_node(
            ov,
            Box::new(move |vals, g| {
                let pv = &vals[pred.0];
                let mut dp = Tensor::zeros(&pv.shape().to_vec());
                if m_count > 0 {
                    let gs = g.data()[0] * 2.0 / m_count as f64;
                    for (i, ((dv, p), t)) in dp
                        .data_mut()
                        .iter_mut()
                        .zip(pv.data())
                        .zip(target.data())
                        .enumerate()
                    {
                        if mask.as_ref().map_or(true, |m| m[i]) {
                            *dv = gs * (p - t);
                        }
                    }
                }
                vec![(pred.0, dp)]
            }),
        );
        Ok(ov)
    }

    /// Reverse sweep from a scalar loss. Consumes the recorded nodes; the
    /// tape's values stay readable. Gradients of intermediates are dropped
    /// as soon as their producing node has run, so what remains afterwards
    /// is exactly the leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar {}",
                self.vals[loss.0].describe()
            )));
        }
        let shapes: Vec<Vec<usize>> = self.vals.iter().map(|t| t.shape().to_vec()).collect();
        let mut slots: Vec<Option<Tensor>> = (0..self.vals.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::scalar(1.0));
        let Tape { vals, nodes } = self;
        for node in nodes.drain(..).rev() {
            let Some(gout) = slots[node.out].take() else {
                continue;
            };
            for (p, g) in (node.back)(vals, &gout) {
                match &mut slots[p] {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { slots, shapes })
    }
}

/// Maximum relative disagreement between the analytic gradient of
/// `build(tape, inputs...)` and central finite differences, over every
/// element of every input. `build` must be deterministic: called repeatedly
/// with perturbed inputs, it has to construct the same graph each time (fix
/// any RNG seed inside the closure).
pub fn grad_check_multi<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.take_or_zeros(*var);
        for e in 0..inputs[k].len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + eps;
            let fp = eval(&work)?;
            work[k].data_mut()[e] = orig - eps;
            let fm = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around `grad_check_multi`.
pub fn grad_check<F>(build: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(|t, vars| build(t, vars[0]), core::slice::from_ref(input), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        // k=1 kernel that copies channel 0 to filter 0
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(&[3, 2], vec![1., 10., 2., 20., 3., 30.]).unwrap())
            .unwrap();
        let k = tape
            .leaf(Tensor::from_vec(&[1, 2, 1], vec![1., 0.]).unwrap())
            .unwrap();
        let b = tape.leaf(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv1d_same(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3.]);
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2])).unwrap();
        let k = tape.leaf(Tensor::zeros(&[2, 2, 1])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[1])).unwrap();
        assert!(matches!(
            tape.conv1d_same(x, k, b),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn conv_edges_use_zero_padding() {
        // averaging kernel of width 3 over a single channel
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(&[3, 1], vec![3., 6., 9.]).unwrap())
            .unwrap();
        let k = tape
            .leaf(Tensor::from_vec(&[3, 1, 1], vec![1., 1., 1.]).unwrap())
            .unwrap();
        let b = tape.leaf(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv1d_same(x, k, b).unwrap();
        // position 0 sees (pad, 3, 6), position 2 sees (6, 9, pad)
        assert_eq!(tape.value(y).data(), &[9., 18., 15.]);
    }

    #[test]
    fn attention_weights_sum_to_one_and_skip_masked() {
        let mut tape = Tape::new();
        let xs = tape
            .leaf(Tensor::from_vec(&[3, 2], vec![1., 0., 0., 1., 5., 5.]).unwrap())
            .unwrap();
        let w = tape.leaf(Tensor::full(&[2, 2], 0.3)).unwrap();
        let v = tape.leaf(t1(&[0.7, -0.2])).unwrap();
        let mask = [true, false, true];
        let (_, alphas) = tape.attention_pool(xs, w, v, Some(&mask)).unwrap();
        assert_eq!(alphas.len(), 3);
        assert_eq!(alphas[1], 0.0);
        let s: f64 = alphas.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_all_masked_is_an_error() {
        let mut tape = Tape::new();
        let xs = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
        let w = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
        let v = tape.leaf(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            tape.attention_pool(xs, w, v, Some(&[false, false])),
            Err(Error::Pooling(_))
        ));
    }

    #[test]
    fn dropout_eval_is_identity_var() {
        let mut tape = Tape::new();
        let mut r = rng::stream(1, &[rng::domain::DROPOUT]);
        let x = tape.leaf(t1(&[1., 2., 3.])).unwrap();
        let y = tape.dropout(x, 0.5, false, &mut r).unwrap();
        assert_eq!(x, y);
        let z = tape.dropout(x, 0.0, true, &mut r).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut tape = Tape::new();
        let mut r = rng::stream(1, &[rng::domain::DROPOUT]);
        let x = tape.leaf(t1(&[1.])).unwrap();
        assert!(matches!(
            tape.dropout(x, 1.0, true, &mut r),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            tape.dropout(x, -0.1, true, &mut r),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn dropout_kept_units_are_rescaled() {
        let mut tape = Tape::new();
        let mut r = rng::stream(9, &[rng::domain::DROPOUT, 4]);
        let x = tape.leaf(Tensor::full(&[1000], 1.0)).unwrap();
        let y = tape.dropout(x, 0.25, true, &mut r).unwrap();
        let scale = 1.0 / 0.75;
        let mut kept = 0usize;
        for v in tape.value(y).data() {
            assert!(*v == 0.0 || (*v - scale).abs() < 1e-15);
            if *v != 0.0 {
                kept += 1;
            }
        }
        let frac = kept as f64 / 1000.0;
        assert!((frac - 0.75).abs() < 0.05, "kept fraction {frac}");
    }

    #[test]
    fn embed_masked_rows_are_zero_and_get_no_grad() {
        let mut tape = Tape::new();
        let table = tape
            .leaf(Tensor::from_vec(&[3, 2], vec![0., 0., 10., 11., 20., 21.]).unwrap())
            .unwrap();
        let e = tape.embed(table, &[2, 1, 2], &[true, false, true]).unwrap();
        assert_eq!(tape.value(e).row(1), &[0., 0.]);
        assert_eq!(tape.value(e).row(0), &[20., 21.]);
        let target = Tensor::zeros(&[3, 2]);
        let loss = tape.mse(e, &target, None).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let dt = grads.take_or_zeros(table);
        // masked gather of row 1 contributes nothing
        assert_eq!(dt.row(1), &[0., 0.]);
        // row 0 of the table was never gathered: stays zero (padding row)
        assert_eq!(dt.row(0), &[0., 0.]);
        assert!(dt.row(2).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mse_empty_mask_is_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let p = tape.leaf(t1(&[1., 2.])).unwrap();
        let loss = tape
            .mse(p, &t1(&[0., 0.]), Some(&[false, false]))
            .unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take_or_zeros(p).data(), &[0., 0.]);
    }

    #[test]
    fn unused_leaves_have_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[1.])).unwrap();
        let b = tape.leaf(t1(&[2.])).unwrap();
        let loss = tape.mse(a, &t1(&[0.]), None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(b).is_none());
        assert!(grads.get(a).is_some());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[1., 2.])).unwrap();
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_var_accumulates_gradient() {
        // loss = mse(x + x, t): d/dx = 2 * 2 * (2x - t) / n
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[3.0])).unwrap();
        let y = tape.add(x, x).unwrap();
        let loss = tape.mse(y, &t1(&[0.0]), None).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take_or_zeros(x);
        assert!((g.data()[0] - 24.0).abs() < 1e-12);
    }

    #[test]
    fn linear_matches_finite_differences() {
        let mut r = rng::stream(3, &[99]);
        let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[2], -1.0, 1.0, &mut r);
        let tgt = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut r);
        let err = grad_check_multi(
            |tape, vars| {
                let y = tape.linear(vars[0], vars[1], vars[2])?;
                tape.mse(y, &tgt, None)
            },
            &[x, w, b],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err <= GRAD_CHECK_TOL, "max rel err {err}");
    }

    #[test]
    fn stack_and_concat_round_trip_gradients() {
        let mut r = rng::stream(5, &[98]);
        let a = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let tgt = Tensor::uniform(&[6], -1.0, 1.0, &mut r);
        let err = grad_check_multi(
            |tape, vars| {
                let m = tape.stack(&[vars[0], vars[1], vars[0]])?;
                let flat = tape.reshape(m, &[9])?;
                let c = tape.concat(&[flat])?;
                let first_six = tape.reshape(c, &[9])?;
                // compare only through mse over a fixed-size slice via mask
                let mut mask = vec![true; 9];
                mask[6..].fill(false);
                let mut padded = tgt.data().to_vec();
                padded.extend_from_slice(&[0.0; 3]);
                let t9 = Tensor::from_vec(&[9], padded).unwrap();
                tape.mse(first_six, &t9, Some(&mask))
            },
            &[a, b],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err <= GRAD_CHECK_TOL, "max rel err {err}");
    }
}
