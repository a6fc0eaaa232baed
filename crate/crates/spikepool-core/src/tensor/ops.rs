//! Differentiable tensor operations, recorded on a [`Tape`].

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_shapes, broadcast_strides, for_each_broadcast2, strides_for, Tape, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

impl Tape {
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryKind::Div, a, b)
    }

    /// Elementwise binary op with trailing-dimension broadcasting.
    /// Division propagates IEEE inf/nan; there is no zero special case.
    pub fn elementwise(&self, kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out_shape = broadcast_shapes(a.shape(), b.shape())?;
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        {
            let av = a.data();
            let bv = b.data();
            if a.shape() == b.shape() {
                match kind {
                    BinaryKind::Add => binary_zip(&mut data, &av, &bv, |x, y| x + y),
                    BinaryKind::Sub => binary_zip(&mut data, &av, &bv, |x, y| x - y),
                    BinaryKind::Mul => binary_zip(&mut data, &av, &bv, |x, y| x * y),
                    BinaryKind::Div => binary_zip(&mut data, &av, &bv, |x, y| x / y),
                }
            } else {
                let sa = broadcast_strides(a.shape(), &out_shape);
                let sb = broadcast_strides(b.shape(), &out_shape);
                for_each_broadcast2(&out_shape, &sa, &sb, |i, ia, ib| {
                    data[i] = match kind {
                        BinaryKind::Add => av[ia] + bv[ib],
                        BinaryKind::Sub => av[ia] - bv[ib],
                        BinaryKind::Mul => av[ia] * bv[ib],
                        BinaryKind::Div => av[ia] / bv[ib],
                    };
                });
            }
        }
        let out = Tensor::new_raw(out_shape.clone(), data);
        if self.should_record(&[a, b]) {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    let sa = broadcast_strides(a.shape(), o.shape());
                    let sb = broadcast_strides(b.shape(), o.shape());
                    if a.is_tracked() {
                        let bv = b.data();
                        a.accum_grad(|ga| {
                            for_each_broadcast2(o.shape(), &sa, &sb, |i, ia, ib| match kind {
                                BinaryKind::Add => ga[ia] += dout[i],
                                BinaryKind::Sub => ga[ia] += dout[i],
                                BinaryKind::Mul => ga[ia] += dout[i] * bv[ib],
                                BinaryKind::Div => ga[ia] += dout[i] / bv[ib],
                            });
                        });
                    }
                    if b.is_tracked() {
                        let av = a.data();
                        let bv = b.data();
                        b.accum_grad(|gb| {
                            for_each_broadcast2(o.shape(), &sa, &sb, |i, ia, ib| match kind {
                                BinaryKind::Add => gb[ib] += dout[i],
                                BinaryKind::Sub => gb[ib] -= dout[i],
                                BinaryKind::Mul => gb[ib] += dout[i] * av[ia],
                                BinaryKind::Div => {
                                    gb[ib] -= dout[i] * av[ia] / (bv[ib] * bv[ib])
                                }
                            });
                        });
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data().iter().map(|&x| x + c).collect();
        let out = Tensor::new_raw(a.shape().to_vec(), data);
        if self.should_record(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    a.accum_grad(|ga| {
                        for (g, d) in ga.iter_mut().zip(dout) {
                            *g += d;
                        }
                    });
                }),
            );
        }
        out
    }

    pub fn mul_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new_raw(a.shape().to_vec(), data);
        if self.should_record(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    a.accum_grad(|ga| {
                        for (g, d) in ga.iter_mut().zip(dout) {
                            *g += d * c;
                        }
                    });
                }),
            );
        }
        out
    }

    pub fn neg(&self, a: &Tensor) -> Tensor {
        self.mul_scalar(a, -1.0)
    }

    pub fn relu(&self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new_raw(a.shape().to_vec(), data);
        if self.should_record(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    let av = a.data();
                    a.accum_grad(|ga| {
                        for i in 0..ga.len() {
                            if av[i] > 0.0 {
                                ga[i] += dout[i];
                            }
                        }
                    });
                }),
            );
        }
        out
    }

    pub fn exp(&self, a: &Tensor) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|&x| x.exp()).collect();
        let out = Tensor::new_raw(a.shape().to_vec(), data);
        if self.should_record(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    let ov = o.data();
                    a.accum_grad(|ga| {
                        for i in 0..ga.len() {
                            ga[i] += dout[i] * ov[i];
                        }
                    });
                }),
            );
        }
        out
    }

    pub fn ln(&self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|&x| x.ln()).collect();
        let out = Tensor::new_raw(a.shape().to_vec(), data);
        if self.should_record(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    let av = a.data();
                    a.accum_grad(|ga| {
                        for i in 0..ga.len() {
                            ga[i] += dout[i] / av[i];
                        }
                    });
                }),
            );
        }
        out
    }

    pub fn sqrt(&self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|&x| x.sqrt()).collect();
        let out = Tensor::new_raw(a.shape().to_vec(), data);
        if self.should_record(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    let ov = o.data();
                    a.accum_grad(|ga| {
                        for i in 0..ga.len() {
                            ga[i] += dout[i] / (2.0 * ov[i]);
                        }
                    });
                }),
            );
        }
        out
    }

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`;
    /// leading batch dimensions broadcast.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.ndim() < 2 || b.ndim() < 2 {
            return Err(Error::Dim(format!(
                "matmul requires rank >= 2, got {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, ka) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
        let (kb, n) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
        if ka != kb {
            return Err(Error::MatmulDims {
                m,
                k_left: ka,
                k_right: kb,
                n,
            });
        }
        let a_batch = &a.shape()[..a.ndim() - 2];
        let b_batch = &b.shape()[..b.ndim() - 2];
        let batch_shape = broadcast_shapes(a_batch, b_batch)?;
        let batch_count: usize = batch_shape.iter().product();
        let sa = broadcast_strides(a_batch, &batch_shape);
        let sb = broadcast_strides(b_batch, &batch_shape);

        let mut out_shape = batch_shape.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![0.0; batch_count * m * n];
        {
            let av = a.data();
            let bv = b.data();
            for_each_broadcast2(&batch_shape, &sa, &sb, |i, ia, ib| {
                gemm_nn(
                    &mut data[i * m * n..(i + 1) * m * n],
                    &av[ia * m * ka..(ia + 1) * m * ka],
                    &bv[ib * ka * n..(ib + 1) * ka * n],
                    m,
                    ka,
                    n,
                );
            });
        }
        let out = Tensor::new_raw(out_shape, data);
        if self.should_record(&[a, b]) {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            let (bs, sa, sb) = (batch_shape, sa, sb);
            let k = ka;
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    if a.is_tracked() {
                        let bv = b.data();
                        a.accum_grad(|ga| {
                            for_each_broadcast2(&bs, &sa, &sb, |i, ia, ib| {
                                gemm_nt(
                                    &mut ga[ia * m * k..(ia + 1) * m * k],
                                    &dout[i * m * n..(i + 1) * m * n],
                                    &bv[ib * k * n..(ib + 1) * k * n],
                                    m,
                                    n,
                                    k,
                                );
                            });
                        });
                    }
                    if b.is_tracked() {
                        let av = a.data();
                        b.accum_grad(|gb| {
                            for_each_broadcast2(&bs, &sa, &sb, |i, ia, ib| {
                                gemm_tn(
                                    &mut gb[ib * k * n..(ib + 1) * k * n],
                                    &av[ia * m * k..(ia + 1) * m * k],
                                    &dout[i * m * n..(i + 1) * m * n],
                                    m,
                                    k,
                                    n,
                                );
                            });
                        });
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn sum(&self, a: &Tensor, axes: Option<&[usize]>) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    pub fn mean(&self, a: &Tensor, axes: Option<&[usize]>) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    pub fn max(&self, a: &Tensor, axes: Option<&[usize]>) -> Result<Tensor> {
        self.reduce(ReduceKind::Max, a, axes)
    }

    /// Reduction over `axes` (`None` = all axes, producing a rank-0 tensor).
    /// Reduced axes are dropped from the shape. Max routes its gradient to
    /// the argmax element; ties break to the lowest flat index.
    pub fn reduce(&self, kind: ReduceKind, a: &Tensor, axes: Option<&[usize]>) -> Result<Tensor> {
        let rank = a.ndim();
        let reduce_flags = match axes {
            None => vec![true; rank],
            Some(list) => {
                if list.is_empty() {
                    return Err(Error::InvalidAxis { axis: 0, rank });
                }
                let mut flags = vec![false; rank];
                for &ax in list {
                    if ax >= rank {
                        return Err(Error::InvalidAxis { axis: ax, rank });
                    }
                    if flags[ax] {
                        return Err(Error::InvalidAxis { axis: ax, rank });
                    }
                    flags[ax] = true;
                }
                flags
            }
        };
        let out_shape: Vec<usize> = a
            .shape()
            .iter()
            .zip(&reduce_flags)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let out_numel: usize = out_shape.iter().product();
        let count: usize = a
            .shape()
            .iter()
            .zip(&reduce_flags)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        if count == 0 {
            return Err(Error::Dim("reduction over an empty axis".into()));
        }

        // Stride of each input axis in the output frame (0 when reduced).
        let out_strides = strides_for(&out_shape);
        let mut map_strides = vec![0usize; rank];
        let mut kept = 0;
        for d in 0..rank {
            if !reduce_flags[d] {
                map_strides[d] = out_strides[kept];
                kept += 1;
            }
        }

        let mut data = match kind {
            ReduceKind::Max => vec![f64::NEG_INFINITY; out_numel],
            _ => vec![0.0; out_numel],
        };
        let mut argmax = if kind == ReduceKind::Max {
            vec![usize::MAX; out_numel]
        } else {
            Vec::new()
        };
        {
            let av = a.data();
            for_each_mapped(a.shape(), &map_strides, |i, oi| match kind {
                ReduceKind::Sum | ReduceKind::Mean => data[oi] += av[i],
                ReduceKind::Max => {
                    if av[i] > data[oi] || argmax[oi] == usize::MAX {
                        data[oi] = av[i];
                        argmax[oi] = i;
                    }
                }
            });
        }
        if kind == ReduceKind::Mean {
            let inv = 1.0 / count as f64;
            for v in &mut data {
                *v *= inv;
            }
        }
        let out = Tensor::new_raw(out_shape, data);
        if self.should_record(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            let map_strides = map_strides.clone();
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    a.accum_grad(|ga| match kind {
                        ReduceKind::Sum => {
                            for_each_mapped(a.shape(), &map_strides, |i, oi| ga[i] += dout[oi]);
                        }
                        ReduceKind::Mean => {
                            let inv = 1.0 / count as f64;
                            for_each_mapped(a.shape(), &map_strides, |i, oi| {
                                ga[i] += dout[oi] * inv;
                            });
                        }
                        ReduceKind::Max => {
                            for (oi, &src) in argmax.iter().enumerate() {
                                ga[src] += dout[oi];
                            }
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// View with a new shape; shares storage with the input.
    pub fn reshape(&self, a: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let new_numel: usize = new_shape.iter().product();
        if new_numel != a.numel() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} ({} values) to {:?} ({} values)",
                a.shape(),
                a.numel(),
                new_shape,
                new_numel
            )));
        }
        let out = Tensor::view_raw(new_shape.to_vec(), a.data_rc());
        if self.should_record(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    a.accum_grad(|ga| {
                        for (g, d) in ga.iter_mut().zip(dout) {
                            *g += d;
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Axis permutation (materializes a reordered copy).
    pub fn permute(&self, a: &Tensor, perm: &[usize]) -> Result<Tensor> {
        let rank = a.ndim();
        if perm.len() != rank {
            return Err(Error::InvalidShape(format!(
                "permutation {:?} does not match rank {}",
                perm, rank
            )));
        }
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(Error::InvalidShape(format!("invalid permutation {:?}", perm)));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape()[p]).collect();
        // Input-frame strides arranged so walking the output visits a correctly.
        let in_strides = strides_for(a.shape());
        let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = vec![0.0; a.numel()];
        {
            let av = a.data();
            for_each_mapped(&out_shape, &mapped, |oi, ii| data[oi] = av[ii]);
        }
        let out = Tensor::new_raw(out_shape.clone(), data);
        if self.should_record(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    a.accum_grad(|ga| {
                        for_each_mapped(&out_shape, &mapped, |oi, ii| ga[ii] += dout[oi]);
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&self, a: &Tensor) -> Result<Tensor> {
        let rank = a.ndim();
        if rank < 2 {
            return Err(Error::Dim(format!(
                "transpose_last2 requires rank >= 2, got {:?}",
                a.shape()
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Slice along axis 0: `x[index]` with the leading axis dropped.
    pub fn select0(&self, a: &Tensor, index: usize) -> Result<Tensor> {
        if a.ndim() == 0 {
            return Err(Error::Dim("select0 on a rank-0 tensor".into()));
        }
        let len0 = a.shape()[0];
        if index >= len0 {
            return Err(Error::Dim(format!(
                "select0 index {} out of bounds for axis of size {}",
                index, len0
            )));
        }
        let chunk = a.numel() / len0;
        let data = a.data()[index * chunk..(index + 1) * chunk].to_vec();
        let out = Tensor::new_raw(a.shape()[1..].to_vec(), data);
        if self.should_record(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    a.accum_grad(|ga| {
                        for (g, d) in ga[index * chunk..(index + 1) * chunk].iter_mut().zip(dout) {
                            *g += d;
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack0(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dim("stack0 of zero tensors".into()));
        }
        let base = parts[0].shape().to_vec();
        for p in parts {
            if p.shape() != base.as_slice() {
                return Err(Error::ShapeMismatch {
                    left: base.clone(),
                    right: p.shape().to_vec(),
                    context: "stack0".into(),
                });
            }
        }
        let chunk: usize = base.iter().product();
        let mut data = Vec::with_capacity(chunk * parts.len());
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let mut out_shape = vec![parts.len()];
        out_shape.extend_from_slice(&base);
        let out = Tensor::new_raw(out_shape, data);
        let refs: Vec<&Tensor> = parts.iter().collect();
        if self.should_record(&refs) {
            let parts: Vec<Tensor> = parts.to_vec();
            let o = out.clone();
            self.record(
                &out,
                Box::new(move || {
                    let dout = o.grad_ref();
                    let Some(dout) = dout.as_ref() else { return };
                    for (idx, p) in parts.iter().enumerate() {
                        if !p.is_tracked() {
                            continue;
                        }
                        p.accum_grad(|gp| {
                            for (g, d) in gp.iter_mut().zip(&dout[idx * chunk..(idx + 1) * chunk])
                            {
                                *g += d;
                            }
                        });
                    }
                }),
            );
        }
        Ok(out)
    }
}

fn binary_zip(out: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = f(x, y);
    }
}

/// Visits every flat index of `shape` together with its mapped offset under
/// `strides` (same odometer as broadcasting, single operand).
pub(crate) fn for_each_mapped(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut coords = vec![0usize; rank];
    let mut mapped = 0usize;
    for i in 0..numel {
        f(i, mapped);
        for d in (0..rank).rev() {
            coords[d] += 1;
            mapped += strides[d];
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
            mapped -= strides[d] * shape[d];
        }
    }
}

/// C[m,n] += A[m,k] B[k,n]. Zero rows of A are skipped, which pays off on
/// binary spike inputs.
pub(crate) fn gemm_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,k] += A[m,n] B[k,n]^T (row-by-row dot products).
pub(crate) fn gemm_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (p, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *cv += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T B[m,n] (axpy over rows of B).
pub(crate) fn gemm_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_basic() {
        let tape = Tape::new();
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        let c = tape.add(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn mul_identity_passes_grad_through() {
        let tape = Tape::new();
        let x = t(&[3], &[1.0, -2.0, 5.0]).with_grad();
        let one = Tensor::scalar(1.0);
        let y = tape.mul(&x, &one).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        let loss = tape.sum(&y, None).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum() {
        // d/dx sum(x*x) = 2x
        let tape = Tape::new();
        let x = t(&[3], &[1.0, 2.0, 3.0]).with_grad();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq, None).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[4], &[0.0; 4]);
        let err = tape.add(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "got: {msg}");
    }

    #[test]
    fn division_propagates_ieee() {
        let tape = Tape::new();
        let a = t(&[2], &[1.0, 0.0]);
        let b = t(&[2], &[0.0, 0.0]);
        let c = tape.div(&a, &b).unwrap();
        assert!(c.to_vec()[0].is_infinite());
        assert!(c.to_vec()[1].is_nan());
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(tape.matmul(&eye, &m).unwrap().to_vec(), m.to_vec());

        let r = t(&[1, 2], &[1.0, 2.0]);
        let c = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(tape.matmul(&r, &c).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_grad_matches_hand_value() {
        // d sum(A@B) / dA for A=[[1,1]], B=[[2],[3]] is [[2,3]]
        let tape = Tape::new();
        let a = t(&[1, 2], &[1.0, 1.0]).with_grad();
        let b = t(&[2, 1], &[2.0, 3.0]).with_grad();
        let c = tape.matmul(&a, &b).unwrap();
        let loss = tape.sum(&c, None).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 3.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn matmul_inner_dim_error() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            tape.matmul(&a, &b),
            Err(Error::MatmulDims { k_left: 3, k_right: 2, .. })
        ));
    }

    #[test]
    fn batched_matmul_broadcasts() {
        let tape = Tape::new();
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]); // [2,1,2]
        let b = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]); // identity, batch-broadcast
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 2]);
        assert_eq!(c.to_vec(), a.to_vec());
    }

    #[test]
    fn sum_axis_and_mean() {
        let tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = tape.sum(&a, Some(&[1])).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.to_vec(), vec![3.0, 7.0]);
        let m = tape.mean(&t(&[2], &[2.0, 4.0]), None).unwrap();
        assert_eq!(m.ndim(), 0);
        assert_eq!(m.item(), 3.0);
    }

    #[test]
    fn max_backward_ties_to_lowest_index() {
        let tape = Tape::new();
        let x = t(&[3], &[1.0, 3.0, 3.0]).with_grad();
        let m = tape.max(&x, None).unwrap();
        assert_eq!(m.item(), 3.0);
        tape.backward(&m).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn invalid_axis_rejected() {
        let tape = Tape::new();
        let a = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            tape.sum(&a, Some(&[2])),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
        assert!(tape.sum(&a, Some(&[0, 0])).is_err());
    }

    #[test]
    fn backward_of_sum_gives_ones_and_clears_tape() {
        let tape = Tape::new();
        let x = t(&[3], &[5.0, 6.0, 7.0]).with_grad();
        let loss = tape.sum(&x, None).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(tape.num_nodes(), 0);
        // second backward: tape is gone
        assert!(matches!(tape.backward(&loss), Err(Error::NoTape)));
    }

    #[test]
    fn zero_times_x_has_zero_grad() {
        let tape = Tape::new();
        let x = t(&[2], &[3.0, 4.0]).with_grad();
        let y = tape.mul_scalar(&x, 0.0);
        let loss = tape.sum(&y, None).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = t(&[2], &[1.0, 2.0]).with_grad();
        let y = tape.mul_scalar(&x, 2.0);
        assert!(matches!(
            tape.backward(&y),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn broadcast_backward_sums_over_broadcast_axes() {
        let tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad();
        let b = t(&[2], &[10.0, 20.0]).with_grad();
        let c = tape.mul(&a, &b).unwrap();
        let loss = tape.sum(&c, None).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![10.0, 20.0, 10.0, 20.0]);
        // db = sum over rows of a
        assert_eq!(b.grad().unwrap(), vec![4.0, 6.0]);
    }

    #[test]
    fn reshape_shares_storage_and_routes_grad() {
        let tape = Tape::new();
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad();
        let y = tape.reshape(&x, &[4]).unwrap();
        let loss = tape.sum(&y, None).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
        assert!(tape.reshape(&x, &[3]).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let tape = Tape::new();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = tape.permute(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let z = tape.permute(&y, &[1, 0]).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());
    }

    #[test]
    fn select_stack_roundtrip_with_grads() {
        let tape = Tape::new();
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad();
        let a = tape.select0(&x, 0).unwrap();
        let b = tape.select0(&x, 1).unwrap();
        let y = tape.stack0(&[b, a]).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum(&y, None).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = t(&[2], &[1.0, 2.0]).with_grad();
        let y = tape.mul_scalar(&x, 3.0);
        assert_eq!(y.to_vec(), vec![3.0, 6.0]);
        assert_eq!(tape.num_nodes(), 0);
        let loss = tape.sum(&y, None).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::NoTape)));
    }
}
