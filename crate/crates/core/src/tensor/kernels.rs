// Raw loops behind the graph operations. All inner products accumulate in f64.

use super::Element;

/// `out[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul<F: Element>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let av = av.f64();
            let brow = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv.f64();
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = F::of(*s);
        }
    }
    out
}

/// `da[m,k] += g[m,n] · b[k,n]^T`
pub(crate) fn matmul_grad_lhs<F: Element>(g: &[F], b: &[F], m: usize, k: usize, n: usize, da: &mut [F]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += F::of(dot(grow, brow));
        }
    }
}

/// `db[k,n] += a[m,k]^T · g[m,n]`
pub(crate) fn matmul_grad_rhs<F: Element>(a: &[F], g: &[F], m: usize, k: usize, n: usize, db: &mut [F]) {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let av = av.f64();
            for (s, &gv) in acc[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *s += av * gv.f64();
            }
        }
    }
    for (d, s) in db.iter_mut().zip(&acc) {
        *d += F::of(*s);
    }
}

#[inline]
pub(crate) fn dot<F: Element>(a: &[F], b: &[F]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.f64() * y.f64()).sum()
}

#[inline]
pub(crate) fn norm<F: Element>(a: &[F]) -> f64 {
    dot(a, a).sqrt()
}

/// Geometry of a same-length dilated convolution over `[batch, time, channels]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub time: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub taps: usize,
    pub dilation: usize,
}

impl ConvDims {
    /// Input frame read by tap `j` at output frame `t`, if inside the sequence.
    #[inline]
    fn source(&self, t: usize, j: usize) -> Option<usize> {
        let half = (self.taps - 1) / 2;
        let s = t as isize + (j as isize - half as isize) * self.dilation as isize;
        (s >= 0 && (s as usize) < self.time).then_some(s as usize)
    }
}

pub(crate) fn conv1d<F: Element>(x: &[F], kernel: &[F], d: ConvDims) -> Vec<F> {
    let mut out = vec![F::zero(); d.batch * d.time * d.c_out];
    let mut acc = vec![0.0f64; d.c_out];
    for b in 0..d.batch {
        for t in 0..d.time {
            acc.fill(0.0);
            for j in 0..d.taps {
                let Some(s) = d.source(t, j) else { continue };
                let xrow = &x[(b * d.time + s) * d.c_in..][..d.c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == F::zero() {
                        continue;
                    }
                    let xv = xv.f64();
                    let krow = &kernel[(j * d.c_in + ci) * d.c_out..][..d.c_out];
                    for (a, &kv) in acc.iter_mut().zip(krow) {
                        *a += xv * kv.f64();
                    }
                }
            }
            for (o, a) in out[(b * d.time + t) * d.c_out..][..d.c_out]
                .iter_mut()
                .zip(&acc)
            {
                *o = F::of(*a);
            }
        }
    }
    out
}

pub(crate) fn conv1d_grad_input<F: Element>(g: &[F], kernel: &[F], d: ConvDims, dx: &mut [F]) {
    for b in 0..d.batch {
        for t in 0..d.time {
            let grow = &g[(b * d.time + t) * d.c_out..][..d.c_out];
            for j in 0..d.taps {
                let Some(s) = d.source(t, j) else { continue };
                let dxrow = &mut dx[(b * d.time + s) * d.c_in..][..d.c_in];
                for (ci, dv) in dxrow.iter_mut().enumerate() {
                    let krow = &kernel[(j * d.c_in + ci) * d.c_out..][..d.c_out];
                    *dv += F::of(dot(grow, krow));
                }
            }
        }
    }
}

pub(crate) fn conv1d_grad_kernel<F: Element>(x: &[F], g: &[F], d: ConvDims, dk: &mut [F]) {
    let mut acc = vec![0.0f64; dk.len()];
    for b in 0..d.batch {
        for t in 0..d.time {
            let grow = &g[(b * d.time + t) * d.c_out..][..d.c_out];
            for j in 0..d.taps {
                let Some(s) = d.source(t, j) else { continue };
                let xrow = &x[(b * d.time + s) * d.c_in..][..d.c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == F::zero() {
                        continue;
                    }
                    let xv = xv.f64();
                    let arow = &mut acc[(j * d.c_in + ci) * d.c_out..][..d.c_out];
                    for (a, &gv) in arow.iter_mut().zip(grow) {
                        *a += xv * gv.f64();
                    }
                }
            }
        }
    }
    for (o, a) in dk.iter_mut().zip(&acc) {
        *o += F::of(*a);
    }
}
