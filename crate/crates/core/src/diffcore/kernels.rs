//! Numeric kernels shared by forward and adjoint passes.

use rayon::prelude::*;

use crate::tensor::{Shape, Tensor};

/// Runs `f(row_index, row)` over every row of `out`, in parallel when the
/// current rayon pool has more than one thread. Each row is written by
/// exactly one closure call, so results do not depend on the thread count.
pub(crate) fn for_each_row(out: &mut [f64], row_len: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    if row_len == 0 {
        return;
    }
    if rayon::current_num_threads() > 1 && out.len() >= 4096 {
        out.par_chunks_mut(row_len).enumerate().for_each(|(y, row)| f(y, row));
    } else {
        out.chunks_mut(row_len).enumerate().for_each(|(y, row)| f(y, row));
    }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// 3x3 mean filter with replicate padding, evaluated as two separable passes.
pub(crate) fn box3(input: &Tensor) -> Tensor {
    let Shape { height: h, width: w, channels: ch } = input.shape();
    let src = input.data();
    let stride = w * ch;
    let mut horiz = vec![0.0; src.len()];
    for_each_row(&mut horiz, stride, |y, row| {
        let s = &src[y * stride..(y + 1) * stride];
        if w == 1 {
            for (o, &v) in row.iter_mut().zip(s) {
                *o = 3.0 * v;
            }
            return;
        }
        for c in 0..ch {
            row[c] = 2.0 * s[c] + s[ch + c];
            let last = (w - 1) * ch + c;
            row[last] = s[last - ch] + 2.0 * s[last];
        }
        let inner = &mut row[ch..stride - ch];
        let (l, m, r) = (&s[..stride - 2 * ch], &s[ch..stride - ch], &s[2 * ch..]);
        for (((o, &l), &m), &r) in inner.iter_mut().zip(l).zip(m).zip(r) {
            *o = l + m + r;
        }
    });
    let mut out = vec![0.0; src.len()];
    for_each_row(&mut out, stride, |y, row| {
        let u = clamp_index(y as isize - 1, h);
        let d = clamp_index(y as isize + 1, h);
        let (a, b, c) = (
            &horiz[u * stride..(u + 1) * stride],
            &horiz[y * stride..(y + 1) * stride],
            &horiz[d * stride..(d + 1) * stride],
        );
        for (((o, &a), &b), &c) in row.iter_mut().zip(a).zip(b).zip(c) {
            *o = (a + b + c) / 9.0;
        }
    });
    Tensor::from_vec(input.shape(), out).expect("shape preserved")
}

/// Adjoint of [`box3`]: scatters each output adjoint back onto the clamped
/// source taps.
pub(crate) fn box3_adjoint(grad_out: &Tensor) -> Tensor {
    let Shape { height: h, width: w, channels: ch } = grad_out.shape();
    let g = grad_out.data();
    // Transpose of the vertical pass.
    let mut mid = vec![0.0; g.len()];
    for y in 0..h {
        let u = clamp_index(y as isize - 1, h);
        let d = clamp_index(y as isize + 1, h);
        for i in 0..w * ch {
            let v = g[y * w * ch + i] / 9.0;
            mid[u * w * ch + i] += v;
            mid[y * w * ch + i] += v;
            mid[d * w * ch + i] += v;
        }
    }
    // Transpose of the horizontal pass.
    let mut out = vec![0.0; g.len()];
    for y in 0..h {
        for x in 0..w {
            let l = clamp_index(x as isize - 1, w);
            let r = clamp_index(x as isize + 1, w);
            for c in 0..ch {
                let v = mid[(y * w + x) * ch + c];
                out[(y * w + l) * ch + c] += v;
                out[(y * w + x) * ch + c] += v;
                out[(y * w + r) * ch + c] += v;
            }
        }
    }
    Tensor::from_vec(grad_out.shape(), out).expect("shape preserved")
}

/// Bilinear stencil for one continuous coordinate along an axis of length `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: f64,
    /// The raw coordinate was outside `[0, n-1]` and got clamped.
    pub clamped: bool,
}

#[inline]
pub(crate) fn tap(coord: f64, n: usize) -> Tap {
    let max = (n - 1) as f64;
    let clamped = !(0.0..=max).contains(&coord);
    let c = coord.clamp(0.0, max);
    if n == 1 {
        return Tap { lo: 0, hi: 0, frac: 0.0, clamped };
    }
    let lo = (c.floor() as usize).min(n - 2);
    Tap { lo, hi: lo + 1, frac: c - lo as f64, clamped }
}

/// Bilinear gather of `src` at per-pixel coordinates `(u, v)`.
pub(crate) fn gather(src: &Tensor, u: &Tensor, v: &Tensor) -> Tensor {
    let Shape { width: sw, height: sh, channels: ch } = src.shape();
    let out_shape = u.shape().with_channels(ch);
    let w = out_shape.width;
    let s = src.data();
    let (ud, vd) = (u.data(), v.data());
    let mut out = vec![0.0; out_shape.len()];
    for_each_row(&mut out, w * ch, |y, row| {
        for x in 0..w {
            let tx = tap(ud[y * w + x], sw);
            let ty = tap(vd[y * w + x], sh);
            for c in 0..ch {
                let p = |yy: usize, xx: usize| s[(yy * sw + xx) * ch + c];
                let top = (1.0 - tx.frac) * p(ty.lo, tx.lo) + tx.frac * p(ty.lo, tx.hi);
                let bot = (1.0 - tx.frac) * p(ty.hi, tx.lo) + tx.frac * p(ty.hi, tx.hi);
                row[x * ch + c] = (1.0 - ty.frac) * top + ty.frac * bot;
            }
        }
    });
    Tensor::from_vec(out_shape, out).expect("gather shape")
}

/// Adjoints of [`gather`] with respect to the source image and both
/// coordinate fields. Clamped coordinates receive zero gradient.
pub(crate) fn gather_adjoint(
    src: &Tensor,
    u: &Tensor,
    v: &Tensor,
    grad_out: &Tensor,
    want_src: bool,
    want_coords: bool,
) -> (Option<Tensor>, Option<(Tensor, Tensor)>) {
    let Shape { width: sw, height: sh, channels: ch } = src.shape();
    let Shape { height: h, width: w, .. } = u.shape();
    let s = src.data();
    let g = grad_out.data();
    let mut gs = want_src.then(|| vec![0.0; s.len()]);
    let mut gu = want_coords.then(|| vec![0.0; h * w]);
    let mut gv = want_coords.then(|| vec![0.0; h * w]);
    for i in 0..h * w {
        let tx = tap(u.data()[i], sw);
        let ty = tap(v.data()[i], sh);
        let (mut du, mut dv) = (0.0, 0.0);
        for c in 0..ch {
            let go = g[i * ch + c];
            if go == 0.0 {
                continue;
            }
            let idx = |yy: usize, xx: usize| (yy * sw + xx) * ch + c;
            if let Some(gs) = gs.as_mut() {
                gs[idx(ty.lo, tx.lo)] += go * (1.0 - tx.frac) * (1.0 - ty.frac);
                gs[idx(ty.lo, tx.hi)] += go * tx.frac * (1.0 - ty.frac);
                gs[idx(ty.hi, tx.lo)] += go * (1.0 - tx.frac) * ty.frac;
                gs[idx(ty.hi, tx.hi)] += go * tx.frac * ty.frac;
            }
            if want_coords {
                let p00 = s[idx(ty.lo, tx.lo)];
                let p01 = s[idx(ty.lo, tx.hi)];
                let p10 = s[idx(ty.hi, tx.lo)];
                let p11 = s[idx(ty.hi, tx.hi)];
                if !tx.clamped && tx.lo != tx.hi {
                    du += go * ((1.0 - ty.frac) * (p01 - p00) + ty.frac * (p11 - p10));
                }
                if !ty.clamped && ty.lo != ty.hi {
                    dv += go * ((1.0 - tx.frac) * (p10 - p00) + tx.frac * (p11 - p01));
                }
            }
        }
        if let (Some(gu), Some(gv)) = (gu.as_mut(), gv.as_mut()) {
            gu[i] = du;
            gv[i] = dv;
        }
    }
    let gs = gs.map(|d| Tensor::from_vec(src.shape(), d).expect("src shape"));
    let coords = gu.zip(gv).map(|(gu, gv)| {
        (Tensor::from_vec(u.shape(), gu).expect("coord shape"), Tensor::from_vec(v.shape(), gv).expect("coord shape"))
    });
    (gs, coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_handles_edges() {
        assert_eq!(tap(0.0, 4), Tap { lo: 0, hi: 1, frac: 0.0, clamped: false });
        assert_eq!(tap(3.0, 4), Tap { lo: 2, hi: 3, frac: 1.0, clamped: false });
        assert_eq!(tap(-2.0, 4), Tap { lo: 0, hi: 1, frac: 0.0, clamped: true });
        assert_eq!(tap(9.5, 4), Tap { lo: 2, hi: 3, frac: 1.0, clamped: true });
        assert_eq!(tap(1.25, 4), Tap { lo: 1, hi: 2, frac: 0.25, clamped: false });
    }

    #[test]
    fn box3_adjoint_is_transpose() {
        // <box3(a), b> == <a, box3_adjoint(b)>
        let shape = Shape::new(5, 4, 2);
        let a = Tensor::from_fn(shape, |y, x, c| ((y * 7 + x * 3 + c) % 5) as f64 - 1.5);
        let b = Tensor::from_fn(shape, |y, x, c| ((y + 2 * x + 3 * c) % 4) as f64 * 0.3);
        let lhs: f64 = box3(&a).data().iter().zip(b.data()).map(|(p, q)| p * q).sum();
        let rhs: f64 = a.data().iter().zip(box3_adjoint(&b).data()).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
