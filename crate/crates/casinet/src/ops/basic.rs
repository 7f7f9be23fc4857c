//! Shape-manipulating and reduction kernels: channel concatenation,
//! elementwise arithmetic, pooling, bilinear upsampling, and means.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub fn concat_channels_fwd(xs: &[&Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::Shape("concat of empty list".into()));
    }
    let s0 = xs[0].shape();
    if xs.iter().any(|t| {
        let s = t.shape();
        s.n != s0.n || s.h != s0.h || s.w != s0.w
    }) {
        return Err(Error::Shape("concat inputs must share batch and spatial dims".into()));
    }
    let ctot: usize = xs.iter().map(|t| t.shape().c).sum();
    let hw = s0.h * s0.w;
    let mut out = Tensor::zeros(Shape::new(s0.n, ctot, s0.h, s0.w)?);
    for n in 0..s0.n {
        let mut coff = 0;
        for t in xs {
            let c = t.shape().c;
            let src = &t.data()[n * c * hw..(n + 1) * c * hw];
            let dst = &mut out.data_mut()[(n * ctot + coff) * hw..(n * ctot + coff + c) * hw];
            dst.copy_from_slice(src);
            coff += c;
        }
    }
    Ok(out)
}

/// Splits the upstream gradient exactly along the channel boundaries.
pub fn concat_channels_bwd(dy: &Tensor, shapes: &[Shape]) -> Vec<Tensor> {
    let s = dy.shape();
    let hw = s.h * s.w;
    let mut outs: Vec<Tensor> = shapes.iter().map(|&sh| Tensor::zeros(sh)).collect();
    for n in 0..s.n {
        let mut coff = 0;
        for (t, sh) in outs.iter_mut().zip(shapes) {
            let c = sh.c;
            let src = &dy.data()[(n * s.c + coff) * hw..(n * s.c + coff + c) * hw];
            t.data_mut()[n * c * hw..(n + 1) * c * hw].copy_from_slice(src);
            coff += c;
        }
    }
    outs
}

pub fn add_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("add shape mismatch {} vs {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_vec_unchecked(a.shape(), data))
}

pub fn mul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("mul shape mismatch {} vs {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_vec_unchecked(a.shape(), data))
}

pub fn spatial_mean_fwd(x: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = (s.h * s.w) as f64;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1).expect("valid"));
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.h * s.w;
            out.data_mut()[n * s.c + c] =
                x.data()[base..base + s.h * s.w].iter().sum::<f64>() / hw;
        }
    }
    out
}

pub fn spatial_mean_bwd(xshape: Shape, dy: &Tensor) -> Tensor {
    let hw = (xshape.h * xshape.w) as f64;
    let mut dx = Tensor::zeros(xshape);
    for n in 0..xshape.n {
        for c in 0..xshape.c {
            let g = dy.data()[n * xshape.c + c] / hw;
            let base = (n * xshape.c + c) * xshape.h * xshape.w;
            dx.data_mut()[base..base + xshape.h * xshape.w].fill(g);
        }
    }
    dx
}

pub fn sum_all_fwd(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().sum();
    Tensor::from_vec(Shape::new(1, 1, 1, 1).expect("valid"), vec![s]).expect("scalar")
}

/// 2x2 average pooling with stride 2. Requires even spatial dims.
pub fn avgpool2_fwd(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::Shape(format!(
            "avgpool2 needs even spatial dims, got {}x{}",
            s.h, s.w
        )));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow)?);
    for plane in 0..s.n * s.c {
        let src = &x.data()[plane * s.h * s.w..(plane + 1) * s.h * s.w];
        let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            let top = &src[2 * i * s.w..(2 * i + 1) * s.w];
            let bot = &src[(2 * i + 1) * s.w..(2 * i + 2) * s.w];
            let row = &mut dst[i * ow..(i + 1) * ow];
            for j in 0..ow {
                row[j] = 0.25 * (top[2 * j] + top[2 * j + 1] + bot[2 * j] + bot[2 * j + 1]);
            }
        }
    }
    Ok(out)
}

pub fn avgpool2_bwd(xshape: Shape, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(xshape);
    let s = dy.shape();
    for plane in 0..s.n * s.c {
        let src = &dy.data()[plane * s.h * s.w..(plane + 1) * s.h * s.w];
        let dst = &mut dx.data_mut()[plane * xshape.h * xshape.w..(plane + 1) * xshape.h * xshape.w];
        for i in 0..s.h {
            let row = &src[i * s.w..(i + 1) * s.w];
            let (top_half, bot_half) = dst[2 * i * xshape.w..(2 * i + 2) * xshape.w]
                .split_at_mut(xshape.w);
            for j in 0..s.w {
                let g = 0.25 * row[j];
                top_half[2 * j] += g;
                top_half[2 * j + 1] += g;
                bot_half[2 * j] += g;
                bot_half[2 * j + 1] += g;
            }
        }
    }
    dx
}

/// Source coordinates and lerp weight for one output row/column under
/// half-pixel-center (align_corners = false) mapping.
fn bilinear_axis(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let scale = factor as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / scale - 0.5;
            let clamped = src.clamp(0.0, (in_len - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let t = clamped - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

pub fn upsample_bilinear_fwd(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::Param("upsample factor must be >= 1".into()));
    }
    let s = x.shape();
    let (oh, ow) = (s.h * factor, s.w * factor);
    let rows = bilinear_axis(oh, s.h, factor);
    let cols = bilinear_axis(ow, s.w, factor);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow)?);
    for n in 0..s.n {
        for c in 0..s.c {
            for (oi, &(i0, i1, ti)) in rows.iter().enumerate() {
                for (oj, &(j0, j1, tj)) in cols.iter().enumerate() {
                    let v = (1.0 - ti) * (1.0 - tj) * x.get(n, c, i0, j0)
                        + (1.0 - ti) * tj * x.get(n, c, i0, j1)
                        + ti * (1.0 - tj) * x.get(n, c, i1, j0)
                        + ti * tj * x.get(n, c, i1, j1);
                    out.set(n, c, oi, oj, v);
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear_bwd(xshape: Shape, dy: &Tensor, factor: usize) -> Tensor {
    let s = dy.shape();
    let rows = bilinear_axis(s.h, xshape.h, factor);
    let cols = bilinear_axis(s.w, xshape.w, factor);
    let mut dx = Tensor::zeros(xshape);
    for n in 0..s.n {
        for c in 0..s.c {
            for (oi, &(i0, i1, ti)) in rows.iter().enumerate() {
                for (oj, &(j0, j1, tj)) in cols.iter().enumerate() {
                    let g = dy.get(n, c, oi, oj);
                    for (ii, jj, wgt) in [
                        (i0, j0, (1.0 - ti) * (1.0 - tj)),
                        (i0, j1, (1.0 - ti) * tj),
                        (i1, j0, ti * (1.0 - tj)),
                        (i1, j1, ti * tj),
                    ] {
                        let idx = xshape.at(n, c, ii, jj);
                        dx.data_mut()[idx] += wgt * g;
                    }
                }
            }
        }
    }
    dx
}
