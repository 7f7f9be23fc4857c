//! Dilated 3x3 and 1x1 convolution kernels.
//!
//! The 3x3 path lowers each image to a column matrix (im2col) and runs a
//! single matrix product per image; images are processed in parallel with
//! disjoint outputs, so results are bitwise identical for any thread count.
//! Zero padding of size `dilation` keeps the spatial extent unchanged.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const KSIZE: usize = 3;

/// Minimum per-call arithmetic work (multiply-adds) before fanning out to
/// the thread pool; below this the dispatch overhead dominates.
const MIN_PAR_WORK: usize = 1 << 21;

/// Run `f(i, chunk)` for equal chunks of `data`, in parallel when the total
/// work is large enough. Chunks are disjoint, so results are identical
/// either way.
fn for_each_chunk(data: &mut [f64], chunk: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    if work < MIN_PAR_WORK {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    } else {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

fn check_conv_args(x: &Tensor, w: &Tensor, b: Option<&Tensor>, ksize: usize, dilation: usize) -> Result<()> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.h != ksize || ws.w != ksize {
        return Err(Error::Shape(format!(
            "kernel must be {ksize}x{ksize}, got {}x{}",
            ws.h, ws.w
        )));
    }
    if ws.c != xs.c {
        return Err(Error::Shape(format!(
            "channel mismatch: input has {} channels, kernel expects {}",
            xs.c, ws.c
        )));
    }
    if dilation < 1 {
        return Err(Error::Param("dilation must be >= 1".into()));
    }
    if let Some(b) = b {
        if b.numel() != ws.n {
            return Err(Error::Shape(format!(
                "bias length {} does not match {} output channels",
                b.numel(),
                ws.n
            )));
        }
    }
    Ok(())
}

/// Lower one image (cin, h, w) into columns (cin * 9, h * w) for a dilated
/// 3x3 kernel with padding = dilation. Out-of-bounds taps are zero.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, dilation: usize, cols: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), cin * KSIZE * KSIZE * hw);
    let d = dilation as isize;
    for ci in 0..cin {
        let xc = &x[ci * hw..(ci + 1) * hw];
        for kh in 0..KSIZE {
            let di = (kh as isize - 1) * d;
            for kw in 0..KSIZE {
                let dj = (kw as isize - 1) * d;
                let row = &mut cols[((ci * KSIZE + kh) * KSIZE + kw) * hw..][..hw];
                for i in 0..h {
                    let ii = i as isize + di;
                    let dst = &mut row[i * w..(i + 1) * w];
                    if ii < 0 || ii >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &xc[ii as usize * w..(ii as usize + 1) * w];
                    for j in 0..w {
                        let jj = j as isize + dj;
                        dst[j] = if jj < 0 || jj >= w as isize { 0.0 } else { src_row[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter a column-gradient matrix (cin * 9, h * w) back onto one image.
fn col2im(dcols: &[f64], cin: usize, h: usize, w: usize, dilation: usize, dx: &mut [f64]) {
    let hw = h * w;
    let d = dilation as isize;
    for ci in 0..cin {
        let dxc = &mut dx[ci * hw..(ci + 1) * hw];
        for kh in 0..KSIZE {
            let di = (kh as isize - 1) * d;
            for kw in 0..KSIZE {
                let dj = (kw as isize - 1) * d;
                let row = &dcols[((ci * KSIZE + kh) * KSIZE + kw) * hw..][..hw];
                for i in 0..h {
                    let ii = i as isize + di;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let jj = j as isize + dj;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dxc[ii as usize * w + jj as usize] += row[i * w + j];
                    }
                }
            }
        }
    }
}

pub fn conv2d_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>, dilation: usize) -> Result<Tensor> {
    check_conv_args(x, w, b, KSIZE, dilation)?;
    let (xs, ws) = (x.shape(), w.shape());
    let (cin, cout, h, wd) = (xs.c, ws.n, xs.h, xs.w);
    let hw = h * wd;
    let k = cin * KSIZE * KSIZE;

    let mut out = Tensor::zeros(Shape::new(xs.n, cout, h, wd)?);
    let w_mat = ArrayView2::from_shape((cout, k), w.data()).expect("kernel layout");
    let xdata = x.data();

    let work = xs.n * cout * k * hw;
    for_each_chunk(out.data_mut(), cout * hw, work, |n, out_n| {
        let mut cols = vec![0.0f64; k * hw];
        im2col(&xdata[n * cin * hw..(n + 1) * cin * hw], cin, h, wd, dilation, &mut cols);
        let cols_m = ArrayView2::from_shape((k, hw), &cols[..]).unwrap();
        let mut y = ArrayViewMut2::from_shape((cout, hw), out_n).unwrap();
        general_mat_mul(1.0, &w_mat, &cols_m, 0.0, &mut y);
        if let Some(b) = b {
            for (co, bv) in b.data().iter().enumerate() {
                for v in &mut out_n[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    });
    Ok(out)
}

/// Backward pass; `need_dx` skips the input-gradient computation for
/// gradient-free inputs (the image at the first layer).
pub fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dilation: usize,
    need_dx: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (xs, ws) = (x.shape(), w.shape());
    let (cin, cout, h, wd) = (xs.c, ws.n, xs.h, xs.w);
    let hw = h * wd;
    let k = cin * KSIZE * KSIZE;
    let w_mat = ArrayView2::from_shape((cout, k), w.data()).expect("kernel layout");

    let mut dx = Tensor::zeros(if need_dx { xs } else { Shape::new(1, 1, 1, 1)? });
    let xdata = x.data();
    let dydata = dy.data();
    let work = xs.n * cout * k * hw;

    // One pass per image: dW_n = dY_n * cols_n^T, and (when needed)
    // dX_n = col2im(W^T * dY_n). Per-image dW partials are reduced in fixed
    // image order afterwards.
    let image_pass = |n: usize, dx_n: &mut [f64]| {
        let dy_n = ArrayView2::from_shape((cout, hw), &dydata[n * cout * hw..(n + 1) * cout * hw])
            .unwrap();
        let mut cols = vec![0.0f64; k * hw];
        im2col(&xdata[n * cin * hw..(n + 1) * cin * hw], cin, h, wd, dilation, &mut cols);
        let mut dw_n = vec![0.0f64; cout * k];
        {
            let cols_m = ArrayView2::from_shape((k, hw), &cols[..]).unwrap();
            let mut dw_m = ArrayViewMut2::from_shape((cout, k), &mut dw_n[..]).unwrap();
            general_mat_mul(1.0, &dy_n, &cols_m.t(), 0.0, &mut dw_m);
        }
        if !dx_n.is_empty() {
            // reuse the column buffer for the input gradient
            {
                let mut dcols_m = ArrayViewMut2::from_shape((k, hw), &mut cols[..]).unwrap();
                general_mat_mul(1.0, &w_mat.t(), &dy_n, 0.0, &mut dcols_m);
            }
            col2im(&cols, cin, h, wd, dilation, dx_n);
        }
        dw_n
    };

    let partials: Vec<Vec<f64>> = if need_dx {
        let chunks: Vec<(usize, &mut [f64])> = dx.data_mut().chunks_mut(cin * hw).enumerate().collect();
        if work < MIN_PAR_WORK {
            chunks.into_iter().map(|(n, dx_n)| image_pass(n, dx_n)).collect()
        } else {
            chunks.into_par_iter().map(|(n, dx_n)| image_pass(n, dx_n)).collect()
        }
    } else if work < MIN_PAR_WORK {
        (0..xs.n).map(|n| image_pass(n, &mut [])).collect()
    } else {
        (0..xs.n).into_par_iter().map(|n| image_pass(n, &mut [])).collect()
    };
    let mut dw = Tensor::zeros(ws);
    for part in &partials {
        for (a, p) in dw.data_mut().iter_mut().zip(part) {
            *a += p;
        }
    }

    // db: plain per-channel sums in fixed order.
    let mut db = Tensor::zeros(Shape::new(1, cout, 1, 1)?);
    for n in 0..xs.n {
        for co in 0..cout {
            let s: f64 = dydata[(n * cout + co) * hw..(n * cout + co + 1) * hw].iter().sum();
            db.data_mut()[co] += s;
        }
    }
    Ok((dx, dw, db))
}

pub fn conv1x1_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    check_conv_args(x, w, b, 1, 1)?;
    let (xs, ws) = (x.shape(), w.shape());
    let (cin, cout, h, wd) = (xs.c, ws.n, xs.h, xs.w);
    let hw = h * wd;
    let w_mat = ArrayView2::from_shape((cout, cin), w.data()).expect("kernel layout");
    let xdata = x.data();

    let mut out = Tensor::zeros(Shape::new(xs.n, cout, h, wd)?);
    let work = xs.n * cout * cin * hw;
    for_each_chunk(out.data_mut(), cout * hw, work, |n, out_n| {
        let x_n = ArrayView2::from_shape((cin, hw), &xdata[n * cin * hw..(n + 1) * cin * hw]).unwrap();
        let mut y = ArrayViewMut2::from_shape((cout, hw), out_n).unwrap();
        general_mat_mul(1.0, &w_mat, &x_n, 0.0, &mut y);
        if let Some(b) = b {
            for (co, bv) in b.data().iter().enumerate() {
                for v in &mut out_n[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    });
    Ok(out)
}

pub fn conv1x1_bwd(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (xs, ws) = (x.shape(), w.shape());
    let (cin, cout, h, wd) = (xs.c, ws.n, xs.h, xs.w);
    let hw = h * wd;
    let w_mat = ArrayView2::from_shape((cout, cin), w.data()).expect("kernel layout");
    let xdata = x.data();
    let dydata = dy.data();
    let work = xs.n * cout * cin * hw;

    let mut dx = Tensor::zeros(if need_dx { xs } else { Shape::new(1, 1, 1, 1)? });
    if need_dx {
        for_each_chunk(dx.data_mut(), cin * hw, work, |n, dx_n| {
            let dy_n =
                ArrayView2::from_shape((cout, hw), &dydata[n * cout * hw..(n + 1) * cout * hw])
                    .unwrap();
            let mut d = ArrayViewMut2::from_shape((cin, hw), dx_n).unwrap();
            general_mat_mul(1.0, &w_mat.t(), &dy_n, 0.0, &mut d);
        });
    }

    let image_dw = |n: usize| {
        let x_n = ArrayView2::from_shape((cin, hw), &xdata[n * cin * hw..(n + 1) * cin * hw]).unwrap();
        let dy_n = ArrayView2::from_shape((cout, hw), &dydata[n * cout * hw..(n + 1) * cout * hw]).unwrap();
        let mut dw_n = vec![0.0f64; cout * cin];
        {
            let mut dw_m = ArrayViewMut2::from_shape((cout, cin), &mut dw_n[..]).unwrap();
            general_mat_mul(1.0, &dy_n, &x_n.t(), 0.0, &mut dw_m);
        }
        dw_n
    };
    let partials: Vec<Vec<f64>> = if work < MIN_PAR_WORK {
        (0..xs.n).map(image_dw).collect()
    } else {
        (0..xs.n).into_par_iter().map(image_dw).collect()
    };
    let mut dw = Tensor::zeros(ws);
    for part in &partials {
        for (a, p) in dw.data_mut().iter_mut().zip(part) {
            *a += p;
        }
    }

    let mut db = Tensor::zeros(Shape::new(1, cout, 1, 1)?);
    for n in 0..xs.n {
        for co in 0..cout {
            let s: f64 = dydata[(n * cout + co) * hw..(n * cout + co + 1) * hw].iter().sum();
            db.data_mut()[co] += s;
        }
    }
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct six-nested-loop reference convolution; deliberately naive and
    /// independent of the im2col path.
    fn conv2d_loop(x: &Tensor, w: &Tensor, b: Option<&Tensor>, dilation: usize) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, xs.h, xs.w).unwrap());
        for n in 0..xs.n {
            for co in 0..ws.n {
                for i in 0..xs.h {
                    for j in 0..xs.w {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..xs.c {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let ii = i as isize + (kh as isize - 1) * dilation as isize;
                                    let jj = j as isize + (kw as isize - 1) * dilation as isize;
                                    if ii < 0 || jj < 0 || ii >= xs.h as isize || jj >= xs.w as isize {
                                        continue;
                                    }
                                    acc += x.get(n, ci, ii as usize, jj as usize)
                                        * w.get(co, ci, kh, kw);
                                }
                            }
                        }
                        out.set(n, co, i, j, acc);
                    }
                }
            }
        }
        out
    }

    fn rand(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        Tensor::randn(Shape::new(shape.0, shape.1, shape.2, shape.3).unwrap(), &mut Rng::new(seed), 1.0).unwrap()
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let x = rand((1, 2, 4, 4), 3);
        let w = Tensor::zeros(Shape::new(3, 2, 3, 3).unwrap());
        let y = conv2d_fwd(&x, &w, None, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_tap_identity() {
        // Kernel with a 1 at the center of channel co==ci acts as identity
        // for any dilation.
        let x = rand((2, 3, 5, 5), 4);
        let mut w = Tensor::zeros(Shape::new(3, 3, 3, 3).unwrap());
        for c in 0..3 {
            w.set(c, c, 1, 1, 1.0);
        }
        for dilation in [1, 2, 5] {
            let y = conv2d_fwd(&x, &w, None, dilation).unwrap();
            assert_eq!(y.data(), x.data(), "dilation {dilation}");
        }
    }

    #[test]
    fn matches_loop_oracle_dilated() {
        let x = rand((1, 2, 5, 5), 11);
        let w = rand((3, 2, 3, 3), 12);
        let b = rand((1, 3, 1, 1), 13);
        for dilation in [1, 2, 3] {
            let fast = conv2d_fwd(&x, &w, Some(&b), dilation).unwrap();
            let slow = conv2d_loop(&x, &w, Some(&b), dilation);
            for (a, o) in fast.data().iter().zip(slow.data()) {
                assert!((a - o).abs() < 1e-12, "dilation {dilation}: {a} vs {o}");
            }
        }
    }

    #[test]
    fn matches_loop_oracle_batched() {
        let x = rand((3, 4, 6, 6), 21);
        let w = rand((5, 4, 3, 3), 22);
        let fast = conv2d_fwd(&x, &w, None, 2).unwrap();
        let slow = conv2d_loop(&x, &w, None, 2);
        for (a, o) in fast.data().iter().zip(slow.data()) {
            assert!((a - o).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = rand((1, 2, 4, 4), 1);
        let w = rand((3, 5, 3, 3), 2);
        assert!(conv2d_fwd(&x, &w, None, 1).is_err());
    }

    #[test]
    fn bad_dilation_rejected() {
        let x = rand((1, 2, 4, 4), 1);
        let w = rand((3, 2, 3, 3), 2);
        assert!(conv2d_fwd(&x, &w, None, 0).is_err());
    }

    #[test]
    fn conv1x1_identity_and_constant() {
        let x = rand((1, 3, 4, 4), 7);
        let mut w = Tensor::zeros(Shape::new(3, 3, 1, 1).unwrap());
        for c in 0..3 {
            w.set(c, c, 0, 0, 1.0);
        }
        let y = conv1x1_fwd(&x, &w, None).unwrap();
        assert_eq!(y.data(), x.data());

        let wz = Tensor::zeros(Shape::new(2, 3, 1, 1).unwrap());
        let b = Tensor::from_vec(Shape::new(1, 2, 1, 1).unwrap(), vec![0.25, -1.5]).unwrap();
        let y = conv1x1_fwd(&x, &wz, Some(&b)).unwrap();
        for n in 0..1 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(y.get(n, 0, i, j), 0.25);
                    assert_eq!(y.get(n, 1, i, j), -1.5);
                }
            }
        }
    }

    #[test]
    fn conv1x1_matches_per_position_matvec() {
        let x = rand((1, 4, 3, 3), 31);
        let w = rand((6, 4, 1, 1), 32);
        let b = rand((1, 6, 1, 1), 33);
        let y = conv1x1_fwd(&x, &w, Some(&b)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for co in 0..6 {
                    let mut acc = b.data()[co];
                    for ci in 0..4 {
                        acc += w.get(co, ci, 0, 0) * x.get(0, ci, i, j);
                    }
                    assert!((y.get(0, co, i, j) - acc).abs() < 1e-12);
                }
            }
        }
    }
}
