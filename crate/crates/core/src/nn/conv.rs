//! 3-d convolution (cubic kernels of edge 1 or 3, "same" padding) and
//! nearest-neighbor upsampling, with explicit backward passes.
//!
//! Convolution lowers to a matrix product via im2col so the heavy
//! lifting lands in the BLAS-like `matrixmultiply` path used by
//! `ndarray::dot`. The gather/scatter loops run over raw slices with
//! precomputed strides; the innermost kernel axis is copied as a
//! contiguous run.

use ndarray::{Array1, Array2, Array5, ArrayD, Ix1, Ix5};

fn out_dim(d: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (d + 2 * pad - k) / stride + 1
}

/// Output spatial dims for a 3x3x3 "same"-padded kernel: per-axis
/// ceil(d/stride). Pointwise (1x1x1) kernels give the same extents.
pub fn conv_out_shape(sp: [usize; 3], stride: [usize; 3]) -> [usize; 3] {
    [
        out_dim(sp[0], 3, stride[0]),
        out_dim(sp[1], 3, stride[1]),
        out_dim(sp[2], 3, stride[2]),
    ]
}

fn as5(a: &ArrayD<f64>) -> ndarray::ArrayView5<'_, f64> {
    a.view().into_dimensionality::<Ix5>().expect("5-d value")
}

struct ConvGeom {
    b: usize,
    cin: usize,
    d: [usize; 3],
    k: usize,
    pad: isize,
    stride: [usize; 3],
    osp: [usize; 3],
}

impl ConvGeom {
    fn from(x: &ndarray::ArrayView5<'_, f64>, k: usize, stride: [usize; 3]) -> Self {
        let (b, cin, d0, d1, d2) = x.dim();
        assert!(k == 1 || k == 3, "kernel edge must be 1 or 3");
        let osp = [
            out_dim(d0, k, stride[0]),
            out_dim(d1, k, stride[1]),
            out_dim(d2, k, stride[2]),
        ];
        Self {
            b,
            cin,
            d: [d0, d1, d2],
            k,
            pad: ((k - 1) / 2) as isize,
            stride,
            osp,
        }
    }

    fn rows(&self) -> usize {
        self.b * self.osp[0] * self.osp[1] * self.osp[2]
    }

    fn cols(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
}

/// Build the im2col patch matrix: (B*o0*o1*o2, Cin*k^3).
fn im2col(x: &ndarray::ArrayView5<'_, f64>, g: &ConvGeom) -> Array2<f64> {
    let xs = x.as_slice().expect("conv input must be standard layout");
    let [d0, d1, d2] = g.d;
    let (sxc, sxi, sxj) = (d0 * d1 * d2, d1 * d2, d2);
    let sxb = g.cin * sxc;
    let cols = g.cols();
    let k = g.k;
    let mut p = Array2::<f64>::zeros((g.rows(), cols));
    let ps = p.as_slice_mut().expect("fresh matrix is standard");
    let mut row_base = 0usize;
    for bi in 0..g.b {
        let xb = bi * sxb;
        for oi in 0..g.osp[0] {
            let i0 = (oi * g.stride[0]) as isize - g.pad;
            for oj in 0..g.osp[1] {
                let j0 = (oj * g.stride[1]) as isize - g.pad;
                for ok in 0..g.osp[2] {
                    let l0 = (ok * g.stride[2]) as isize - g.pad;
                    let lo = (-l0).max(0) as usize;
                    let hi = ((d2 as isize - l0).min(k as isize)).max(0) as usize;
                    let row = &mut ps[row_base..row_base + cols];
                    let mut c = 0usize;
                    for ci in 0..g.cin {
                        let xc = xb + ci * sxc;
                        for ki in 0..k {
                            let ii = i0 + ki as isize;
                            if ii < 0 || ii >= d0 as isize {
                                c += k * k;
                                continue;
                            }
                            let xi = xc + ii as usize * sxi;
                            for kj in 0..k {
                                let jj = j0 + kj as isize;
                                if jj < 0 || jj >= d1 as isize || hi <= lo {
                                    c += k;
                                    continue;
                                }
                                let src = xi + jj as usize * sxj + (l0 + lo as isize) as usize;
                                row[c + lo..c + hi].copy_from_slice(&xs[src..src + hi - lo]);
                                c += k;
                            }
                        }
                    }
                    row_base += cols;
                }
            }
        }
    }
    p
}

/// Scatter-add the patch-matrix gradient back onto the input.
fn col2im(gp: &Array2<f64>, g: &ConvGeom) -> Array5<f64> {
    let [d0, d1, d2] = g.d;
    let (sxc, sxi, sxj) = (d0 * d1 * d2, d1 * d2, d2);
    let sxb = g.cin * sxc;
    let cols = g.cols();
    let k = g.k;
    let mut gx = Array5::<f64>::zeros((g.b, g.cin, d0, d1, d2));
    let gxs = gx.as_slice_mut().expect("fresh array is standard");
    let gps = gp.as_slice().expect("gradient matrix is standard");
    let mut row_base = 0usize;
    for bi in 0..g.b {
        let xb = bi * sxb;
        for oi in 0..g.osp[0] {
            let i0 = (oi * g.stride[0]) as isize - g.pad;
            for oj in 0..g.osp[1] {
                let j0 = (oj * g.stride[1]) as isize - g.pad;
                for ok in 0..g.osp[2] {
                    let l0 = (ok * g.stride[2]) as isize - g.pad;
                    let lo = (-l0).max(0) as usize;
                    let hi = ((d2 as isize - l0).min(k as isize)).max(0) as usize;
                    let row = &gps[row_base..row_base + cols];
                    let mut c = 0usize;
                    for ci in 0..g.cin {
                        let xc = xb + ci * sxc;
                        for ki in 0..k {
                            let ii = i0 + ki as isize;
                            if ii < 0 || ii >= d0 as isize {
                                c += k * k;
                                continue;
                            }
                            let xi = xc + ii as usize * sxi;
                            for kj in 0..k {
                                let jj = j0 + kj as isize;
                                if jj < 0 || jj >= d1 as isize || hi <= lo {
                                    c += k;
                                    continue;
                                }
                                let dst = xi + jj as usize * sxj + (l0 + lo as isize) as usize;
                                for off in 0..hi - lo {
                                    gxs[dst + off] += row[c + lo + off];
                                }
                                c += k;
                            }
                        }
                    }
                    row_base += cols;
                }
            }
        }
    }
    gx
}

/// x: (B, Cin, d0, d1, d2), w: (Cout, Cin, k, k, k) with k in {1, 3},
/// b: (Cout,). Returns (B, Cout, out spatial dims) plus the im2col
/// patch matrix, which the backward pass can reuse.
pub fn conv3d_forward_cached(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    bias: &ArrayD<f64>,
    stride: [usize; 3],
) -> (ArrayD<f64>, Array2<f64>) {
    let xv = as5(x);
    let wv = as5(w);
    let bv = bias.view().into_dimensionality::<Ix1>().expect("1-d bias");
    let (cout, wcin, k, _, _) = wv.dim();
    let g = ConvGeom::from(&xv, k, stride);
    assert_eq!(g.cin, wcin, "channel mismatch");

    let p = im2col(&xv, &g);
    let w2 = wv
        .to_shape((cout, g.cols()))
        .expect("weight reshape")
        .to_owned();
    // (rows, Cout)
    let y2 = p.dot(&w2.t());

    let osp = g.osp;
    let sp_total = osp[0] * osp[1] * osp[2];
    let mut y = Array5::<f64>::zeros((g.b, cout, osp[0], osp[1], osp[2]));
    {
        let ys = y.as_slice_mut().expect("fresh array is standard");
        let y2s = y2.as_slice().expect("product is standard");
        let bs = bv.as_slice().expect("bias is standard");
        for r in 0..g.rows() {
            let bi = r / sp_total;
            let sp = r - bi * sp_total;
            let src = r * cout;
            let dst0 = bi * cout * sp_total + sp;
            for co in 0..cout {
                ys[dst0 + co * sp_total] = y2s[src + co] + bs[co];
            }
        }
    }
    (y.into_dyn(), p)
}

/// [`conv3d_forward_cached`] without the patch matrix.
pub fn conv3d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    bias: &ArrayD<f64>,
    stride: [usize; 3],
) -> ArrayD<f64> {
    conv3d_forward_cached(x, w, bias, stride).0
}

/// Gradients w.r.t. (x, w, bias) given upstream gy. `patches`, when
/// supplied, must be the im2col matrix the forward pass produced for
/// this (x, stride) pair; otherwise it is recomputed.
pub fn conv3d_backward_cached(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: [usize; 3],
    gy: &ArrayD<f64>,
    patches: Option<&Array2<f64>>,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let xv = as5(x);
    let wv = as5(w);
    let gyv = as5(gy);
    let (cout, _, k, _, _) = wv.dim();
    let g = ConvGeom::from(&xv, k, stride);
    let osp = g.osp;
    let sp_total = osp[0] * osp[1] * osp[2];

    // (rows, Cout) layout matching the forward row order
    let mut g2 = Array2::<f64>::zeros((g.rows(), cout));
    {
        let g2s = g2.as_slice_mut().expect("fresh matrix is standard");
        let gys = gyv.as_slice().expect("upstream gradient is standard");
        for r in 0..g.rows() {
            let bi = r / sp_total;
            let sp = r - bi * sp_total;
            let src0 = bi * cout * sp_total + sp;
            let dst = r * cout;
            for co in 0..cout {
                g2s[dst + co] = gys[src0 + co * sp_total];
            }
        }
    }

    let local_p;
    let p = match patches {
        Some(p) => p,
        None => {
            local_p = im2col(&xv, &g);
            &local_p
        }
    };
    let w2 = wv
        .to_shape((cout, g.cols()))
        .expect("weight reshape")
        .to_owned();

    let gw2 = g2.t().dot(p); // (Cout, Cin*k^3)
    let gb: Array1<f64> = g2.sum_axis(ndarray::Axis(0));
    let gp = g2.dot(&w2); // (rows, Cin*k^3)
    let gx = col2im(&gp, &g);

    let gw = gw2
        .into_shape_with_order((cout, g.cin, k, k, k))
        .expect("grad weight reshape");
    (gx.into_dyn(), gw.into_dyn(), gb.into_dyn())
}

/// [`conv3d_backward_cached`] recomputing the patch matrix.
pub fn conv3d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: [usize; 3],
    gy: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    conv3d_backward_cached(x, w, stride, gy, None)
}

/// Nearest-neighbor upsample by per-axis integer factors, then crop to
/// `target`. x: (B, C, s0, s1, s2) -> (B, C, t0, t1, t2) with
/// t_i <= s_i * f_i.
pub fn upsample_forward(x: &ArrayD<f64>, factors: [usize; 3], target: [usize; 3]) -> ArrayD<f64> {
    let xv = as5(x);
    let (b, c, s0, s1, s2) = xv.dim();
    for (i, &t) in target.iter().enumerate() {
        let s = [s0, s1, s2][i];
        assert!(t <= s * factors[i], "target axis {i} exceeds upsampled extent");
    }
    let xs = xv.as_slice().expect("upsample input must be standard layout");
    let mut y = Array5::<f64>::zeros((b, c, target[0], target[1], target[2]));
    {
        let ys = y.as_slice_mut().expect("fresh array is standard");
        let (t0, t1, t2) = (target[0], target[1], target[2]);
        let mut dst = 0usize;
        for bc in 0..b * c {
            let xbase = bc * s0 * s1 * s2;
            for i in 0..t0 {
                let xi = xbase + (i / factors[0]) * s1 * s2;
                for j in 0..t1 {
                    let xj = xi + (j / factors[1]) * s2;
                    for kz in 0..t2 {
                        ys[dst] = xs[xj + kz / factors[2]];
                        dst += 1;
                    }
                }
            }
        }
    }
    y.into_dyn()
}

/// Gradient of [`upsample_forward`]: sum upstream over each replicated cell.
pub fn upsample_backward(
    x: &ArrayD<f64>,
    factors: [usize; 3],
    target: [usize; 3],
    gy: &ArrayD<f64>,
) -> ArrayD<f64> {
    let xv = as5(x);
    let gyv = as5(gy);
    let (b, c, s0, s1, s2) = xv.dim();
    let gys = gyv.as_slice().expect("upstream gradient is standard");
    let mut gx = Array5::<f64>::zeros((b, c, s0, s1, s2));
    {
        let gxs = gx.as_slice_mut().expect("fresh array is standard");
        let (t0, t1, t2) = (target[0], target[1], target[2]);
        let mut src = 0usize;
        for bc in 0..b * c {
            let xbase = bc * s0 * s1 * s2;
            for i in 0..t0 {
                let xi = xbase + (i / factors[0]) * s1 * s2;
                for j in 0..t1 {
                    let xj = xi + (j / factors[1]) * s2;
                    for kz in 0..t2 {
                        gxs[xj + kz / factors[2]] += gys[src];
                        src += 1;
                    }
                }
            }
        }
    }
    gx.into_dyn()
}
