//! 3D convolution and transposed convolution kernels (im2col + GEMM).
//!
//! Layouts are `[batch, channels, D, H, W]` for activations. A convolution
//! weight is `[ch_out, ch_in, kD, kH, kW]`; a transposed-convolution weight is
//! `[ch_in, ch_out, kD, kH, kW]`, i.e. the same buffer as the convolution it
//! is the adjoint of.

use super::gemm::{gemm, row_dots_acc, Mat};
use super::{Real, Result, Tensor, TensorError};

/// Stride and zero padding per spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::new([1; 3], [0; 3])
    }
}

impl ConvGeometry {
    pub const fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    pub const fn uniform(stride: usize, padding: usize) -> Self {
        Self::new([stride; 3], [padding; 3])
    }

    fn check_stride(&self, op: &'static str) -> Result<()> {
        if self.stride.iter().any(|&s| s == 0) {
            return Err(TensorError::ZeroStride { op, stride: self.stride });
        }
        Ok(())
    }

    /// `floor((in + 2·pad − k) / stride) + 1` per axis.
    pub fn conv_output(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        self.check_stride("conv3d")?;
        let padded = [0, 1, 2].map(|a| input[a] + 2 * self.padding[a]);
        if (0..3).any(|a| kernel[a] > padded[a] || kernel[a] == 0) {
            return Err(TensorError::KernelTooLarge {
                op: "conv3d",
                kernel,
                padded,
            });
        }
        Ok([0, 1, 2].map(|a| (padded[a] - kernel[a]) / self.stride[a] + 1))
    }

    /// `(in − 1)·stride − 2·pad + k` per axis.
    pub fn transposed_output(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        self.check_stride("conv_transpose3d")?;
        let mut out = [0usize; 3];
        for axis in 0..3 {
            let extent = (input[axis] as i64 - 1) * self.stride[axis] as i64
                - 2 * self.padding[axis] as i64
                + kernel[axis] as i64;
            if extent <= 0 || input[axis] == 0 {
                return Err(TensorError::NegativeExtent { axis, extent });
            }
            out[axis] = extent as usize;
        }
        Ok(out)
    }
}

/// Index mapping of one convolution from a `src` grid onto a `dst` grid.
#[derive(Clone, Copy, Debug)]
struct Plan {
    channels: usize,
    src: [usize; 3],
    dst: [usize; 3],
    kernel: [usize; 3],
    geom: ConvGeometry,
}

/// Upper bound on elements of one column buffer; work is split into slabs
/// of whole destination z-planes below this size (at least one plane).
const COLS_BUDGET: usize = 1 << 20;

impl Plan {
    fn src_vox(&self) -> usize {
        self.src.iter().product()
    }

    fn dst_vox(&self) -> usize {
        self.dst.iter().product()
    }

    fn plane(&self) -> usize {
        self.dst[1] * self.dst[2]
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn rows(&self) -> usize {
        self.channels * self.kvol()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.geom == ConvGeometry::default()
    }

    /// Destination z-plane ranges processed together.
    fn slabs(&self) -> impl Iterator<Item = (usize, usize)> {
        let per = (COLS_BUDGET / (self.rows() * self.plane()).max(1)).max(1);
        let depth = self.dst[0];
        (0..depth).step_by(per).map(move |z0| (z0, (z0 + per).min(depth)))
    }

    /// Visit every contiguous run of kernel taps for destination planes
    /// `[z0, z1)` that lands inside the source grid, as
    /// `(slab_index, src_index, len)`. Source elements of a run are
    /// `stride[2]` apart; slab indices address a `rows × (z1 − z0)·plane`
    /// column buffer. Ordering is fixed.
    #[inline]
    fn for_each_run(&self, (z0, z1): (usize, usize), mut f: impl FnMut(usize, usize, usize)) {
        let [sd, sh, sw] = self.src;
        let [_, oh, ow] = self.dst;
        let [kd, kh, kw] = self.kernel;
        let [td, th, tw] = self.geom.stride;
        let [pd, ph, pw] = self.geom.padding;
        let src_vox = self.src_vox();
        let slab_vox = (z1 - z0) * self.plane();
        for c in 0..self.channels {
            let src_base = c * src_vox;
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let row = ((c * kd + a) * kh + b) * kw + e;
                        let row_base = row * slab_vox;
                        // x range whose tap ix = x*tw + e - pw falls in [0, sw)
                        let x_lo = if e >= pw { 0 } else { (pw - e).div_ceil(tw) };
                        let x_hi = if sw + pw <= e { 0 } else { ow.min((sw - 1 + pw - e) / tw + 1) };
                        if x_lo >= x_hi {
                            continue;
                        }
                        let len = x_hi - x_lo;
                        let ix0 = x_lo * tw + e - pw;
                        for z in z0..z1 {
                            let iz = (z * td + a) as isize - pd as isize;
                            if iz < 0 || iz >= sd as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let iy = (y * th + b) as isize - ph as isize;
                                if iy < 0 || iy >= sh as isize {
                                    continue;
                                }
                                let src_row = src_base + (iz as usize * sh + iy as usize) * sw;
                                let dst_row = row_base + ((z - z0) * oh + y) * ow;
                                f(dst_row + x_lo, src_row + ix0, len);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Column buffer for planes `slab` from a `[channels, src]` grid;
    /// out-of-range taps are zero.
    fn im2col<T: Real>(&self, slab: (usize, usize), src: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        let tw = self.geom.stride[2];
        self.for_each_run(slab, |d, s, len| {
            let dst = &mut cols[d..d + len];
            if tw == 1 {
                dst.copy_from_slice(&src[s..s + len]);
            } else {
                for (i, v) in dst.iter_mut().enumerate() {
                    *v = src[s + i * tw];
                }
            }
        });
    }

    /// Scatter-add of a column buffer for planes `slab` onto a `[channels, src]` grid.
    fn col2im<T: Real>(&self, slab: (usize, usize), cols: &[T], src: &mut [T]) {
        let tw = self.geom.stride[2];
        self.for_each_run(slab, |d, s, len| {
            let from = &cols[d..d + len];
            if tw == 1 {
                for (o, &v) in src[s..s + len].iter_mut().zip(from) {
                    *o = *o + v;
                }
            } else {
                for (i, &v) in from.iter().enumerate() {
                    src[s + i * tw] = src[s + i * tw] + v;
                }
            }
        });
    }

    fn scratch<T: Real>(&self) -> Vec<T> {
        if self.is_pointwise() {
            return Vec::new();
        }
        let max_planes = self.slabs().map(|(a, b)| b - a).max().unwrap_or(0);
        vec![T::zero(); self.rows() * max_planes * self.plane()]
    }
}

fn spatial(t: &[usize]) -> [usize; 3] {
    [t[2], t[3], t[4]]
}

fn check_operands<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    weight_in_axis: usize,
    weight_out_axis: usize,
) -> Result<()> {
    input.expect_rank(op, 5)?;
    weight.expect_rank(op, 5)?;
    let cin = input.shape()[1];
    if weight.shape()[weight_in_axis] != cin {
        return Err(TensorError::ShapeMismatch {
            op,
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    if let Some(bias) = bias.filter(|b| b.shape() != [weight.shape()[weight_out_axis]]) {
        return Err(TensorError::ShapeMismatch {
            op,
            left: weight.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    Ok(())
}

fn fill_bias<T: Real>(out: &mut [T], bias: Option<&Tensor<T>>, vox: usize) {
    let Some(bias) = bias else { return };
    for (chunk, &b) in out.chunks_mut(vox).zip(bias.data()) {
        chunk.fill(b);
    }
}

fn bias_grad<T: Real>(dout: &[T], batch: usize, channels: usize, vox: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for n in 0..batch {
        for (c, slot) in db.iter_mut().enumerate() {
            let start = (n * channels + c) * vox;
            let s: T = dout[start..start + vox].iter().copied().sum();
            *slot = *slot + s;
        }
    }
    db
}

pub(crate) fn conv3d_output_shape<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Vec<usize>> {
    check_operands("conv3d", input, weight, bias, 1, 0)?;
    let ws = weight.shape();
    let out = geom.conv_output(spatial(input.shape()), [ws[2], ws[3], ws[4]])?;
    Ok(vec![input.shape()[0], ws[0], out[0], out[1], out[2]])
}

fn conv_plan(input_shape: &[usize], weight_shape: &[usize], out_shape: &[usize], geom: ConvGeometry) -> Plan {
    Plan {
        channels: input_shape[1],
        src: spatial(input_shape),
        dst: spatial(out_shape),
        kernel: [weight_shape[2], weight_shape[3], weight_shape[4]],
        geom,
    }
}

pub(crate) fn conv3d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let out_shape = conv3d_output_shape(input, weight, bias, geom)?;
    let plan = conv_plan(input.shape(), weight.shape(), &out_shape, geom);
    let (batch, cout) = (out_shape[0], out_shape[1]);
    let (src_vox, dst_vox, rows, plane) = (plan.src_vox(), plan.dst_vox(), plan.rows(), plan.plane());
    let mut out = vec![T::zero(); batch * cout * dst_vox];
    let mut cols = plan.scratch();
    let w = Mat::new(weight.data(), rows);
    for n in 0..batch {
        let x = &input.data()[n * plan.channels * src_vox..(n + 1) * plan.channels * src_vox];
        let o = &mut out[n * cout * dst_vox..(n + 1) * cout * dst_vox];
        fill_bias(o, bias, dst_vox);
        if plan.is_pointwise() {
            gemm(cout, rows, dst_vox, w, Mat::new(x, src_vox), T::one(), o, dst_vox);
            continue;
        }
        for slab in plan.slabs() {
            let width = (slab.1 - slab.0) * plane;
            plan.im2col(slab, x, &mut cols);
            let o = &mut o[slab.0 * plane..];
            gemm(cout, rows, width, w, Mat::new(&cols, width), T::one(), o, dst_vox);
        }
    }
    Tensor::new(&out_shape, out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &[T],
    out_shape: &[usize],
    geom: ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let plan = conv_plan(input.shape(), weight.shape(), out_shape, geom);
    let (batch, cout) = (out_shape[0], out_shape[1]);
    let (src_vox, dst_vox, rows, plane) = (plan.src_vox(), plan.dst_vox(), plan.rows(), plan.plane());
    let cin_block = plan.channels * src_vox;
    let mut dx = need[0].then(|| vec![T::zero(); input.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); weight.len()]);
    let mut cols = plan.scratch();
    let wt = Mat::t(weight.data(), rows);
    for n in 0..batch {
        let g = &dout[n * cout * dst_vox..(n + 1) * cout * dst_vox];
        let x = &input.data()[n * cin_block..(n + 1) * cin_block];
        if plan.is_pointwise() {
            if let Some(dw) = dw.as_mut() {
                row_dots_acc(cout, rows, dst_vox, g, dst_vox, x, src_vox, dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * cin_block..(n + 1) * cin_block];
                gemm(rows, cout, dst_vox, wt, Mat::new(g, dst_vox), T::zero(), dxn, src_vox);
            }
            continue;
        }
        for slab in plan.slabs() {
            let width = (slab.1 - slab.0) * plane;
            let gs = &g[slab.0 * plane..];
            if let Some(dw) = dw.as_mut() {
                plan.im2col(slab, x, &mut cols);
                row_dots_acc(cout, rows, width, gs, dst_vox, &cols, width, dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * cin_block..(n + 1) * cin_block];
                gemm(rows, cout, width, wt, Mat::new(gs, dst_vox), T::zero(), &mut cols, width);
                plan.col2im(slab, &cols, dxn);
            }
        }
    }
    let db = need[2].then(|| bias_grad(dout, batch, cout, dst_vox));
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

pub(crate) fn conv_transpose3d_output_shape<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Vec<usize>> {
    check_operands("conv_transpose3d", input, weight, bias, 0, 1)?;
    let ws = weight.shape();
    let out = geom.transposed_output(spatial(input.shape()), [ws[2], ws[3], ws[4]])?;
    Ok(vec![input.shape()[0], ws[1], out[0], out[1], out[2]])
}

/// The transposed convolution is the convolution that maps the (large)
/// output grid back onto the (small) input grid, run in reverse.
fn transposed_plan(input_shape: &[usize], weight_shape: &[usize], out_shape: &[usize], geom: ConvGeometry) -> Plan {
    Plan {
        channels: out_shape[1],
        src: spatial(out_shape),
        dst: spatial(input_shape),
        kernel: [weight_shape[2], weight_shape[3], weight_shape[4]],
        geom,
    }
}

pub(crate) fn conv_transpose3d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let out_shape = conv_transpose3d_output_shape(input, weight, bias, geom)?;
    let plan = transposed_plan(input.shape(), weight.shape(), &out_shape, geom);
    let (batch, cin, cout) = (out_shape[0], input.shape()[1], out_shape[1]);
    let (big_vox, small_vox, rows, plane) = (plan.src_vox(), plan.dst_vox(), plan.rows(), plan.plane());
    let mut out = vec![T::zero(); batch * cout * big_vox];
    let mut cols = if plan.is_pointwise() { vec![T::zero(); rows * small_vox] } else { plan.scratch() };
    let wt = Mat::t(weight.data(), rows);
    for n in 0..batch {
        let x = &input.data()[n * cin * small_vox..(n + 1) * cin * small_vox];
        let o = &mut out[n * cout * big_vox..(n + 1) * cout * big_vox];
        fill_bias(o, bias, big_vox);
        for slab in plan.slabs() {
            let width = (slab.1 - slab.0) * plane;
            let xs = &x[slab.0 * plane..];
            gemm(rows, cin, width, wt, Mat::new(xs, small_vox), T::zero(), &mut cols, width);
            plan.col2im(slab, &cols, o);
        }
    }
    Tensor::new(&out_shape, out)
}

pub(crate) fn conv_transpose3d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &[T],
    out_shape: &[usize],
    geom: ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let plan = transposed_plan(input.shape(), weight.shape(), out_shape, geom);
    let (batch, cin, cout) = (out_shape[0], input.shape()[1], out_shape[1]);
    let (big_vox, small_vox, rows, plane) = (plan.src_vox(), plan.dst_vox(), plan.rows(), plan.plane());
    let mut dx = need[0].then(|| vec![T::zero(); input.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); weight.len()]);
    let mut cols = if plan.is_pointwise() { vec![T::zero(); rows * small_vox] } else { plan.scratch() };
    if need[0] || need[1] {
        for n in 0..batch {
            let g = &dout[n * cout * big_vox..(n + 1) * cout * big_vox];
            let x = &input.data()[n * cin * small_vox..(n + 1) * cin * small_vox];
            for slab in plan.slabs() {
                let width = (slab.1 - slab.0) * plane;
                plan.im2col(slab, g, &mut cols);
                if let Some(dx) = dx.as_mut() {
                    let dxn = &mut dx[n * cin * small_vox + slab.0 * plane..];
                    gemm(cin, rows, width, Mat::new(weight.data(), rows), Mat::new(&cols, width), T::zero(), dxn, small_vox);
                }
                if let Some(dw) = dw.as_mut() {
                    row_dots_acc(cin, rows, width, &x[slab.0 * plane..], small_vox, &cols, width, dw);
                }
            }
        }
    }
    let db = need[2].then(|| bias_grad(dout, batch, cout, big_vox));
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formulas() {
        let g = ConvGeometry::uniform(2, 1);
        assert_eq!(g.conv_output([8; 3], [3; 3]).unwrap(), [4; 3]);
        let up = ConvGeometry::uniform(2, 0);
        assert_eq!(up.transposed_output([4; 3], [2; 3]).unwrap(), [8; 3]);
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let g = ConvGeometry::uniform(1, 0);
        assert!(matches!(
            g.conv_output([2, 5, 5], [3, 3, 3]),
            Err(TensorError::KernelTooLarge { .. })
        ));
        // padding makes it fit
        assert!(ConvGeometry::uniform(1, 1).conv_output([2, 5, 5], [3, 3, 3]).is_ok());
    }

    #[test]
    fn zero_stride_is_rejected() {
        let g = ConvGeometry::new([1, 0, 1], [0; 3]);
        assert!(matches!(g.conv_output([4; 3], [1; 3]), Err(TensorError::ZeroStride { .. })));
        assert!(matches!(g.transposed_output([4; 3], [1; 3]), Err(TensorError::ZeroStride { .. })));
    }

    #[test]
    fn transposed_negative_extent() {
        let g = ConvGeometry::uniform(1, 3);
        assert!(matches!(
            g.transposed_output([2; 3], [1; 3]),
            Err(TensorError::NegativeExtent { axis: 0, .. })
        ));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let plan = Plan {
            channels: 2,
            src: [5, 4, 3],
            dst: [3, 2, 2],
            kernel: [3, 3, 2],
            geom: ConvGeometry::new([2, 2, 1], [1, 1, 0]),
        };
        let x: Vec<f64> = (0..plan.channels * plan.src_vox()).map(|i| (i as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..plan.rows() * plan.dst_vox()).map(|i| (i as f64 * 0.11).sin()).collect();
        let whole = (0, plan.dst[0]);
        let mut cols = vec![0.0; y.len()];
        plan.im2col(whole, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        plan.col2im(whole, &y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
