//! Grouped, dilated 2-D cross-correlation via im2col + GEMM.

use crate::error::{shape_err, NnError, Result};
use crate::matmul::{gemm, View};
use crate::param::{Module, Parameter};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, no bias, `padding = dilation * (kernel - 1) / 2` so odd kernels
    /// preserve spatial size.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize, groups: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: dilation * (kernel.saturating_sub(1)) / 2,
            dilation,
            groups,
            bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("dilation", self.dilation),
            ("groups", self.groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NnError::Config(format!("conv {name} must be positive")));
            }
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(NnError::Config(format!(
                "conv channels {}->{} not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < span || wp < span {
            return Err(NnError::Invalid {
                op: "conv2d",
                msg: format!("input {h}x{w} smaller than dilated kernel span {span}"),
            });
        }
        Ok(((hp - span) / self.stride + 1, (wp - span) / self.stride + 1))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel, self.kernel]
    }

    /// Number of learnable values, bias included.
    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    cg: usize,
    fg: usize,
    ckk: usize,
}

fn geometry<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, weight: &Tensor<T>) -> Result<Geometry> {
    spec.validate()?;
    let (n, c, h, w) = input.dims4("conv2d")?;
    if c != spec.in_channels {
        return Err(shape_err("conv2d", format!("{} input channels", spec.in_channels), input.shape()));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(shape_err("conv2d weight", format!("{:?}", spec.weight_shape()), weight.shape()));
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    let cg = spec.in_channels / spec.groups;
    Ok(Geometry {
        n,
        h,
        w,
        ho,
        wo,
        cg,
        fg: spec.out_channels / spec.groups,
        ckk: cg * spec.kernel * spec.kernel,
    })
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `off`.
fn valid_range(out: usize, stride: usize, off: isize, extent: usize) -> (usize, usize) {
    // need 0 <= o*stride + off < extent
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = if (extent as isize) <= off {
        0
    } else {
        ((extent as isize - off + s - 1) / s).min(out as isize)
    };
    let lo = lo.min(out as isize).max(0) as usize;
    (lo, (hi.max(lo as isize)) as usize)
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, spec: &ConvSpec, cols: &mut [T]) {
    let k = spec.kernel;
    let hw_out = g.ho * g.wo;
    for c in 0..g.cg {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let offy = (ky * spec.dilation) as isize - spec.padding as isize;
            let (y0, y1) = valid_range(g.ho, spec.stride, offy, g.h);
            for kx in 0..k {
                let offx = (kx * spec.dilation) as isize - spec.padding as isize;
                let (x0, x1) = valid_range(g.wo, spec.stride, offx, g.w);
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                dst.fill(T::zero());
                for oy in y0..y1 {
                    let iy = (oy * spec.stride) as isize + offy;
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if spec.stride == 1 {
                        let ix0 = (x0 as isize + offx) as usize;
                        drow[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            drow[ox] = src[((ox * spec.stride) as isize + offx) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, spec: &ConvSpec, dx: &mut [T]) {
    let k = spec.kernel;
    let hw_out = g.ho * g.wo;
    for c in 0..g.cg {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let offy = (ky * spec.dilation) as isize - spec.padding as isize;
            let (y0, y1) = valid_range(g.ho, spec.stride, offy, g.h);
            for kx in 0..k {
                let offx = (kx * spec.dilation) as isize - spec.padding as isize;
                let (x0, x1) = valid_range(g.wo, spec.stride, offx, g.w);
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in y0..y1 {
                    let iy = ((oy * spec.stride) as isize + offy) as usize;
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in x0..x1 {
                        drow[((ox * spec.stride) as isize + offx) as usize] += srow[ox];
                    }
                }
            }
        }
    }
}

const LANES: usize = 16;

/// Stride-1 kernel over a zero-padded copy of the input, accumulating a
/// 16-wide strip of one output row across every tap before storing it. Used
/// for the forward pass and the input gradient; the per-group matrices are
/// too small for im2col + GEMM to pay off.
fn use_direct(spec: &ConvSpec, g: &Geometry) -> bool {
    spec.stride == 1 && spec.padding <= spec.dilation * (spec.kernel - 1) && g.wo >= LANES && g.cg >= 2
}

/// `planes` channels of `h x w`, zero-padded by `pad` on every side.
fn pad_planes<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, pad: usize, out: &mut Vec<T>) {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    out.clear();
    out.resize(planes * hp * wp, T::zero());
    for c in 0..planes {
        for y in 0..h {
            let dst = &mut out[(c * hp + y + pad) * wp + pad..][..w];
            dst.copy_from_slice(&x[(c * h + y) * w..][..w]);
        }
    }
}

/// `out[f] += sum_c sum_taps w[f][c][ky][kx] * xp[c][oy + ky*d][ox + kx*d]`
/// with `xp` already padded to `(ho + d(k-1)) x (wo + d(k-1))`.
#[allow(clippy::too_many_arguments)]
fn direct_accumulate<T: Scalar>(
    xp: &[T],
    planes_in: usize,
    wts: &[T],
    planes_out: usize,
    k: usize,
    d: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let mut f = 0;
    while f < planes_out {
        let left = planes_out - f;
        if left >= 4 {
            accumulate_block::<T, 4>(xp, planes_in, wts, f, k, d, ho, wo, out);
            f += 4;
        } else if left >= 2 {
            accumulate_block::<T, 2>(xp, planes_in, wts, f, k, d, ho, wo, out);
            f += 2;
        } else {
            accumulate_block::<T, 1>(xp, planes_in, wts, f, k, d, ho, wo, out);
            f += 1;
        }
    }
}

/// `FB` output planes at once, one 16-wide strip of a row at a time. The
/// accumulators are by-value arrays so they stay in vector registers; the
/// ragged right edge falls back to scalar code.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn accumulate_block<T: Scalar, const FB: usize>(
    xp: &[T],
    planes_in: usize,
    wts: &[T],
    f0: usize,
    k: usize,
    d: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let span = d * (k - 1);
    let (hp, wp) = (ho + span, wo + span);
    let per_f = planes_in * k * k;
    let mut wblock = vec![[T::zero(); FB]; per_f];
    for (i, wb) in wblock.iter_mut().enumerate() {
        for (j, w) in wb.iter_mut().enumerate() {
            *w = wts[(f0 + j) * per_f + i];
        }
    }
    let full = wo / LANES * LANES;
    for oy in 0..ho {
        for x0 in (0..full).step_by(LANES) {
            let mut acc = [[T::zero(); LANES]; FB];
            for c in 0..planes_in {
                for ky in 0..k {
                    let row = &xp[(c * hp + oy + ky * d) * wp + x0..];
                    for kx in 0..k {
                        let wb = wblock[(c * k + ky) * k + kx];
                        let src: [T; LANES] = row[kx * d..kx * d + LANES].try_into().unwrap();
                        for j in 0..FB {
                            let mut a = acc[j];
                            for l in 0..LANES {
                                a[l] += wb[j] * src[l];
                            }
                            acc[j] = a;
                        }
                    }
                }
            }
            for (j, a) in acc.iter().enumerate() {
                let orow = &mut out[((f0 + j) * ho + oy) * wo + x0..][..LANES];
                for l in 0..LANES {
                    orow[l] += a[l];
                }
            }
        }
        for x in full..wo {
            let mut acc = [T::zero(); FB];
            for c in 0..planes_in {
                for ky in 0..k {
                    let row = &xp[(c * hp + oy + ky * d) * wp..];
                    for kx in 0..k {
                        let wb = wblock[(c * k + ky) * k + kx];
                        for j in 0..FB {
                            acc[j] += wb[j] * row[x + kx * d];
                        }
                    }
                }
            }
            for (j, a) in acc.iter().enumerate() {
                out[((f0 + j) * ho + oy) * wo + x] += *a;
            }
        }
    }
}

/// Weights for the input-gradient pass of one group: transposed channels and
/// flipped taps, `[cg, fg, k, k]`.
fn flipped_transposed<T: Scalar>(wg: &[T], fg: usize, cg: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); wg.len()];
    for f in 0..fg {
        for c in 0..cg {
            for ky in 0..k {
                for kx in 0..k {
                    out[((c * fg + f) * k + (k - 1 - ky)) * k + (k - 1 - kx)] = wg[((f * cg + c) * k + ky) * k + kx];
                }
            }
        }
    }
    out
}

/// Pads to exactly the extent the stride-1 kernel reads: `ho + d(k-1)` rows.
fn crop_pad<T: Scalar>(padded: &[T], planes: usize, hp: usize, wp: usize, rows: usize, cols: usize) -> Vec<T> {
    if rows == hp && cols == wp {
        return padded.to_vec();
    }
    let mut out = vec![T::zero(); planes * rows * cols];
    for c in 0..planes {
        for y in 0..rows.min(hp) {
            let n = cols.min(wp);
            out[(c * rows + y) * cols..][..n].copy_from_slice(&padded[(c * hp + y) * wp..][..n]);
        }
    }
    out
}

fn direct_accumulate_padded<T: Scalar>(padded: &[T], g: &Geometry, spec: &ConvSpec, wg: &[T], out: &mut [T]) {
    let span = spec.dilation * (spec.kernel - 1);
    let (hp, wp) = (g.h + 2 * spec.padding, g.w + 2 * spec.padding);
    let (rows, cols) = (g.ho + span, g.wo + span);
    if rows == hp && cols == wp {
        direct_accumulate(padded, g.cg, wg, g.fg, spec.kernel, spec.dilation, g.ho, g.wo, out);
    } else {
        let xp = crop_pad(padded, g.cg, hp, wp, rows, cols);
        direct_accumulate(&xp, g.cg, wg, g.fg, spec.kernel, spec.dilation, g.ho, g.wo, out);
    }
}

/// 3x3 weight gradient of one group: each `(f, c)` pair correlates an
/// output-gradient plane with a padded input plane, keeping one 16-wide
/// accumulator per tap.
fn direct_weight_grad3<T: Scalar>(xpad: &[T], dout: &[T], g: &Geometry, spec: &ConvSpec, dw: &mut [T]) {
    let d = spec.dilation;
    let (hp, wp) = (g.h + 2 * spec.padding, g.w + 2 * spec.padding);
    let (ho, wo) = (g.ho, g.wo);
    let full = wo / LANES * LANES;
    for f in 0..g.fg {
        let dplane = &dout[f * ho * wo..][..ho * wo];
        for c in 0..g.cg {
            let xplane = &xpad[c * hp * wp..][..hp * wp];
            let mut acc = [[T::zero(); LANES]; 9];
            let mut tail = [T::zero(); 9];
            for y in 0..ho {
                let drow = &dplane[y * wo..][..wo];
                let rows = [0, 1, 2].map(|ky| &xplane[(y + ky * d) * wp..][..wp]);
                // by-value arrays keep the accumulators in vector registers
                for x0 in (0..full).step_by(LANES) {
                    let dv: [T; LANES] = drow[x0..x0 + LANES].try_into().unwrap();
                    for (ky, row) in rows.iter().enumerate() {
                        for kx in 0..3 {
                            let xv: [T; LANES] = row[x0 + kx * d..][..LANES].try_into().unwrap();
                            let mut a = acc[ky * 3 + kx];
                            for l in 0..LANES {
                                a[l] += dv[l] * xv[l];
                            }
                            acc[ky * 3 + kx] = a;
                        }
                    }
                }
                for x in full..wo {
                    for (ky, row) in rows.iter().enumerate() {
                        for kx in 0..3 {
                            tail[ky * 3 + kx] += drow[x] * row[x + kx * d];
                        }
                    }
                }
            }
            let out = &mut dw[(f * g.cg + c) * 9..][..9];
            for t in 0..9 {
                out[t] += acc[t].iter().copied().sum::<T>() + tail[t];
            }
        }
    }
}

/// Input gradient as a correlation of the re-padded output gradient with
/// flipped, channel-transposed weights.
fn direct_input_grad<T: Scalar>(wg: &[T], dout: &[T], dx: &mut [T], g: &Geometry, spec: &ConvSpec, padded: &mut Vec<T>) {
    let (k, d) = (spec.kernel, spec.dilation);
    let span = d * (k - 1);
    let back_pad = span - spec.padding;
    pad_planes(dout, g.fg, g.ho, g.wo, back_pad, padded);
    let (hp, wp) = (g.ho + 2 * back_pad, g.wo + 2 * back_pad);
    let wt = flipped_transposed(wg, g.fg, g.cg, k);
    let (rows, cols) = (g.h + span, g.w + span);
    if rows == hp && cols == wp {
        direct_accumulate(padded, g.fg, &wt, g.cg, k, d, g.h, g.w, dx);
    } else {
        let dp = crop_pad(padded, g.fg, hp, wp, rows, cols);
        direct_accumulate(&dp, g.fg, &wt, g.cg, k, d, g.h, g.w, dx);
    }
}

/// Grouped dilated cross-correlation. Output channel `f` of group `g` reads only
/// input channels of group `g`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = geometry(input, spec, weight)?;
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(shape_err("conv2d bias", format!("[{}]", spec.out_channels), b.shape()));
        }
    }
    let hw_out = g.ho * g.wo;
    let f = spec.out_channels;
    let mut out = Tensor::zeros(&[g.n, f, g.ho, g.wo]);
    let direct = use_direct(spec, &g);
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); g.ckk * hw_out] };
    let mut padded = Vec::new();
    let x = input.data();
    let wdata = weight.data();
    let odata = out.data_mut();
    for n in 0..g.n {
        for grp in 0..spec.groups {
            let xs = &x[(n * spec.in_channels + grp * g.cg) * g.h * g.w..][..g.cg * g.h * g.w];
            let wg = &wdata[grp * g.fg * g.ckk..(grp + 1) * g.fg * g.ckk];
            let og = &mut odata[(n * f + grp * g.fg) * hw_out..][..g.fg * hw_out];
            if direct {
                pad_planes(xs, g.cg, g.h, g.w, spec.padding, &mut padded);
                // the padded buffer may be larger than needed on the far side
                direct_accumulate_padded(&padded, &g, spec, wg, og);
            } else {
                im2col(xs, &g, spec, &mut cols);
                gemm(T::one(), View::new(wg, g.fg, g.ckk), View::new(&cols, g.ckk, hw_out), T::zero(), og, hw_out);
            }
        }
        if let Some(b) = bias {
            for (fi, &bv) in b.data().iter().enumerate() {
                for v in &mut odata[(n * f + fi) * hw_out..][..hw_out] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let mut grads = ConvGrads {
        input: Tensor::zeros(input.shape()),
        weight: Tensor::zeros(weight.shape()),
        bias: spec.bias.then(|| Tensor::zeros(&[spec.out_channels])),
    };
    let (gi, gw, gb) = (&mut grads.input, &mut grads.weight, grads.bias.as_mut());
    backward_into(input, spec, weight, grad_out, gi, gw, gb)?;
    Ok(grads)
}

fn backward_into<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_in: &mut Tensor<T>,
    grad_w: &mut Tensor<T>,
    grad_b: Option<&mut Tensor<T>>,
) -> Result<()> {
    let g = geometry(input, spec, weight)?;
    let f = spec.out_channels;
    if grad_out.shape() != [g.n, f, g.ho, g.wo] {
        return Err(shape_err("conv2d backward", format!("[{}, {f}, {}, {}]", g.n, g.ho, g.wo), grad_out.shape()));
    }
    let hw_out = g.ho * g.wo;
    let direct = use_direct(spec, &g);
    // GEMM with only a few rows per group wastes most of its tile, so narrow
    // groups correlate planes directly instead
    let direct_wgrad = direct && spec.kernel == 3 && g.fg < 8;
    let mut cols = vec![T::zero(); if direct_wgrad { 0 } else { g.ckk * hw_out }];
    let mut dcols = vec![T::zero(); if direct { 0 } else { g.ckk * hw_out }];
    let mut padded = Vec::new();
    let mut xpad = Vec::new();
    let x = input.data();
    let wdata = weight.data();
    let dout = grad_out.data();
    let dx = grad_in.data_mut();
    let dw = grad_w.data_mut();
    for n in 0..g.n {
        for grp in 0..spec.groups {
            let xoff = (n * spec.in_channels + grp * g.cg) * g.h * g.w;
            let xs = &x[xoff..][..g.cg * g.h * g.w];
            let dog = &dout[(n * f + grp * g.fg) * hw_out..][..g.fg * hw_out];
            let dwg = &mut dw[grp * g.fg * g.ckk..(grp + 1) * g.fg * g.ckk];
            if direct_wgrad {
                pad_planes(xs, g.cg, g.h, g.w, spec.padding, &mut xpad);
                direct_weight_grad3(&xpad, dog, &g, spec, dwg);
            } else {
                im2col(xs, &g, spec, &mut cols);
                gemm(
                    T::one(),
                    View::new(dog, g.fg, hw_out),
                    View::transposed(&cols, g.ckk, hw_out),
                    T::one(),
                    dwg,
                    g.ckk,
                );
            }
            let wg = &wdata[grp * g.fg * g.ckk..(grp + 1) * g.fg * g.ckk];
            if direct {
                direct_input_grad(wg, dog, &mut dx[xoff..][..g.cg * g.h * g.w], &g, spec, &mut padded);
                continue;
            }
            gemm(
                T::one(),
                View::transposed(wg, g.fg, g.ckk),
                View::new(dog, g.fg, hw_out),
                T::zero(),
                &mut dcols,
                hw_out,
            );
            col2im(&dcols, &g, spec, &mut dx[xoff..][..g.cg * g.h * g.w]);
        }
    }
    if let Some(db) = grad_b {
        let db = db.data_mut();
        for n in 0..g.n {
            for (fi, acc) in db.iter_mut().enumerate() {
                *acc += dout[(n * f + fi) * hw_out..][..hw_out].iter().copied().sum::<T>();
            }
        }
    }
    Ok(())
}

/// Convolution layer holding its weights and the cached input of the last
/// forward pass.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: &str, spec: ConvSpec, weight: Tensor<T>) -> Result<Self> {
        spec.validate()?;
        if weight.shape() != spec.weight_shape() {
            return Err(shape_err("Conv2d::new", format!("{:?}", spec.weight_shape()), weight.shape()));
        }
        Ok(Conv2d {
            spec,
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: spec
                .bias
                .then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]))),
            input: None,
        })
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out = conv2d(input, &self.spec, &self.weight.value, self.bias.as_ref().map(|b| &b.value))?;
        self.input = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.input.take().ok_or(NnError::Invalid {
            op: "Conv2d::backward",
            msg: "called before forward".into(),
        })?;
        let mut grad_in = Tensor::zeros(input.shape());
        backward_into(
            &input,
            &self.spec,
            &self.weight.value,
            grad_out,
            &mut grad_in,
            &mut self.weight.grad,
            self.bias.as_mut().map(|b| &mut b.grad),
        )?;
        Ok(grad_in)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: &[usize]) -> Tensor<f64> {
        Tensor::full(shape, 1.0)
    }

    /// Direct nested-loop reference for grouped dilated cross-correlation.
    fn naive(x: &Tensor<f64>, s: &ConvSpec, w: &Tensor<f64>) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4("naive").unwrap();
        let (ho, wo) = s.output_hw(h, wd).unwrap();
        let cg = c / s.groups;
        let fg = s.out_channels / s.groups;
        Tensor::from_fn(&[n, s.out_channels, ho, wo], |idx| {
            let ox = idx % wo;
            let oy = (idx / wo) % ho;
            let f = (idx / (wo * ho)) % s.out_channels;
            let b = idx / (wo * ho * s.out_channels);
            let grp = f / fg;
            let mut acc = 0.0;
            for ci in 0..cg {
                for ky in 0..s.kernel {
                    for kx in 0..s.kernel {
                        let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                        let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        let xv = x.data()[((b * c + grp * cg + ci) * h + iy as usize) * wd + ix as usize];
                        let wv = w.data()[((f * cg + ci) * s.kernel + ky) * s.kernel + kx];
                        acc += xv * wv;
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn all_ones_three_by_three() {
        let spec = ConvSpec { padding: 0, ..ConvSpec::same(1, 1, 3, 1, 1) };
        let out = conv2d(&ones(&[1, 1, 3, 3]), &spec, &ones(&[1, 1, 3, 3]), None).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn dilated_taps_on_five_by_five() {
        let spec = ConvSpec { padding: 0, ..ConvSpec::same(1, 1, 3, 2, 1) };
        // Mark the taps so the test fails if the wrong pixels are read.
        let x = Tensor::from_fn(&[1, 1, 5, 5], |i| if (i / 5) % 2 == 0 && (i % 5) % 2 == 0 { 1.0 } else { 100.0 });
        let out = conv2d(&x, &spec, &ones(&[1, 1, 3, 3]), None).unwrap();
        assert_eq!(out.data(), &[9.0]);
        let out = conv2d(&ones(&[1, 1, 5, 5]), &spec, &ones(&[1, 1, 3, 3]), None).unwrap();
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn grouped_weight_count() {
        assert_eq!(ConvSpec::same(4, 4, 3, 1, 4).weight_count(), 36);
        assert_eq!(ConvSpec::same(4, 4, 3, 1, 1).weight_count(), 144);
    }

    #[test]
    fn rejects_indivisible_groups_and_bad_shapes() {
        assert!(ConvSpec::same(6, 4, 3, 1, 4).validate().is_err());
        let spec = ConvSpec::same(2, 2, 3, 1, 1);
        let w = ones(&[2, 2, 3, 3]);
        assert!(conv2d(&ones(&[1, 3, 4, 4]), &spec, &w, None).is_err());
        assert!(conv2d(&ones(&[1, 2, 4, 4]), &spec, &ones(&[2, 1, 3, 3]), None).is_err());
    }

    #[test]
    fn matches_naive_reference() {
        let cases = [(1, 1, 1, 1, 9, 8), (2, 2, 1, 2, 9, 8), (4, 1, 2, 1, 9, 8), (2, 3, 2, 0, 9, 8)];
        // widths of 16 and more take the strip kernel, 21 leaves a ragged tail
        let wide = [(1, 1, 1, 1, 5, 16), (2, 2, 1, 2, 7, 21), (2, 2, 1, 1, 6, 37), (1, 1, 1, 0, 4, 34)];
        for (groups, dil, stride, pad, h, w) in cases.into_iter().chain(wide) {
            let spec = ConvSpec {
                in_channels: 4,
                out_channels: 8,
                kernel: 3,
                stride,
                padding: pad,
                dilation: dil,
                groups,
                bias: false,
            };
            let x = pseudo(&[2, 4, h, w], 1);
            let w = pseudo(&spec.weight_shape(), 2);
            let fast = conv2d(&x, &spec, &w, None).unwrap();
            let slow = naive(&x, &spec, &w);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_group_equals_block_diagonal_dense_weights() {
        // G groups == G=1 with the cross-group weights zeroed.
        let grouped = ConvSpec::same(4, 4, 3, 1, 2);
        let dense = ConvSpec::same(4, 4, 3, 1, 1);
        let wg = pseudo(&grouped.weight_shape(), 5);
        let wd = Tensor::from_fn(&dense.weight_shape(), |i| {
            let kk = i % 9;
            let ci = (i / 9) % 4;
            let f = i / 36;
            if ci / 2 == f / 2 {
                wg.data()[(f * 2 + ci % 2) * 9 + kk]
            } else {
                0.0
            }
        });
        let x = pseudo(&[1, 4, 6, 6], 9);
        let a = conv2d(&x, &grouped, &wg, None).unwrap();
        let b = conv2d(&x, &dense, &wd, None).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_is_adjoint_of_forward() {
        // <conv(x), g> == <x, dX(g)> for every geometry, both code paths.
        for (groups, dil, pad, w) in [(1, 1, 1, 8), (2, 2, 2, 20), (2, 2, 1, 33), (1, 1, 0, 18)] {
            let spec = ConvSpec { padding: pad, ..ConvSpec::same(4, 6, 3, dil, groups) };
            let x = pseudo(&[2, 4, 5, w], 3);
            let wt = pseudo(&spec.weight_shape(), 4);
            let y = conv2d(&x, &spec, &wt, None).unwrap();
            let g = pseudo(y.shape(), 5);
            let grads = conv2d_backward(&x, &spec, &wt, &g).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(grads.input.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
            let lhs_w: f64 = wt.data().iter().zip(grads.weight.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - lhs_w).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn output_size_formula() {
        let s = ConvSpec { in_channels: 1, out_channels: 1, kernel: 3, stride: 2, padding: 1, dilation: 2, groups: 1, bias: false };
        // floor((11 + 2 - 2*2 - 1)/2) + 1 = 5
        assert_eq!(s.output_hw(11, 11).unwrap(), (5, 5));
    }
}
