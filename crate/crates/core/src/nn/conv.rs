//! 3-D convolution (cross-correlation) lowered to im2col + GEMM.
//!
//! Samples in a batch are processed independently; per-sample weight
//! gradients are summed afterwards in batch order so the result does not
//! depend on how samples were scheduled.

use crate::error::{Error, Result};
use crate::float::Float;
use crate::parallel;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::param::{he_normal, Parameter};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Stride 1 with padding that preserves extents for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Self::new(1, (kernel - 1) / 2)
    }
}

/// `floor((extent + 2·padding − kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_out_extent(extent: usize, kernel: usize, geom: ConvGeometry) -> Option<usize> {
    let padded = extent + 2 * geom.padding;
    if geom.stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / geom.stride + 1)
}

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug)]
struct Plan {
    batch: usize,
    cin: usize,
    cout: usize,
    k: usize,
    input: [usize; 3],
    output: [usize; 3],
    geom: ConvGeometry,
}

impl Plan {
    fn new<T: Float>(x: &Tensor<T>, weight: &Tensor<T>, geom: ConvGeometry) -> Result<Self> {
        let [n, cin, d, h, w] = x.dims5()?;
        let [cout, wcin, kd, kh, kw] = weight.dims5()?;
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv3d (input channels)",
                left: x.dims().to_vec(),
                right: weight.dims().to_vec(),
            });
        }
        if kd != kh || kh != kw {
            return Err(Error::InvalidShape {
                dims: weight.dims().to_vec(),
                reason: "kernel must be cubic".into(),
            });
        }
        if geom.stride == 0 {
            return Err(Error::InvalidArgument("conv3d stride must be positive".into()));
        }
        let mut output = [0; 3];
        for (o, &e) in output.iter_mut().zip(&[d, h, w]) {
            *o = conv_out_extent(e, kd, geom).ok_or_else(|| Error::InvalidShape {
                dims: x.dims().to_vec(),
                reason: format!(
                    "kernel {kd} with padding {} leaves no output voxels",
                    geom.padding
                ),
            })?;
        }
        Ok(Self {
            batch: n,
            cin,
            cout,
            k: kd,
            input: [d, h, w],
            output,
            geom,
        })
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.geom.stride + t) as isize - self.geom.padding as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }

    /// Unfolds one sample (`cin × D×H×W`) into a `patch × out_vol` matrix.
    fn im2col<T: Float>(&self, x: &[T], cols: &mut [T]) {
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output;
        let k = self.k;
        let ov = self.out_vol();
        let s = self.geom.stride;
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &x[c * d * h * w..(c + 1) * d * h * w];
            for i in 0..k {
                for j in 0..k {
                    for l in 0..k {
                        let dst = &mut cols[row * ov..(row + 1) * ov];
                        for zd in 0..od {
                            let Some(sd) = self.src(zd, i, d) else {
                                dst[zd * oh * ow..(zd + 1) * oh * ow].fill(T::zero());
                                continue;
                            };
                            for zh in 0..oh {
                                let out_row = &mut dst[(zd * oh + zh) * ow..(zd * oh + zh + 1) * ow];
                                let Some(sh) = self.src(zh, j, h) else {
                                    out_row.fill(T::zero());
                                    continue;
                                };
                                let in_row = &xc[(sd * h + sh) * w..(sd * h + sh + 1) * w];
                                for (zw, v) in out_row.iter_mut().enumerate() {
                                    let iw = (zw * s + l) as isize - self.geom.padding as isize;
                                    *v = if iw >= 0 && (iw as usize) < w {
                                        in_row[iw as usize]
                                    } else {
                                        T::zero()
                                    };
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Plan::im2col`]: scatters-and-adds columns back into a sample.
    fn col2im<T: Float>(&self, cols: &[T], dx: &mut [T]) {
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output;
        let k = self.k;
        let ov = self.out_vol();
        let s = self.geom.stride;
        let mut row = 0;
        for c in 0..self.cin {
            let dxc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
            for i in 0..k {
                for j in 0..k {
                    for l in 0..k {
                        let src = &cols[row * ov..(row + 1) * ov];
                        row += 1;
                        for zd in 0..od {
                            let Some(sd) = self.src(zd, i, d) else { continue };
                            for zh in 0..oh {
                                let Some(sh) = self.src(zh, j, h) else { continue };
                                let g_row = &src[(zd * oh + zh) * ow..(zd * oh + zh + 1) * ow];
                                let dst = &mut dxc[(sd * h + sh) * w..(sd * h + sh + 1) * w];
                                for (zw, &g) in g_row.iter().enumerate() {
                                    let iw = (zw * s + l) as isize - self.geom.padding as isize;
                                    if iw >= 0 && (iw as usize) < w {
                                        dst[iw as usize] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// A 1×1×1 stride-1 unpadded conv reads the sample verbatim.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }
}

/// Cross-correlation with zero padding:
/// `out[n,o,z] = bias[o] + Σ_{c,t} x[n,c,z·s − p + t] · weight[o,c,t]`.
pub fn conv3d<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let plan = Plan::new(x, weight, geom)?;
    if let Some(b) = bias {
        if b.dims() != [plan.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv3d (bias)",
                left: vec![plan.cout],
                right: b.dims().to_vec(),
            });
        }
    }
    let (iv, ov, kk) = (plan.in_vol(), plan.out_vol(), plan.patch());
    let mut out = vec![T::zero(); plan.batch * plan.cout * ov];
    parallel::for_each_chunk(&mut out, plan.cout * ov, |n, y| {
        let xs = &x.data()[n * plan.cin * iv..(n + 1) * plan.cin * iv];
        if let Some(b) = bias {
            for (plane, &bv) in y.chunks_mut(ov).zip(b.data()) {
                plane.fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if plan.is_pointwise() {
            T::gemm(plan.cout, kk, ov, T::one(), weight.data(), false, xs, false, beta, y);
        } else {
            let mut cols = vec![T::zero(); kk * ov];
            plan.im2col(xs, &mut cols);
            T::gemm(plan.cout, kk, ov, T::one(), weight.data(), false, &cols, false, beta, y);
        }
    });
    let [od, oh, ow] = plan.output;
    Ok(Tensor::from_parts(vec![plan.batch, plan.cout, od, oh, ow], out))
}

#[derive(Clone, Debug)]
pub struct Conv3dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv3d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<Conv3dGrads<T>> {
    let plan = Plan::new(x, weight, geom)?;
    let [od, oh, ow] = plan.output;
    let expected = [plan.batch, plan.cout, od, oh, ow];
    if grad_out.dims() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv3d_backward",
            left: expected.to_vec(),
            right: grad_out.dims().to_vec(),
        });
    }
    let (iv, ov, kk, cout, cin) = (plan.in_vol(), plan.out_vol(), plan.patch(), plan.cout, plan.cin);

    let per_sample = parallel::map_range(plan.batch, |n| {
        let xs = &x.data()[n * cin * iv..(n + 1) * cin * iv];
        let dy = &grad_out.data()[n * cout * ov..(n + 1) * cout * ov];
        let mut dw = vec![T::zero(); cout * kk];
        let mut dx = vec![T::zero(); cin * iv];
        if plan.is_pointwise() {
            T::gemm(cout, ov, kk, T::one(), dy, false, xs, true, T::zero(), &mut dw);
            T::gemm(kk, cout, ov, T::one(), weight.data(), true, dy, false, T::zero(), &mut dx);
        } else {
            let mut cols = vec![T::zero(); kk * ov];
            plan.im2col(xs, &mut cols);
            T::gemm(cout, ov, kk, T::one(), dy, false, &cols, true, T::zero(), &mut dw);
            T::gemm(kk, cout, ov, T::one(), weight.data(), true, dy, false, T::zero(), &mut cols);
            plan.col2im(&cols, &mut dx);
        }
        (dx, dw)
    });

    let mut dx = Vec::with_capacity(plan.batch * cin * iv);
    let mut dw = vec![T::zero(); cout * kk];
    for (sdx, sdw) in per_sample {
        dx.extend_from_slice(&sdx);
        dw.iter_mut().zip(&sdw).for_each(|(a, &b)| *a += b);
    }
    let mut db = vec![T::zero(); cout];
    for n in 0..plan.batch {
        for (o, acc) in db.iter_mut().enumerate() {
            let base = (n * cout + o) * ov;
            *acc += grad_out.data()[base..base + ov].iter().copied().sum::<T>();
        }
    }
    Ok(Conv3dGrads {
        input: Tensor::from_parts(x.dims().to_vec(), dx),
        weight: Tensor::from_parts(weight.dims().to_vec(), dw),
        bias: Tensor::from_parts(vec![cout], db),
    })
}

/// Convolution layer owning its kernel and optional bias.
#[derive(Clone, Debug)]
pub struct Conv3d<T = f32> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub geom: ConvGeometry,
}

impl<T: Float> Conv3d<T> {
    /// He-initialized kernel `[cout, cin, k, k, k]`; bias (if any) starts at 0.
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeometry,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel * kernel;
        let weight = Parameter::new(
            format!("{name}.weight"),
            he_normal(&[cout, cin, kernel, kernel, kernel], fan_in, rng),
        );
        let bias = with_bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, geom }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv3d(x, self.weight.value(), self.bias.as_ref().map(|b| b.value()), self.geom)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = conv3d_backward(x, self.weight.value(), self.geom, grad_out)?;
        self.weight.accumulate_grad(&g.weight)?;
        if let Some(b) = &mut self.bias {
            b.accumulate_grad(&g.bias)?;
        }
        Ok(g.input)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = Rng::new(seed);
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = rand(&[1, 1, 3, 4, 5], 1);
        let w = Tensor::ones(&[1, 1, 1, 1, 1]);
        let y = conv3d(&x, &w, Some(&Tensor::zeros(&[1])), ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = rand(&[2, 3, 4, 4, 4], 2);
        let w = Tensor::zeros(&[2, 3, 3, 3, 3]);
        let b = Tensor::new(vec![2], vec![0.7, -1.5]).unwrap();
        let y = conv3d(&x, &w, Some(&b), ConvGeometry::same(3)).unwrap();
        assert_eq!(y.dims(), &[2, 2, 4, 4, 4]);
        for (i, v) in y.data().iter().enumerate() {
            let o = (i / 64) % 2;
            assert_eq!(*v, b.data()[o]);
        }
    }

    #[test]
    fn same_padding_preserves_extent() {
        for k in [1, 3, 5, 7] {
            for e in [1, 2, 5, 8] {
                assert_eq!(conv_out_extent(e, k, ConvGeometry::same(k)), Some(e));
            }
        }
        // stride 2, pad 1, k 3 gives ceil(e / 2)
        for e in 1..20 {
            assert_eq!(conv_out_extent(e, 3, ConvGeometry::new(2, 1)), Some(e.div_ceil(2)));
            assert_eq!(conv_out_extent(e, 1, ConvGeometry::new(2, 0)), Some(e.div_ceil(2)));
        }
    }

    #[test]
    fn errors() {
        let x = rand(&[1, 2, 2, 2, 2], 3);
        assert!(conv3d(&x, &Tensor::zeros(&[1, 3, 1, 1, 1]), None, ConvGeometry::new(1, 0)).is_err());
        assert!(conv3d(&x, &Tensor::zeros(&[1, 2, 3, 3, 3]), None, ConvGeometry::new(1, 0)).is_err());
        assert!(conv3d(&x, &Tensor::zeros(&[1, 2, 1, 1, 1]), None, ConvGeometry::new(0, 0)).is_err());
    }
}
