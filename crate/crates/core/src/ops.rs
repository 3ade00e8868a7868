//! Numeric kernels: the attention activation, generalized-mean pooling and
//! 2-D cross-correlation, each with the backward pass used by the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Values below this are clamped before the GeM power.
pub const GEM_EPS: f64 = 1e-6;

pub const DEFAULT_GEM_P: f64 = 3.0;

/// Growth factor `k` in (0,1) and exponent `t` > 0 of the attention activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationParams {
    k: f64,
    t: f64,
}

impl Default for ActivationParams {
    fn default() -> Self {
        ActivationParams { k: 0.5, t: 1.0 }
    }
}

impl ActivationParams {
    pub fn new(k: f64, t: f64) -> Result<Self> {
        if !(k > 0.0 && k < 1.0) {
            return Err(Error::InvalidParam(format!("activation K must lie in (0,1), got {k}")));
        }
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidParam(format!("activation T must be > 0, got {t}")));
        }
        Ok(ActivationParams { k, t })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        if x > 0.0 {
            self.k * (x + 1.0).powf(self.t)
        } else {
            self.k * x.exp()
        }
    }

    /// Derivative; at exactly 0 the left branch is used.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        if x > 0.0 {
            self.k * self.t * (x + 1.0).powf(self.t - 1.0)
        } else {
            self.k * x.exp()
        }
    }

    /// Pre-activation giving output `y`, for `y` in (0, k].
    pub fn inverse_nonpositive(&self, y: f64) -> f64 {
        (y / self.k).ln().min(0.0)
    }
}

pub fn delta_activation(x: &Tensor, p: &ActivationParams) -> Result<Tensor> {
    x.map(|v| p.eval(v)).ensure_finite("delta activation")
}

#[inline]
pub(crate) fn pow_p(x: f64, p: f64) -> f64 {
    if p == 1.0 {
        x
    } else if p == 2.0 {
        x * x
    } else if p == 3.0 {
        x * x * x
    } else {
        x.powf(p)
    }
}

#[inline]
pub(crate) fn root_p(x: f64, p: f64) -> f64 {
    if p == 1.0 {
        x
    } else if p == 2.0 {
        x.sqrt()
    } else if p == 3.0 {
        x.cbrt()
    } else {
        x.powf(1.0 / p)
    }
}

pub fn check_gem_p(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidParam(format!("GeM exponent must be >= 1, got {p}")));
    }
    Ok(())
}

/// Generalized-mean pooling over every axis but the first: `[C, ...] -> [C]`.
pub fn gem_pool(x: &Tensor, p: f64) -> Result<Tensor> {
    check_gem_p(p)?;
    if x.rank() < 2 {
        return Err(Error::ShapeMismatch(format!("gem_pool needs rank >= 2, got {:?}", x.shape())));
    }
    let c = x.shape()[0];
    let n = x.numel() / c.max(1);
    let out = x
        .data()
        .chunks_exact(n)
        .map(|row| {
            let s: f64 = row.iter().map(|&v| pow_p(v.max(GEM_EPS), p)).sum();
            root_p(s / n as f64, p)
        })
        .collect();
    Tensor::new(vec![c], out)?.ensure_finite("gem_pool")
}

pub(crate) fn gem_pool_backward(x: &Tensor, out: &Tensor, grad: &Tensor, p: f64) -> Tensor {
    let c = x.shape()[0];
    let n = x.numel() / c.max(1);
    let mut gx = Tensor::zeros(x.shape());
    for ((row, gr), (&o, &g)) in x
        .data()
        .chunks_exact(n)
        .zip(gx.data_mut().chunks_exact_mut(n))
        .zip(out.data().iter().zip(grad.data()))
    {
        // d/dx_i of (mean x^p)^(1/p) = o^(1-p) * x_i^(p-1) / n
        let coef = g * o.powf(1.0 - p) / n as f64;
        for (&v, gv) in row.iter().zip(gr.iter_mut()) {
            if v > GEM_EPS {
                *gv = coef * pow_p(v, p - 1.0);
            }
        }
    }
    gx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry { stride, padding }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    /// Output positions `o` with `0 <= o*stride + k - pad < input`.
    #[inline]
    fn valid_range(&self, k: usize, input: usize, output: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((input as isize - off) + s - 1) / s;
        let lo = lo.max(0) as usize;
        let hi = (hi.max(0) as usize).min(output);
        (lo, hi.max(lo))
    }
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<ConvDims> {
    input.expect_rank(3)?;
    kernel.expect_rank(4)?;
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ks = kernel.shape();
    if ks[1] != cin || ks[2] != ks[3] {
        return Err(Error::ShapeMismatch(format!(
            "kernel {:?} incompatible with input {:?}",
            ks,
            input.shape()
        )));
    }
    if let Some(b) = bias {
        b.expect_shape(&[ks[0]])?;
    }
    let k = ks[2];
    let oh = g.output_len(h, k);
    let ow = g.output_len(w, k);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(ConvDims {
            cin,
            h,
            w,
            cout: ks[0],
            k,
            oh,
            ow,
        }),
        _ => Err(Error::ShapeMismatch(format!(
            "kernel {k} with {g:?} does not fit input {:?}",
            input.shape()
        ))),
    }
}

/// Cross-correlation of `[Cin,H,W]` with `[Cout,Cin,k,k]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, geom: ConvGeometry) -> Result<Tensor> {
    let d = conv_dims(input, kernel, bias, geom)?;
    let s = geom.stride;
    let mut out = vec![0.0; d.cout * d.oh * d.ow];
    let x = input.data();
    let wt = kernel.data();
    for co in 0..d.cout {
        let oplane = &mut out[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        if let Some(b) = bias {
            oplane.iter_mut().for_each(|v| *v = b.data()[co]);
        }
        for ci in 0..d.cin {
            let iplane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.k {
                let (ylo, yhi) = geom.valid_range(ky, d.h, d.oh);
                for kx in 0..d.k {
                    let wv = wt[((co * d.cin + ci) * d.k + ky) * d.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = geom.valid_range(kx, d.w, d.ow);
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - geom.padding;
                        let irow = &iplane[iy * d.w..(iy + 1) * d.w];
                        let orow = &mut oplane[oy * d.ow..(oy + 1) * d.ow];
                        for ox in xlo..xhi {
                            orow[ox] += wv * irow[ox * s + kx - geom.padding];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.cout, d.oh, d.ow], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    has_bias: bool,
    geom: ConvGeometry,
    grad: &Tensor,
    need_input: bool,
    need_kernel: bool,
) -> ConvGrads {
    let d = conv_dims(input, kernel, None, geom).expect("shapes validated in forward");
    let s = geom.stride;
    let x = input.data();
    let wt = kernel.data();
    let g = grad.data();
    let mut gin = need_input.then(|| vec![0.0; x.len()]);
    let mut gk = need_kernel.then(|| vec![0.0; wt.len()]);
    for co in 0..d.cout {
        let gplane = &g[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ci in 0..d.cin {
            let ioff = ci * d.h * d.w;
            for ky in 0..d.k {
                let (ylo, yhi) = geom.valid_range(ky, d.h, d.oh);
                for kx in 0..d.k {
                    let widx = ((co * d.cin + ci) * d.k + ky) * d.k + kx;
                    let wv = wt[widx];
                    let (xlo, xhi) = geom.valid_range(kx, d.w, d.ow);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - geom.padding;
                        let grow = &gplane[oy * d.ow..(oy + 1) * d.ow];
                        let rbase = ioff + iy * d.w;
                        if let Some(gin) = gin.as_mut() {
                            for ox in xlo..xhi {
                                gin[rbase + ox * s + kx - geom.padding] += wv * grow[ox];
                            }
                        }
                        if gk.is_some() {
                            for ox in xlo..xhi {
                                acc += x[rbase + ox * s + kx - geom.padding] * grow[ox];
                            }
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        gk[widx] += acc;
                    }
                }
            }
        }
    }
    let bias = has_bias.then(|| {
        let sums = g.chunks_exact(d.oh * d.ow).map(|p| p.iter().sum()).collect();
        Tensor::from_vec(sums)
    });
    ConvGrads {
        input: gin.map(|v| Tensor::new(input.shape().to_vec(), v).unwrap()),
        kernel: gk.map(|v| Tensor::new(kernel.shape().to_vec(), v).unwrap()),
        bias,
    }
}

/// Element-wise product of `[C,h,w]` features with each of the `[M,h,w]`
/// attention maps, giving one `[C,h,w]` map per attribute.
pub fn attribute_feature_maps(features: &Tensor, attention: &Tensor) -> Result<Vec<Tensor>> {
    features.expect_rank(3)?;
    attention.expect_rank(3)?;
    if features.shape()[1..] != attention.shape()[1..] {
        return Err(Error::ShapeMismatch(format!(
            "feature map {:?} and attention maps {:?} differ spatially",
            features.shape(),
            attention.shape()
        )));
    }
    let hw = features.shape()[1] * features.shape()[2];
    Ok(attention
        .data()
        .chunks_exact(hw)
        .map(|a| {
            let data = features
                .data()
                .chunks_exact(hw)
                .flat_map(|f| f.iter().zip(a).map(|(x, y)| x * y))
                .collect();
            Tensor::new(features.shape().to_vec(), data).unwrap()
        })
        .collect())
}

/// GeM-pooled attribute-guided vectors: `out[k,c] = GeM_s(F[c,s] * A[k,s])`.
/// Fused form of [`attribute_feature_maps`] followed by [`gem_pool`].
pub fn attribute_pool(features: &Tensor, attention: &Tensor, p: f64) -> Result<Tensor> {
    check_gem_p(p)?;
    features.expect_rank(3)?;
    attention.expect_rank(3)?;
    if features.shape()[1..] != attention.shape()[1..] {
        return Err(Error::ShapeMismatch(format!(
            "feature map {:?} and attention maps {:?} differ spatially",
            features.shape(),
            attention.shape()
        )));
    }
    let (c, m) = (features.shape()[0], attention.shape()[0]);
    let hw = features.shape()[1] * features.shape()[2];
    let mut out = Vec::with_capacity(m * c);
    for a in attention.data().chunks_exact(hw) {
        for f in features.data().chunks_exact(hw) {
            let s: f64 = f
                .iter()
                .zip(a)
                .map(|(x, y)| pow_p((x * y).max(GEM_EPS), p))
                .sum();
            out.push(root_p(s / hw as f64, p));
        }
    }
    Tensor::new(vec![m, c], out)?.ensure_finite("attribute_pool")
}

pub(crate) fn attribute_pool_backward(
    features: &Tensor,
    attention: &Tensor,
    out: &Tensor,
    grad: &Tensor,
    p: f64,
    need_features: bool,
    need_attention: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (c, m) = (features.shape()[0], attention.shape()[0]);
    let hw = features.shape()[1] * features.shape()[2];
    let f = features.data();
    let a = attention.data();
    let mut gf = need_features.then(|| vec![0.0; f.len()]);
    let mut ga = need_attention.then(|| vec![0.0; a.len()]);
    for k in 0..m {
        let arow = &a[k * hw..(k + 1) * hw];
        for ch in 0..c {
            let g = grad.data()[k * c + ch];
            if g == 0.0 {
                continue;
            }
            let o = out.data()[k * c + ch];
            let coef = g * o.powf(1.0 - p) / hw as f64;
            let frow = &f[ch * hw..(ch + 1) * hw];
            for s in 0..hw {
                let x = frow[s] * arow[s];
                if x > GEM_EPS {
                    let dx = coef * pow_p(x, p - 1.0);
                    if let Some(ga) = ga.as_mut() {
                        ga[k * hw + s] += dx * frow[s];
                    }
                    if let Some(gf) = gf.as_mut() {
                        gf[ch * hw + s] += dx * arow[s];
                    }
                }
            }
        }
    }
    (
        gf.map(|v| Tensor::new(features.shape().to_vec(), v).unwrap()),
        ga.map(|v| Tensor::new(attention.shape().to_vec(), v).unwrap()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn activation_examples() {
        let p = ActivationParams::new(0.5, 1.0).unwrap();
        assert_eq!(p.eval(0.0), 0.5);
        assert_abs_diff_eq!(p.eval(1.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.eval(-(2f64.ln())), 0.25, epsilon = 1e-12);
        assert!((p.eval(1e-12) - 0.5).abs() < 1e-9);
        assert!((p.eval(-1e-12) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn activation_param_validation() {
        assert!(ActivationParams::new(0.0, 1.0).is_err());
        assert!(ActivationParams::new(1.0, 1.0).is_err());
        assert!(ActivationParams::new(0.5, 0.0).is_err());
        assert!(ActivationParams::new(0.5, -1.0).is_err());
    }

    #[test]
    fn gem_examples() {
        let t = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gem_pool(&t, 1.0).unwrap().item(), 2.5);
        let t = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
        // The zero is clamped to GEM_EPS, whose cube is negligible.
        assert_abs_diff_eq!(gem_pool(&t, 3.0).unwrap().item(), 4f64.cbrt(), epsilon = 1e-12);
        let t = Tensor::new(vec![1, 2], vec![1.0, 5.0]).unwrap();
        assert_abs_diff_eq!(gem_pool(&t, 100.0).unwrap().item(), 5.0 * 0.5f64.powf(0.01), epsilon = 1e-9);
        assert!((gem_pool(&t, 400.0).unwrap().item() - 5.0).abs() < 1e-2);
        assert!(matches!(gem_pool(&t, 0.5), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 9.0);

        let x = rand_tensor(&[1, 4, 5], 1);
        let id = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &id, None, ConvGeometry::new(1, 0)).unwrap(), x);

        let bad = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &bad, None, ConvGeometry::new(1, 0)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn conv_reference(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (cin, h, w) = (x.shape()[0], x.shape()[1] as isize, x.shape()[2] as isize);
        let (cout, ks) = (k.shape()[0], k.shape()[2]);
        let oh = ((h as usize + 2 * pad - ks) / stride) + 1;
        let ow = ((w as usize + 2 * pad - ks) / stride) + 1;
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                    acc += x.data()[(ci * h as usize + iy as usize) * w as usize + ix as usize]
                                        * k.data()[((co * cin + ci) * ks + ky) * ks + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_brute_force() {
        for (seed, (stride, pad)) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)].into_iter().enumerate() {
            let x = rand_tensor(&[2, 5, 5], 10 + seed as u64);
            let k = rand_tensor(&[3, 2, 3, 3], 20 + seed as u64);
            let got = conv2d(&x, &k, None, ConvGeometry::new(stride, pad)).unwrap();
            let want = conv_reference(&x, &k, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn attribute_maps_examples() {
        let f = Tensor::full(&[2, 2, 2], 1.0);
        let a = Tensor::new(vec![1, 2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let maps = attribute_feature_maps(&f, &a).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].data(), &[2.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 2.0]);

        let f = rand_tensor(&[3, 2, 4], 5);
        let ones = Tensor::full(&[2, 2, 4], 1.0);
        for m in attribute_feature_maps(&f, &ones).unwrap() {
            assert_eq!(m, f);
        }
        let zeros = Tensor::zeros(&[1, 2, 4]);
        assert!(attribute_feature_maps(&f, &zeros).unwrap()[0].data().iter().all(|&v| v == 0.0));
        assert!(attribute_feature_maps(&f, &Tensor::zeros(&[1, 4, 2])).is_err());
    }

    #[test]
    fn fused_pool_matches_composed() {
        let f = rand_tensor(&[4, 3, 2], 7).map(f64::abs);
        let a = rand_tensor(&[5, 3, 2], 8).map(|v| v.abs() + 0.01);
        let fused = attribute_pool(&f, &a, 3.0).unwrap();
        for (k, m) in attribute_feature_maps(&f, &a).unwrap().iter().enumerate() {
            let pooled = gem_pool(m, 3.0).unwrap();
            for c in 0..4 {
                assert!((fused.data()[k * 4 + c] - pooled.data()[c]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn activation_monotone_and_bounded(mut xs in prop::collection::vec(-20.0f64..20.0, 2..50), k in 0.05f64..0.95, t in 0.1f64..3.0) {
            let p = ActivationParams::new(k, t).unwrap();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            xs.dedup();
            for w in xs.windows(2) {
                if w[1] - w[0] > 1e-9 {
                    prop_assert!(p.eval(w[0]) < p.eval(w[1]));
                }
            }
            for &x in &xs {
                prop_assert!(p.eval(x) > 0.0);
                if x <= 0.0 {
                    prop_assert!(p.eval(x) <= k);
                }
            }
        }

        #[test]
        fn gem_monotone_in_p(vals in prop::collection::vec(0.01f64..10.0, 2..20), p in 1.0f64..6.0, dp in 0.1f64..3.0) {
            let n = vals.len();
            let t = Tensor::new(vec![1, n], vals).unwrap();
            let lo = gem_pool(&t, p).unwrap().item();
            let hi = gem_pool(&t, p + dp).unwrap().item();
            prop_assert!(hi >= lo - 1e-12);
            let mean = t.data().iter().sum::<f64>() / n as f64;
            prop_assert_eq!(gem_pool(&t, 1.0).unwrap().item(), mean);
        }
    }
}
