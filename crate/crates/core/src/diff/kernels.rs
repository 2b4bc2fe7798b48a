//! Spatial kernels over `H×W×C` feature maps.

use std::sync::Arc;

use super::graph::{matmul_nt_raw, matmul_raw, matmul_tn_raw, CustomOp, Graph, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

fn map_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(shape_err(op, format!("expected an H×W×C map, got {s:?}"))),
    }
}

/// Corner texels and weights of a bilinear lookup at `(x, y)` (column, row).
/// Out-of-range corners are dropped, which is zero padding.
#[derive(Debug, Clone, Copy)]
struct Corners {
    x0: i64,
    y0: i64,
    fx: f64,
    fy: f64,
}

impl Corners {
    fn at(x: f64, y: f64) -> Self {
        let xf = x.floor();
        let yf = y.floor();
        Self {
            x0: xf as i64,
            y0: yf as i64,
            fx: x - xf,
            fy: y - yf,
        }
    }

    /// (texel offset, weight, dweight/dx, dweight/dy) for the in-bounds corners.
    fn each(&self, h: usize, w: usize, c: usize, mut f: impl FnMut(usize, f64, f64, f64)) {
        let (fx, fy) = (self.fx, self.fy);
        let corners = [
            (0, 0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
            (1, 0, fx * (1.0 - fy), 1.0 - fy, -fx),
            (0, 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
            (1, 1, fx * fy, fy, fx),
        ];
        for (dx, dy, wt, dwx, dwy) in corners {
            let xi = self.x0 + dx;
            let yi = self.y0 + dy;
            if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
                continue;
            }
            f(((yi as usize) * w + xi as usize) * c, wt, dwx, dwy);
        }
    }
}

/// Bilinear interpolation of one location; zero outside the map.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    let (h, w, c) = map_dims("bilinear_sample", map)?;
    let mut out = vec![0.0; c];
    if !x.is_finite() || !y.is_finite() {
        return Err(shape_err("bilinear_sample", "non-finite location"));
    }
    Corners::at(x, y).each(h, w, c, |off, wt, _, _| {
        for (o, v) in out.iter_mut().zip(&map.data()[off..off + c]) {
            *o += wt * v;
        }
    });
    Ok(out)
}

/// Samples an `H×W×C` map at `N×2` locations `(x, y)`; output `N×C`.
/// Differentiable with respect to both the map and the locations.
#[derive(Debug, Default)]
pub struct BilinearSampleOp;

impl CustomOp for BilinearSampleOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (map, locs) = (inputs[0], inputs[1]);
        let (h, w, c) = map_dims(self.name(), map)?;
        if locs.shape().len() != 2 || locs.shape()[1] != 2 {
            return Err(shape_err(self.name(), format!("locations {:?}", locs.shape())));
        }
        let n = locs.rows();
        let md = map.data();
        let mut out = vec![0.0; n * c];
        for (i, loc) in locs.data().chunks(2).enumerate() {
            let orow = &mut out[i * c..(i + 1) * c];
            Corners::at(loc[0], loc[1]).each(h, w, c, |off, wt, _, _| {
                for (o, v) in orow.iter_mut().zip(&md[off..off + c]) {
                    *o += wt * v;
                }
            });
        }
        Tensor::new(vec![n, c], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (map, locs) = (inputs[0], inputs[1]);
        let (h, w, c) = map_dims(self.name(), map)?;
        let md = map.data();
        let gd = grad.data();
        let mut gmap = needs[0].then(|| vec![0.0; md.len()]);
        let mut gloc = needs[1].then(|| vec![0.0; locs.len()]);
        for (i, loc) in locs.data().chunks(2).enumerate() {
            let grow = &gd[i * c..(i + 1) * c];
            Corners::at(loc[0], loc[1]).each(h, w, c, |off, wt, dwx, dwy| {
                if let Some(gm) = gmap.as_mut() {
                    for (m, g) in gm[off..off + c].iter_mut().zip(grow) {
                        *m += wt * g;
                    }
                }
                if let Some(gl) = gloc.as_mut() {
                    let dot: f64 = md[off..off + c].iter().zip(grow).map(|(a, b)| a * b).sum();
                    gl[2 * i] += dwx * dot;
                    gl[2 * i + 1] += dwy * dot;
                }
            });
        }
        Ok(vec![
            gmap.map(|d| Tensor::new(map.shape().to_vec(), d)).transpose()?,
            gloc.map(|d| Tensor::new(locs.shape().to_vec(), d)).transpose()?,
        ])
    }
}

/// 3×3 same-padding convolution. Weight layout `(9·C_in)×C_out`, patch order
/// `(dy, dx, c_in)` with `dy, dx ∈ {-1, 0, 1}`.
#[derive(Debug, Default)]
pub struct Conv3x3Op;

fn im2col(x: &Tensor) -> (Vec<f64>, usize, usize, usize) {
    let (h, w, c) = map_dims("conv3x3", x).expect("checked");
    let k = 9 * c;
    let xd = x.data();
    let mut cols = vec![0.0; h * w * k];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * k..(y * w + xx + 1) * k];
            for (p, (dy, dx)) in PATCH.iter().enumerate() {
                let (sy, sx) = (y as i64 + dy, xx as i64 + dx);
                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                    continue;
                }
                let src = ((sy as usize) * w + sx as usize) * c;
                row[p * c..(p + 1) * c].copy_from_slice(&xd[src..src + c]);
            }
        }
    }
    (cols, h, w, c)
}

const PATCH: [(i64, i64); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

impl CustomOp for Conv3x3Op {
    fn name(&self) -> &'static str {
        "conv3x3"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, wt) = (inputs[0], inputs[1]);
        let (h, w, c) = map_dims(self.name(), x)?;
        if wt.shape().len() != 2 || wt.shape()[0] != 9 * c {
            return Err(shape_err(
                self.name(),
                format!("weight {:?} for {c} input channels", wt.shape()),
            ));
        }
        let cout = wt.shape()[1];
        let (cols, ..) = im2col(x);
        let out = matmul_raw(&cols, wt.data(), h * w, 9 * c, cout);
        Tensor::new(vec![h, w, cout], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, wt) = (inputs[0], inputs[1]);
        let (h, w, c) = map_dims(self.name(), x)?;
        let k = 9 * c;
        let cout = wt.shape()[1];
        let gw = if needs[1] {
            let (cols, ..) = im2col(x);
            Some(Tensor::new(
                wt.shape().to_vec(),
                matmul_tn_raw(&cols, grad.data(), h * w, k, cout),
            )?)
        } else {
            None
        };
        let gx = if needs[0] {
            let gcols = matmul_nt_raw(grad.data(), wt.data(), h * w, cout, k);
            let mut gx = vec![0.0; x.len()];
            for y in 0..h {
                for xx in 0..w {
                    let row = &gcols[(y * w + xx) * k..(y * w + xx + 1) * k];
                    for (p, (dy, dx)) in PATCH.iter().enumerate() {
                        let (sy, sx) = (y as i64 + dy, xx as i64 + dx);
                        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                            continue;
                        }
                        let dst = ((sy as usize) * w + sx as usize) * c;
                        for (a, b) in gx[dst..dst + c].iter_mut().zip(&row[p * c..(p + 1) * c]) {
                            *a += b;
                        }
                    }
                }
            }
            Some(Tensor::new(x.shape().to_vec(), gx)?)
        } else {
            None
        };
        Ok(vec![gx, gw])
    }
}

/// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Default)]
pub struct AvgPool2Op;

impl CustomOp for AvgPool2Op {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let (h, w, c) = map_dims(self.name(), x)?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(shape_err(self.name(), format!("map {h}x{w} too small")));
        }
        let xd = x.data();
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..ho {
            for xx in 0..wo {
                let o = (y * wo + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        out[o + ch] += 0.25 * xd[s + ch];
                    }
                }
            }
        }
        Tensor::new(vec![ho, wo, c], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (_, w, c) = map_dims(self.name(), x)?;
        let (ho, wo, _) = map_dims(self.name(), output)?;
        let gd = grad.data();
        let mut gx = vec![0.0; x.len()];
        for y in 0..ho {
            for xx in 0..wo {
                let o = (y * wo + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        gx[s + ch] += 0.25 * gd[o + ch];
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), gx)?)])
    }
}

impl Graph {
    pub fn bilinear_sample(&mut self, map: Var, locs: Var) -> Result<Var> {
        self.custom(Arc::new(BilinearSampleOp), &[map, locs])
    }

    pub fn conv3x3(&mut self, x: Var, weight: Var) -> Result<Var> {
        self.custom(Arc::new(Conv3x3Op), &[x, weight])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.custom(Arc::new(AvgPool2Op), &[x])
    }
}
