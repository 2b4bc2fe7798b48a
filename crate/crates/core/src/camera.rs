//! Ideal pinhole camera used to place 3D curve samples on front-view features.
//!
//! Frames: ego is x right, y forward, z up; camera is x right, y down,
//! z forward. `R` and `t` map ego coordinates into the camera frame.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::{CustomOp, Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};

pub const DEFAULT_Z_MIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major ego→camera rotation.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub image_w: usize,
    pub image_h: usize,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        r: [f64; 9],
        t: [f64; 3],
        image_w: usize,
        image_h: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            r,
            t,
            image_w,
            image_h,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `height` metres above the ego origin looking along +y,
    /// pitched down by `pitch` radians.
    pub fn forward_looking(
        height: f64,
        pitch: f64,
        focal: f64,
        image_w: usize,
        image_h: usize,
    ) -> Result<Self> {
        let (s, c) = pitch.sin_cos();
        // Rx(pitch) · [[1,0,0],[0,0,-1],[0,1,0]]
        let r = [1.0, 0.0, 0.0, 0.0, s, -c, 0.0, c, s];
        let pos = [0.0, 0.0, height];
        let mut t = [0.0; 3];
        for (i, ti) in t.iter_mut().enumerate() {
            *ti = -(0..3).map(|j| r[3 * i + j] * pos[j]).sum::<f64>();
        }
        Self::new(
            focal,
            focal,
            image_w as f64 / 2.0,
            image_h as f64 / 2.0,
            r,
            t,
            image_w,
            image_h,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid("focal lengths must be positive"));
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err(invalid("image extent must be positive"));
        }
        let r = &self.r;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[3 * i + k] * r[3 * j + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(invalid("rotation is not orthonormal"));
                }
            }
        }
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("rotation determinant {det} is not 1")));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &[f64]) -> [f64; 3] {
        let mut out = self.t;
        for (i, o) in out.iter_mut().enumerate() {
            *o += (0..3).map(|j| self.r[3 * i + j] * p[j]).sum::<f64>();
        }
        out
    }

    /// Pixel coordinates of an ego-frame point. Fails when the camera-frame
    /// depth is not above `z_min`.
    pub fn project_with(&self, p3: &[f64], z_min: f64) -> Result<[f64; 2]> {
        let pc = self.to_camera(p3);
        if !(pc[2] > z_min) {
            return Err(Error::BehindCamera { depth: pc[2], z_min });
        }
        Ok([
            self.fx * pc[0] / pc[2] + self.cx,
            self.fy * pc[1] / pc[2] + self.cy,
        ])
    }

    pub fn project(&self, p3: &[f64]) -> Result<[f64; 2]> {
        self.project_with(p3, DEFAULT_Z_MIN)
    }

    /// Projection with the depth clamped to `z_min`; never fails.
    pub fn project_clamped(&self, p3: &[f64], z_min: f64) -> [f64; 2] {
        let pc = self.to_camera(p3);
        let z = pc[2].max(z_min);
        [self.fx * pc[0] / z + self.cx, self.fy * pc[1] / z + self.cy]
    }
}

/// Image pixels to feature-map grid units; no clamping.
pub fn to_grid(p2: [f64; 2], map_w: usize, map_h: usize, image_w: usize, image_h: usize) -> [f64; 2] {
    [
        p2[0] * map_w as f64 / image_w as f64,
        p2[1] * map_h as f64 / image_h as f64,
    ]
}

/// Projects `K×3` ego points to `K×2` pixels. Depths below `z_min` are
/// clamped, and the clamped depth carries no gradient.
#[derive(Debug)]
pub struct ProjectOp {
    pub camera: CameraModel,
    pub z_min: f64,
}

impl CustomOp for ProjectOp {
    fn name(&self) -> &'static str {
        "project"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let p = inputs[0];
        if p.shape().len() != 2 || p.shape()[1] != 3 {
            return Err(shape_err(self.name(), format!("points {:?}", p.shape())));
        }
        let mut out = Vec::with_capacity(p.rows() * 2);
        for row in p.data().chunks(3) {
            out.extend(self.camera.project_clamped(row, self.z_min));
        }
        Tensor::new(vec![p.rows(), 2], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let p = inputs[0];
        let r = &self.camera.r;
        let (fx, fy) = (self.camera.fx, self.camera.fy);
        let mut gp = Vec::with_capacity(p.len());
        for (row, g) in p.data().chunks(3).zip(grad.data().chunks(2)) {
            let pc = self.camera.to_camera(row);
            let clamped = !(pc[2] > self.z_min);
            let z = if clamped { self.z_min } else { pc[2] };
            for j in 0..3 {
                let mut du = fx * r[j] / z;
                let mut dv = fy * r[3 + j] / z;
                if !clamped {
                    du -= fx * pc[0] * r[6 + j] / (z * z);
                    dv -= fy * pc[1] * r[6 + j] / (z * z);
                }
                gp.push(g[0] * du + g[1] * dv);
            }
        }
        Ok(vec![Some(Tensor::new(p.shape().to_vec(), gp)?)])
    }
}

impl Graph {
    pub fn project(&mut self, points: Var, camera: &CameraModel, z_min: f64) -> Result<Var> {
        self.custom(
            Arc::new(ProjectOp {
                camera: camera.clone(),
                z_min,
            }),
            &[points],
        )
    }
}
