//! Browser demo over the core pipeline. [`Scene`] holds the logic and is
//! plain Rust; [`Demo`] is the thin wasm-bindgen face of it.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use meshrecover_core::camera::{render_depth_uv, CameraPose, DepthUVFrame, Intrinsics, MeshView};
use meshrecover_core::data::sample_rng;
use meshrecover_core::eval::{baseline_fit, pve_mm, BaselineOptions};
use meshrecover_core::matching::{lift_all, match_to_template, PartialMesh};
use meshrecover_core::toy::{self, ToyPose};
use meshrecover_core::{CoarseMesh, Point3, Result, TemplateMesh};

pub const CAMERA_DISTANCE: f64 = 2.5;

#[derive(Debug, Clone, Serialize)]
pub struct MatchStats {
    pub points: usize,
    pub vertices: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompletionStats {
    pub pve_mm: f64,
    pub visible_pve_mm: f64,
    pub hidden_pve_mm: f64,
}

/// A posed toy body seen by one camera.
pub struct Scene {
    template: TemplateMesh,
    intr: Intrinsics,
    world: Vec<Point3>,
    pose: CameraPose,
    frame: DepthUVFrame,
    partial: Option<PartialMesh>,
    completed: Option<CoarseMesh>,
}

impl Scene {
    /// Seed 0 is the rest pose; other seeds draw a random pose.
    pub fn new(pose_seed: u64) -> Self {
        let template = toy::toy_template();
        let intr = Intrinsics::default();
        let body = if pose_seed == 0 {
            ToyPose::rest()
        } else {
            ToyPose::random(&mut sample_rng(pose_seed, 0))
        };
        let world = toy::toy_pose_vertices(&body);
        let mut s = Scene {
            frame: DepthUVFrame::empty(intr),
            pose: CameraPose::orbit(CAMERA_DISTANCE, 0.0),
            template,
            intr,
            world,
            partial: None,
            completed: None,
        };
        s.render(0.0);
        s
    }

    pub fn frame(&self) -> &DepthUVFrame {
        &self.frame
    }

    pub fn render(&mut self, azimuth_deg: f64) {
        self.pose = CameraPose::orbit(CAMERA_DISTANCE, azimuth_deg.to_radians());
        let view = MeshView {
            vertices: &self.world,
            triangles: &self.template.triangles,
            uv: &self.template.uv,
        };
        self.frame = render_depth_uv(view, &self.pose, &self.intr, self.template.render_options());
        self.partial = None;
        self.completed = None;
    }

    pub fn match_uv(&mut self, eps: f64) -> Result<MatchStats> {
        let points = lift_all(&self.frame);
        let m = match_to_template(&points, &self.template, eps)?;
        let stats = MatchStats {
            points: points.len(),
            vertices: m.partial.len(),
            matched: m.partial.visible_count(),
        };
        self.partial = Some(m.partial);
        self.completed = None;
        Ok(stats)
    }

    /// Fits the template to the matched vertices (optimization baseline).
    pub fn complete(&mut self, iterations: usize) -> Result<CompletionStats> {
        let partial = match &self.partial {
            Some(p) => p,
            None => {
                self.match_uv(0.01)?;
                self.partial.as_ref().expect("just matched")
            }
        };
        let opts = BaselineOptions {
            iterations,
            ..Default::default()
        };
        let fit = baseline_fit(partial, &self.template, Some(&self.pose), &opts)?;
        let gt = self.ground_truth()?;
        let split = |want: bool| -> Result<f64> {
            let (p, g): (Vec<Point3>, Vec<Point3>) = fit
                .vertices
                .iter()
                .zip(&gt)
                .zip(&partial.mask)
                .filter(|(_, &m)| m == want)
                .map(|((a, b), _)| (*a, *b))
                .unzip();
            if p.is_empty() {
                Ok(0.0)
            } else {
                pve_mm(&p, &g)
            }
        };
        let stats = CompletionStats {
            pve_mm: pve_mm(&fit.vertices, &gt)?,
            visible_pve_mm: split(true)?,
            hidden_pve_mm: split(false)?,
        };
        self.completed = Some(fit);
        Ok(stats)
    }

    /// Ground-truth coarse vertices in the camera frame.
    pub fn ground_truth(&self) -> Result<Vec<Point3>> {
        let coarse = self.template.downsample(&self.world)?;
        Ok(coarse.vertices.iter().map(|v| self.pose.to_camera(v)).collect())
    }

    /// Depth shaded near-bright, background transparent.
    pub fn depth_rgba(&self) -> Vec<u8> {
        let d = &self.frame.depth;
        let (lo, hi) = d
            .iter()
            .filter(|&&z| z > 0.0)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &z| (a.min(z), b.max(z)));
        let span = (hi - lo).max(1e-9);
        d.iter()
            .flat_map(|&z| {
                if z > 0.0 {
                    let g = (255.0 * (1.0 - 0.8 * (z - lo) / span)) as u8;
                    [g, g, g, 255]
                } else {
                    [0, 0, 0, 0]
                }
            })
            .collect()
    }

    /// u in red, v in green.
    pub fn uv_rgba(&self) -> Vec<u8> {
        self.frame
            .depth
            .iter()
            .zip(&self.frame.uv)
            .flat_map(|(&z, uv)| {
                if z > 0.0 {
                    [(uv[0] * 255.0) as u8, (uv[1] * 255.0) as u8, 96, 255]
                } else {
                    [0, 0, 0, 0]
                }
            })
            .collect()
    }

    /// Image coordinates of the coarse vertices: `[x, y, kind]` triples, kind
    /// 1 for matched input, 2 for completed hidden vertex, 0 for ground truth.
    pub fn overlay(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut push = |p: &Point3, kind: f64| {
            if p.z > 0.0 {
                let (x, y) = self.intr.project(p);
                out.extend_from_slice(&[x, y, kind]);
            }
        };
        if let Ok(gt) = self.ground_truth() {
            for p in &gt {
                push(p, 0.0);
            }
        }
        if let Some(partial) = &self.partial {
            for p in partial.visible() {
                push(p, 1.0);
            }
            if let Some(c) = &self.completed {
                for (p, _) in c.vertices.iter().zip(&partial.mask).filter(|(_, &m)| !m) {
                    push(p, 2.0);
                }
            }
        }
        out
    }
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(pose_seed: u32) -> Demo {
        Demo {
            scene: Scene::new(pose_seed as u64),
        }
    }

    pub fn width(&self) -> usize {
        self.scene.frame().width()
    }

    pub fn height(&self) -> usize {
        self.scene.frame().height()
    }

    pub fn render(&mut self, azimuth_deg: f64) {
        self.scene.render(azimuth_deg);
    }

    /// JSON `{points, vertices, matched}`.
    #[wasm_bindgen(js_name = matchUv)]
    pub fn match_uv(&mut self, eps: f64) -> std::result::Result<String, JsValue> {
        let s = self.scene.match_uv(eps).map_err(js_err)?;
        serde_json::to_string(&s).map_err(js_err)
    }

    /// JSON `{pve_mm, visible_pve_mm, hidden_pve_mm}`.
    pub fn complete(&mut self, iterations: usize) -> std::result::Result<String, JsValue> {
        let s = self.scene.complete(iterations).map_err(js_err)?;
        serde_json::to_string(&s).map_err(js_err)
    }

    #[wasm_bindgen(js_name = depthRgba)]
    pub fn depth_rgba(&self) -> Vec<u8> {
        self.scene.depth_rgba()
    }

    #[wasm_bindgen(js_name = uvRgba)]
    pub fn uv_rgba(&self) -> Vec<u8> {
        self.scene.uv_rgba()
    }

    pub fn overlay(&self) -> Vec<f64> {
        self.scene.overlay()
    }
}
