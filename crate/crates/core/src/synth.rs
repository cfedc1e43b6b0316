//! Piecewise-planar textured scenes rendered from several viewpoints with
//! exact depth, normal and edge ground truth.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::eigen::any_orthogonal;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::io::{read_pfm, read_pnm, write_atomic, write_pfm, write_pnm, Pfm, Pnm};
use crate::maps::{BoolMap, DepthMap, Grid, ImageF, NormalMap};

/// Depth ratio between 4-neighbors above which a pixel is an edge.
pub const EDGE_DEPTH_RATIO: f64 = 1.05;

/// Multi-octave value noise on a plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    pub octaves: u32,
    /// Lattice spacing of the coarsest octave, world units.
    pub cell: f64,
}

/// Axis-aligned box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Extent {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        const TOL: f64 = 1e-9;
        (0..3).all(|i| p[i] >= self.min[i] - TOL && p[i] <= self.max[i] + TOL)
    }
}

/// Plane `normal · X = offset` in world coordinates, optionally bounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<Extent>,
    pub texture: Texture,
}

impl Plane {
    fn n(&self) -> Vector3<f64> {
        Vector3::from(self.normal)
    }
}

/// A set of planes seen by a camera trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarScene {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub planes: Vec<Plane>,
    /// Camera-to-world poses, one per view.
    pub poses: Vec<PoseSE3>,
    /// Index of the target view; the others are sources.
    pub target: usize,
}

impl PlanarScene {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.width < 3 || self.height < 3 {
            return Err(Error::Scene(format!("image must be at least 3x3, got {}x{}", self.width, self.height)));
        }
        if self.planes.is_empty() {
            return Err(Error::Scene("scene has no planes".into()));
        }
        for (i, p) in self.planes.iter().enumerate() {
            if !((p.n().norm() - 1.0).abs() < 1e-9) || !p.offset.is_finite() {
                return Err(Error::Scene(format!("plane {i} normal is not unit or offset is not finite")));
            }
            if !(p.texture.cell > 0.0 && p.texture.cell.is_finite()) || p.texture.octaves == 0 {
                return Err(Error::Scene(format!("plane {i} texture needs a positive cell and at least one octave")));
            }
        }
        if self.poses.is_empty() || self.target >= self.poses.len() {
            return Err(Error::Scene(format!("target view {} out of {} poses", self.target, self.poses.len())));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: PlanarScene = serde_json::from_str(text).map_err(|e| Error::Scene(format!("scene JSON: {e}")))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    /// Indices of the source views in trajectory order.
    pub fn sources(&self) -> Vec<usize> {
        (0..self.poses.len()).filter(|&i| i != self.target).collect()
    }

    /// Transform from the target camera frame to view `source`'s frame:
    /// `P_s⁻¹ ∘ P_t`.
    pub fn relative_pose(&self, source: usize) -> PoseSE3 {
        self.poses[source].inverse().compose(&self.poses[self.target])
    }
}

/// One rendered view with its ground truth.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub image: ImageF,
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub edges: BoolMap,
    /// Index of the plane seen at each pixel.
    pub plane_ids: Grid<usize>,
    /// Camera-to-world pose.
    pub pose: PoseSE3,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1656_67B1) ^ splitmix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Quintic fade so the field is C² across lattice cells.
#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (fade(x - fx), fade(y - fy));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

impl Texture {
    /// Intensity in [0.1, 0.9] at in-plane coordinates (s, t).
    pub fn sample(&self, channel: usize, s: f64, t: f64) -> f64 {
        let seed = splitmix(self.seed.wrapping_mul(3).wrapping_add(channel as u64));
        let mut total = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut freq = 1.0 / self.cell;
        for o in 0..self.octaves {
            total += amp * value_noise(seed.wrapping_add(o as u64 * 7919), s * freq, t * freq);
            norm += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        0.1 + 0.8 * total / norm
    }
}

fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let e1 = any_orthogonal(n);
    (e1, n.cross(&e1))
}

/// Nearest plane hit along the ray `c + s·dir` with s > 0; returns (s, index).
fn nearest_hit(planes: &[Plane], c: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in planes.iter().enumerate() {
        let n = p.n();
        let den = n.dot(dir);
        if den.abs() < 1e-12 {
            continue;
        }
        let s = (p.offset - n.dot(c)) / den;
        if !(s > 1e-9) {
            continue;
        }
        if let Some(e) = &p.extent {
            if !e.contains(&(c + dir * s)) {
                continue;
            }
        }
        if best.is_none_or(|(bs, _)| s < bs) {
            best = Some((s, i));
        }
    }
    best
}

/// Depth of plane `plane` along the camera ray through (x, y), ignoring its
/// extent; infinite if the plane is behind or parallel.
fn unbounded_depth(plane: &Plane, c: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
    let n = plane.n();
    let den = n.dot(dir);
    let s = (plane.offset - n.dot(c)) / den;
    if s > 0.0 && s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Render view `view` of `scene`.
pub fn render(scene: &PlanarScene, view: usize) -> Result<RenderedView> {
    scene.validate()?;
    let pose = *scene.poses.get(view).ok_or_else(|| Error::Scene(format!("view {view} out of range")))?;
    let (w, h) = (scene.width, scene.height);
    let k = &scene.intrinsics;
    let r = pose.rotation();
    let c = pose.translation();
    let bases: Vec<_> = scene.planes.iter().map(|p| plane_basis(&p.n())).collect();

    let mut depth = Vec::with_capacity(w * h);
    let mut normals = Vec::with_capacity(w * h);
    let mut ids = Vec::with_capacity(w * h);
    let mut pixels = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let ray = k.ray(x as f64, y as f64);
            let dir = r * ray;
            let (s, i) = nearest_hit(&scene.planes, &c, &dir)
                .ok_or_else(|| Error::Scene(format!("pixel ({x}, {y}) of view {view} sees no plane")))?;
            let plane = &scene.planes[i];
            let mut n = r.transpose() * plane.n();
            if n.dot(&ray) > 0.0 {
                n = -n;
            }
            let hit = c + dir * s;
            let (e1, e2) = &bases[i];
            let (u, v) = (hit.dot(e1), hit.dot(e2));
            for ch in 0..3 {
                pixels.push(plane.texture.sample(ch, u, v));
            }
            depth.push(s);
            normals.push(n);
            ids.push(i);
        }
    }
    let depth = DepthMap::new(Grid::from_vec(w, h, depth)?)?;
    let plane_ids = Grid::from_vec(w, h, ids)?;
    let edges = edge_ground_truth(scene, &pose, &depth, &plane_ids);
    Ok(RenderedView {
        image: ImageF::new(w, h, 3, pixels)?,
        depth,
        normals: NormalMap::new(Grid::from_vec(w, h, normals)?)?,
        edges,
        plane_ids,
        pose,
    })
}

/// A pixel is an edge if a 4-neighbor sees a different plane, or if the
/// neighbor's depth differs by more than [`EDGE_DEPTH_RATIO`] from the depth
/// this pixel's plane would have along the neighbor's ray.
fn edge_ground_truth(scene: &PlanarScene, pose: &PoseSE3, depth: &DepthMap, ids: &Grid<usize>) -> BoolMap {
    let (w, h) = depth.dims();
    let r = pose.rotation();
    let c = pose.translation();
    let k = &scene.intrinsics;
    let mut edges = Grid::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let id = *ids.get(x, y);
            for (dx, dy) in [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                let edge = if *ids.get(nx, ny) != id {
                    true
                } else {
                    let own = unbounded_depth(&scene.planes[id], &c, &(r * k.ray(nx as f64, ny as f64)));
                    let d = *depth.get(nx, ny);
                    own.max(d) / own.min(d) > EDGE_DEPTH_RATIO
                };
                if edge {
                    *edges.get_mut(x, y) = true;
                    break;
                }
            }
        }
    }
    edges
}

/// Camera-to-world rotation for a camera pitched down by `pitch` and turned
/// right by `yaw` (radians).
fn looking(pitch: f64, yaw: f64) -> PoseSE3 {
    let yaw_pose = PoseSE3::from_twist([0.0, yaw, 0.0, 0.0, 0.0, 0.0]);
    let pitch_pose = PoseSE3::from_twist([-pitch, 0.0, 0.0, 0.0, 0.0, 0.0]);
    yaw_pose.compose(&pitch_pose)
}

/// Three views around `center`: the middle is the target, the outer two are
/// displaced by ∓`step` (in the target camera frame) and turned slightly.
fn three_views(center: PoseSE3, step: [f64; 3], turn: f64) -> Vec<PoseSE3> {
    let delta = |s: f64| PoseSE3::from_twist([0.3 * turn * s, turn * s, 0.2 * turn * s, step[0] * s, step[1] * s, step[2] * s]);
    vec![center.compose(&delta(-1.0)), center, center.compose(&delta(1.0))]
}

fn tex(seed: u64, cell: f64) -> Texture {
    Texture { seed, octaves: 2, cell }
}

fn plane(normal: [f64; 3], offset: f64, texture: Texture) -> Plane {
    Plane {
        normal,
        offset,
        extent: None,
        texture,
    }
}

fn bounded(normal: [f64; 3], offset: f64, min: [f64; 3], max: [f64; 3], texture: Texture) -> Plane {
    Plane {
        normal,
        offset,
        extent: Some(Extent { min, max }),
        texture,
    }
}

/// Default intrinsics of the catalog scenes.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 50.0,
        fy: 50.0,
        cx: 31.5,
        cy: 23.5,
    }
}

pub const SCENE_NAMES: [&str; 3] = ["plane", "corridor", "box-street"];

/// A scene from the catalog by name.
pub fn standard_scene(name: &str) -> Result<PlanarScene> {
    let (width, height, intrinsics) = (64, 48, default_intrinsics());
    let step = [0.25, 0.04, 0.15];
    let (planes, poses) = match name {
        "plane" => {
            let n = Vector3::new(0.15, -0.2, 1.0).normalize();
            (
                vec![plane(n.into(), 5.0 * n.z, tex(11, 0.8))],
                three_views(PoseSE3::identity(), step, 0.01),
            )
        }
        "corridor" => (
            vec![
                plane([0.0, 1.0, 0.0], 1.0, tex(21, 1.0)),
                plane([1.0, 0.0, 0.0], -1.6, tex(22, 1.2)),
                plane([1.0, 0.0, 0.0], 1.6, tex(23, 1.2)),
                plane([0.0, 0.0, 1.0], 11.0, tex(24, 1.6)),
            ],
            three_views(looking(0.18, 0.14), step, 0.01),
        ),
        "box-street" => (
            vec![
                plane([0.0, 1.0, 0.0], 1.0, tex(31, 1.0)),
                plane([0.0, 0.0, 1.0], 8.0, tex(32, 1.2)),
                plane([1.0, 0.0, 0.0], -2.4, tex(33, 1.2)),
                // Box: front, left and top faces.
                bounded([0.0, 0.0, 1.0], 3.6, [0.4, 0.25, 3.6], [1.6, 1.0, 3.6], tex(34, 0.6)),
                bounded([1.0, 0.0, 0.0], 0.4, [0.4, 0.25, 3.6], [0.4, 1.0, 4.8], tex(35, 0.6)),
                bounded([0.0, 1.0, 0.0], 0.25, [0.4, 0.25, 3.6], [1.6, 0.25, 4.8], tex(36, 0.6)),
            ],
            three_views(looking(0.12, -0.1), step, 0.01),
        ),
        other => {
            return Err(Error::Scene(format!(
                "unknown scene '{other}' (available: {})",
                SCENE_NAMES.join(", ")
            )))
        }
    };
    let scene = PlanarScene {
        name: name.to_string(),
        width,
        height,
        intrinsics,
        planes,
        poses,
        target: 1,
    };
    scene.validate()?;
    Ok(scene)
}

/// Every catalog scene.
pub fn standard_scenes() -> Vec<PlanarScene> {
    SCENE_NAMES.iter().map(|n| standard_scene(n).expect("catalog scenes are valid")).collect()
}

/// Entry of a bundle manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleView {
    pub pose: PoseSE3,
    pub image: String,
    pub depth: String,
    pub normal: String,
    pub edge: String,
}

/// Contents of `manifest.json` in a rendered bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub scene: String,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub target: usize,
    pub views: Vec<BundleView>,
}

/// Views loaded back from a bundle directory.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub manifest: BundleManifest,
    pub images: Vec<ImageF>,
    pub depths: Vec<DepthMap>,
    pub normals: Vec<NormalMap>,
    pub edges: Vec<BoolMap>,
}

impl Bundle {
    /// Transform from the target camera frame to view `source`'s frame.
    pub fn relative_pose(&self, source: usize) -> PoseSE3 {
        let v = &self.manifest.views;
        v[source].pose.inverse().compose(&v[self.manifest.target].pose)
    }

    pub fn sources(&self) -> Vec<usize> {
        (0..self.manifest.views.len()).filter(|&i| i != self.manifest.target).collect()
    }
}

/// Render every view and write images, ground truth, `scene.json` and
/// `manifest.json` into `dir`. Returns the paths written.
pub fn write_bundle(scene: &PlanarScene, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let views = (0..scene.poses.len()).map(|i| render(scene, i)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for (i, v) in views.iter().enumerate() {
        let entry = BundleView {
            pose: v.pose,
            image: format!("image_{i}.ppm"),
            depth: format!("depth_{i}.pfm"),
            normal: format!("normal_{i}.pfm"),
            edge: format!("edge_{i}.pgm"),
        };
        let p = dir.join(&entry.image);
        write_pnm(&p, &Pnm::from_image(&v.image))?;
        written.push(p);
        let p = dir.join(&entry.depth);
        write_pfm(&p, &Pfm::from_scalar(v.depth.grid()))?;
        written.push(p);
        let p = dir.join(&entry.normal);
        write_pfm(&p, &Pfm::from_normals(v.normals.grid()))?;
        written.push(p);
        let p = dir.join(&entry.edge);
        write_pnm(&p, &Pnm::from_binary(&v.edges))?;
        written.push(p);
        entries.push(entry);
    }
    let manifest = BundleManifest {
        scene: scene.name.clone(),
        width: scene.width,
        height: scene.height,
        intrinsics: scene.intrinsics,
        target: scene.target,
        views: entries,
    };
    let p = dir.join("scene.json");
    write_atomic(&p, scene.to_json().as_bytes())?;
    written.push(p);
    let p = dir.join("manifest.json");
    write_atomic(&p, serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes())?;
    written.push(p);
    Ok(written)
}

/// Load a bundle written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", mpath.display())))?;
    manifest.intrinsics.validate()?;
    if manifest.views.is_empty() || manifest.target >= manifest.views.len() {
        return Err(Error::Validation(format!("{}: target view out of range", mpath.display())));
    }
    let mut bundle = Bundle {
        manifest,
        images: Vec::new(),
        depths: Vec::new(),
        normals: Vec::new(),
        edges: Vec::new(),
    };
    let dims = (bundle.manifest.width, bundle.manifest.height);
    for v in &bundle.manifest.views {
        let image = read_pnm(&dir.join(&v.image))?.to_image()?;
        let depth = read_pfm(&dir.join(&v.depth))?.to_depth()?;
        let normals = read_pfm(&dir.join(&v.normal))?.to_normal_map()?;
        let edges = read_pnm(&dir.join(&v.edge))?.to_binary()?;
        if image.dims() != dims || depth.dims() != dims || normals.dims() != dims || edges.dims() != dims {
            return Err(Error::Validation(format!("bundle view {} has mismatched dimensions", v.image)));
        }
        bundle.images.push(image);
        bundle.depths.push(depth);
        bundle.normals.push(normals);
        bundle.edges.push(edges);
    }
    Ok(bundle)
}
