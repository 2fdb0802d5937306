//! Raster-scan transmission imaging of the chip and beam placement.
//!
//! The beam is a Gaussian with 1/e² intensity radius `w`, so each transverse
//! coordinate has standard deviation `w/2`. Transmission through axis-aligned
//! features is evaluated with erf products; the optional disk occluder uses a
//! one-dimensional quadrature.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImagingError {
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("feature extraction failed: {0}")]
    Features(String),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Opaque axis-aligned rectangle, m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn x_range(&self) -> (f64, f64) {
        (self.cx - self.width / 2.0, self.cx + self.width / 2.0)
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.cy - self.height / 2.0, self.cy + self.height / 2.0)
    }
}

/// Opaque disk, m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGeometry {
    /// Open x-interval between the cavity walls; everything outside it is
    /// blocked over the full height. `None` for no walls.
    pub aperture: Option<(f64, f64)>,
    pub pad: Option<Rect>,
    #[serde(default)]
    pub disk: Option<Disk>,
}

impl Default for SceneGeometry {
    /// A 0.5 mm wide opening with a 300 × 350 µm pad; dimensions are
    /// placeholders, not measured values.
    fn default() -> Self {
        Self {
            aperture: Some((-250e-6, 250e-6)),
            pad: Some(Rect { cx: 0.0, cy: 100e-6, width: 300e-6, height: 350e-6 }),
            disk: None,
        }
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl SceneGeometry {
    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.aperture {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(ImagingError::Scene("aperture must be a finite interval lo < hi".into()));
            }
        }
        if let Some(p) = &self.pad {
            if !(positive(p.width) && positive(p.height) && p.cx.is_finite() && p.cy.is_finite()) {
                return Err(ImagingError::Scene("pad needs finite centre and positive size".into()));
            }
            let (px0, px1) = p.x_range();
            if self.aperture.is_some_and(|(lo, hi)| px0 < lo || px1 > hi) {
                return Err(ImagingError::Scene("pad extends past the aperture".into()));
            }
        }
        if let Some(d) = self.disk {
            if !(positive(d.radius) && d.cx.is_finite() && d.cy.is_finite()) {
                return Err(ImagingError::Scene("disk needs finite centre and positive radius".into()));
            }
            if let Some((lo, hi)) = self.aperture {
                if d.cx - d.radius < lo || d.cx + d.radius > hi {
                    return Err(ImagingError::Scene("disk extends past the aperture".into()));
                }
            }
            if let Some(p) = &self.pad {
                let ((px0, px1), (py0, py1)) = (p.x_range(), p.y_range());
                let dx = (d.cx - d.cx.clamp(px0, px1)).abs();
                let dy = (d.cy - d.cy.clamp(py0, py1)).abs();
                if dx.hypot(dy) < d.radius {
                    return Err(ImagingError::Scene("disk overlaps the pad".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamSpec {
    /// 1/e² intensity radius, m.
    pub waist: f64,
    /// Relative units; scales the transmitted signal only.
    #[serde(default = "unit_power")]
    pub power: f64,
}

fn unit_power() -> f64 {
    1.0
}

impl Default for BeamSpec {
    fn default() -> Self {
        Self { waist: 47e-6, power: 1.0 }
    }
}

impl BeamSpec {
    pub fn validate(&self) -> Result<()> {
        if !positive(self.waist) || !(self.power >= 0.0 && self.power.is_finite()) {
            return Err(ImagingError::Scene("beam needs waist > 0 and power ≥ 0".into()));
        }
        Ok(())
    }

    /// Fraction of a centred 1-D profile falling in `[a, b]` (offsets from the
    /// beam centre).
    fn frac(&self, a: f64, b: f64) -> f64 {
        let k = std::f64::consts::SQRT_2 / self.waist;
        0.5 * (libm::erf(k * b) - libm::erf(k * a))
    }
}

/// Fraction of the disk's light blocked, by quadrature over `x = cx + R·sin θ`.
fn disk_blocked(beam: &BeamSpec, d: &Disk, x: f64, y: f64) -> f64 {
    const N: usize = 400;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let h = 2.0 * half_pi / N as f64;
    let sigma = beam.waist / 2.0;
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let f = |theta: f64| {
        let c = theta.cos();
        let u = d.cx + d.radius * theta.sin() - x;
        let half = d.radius * c;
        let gx = norm * (-0.5 * (u / sigma).powi(2)).exp();
        gx * beam.frac(d.cy - half - y, d.cy + half - y) * d.radius * c
    };
    // composite Simpson
    let mut s = f(-half_pi) + f(half_pi);
    for i in 1..N {
        let t = -half_pi + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
    }
    s * h / 3.0
}

/// Transmitted fraction of the beam centred at `(x, y)`.
pub fn transmission_at(scene: &SceneGeometry, beam: &BeamSpec, x: f64, y: f64) -> f64 {
    let open = match scene.aperture {
        Some((lo, hi)) => beam.frac(lo - x, hi - x),
        None => 1.0,
    };
    let pad = scene.pad.map_or(0.0, |p| {
        let ((px0, px1), (py0, py1)) = (p.x_range(), p.y_range());
        beam.frac(px0 - x, px1 - x) * beam.frac(py0 - y, py1 - y)
    });
    let disk = scene.disk.map_or(0.0, |d| disk_blocked(beam, &d, x, y));
    (open - pad - disk).clamp(0.0, 1.0)
}

/// Inclusive sample grid; row `i` is at `y_min + i·dy`, column `j` at
/// `x_min + j·dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub y_min: f64,
    pub y_max: f64,
    pub ny: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { x_min: -400e-6, x_max: 400e-6, nx: 161, y_min: -450e-6, y_max: 450e-6, ny: 181 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.nx >= 2
            && self.ny >= 2
            && self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max > self.x_min
            && self.y_max > self.y_min
            && self.x_max.is_finite()
            && self.y_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ImagingError::Grid("need ≥ 2 samples per axis over a finite, increasing range".into()))
        }
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / (self.ny - 1) as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y_min + i as f64 * self.dy()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub grid: GridSpec,
    /// Row-major, `ny` rows of `nx` samples.
    pub data: Vec<f64>,
}

impl Image {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.grid.nx + j]
    }

    /// One CSV line per row, lowest `y` first.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.data.chunks(self.grid.nx) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    /// Binary 8-bit graymap, highest `y` on top, 1.0 mapped to white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
        for row in self.data.chunks(nx).rev() {
            out.extend(row.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        out
    }
}

pub fn raster_image(scene: &SceneGeometry, beam: &BeamSpec, grid: &GridSpec) -> Result<Image> {
    scene.validate()?;
    beam.validate()?;
    grid.validate()?;
    let mut data = Vec::with_capacity(grid.nx * grid.ny);
    for i in 0..grid.ny {
        let y = grid.y(i);
        data.extend((0..grid.nx).map(|j| transmission_at(scene, beam, grid.x(j), y)));
    }
    Ok(Image { grid: *grid, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallEdge {
    pub side: Side,
    /// Inner edge position (0.5 crossing), m.
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub threshold: f64,
    pub pad: BBox,
    pub walls: Vec<WallEdge>,
    /// Pad centre.
    pub a: Point,
    /// Midpoint of the lower pad edge.
    pub b: Point,
    /// `b` moved down by `c_offset`.
    pub c: Point,
    pub c_offset: f64,
}

pub const FEATURE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_C_OFFSET: f64 = 200e-6;

/// Linear interpolation of the `FEATURE_THRESHOLD` crossing between samples
/// `(u0, v0)` and `(u1, v1)`.
fn crossing(u0: f64, v0: f64, u1: f64, v1: f64) -> f64 {
    if v1 == v0 {
        return 0.5 * (u0 + u1);
    }
    u0 + (FEATURE_THRESHOLD - v0) * (u1 - u0) / (v1 - v0)
}

struct Component {
    pixels: Vec<(usize, usize)>,
    i_min: usize,
    i_max: usize,
    j_min: usize,
    j_max: usize,
}

fn dark_components(img: &Image) -> Vec<Component> {
    let (nx, ny) = (img.grid.nx, img.grid.ny);
    let dark: Vec<bool> = img.data.iter().map(|v| *v < FEATURE_THRESHOLD).collect();
    let mut seen = vec![false; nx * ny];
    let mut out = Vec::new();
    for start in 0..nx * ny {
        if !dark[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut c = Component { pixels: Vec::new(), i_min: usize::MAX, i_max: 0, j_min: usize::MAX, j_max: 0 };
        while let Some(k) = queue.pop_front() {
            let (i, j) = (k / nx, k % nx);
            c.pixels.push((i, j));
            c.i_min = c.i_min.min(i);
            c.i_max = c.i_max.max(i);
            c.j_min = c.j_min.min(j);
            c.j_max = c.j_max.max(j);
            let mut visit = |ii: usize, jj: usize| {
                let kk = ii * nx + jj;
                if dark[kk] && !seen[kk] {
                    seen[kk] = true;
                    queue.push_back(kk);
                }
            };
            if i > 0 {
                visit(i - 1, j);
            }
            if i + 1 < ny {
                visit(i + 1, j);
            }
            if j > 0 {
                visit(i, j - 1);
            }
            if j + 1 < nx {
                visit(i, j + 1);
            }
        }
        out.push(c);
    }
    out
}

/// Threshold at 0.5, classify dark regions spanning the full height as walls
/// and take the single remaining region as the pad. Edges are located to
/// sub-pixel precision by interpolating the 0.5 crossing along the row and
/// column through the pad's pixel centroid.
pub fn locate_features(img: &Image, c_offset: f64) -> Result<Features> {
    let g = img.grid;
    g.validate()?;
    if img.data.len() != g.nx * g.ny {
        return Err(ImagingError::Grid(format!("{} samples for a {}×{} grid", img.data.len(), g.nx, g.ny)));
    }
    let comps = dark_components(img);
    let (walls, pads): (Vec<&Component>, Vec<&Component>) =
        comps.iter().partition(|c| c.i_min == 0 && c.i_max == g.ny - 1);
    if pads.len() != 1 {
        let sizes: Vec<usize> = pads.iter().map(|c| c.pixels.len()).collect();
        return Err(ImagingError::Features(format!(
            "expected one pad region below {FEATURE_THRESHOLD} transmission, found {} (pixel counts {sizes:?}); {} full-height bands",
            pads.len(),
            walls.len()
        )));
    }
    let pad = pads[0];
    if pad.i_min == 0 || pad.j_min == 0 || pad.i_max == g.ny - 1 || pad.j_max == g.nx - 1 {
        return Err(ImagingError::Features("pad region touches the image border".into()));
    }
    let n = pad.pixels.len() as f64;
    let ic = (pad.pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n).round() as usize;
    let jc = (pad.pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n).round() as usize;
    let (i0, i1, j0, j1) = (pad.i_min, pad.i_max, pad.j_min, pad.j_max);
    let x_min = crossing(g.x(j0 - 1), img.at(ic, j0 - 1), g.x(j0), img.at(ic, j0));
    let x_max = crossing(g.x(j1), img.at(ic, j1), g.x(j1 + 1), img.at(ic, j1 + 1));
    let y_min = crossing(g.y(i0 - 1), img.at(i0 - 1, jc), g.y(i0), img.at(i0, jc));
    let y_max = crossing(g.y(i1), img.at(i1, jc), g.y(i1 + 1), img.at(i1 + 1, jc));

    let mut wall_edges = Vec::new();
    for w in walls {
        let row: Vec<usize> = w.pixels.iter().filter(|p| p.0 == ic).map(|p| p.1).collect();
        let (Some(&lo), Some(&hi)) = (row.iter().min(), row.iter().max()) else { continue };
        if hi < pad.j_min && hi + 1 < g.nx {
            wall_edges.push(WallEdge {
                side: Side::Left,
                x: crossing(g.x(hi), img.at(ic, hi), g.x(hi + 1), img.at(ic, hi + 1)),
            });
        } else if lo > pad.j_max && lo > 0 {
            wall_edges.push(WallEdge {
                side: Side::Right,
                x: crossing(g.x(lo - 1), img.at(ic, lo - 1), g.x(lo), img.at(ic, lo)),
            });
        }
    }
    wall_edges.sort_by(|a, b| a.x.total_cmp(&b.x));

    let a = Point { x: 0.5 * (x_min + x_max), y: 0.5 * (y_min + y_max) };
    let b = Point { x: a.x, y: y_min };
    let c = Point { x: b.x, y: b.y - c_offset };
    Ok(Features {
        threshold: FEATURE_THRESHOLD,
        pad: BBox { x_min, x_max, y_min, y_max },
        walls: wall_edges,
        a,
        b,
        c,
        c_offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_scene(pad: Rect) -> SceneGeometry {
        SceneGeometry { aperture: None, pad: Some(pad), disk: None }
    }

    #[test]
    fn limits_and_half_plane() {
        let beam = BeamSpec::default();
        let big = open_scene(Rect { cx: 0.0, cy: 0.0, width: 2e-3, height: 2e-3 });
        assert!(transmission_at(&big, &beam, 0.0, 0.0) < 1e-6);
        assert!((transmission_at(&big, &beam, 5e-3, 5e-3) - 1.0).abs() < 1e-6);
        // a long pad edge acts as a half plane
        let t = transmission_at(&big, &beam, 1e-3, 0.0);
        assert!((t - 0.5).abs() < 1e-6, "{t}");
    }

    #[test]
    fn knife_edge_width() {
        let beam = BeamSpec::default();
        let scene = open_scene(Rect { cx: 0.0, cy: 0.0, width: 2e-3, height: 10e-3 });
        let edge = |x: f64| transmission_at(&scene, &beam, 1e-3 + x, 0.0);
        // bisect the 10 % and 90 % points
        let solve = |target: f64| {
            let (mut lo, mut hi) = (-200e-6, 200e-6);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if edge(mid) < target {
                    lo = mid
                } else {
                    hi = mid
                }
            }
            0.5 * (lo + hi)
        };
        let width = solve(0.9) - solve(0.1);
        let expected = 2.0 * 0.906_193_8 * 47e-6 / std::f64::consts::SQRT_2;
        assert!((width - expected).abs() < 1e-8, "{width}");
    }

    #[test]
    fn symmetric_scene_gives_symmetric_image() {
        let scene =
            SceneGeometry { pad: Some(Rect { cx: 0.0, cy: 0.0, width: 300e-6, height: 350e-6 }), ..Default::default() };
        let img = raster_image(&scene, &BeamSpec::default(), &GridSpec::default()).unwrap();
        let g = img.grid;
        for i in 0..g.ny {
            for j in 0..g.nx {
                assert!((img.at(i, j) - img.at(i, g.nx - 1 - j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn walls_make_full_height_bands() {
        let img = raster_image(&SceneGeometry::default(), &BeamSpec::default(), &GridSpec::default()).unwrap();
        let g = img.grid;
        for i in 0..g.ny {
            assert!(img.at(i, 0) < 1e-6 && img.at(i, g.nx - 1) < 1e-6);
        }
        let f = locate_features(&img, DEFAULT_C_OFFSET).unwrap();
        assert_eq!(f.walls.len(), 2);
        assert!((f.walls[0].x + 250e-6).abs() < 2e-6 && (f.walls[1].x - 250e-6).abs() < 2e-6, "{:?}", f.walls);
    }

    #[test]
    fn features_round_trip() {
        let scene = SceneGeometry::default();
        let grid = GridSpec::default();
        let img = raster_image(&scene, &BeamSpec::default(), &grid).unwrap();
        let f = locate_features(&img, DEFAULT_C_OFFSET).unwrap();
        let pad = scene.pad.unwrap();
        assert!((f.a.x - pad.cx).abs() < 0.5 * grid.dx());
        assert!((f.a.y - pad.cy).abs() < 0.5 * grid.dy());
        assert_eq!(f.b.x, f.a.x);
        assert_eq!(f.c.x, f.b.x);
        assert!((f.b.y - f.c.y - 200e-6).abs() < 1e-15);
    }

    #[test]
    fn walls_only_is_a_feature_error() {
        let scene = SceneGeometry { pad: None, ..Default::default() };
        let img = raster_image(&scene, &BeamSpec::default(), &GridSpec::default()).unwrap();
        let e = locate_features(&img, DEFAULT_C_OFFSET).unwrap_err();
        assert!(e.to_string().contains("found 0") && e.to_string().contains("2 full-height bands"), "{e}");
    }

    #[test]
    fn blank_and_double_images_fail() {
        let grid = GridSpec { nx: 11, ny: 11, ..GridSpec::default() };
        let blank = Image { grid, data: vec![1.0; 121] };
        assert!(matches!(locate_features(&blank, DEFAULT_C_OFFSET), Err(ImagingError::Features(_))));
        let mut two = blank.clone();
        two.data[2 * 11 + 2] = 0.0;
        two.data[8 * 11 + 8] = 0.0;
        let e = locate_features(&two, DEFAULT_C_OFFSET).unwrap_err();
        assert!(e.to_string().contains("found 2"), "{e}");
    }

    #[test]
    fn disk_blocks_like_quadrature() {
        let beam = BeamSpec { waist: 40e-6, power: 1.0 };
        let d = Disk { cx: 0.0, cy: 0.0, radius: 30e-6 };
        let scene = SceneGeometry { aperture: None, pad: None, disk: Some(d) };
        // brute-force midpoint sum over the disk
        let (x, y) = (10e-6, -5e-6);
        let sigma = beam.waist / 2.0;
        let n = 600;
        let h = 2.0 * d.radius / n as f64;
        let mut blocked = 0.0;
        for a in 0..n {
            for b in 0..n {
                let (u, v) = (-d.radius + (a as f64 + 0.5) * h, -d.radius + (b as f64 + 0.5) * h);
                if u * u + v * v <= d.radius * d.radius {
                    let r2 = (u - x).powi(2) + (v - y).powi(2);
                    blocked += (-r2 / (2.0 * sigma * sigma)).exp() * h * h;
                }
            }
        }
        blocked /= 2.0 * std::f64::consts::PI * sigma * sigma;
        let t = transmission_at(&scene, &beam, x, y);
        assert!((1.0 - t - blocked).abs() < 2e-3, "{} vs {blocked}", 1.0 - t);
    }

    #[test]
    fn scene_validation() {
        let mut s = SceneGeometry::default();
        s.pad.as_mut().unwrap().width = 600e-6;
        assert!(s.validate().is_err());
        let s = SceneGeometry { disk: Some(Disk { cx: 0.0, cy: 100e-6, radius: 10e-6 }), ..Default::default() };
        assert!(s.validate().is_err());
        assert!(BeamSpec { waist: 0.0, power: 1.0 }.validate().is_err());
    }
}
