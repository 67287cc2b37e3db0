//! Bird's-eye-view semantic rasterization of a target-frame scene.
//!
//! The target sits at pixel (row 120, col 48) of a 240×240 image facing
//! right, so four fifths of the view lies ahead of it. World +y maps to
//! image up. All geometry is scan-converted by sampling pixel centers,
//! without anti-aliasing, so the output bytes are a pure function of the
//! scene, agent type and config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_error, json_error, RecoatError, Result};
use crate::scene::{AgentState, AgentTrack, AgentType, LightState, Point, RoadLineKind, Scene};

pub const IMAGE_SIZE: usize = 240;
pub const CHANNELS: usize = 3;

pub type Rgb = [u8; 3];

/// Colors for every semantic class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterPalette {
    pub background: Rgb,
    pub target: Rgb,
    pub vehicle: Rgb,
    pub pedestrian: Rgb,
    pub cyclist: Rgb,
    pub lane: Rgb,
    pub centerline: Rgb,
    pub road_edge: Rgb,
    pub solid_white: Rgb,
    pub broken_white: Rgb,
    pub yellow_line: Rgb,
    pub crosswalk: Rgb,
    pub speed_bump: Rgb,
    pub stop_sign: Rgb,
    pub light_red: Rgb,
    pub light_green: Rgb,
}

const DEFAULT_PALETTE: &str = include_str!("../assets/palette.json");

impl Default for RasterPalette {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_PALETTE).expect("bundled palette parses")
    }
}

impl RasterPalette {
    pub fn entries(&self) -> [(&'static str, Rgb); 16] {
        [
            ("background", self.background),
            ("target", self.target),
            ("vehicle", self.vehicle),
            ("pedestrian", self.pedestrian),
            ("cyclist", self.cyclist),
            ("lane", self.lane),
            ("centerline", self.centerline),
            ("road_edge", self.road_edge),
            ("solid_white", self.solid_white),
            ("broken_white", self.broken_white),
            ("yellow_line", self.yellow_line),
            ("crosswalk", self.crosswalk),
            ("speed_bump", self.speed_bump),
            ("stop_sign", self.stop_sign),
            ("light_red", self.light_red),
            ("light_green", self.light_green),
        ]
    }

    /// Every class must have its own color.
    pub fn validate(&self) -> Result<()> {
        let entries = self.entries();
        for (i, (a, ca)) in entries.iter().enumerate() {
            if let Some((b, _)) = entries[i + 1..].iter().find(|(_, cb)| cb == ca) {
                return Err(RecoatError::InvalidConfig(format!("palette entries `{a}` and `{b}` share color {ca:?}")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        let palette: RasterPalette = serde_json::from_str(&text).map_err(json_error(path))?;
        palette.validate()?;
        Ok(palette)
    }

    pub fn agent(&self, t: AgentType) -> Rgb {
        match t {
            AgentType::Vehicle => self.vehicle,
            AgentType::Pedestrian => self.pedestrian,
            AgentType::Cyclist => self.cyclist,
        }
    }
}

/// Rendering options.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterConfig {
    pub palette: RasterPalette,
    /// Box length and width in meters per agent type.
    pub vehicle_box: (f64, f64),
    pub pedestrian_box: (f64, f64),
    pub cyclist_box: (f64, f64),
    /// History steps drawn behind each agent (the t0 state included).
    pub tail_steps: usize,
    pub tail_width_px: usize,
    pub signal_radius_m: f64,
    pub dash_length_m: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            palette: RasterPalette::default(),
            vehicle_box: (4.5, 2.0),
            pedestrian_box: (0.8, 0.8),
            cyclist_box: (1.8, 0.6),
            tail_steps: crate::scene::HISTORY_LEN,
            tail_width_px: 1,
            signal_radius_m: 1.0,
            dash_length_m: 3.0,
        }
    }
}

impl RasterConfig {
    pub fn box_size(&self, t: AgentType) -> (f64, f64) {
        match t {
            AgentType::Vehicle => self.vehicle_box,
            AgentType::Pedestrian => self.pedestrian_box,
            AgentType::Cyclist => self.cyclist_box,
        }
    }
}

/// Side length in meters of the area covered for a target of type `t`.
pub fn extent_m(t: AgentType) -> f64 {
    match t {
        AgentType::Vehicle => 80.0,
        AgentType::Cyclist => 60.0,
        AgentType::Pedestrian => 40.0,
    }
}

pub fn meters_per_pixel(t: AgentType) -> f64 {
    extent_m(t) / IMAGE_SIZE as f64
}

/// Pixel column of the target (one fifth of the width).
pub const ANCHOR_COL: usize = IMAGE_SIZE / 5;
/// Pixel row of the target (half the height).
pub const ANCHOR_ROW: usize = IMAGE_SIZE / 2;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    /// Row-major `(IMAGE_SIZE, IMAGE_SIZE, 3)`.
    pub pixels: Vec<u8>,
    pub meters_per_pixel: f64,
}

impl RasterImage {
    pub fn blank(mpp: f64, background: Rgb) -> Self {
        Self {
            pixels: background.repeat(IMAGE_SIZE * IMAGE_SIZE),
            meters_per_pixel: mpp,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> Rgb {
        let i = (row * IMAGE_SIZE + col) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set(&mut self, row: i64, col: i64, c: Rgb) {
        if row < 0 || col < 0 || row >= IMAGE_SIZE as i64 || col >= IMAGE_SIZE as i64 {
            return;
        }
        let i = (row as usize * IMAGE_SIZE + col as usize) * CHANNELS;
        self.pixels[i..i + CHANNELS].copy_from_slice(&c);
    }

    pub fn count_color(&self, c: Rgb) -> usize {
        self.pixels.chunks_exact(CHANNELS).filter(|p| *p == c).count()
    }
}

struct Canvas {
    img: RasterImage,
    mpp: f64,
}

impl Canvas {
    /// Continuous pixel coordinates `(col, row)`; pixel `(r, c)` spans `[c, c+1) × [r, r+1)`.
    fn project(&self, p: Point) -> (f64, f64) {
        (
            ANCHOR_COL as f64 + 0.5 + p[0] / self.mpp,
            ANCHOR_ROW as f64 + 0.5 - p[1] / self.mpp,
        )
    }

    /// Fills pixels whose centers lie inside the polygon (even-odd rule).
    fn fill_polygon(&mut self, poly: &[Point], c: Rgb) {
        if poly.len() < 3 {
            return;
        }
        let pts: Vec<(f64, f64)> = poly.iter().map(|&p| self.project(p)).collect();
        let min_row = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_row = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let r0 = (min_row - 0.5).ceil().max(0.0) as i64;
        let r1 = (max_row - 0.5).floor().min(IMAGE_SIZE as f64 - 1.0) as i64;
        let mut xs = Vec::new();
        for r in r0..=r1 {
            let yc = r as f64 + 0.5;
            xs.clear();
            for i in 0..pts.len() {
                let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                if (a.1 <= yc) != (b.1 <= yc) {
                    xs.push(a.0 + (yc - a.1) / (b.1 - a.1) * (b.0 - a.0));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                let c0 = (pair[0] - 0.5).ceil().max(0.0) as i64;
                let c1 = (pair[1] - 0.5).ceil().min(IMAGE_SIZE as f64) as i64;
                for col in c0..c1 {
                    self.img.set(r, col, c);
                }
            }
        }
    }

    /// Integer line between the pixels containing `a` and `b`, clipped to the image.
    fn line(&mut self, a: Point, b: Point, c: Rgb, width: usize) {
        let Some(((x0, y0), (x1, y1))) = clip(self.project(a), self.project(b)) else {
            return;
        };
        let (mut x, mut y) = (x0.floor() as i64, y0.floor() as i64);
        let (xe, ye) = (x1.floor() as i64, y1.floor() as i64);
        let dx = (xe - x).abs();
        let dy = -(ye - y).abs();
        let sx = if x < xe { 1 } else { -1 };
        let sy = if y < ye { 1 } else { -1 };
        let mut err = dx + dy;
        let half = (width.max(1) as i64 - 1) / 2;
        loop {
            for oy in -half..=half {
                for ox in -half..=half {
                    self.img.set(y + oy, x + ox, c);
                }
            }
            if x == xe && y == ye {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn polyline(&mut self, pts: &[Point], c: Rgb, width: usize) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], c, width);
        }
    }

    /// Alternating on/off segments of `dash` meters along the polyline.
    fn dashed(&mut self, pts: &[Point], c: Rgb, dash: f64) {
        let mut along = 0.0;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            let mut s = 0.0;
            while s < len {
                let phase = (along + s) / dash;
                let on = (phase.floor() as i64) % 2 == 0;
                let step = ((phase.floor() + 1.0) * dash - along - s).min(len - s).max(1e-9);
                if on {
                    let p = |t: f64| [a[0] + (b[0] - a[0]) * t / len, a[1] + (b[1] - a[1]) * t / len];
                    self.line(p(s), p(s + step), c, 1);
                }
                s += step;
            }
            along += len;
        }
    }

    fn disc(&mut self, center: Point, radius_m: f64, c: Rgb) {
        let (cx, cy) = self.project(center);
        let r = (radius_m / self.mpp).max(0.5);
        let (r0, r1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        let (c0, c1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let (px, py) = (col as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
                if px * px + py * py <= r * r {
                    self.img.set(row, col, c);
                }
            }
        }
    }

    fn oriented_box(&mut self, s: &AgentState, (length, width): (f64, f64), c: Rgb) {
        let (sin, cos) = s.heading.sin_cos();
        let (hl, hw) = (length / 2.0, width / 2.0);
        let corner = |l: f64, w: f64| [s.x + cos * l - sin * w, s.y + sin * l + cos * w];
        let poly = [corner(hl, hw), corner(-hl, hw), corner(-hl, -hw), corner(hl, -hw)];
        self.fill_polygon(&poly, c);
    }

    fn tail(&mut self, track: &AgentTrack, steps: usize, c: Rgb, width: usize) {
        let start = track.states.len().saturating_sub(steps);
        let pts: Vec<Point> = track.states[start..].iter().filter(|s| s.valid).map(AgentState::position).collect();
        self.polyline(&pts, c, width);
    }
}

/// Liang–Barsky clip of a segment against a slightly enlarged image rectangle.
fn clip(a: (f64, f64), b: (f64, f64)) -> Option<((f64, f64), (f64, f64))> {
    let (lo, hi) = (-1.0, IMAGE_SIZE as f64 + 1.0);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [(-dx, a.0 - lo), (dx, hi - a.0), (-dy, a.1 - lo), (dy, hi - a.1)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    Some(((a.0 + t0 * dx, a.1 + t0 * dy), (a.0 + t1 * dx, a.1 + t1 * dy)))
}

/// Renders a target-frame scene for a target of type `agent_type`.
///
/// Draw order: lanes, crosswalks and speed bumps, road lines, centerlines,
/// history tails, neighbor boxes, signals, then the target.
pub fn rasterize(scene: &Scene, agent_type: AgentType, cfg: &RasterConfig) -> RasterImage {
    let mpp = meters_per_pixel(agent_type);
    let pal = &cfg.palette;
    let mut cv = Canvas {
        img: RasterImage::blank(mpp, pal.background),
        mpp,
    };
    let mut map = scene.map.clone();
    map.normalize();
    for lane in &map.lanes {
        cv.fill_polygon(lane, pal.lane);
    }
    for cw in &map.crosswalks {
        cv.fill_polygon(cw, pal.crosswalk);
    }
    for sb in &map.speed_bumps {
        cv.fill_polygon(sb, pal.speed_bump);
    }
    for rl in &map.road_lines {
        match rl.kind {
            RoadLineKind::RoadEdge => cv.polyline(&rl.points, pal.road_edge, 1),
            RoadLineKind::SolidWhite => cv.polyline(&rl.points, pal.solid_white, 1),
            RoadLineKind::BrokenWhite => cv.dashed(&rl.points, pal.broken_white, cfg.dash_length_m),
            RoadLineKind::Yellow => cv.polyline(&rl.points, pal.yellow_line, 1),
        }
    }
    for cl in &scene.centerlines {
        cv.polyline(cl, pal.centerline, 1);
    }
    for n in &scene.neighbors {
        cv.tail(n, cfg.tail_steps, pal.agent(n.agent_type), cfg.tail_width_px);
    }
    cv.tail(&scene.target, cfg.tail_steps, pal.target, cfg.tail_width_px);
    for n in &scene.neighbors {
        if let Some(s) = n.current().filter(|s| s.valid) {
            cv.oriented_box(s, cfg.box_size(n.agent_type), pal.agent(n.agent_type));
        }
    }
    for stop in &map.stop_signs {
        cv.disc(*stop, cfg.signal_radius_m, pal.stop_sign);
    }
    for light in &map.traffic_lights {
        let c = match light.state {
            LightState::Red => pal.light_red,
            LightState::Green => pal.light_green,
        };
        cv.disc(light.position, cfg.signal_radius_m, c);
    }
    if let Some(s) = scene.target.current().filter(|s| s.valid) {
        cv.oriented_box(s, cfg.box_size(agent_type), pal.target);
    }
    cv.img
}

/// Writes `img` as a PNG.
pub fn export_image(img: &RasterImage, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(IMAGE_SIZE as u32, IMAGE_SIZE as u32, img.pixels.clone())
        .expect("pixel buffer has image dimensions");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| RecoatError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads back the pixel array of an image written by [`export_image`].
pub fn import_pixels(path: &Path) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|source| RecoatError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    if rgb.width() as usize != IMAGE_SIZE || rgb.height() as usize != IMAGE_SIZE {
        return Err(RecoatError::InvalidInput(format!(
            "{}: image is {}x{}, expected {IMAGE_SIZE}x{IMAGE_SIZE}",
            path.display(),
            rgb.width(),
            rgb.height()
        )));
    }
    Ok(rgb.into_raw())
}

/// File-system-safe name for a scenario id.
pub fn image_file_name(scenario_id: &str) -> String {
    let stem: String = scenario_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{stem}.png")
}

/// Rasterizes and writes one PNG per scene into `dir`, returning the paths written.
pub fn export_batch(scenes: &[Scene], agent_type: AgentType, cfg: &RasterConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    scenes
        .iter()
        .map(|s| {
            let local = s.to_target_frame()?;
            let path = dir.join(image_file_name(&s.scenario_id));
            export_image(&rasterize(&local, agent_type, cfg), &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{MapContext, FUTURE_LEN, HISTORY_LEN};

    fn bare_scene(agent_type: AgentType) -> Scene {
        Scene {
            scenario_id: "bare".into(),
            target: AgentTrack::new(agent_type, vec![AgentState::new(0.0, 0.0, 0.0, 0.0, 0.0); HISTORY_LEN]),
            target_future: vec![[0.0, 0.0]; FUTURE_LEN],
            neighbors: vec![],
            map: MapContext::default(),
            centerlines: vec![],
        }
    }

    #[test]
    fn default_palette_is_distinct() {
        RasterPalette::default().validate().unwrap();
        let mut p = RasterPalette::default();
        p.cyclist = p.vehicle;
        assert!(p.validate().is_err());
    }

    #[test]
    fn scale_per_agent_type() {
        assert_eq!(meters_per_pixel(AgentType::Vehicle), 80.0 / 240.0);
        assert_eq!(meters_per_pixel(AgentType::Cyclist), 0.25);
        assert_eq!(meters_per_pixel(AgentType::Pedestrian), 40.0 / 240.0);
    }

    #[test]
    fn empty_scene_is_background_plus_target() {
        let cfg = RasterConfig::default();
        let img = rasterize(&bare_scene(AgentType::Vehicle), AgentType::Vehicle, &cfg);
        assert_eq!(img.pixels.len(), IMAGE_SIZE * IMAGE_SIZE * CHANNELS);
        assert_eq!(img.pixel(ANCHOR_ROW, ANCHOR_COL), cfg.palette.target);
        let target = img.count_color(cfg.palette.target);
        let bg = img.count_color(cfg.palette.background);
        assert_eq!(target + bg, IMAGE_SIZE * IMAGE_SIZE);
        // 4.5 m × 2.0 m at 1/3 m per pixel covers about 13.5 × 6 pixels.
        assert!((70..=100).contains(&target), "target pixels {target}");
        for (r, c) in [(ANCHOR_ROW, ANCHOR_COL + 10), (ANCHOR_ROW + 5, ANCHOR_COL), (0, 0)] {
            assert_eq!(img.pixel(r, c), cfg.palette.background);
        }
    }

    #[test]
    fn target_box_faces_right() {
        let cfg = RasterConfig::default();
        let img = rasterize(&bare_scene(AgentType::Vehicle), AgentType::Vehicle, &cfg);
        assert_eq!(img.pixel(ANCHOR_ROW, ANCHOR_COL + 6), cfg.palette.target);
        assert_eq!(img.pixel(ANCHOR_ROW + 6, ANCHOR_COL), cfg.palette.background);
    }

    #[test]
    fn neighbor_offset_scales_with_type() {
        let cfg = RasterConfig::default();
        for (t, px) in [(AgentType::Vehicle, 90), (AgentType::Cyclist, 120)] {
            let mut s = bare_scene(t);
            let mut n = AgentTrack::new(AgentType::Pedestrian, vec![AgentState::new(30.0, 0.0, 0.0, 0.0, 0.0); HISTORY_LEN]);
            n.states[..HISTORY_LEN - 1].iter_mut().for_each(|s| *s = AgentState::invalid());
            s.neighbors.push(n);
            let img = rasterize(&s, t, &cfg);
            assert_eq!(img.pixel(ANCHOR_ROW, ANCHOR_COL + px), cfg.palette.pedestrian);
        }
    }

    #[test]
    fn off_image_geometry_is_clipped() {
        let cfg = RasterConfig::default();
        let mut s = bare_scene(AgentType::Vehicle);
        s.centerlines.push(vec![[-1000.0, -1000.0], [1000.0, 1000.0]]);
        s.map.lanes.push(vec![[-500.0, -3.0], [500.0, -3.0], [500.0, 3.0], [-500.0, 3.0]]);
        let img = rasterize(&s, AgentType::Vehicle, &cfg);
        assert!(img.count_color(cfg.palette.lane) > 0);
        assert!(img.count_color(cfg.palette.centerline) > 100);
    }

    #[test]
    fn broken_lines_have_gaps() {
        let cfg = RasterConfig::default();
        let mut s = bare_scene(AgentType::Vehicle);
        s.map.road_lines.push(crate::scene::RoadLine {
            kind: RoadLineKind::BrokenWhite,
            points: vec![[0.0, 10.0], [60.0, 10.0]],
        });
        s.map.road_lines.push(crate::scene::RoadLine {
            kind: RoadLineKind::SolidWhite,
            points: vec![[0.0, -10.0], [60.0, -10.0]],
        });
        let img = rasterize(&s, AgentType::Vehicle, &cfg);
        let broken = img.count_color(cfg.palette.broken_white);
        let solid = img.count_color(cfg.palette.solid_white);
        assert!(solid >= 180 && broken > 60 && broken < solid * 2 / 3, "solid {solid} broken {broken}");
    }
}
