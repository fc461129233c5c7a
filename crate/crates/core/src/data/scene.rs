//! Procedural street scenes. Dense scenes are fully labeled layouts of sky,
//! buildings, road and sidewalk with a few (mostly car) objects; sparse
//! scenes put objects of one class on unlabeled clutter.

use serde::{Deserialize, Serialize};

use super::{Domain, Sample};
use crate::error::{Error, Result};
use crate::loss::VOID;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const SMALL_PALETTE: [&str; 8] = ["sky", "building", "road", "sidewalk", "vegetation", "car", "pedestrian", "sign"];
pub const FULL_PALETTE: [&str; 11] =
    ["sky", "building", "road", "sidewalk", "fence", "vegetation", "pole", "car", "sign", "pedestrian", "cyclist"];
pub const OBJECT_CLASSES: [&str; 4] = ["car", "pedestrian", "sign", "cyclist"];
pub const STRUCTURAL_CLASSES: [&str; 3] = ["sky", "building", "road"];

const KNOWN_CLASSES: [&str; 11] = FULL_PALETTE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub palette: Vec<String>,
    /// Inclusive object-count ranges per scene kind.
    pub dense_objects: [usize; 2],
    pub sparse_objects: [usize; 2],
    pub mixed_objects: [usize; 2],
    /// Relative frequency of each entry of [`OBJECT_CLASSES`] in dense
    /// scenes and in mixed (unlabeled / test) scenes.
    pub dense_object_weights: [f64; 4],
    pub mixed_object_weights: [f64; 4],
    /// Object height range as a fraction of image height, at the bottom row.
    pub object_scale: [f64; 2],
    /// Standard deviation of per-pixel sensor noise.
    pub noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 64,
            height: 64,
            palette: SMALL_PALETTE.iter().map(|s| s.to_string()).collect(),
            dense_objects: [0, 3],
            sparse_objects: [1, 6],
            mixed_objects: [2, 6],
            dense_object_weights: [0.86, 0.07, 0.07, 0.0],
            mixed_object_weights: [1.0, 1.0, 1.0, 1.0],
            object_scale: [0.25, 0.45],
            noise: 6.0,
        }
    }
}

impl SceneParams {
    /// Default parameters with the 8-class or the full 11-class palette.
    pub fn with_classes(classes: usize) -> Result<Self> {
        let palette: Vec<String> = match classes {
            8 => SMALL_PALETTE.iter().map(|s| s.to_string()).collect(),
            11 => FULL_PALETTE.iter().map(|s| s.to_string()).collect(),
            other => return Err(Error::Config(format!("no built-in palette with {other} classes (use 8 or 11)"))),
        };
        Ok(SceneParams { palette, ..Default::default() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config(format!("scene size {}×{} too small", self.width, self.height)));
        }
        for name in &self.palette {
            if !KNOWN_CLASSES.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown palette class {name:?}")));
            }
        }
        for required in STRUCTURAL_CLASSES {
            if !self.palette.iter().any(|p| p == required) {
                return Err(Error::Config(format!("palette must contain {required}")));
            }
        }
        if self.palette.len() > 11 || self.palette.len() < 4 {
            return Err(Error::Config(format!("palette of {} classes", self.palette.len())));
        }
        for range in [self.dense_objects, self.sparse_objects, self.mixed_objects] {
            if range[0] > range[1] {
                return Err(Error::Config(format!("object count range {range:?} is empty")));
            }
        }
        if self.sparse_objects[0] == 0 {
            return Err(Error::Config("sparse scenes need at least one object".into()));
        }
        if self.object_classes().is_empty() {
            return Err(Error::Config("palette contains no object class".into()));
        }
        Ok(())
    }

    pub fn class_id(&self, name: &str) -> Option<u8> {
        self.palette.iter().position(|p| p == name).map(|i| i as u8)
    }

    /// Palette ids of the object classes, in [`OBJECT_CLASSES`] order.
    pub fn object_classes(&self) -> Vec<u8> {
        OBJECT_CLASSES.iter().filter_map(|n| self.class_id(n)).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }
}

type Rgb = [f64; 3];

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<Rgb>,
    labels: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize, label: u8) -> Self {
        Canvas { w, h, rgb: vec![[0.0; 3]; w * h], labels: vec![label; w * h] }
    }

    fn inside(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb, label: u8, mask: &mut Option<&mut Vec<bool>>) {
        if !self.inside(x, y) {
            return;
        }
        let i = y as usize * self.w + x as usize;
        self.rgb[i] = c;
        self.labels[i] = label;
        if let Some(m) = mask {
            m[i] = true;
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, label: u8, mut mask: Option<&mut Vec<bool>>, mut color: impl FnMut(i64, i64) -> Rgb) {
        for y in y0.max(0)..y1.min(self.h as i64) {
            for x in x0.max(0)..x1.min(self.w as i64) {
                let c = color(x, y);
                self.put(x, y, c, label, &mut mask);
            }
        }
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, label: u8, mut mask: Option<&mut Vec<bool>>, mut color: impl FnMut(i64, i64) -> Rgb) {
        let (x0, x1) = ((cx - rx).floor() as i64, (cx + rx).ceil() as i64);
        let (y0, y1) = ((cy - ry).floor() as i64, (cy + ry).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 + 0.5 - cx) / rx.max(0.5);
                let dy = (y as f64 + 0.5 - cy) / ry.max(0.5);
                if dx * dx + dy * dy <= 1.0 {
                    let c = color(x, y);
                    self.put(x, y, c, label, &mut mask);
                }
            }
        }
    }

    fn triangle(&mut self, cx: f64, cy: f64, r: f64, label: u8, mut mask: Option<&mut Vec<bool>>, mut color: impl FnMut(i64, i64) -> Rgb) {
        let (top, bottom) = (cy - r, cy + r);
        for y in top.floor() as i64..=bottom.ceil() as i64 {
            let t = (y as f64 + 0.5 - top) / (bottom - top);
            if !(0.0..=1.0).contains(&t) {
                continue;
            }
            let half = r * t;
            for x in (cx - half).floor() as i64..=(cx + half).ceil() as i64 {
                if (x as f64 + 0.5 - cx).abs() <= half {
                    let c = color(x, y);
                    self.put(x, y, c, label, &mut mask);
                }
            }
        }
    }

    fn into_sample(self, id: String, domain: Domain, keep_labels: bool, noise: f64, rng: &mut RngState) -> Sample {
        let plane = self.w * self.h;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, c) in self.rgb.iter().enumerate() {
            for ch in 0..3 {
                let v = c[ch] + noise * rng.normal();
                data[ch * plane + i] = v.round().clamp(0.0, 255.0) as f32;
            }
        }
        let image = Tensor::new(&[3, self.h, self.w], data).expect("canvas shape");
        Sample { id, image, labels: keep_labels.then_some(self.labels), domain }
    }
}

fn jitter(rng: &mut RngState, base: Rgb, amount: f64) -> Rgb {
    let d = rng.uniform_range(-amount, amount);
    [base[0] + d + rng.uniform_range(-amount, amount) * 0.5, base[1] + d, base[2] + d + rng.uniform_range(-amount, amount) * 0.5]
}

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn shade(c: Rgb, f: f64) -> Rgb {
    [c[0] * f, c[1] * f, c[2] * f]
}

const VEHICLE_COLORS: [Rgb; 7] = [
    [190.0, 30.0, 30.0],
    [30.0, 60.0, 170.0],
    [225.0, 225.0, 225.0],
    [35.0, 35.0, 40.0],
    [150.0, 155.0, 160.0],
    [220.0, 190.0, 40.0],
    [40.0, 120.0, 60.0],
];
const CLOTHING: [Rgb; 6] =
    [[200.0, 40.0, 40.0], [40.0, 40.0, 50.0], [60.0, 90.0, 180.0], [230.0, 200.0, 60.0], [120.0, 60.0, 130.0], [240.0, 240.0, 240.0]];

/// Geometry of the ground plane shared by a dense scene's elements.
struct Layout {
    horizon: f64,
    vanish_x: f64,
    road_spread: f64,
}

impl Layout {
    /// Depth factor in (0, 1] growing toward the bottom row.
    fn depth(&self, y: f64, h: f64) -> f64 {
        ((y - self.horizon) / (h - self.horizon)).clamp(0.05, 1.0)
    }

    fn road_center(&self, y: f64, w: f64, h: f64) -> f64 {
        self.vanish_x + (w / 2.0 - self.vanish_x) * self.depth(y, h)
    }

    fn road_half_width(&self, y: f64, w: f64, h: f64) -> f64 {
        self.depth(y, h) * w * self.road_spread + 0.5
    }
}

/// Draws one object of class `name` with its feet / wheels on row `base_y`
/// around column `cx`, with pixel height `size`. Returns its pixel mask.
fn draw_object(c: &mut Canvas, p: &SceneParams, name: &str, cx: f64, base_y: f64, size: f64, rng: &mut RngState) -> Vec<bool> {
    let mut mask = vec![false; c.w * c.h];
    let id = p.class_id(name).expect("object class in palette");
    match name {
        "car" => {
            let hgt = size.max(4.0);
            let wid = hgt * rng.uniform_range(1.5, 2.1);
            let body = VEHICLE_COLORS[rng.index(VEHICLE_COLORS.len())];
            let body = jitter(rng, body, 15.0);
            let glass = jitter(rng, [60.0, 75.0, 95.0], 10.0);
            let (x0, x1) = (cx - wid / 2.0, cx + wid / 2.0);
            let body_top = base_y - hgt * 0.6;
            c.rect(x0 as i64, body_top as i64, x1 as i64, base_y as i64, id, Some(&mut mask), |_, y| {
                shade(body, 1.0 - 0.25 * ((y as f64 - body_top) / hgt))
            });
            let cab = (wid * 0.28, wid * 0.22);
            c.rect((x0 + cab.0) as i64, (base_y - hgt) as i64, (x1 - cab.1) as i64, body_top as i64 + 1, id, Some(&mut mask), |x, _| {
                if (x as f64) < x0 + cab.0 + 1.0 || (x as f64) > x1 - cab.1 - 2.0 { body } else { glass }
            });
            let r = (hgt * 0.18).max(1.0);
            for wx in [x0 + wid * 0.22, x1 - wid * 0.22] {
                c.ellipse(wx, base_y - r * 0.6, r, r, id, Some(&mut mask), |_, _| [20.0, 20.0, 22.0]);
            }
        }
        "pedestrian" | "cyclist" => {
            let hgt = size.max(6.0);
            let wid = (hgt / 3.2).max(2.0);
            let shirt = CLOTHING[rng.index(CLOTHING.len())];
            let shirt = jitter(rng, shirt, 20.0);
            let pants = CLOTHING[rng.index(CLOTHING.len())];
            let pants = jitter(rng, pants, 20.0);
            let skin = jitter(rng, [200.0, 160.0, 130.0], 25.0);
            let top = base_y - hgt;
            if name == "cyclist" {
                let r = hgt * 0.22;
                for wx in [cx - hgt * 0.3, cx + hgt * 0.3] {
                    c.ellipse(wx, base_y - r, r, r, id, Some(&mut mask), |x, y| {
                        let d = ((x as f64 + 0.5 - wx).powi(2) + (y as f64 + 0.5 - (base_y - r)).powi(2)).sqrt();
                        if d > r * 0.6 { [25.0, 25.0, 25.0] } else { [110.0, 110.0, 115.0] }
                    });
                }
            }
            let legs_top = top + hgt * 0.55;
            c.rect((cx - wid / 2.0) as i64, legs_top as i64, (cx + wid / 2.0).ceil() as i64, base_y as i64, id, Some(&mut mask), |x, _| {
                if (x as f64 - cx).abs() < 0.5 && wid > 3.0 { shade(pants, 0.7) } else { pants }
            });
            c.rect((cx - wid / 2.0) as i64, (top + hgt * 0.18) as i64, (cx + wid / 2.0).ceil() as i64, legs_top as i64, id, Some(&mut mask), |_, _| shirt);
            let hr = (hgt * 0.1).max(1.0);
            c.ellipse(cx, top + hr, hr, hr, id, Some(&mut mask), |_, _| skin);
        }
        "sign" => {
            let r = (size * 0.22).max(2.0);
            let cy = base_y - size * rng.uniform_range(0.8, 1.3);
            if let Some(pole) = p.class_id("pole") {
                c.rect(cx as i64, cy as i64, cx as i64 + 1, base_y as i64, pole, None, |_, _| [90.0, 90.0, 95.0]);
            }
            match rng.index(3) {
                0 => {
                    let ring = jitter(rng, [200.0, 25.0, 30.0], 10.0);
                    c.ellipse(cx, cy, r, r, id, Some(&mut mask), |x, y| {
                        let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                        if d > r * 0.6 { ring } else { [235.0, 235.0, 235.0] }
                    });
                }
                1 => {
                    let edge = jitter(rng, [210.0, 30.0, 30.0], 10.0);
                    c.triangle(cx, cy, r * 1.1, id, Some(&mut mask), |_, y| {
                        if (y as f64) > cy + r * 0.6 { edge } else { [240.0, 210.0, 50.0] }
                    });
                }
                _ => {
                    let blue = jitter(rng, [30.0, 70.0, 190.0], 10.0);
                    c.rect((cx - r) as i64, (cy - r) as i64, (cx + r).ceil() as i64, (cy + r).ceil() as i64, id, Some(&mut mask), |x, y| {
                        if ((x as f64 + 0.5 - cx).abs() < r * 0.3) && ((y as f64 + 0.5 - cy).abs() < r * 0.7) {
                            [235.0, 235.0, 235.0]
                        } else {
                            blue
                        }
                    });
                }
            }
        }
        other => unreachable!("no renderer for {other}"),
    }
    mask
}

fn pick_objects(p: &SceneParams, weights: &[f64; 4], count: usize, rng: &mut RngState) -> Vec<&'static str> {
    let available: Vec<f64> =
        OBJECT_CLASSES.iter().zip(weights).map(|(n, &w)| if p.class_id(n).is_some() { w } else { 0.0 }).collect();
    if available.iter().sum::<f64>() <= 0.0 {
        return Vec::new();
    }
    (0..count).map(|_| OBJECT_CLASSES[rng.choose_weighted(&available)]).collect()
}

fn street_scene(p: &SceneParams, rng: &mut RngState, count: [usize; 2], weights: &[f64; 4], margins: bool) -> Canvas {
    let (w, h) = (p.width, p.height);
    let (wf, hf) = (w as f64, h as f64);
    let cls = |n: &str| p.class_id(n);
    let sky = cls("sky").expect("sky");
    let building = cls("building").expect("building");
    let road = cls("road").expect("road");
    let ground = cls("vegetation").or(cls("sidewalk")).unwrap_or(road);
    let mut c = Canvas::new(w, h, sky);
    let layout = Layout {
        horizon: hf * rng.uniform_range(0.35, 0.5),
        vanish_x: wf * rng.uniform_range(0.3, 0.7),
        road_spread: rng.uniform_range(0.4, 0.6),
    };
    let hz = layout.horizon;

    let sky_top = jitter(rng, [70.0, 120.0, 200.0], 15.0);
    let sky_low = jitter(rng, [175.0, 200.0, 235.0], 10.0);
    c.rect(0, 0, w as i64, hz.ceil() as i64, sky, None, |_, y| mix(sky_top, sky_low, y as f64 / hz));

    let grass = jitter(rng, [70.0, 125.0, 50.0], 15.0);
    let ground_color = if cls("vegetation").is_some() { grass } else { [150.0, 150.0, 150.0] };
    let g_noise = rng.next_seed();
    c.rect(0, hz as i64, w as i64, h as i64, ground, None, |x, y| {
        let t = ((x as u64 * 31 + y as u64 * 17) ^ g_noise) % 7;
        shade(ground_color, 0.9 + 0.03 * t as f64)
    });

    for _ in 0..rng.int_range(2, 5) {
        let bw = wf * rng.uniform_range(0.15, 0.4);
        let bx = rng.uniform_range(-bw / 2.0, wf - bw / 2.0);
        let top = rng.uniform_range(hf * 0.05, hz - 3.0);
        let wall = [[140.0, 130.0, 120.0], [110.0, 80.0, 65.0], [175.0, 165.0, 140.0]][rng.index(3)];
        let wall = jitter(rng, wall, 15.0);
        let window = shade(wall, 0.45);
        let pitch = rng.int_range(3, 5);
        c.rect(bx as i64, top as i64, (bx + bw) as i64, hz.ceil() as i64 + 1, building, None, |x, y| {
            if (x - bx as i64) % pitch >= 1 && (y - top as i64) % pitch >= 1 && (y - top as i64) % pitch < pitch - 1 {
                window
            } else {
                wall
            }
        });
    }

    if let Some(veg) = cls("vegetation") {
        for _ in 0..rng.int_range(1, 3) {
            let r = hf * rng.uniform_range(0.05, 0.12);
            let (tx, ty) = (rng.uniform_range(0.0, wf), hz - r * rng.uniform_range(0.2, 1.0));
            let leaf = jitter(rng, [50.0, 100.0, 40.0], 12.0);
            let seed = rng.next_seed();
            c.ellipse(tx, ty, r, r * 1.2, veg, None, |x, y| {
                let t = (((x * 13 + y * 7) as u64) ^ seed) % 5;
                shade(leaf, 0.8 + 0.08 * t as f64)
            });
        }
    }
    if let Some(fence) = cls("fence") {
        let (fx0, fx1) = (rng.uniform_range(0.0, wf * 0.5), rng.uniform_range(wf * 0.5, wf));
        let wood = jitter(rng, [120.0, 85.0, 50.0], 10.0);
        c.rect(fx0 as i64, (hz - 3.0) as i64, fx1 as i64, (hz + 1.0) as i64, fence, None, |x, _| {
            if x % 3 == 0 { shade(wood, 0.6) } else { wood }
        });
    }

    let asphalt = jitter(rng, [80.0, 80.0, 85.0], 10.0);
    let curb = jitter(rng, [165.0, 160.0, 150.0], 10.0);
    let sidewalk = cls("sidewalk");
    for y in hz.ceil() as usize..h {
        let yf = y as f64 + 0.5;
        let center = layout.road_center(yf, wf, hf);
        let half = layout.road_half_width(yf, wf, hf);
        let walk = half * 0.45 + 1.0;
        for x in 0..w {
            let d = (x as f64 + 0.5 - center).abs();
            let i = y * w + x;
            if d <= half {
                let dash = d < 0.6 + 0.02 * half && (y / 3) % 2 == 0;
                c.rgb[i] = if dash { [230.0, 230.0, 220.0] } else { asphalt };
                c.labels[i] = road;
            } else if let (Some(sw), true) = (sidewalk, d <= half + walk) {
                let tile = (x + y) % 4 == 0;
                c.rgb[i] = if tile { shade(curb, 0.85) } else { curb };
                c.labels[i] = sw;
            }
        }
    }

    if let Some(pole) = cls("pole") {
        for _ in 0..rng.int_range(1, 2) {
            let base = rng.uniform_range(hz + 2.0, hf - 1.0);
            let side = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            let half = layout.road_half_width(base, wf, hf);
            let x = layout.road_center(base, wf, hf) + side * (half + 1.0);
            let top = base - hf * 0.4 * layout.depth(base, hf);
            c.rect(x as i64, top as i64, x as i64 + 1, base as i64, pole, None, |_, _| [90.0, 90.0, 95.0]);
        }
    }

    let n = rng.int_range(count[0] as i64, count[1] as i64) as usize;
    let mut kinds = pick_objects(p, weights, n, rng);
    // far objects first so nearer ones occlude them
    let mut placed: Vec<(f64, &str)> = kinds.drain(..).map(|k| (rng.uniform_range(hz + 3.0, hf), k)).collect();
    placed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite rows"));
    let mut masks = Vec::new();
    for (base, kind) in placed {
        let depth = layout.depth(base, hf);
        let size = hf * rng.uniform_range(p.object_scale[0], p.object_scale[1]) * depth.sqrt();
        let center = layout.road_center(base, wf, hf);
        let half = layout.road_half_width(base, wf, hf);
        let side = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let cx = match kind {
            "car" => center + rng.uniform_range(-0.6, 0.6) * half,
            "cyclist" => center + side * half * rng.uniform_range(0.6, 0.95),
            _ => center + side * (half + rng.uniform_range(0.5, 0.5 * half + 3.0)),
        };
        let cx = cx.clamp(2.0, wf - 2.0);
        masks.push(draw_object(&mut c, p, kind, cx, base, size, rng));
    }
    if margins && !masks.is_empty() {
        let mut any = vec![false; w * h];
        for m in &masks {
            for (a, &b) in any.iter_mut().zip(m) {
                *a |= b;
            }
        }
        for m in &masks {
            for y in 0..h {
                for x in 0..w {
                    if !m[y * w + x] {
                        continue;
                    }
                    for (nx, ny) in super::neighbours(x, y, w, h) {
                        let j = ny * w + nx;
                        if !any[j] {
                            c.labels[j] = VOID;
                        }
                    }
                }
            }
        }
    }
    c
}

/// Fully labeled street scene with 0–3 objects, mostly cars, and one-pixel
/// void margins around objects.
pub fn gen_dense_scene(rng: &mut RngState, params: &SceneParams) -> Result<Sample> {
    params.validate()?;
    let id = format!("dense-{:016x}", rng.seed());
    let c = street_scene(params, rng, params.dense_objects, &params.dense_object_weights, true);
    Ok(c.into_sample(id, Domain::Dense, true, params.noise, rng))
}

/// Street scene with more and more varied objects, labels dropped.
pub fn gen_unlabeled_scene(rng: &mut RngState, params: &SceneParams) -> Result<Sample> {
    params.validate()?;
    let id = format!("unlabeled-{:016x}", rng.seed());
    let c = street_scene(params, rng, params.mixed_objects, &params.mixed_object_weights, true);
    Ok(c.into_sample(id, Domain::Unlabeled, false, params.noise, rng))
}

/// Labeled street scene with the unlabeled domain's object mix, for testing.
pub fn gen_test_scene(rng: &mut RngState, params: &SceneParams) -> Result<Sample> {
    params.validate()?;
    let id = format!("test-{:016x}", rng.seed());
    let c = street_scene(params, rng, params.mixed_objects, &params.mixed_object_weights, true);
    Ok(c.into_sample(id, Domain::Dense, true, params.noise, rng))
}

/// Objects of a single class on unlabeled clutter; everything but the
/// objects is void.
pub fn gen_sparse_scene(rng: &mut RngState, params: &SceneParams) -> Result<Sample> {
    params.validate()?;
    let id = format!("sparse-{:016x}", rng.seed());
    let (w, h) = (params.width, params.height);
    let (wf, hf) = (w as f64, h as f64);
    let mut c = Canvas::new(w, h, VOID);
    let base = jitter(rng, [120.0, 120.0, 120.0], 60.0);
    c.rect(0, 0, w as i64, h as i64, VOID, None, |_, y| shade(base, 0.8 + 0.4 * y as f64 / hf));
    for _ in 0..rng.int_range(6, 12) {
        let color = [rng.uniform_range(20.0, 235.0), rng.uniform_range(20.0, 235.0), rng.uniform_range(20.0, 235.0)];
        let (x, y) = (rng.uniform_range(-8.0, wf), rng.uniform_range(-8.0, hf));
        let (sw, sh) = (rng.uniform_range(4.0, wf * 0.5), rng.uniform_range(4.0, hf * 0.5));
        let pitch = rng.int_range(2, 6);
        let striped = rng.bernoulli(0.4);
        if rng.bernoulli(0.5) {
            c.rect(x as i64, y as i64, (x + sw) as i64, (y + sh) as i64, VOID, None, |xx, yy| {
                if striped && (xx + yy) % pitch == 0 { shade(color, 0.6) } else { color }
            });
        } else {
            c.ellipse(x + sw / 2.0, y + sh / 2.0, sw / 2.0, sh / 2.0, VOID, None, |_, _| color);
        }
    }
    let classes = pick_objects(params, &params.mixed_object_weights, 1, rng);
    let kind = classes[0];
    let n = rng.int_range(params.sparse_objects[0] as i64, params.sparse_objects[1] as i64);
    for _ in 0..n {
        let size = hf * rng.uniform_range(params.object_scale[0] * 0.6, params.object_scale[1]);
        let cx = rng.uniform_range(size * 0.5, wf - size * 0.5).clamp(2.0, wf - 2.0);
        // signs hang up to 1.3 sizes above their base; keep them in frame
        let lowest = if kind == "sign" { size * 1.6 } else { size * 0.6 };
        let base = rng.uniform_range(lowest.min(hf * 0.9), hf);
        draw_object(&mut c, params, kind, cx, base, size, rng);
    }
    if let Some(pole) = params.class_id("pole") {
        // sign posts are not annotated in the sparse domain
        for l in c.labels.iter_mut().filter(|l| **l == pole) {
            *l = VOID;
        }
    }
    Ok(c.into_sample(id, Domain::Sparse, true, params.noise, rng))
}
