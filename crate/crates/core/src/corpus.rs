//! Deterministic synthetic try-on corpus.
//!
//! Every sample is a pure function of `(base_seed, index)`: a procedurally
//! drawn person with a pose, a garment with controllable high-frequency
//! content, the garment warped onto the body by an exactly-interpolating
//! thin-plate spline, the warp support mask, the garment-agnostic person
//! image and the composited ground truth.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::rng::Rng;
use crate::tps::TpsMap;

const KEY_GARMENT: u64 = 0x6761726d;
const KEY_PERSON: u64 = 0x706f7365;
const KEY_UNPAIR: u64 = 0x756e7072;

/// Mid-gray fill for the agnostic region.
pub const AGNOSTIC_FILL: f64 = 0.5;

/// Default dilation radius (px) of the warp support inside the agnostic region.
pub const AGNOSTIC_DILATION: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarmentKind {
    Solid,
    Stripes,
    Checker,
    Glyph,
}

impl GarmentKind {
    pub const ALL: [GarmentKind; 4] = [
        GarmentKind::Solid,
        GarmentKind::Stripes,
        GarmentKind::Checker,
        GarmentKind::Glyph,
    ];

    fn id(self) -> u64 {
        match self {
            GarmentKind::Solid => 0,
            GarmentKind::Stripes => 1,
            GarmentKind::Checker => 2,
            GarmentKind::Glyph => 3,
        }
    }
}

/// Body silhouette and warp targets for one person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    /// Torso quad corners in canvas (x, y): top-left, top-right,
    /// bottom-right, bottom-left.
    pub torso: [[f64; 2]; 4],
    /// Arm segments (shoulder -> hand), two arms.
    pub arms: [[[f64; 2]; 2]; 2],
    /// Leg segments (hip -> foot), two legs.
    pub legs: [[[f64; 2]; 2]; 2],
    /// Control points on the garment (x, y in garment coords).
    pub src_points: Vec<[f64; 2]>,
    /// Matching targets on the canvas.
    pub dst_points: Vec<[f64; 2]>,
    pub garment_h: usize,
    pub garment_w: usize,
    pub seed: u64,
}

impl PoseSpec {
    pub fn validate(&self, canvas_h: usize, canvas_w: usize) -> Result<()> {
        if self.src_points.len() != self.dst_points.len() {
            return Err(Error::param("control point counts differ"));
        }
        if self.src_points.len() < 4 {
            return Err(Error::param("need at least 4 control pairs"));
        }
        for p in &self.dst_points {
            if !(p[0] > 0.0 && p[0] < (canvas_w - 1) as f64 && p[1] > 0.0 && p[1] < (canvas_h - 1) as f64)
            {
                return Err(Error::param(format!(
                    "target control point {p:?} outside canvas"
                )));
            }
        }
        for i in 0..self.dst_points.len() {
            for j in i + 1..self.dst_points.len() {
                let same = |a: &[f64; 2], b: &[f64; 2]| a[0] == b[0] && a[1] == b[1];
                if same(&self.src_points[i], &self.src_points[j])
                    || same(&self.dst_points[i], &self.dst_points[j])
                {
                    return Err(Error::param("duplicate control points"));
                }
            }
        }
        Ok(())
    }

    fn src_tuples(&self) -> Vec<(f64, f64)> {
        self.src_points.iter().map(|p| (p[0], p[1])).collect()
    }

    fn dst_tuples(&self) -> Vec<(f64, f64)> {
        self.dst_points.iter().map(|p| (p[0], p[1])).collect()
    }

    /// Forward warp mapping garment coords onto the canvas.
    pub fn forward_map(&self) -> Result<TpsMap> {
        TpsMap::fit(&self.src_tuples(), &self.dst_tuples())
    }

    /// Backward map used for resampling: canvas coords to garment coords.
    pub fn backward_map(&self) -> Result<TpsMap> {
        TpsMap::fit(&self.dst_tuples(), &self.src_tuples())
    }
}

/// One corpus record.
#[derive(Clone, Debug)]
pub struct TryOnSample {
    pub person: Image,
    pub garment: Image,
    pub warped: Image,
    pub warp_mask: BinaryMask,
    pub agnostic: Image,
    pub truth: Image,
    pub pose: PoseSpec,
    pub kind: GarmentKind,
    pub sample_id: u64,
}

impl TryOnSample {
    /// Check the construction invariants; exact comparisons by design.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.person.height, self.person.width);
        self.person.same_dims(&self.warped)?;
        self.person.same_dims(&self.agnostic)?;
        self.person.same_dims(&self.truth)?;
        if self.warp_mask.height != h || self.warp_mask.width != w {
            return Err(Error::dim("mask dims differ from person canvas"));
        }
        if !self.warp_mask.is_binary() {
            return Err(Error::param("warp mask not binary"));
        }
        let region = agnostic_region(&self.pose, h, w, AGNOSTIC_DILATION)?;
        for y in 0..h {
            for x in 0..w {
                if self.warp_mask.get(y, x) {
                    for c in 0..3 {
                        if self.truth.get(y, x, c) != self.warped.get(y, x, c) {
                            return Err(Error::param(format!(
                                "truth != warped inside mask at ({y},{x},{c})"
                            )));
                        }
                    }
                    if !region.get(y, x) {
                        return Err(Error::param(format!(
                            "warp support escapes agnostic region at ({y},{x})"
                        )));
                    }
                }
                if !region.get(y, x) {
                    for c in 0..3 {
                        if self.agnostic.get(y, x, c) != self.person.get(y, x, c) {
                            return Err(Error::param(format!(
                                "agnostic != person outside region at ({y},{x},{c})"
                            )));
                        }
                    }
                } else {
                    for c in 0..3 {
                        // Exact in memory; PNG-loaded samples sit on the u8
                        // grid, so accept the quantised fill too.
                        let v = self.agnostic.get(y, x, c);
                        if v != AGNOSTIC_FILL && (v - AGNOSTIC_FILL).abs() > 0.5 / 255.0 {
                            return Err(Error::param("agnostic fill wrong inside region"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Drawing helpers
// ---------------------------------------------------------------------------

fn fill_convex_quad(img: &mut Image, quad: &[[f64; 2]; 4], color: [f64; 3]) {
    let xs: Vec<f64> = quad.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = quad.iter().map(|p| p[1]).collect();
    let x0 = xs.iter().cloned().fold(f64::MAX, f64::min).floor().max(0.0) as usize;
    let x1 = (xs.iter().cloned().fold(f64::MIN, f64::max).ceil() as usize).min(img.width - 1);
    let y0 = ys.iter().cloned().fold(f64::MAX, f64::min).floor().max(0.0) as usize;
    let y1 = (ys.iter().cloned().fold(f64::MIN, f64::max).ceil() as usize).min(img.height - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if point_in_convex_quad(x as f64, y as f64, quad) {
                img.set_px(y, x, color);
            }
        }
    }
}

fn point_in_convex_quad(px: f64, py: f64, quad: &[[f64; 2]; 4]) -> bool {
    let mut sign = 0i8;
    for i in 0..4 {
        let a = quad[i];
        let b = quad[(i + 1) % 4];
        let cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
        if cross.abs() < 1e-12 {
            continue;
        }
        let s = if cross > 0.0 { 1 } else { -1 };
        if sign == 0 {
            sign = s;
        } else if sign != s {
            return false;
        }
    }
    true
}

fn fill_circle(img: &mut Image, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = (((cx + r).ceil()) as usize).min(img.width - 1);
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = (((cy + r).ceil()) as usize).min(img.height - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= r * r {
                img.set_px(y, x, color);
            }
        }
    }
}

fn draw_segment(img: &mut Image, a: [f64; 2], b: [f64; 2], thickness: f64, color: [f64; 3]) {
    let half = thickness / 2.0;
    let x0 = ((a[0].min(b[0]) - half).floor().max(0.0)) as usize;
    let x1 = (((a[0].max(b[0]) + half).ceil()) as usize).min(img.width - 1);
    let y0 = ((a[1].min(b[1]) - half).floor().max(0.0)) as usize;
    let y1 = (((a[1].max(b[1]) + half).ceil()) as usize).min(img.height - 1);
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - a[0], y as f64 - a[1]);
            let t = if len2 > 0.0 {
                ((px * vx + py * vy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dx = px - t * vx;
            let dy = py - t * vy;
            if dx * dx + dy * dy <= half * half {
                img.set_px(y, x, color);
            }
        }
    }
}

fn contrast_color(rng: &mut Rng, base: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (o, &b) in out.iter_mut().zip(&base) {
        let shift = 0.35 + 0.15 * rng.uniform();
        *o = if b > 0.5 { (b - shift).max(0.02) } else { (b + shift).min(0.98) };
    }
    out
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Deterministic garment image for (seed, kind, size).
pub fn gen_garment(seed: u64, kind: GarmentKind, h: usize, w: usize) -> Result<Image> {
    if h < 8 || w < 8 {
        return Err(Error::dim(format!("garment size {h}x{w} too small")));
    }
    let mut rng = Rng::derive(seed, KEY_GARMENT ^ kind.id());
    let base = [
        0.15 + 0.7 * rng.uniform(),
        0.15 + 0.7 * rng.uniform(),
        0.15 + 0.7 * rng.uniform(),
    ];
    let accent = contrast_color(&mut rng, base);
    let mut img = Image::from_fn(h, w, |_, _| base);
    match kind {
        GarmentKind::Solid => {}
        GarmentKind::Stripes => {
            let period = [4usize, 6, 8][rng.below(3) as usize];
            let horizontal = rng.bernoulli(0.5);
            let half = period / 2;
            for y in 0..h {
                for x in 0..w {
                    let band = if horizontal { y / half } else { x / half };
                    if band % 2 == 1 {
                        img.set_px(y, x, accent);
                    }
                }
            }
        }
        GarmentKind::Checker => {
            let period = [4usize, 8][rng.below(2) as usize];
            let half = period / 2;
            for y in 0..h {
                for x in 0..w {
                    if (x / half + y / half) % 2 == 1 {
                        img.set_px(y, x, accent);
                    }
                }
            }
        }
        GarmentKind::Glyph => {
            // Pseudo-letter strokes, 1-2 px thin: the high-frequency analogue
            // of printed garment text.
            let cols = 4usize;
            let rows = 5usize;
            let cell_w = w as f64 / cols as f64;
            let cell_h = h as f64 / rows as f64;
            for gy in 0..rows {
                for gx in 0..cols {
                    if rng.bernoulli(0.25) {
                        continue;
                    }
                    let ox = gx as f64 * cell_w + 1.5;
                    let oy = gy as f64 * cell_h + 1.5;
                    let iw = cell_w - 3.0;
                    let ih = cell_h - 3.0;
                    let strokes = 2 + rng.below(3) as usize;
                    for _ in 0..strokes {
                        let a = [ox + iw * rng.uniform(), oy + ih * rng.uniform()];
                        let b = if rng.bernoulli(0.5) {
                            [a[0], oy + ih * rng.uniform()]
                        } else {
                            [ox + iw * rng.uniform(), a[1]]
                        };
                        let t = if rng.bernoulli(0.7) { 1.0 } else { 2.0 };
                        draw_segment(&mut img, a, b, t, accent);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Deterministic person render plus the pose that places a garment on it.
pub fn gen_person(seed: u64, canvas_h: usize, canvas_w: usize) -> Result<(Image, PoseSpec)> {
    if canvas_h < 32 || canvas_w < 24 {
        return Err(Error::dim(format!("canvas {canvas_h}x{canvas_w} too small")));
    }
    let mut rng = Rng::derive(seed, KEY_PERSON);
    let hf = canvas_h as f64;
    let wf = canvas_w as f64;

    // Background: soft vertical gradient.
    let top = [
        0.55 + 0.3 * rng.uniform(),
        0.55 + 0.3 * rng.uniform(),
        0.6 + 0.3 * rng.uniform(),
    ];
    let bot = [top[0] * 0.6, top[1] * 0.6, top[2] * 0.65];
    let mut img = Image::from_fn(canvas_h, canvas_w, |y, _| {
        let t = y as f64 / hf;
        [
            top[0] * (1.0 - t) + bot[0] * t,
            top[1] * (1.0 - t) + bot[1] * t,
            top[2] * (1.0 - t) + bot[2] * t,
        ]
    });

    let skin = [
        0.55 + 0.3 * rng.uniform(),
        0.4 + 0.25 * rng.uniform(),
        0.3 + 0.2 * rng.uniform(),
    ];
    let pants = [
        0.1 + 0.25 * rng.uniform(),
        0.1 + 0.25 * rng.uniform(),
        0.15 + 0.3 * rng.uniform(),
    ];

    let cx = wf * (0.5 + 0.04 * (rng.uniform() - 0.5));
    let shoulder_y = hf * (0.26 + 0.04 * rng.uniform());
    let hip_y = hf * (0.60 + 0.05 * rng.uniform());
    let shoulder_half = wf * (0.27 + 0.05 * rng.uniform());
    let hip_half = wf * (0.19 + 0.05 * rng.uniform());
    let skew = wf * 0.05 * (rng.uniform() - 0.5);

    let torso = [
        [cx - shoulder_half + skew, shoulder_y],
        [cx + shoulder_half + skew, shoulder_y],
        [cx + hip_half, hip_y],
        [cx - hip_half, hip_y],
    ];

    // Limbs and head first; the torso fill goes on top.
    let arm_drop = hf * (0.2 + 0.08 * rng.uniform());
    let arm_spread = wf * (0.08 + 0.06 * rng.uniform());
    let arms = [
        [
            [torso[0][0], shoulder_y + 1.0],
            [torso[0][0] - arm_spread, shoulder_y + arm_drop],
        ],
        [
            [torso[1][0], shoulder_y + 1.0],
            [torso[1][0] + arm_spread, shoulder_y + arm_drop],
        ],
    ];
    let foot_y = hf * 0.95;
    let legs = [
        [[cx - hip_half * 0.55, hip_y], [cx - hip_half * 0.7, foot_y]],
        [[cx + hip_half * 0.55, hip_y], [cx + hip_half * 0.7, foot_y]],
    ];
    for arm in &arms {
        draw_segment(&mut img, arm[0], arm[1], 3.0, skin);
    }
    for leg in &legs {
        draw_segment(&mut img, leg[0], leg[1], 4.0, pants);
    }
    let head_r = hf * 0.085;
    fill_circle(&mut img, cx + skew, shoulder_y - head_r - 2.0, head_r, skin);
    draw_segment(
        &mut img,
        [cx + skew, shoulder_y - 3.0],
        [cx + skew, shoulder_y + 1.0],
        4.0,
        skin,
    );
    fill_convex_quad(&mut img, &torso, skin);

    // Control grid: 3x3 over the garment, mapped into the torso quad with a
    // little jitter. Targets stay strictly inside the canvas.
    let (gh, gw) = (48usize, 40usize);
    let margin = 2.0;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for vi in 0..3 {
        for ui in 0..3 {
            let u = ui as f64 / 2.0;
            let v = vi as f64 / 2.0;
            src.push([
                margin + u * (gw as f64 - 1.0 - 2.0 * margin),
                margin + v * (gh as f64 - 1.0 - 2.0 * margin),
            ]);
            let top_edge = [
                torso[0][0] * (1.0 - u) + torso[1][0] * u,
                torso[0][1] * (1.0 - u) + torso[1][1] * u,
            ];
            let bot_edge = [
                torso[3][0] * (1.0 - u) + torso[2][0] * u,
                torso[3][1] * (1.0 - u) + torso[2][1] * u,
            ];
            let jx = 1.2 * (rng.uniform() - 0.5);
            let jy = 1.2 * (rng.uniform() - 0.5);
            dst.push([
                (top_edge[0] * (1.0 - v) + bot_edge[0] * v + jx).clamp(1.5, wf - 2.5),
                (top_edge[1] * (1.0 - v) + bot_edge[1] * v + jy).clamp(1.5, hf - 2.5),
            ]);
        }
    }

    let pose = PoseSpec {
        torso,
        arms,
        legs,
        src_points: src,
        dst_points: dst,
        garment_h: gh,
        garment_w: gw,
        seed,
    };
    pose.validate(canvas_h, canvas_w)?;
    Ok((img, pose))
}

/// Inclusion tolerance when testing whether a backward-mapped point lies in
/// the garment rectangle; absorbs solver round-off at exact borders.
const SUPPORT_EPS: f64 = 1e-9;

/// Warp the garment onto the canvas with the pose's spline; returns the
/// warped image and its support mask.
pub fn warp_garment(
    garment: &Image,
    pose: &PoseSpec,
    canvas_h: usize,
    canvas_w: usize,
) -> Result<(Image, BinaryMask)> {
    if garment.height != pose.garment_h || garment.width != pose.garment_w {
        return Err(Error::dim(format!(
            "garment {}x{} does not match pose garment dims {}x{}",
            garment.height, garment.width, pose.garment_h, pose.garment_w
        )));
    }
    let back = pose.backward_map()?;
    let mut out = Image::new(canvas_h, canvas_w)?;
    let mut mask = BinaryMask::new(canvas_h, canvas_w);
    let max_x = (garment.width - 1) as f64;
    let max_y = (garment.height - 1) as f64;
    for y in 0..canvas_h {
        for x in 0..canvas_w {
            let (sx, sy) = back.apply((x as f64, y as f64));
            if sx < -SUPPORT_EPS || sx > max_x + SUPPORT_EPS || sy < -SUPPORT_EPS || sy > max_y + SUPPORT_EPS
            {
                continue;
            }
            let sx = sx.clamp(0.0, max_x);
            let sy = sy.clamp(0.0, max_y);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(garment.width - 1);
            let y1 = (y0 + 1).min(garment.height - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let mut px = [0.0; 3];
            for (c, pc) in px.iter_mut().enumerate() {
                let v00 = garment.get(y0, x0, c);
                let v01 = garment.get(y0, x1, c);
                let v10 = garment.get(y1, x0, c);
                let v11 = garment.get(y1, x1, c);
                *pc = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
            out.set_px(y, x, px);
            mask.set(y, x, true);
        }
    }
    Ok((out, mask))
}

/// Warp support derived from the pose alone (no garment pixels needed).
pub fn warp_support(pose: &PoseSpec, canvas_h: usize, canvas_w: usize) -> Result<BinaryMask> {
    let back = pose.backward_map()?;
    let mut mask = BinaryMask::new(canvas_h, canvas_w);
    let max_x = (pose.garment_w - 1) as f64;
    let max_y = (pose.garment_h - 1) as f64;
    for y in 0..canvas_h {
        for x in 0..canvas_w {
            let (sx, sy) = back.apply((x as f64, y as f64));
            let inside = sx >= -SUPPORT_EPS
                && sx <= max_x + SUPPORT_EPS
                && sy >= -SUPPORT_EPS
                && sy <= max_y + SUPPORT_EPS;
            mask.set(y, x, inside);
        }
    }
    Ok(mask)
}

/// Agnostic region: warp support dilated by `r`, unioned with the torso quad.
pub fn agnostic_region(
    pose: &PoseSpec,
    canvas_h: usize,
    canvas_w: usize,
    r: usize,
) -> Result<BinaryMask> {
    let support = warp_support(pose, canvas_h, canvas_w)?;
    let mut region = support.dilate(r);
    for y in 0..canvas_h {
        for x in 0..canvas_w {
            if point_in_convex_quad(x as f64, y as f64, &pose.torso) {
                region.set(y, x, true);
            }
        }
    }
    Ok(region)
}

/// Person image with the garment placement region replaced by mid-gray.
pub fn make_agnostic(person: &Image, pose: &PoseSpec) -> Result<Image> {
    let region = agnostic_region(pose, person.height, person.width, AGNOSTIC_DILATION)?;
    let mut out = person.clone();
    for y in 0..person.height {
        for x in 0..person.width {
            if region.get(y, x) {
                out.set_px(y, x, [AGNOSTIC_FILL; 3]);
            }
        }
    }
    Ok(out)
}

/// truth = warped ⊙ mask + person ⊙ (1 - mask), computed by exact selection.
pub fn compose_truth(person: &Image, warped: &Image, mask: &BinaryMask) -> Result<Image> {
    person.same_dims(warped)?;
    if mask.height != person.height || mask.width != person.width {
        return Err(Error::dim("mask dims differ from images"));
    }
    let mut out = person.clone();
    for y in 0..person.height {
        for x in 0..person.width {
            if mask.get(y, x) {
                out.set_px(y, x, warped.px(y, x));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Corpus configuration, build and on-disk layout
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub path: String,
    pub train_count: usize,
    pub test_count: usize,
    pub base_seed: u64,
    pub person_h: usize,
    pub person_w: usize,
    pub garment_h: usize,
    pub garment_w: usize,
    pub kinds: Vec<GarmentKind>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            path: "corpus".to_string(),
            train_count: 2000,
            test_count: 128,
            base_seed: 1,
            person_h: 64,
            person_w: 48,
            garment_h: 48,
            garment_w: 40,
            kinds: GarmentKind::ALL.to_vec(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config("train and test counts must be positive".into()));
        }
        if self.person_h % 2 != 0 || self.person_w % 2 != 0 {
            return Err(Error::Config("person dims must be even for the codec".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("at least one garment kind required".into()));
        }
        Ok(())
    }

    fn kind_for(&self, index: u64) -> GarmentKind {
        self.kinds[(index as usize) % self.kinds.len()]
    }
}

pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_TEST: &str = "test";
const PLANES: [&str; 6] = ["person", "garment", "warped", "mask", "agnostic", "truth"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplePaths {
    pub person: String,
    pub garment: String,
    pub warped: String,
    pub mask: String,
    pub agnostic: String,
    pub truth: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: u64,
    pub split: String,
    pub kind: GarmentKind,
    pub paths: SamplePaths,
    pub pose: PoseSpec,
    /// Sample id whose garment this sample wears in the unpaired protocol.
    pub unpaired_garment: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub version: u32,
    pub config: CorpusConfig,
    pub samples: Vec<SampleMeta>,
}

fn sample_paths(split: &str, id: u64) -> SamplePaths {
    let p = |plane: &str| format!("{split}/{plane}/{id:06}.png");
    SamplePaths {
        person: p("person"),
        garment: p("garment"),
        warped: p("warped"),
        mask: p("mask"),
        agnostic: p("agnostic"),
        truth: p("truth"),
    }
}

/// Generate one sample; pure in (config, index).
pub fn make_sample(cfg: &CorpusConfig, index: u64) -> Result<TryOnSample> {
    let seed = cfg.base_seed + index;
    let kind = cfg.kind_for(index);
    let garment = gen_garment(seed, kind, cfg.garment_h, cfg.garment_w)?;
    let (person, pose) = gen_person(seed, cfg.person_h, cfg.person_w)?;
    let (warped, warp_mask) = warp_garment(&garment, &pose, cfg.person_h, cfg.person_w)?;
    let agnostic = make_agnostic(&person, &pose)?;
    let truth = compose_truth(&person, &warped, &warp_mask)?;
    Ok(TryOnSample {
        person,
        garment,
        warped,
        warp_mask,
        agnostic,
        truth,
        pose,
        kind,
        sample_id: index,
    })
}

/// Build the corpus on disk; returns the tree digest.
pub fn build_corpus(cfg: &CorpusConfig, root: &Path) -> Result<String> {
    cfg.validate()?;
    for split in [SPLIT_TRAIN, SPLIT_TEST] {
        for plane in PLANES {
            std::fs::create_dir_all(root.join(split).join(plane))?;
        }
    }
    let total = cfg.train_count + cfg.test_count;
    let metas: Vec<SampleMeta> = (0..total as u64)
        .into_par_iter()
        .map(|id| -> Result<SampleMeta> {
            let split = if (id as usize) < cfg.train_count {
                SPLIT_TRAIN
            } else {
                SPLIT_TEST
            };
            let s = make_sample(cfg, id)?;
            let paths = sample_paths(split, id);
            s.person.save_png(&root.join(&paths.person))?;
            s.garment.save_png(&root.join(&paths.garment))?;
            s.warped.save_png(&root.join(&paths.warped))?;
            s.warp_mask.save_png(&root.join(&paths.mask))?;
            s.agnostic.save_png(&root.join(&paths.agnostic))?;
            s.truth.save_png(&root.join(&paths.truth))?;
            Ok(SampleMeta {
                id,
                split: split.to_string(),
                kind: s.kind,
                paths,
                pose: s.pose,
                unpaired_garment: 0,
            })
        })
        .collect::<Result<_>>()?;

    // Per-split derangements for the unpaired protocol.
    let mut metas = metas;
    let mut rng = Rng::derive(cfg.base_seed, KEY_UNPAIR);
    for split in [SPLIT_TRAIN, SPLIT_TEST] {
        let ids: Vec<usize> = metas
            .iter()
            .enumerate()
            .filter(|(_, m)| m.split == split)
            .map(|(i, _)| i)
            .collect();
        let perm = rng.derangement(ids.len());
        for (pos, &mi) in ids.iter().enumerate() {
            metas[mi].unpaired_garment = metas[ids[perm[pos]]].id;
        }
    }

    let index = CorpusIndex {
        version: 1,
        config: cfg.clone(),
        samples: metas,
    };
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Config(format!("index serialisation: {e}")))?;
    std::fs::write(root.join("index.json"), json)?;
    digest::digest_tree(root)
}

/// Handle to a corpus on disk.
pub struct CorpusSet {
    pub root: PathBuf,
    pub index: CorpusIndex,
}

impl CorpusSet {
    pub fn open(root: &Path) -> Result<CorpusSet> {
        let index_path = root.join("index.json");
        if !index_path.exists() {
            return Err(Error::Missing(format!("corpus index {index_path:?}")));
        }
        let text = std::fs::read_to_string(&index_path)?;
        let index: CorpusIndex = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: index_path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(CorpusSet {
            root: root.to_path_buf(),
            index,
        })
    }

    pub fn split(&self, split: &str) -> Vec<&SampleMeta> {
        self.index.samples.iter().filter(|m| m.split == split).collect()
    }

    pub fn meta(&self, id: u64) -> Result<&SampleMeta> {
        self.index
            .samples
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::Missing(format!("sample {id} in corpus index")))
    }

    pub fn load(&self, id: u64) -> Result<TryOnSample> {
        let m = self.meta(id)?;
        Ok(TryOnSample {
            person: Image::load_png(&self.root.join(&m.paths.person))?,
            garment: Image::load_png(&self.root.join(&m.paths.garment))?,
            warped: Image::load_png(&self.root.join(&m.paths.warped))?,
            warp_mask: BinaryMask::load_png(&self.root.join(&m.paths.mask))?,
            agnostic: Image::load_png(&self.root.join(&m.paths.agnostic))?,
            truth: Image::load_png(&self.root.join(&m.paths.truth))?,
            pose: m.pose.clone(),
            kind: m.kind,
            sample_id: id,
        })
    }

    pub fn digest(&self) -> Result<String> {
        digest::digest_tree(&self.root)
    }
}
