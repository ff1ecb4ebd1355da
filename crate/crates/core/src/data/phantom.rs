//! Procedural phantoms: a cardiac-like three-structure layout and a
//! spiral-plus-islands layout.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    /// Background, crescent (1), ring (2), disk inside the ring (3).
    Cardiac,
    /// Background and one class shared by a spiral and small islands.
    Multicomponent,
}

impl PhantomKind {
    pub fn n_classes(self) -> usize {
        match self {
            PhantomKind::Cardiac => 4,
            PhantomKind::Multicomponent => 2,
        }
    }

    pub fn default_levels(self) -> Vec<f64> {
        match self {
            PhantomKind::Cardiac => vec![0.1, 0.6, 0.35, 0.9],
            PhantomKind::Multicomponent => vec![0.1, 0.8],
        }
    }
}

/// Lengths are fractions of the shorter image side unless noted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub center_jitter: f64,
    pub inner_radius: [f64; 2],
    pub ring_thickness: [f64; 2],
    /// Crescent disk radius relative to the ring's outer radius.
    pub crescent_scale: [f64; 2],
    /// Direction of the crescent from the ring centre, degrees.
    pub crescent_angle: [f64; 2],
    pub spiral_turns: [f64; 2],
    pub spiral_thickness: [f64; 2],
    pub islands: [usize; 2],
    pub island_radius: [f64; 2],
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            center_jitter: 0.05,
            inner_radius: [0.08, 0.12],
            ring_thickness: [0.04, 0.06],
            crescent_scale: [0.7, 1.0],
            crescent_angle: [150.0, 210.0],
            spiral_turns: [0.8, 1.2],
            spiral_thickness: [0.03, 0.05],
            islands: [2, 4],
            island_radius: [0.025, 0.045],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Degradation {
    pub noise_sigma: f64,
    /// Scales every class level's distance from the background level; in (0, 1].
    pub contrast: f64,
    /// Box blur half-width in pixels.
    pub blur_radius: usize,
    pub streaks: usize,
    pub streak_intensity: f64,
}

impl Default for Degradation {
    fn default() -> Self {
        Degradation { noise_sigma: 0.05, contrast: 1.0, blur_radius: 0, streaks: 0, streak_intensity: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// (H, W)
    pub image_size: [usize; 2],
    pub geometry: Geometry,
    pub degradation: Degradation,
    /// Per-class intensity before degradation; defaults depend on `kind`.
    pub levels: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            kind: PhantomKind::Cardiac,
            image_size: [64, 64],
            geometry: Geometry::default(),
            degradation: Degradation::default(),
            levels: None,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} range {r:?} must be ordered and non-negative")));
    }
    Ok(())
}

impl PhantomSpec {
    pub fn n_classes(&self) -> usize {
        self.kind.n_classes()
    }

    pub fn levels(&self) -> Vec<f64> {
        self.levels.clone().unwrap_or_else(|| self.kind.default_levels())
    }

    fn side(&self) -> f64 {
        self.image_size[0].min(self.image_size[1]) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::InvalidArgument(format!("image size {h}x{w} too small")));
        }
        let levels = self.levels();
        if levels.len() != self.n_classes() || levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{} intensity levels for {} classes",
                levels.len(),
                self.n_classes()
            )));
        }
        let d = &self.degradation;
        if !(d.contrast > 0.0 && d.contrast <= 1.0) {
            return Err(Error::InvalidArgument(format!("contrast {} outside (0, 1]", d.contrast)));
        }
        if !(d.noise_sigma >= 0.0 && d.streak_intensity >= 0.0) {
            return Err(Error::InvalidArgument("degradation parameters must be non-negative".into()));
        }
        let g = &self.geometry;
        if !(g.center_jitter >= 0.0) {
            return Err(Error::InvalidArgument("center jitter must be non-negative".into()));
        }
        let s = self.side();
        let half = s / 2.0 - 1.0;
        match self.kind {
            PhantomKind::Cardiac => {
                check_range("inner_radius", g.inner_radius)?;
                check_range("ring_thickness", g.ring_thickness)?;
                check_range("crescent_scale", g.crescent_scale)?;
                if g.crescent_angle[0] > g.crescent_angle[1] {
                    return Err(Error::InvalidArgument("crescent_angle range must be ordered".into()));
                }
                if g.inner_radius[0] * s < 1.0 || g.ring_thickness[0] * s < 1.0 {
                    return Err(Error::InvalidArgument(
                        "disk radius and ring thickness must span at least one pixel".into(),
                    ));
                }
                let outer = (g.inner_radius[1] + g.ring_thickness[1]) * s;
                let reach = g.center_jitter * s + outer * (1.0 + g.crescent_scale[1]);
                if reach > half {
                    return Err(Error::InvalidArgument(format!(
                        "cardiac geometry reaches {reach:.1} px from the centre, only {half:.1} available"
                    )));
                }
            }
            PhantomKind::Multicomponent => {
                check_range("spiral_turns", g.spiral_turns)?;
                check_range("spiral_thickness", g.spiral_thickness)?;
                check_range("island_radius", g.island_radius)?;
                if g.islands[0] > g.islands[1] || g.islands[0] < 1 {
                    return Err(Error::InvalidArgument("islands range must be ordered and at least 1".into()));
                }
                if g.spiral_thickness[0] * s < 1.0 || g.island_radius[0] * s < 1.0 {
                    return Err(Error::InvalidArgument("spiral and island sizes must span at least one pixel".into()));
                }
                let reach = g.center_jitter * s + spiral_outer_radius(s, g.spiral_turns[1], g.spiral_thickness[1] * s);
                if reach > 0.4 * s {
                    return Err(Error::InvalidArgument(format!(
                        "spiral reaches {reach:.1} px from the centre; islands need room outside it"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn spiral_start_radius(s: f64) -> f64 {
    0.05 * s
}

fn spiral_outer_radius(s: f64, turns: f64, thickness_px: f64) -> f64 {
    spiral_start_radius(s) + turns * (2.0 * thickness_px + 3.0) + thickness_px
}

/// Seed of sample `index`, independent of how many samples are drawn.
pub fn sample_seed(spec_seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(spec_seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn generate(spec: &PhantomSpec, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    spec.validate()?;
    let hash = spec.hash();
    (0..n as u64)
        .map(|i| {
            let seed = sample_seed(spec.seed, i);
            generate_one(spec, seed).map(|(image, label)| Sample {
                image,
                label,
                height: spec.image_size[0],
                width: spec.image_size[1],
                seed,
                spec_hash: hash.clone(),
            })
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn generate_one(spec: &PhantomSpec, seed: u64) -> Result<(Tensor4, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = spec.image_size;
    let label = match spec.kind {
        PhantomKind::Cardiac => cardiac_labels(spec, &mut rng),
        PhantomKind::Multicomponent => multicomponent_labels(spec, &mut rng)?,
    };
    let image = render(spec, &label, &mut rng);
    Ok((Tensor4::from_vec([1, 1, h, w], image)?, label))
}

fn jittered_center(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let [h, w] = spec.image_size;
    let j = spec.geometry.center_jitter * spec.side();
    let mut off = || if j > 0.0 { rng.gen_range(-j..j) } else { 0.0 };
    ((h as f64 - 1.0) / 2.0 + off(), (w as f64 - 1.0) / 2.0 + off())
}

fn cardiac_labels(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let g = &spec.geometry;
    let s = spec.side();
    let [h, w] = spec.image_size;
    let (cy, cx) = jittered_center(spec, rng);
    let r_in = uniform(rng, g.inner_radius) * s;
    let r_out = r_in + uniform(rng, g.ring_thickness) * s;
    let r_cres = uniform(rng, g.crescent_scale) * r_out;
    let angle = uniform(rng, g.crescent_angle).to_radians();
    let (ry, rx) = (cy - r_out * angle.sin(), cx + r_out * angle.cos());
    let mut label = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let dc = ((y as f64 - ry).powi(2) + (x as f64 - rx).powi(2)).sqrt();
            label[y * w + x] = if d <= r_in {
                3
            } else if d <= r_out {
                2
            } else if dc <= r_cres {
                1
            } else {
                0
            };
        }
    }
    keep_largest_component(&mut label, h, w, 1);
    label
}

/// Clears all but the largest 4-connected region of `class`; thin crescent
/// tips can otherwise break off as single pixels.
fn keep_largest_component(label: &mut [u8], h: usize, w: usize, class: u8) {
    let mut comp = vec![usize::MAX; label.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..label.len() {
        if label[start] != class || comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        comp[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut nbrs = Vec::with_capacity(4);
            if y > 0 {
                nbrs.push(i - w);
            }
            if y + 1 < h {
                nbrs.push(i + w);
            }
            if x > 0 {
                nbrs.push(i - 1);
            }
            if x + 1 < w {
                nbrs.push(i + 1);
            }
            for j in nbrs {
                if label[j] == class && comp[j] == usize::MAX {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    let Some(best) = (0..sizes.len()).max_by_key(|&k| (sizes[k], usize::MAX - k)) else {
        return;
    };
    for (l, &c) in label.iter_mut().zip(&comp) {
        if *l == class && c != best {
            *l = 0;
        }
    }
}

fn multicomponent_labels(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    let g = &spec.geometry;
    let s = spec.side();
    let [h, w] = spec.image_size;
    let (cy, cx) = jittered_center(spec, rng);
    let turns = uniform(rng, g.spiral_turns);
    let thick = uniform(rng, g.spiral_thickness) * s;
    let r0 = spiral_start_radius(s);
    let pitch = 2.0 * thick + 3.0;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let theta_max = 2.0 * PI * turns;
    let r1 = r0 + turns * pitch;
    let steps = ((theta_max * r1) / 0.25).ceil().max(8.0) as usize;
    let path: Vec<(f64, f64)> = (0..=steps)
        .map(|i| {
            let t = theta_max * i as f64 / steps as f64;
            let r = r0 + pitch * t / (2.0 * PI);
            (cy + r * (t + phase).sin(), cx + r * (t + phase).cos())
        })
        .collect();
    let mut label = vec![0u8; h * w];
    let reach = r1 + thick + 1.0;
    let y_lo = (cy - reach).floor().max(0.0) as usize;
    let y_hi = ((cy + reach).ceil() as usize).min(h - 1);
    let x_lo = (cx - reach).floor().max(0.0) as usize;
    let x_hi = ((cx + reach).ceil() as usize).min(w - 1);
    let t2 = thick * thick;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let inside = path.iter().any(|&(py, px)| (y as f64 - py).powi(2) + (x as f64 - px).powi(2) <= t2);
            if inside {
                label[y * w + x] = 1;
            }
        }
    }

    let count = rng.gen_range(g.islands[0]..=g.islands[1]);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InvalidArgument(format!("could not place {count} separated islands")));
        }
        let r = uniform(rng, g.island_radius) * s;
        let m = r + 1.0;
        if (h as f64) <= 2.0 * m || (w as f64) <= 2.0 * m {
            return Err(Error::InvalidArgument("islands do not fit in the image".into()));
        }
        let iy = rng.gen_range(m..h as f64 - 1.0 - m);
        let ix = rng.gen_range(m..w as f64 - 1.0 - m);
        let gap = r + 2.0;
        let clear = (0..h).all(|y| {
            (0..w).all(|x| {
                label[y * w + x] == 0 || (y as f64 - iy).powi(2) + (x as f64 - ix).powi(2) > gap * gap
            })
        });
        if !clear {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                if (y as f64 - iy).powi(2) + (x as f64 - ix).powi(2) <= r * r {
                    label[y * w + x] = 1;
                }
            }
        }
        placed += 1;
    }
    Ok(label)
}

fn render(spec: &PhantomSpec, label: &[u8], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [h, w] = spec.image_size;
    let d = &spec.degradation;
    let levels = spec.levels();
    let bg = levels[0];
    let mut img: Vec<f64> = label.iter().map(|&l| bg + d.contrast * (levels[l as usize] - bg)).collect();
    if d.blur_radius > 0 {
        img = box_blur(&img, h, w, d.blur_radius);
    }
    let fg: Vec<usize> = (0..label.len()).filter(|&i| label[i] != 0).collect();
    for _ in 0..d.streaks {
        if fg.is_empty() {
            break;
        }
        let p = fg[rng.gen_range(0..fg.len())];
        let (py, px) = ((p / w) as f64, (p % w) as f64);
        let phi = rng.gen_range(0.0..PI);
        let half = rng.gen_range(0.2..0.4) * spec.side();
        let steps = (4.0 * half).ceil() as i64;
        let mut last = usize::MAX;
        for k in -steps..=steps {
            let t = k as f64 * 0.5;
            let y = (py + t * phi.sin()).round();
            let x = (px + t * phi.cos()).round();
            if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                continue;
            }
            let i = y as usize * w + x as usize;
            if i != last {
                img[i] += d.streak_intensity;
                last = i;
            }
        }
    }
    if d.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, d.noise_sigma).expect("sigma validated");
        for v in &mut img {
            *v += normal.sample(rng);
        }
    }
    img
}

/// Separable mean filter with edge clamping.
fn box_blur(img: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for k in -(r as isize)..=(r as isize) {
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + k).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + k).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc / (2 * r + 1) as f64;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}
