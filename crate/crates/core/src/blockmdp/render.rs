//! Per-domain emission: backgrounds plus the domain-independent agent and goal markers.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blockmdp::domain::{DomainKind, DomainSpec};
use crate::error::{DarlError, Result};

pub const AGENT_COLOR: [f64; 3] = [1.0, 0.0, 0.0];
pub const GOAL_COLOR: [f64; 3] = [0.0, 1.0, 0.0];

/// Channel-major frame dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FrameGeom {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type Rgb = [f64; 3];

fn palette_color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)]
}

#[derive(Clone, Debug)]
struct Ball {
    x0: f64,
    y0: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    color: Rgb,
}

#[derive(Clone, Debug)]
enum Pattern {
    Static(Vec<u8>),
    Balls {
        base: Rgb,
        balls: Vec<Ball>,
    },
    Drift {
        cells: Vec<Rgb>,
        grid: usize,
        cell: f64,
        vx: f64,
        vy: f64,
    },
}

/// Precomputed emission state of one domain.
#[derive(Clone, Debug)]
pub struct Background {
    geom: FrameGeom,
    pattern: Pattern,
}

/// Position of a point moving at constant speed inside `[lo, hi]` with
/// elastic reflection at both ends.
pub fn reflect(start: f64, velocity: f64, t: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let u = (start - lo + velocity * t).rem_euclid(2.0 * span);
    lo + if u > span { 2.0 * span - u } else { u }
}

impl Background {
    pub fn new(spec: &DomainSpec, geom: FrameGeom) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.palette_seed);
        let (w, h) = (geom.width as f64, geom.height as f64);
        let pattern = match spec.kind {
            DomainKind::Stripes => {
                let colors: Vec<Rgb> = (0..3).map(|_| palette_color(&mut rng)).collect();
                let angle = rng.gen_range(0.0..PI);
                let band = rng.gen_range(2.0..6.0);
                let (c, s) = (angle.cos(), angle.sin());
                Pattern::Static(fill(geom, |x, y| {
                    let k = ((x * c + y * s) / band).floor().rem_euclid(3.0) as usize;
                    colors[k]
                }))
            }
            DomainKind::Checker => {
                let a = palette_color(&mut rng);
                let b = palette_color(&mut rng);
                let cell = rng.gen_range(3.0..8.0);
                let (ox, oy) = (rng.gen_range(0.0..cell), rng.gen_range(0.0..cell));
                Pattern::Static(fill(geom, |x, y| {
                    let k = ((x + ox) / cell).floor() as i64 + ((y + oy) / cell).floor() as i64;
                    if k.rem_euclid(2) == 0 {
                        a
                    } else {
                        b
                    }
                }))
            }
            DomainKind::Gradient => {
                let a = palette_color(&mut rng);
                let b = palette_color(&mut rng);
                let angle = rng.gen_range(0.0..2.0 * PI);
                let (c, s) = (angle.cos(), angle.sin());
                let extent = (w * c.abs() + h * s.abs()).max(1.0);
                let offset = [0.0, w * c, h * s, w * c + h * s].into_iter().fold(f64::INFINITY, f64::min);
                Pattern::Static(fill(geom, |x, y| {
                    let u = ((x * c + y * s - offset) / extent).clamp(0.0, 1.0);
                    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * u)
                }))
            }
            DomainKind::NoiseTile => {
                let swatch: Vec<Rgb> = (0..4).map(|_| palette_color(&mut rng)).collect();
                let cell = rng.gen_range(2.0..5.0);
                let gx = (w / cell).ceil() as usize + 1;
                let gy = (h / cell).ceil() as usize + 1;
                let cells: Vec<Rgb> = (0..gx * gy).map(|_| swatch[rng.gen_range(0..4)]).collect();
                Pattern::Static(fill(geom, |x, y| cells[(y / cell) as usize * gx + (x / cell) as usize]))
            }
            DomainKind::BouncingBalls => {
                let m = spec.motion.clone().unwrap_or(crate::blockmdp::domain::MotionParams {
                    speed: 1.0,
                    ball_radius: 3.0,
                    ball_count: 4,
                });
                let base = palette_color(&mut rng);
                let balls = (0..m.ball_count)
                    .map(|_| {
                        let r = m.ball_radius;
                        let heading = rng.gen_range(0.0..2.0 * PI);
                        Ball {
                            x0: rng.gen_range(r..(w - r).max(r + 1e-9)),
                            y0: rng.gen_range(r..(h - r).max(r + 1e-9)),
                            vx: m.speed * heading.cos(),
                            vy: m.speed * heading.sin(),
                            radius: r,
                            color: palette_color(&mut rng),
                        }
                    })
                    .collect();
                Pattern::Balls { base, balls }
            }
            DomainKind::DriftingNoise => {
                let speed = spec.motion.as_ref().map_or(0.5, |m| m.speed);
                let swatch: Vec<Rgb> = (0..4).map(|_| palette_color(&mut rng)).collect();
                let grid = 8;
                let cell = rng.gen_range(3.0..6.0);
                let cells = (0..grid * grid).map(|_| swatch[rng.gen_range(0..4)]).collect();
                let heading = rng.gen_range(0.0..2.0 * PI);
                Pattern::Drift {
                    cells,
                    grid,
                    cell,
                    vx: speed * heading.cos(),
                    vy: speed * heading.sin(),
                }
            }
        };
        Self { geom, pattern }
    }

    /// Single-ball background for exercising the reflection geometry directly.
    pub fn single_ball(geom: FrameGeom, start: (f64, f64), velocity: (f64, f64), radius: f64) -> Self {
        Self {
            geom,
            pattern: Pattern::Balls {
                base: [0.5; 3],
                balls: vec![Ball {
                    x0: start.0,
                    y0: start.1,
                    vx: velocity.0,
                    vy: velocity.1,
                    radius,
                    color: [0.9, 0.9, 0.2],
                }],
            },
        }
    }

    pub fn geom(&self) -> FrameGeom {
        self.geom
    }

    /// Ball centers at step `t` (empty for other kinds).
    pub fn ball_centers(&self, t: u64) -> Vec<(f64, f64)> {
        match &self.pattern {
            Pattern::Balls { balls, .. } => {
                let (w, h) = (self.geom.width as f64, self.geom.height as f64);
                balls
                    .iter()
                    .map(|b| {
                        (
                            reflect(b.x0, b.vx, t as f64, b.radius, w - b.radius),
                            reflect(b.y0, b.vy, t as f64, b.radius, h - b.radius),
                        )
                    })
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn render(&self, t: u64) -> Vec<u8> {
        match &self.pattern {
            Pattern::Static(frame) => frame.clone(),
            Pattern::Balls { base, balls } => {
                let centers = self.ball_centers(t);
                fill(self.geom, |x, y| {
                    let mut c = *base;
                    for (b, (cx, cy)) in balls.iter().zip(&centers) {
                        if (x - cx).powi(2) + (y - cy).powi(2) <= b.radius * b.radius {
                            c = b.color;
                        }
                    }
                    c
                })
            }
            Pattern::Drift { cells, grid, cell, vx, vy } => {
                let span = *grid as f64 * cell;
                let (dx, dy) = (vx * t as f64, vy * t as f64);
                fill(self.geom, |x, y| {
                    let u = (x + dx).rem_euclid(span);
                    let v = (y + dy).rem_euclid(span);
                    let i = ((u / cell) as usize).min(grid - 1);
                    let j = ((v / cell) as usize).min(grid - 1);
                    cells[j * grid + i]
                })
            }
        }
    }
}

pub fn render_background(spec: &DomainSpec, t: u64, geom: FrameGeom) -> Vec<u8> {
    Background::new(spec, geom).render(t)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pixel(frame: &mut [u8], geom: FrameGeom, px: usize, rgb: Rgb) {
    let plane = geom.height * geom.width;
    if geom.channels == 1 {
        frame[px] = quantize(0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]);
    } else {
        for ch in 0..geom.channels {
            frame[ch * plane + px] = quantize(rgb[ch % 3]);
        }
    }
}

/// Renders `color(x, y)` sampled at pixel centers.
fn fill(geom: FrameGeom, color: impl Fn(f64, f64) -> Rgb) -> Vec<u8> {
    let mut frame = vec![0u8; geom.len()];
    for py in 0..geom.height {
        for px in 0..geom.width {
            let rgb = color(px as f64 + 0.5, py as f64 + 0.5);
            write_pixel(&mut frame, geom, py * geom.width + px, rgb);
        }
    }
    frame
}

/// Arena coordinates in `[-1, 1]` to continuous pixel coordinates.
pub fn arena_to_pixel(geom: FrameGeom, pos: [f64; 2]) -> (f64, f64) {
    ((pos[0] + 1.0) * 0.5 * geom.width as f64, (1.0 - pos[1]) * 0.5 * geom.height as f64)
}

/// Overwrites the goal ring and then the agent disc onto `frame`.
pub fn draw_markers(frame: &mut [u8], geom: FrameGeom, agent: [f64; 2], goal: [f64; 2]) {
    let size = geom.width.min(geom.height) as f64;
    let agent_r = 0.07 * size;
    let ring_r = 0.1 * size;
    let ring_half = 0.75;
    let (gx, gy) = arena_to_pixel(geom, goal);
    let (ax, ay) = arena_to_pixel(geom, agent);
    for py in 0..geom.height {
        for px in 0..geom.width {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let dg = ((x - gx).powi(2) + (y - gy).powi(2)).sqrt();
            if (dg - ring_r).abs() <= ring_half {
                write_pixel(frame, geom, py * geom.width + px, GOAL_COLOR);
            }
            if (x - ax).powi(2) + (y - ay).powi(2) <= agent_r * agent_r {
                write_pixel(frame, geom, py * geom.width + px, AGENT_COLOR);
            }
        }
    }
}

/// Writes one channel-major frame as an 8-bit PNG (RGB or grayscale).
pub fn save_png(frame: &[u8], geom: FrameGeom, path: &Path) -> Result<()> {
    if frame.len() != geom.len() || !(geom.channels == 1 || geom.channels == 3) {
        return Err(DarlError::dim(
            "save_png",
            format!("frame of {} bytes vs geometry {geom:?}", frame.len()),
        ));
    }
    let plane = geom.height * geom.width;
    let (w, h) = (geom.width as u32, geom.height as u32);
    if geom.channels == 1 {
        image::GrayImage::from_raw(w, h, frame.to_vec())
            .expect("buffer sized to geometry")
            .save(path)?;
    } else {
        let mut interleaved = Vec::with_capacity(frame.len());
        for px in 0..plane {
            for ch in 0..3 {
                interleaved.push(frame[ch * plane + px]);
            }
        }
        image::RgbImage::from_raw(w, h, interleaved)
            .expect("buffer sized to geometry")
            .save(path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmdp::domain::make_domain_split;

    const GEOM: FrameGeom = FrameGeom {
        channels: 3,
        height: 40,
        width: 40,
    };

    #[test]
    fn stationary_kinds_ignore_time() {
        for kind in DomainKind::STATIONARY {
            let d = DomainSpec::stationary(0, kind, 99);
            assert_eq!(render_background(&d, 0, GEOM), render_background(&d, 999, GEOM));
        }
    }

    #[test]
    fn moving_kinds_change_with_time() {
        let split = make_domain_split(4, 2, 5).unwrap();
        for d in &split.video {
            assert_ne!(render_background(d, 0, GEOM), render_background(d, 17, GEOM), "{:?}", d.kind);
            assert_eq!(render_background(d, 17, GEOM), render_background(d, 17, GEOM));
        }
    }

    #[test]
    fn ball_moves_linearly_before_first_bounce() {
        let w = 1.5;
        let bg = Background::single_ball(GEOM, (20.0, 20.0), (w, 0.0), 3.0);
        let c0 = bg.ball_centers(0)[0];
        let c1 = bg.ball_centers(1)[0];
        assert!((c1.0 - c0.0 - w).abs() < 1e-12);
        assert_eq!(c1.1, c0.1);
    }

    #[test]
    fn reflection_is_elastic() {
        // lo=0, hi=10, start 8, speed 3: 11 → reflected to 9, then 6.
        assert!((reflect(8.0, 3.0, 1.0, 0.0, 10.0) - 9.0).abs() < 1e-12);
        assert!((reflect(8.0, 3.0, 2.0, 0.0, 10.0) - 6.0).abs() < 1e-12);
        assert!((reflect(8.0, 3.0, 20.0 / 3.0 * 3.0, 0.0, 10.0) - 8.0).abs() < 1e-9);
        for t in 0..500 {
            let p = reflect(1.0, -0.77, t as f64, 0.0, 10.0);
            assert!((0.0..=10.0).contains(&p));
        }
    }

    #[test]
    fn palettes_change_most_pixels() {
        for kind in DomainKind::STATIONARY {
            for seed in 0..20u64 {
                let a = render_background(&DomainSpec::stationary(0, kind, seed), 0, GEOM);
                let b = render_background(&DomainSpec::stationary(0, kind, seed + 1000), 0, GEOM);
                let plane = 40 * 40;
                let differing = (0..plane).filter(|&p| (0..3).any(|c| a[c * plane + p] != b[c * plane + p])).count();
                assert!(differing * 10 >= plane, "{kind:?} seed {seed}: {differing} of {plane}");
            }
        }
    }

    #[test]
    fn markers_overwrite_background() {
        let d = DomainSpec::stationary(0, DomainKind::Checker, 4);
        let mut f = render_background(&d, 0, GEOM);
        draw_markers(&mut f, GEOM, [0.0, 0.0], [0.5, 0.5]);
        let plane = 40 * 40;
        let center = 20 * 40 + 20;
        assert_eq!([f[center], f[plane + center], f[2 * plane + center]], [255, 0, 0]);
    }

    #[test]
    fn png_export() {
        let dir = tempfile::tempdir().unwrap();
        let d = DomainSpec::stationary(0, DomainKind::Stripes, 4);
        let f = render_background(&d, 0, GEOM);
        let p = dir.path().join("f.png");
        save_png(&f, GEOM, &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (40, 40));
        assert_eq!(img.get_pixel(3, 5).0, [f[5 * 40 + 3], f[1600 + 5 * 40 + 3], f[3200 + 5 * 40 + 3]]);
    }
}
