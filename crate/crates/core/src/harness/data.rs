use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DatasetKind, DatasetSpec, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::geolab::{generate_points, SourceKind};
use crate::numerics::{RngStream, Tensor};

const SOURCE_STREAM: u64 = 0xDA7A;
const TARGET_STREAM: u64 = 0x7A6E;
const SUPERSAMPLE: usize = 4;
const OUTLINE_WIDTH: f64 = 1.2;
const MOONS_NOISE: f64 = 0.05;
const TARGET_SHIFT: [f64; 2] = [0.35, -0.25];
const TARGET_SCALE: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Items of one domain: `[1, H, W]` images in `[-1, 1]` or `[2]` points.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub items: Vec<Tensor>,
    pub domain: Domain,
    pub few_shot: bool,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        self.items[0].shape()
    }

    /// Stacks the selected items into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let picked: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                self.items
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("item {i} out of {}", self.len())))
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&picked)
    }

    pub fn all(&self) -> Result<Tensor> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Little-endian dump of every value in item order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.items
            .iter()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn checksum(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Glyph {
    Ellipse,
    Rect,
    Triangle,
}

#[derive(Clone, Copy, Debug)]
struct Pose {
    glyph: Glyph,
    cx: f64,
    cy: f64,
    size: f64,
    aspect: f64,
    angle: f64,
}

impl Pose {
    fn draw(rng: &mut RngStream) -> Self {
        let glyph = match rng.int_range(0, 2) {
            0 => Glyph::Ellipse,
            1 => Glyph::Rect,
            _ => Glyph::Triangle,
        };
        let c = IMAGE_SIZE as f64 / 2.0;
        Pose {
            glyph,
            cx: c + rng.uniform_range(-1.5, 1.5),
            cy: c + rng.uniform_range(-1.5, 1.5),
            size: rng.uniform_range(3.5, 6.0),
            aspect: rng.uniform_range(0.6, 1.0),
            angle: rng.uniform_range(0.0, PI),
        }
    }

    /// Point test against the glyph shrunk inwards by `inset` pixels.
    fn contains(&self, x: f64, y: f64, inset: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let (rx, ry) = (self.size, self.size * self.aspect);
        match self.glyph {
            Glyph::Ellipse => {
                let (ax, ay) = (rx - inset, ry - inset);
                ax > 0.0 && ay > 0.0 && (u / ax).powi(2) + (v / ay).powi(2) <= 1.0
            }
            Glyph::Rect => u.abs() <= 0.85 * rx - inset && v.abs() <= 0.85 * ry - inset,
            Glyph::Triangle => (0..3).all(|k| {
                let a = PI / 2.0 + k as f64 * 2.0 * PI / 3.0;
                u * a.cos() + v * a.sin() <= 0.5 * rx - inset
            }),
        }
    }

    /// Fraction of each pixel's subsamples for which `inside` holds.
    fn coverage(&self, inside: impl Fn(&Pose, f64, f64) -> bool) -> Vec<f64> {
        let n = IMAGE_SIZE;
        let per = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let mut hit = 0usize;
                for i in 0..SUPERSAMPLE {
                    for j in 0..SUPERSAMPLE {
                        let y = r as f64 + (i as f64 + 0.5) / SUPERSAMPLE as f64;
                        let x = c as f64 + (j as f64 + 0.5) / SUPERSAMPLE as f64;
                        hit += usize::from(inside(self, x, y));
                    }
                }
                out[r * n + c] = hit as f64 / per;
            }
        }
        out
    }
}

fn image(values: Vec<f64>) -> Tensor {
    Tensor::new(vec![1, IMAGE_SIZE, IMAGE_SIZE], values).expect("image shape")
}

/// Filled glyph, white on black.
fn render_filled(p: &Pose) -> Tensor {
    image(
        p.coverage(|p, x, y| p.contains(x, y, 0.0))
            .into_iter()
            .map(|f| 2.0 * f - 1.0)
            .collect(),
    )
}

/// Glyph outline, white on black.
fn render_outline(p: &Pose) -> Tensor {
    let cov = p.coverage(|p, x, y| p.contains(x, y, 0.0) && !p.contains(x, y, OUTLINE_WIDTH));
    image(cov.into_iter().map(|f| 2.0 * f - 1.0).collect())
}

/// Two-moons rescaled into roughly `[-1, 1]^2`.
fn moons(n: usize, noise: f64, rng: &mut RngStream) -> Result<Vec<Tensor>> {
    let pts = generate_points(SourceKind::TwoMoons, n, noise, rng)?;
    Ok(pts
        .points()
        .iter()
        .map(|p| Tensor::from_vec(vec![(p[0] - 0.5) / 1.5, (p[1] - 0.25) / 0.75]))
        .collect())
}

/// Procedural source/target pair of a run.
///
/// Shapes: filled glyphs versus their outlines, both on a dark background. Moons: two-moons versus a shrunken, shifted copy.
pub fn gen_toy_domains(spec: &DatasetSpec, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if spec.n_source == 0 || spec.m_target == 0 {
        return Err(Error::InvalidArgument("dataset counts must be >= 1".into()));
    }
    if spec.m_target > 10 {
        if !spec.allow_many_shots {
            return Err(Error::InvalidConfig(format!(
                "dataset.m_target = {} exceeds 10; set dataset.allow_many_shots to override",
                spec.m_target
            )));
        }
        log::warn!(
            "generating {} target items; the few-shot regime assumes at most 10",
            spec.m_target
        );
    }
    let mut src_rng = RngStream::new(seed, SOURCE_STREAM);
    let mut tgt_rng = RngStream::new(seed, TARGET_STREAM);
    let (source, target) = match spec.kind {
        DatasetKind::Shapes => (
            (0..spec.n_source)
                .map(|_| render_filled(&Pose::draw(&mut src_rng)))
                .collect(),
            (0..spec.m_target)
                .map(|_| render_outline(&Pose::draw(&mut tgt_rng)))
                .collect(),
        ),
        DatasetKind::Moons => {
            let tgt = moons(spec.m_target, MOONS_NOISE * 0.5, &mut tgt_rng)?
                .into_iter()
                .map(|t| {
                    let d = t.data();
                    Tensor::from_vec(vec![
                        d[0] * TARGET_SCALE + TARGET_SHIFT[0],
                        d[1] * TARGET_SCALE + TARGET_SHIFT[1],
                    ])
                })
                .collect();
            (moons(spec.n_source, MOONS_NOISE, &mut src_rng)?, tgt)
        }
    };
    Ok((
        DomainDataset {
            items: source,
            domain: Domain::Source,
            few_shot: false,
        },
        DomainDataset {
            items: target,
            domain: Domain::Target,
            few_shot: true,
        },
    ))
}
