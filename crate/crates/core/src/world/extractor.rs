use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::scene::{Scene, SceneObject};
use super::seed::{derive, derive_f64s};
use super::WorldConfig;
use crate::classifier::BoxFeature;
use crate::error::{Error, Result};
use crate::geometry::{encode_offsets, iou, SideBox};
use crate::linalg::{dot, Matrix};
use crate::mask::{BinaryMask, CellFeatures, MaskGrid};

pub(super) const MASK_DIM: usize = 8;
const GEOMETRY_RAW: usize = 8;

/// Pre-nonlinearity inputs of one box feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeature {
    /// Index of the dominant object, `None` for background.
    pub object: Option<usize>,
    /// Noise-free appearance: overlap · contrast · (prototype + instance deviation).
    pub prototype: Vec<f64>,
    /// Noise-free geometry: scaled offsets to the visible extent and truncation cues.
    pub geometry: Vec<f64>,
}

/// Frozen random feature maps plus class prototypes. Fully determined by the
/// world config and a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    cfg: WorldConfig,
    prototypes: Matrix<f64>,
    appearance_in: Matrix<f64>,
    appearance_out: Matrix<f64>,
    geometry_in: Matrix<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn normals(seed: u64, n: usize, std: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn tanh_layer(w: &Matrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| dot(w.row(r), x).tanh()).collect()
}

impl FeatureExtractor {
    pub fn new(cfg: &WorldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0xF00D]));
        let p = cfg.prototype_dim;
        let mut prototypes = gaussian_matrix(cfg.n_classes(), p, 1.0, &mut rng);
        for c in 0..prototypes.rows() {
            let norm = prototypes.row(c).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            prototypes.row_mut(c).iter_mut().for_each(|v| *v /= norm);
        }
        let appearance_in = gaussian_matrix(cfg.appearance_dim, p, 1.5, &mut rng);
        let appearance_out = gaussian_matrix(
            cfg.appearance_dim,
            cfg.appearance_dim,
            1.5 / (cfg.appearance_dim as f64).sqrt(),
            &mut rng,
        );
        let geometry_in = gaussian_matrix(cfg.geometry_dim, GEOMETRY_RAW, 1.0 / (GEOMETRY_RAW as f64).sqrt(), &mut rng);
        Self {
            cfg: cfg.clone(),
            prototypes,
            appearance_in,
            appearance_out,
            geometry_in,
        }
    }

    /// Rebuilds an extractor from the matrices returned by [`Self::blocks`].
    pub fn from_blocks(cfg: &WorldConfig, blocks: [Matrix<f64>; 4]) -> Result<Self> {
        let [prototypes, appearance_in, appearance_out, geometry_in] = blocks;
        let expect = [
            [cfg.n_classes(), cfg.prototype_dim],
            [cfg.appearance_dim, cfg.prototype_dim],
            [cfg.appearance_dim, cfg.appearance_dim],
            [cfg.geometry_dim, GEOMETRY_RAW],
        ];
        for (name, (m, e)) in Self::BLOCK_NAMES
            .iter()
            .zip([&prototypes, &appearance_in, &appearance_out, &geometry_in].iter().zip(expect))
        {
            if m.shape() != e {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: e.to_vec(),
                    got: m.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            prototypes,
            appearance_in,
            appearance_out,
            geometry_in,
        })
    }

    pub const BLOCK_NAMES: [&'static str; 4] = ["prototypes", "appearance_in", "appearance_out", "geometry_in"];

    pub fn blocks(&self) -> [&Matrix<f64>; 4] {
        [&self.prototypes, &self.appearance_in, &self.appearance_out, &self.geometry_in]
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        self.prototypes.row(class)
    }

    /// SHA-256 over every frozen weight, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in self.blocks() {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Object whose visible extent overlaps `bx` the most (lowest index on ties).
    pub fn dominant_object(scene: &Scene, bx: &SideBox<f64>) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in scene.objects.iter().enumerate() {
            let v = iou(bx, &o.visible);
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i)
    }

    fn instance(&self, scene: &Scene, index: usize) -> (f64, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(scene.seed, &[0x1257, index as u64]));
        let (lo, hi) = (self.cfg.contrast_min.ln(), self.cfg.contrast_max.ln());
        let contrast = if hi > lo { rng.random_range(lo..=hi).exp() } else { lo.exp() };
        let delta = (0..self.cfg.prototype_dim)
            .map(|_| self.cfg.instance_spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (contrast, delta)
    }

    pub fn raw_feature(&self, scene: &Scene, bx: &SideBox<f64>) -> Result<RawFeature> {
        let p = self.cfg.prototype_dim;
        let Some(index) = Self::dominant_object(scene, bx) else {
            return Ok(RawFeature {
                object: None,
                prototype: vec![0.0; p],
                geometry: vec![0.0; GEOMETRY_RAW],
            });
        };
        let o: &SceneObject = &scene.objects[index];
        let overlap = iou(bx, &o.visible);
        let (contrast, delta) = self.instance(scene, index);
        let proto = self.prototype(o.class);
        let prototype = (0..p).map(|j| overlap * contrast * (proto[j] + delta[j])).collect();
        let off = encode_offsets(bx, &o.visible)?;
        let mut geometry: Vec<f64> = off.iter().map(|v| self.cfg.geometry_gain * v).collect();
        geometry.extend((0..4).map(|k| if o.occluded_side == Some(k) { overlap } else { 0.0 }));
        Ok(RawFeature {
            object: Some(index),
            prototype,
            geometry,
        })
    }

    /// Feature of `bx` in `scene`; identical inputs give identical features.
    pub fn extract(&self, scene: &Scene, bx: &SideBox<f64>) -> Result<BoxFeature<f64>> {
        let raw = self.raw_feature(scene, bx)?;
        let p = self.cfg.prototype_dim;
        let sigma = self.cfg.feature_noise;
        let noise = normals(derive_f64s(scene.seed, &bx.sides()), p + GEOMETRY_RAW, sigma);
        let a: Vec<f64> = raw.prototype.iter().zip(&noise[..p]).map(|(x, n)| x + n).collect();
        let g: Vec<f64> = raw.geometry.iter().zip(&noise[p..]).map(|(x, n)| x + n).collect();
        let mut f = tanh_layer(&self.appearance_out, &tanh_layer(&self.appearance_in, &a));
        f.extend(tanh_layer(&self.geometry_in, &g));
        Ok(BoxFeature::with_bias(f))
    }

    /// Per-cell features on a `G × G` grid spanning `bx`: a noisy occupancy cue
    /// of the dominant object (0 where it is hidden), box-relative coordinates
    /// and their quadratic terms, and a bias.
    pub fn cell_features(&self, scene: &Scene, bx: &SideBox<f64>) -> Result<CellFeatures<f64>> {
        let g = self.cfg.mask_grid;
        let dominant = Self::dominant_object(scene, bx).map(|i| &scene.objects[i]);
        let mut sides = bx.sides().to_vec();
        sides.push(f64::from(g as u32));
        let noise = normals(derive_f64s(scene.seed ^ 0x3A5C, &sides), g * g, self.cfg.mask_noise);
        let mut data = Vec::with_capacity(g * g * MASK_DIM);
        for (i, n) in noise.iter().enumerate() {
            let (row, col) = (i / g, i % g);
            let (x, y) = cell_center(bx, g, row, col);
            let occupancy = match dominant {
                None => -1.0,
                Some(o) if o.visible.contains_point(x, y) => {
                    if o.mask.contains(x, y) {
                        1.0
                    } else {
                        -1.0
                    }
                }
                Some(o) if o.bbox.contains_point(x, y) => 0.0,
                Some(_) => -1.0,
            };
            let u = 2.0 * (col as f64 + 0.5) / g as f64 - 1.0;
            let v = 2.0 * (row as f64 + 0.5) / g as f64 - 1.0;
            data.extend_from_slice(&[occupancy + n, u, v, u * u, v * v, u * v, u * u + v * v, 1.0]);
        }
        CellFeatures::new(g, MASK_DIM, data)
    }
}

pub(super) fn cell_center(bx: &SideBox<f64>, g: usize, row: usize, col: usize) -> (f64, f64) {
    (
        bx.l + (col as f64 + 0.5) / g as f64 * bx.width(),
        bx.t + (row as f64 + 0.5) / g as f64 * bx.height(),
    )
}

/// Ground-truth mask of `object` on the grid of `bx`.
pub fn mask_target(object: &SceneObject, bx: &SideBox<f64>, g: usize) -> BinaryMask {
    let values = (0..g * g)
        .map(|i| {
            let (x, y) = cell_center(bx, g, i / g, i % g);
            object.mask.contains(x, y)
        })
        .collect();
    MaskGrid::new(g, values).expect("grid size")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::{generate_scene, Ellipse};

    fn world() -> (WorldConfig, FeatureExtractor) {
        let cfg = WorldConfig::default();
        let ex = FeatureExtractor::new(&cfg, 3);
        (cfg, ex)
    }

    #[test]
    fn features_are_deterministic() {
        let (cfg, ex) = world();
        let scene = generate_scene(0, 11, &[0, 6], &cfg).unwrap();
        let b = scene.objects[0].visible;
        assert_eq!(ex.extract(&scene, &b).unwrap(), ex.extract(&scene, &b).unwrap());
        assert_eq!(ex.extract(&scene, &b).unwrap().dim(), cfg.feature_dim());
        assert_eq!(ex.fingerprint(), FeatureExtractor::new(&cfg, 3).fingerprint());
        assert_ne!(ex.fingerprint(), FeatureExtractor::new(&cfg, 4).fingerprint());
    }

    #[test]
    fn same_class_zero_noise_shares_prototype_direction() {
        let cfg = WorldConfig {
            instance_spread: 0.0,
            contrast_min: 1.0,
            contrast_max: 1.0,
            ..WorldConfig::default()
        };
        let ex = FeatureExtractor::new(&cfg, 3);
        let a = generate_scene(0, 1, &[2], &cfg).unwrap();
        let b = generate_scene(1, 2, &[2], &cfg).unwrap();
        let ra = ex.raw_feature(&a, &a.objects[0].visible).unwrap();
        let rb = ex.raw_feature(&b, &b.objects[0].visible).unwrap();
        assert_eq!(ra.prototype, rb.prototype);
    }

    #[test]
    fn background_has_no_prototype() {
        let (cfg, ex) = world();
        let mut scene = generate_scene(0, 5, &[1], &cfg).unwrap();
        let o = &mut scene.objects[0];
        o.bbox = SideBox::new(0.0, 0.0, 0.2, 0.2).unwrap();
        o.visible = o.bbox;
        o.mask = Ellipse::inscribed(&o.bbox);
        let far = SideBox::new(0.6, 0.6, 0.9, 0.9).unwrap();
        let raw = ex.raw_feature(&scene, &far).unwrap();
        assert_eq!(raw.object, None);
        assert!(raw.prototype.iter().all(|&v| v == 0.0));
        let cells = ex.cell_features(&scene, &far).unwrap();
        assert_eq!(cells.cells(), cfg.mask_grid * cfg.mask_grid);
    }

    #[test]
    fn mask_target_follows_ellipse() {
        let (cfg, _) = world();
        let scene = generate_scene(0, 9, &[0], &cfg).unwrap();
        let o = &scene.objects[0];
        let m = mask_target(o, &o.bbox, 14);
        // inscribed ellipse covers about π/4 of its box
        let frac = m.count() as f64 / 196.0;
        assert!((frac - std::f64::consts::FRAC_PI_4).abs() < 0.06, "{frac}");
    }
}
