use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::seed::derive;
use super::WorldConfig;
use crate::error::{Error, Result};
use crate::geometry::{iou, SideBox};

pub const DATASET_FORMAT: &str = "fsdet-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Axis-aligned ellipse inscribed in an object's box; the object's occupancy mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn inscribed(b: &SideBox<f64>) -> Self {
        let (cx, cy) = b.center();
        Self {
            cx,
            cy,
            rx: 0.5 * b.width(),
            ry: 0.5 * b.height(),
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    /// Full (amodal) extent; the ground truth.
    pub bbox: SideBox<f64>,
    /// Part of the box that is not hidden by an occluder.
    pub visible: SideBox<f64>,
    /// Side index (l, t, r, b) cut by the occluder, if any.
    pub occluded_side: Option<usize>,
    pub mask: Ellipse,
}

impl SceneObject {
    pub fn occluded(&self) -> bool {
        self.occluded_side.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<SideBox<f64>> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    Shots,
    Test,
    BaseOnlyTest,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Base => 0xBA5E,
            Split::Shots => 0x5407,
            Split::Test => 0x7E57,
            Split::BaseOnlyTest => 0xBA7E,
        }
    }
}

/// Places `classes.len()` objects with the given classes.
pub fn generate_scene(id: u64, seed: u64, classes: &[usize], cfg: &WorldConfig) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let needed = classes.len() as f64 * cfg.min_size * cfg.min_size;
    if needed > 0.6 {
        return Err(Error::InfeasibleGeometry(format!(
            "{} objects of side ≥ {} do not fit the canvas",
            classes.len(),
            cfg.min_size
        )));
    }
    const ATTEMPTS: usize = 200;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(classes.len());
    for &class in classes {
        let mut placed = None;
        for _ in 0..ATTEMPTS {
            let w = rng.random_range(cfg.min_size..=cfg.max_size);
            let h = rng.random_range(cfg.min_size..=cfg.max_size);
            let l = rng.random_range(0.0..=1.0 - w);
            let t = rng.random_range(0.0..=1.0 - h);
            let bbox = SideBox::new(l, t, l + w, t + h)?;
            if objects.iter().all(|o| iou(&o.bbox, &bbox) <= cfg.max_overlap) {
                placed = Some(bbox);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            Error::InfeasibleGeometry(format!("could not place {} objects in {ATTEMPTS} attempts", classes.len()))
        })?;
        let (visible, occluded_side) = if rng.random_bool(cfg.occlusion.clamp(0.0, 1.0)) {
            let side = rng.random_range(0..4usize);
            let frac = rng.random_range(cfg.occlusion_min_cut..=cfg.occlusion_max_cut);
            let mut s = bbox.sides();
            match side {
                0 => s[0] += frac * bbox.width(),
                1 => s[1] += frac * bbox.height(),
                2 => s[2] -= frac * bbox.width(),
                _ => s[3] -= frac * bbox.height(),
            }
            (SideBox::from_sides(s)?, Some(side))
        } else {
            (bbox, None)
        };
        objects.push(SceneObject {
            class,
            bbox,
            visible,
            occluded_side,
            mask: Ellipse::inscribed(&bbox),
        });
    }
    Ok(Scene { id, seed, objects })
}

/// Scenes of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: Split,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn instance_count(&self, class: usize) -> usize {
        self.scenes
            .iter()
            .flat_map(|s| &s.objects)
            .filter(|o| o.class == class)
            .count()
    }
}

/// Base pretraining scenes, the K-shot set, and the test set of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub shots: usize,
    pub world: WorldConfig,
    pub base: Dataset,
    pub shot_set: Dataset,
    pub test: Dataset,
}

fn random_scene(split: Split, index: usize, seed: u64, pool: &[usize], cfg: &WorldConfig) -> Result<Scene> {
    let scene_seed = derive(seed, &[split.tag(), index as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0xC1A55);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let classes: Vec<usize> = (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect();
    generate_scene(index as u64, scene_seed, &classes, cfg)
}

/// `n` scenes drawn from the class pool of `split`. Scene `i` depends only on
/// `(seed, split, i)`.
pub fn generate_split(split: Split, n: usize, seed: u64, cfg: &WorldConfig) -> Result<Dataset> {
    let pool: Vec<usize> = match split {
        Split::Base | Split::BaseOnlyTest => cfg.base_classes().collect(),
        Split::Test => cfg.all_classes().collect(),
        Split::Shots => return generate_shots(cfg.shots, seed, cfg),
    };
    let scenes = (0..n)
        .map(|i| random_scene(split, i, seed, &pool, cfg))
        .collect::<Result<_>>()?;
    Ok(Dataset { split, scenes })
}

/// Exactly `k` single-object scenes per new class. The first `k` shots of a
/// class do not depend on `k`, so smaller shot sets are prefixes of larger ones.
pub fn generate_shots(k: usize, seed: u64, cfg: &WorldConfig) -> Result<Dataset> {
    let mut scenes = Vec::with_capacity(k * cfg.n_new);
    for class in cfg.new_classes() {
        for j in 0..k {
            let scene_seed = derive(seed, &[Split::Shots.tag(), class as u64, j as u64]);
            let id = scenes.len() as u64;
            scenes.push(generate_scene(id, scene_seed, &[class], cfg)?);
        }
    }
    Ok(Dataset {
        split: Split::Shots,
        scenes,
    })
}

pub fn generate_dataset(cfg: &WorldConfig, seed: u64) -> Result<DatasetBundle> {
    if cfg.shots == 0 || cfg.n_base == 0 || cfg.n_new == 0 {
        return Err(Error::InvalidArgument("need K ≥ 1, N_b ≥ 1 and N_n ≥ 1".into()));
    }
    if cfg.min_objects > cfg.max_objects || cfg.max_objects == 0 {
        return Err(Error::InvalidArgument("object count range is empty".into()));
    }
    Ok(DatasetBundle {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        seed,
        shots: cfg.shots,
        world: cfg.clone(),
        base: generate_split(Split::Base, cfg.base_scenes, seed, cfg)?,
        shot_set: generate_shots(cfg.shots, seed, cfg)?,
        test: generate_split(Split::Test, cfg.test_scenes, seed, cfg)?,
    })
}

impl DatasetBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bundle: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if bundle.format != DATASET_FORMAT || bundle.version != DATASET_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset {} v{}",
                bundle.format, bundle.version
            )));
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let cfg = WorldConfig {
            base_scenes: 12,
            test_scenes: 9,
            ..WorldConfig::default()
        };
        let a = generate_dataset(&cfg, 17).unwrap();
        assert_eq!(a, generate_dataset(&cfg, 17).unwrap());
        assert_ne!(a.test, generate_dataset(&cfg, 18).unwrap().test);
    }

    #[test]
    fn shot_counts_are_exact_and_nested() {
        let cfg = WorldConfig { shots: 3, ..WorldConfig::default() };
        let d = generate_dataset(&cfg, 2).unwrap();
        for c in cfg.new_classes() {
            assert_eq!(d.shot_set.instance_count(c), 3);
        }
        for c in cfg.base_classes() {
            assert_eq!(d.shot_set.instance_count(c), 0);
            assert_eq!(d.base.instance_count(c) > 0, true);
        }
        let one = generate_shots(1, 2, &cfg).unwrap();
        assert_eq!(one.scenes[0].objects, d.shot_set.scenes[0].objects);
        let test_classes: std::collections::BTreeSet<_> =
            d.test.scenes.iter().flat_map(|s| s.objects.iter().map(|o| o.class)).collect();
        assert!(cfg.new_classes().any(|c| test_classes.contains(&c)));
        assert!(cfg.base_classes().any(|c| test_classes.contains(&c)));
    }

    #[test]
    fn objects_stay_on_canvas() {
        let cfg = WorldConfig::default();
        let d = generate_split(Split::Test, 50, 5, &cfg).unwrap();
        for o in d.scenes.iter().flat_map(|s| &s.objects) {
            let b = o.bbox;
            assert!(b.l >= 0.0 && b.t >= 0.0 && b.r <= 1.0 && b.b <= 1.0);
            assert!(o.visible.area() <= b.area());
        }
    }

    #[test]
    fn too_many_objects_is_infeasible() {
        let cfg = WorldConfig::default();
        let classes = vec![0; 40];
        assert!(matches!(
            generate_scene(0, 1, &classes, &cfg),
            Err(Error::InfeasibleGeometry(_))
        ));
    }

    #[test]
    fn dataset_file_roundtrip() {
        let cfg = WorldConfig {
            base_scenes: 3,
            test_scenes: 3,
            ..WorldConfig::default()
        };
        let d = generate_dataset(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        d.save(&path).unwrap();
        assert_eq!(DatasetBundle::load(&path).unwrap(), d);
        assert!(matches!(
            DatasetBundle::load(&dir.path().join("missing.json")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
