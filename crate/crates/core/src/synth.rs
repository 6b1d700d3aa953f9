//! Synthetic parcel scenes.
//!
//! A Voronoi partition of the fine (`sr_factor`-times) grid defines parcels,
//! each parcel gets a class, and every class has a mean spectral vector
//! shared by all scenes drawn from the same palette seed. Fine pixels carry
//! the class mean plus Gaussian noise; a base pixel is the mean of its fine
//! block, so pixels straddling a parcel edge mix the signal of both sides.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::labels::{LabelMap, EXCLUDED};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub num_parcels: usize,
    pub noise_sigma: f64,
    pub mix_boundary: bool,
    pub sr_factor: usize,
    pub excluded_fraction: f64,
    /// Seeds the per-class mean spectra.
    pub palette_seed: u64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            channels: 4,
            num_classes: 5,
            num_parcels: 20,
            noise_sigma: 0.05,
            mix_boundary: true,
            sr_factor: 4,
            excluded_fraction: 0.05,
            palette_seed: 0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_parcels < 1 {
            return Err(Error::Invalid("num_parcels must be >= 1".into()));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.num_classes == 0 {
            return Err(Error::Invalid("scene extents and class count must be positive".into()));
        }
        if ![1, 2, 4].contains(&self.sr_factor) {
            return Err(Error::Invalid(format!(
                "sr_factor must be 1, 2 or 4, got {}",
                self.sr_factor
            )));
        }
        if !(0.0..1.0).contains(&self.excluded_fraction) {
            return Err(Error::Invalid("excluded_fraction must lie in [0, 1)".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Invalid("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub id: usize,
    pub seed: u64,
    /// `H×W×channels`
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    /// `(sr·H)×(sr·W)`
    pub labels_sr: LabelMap,
    /// `H×W`
    pub parcel_ids: Tensor<i32>,
}

/// Class mean spectra, `C×channels`, uniform in `[0, 1)`.
pub fn palette(num_classes: usize, channels: usize, palette_seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(palette_seed, 0x9a1e);
    (0..num_classes * channels).map(|_| rng.unit()).collect()
}

/// Majority value of each `factor×factor` block; ties go to the tied value
/// met first in row-major order within the block.
pub fn downsample_majority(grid: &Tensor<i32>, factor: usize) -> Result<Tensor<i32>> {
    grid.expect_ndim(2, "grid")?;
    let (fh, fw) = (grid.shape()[0], grid.shape()[1]);
    if factor == 0 || fh % factor != 0 || fw % factor != 0 {
        return Err(Error::Shape(format!(
            "{fh}×{fw} grid is not divisible by {factor}"
        )));
    }
    let (h, w) = (fh / factor, fw / factor);
    let mut block = Vec::with_capacity(factor * factor);
    Ok(Tensor::from_fn(&[h, w], |f| {
        let (i, j) = (f / w, f % w);
        block.clear();
        for a in 0..factor {
            for b in 0..factor {
                block.push(grid.data()[(i * factor + a) * fw + j * factor + b]);
            }
        }
        majority(&block)
    }))
}

fn majority(block: &[i32]) -> i32 {
    let mut best = block[0];
    let mut best_n = 0;
    for (idx, &v) in block.iter().enumerate() {
        if block[..idx].contains(&v) {
            continue;
        }
        let n = block.iter().filter(|&&x| x == v).count();
        if n > best_n {
            best = v;
            best_n = n;
        }
    }
    best
}

pub fn generate_scene(cfg: &SceneConfig, id: usize) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed, 0);
    let s = cfg.sr_factor;
    let (fh, fw) = (cfg.height * s, cfg.width * s);
    let sites: Vec<(f64, f64)> = (0..cfg.num_parcels)
        .map(|_| (rng.unit() * fh as f64, rng.unit() * fw as f64))
        .collect();
    let parcel_class: Vec<i32> = (0..cfg.num_parcels).map(|_| rng.below(cfg.num_classes) as i32).collect();
    let n_excluded = (cfg.excluded_fraction * cfg.num_parcels as f64).round() as usize;
    let mut order: Vec<usize> = (0..cfg.num_parcels).collect();
    rng.shuffle(&mut order);
    let mut excluded = vec![false; cfg.num_parcels];
    for &p in &order[..n_excluded] {
        excluded[p] = true;
    }

    let ids_sr = Tensor::from_fn(&[fh, fw], |f| {
        let (y, x) = ((f / fw) as f64 + 0.5, (f % fw) as f64 + 0.5);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, &(sy, sx)) in sites.iter().enumerate() {
            let d = (y - sy) * (y - sy) + (x - sx) * (x - sx);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best as i32
    });
    let true_sr = ids_sr.map(|p| parcel_class[p as usize]);
    let labels_sr = ids_sr.map(|p| if excluded[p as usize] { EXCLUDED } else { parcel_class[p as usize] });

    let means = palette(cfg.num_classes, cfg.channels, cfg.palette_seed);
    let ch = cfg.channels;
    let fine: Vec<f64> = (0..fh * fw * ch)
        .map(|f| {
            let c = true_sr.data()[f / ch] as usize;
            means[c * ch + f % ch] + cfg.noise_sigma * rng.normal()
        })
        .collect();

    let (h, w) = (cfg.height, cfg.width);
    let true_base = downsample_majority(&true_sr, s)?;
    let mut image = Vec::with_capacity(h * w * ch);
    for i in 0..h {
        for j in 0..w {
            let keep = true_base.data()[i * w + j];
            for c in 0..ch {
                let mut sum = 0.0;
                let mut n = 0;
                for a in 0..s {
                    for b in 0..s {
                        let fp = (i * s + a) * fw + j * s + b;
                        if cfg.mix_boundary || true_sr.data()[fp] == keep {
                            sum += fine[fp * ch + c];
                            n += 1;
                        }
                    }
                }
                image.push((sum / n as f64) as f32);
            }
        }
    }

    Ok(SyntheticScene {
        id,
        seed: cfg.seed,
        image: Tensor::from_vec(&[h, w, ch], image)?,
        labels: LabelMap::new(downsample_majority(&labels_sr, s)?, cfg.num_classes)?,
        labels_sr: LabelMap::new(labels_sr, cfg.num_classes)?,
        parcel_ids: downsample_majority(&ids_sr, s)?,
    })
}

fn flip_grid<T: crate::Element>(t: &Tensor<T>, vertical: bool, horizontal: bool) -> Tensor<T> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let d: usize = t.shape()[2..].iter().product();
    Tensor::from_fn(t.shape(), |f| {
        let (p, e) = (f / d, f % d);
        let (mut i, mut j) = (p / w, p % w);
        if vertical {
            i = h - 1 - i;
        }
        if horizontal {
            j = w - 1 - j;
        }
        t.data()[(i * w + j) * d + e]
    })
}

/// Flips every grid of the scene along each axis independently with
/// probability `p`.
pub fn augment_flip(scene: &SyntheticScene, rng: &mut Rng, p: f64) -> SyntheticScene {
    let vertical = rng.bernoulli(p);
    let horizontal = rng.bernoulli(p);
    flip_scene(scene, vertical, horizontal)
}

pub fn flip_scene(scene: &SyntheticScene, vertical: bool, horizontal: bool) -> SyntheticScene {
    let flip_labels = |l: &LabelMap| LabelMap {
        classes: flip_grid(&l.classes, vertical, horizontal),
        num_classes: l.num_classes,
    };
    SyntheticScene {
        id: scene.id,
        seed: scene.seed,
        image: flip_grid(&scene.image, vertical, horizontal),
        labels: flip_labels(&scene.labels),
        labels_sr: flip_labels(&scene.labels_sr),
        parcel_ids: flip_grid(&scene.parcel_ids, vertical, horizontal),
    }
}

pub const MANIFEST: &str = "manifest.tsv";

fn scene_files(id: usize) -> [String; 4] {
    [
        format!("scene_{id:05}_image.tsr"),
        format!("scene_{id:05}_labels.lbl"),
        format!("scene_{id:05}_labels_sr.lbl"),
        format!("scene_{id:05}_ids.tsr"),
    ]
}

/// Writes tensor files plus a tab-separated manifest with one line per
/// scene: `scene_id, image_file, labels_file, labels_sr_file, ids_file, seed`.
pub fn write_dataset(scenes: &[SyntheticScene], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for sc in scenes {
        let files = scene_files(sc.id);
        write_tensor(&dir.join(&files[0]), &sc.image)?;
        sc.labels.write(&dir.join(&files[1]))?;
        sc.labels_sr.write(&dir.join(&files[2]))?;
        write_tensor(&dir.join(&files[3]), &sc.parcel_ids)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            sc.id, files[0], files[1], files[2], files[3], sc.seed
        ));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let err = |line: usize, msg: String| Error::Manifest {
        path: PathBuf::from(&path),
        line,
        msg,
    };
    let mut scenes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(lineno, format!("expected 6 tab-separated fields, got {}", fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| err(lineno, format!("bad scene id {:?}", fields[0])))?;
        let seed: u64 = fields[5]
            .parse()
            .map_err(|_| err(lineno, format!("bad seed {:?}", fields[5])))?;
        let image: Tensor<f32> = read_tensor(&dir.join(fields[1]))?;
        let labels = LabelMap::read(&dir.join(fields[2]))?;
        let labels_sr = LabelMap::read(&dir.join(fields[3]))?;
        let parcel_ids: Tensor<i32> = read_tensor(&dir.join(fields[4]))?;
        let (h, w) = (labels.height(), labels.width());
        let consistent = image.ndim() == 3
            && image.shape()[..2] == [h, w]
            && parcel_ids.shape() == [h, w]
            && labels_sr.num_classes == labels.num_classes
            && labels_sr.height() % h == 0
            && labels_sr.height() / h == labels_sr.width() / w
            && labels_sr.width() % w == 0;
        if !consistent {
            return Err(err(lineno, "shape mismatch between scene files".into()));
        }
        scenes.push(SyntheticScene {
            id,
            seed,
            image,
            labels,
            labels_sr,
            parcel_ids,
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::boundary_mask;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig {
            height: 16,
            width: 16,
            ..Default::default()
        };
        assert_eq!(generate_scene(&cfg, 0).unwrap(), generate_scene(&cfg, 0).unwrap());
    }

    #[test]
    fn single_parcel_is_uniform() {
        let cfg = SceneConfig {
            height: 12,
            width: 10,
            num_parcels: 1,
            ..Default::default()
        };
        let sc = generate_scene(&cfg, 0).unwrap();
        let c0 = sc.labels.classes.data()[0];
        assert!(sc.labels.classes.data().iter().all(|&c| c == c0));
        assert!(boundary_mask(&sc.labels).data().iter().all(|&b| !b));
        let zero = SceneConfig {
            num_parcels: 0,
            ..cfg
        };
        assert!(generate_scene(&zero, 0).is_err());
    }

    #[test]
    fn labels_are_majority_of_fine_labels() {
        for seed in 0..5 {
            let cfg = SceneConfig {
                height: 20,
                width: 24,
                seed,
                excluded_fraction: 0.2,
                ..Default::default()
            };
            let sc = generate_scene(&cfg, 0).unwrap();
            assert_eq!(
                downsample_majority(&sc.labels_sr.classes, 4).unwrap(),
                sc.labels.classes
            );
        }
    }

    #[test]
    fn majority_tie_breaks_to_first_cell() {
        let g = Tensor::from_vec(&[2, 2], vec![3, 1, 1, 3]).unwrap();
        assert_eq!(downsample_majority(&g, 2).unwrap().data(), &[3]);
        let g = Tensor::from_vec(&[2, 2], vec![2, 1, 1, 0]).unwrap();
        assert_eq!(downsample_majority(&g, 2).unwrap().data(), &[1]);
    }

    #[test]
    fn noiseless_pixels_are_means_or_mixtures() {
        let cfg = SceneConfig {
            height: 24,
            width: 24,
            noise_sigma: 0.0,
            excluded_fraction: 0.0,
            seed: 3,
            ..Default::default()
        };
        let sc = generate_scene(&cfg, 0).unwrap();
        let means = palette(cfg.num_classes, cfg.channels, cfg.palette_seed);
        let ch = cfg.channels;
        for i in 0..24 {
            for j in 0..24 {
                let mut classes = vec![];
                for a in 0..4 {
                    for b in 0..4 {
                        classes.push(sc.labels_sr.at(i * 4 + a, j * 4 + b));
                    }
                }
                classes.sort();
                classes.dedup();
                if classes.len() == 1 {
                    let c = classes[0] as usize;
                    for k in 0..ch {
                        assert_eq!(sc.image.get(&[i, j, k]), means[c * ch + k] as f32);
                    }
                } else {
                    // strict convex combination with weights = class shares of the block
                    for k in 0..ch {
                        let mut expect = 0.0;
                        for a in 0..4 {
                            for b in 0..4 {
                                let c = sc.labels_sr.at(i * 4 + a, j * 4 + b) as usize;
                                expect += means[c * ch + k] / 16.0;
                            }
                        }
                        assert!((sc.image.get(&[i, j, k]) as f64 - expect).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let cfg = SceneConfig {
            height: 9,
            width: 7,
            ..Default::default()
        };
        let sc = generate_scene(&cfg, 0).unwrap();
        let mut rng = Rng::new(0, 0);
        assert_eq!(augment_flip(&sc, &mut rng, 0.0), sc);
        let once = augment_flip(&sc, &mut rng, 1.0);
        assert_ne!(once, sc);
        assert_eq!(augment_flip(&once, &mut rng, 1.0), sc);
        let nb = |s: &SyntheticScene| boundary_mask(&s.labels).data().iter().filter(|&&b| b).count();
        assert_eq!(nb(&once), nb(&sc));
        assert_eq!(once.image.get(&[0, 0, 1]), sc.image.get(&[8, 6, 1]));
    }

    #[test]
    fn dataset_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let scenes: Vec<_> = (0..3)
            .map(|k| {
                generate_scene(
                    &SceneConfig {
                        height: 8,
                        width: 8,
                        seed: k,
                        ..Default::default()
                    },
                    k as usize,
                )
                .unwrap()
            })
            .collect();
        write_dataset(&scenes, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), scenes);

        let empty = tempfile::tempdir().unwrap();
        write_dataset(&[], empty.path()).unwrap();
        assert_eq!(fs::read_to_string(empty.path().join(MANIFEST)).unwrap(), "");
        assert!(read_dataset(empty.path()).unwrap().is_empty());

        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let mut lines: Vec<&str> = manifest.lines().collect();
        let cut = lines[1].rsplit_once('\t').unwrap().0.rsplit_once('\t').unwrap().0.to_string();
        lines[1] = &cut;
        fs::write(dir.path().join(MANIFEST), lines.join("\n")).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }
}
