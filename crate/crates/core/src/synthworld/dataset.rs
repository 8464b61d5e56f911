//! Rendered datasets and their `seed,n_agents` manifests.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::geometry::{CameraRig, GridSpec};
use crate::nets::HORIZON;

use super::{gen_scene, make_targets, rasterize_views, Result, Scene, Targets, WorldError, WorldParams};

/// Independent 64-bit seed for `(component, index)` under a root seed.
/// Each component gets its own ChaCha stream, each index its own block.
pub fn derive_seed(root: u64, component: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(component);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: Scene,
    /// One `H × W` image per camera.
    pub images: Vec<Vec<f32>>,
    pub targets: Targets,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub grid: GridSpec,
    pub image_hw: (usize, usize),
    pub cameras: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Renders one sample per seed, in order.
    pub fn from_seeds(seeds: &[u64], params: &WorldParams, rig: &CameraRig, grid: &GridSpec) -> Result<Self> {
        let samples = seeds
            .iter()
            .map(|&s| render_sample(gen_scene(s, params)?, rig, grid))
            .collect::<Result<_>>()?;
        Ok(Self {
            grid: *grid,
            image_hw: rig.image_size(),
            cameras: rig.len(),
            samples,
        })
    }

    /// `count` scenes with seeds drawn from `(root, component)`. Seeds whose
    /// placement fails are skipped, so the manifest records the seeds used.
    pub fn generate(
        root: u64,
        component: u64,
        count: usize,
        params: &WorldParams,
        rig: &CameraRig,
        grid: &GridSpec,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(count);
        let mut index = 0u64;
        while samples.len() < count {
            let seed = derive_seed(root, component, index);
            index += 1;
            match gen_scene(seed, params) {
                Ok(scene) => samples.push(render_sample(scene, rig, grid)?),
                Err(WorldError::Placement { .. }) if index < 100 * (count as u64 + 1) => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            grid: *grid,
            image_hw: rig.image_size(),
            cameras: rig.len(),
            samples,
        })
    }

    /// Rebuilds a dataset from manifest entries, checking agent counts.
    pub fn from_manifest(
        entries: &[(u64, usize)],
        params: &WorldParams,
        rig: &CameraRig,
        grid: &GridSpec,
    ) -> Result<Self> {
        let seeds: Vec<u64> = entries.iter().map(|e| e.0).collect();
        let ds = Self::from_seeds(&seeds, params, rig, grid)?;
        for (i, (s, &(_, n))) in ds.samples.iter().zip(entries).enumerate() {
            if s.scene.agents.len() != n {
                return Err(WorldError::Manifest {
                    line: i + 1,
                    reason: format!("seed {} yields {} agents, manifest says {n}", s.scene.seed, s.scene.agents.len()),
                });
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn manifest(&self) -> String {
        self.samples
            .iter()
            .map(|s| format!("{},{}\n", s.scene.seed, s.scene.agents.len()))
            .collect()
    }

    /// Images of the given samples stacked as `[1, B·C, H, W]`.
    pub fn batch_images(&self, indices: &[usize]) -> Tensor<f32> {
        let (h, w) = self.image_hw;
        let mut data = Vec::with_capacity(indices.len() * self.cameras * h * w);
        for &i in indices {
            for img in &self.samples[i].images {
                data.extend_from_slice(img);
            }
        }
        Tensor::from_vec(&[1, indices.len() * self.cameras, h, w], data).expect("image sizes fixed by the rig")
    }
}

fn render_sample(scene: Scene, rig: &CameraRig, grid: &GridSpec) -> Result<Sample> {
    let images = rasterize_views(&scene, rig);
    let targets = make_targets(&scene, grid, HORIZON)?;
    Ok(Sample { scene, images, targets })
}

/// Parses `seed,n_agents` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<(u64, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| WorldError::Manifest { line: i + 1, reason };
        let (seed, n) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("expected \"seed,n_agents\", got {line:?}")))?;
        let seed = seed.trim().parse().map_err(|e| bad(format!("seed: {e}")))?;
        let n = n.trim().parse().map_err(|e| bad(format!("n_agents: {e}")))?;
        out.push((seed, n));
    }
    Ok(out)
}
