//! Procedural DDSM-like patches: low-frequency textured background with
//! Gaussian blobs. Masses are a few large soft blobs, calcifications many
//! small bright speckles, normal patches background only.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchset::{
    save_patch_image, write_manifest_entries, LesionType, ManifestEntry, Patch, PatchMeta, PatchRecord,
    PathologyTag, PATCH_SIZE,
};

/// Background level around which the texture varies.
const BACKGROUND_LEVEL: f32 = 0.3;
/// Spacing of the value-noise control grid, in pixels.
const NOISE_CELL: usize = 16;
/// Amplitude of per-pixel grain added on top of the smooth texture.
const GRAIN: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    pub lesion_type: LesionType,
    /// Inclusive range.
    pub blob_count: (usize, usize),
    /// Blob radius range in pixels; the Gaussian sigma is half the radius.
    pub blob_radius: (f32, f32),
    /// Peak intensity added at a blob centre.
    pub blob_intensity: (f32, f32),
    pub background_noise_scale: f32,
}

impl ClassRecipe {
    pub fn mass() -> Self {
        ClassRecipe {
            lesion_type: LesionType::Mass,
            blob_count: (1, 3),
            blob_radius: (24.0, 40.0),
            blob_intensity: (0.35, 0.55),
            background_noise_scale: 0.15,
        }
    }

    pub fn calcification() -> Self {
        ClassRecipe {
            lesion_type: LesionType::Calcification,
            blob_count: (20, 40),
            blob_radius: (2.0, 3.5),
            blob_intensity: (0.5, 0.7),
            background_noise_scale: 0.15,
        }
    }

    pub fn normal() -> Self {
        ClassRecipe {
            lesion_type: LesionType::Normal,
            blob_count: (0, 0),
            blob_radius: (1.0, 1.0),
            blob_intensity: (0.0, 0.0),
            background_noise_scale: 0.15,
        }
    }

    pub fn default_for(lesion_type: LesionType) -> Self {
        match lesion_type {
            LesionType::Mass => Self::mass(),
            LesionType::Calcification => Self::calcification(),
            LesionType::Normal => Self::normal(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c0, c1) = self.blob_count;
        let (r0, r1) = self.blob_radius;
        let (i0, i1) = self.blob_intensity;
        if c0 > c1 || r0 > r1 || i0 > i1 {
            return Err(Error::Config("recipe ranges must be ordered (min <= max)".into()));
        }
        if !(r0 > 0.0) || !r1.is_finite() {
            return Err(Error::Config("blob radius range must be positive".into()));
        }
        if i0 < 0.0 || !i1.is_finite() {
            return Err(Error::Config("blob intensity must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.background_noise_scale) {
            return Err(Error::Config("background noise scale must lie in [0, 1]".into()));
        }
        match self.lesion_type {
            LesionType::Normal if c1 > 0 => Err(Error::Config("normal recipes must not draw blobs".into())),
            LesionType::Mass | LesionType::Calcification if c0 == 0 => {
                Err(Error::Config("lesion recipes must draw at least one blob".into()))
            }
            _ => Ok(()),
        }
    }
}

/// A blob as drawn: centre (row, col), radius and peak intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub row: f32,
    pub col: f32,
    pub radius: f32,
    pub intensity: f32,
}

impl Blob {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dr = row as f32 - self.row;
        let dc = col as f32 - self.col;
        dr * dr + dc * dc <= self.radius * self.radius
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Zero-mean smooth value noise: random control grid, smoothstep-bilinear
/// interpolation, then centred so the patch mean stays at the background level.
fn value_noise(rng: &mut impl Rng, scale: f32) -> Array2<f32> {
    let cells = PATCH_SIZE / NOISE_CELL + 1;
    let grid = Array2::from_shape_fn((cells, cells), |_| rng.random_range(-1.0f32..1.0));
    let mut out = Array2::from_shape_fn((PATCH_SIZE, PATCH_SIZE), |(r, c)| {
        let (gr, fr) = (r / NOISE_CELL, smoothstep((r % NOISE_CELL) as f32 / NOISE_CELL as f32));
        let (gc, fc) = (c / NOISE_CELL, smoothstep((c % NOISE_CELL) as f32 / NOISE_CELL as f32));
        let top = grid[[gr, gc]] * (1.0 - fc) + grid[[gr, gc + 1]] * fc;
        let bottom = grid[[gr + 1, gc]] * (1.0 - fc) + grid[[gr + 1, gc + 1]] * fc;
        top * (1.0 - fr) + bottom * fr
    });
    let mean = out.mean().unwrap_or(0.0);
    out.mapv_inplace(|v| (v - mean) * scale);
    out
}

/// Renders one patch, returning the image and the blobs drawn into it.
pub fn render_patch(recipe: &ClassRecipe, rng: &mut impl Rng) -> Result<(Patch, Vec<Blob>)> {
    recipe.validate()?;
    let mut image = value_noise(rng, recipe.background_noise_scale);
    image.mapv_inplace(|v| v + BACKGROUND_LEVEL + rng.random_range(-GRAIN..GRAIN));

    let (lo, hi) = recipe.blob_count;
    let count = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = uniform(rng, recipe.blob_radius);
        let margin = (radius * 0.5).min(PATCH_SIZE as f32 / 4.0);
        let blob = Blob {
            row: rng.random_range(margin..PATCH_SIZE as f32 - margin),
            col: rng.random_range(margin..PATCH_SIZE as f32 - margin),
            radius,
            intensity: uniform(rng, recipe.blob_intensity),
        };
        draw_blob(&mut image, &blob);
        blobs.push(blob);
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok((image, blobs))
}

fn draw_blob(image: &mut Patch, blob: &Blob) {
    let sigma = blob.radius / 2.0;
    let reach = (3.0 * sigma).ceil() as isize;
    let (cr, cc) = (blob.row.round() as isize, blob.col.round() as isize);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let n = PATCH_SIZE as isize;
    for r in (cr - reach).max(0)..(cr + reach + 1).min(n) {
        for c in (cc - reach).max(0)..(cc + reach + 1).min(n) {
            let dr = r as f32 - blob.row;
            let dc = c as f32 - blob.col;
            image[[r as usize, c as usize]] += blob.intensity * (-(dr * dr + dc * dc) * inv).exp();
        }
    }
}

// Pathology mix per lesion type, proportional to the DDSM patch counts:
// malignant, benign without callback, benign, unproven.
const CALCIFICATION_TAGS: [usize; 4] = [797, 539, 800, 16];
const MASS_TAGS: [usize; 4] = [1075, 179, 1079, 21];

fn draw_pathology(lesion: LesionType, rng: &mut impl Rng) -> PathologyTag {
    let weights = match lesion {
        LesionType::Normal => return PathologyTag::None,
        LesionType::Mass => MASS_TAGS,
        LesionType::Calcification => CALCIFICATION_TAGS,
    };
    let tags = [
        PathologyTag::Malignant,
        PathologyTag::BenignWithoutCallback,
        PathologyTag::Benign,
        PathologyTag::Unproven,
    ];
    let mut pick = rng.random_range(0..weights.iter().sum::<usize>());
    for (tag, w) in tags.iter().zip(weights) {
        if pick < w {
            return *tag;
        }
        pick -= w;
    }
    unreachable!("pick is below the weight total")
}

fn draw_meta(id: String, lesion: LesionType, rng: &mut impl Rng) -> PatchMeta {
    let tag = draw_pathology(lesion, rng);
    let birads = match lesion {
        LesionType::Normal => None,
        _ => Some(rng.random_range(1..=5u8)),
    };
    PatchMeta::new(id, lesion, tag, birads).expect("generated metadata is consistent")
}

/// One labelled patch, fully determined by `(recipe, seed)`.
pub fn generate_patch(recipe: &ClassRecipe, seed: u64) -> Result<PatchRecord> {
    let id = format!("{}-s{seed}", recipe.lesion_type);
    generate_with_id(recipe, id, seed)
}

fn generate_with_id(recipe: &ClassRecipe, id: String, seed: u64) -> Result<PatchRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = draw_meta(id, recipe.lesion_type, &mut rng);
    let (image, _) = render_patch(recipe, &mut rng)?;
    PatchRecord::new(meta, image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCounts {
    pub mass: usize,
    pub calcification: usize,
    pub normal: usize,
}

impl SynthCounts {
    /// The DDSM patch corpus: 2,354 mass, 2,152 calcification, 6,207 normal.
    pub fn table1() -> Self {
        SynthCounts {
            mass: 2354,
            calcification: 2152,
            normal: 6207,
        }
    }

    /// DDSM class proportions scaled to `total` patches (largest remainder).
    pub fn table1_proportions(total: usize) -> Self {
        let base = Self::table1();
        let weights = [base.mass, base.calcification, base.normal];
        let sum: usize = weights.iter().sum();
        let exact: Vec<f64> = weights.iter().map(|&w| w as f64 * total as f64 / sum as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        let short = total - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        SynthCounts {
            mass: counts[0],
            calcification: counts[1],
            normal: counts[2],
        }
    }

    pub fn get(&self, lesion: LesionType) -> usize {
        match lesion {
            LesionType::Mass => self.mass,
            LesionType::Calcification => self.calcification,
            LesionType::Normal => self.normal,
        }
    }

    pub fn total(&self) -> usize {
        self.mass + self.calcification + self.normal
    }
}

/// SplitMix64 finaliser, used to derive independent per-record seeds.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `(id, lesion type, per-record seed)` plan shared by the in-memory and
/// on-disk generators.
fn plan(counts: SynthCounts) -> impl Iterator<Item = (String, LesionType, u64)> {
    LesionType::ALL.into_iter().flat_map(move |lesion| {
        (0..counts.get(lesion)).map(move |i| (format!("{lesion}-{i:05}"), lesion, i as u64))
    })
}

/// Metadata only, identical to what [`generate_dataset`] would attach.
pub fn generate_metadata(counts: SynthCounts, seed: u64) -> Vec<PatchMeta> {
    plan(counts)
        .map(|(id, lesion, i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, lesion as u64, i));
            draw_meta(id, lesion, &mut rng)
        })
        .collect()
}

/// A labelled corpus with exactly the requested class counts.
pub fn generate_dataset(counts: SynthCounts, seed: u64) -> Result<Vec<PatchRecord>> {
    plan(counts)
        .map(|(id, lesion, i)| {
            generate_with_id(&ClassRecipe::default_for(lesion), id, mix(seed, lesion as u64, i))
        })
        .collect()
}

/// Streams a generated corpus to `dir/images/*.png` plus `dir/manifest.csv`.
pub fn write_dataset(counts: SynthCounts, seed: u64, dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(format!("creating {}", images.display()), e))?;
    let mut entries = Vec::with_capacity(counts.total());
    for (id, lesion, i) in plan(counts) {
        let record = generate_with_id(&ClassRecipe::default_for(lesion), id, mix(seed, lesion as u64, i))?;
        let relative = Path::new("images").join(format!("{}.png", record.meta.id));
        save_patch_image(&record.image, dir.join(&relative))?;
        entries.push(ManifestEntry {
            meta: record.meta,
            image_path: relative,
        });
    }
    write_manifest_entries(&entries, dir.join("manifest.csv"))?;
    Ok(entries)
}
