//! Precomputed features, split manifests and batching.
//!
//! On-disk layout of one split:
//!
//! ```text
//! <root>/<split>/manifest.json          image -> five caption ids, dims, folds
//! <root>/<split>/regions.safetensors    "regions"      [n_img × K × d_I]  f32
//! <root>/<split>/tokens.safetensors     "tokens"       [Σ l × d_T]        f32
//!                                       "offsets"      [n_cap + 1]        i64
//! <root>/<split>/clip_global.safetensors "clip_global" [n_img × d_Ic]     f32 (optional)
//! ```
//!
//! Each container carries the row ids in its metadata, so the manifest may
//! list images and captions in any order.

pub mod format;
pub mod synthetic;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Segments;
use crate::error::DataError;
use crate::real::Real;
use crate::visual_encoder::ClipInput;

use format::{Container, RawTensor};

pub const CAPTIONS_PER_IMAGE: usize = 5;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REGIONS_FILE: &str = "regions.safetensors";
pub const TOKENS_FILE: &str = "tokens.safetensors";
pub const CLIP_FILE: &str = "clip_global.safetensors";

/// K region vectors of one image and, when available, its pooled CLIP vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureSet<F> {
    pub image_id: String,
    /// `[K × d_I]`
    pub regions: Array2<F>,
    pub clip_global: Option<Array1<F>>,
}

/// Word-level features of one caption. `tokens` may hold padding rows past
/// `length`; those never reach the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatureSet<F> {
    pub caption_id: String,
    pub image_id: String,
    pub tokens: Array2<F>,
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub num_regions: usize,
    pub d_i: usize,
    pub d_t: usize,
    pub d_ic: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: String,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: String,
    pub dims: FeatureDims,
    /// Number of folds for the fold-averaged protocol.
    pub folds: usize,
    pub images: Vec<ManifestImage>,
}

impl SplitManifest {
    pub fn has_clip(&self) -> bool {
        self.dims.d_ic.is_some()
    }

    pub fn num_captions(&self) -> usize {
        self.images.iter().map(|i| i.captions.len()).sum()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.images.is_empty() {
            return Err(DataError::Manifest(format!("split `{}` has no images", self.split)));
        }
        if self.dims.num_regions == 0 {
            return Err(DataError::Manifest("K must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for img in &self.images {
            if img.captions.len() != CAPTIONS_PER_IMAGE {
                return Err(DataError::Manifest(format!(
                    "image `{}` has {} captions, expected {CAPTIONS_PER_IMAGE}",
                    img.image_id,
                    img.captions.len()
                )));
            }
            if !seen.insert(img.image_id.clone()) {
                return Err(DataError::Manifest(format!("duplicate image id `{}`", img.image_id)));
            }
            for c in &img.captions {
                if !seen.insert(format!("caption:{c}")) {
                    return Err(DataError::Manifest(format!("duplicate caption id `{c}`")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IdMeta {
    ids: Vec<String>,
}

/// Dimensions a caller requires; `None` fields are not checked.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpectedDims {
    pub num_regions: Option<usize>,
    pub d_i: Option<usize>,
    pub d_t: Option<usize>,
    pub d_ic: Option<usize>,
    pub max_length: Option<usize>,
    pub require_clip: bool,
}

/// One loaded split, images and captions in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    manifest: SplitManifest,
    images: Vec<RegionFeatureSet<F>>,
    captions: Vec<TokenFeatureSet<F>>,
    caption_image: Vec<usize>,
    caption_index: HashMap<String, usize>,
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

fn mismatch(id: &str, expected: impl ToString, found: impl ToString) -> DataError {
    DataError::DimensionMismatch {
        id: id.to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

impl<F: Real> Dataset<F> {
    /// Loads and validates one split.
    pub fn load(root: &Path, split: &str, expected: &ExpectedDims) -> Result<Self, DataError> {
        let dir = split_dir(root, split);
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(DataError::MissingFile(manifest_path));
        }
        let text = std::fs::read_to_string(&manifest_path).map_err(|source| DataError::Io {
            path: manifest_path.clone(),
            source,
        })?;
        let manifest: SplitManifest = serde_json::from_str(&text)
            .map_err(|e| DataError::Manifest(format!("{}: {e}", manifest_path.display())))?;
        manifest.validate()?;
        let dims = manifest.dims;
        let first_id = manifest.images[0].image_id.clone();
        let check = |want: Option<usize>, have: usize, what: &str| -> Result<(), DataError> {
            match want {
                Some(w) if w != have => Err(mismatch(&first_id, format!("{what}={w}"), format!("{what}={have}"))),
                _ => Ok(()),
            }
        };
        check(expected.num_regions, dims.num_regions, "K")?;
        check(expected.d_i, dims.d_i, "d_I")?;
        check(expected.d_t, dims.d_t, "d_T")?;
        if expected.require_clip && dims.d_ic.is_none() {
            return Err(DataError::Manifest(format!(
                "split `{split}` has no CLIP global features but they are required"
            )));
        }
        if let (Some(want), Some(have)) = (expected.d_ic, dims.d_ic) {
            if want != have {
                return Err(mismatch(&first_id, format!("d_Ic={want}"), format!("d_Ic={have}")));
            }
        }

        // regions
        let regions = Container::open(&dir.join(REGIONS_FILE))?;
        let region_ids = regions.meta::<IdMeta>()?.ids;
        let (shape, values) = regions.real::<F>("regions")?;
        if shape.len() != 3 || shape[0] != region_ids.len() {
            return Err(DataError::Format {
                path: dir.join(REGIONS_FILE),
                message: format!("regions shape {shape:?} for {} ids", region_ids.len()),
            });
        }
        let (k, d_i) = (shape[1], shape[2]);
        let region_row: HashMap<&str, usize> =
            region_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

        let clip = if dims.d_ic.is_some() {
            let c = Container::open(&dir.join(CLIP_FILE))?;
            let ids = c.meta::<IdMeta>()?.ids;
            let (shape, values) = c.real::<F>("clip_global")?;
            if shape.len() != 2 || shape[0] != ids.len() {
                return Err(DataError::Format {
                    path: dir.join(CLIP_FILE),
                    message: format!("clip_global shape {shape:?} for {} ids", ids.len()),
                });
            }
            let rows: HashMap<String, usize> =
                ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
            Some((shape[1], values, rows))
        } else {
            None
        };

        let mut images = Vec::with_capacity(manifest.images.len());
        for img in &manifest.images {
            let id = img.image_id.as_str();
            let row = *region_row
                .get(id)
                .ok_or_else(|| DataError::UnknownId(id.to_string()))?;
            if k != dims.num_regions {
                return Err(mismatch(id, format!("K={}", dims.num_regions), format!("K={k}")));
            }
            if d_i != dims.d_i {
                return Err(mismatch(id, format!("d_I={}", dims.d_i), format!("d_I={d_i}")));
            }
            let block = &values[row * k * d_i..(row + 1) * k * d_i];
            if block.iter().any(|x| !x.is_finite()) {
                return Err(DataError::NonFinite(id.to_string()));
            }
            let clip_global = match &clip {
                Some((d_ic, values, rows)) => {
                    let r = *rows
                        .get(id)
                        .ok_or_else(|| DataError::UnknownId(id.to_string()))?;
                    if Some(*d_ic) != dims.d_ic {
                        return Err(mismatch(id, format!("d_Ic={:?}", dims.d_ic), format!("d_Ic={d_ic}")));
                    }
                    let v = &values[r * d_ic..(r + 1) * d_ic];
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(DataError::NonFinite(id.to_string()));
                    }
                    Some(Array1::from(v.to_vec()))
                }
                None => None,
            };
            images.push(RegionFeatureSet {
                image_id: id.to_string(),
                regions: Array2::from_shape_vec((k, d_i), block.to_vec()).expect("block shape"),
                clip_global,
            });
        }

        // tokens
        let tokens = Container::open(&dir.join(TOKENS_FILE))?;
        let caption_ids = tokens.meta::<IdMeta>()?.ids;
        let (shape, values) = tokens.real::<F>("tokens")?;
        let offsets = tokens.i64("offsets")?;
        if shape.len() != 2 || offsets.len() != caption_ids.len() + 1 {
            return Err(DataError::Format {
                path: dir.join(TOKENS_FILE),
                message: format!(
                    "tokens shape {shape:?} with {} offsets for {} ids",
                    offsets.len(),
                    caption_ids.len()
                ),
            });
        }
        let d_t = shape[1];
        let caption_row: HashMap<&str, usize> =
            caption_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut captions = Vec::with_capacity(manifest.num_captions());
        let mut caption_image = Vec::with_capacity(manifest.num_captions());
        for (ii, img) in manifest.images.iter().enumerate() {
            for cid in &img.captions {
                let row = *caption_row
                    .get(cid.as_str())
                    .ok_or_else(|| DataError::UnknownId(cid.clone()))?;
                if d_t != dims.d_t {
                    return Err(mismatch(cid, format!("d_T={}", dims.d_t), format!("d_T={d_t}")));
                }
                let (a, b) = (offsets[row] as usize, offsets[row + 1] as usize);
                if b <= a || b * d_t > values.len() {
                    return Err(DataError::Format {
                        path: dir.join(TOKENS_FILE),
                        message: format!("caption `{cid}` has invalid token range {a}..{b}"),
                    });
                }
                let length = b - a;
                if let Some(max) = expected.max_length {
                    if length > max {
                        return Err(mismatch(cid, format!("length<={max}"), format!("length={length}")));
                    }
                }
                let block = &values[a * d_t..b * d_t];
                if block.iter().any(|x| !x.is_finite()) {
                    return Err(DataError::NonFinite(cid.clone()));
                }
                captions.push(TokenFeatureSet {
                    caption_id: cid.clone(),
                    image_id: img.image_id.clone(),
                    tokens: Array2::from_shape_vec((length, d_t), block.to_vec()).expect("block shape"),
                    length,
                });
                caption_image.push(ii);
            }
        }
        let caption_index = captions
            .iter()
            .enumerate()
            .map(|(i, c)| (c.caption_id.clone(), i))
            .collect();
        Ok(Self {
            manifest,
            images,
            captions,
            caption_image,
            caption_index,
        })
    }

    /// Builds a dataset from in-memory parts, e.g. before writing it.
    pub fn from_parts(
        manifest: SplitManifest,
        images: Vec<RegionFeatureSet<F>>,
        captions: Vec<TokenFeatureSet<F>>,
    ) -> Result<Self, DataError> {
        manifest.validate()?;
        if images.len() != manifest.images.len() || captions.len() != manifest.num_captions() {
            return Err(DataError::Manifest("parts do not match manifest".into()));
        }
        let mut caption_image = Vec::with_capacity(captions.len());
        let mut c = 0;
        for (ii, img) in manifest.images.iter().enumerate() {
            if images[ii].image_id != img.image_id {
                return Err(DataError::UnknownId(images[ii].image_id.clone()));
            }
            for cid in &img.captions {
                if &captions[c].caption_id != cid {
                    return Err(DataError::UnknownId(captions[c].caption_id.clone()));
                }
                caption_image.push(ii);
                c += 1;
            }
        }
        let caption_index = captions
            .iter()
            .enumerate()
            .map(|(i, c)| (c.caption_id.clone(), i))
            .collect();
        Ok(Self {
            manifest,
            images,
            captions,
            caption_image,
            caption_index,
        })
    }

    /// Writes the split in the on-disk layout (32-bit reals).
    pub fn save(&self, root: &Path) -> Result<(), DataError> {
        let dir = split_dir(root, &self.manifest.split);
        std::fs::create_dir_all(&dir).map_err(|source| DataError::Io {
            path: dir.clone(),
            source,
        })?;
        let dims = self.manifest.dims;
        let to32 = |x: &F| x.to_f32().unwrap_or(f32::NAN);
        let mut regions = Vec::with_capacity(self.images.len() * dims.num_regions * dims.d_i);
        for img in &self.images {
            regions.extend(img.regions.iter().map(to32));
        }
        format::write_container(
            &dir.join(REGIONS_FILE),
            &[RawTensor::f32(
                "regions",
                vec![self.images.len(), dims.num_regions, dims.d_i],
                &regions,
            )],
            &IdMeta {
                ids: self.images.iter().map(|i| i.image_id.clone()).collect(),
            },
        )?;
        if let Some(d_ic) = dims.d_ic {
            let mut clip = Vec::with_capacity(self.images.len() * d_ic);
            for img in &self.images {
                let v = img
                    .clip_global
                    .as_ref()
                    .ok_or_else(|| DataError::Manifest(format!("image `{}` lacks CLIP vector", img.image_id)))?;
                clip.extend(v.iter().map(to32));
            }
            format::write_container(
                &dir.join(CLIP_FILE),
                &[RawTensor::f32("clip_global", vec![self.images.len(), d_ic], &clip)],
                &IdMeta {
                    ids: self.images.iter().map(|i| i.image_id.clone()).collect(),
                },
            )?;
        }
        let mut tokens = Vec::new();
        let mut offsets = vec![0i64];
        for c in &self.captions {
            tokens.extend(c.tokens.slice(s![..c.length, ..]).iter().map(to32));
            offsets.push(offsets.last().unwrap() + c.length as i64);
        }
        format::write_container(
            &dir.join(TOKENS_FILE),
            &[
                RawTensor::f32("tokens", vec![*offsets.last().unwrap() as usize, dims.d_t], &tokens),
                RawTensor::i64("offsets", &offsets),
            ],
            &IdMeta {
                ids: self.captions.iter().map(|c| c.caption_id.clone()).collect(),
            },
        )?;
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| DataError::Manifest(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), json + "\n").map_err(|source| DataError::Io {
            path: dir.join(MANIFEST_FILE),
            source,
        })
    }

    pub fn manifest(&self) -> &SplitManifest {
        &self.manifest
    }

    pub fn dims(&self) -> FeatureDims {
        self.manifest.dims
    }

    pub fn images(&self) -> &[RegionFeatureSet<F>] {
        &self.images
    }

    pub fn captions(&self) -> &[TokenFeatureSet<F>] {
        &self.captions
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.captions.len()
    }

    pub fn caption(&self, id: &str) -> Option<&TokenFeatureSet<F>> {
        self.caption_index.get(id).map(|&i| &self.captions[i])
    }

    /// Index of the image each caption describes.
    pub fn caption_image(&self) -> &[usize] {
        &self.caption_image
    }

    /// Caption indices of every image.
    pub fn ground_truth(&self) -> Vec<Vec<usize>> {
        let mut gt = vec![Vec::new(); self.images.len()];
        for (c, &i) in self.caption_image.iter().enumerate() {
            gt[i].push(c);
        }
        gt
    }

    /// Every (image, caption) pair, caption-major in manifest order.
    pub fn pairs(&self) -> impl Iterator<Item = (&RegionFeatureSet<F>, &TokenFeatureSet<F>)> {
        self.captions
            .iter()
            .zip(&self.caption_image)
            .map(|(c, &i)| (&self.images[i], c))
    }

    /// Batch of positive pairs: row `b` of the image side matches row `b`
    /// of the caption side.
    pub fn batch(&self, pair_indices: &[usize]) -> Batch<F> {
        let images: Vec<usize> = pair_indices.iter().map(|&p| self.caption_image[p]).collect();
        Batch {
            pair_indices: pair_indices.to_vec(),
            images: self.image_batch(&images),
            captions: self.caption_batch(pair_indices),
        }
    }

    pub fn image_batch(&self, indices: &[usize]) -> ImageBatch<F> {
        let k = self.manifest.dims.num_regions;
        let d_i = self.manifest.dims.d_i;
        let mut regions = Array2::zeros((indices.len() * k, d_i));
        for (b, &i) in indices.iter().enumerate() {
            regions
                .slice_mut(s![b * k..(b + 1) * k, ..])
                .assign(&self.images[i].regions);
        }
        let clip = self.manifest.dims.d_ic.map(|d_ic| {
            let mut m = Array2::zeros((indices.len(), d_ic));
            for (b, &i) in indices.iter().enumerate() {
                if let Some(v) = &self.images[i].clip_global {
                    m.row_mut(b).assign(v);
                }
            }
            ClipInput::Pooled(m)
        });
        ImageBatch {
            ids: indices.iter().map(|&i| self.images[i].image_id.clone()).collect(),
            regions,
            segments: Segments::uniform(indices.len(), k),
            clip,
        }
    }

    pub fn caption_batch(&self, indices: &[usize]) -> CaptionBatch<F> {
        let lengths: Vec<usize> = indices.iter().map(|&c| self.captions[c].length).collect();
        let segments = Segments::from_lengths(&lengths);
        let mut tokens = Array2::zeros((segments.total(), self.manifest.dims.d_t));
        for (b, &c) in indices.iter().enumerate() {
            let cap = &self.captions[c];
            tokens
                .slice_mut(s![segments.range(b), ..])
                .assign(&cap.tokens.slice(s![..cap.length, ..]));
        }
        CaptionBatch {
            ids: indices.iter().map(|&c| self.captions[c].caption_id.clone()).collect(),
            tokens,
            segments,
        }
    }

    /// Contiguous subset of images (with their captions), used for folds.
    pub fn subset(&self, image_range: std::ops::Range<usize>, split: &str) -> Result<Self, DataError> {
        let mut manifest = self.manifest.clone();
        manifest.split = split.to_string();
        manifest.images = self.manifest.images[image_range.clone()].to_vec();
        let images = self.images[image_range.clone()].to_vec();
        let captions = self
            .captions
            .iter()
            .zip(&self.caption_image)
            .filter(|(_, &i)| image_range.contains(&i))
            .map(|(c, _)| c.clone())
            .collect();
        Self::from_parts(manifest, images, captions)
    }
}

pub struct ImageBatch<F> {
    pub ids: Vec<String>,
    /// `[B·K × d_I]`
    pub regions: Array2<F>,
    pub segments: Segments,
    pub clip: Option<ClipInput<F>>,
}

pub struct CaptionBatch<F> {
    pub ids: Vec<String>,
    /// `[Σ l_b × d_T]`, no padding.
    pub tokens: Array2<F>,
    pub segments: Segments,
}

impl<F: Real> CaptionBatch<F> {
    /// Dense `[B × l_max × d_T]` view with a `[B × l_max]` 0/1 length mask.
    pub fn padded(&self, l_max: usize) -> (Array3<F>, Array2<F>) {
        let b = self.segments.count();
        let d = self.tokens.ncols();
        let mut out = Array3::zeros((b, l_max, d));
        let mut mask = Array2::zeros((b, l_max));
        for i in 0..b {
            let r = self.segments.range(i);
            let n = r.len().min(l_max);
            out.slice_mut(s![i, ..n, ..])
                .assign(&self.tokens.slice(s![r.start..r.start + n, ..]));
            mask.slice_mut(s![i, ..n]).fill(F::one());
        }
        (out, mask)
    }
}

pub struct Batch<F> {
    pub pair_indices: Vec<usize>,
    pub images: ImageBatch<F>,
    pub captions: CaptionBatch<F>,
}

impl<F> Batch<F> {
    pub fn len(&self) -> usize {
        self.pair_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_indices.is_empty()
    }
}

/// Pair order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(num_pairs: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_pairs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Splits `order` into batches of `batch_size`; the trailing partial batch
/// is dropped when `drop_last` is set.
pub fn batch_slices(order: &[usize], batch_size: usize, drop_last: bool) -> Vec<&[usize]> {
    order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .collect()
}

/// Loads one split and returns its aligned (image, caption) pairs.
pub fn load_dataset<F: Real>(
    root: &Path,
    split: &str,
    expected: &ExpectedDims,
) -> Result<Vec<(RegionFeatureSet<F>, TokenFeatureSet<F>)>, DataError> {
    let ds = Dataset::<F>::load(root, split, expected)?;
    Ok(ds.pairs().map(|(i, c)| (i.clone(), c.clone())).collect())
}
