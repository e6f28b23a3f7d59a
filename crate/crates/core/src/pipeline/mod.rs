//! Montage batch construction.
//!
//! Images are split into `m × m` patches (see [`compute_grid`]), each patch is
//! augmented, the `n·m·m` patches of the batch are shuffled by one uniform
//! permutation and written slot by slot into `n` montage images. Patch `g`
//! always means `src_image · m·m + src_location`, with locations numbered
//! row-major from the top-left.

mod augment;
mod grid;
mod task;

pub use augment::{apply_ops, resize_bilinear, AugOp, AugPolicy, AugPosition};
pub use grid::{compute_grid, GridSpec};
pub use task::{AugPreset, TaskConfig};

use ndarray::{s, Array3, Array4, ArrayView3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// `n` square RGB images of equal side, pixel values in `[0, 1]`, HWC layout.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    images: Vec<Array3<f32>>,
    side: usize,
}

impl ImageBatch {
    pub fn new(images: Vec<Array3<f32>>) -> Result<Self> {
        if images.len() < 2 {
            return Err(Error::Invalid(format!("a batch needs at least 2 images, got {}", images.len())));
        }
        let (h, w, c) = images[0].dim();
        if h != w || c != 3 {
            return Err(Error::Shape(format!("images must be square RGB, got {h}x{w}x{c}")));
        }
        if let Some(i) = images.iter().position(|im| im.dim() != (h, w, c)) {
            return Err(Error::Shape(format!("image {i} has shape {:?}, expected {:?}", images[i].dim(), (h, w, c))));
        }
        Ok(ImageBatch { images, side: h })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn images(&self) -> &[Array3<f32>] {
        &self.images
    }
}

/// One patch together with the identity used for both labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub src_image: usize,
    pub src_location: usize,
    pub pixels: Array3<f32>,
}

/// A bijection on `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &v in &map {
            if v >= map.len() || std::mem::replace(&mut seen[v], true) {
                return Err(Error::Invalid("permutation is not a bijection".into()));
            }
        }
        Ok(Permutation(map))
    }

    pub fn identity(len: usize) -> Self {
        Permutation((0..len).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &v) in self.0.iter().enumerate() {
            inv[v] = i;
        }
        Permutation(inv)
    }

    pub fn compose(&self, other: &Permutation) -> Permutation {
        Permutation(other.0.iter().map(|&i| self.0[i]).collect())
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

/// `n` montages with per-slot labels. Slot `p` of montage `j` holds patch
/// `permutation[j·m·m + p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MontageBatch {
    pub montages: Vec<Array3<f32>>,
    pub m: usize,
    pub side: usize,
    /// Source image of each slot, flattened montage-major.
    pub cluster_ids: Vec<usize>,
    /// Source location of each slot, flattened montage-major.
    pub location_ids: Vec<usize>,
    pub permutation: Permutation,
}

impl MontageBatch {
    pub fn len(&self) -> usize {
        self.montages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.montages.is_empty()
    }

    pub fn slot_side(&self) -> usize {
        self.side / self.m
    }

    pub fn slot(&self, montage: usize, slot: usize) -> ArrayView3<'_, f32> {
        let k = self.slot_side();
        let (r, c) = (slot / self.m, slot % self.m);
        self.montages[montage].slice(s![r * k..(r + 1) * k, c * k..(c + 1) * k, ..])
    }

    pub fn cluster_rows(&self) -> Vec<Vec<usize>> {
        self.cluster_ids.chunks(self.m * self.m).map(<[usize]>::to_vec).collect()
    }

    pub fn location_rows(&self) -> Vec<Vec<usize>> {
        self.location_ids.chunks(self.m * self.m).map(<[usize]>::to_vec).collect()
    }

    /// NCHW tensor of the montages.
    pub fn to_tensor(&self) -> Array4<f32> {
        images_to_tensor(&self.montages)
    }

    /// SHA-256 over pixels, labels and permutation.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.m as u64).to_le_bytes());
        for img in &self.montages {
            for v in img.iter() {
                h.update(v.to_le_bytes());
            }
        }
        for ids in [&self.cluster_ids, &self.location_ids, &self.permutation.0] {
            for v in ids.iter() {
                h.update((*v as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Input format for the pretext network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    /// `n` montage images of side `L`.
    Montage,
    /// `n·m·m` separate images of slot side.
    SmallPatch,
    /// `n·m·m` separate images resized up to side `L`.
    ScaledUp,
}

impl InputFormat {
    pub const ALL: [InputFormat; 3] = [InputFormat::SmallPatch, InputFormat::ScaledUp, InputFormat::Montage];

    pub fn name(self) -> &'static str {
        match self {
            InputFormat::Montage => "montage",
            InputFormat::SmallPatch => "small_patch",
            InputFormat::ScaledUp => "scaled_up",
        }
    }
}

/// Shuffled patches fed to the network as separate images, one per slot
/// label, in the same order as a montage batch would flatten them.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub images: Vec<Array3<f32>>,
    pub m: usize,
    pub side: usize,
    pub cluster_ids: Vec<usize>,
    pub location_ids: Vec<usize>,
    pub permutation: Permutation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BuiltBatch {
    Montage(MontageBatch),
    Patches(PatchBatch),
}

impl BuiltBatch {
    /// Network input tensor and the number of slots per side of each input image.
    pub fn network_input(&self) -> (Array4<f32>, usize) {
        match self {
            BuiltBatch::Montage(b) => (b.to_tensor(), b.m),
            BuiltBatch::Patches(b) => (images_to_tensor(&b.images), 1),
        }
    }

    pub fn cluster_ids(&self) -> &[usize] {
        match self {
            BuiltBatch::Montage(b) => &b.cluster_ids,
            BuiltBatch::Patches(b) => &b.cluster_ids,
        }
    }

    pub fn location_ids(&self) -> &[usize] {
        match self {
            BuiltBatch::Montage(b) => &b.location_ids,
            BuiltBatch::Patches(b) => &b.location_ids,
        }
    }

    pub fn m(&self) -> usize {
        match self {
            BuiltBatch::Montage(b) => b.m,
            BuiltBatch::Patches(b) => b.m,
        }
    }

    pub fn pixel_count(&self) -> usize {
        match self {
            BuiltBatch::Montage(b) => b.montages.iter().map(|i| i.len()).sum(),
            BuiltBatch::Patches(b) => b.images.iter().map(|i| i.len()).sum(),
        }
    }

    pub fn into_montage(self) -> Option<MontageBatch> {
        match self {
            BuiltBatch::Montage(b) => Some(b),
            BuiltBatch::Patches(_) => None,
        }
    }
}

pub fn images_to_tensor(images: &[Array3<f32>]) -> Array4<f32> {
    let (h, w, c) = images.first().map_or((0, 0, 0), |i| i.dim());
    let mut t = Array4::<f32>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        t.slice_mut(s![i, .., .., ..]).assign(&img.view().permuted_axes([2, 0, 1]));
    }
    t
}

/// Cuts `image` into `m·m` patches of side `grid.patch`, row-major.
pub fn split_image(image: ArrayView3<'_, f32>, grid: &GridSpec, src_image: usize) -> Result<Vec<PatchRecord>> {
    let (h, w, _) = image.dim();
    if h != grid.side || w != grid.side {
        return Err(Error::Shape(format!("image is {h}x{w}, grid expects side {}", grid.side)));
    }
    let mut out = Vec::with_capacity(grid.slots());
    for (r, &top) in grid.starts.iter().enumerate() {
        for (c, &left) in grid.starts.iter().enumerate() {
            out.push(PatchRecord {
                src_image,
                src_location: r * grid.m + c,
                pixels: image
                    .slice(s![top..top + grid.patch, left..left + grid.patch, ..])
                    .to_owned(),
            });
        }
    }
    Ok(out)
}

/// Augments one split patch independently; the output has the slot side.
pub fn augment_patch<R: Rng>(patch: &PatchRecord, policy: &AugPolicy, grid: &GridSpec, rng: &mut R) -> Result<PatchRecord> {
    if policy.position != AugPosition::AfterSplit {
        return Err(Error::Invalid(format!(
            "per-patch augmentation requires position after_split, got {}",
            policy.position.name()
        )));
    }
    if patch.pixels.dim().0 != grid.patch || patch.pixels.dim().1 != grid.patch {
        return Err(Error::Shape(format!(
            "patch side {} does not match grid patch side {}",
            patch.pixels.dim().0,
            grid.patch
        )));
    }
    if policy.output_side != grid.slot {
        return Err(Error::Invalid(format!(
            "after_split output side {} must equal slot side {}",
            policy.output_side, grid.slot
        )));
    }
    Ok(PatchRecord {
        src_image: patch.src_image,
        src_location: patch.src_location,
        pixels: apply_ops(patch.pixels.view(), &policy.ops, grid.slot, rng)?,
    })
}

/// Uniform random permutation of `0..count` (Fisher–Yates).
pub fn permute_patches<R: Rng>(count: usize, rng: &mut R) -> Permutation {
    let mut v: Vec<usize> = (0..count).collect();
    v.shuffle(rng);
    Permutation(v)
}

/// Writes the patches into montages according to `perm`.
///
/// `patches` must be indexed by `src_image·m·m + src_location` and have slot side.
pub fn assemble_montage(patches: &[PatchRecord], perm: &Permutation, n: usize, m: usize) -> Result<MontageBatch> {
    let mm = m * m;
    if patches.len() != n * mm || perm.len() != n * mm {
        return Err(Error::Shape(format!(
            "expected {} patches and permutation entries, got {} and {}",
            n * mm,
            patches.len(),
            perm.len()
        )));
    }
    let slot = patches[0].pixels.dim().0;
    if let Some(bad) = patches.iter().find(|p| p.pixels.dim() != (slot, slot, 3)) {
        return Err(Error::Shape(format!("patch has shape {:?}, expected {slot}x{slot}x3", bad.pixels.dim())));
    }
    let side = slot * m;
    let mut montages = Vec::with_capacity(n);
    let mut cluster_ids = Vec::with_capacity(n * mm);
    let mut location_ids = Vec::with_capacity(n * mm);
    for j in 0..n {
        let mut img = Array3::<f32>::zeros((side, side, 3));
        for p in 0..mm {
            let patch = &patches[perm.get(j * mm + p)];
            let (r, c) = (p / m, p % m);
            img.slice_mut(s![r * slot..(r + 1) * slot, c * slot..(c + 1) * slot, ..])
                .assign(&patch.pixels);
            cluster_ids.push(patch.src_image);
            location_ids.push(patch.src_location);
        }
        montages.push(img);
    }
    Ok(MontageBatch {
        montages,
        m,
        side,
        cluster_ids,
        location_ids,
        permutation: perm.clone(),
    })
}

/// Splits and augments every image, returning patches of side `out_side`
/// indexed by `src_image·m·m + src_location`.
pub fn prepare_patches<R: Rng>(
    batch: &ImageBatch,
    grid: &GridSpec,
    policy: &AugPolicy,
    out_side: usize,
    rng: &mut R,
) -> Result<Vec<PatchRecord>> {
    if batch.side() != grid.side {
        return Err(Error::Shape(format!("batch side {} does not match grid side {}", batch.side(), grid.side)));
    }
    if grid.slot < 4 {
        return Err(Error::Invalid(format!("slot side {} is below 4 px", grid.slot)));
    }
    policy.validate()?;
    let mut patches = Vec::with_capacity(batch.len() * grid.slots());
    match policy.position {
        AugPosition::AfterSplit => {
            for (i, img) in batch.images().iter().enumerate() {
                for p in split_image(img.view(), grid, i)? {
                    let pixels = apply_ops(p.pixels.view(), &policy.ops, out_side, rng)?;
                    patches.push(PatchRecord { pixels, ..p });
                }
            }
        }
        AugPosition::BeforeSplit => {
            for (i, img) in batch.images().iter().enumerate() {
                let aug = apply_ops(img.view(), &policy.ops, grid.side, rng)?;
                for p in split_image(aug.view(), grid, i)? {
                    let pixels = resize_bilinear(p.pixels.view(), out_side, out_side);
                    patches.push(PatchRecord { pixels, ..p });
                }
            }
        }
        AugPosition::SplitDuringAug => {
            let (crop, rest) = policy.split_crop();
            for (i, img) in batch.images().iter().enumerate() {
                let cropped = apply_ops(img.view(), &crop, grid.side, rng)?;
                for p in split_image(cropped.view(), grid, i)? {
                    let pixels = apply_ops(p.pixels.view(), &rest, out_side, rng)?;
                    patches.push(PatchRecord { pixels, ..p });
                }
            }
        }
    }
    Ok(patches)
}

/// Builds one training batch. Returns the batch and the augmented patches in
/// source order, so slot contents can be traced back to their patch.
pub fn build_batch_traced<R: Rng>(
    batch: &ImageBatch,
    grid: &GridSpec,
    policy: &AugPolicy,
    format: InputFormat,
    rng: &mut R,
) -> Result<(BuiltBatch, Vec<PatchRecord>)> {
    let out_side = match format {
        InputFormat::Montage | InputFormat::SmallPatch => grid.slot,
        InputFormat::ScaledUp => grid.side,
    };
    let patches = prepare_patches(batch, grid, policy, out_side, rng)?;
    let n = batch.len();
    let perm = permute_patches(n * grid.slots(), rng);
    let built = match format {
        InputFormat::Montage => BuiltBatch::Montage(assemble_montage(&patches, &perm, n, grid.m)?),
        InputFormat::SmallPatch | InputFormat::ScaledUp => {
            let order = perm.as_slice();
            BuiltBatch::Patches(PatchBatch {
                images: order.iter().map(|&g| patches[g].pixels.clone()).collect(),
                m: grid.m,
                side: out_side,
                cluster_ids: order.iter().map(|&g| patches[g].src_image).collect(),
                location_ids: order.iter().map(|&g| patches[g].src_location).collect(),
                permutation: perm,
            })
        }
    };
    Ok((built, patches))
}

pub fn build_batch<R: Rng>(
    batch: &ImageBatch,
    grid: &GridSpec,
    policy: &AugPolicy,
    format: InputFormat,
    rng: &mut R,
) -> Result<BuiltBatch> {
    build_batch_traced(batch, grid, policy, format, rng).map(|(b, _)| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn batch(n: usize, side: usize, seed: u64) -> ImageBatch {
        let mut r = rng::stream(seed, "images", &[]);
        ImageBatch::new(
            (0..n)
                .map(|_| Array3::from_shape_fn((side, side, 3), |_| r.random::<f32>()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn batch_validation() {
        let one = vec![Array3::zeros((8, 8, 3))];
        assert!(ImageBatch::new(one).is_err());
        let mixed = vec![Array3::zeros((8, 8, 3)), Array3::zeros((9, 9, 3))];
        assert!(ImageBatch::new(mixed).is_err());
        let rect = vec![Array3::zeros((8, 9, 3)), Array3::zeros((8, 9, 3))];
        assert!(ImageBatch::new(rect).is_err());
    }

    #[test]
    fn split_constant_image() {
        let g = compute_grid(32, 2, 0.3).unwrap();
        let img = Array3::from_elem((32, 32, 3), 0.25f32);
        let patches = split_image(img.view(), &g, 3).unwrap();
        assert_eq!(patches.len(), 4);
        for (i, p) in patches.iter().enumerate() {
            assert_eq!(p.src_image, 3);
            assert_eq!(p.src_location, i);
            assert_eq!(p.pixels.dim(), (21, 21, 3));
            assert!(p.pixels.iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn split_disjoint_partitions_image() {
        let g = compute_grid(16, 2, 0.0).unwrap();
        let b = batch(2, 16, 1);
        let patches = split_image(b.images()[0].view(), &g, 0).unwrap();
        let mut rebuilt = Array3::<f32>::zeros((16, 16, 3));
        for p in &patches {
            let (r, c) = (p.src_location / 2, p.src_location % 2);
            rebuilt.slice_mut(s![r * 8..(r + 1) * 8, c * 8..(c + 1) * 8, ..]).assign(&p.pixels);
        }
        assert_eq!(rebuilt, b.images()[0]);
    }

    #[test]
    fn split_overlap_covers_expected_window() {
        let g = compute_grid(224, 2, 0.3).unwrap();
        let img = Array3::from_shape_fn((224, 224, 3), |(y, x, c)| (y * 1000 + x * 3 + c) as f32);
        let patches = split_image(img.view(), &g, 0).unwrap();
        let last = &patches[3];
        assert_eq!(last.src_location, 3);
        assert_eq!(last.pixels.slice(s![.., .., ..]), img.slice(s![78..224, 78..224, ..]));
    }

    #[test]
    fn split_rejects_wrong_side() {
        let g = compute_grid(32, 2, 0.3).unwrap();
        assert!(split_image(Array3::zeros((16, 16, 3)).view(), &g, 0).is_err());
    }

    #[test]
    fn augment_patch_keeps_identity_and_checks_position() {
        let g = compute_grid(32, 2, 0.3).unwrap();
        let b = batch(2, 32, 2);
        let p = &split_image(b.images()[1].view(), &g, 1).unwrap()[2];
        let policy = AugPolicy::moco_v2(AugPosition::AfterSplit, 16);
        let out = augment_patch(p, &policy, &g, &mut rng::stream(1, "a", &[])).unwrap();
        assert_eq!((out.src_image, out.src_location), (1, 2));
        assert_eq!(out.pixels.dim(), (16, 16, 3));
        let wrong = AugPolicy::moco_v2(AugPosition::BeforeSplit, 16);
        assert!(augment_patch(p, &wrong, &g, &mut rng::stream(1, "a", &[])).is_err());
    }

    #[test]
    fn identity_everything_reassembles_inputs() {
        let g = compute_grid(16, 2, 0.0).unwrap();
        let b = batch(3, 16, 3);
        let policy = AugPolicy::identity(AugPosition::AfterSplit, g.slot);
        let patches = prepare_patches(&b, &g, &policy, g.slot, &mut rng::stream(0, "x", &[])).unwrap();
        let mb = assemble_montage(&patches, &Permutation::identity(12), 3, 2).unwrap();
        for j in 0..3 {
            assert_eq!(mb.montages[j], b.images()[j]);
            assert_eq!(mb.cluster_rows()[j], vec![j; 4]);
            assert_eq!(mb.location_rows()[j], vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn assemble_rejects_size_mismatch() {
        let g = compute_grid(16, 2, 0.0).unwrap();
        let b = batch(2, 16, 4);
        let policy = AugPolicy::identity(AugPosition::AfterSplit, g.slot);
        let patches = prepare_patches(&b, &g, &policy, g.slot, &mut rng::stream(0, "x", &[])).unwrap();
        assert!(assemble_montage(&patches, &Permutation::identity(8), 3, 2).is_err());
        assert!(assemble_montage(&patches[..7], &Permutation::identity(7), 2, 2).is_err());
    }

    #[test]
    fn formats_have_expected_pixel_counts() {
        let g = compute_grid(32, 2, 0.3).unwrap();
        let b = batch(4, 32, 5);
        let policy = AugPolicy::moco_v2(AugPosition::AfterSplit, g.slot);
        let n_px = 4 * 32 * 32 * 3;
        for (fmt, expect) in [
            (InputFormat::Montage, n_px),
            (InputFormat::SmallPatch, n_px),
            (InputFormat::ScaledUp, 4 * n_px),
        ] {
            let built = build_batch(&b, &g, &policy, fmt, &mut rng::stream(9, "b", &[])).unwrap();
            assert_eq!(built.pixel_count(), expect, "{}", fmt.name());
            assert_eq!(built.cluster_ids().len(), 16);
        }
    }

    #[test]
    fn empty_policy_position_does_not_matter() {
        let g = compute_grid(32, 2, 0.3).unwrap();
        let b = batch(2, 32, 6);
        let before = AugPolicy::identity(AugPosition::BeforeSplit, g.slot);
        let after = AugPolicy::identity(AugPosition::AfterSplit, g.slot);
        let x = build_batch(&b, &g, &before, InputFormat::Montage, &mut rng::stream(1, "b", &[])).unwrap();
        let y = build_batch(&b, &g, &after, InputFormat::Montage, &mut rng::stream(1, "b", &[])).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn permutation_inverse_round_trips() {
        let p = permute_patches(50, &mut rng::stream(3, "p", &[]));
        assert_eq!(p.compose(&p.inverse()), Permutation::identity(50));
        assert_eq!(p.inverse().compose(&p), Permutation::identity(50));
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3]).is_err());
    }

    #[test]
    fn split_during_aug_builds() {
        let g = compute_grid(32, 2, 0.3).unwrap();
        let b = batch(2, 32, 7);
        let policy = AugPolicy::moco_v2(AugPosition::SplitDuringAug, g.slot);
        let mb = build_batch(&b, &g, &policy, InputFormat::Montage, &mut rng::stream(1, "b", &[]))
            .unwrap()
            .into_montage()
            .unwrap();
        assert_eq!(mb.montages.len(), 2);
        assert_eq!(mb.montages[0].dim(), (32, 32, 3));
    }
}
