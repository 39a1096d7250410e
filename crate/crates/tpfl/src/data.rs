//! Synthetic few-shot classification data, label-skew partitioning, and a
//! small persisted dataset format.
//!
//! Each class owns a smooth low-frequency prototype image fixed by the seed;
//! samples are the prototype plus clamped Gaussian pixel noise. Train and
//! test splits draw noise from disjoint seed streams, so they never share a
//! sample. Partitioning assigns each client a handful of classes
//! (round-robin over a seeded class permutation) and a fixed number of shots
//! per class, with globally disjoint sample indices.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffgraph::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Index tags keeping the two splits' noise streams disjoint.
const STREAM_PROTO: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream_index(self) -> u64 {
        match self {
            Split::Train => STREAM_TRAIN,
            Split::Test => STREAM_TEST,
        }
    }
}

/// Immutable labeled image collection. Images are stored flat (row-major
/// `[N, H, W, Ch]`) so the empty dataset is representable.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<u32>,
    h: usize,
    w: usize,
    ch: usize,
    class_count: usize,
    split: Split,
    seed: u64,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        labels: Vec<u32>,
        h: usize,
        w: usize,
        ch: usize,
        class_count: usize,
        split: Split,
        seed: u64,
    ) -> Result<Self> {
        let pixel = h * w * ch;
        if pixel == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dims must be positive, got {h}x{w}x{ch}"
            )));
        }
        if images.len() != labels.len() * pixel {
            return Err(Error::InvalidArgument(format!(
                "{} pixels does not match {} samples of {pixel} pixels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            h,
            w,
            ch,
            class_count,
            split,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.ch)
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w * self.ch
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn image_row(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// One image as an `[H, W, Ch]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(vec![self.h, self.w, self.ch], self.image_row(i).to_vec())
            .expect("dims validated at construction")
    }

    /// Gather the given samples as flattened rows `[len, H·W·Ch]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty index list".into()));
        }
        let p = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.image_row(i));
        }
        Tensor::new(vec![indices.len(), p], data)
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// All samples as flattened rows.
    pub fn all_rows(&self) -> Result<Tensor> {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.gather_rows(&indices)
    }
}

/// The smooth prototype image for one class: a sum of three low-frequency
/// cosine waves with amplitudes normalized to 1, so every prototype pixel
/// lies in [-1, 1].
fn prototype(seed: u64, class: usize, h: usize, w: usize, ch: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "data", &[STREAM_PROTO, class as u64]);
    let mut waves = Vec::with_capacity(3);
    let mut amp_sum = 0.0;
    for _ in 0..3 {
        let fu = r.random_range(0..=2) as f64;
        let fv = r.random_range(0..=2) as f64;
        let phase = r.random::<f64>() * std::f64::consts::TAU;
        let chan_shift = r.random::<f64>() * std::f64::consts::TAU;
        let amp = 0.5 + r.random::<f64>() * 0.5;
        amp_sum += amp;
        waves.push((fu, fv, phase, chan_shift, amp));
    }
    let mut out = Vec::with_capacity(h * w * ch);
    for i in 0..h {
        for j in 0..w {
            for c in 0..ch {
                let mut v = 0.0;
                for &(fu, fv, phase, chan_shift, amp) in &waves {
                    let arg = std::f64::consts::TAU
                        * (fu * i as f64 / h as f64 + fv * j as f64 / w as f64)
                        + phase
                        + chan_shift * c as f64;
                    v += amp / amp_sum * arg.cos();
                }
                out.push(v);
            }
        }
    }
    out
}

/// Generate one split. Samples are grouped class-major (all of class 0,
/// then class 1, ...). Noise is clamped to ±6σ so pixels stay bounded.
pub fn generate_synthetic(
    seed: u64,
    class_count: usize,
    per_class: usize,
    h: usize,
    w: usize,
    ch: usize,
    noise_sigma: f64,
    split: Split,
) -> Result<Dataset> {
    if class_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {class_count}"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    if noise_sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be nonnegative, got {noise_sigma}"
        )));
    }
    let pixel = h * w * ch;
    let mut images = Vec::with_capacity(class_count * per_class * pixel);
    let mut labels = Vec::with_capacity(class_count * per_class);
    let clamp = 6.0 * noise_sigma;
    for class in 0..class_count {
        let proto = prototype(seed, class, h, w, ch);
        for j in 0..per_class {
            let mut r = rng::stream(seed, "data", &[split.stream_index(), class as u64, j as u64]);
            for &p in &proto {
                let z: f64 = StandardNormal.sample(&mut r);
                let noise = (z * noise_sigma).clamp(-clamp, clamp);
                images.push(p + noise);
            }
            labels.push(class as u32);
        }
    }
    Dataset::new(images, labels, h, w, ch, class_count, split, seed)
}

/// The noise-free prototype of one class, for oracle classifiers in tests.
pub fn class_prototype(seed: u64, class: usize, h: usize, w: usize, ch: usize) -> Vec<f64> {
    prototype(seed, class, h, w, ch)
}

/// Which samples each client owns, plus the class assignment that produced
/// the split.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    /// Per client, the sample indices it trains on (pairwise disjoint).
    pub assignments: Vec<Vec<usize>>,
    /// Per client, the classes it was assigned (each with exactly `shots`
    /// samples).
    pub classes: Vec<Vec<usize>>,
    pub classes_per_client: usize,
    pub shots: usize,
}

/// Assign each of `clients` clients `classes_per_client` classes by walking
/// a seeded class permutation round-robin, then hand out `shots` distinct
/// samples per assigned class from that class's pool.
pub fn partition_label_skew(
    dataset: &Dataset,
    clients: usize,
    classes_per_client: usize,
    shots: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let c = dataset.class_count();
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if classes_per_client == 0 || classes_per_client > c {
        return Err(Error::InvalidArgument(format!(
            "classes_per_client {classes_per_client} must be in 1..={c}"
        )));
    }
    if shots == 0 {
        return Err(Error::InvalidArgument("shots must be positive".into()));
    }

    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(&mut rng::stream(seed, "partition", &[]));

    // Per-class sample pools in dataset order, consumed by cursor.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in dataset.labels().iter().enumerate() {
        pools[y as usize].push(i);
    }
    let mut cursors = vec![0usize; c];

    let mut assignments = Vec::with_capacity(clients);
    let mut classes = Vec::with_capacity(clients);
    for k in 0..clients {
        let own: Vec<usize> = (0..classes_per_client)
            .map(|j| perm[(k * classes_per_client + j) % c])
            .collect();
        let mut indices = Vec::with_capacity(classes_per_client * shots);
        for &cls in &own {
            let pool = &pools[cls];
            let cur = cursors[cls];
            if cur + shots > pool.len() {
                return Err(Error::Domain {
                    op: "partition_label_skew",
                    msg: format!(
                        "class {cls} exhausted: needs {} samples but only {} generated",
                        cur + shots,
                        pool.len()
                    ),
                });
            }
            indices.extend_from_slice(&pool[cur..cur + shots]);
            cursors[cls] = cur + shots;
        }
        assignments.push(indices);
        classes.push(own);
    }
    Ok(PartitionPlan {
        assignments,
        classes,
        classes_per_client,
        shots,
    })
}

// ── persistence ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    shape: [usize; 4],
    class_count: usize,
    split: Split,
    seed: u64,
}

/// Write `manifest.json`, `images.f64`, and `labels.u32` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w, ch) = dataset.dims();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        shape: [dataset.len(), h, w, ch],
        class_count: dataset.class_count(),
        split: dataset.split(),
        seed: dataset.seed(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;

    let mut img = Vec::with_capacity(dataset.images.len() * 8);
    for v in &dataset.images {
        img.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("images.f64"), img)?;

    let mut lab = Vec::with_capacity(dataset.labels.len() * 4);
    for y in &dataset.labels {
        lab.extend_from_slice(&y.to_le_bytes());
    }
    fs::write(dir.join("labels.u32"), lab)?;
    Ok(())
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let mut buf = Vec::new();
    fs::File::open(&path)
        .map_err(|e| Error::DataFormat(format!("{name}: {e}")))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

/// Load a dataset directory, verifying every size against the manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_bytes = read_file(dir, "manifest.json")?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::DataFormat(format!("manifest.json: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::DataFormat(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let [n, h, w, ch] = manifest.shape;
    let pixel = h.checked_mul(w).and_then(|x| x.checked_mul(ch));
    let Some(pixel) = pixel.filter(|&p| p > 0) else {
        return Err(Error::DataFormat(format!(
            "manifest shape {:?} has degenerate image dims",
            manifest.shape
        )));
    };

    let img_bytes = read_file(dir, "images.f64")?;
    let expected = n * pixel * 8;
    if img_bytes.len() != expected {
        return Err(Error::DataFormat(format!(
            "images.f64 holds {} bytes but manifest shape {:?} implies {expected}",
            img_bytes.len(),
            manifest.shape
        )));
    }
    let images: Vec<f64> = img_bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();

    let lab_bytes = read_file(dir, "labels.u32")?;
    if lab_bytes.len() != n * 4 {
        return Err(Error::DataFormat(format!(
            "labels.u32 holds {} bytes but manifest declares {n} samples ({} bytes)",
            lab_bytes.len(),
            n * 4
        )));
    }
    let labels: Vec<u32> = lab_bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();

    Dataset::new(
        images,
        labels,
        h,
        w,
        ch,
        manifest.class_count,
        manifest.split,
        manifest.seed,
    )
    .map_err(|e| Error::DataFormat(format!("dataset inconsistent with manifest: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(sigma: f64) -> Dataset {
        generate_synthetic(3, 4, 6, 5, 5, 1, sigma, Split::Train).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = small(0.1);
        let b = small(0.1);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_reproduces_prototypes() {
        let ds = small(0.0);
        for class in 0..4usize {
            let proto = class_prototype(3, class, 5, 5, 1);
            for j in 0..6 {
                let i = class * 6 + j;
                assert_eq!(ds.labels()[i] as usize, class);
                assert_eq!(ds.image_row(i), proto.as_slice());
            }
        }
    }

    #[test]
    fn train_and_test_noise_streams_differ() {
        let tr = generate_synthetic(3, 2, 3, 4, 4, 1, 0.1, Split::Train).unwrap();
        let te = generate_synthetic(3, 2, 3, 4, 4, 1, 0.1, Split::Test).unwrap();
        assert_ne!(tr.image_row(0), te.image_row(0));
    }

    #[test]
    fn pixels_bounded_by_prototype_plus_clamped_noise() {
        let sigma = 0.5;
        let ds = small(sigma);
        let bound = 1.0 + 6.0 * sigma;
        for i in 0..ds.len() {
            for &v in ds.image_row(i) {
                assert!(v.abs() <= bound, "pixel {v} exceeds {bound}");
            }
        }
    }

    #[test]
    fn nearest_prototype_classifier_solves_the_task() {
        // The core learnability oracle: at σ=0.1 a nearest-prototype
        // classifier on fresh test data must be nearly perfect.
        let (c, h, w) = (8usize, 16usize, 16usize);
        let test = generate_synthetic(7, c, 25, h, w, 1, 0.1, Split::Test).unwrap();
        let protos: Vec<Vec<f64>> = (0..c).map(|cl| class_prototype(7, cl, h, w, 1)).collect();
        let mut correct = 0usize;
        for i in 0..test.len() {
            let row = test.image_row(i);
            let best = (0..c)
                .min_by(|&a, &b| {
                    let da: f64 = row
                        .iter()
                        .zip(&protos[a])
                        .map(|(x, p)| (x - p) * (x - p))
                        .sum();
                    let db: f64 = row
                        .iter()
                        .zip(&protos[b])
                        .map(|(x, p)| (x - p) * (x - p))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == test.labels()[i] as usize {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.99, "nearest-prototype accuracy {acc}");
    }

    #[test]
    fn round_robin_covers_every_class_once_when_counts_match() {
        let ds = generate_synthetic(5, 10, 4, 3, 3, 1, 0.1, Split::Train).unwrap();
        let plan = partition_label_skew(&ds, 5, 2, 2, 9).unwrap();
        let mut seen = HashSet::new();
        for cls in plan.classes.iter().flatten() {
            assert!(seen.insert(*cls), "class {cls} assigned twice");
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn full_class_spread_is_iid_by_label() {
        let ds = small(0.1);
        let plan = partition_label_skew(&ds, 2, 4, 1, 9).unwrap();
        for own in &plan.classes {
            let distinct: HashSet<_> = own.iter().collect();
            assert_eq!(distinct.len(), 4);
        }
    }

    #[test]
    fn assignments_are_disjoint_with_exact_histograms() {
        let ds = generate_synthetic(11, 6, 8, 4, 4, 1, 0.1, Split::Train).unwrap();
        let plan = partition_label_skew(&ds, 4, 3, 2, 13).unwrap();
        let mut all = HashSet::new();
        for (k, indices) in plan.assignments.iter().enumerate() {
            assert_eq!(indices.len(), 3 * 2);
            let mut hist = vec![0usize; 6];
            for &i in indices {
                assert!(all.insert(i), "sample {i} assigned twice");
                hist[ds.labels()[i] as usize] += 1;
            }
            let nonzero: Vec<_> = hist.iter().filter(|&&h| h > 0).collect();
            assert_eq!(nonzero.len(), 3, "client {k} histogram {hist:?}");
            assert!(hist.iter().all(|&h| h == 0 || h == 2));
        }
    }

    #[test]
    fn exhausted_class_pool_names_the_class() {
        let ds = generate_synthetic(11, 3, 2, 4, 4, 1, 0.1, Split::Train).unwrap();
        // 4 clients × 2 classes × 2 shots needs more than 2 samples per class.
        let err = partition_label_skew(&ds, 4, 2, 2, 13).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("class"), "{msg}");
    }

    #[test]
    fn save_load_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small(0.3);
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
        // Bit-level check on the payload.
        assert!(ds
            .images
            .iter()
            .zip(&back.images)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(vec![], vec![], 4, 4, 1, 3, Split::Test, 0).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.class_count(), 3);
    }

    #[test]
    fn truncated_blob_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small(0.1);
        save_dataset(&ds, dir.path()).unwrap();
        let img = dir.path().join("images.f64");
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 8]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::DataFormat(msg)) => assert!(msg.contains("images.f64"), "{msg}"),
            other => panic!("expected DataFormat error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_manifest_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small(0.1);
        save_dataset(&ds, dir.path()).unwrap();
        std::fs::write(dir.path().join("manifest.json"), b"{not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::DataFormat(_))));
    }

    #[test]
    fn manifest_label_blob_mismatch_is_caught() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small(0.1);
        save_dataset(&ds, dir.path()).unwrap();
        let lab = dir.path().join("labels.u32");
        let bytes = std::fs::read(&lab).unwrap();
        std::fs::write(&lab, &bytes[..bytes.len() - 4]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::DataFormat(msg)) => assert!(msg.contains("labels.u32"), "{msg}"),
            other => panic!("expected DataFormat error, got {other:?}"),
        }
    }
}
