//! Pre-processing model: reference images with features and poses, plus
//! AOI annotations spread across images by homography.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    detect_and_describe, match_features, Descriptor, Feature, FeatureError, FeatureParams,
    ImageGray, Keypoint, DEFAULT_RATIO, DESCRIPTOR_BYTES,
};
use crate::geometry::{
    estimate_homography_ransac, transform_box, BoundingBox, GeometryError, Homography33,
    RansacParams,
};

pub const FORMAT_TAG: &str = "sitegaze-registry";
pub const FORMAT_VERSION: u32 = 1;
const BLOB_MAGIC: &[u8; 4] = b"GZRG";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DESCRIPTORS_FILE: &str = "descriptors.bin";
pub const SIGNATURE_SIDE: usize = 8;
pub const SIGNATURE_LEN: usize = SIGNATURE_SIDE * SIGNATURE_SIDE;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("cannot read image {path}: {source}")]
    UnreadableImage {
        path: String,
        #[source]
        source: FeatureError,
    },
    #[error("no input images")]
    NoImages,
    #[error("duplicate image id {0}")]
    DuplicateImageId(String),
    #[error("poses file references unknown image {0}")]
    PoseForUnknownImage(String),
    #[error("poses file line {line}: {message}")]
    MalformedPoses { line: u64, message: String },
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("box {bbox:?} lies outside image {image_id} ({width}x{height})")]
    BoxOutOfBounds {
        image_id: String,
        bbox: [f64; 4],
        width: u32,
        height: u32,
    },
    #[error("inverted box {0:?}")]
    InvertedBox([f64; 4]),
    #[error("no seeded AOIs to propagate")]
    NoSeeds,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported registry format version {found} (expected {FORMAT_VERSION})")]
    FormatVersionMismatch { found: String },
    #[error("descriptor blob checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt registry: {0}")]
    Corrupt(String),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RegistryError + '_ {
    move |source| RegistryError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Camera location in site coordinates; either part may be unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Meters.
    pub position: Option<[f64; 3]>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoxSource {
    Seed,
    Propagated {
        /// Image whose link produced this box.
        from: String,
        /// Seed image the box was transferred from.
        seed: String,
        inliers: usize,
        /// Maps seed-image pixels to this image.
        homography: Homography33,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoiBox {
    pub bbox: BoundingBox,
    pub source: BoxSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoiAnnotation {
    pub aoi_id: String,
    pub label: String,
    pub boxes: BTreeMap<String, AoiBox>,
    /// Images reached by propagation where the AOI falls outside the view.
    #[serde(default)]
    pub absent: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceImage {
    pub id: String,
    pub source_path: String,
    pub width: u32,
    pub height: u32,
    pub features: Vec<Feature>,
    pub thumbnail_sig: Vec<f32>,
    pub pose: Option<CameraPose>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildParams {
    pub features: FeatureParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationParams {
    /// RANSAC inliers a link needs before it may carry a box.
    pub min_inliers: usize,
    /// Thumbnail neighbours considered per image.
    pub link_top_k: usize,
    pub ratio: f32,
    pub ransac: RansacParams,
}

impl Default for PropagationParams {
    fn default() -> Self {
        Self {
            min_inliers: 15,
            link_top_k: 10,
            ratio: DEFAULT_RATIO,
            ransac: RansacParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub aoi_id: String,
    pub from: String,
    pub to: String,
    pub match_score: usize,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PropagationReport {
    /// Images that gained at least one box in this run.
    pub propagated_images: Vec<String>,
    /// Unseeded images that no AOI could reach.
    pub uncovered_images: Vec<String>,
    pub boxes_added: usize,
    /// `(aoi_id, image_id)` pairs where the transferred box left the view.
    pub out_of_view: Vec<(String, String)>,
    pub links: Vec<LinkRecord>,
    /// Unseeded images reached by at least one AOI.
    pub covered: usize,
    pub unseeded: usize,
}

/// Immutable registry value; edits return a new value that shares the
/// image data.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    images: Arc<Vec<ReferenceImage>>,
    aois: Vec<AoiAnnotation>,
    build_params: BuildParams,
}

/// Mean-subtracted 8×8 area-average signature, intensities in `[0, 1]`.
pub fn thumbnail_signature(img: &ImageGray) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut sums = [0f64; SIGNATURE_LEN];
    let mut counts = [0u32; SIGNATURE_LEN];
    for (y, row) in img.data().chunks_exact(w).enumerate() {
        let cy = y * SIGNATURE_SIDE / h;
        for (x, &v) in row.iter().enumerate() {
            let c = cy * SIGNATURE_SIDE + x * SIGNATURE_SIDE / w;
            sums[c] += v as f64;
            counts[c] += 1;
        }
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / (255.0 * c as f64))
        .collect();
    let mean = means.iter().sum::<f64>() / SIGNATURE_LEN as f64;
    means.iter().map(|m| (m - mean) as f32).collect()
}

pub fn signature_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Reads `image_id,x_m,y_m,z_m,label`. Blank coordinates mean no position.
pub fn read_poses(path: &Path) -> Result<BTreeMap<String, CameraPose>, RegistryError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_poses(&text)
}

pub fn parse_poses(text: &str) -> Result<BTreeMap<String, CameraPose>, RegistryError> {
    const HEADER: [&str; 5] = ["image_id", "x_m", "y_m", "z_m", "label"];
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| RegistryError::MalformedPoses {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().map(str::trim).ne(HEADER.iter().copied()) {
        return Err(RegistryError::MalformedPoses {
            line: 1,
            message: format!("expected header {}", HEADER.join(",")),
        });
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| RegistryError::MalformedPoses {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| RegistryError::MalformedPoses { line, message };
        let id = rec.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(bad("image_id is empty".into()));
        }
        let coords: Vec<&str> = (1..4).map(|i| rec.get(i).unwrap_or("").trim()).collect();
        let position = if coords.iter().all(|c| c.is_empty()) {
            None
        } else {
            let mut p = [0.0; 3];
            for (slot, c) in p.iter_mut().zip(&coords) {
                let v: f64 = c
                    .parse()
                    .map_err(|_| bad(format!("bad coordinate {c:?}")))?;
                if !v.is_finite() {
                    return Err(bad(format!("coordinate {c:?} is not finite")));
                }
                *slot = v;
            }
            Some(p)
        };
        let label = rec
            .get(4)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        if out
            .insert(id.clone(), CameraPose { position, label })
            .is_some()
        {
            return Err(bad(format!("duplicate pose for {id}")));
        }
    }
    Ok(out)
}

/// One decoded input image for [`Registry::from_images`].
#[derive(Debug, Clone)]
pub struct SourceImage {
    pub id: String,
    pub source_path: String,
    pub image: ImageGray,
}

/// Decodes, features and signs every image; ids are file stems.
pub fn build_registry(
    image_paths: &[PathBuf],
    poses_file: Option<&Path>,
    params: BuildParams,
) -> Result<Registry, RegistryError> {
    if image_paths.is_empty() {
        return Err(RegistryError::NoImages);
    }
    let mut seen = BTreeSet::new();
    for p in image_paths {
        let id = image_id_of(p);
        if !seen.insert(id.clone()) {
            return Err(RegistryError::DuplicateImageId(id));
        }
    }
    let sources = image_paths
        .par_iter()
        .map(|p| {
            let image = ImageGray::load(p).map_err(|source| RegistryError::UnreadableImage {
                path: p.display().to_string(),
                source,
            })?;
            Ok(SourceImage {
                id: image_id_of(p),
                source_path: p.display().to_string(),
                image,
            })
        })
        .collect::<Result<Vec<_>, RegistryError>>()?;
    let poses = match poses_file {
        Some(path) => read_poses(path)?,
        None => BTreeMap::new(),
    };
    Registry::from_images(sources, &poses, params)
}

fn image_id_of(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

/// Image files accepted by [`build_registry`] in a directory, sorted by
/// name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, RegistryError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase());
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "pgm")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

struct Link {
    score: usize,
    /// `from → to` homography and inlier count, when the link holds.
    result: Option<(Homography33, usize)>,
}

impl Registry {
    pub fn from_images(
        sources: Vec<SourceImage>,
        poses: &BTreeMap<String, CameraPose>,
        params: BuildParams,
    ) -> Result<Registry, RegistryError> {
        if sources.is_empty() {
            return Err(RegistryError::NoImages);
        }
        let mut seen = BTreeSet::new();
        for s in &sources {
            if !seen.insert(s.id.as_str()) {
                return Err(RegistryError::DuplicateImageId(s.id.clone()));
            }
        }
        if let Some(id) = poses.keys().find(|id| !seen.contains(id.as_str())) {
            return Err(RegistryError::PoseForUnknownImage(id.clone()));
        }
        let images = sources
            .into_par_iter()
            .map(|s| {
                let features = detect_and_describe(&s.image, &params.features).map_err(|source| {
                    RegistryError::UnreadableImage {
                        path: s.source_path.clone(),
                        source,
                    }
                })?;
                Ok(ReferenceImage {
                    thumbnail_sig: thumbnail_signature(&s.image),
                    pose: poses.get(&s.id).cloned(),
                    width: s.image.width(),
                    height: s.image.height(),
                    id: s.id,
                    source_path: s.source_path,
                    features,
                })
            })
            .collect::<Result<Vec<_>, RegistryError>>()?;
        Ok(Registry {
            images: Arc::new(images),
            aois: Vec::new(),
            build_params: params,
        })
    }

    pub fn images(&self) -> &[ReferenceImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|im| im.id == id)
    }

    pub fn image(&self, id: &str) -> Option<&ReferenceImage> {
        self.index_of(id).map(|i| &self.images[i])
    }

    pub fn aois(&self) -> &[AoiAnnotation] {
        &self.aois
    }

    pub fn aoi(&self, aoi_id: &str) -> Option<&AoiAnnotation> {
        self.aois.iter().find(|a| a.aoi_id == aoi_id)
    }

    pub fn build_params(&self) -> &BuildParams {
        &self.build_params
    }

    /// `(aoi_id, box)` for every AOI annotated on `image_id`, by AOI id.
    pub fn aois_on(&self, image_id: &str) -> Vec<(&str, BoundingBox)> {
        let mut out: Vec<_> = self
            .aois
            .iter()
            .filter_map(|a| a.boxes.get(image_id).map(|b| (a.aoi_id.as_str(), b.bbox)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    /// Indices of the `k` images whose signatures are nearest to `sig`;
    /// ties go to the lower index.
    pub fn candidates(&self, sig: &[f32], k: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, im)| (signature_distance(sig, &im.thumbnail_sig), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|(_, i)| i).collect()
    }

    /// Records a seed box for `aoi_id` on `image_id`.
    pub fn seed_aoi(
        &self,
        aoi_id: &str,
        label: &str,
        image_id: &str,
        coords: [f64; 4],
    ) -> Result<Registry, RegistryError> {
        let image = self
            .image(image_id)
            .ok_or_else(|| RegistryError::UnknownImage(image_id.to_string()))?;
        let bbox = BoundingBox::new(coords[0], coords[1], coords[2], coords[3]).map_err(|e| match e {
            GeometryError::InvertedBox(..) => RegistryError::InvertedBox(coords),
            _ => RegistryError::BoxOutOfBounds {
                image_id: image_id.to_string(),
                bbox: coords,
                width: image.width,
                height: image.height,
            },
        })?;
        if !bbox.within(image.width as f64, image.height as f64) {
            return Err(RegistryError::BoxOutOfBounds {
                image_id: image_id.to_string(),
                bbox: coords,
                width: image.width,
                height: image.height,
            });
        }
        let mut next = self.clone();
        let pos = match next.aois.iter().position(|a| a.aoi_id == aoi_id) {
            Some(p) => p,
            None => {
                next.aois.push(AoiAnnotation {
                    aoi_id: aoi_id.to_string(),
                    label: label.to_string(),
                    boxes: BTreeMap::new(),
                    absent: BTreeSet::new(),
                });
                next.aois.sort_by(|a, b| a.aoi_id.cmp(&b.aoi_id));
                next.aois.iter().position(|a| a.aoi_id == aoi_id).unwrap()
            }
        };
        let aoi = &mut next.aois[pos];
        if !label.is_empty() {
            aoi.label = label.to_string();
        }
        aoi.absent.remove(image_id);
        aoi.boxes.insert(
            image_id.to_string(),
            AoiBox {
                bbox,
                source: BoxSource::Seed,
            },
        );
        Ok(next)
    }

    /// Symmetric top-k thumbnail neighbourhood graph.
    fn neighbour_graph(&self, k: usize) -> Vec<BTreeSet<usize>> {
        let n = self.images.len();
        let mut graph = vec![BTreeSet::new(); n];
        for i in 0..n {
            for j in self.candidates(&self.images[i].thumbnail_sig, k + 1) {
                if j != i {
                    graph[i].insert(j);
                    graph[j].insert(i);
                }
            }
        }
        graph
    }

    /// Spreads seed boxes to linked images, rank by rank.
    ///
    /// Rank 1 holds the images linked directly to a seed, rank 2 those
    /// linked to rank 1, and so on. Within a rank each image takes the
    /// annotated neighbour with the highest match score whose RANSAC
    /// consensus reaches `min_inliers`. Boxes are always transferred from
    /// the original seed through the composed homography, so chains do not
    /// inflate them.
    pub fn propagate_aois(
        &self,
        params: &PropagationParams,
    ) -> Result<(Registry, PropagationReport), RegistryError> {
        let seeded: BTreeSet<&str> = self
            .aois
            .iter()
            .flat_map(|a| {
                a.boxes
                    .iter()
                    .filter(|(_, b)| b.source == BoxSource::Seed)
                    .map(|(id, _)| id.as_str())
            })
            .collect();
        if seeded.is_empty() {
            return Err(RegistryError::NoSeeds);
        }
        let n = self.images.len();
        let graph = self.neighbour_graph(params.link_top_k);
        let mut ransac = params.ransac;
        ransac.min_inliers = params.min_inliers;
        let mut links: HashMap<(usize, usize), Link> = HashMap::new();
        let mut link = |from: usize, to: usize| -> (usize, Option<(Homography33, usize)>) {
            let entry = links.entry((from, to)).or_insert_with(|| {
                let corr = match_features(
                    &self.images[from].features,
                    &self.images[to].features,
                    params.ratio,
                );
                let score = corr.len();
                let result = if score >= params.min_inliers.max(4) {
                    estimate_homography_ransac(&corr, &ransac)
                        .ok()
                        .filter(|r| r.inlier_count >= params.min_inliers)
                        .map(|r| (r.homography, r.inlier_count))
                } else {
                    None
                };
                Link { score, result }
            });
            (entry.score, entry.result)
        };

        let mut next = self.clone();
        let mut report = PropagationReport::default();
        let mut gained = BTreeSet::new();
        for aoi in next.aois.iter_mut() {
            let idx_of = |id: &str| self.index_of(id);
            // image index -> (seed image index, seed → image homography)
            let mut anchors: BTreeMap<usize, (usize, Homography33)> = BTreeMap::new();
            for (id, b) in &aoi.boxes {
                let Some(i) = idx_of(id) else { continue };
                match &b.source {
                    BoxSource::Seed => {
                        anchors.insert(i, (i, Homography33::identity()));
                    }
                    BoxSource::Propagated {
                        seed, homography, ..
                    } => {
                        if let Some(s) = idx_of(seed) {
                            if aoi.boxes.get(seed).is_some_and(|sb| sb.source == BoxSource::Seed) {
                                anchors.insert(i, (s, *homography));
                            }
                        }
                    }
                }
            }
            let mut reached: BTreeSet<usize> = aoi
                .boxes
                .keys()
                .chain(aoi.absent.iter())
                .filter_map(|id| idx_of(id))
                .collect();
            let mut frontier: Vec<usize> = anchors.keys().copied().collect();
            while !frontier.is_empty() {
                // Best link into every unreached neighbour of this rank.
                let mut best: BTreeMap<usize, (usize, usize, Homography33, usize)> = BTreeMap::new();
                for &from in &frontier {
                    for &to in &graph[from] {
                        if reached.contains(&to) {
                            continue;
                        }
                        let (score, result) = link(from, to);
                        let Some((h, inliers)) = result else { continue };
                        let better = match best.get(&to) {
                            None => true,
                            Some(&(s, f, _, _)) => score > s || (score == s && from < f),
                        };
                        if better {
                            best.insert(to, (score, from, h, inliers));
                        }
                    }
                }
                let mut order: Vec<_> = best.into_iter().collect();
                order.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.0.cmp(&b.0)));
                let mut next_frontier = Vec::new();
                for (to, (score, from, h, inliers)) in order {
                    reached.insert(to);
                    let (seed, seed_to_from) = anchors[&from];
                    let seed_to_to = h.compose(&seed_to_from);
                    let seed_box = aoi.boxes[&self.images[seed].id].bbox;
                    let to_img = &self.images[to];
                    report.links.push(LinkRecord {
                        aoi_id: aoi.aoi_id.clone(),
                        from: self.images[from].id.clone(),
                        to: to_img.id.clone(),
                        match_score: score,
                        inliers,
                    });
                    let clipped = transform_box(&seed_to_to, &seed_box)
                        .ok()
                        .and_then(|b| b.clip(to_img.width as f64, to_img.height as f64));
                    match clipped {
                        Some(bbox) => {
                            aoi.boxes.insert(
                                to_img.id.clone(),
                                AoiBox {
                                    bbox,
                                    source: BoxSource::Propagated {
                                        from: self.images[from].id.clone(),
                                        seed: self.images[seed].id.clone(),
                                        inliers,
                                        homography: seed_to_to,
                                    },
                                },
                            );
                            anchors.insert(to, (seed, seed_to_to));
                            report.boxes_added += 1;
                            gained.insert(to);
                            next_frontier.push(to);
                        }
                        None => {
                            aoi.absent.insert(to_img.id.clone());
                            report
                                .out_of_view
                                .push((aoi.aoi_id.clone(), to_img.id.clone()));
                        }
                    }
                }
                next_frontier.sort_unstable();
                frontier = next_frontier;
            }
        }

        let covered: BTreeSet<&str> = next
            .aois
            .iter()
            .flat_map(|a| a.boxes.keys().chain(a.absent.iter()).map(String::as_str))
            .collect();
        report.propagated_images = gained.iter().map(|&i| self.images[i].id.clone()).collect();
        for im in self.images.iter() {
            if seeded.contains(im.id.as_str()) {
                continue;
            }
            report.unseeded += 1;
            if covered.contains(im.id.as_str()) {
                report.covered += 1;
            } else {
                report.uncovered_images.push(im.id.clone());
            }
        }
        debug_assert!(report.propagated_images.len() <= n);
        Ok((next, report))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    id: String,
    source_path: String,
    width: u32,
    height: u32,
    keypoint_count: usize,
    thumbnail_sig: Vec<f32>,
    pose: Option<CameraPose>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    build_params: BuildParams,
    images: Vec<ImageRecord>,
    aois: Vec<AoiAnnotation>,
}

fn encode_blob(images: &[ReferenceImage]) -> Vec<u8> {
    let total: usize = images.iter().map(|im| im.features.len()).sum();
    let mut buf = Vec::with_capacity(8 + 4 * images.len() + total * (20 + DESCRIPTOR_BYTES) + 4);
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for im in images {
        buf.extend_from_slice(&(im.features.len() as u32).to_le_bytes());
        for f in &im.features {
            let k = &f.keypoint;
            for v in [k.x, k.y, k.scale, k.orientation, k.response] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&f.descriptor.0);
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct BlobReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl BlobReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], RegistryError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(RegistryError::Corrupt("descriptor blob truncated".into()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RegistryError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, RegistryError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_blob(buf: &[u8], counts: &[usize]) -> Result<Vec<Vec<Feature>>, RegistryError> {
    if buf.len() < 12 {
        return Err(RegistryError::Corrupt("descriptor blob too short".into()));
    }
    let (payload, tail) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(payload) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(RegistryError::ChecksumMismatch);
    }
    let mut r = BlobReader {
        buf: payload,
        pos: 0,
    };
    if r.take(4)? != BLOB_MAGIC {
        return Err(RegistryError::Corrupt("bad descriptor blob magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(RegistryError::FormatVersionMismatch {
            found: version.to_string(),
        });
    }
    let mut out = Vec::with_capacity(counts.len());
    for &expected in counts {
        let count = r.u32()? as usize;
        if count != expected {
            return Err(RegistryError::Corrupt(format!(
                "blob lists {count} keypoints, manifest {expected}"
            )));
        }
        let mut feats = Vec::with_capacity(count);
        for _ in 0..count {
            let keypoint = Keypoint {
                x: r.f32()?,
                y: r.f32()?,
                scale: r.f32()?,
                orientation: r.f32()?,
                response: r.f32()?,
            };
            let descriptor = Descriptor(r.take(DESCRIPTOR_BYTES)?.try_into().unwrap());
            feats.push(Feature {
                keypoint,
                descriptor,
            });
        }
        out.push(feats);
    }
    if r.pos != payload.len() {
        return Err(RegistryError::Corrupt("trailing bytes in descriptor blob".into()));
    }
    Ok(out)
}

pub fn save_registry(reg: &Registry, dir: &Path) -> Result<(), RegistryError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        build_params: reg.build_params,
        images: reg
            .images
            .iter()
            .map(|im| ImageRecord {
                id: im.id.clone(),
                source_path: im.source_path.clone(),
                width: im.width,
                height: im.height,
                keypoint_count: im.features.len(),
                thumbnail_sig: im.thumbnail_sig.clone(),
                pose: im.pose.clone(),
            })
            .collect(),
        aois: reg.aois.clone(),
    };
    let blob_path = dir.join(DESCRIPTORS_FILE);
    fs::write(&blob_path, encode_blob(&reg.images)).map_err(io_err(&blob_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))
}

pub fn load_registry(dir: &Path) -> Result<Registry, RegistryError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT_TAG) {
        return Err(RegistryError::Corrupt(format!(
            "{} is not a registry manifest",
            manifest_path.display()
        )));
    }
    match raw.get("version") {
        Some(v) if v.as_u64() == Some(FORMAT_VERSION as u64) => {}
        other => {
            return Err(RegistryError::FormatVersionMismatch {
                found: other.map_or_else(|| "none".to_string(), |v| v.to_string()),
            })
        }
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    let blob_path = dir.join(DESCRIPTORS_FILE);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    let counts: Vec<usize> = manifest.images.iter().map(|im| im.keypoint_count).collect();
    let features = decode_blob(&blob, &counts)?;
    let mut ids = BTreeSet::new();
    let images: Vec<ReferenceImage> = manifest
        .images
        .into_iter()
        .zip(features)
        .map(|(rec, features)| {
            if !ids.insert(rec.id.clone()) {
                return Err(RegistryError::DuplicateImageId(rec.id));
            }
            if rec.thumbnail_sig.len() != SIGNATURE_LEN {
                return Err(RegistryError::Corrupt(format!(
                    "signature of {} has {} values",
                    rec.id,
                    rec.thumbnail_sig.len()
                )));
            }
            Ok(ReferenceImage {
                id: rec.id,
                source_path: rec.source_path,
                width: rec.width,
                height: rec.height,
                features,
                thumbnail_sig: rec.thumbnail_sig,
                pose: rec.pose,
            })
        })
        .collect::<Result<_, _>>()?;
    for aoi in &manifest.aois {
        for (id, b) in &aoi.boxes {
            let Some(im) = images.iter().find(|im| &im.id == id) else {
                return Err(RegistryError::Corrupt(format!(
                    "AOI {} references unknown image {id}",
                    aoi.aoi_id
                )));
            };
            if !b.bbox.within(im.width as f64, im.height as f64) {
                return Err(RegistryError::Corrupt(format!(
                    "AOI {} box on {id} lies outside the image",
                    aoi.aoi_id
                )));
            }
        }
    }
    Ok(Registry {
        images: Arc::new(images),
        aois: manifest.aois,
        build_params: manifest.build_params,
    })
}
