//! Dataset ingestion and the synthetic toy face set.
//!
//! Inputs are pre-cropped face images. The index records, per image file, an
//! identity id (parsed from the filename stem up to the first underscore) and
//! its binary attribute vector from the attributes CSV; splits are assigned
//! deterministically by a seeded hash of the filename.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gan::AttributeVector;
use crate::nn::sample_normal;
use crate::tensor::{ImageTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub identity: String,
    pub attributes: AttributeVector,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub attribute_names: Vec<String>,
    pub entries: Vec<IndexEntry>,
    pub split_seed: u64,
}

/// Deterministic split from a seeded hash of the filename: 70/15/15.
pub fn split_for(filename: &str, seed: u64) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(filename.as_bytes());
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().unwrap());
    let frac = x as f64 / u64::MAX as f64;
    if frac < 0.70 {
        Split::Train
    } else if frac < 0.85 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Identity id: filename stem up to the first underscore.
pub fn identity_from_filename(file: &str) -> String {
    let stem = Path::new(file).file_stem().and_then(|s| s.to_str()).unwrap_or(file);
    stem.split('_').next().unwrap_or(stem).to_string()
}

impl DatasetIndex {
    /// Build an index from an image directory and an attributes CSV whose
    /// header is `filename` followed by attribute column names; values 0/1.
    pub fn ingest(image_dir: &Path, attributes_csv: &Path, split_seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(attributes_csv)
            .map_err(|e| Error::io(attributes_csv.display().to_string(), e))?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Data { location: "csv".into(), message: "empty file".into() })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 {
            return Err(Error::Data {
                location: "csv header".into(),
                message: "need a filename column plus at least one attribute".into(),
            });
        }
        let attribute_names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
        let n = attribute_names.len();
        let mut entries = Vec::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let loc = format!("{}:{}", attributes_csv.display(), lineno + 1);
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != n + 1 {
                return Err(Error::Data {
                    location: loc,
                    message: format!("expected {} fields, found {}", n + 1, fields.len()),
                });
            }
            let file = fields[0].to_string();
            let full = image_dir.join(&file);
            if !full.is_file() {
                return Err(Error::Data {
                    location: loc,
                    message: format!("image file '{}' does not exist", full.display()),
                });
            }
            // decode now so a corrupt file fails at ingest, not mid-training
            load_image(&full)?;
            let bits: Vec<u8> = fields[1..]
                .iter()
                .map(|v| match *v {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(Error::Data {
                        location: loc.clone(),
                        message: format!("attribute value '{other}' is not 0/1"),
                    }),
                })
                .collect::<Result<_>>()?;
            entries.push(IndexEntry {
                identity: identity_from_filename(&file),
                attributes: AttributeVector::new(bits)?,
                split: split_for(&file, split_seed),
                file,
            });
        }
        if entries.is_empty() {
            return Err(Error::EmptySet("dataset index".into()));
        }
        Ok(DatasetIndex {
            root: image_dir.to_path_buf(),
            attribute_names,
            entries,
            split_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&s).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn entries_in(&self, split: Split) -> Vec<&IndexEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Load a split into memory with integer identity labels.
    pub fn load_split(&self, split: Split) -> Result<TrainData> {
        let entries = self.entries_in(split);
        self.load_entries(&entries)
    }

    pub fn load_all(&self) -> Result<TrainData> {
        let entries: Vec<&IndexEntry> = self.entries.iter().collect();
        self.load_entries(&entries)
    }

    fn load_entries(&self, entries: &[&IndexEntry]) -> Result<TrainData> {
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        for e in entries {
            let next = ids.len();
            ids.entry(e.identity.as_str()).or_insert(next);
        }
        let mut data = TrainData::default();
        for e in entries {
            data.images.push(load_image(&self.root.join(&e.file))?);
            data.atts.push(e.attributes.clone());
            data.labels.push(ids[e.identity.as_str()]);
            data.files.push(e.file.clone());
        }
        Ok(data)
    }
}

/// Paired image lists used for threshold calibration.
pub type ImagePairs = Vec<(ImageTensor, ImageTensor)>;

/// In-memory training split.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub images: Vec<ImageTensor>,
    pub atts: Vec<AttributeVector>,
    pub labels: Vec<usize>,
    pub files: Vec<String>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.images.len()
    }
    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Genuine (same-identity) and impostor (cross-identity) image pairs for
    /// threshold calibration. Identities with fewer than two images are
    /// excluded from genuine-pair generation. Deterministic enumeration,
    /// capped at `max_pairs` each.
    pub fn calibration_pairs(&self, max_pairs: usize) -> (ImagePairs, ImagePairs) {
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        'outer_g: for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                if self.labels[i] == self.labels[j] {
                    genuine.push((self.images[i].clone(), self.images[j].clone()));
                    if genuine.len() >= max_pairs {
                        break 'outer_g;
                    }
                }
            }
        }
        'outer_i: for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                if self.labels[i] != self.labels[j] {
                    impostor.push((self.images[i].clone(), self.images[j].clone()));
                    if impostor.len() >= max_pairs {
                        break 'outer_i;
                    }
                }
            }
        }
        (genuine, impostor)
    }
}

// ---- image file I/O ----------------------------------------------------------

/// Load an 8-bit RGB raster file into `[-1, 1]` via `v / 127.5 - 1`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data {
            location: path.display().to_string(),
            message: format!("cannot decode image: {e}"),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f64; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

/// Save to an 8-bit RGB PNG via `round((v + 1) * 127.5)`, clamped.
pub fn save_image(x: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = x.dims3();
    if c != 3 {
        return Err(Error::ShapeMismatch { expected: "3 channels".into(), got: format!("{c}") });
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for xx in 0..w {
            let px = [
                ((x.at3(0, y, xx) + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8,
                ((x.at3(1, y, xx) + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8,
                ((x.at3(2, y, xx) + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(xx as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Data {
        location: path.display().to_string(),
        message: format!("cannot encode image: {e}"),
    })
}

// ---- synthetic toy faces -------------------------------------------------------

/// Parameters of the synthetic identity-structured face set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub per_identity: usize,
    pub size: usize,
    pub n_att: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { identities: 8, per_identity: 16, size: 16, n_att: 4, seed: 7 }
    }
}

/// Generate a deterministic synthetic face set: each identity is a fixed
/// arrangement of colored blobs, per-image variation adds jitter and noise,
/// and each set attribute bit mixes in its own spatial pattern.
pub fn generate_synthetic(spec: &SyntheticSpec) -> TrainData {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let s = spec.size;
    let sf = s as f64;

    // attribute patterns shared across identities
    let att_patterns: Vec<ImageTensor> = (0..spec.n_att)
        .map(|a| {
            let fx = 1.0 + a as f64;
            let orient = a % 2 == 0;
            Tensor::from_fn3(3, s, s, |c, y, x| {
                let t = if orient { x } else { y } as f64 / sf;
                0.35 * (t * fx * std::f64::consts::TAU + c as f64 * 0.7).sin()
            })
        })
        .collect();

    let mut data = TrainData::default();
    for id in 0..spec.identities {
        // identity-specific blob layout and palette
        let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.2..0.8) * sf,
                    rng.gen_range(0.2..0.8) * sf,
                    rng.gen_range(0.15..0.35) * sf,
                    [
                        rng.gen_range(-0.8..0.8),
                        rng.gen_range(-0.8..0.8),
                        rng.gen_range(-0.8..0.8),
                    ],
                )
            })
            .collect();
        let base_tone: f64 = rng.gen_range(-0.3..0.3);

        for k in 0..spec.per_identity {
            let jx: f64 = rng.gen_range(-1.0..1.0);
            let jy: f64 = rng.gen_range(-1.0..1.0);
            let bits: Vec<u8> = (0..spec.n_att).map(|_| rng.gen_range(0..2) as u8).collect();
            let att = AttributeVector::new(bits).unwrap();
            let mut img = Tensor::from_fn3(3, s, s, |c, y, x| {
                let mut v = base_tone;
                for (bx, by, rad, color) in &blobs {
                    let dx = x as f64 - bx - jx;
                    let dy = y as f64 - by - jy;
                    let d2 = (dx * dx + dy * dy) / (rad * rad);
                    v += color[c] * (-d2).exp();
                }
                v
            });
            for (a, pat) in att_patterns.iter().enumerate() {
                if att.bits()[a] == 1 {
                    img = img.zip_map(pat, |v, p| v + p);
                }
            }
            for v in img.data_mut() {
                *v = (*v + 0.05 * sample_normal(&mut rng)).clamp(-1.0, 1.0);
            }
            data.images.push(img);
            data.atts.push(att);
            data.labels.push(id);
            data.files.push(format!("id{id}_{k:03}.png"));
        }
    }
    data
}

/// Write a synthetic set to disk as PNGs plus an attributes CSV, so the
/// file-based workflows can run end to end on generated data.
pub fn write_synthetic_to_dir(spec: &SyntheticSpec, dir: &Path) -> Result<(PathBuf, TrainData)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let data = generate_synthetic(spec);
    let mut csv = String::from("filename");
    for a in 0..spec.n_att {
        csv.push_str(&format!(",attr{a}"));
    }
    csv.push('\n');
    for i in 0..data.len() {
        save_image(&data.images[i], &dir.join(&data.files[i]))?;
        csv.push_str(&data.files[i]);
        for &b in data.atts[i].bits() {
            csv.push_str(&format!(",{b}"));
        }
        csv.push('\n');
    }
    let csv_path = dir.join("attributes.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    Ok((csv_path, data))
}
