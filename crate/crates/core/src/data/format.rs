// DGZS01 sample records and the JSON dataset manifest.
//
// Record layout (little-endian):
//   "DGZS01"
//   u32 height | u32 width | u32 channels (3) | u32 mask_size (16) | u8 target kind (0 = 3d, 1 = 2d)
//   f32 left[h*w*3] | f32 right[h*w*3]          (HWC, values in [0, 1])
//   u8 mask[mask_size^2]
//   f64 label0 | f64 label1                       (yaw, pitch radians / u, v normalised)
//   f64 screen_half_x_mm | f64 screen_half_y_mm   (0 for 3d samples)
//   u32 subject_id

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::SynthParams;
use super::{Dataset, GazeRanges, GazeSample, Image, Target, TargetKind, MASK_SIZE};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const RECORD_MAGIC: &[u8; 6] = b"DGZS01";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    pub params: SynthParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub subject_id: u32,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub format: String,
    pub sample_count: usize,
    pub subjects: Vec<u32>,
    pub target_kind: TargetKind,
    /// Height and width of one eye crop.
    pub crop: [usize; 2],
    pub mask_size: usize,
    pub gaze_ranges: GazeRanges,
    #[serde(default)]
    pub screen_half_extent_mm: Option<[f64; 2]>,
    #[serde(default)]
    pub generator: Option<GeneratorInfo>,
    pub samples: Vec<SampleEntry>,
}

pub fn encode_record(s: &GazeSample) -> Vec<u8> {
    let (h, w) = (s.left.height, s.left.width);
    let mut out = Vec::with_capacity(32 + 2 * h * w * 3 * 4 + MASK_SIZE * MASK_SIZE + 40);
    out.extend_from_slice(RECORD_MAGIC);
    for d in [h, w, 3, MASK_SIZE] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(match s.target.kind() {
        TargetKind::Gaze3d => 0,
        TargetKind::Gaze2d => 1,
    });
    for img in [&s.left, &s.right] {
        for p in &img.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out.extend_from_slice(&s.mask);
    let (a, b) = s.target.pair();
    let (sx, sy) = s.screen_half_extent_mm.unwrap_or((0.0, 0.0));
    for v in [a, b, sx, sy] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.subject_id.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn image(&mut self, h: usize, w: usize) -> Option<Image> {
        let raw = self.take(h * w * 3 * 4)?;
        let px = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Image::new(h, w, px).ok()
    }
}

pub fn decode_record(bytes: &[u8], origin: &Path) -> Result<GazeSample> {
    let bad = |msg: String| Error::format(origin, msg);
    let truncated = || bad(format!("truncated record ({} bytes)", bytes.len()));
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6).ok_or_else(truncated)? != RECORD_MAGIC {
        return Err(bad("bad magic, not a DGZS01 record".into()));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32().ok_or_else(truncated)? as usize;
    }
    let [h, w, c, m] = dims;
    if c != 3 || m != MASK_SIZE || h == 0 || w == 0 || h > 4096 || w > 4096 {
        return Err(bad(format!("unsupported dimensions {h}x{w}x{c}, mask {m}")));
    }
    let kind = r.take(1).ok_or_else(truncated)?[0];
    let left = r.image(h, w).ok_or_else(truncated)?;
    let right = r.image(h, w).ok_or_else(truncated)?;
    let mask = r.take(m * m).ok_or_else(truncated)?.to_vec();
    let mut f = [0.0f64; 4];
    for v in &mut f {
        *v = r.f64().ok_or_else(truncated)?;
    }
    let subject_id = r.u32().ok_or_else(truncated)?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after record".into()));
    }
    let (target, screen) = match kind {
        0 => (
            Target::Gaze3d {
                yaw: f[0],
                pitch: f[1],
            },
            None,
        ),
        1 => (Target::Gaze2d { u: f[0], v: f[1] }, Some((f[2], f[3]))),
        k => return Err(bad(format!("unknown target kind byte {k}"))),
    };
    Ok(GazeSample {
        left,
        right,
        mask,
        target,
        subject_id,
        screen_half_extent_mm: screen,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes records under `root/samples/` and the manifest `root/manifest.json`.
/// `template.samples` and `template.sample_count` are filled in here.
pub fn write_dataset(root: &Path, mut template: DatasetManifest, samples: &[GazeSample]) -> Result<DatasetManifest> {
    fs::create_dir_all(root.join("samples"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("samples/{i:06}.dgzs");
        let bytes = encode_record(s);
        fs::write(root.join(&file), &bytes)?;
        entries.push(SampleEntry {
            file,
            subject_id: s.subject_id,
            sha256: sha256_hex(&bytes),
        });
    }
    template.sample_count = samples.len();
    template.samples = entries;
    let mut subjects: Vec<u32> = samples.iter().map(|s| s.subject_id).collect();
    subjects.sort_unstable();
    subjects.dedup();
    template.subjects = subjects;
    let json = serde_json::to_string_pretty(&template)?;
    fs::write(root.join(MANIFEST_FILE), json + "\n")?;
    Ok(template)
}

/// Handle on a dataset directory; samples are read lazily.
#[derive(Debug, Clone)]
pub struct DatasetReader {
    root: PathBuf,
    manifest: DatasetManifest,
}

pub fn load_dataset(root: &Path) -> Result<DatasetReader> {
    DatasetReader::open(root)
}

impl DatasetReader {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Data(format!("no dataset manifest at {}", path.display())));
        }
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
        if manifest.format != "DGZS01" {
            return Err(Error::format(&path, format!("unsupported format {:?}", manifest.format)));
        }
        if manifest.sample_count != manifest.samples.len() {
            return Err(Error::Data(format!(
                "manifest declares {} samples but lists {}",
                manifest.sample_count,
                manifest.samples.len()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    /// Reads, checksums and validates sample `i`.
    pub fn read(&self, i: usize) -> Result<GazeSample> {
        let entry = self
            .manifest
            .samples
            .get(i)
            .ok_or_else(|| Error::usage(format!("sample {i} out of range 0..{}", self.len())))?;
        let path = self.root.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::Data(format!("sample {}: {e}", entry.file)))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Data(format!("sample {}: checksum mismatch", entry.file)));
        }
        let s = decode_record(&bytes, &path)?;
        let [h, w] = self.manifest.crop;
        if s.left.height != h || s.left.width != w {
            return Err(Error::Data(format!(
                "sample {}: crop {}x{} but manifest declares {h}x{w}",
                entry.file, s.left.height, s.left.width
            )));
        }
        if s.subject_id != entry.subject_id || s.target.kind() != self.manifest.target_kind {
            return Err(Error::Data(format!("sample {}: disagrees with manifest", entry.file)));
        }
        s.validate(&self.manifest.gaze_ranges)
            .map_err(|e| Error::Data(format!("sample {}: {e}", entry.file)))?;
        Ok(s)
    }

    /// Samples in manifest order.
    pub fn iter(&self) -> impl Iterator<Item = Result<GazeSample>> + '_ {
        (0..self.len()).map(move |i| self.read(i))
    }

    /// A reproducible permutation of sample indices.
    pub fn shuffled_order(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut substream(seed, &["dataset-order"]));
        order
    }

    pub fn iter_order<'a>(&'a self, order: &'a [usize]) -> impl Iterator<Item = Result<GazeSample>> + 'a {
        order.iter().map(move |&i| self.read(i))
    }

    /// Reads `order` on a background thread, at most `depth` samples ahead,
    /// yielding them in exactly the sequential order.
    pub fn prefetch(&self, order: Vec<usize>, depth: usize) -> mpsc::IntoIter<Result<GazeSample>> {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let reader = self.clone();
        std::thread::spawn(move || {
            for i in order {
                if tx.send(reader.read(i)).is_err() {
                    break;
                }
            }
        });
        rx.into_iter()
    }

    pub fn read_all(&self) -> Result<Dataset> {
        let samples = self.iter().collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest: self.manifest.clone(),
            samples,
        })
    }
}
