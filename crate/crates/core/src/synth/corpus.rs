//! On-disk corpus: generation, manifest, checksummed loading.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::degrade::{self, DegradeConfig};
use super::font;
use super::pnm;
use super::render::{self, GlyphStyle, HR_WIDTH};
use super::warp::{DeformationSpec, ROTATION_RANGE, SHEAR_RANGE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Prior steps the stored character slots refer to.
pub const SLOT_STEPS: usize = 16;
pub const LABEL_LENGTHS: (usize, usize) = (3, 10);
/// Share of samples rendered with a deformation.
pub const DEFORM_PROBABILITY: f64 = 0.5;
/// Aspect range used at render time; narrower than the loss-time range so
/// every character stays inside the frame.
pub const RENDER_ASPECT: (f64, f64) = (0.8, 1.25);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 80/10/10 by index, boundaries rounded to nearest.
pub fn split_of(index: usize, count: usize) -> Split {
    let train = (count as f64 * 0.8).round() as usize;
    let val = (count as f64 * 0.9).round() as usize;
    if index < train {
        Split::Train
    } else if index < val {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSample {
    pub index: usize,
    pub label: String,
    pub deform: DeformationSpec,
    pub seed: u64,
    pub split: Split,
    /// `32×128×3` in `[0, 1]`.
    pub hr: Tensor<f64>,
    /// `16×64×3` in `[0, 1]`.
    pub lr: Tensor<f64>,
    /// `32×128` foreground mask.
    pub mask: Tensor<f64>,
    /// Prior step of each label character.
    pub slots: Vec<usize>,
}

impl GlyphSample {
    pub fn classes(&self) -> Vec<usize> {
        font::encode_label(&self.label).expect("labels are validated at creation")
    }

    /// Fixed-length class targets over `steps` prior positions.
    pub fn targets(&self, steps: usize) -> Vec<usize> {
        let slots = if steps == SLOT_STEPS {
            self.slots.clone()
        } else {
            self.slots.iter().map(|&s| s * steps / SLOT_STEPS).collect()
        };
        render::slot_targets(&self.classes(), &slots, steps)
    }
}

/// Per-sample seed derived from the top-level seed and the sample index.
pub fn sample_seed(top: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(top);
    rng.set_stream(index as u64);
    rng.gen()
}

pub fn sample_label<R: Rng>(rng: &mut R) -> String {
    let len = rng.gen_range(LABEL_LENGTHS.0..=LABEL_LENGTHS.1);
    (0..len)
        .map(|_| font::char_of(rng.gen_range(0..font::BLANK)).expect("class below blank"))
        .collect()
}

fn fits(spec: &DeformationSpec, centres: &[(f64, f64)]) -> bool {
    centres.iter().all(|&(x, y)| {
        let (tx, _) = spec.map_point(render::HR_HEIGHT, HR_WIDTH, x, y);
        tx >= 2.0 && tx <= HR_WIDTH as f64 - 2.0
    })
}

/// Everything about one sample, from its own seed. Draw order: label,
/// style, deform flag, deformation, degradation.
pub fn generate_sample(seed: u64, index: usize, split: Split) -> Result<GlyphSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = sample_label(&mut rng);
    let style = GlyphStyle::sample(&mut rng, label.len());
    let deformed = rng.gen_bool(DEFORM_PROBABILITY);
    let drawn =
        DeformationSpec::sample_within(&mut rng, ROTATION_RANGE, SHEAR_RANGE, RENDER_ASPECT);
    let degrade_cfg = DegradeConfig::sample(&mut rng);

    let clean = render::render_glyph_image(&label, &style)?;
    let mut spec = if deformed {
        drawn
    } else {
        DeformationSpec::IDENTITY
    };
    while !spec.is_identity() && !fits(&spec, &clean.centres) && spec.aspect > RENDER_ASPECT.0 {
        spec.aspect = (spec.aspect * 0.95).max(RENDER_ASPECT.0);
    }
    let shown = render::deform_rendered(&clean, &spec)?;
    let hr = render::quantize(&shown.image);
    let mask = render::quantize(&shown.mask);
    let lr = render::quantize(&degrade::degrade_to_lr(&hr, &degrade_cfg)?);
    let slots = render::slots_for(&shown.centres, HR_WIDTH, SLOT_STEPS);
    Ok(GlyphSample {
        index,
        label,
        deform: spec,
        seed,
        split,
        hr,
        lr,
        mask,
        slots,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigests {
    pub hr: String,
    pub lr: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub label: String,
    pub rotation: f64,
    pub shear: f64,
    pub aspect: f64,
    pub seed: u64,
    pub split: Split,
    pub slots: Vec<usize>,
    pub hr: String,
    pub lr: String,
    pub mask: String,
    pub sha256: FileDigests,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
}

impl CorpusManifest {
    pub fn split_count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Writes `n` samples plus the manifest under `dir`.
pub fn generate_corpus(n: usize, seed: u64, dir: &Path) -> Result<CorpusManifest> {
    if n == 0 {
        return Err(Error::Contract("corpus needs at least one sample".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(n);
    for index in 0..n {
        let s = generate_sample(sample_seed(seed, index), index, split_of(index, n))?;
        let names = [
            format!("hr/{index:06}.ppm"),
            format!("lr/{index:06}.ppm"),
            format!("mask/{index:06}.pgm"),
        ];
        let blobs = [
            pnm::encode_ppm(&s.hr)?,
            pnm::encode_ppm(&s.lr)?,
            pnm::encode_pgm(&s.mask)?,
        ];
        for (name, blob) in names.iter().zip(&blobs) {
            pnm::write_file(&dir.join(name), blob)?;
        }
        let [hr, lr, mask] = names;
        records.push(SampleRecord {
            index,
            label: s.label,
            rotation: s.deform.rotation,
            shear: s.deform.shear,
            aspect: s.deform.aspect,
            seed: s.seed,
            split: s.split,
            slots: s.slots,
            hr,
            lr,
            mask,
            sha256: FileDigests {
                hr: hex_digest(&blobs[0]),
                lr: hex_digest(&blobs[1]),
                mask: hex_digest(&blobs[2]),
            },
        });
    }
    let manifest = CorpusManifest {
        header: ManifestHeader {
            version: MANIFEST_VERSION,
            count: n,
            seed,
        },
        records,
    };
    write_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Parse(e.to_string())
}

pub fn write_manifest(m: &CorpusManifest, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", serde_json::to_string(&m.header).map_err(json_err)?).map_err(io)?;
    for r in &m.records {
        writeln!(w, "{}", serde_json::to_string(r).map_err(json_err)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let path = manifest_path(path);
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse("empty manifest".into()))?
        .map_err(|e| Error::io(&path, e))?;
    let header: ManifestHeader = serde_json::from_str(&first).map_err(json_err)?;
    if header.version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: MANIFEST_VERSION,
        });
    }
    let mut records = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 2)))?;
        records.push(r);
    }
    if records.len() != header.count {
        return Err(Error::Parse(format!(
            "manifest lists {} samples, header says {}",
            records.len(),
            header.count
        )));
    }
    Ok(CorpusManifest { header, records })
}

fn read_checked(
    dir: &Path,
    rel: &str,
    digest: &str,
    index: usize,
    what: &str,
) -> Result<Tensor<f64>> {
    let path = dir.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if hex_digest(&bytes) != digest {
        return Err(Error::Checksum {
            what: format!("sample {index} {what} ({rel})"),
        });
    }
    pnm::decode_pnm(&bytes)
}

/// Streams samples in manifest order, verifying every file.
pub struct CorpusReader {
    dir: PathBuf,
    records: std::vec::IntoIter<SampleRecord>,
}

impl Iterator for CorpusReader {
    type Item = Result<GlyphSample>;

    fn next(&mut self) -> Option<Self::Item> {
        let r = self.records.next()?;
        Some(load_record(&self.dir, r))
    }
}

fn load_record(dir: &Path, r: SampleRecord) -> Result<GlyphSample> {
    font::encode_label(&r.label)?;
    let hr = read_checked(dir, &r.hr, &r.sha256.hr, r.index, "hr")?;
    let lr = read_checked(dir, &r.lr, &r.sha256.lr, r.index, "lr")?;
    let mask = read_checked(dir, &r.mask, &r.sha256.mask, r.index, "mask")?;
    Ok(GlyphSample {
        index: r.index,
        label: r.label,
        deform: DeformationSpec {
            rotation: r.rotation,
            shear: r.shear,
            aspect: r.aspect,
        },
        seed: r.seed,
        split: r.split,
        hr,
        lr,
        mask,
        slots: r.slots,
    })
}

/// `path` may be the corpus directory or its manifest file.
pub fn load_corpus(path: &Path) -> Result<CorpusReader> {
    let mpath = manifest_path(path);
    let dir = mpath.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = read_manifest(&mpath)?;
    Ok(CorpusReader {
        dir,
        records: manifest.records.into_iter(),
    })
}

/// A fully loaded corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub header: ManifestHeader,
    pub samples: Vec<GlyphSample>,
}

impl Corpus {
    pub fn load(path: &Path) -> Result<Self> {
        let header = read_manifest(path)?.header;
        let samples = load_corpus(path)?.collect::<Result<Vec<_>>>()?;
        Ok(Self { header, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    /// A seeded permutation of all sample positions.
    pub fn shuffled(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        let count = |n| {
            let mut c = [0; 3];
            for i in 0..n {
                c[split_of(i, n) as usize] += 1;
            }
            c
        };
        assert_eq!(count(10), [8, 1, 1]);
        assert_eq!(count(512), [410, 51, 51]);
    }

    #[test]
    fn sample_is_reproducible_and_consistent() {
        let a = generate_sample(sample_seed(7, 3), 3, Split::Train).unwrap();
        let b = generate_sample(sample_seed(7, 3), 3, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hr.shape(), &[32, 128, 3]);
        assert_eq!(a.lr.shape(), &[16, 64, 3]);
        assert_eq!(a.slots.len(), a.label.len());
        a.deform.validate().unwrap();
        assert!(a.mask.sum() > 0.0);
    }

    #[test]
    fn seeds_differ_by_index() {
        assert_ne!(sample_seed(7, 0), sample_seed(7, 1));
        assert_ne!(sample_seed(7, 0), sample_seed(8, 0));
    }
}
