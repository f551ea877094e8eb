//! Synthetic bi-temporal change scenes, the manifest format and the
//! training-stream iteration modes.

pub mod scene;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, key_of, Rng};
use crate::tensor::Tensor;

pub use scene::{all_captions, caption, captions, parse_caption, ChangeEvent, ChangeKind, Location, ObjectKind, Scene};

pub const CAPTIONS_PER_PAIR: usize = 5;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }
}

/// One manifest line. Image paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    pub path_a: String,
    pub path_b: String,
    pub captions: Vec<String>,
    pub split: Split,
    pub source: String,
    pub weight: u32,
}

impl CaptionRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.captions.len() != CAPTIONS_PER_PAIR {
            return Err(format!("record '{}' has {} captions, expected {CAPTIONS_PER_PAIR}", self.id, self.captions.len()));
        }
        if self.weight == 0 {
            return Err(format!("record '{}' has weight 0", self.id));
        }
        Ok(())
    }

    /// Captions with duplicates removed, in first-seen order.
    pub fn distinct_captions(&self) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        (0..self.captions.len()).filter(|&i| seen.insert(self.captions[i].as_str())).collect()
    }
}

pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let r: CaptionRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        r.validate().map_err(err)?;
        out.push(r);
    }
    Ok(out)
}

pub fn manifest_text(records: &[CaptionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect()
}

pub fn load_manifest(path: &Path) -> Result<Vec<CaptionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn write_manifest(records: &[CaptionRecord], path: &Path) -> Result<()> {
    std::fs::write(path, manifest_text(records)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOptions {
    pub pairs: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Five distinct paraphrases per pair; otherwise all five references
    /// repeat the first template.
    pub paraphrases: bool,
    /// Every record goes to the train split instead of an 80/10/10 draw.
    pub all_train: bool,
    pub weight: u32,
    pub source: String,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            pairs: 32,
            seed: 0,
            image_size: 32,
            paraphrases: true,
            all_train: false,
            weight: 1,
            source: "synthetic".to_string(),
        }
    }
}

/// A generated pair with the ground truth behind its captions.
#[derive(Debug, Clone)]
pub struct GeneratedPair {
    pub record: CaptionRecord,
    pub event: ChangeEvent,
    pub before: Scene,
    pub after: Scene,
    pub image_a: Tensor,
    pub image_b: Tensor,
}

/// Renders pair `index`; a pure function of `(options, index)`.
pub fn generate_pair(options: &GeneratorOptions, index: usize) -> GeneratedPair {
    let mut rng = Rng::new(derive_seed(options.seed, index as u64));
    let size = options.image_size;
    let texture: Vec<f64> = (0..size * size).map(|_| rng.uniform_range(-0.04, 0.04)).collect();
    let before = Scene::random(&mut rng);
    let event = ChangeEvent::random(&before, &mut rng);
    let after = event.apply(&before, &mut rng);
    let split = if options.all_train {
        Split::Train
    } else {
        match rng.uniform() {
            u if u < 0.8 => Split::Train,
            u if u < 0.9 => Split::Val,
            _ => Split::Test,
        }
    };
    let id = format!("pair{index:05}");
    let captions = if options.paraphrases {
        captions(&event)
    } else {
        vec![caption(&event, 0); CAPTIONS_PER_PAIR]
    };
    GeneratedPair {
        record: CaptionRecord {
            path_a: format!("images/{id}_a.cct1"),
            path_b: format!("images/{id}_b.cct1"),
            id,
            captions,
            split,
            source: options.source.clone(),
            weight: options.weight,
        },
        event,
        image_a: before.render(size, &texture),
        image_b: after.render(size, &texture),
        before,
        after,
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub manifest: PathBuf,
    pub records: usize,
    pub per_split: [(Split, usize); 3],
    pub per_kind: Vec<(ChangeKind, usize)>,
    /// SHA-256 over the manifest and every image file, in record order.
    pub checksum: String,
}

/// Writes `images/*.cct1` and `manifest.jsonl` under `out_dir`.
pub fn generate_dataset(options: &GeneratorOptions, out_dir: &Path) -> Result<DatasetSummary> {
    if options.pairs == 0 {
        return Err(Error::Config("pairs must be at least 1".into()));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(options.pairs);
    let mut per_kind: Vec<(ChangeKind, usize)> = ChangeKind::ALL.iter().map(|&k| (k, 0)).collect();
    for i in 0..options.pairs {
        let pair = generate_pair(options, i);
        pair.image_a.save_cct1(&out_dir.join(&pair.record.path_a))?;
        pair.image_b.save_cct1(&out_dir.join(&pair.record.path_b))?;
        per_kind.iter_mut().find(|(k, _)| *k == pair.event.kind).expect("kind").1 += 1;
        records.push(pair.record);
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&records, &manifest)?;
    let count = |s: Split| records.iter().filter(|r| r.split == s).count();
    Ok(DatasetSummary {
        checksum: dataset_checksum(&manifest, &records)?,
        per_split: [Split::Train, Split::Val, Split::Test].map(|s| (s, count(s))),
        records: records.len(),
        manifest,
        per_kind,
    })
}

pub fn dataset_checksum(manifest: &Path, records: &[CaptionRecord]) -> Result<String> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut h = Sha256::new();
    h.update(std::fs::read(manifest).map_err(|e| Error::io(manifest, e))?);
    for r in records {
        for p in [&r.path_a, &r.path_b] {
            let path = dir.join(p);
            h.update(std::fs::read(&path).map_err(|e| Error::io(&path, e))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationMode {
    /// Every distinct caption of every record.
    Flatten,
    /// One uniformly drawn caption per record.
    RandomChoice,
}

impl fmt::Display for IterationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IterationMode::Flatten => "flatten",
            IterationMode::RandomChoice => "random_choice",
        })
    }
}

/// A training item: record index into the dataset and caption index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Item {
    pub record: usize,
    pub caption: usize,
}

/// The epoch's item order. Upsampled records (`weight > 1`) appear once
/// per copy; random choice draws independently for each copy.
pub fn iterate(records: &[CaptionRecord], mode: IterationMode, seed: u64, epoch: u64) -> Result<Vec<Item>> {
    if records.is_empty() {
        return Err(Error::invalid("iterate", "empty manifest"));
    }
    let mut items = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for copy in 0..r.weight as u64 {
            match mode {
                IterationMode::Flatten => {
                    items.extend(r.distinct_captions().into_iter().map(|c| Item { record: i, caption: c }));
                }
                IterationMode::RandomChoice => {
                    let stream = derive_seed(derive_seed(derive_seed(seed, epoch), key_of(&r.id)), copy);
                    let c = Rng::new(stream).below(r.captions.len());
                    items.push(Item { record: i, caption: c });
                }
            }
        }
    }
    let mut rng = Rng::new(derive_seed(seed, epoch)).fork(0x5348_5546);
    rng.shuffle(&mut items);
    Ok(items)
}

/// Items per epoch for `mode`.
pub fn epoch_len(records: &[CaptionRecord], mode: IterationMode) -> usize {
    records
        .iter()
        .map(|r| {
            r.weight as usize
                * match mode {
                    IterationMode::Flatten => r.distinct_captions().len(),
                    IterationMode::RandomChoice => 1,
                }
        })
        .sum()
}

/// Records of one split with their images in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<CaptionRecord>,
    pub images: Vec<(Tensor, Tensor)>,
}

impl Dataset {
    /// Loads the records of `split` (all records when `None`).
    pub fn load(manifest: &Path, split: Option<Split>) -> Result<Self> {
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let records: Vec<CaptionRecord> = load_manifest(manifest)?
            .into_iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .collect();
        let images = records
            .iter()
            .map(|r| Ok((Tensor::load(&dir.join(&r.path_a))?, Tensor::load(&dir.join(&r.path_b))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { records, images })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::Vocabulary;

    fn record(id: &str, weight: u32) -> CaptionRecord {
        let e = ChangeEvent {
            kind: ChangeKind::Add,
            target: Some((ObjectKind::Tree, Location::Center)),
        };
        CaptionRecord {
            id: id.into(),
            path_a: format!("images/{id}_a.cct1"),
            path_b: format!("images/{id}_b.cct1"),
            captions: captions(&e),
            split: Split::Train,
            source: "fixture".into(),
            weight,
        }
    }

    #[test]
    fn manifest_round_trip() {
        let records = vec![record("a", 1), record("b", 3), record("c", 1)];
        let back = parse_manifest(&manifest_text(&records), "mem").unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn manifest_errors_name_the_line() {
        let mut text = manifest_text(&[record("a", 1)]);
        text.push_str("{\"id\":\"b\",\"path_a\":\"x\",\"path_b\":\"y\",\"split\":\"train\",\"source\":\"s\",\"weight\":1}\n");
        match parse_manifest(&text, "m.jsonl") {
            Err(Error::Parse { line: 2, msg, .. }) => assert!(msg.contains("captions"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let mut short = record("c", 1);
        short.captions.pop();
        assert!(matches!(parse_manifest(&manifest_text(&[short]), "m"), Err(Error::Parse { line: 1, .. })));
        let zero = record("d", 0);
        assert!(parse_manifest(&manifest_text(&[zero]), "m").is_err());
    }

    #[test]
    fn stream_lengths() {
        let ten: Vec<CaptionRecord> = (0..10).map(|i| record(&i.to_string(), 1)).collect();
        assert_eq!(iterate(&ten, IterationMode::Flatten, 1, 0).unwrap().len(), 50);
        let tripled: Vec<CaptionRecord> = (0..10).map(|i| record(&i.to_string(), 3)).collect();
        assert_eq!(iterate(&tripled, IterationMode::RandomChoice, 1, 0).unwrap().len(), 30);
        assert_eq!(epoch_len(&tripled, IterationMode::RandomChoice), 3 * epoch_len(&ten, IterationMode::RandomChoice));
        assert_eq!(epoch_len(&tripled, IterationMode::Flatten), 150);
        assert!(iterate(&[], IterationMode::Flatten, 1, 0).is_err());
    }

    #[test]
    fn random_choice_is_reproducible() {
        let recs: Vec<CaptionRecord> = (0..20).map(|i| record(&i.to_string(), 1)).collect();
        let a = iterate(&recs, IterationMode::RandomChoice, 5, 2).unwrap();
        assert_eq!(a, iterate(&recs, IterationMode::RandomChoice, 5, 2).unwrap());
        assert_ne!(a, iterate(&recs, IterationMode::RandomChoice, 5, 3).unwrap());
        let mut seen: Vec<usize> = a.iter().map(|i| i.record).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn flatten_skips_duplicate_captions() {
        let mut r = record("a", 2);
        r.captions = vec![r.captions[0].clone(); CAPTIONS_PER_PAIR];
        assert_eq!(iterate(&[r], IterationMode::Flatten, 0, 0).unwrap().len(), 2);
    }

    #[test]
    fn generator_is_deterministic_and_faithful() {
        let opts = GeneratorOptions {
            pairs: 64,
            seed: 11,
            ..Default::default()
        };
        let vocab = Vocabulary::build(all_captions().iter().map(String::as_str)).unwrap();
        let mut none = 0;
        for i in 0..opts.pairs {
            let p = generate_pair(&opts, i);
            let q = generate_pair(&opts, i);
            assert!(p.image_a.bit_eq(&q.image_a) && p.image_b.bit_eq(&q.image_b));
            assert_eq!(p.record, q.record);
            assert_eq!(p.record.captions.len(), 5);
            for c in &p.record.captions {
                assert_eq!(parse_caption(c), Some(p.event));
                vocab.encode(c).unwrap();
            }
            if p.event.kind == ChangeKind::None {
                none += 1;
                assert!(p.image_a.bit_eq(&p.image_b));
            } else {
                assert!(!p.image_a.bit_eq(&p.image_b));
            }
            assert!(p.image_a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!((8..=28).contains(&none), "{none}");
    }

    #[test]
    fn single_caption_mode() {
        let opts = GeneratorOptions {
            paraphrases: false,
            all_train: true,
            ..Default::default()
        };
        let p = generate_pair(&opts, 3);
        assert!(p.record.captions.iter().all(|c| c == &p.record.captions[0]));
        assert_eq!(p.record.split, Split::Train);
    }

    #[test]
    fn dataset_files_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let opts = GeneratorOptions {
            pairs: 6,
            seed: 7,
            ..Default::default()
        };
        let a = generate_dataset(&opts, &dir.path().join("a")).unwrap();
        let b = generate_dataset(&opts, &dir.path().join("b")).unwrap();
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.records, 6);
        let ds = Dataset::load(&a.manifest, None).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.images[0].0.shape(), &[32, 32, 3]);
        let opts0 = GeneratorOptions { pairs: 0, ..opts };
        assert!(generate_dataset(&opts0, dir.path()).is_err());
    }
}
