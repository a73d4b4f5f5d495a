//! Manifest-driven dataset model: tag vocabulary, clip records with their
//! label source, binarised label matrices, subsampling and tag statistics.
//!
//! Manifests are CSV files with the header `id,path,tags,source`; `tags` is a
//! `;`-separated list of vocabulary names and `source` is `curated` or `noisy`.
//! Audio paths are resolved relative to the manifest's directory.

mod synth;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dsp::{self, Waveform};
use crate::error::{Error, Result};

pub use synth::{
    class_recipe, synth_corpus, ClassRecipe, CorpusPaths, CorpusSpec, Envelope, SynthClip, SyntheticCorpus, Timbre,
};

pub const N_CLASSES: usize = 12;

const DEFAULT_NAMES: [&str; N_CLASSES] = [
    "Accordion",
    "Acoustic_guitar",
    "Bass_guitar",
    "Cello",
    "Electric_guitar",
    "Flute",
    "Glockenspiel",
    "Harmonica",
    "Marimba_and_xylophone",
    "Trumpet",
    "Male_singing",
    "Female_singing",
];

/// Ordered list of the 12 class names; position is the class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVocabulary {
    names: Vec<String>,
}

impl Default for TagVocabulary {
    fn default() -> Self {
        Self {
            names: DEFAULT_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TagVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() != N_CLASSES {
            return Err(Error::invalid(format!(
                "vocabulary must have {N_CLASSES} classes, found {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || n.contains([';', ',']) || n.trim() != n {
                return Err(Error::invalid(format!("invalid class name {n:?}")));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// One class name per line; blank lines are ignored.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.names.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Curated,
    Noisy,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Curated => "curated",
            Source::Noisy => "noisy",
        })
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curated" => Ok(Source::Curated),
            "noisy" => Ok(Source::Noisy),
            other => Err(Error::invalid(format!("unknown source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Test,
}

/// One weakly labelled clip: tags apply to the whole clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipRecord {
    pub id: String,
    pub audio_ref: String,
    pub tags: BTreeSet<usize>,
    pub source: Source,
}

impl ClipRecord {
    fn check(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("clip id is empty"));
        }
        if self.tags.is_empty() {
            return Err(Error::invalid(format!("clip {} has no tags", self.id)));
        }
        if let Some(&t) = self.tags.iter().find(|&&t| t >= N_CLASSES) {
            return Err(Error::invalid(format!(
                "clip {} has out-of-range tag {t}",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    records: Vec<ClipRecord>,
    split_role: SplitRole,
}

impl Manifest {
    pub fn new(records: Vec<ClipRecord>, split_role: SplitRole) -> Result<Self> {
        let mut ids = HashSet::new();
        for r in &records {
            r.check()?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("duplicate clip id {}", r.id)));
            }
            if split_role == SplitRole::Test && r.source != Source::Curated {
                return Err(Error::invalid(format!(
                    "test manifest contains non-curated clip {}",
                    r.id
                )));
            }
        }
        Ok(Self {
            records,
            split_role,
        })
    }

    pub fn records(&self) -> &[ClipRecord] {
        &self.records
    }

    pub fn split_role(&self) -> SplitRole {
        self.split_role
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same records with replaced tag sets, in order. Used by the label
    /// transforms; ids, paths and sources are carried over untouched.
    pub(crate) fn with_tags(&self, tags: Vec<BTreeSet<usize>>) -> Result<Self> {
        debug_assert_eq!(tags.len(), self.records.len());
        let records = self
            .records
            .iter()
            .zip(tags)
            .map(|(r, tags)| ClipRecord {
                tags,
                ..r.clone()
            })
            .collect();
        Manifest::new(records, self.split_role)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, vocab: &TagVocabulary) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        w.write_record(["id", "path", "tags", "source"])?;
        for r in &self.records {
            let tags: Vec<&str> = r.tags.iter().map(|&t| vocab.name(t)).collect();
            w.write_record([
                r.id.as_str(),
                r.audio_ref.as_str(),
                &tags.join(";"),
                &r.source.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parses a manifest CSV against `vocab`. Row numbers in errors are file
/// line numbers (the header is line 1).
pub fn load_manifest(
    path: impl AsRef<Path>,
    vocab: &TagVocabulary,
    role: SplitRole,
) -> Result<Manifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(file, vocab, role)
}

pub fn parse_manifest(
    reader: impl std::io::Read,
    vocab: &TagVocabulary,
    role: SplitRole,
) -> Result<Manifest> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "path", "tags", "source"] {
        return Err(Error::Parse {
            row: 1,
            message: format!("expected header id,path,tags,source, found {header:?}"),
        });
    }
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let parse_err = |message: String| Error::Parse { row: line, message };
        let row = row?;
        if row.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", row.len())));
        }
        let id = row[0].to_string();
        if id.is_empty() {
            return Err(parse_err("empty clip id".into()));
        }
        if !ids.insert(id.clone()) {
            return Err(parse_err(format!("duplicate clip id {id}")));
        }
        let mut tags = BTreeSet::new();
        for name in row[2].split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let idx = vocab
                .index_of(name)
                .ok_or_else(|| parse_err(format!("clip {id}: unknown tag {name:?}")))?;
            tags.insert(idx);
        }
        if tags.is_empty() {
            return Err(parse_err(format!("clip {id} has an empty tag list")));
        }
        let source = row[3]
            .parse::<Source>()
            .map_err(|e| parse_err(format!("clip {id}: {e}")))?;
        if role == SplitRole::Test && source != Source::Curated {
            return Err(parse_err(format!(
                "clip {id}: test manifests may only hold curated clips"
            )));
        }
        records.push(ClipRecord {
            id,
            audio_ref: row[1].to_string(),
            tags,
            source,
        });
    }
    Manifest::new(records, role)
}

/// `n_clips × 12` binary label matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn get(&self, clip: usize, class: usize) -> u8 {
        self.data[clip * N_CLASSES + class]
    }

    pub fn row(&self, clip: usize) -> &[u8] {
        &self.data[clip * N_CLASSES..(clip + 1) * N_CLASSES]
    }

    /// Column `class` as a label vector.
    pub fn column(&self, class: usize) -> Vec<u8> {
        (0..self.rows).map(|i| self.get(i, class)).collect()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|&v| v as usize).sum())
            .collect()
    }

    pub fn tag_sets(&self) -> Vec<BTreeSet<usize>> {
        (0..self.rows)
            .map(|i| (0..N_CLASSES).filter(|&c| self.get(i, c) == 1).collect())
            .collect()
    }
}

/// Binarises tag sets; `vocab` fixes the column count.
pub fn binarize(m: &Manifest, vocab: &TagVocabulary) -> LabelMatrix {
    let width = vocab.len();
    debug_assert_eq!(width, N_CLASSES);
    let mut data = vec![0u8; m.len() * width];
    for (i, r) in m.records.iter().enumerate() {
        for &t in &r.tags {
            data[i * width + t] = 1;
        }
    }
    LabelMatrix {
        rows: m.len(),
        data,
    }
}

/// `n` records drawn uniformly without replacement, in draw order.
pub fn subsample<R: Rng + ?Sized>(m: &Manifest, n: usize, rng: &mut R) -> Result<Manifest> {
    if n > m.len() {
        return Err(Error::invalid(format!(
            "cannot draw {n} records from a manifest of {}",
            m.len()
        )));
    }
    let picked = rand::seq::index::sample(rng, m.len(), n);
    let records = picked.iter().map(|i| m.records[i].clone()).collect();
    Manifest::new(records, m.split_role)
}

/// Same as [`subsample`] but also returns the records not drawn, in
/// original order.
pub fn split_off<R: Rng + ?Sized>(
    m: &Manifest,
    n: usize,
    rng: &mut R,
) -> Result<(Manifest, Manifest)> {
    if n > m.len() {
        return Err(Error::invalid(format!(
            "cannot split {n} records from a manifest of {}",
            m.len()
        )));
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.shuffle(rng);
    let mut taken: Vec<usize> = order[..n].to_vec();
    taken.sort_unstable();
    let taken_set: HashSet<usize> = taken.iter().copied().collect();
    let pick = |keep: bool| {
        m.records
            .iter()
            .enumerate()
            .filter(|(i, _)| taken_set.contains(i) == keep)
            .map(|(_, r)| r.clone())
            .collect::<Vec<_>>()
    };
    Ok((
        Manifest::new(pick(true), m.split_role)?,
        Manifest::new(pick(false), m.split_role)?,
    ))
}

/// Mean number of tags per clip.
pub fn tag_stats(m: &Manifest) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::invalid("tag statistics of an empty manifest"));
    }
    let total: usize = m.records.iter().map(|r| r.tags.len()).sum();
    Ok(total as f64 / m.len() as f64)
}

/// A manifest with its audio decoded and resampled to 16 kHz.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub manifest: Manifest,
    pub waveforms: Vec<Waveform>,
    pub labels: LabelMatrix,
}

impl LoadedSplit {
    pub fn new(manifest: Manifest, waveforms: Vec<Waveform>, vocab: &TagVocabulary) -> Result<Self> {
        if waveforms.len() != manifest.len() {
            return Err(Error::shape(format!(
                "{} waveforms for {} records",
                waveforms.len(),
                manifest.len()
            )));
        }
        let waveforms = waveforms
            .into_iter()
            .map(|w| dsp::resample(&w, dsp::TARGET_RATE))
            .collect::<Result<Vec<_>>>()?;
        let labels = binarize(&manifest, vocab);
        Ok(Self {
            manifest,
            waveforms,
            labels,
        })
    }

    /// Reads every clip's WAV, resolving paths against `base_dir`.
    pub fn load(manifest: Manifest, base_dir: &Path, vocab: &TagVocabulary) -> Result<Self> {
        let waveforms = manifest
            .records()
            .iter()
            .map(|r| dsp::read_wav(resolve(base_dir, &r.audio_ref)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, waveforms, vocab)
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    /// Same audio with the manifest's labels replaced by `manifest`'s
    /// (record ids must line up one-to-one).
    pub fn relabel(&self, manifest: Manifest, vocab: &TagVocabulary) -> Result<Self> {
        if manifest.len() != self.len()
            || manifest
                .records()
                .iter()
                .zip(self.manifest.records())
                .any(|(a, b)| a.id != b.id)
        {
            return Err(Error::invalid("relabelled manifest does not match clip ids"));
        }
        let labels = binarize(&manifest, vocab);
        Ok(Self {
            manifest,
            waveforms: self.waveforms.clone(),
            labels,
        })
    }

    /// Restriction to the records of `manifest`, looked up by id.
    pub fn select(&self, manifest: &Manifest, vocab: &TagVocabulary) -> Result<Self> {
        let index: std::collections::HashMap<&str, usize> = self
            .manifest
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        let waveforms = manifest
            .records()
            .iter()
            .map(|r| {
                index
                    .get(r.id.as_str())
                    .map(|&i| self.waveforms[i].clone())
                    .ok_or_else(|| Error::invalid(format!("clip {} not loaded", r.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest: manifest.clone(),
            waveforms,
            labels: binarize(manifest, vocab),
        })
    }
}

pub fn resolve(base_dir: &Path, audio_ref: &str) -> PathBuf {
    let p = Path::new(audio_ref);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> TagVocabulary {
        TagVocabulary::default()
    }

    fn rec(id: &str, tags: &[usize]) -> ClipRecord {
        ClipRecord {
            id: id.into(),
            audio_ref: format!("audio/{id}.wav"),
            tags: tags.iter().copied().collect(),
            source: Source::Curated,
        }
    }

    fn parse(text: &str) -> Result<Manifest> {
        parse_manifest(text.as_bytes(), &vocab(), SplitRole::Train)
    }

    #[test]
    fn vocabulary_invariants() {
        let v = vocab();
        assert_eq!(v.len(), 12);
        for i in 0..12 {
            assert_eq!(v.index_of(v.name(i)), Some(i));
        }
        let mut names = v.names().to_vec();
        names[1] = names[0].clone();
        assert!(TagVocabulary::new(names).is_err());
        assert!(TagVocabulary::new(vec!["a".into()]).is_err());
    }

    #[test]
    fn parses_multi_tag_row() {
        let m = parse("id,path,tags,source\nc1,audio/c1.wav,Flute;Bass_guitar,curated\n").unwrap();
        assert_eq!(m.len(), 1);
        let r = &m.records()[0];
        assert_eq!(r.tags.len(), 2);
        assert!(r.tags.contains(&vocab().index_of("Flute").unwrap()));
        assert_eq!(r.audio_ref, "audio/c1.wav");
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let err = parse("id,path,tags,source\nc1,a.wav,Flute,curated\nc1,b.wav,Cello,curated\n")
            .unwrap_err();
        match err {
            Error::Parse { row, message } => {
                assert_eq!(row, 3);
                assert!(message.contains("c1"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_tag_is_rejected() {
        let err = parse("id,path,tags,source\nc1,a.wav,Theremin,curated\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, ref message } if message.contains("Theremin")));
    }

    #[test]
    fn empty_tags_and_bad_header_are_rejected() {
        assert!(parse("id,path,tags,source\nc1,a.wav,,curated\n").is_err());
        assert!(parse("id,file,tags,source\nc1,a.wav,Flute,curated\n").is_err());
        assert!(parse("id,path,tags,source\nc1,a.wav,Flute,unknown\n").is_err());
    }

    #[test]
    fn test_manifest_rejects_noisy_clips() {
        let text = "id,path,tags,source\nc1,a.wav,Flute,noisy\n";
        assert!(parse_manifest(text.as_bytes(), &vocab(), SplitRole::Test).is_err());
    }

    #[test]
    fn binarize_examples() {
        let m = Manifest::new(vec![rec("a", &[3]), rec("b", &[0, 11])], SplitRole::Train).unwrap();
        let l = binarize(&m, &vocab());
        assert_eq!(l.row(0).iter().filter(|&&v| v == 1).count(), 1);
        assert_eq!(l.get(0, 3), 1);
        assert_eq!(l.row_sums(), vec![1, 2]);
        assert_eq!(l.tag_sets(), vec![m.records()[0].tags.clone(), m.records()[1].tags.clone()]);
    }

    #[test]
    fn curated_style_label_density() {
        // 3 of 100 clips carry a second tag
        let records = (0..100)
            .map(|i| {
                if i < 3 {
                    rec(&format!("c{i}"), &[i % 12, (i + 1) % 12])
                } else {
                    rec(&format!("c{i}"), &[i % 12])
                }
            })
            .collect();
        let m = Manifest::new(records, SplitRole::Train).unwrap();
        let sums = binarize(&m, &vocab()).row_sums();
        let mean = sums.iter().sum::<usize>() as f64 / sums.len() as f64;
        assert!((mean - 1.03).abs() < 1e-12);
        assert!((tag_stats(&m).unwrap() - 1.03).abs() < 1e-12);
    }

    #[test]
    fn subsample_draws_without_replacement() {
        let records = (0..3142).map(|i| rec(&format!("n{i}"), &[i % 12])).collect();
        let m = Manifest::new(records, SplitRole::Train).unwrap();
        let s = subsample(&m, 825, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.len(), 825);
        for r in s.records() {
            assert!(m.records().contains(r));
        }
        let again = subsample(&m, 825, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s, again);
        assert!(subsample(&m, 3143, &mut ChaCha8Rng::seed_from_u64(1)).is_err());

        let full = subsample(&m, m.len(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a: HashSet<_> = full.records().iter().map(|r| r.id.clone()).collect();
        let b: HashSet<_> = m.records().iter().map(|r| r.id.clone()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn tag_stats_examples() {
        let m = Manifest::new(
            vec![rec("a", &[0]), rec("b", &[1]), rec("c", &[2, 3])],
            SplitRole::Train,
        )
        .unwrap();
        assert!((tag_stats(&m).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        let single = Manifest::new(vec![rec("a", &[0]), rec("b", &[5])], SplitRole::Train).unwrap();
        assert_eq!(tag_stats(&single).unwrap(), 1.0);
        let empty = Manifest::new(vec![], SplitRole::Train).unwrap();
        assert!(tag_stats(&empty).is_err());
    }

    #[test]
    fn split_off_partitions_records() {
        let records = (0..20).map(|i| rec(&format!("c{i}"), &[i % 12])).collect();
        let m = Manifest::new(records, SplitRole::Train).unwrap();
        let (a, b) = split_off(&m, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.len() + b.len(), 20);
        assert!(a.records().iter().all(|r| !b.records().contains(r)));
    }
}
