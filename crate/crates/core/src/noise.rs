//! Training-label transforms: the random baseline (label shuffle), the
//! single-wrong-tag corruption at rate `r`, and the `r` sweep grid.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{Manifest, TagVocabulary, N_CLASSES};
use crate::error::{Error, Result};

/// One altered clip: the tag taken out and the tag put in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replacement {
    pub id: String,
    pub removed: usize,
    pub inserted: usize,
}

/// Audit record of a corruption pass, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionPlan {
    pub r: f64,
    pub n_clips: usize,
    pub replacements: Vec<Replacement>,
}

impl CorruptionPlan {
    pub fn affected_ids(&self) -> impl Iterator<Item = &str> {
        self.replacements.iter().map(|r| r.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.replacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replacements.is_empty()
    }

    /// `id,removed,inserted` with tag names.
    pub fn write_csv(&self, path: impl AsRef<Path>, vocab: &TagVocabulary) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        w.write_record(["id", "removed", "inserted"])?;
        for r in &self.replacements {
            w.write_record([r.id.as_str(), vocab.name(r.removed), vocab.name(r.inserted)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Number of clips altered at rate `r` percent: `round(r·n/100)`, halves
/// rounded away from zero.
pub fn affected_count(r: f64, n: usize) -> usize {
    (r * n as f64 / 100.0).round() as usize
}

/// Reassigns the tag sets across clips by a uniform random permutation.
pub fn shuffle_labels<R: Rng + ?Sized>(m: &Manifest, rng: &mut R) -> Result<Manifest> {
    if m.is_empty() {
        return Err(Error::invalid("cannot shuffle an empty manifest"));
    }
    let mut tags: Vec<BTreeSet<usize>> = m.records().iter().map(|r| r.tags.clone()).collect();
    tags.shuffle(rng);
    m.with_tags(tags)
}

/// Gives `round(r·n/100)` uniformly chosen clips exactly one wrong tag.
///
/// In each chosen clip one tag, picked uniformly, is removed and a tag drawn
/// uniformly from the complement of the clip's original set is inserted, so
/// the tag count never changes.
pub fn corrupt_labels<R: Rng + ?Sized>(
    m: &Manifest,
    r: f64,
    rng: &mut R,
) -> Result<(Manifest, CorruptionPlan)> {
    if !(0.0..=100.0).contains(&r) {
        return Err(Error::invalid(format!("corruption rate {r} outside [0, 100]")));
    }
    let n = m.len();
    let k = affected_count(r, n);
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, n, k).into_vec();
    chosen.sort_unstable();

    let mut tags: Vec<BTreeSet<usize>> = m.records().iter().map(|r| r.tags.clone()).collect();
    let mut replacements = Vec::with_capacity(k);
    for i in chosen {
        let original = &m.records()[i].tags;
        if original.len() >= N_CLASSES {
            return Err(Error::invalid(format!(
                "clip {} carries every class; no differing tag can be inserted",
                m.records()[i].id
            )));
        }
        let present: Vec<usize> = original.iter().copied().collect();
        let removed = present[rng.gen_range(0..present.len())];
        let absent: Vec<usize> = (0..N_CLASSES).filter(|c| !original.contains(c)).collect();
        let inserted = absent[rng.gen_range(0..absent.len())];
        tags[i].remove(&removed);
        tags[i].insert(inserted);
        replacements.push(Replacement {
            id: m.records()[i].id.clone(),
            removed,
            inserted,
        });
    }
    Ok((
        m.with_tags(tags)?,
        CorruptionPlan {
            r,
            n_clips: n,
            replacements,
        },
    ))
}

/// `r_start, r_start + step, …, r_end` in percent.
pub fn sweep_plan(r_start: u32, r_end: u32, step: u32) -> Result<Vec<u32>> {
    if step == 0 {
        return Err(Error::invalid("sweep step must be positive"));
    }
    if r_end < r_start || r_end > 100 {
        return Err(Error::invalid(format!(
            "sweep range {r_start}..={r_end} is not within [0, 100]"
        )));
    }
    if (r_end - r_start) % step != 0 {
        return Err(Error::invalid(format!(
            "step {step} does not divide the range {r_start}..={r_end}"
        )));
    }
    Ok((r_start..=r_end).step_by(step as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClipRecord, Source, SplitRole};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn manifest(tag_sets: &[&[usize]]) -> Manifest {
        let records = tag_sets
            .iter()
            .enumerate()
            .map(|(i, t)| ClipRecord {
                id: format!("c{i}"),
                audio_ref: format!("a{i}.wav"),
                tags: t.iter().copied().collect(),
                source: Source::Curated,
            })
            .collect();
        Manifest::new(records, SplitRole::Train).unwrap()
    }

    #[test]
    fn sweep_examples() {
        let full = sweep_plan(0, 100, 5).unwrap();
        assert_eq!(full.len(), 21);
        assert_eq!((full[0], full[20]), (0, 100));
        assert_eq!(sweep_plan(0, 0, 5).unwrap(), vec![0]);
        assert_eq!(sweep_plan(0, 10, 5).unwrap(), vec![0, 5, 10]);
        assert!(sweep_plan(0, 10, 3).is_err());
        assert!(sweep_plan(0, 10, 0).is_err());
        assert!(sweep_plan(0, 105, 5).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(affected_count(50.0, 1), 1);
        assert_eq!(affected_count(5.0, 10), 1);
        assert_eq!(affected_count(25.0, 10), 3);
        assert_eq!(affected_count(70.0, 100), 70);
    }

    #[test]
    fn single_clip_shuffle_is_identity() {
        let m = manifest(&[&[4, 5]]);
        assert_eq!(shuffle_labels(&m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), m);
        let empty = Manifest::new(vec![], SplitRole::Train).unwrap();
        assert!(shuffle_labels(&empty, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn single_tag_clip_gets_a_different_tag() {
        let m = manifest(&[&[2]]);
        let (out, plan) = corrupt_labels(&m, 100.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let tags = &out.records()[0].tags;
        assert_eq!(tags.len(), 1);
        assert!(!tags.contains(&2));
        assert_eq!(plan.replacements[0].removed, 2);
    }

    #[test]
    fn zero_rate_is_identity() {
        let m = manifest(&[&[0], &[1, 2], &[3]]);
        let (out, plan) = corrupt_labels(&m, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, m);
        assert!(plan.is_empty());
    }

    #[test]
    fn full_tag_clip_cannot_be_corrupted() {
        let all: Vec<usize> = (0..12).collect();
        let m = manifest(&[&all]);
        assert!(corrupt_labels(&m, 100.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(corrupt_labels(&m, 101.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn audit_file_lists_names() {
        let m = manifest(&[&[0], &[1]]);
        let (_, plan) = corrupt_labels(&m, 50.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plan.csv");
        plan.write_csv(&p, &TagVocabulary::default()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,removed,inserted");
        assert_eq!(lines.len(), 2);
    }
}
