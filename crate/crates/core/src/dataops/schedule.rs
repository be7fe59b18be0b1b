use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::tensor::SeededRng;

use super::{Bucket, DataError, DatasetManifest, Result};

/// Samples from a single bucket, as indices into the manifest's records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub bucket_id: usize,
    pub indices: Vec<usize>,
}

/// One epoch of batches plus the per-bucket remainders that could not fill a
/// batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSchedule {
    pub batches: Vec<Batch>,
    pub dropped: BTreeMap<usize, Vec<usize>>,
}

impl BatchSchedule {
    pub fn dropped_count(&self) -> usize {
        self.dropped.values().map(Vec::len).sum()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Batch> {
        self.batches.iter()
    }
}

impl IntoIterator for BatchSchedule {
    type Item = Batch;
    type IntoIter = std::vec::IntoIter<Batch>;

    fn into_iter(self) -> Self::IntoIter {
        self.batches.into_iter()
    }
}

/// Plan one epoch. Members of each bucket are shuffled with
/// `SeededRng(seed, epoch)`; the next batch comes from the bucket with the
/// most full batches left, excluding the bucket just used whenever another
/// is available (ties go to the smaller id).
pub fn batch_scheduler(
    manifest: &DatasetManifest,
    buckets: &[Bucket],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchSchedule> {
    if batch_size == 0 {
        return Err(DataError::Config("batch size must be positive".into()));
    }
    manifest.check_buckets(buckets)?;
    let mut members: BTreeMap<usize, Vec<usize>> =
        buckets.iter().map(|b| (b.id, Vec::new())).collect();
    for (i, r) in manifest.records.iter().enumerate() {
        members
            .get_mut(&r.bucket_id.expect("checked"))
            .expect("checked")
            .push(i);
    }

    let mut rng = SeededRng::new(seed, epoch);
    let mut queues: BTreeMap<usize, std::vec::IntoIter<Vec<usize>>> = BTreeMap::new();
    let mut dropped = BTreeMap::new();
    for (id, mut list) in members {
        list.shuffle(&mut rng);
        let full = list.len() / batch_size * batch_size;
        let rest = list.split_off(full);
        if !rest.is_empty() {
            dropped.insert(id, rest);
        }
        let chunks: Vec<Vec<usize>> = list.chunks(batch_size).map(<[usize]>::to_vec).collect();
        if !chunks.is_empty() {
            queues.insert(id, chunks.into_iter());
        }
    }
    if queues.is_empty() {
        return Err(DataError::Schedule(format!(
            "no bucket has {batch_size} or more samples ({} records)",
            manifest.len()
        )));
    }

    let mut batches = Vec::new();
    let mut last: Option<usize> = None;
    loop {
        let pick = |exclude: Option<usize>| {
            queues
                .iter()
                .filter(|(id, q)| q.len() > 0 && Some(**id) != exclude)
                .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))
                .map(|(id, _)| *id)
        };
        let Some(id) = pick(last).or_else(|| pick(None)) else {
            break;
        };
        let indices = queues
            .get_mut(&id)
            .and_then(Iterator::next)
            .expect("non-empty queue");
        batches.push(Batch {
            bucket_id: id,
            indices,
        });
        last = Some(id);
    }
    Ok(BatchSchedule { batches, dropped })
}
