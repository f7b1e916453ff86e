use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::annotations::{Dataset, EventAnnotation, FrameRef};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStrategy {
    /// `B` shuffled videos, each with all of its events.
    #[default]
    Default,
    /// `B·P` events pooled across videos.
    ShuffleEvents,
    /// Videos grouped by movie, batches filled movie by movie.
    SameMovie,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSampling {
    /// Bin centres.
    Uniform,
    /// One random frame per bin.
    #[default]
    Jitter,
}

/// Events of one step as `(video, event)` indices. For whole-video
/// strategies `videos` lists the videos and `events` runs over their events
/// in order; for `shuffle_events` `videos` is empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub videos: Vec<usize>,
    pub events: Vec<(usize, usize)>,
}

impl Batch {
    fn of_videos(dataset: &Dataset, videos: &[usize]) -> Self {
        Self {
            videos: videos.to_vec(),
            events: videos
                .iter()
                .flat_map(|&v| (0..dataset.videos[v].events.len()).map(move |k| (v, k)))
                .collect(),
        }
    }

    pub fn event_refs<'a>(&self, dataset: &'a Dataset) -> Vec<&'a EventAnnotation> {
        self.events.iter().map(|&(v, k)| &dataset.videos[v].events[k]).collect()
    }
}

/// Batches for one epoch. The last partial batch is dropped.
pub fn make_batches(
    dataset: &Dataset,
    strategy: BatchStrategy,
    batch_videos: usize,
    seed: u64,
) -> Result<Vec<Batch>, TrainError> {
    if dataset.videos.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let b = batch_videos.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches: Vec<Batch> = match strategy {
        BatchStrategy::Default => {
            let mut order: Vec<usize> = (0..dataset.videos.len()).collect();
            order.shuffle(&mut rng);
            order.chunks_exact(b).map(|c| Batch::of_videos(dataset, c)).collect()
        }
        BatchStrategy::SameMovie => {
            let mut movies: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, v) in dataset.videos.iter().enumerate() {
                movies.entry(v.movie_id.as_str()).or_default().push(i);
            }
            let mut groups: Vec<Vec<usize>> = movies.into_values().collect();
            groups.shuffle(&mut rng);
            for g in &mut groups {
                g.shuffle(&mut rng);
            }
            let order: Vec<usize> = groups.into_iter().flatten().collect();
            order.chunks_exact(b).map(|c| Batch::of_videos(dataset, c)).collect()
        }
        BatchStrategy::ShuffleEvents => {
            let p = dataset.events_per_video().unwrap_or(1).max(1);
            let mut all: Vec<(usize, usize)> = dataset
                .videos
                .iter()
                .enumerate()
                .flat_map(|(v, video)| (0..video.events.len()).map(move |k| (v, k)))
                .collect();
            all.shuffle(&mut rng);
            all.chunks_exact(b * p)
                .map(|c| Batch {
                    videos: Vec::new(),
                    events: c.to_vec(),
                })
                .collect()
        }
    };
    if batches.is_empty() {
        let (available, batch) = match strategy {
            BatchStrategy::ShuffleEvents => {
                let p = dataset.events_per_video().unwrap_or(1).max(1);
                (dataset.num_events(), b * p)
            }
            _ => (dataset.videos.len(), b),
        };
        return Err(TrainError::NoFullBatch { available, batch });
    }
    Ok(batches)
}

/// `T` indices into a list of `len` frames. Uniform picks bin centres
/// `floor((i + 0.5)·len / T)`; jitter draws once inside each bin
/// `[floor(i·len/T), floor((i+1)·len/T))`, using the centre for empty bins.
pub fn subsample_indices(len: usize, t: usize, mode: FrameSampling, seed: u64) -> Vec<usize> {
    assert!(len > 0, "event without frames");
    let centre = |i: usize| (((2 * i + 1) * len) / (2 * t)).min(len - 1);
    match mode {
        FrameSampling::Uniform => (0..t).map(centre).collect(),
        FrameSampling::Jitter => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..t)
                .map(|i| {
                    let lo = i * len / t;
                    let hi = (i + 1) * len / t;
                    if hi > lo {
                        rng.random_range(lo..hi)
                    } else {
                        centre(i)
                    }
                })
                .collect()
        }
    }
}

pub fn subsample_frames(event: &EventAnnotation, t: usize, mode: FrameSampling, seed: u64) -> Vec<FrameRef> {
    subsample_indices(event.frame_refs.len(), t, mode, seed)
        .into_iter()
        .map(|i| event.frame_refs[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_bin_centres() {
        assert_eq!(subsample_indices(20, 4, FrameSampling::Uniform, 0), vec![2, 7, 12, 17]);
        assert_eq!(subsample_indices(1, 4, FrameSampling::Uniform, 0), vec![0; 4]);
        assert_eq!(subsample_indices(1, 4, FrameSampling::Jitter, 9), vec![0; 4]);
    }

    #[test]
    fn jitter_stays_in_bins() {
        for seed in 0..200 {
            for len in [3usize, 4, 7, 20, 33] {
                let idx = subsample_indices(len, 4, FrameSampling::Jitter, seed);
                for (i, &j) in idx.iter().enumerate() {
                    let lo = i * len / 4;
                    let hi = ((i + 1) * len / 4).max(lo + 1);
                    assert!(j < len);
                    if len >= 4 {
                        assert!(lo <= j && j < hi, "len {len} bin {i} got {j}");
                    }
                }
            }
        }
    }
}
