use std::collections::{HashMap, VecDeque};
use std::num::NonZeroUsize;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use lru::LruCache;
use serde::Serialize;
use sgldm::conditioning::{Region, SketchBitmap};
use sgldm::pipeline::SynthesisOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    /// Milliseconds since the Unix epoch.
    pub submitted_at_ms: u64,
    pub queue_ms: Option<u64>,
    pub run_ms: Option<u64>,
}

/// What a client sees when polling a job.
#[derive(Debug, Clone, Serialize)]
pub struct JobRecord {
    pub id: String,
    pub state: JobState,
    pub request_hash: String,
    pub cache_hit: bool,
    pub sampler: String,
    pub eta: Option<f64>,
    pub seed: u64,
    pub steps: usize,
    pub masked_regions: Vec<Region>,
    /// Base64 PNG, present once done.
    pub result_png: Option<String>,
    pub error: Option<String>,
    pub timings: Timings,
}

pub(crate) struct Job {
    pub record: JobRecord,
    pub sketch: Option<SketchBitmap>,
    pub options: SynthesisOptions,
    pub cache_key: Option<String>,
    submitted: Instant,
    started: Option<Instant>,
}

/// Every job ever submitted plus the FIFO of those waiting to run.
pub(crate) struct JobStore {
    jobs: HashMap<String, Job>,
    queue: VecDeque<String>,
    next_id: u64,
    cache: LruCache<String, String>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl JobStore {
    pub fn new(cache_size: usize) -> Self {
        Self {
            jobs: HashMap::new(),
            queue: VecDeque::new(),
            next_id: 1,
            cache: LruCache::new(NonZeroUsize::new(cache_size.max(1)).expect("nonzero")),
        }
    }

    pub fn queue_depth(&self) -> usize {
        self.queue.len()
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn get(&self, id: &str) -> Option<&JobRecord> {
        self.jobs.get(id).map(|j| &j.record)
    }

    pub fn cached(&mut self, key: &str) -> Option<String> {
        self.cache.get(key).cloned()
    }

    /// Registers a job. With `result` it is complete at once (a cache hit);
    /// otherwise it joins the back of the queue.
    pub fn submit(
        &mut self,
        mut record: JobRecord,
        sketch: SketchBitmap,
        options: SynthesisOptions,
        cache_key: Option<String>,
        result: Option<String>,
    ) -> JobRecord {
        let id = format!("job-{:06}", self.next_id);
        self.next_id += 1;
        record.id = id.clone();
        record.timings.submitted_at_ms = now_ms();
        let queued = result.is_none();
        if let Some(png) = result {
            record.state = JobState::Done;
            record.cache_hit = true;
            record.result_png = Some(png);
            record.timings.queue_ms = Some(0);
            record.timings.run_ms = Some(0);
        }
        let out = record.clone();
        self.jobs.insert(
            id.clone(),
            Job {
                record,
                sketch: queued.then_some(sketch),
                options,
                cache_key,
                submitted: Instant::now(),
                started: None,
            },
        );
        if queued {
            self.queue.push_back(id);
        }
        out
    }

    /// Marks the oldest queued job running and hands out its inputs.
    pub fn start_next(&mut self) -> Option<(String, SketchBitmap, SynthesisOptions)> {
        let id = self.queue.pop_front()?;
        let job = self.jobs.get_mut(&id).expect("queued job exists");
        job.record.state = JobState::Running;
        job.started = Some(Instant::now());
        job.record.timings.queue_ms = Some(job.submitted.elapsed().as_millis() as u64);
        let sketch = job.sketch.take().expect("queued job keeps its sketch");
        Some((id, sketch, job.options.clone()))
    }

    pub fn finish(&mut self, id: &str, outcome: Result<String, String>) {
        let Some(job) = self.jobs.get_mut(id) else {
            return;
        };
        if job.record.state != JobState::Running {
            return;
        }
        job.record.timings.run_ms = job.started.map(|s| s.elapsed().as_millis() as u64);
        match outcome {
            Ok(png) => {
                if let Some(key) = &job.cache_key {
                    self.cache.put(key.clone(), png.clone());
                }
                job.record.state = JobState::Done;
                job.record.result_png = Some(png);
            }
            Err(e) => {
                job.record.state = JobState::Failed;
                job.record.error = Some(e);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> JobRecord {
        JobRecord {
            id: String::new(),
            state: JobState::Queued,
            request_hash: "h".into(),
            cache_hit: false,
            sampler: "ddim".into(),
            eta: Some(0.0),
            seed: 1,
            steps: 2,
            masked_regions: vec![],
            result_png: None,
            error: None,
            timings: Timings::default(),
        }
    }

    #[test]
    fn fifo_and_terminal_states() {
        let mut s = JobStore::new(2);
        let opts = SynthesisOptions::ddim(2, 1);
        let a = s.submit(record(), SketchBitmap::blank(4), opts.clone(), Some("k".into()), None);
        let b = s.submit(record(), SketchBitmap::blank(4), opts.clone(), None, None);
        assert_eq!(s.queue_depth(), 2);
        let (first, _, _) = s.start_next().unwrap();
        assert_eq!(first, a.id);
        assert_eq!(s.get(&a.id).unwrap().state, JobState::Running);
        s.finish(&a.id, Ok("png".into()));
        assert_eq!(s.get(&a.id).unwrap().state, JobState::Done);
        // A finished job cannot move again.
        s.finish(&a.id, Err("late".into()));
        assert_eq!(s.get(&a.id).unwrap().state, JobState::Done);
        assert_eq!(s.cached("k").as_deref(), Some("png"));
        let (second, _, _) = s.start_next().unwrap();
        assert_eq!(second, b.id);
        s.finish(&b.id, Err("boom".into()));
        assert_eq!(s.get(&b.id).unwrap().state, JobState::Failed);
        assert!(s.start_next().is_none());
        let hit = s.submit(record(), SketchBitmap::blank(4), opts, Some("k".into()), Some("png".into()));
        assert!(hit.cache_hit && hit.state.is_terminal());
        assert_eq!(s.queue_depth(), 0);
    }
}
