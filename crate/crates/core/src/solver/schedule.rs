//! Chunk placement over per-layer capacity limits.
//!
//! All functions index `limits` by `layer - 1` and return per-job
//! `(layer, chunks)` lists sorted by layer.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Job {
    pub chunks: u64,
    /// Earliest usable layer.
    pub release: usize,
    /// Latest usable layer (i_w - 1).
    pub deadline: usize,
    /// At least one chunk must land exactly at `release`.
    pub forced_first: bool,
}

pub(crate) type Allocation = Vec<(usize, u64)>;

fn run_edf(limits: &[u64], jobs: &[Job], mut record: Option<&mut Vec<BTreeMap<usize, u64>>>) -> bool {
    let n = limits.len();
    let mut residual = limits.to_vec();
    let mut rem: Vec<u64> = jobs.iter().map(|j| j.chunks).collect();
    let mut by_release: Vec<Vec<usize>> = vec![Vec::new(); n + 2];

    for (i, job) in jobs.iter().enumerate() {
        if job.chunks == 0 {
            continue;
        }
        if job.release == 0 || job.deadline < job.release || job.deadline > n {
            return false;
        }
        if job.forced_first {
            let slot = &mut residual[job.release - 1];
            if *slot == 0 {
                return false;
            }
            *slot -= 1;
            rem[i] -= 1;
            if let Some(rec) = record.as_deref_mut() {
                *rec[i].entry(job.release).or_default() += 1;
            }
        }
        if rem[i] > 0 {
            by_release[job.release].push(i);
        }
    }

    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = BinaryHeap::new();
    for layer in 1..=n {
        for &i in &by_release[layer] {
            heap.push(Reverse((jobs[i].deadline, i)));
        }
        let mut cap = residual[layer - 1];
        while cap > 0 {
            let Some(&Reverse((_, i))) = heap.peek() else {
                break;
            };
            let take = rem[i].min(cap);
            rem[i] -= take;
            cap -= take;
            if let Some(rec) = record.as_deref_mut() {
                *rec[i].entry(layer).or_default() += take;
            }
            if rem[i] == 0 {
                heap.pop();
            }
        }
        if let Some(&Reverse((deadline, _))) = heap.peek() {
            if deadline <= layer {
                return false;
            }
        }
    }
    heap.is_empty()
}

/// Earliest-deadline-first feasibility. Exact for unit chunks with release
/// and deadline windows.
pub(crate) fn edf_feasible(limits: &[u64], jobs: &[Job]) -> bool {
    run_edf(limits, jobs, None)
}

/// Places each job's chunks as late as possible, serving the job with the
/// fewest remaining chunks first at every layer (shortest remaining work,
/// run backwards from the consumers). This maximizes the number of jobs
/// completed at every layer boundary, which minimizes the summed loading
/// distance. Releases are ignored (every job may use any layer >= 1).
pub(crate) fn latest_srpt(limits: &[u64], jobs: &[(u64, usize)]) -> Option<Vec<Allocation>> {
    let n = limits.len();
    let mut by_deadline: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for (i, &(chunks, deadline)) in jobs.iter().enumerate() {
        if chunks == 0 {
            continue;
        }
        if deadline == 0 || deadline > n {
            return None;
        }
        by_deadline[deadline].push(i);
    }
    let mut out: Vec<Allocation> = vec![Vec::new(); jobs.len()];
    let mut active: BTreeSet<(u64, usize)> = BTreeSet::new();
    for layer in (1..=n).rev() {
        for &i in &by_deadline[layer] {
            active.insert((jobs[i].0, i));
        }
        let mut cap = limits[layer - 1];
        while cap > 0 {
            let Some((rem, i)) = active.pop_first() else {
                break;
            };
            let take = rem.min(cap);
            cap -= take;
            out[i].push((layer, take));
            if rem > take {
                active.insert((rem - take, i));
            }
        }
    }
    if !active.is_empty() {
        return None;
    }
    for a in &mut out {
        a.reverse();
    }
    Some(out)
}

/// The lexicographically smallest assignment (jobs in order, layers
/// ascending) honouring each job's `[release, deadline]` window with one
/// chunk forced at `release`. Returns `None` if no assignment exists.
pub(crate) fn lexmin_assignment(limits: &[u64], jobs: &[Job]) -> Option<Vec<Allocation>> {
    if !edf_feasible(limits, jobs) {
        return None;
    }
    let mut residual = limits.to_vec();
    let mut out: Vec<Allocation> = vec![Vec::new(); jobs.len()];
    let mut probe: Vec<Job> = Vec::with_capacity(jobs.len() + 1);

    for (i, job) in jobs.iter().enumerate() {
        let mut rem = job.chunks;
        if rem == 0 {
            continue;
        }
        for layer in job.release..=job.deadline {
            if rem == 0 {
                break;
            }
            let lb = u64::from(layer == job.release && job.forced_first);
            let ub = rem.min(residual[layer - 1]);
            let mut chosen = None;
            for x in lb..=ub {
                residual[layer - 1] -= x;
                probe.clear();
                if rem > x {
                    probe.push(Job {
                        chunks: rem - x,
                        release: layer + 1,
                        deadline: job.deadline,
                        forced_first: false,
                    });
                }
                probe.extend_from_slice(&jobs[i + 1..]);
                let ok = edf_feasible(&residual, &probe);
                residual[layer - 1] += x;
                if ok {
                    chosen = Some(x);
                    break;
                }
            }
            let x = chosen?;
            residual[layer - 1] -= x;
            rem -= x;
            if x > 0 {
                out[i].push((layer, x));
            }
        }
        if rem > 0 {
            return None;
        }
    }
    Some(out)
}
