//! Greedy and beam inference over a fused representation.

use crate::assembly::{BOS_ID, EOS_ID};
use crate::error::Result;
use crate::num::Real;
use crate::tensor::Matrix;

use super::{decode_step, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

/// Decodes token ids until EOS or `max_len` tokens. The returned ids
/// exclude BOS and EOS.
pub fn generate_ids<R: Real>(
    r: &Matrix<R>,
    n_ctx: usize,
    params: &ModelParams<R>,
    strategy: DecodeStrategy,
    max_len: usize,
) -> Result<Vec<usize>> {
    match strategy {
        DecodeStrategy::Greedy => greedy(r, n_ctx, params, max_len),
        DecodeStrategy::Beam(width) => beam(r, n_ctx, params, width.max(1), max_len),
    }
}

fn argmax<R: Real>(dist: &[R]) -> usize {
    let mut best = 0;
    let mut best_p = dist[0];
    for (i, &p) in dist.iter().enumerate().skip(1) {
        if p > best_p {
            best_p = p;
            best = i;
        }
    }
    best
}

fn greedy<R: Real>(
    r: &Matrix<R>,
    n_ctx: usize,
    params: &ModelParams<R>,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut prefix = vec![BOS_ID];
    let mut out = Vec::new();
    for _ in 0..max_len {
        let dist = decode_step(r, n_ctx, &prefix, params)?;
        let next = argmax(&dist);
        if next == EOS_ID {
            break;
        }
        out.push(next);
        prefix.push(next);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Beam {
    ids: Vec<usize>,
    logp: f64,
    finished: bool,
}

/// Highest cumulative log-probability sequence; ties go to the
/// lexicographically smaller id sequence.
fn beam<R: Real>(
    r: &Matrix<R>,
    n_ctx: usize,
    params: &ModelParams<R>,
    width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut beams = vec![Beam {
        ids: Vec::new(),
        logp: 0.0,
        finished: false,
    }];
    for _ in 0..max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &beams {
            if beam.finished {
                candidates.push(beam.clone());
                continue;
            }
            let mut prefix = vec![BOS_ID];
            prefix.extend_from_slice(&beam.ids);
            let dist = decode_step(r, n_ctx, &prefix, params)?;
            for (id, &p) in dist.iter().enumerate() {
                let logp = beam.logp + p.to_f64().ln();
                if id == EOS_ID {
                    candidates.push(Beam {
                        ids: beam.ids.clone(),
                        logp,
                        finished: true,
                    });
                } else {
                    let mut ids = beam.ids.clone();
                    ids.push(id);
                    candidates.push(Beam {
                        ids,
                        logp,
                        finished: false,
                    });
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.logp
                .partial_cmp(&a.logp)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.ids.cmp(&b.ids))
        });
        candidates.truncate(width);
        beams = candidates;
    }
    beams.sort_by(|a, b| {
        b.logp
            .partial_cmp(&a.logp)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.ids.cmp(&b.ids))
    });
    Ok(beams.into_iter().next().map(|b| b.ids).unwrap_or_default())
}
