use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::engine::{adagraph_generate, serial_generate, DecodeMode};
use crate::mesh::PointCloudSet;
use crate::model::LaneModel;
use crate::tokenizer::Scheme;

/// Minimum number of untimed warmup runs per setting.
pub const MIN_WARMUP: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub mode: DecodeMode,
    pub batch_limit: usize,
    pub decode_s: Vec<f64>,
    pub median_decode_s: f64,
    pub median_tok_per_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    #[serde(rename = "L")]
    pub length: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub threads: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub hierarchy_s: f64,
    pub entries: Vec<BenchEntry>,
    /// Median adagraph throughput at the largest batch limit over median
    /// serial throughput; absent when either mode was not run.
    pub speedup: Option<f64>,
    /// Every timed run produced the same tokens.
    pub tokens_identical: bool,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times decoding of one shared hierarchy for every `(mode, batch_limit)`
/// setting. Aborts if any run's raw tokens differ from the first.
pub fn throughput_bench(
    model: &LaneModel,
    pcs: &PointCloudSet,
    length: usize,
    settings: &[(DecodeMode, usize)],
    repeats: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(EvalError::Invalid("repeats must be at least 1".into()));
    }
    let warmup = warmup.max(MIN_WARMUP);
    let start = Instant::now();
    let h = model.build_hierarchy(pcs, length)?;
    let hierarchy_s = start.elapsed().as_secs_f64();
    let mut reference: Option<Vec<u16>> = None;
    let mut entries = Vec::new();
    for &(mode, limit) in settings {
        let mut times = Vec::with_capacity(repeats);
        for i in 0..warmup + repeats {
            let r = match mode {
                DecodeMode::Serial => serial_generate(model, &h, length, Scheme::default())?,
                DecodeMode::Adagraph => adagraph_generate(model, &h, length, Scheme::default(), limit)?,
            };
            match &reference {
                None => reference = Some(r.raw.clone()),
                Some(want) => {
                    if let Some(p) = want.iter().zip(&r.raw).position(|(a, b)| a != b) {
                        return Err(EvalError::Mismatch { position: p });
                    }
                }
            }
            if i >= warmup {
                times.push(r.timing.decode_s);
            }
        }
        let med = median(&times);
        entries.push(BenchEntry {
            mode,
            batch_limit: limit,
            median_decode_s: med,
            median_tok_per_s: length as f64 / med,
            decode_s: times,
        });
    }
    let serial = entries.iter().find(|e| e.mode == DecodeMode::Serial);
    let ada = entries
        .iter()
        .filter(|e| e.mode == DecodeMode::Adagraph)
        .max_by_key(|e| e.batch_limit);
    let speedup = match (serial, ada) {
        (Some(s), Some(a)) => Some(a.median_tok_per_s / s.median_tok_per_s),
        _ => None,
    };
    Ok(BenchReport {
        length,
        m: h.m,
        threads: rayon::current_num_threads(),
        repeats,
        warmup,
        hierarchy_s,
        entries,
        speedup,
        tokens_identical: true,
    })
}
