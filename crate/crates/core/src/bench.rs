//! Wall-clock scaling of the efficient mixer against softmax attention.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{efficient_mixer, EMMixerParams, SoftmaxAttention};
use crate::error::{Error, Result};
use crate::tensor::{init_rng, Tape, Tensor};

pub const CSV_HEADER: &str = "mechanism,n_tokens,channels,reps,median_ns,p10_ns,p90_ns";

/// Timed samples shorter than this are repeated inside one sample.
pub const MIN_SAMPLE_NS: f64 = 200_000.0;
pub const MIN_REPS: usize = 30;
const WARMUP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Em,
    Softmax,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Em => "em",
            Mechanism::Softmax => "softmax",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "em" => Ok(Mechanism::Em),
            "softmax" => Ok(Mechanism::Softmax),
            other => Err(Error::InvalidArgument(format!(
                "unknown mechanism `{other}` (expected em or softmax)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mechanism: String,
    pub n_tokens: usize,
    pub channels: usize,
    /// Timed calls, excluding warm-up.
    pub reps: usize,
    pub median_ns: f64,
    pub p10_ns: f64,
    pub p90_ns: f64,
}

impl BenchRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.0},{:.0},{:.0}",
            self.mechanism,
            self.n_tokens,
            self.channels,
            self.reps,
            self.median_ns,
            self.p10_ns,
            self.p90_ns
        )
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// Times `f` with warm-up discarded. Calls are grouped so each sample spans
/// at least [`MIN_SAMPLE_NS`]; statistics are per call.
pub fn time_calls(min_reps: usize, mut f: impl FnMut()) -> (usize, f64, f64, f64) {
    for _ in 0..WARMUP {
        f();
    }
    let start = Instant::now();
    f();
    let single = start.elapsed().as_nanos() as f64;
    let inner = if single >= MIN_SAMPLE_NS {
        1
    } else {
        (MIN_SAMPLE_NS / single.max(1.0)).ceil() as usize
    };
    let samples = min_reps.max(MIN_REPS);
    let mut per_call: Vec<f64> = (0..samples)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..inner {
                f();
            }
            t.elapsed().as_nanos() as f64 / inner as f64
        })
        .collect();
    per_call.sort_by(f64::total_cmp);
    (
        samples * inner,
        percentile(&per_call, 0.5),
        percentile(&per_call, 0.1),
        percentile(&per_call, 0.9),
    )
}

fn random_tokens(n: usize, c: usize, seed: u64) -> Tensor<f32> {
    let mut rng = init_rng(seed);
    let data: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(&[n, c], &data)
}

/// One forward pass of the mechanism on an inference tape; returns the
/// element count of the largest intermediate it recorded.
pub fn run_once(mechanism: Mechanism, x: &Tensor<f32>, seed: u64) -> Result<usize> {
    let c = x.shape()[1];
    let mut rng = init_rng(seed);
    let tape = Tape::inference();
    let xv = tape.constant(x.clone());
    match mechanism {
        Mechanism::Em => {
            efficient_mixer(&tape, xv, &EMMixerParams::new("bench", c, &mut rng))?;
        }
        Mechanism::Softmax => {
            SoftmaxAttention::new("bench", c, &mut rng).forward(&tape, xv);
        }
    }
    Ok(tape.largest_intermediate().iter().product())
}

pub fn bench_mechanism(
    mechanism: Mechanism,
    n_tokens: usize,
    channels: usize,
    min_reps: usize,
    seed: u64,
) -> Result<BenchRecord> {
    if n_tokens == 0 || channels == 0 {
        return Err(Error::InvalidArgument(
            "token count and channels must be positive".into(),
        ));
    }
    let x = random_tokens(n_tokens, channels, seed);
    let mut rng = init_rng(seed + 1);
    let tape_params_em = EMMixerParams::<f32>::new("bench", channels, &mut rng);
    let tape_params_sm = SoftmaxAttention::<f32>::new("bench", channels, &mut rng);
    let mut failure = None;
    let (reps, median, p10, p90) = time_calls(min_reps, || {
        let tape = Tape::inference();
        let xv = tape.constant(x.clone());
        match mechanism {
            Mechanism::Em => {
                if let Err(e) = efficient_mixer(&tape, xv, &tape_params_em) {
                    failure = Some(e);
                }
            }
            Mechanism::Softmax => {
                tape_params_sm.forward(&tape, xv);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(BenchRecord {
        mechanism: mechanism.name().into(),
        n_tokens,
        channels,
        reps,
        median_ns: median,
        p10_ns: p10,
        p90_ns: p90,
    })
}

/// Sizes must be strictly increasing, at least three, spanning at least 8×.
pub fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 token sizes, got {}",
            sizes.len()
        )));
    }
    if sizes[0] == 0 || sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "token sizes must be positive and strictly increasing: {sizes:?}"
        )));
    }
    if sizes[sizes.len() - 1] < 8 * sizes[0] {
        return Err(Error::InvalidArgument(format!(
            "token sizes must span at least 8x, got {sizes:?}"
        )));
    }
    Ok(())
}

pub fn run_sweep(
    mechanisms: &[Mechanism],
    sizes: &[usize],
    channels: usize,
    min_reps: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    validate_sizes(sizes)?;
    let mut out = Vec::new();
    for &m in mechanisms {
        for &n in sizes {
            out.push(bench_mechanism(m, n, channels, min_reps, seed)?);
        }
    }
    Ok(out)
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidArgument(
            "slope needs at least two points with positive coordinates".into(),
        ));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "slope needs at least two distinct sizes".into(),
        ));
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

/// Slope of median time against token count for each mechanism, in order
/// of first appearance.
pub fn slopes(records: &[BenchRecord]) -> Result<Vec<(String, f64)>> {
    let mut names: Vec<&str> = Vec::new();
    for r in records {
        if !names.contains(&r.mechanism.as_str()) {
            names.push(&r.mechanism);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let pts: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.mechanism == name)
                .map(|r| (r.n_tokens as f64, r.median_ns))
                .collect();
            Ok((name.to_string(), loglog_slope(&pts)?))
        })
        .collect()
}

/// CSV body followed by one `# slope,<mechanism>,<value>` line per mechanism.
pub fn to_csv(records: &[BenchRecord]) -> Result<String> {
    let mut s = format!("{CSV_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    for (name, slope) in slopes(records)? {
        writeln!(s, "# slope,{name},{slope:.4}").expect("write to string");
    }
    Ok(s)
}

/// Parses CSV produced by [`to_csv`]; comment lines are skipped.
pub fn parse_csv(text: &str, origin: &std::path::Path) -> Result<Vec<BenchRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((i, h)) => {
            return Err(err(
                i + 1,
                format!("expected header `{CSV_HEADER}`, found `{h}`"),
            ))
        }
        None => return Err(err(1, "empty file".into())),
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(err(i + 1, format!("expected 7 fields, found {}", f.len())));
        }
        let int = |k: usize| {
            f[k].parse::<usize>()
                .map_err(|e| err(i + 1, format!("field {}: {e}", k + 1)))
        };
        let num = |k: usize| match f[k].parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
            Ok(v) => Err(err(i + 1, format!("field {}: invalid time {v}", k + 1))),
            Err(e) => Err(err(i + 1, format!("field {}: {e}", k + 1))),
        };
        records.push(BenchRecord {
            mechanism: f[0].to_string(),
            n_tokens: int(1)?,
            channels: int(2)?,
            reps: int(3)?,
            median_ns: num(4)?,
            p10_ns: num(5)?,
            p90_ns: num(6)?,
        });
    }
    if records.is_empty() {
        return Err(err(2, "no benchmark records".into()));
    }
    Ok(records)
}
