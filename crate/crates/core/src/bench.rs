//! Runtime and peak-memory scaling measurements for the chunked model and the
//! attention baseline, plus the log-log power-law fit.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attn_forward, AttnParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{ChunkInput, Model};
use crate::numerics::counter;

pub const CSV_HEADER: &str = "tag,n,c,reps,sec_per_token,peak_floats";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelTag {
    Chunked,
    Attention,
}

impl ModelTag {
    pub fn name(self) -> &'static str {
        match self {
            ModelTag::Chunked => "chunked",
            ModelTag::Attention => "attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub tag: ModelTag,
    pub n: usize,
    pub c: usize,
    pub reps: usize,
    /// Best wall time over `reps` divided by `n`; `None` when the guard refused.
    pub sec_per_token: Option<f64>,
    /// Peak floats alive beyond those present before the forward pass (for a
    /// refusal, the score floats that would have been needed).
    pub peak_floats: usize,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        let time = self.sec_per_token.map_or_else(|| "refused".to_string(), |t| format!("{t:.6e}"));
        format!("{},{},{},{},{},{}", self.tag.name(), self.n, self.c, self.reps, time, self.peak_floats)
    }
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::new();
    writeln!(s, "{CSV_HEADER}").unwrap();
    for r in records {
        writeln!(s, "{}", r.csv_row()).unwrap();
    }
    s
}

/// Least-squares fit of `ln y = α ln x + β`; returns `(α, R²)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Config("power-law fit needs two or more positive points".into()));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("power-law fit needs distinct lengths".into()));
    }
    let alpha = sxy / sxx;
    let beta = my - alpha * mx;
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - alpha * x - beta).powi(2)).sum();
    let ss_tot: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((alpha, r2))
}

fn random_tokens(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..256)).collect()
}

/// Untrained chunked forward pass over `n` tokens (one sequence); returns
/// elapsed seconds and the peak of floats allocated beyond the entry level.
pub fn time_chunked(model: &Model, n: usize, seed: u64) -> Result<(f64, usize)> {
    let tokens = random_tokens(n, seed);
    let c = model.cfg.chunk_size;
    let base = counter::live_floats();
    let start = Instant::now();
    let (res, peak) = counter::measure_peak(|| -> Result<()> {
        let mut state = model.new_state(&[0])?;
        for (m, chunk) in tokens.chunks(c).enumerate() {
            let input = ChunkInput {
                seq_ids: &[0],
                chunk_index: m as u64,
                tokens: chunk,
            };
            model.forward_chunk(input, &mut state)?;
        }
        Ok(())
    });
    res?;
    Ok((start.elapsed().as_secs_f64(), peak.saturating_sub(base)))
}

pub fn time_attention(p: &AttnParams, n: usize, seed: u64) -> Result<(f64, usize)> {
    let tokens = random_tokens(n, seed);
    let base = counter::live_floats();
    let start = Instant::now();
    let (res, peak) = counter::measure_peak(|| attn_forward(&tokens, 1, p).map(drop));
    res?;
    Ok((start.elapsed().as_secs_f64(), peak.saturating_sub(base)))
}

#[derive(Clone, Debug)]
pub struct ScalingConfig {
    pub model: ModelConfig,
    pub chunked_lengths: Vec<usize>,
    pub attention_lengths: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
}

impl ScalingConfig {
    pub fn desk() -> Self {
        ScalingConfig {
            model: ModelConfig::desk(),
            chunked_lengths: vec![8192, 16384, 32768, 65536],
            attention_lengths: vec![512, 1024, 2048, 4096],
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub tag: ModelTag,
    pub alpha: f64,
    pub r2: f64,
}

#[derive(Clone, Debug)]
pub struct ScalingReport {
    pub records: Vec<BenchRecord>,
    pub fits: Vec<Fit>,
    /// Chunked peak floats equal across every length that is a multiple of c.
    pub chunked_peak_constant: bool,
}

fn check_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.len() < 4 {
        return Err(Error::Config(format!("need at least 4 lengths, got {}", lengths.len())));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("lengths must be strictly ascending".into()));
    }
    if lengths[lengths.len() - 1] < 8 * lengths[0] {
        return Err(Error::Config("lengths must span at least an 8x range".into()));
    }
    Ok(())
}

/// Minimum time and maximum peak per length. Repetitions are interleaved
/// across lengths after one untimed pass over all of them, so slow drift in
/// machine load spreads evenly instead of landing on a single length. A
/// guard refusal is recorded as `None` with the floats the pass would need.
fn interleaved_best(
    lengths: &[usize],
    reps: usize,
    mut f: impl FnMut(usize) -> Result<(f64, usize)>,
) -> Result<Vec<(Option<f64>, usize)>> {
    let mut best: Vec<(Option<f64>, usize)> = vec![(None, 0); lengths.len()];
    let mut refused = vec![false; lengths.len()];
    for round in 0..=reps {
        for (i, &n) in lengths.iter().enumerate() {
            if refused[i] {
                continue;
            }
            match f(n) {
                Ok((t, p)) => {
                    best[i].1 = best[i].1.max(p);
                    if round > 0 {
                        best[i].0 = Some(best[i].0.map_or(t, |b: f64| b.min(t)));
                    }
                }
                Err(Error::Guard { floats, .. }) => {
                    refused[i] = true;
                    best[i] = (None, floats);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(best)
}

pub fn run_scaling(cfg: &ScalingConfig) -> Result<ScalingReport> {
    check_lengths(&cfg.chunked_lengths)?;
    check_lengths(&cfg.attention_lengths)?;
    if cfg.reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    let c = cfg.model.chunk_size;
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    let attn = AttnParams::init(cfg.model.d_model, cfg.seed);
    let mut records = Vec::new();

    let chunked = interleaved_best(&cfg.chunked_lengths, cfg.reps, |n| {
        time_chunked(&model, n, cfg.seed ^ n as u64)
    })?;
    let attention = interleaved_best(&cfg.attention_lengths, cfg.reps, |n| {
        time_attention(&attn, n, cfg.seed ^ n as u64)
    })?;
    let runs = [
        (ModelTag::Chunked, c, &cfg.chunked_lengths, chunked),
        (ModelTag::Attention, 0, &cfg.attention_lengths, attention),
    ];
    for (tag, c, lengths, best) in runs {
        for (&n, (t, peak)) in lengths.iter().zip(best) {
            records.push(BenchRecord {
                tag,
                n,
                c,
                reps: cfg.reps,
                sec_per_token: t.map(|t| t / n as f64),
                peak_floats: peak,
            });
        }
    }

    let mut fits = Vec::new();
    for tag in [ModelTag::Chunked, ModelTag::Attention] {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.tag == tag)
            .filter_map(|r| r.sec_per_token.map(|s| (r.n as f64, s * r.n as f64)))
            .collect();
        if pts.len() >= 2 {
            let (alpha, r2) = fit_power_law(&pts)?;
            fits.push(Fit { tag, alpha, r2 });
        }
    }
    let full: Vec<usize> = records
        .iter()
        .filter(|r| r.tag == ModelTag::Chunked && r.n % c == 0)
        .map(|r| r.peak_floats)
        .collect();
    let chunked_peak_constant = full.windows(2).all(|w| w[0] == w[1]);
    Ok(ScalingReport {
        records,
        fits,
        chunked_peak_constant,
    })
}
