//! Analytic FLOP counts and wall-clock forward benchmarks of student backbones.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::student::{StudentConfig, StudentKind};
use crate::vit::{AttnMode, FULL_WINDOW};

pub const WARMUP_ITERS: usize = 5;
pub const MIN_ITERS: usize = 25;

pub const BENCH_CSV_HEADER: &str = "model,resolution,params,flops,median_latency_us";

/// Multiply-accumulates x2 of one forward pass of a single image.
pub fn count_flops(model: &StudentConfig, resolution: usize) -> Result<u64> {
    model.check_resolution(resolution)?;
    model.flops(resolution)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub resolution: usize,
    pub params: usize,
    pub flops: u64,
    /// Per-iteration latencies after warmup, in microseconds.
    pub samples_us: Vec<f64>,
    pub median_latency_us: f64,
}

impl BenchReport {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{:.1}", self.model, self.resolution, self.params, self.flops, self.median_latency_us)
    }
}

pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Default model id, e.g. `vit-d64x6-p8` or `eradio-d64`.
pub fn model_id(model: &StudentConfig) -> String {
    match model.kind {
        StudentKind::Vit => format!("vit-d{}x{}-p{}", model.vit.embed_dim, model.vit.depth, model.vit.patch_size),
        StudentKind::Eradio => format!("eradio-d{}{}", model.eradio.embed_dim, if model.eradio.fusion { "" } else { "-nofuse" }),
    }
}

/// Times `iters` single-image forwards on a fixed input; the first
/// [`WARMUP_ITERS`] are discarded.
pub fn bench_forward(model: &StudentConfig, resolution: usize, iters: usize, name: Option<&str>) -> Result<BenchReport> {
    if iters < MIN_ITERS {
        return Err(Error::invalid("bench_forward", format!("need at least {MIN_ITERS} iterations, got {iters}")));
    }
    let flops = count_flops(model, resolution)?;
    let params: ParamStore<f32> = model.init(0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor::<f32>::uniform([1, 3, resolution, resolution], 0.0, 1.0, &mut rng);
    let mut samples = Vec::with_capacity(iters - WARMUP_ITERS);
    for i in 0..iters {
        let t0 = Instant::now();
        let mut g = Graph::<f32>::new();
        let x = g.constant(input.clone());
        let out = model.forward(&mut g, &params, x, AttnMode::Plain, FULL_WINDOW)?;
        std::hint::black_box(g.value(out.spatial));
        let us = t0.elapsed().as_secs_f64() * 1e6;
        if i >= WARMUP_ITERS {
            samples.push(us);
        }
    }
    Ok(BenchReport {
        model: name.map_or_else(|| model_id(model), str::to_string),
        resolution,
        params: model.num_params(),
        flops,
        median_latency_us: median(&samples),
        samples_us: samples,
    })
}

/// One model entry of a bench config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchModel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub student: StudentConfig,
    pub resolution: usize,
}

/// Models to time, one CSV row each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub models: Vec<BenchModel>,
    #[serde(default = "default_iters")]
    pub iters: usize,
}

fn default_iters() -> usize {
    30
}

impl BenchConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read bench config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks every model and resolution before any timing starts.
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("bench config lists no models".into()));
        }
        if self.iters < MIN_ITERS {
            return Err(Error::Config(format!("iters must be at least {MIN_ITERS}")));
        }
        for m in &self.models {
            m.student.validate()?;
            m.student.check_resolution(m.resolution)?;
        }
        Ok(())
    }

    pub fn run(&self) -> Result<Vec<BenchReport>> {
        self.validate()?;
        self.models.iter().map(|m| bench_forward(&m.student, m.resolution, self.iters, m.name.as_deref())).collect()
    }
}

/// Header plus one row per report.
pub fn bench_csv(reports: &[BenchReport]) -> String {
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
