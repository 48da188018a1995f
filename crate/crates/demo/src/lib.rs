//! Browser demo: 2-D residual quantization, rate accounting and MAC sweeps.
//!
//! Every exported function returns a JSON string. Failures come back as
//! `{"error": "..."}` so the page can show them without exceptions.

use acom::coding::{
    build_smoothed_huffman, encode_stream, CodeHistogram, CodingMode, RateReport,
};
use acom::config::RunConfig;
use acom::model::{generate_classification, mac_count, ClassificationSpec, Task};
use acom::rvq::{Codebook, TokenFrame};
use acom::FeatureSequence;
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

type DemoResult<T> = Result<T, String>;

fn respond<T: Serialize>(r: DemoResult<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn err<E: ToString>(e: E) -> String {
    e.to_string()
}

#[derive(Debug, Serialize)]
pub struct RvqView {
    pub points: Vec<[f32; 2]>,
    /// `codewords[k][v]`.
    pub codewords: Vec<Vec<[f32; 2]>>,
    pub query: [f32; 2],
    /// Chosen index per stage for the query.
    pub indices: Vec<u32>,
    /// Reconstruction after each stage.
    pub partial: Vec<[f32; 2]>,
    /// Residual norm after each stage.
    pub residual_norms: Vec<f32>,
    /// Mean squared error over all points using the first `k + 1` stages.
    pub distortion: Vec<f64>,
    pub raw_bits: u32,
}

const MAX_STAGES: usize = 8;
const MAX_SIZE: usize = 256;

fn pair(v: &[f32]) -> [f32; 2] {
    [v[0], v[1]]
}

/// Trains a `stages × size` 2-D codebook on a seeded Gaussian mixture and
/// quantizes the query point `(x, y)`.
pub fn rvq_view(seed: u64, stages: usize, size: usize, x: f32, y: f32) -> DemoResult<RvqView> {
    if !(1..=MAX_STAGES).contains(&stages) || !(1..=MAX_SIZE).contains(&size) {
        return Err(format!("stages must lie in 1..={MAX_STAGES} and size in 1..={MAX_SIZE}"));
    }
    let spec = ClassificationSpec {
        classes: 6,
        input_dim: 2,
        frames: 1,
        separation: 4.0,
        noise: 1.0,
        samples: 600,
    };
    let set = generate_classification::<f32>(&spec, seed).map_err(err)?;
    let mut data = FeatureSequence::new(2);
    for s in &set.samples {
        data.push(s.input.frame(0)).map_err(err)?;
    }
    let mut cb = Codebook::new(2, size, stages).map_err(err)?;
    cb.init_kmeans(&data, 25, seed).map_err(err)?;

    let q = cb.quantize(&[x, y]).map_err(err)?;
    let mut partial = Vec::with_capacity(stages);
    let mut residual_norms = Vec::with_capacity(stages);
    let mut acc = [0f32; 2];
    for (k, &v) in q.tokens.indices.iter().enumerate() {
        let c = cb.codeword(k, v as usize);
        acc = [acc[0] + c[0], acc[1] + c[1]];
        partial.push(acc);
        residual_norms.push(((x - acc[0]).powi(2) + (y - acc[1]).powi(2)).sqrt());
    }

    let mut distortion = vec![0.0; stages];
    for p in data.frames() {
        let t = cb.quantize(p).map_err(err)?.tokens;
        let mut acc = [0f64; 2];
        for (k, &v) in t.indices.iter().enumerate() {
            let c = cb.codeword(k, v as usize);
            acc = [acc[0] + c[0] as f64, acc[1] + c[1] as f64];
            distortion[k] += (p[0] as f64 - acc[0]).powi(2) + (p[1] as f64 - acc[1]).powi(2);
        }
    }
    distortion.iter_mut().for_each(|d| *d /= data.len() as f64);

    Ok(RvqView {
        points: data.frames().map(pair).collect(),
        codewords: (0..stages)
            .map(|k| cb.stage(k).chunks(2).map(pair).collect())
            .collect(),
        query: [x, y],
        indices: q.tokens.indices.clone(),
        partial,
        residual_norms,
        distortion,
        raw_bits: stages as u32 * acom::coding::bits_per_index(size),
    })
}

#[derive(Debug, Serialize)]
pub struct RateView {
    pub stages: usize,
    pub frames: u64,
    pub raw_bps: f64,
    pub entropy_per_stage: Vec<f64>,
    pub entropy_total: f64,
    pub entropy_bps: f64,
    /// Mean Huffman code length per stage, in bits per index.
    pub huffman_mean_length: Vec<f64>,
    pub raw_stream_bytes: usize,
    pub huffman_stream_bytes: usize,
    pub stats_line: String,
}

/// Rate report for a token dump: one frame per line, one index per stage.
pub fn rate_view(tokens: &str, size: usize, frame_rate: f64) -> DemoResult<RateView> {
    if size == 0 || size > 1 << 16 {
        return Err("codebook size must lie in 1..=65536".into());
    }
    let frames: Vec<TokenFrame> = tokens
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(n, l)| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<u32>().map_err(|_| format!("line {}: invalid index {s:?}", n + 1)))
                .collect::<DemoResult<Vec<u32>>>()
                .map(TokenFrame::new)
        })
        .collect::<DemoResult<_>>()?;
    let stages = frames.first().map(TokenFrame::stages).ok_or("no frames")?;
    if stages == 0 || stages > MAX_STAGES {
        return Err(format!("frames must have 1..={MAX_STAGES} indices"));
    }
    let hist = CodeHistogram::from_tokens(stages, size, &frames).map_err(err)?;
    let report = RateReport::from_histogram(frame_rate, &hist).map_err(err)?;
    let huffman_mean_length = (0..stages)
        .map(|k| {
            let counts = hist.stage_counts(k);
            build_smoothed_huffman(counts).map(|t| t.mean_length(counts))
        })
        .collect::<acom::Result<Vec<_>>>()
        .map_err(err)?;
    let cb = Codebook::new(1, size, stages).map_err(err)?;
    let raw = encode_stream(&frames, &cb, frame_rate, CodingMode::Raw).map_err(err)?;
    let huff = encode_stream(&frames, &cb, frame_rate, CodingMode::Huffman).map_err(err)?;
    Ok(RateView {
        stages,
        frames: report.frames,
        raw_bps: report.raw_bps,
        entropy_per_stage: report.per_stage_entropy.clone(),
        entropy_total: report.total_entropy,
        entropy_bps: report.entropy_bps,
        huffman_mean_length,
        raw_stream_bytes: raw.to_bytes().len(),
        huffman_stream_bytes: huff.to_bytes().len(),
        stats_line: report.to_stats_line(),
    })
}

#[derive(Debug, Serialize)]
pub struct MacRow {
    pub split: usize,
    pub layer: String,
    pub device: u64,
    pub quantizer: u64,
    pub cloud: u64,
}

/// Device, quantizer and cloud MACs per second for every split point of the
/// default architecture of `task` (`"classification"` or `"sequence"`).
pub fn mac_sweep(task: &str, stages: usize, size: usize) -> DemoResult<Vec<MacRow>> {
    let task = match task {
        "classification" => Task::Classification,
        "sequence" => Task::Sequence,
        other => return Err(format!("unknown task {other:?}")),
    };
    if stages == 0 || size == 0 {
        return Err("stages and size must be positive".into());
    }
    let cfg = RunConfig::new(task);
    let specs = cfg.layer_specs().map_err(err)?;
    (1..=specs.len())
        .map(|m| {
            let r = mac_count(&specs, cfg.input_dim(), cfg.input_rate(), m, stages, size).map_err(err)?;
            Ok(MacRow {
                split: m,
                layer: specs[m - 1].to_string(),
                device: r.device_total,
                quantizer: r.quantizer_total,
                cloud: r.cloud_total,
            })
        })
        .collect()
}

#[wasm_bindgen]
pub fn rvq(seed: u32, stages: u32, size: u32, x: f32, y: f32) -> String {
    respond(rvq_view(seed as u64, stages as usize, size as usize, x, y))
}

#[wasm_bindgen]
pub fn rates(tokens: &str, size: u32, frame_rate: f64) -> String {
    respond(rate_view(tokens, size as usize, frame_rate))
}

#[wasm_bindgen]
pub fn macs(task: &str, stages: u32, size: u32) -> String {
    respond(mac_sweep(task, stages as usize, size as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn rvq_distortion_falls_with_stages() {
        let v = rvq_view(1, 3, 8, 1.5, -0.5).unwrap();
        assert_eq!(v.points.len(), 600);
        assert_eq!(v.codewords.len(), 3);
        assert!(v.codewords.iter().all(|c| c.len() == 8));
        assert_eq!(v.indices.len(), 3);
        assert_eq!(v.residual_norms.len(), 3);
        let last = v.partial[2];
        let norm = ((1.5 - last[0]).powi(2) + (-0.5 - last[1]).powi(2)).sqrt();
        assert!((norm - v.residual_norms[2]).abs() < 1e-6);
        assert!(v.distortion.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        assert_eq!(v.raw_bits, 9);
    }

    #[test]
    fn rvq_rejects_bad_shapes() {
        assert!(rvq_view(0, 0, 4, 0.0, 0.0).is_err());
        assert!(rvq_view(0, 2, 1000, 0.0, 0.0).is_err());
    }

    #[test]
    fn uniform_tokens_give_full_entropy() {
        let text: String = (0..64).map(|i| format!("{i} {}\n", 63 - i)).collect();
        let v = rate_view(&text, 64, 25.0).unwrap();
        assert_eq!(v.frames, 64);
        assert_eq!(v.raw_bps, 300.0);
        assert!(v.entropy_per_stage.iter().all(|h| (h - 6.0).abs() < 1e-12));
        assert!(v.huffman_mean_length.iter().all(|l| (l - 6.0).abs() < 1e-12));
        assert_eq!(v.raw_stream_bytes, 30 + 96);
    }

    #[test]
    fn skewed_tokens_compress() {
        let text: String = (0..400).map(|i| if i % 10 == 0 { "5\n" } else { "0\n" }).collect();
        let v = rate_view(&text, 256, 40.0).unwrap();
        assert!(v.entropy_total < 1.0);
        assert!(v.huffman_mean_length[0] < 2.0);
        assert!(v.stats_line.starts_with("raw_bps=320.000000"));
    }

    #[test]
    fn rate_errors() {
        assert!(rate_view("", 8, 25.0).is_err());
        assert!(rate_view("1 2\n3\n", 8, 25.0).is_err());
        assert!(rate_view("9\n", 8, 25.0).is_err());
        assert!(rate_view("x\n", 8, 25.0).is_err());
    }

    #[test]
    fn mac_sweep_is_monotone() {
        for task in ["classification", "sequence"] {
            let rows = mac_sweep(task, 2, 64).unwrap();
            assert_eq!(rows.len(), 10);
            assert!(rows.windows(2).all(|w| w[0].device <= w[1].device));
            assert_eq!(rows.last().unwrap().cloud, 0);
        }
        assert!(mac_sweep("speech", 2, 64).is_err());
    }

    #[test]
    fn exported_functions_return_json() {
        let ok: Value = serde_json::from_str(&macs("classification", 2, 64)).unwrap();
        assert_eq!(ok.as_array().unwrap().len(), 10);
        assert_eq!(ok[8]["device"], 67200);
        let bad: Value = serde_json::from_str(&rates("", 8, 25.0)).unwrap();
        assert_eq!(bad["error"], "no frames");
        let view: Value = serde_json::from_str(&rvq(3, 2, 4, 0.0, 0.0)).unwrap();
        assert_eq!(view["indices"].as_array().unwrap().len(), 2);
    }
}
