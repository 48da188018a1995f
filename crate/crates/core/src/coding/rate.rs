use crate::rvq::TokenFrame;
use crate::{Error, Result};

/// `⌈log₂ V⌉`, the bits needed for one raw index.
pub fn bits_per_index(size: usize) -> u32 {
    assert!(size > 0, "codebook size must be positive");
    usize::BITS - (size - 1).leading_zeros()
}

/// `R · K · ⌈log₂V⌉` bits per second.
pub fn raw_bitrate(frame_rate: f64, stages: usize, size: usize) -> f64 {
    frame_rate * stages as f64 * bits_per_index(size) as f64
}

/// `R · H(C)` bits per second.
pub fn entropy_bitrate(frame_rate: f64, total_entropy: f64) -> f64 {
    frame_rate * total_entropy
}

/// Per-stage codeword counts over `N` frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeHistogram {
    stages: usize,
    size: usize,
    counts: Vec<u64>,
    frames: u64,
}

impl CodeHistogram {
    pub fn new(stages: usize, size: usize) -> Self {
        assert!(stages > 0 && size > 0, "histogram shape must be positive");
        Self {
            stages,
            size,
            counts: vec![0; stages * size],
            frames: 0,
        }
    }

    pub fn from_tokens(stages: usize, size: usize, tokens: &[TokenFrame]) -> Result<Self> {
        let mut h = Self::new(stages, size);
        h.accumulate(tokens)?;
        Ok(h)
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn stage_counts(&self, stage: usize) -> &[u64] {
        &self.counts[stage * self.size..(stage + 1) * self.size]
    }

    /// Adds `tokens` to the counts. All frames are validated before any
    /// count changes.
    pub fn accumulate(&mut self, tokens: &[TokenFrame]) -> Result<()> {
        for (frame, t) in tokens.iter().enumerate() {
            if t.indices.len() != self.stages {
                return Err(Error::DimensionMismatch {
                    context: "token frame stages",
                    expected: self.stages,
                    got: t.indices.len(),
                }
                .at_frame(frame));
            }
            if let Some((stage, &index)) = t.indices.iter().enumerate().find(|(_, &i)| i as usize >= self.size) {
                return Err(Error::IndexOutOfRange {
                    stage,
                    index,
                    size: self.size,
                    frame: Some(frame),
                });
            }
        }
        for t in tokens {
            for (k, &v) in t.indices.iter().enumerate() {
                self.counts[k * self.size + v as usize] += 1;
            }
        }
        self.frames += tokens.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &CodeHistogram) -> Result<()> {
        if (self.stages, self.size) != (other.stages, other.size) {
            return Err(Error::InvalidArgument(format!(
                "cannot merge a {}x{} histogram into a {}x{} histogram",
                other.stages, other.size, self.stages, self.size
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.frames += other.frames;
        Ok(())
    }

    /// `ρ_v = count_v / N` for one stage; all zeros when `N = 0`.
    pub fn frequencies(&self, stage: usize) -> Vec<f64> {
        let n = self.frames as f64;
        self.stage_counts(stage)
            .iter()
            .map(|&c| if self.frames == 0 { 0.0 } else { c as f64 / n })
            .collect()
    }
}

/// Per-stage empirical entropies in bits per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub per_stage: Vec<f64>,
    pub total: f64,
}

/// `H_k = −Σ_v ρ_v log₂ ρ_v` (with `0·log 0 = 0`) and `H = Σ_k H_k`.
pub fn empirical_entropy(hist: &CodeHistogram) -> Result<EntropyReport> {
    if hist.frames == 0 {
        return Err(Error::InvalidArgument(
            "empirical entropy of an empty histogram is undefined".into(),
        ));
    }
    let per_stage: Vec<f64> = (0..hist.stages)
        .map(|k| {
            hist.frequencies(k)
                .into_iter()
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.log2())
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    let total = per_stage.iter().sum();
    Ok(EntropyReport { per_stage, total })
}

/// Raw and entropy-bound bitrates of a token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub frame_rate: f64,
    pub raw_bps: f64,
    pub per_stage_entropy: Vec<f64>,
    pub total_entropy: f64,
    pub entropy_bps: f64,
    pub frames: u64,
}

impl RateReport {
    pub fn from_histogram(frame_rate: f64, hist: &CodeHistogram) -> Result<Self> {
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("frame rate must be positive, got {frame_rate}")));
        }
        let entropy = empirical_entropy(hist)?;
        Ok(Self {
            frame_rate,
            raw_bps: raw_bitrate(frame_rate, hist.stages, hist.size),
            entropy_bps: entropy_bitrate(frame_rate, entropy.total),
            per_stage_entropy: entropy.per_stage,
            total_entropy: entropy.total,
            frames: hist.frames,
        })
    }

    /// Mean per-codebook entropy, `H(C) / K`.
    pub fn mean_stage_entropy(&self) -> f64 {
        self.total_entropy / self.per_stage_entropy.len() as f64
    }

    /// `raw_bps=<f> entropy_per_stage=<f,...> entropy_total=<f> entropy_bps=<f> frames=<n>`
    pub fn to_stats_line(&self) -> String {
        let stages: Vec<String> = self.per_stage_entropy.iter().map(|h| format!("{h:.6}")).collect();
        format!(
            "raw_bps={:.6} entropy_per_stage={} entropy_total={:.6} entropy_bps={:.6} frames={}",
            self.raw_bps,
            stages.join(","),
            self.total_entropy,
            self.entropy_bps,
            self.frames
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(rows: &[&[u32]]) -> Vec<TokenFrame> {
        rows.iter().map(|r| TokenFrame::new(r.to_vec())).collect()
    }

    #[test]
    fn bits_per_index_values() {
        assert_eq!(bits_per_index(1), 0);
        assert_eq!(bits_per_index(2), 1);
        assert_eq!(bits_per_index(32), 5);
        assert_eq!(bits_per_index(33), 6);
        assert_eq!(bits_per_index(1024), 10);
        assert_eq!(bits_per_index(8192), 13);
    }

    #[test]
    fn raw_bitrate_examples() {
        assert_eq!(raw_bitrate(25.0, 2, 1024), 500.0);
        assert_eq!(raw_bitrate(25.0, 1, 8192), 325.0);
        assert_eq!(raw_bitrate(40.0, 1, 32), 200.0);
    }

    #[test]
    fn entropy_bitrate_examples() {
        assert!((entropy_bitrate(25.0, 5.2648) - 131.62).abs() < 1e-9);
        assert!((entropy_bitrate(40.0, 4.211) - 168.44).abs() < 1e-9);
        assert_eq!(entropy_bitrate(40.0, 0.0), 0.0);
    }

    #[test]
    fn single_symbol_frequencies() {
        let h = CodeHistogram::from_tokens(1, 8, &frames(&[&[5], &[5], &[5], &[5]])).unwrap();
        assert_eq!(h.frequencies(0), vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let e = empirical_entropy(&h).unwrap();
        assert_eq!(e.total, 0.0);
    }

    #[test]
    fn alternating_frequencies() {
        let h = CodeHistogram::from_tokens(1, 4, &frames(&[&[0], &[1], &[0], &[1]])).unwrap();
        assert_eq!(h.frequencies(0), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(empirical_entropy(&h).unwrap().total, 1.0);
    }

    #[test]
    fn uniform_1024_is_ten_bits() {
        let tokens: Vec<TokenFrame> = (0..1024).map(|v| TokenFrame::new(vec![v])).collect();
        let h = CodeHistogram::from_tokens(1, 1024, &tokens).unwrap();
        assert_eq!(empirical_entropy(&h).unwrap().total, 10.0);
    }

    #[test]
    fn closed_form_entropy() {
        let h = CodeHistogram::from_tokens(1, 3, &frames(&[&[0], &[0], &[1], &[2]])).unwrap();
        assert!((empirical_entropy(&h).unwrap().total - 1.5).abs() < 1e-12);
    }

    #[test]
    fn empty_histogram_has_no_entropy() {
        let h = CodeHistogram::new(2, 4);
        assert!(empirical_entropy(&h).is_err());
        let mut h2 = h.clone();
        h2.accumulate(&[]).unwrap();
        assert_eq!(h, h2);
    }

    #[test]
    fn out_of_range_reports_stage_and_frame() {
        let mut h = CodeHistogram::new(2, 4);
        let err = h.accumulate(&frames(&[&[0, 1], &[3, 4]])).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { stage: 1, index: 4, frame: Some(1), .. }));
        assert_eq!(h.frames(), 0);
    }

    #[test]
    fn stats_line_format() {
        let tokens: Vec<TokenFrame> = (0..1024).map(|v| TokenFrame::new(vec![v, 0])).collect();
        let h = CodeHistogram::from_tokens(2, 1024, &tokens).unwrap();
        let r = RateReport::from_histogram(25.0, &h).unwrap();
        assert_eq!(
            r.to_stats_line(),
            "raw_bps=500.000000 entropy_per_stage=10.000000,0.000000 entropy_total=10.000000 entropy_bps=250.000000 frames=1024"
        );
    }
}
