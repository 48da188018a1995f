//! Plain-text feature and token files.
//!
//! Features: one frame per line, values separated by whitespace or commas.
//! Tokens: one frame per line, one index per stage, optionally preceded by a
//! `# stages=K size=V frame_rate=R` header. Blank lines and other `#` lines
//! are ignored in both.

use std::fmt::Write as _;

use acom::rvq::TokenFrame;
use acom::{Error, FeatureSequence, Result};

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn fields(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty())
}

pub fn parse_features(text: &str) -> Result<FeatureSequence<f32>> {
    let mut dim = None;
    let mut data = Vec::new();
    for (n, line) in data_lines(text) {
        let before = data.len();
        for f in fields(line) {
            let v: f32 = f
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("line {n}: invalid number {f:?}")))?;
            data.push(v);
        }
        let width = data.len() - before;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::InvalidArgument(format!("line {n}: expected {d} values, got {width}")))
            }
            _ => {}
        }
    }
    let dim = dim.ok_or_else(|| Error::InvalidArgument("feature file has no frames".into()))?;
    let seq = FeatureSequence::from_vec(dim, data)?;
    seq.check_finite("feature file")?;
    Ok(seq)
}

pub fn format_features(seq: &FeatureSequence<f32>) -> String {
    let mut out = String::new();
    for frame in seq.frames() {
        let row: Vec<String> = frame.iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Shape and rate read from a token dump header.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TokenHeader {
    pub stages: Option<usize>,
    pub size: Option<usize>,
    pub frame_rate: Option<f64>,
}

pub fn parse_tokens(text: &str) -> Result<(TokenHeader, Vec<TokenFrame>)> {
    let mut header = TokenHeader::default();
    if let Some(first) = text.lines().map(str::trim).find(|l| !l.is_empty()) {
        if let Some(rest) = first.strip_prefix('#') {
            for kv in rest.split_whitespace() {
                let Some((k, v)) = kv.split_once('=') else { continue };
                let bad = || Error::InvalidArgument(format!("token header: invalid {kv:?}"));
                match k {
                    "stages" => header.stages = Some(v.parse().map_err(|_| bad())?),
                    "size" => header.size = Some(v.parse().map_err(|_| bad())?),
                    "frame_rate" => header.frame_rate = Some(v.parse().map_err(|_| bad())?),
                    _ => {}
                }
            }
        }
    }
    let mut frames = Vec::new();
    for (n, line) in data_lines(text) {
        let indices = fields(line)
            .map(|f| {
                f.parse::<u32>()
                    .map_err(|_| Error::InvalidArgument(format!("line {n}: invalid index {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = frames.first().map(TokenFrame::stages) {
            if indices.len() != first {
                return Err(Error::InvalidArgument(format!(
                    "line {n}: expected {first} indices, got {}",
                    indices.len()
                )));
            }
        }
        frames.push(TokenFrame::new(indices));
    }
    Ok((header, frames))
}

pub fn format_tokens(tokens: &[TokenFrame], stages: usize, size: usize, frame_rate: f64) -> String {
    let mut out = format!("# stages={stages} size={size} frame_rate={frame_rate}\n");
    for t in tokens {
        let row: Vec<String> = t.indices.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_round_trip_exactly() {
        let seq = FeatureSequence::from_vec(3, vec![0.1, -2.5e-7, 3.0, f32::MAX, 1.0 / 3.0, -0.0]).unwrap();
        assert_eq!(parse_features(&format_features(&seq)).unwrap(), seq);
    }

    #[test]
    fn features_accept_commas_and_comments() {
        let seq = parse_features("# x\n1, 2\n\n3 4\n").unwrap();
        assert_eq!(seq.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn ragged_or_bad_features_fail() {
        assert!(parse_features("1 2\n3\n").is_err());
        assert!(parse_features("1 x\n").is_err());
        assert!(parse_features("nan\n").is_err());
        assert!(parse_features("# only a comment\n").is_err());
    }

    #[test]
    fn tokens_round_trip_with_header() {
        let tokens = vec![TokenFrame::new(vec![1, 2]), TokenFrame::new(vec![63, 0])];
        let text = format_tokens(&tokens, 2, 64, 40.0);
        let (h, back) = parse_tokens(&text).unwrap();
        assert_eq!(back, tokens);
        assert_eq!(
            h,
            TokenHeader {
                stages: Some(2),
                size: Some(64),
                frame_rate: Some(40.0)
            }
        );
    }

    #[test]
    fn tokens_without_header() {
        let (h, t) = parse_tokens("3 4\n5 6\n").unwrap();
        assert_eq!(h, TokenHeader::default());
        assert_eq!(t.len(), 2);
        assert!(parse_tokens("1 2\n3\n").is_err());
    }

    #[test]
    fn hex_is_lowercase_pairs() {
        assert_eq!(hex(&[0x00, 0xab, 0x10]), "00ab10");
    }
}
