//! File formats and hashing.
//!
//! Structured-text documents are JSON with a fixed key order and a trailing
//! newline, so canonical files round-trip byte for byte. Frame streams are
//! plain CSV with the header `t,p_1..p_N[,p_bg]`, one row per frame.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::TransitionGraph;
use crate::tracker::FrameObservation;

/// Serialize a value as canonical JSON: two-space indent, struct key order,
/// trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_canonical_json(value)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn save_graph(path: &Path, graph: &TransitionGraph) -> Result<()> {
    save_json(path, &graph.clone().canonicalized())
}

pub fn load_graph(path: &Path) -> Result<TransitionGraph> {
    load_json(path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a graph's canonical serialization; the service uses it to verify
/// that client and server agree on the task model.
pub fn graph_hash(graph: &TransitionGraph) -> String {
    sha256_hex(to_canonical_json(&graph.clone().canonicalized()).as_bytes())
}

/// Snap a time to the microsecond lattice; keeps accumulated frame and tick
/// arithmetic free of float noise.
pub fn round_us(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

/// Print seconds with up to six decimals and no trailing zeros, so frame
/// timestamps stay stable across runs.
pub fn format_seconds(t: f64) -> String {
    let mut s = format!("{t:.6}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    s
}

/// Render a frame stream as CSV.
pub fn frames_to_csv(frames: &[FrameObservation]) -> String {
    let mut out = String::new();
    let (n, bg) = frames
        .first()
        .map(|f| (f.step_probs().len(), f.has_background))
        .unwrap_or((0, false));
    out.push('t');
    for i in 1..=n {
        out.push_str(&format!(",p_{i}"));
    }
    if bg {
        out.push_str(",p_bg");
    }
    out.push('\n');
    for f in frames {
        out.push_str(&format_seconds(f.t));
        for p in &f.probs {
            out.push(',');
            out.push_str(&format!("{p}"));
        }
        out.push('\n');
    }
    out
}

pub fn save_frames_csv(path: &Path, frames: &[FrameObservation]) -> Result<()> {
    fs::write(path, frames_to_csv(frames)).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse a frame-stream CSV produced by [`frames_to_csv`] (or any file with
/// the same header convention).
pub fn parse_frames_csv(text: &str, origin: &str) -> Result<Vec<FrameObservation>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(origin, "empty frame stream"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"t") {
        return Err(Error::format(origin, "first column must be `t`"));
    }
    let has_background = cols.last() == Some(&"p_bg");
    let n_probs = cols.len() - 1;
    let n_steps = if has_background { n_probs - 1 } else { n_probs };
    for (i, c) in cols[1..=n_steps].iter().enumerate() {
        if *c != format!("p_{}", i + 1) {
            return Err(Error::format(origin, format!("unexpected column `{c}`")));
        }
    }

    let mut frames = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::format(
                origin,
                format!("line {}: expected {} fields, got {}", lineno + 2, cols.len(), fields.len()),
            ));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(origin, format!("line {}: bad number `{s}`", lineno + 2)))
        };
        let t = parse(fields[0])?;
        let probs = fields[1..].iter().map(|s| parse(s)).collect::<Result<Vec<f64>>>()?;
        frames.push(FrameObservation { t, probs, has_background });
    }
    Ok(frames)
}

pub fn load_frames_csv(path: &Path) -> Result<Vec<FrameObservation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_frames_csv(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::cooking_like_graph;

    #[test]
    fn graph_round_trip_is_byte_stable() {
        let g = cooking_like_graph();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("graph.json");
        save_graph(&p, &g).unwrap();
        let first = fs::read(&p).unwrap();
        let loaded = load_graph(&p).unwrap();
        save_graph(&p, &loaded).unwrap();
        let second = fs::read(&p).unwrap();
        assert_eq!(first, second);
        assert_eq!(loaded, g);
    }

    #[test]
    fn json_floats_round_trip_to_the_exact_bits() {
        // 7.8 + 7.8 is one ulp away from the f64 nearest to 15.6; the
        // shortest decimal repr must reparse to the same bits.
        let x: f64 = 7.8 + 7.8;
        let text = to_canonical_json(&x);
        let back: f64 = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(x.to_bits(), back.to_bits());
    }

    #[test]
    fn frame_csv_round_trips() {
        let frames = vec![
            FrameObservation { t: 0.2, probs: vec![0.7, 0.2, 0.1], has_background: false },
            FrameObservation { t: 0.4, probs: vec![0.1, 0.8, 0.1], has_background: false },
            FrameObservation { t: 0.6000000000000001, probs: vec![0.0, 0.5, 0.5], has_background: false },
        ];
        let csv = frames_to_csv(&frames);
        assert!(csv.starts_with("t,p_1,p_2,p_3\n"));
        assert!(csv.contains("\n0.6,"), "timestamps print without float noise: {csv}");
        let back = parse_frames_csv(&csv, "mem").unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[1].probs, vec![0.1, 0.8, 0.1]);
    }

    #[test]
    fn background_column_is_detected() {
        let csv = "t,p_1,p_2,p_bg\n0.2,0.5,0.3,0.2\n";
        let frames = parse_frames_csv(csv, "mem").unwrap();
        assert!(frames[0].has_background);
        assert_eq!(frames[0].step_probs(), &[0.5, 0.3]);
    }

    #[test]
    fn graph_hash_ignores_non_canonical_ordering() {
        let g = cooking_like_graph();
        let mut shuffled = g.clone();
        shuffled.edges.reverse();
        shuffled.steps.reverse();
        assert_eq!(graph_hash(&g), graph_hash(&shuffled));
    }
}
