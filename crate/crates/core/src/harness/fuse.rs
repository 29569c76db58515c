//! Line-oriented evidence fusion.
//!
//! Input: one JSON object per line, `{"evidence": [[e_1, ..., e_T], ...]}`,
//! listing at least one evidence vector. Output: one line per input with the
//! fused masses, `{"singletons": [...], "theta": u}`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{combine_many, masses_from_evidence, BeliefMass, Evidence};

#[derive(Debug, Deserialize)]
struct EvidenceLine {
    evidence: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct MassLine<'a> {
    singletons: &'a [f64],
    theta: f64,
}

pub fn fuse_line(evidence: &[Vec<f64>]) -> Result<BeliefMass> {
    let masses = evidence
        .iter()
        .map(|e| Evidence::new(e.clone()).map(|e| masses_from_evidence(&e)))
        .collect::<Result<Vec<_>>>()?;
    combine_many(&masses)
}

pub fn fuse_stream(input: impl BufRead, mut output: impl Write, origin: &Path) -> Result<usize> {
    let mut count = 0;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: EvidenceLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let fused = fuse_line(&rec.evidence).map_err(|e| err(e.to_string()))?;
        let out = MassLine {
            singletons: fused.singletons(),
            theta: fused.theta(),
        };
        writeln!(output, "{}", serde_json::to_string(&out).map_err(|e| err(e.to_string()))?)?;
        count += 1;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuses_each_line() {
        let input = b"{\"evidence\": [[3, 1, 2]]}\n\n{\"evidence\": [[3, 1, 2], [3, 1, 2]]}\n";
        let mut out = Vec::new();
        assert_eq!(fuse_stream(&input[..], &mut out, Path::new("in")).unwrap(), 2);
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("{\"singletons\":[0.3333333333333333"), "{}", lines[0]);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        let theta = v["theta"].as_f64().unwrap();
        // Con = (2/3)^2 - 14/81 = 22/81, so theta = (1/9) / (59/81).
        assert!((theta - 9.0 / 59.0).abs() < 1e-15);
    }

    #[test]
    fn reports_line_numbers() {
        let input = b"{\"evidence\": [[1, 1]]}\n{\"evidence\": [[1, -1]]}\n";
        let err = fuse_stream(&input[..], Vec::new(), Path::new("ev.jsonl")).unwrap_err();
        assert!(err.to_string().contains("ev.jsonl:2"), "{err}");
    }
}
