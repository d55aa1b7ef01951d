//! Score files: `path,label,model_tag,R,D,A,restarts_used`, one row per image.

use std::path::Path;

use crate::data::io::atomic_write;
use crate::data::manifest::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub path: String,
    pub label: Label,
    pub model_tag: String,
    pub residual: f64,
    pub discrimination: f64,
    pub score: f64,
    pub restarts_used: usize,
}

pub const HEADER: &str = "path,label,model_tag,R,D,A,restarts_used";

pub fn scores_csv(rows: &[ScoreRow]) -> Result<String> {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        if r.path.contains(',') || r.model_tag.contains(',') {
            return Err(Error::Config(format!(
                "score fields may not contain commas: {}",
                r.path
            )));
        }
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.path, r.label, r.model_tag, r.residual, r.discrimination, r.score, r.restarts_used
        ));
    }
    Ok(s)
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    atomic_write(path, scores_csv(rows)?.as_bytes())
}

pub fn parse_scores(text: &str, origin: &Path) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == HEADER {
            continue;
        }
        let bad = |msg: String| Error::Manifest {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("`{s}` is not a number")))
        };
        rows.push(ScoreRow {
            path: f[0].to_string(),
            label: f[1].parse().map_err(|e: Error| bad(e.to_string()))?,
            model_tag: f[2].to_string(),
            residual: num(f[3])?,
            discrimination: num(f[4])?,
            score: num(f[5])?,
            restarts_used: f[6]
                .parse()
                .map_err(|_| bad(format!("`{}` is not a count", f[6])))?,
        });
    }
    Ok(rows)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_exact_floats() {
        let rows = vec![ScoreRow {
            path: "images/a.png".into(),
            label: Label::SyntheticUnknown,
            model_tag: "randgan-SyntheticA".into(),
            residual: 0.1 + 0.2,
            discrimination: 1e-300,
            score: 123.456789012345,
            restarts_used: 3,
        }];
        let text = scores_csv(&rows).unwrap();
        assert!(text.starts_with(HEADER));
        assert_eq!(parse_scores(&text, Path::new("s.csv")).unwrap(), rows);
        assert!(parse_scores("a,Normal,m,1,2\n", Path::new("s.csv")).is_err());
    }
}
