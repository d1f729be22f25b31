use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Episode, Target, TaskError};

#[derive(Clone, Copy, PartialEq)]
enum TargetShape {
    Label,
    Vector(usize),
}

fn target_shape(t: &Target) -> TargetShape {
    match t {
        Target::Label(_) => TargetShape::Label,
        Target::Vector(v) => TargetShape::Vector(v.len()),
    }
}

fn check_episode(
    ep: &Episode,
    line: usize,
    dims: &mut Option<(usize, TargetShape)>,
) -> Result<(), TaskError> {
    let dim_err = |message: String| TaskError::Dim { line, message };
    if ep.support.is_empty() {
        return Err(dim_err("empty support set".into()));
    }
    if ep.query.is_empty() {
        return Err(dim_err("empty query set".into()));
    }
    let samples = ep.support.iter().chain(&ep.query);
    for s in samples {
        if s.x.is_empty() {
            return Err(dim_err("empty input".into()));
        }
        if s.x.iter().any(|v| !v.is_finite()) {
            return Err(dim_err("non-finite input".into()));
        }
        if let Target::Vector(v) = &s.y {
            if v.is_empty() || v.iter().any(|v| !v.is_finite()) {
                return Err(dim_err("empty or non-finite target".into()));
            }
        }
        let here = (s.x.len(), target_shape(&s.y));
        match dims {
            None => *dims = Some(here),
            Some(expected) if *expected != here => {
                return Err(dim_err(format!(
                    "sample dims differ from earlier samples (input {} vs {})",
                    here.0, expected.0
                )));
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Reads line-delimited JSON episodes. Blank lines are skipped; every error
/// names the 1-based line it occurred on.
pub fn load_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>, TaskError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut dims = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| TaskError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        check_episode(&ep, line_no, &mut dims)?;
        out.push(ep);
    }
    if out.is_empty() {
        log::warn!("{} contains no episodes", path.display());
    }
    Ok(out)
}

pub fn write_episodes<W: Write>(mut w: W, episodes: &[Episode]) -> Result<(), TaskError> {
    for ep in episodes {
        serde_json::to_writer(&mut w, ep).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<(), TaskError> {
    write_episodes(BufWriter::new(File::create(path)?), episodes)
}
