//! JSON-lines episode files.
//!
//! The first line is a schema header. Every following line is one step,
//! tagged with its episode's metadata; `is_first`/`is_last` delimit
//! episodes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DatasetError, Episode, EpisodeMetadata, Step};

pub const SCHEMA_NAME: &str = "forcegrasp.episodes";
pub const SCHEMA_VERSION: u32 = 1;

/// A broken structural rule, named so a reader can fix the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("missing or unrecognized schema header")]
    BadHeader,
    #[error("unsupported schema version {0}")]
    UnsupportedVersion(u32),
    #[error("two is_first flags in one episode")]
    DuplicateFirst,
    #[error("step outside an episode (is_first missing)")]
    MissingFirst,
    #[error("is_last set before the final step")]
    EarlyLast,
    #[error("episode ends without is_last")]
    MissingLast,
    #[error("is_last step is not terminal")]
    LastNotTerminal,
    #[error("subtask order must be approach, grasp, home")]
    SubtaskOrder,
    #[error("wrong vector length for {0}")]
    VectorLength(&'static str),
    #[error("negative force reading")]
    NegativeForce,
    #[error("episode has fewer than 2 steps")]
    TooFewSteps,
    #[error("episode metadata changes mid-episode")]
    InconsistentMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLine {
    episode_metadata: EpisodeMetadata,
    object_name: String,
    seen: bool,
    step: Step,
}

#[derive(Serialize)]
struct StepLineRef<'a> {
    episode_metadata: &'a EpisodeMetadata,
    object_name: &'a str,
    seen: bool,
    step: &'a Step,
}

pub fn write_episodes_to<W: Write>(episodes: &[Episode], mut out: W) -> Result<(), DatasetError> {
    let mut line = 2;
    for ep in episodes {
        if let Err((i, violation)) = ep.validate() {
            return Err(DatasetError::Invalid {
                line: line + i,
                violation,
            });
        }
        line += ep.steps.len();
    }
    let header = Header {
        schema: SCHEMA_NAME.to_string(),
        version: SCHEMA_VERSION,
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for ep in episodes {
        for step in &ep.steps {
            let record = StepLineRef {
                episode_metadata: &ep.metadata,
                object_name: &ep.object_name,
                seen: ep.seen,
                step,
            };
            serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_episodes(episodes: &[Episode], path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path)?;
    write_episodes_to(episodes, BufWriter::new(file))
}

pub fn read_episodes_from<R: BufRead>(input: R) -> Result<Vec<Episode>, DatasetError> {
    let mut lines = input.lines();
    let header_line = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(DatasetError::Invalid {
                line: 1,
                violation: Violation::BadHeader,
            })
        }
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|_| DatasetError::Invalid {
        line: 1,
        violation: Violation::BadHeader,
    })?;
    if header.schema != SCHEMA_NAME {
        return Err(DatasetError::Invalid {
            line: 1,
            violation: Violation::BadHeader,
        });
    }
    if header.version != SCHEMA_VERSION {
        return Err(DatasetError::Invalid {
            line: 1,
            violation: Violation::UnsupportedVersion(header.version),
        });
    }

    let mut episodes = Vec::new();
    let mut open: Option<(usize, Episode)> = None;
    let mut line_no = 1;
    for text in lines {
        let text = text?;
        line_no += 1;
        let record: StepLine =
            serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        let invalid = |violation| DatasetError::Invalid {
            line: line_no,
            violation,
        };
        if record.step.is_first {
            if open.is_some() {
                return Err(invalid(Violation::DuplicateFirst));
            }
            open = Some((
                line_no,
                Episode {
                    metadata: record.episode_metadata,
                    object_name: record.object_name,
                    seen: record.seen,
                    steps: Vec::new(),
                },
            ));
        } else {
            match &open {
                None => return Err(invalid(Violation::MissingFirst)),
                Some((_, ep)) => {
                    if ep.metadata != record.episode_metadata
                        || ep.object_name != record.object_name
                        || ep.seen != record.seen
                    {
                        return Err(invalid(Violation::InconsistentMetadata));
                    }
                }
            }
        }
        let is_last = record.step.is_last;
        if let Some((_, ep)) = open.as_mut() {
            ep.steps.push(record.step);
        }
        if is_last {
            let (start, ep) = open.take().expect("open episode");
            if let Err((i, violation)) = ep.validate() {
                return Err(DatasetError::Invalid {
                    line: start + i,
                    violation,
                });
            }
            episodes.push(ep);
        }
    }
    if open.is_some() {
        return Err(DatasetError::Invalid {
            line: line_no,
            violation: Violation::MissingLast,
        });
    }
    Ok(episodes)
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>, DatasetError> {
    read_episodes_from(BufReader::new(File::open(path)?))
}
