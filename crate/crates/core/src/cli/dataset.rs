//! JSONL episode files, one trajectory per line.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simworld::{reset, Action, Trajectory, TrajectoryStep, IMAGE_SIZE};
use crate::vocab::RgbImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Row-major RGB bytes.
    pub image: Vec<u8>,
    pub proprio: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: usize,
    pub seed: u64,
    pub instruction: String,
    pub steps: Vec<StepRecord>,
    pub success: bool,
}

impl From<&Trajectory> for EpisodeRecord {
    fn from(t: &Trajectory) -> Self {
        EpisodeRecord {
            episode_id: t.episode_id,
            seed: t.spec.seed,
            instruction: t.spec.instruction.clone(),
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord { image: s.image.pixels.clone(), proprio: s.proprio.clone(), action: s.action })
                .collect(),
            success: t.success,
        }
    }
}

impl EpisodeRecord {
    /// Rebuilds the trajectory; the task comes from re-seeding the simulator.
    pub fn into_trajectory(self) -> Result<Trajectory> {
        let (_, spec) = reset(self.seed);
        if spec.instruction != self.instruction {
            return Err(Error::Data(format!(
                "episode {}: instruction does not match seed {}",
                self.episode_id, self.seed
            )));
        }
        let steps = self
            .steps
            .into_iter()
            .map(|s| {
                if s.image.len() != 3 * IMAGE_SIZE * IMAGE_SIZE {
                    return Err(Error::DimensionMismatch { expected: 3 * IMAGE_SIZE * IMAGE_SIZE, got: s.image.len() });
                }
                let image = RgbImage { height: IMAGE_SIZE, width: IMAGE_SIZE, pixels: s.image };
                Ok(TrajectoryStep { image, proprio: s.proprio, action: s.action })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory { episode_id: self.episode_id, spec, steps, success: self.success })
    }
}

pub fn write_jsonl<W: Write>(trajectories: &[Trajectory], mut w: W) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut w, &EpisodeRecord::from(t))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Trajectory>> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        out.push(rec.into_trajectory()?);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}
