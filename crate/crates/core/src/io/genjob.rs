use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One image-to-video generation request for the external generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationJob {
    pub class_name: String,
    pub init_image_path: String,
    pub prompt: String,
    pub resolution: (u32, u32),
    pub frame_count: u32,
    pub fps: u32,
    pub sampling_steps: u32,
    pub guidance: (f64, f64),
}

impl GenerationJob {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{}: empty prompt for {}",
                self.class_name, self.init_image_path
            )));
        }
        if self.frame_count == 0 || self.fps == 0 || self.sampling_steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "{}: frame_count, fps and sampling_steps must be positive",
                self.class_name
            )));
        }
        Ok(())
    }
}

pub fn write_generation_manifest(jobs: &[GenerationJob], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for j in jobs {
        j.validate()?;
    }
    let text = serde_json::to_string_pretty(jobs).map_err(|e| Error::json("generation manifest", e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_generation_manifest(path: impl AsRef<Path>) -> Result<Vec<GenerationJob>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let jobs: Vec<GenerationJob> = serde_json::from_str(&text).map_err(|e| Error::json("generation manifest", e))?;
    for j in &jobs {
        j.validate()?;
    }
    Ok(jobs)
}
