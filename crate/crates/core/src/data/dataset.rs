//! On-disk dataset layout:
//!
//! ```text
//! manifest.txt      one `<stem> train|test` line per sample
//! images/<stem>.pgm 8-bit image
//! labels/<stem>.pgm 8-bit boundary mask, membrane 0, elsewhere 255
//! segs/<stem>.pgm   optional 16-bit segment ids
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::pgm::{load_image, load_labels, load_segments, save_image, save_labels, save_segments};
use super::Sample;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// File stems, parallel to `train` and `test`.
    pub train_stems: Vec<String>,
    pub test_stems: Vec<String>,
}

impl Dataset {
    /// Stems are numbered `000`, `001`, ... across train then test.
    pub fn new(train: Vec<Sample>, test: Vec<Sample>) -> Self {
        let stem = |k: usize| format!("{k:03}");
        let train_stems = (0..train.len()).map(stem).collect();
        let test_stems = (train.len()..train.len() + test.len()).map(stem).collect();
        Self {
            train,
            test,
            train_stems,
            test_stems,
        }
    }

    pub fn split(&self, split: Split) -> (&[Sample], &[String]) {
        match split {
            Split::Train => (&self.train, &self.train_stems),
            Split::Test => (&self.test, &self.test_stems),
        }
    }

    /// Writes every sample under `dir`. Images are quantized to 8 bits.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.train_stems.len() != self.train.len() || self.test_stems.len() != self.test.len() {
            return Err(Error::Dataset("stem lists do not match the samples".into()));
        }
        for sub in ["images", "labels", "segs"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        let mut manifest = String::new();
        let all = self
            .train
            .iter()
            .zip(&self.train_stems)
            .map(|(s, stem)| (Split::Train, s, stem))
            .chain(
                self.test
                    .iter()
                    .zip(&self.test_stems)
                    .map(|(s, stem)| (Split::Test, s, stem)),
            );
        for (split, s, stem) in all {
            save_image(&dir.join("images").join(format!("{stem}.pgm")), &s.image)?;
            save_labels(&dir.join("labels").join(format!("{stem}.pgm")), &s.labels)?;
            if let Some(seg) = &s.segments {
                save_segments(&dir.join("segs").join(format!("{stem}.pgm")), seg)?;
            }
            manifest.push_str(&format!("{stem} {split}\n"));
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| {
            Error::Dataset(format!("cannot read {}: {e}", dir.join(MANIFEST).display()))
        })?;
        let mut out = Dataset::default();
        for (n, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(stem), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Dataset(format!("manifest line {}: `{line}`", n + 1)));
            };
            let split = match split {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(Error::Dataset(format!(
                        "manifest line {}: unknown split `{other}`",
                        n + 1
                    )))
                }
            };
            let image = load_image(&dir.join("images").join(format!("{stem}.pgm")))?;
            let labels = load_labels(&dir.join("labels").join(format!("{stem}.pgm")))?;
            let seg_path = dir.join("segs").join(format!("{stem}.pgm"));
            let segments = if seg_path.exists() {
                Some(load_segments(&seg_path)?)
            } else {
                None
            };
            let sample = Sample::new(image, labels, segments)?;
            match split {
                Split::Train => {
                    out.train.push(sample);
                    out.train_stems.push(stem.to_string());
                }
                Split::Test => {
                    out.test.push(sample);
                    out.test_stems.push(stem.to_string());
                }
            }
        }
        if out.train.is_empty() && out.test.is_empty() {
            return Err(Error::Dataset("manifest lists no samples".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{read_image, synth_dataset, write_image, SynthParams};

    #[test]
    fn save_load_round_trip() {
        let p = SynthParams::new(32, 36, 3, 0.5);
        let samples = synth_dataset(&p, 1, 3).unwrap();
        let ds = Dataset::new(samples[..2].to_vec(), samples[2..].to_vec());
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!((back.train.len(), back.test.len()), (2, 1));
        assert_eq!(back.test_stems, vec!["002".to_string()]);
        for (a, b) in ds
            .train
            .iter()
            .chain(&ds.test)
            .zip(back.train.iter().chain(&back.test))
        {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.segments, b.segments);
            let quantized = read_image(&write_image(&a.image).unwrap());
            assert_eq!(quantized, b.image);
        }
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Dataset(_))));
        fs::write(dir.path().join(MANIFEST), "000 validation\n").unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Dataset(_))));
        fs::write(dir.path().join(MANIFEST), "000 train\n").unwrap();
        assert!(Dataset::load(dir.path()).is_err());
        fs::write(dir.path().join(MANIFEST), "\n").unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }
}
