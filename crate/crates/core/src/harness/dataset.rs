use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_sbt, save_sbt};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class names of the generated dataset.
pub const SYNTHETIC_CLASSES: [&str; 5] = ["class0", "class1", "class2", "class3", "class4"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    tensor: PathBuf,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    classes: Vec<String>,
    samples: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn new(classes: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        let ds = Dataset { classes, samples };
        ds.check()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Name of class `label`, or `#label` for indices past the class table.
    pub fn class_name(&self, label: usize) -> String {
        self.classes
            .get(label)
            .cloned()
            .unwrap_or_else(|| format!("#{label}"))
    }

    pub fn inputs(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.input.clone()).collect()
    }

    fn check(&self) -> Result<()> {
        let shape = self.samples.first().map(|s| s.input.shape().to_vec());
        for s in &self.samples {
            if s.label >= self.classes.len() {
                return Err(Error::Config(format!(
                    "sample `{}` has label {} but there are {} classes",
                    s.id,
                    s.label,
                    self.classes.len()
                )));
            }
            if Some(s.input.shape()) != shape.as_deref() {
                return Err(Error::dim(format!(
                    "sample `{}` is {:?}, the dataset is {:?}",
                    s.id,
                    s.input.shape(),
                    shape.as_deref().unwrap_or_default()
                )));
            }
        }
        Ok(())
    }

    /// Balanced 5-class set. Every class has a fixed random prototype image
    /// and its own brightness offset and contrast; samples add N(0, 1)
    /// noise scaled by 0.5.
    pub fn synthetic(input_shape: &[usize], per_class: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len: usize = input_shape.iter().product();
        let k = SYNTHETIC_CLASSES.len();
        let protos: Vec<Vec<f32>> = (0..k)
            .map(|_| (0..len).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let mut samples = Vec::with_capacity(k * per_class);
        for i in 0..per_class {
            for (c, proto) in protos.iter().enumerate() {
                let offset = (c as f32 - 2.0) * 0.25;
                let contrast = 0.6 + 0.2 * c as f32;
                let v = proto
                    .iter()
                    .map(|&p| {
                        let n: f32 = StandardNormal.sample(&mut rng);
                        offset + contrast * p + 0.5 * n
                    })
                    .collect();
                samples.push(Sample {
                    id: format!("s{:04}", i * k + c),
                    input: Tensor::from_f32(input_shape.to_vec(), v)?,
                    label: c,
                });
            }
        }
        Dataset::new(
            SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(),
            samples,
        )
    }

    /// Write one SBT file per sample next to a `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for s in &self.samples {
            let file = PathBuf::from(format!("{}.sbt", s.id));
            save_sbt(&s.input, dir.join(&file))?;
            entries.push(ManifestEntry {
                tensor: file,
                label: s.label,
            });
        }
        let manifest = Manifest {
            classes: self.classes.clone(),
            samples: entries,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }

    /// Load a manifest; tensor paths are relative to its directory.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest)?)?;
        let root = manifest.parent().unwrap_or(Path::new("."));
        let samples = m
            .samples
            .into_iter()
            .map(|e| {
                let id = e.tensor.file_stem().map_or_else(
                    || e.tensor.display().to_string(),
                    |s| s.to_string_lossy().into_owned(),
                );
                Ok(Sample {
                    id,
                    input: load_sbt(root.join(&e.tensor))?,
                    label: e.label,
                })
            })
            .collect::<Result<_>>()?;
        Dataset::new(m.classes, samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_balanced_and_seeded() {
        let a = Dataset::synthetic(&[1, 3, 8, 8], 4, 3).unwrap();
        assert_eq!(a.len(), 20);
        for c in 0..5 {
            assert_eq!(a.samples.iter().filter(|s| s.label == c).count(), 4);
        }
        assert_eq!(a, Dataset::synthetic(&[1, 3, 8, 8], 4, 3).unwrap());
        assert_ne!(a, Dataset::synthetic(&[1, 3, 8, 8], 4, 4).unwrap());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Dataset::synthetic(&[1, 3, 4, 4], 2, 1).unwrap();
        let path = a.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(path).unwrap(), a);
    }

    #[test]
    fn bad_label_rejected() {
        let s = Sample {
            id: "x".into(),
            input: Tensor::zeros(vec![1, 2]).unwrap(),
            label: 3,
        };
        assert!(Dataset::new(vec!["a".into()], vec![s]).is_err());
    }
}
