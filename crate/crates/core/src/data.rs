//! In-memory datasets, dataset manifests, and synthetic benchmark construction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{apply_mask, Component, ComponentMask, FaceImage, FacialTemplate, LayerBundle};
use crate::error::{Error, Result};
use crate::extractor::TemplateExtractor;
use crate::io::{load_image, load_mask_sidecar, read_jsonl, save_image, save_mask_sidecar, write_jsonl};
use crate::masks::{generate_synthetic_face, make_layer_bundle, JitterBounds, SyntheticFaceSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_path: String,
    pub subject_id: String,
    pub split: Split,
}

/// The mask sidecar stored next to an image: `a/b.png -> a/b.mask.png`.
pub fn mask_sidecar_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image.with_file_name(format!("{stem}.mask.png"))
}

/// Reads a manifest, resolving relative image paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let recs: Vec<ManifestRecord> = read_jsonl(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(recs.len());
    for mut r in recs {
        if r.subject_id.is_empty() {
            return Err(Error::format(path.display().to_string(), format!("empty subject_id for {}", r.image_path)));
        }
        let p = Path::new(&r.image_path);
        let resolved = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        if !resolved.exists() {
            return Err(Error::Data(format!("manifest image {} does not exist", resolved.display())));
        }
        r.image_path = resolved.to_string_lossy().into_owned();
        out.push(r);
    }
    Ok(out)
}

/// One face with its supervision: masks (layer targets are derived on demand) and template.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    pub subject_id: String,
    pub image: FaceImage<T>,
    pub masks: BTreeMap<Component, ComponentMask>,
    pub template: FacialTemplate<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn layer(&self, c: Component) -> Result<FaceImage<T>> {
        apply_mask(&self.image, &self.masks[&c])
    }

    pub fn bundle(&self) -> Result<LayerBundle<T>> {
        make_layer_bundle(&self.image, &self.masks)
    }
}

/// A list of samples sharing one resolution and template dimension.
#[derive(Clone, Debug, Default)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Vec<Sample<T>>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let (s, d) = (first.image.side(), first.template.dim());
            if samples.iter().any(|x| x.image.side() != s || x.template.dim() != d) {
                return Err(Error::Dimension("samples differ in resolution or template dimension".into()));
            }
        }
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.side())
    }

    pub fn template_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.template.dim())
    }

    pub fn subjects(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.subject_id.clone()).collect()
    }

    /// `[B, 3, H, W]` panoramas of the selected samples.
    pub fn images(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let xs: Vec<&[T]> = idx.iter().map(|&i| self.samples[i].image.data()).collect();
        let shape = self.samples[idx[0]].image.pixels().shape().to_vec();
        Tensor::stack(&xs, &shape)
    }

    /// `[B, 3, H, W]` masked layer targets of component `c`.
    pub fn layer_targets(&self, idx: &[usize], c: Component) -> Result<Tensor<T>> {
        let layers = idx
            .iter()
            .map(|&i| self.samples[i].layer(c))
            .collect::<Result<Vec<_>>>()?;
        let xs: Vec<&[T]> = layers.iter().map(|l| l.data()).collect();
        Tensor::stack(&xs, layers[0].pixels().shape())
    }

    /// `[B, d]` templates.
    pub fn templates(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let xs: Vec<&[T]> = idx.iter().map(|&i| self.samples[i].template.values()).collect();
        Tensor::stack(&xs, &[self.samples[idx[0]].template.dim()])
    }

    /// Recomputes every template with `extractor`, in batches.
    pub fn retemplate(&mut self, extractor: &dyn TemplateExtractor<T>) -> Result<()> {
        let all: Vec<usize> = (0..self.len()).collect();
        for chunk in all.chunks(64) {
            let t = extractor.extract_batch(&self.images(chunk)?)?;
            for (k, &i) in chunk.iter().enumerate() {
                self.samples[i].template = FacialTemplate::new(t.sample(k).to_vec())?;
            }
        }
        Ok(())
    }
}

/// Extracts templates for a list of images in batches.
pub fn extract_all<T: Scalar>(extractor: &dyn TemplateExtractor<T>, images: &[FaceImage<T>]) -> Result<Vec<FacialTemplate<T>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let xs: Vec<&[T]> = chunk.iter().map(|x| x.data()).collect();
        let t = extractor.extract_batch(&Tensor::stack(&xs, chunk[0].pixels().shape())?)?;
        for k in 0..chunk.len() {
            out.push(FacialTemplate::new(t.sample(k).to_vec())?);
        }
    }
    Ok(out)
}

/// Layout of a synthetic benchmark: identities `first_identity..first_identity + subjects`,
/// `images_per_subject` jitter draws each; draws `0..train_per_subject` go to the train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub images_per_subject: usize,
    pub train_per_subject: usize,
    pub first_identity: u64,
    pub resolution: usize,
    pub jitter: JitterBounds,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            subjects: 64,
            images_per_subject: 8,
            train_per_subject: 6,
            first_identity: 0,
            resolution: 128,
            jitter: JitterBounds::default(),
        }
    }
}

/// A rendered synthetic face before templates are attached.
pub struct RawSample<T> {
    pub id: String,
    pub subject_id: String,
    pub split: Split,
    pub image: FaceImage<T>,
    pub masks: BTreeMap<Component, ComponentMask>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.images_per_subject == 0 {
            return Err(Error::Config {
                key: "data.synthetic".into(),
                detail: "subjects and images_per_subject must be positive".into(),
            });
        }
        if self.train_per_subject > self.images_per_subject {
            return Err(Error::Config {
                key: "data.synthetic.train_per_subject".into(),
                detail: "cannot exceed images_per_subject".into(),
            });
        }
        Ok(())
    }

    pub fn render<T: Scalar>(&self) -> Result<Vec<RawSample<T>>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.subjects * self.images_per_subject);
        for s in 0..self.subjects as u64 {
            let identity = self.first_identity + s;
            for j in 0..self.images_per_subject as u64 {
                let spec = SyntheticFaceSpec::sample(identity, j, &self.jitter);
                let face = generate_synthetic_face::<T>(&spec, self.resolution)?;
                let split = if (j as usize) < self.train_per_subject { Split::Train } else { Split::Test };
                out.push(RawSample {
                    id: format!("{}_{j:02}", face.subject_id),
                    subject_id: face.subject_id,
                    split,
                    image: face.image,
                    masks: face.bundle.masks().clone(),
                });
            }
        }
        Ok(out)
    }
}

/// Attaches templates from `extractor` and splits into (train, test).
pub fn build_datasets<T: Scalar>(
    raw: Vec<RawSample<T>>,
    extractor: &dyn TemplateExtractor<T>,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let images: Vec<FaceImage<T>> = raw.iter().map(|r| r.image.clone()).collect();
    let templates = extract_all(extractor, &images)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in raw.into_iter().zip(templates) {
        let s = Sample {
            id: r.id,
            subject_id: r.subject_id,
            image: r.image,
            masks: r.masks,
            template: t,
        };
        match r.split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok((Dataset::new(train)?, Dataset::new(test)?))
}

/// Writes images, mask sidecars and `manifest.jsonl` into `dir`; returns the manifest path.
pub fn write_synthetic<T: Scalar>(raw: &[RawSample<T>], dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut records = Vec::with_capacity(raw.len());
    for r in raw {
        let rel = format!("images/{}.png", r.id);
        let p = dir.join(&rel);
        save_image(&r.image, &p)?;
        save_mask_sidecar(&r.masks, &mask_sidecar_path(&p))?;
        records.push(ManifestRecord {
            image_path: rel,
            subject_id: r.subject_id.clone(),
            split: r.split,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_jsonl(&manifest, &records)?;
    Ok(manifest)
}

/// Loads the images and mask sidecars listed in a manifest.
pub fn load_manifest_samples<T: Scalar>(path: &Path) -> Result<Vec<RawSample<T>>> {
    let recs = read_manifest(path)?;
    let mut out = Vec::with_capacity(recs.len());
    for r in recs {
        let p = PathBuf::from(&r.image_path);
        let image = load_image::<T>(&p)?;
        let sidecar = mask_sidecar_path(&p);
        let masks = if sidecar.exists() {
            load_mask_sidecar(&sidecar)?
        } else {
            return Err(Error::Data(format!("no mask sidecar for {}", p.display())));
        };
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.push(RawSample {
            id,
            subject_id: r.subject_id,
            split: r.split,
            image,
            masks,
        });
    }
    Ok(out)
}
