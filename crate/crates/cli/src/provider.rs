//! Where datasets come from. Training and evaluation both go through a
//! [`DatasetProvider`], so tests can record exactly which splits and domains
//! each phase touches.

use unvp::data::{apply_domain, generate_glyphs, load_idx, Dataset, DomainKind};

use crate::config::{DatasetConfig, DomainEntry, SourceKind};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

pub trait DatasetProvider {
    /// The split rendered in the given domain; `domain_tag` of the result is the entry's tag.
    fn load(&self, split: Split, domain: &DomainEntry) -> Result<Dataset, CliError>;
}

/// Offset that keeps the glyph test split disjoint from the train split.
const TEST_SEED_OFFSET: u64 = 0x7e57;

/// Builds datasets from an experiment's dataset block.
#[derive(Debug, Clone)]
pub struct ConfigProvider {
    cfg: DatasetConfig,
}

impl ConfigProvider {
    pub fn new(cfg: &DatasetConfig) -> Self {
        Self { cfg: cfg.clone() }
    }

    fn base(&self, split: Split) -> Result<Dataset, CliError> {
        let c = &self.cfg;
        match c.source {
            SourceKind::Glyphs => {
                let (n, seed) = match split {
                    Split::Train => (c.train_size, c.seed),
                    Split::Test => (c.test_size, c.seed.wrapping_add(TEST_SEED_OFFSET)),
                };
                Ok(generate_glyphs(n, c.class_count, c.image_size, seed)?)
            }
            SourceKind::Idx => {
                let (images, labels) = match split {
                    Split::Train => (&c.train_images, &c.train_labels),
                    Split::Test => (&c.test_images, &c.test_labels),
                };
                let (images, labels) = (images.as_ref().expect("validated"), labels.as_ref().expect("validated"));
                let mut ds = load_idx(images, labels).map_err(|e| {
                    CliError::config(format!("{} / {}: {e}", images.display(), labels.display()))
                })?;
                if let Some(&bad) = ds.labels.iter().find(|&&l| l >= c.class_count) {
                    return Err(CliError::config(format!(
                        "{}: label {bad} out of range for dataset.class_count = {}",
                        labels.display(),
                        c.class_count
                    )));
                }
                ds.class_count = c.class_count;
                Ok(ds)
            }
        }
    }
}

impl DatasetProvider for ConfigProvider {
    fn load(&self, split: Split, domain: &DomainEntry) -> Result<Dataset, CliError> {
        let base = self.base(split)?;
        let mut spec = domain.spec.clone();
        // Textures follow the dataset seed so that --seed reseeds everything.
        spec.seed = spec.seed.wrapping_add(self.cfg.seed);
        let mut ds = match spec.kind {
            DomainKind::Clean => base,
            _ => apply_domain(&base, &spec)?,
        };
        ds.domain_tag = domain.tag().to_string();
        Ok(ds)
    }
}
