//! Reference sets and the global identity embedding.

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageTensor};
use crate::synthlab::Dataset;

use super::identity::{IdentityEmbedding, IdentityEncoder};

pub const MAX_REFERENCES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceEntry {
    pub image: ImageTensor,
    pub organ_mask: BinaryMask,
    pub valid: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReferenceSet {
    entries: Vec<ReferenceEntry>,
}

impl ReferenceSet {
    pub fn new(entries: Vec<ReferenceEntry>) -> Result<Self> {
        if entries.len() > MAX_REFERENCES {
            return Err(Error::InvalidArgument(format!(
                "{} references given, at most {MAX_REFERENCES} allowed",
                entries.len()
            )));
        }
        if let Some(e) = entries.iter().find(|e| {
            (e.image.height(), e.image.width()) != (e.organ_mask.height(), e.organ_mask.width())
        }) {
            return Err(Error::DimensionMismatch(format!(
                "reference {:?} with mask {}x{}",
                e.image.shape(),
                e.organ_mask.height(),
                e.organ_mask.width()
            )));
        }
        Ok(Self { entries })
    }

    /// References of dataset sample `index`, with validity flags from the manifest.
    pub fn from_dataset(dataset: &Dataset, index: usize) -> Result<Self> {
        let s = &dataset.samples[index];
        let entries = s
            .references
            .iter()
            .zip(&s.reference_valid)
            .map(|(&r, &valid)| ReferenceEntry {
                image: dataset.samples[r].gt.clone(),
                organ_mask: dataset.samples[r].mask.clone(),
                valid,
            })
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[ReferenceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn valid(&self) -> impl Iterator<Item = &ReferenceEntry> {
        self.entries.iter().filter(|e| e.valid)
    }

    pub fn valid_count(&self) -> usize {
        self.valid().count()
    }

    pub(crate) fn require_valid(&self) -> Result<Vec<&ReferenceEntry>> {
        let v: Vec<_> = self.valid().collect();
        if v.is_empty() {
            Err(Error::NoValidReference)
        } else {
            Ok(v)
        }
    }
}

/// Unit-normalized arithmetic mean of embeddings.
pub fn mean_embedding(embs: &[IdentityEmbedding]) -> Result<IdentityEmbedding> {
    let first = embs.first().ok_or(Error::NoValidReference)?;
    let mut acc = vec![0f64; first.dim()];
    for e in embs {
        if e.dim() != acc.len() {
            return Err(Error::DimensionMismatch(format!("embedding dims {} and {}", acc.len(), e.dim())));
        }
        acc.iter_mut().zip(&e.vector).for_each(|(a, &v)| *a += v as f64);
    }
    IdentityEmbedding::from_unnormalized(&acc)
}

/// `f_global`: mean identity embedding of the valid references, renormalized.
pub fn aggregate_global(encoder: &IdentityEncoder, refs: &ReferenceSet) -> Result<IdentityEmbedding> {
    let valid = refs.require_valid()?;
    let imgs: Vec<&ImageTensor> = valid.iter().map(|e| &e.image).collect();
    mean_embedding(&encoder.embed_batch(&imgs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> IdentityEmbedding {
        IdentityEmbedding::from_unnormalized(v).unwrap()
    }

    #[test]
    fn orthogonal_pair_averages_to_diagonal() {
        let (a, b) = (unit(&[1.0, 0.0]), unit(&[0.0, 1.0]));
        let m = mean_embedding(&[a.clone(), b.clone()]).unwrap();
        assert!((m.norm() - 1.0).abs() < 1e-6);
        assert!((m.cosine(&a) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!((m.cosine(&b) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(mean_embedding(&[b.clone(), a.clone()]).unwrap(), m);
        assert_eq!(mean_embedding(&[a.clone()]).unwrap(), a);
    }

    #[test]
    fn empty_and_all_invalid_sets_are_rejected() {
        assert!(matches!(mean_embedding(&[]), Err(Error::NoValidReference)));
        let entry = ReferenceEntry {
            image: ImageTensor::filled(4, 4, 3, 0.5),
            organ_mask: BinaryMask::empty(4, 4),
            valid: false,
        };
        let set = ReferenceSet::new(vec![entry.clone(), entry]).unwrap();
        assert!(matches!(set.require_valid(), Err(Error::NoValidReference)));
    }

    #[test]
    fn size_and_shape_checks() {
        let entry = ReferenceEntry {
            image: ImageTensor::filled(4, 4, 3, 0.5),
            organ_mask: BinaryMask::empty(4, 4),
            valid: true,
        };
        assert!(ReferenceSet::new(vec![entry.clone(); 6]).is_err());
        let bad = ReferenceEntry { organ_mask: BinaryMask::empty(2, 2), ..entry };
        assert!(matches!(ReferenceSet::new(vec![bad]), Err(Error::DimensionMismatch(_))));
    }
}
