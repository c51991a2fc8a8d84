//! Triplet datasets `(x, c, y)`: in-memory types, the synthetic generator,
//! and the `DECODS01` file format.

mod format;
mod synthetic;

pub use format::{load_dataset, read_split, save_dataset, write_split, DATASET_MAGIC};
pub use synthetic::{generate_synthetic, nearest_template, SyntheticConfig, SyntheticWorld};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Mutually exclusive concept groups; each index belongs to at most one group.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConceptGroups {
    groups: Vec<Vec<usize>>,
    membership: Vec<Option<usize>>,
}

impl ConceptGroups {
    pub fn none(num_concepts: usize) -> Self {
        Self {
            groups: Vec::new(),
            membership: vec![None; num_concepts],
        }
    }

    pub fn new(groups: Vec<Vec<usize>>, num_concepts: usize) -> Result<Self> {
        let mut membership = vec![None; num_concepts];
        for (g, members) in groups.iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::InvalidArgument(format!("group {g} needs at least two concepts")));
            }
            for &j in members {
                if j >= num_concepts {
                    return Err(Error::OutOfRange {
                        index: j,
                        len: num_concepts,
                    });
                }
                if membership[j].is_some() {
                    return Err(Error::InvalidArgument(format!("concept {j} appears in two groups")));
                }
                membership[j] = Some(g);
            }
        }
        Ok(Self { groups, membership })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_of(&self, concept: usize) -> Option<usize> {
        self.membership.get(concept).copied().flatten()
    }

    pub fn num_concepts(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Concepts outside every group.
    pub fn free_concepts(&self) -> Vec<usize> {
        (0..self.membership.len()).filter(|&j| self.membership[j].is_none()).collect()
    }

    /// `"0,1,2;3,4"`, empty when there are no groups.
    pub fn encode(&self) -> String {
        self.groups
            .iter()
            .map(|g| g.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn decode(s: &str, num_concepts: usize) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(Self::none(num_concepts));
        }
        let groups = s
            .split(';')
            .map(|g| {
                g.split(',')
                    .map(|j| {
                        j.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::MalformedHeader(format!("bad group list '{s}'")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(groups, num_concepts)
    }

    /// True when every group has exactly one active member in `row`.
    pub fn is_satisfied_by(&self, row: &[u8]) -> bool {
        self.groups
            .iter()
            .all(|g| g.iter().filter(|&&j| row[j] == 1).count() == 1)
    }
}

/// `N` instances of features, binary concept annotations and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletDataset<T> {
    pub split: String,
    pub seed: u64,
    /// Global index of row 0; instance ids are `id_offset + row`.
    pub id_offset: u64,
    pub num_classes: usize,
    pub groups: ConceptGroups,
    pub features: Matrix<T>,
    /// Row-major `N × d`, entries in `{0, 1}`.
    pub concepts: Vec<u8>,
    pub labels: Vec<u32>,
}

impl<T: Scalar> TripletDataset<T> {
    pub fn new(
        split: impl Into<String>,
        seed: u64,
        id_offset: u64,
        num_classes: usize,
        groups: ConceptGroups,
        features: Matrix<T>,
        concepts: Vec<u8>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let n = features.rows();
        let d = groups.num_concepts();
        if labels.len() != n {
            return Err(Error::DimensionMismatch(format!("{} labels for {n} rows", labels.len())));
        }
        if concepts.len() != n * d {
            return Err(Error::DimensionMismatch(format!(
                "{} concept entries for {n} rows × {d} concepts",
                concepts.len()
            )));
        }
        if let Some(&c) = concepts.iter().find(|&&c| c > 1) {
            return Err(Error::InvalidArgument(format!("concept annotation {c} is not binary")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::OutOfRange {
                index: y as usize,
                len: num_classes,
            });
        }
        Ok(Self {
            split: split.into(),
            seed,
            id_offset,
            num_classes,
            groups,
            features,
            concepts,
            labels,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn num_concepts(&self) -> usize {
        self.groups.num_concepts()
    }

    #[inline]
    pub fn concept_row(&self, i: usize) -> &[u8] {
        let d = self.num_concepts();
        &self.concepts[i * d..(i + 1) * d]
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    #[inline]
    pub fn instance_id(&self, i: usize) -> u64 {
        self.id_offset + i as u64
    }

    /// Concept annotations as a `{0, 1}`-valued matrix.
    pub fn concept_matrix(&self) -> Matrix<T> {
        Matrix::from_vec(
            self.len(),
            self.num_concepts(),
            self.concepts.iter().map(|&c| T::lit(c as f64)).collect(),
        )
        .expect("consistent shape")
    }

    /// Rows `indices` as a new dataset (ids are not preserved).
    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.num_concepts();
        let mut concepts = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            concepts.extend_from_slice(self.concept_row(i));
        }
        Self {
            split: self.split.clone(),
            seed: self.seed,
            id_offset: self.id_offset,
            num_classes: self.num_classes,
            groups: self.groups.clone(),
            features: self.features.select_rows(indices),
            concepts,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> TripletDataset<U> {
        TripletDataset {
            split: self.split.clone(),
            seed: self.seed,
            id_offset: self.id_offset,
            num_classes: self.num_classes,
            groups: self.groups.clone(),
            features: self.features.cast(),
            concepts: self.concepts.clone(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle<T> {
    pub train: TripletDataset<T>,
    pub val: TripletDataset<T>,
    pub test: TripletDataset<T>,
}

impl<T: Scalar> SplitBundle<T> {
    pub fn new(train: TripletDataset<T>, val: TripletDataset<T>, test: TripletDataset<T>) -> Result<Self> {
        for other in [&val, &test] {
            if other.feature_dim() != train.feature_dim()
                || other.num_concepts() != train.num_concepts()
                || other.num_classes != train.num_classes
            {
                return Err(Error::DimensionMismatch(format!(
                    "split '{}' has (D, d, K) = ({}, {}, {}), train has ({}, {}, {})",
                    other.split,
                    other.feature_dim(),
                    other.num_concepts(),
                    other.num_classes,
                    train.feature_dim(),
                    train.num_concepts(),
                    train.num_classes
                )));
            }
        }
        Ok(Self { train, val, test })
    }

    pub fn feature_dim(&self) -> usize {
        self.train.feature_dim()
    }

    pub fn num_concepts(&self) -> usize {
        self.train.num_concepts()
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn groups(&self) -> &ConceptGroups {
        &self.train.groups
    }

    pub fn splits(&self) -> [&TripletDataset<T>; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub fn cast<U: Scalar>(&self) -> SplitBundle<U> {
        SplitBundle {
            train: self.train.cast(),
            val: self.val.cast(),
            test: self.test.cast(),
        }
    }
}
