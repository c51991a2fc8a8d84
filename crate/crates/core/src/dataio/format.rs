//! `DECODS01` split records. A bundle file is the train, val and test
//! records written back to back.
//!
//! Record layout: magic, `u32` LE header length, `key=value` header with
//! `N`, `D`, `d`, `K`, `split`, `seed`, `id_offset`, `groups`; then the
//! `N × D` little-endian `f64` feature block, the `N × d` byte-per-entry
//! concept block and the `N` little-endian `u32` labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ConceptGroups, SplitBundle, TripletDataset};
use crate::container::{read_f64s, read_fully, read_header, write_f64s, write_header, Header};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub const DATASET_MAGIC: &[u8; 8] = b"DECODS01";

pub fn write_split<T: Scalar>(w: &mut impl Write, ds: &TripletDataset<T>) -> Result<()> {
    let mut h = Header::new();
    h.set("N", ds.len())
        .set("D", ds.feature_dim())
        .set("d", ds.num_concepts())
        .set("K", ds.num_classes)
        .set("split", &ds.split)
        .set("seed", ds.seed)
        .set("id_offset", ds.id_offset)
        .set("groups", ds.groups.encode());
    write_header(w, DATASET_MAGIC, &h)?;
    write_f64s(w, ds.features.data().iter().map(|v| v.as_f64()))?;
    w.write_all(&ds.concepts)?;
    let mut labels = Vec::with_capacity(ds.len() * 4);
    for &y in &ds.labels {
        labels.extend_from_slice(&y.to_le_bytes());
    }
    w.write_all(&labels)?;
    Ok(())
}

/// Reads one record; `Ok(None)` at a clean end of input.
pub fn read_split<T: Scalar>(r: &mut impl Read) -> Result<Option<TripletDataset<T>>> {
    let Some(h) = read_header(r, DATASET_MAGIC)? else {
        return Ok(None);
    };
    let n: usize = h.parse("N")?;
    let dim: usize = h.parse("D")?;
    let d: usize = h.parse("d")?;
    let k: usize = h.parse("K")?;
    let split = h.get("split")?.to_string();
    let seed: u64 = h.parse("seed")?;
    let id_offset: u64 = h.get_opt("id_offset").map_or(Ok(0), |_| h.parse("id_offset"))?;
    let groups = ConceptGroups::decode(h.get_opt("groups").unwrap_or(""), d)?;

    let features = read_f64s(r, n * dim, "feature block")?;
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dataset feature block"));
    }
    let mut concepts = vec![0u8; n * d];
    let got = read_fully(r, &mut concepts)?;
    if got < concepts.len() {
        return Err(Error::TruncatedPayload(format!(
            "concept block: expected {} rows, found {}",
            n,
            got / d.max(1)
        )));
    }
    let mut raw = vec![0u8; n * 4];
    let got = read_fully(r, &mut raw)?;
    if got < raw.len() {
        return Err(Error::TruncatedPayload(format!("label block: expected {n} labels, found {}", got / 4)));
    }
    let labels = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    let features = Matrix::from_vec(n, dim, features.into_iter().map(T::lit).collect())?;
    TripletDataset::new(split, seed, id_offset, k, groups, features, concepts, labels).map(Some)
}

pub fn save_dataset<T: Scalar>(bundle: &SplitBundle<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ds in bundle.splits() {
        write_split(&mut w, ds)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<SplitBundle<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut splits: Vec<Option<TripletDataset<T>>> = Vec::with_capacity(3);
    while let Some(ds) = read_split::<T>(&mut r)? {
        splits.push(Some(ds));
        if splits.len() > 3 {
            return Err(Error::MalformedHeader("more than three split records".into()));
        }
    }
    let mut take = |name: &str| {
        splits
            .iter_mut()
            .find(|s| s.as_ref().is_some_and(|s| s.split == name))
            .and_then(Option::take)
            .ok_or_else(|| Error::MalformedHeader(format!("missing '{name}' split")))
    };
    let train = take("train")?;
    let val = take("val")?;
    let test = take("test")?;
    SplitBundle::new(train, val, test)
}
