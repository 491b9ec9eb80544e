use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetManifest, FundusRecord, Label, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Train, val and test fractions.
    pub fractions: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { fractions: [0.7, 0.15, 0.15], seed: 0, stratified: true }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::Config(format!("split fractions must each lie in (0,1), got {:?}", self.fractions)));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Split sizes for `n` items: largest-remainder rounding, so every count is
/// within one of `fraction * n`. A split left empty borrows an item from a
/// split that was rounded up, when one exists.
pub fn split_sizes(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    for i in 0..3 {
        if sizes[i] == 0 && exact[i] > 0.0 {
            if let Some(d) = (0..3).find(|&d| sizes[d] > 1 && sizes[d] as f64 > exact[d]) {
                sizes[d] -= 1;
                sizes[i] += 1;
            }
        }
    }
    sizes
}

fn order_key(seed: u64, record_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(record_id.as_bytes());
    h.finalize().into()
}

fn assign(group: &mut [&mut FundusRecord], fractions: &[f64; 3], seed: u64) {
    group.sort_by_cached_key(|r| order_key(seed, &r.record_id));
    let [train, val, _] = split_sizes(group.len(), fractions);
    for (i, r) in group.iter_mut().enumerate() {
        r.split = Some(if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        });
    }
}

/// Annotates every record with a split. The result depends only on the seed
/// and the set of record ids, not on record order.
pub fn stratified_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    for label in [Label::Normal, Label::Glaucoma] {
        let n = manifest.count(label);
        if spec.stratified && n < 3 {
            return Err(Error::Data(format!(
                "{}: class {} has {n} record(s), fewer than the 3 splits",
                manifest.dataset_id,
                label.as_u8()
            )));
        }
    }
    let mut out = manifest.clone();
    if spec.stratified {
        for label in [Label::Normal, Label::Glaucoma] {
            let mut group: Vec<&mut FundusRecord> = out.records.iter_mut().filter(|r| r.label == label).collect();
            assign(&mut group, &spec.fractions, spec.seed);
        }
    } else {
        let mut all: Vec<&mut FundusRecord> = out.records.iter_mut().collect();
        assign(&mut all, &spec.fractions, spec.seed);
    }
    Ok(out)
}
