use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `train:val:test` proportions, e.g. `6:1:3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SplitRatio {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl SplitRatio {
    pub fn new(train: u32, val: u32, test: u32) -> Result<Self> {
        if train == 0 || val == 0 || test == 0 {
            return Err(Error::config(format!("ratio {train}:{val}:{test} has a zero part")));
        }
        Ok(Self { train, val, test })
    }

    pub fn parts(&self) -> [u32; 3] {
        [self.train, self.val, self.test]
    }
}

impl FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split(':')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("ratio `{s}` is not of the form t:v:s")))?;
        match parts.as_slice() {
            [t, v, te] => Self::new(*t, *v, *te),
            _ => Err(Error::config(format!("ratio `{s}` needs three parts"))),
        }
    }
}

impl TryFrom<String> for SplitRatio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SplitRatio> for String {
    fn from(r: SplitRatio) -> String {
        r.to_string()
    }
}

impl fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratio: SplitRatio,
    pub seed: u64,
}

/// Flat pixel indices of each partition, ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `n` items by `weights` using largest remainders: each part gets the
/// floor of its exact quota, and leftover items go to the largest fractional
/// remainders (lower index first on ties).
pub fn largest_remainder(n: usize, weights: &[u32]) -> Vec<usize> {
    let total: u64 = weights.iter().map(|&w| w as u64).sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|&w| (n as u64 * w as u64 / total) as usize)
        .collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(n as u64 * weights[i] as u64 % total), i));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Per-class stratified split of all labeled pixels (label 0 is skipped).
pub fn stratified_split(labels: &[u16], spec: &SplitSpec) -> Result<Split> {
    let classes = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (p, &l) in labels.iter().enumerate() {
        if l != 0 {
            per_class[l as usize - 1].push(p);
        }
    }
    let small: Vec<String> = per_class
        .iter()
        .enumerate()
        .filter(|(_, px)| !px.is_empty() && px.len() < 3)
        .map(|(k, px)| format!("class {} ({} pixels)", k + 1, px.len()))
        .collect();
    if !small.is_empty() {
        return Err(Error::config(format!(
            "classes need at least 3 labeled pixels: {}",
            small.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = Split::default();
    for mut pixels in per_class {
        pixels.shuffle(&mut rng);
        let counts = largest_remainder(pixels.len(), &spec.ratio.parts());
        let (train, rest) = pixels.split_at(counts[0]);
        let (val, test) = rest.split_at(counts[1]);
        split.train.extend_from_slice(train);
        split.val.extend_from_slice(val);
        split.test.extend_from_slice(test);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
