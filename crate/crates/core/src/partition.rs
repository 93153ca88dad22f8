//! Non-IID client shards.
//!
//! Shard export format (JSON, `version` 1):
//!
//! ```text
//! { "version": 1, "classes": C, "spec": {...},
//!   "shards": [ { "client": k, "indices": [...], "histogram": [...] }, ... ] }
//! ```
//!
//! Label distribution CSV: header `client,class,count`, one row per nonzero
//! entry, clients then classes in ascending order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::histogram;
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

pub const SHARDS_VERSION: u32 = 1;

/// Smallest shard the unbalanced sampler accepts before redrawing.
const MIN_UNBALANCED_SHARD: usize = 10;
const MAX_REDRAWS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    /// α(λ): Dirichlet label skew, then equal shard sizes.
    DirichletBalanced { lambda: f64 },
    /// α_u(λ): Dirichlet label skew with uneven shard sizes.
    DirichletUnbalanced { lambda: f64 },
    /// β(Λ): each client holds exactly Λ labels.
    Pathological { labels_per_client: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub family: Family,
    pub clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("partition.clients", "must be at least 1"));
        }
        match self.family {
            Family::DirichletBalanced { lambda } | Family::DirichletUnbalanced { lambda } => {
                if !(lambda.is_finite() && lambda > 0.0) {
                    return Err(Error::config("partition.lambda", "must be positive"));
                }
            }
            Family::Pathological { labels_per_client } => {
                if labels_per_client == 0 {
                    return Err(Error::config("partition.labels_per_client", "must be at least 1"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub client: usize,
    /// Sorted indices into the partitioned label list.
    pub indices: Vec<usize>,
    pub histogram: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Number of classes with at least one sample.
    pub fn distinct_labels(&self) -> usize {
        self.histogram.iter().filter(|&&n| n > 0).count()
    }
}

/// Indices of each class.
fn by_class(labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        out.get_mut(y)
            .ok_or_else(|| Error::usage(format!("label {y} out of range for {classes} classes")))?
            .push(i);
    }
    Ok(out)
}

fn finish(assigned: Vec<Vec<usize>>, labels: &[usize], classes: usize) -> Vec<Shard> {
    assigned
        .into_iter()
        .enumerate()
        .map(|(client, mut indices)| {
            indices.sort_unstable();
            let ys: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
            Shard {
                client,
                histogram: histogram(&ys, classes),
                indices,
            }
        })
        .collect()
}

/// Symmetric Dirichlet draw through normalized Gamma variates. If every
/// variate underflows (tiny λ) the draw degenerates to a uniform vector.
fn dirichlet<R: Rng>(rng: &mut R, lambda: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(lambda, 1.0).expect("positive shape");
    let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let s: f64 = g.iter().sum();
    if s > 0.0 {
        g.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Cut `idx` into consecutive pieces at the rounded cumulative proportions.
fn split_by(idx: &[usize], props: &[f64], out: &mut [Vec<usize>]) {
    let n = idx.len() as f64;
    let mut cum = 0.0;
    let mut start = 0;
    for (k, p) in props.iter().enumerate() {
        cum += p;
        let end = if k + 1 == props.len() {
            idx.len()
        } else {
            ((cum * n).round() as usize).clamp(start, idx.len())
        };
        out[k].extend_from_slice(&idx[start..end]);
        start = end;
    }
}

fn dirichlet_raw<R: Rng>(
    classes: &[Vec<usize>],
    lambda: f64,
    k: usize,
    cap: Option<usize>,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut assigned = vec![Vec::new(); k];
    for members in classes {
        let mut idx = members.clone();
        idx.shuffle(rng);
        let mut p = dirichlet(rng, lambda, k);
        if let Some(cap) = cap {
            for (pk, a) in p.iter_mut().zip(&assigned) {
                if a.len() >= cap {
                    *pk = 0.0;
                }
            }
            let s: f64 = p.iter().sum();
            if s > 0.0 {
                p.iter_mut().for_each(|v| *v /= s);
            } else {
                let open = assigned.iter().filter(|a| a.len() < cap).count().max(1);
                for (pk, a) in p.iter_mut().zip(&assigned) {
                    *pk = if a.len() < cap { 1.0 / open as f64 } else { 0.0 };
                }
            }
        }
        split_by(&idx, &p, &mut assigned);
    }
    assigned
}

/// Move samples from over-quota clients to under-quota ones until every
/// client holds its quota: `n / K`, plus one for the first `n mod K`
/// clients. Donors give from their most abundant class (lowest class on
/// ties); receivers are the clients with the largest deficit (lowest id on
/// ties).
fn rebalance(assigned: &mut [Vec<usize>], labels: &[usize], classes: usize) {
    let k = assigned.len();
    let n: usize = assigned.iter().map(Vec::len).sum();
    let quota: Vec<usize> = (0..k).map(|i| n / k + usize::from(i < n % k)).collect();
    let mut counts: Vec<Vec<usize>> = assigned
        .iter()
        .map(|a| histogram(&a.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes))
        .collect();
    for donor in 0..k {
        while assigned[donor].len() > quota[donor] {
            let receiver = (0..k)
                .filter(|&r| assigned[r].len() < quota[r])
                .max_by_key(|&r| (quota[r] - assigned[r].len(), std::cmp::Reverse(r)))
                .expect("an over-quota client implies an under-quota one");
            let class = (0..classes)
                .max_by_key(|&c| (counts[donor][c], std::cmp::Reverse(c)))
                .expect("at least one class");
            let pos = assigned[donor]
                .iter()
                .rposition(|&i| labels[i] == class)
                .expect("class count is positive");
            let sample = assigned[donor].swap_remove(pos);
            counts[donor][class] -= 1;
            counts[receiver][class] += 1;
            assigned[receiver].push(sample);
        }
    }
}

/// Dirichlet label skew. Per class, proportions `~ Dir(λ·1_K)` decide how
/// that class's shuffled samples are cut among clients.
///
/// The balanced family then rebalances to equal shard sizes. The unbalanced
/// family stops assigning to a client once it reaches `n / K` samples and
/// redraws the whole partition until every client has at least
/// `min(10, n / K)` samples.
pub fn partition_dirichlet(labels: &[usize], classes: usize, spec: &PartitionSpec) -> Result<Vec<Shard>> {
    spec.validate()?;
    let per_class = by_class(labels, classes)?;
    let k = spec.clients;
    let mut rng = rng_for(spec.seed, &[tag::PARTITION]);
    match spec.family {
        Family::DirichletBalanced { lambda } => {
            let mut assigned = dirichlet_raw(&per_class, lambda, k, None, &mut rng);
            rebalance(&mut assigned, labels, classes);
            Ok(finish(assigned, labels, classes))
        }
        Family::DirichletUnbalanced { lambda } => {
            let cap = labels.len() / k;
            let floor = MIN_UNBALANCED_SHARD.min(cap);
            for _ in 0..MAX_REDRAWS {
                let assigned = dirichlet_raw(&per_class, lambda, k, Some(cap.max(1)), &mut rng);
                if assigned.iter().all(|a| a.len() >= floor) {
                    return Ok(finish(assigned, labels, classes));
                }
            }
            Err(Error::usage(format!(
                "no unbalanced partition with ≥ {floor} samples per client after {MAX_REDRAWS} draws"
            )))
        }
        Family::Pathological { .. } => Err(Error::usage("use partition_pathological for β(Λ)")),
    }
}

/// β(Λ): slot `s` of `K·Λ` takes class `perm[s mod C]` of a shuffled class
/// order, and client `k` owns slots `kΛ .. (k+1)Λ`. Each class's shuffled
/// samples are split evenly among its holders, earlier holders taking the
/// remainder.
pub fn partition_pathological(labels: &[usize], classes: usize, spec: &PartitionSpec) -> Result<Vec<Shard>> {
    spec.validate()?;
    let Family::Pathological { labels_per_client: l } = spec.family else {
        return Err(Error::usage("use partition_dirichlet for Dirichlet families"));
    };
    let k = spec.clients;
    if l > classes {
        return Err(Error::config(
            "partition.labels_per_client",
            format!("{l} exceeds the {classes} available classes"),
        ));
    }
    if k * l < classes {
        return Err(Error::config(
            "partition.labels_per_client",
            format!("{k} clients × {l} labels cannot cover {classes} classes"),
        ));
    }
    let per_class = by_class(labels, classes)?;
    let mut rng = rng_for(spec.seed, &[tag::PARTITION]);
    let mut perm: Vec<usize> = (0..classes).collect();
    perm.shuffle(&mut rng);
    let mut holders = vec![Vec::new(); classes];
    for s in 0..k * l {
        holders[perm[s % classes]].push(s / l);
    }
    let mut assigned = vec![Vec::new(); k];
    for (c, members) in per_class.iter().enumerate() {
        let mut idx = members.clone();
        idx.shuffle(&mut rng);
        let h = holders[c].len();
        let mut start = 0;
        for (i, &client) in holders[c].iter().enumerate() {
            let take = idx.len() / h + usize::from(i < idx.len() % h);
            assigned[client].extend_from_slice(&idx[start..start + take]);
            start += take;
        }
    }
    Ok(finish(assigned, labels, classes))
}

/// Dispatch on `spec.family`.
pub fn partition(labels: &[usize], classes: usize, spec: &PartitionSpec) -> Result<Vec<Shard>> {
    match spec.family {
        Family::Pathological { .. } => partition_pathological(labels, classes, spec),
        _ => partition_dirichlet(labels, classes, spec),
    }
}

#[derive(Serialize, Deserialize)]
struct ShardFile {
    version: u32,
    classes: usize,
    spec: Option<PartitionSpec>,
    shards: Vec<Shard>,
}

pub fn shards_to_json(shards: &[Shard], classes: usize, spec: Option<&PartitionSpec>) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ShardFile {
        version: SHARDS_VERSION,
        classes,
        spec: spec.copied(),
        shards: shards.to_vec(),
    })?)
}

/// Parse exported shards and check them against `labels`: version, index
/// range, disjointness and stored histograms.
pub fn shards_from_json(text: &str, labels: &[usize]) -> Result<Vec<Shard>> {
    let file: ShardFile = serde_json::from_str(text)?;
    if file.version != SHARDS_VERSION {
        return Err(Error::usage(format!("unsupported shard file version {}", file.version)));
    }
    let mut seen = vec![false; labels.len()];
    for (k, s) in file.shards.iter().enumerate() {
        if s.client != k {
            return Err(Error::usage(format!("shard {k} is labelled client {}", s.client)));
        }
        for &i in &s.indices {
            match seen.get_mut(i) {
                None => return Err(Error::usage(format!("index {i} out of range"))),
                Some(true) => return Err(Error::usage(format!("index {i} assigned twice"))),
                Some(v) => *v = true,
            }
        }
        let ys: Vec<usize> = s.indices.iter().map(|&i| labels[i]).collect();
        if histogram(&ys, file.classes) != s.histogram {
            return Err(Error::usage(format!(
                "histogram of client {k} does not match its labels"
            )));
        }
    }
    Ok(file.shards)
}

pub fn save_shards(path: &Path, shards: &[Shard], classes: usize, spec: Option<&PartitionSpec>) -> Result<()> {
    std::fs::write(path, shards_to_json(shards, classes, spec)?).map_err(|e| Error::io(path, e))
}

pub fn load_shards(path: &Path, labels: &[usize]) -> Result<Vec<Shard>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    shards_from_json(&text, labels)
}

/// `client,class,count` rows for label-distribution plots.
pub fn write_label_csv<W: std::io::Write>(out: W, shards: &[Shard]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["client", "class", "count"])?;
    for s in shards {
        for (c, &n) in s.histogram.iter().enumerate() {
            if n > 0 {
                w.write_record([s.client.to_string(), c.to_string(), n.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Mean and population standard deviation of shard sizes.
pub fn size_stats(shards: &[Shard]) -> (f64, f64) {
    let n = shards.len() as f64;
    let mean = shards.iter().map(|s| s.len() as f64).sum::<f64>() / n;
    let var = shards.iter().map(|s| (s.len() as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(per_class: usize, classes: usize) -> Vec<usize> {
        (0..per_class * classes).map(|i| i % classes).collect()
    }

    fn spec(family: Family, clients: usize) -> PartitionSpec {
        PartitionSpec {
            family,
            clients,
            seed: 11,
        }
    }

    fn assert_complete(shards: &[Shard], n: usize) {
        let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn large_lambda_balanced_is_near_uniform() {
        let y = labels(100, 4);
        let shards = partition(&y, 4, &spec(Family::DirichletBalanced { lambda: 1e6 }, 10)).unwrap();
        assert_complete(&shards, 400);
        for s in &shards {
            assert!(s.histogram.iter().all(|&n| n.abs_diff(10) <= 1), "{:?}", s.histogram);
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let y = labels(7, 3);
        for family in [
            Family::DirichletBalanced { lambda: 0.3 },
            Family::DirichletUnbalanced { lambda: 0.3 },
            Family::Pathological { labels_per_client: 3 },
        ] {
            let shards = partition(&y, 3, &spec(family, 1)).unwrap();
            assert_eq!(shards.len(), 1);
            assert_eq!(shards[0].len(), 21);
        }
    }

    #[test]
    fn balanced_remainder_goes_to_first_clients() {
        let y = labels(25, 4);
        let shards = partition(&y, 4, &spec(Family::DirichletBalanced { lambda: 0.3 }, 7)).unwrap();
        let sizes: Vec<usize> = shards.iter().map(Shard::len).collect();
        assert_eq!(sizes, vec![15, 15, 14, 14, 14, 14, 14]);
        assert_complete(&shards, 100);
    }

    #[test]
    fn pathological_two_labels() {
        let y = labels(60, 10);
        let shards = partition(&y, 10, &spec(Family::Pathological { labels_per_client: 2 }, 100)).unwrap();
        assert!(shards.iter().all(|s| s.distinct_labels() == 2));
        assert_complete(&shards, 600);
        let too_few = spec(Family::Pathological { labels_per_client: 2 }, 4);
        assert!(partition(&y, 10, &too_few).is_err());
    }

    #[test]
    fn export_round_trip_and_tamper_checks() {
        let y = labels(20, 3);
        let sp = spec(Family::DirichletUnbalanced { lambda: 1.0 }, 3);
        let shards = partition(&y, 3, &sp).unwrap();
        let json = shards_to_json(&shards, 3, Some(&sp)).unwrap();
        assert_eq!(shards_from_json(&json, &y).unwrap(), shards);
        let mut bad = shards.clone();
        let dup = bad[0].indices[0];
        bad[1].indices.push(dup);
        assert!(shards_from_json(&shards_to_json(&bad, 3, None).unwrap(), &y).is_err());
        let mut out = Vec::new();
        write_label_csv(&mut out, &shards).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("client,class,count\n"));
    }
}
