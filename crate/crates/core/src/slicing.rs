//! Task-specific slices of the pool and the reward used to rank them.
//!
//! Examples are described by key phrases extracted with the selected
//! templates. Two examples are as close as their closest pair of key phrases,
//! and average-linkage agglomerative clustering cut at `K` clusters groups
//! them. Small clusters are folded into one outlier slice.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::lingo::{cosine_distance, Annotator, Embedder, LingoError};
use crate::templates::{match_template, Template};
use crate::textdiff::{KeyPhrase, KeyPhraseSource};

pub const OUTLIER_SLICE_ID: &str = "outlier";

#[derive(Debug, Error)]
pub enum SliceError {
    #[error("no unlabeled example left to sample")]
    EmptyPool,
    #[error(transparent)]
    Lingo(#[from] LingoError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub id: String,
    /// Pool order.
    pub member_ids: Vec<String>,
    /// Key phrase of the medoid member.
    pub key: String,
    pub is_outlier: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceStats {
    pub n: usize,
    pub m: usize,
    pub k: usize,
}

/// Slice priority. Never-sampled slices sit above every sampled one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reward {
    Unexplored,
    Explored(f64),
}

impl Serialize for Reward {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Reward::Unexplored => s.serialize_str("unexplored"),
            Reward::Explored(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Reward {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Value(f64),
            Label(String),
        }
        match Repr::deserialize(d)? {
            Repr::Value(v) => Ok(Reward::Explored(v)),
            Repr::Label(l) if l == "unexplored" => Ok(Reward::Unexplored),
            Repr::Label(l) => Err(serde::de::Error::custom(format!("bad reward {l:?}"))),
        }
    }
}

impl fmt::Display for Reward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reward::Unexplored => write!(f, "unexplored"),
            Reward::Explored(v) => write!(f, "{v:.4}"),
        }
    }
}

/// One row of the slice table shown next to a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub slice_id: String,
    pub key: String,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub reward: Reward,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub example_id: String,
    pub slice_id: String,
}

/// Key phrases of every input: all template matches, or the full sentence
/// when nothing matches.
pub fn assign_key_phrases<'a>(
    inputs: impl IntoIterator<Item = (&'a str, &'a str)>,
    templates: &[Template],
    annotator: &dyn Annotator,
) -> Result<IndexMap<String, Vec<KeyPhrase>>, LingoError> {
    let mut out = IndexMap::new();
    for (id, input) in inputs {
        let ann = annotator.annotate(input)?;
        let mut spans: Vec<std::ops::Range<usize>> = templates
            .iter()
            .flat_map(|t| match_template(&t.slots, &ann))
            .collect();
        spans.sort_by_key(|r| (r.start, r.end));
        spans.dedup();
        let phrases = if spans.is_empty() {
            vec![KeyPhrase::full_sentence(&ann.tokens)]
        } else {
            spans
                .into_iter()
                .map(|span| KeyPhrase {
                    text: ann.tokens.span_text(span.clone()).to_string(),
                    token_span: span,
                    source: KeyPhraseSource::UnmodifiedPart,
                })
                .collect()
        };
        out.insert(id.to_string(), phrases);
    }
    Ok(out)
}

/// Pairwise example distances: the minimum cosine distance between any key
/// phrase of one example and any key phrase of the other.
pub fn example_distances(
    key_phrases: &IndexMap<String, Vec<KeyPhrase>>,
    embedder: &dyn Embedder,
) -> Result<Vec<Vec<f64>>, LingoError> {
    let mut phrase_ids: BTreeMap<&str, usize> = BTreeMap::new();
    let mut texts: Vec<&str> = Vec::new();
    let per_example: Vec<Vec<usize>> = key_phrases
        .values()
        .map(|kps| {
            kps.iter()
                .map(|kp| {
                    *phrase_ids.entry(kp.text.as_str()).or_insert_with(|| {
                        texts.push(kp.text.as_str());
                        texts.len() - 1
                    })
                })
                .collect()
        })
        .collect();
    let embeddings = embedder.embed_batch(&texts)?;
    let u = texts.len();
    let mut phrase_dist = vec![0.0; u * u];
    for a in 0..u {
        for b in a + 1..u {
            let d = cosine_distance(&embeddings[a], &embeddings[b])?;
            phrase_dist[a * u + b] = d;
            phrase_dist[b * u + a] = d;
        }
    }
    let n = per_example.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let mut best = f64::INFINITY;
            for &p in &per_example[i] {
                for &q in &per_example[j] {
                    best = best.min(phrase_dist[p * u + q]);
                }
            }
            if !best.is_finite() {
                best = 1.0;
            }
            dist[i][j] = best;
            dist[j][i] = best;
        }
    }
    Ok(dist)
}

/// A merge of two clusters, identified by one member of each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Average-linkage merges via the nearest-neighbor chain algorithm, sorted by
/// height (stable).
pub fn average_linkage(dist: &[Vec<f64>]) -> Vec<Merge> {
    let n = dist.len();
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    for _ in 1..n {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).unwrap());
        }
        let (a, b) = loop {
            let a = *chain.last().unwrap();
            let prev = chain.len().checked_sub(2).map(|k| chain[k]);
            let mut best = prev;
            let mut best_d = prev.map_or(f64::INFINITY, |p| d[a][p]);
            for c in 0..n {
                if c != a && active[c] && d[a][c] < best_d {
                    best = Some(c);
                    best_d = d[a][c];
                }
            }
            let b = best.expect("at least two active clusters");
            if Some(b) == prev {
                break (a, b);
            }
            chain.push(b);
        };
        chain.truncate(chain.len() - 2);
        merges.push(Merge {
            a,
            b,
            height: d[a][b],
        });

        let (keep, drop) = (a.min(b), a.max(b));
        let (sk, sd) = (size[keep] as f64, size[drop] as f64);
        for c in 0..n {
            if active[c] && c != keep && c != drop {
                let v = (sk * d[keep][c] + sd * d[drop][c]) / (sk + sd);
                d[keep][c] = v;
                d[c][keep] = v;
            }
        }
        active[drop] = false;
        size[keep] += size[drop];
    }
    merges.sort_by(|x, y| x.height.total_cmp(&y.height));
    merges
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut cur = x;
        while self.0[cur] != root {
            let next = self.0[cur];
            self.0[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Flat clusters after applying the lowest `n - k` merges; each cluster is a
/// sorted list of indices, clusters ordered by size desc then first index.
pub fn cut_clusters(n: usize, merges: &[Merge], k: usize) -> Vec<Vec<usize>> {
    let k = k.clamp(1.min(n), n);
    let mut uf = UnionFind((0..n).collect());
    for m in merges.iter().take(n - k) {
        uf.union(m.a, m.b);
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups.entry(uf.find(i)).or_default().push(i);
    }
    let mut clusters: Vec<Vec<usize>> = groups.into_values().collect();
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    clusters
}

/// Clusters examples into slices: average linkage cut at `min(k, n)`
/// clusters, then every cluster smaller than `min_size` goes into a single
/// outlier slice.
pub fn cluster(
    key_phrases: &IndexMap<String, Vec<KeyPhrase>>,
    embedder: &dyn Embedder,
    k: usize,
    min_size: usize,
) -> Result<Vec<Slice>, LingoError> {
    let dist = example_distances(key_phrases, embedder)?;
    Ok(slices_from_distances(key_phrases, &dist, k, min_size))
}

pub fn slices_from_distances(
    key_phrases: &IndexMap<String, Vec<KeyPhrase>>,
    dist: &[Vec<f64>],
    k: usize,
    min_size: usize,
) -> Vec<Slice> {
    let n = key_phrases.len();
    if n == 0 {
        return Vec::new();
    }
    let merges = average_linkage(dist);
    let clusters = cut_clusters(n, &merges, k.min(n));

    let (regular, small): (Vec<_>, Vec<_>) =
        clusters.into_iter().partition(|c| c.len() >= min_size);
    let mut outlier: Vec<usize> = small.into_iter().flatten().collect();
    outlier.sort_unstable();

    let make = |id: String, members: &[usize], is_outlier: bool| {
        let medoid = members
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let sa: f64 = members.iter().map(|&o| dist[a][o]).sum();
                let sb: f64 = members.iter().map(|&o| dist[b][o]).sum();
                sa.total_cmp(&sb).then(a.cmp(&b))
            })
            .unwrap();
        let key = key_phrases[medoid]
            .first()
            .map(|kp| kp.text.clone())
            .unwrap_or_default();
        Slice {
            id,
            member_ids: members
                .iter()
                .map(|&i| key_phrases.get_index(i).unwrap().0.clone())
                .collect(),
            key,
            is_outlier,
        }
    };

    let mut slices: Vec<Slice> = regular
        .iter()
        .enumerate()
        .map(|(idx, members)| make(format!("s{idx}"), members, false))
        .collect();
    if !outlier.is_empty() {
        slices.push(make(OUTLIER_SLICE_ID.to_string(), &outlier, true));
    }
    slices
}

/// `m` counts members with a correctness verdict, `k` the correct ones.
pub fn slice_stats(slice: &Slice, verdicts: &HashMap<String, bool>) -> SliceStats {
    let mut stats = SliceStats {
        n: slice.member_ids.len(),
        m: 0,
        k: 0,
    };
    for id in &slice.member_ids {
        if let Some(&correct) = verdicts.get(id) {
            stats.m += 1;
            stats.k += usize::from(correct);
        }
    }
    stats
}

/// `(1 - k/m) ln n + sqrt(ln i / m)`, or the unexplored tier when `m == 0`.
pub fn reward(stats: SliceStats, iteration: u32) -> Reward {
    if stats.m == 0 {
        return Reward::Unexplored;
    }
    let m = stats.m as f64;
    let error_rate = 1.0 - stats.k as f64 / m;
    let size = (stats.n.max(1) as f64).ln();
    let rarity = (f64::from(iteration.max(1)).ln() / m).sqrt();
    Reward::Explored(error_rate * size + rarity)
}

/// Descending priority: unexplored slices first (larger first), then by reward.
pub fn compare_priority(a: (Reward, SliceStats), b: (Reward, SliceStats)) -> Ordering {
    match (a.0, b.0) {
        (Reward::Unexplored, Reward::Unexplored) => b.1.n.cmp(&a.1.n),
        (Reward::Unexplored, Reward::Explored(_)) => Ordering::Less,
        (Reward::Explored(_), Reward::Unexplored) => Ordering::Greater,
        (Reward::Explored(x), Reward::Explored(y)) => y.total_cmp(&x),
    }
}

/// Slice indices ranked by priority; equal priorities keep slice order.
pub fn rank_slices(stats: &[SliceStats], iteration: u32) -> Vec<usize> {
    let rewards: Vec<Reward> = stats.iter().map(|s| reward(*s, iteration)).collect();
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| compare_priority((rewards[a], stats[a]), (rewards[b], stats[b])));
    order
}

/// Walks the ranked slices repeatedly, drawing one uniformly random eligible
/// member per slice per pass, until `batch_size` candidates are drawn or no
/// slice has an eligible member left.
pub fn sample_batch<R: Rng + ?Sized>(
    slices: &[Slice],
    stats: &[SliceStats],
    iteration: u32,
    batch_size: usize,
    eligible: impl Fn(&str) -> bool,
    rng: &mut R,
) -> Result<Vec<Candidate>, SliceError> {
    let order = rank_slices(stats, iteration);
    let mut remaining: Vec<Vec<&str>> = slices
        .iter()
        .map(|s| {
            s.member_ids
                .iter()
                .map(String::as_str)
                .filter(|id| eligible(id))
                .collect()
        })
        .collect();
    let mut batch = Vec::with_capacity(batch_size);
    'passes: loop {
        let mut drew = false;
        for &s in &order {
            if batch.len() >= batch_size {
                break 'passes;
            }
            let pool = &mut remaining[s];
            if pool.is_empty() {
                continue;
            }
            let pick = *pool.choose(rng).unwrap();
            pool.retain(|id| *id != pick);
            batch.push(Candidate {
                example_id: pick.to_string(),
                slice_id: slices[s].id.clone(),
            });
            drew = true;
        }
        if !drew {
            break;
        }
    }
    if batch.is_empty() {
        return Err(SliceError::EmptyPool);
    }
    Ok(batch)
}

pub fn slice_table(slices: &[Slice], stats: &[SliceStats], iteration: u32) -> Vec<SliceRow> {
    rank_slices(stats, iteration)
        .into_iter()
        .map(|i| SliceRow {
            slice_id: slices[i].id.clone(),
            key: slices[i].key.clone(),
            n: stats[i].n,
            m: stats[i].m,
            k: stats[i].k,
            reward: reward(stats[i], iteration),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lingo::{DefaultAnnotator, HashedNgramEmbedder, Pos};
    use crate::templates::Slot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phrases(texts: &[&str]) -> IndexMap<String, Vec<KeyPhrase>> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                (
                    format!("e{i}"),
                    vec![KeyPhrase {
                        text: t.to_string(),
                        token_span: 0..1,
                        source: KeyPhraseSource::FullSentence,
                    }],
                )
            })
            .collect()
    }

    fn slice(id: &str, n: usize) -> Slice {
        Slice {
            id: id.into(),
            member_ids: (0..n).map(|i| format!("{id}-{i}")).collect(),
            key: id.into(),
            is_outlier: false,
        }
    }

    #[test]
    fn assign_uses_templates_or_full_sentence() {
        let t = Template {
            slots: vec![Slot::Pos(Pos::PROPN)],
            sparsity: 4.0,
            covered: [0].into(),
            distinct_sources: 1,
        };
        let inputs = [
            ("a", "@virreedom Merry Christmas!"),
            ("b", "i love pizza"),
        ];
        let kps = assign_key_phrases(inputs, &[t], &DefaultAnnotator).unwrap();
        assert_eq!(kps["a"][0].text, "Christmas");
        assert_eq!(kps["b"][0].source, KeyPhraseSource::FullSentence);
        assert_eq!(kps["b"][0].text, "i love pizza");

        let empty = assign_key_phrases(std::iter::empty(), &[], &DefaultAnnotator).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn planted_groups_are_recovered() {
        let mut texts = vec!["today"; 30];
        texts.extend(vec!["Christmas"; 30]);
        let kps = phrases(&texts);
        let slices = cluster(&kps, &HashedNgramEmbedder, 2, 10).unwrap();
        assert_eq!(slices.len(), 2);
        for s in &slices {
            assert_eq!(s.member_ids.len(), 30);
            let first: usize = s.member_ids[0][1..].parse().unwrap();
            let expect = if first < 30 { "today" } else { "Christmas" };
            assert_eq!(s.key, expect);
            assert!(s.member_ids.iter().all(|id| {
                let i: usize = id[1..].parse().unwrap();
                (i < 30) == (first < 30)
            }));
        }
    }

    #[test]
    fn small_clusters_become_one_outlier_slice() {
        let names: Vec<String> = (0..25).map(|g| format!("group{g:02}xyz{}", g * 7919)).collect();
        let texts: Vec<&str> = names
            .iter()
            .flat_map(|n| std::iter::repeat_n(n.as_str(), 8))
            .collect();
        let kps = phrases(&texts);
        let slices = cluster(&kps, &HashedNgramEmbedder, 25, 10).unwrap();
        assert_eq!(slices.len(), 1);
        assert!(slices[0].is_outlier);
        assert_eq!(slices[0].member_ids.len(), 200);

        let slices = cluster(&phrases(&["a", "b", "c"]), &HashedNgramEmbedder, 20, 10).unwrap();
        assert_eq!(slices.len(), 1);
        assert_eq!(slices[0].id, OUTLIER_SLICE_ID);
        assert_eq!(slices[0].member_ids.len(), 3);
    }

    #[test]
    fn stats_follow_verdicts() {
        let s = slice("s", 5);
        assert_eq!(
            slice_stats(&s, &HashMap::new()),
            SliceStats { n: 5, m: 0, k: 0 }
        );
        let verdicts: HashMap<String, bool> = [("s-0", false), ("s-1", false)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(slice_stats(&s, &verdicts), SliceStats { n: 5, m: 2, k: 0 });
        let verdicts: HashMap<String, bool> = [("s-0", true), ("s-1", false), ("s-2", true)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(slice_stats(&s, &verdicts), SliceStats { n: 5, m: 3, k: 2 });
    }

    #[test]
    fn reward_examples() {
        let Reward::Explored(v) = reward(SliceStats { n: 19, m: 2, k: 0 }, 5) else {
            panic!("explored slice");
        };
        assert!((v - 3.841_500_268_163_491).abs() < 1e-12);
        assert_eq!(reward(SliceStats { n: 40, m: 3, k: 3 }, 1), Reward::Explored(0.0));
        assert_eq!(reward(SliceStats { n: 449, m: 0, k: 0 }, 7), Reward::Unexplored);
    }

    #[test]
    fn reward_serializes_as_number_or_label() {
        assert_eq!(serde_json::to_string(&Reward::Unexplored).unwrap(), "\"unexplored\"");
        assert_eq!(serde_json::to_string(&Reward::Explored(1.5)).unwrap(), "1.5");
        let back: Reward = serde_json::from_str("\"unexplored\"").unwrap();
        assert_eq!(back, Reward::Unexplored);
        assert!(serde_json::from_str::<Reward>("\"bogus\"").is_err());
    }

    #[test]
    fn batch_takes_one_per_slice() {
        let slices: Vec<Slice> = (0..6).map(|i| slice(&format!("s{i}"), 4)).collect();
        let mut stats: Vec<SliceStats> = slices
            .iter()
            .map(|s| SliceStats {
                n: s.member_ids.len(),
                m: 0,
                k: 0,
            })
            .collect();
        // s5 is explored and solved: lowest priority.
        stats[5] = SliceStats { n: 4, m: 2, k: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&slices, &stats, 3, 5, |_| true, &mut rng).unwrap();
        let got: Vec<&str> = batch.iter().map(|c| c.slice_id.as_str()).collect();
        assert_eq!(got, ["s0", "s1", "s2", "s3", "s4"]);
    }

    #[test]
    fn batch_cycles_over_few_slices() {
        let slices = vec![slice("big", 10), slice("small", 3)];
        let stats = vec![
            SliceStats { n: 10, m: 0, k: 0 },
            SliceStats { n: 3, m: 0, k: 0 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_batch(&slices, &stats, 1, 5, |_| true, &mut rng).unwrap();
        let got: Vec<&str> = batch.iter().map(|c| c.slice_id.as_str()).collect();
        assert_eq!(got, ["big", "small", "big", "small", "big"]);
        let mut ids: Vec<&str> = batch.iter().map(|c| c.example_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 5);
    }

    #[test]
    fn exhausted_pool_is_an_error() {
        let slices = vec![slice("s", 3)];
        let stats = vec![SliceStats { n: 3, m: 3, k: 3 }];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            sample_batch(&slices, &stats, 2, 5, |_| false, &mut rng),
            Err(SliceError::EmptyPool)
        ));
        let batch = sample_batch(&slices, &stats, 2, 5, |id| id != "s-1", &mut rng).unwrap();
        assert_eq!(batch.len(), 2);
    }
}
