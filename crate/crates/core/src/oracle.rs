//! Brute-force permutation oracle, hit ratio and the greedy baseline.

use rayon::prelude::*;

use crate::datagen::{InteractionRecord, ItemFeatures};
use crate::error::{Error, Result};
use crate::evaluator::Evaluator;
use crate::reward::{list_reward, RewardConfig};

/// Default cap on the number of permutations the oracle will enumerate.
pub const DEFAULT_CAP: usize = 20_000;

/// `n! / (n − m)!`.
pub fn permutation_count(n: usize, m: usize) -> u128 {
    if m > n {
        return 0;
    }
    ((n - m + 1)..=n).map(|v| v as u128).product()
}

/// All ordered `m`-selections of `0..n` in lexicographic order.
#[derive(Clone, Debug)]
pub struct Permutations {
    n: usize,
    current: Option<Vec<usize>>,
    used: Vec<bool>,
    total: u128,
}

impl Permutations {
    pub fn total(&self) -> u128 {
        self.total
    }
}

pub fn enumerate_permutations(n: usize, m: usize) -> Result<Permutations> {
    if m < 1 || m > n {
        return Err(Error::Invalid(format!("cannot select {m} of {n} items")));
    }
    let mut used = vec![false; n];
    used[..m].iter_mut().for_each(|u| *u = true);
    Ok(Permutations {
        n,
        current: Some((0..m).collect()),
        used,
        total: permutation_count(n, m),
    })
}

impl Iterator for Permutations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let cur = self.current.as_mut().unwrap();
        let m = cur.len();
        // Rightmost slot that can take a larger unused value; refill the tail
        // with the smallest unused values.
        let mut advanced = false;
        for i in (0..m).rev() {
            self.used[cur[i]] = false;
            if let Some(v) = (cur[i] + 1..self.n).find(|&v| !self.used[v]) {
                cur[i] = v;
                self.used[v] = true;
                let mut next_free = 0;
                for slot in cur.iter_mut().skip(i + 1) {
                    while self.used[next_free] {
                        next_free += 1;
                    }
                    *slot = next_free;
                    self.used[next_free] = true;
                }
                advanced = true;
                break;
            }
        }
        if !advanced {
            self.current = None;
        }
        Some(out)
    }
}

/// Position of `perm` in the lexicographic enumeration of `m`-selections of `0..n`.
pub fn lex_index(perm: &[usize], n: usize) -> usize {
    let m = perm.len();
    let mut used = vec![false; n];
    let mut index = 0usize;
    for (i, &v) in perm.iter().enumerate() {
        let smaller_free = (0..v).filter(|&u| !used[u]).count();
        index += smaller_free * permutation_count(n - i - 1, m - i - 1) as usize;
        used[v] = true;
    }
    index
}

/// Rewards of every permutation of one candidate set, in lexicographic order.
#[derive(Clone, Debug)]
pub struct OracleRanking {
    pub n: usize,
    pub m: usize,
    pub rewards: Vec<f64>,
}

impl OracleRanking {
    pub fn from_rewards(n: usize, m: usize, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() as u128 != permutation_count(n, m) {
            return Err(Error::Invalid(format!(
                "expected {} rewards, got {}",
                permutation_count(n, m),
                rewards.len()
            )));
        }
        Ok(Self { n, m, rewards })
    }

    pub fn count(&self) -> usize {
        self.rewards.len()
    }

    /// 1-based rank by descending reward; ties go to the lexicographically
    /// earlier permutation.
    pub fn rank_of(&self, perm: &[usize]) -> usize {
        let q = lex_index(perm, self.n);
        let rq = self.rewards[q];
        1 + self
            .rewards
            .iter()
            .enumerate()
            .filter(|&(i, &r)| r > rq || (r == rq && i < q))
            .count()
    }

    /// Permutation (lexicographic index) holding rank 1.
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, &r) in self.rewards.iter().enumerate() {
            if r > self.rewards[best] {
                best = i;
            }
        }
        best
    }
}

/// Scores every `m`-permutation of `candidates` with the evaluator's shaped reward.
pub fn build_oracle(
    evaluator: &Evaluator,
    candidates: &[ItemFeatures],
    sessions: &[Vec<ItemFeatures>],
    reward: &RewardConfig,
    cap: usize,
) -> Result<OracleRanking> {
    let (n, m) = (candidates.len(), evaluator.dims.list_len);
    let count = permutation_count(n, m);
    if count > cap as u128 {
        return Err(Error::CapExceeded { n, m, count, cap });
    }
    let perms = enumerate_permutations(n, m)?;
    let lists: Vec<Vec<ItemFeatures>> = perms.map(|p| p.iter().map(|&i| candidates[i]).collect()).collect();
    let scores = evaluator.score_lists(&lists, sessions)?;
    let rewards = scores.iter().map(|s| list_reward(s, reward)).collect::<Result<Vec<_>>>()?;
    OracleRanking::from_rewards(n, m, rewards)
}

/// Oracle of every record, computed in parallel; output order follows `records`.
pub fn build_oracles(
    evaluator: &Evaluator,
    records: &[InteractionRecord],
    reward: &RewardConfig,
    cap: usize,
) -> Result<Vec<OracleRanking>> {
    records
        .par_iter()
        .map(|r| build_oracle(evaluator, &r.candidates, &r.session_features(), reward, cap))
        .collect()
}

/// `(rank, count)` of each list against its record's oracle.
pub fn rank_lists(oracles: &[OracleRanking], lists: &[Vec<usize>]) -> Vec<(usize, usize)> {
    oracles
        .iter()
        .zip(lists)
        .map(|(o, l)| (o.rank_of(l), o.count()))
        .collect()
}

/// Rank of `list` (candidate indices) among all permutations of `candidates`.
pub fn oracle_rank(
    list: &[usize],
    candidates: &[ItemFeatures],
    sessions: &[Vec<ItemFeatures>],
    evaluator: &Evaluator,
    reward: &RewardConfig,
    cap: usize,
) -> Result<usize> {
    Ok(build_oracle(evaluator, candidates, sessions, reward, cap)?.rank_of(list))
}

/// Whether `rank` lies within the top `pct` percent of `count` lists
/// (cutoff `floor(pct/100 · count)`, at least 1).
pub fn is_hit(rank: usize, count: usize, pct: f64) -> bool {
    let cutoff = ((pct * count as f64) / 100.0).floor().max(1.0) as usize;
    rank <= cutoff
}

/// Fraction of `(rank, count)` pairs that are hits at `pct` percent.
pub fn hit_ratio(ranks: &[(usize, usize)], pct: f64) -> f64 {
    assert!(pct > 0.0 && pct < 100.0, "pct must lie in (0, 100)");
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&(r, c)| is_hit(r, c, pct)).count() as f64 / ranks.len() as f64
}

/// Scores `initial` once and reorders its items by descending pCTR.
pub fn greedy_baseline(
    initial: &[usize],
    candidates: &[ItemFeatures],
    sessions: &[Vec<ItemFeatures>],
    evaluator: &Evaluator,
) -> Result<Vec<usize>> {
    let items: Vec<ItemFeatures> = initial.iter().map(|&i| candidates[i]).collect();
    let scores = evaluator.predict_list(&items, sessions)?;
    Ok(greedy_order(initial, &scores.pctr))
}

/// Stable sort of `initial` by descending `pctr`.
pub fn greedy_order(initial: &[usize], pctr: &[f64]) -> Vec<usize> {
    let mut slots: Vec<usize> = (0..initial.len()).collect();
    slots.sort_by(|&a, &b| pctr[b].total_cmp(&pctr[a]).then(a.cmp(&b)));
    slots.into_iter().map(|s| initial[s]).collect()
}
