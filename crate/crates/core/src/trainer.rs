//! Neighbor-list training of the generator against a frozen evaluator.
//!
//! For every training list we build single-edit neighbors, score them with the
//! evaluator, and push the generator's position and candidate distributions
//! toward the edits that raised the list reward.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{InteractionRecord, ItemFeatures};
use crate::diffcore::{AdamState, Graph, NodeId, RngStream, Tensor};
use crate::error::{Error, Result};
use crate::evaluator::{Bind, Evaluator};
use crate::generator::{gumbel_noise, gumbel_sample, EditMode, Generator, GumbelConfig};
use crate::oracle::{self, OracleRanking};
use crate::reward::{list_reward, relative_rewards, RewardConfig};

/// One single-edit variant of the origin list.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub position: usize,
    /// Candidate index placed at `position`.
    pub k: usize,
    pub list: Vec<usize>,
    pub reward: f64,
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub origin: Vec<usize>,
    pub origin_reward: f64,
    pub neighbors: Vec<Neighbor>,
}

/// Positions to sample and how many draws each gets. `beta >= 1` draws
/// `beta` replacements at every slot; `beta < 1` picks `max(1, round(beta·m))`
/// slots at random and draws once at each.
pub fn sample_positions(m: usize, beta: f64, rng: &mut RngStream) -> Vec<(usize, usize)> {
    if beta >= 1.0 {
        (0..m).map(|j| (j, beta.round() as usize)).collect()
    } else {
        let take = ((beta * m as f64).round() as usize).clamp(1, m);
        let mut slots: Vec<usize> = (0..m).collect();
        slots.shuffle(rng);
        let mut picked = slots[..take].to_vec();
        picked.sort_unstable();
        picked.into_iter().map(|j| (j, 1)).collect()
    }
}

/// Unscored neighbors of `origin` as `(position, k, list)`. In replace mode
/// replacements come from candidates not in `origin`; in swap mode (every
/// candidate already shown) from the other slots of `origin`. Draws at one
/// position avoid repeats until the pool is exhausted.
pub fn build_neighbors(origin: &[usize], n: usize, beta: f64, rng: &mut RngStream) -> Result<Vec<(usize, usize, Vec<usize>)>> {
    let m = origin.len();
    let mode = EditMode::for_sizes(n, m);
    let outside: Vec<usize> = (0..n).filter(|k| !origin.contains(k)).collect();
    if mode == EditMode::Replace && outside.is_empty() {
        return Err(Error::PoolTooSmall);
    }
    if mode == EditMode::Swap && m < 2 {
        return Err(Error::PoolTooSmall);
    }
    let mut out = Vec::new();
    for (j, draws) in sample_positions(m, beta, rng) {
        let pool: Vec<usize> = match mode {
            EditMode::Replace => outside.clone(),
            EditMode::Swap => origin.iter().copied().filter(|&k| k != origin[j]).collect(),
        };
        let mut bag: Vec<usize> = Vec::new();
        for _ in 0..draws {
            if bag.is_empty() {
                bag = pool.clone();
                bag.shuffle(rng);
            }
            let k = bag.pop().expect("nonempty pool");
            let mut list = origin.to_vec();
            crate::generator::apply_edit(&mut list, j, k);
            out.push((j, k, list));
        }
    }
    Ok(out)
}

/// Number of positions at which two lists differ.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Mean raw utility of the exposed training lists, used as the reward scale.
pub fn fit_reward_scale(ev: &Evaluator, records: &[InteractionRecord], cfg: &RewardConfig) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("cannot fit the reward scale on an empty set".into()));
    }
    let scores = ev.predict_records(records)?;
    let mean = scores.iter().map(|s| cfg.raw_utility(s)).sum::<f64>() / scores.len() as f64;
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::NonFiniteReward(mean));
    }
    Ok(mean)
}

/// `-Σ_j rp_j Σ_k rc_{j,k} r_{j,k}` over sampled `(j, k, r)` triples.
pub fn loss_g1_value(rp: &[f64], rc: &[Vec<f64>], samples: &[(usize, usize, f64)]) -> f64 {
    -samples.iter().map(|&(j, k, r)| rp[j] * rc[j][k] * r).sum::<f64>()
}

/// Negatives clamped to zero, then scaled to sum to one. `None` when
/// nothing positive remains.
pub fn norm_rewards(r: &[f64]) -> Option<Vec<f64>> {
    let clamped: Vec<f64> = r.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    (total > 0.0).then(|| clamped.iter().map(|v| v / total).collect())
}

/// `-Σ_j Norm(r)_j log rp_j`, zero when no position reward is positive.
pub fn loss_g2_value(r: &[f64], rp: &[f64]) -> f64 {
    match norm_rewards(r) {
        None => 0.0,
        Some(w) => -w.iter().zip(rp).filter(|(w, _)| **w > 0.0).map(|(w, p)| w * p.ln()).sum::<f64>(),
    }
}

/// Graph form of L1 summed over the batch: `rp [B, m]`, `rc [B, m, n]`,
/// `rewards [B, m, n]` holding the summed reward of each sampled pair.
pub fn loss_g1(g: &mut Graph, rp: NodeId, rc: NodeId, rewards: Tensor) -> Result<NodeId> {
    let r = g.constant(rewards);
    let weighted = g.mul(rc, r)?;
    let per_slot = g.reduce_sum(weighted, 2)?;
    let total = g.mul(rp, per_slot)?;
    let total = g.sum_all(total);
    Ok(g.scale(total, -1.0))
}

/// Graph form of L2 summed over the batch. `weights [B, m]` holds the
/// normalized position rewards; zero-weight slots are left out so their
/// probabilities never reach the logarithm.
pub fn loss_g2(g: &mut Graph, rp: NodeId, weights: &[f64]) -> Result<Option<NodeId>> {
    let idx: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let flat = g.reshape(rp, &[weights.len(), 1])?;
    let picked = g.embed_lookup(flat, &idx, &[idx.len()])?;
    let picked = g.reshape(picked, &[idx.len()])?;
    let logp = g.log(picked);
    let w = g.constant(Tensor::vector(idx.iter().map(|&i| weights[i]).collect()));
    let prod = g.mul(logp, w)?;
    let total = g.sum_all(prod);
    Ok(Some(g.scale(total, -1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Gumbel noise on the training distributions.
    pub noise: bool,
    /// `false` trains on raw neighbor rewards instead of rewards relative to the origin.
    pub relative_reward: bool,
    /// Divide each batch's L1 rewards by their root mean square.
    pub normalize_rewards: bool,
    /// Test records used for the per-epoch HR@10% column; 0 disables it.
    pub validation_records: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 1.0,
            lr: 0.003,
            batch_size: 64,
            epochs: 20,
            tau_start: 1.0,
            tau_end: 1.0,
            noise: false,
            relative_reward: true,
            normalize_rewards: true,
            validation_records: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("generator.alpha", "must be non-negative"));
        }
        let beta_ok = self.beta > 0.0 && (self.beta < 1.0 || self.beta.fract() == 0.0);
        if !beta_ok {
            return Err(Error::config("generator.beta", "must be an integer >= 1 or a fraction in (0, 1)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("generator.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("generator.batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("generator.epochs", "must be positive"));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::config("generator.tau_start", "temperatures must be positive"));
        }
        Ok(())
    }

    /// Linear anneal from `tau_start` to `tau_end` across epochs.
    pub fn tau(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.tau_end;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenEpoch {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub hr10: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenHistory {
    pub rows: Vec<GenEpoch>,
}

impl GenHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l1,l2,total,hr10\n");
        for r in &self.rows {
            let hr = r.hr10.map_or(String::new(), |v| format!("{v:.6}"));
            out.push_str(&format!("{},{:.6},{:.6},{:.6},{hr}\n", r.epoch, r.l1, r.l2, r.total));
        }
        out
    }
}

/// Scored neighbors of one record and the loss targets derived from them.
#[derive(Clone, Debug)]
pub struct RecordTargets {
    pub set: NeighborSet,
    /// `(j, k, r)` with `r` the relative (or raw) neighbor reward.
    pub samples: Vec<(usize, usize, f64)>,
    /// Mean reward of each slot's draws; unsampled slots hold 0.
    pub position_rewards: Vec<f64>,
}

/// Builds and scores the neighbors of a batch of records in one evaluator pass.
pub fn record_targets(
    ev: &Evaluator,
    batch: &[&InteractionRecord],
    reward: &RewardConfig,
    cfg: &TrainConfig,
    rngs: &mut [RngStream],
) -> Result<Vec<RecordTargets>> {
    let m = ev.dims.list_len;
    let mut raw = Vec::with_capacity(batch.len());
    let mut lists: Vec<Vec<ItemFeatures>> = Vec::new();
    let mut owners: Vec<usize> = Vec::new();
    let mut origins = Vec::with_capacity(batch.len());
    for (b, (rec, rng)) in batch.iter().zip(rngs.iter_mut()).enumerate() {
        let origin = rec.exposed.clone();
        let nb = build_neighbors(&origin, rec.candidates.len(), cfg.beta, rng)?;
        lists.push(origin.iter().map(|&i| rec.candidates[i]).collect());
        owners.push(b);
        for (_, _, l) in &nb {
            lists.push(l.iter().map(|&i| rec.candidates[i]).collect());
            owners.push(b);
        }
        raw.push(nb);
        origins.push(origin);
    }
    let sessions: Vec<Vec<Vec<ItemFeatures>>> = batch.iter().map(|r| r.session_features()).collect();
    let sess_refs: Vec<&[Vec<ItemFeatures>]> = sessions.iter().map(Vec::as_slice).collect();
    let list_refs: Vec<&[ItemFeatures]> = lists.iter().map(Vec::as_slice).collect();
    let scores = ev.score_batch(&list_refs, &owners, &sess_refs)?;
    let rewards = scores.iter().map(|s| list_reward(s, reward)).collect::<Result<Vec<_>>>()?;

    let mut out = Vec::with_capacity(batch.len());
    let mut cursor = 0;
    for (origin, nb) in origins.into_iter().zip(raw) {
        let origin_reward = rewards[cursor];
        let nb_rewards = &rewards[cursor + 1..cursor + 1 + nb.len()];
        cursor += 1 + nb.len();
        let rel = relative_rewards(nb_rewards, origin_reward);
        let signal = if cfg.relative_reward { &rel } else { nb_rewards };
        let mut sums = vec![0.0; m];
        let mut counts = vec![0usize; m];
        let mut samples = Vec::with_capacity(nb.len());
        let mut neighbors = Vec::with_capacity(nb.len());
        for (i, (j, k, list)) in nb.into_iter().enumerate() {
            samples.push((j, k, signal[i]));
            sums[j] += signal[i];
            counts[j] += 1;
            neighbors.push(Neighbor {
                position: j,
                k,
                list,
                reward: nb_rewards[i],
                relative: rel[i],
            });
        }
        let position_rewards = sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
        out.push(RecordTargets {
            set: NeighborSet {
                origin,
                origin_reward,
                neighbors,
            },
            samples,
            position_rewards,
        });
    }
    Ok(out)
}

/// Rescales the L1 rewards of a batch to unit root mean square. Position
/// rewards are left alone since L2 normalizes them anyway.
pub fn normalize_batch(targets: &mut [RecordTargets]) {
    let (sum, count) = targets
        .iter()
        .flat_map(|t| t.samples.iter())
        .fold((0.0, 0usize), |(s, c), &(_, _, r)| (s + r * r, c + 1));
    if count == 0 || sum <= 0.0 {
        return;
    }
    let rms = (sum / count as f64).sqrt();
    for t in targets.iter_mut() {
        for sample in &mut t.samples {
            sample.2 /= rms;
        }
    }
}

/// Loss nodes of one batch; `total` is `(L1 + α·L2) / B`.
pub struct BatchLoss {
    pub total: NodeId,
    pub l1: f64,
    pub l2: f64,
}

/// Generator loss over a batch with precomputed targets.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    g: &mut Graph,
    gen: &Generator,
    ev: &Evaluator,
    batch: &[&InteractionRecord],
    targets: &[RecordTargets],
    alpha: f64,
    tau: f64,
    noise: Option<&mut [RngStream]>,
) -> Result<BatchLoss> {
    let (b, m, n) = (batch.len(), gen.dims.list_len, gen.num_candidates);
    let list_refs: Vec<&[usize]> = targets.iter().map(|t| t.set.origin.as_slice()).collect();
    let cand_refs: Vec<&[ItemFeatures]> = batch.iter().map(|r| r.candidates.as_slice()).collect();
    let sessions: Vec<Vec<Vec<ItemFeatures>>> = batch.iter().map(|r| r.session_features()).collect();
    let sess_refs: Vec<&[Vec<ItemFeatures>]> = sessions.iter().map(Vec::as_slice).collect();
    let e_u = ev.encode_sessions(g, &sess_refs, Bind::Frozen)?;
    let logits = gen.forward(g, ev, &list_refs, &cand_refs, e_u, Bind::Train)?;

    let mut mask = Vec::with_capacity(b * m * n);
    for t in targets {
        mask.extend(gen.candidate_mask(&t.set.origin));
    }
    let mask = g.constant(Tensor::new(vec![b, m, n], mask)?);
    let mut z_p = logits.pdu;
    let mut z_c = g.add(logits.cru, mask)?;
    if let Some(rngs) = noise {
        let mut np = Vec::with_capacity(b * m);
        let mut nc = Vec::with_capacity(b * m * n);
        for rng in rngs.iter_mut() {
            np.extend(gumbel_noise(rng, m));
            nc.extend(gumbel_noise(rng, m * n));
        }
        let np = g.constant(Tensor::new(vec![b, m], np)?);
        let nc = g.constant(Tensor::new(vec![b, m, n], nc)?);
        z_p = g.add(z_p, np)?;
        z_c = g.add(z_c, nc)?;
    }
    let (rp, _) = gumbel_sample(g, z_p, tau, None)?;
    let (rc, _) = gumbel_sample(g, z_c, tau, None)?;

    let mut r = vec![0.0; b * m * n];
    let mut w = vec![0.0; b * m];
    for (bi, t) in targets.iter().enumerate() {
        for &(j, k, v) in &t.samples {
            r[(bi * m + j) * n + k] += v;
        }
        if let Some(norm) = norm_rewards(&t.position_rewards) {
            w[bi * m..(bi + 1) * m].copy_from_slice(&norm);
        }
    }
    let l1 = loss_g1(g, rp, rc, Tensor::new(vec![b, m, n], r)?)?;
    let l1_value = g.value(l1).item();
    let mut total = l1;
    let mut l2_value = 0.0;
    if let Some(l2) = loss_g2(g, rp, &w)? {
        l2_value = g.value(l2).item();
        if alpha > 0.0 {
            let scaled = g.scale(l2, alpha);
            total = g.add(total, scaled)?;
        }
    }
    let inv_b = 1.0 / b as f64;
    Ok(BatchLoss {
        total: g.scale(total, inv_b),
        l1: l1_value * inv_b,
        l2: l2_value * inv_b,
    })
}

/// Deterministic generation over records, in parallel.
pub fn generate_all(gen: &Generator, ev: &Evaluator, records: &[InteractionRecord], cfg: &GumbelConfig) -> Result<Vec<Vec<usize>>> {
    use rayon::prelude::*;
    records
        .par_iter()
        .map(|r| gen.generate(ev, &r.exposed, &r.candidates, &r.session_features(), cfg, None).map(|(l, _)| l))
        .collect()
}

/// HR@pct of the generator on records whose oracles are given.
pub fn generator_hit_ratio(
    gen: &Generator,
    ev: &Evaluator,
    records: &[InteractionRecord],
    oracles: &[OracleRanking],
    cfg: &GumbelConfig,
    pct: f64,
) -> Result<f64> {
    let lists = generate_all(gen, ev, records, cfg)?;
    Ok(oracle::hit_ratio(&oracle::rank_lists(oracles, &lists), pct))
}

/// Trains generator-owned parameters with Adam; evaluator parameters stay
/// frozen and are checked bit-for-bit afterwards.
#[allow(clippy::too_many_arguments)]
pub fn train_generator(
    ev: &Evaluator,
    train: &[InteractionRecord],
    validation: &[InteractionRecord],
    reward: &RewardConfig,
    cfg: &TrainConfig,
    gen_cfg: &GumbelConfig,
    model_seed: u64,
    seed: u64,
) -> Result<(Generator, GenHistory)> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| Error::Invalid("generator training needs records".into()))?;
    let n = first.candidates.len();
    let mut gen = Generator::new(&ev.model, &ev.dims, n, model_seed)?;
    let frozen_before = ev.params.clone();
    let mut adam = AdamState::default();
    let mut history = GenHistory::default();
    let root = RngStream::new(seed);
    let validation = &validation[..cfg.validation_records.min(validation.len())];
    let oracles = if validation.is_empty() {
        Vec::new()
    } else {
        oracle::build_oracles(ev, validation, reward, oracle::DEFAULT_CAP)?
    };

    for epoch in 0..cfg.epochs {
        let tau = cfg.tau(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut root.derive("generator-shuffle", epoch as u64));
        let (mut l1_sum, mut l2_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&InteractionRecord> = idx.iter().map(|&i| &train[i]).collect();
            let key = |label: &str, i: usize| root.derive(label, (epoch * train.len() + i) as u64);
            let mut nb_rngs: Vec<RngStream> = idx.iter().map(|&i| key("neighbors", i)).collect();
            let mut targets = record_targets(ev, &batch, reward, cfg, &mut nb_rngs)?;
            if cfg.normalize_rewards {
                normalize_batch(&mut targets);
            }
            let mut noise_rngs: Vec<RngStream> = idx.iter().map(|&i| key("gumbel", i)).collect();
            let mut g = Graph::new();
            let noise = cfg.noise.then_some(noise_rngs.as_mut_slice());
            let loss = batch_loss(&mut g, &gen, ev, &batch, &targets, cfg.alpha, tau, noise)?;
            let value = g.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: value,
                });
            }
            let w = batch.len() as f64;
            l1_sum += loss.l1 * w;
            l2_sum += loss.l2 * w;
            total_sum += value * w;
            g.backward(loss.total)?;
            adam.step(&mut gen.params, &g.param_grads(), cfg.lr)?;
        }
        let count = train.len() as f64;
        let hr10 = if oracles.is_empty() {
            None
        } else {
            Some(generator_hit_ratio(&gen, ev, validation, &oracles, gen_cfg, 10.0)?)
        };
        log::info!(
            "generator epoch {epoch}: tau {tau:.3} L1 {:.5} L2 {:.5} total {:.5} hr10 {:?}",
            l1_sum / count,
            l2_sum / count,
            total_sum / count,
            hr10
        );
        history.rows.push(GenEpoch {
            epoch,
            l1: l1_sum / count,
            l2: l2_sum / count,
            total: total_sum / count,
            hr10,
        });
    }
    let unchanged = frozen_before
        .iter()
        .zip(ev.params.iter())
        .all(|((na, a), (nb, b))| na == nb && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    if !unchanged {
        return Err(Error::Invalid("evaluator parameters changed during generator training".into()));
    }
    Ok((gen, history))
}

/// A uniformly random `m`-permutation of `0..n`.
pub fn random_list(n: usize, m: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    all.truncate(m);
    all
}
