//! Non-autoregressive generator: a position head (PDU) picks the slot to
//! edit, a candidate head (CRU) picks what goes there, and the two repeat
//! until the model stops asking for changes.
//!
//! Embedding tables, D-Attention and the session encoder are read from the
//! evaluator and never trained here.

use serde::{Deserialize, Serialize};

use crate::datagen::ItemFeatures;
use crate::diffcore::{Graph, NodeId, ParamSet, RngStream, Tensor};
use crate::error::{Error, Result};
use crate::evaluator::{bind, self_attention_pool, Bind, Dims, Evaluator, ModelConfig, FIELDS};

/// How one generation step edits the list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// Candidate `k` from outside the list overwrites slot `j`.
    Replace,
    /// Every candidate is already shown (`n == m`): `k` moves to slot `j`
    /// and the displaced item takes `k`'s old slot.
    Swap,
}

impl EditMode {
    pub fn for_sizes(n: usize, m: usize) -> Self {
        if n > m {
            EditMode::Replace
        } else {
            EditMode::Swap
        }
    }
}

/// Sampling and stopping parameters for one generation run.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelConfig {
    pub tau: f64,
    pub noise: bool,
    pub theta_p: f64,
    pub theta_c: f64,
    pub max_steps: usize,
}

impl GumbelConfig {
    /// Deterministic inference defaults for slate length `m` and `n` candidates.
    pub fn inference(m: usize, n: usize) -> Self {
        Self {
            tau: 0.3,
            noise: false,
            theta_p: 2.0 / m as f64,
            theta_c: 2.0 / n as f64,
            max_steps: 2 * m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("generation.tau", "must be positive"));
        }
        for (key, t) in [("generation.theta_p", self.theta_p), ("generation.theta_c", self.theta_c)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::config(key, "must lie in (0, 1]"));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::config("generation.max_steps", "must be positive"));
        }
        Ok(())
    }
}

/// Config-file form of [`GumbelConfig`]; unset thresholds follow the slate size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub tau: f64,
    pub theta_p: Option<f64>,
    pub theta_c: Option<f64>,
    pub max_steps: Option<usize>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            theta_p: None,
            theta_c: None,
            max_steps: None,
        }
    }
}

impl GenerationConfig {
    pub fn resolve(&self, m: usize, n: usize) -> GumbelConfig {
        let base = GumbelConfig::inference(m, n);
        GumbelConfig {
            tau: self.tau,
            noise: false,
            theta_p: self.theta_p.unwrap_or(base.theta_p),
            theta_c: self.theta_c.unwrap_or(base.theta_c),
            max_steps: self.max_steps.unwrap_or(base.max_steps),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    SameItem,
    LowConfidence,
    MaxSteps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub j: usize,
    /// Chosen candidate index, absent when the position head stopped first.
    pub k: Option<usize>,
    pub max_rp: f64,
    pub max_rc: Option<f64>,
    pub stop: Option<StopReason>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub steps: Vec<TraceStep>,
}

impl GenerationTrace {
    pub fn stop_reason(&self) -> Option<StopReason> {
        self.steps.last().and_then(|s| s.stop)
    }

    pub fn edits(&self) -> usize {
        self.steps.iter().filter(|s| s.stop.is_none() || s.stop == Some(StopReason::MaxSteps)).count()
    }
}

/// Standard Gumbel draws `-ln(-ln u)` with `u` in the open unit interval.
pub fn gumbel_noise(rng: &mut RngStream, len: usize) -> Vec<f64> {
    (0..len).map(|_| -(-rng.open01().ln()).ln()).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `softmax((z + g) / tau)` on plain values. `None` if every entry is `-inf`.
pub fn gumbel_sample_values(z: &[f64], tau: f64, noise: Option<&mut RngStream>) -> Option<(Vec<f64>, usize)> {
    let g = match noise {
        Some(rng) => gumbel_noise(rng, z.len()),
        None => vec![0.0; z.len()],
    };
    let y: Vec<f64> = z.iter().zip(&g).map(|(a, b)| (a + b) / tau).collect();
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let e: Vec<f64> = y.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    let soft: Vec<f64> = e.iter().map(|v| v / s).collect();
    let hard = argmax(&soft);
    Some((soft, hard))
}

/// Gumbel-softmax over the last axis of `logits`. Returns the soft node and
/// the per-row hard choices; `g.straight_through(soft, &hard)` gives the
/// one-hot forward with the soft gradient.
pub fn gumbel_sample(g: &mut Graph, logits: NodeId, tau: f64, noise: Option<&mut RngStream>) -> Result<(NodeId, Vec<usize>)> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let shape = g.shape(logits).to_vec();
    let mut x = logits;
    if let Some(rng) = noise {
        let len = g.value(logits).len();
        let n = g.constant(Tensor::new(shape.clone(), gumbel_noise(rng, len))?);
        x = g.add(x, n)?;
    }
    let x = g.scale(x, 1.0 / tau);
    let soft = g.softmax_rows(x)?;
    let cols = *shape.last().unwrap_or(&1);
    let hard = g.value(soft).data().chunks(cols).map(argmax).collect();
    Ok((soft, hard))
}

/// Raw PDU and CRU logits for a batch: `pdu [B, m]`, `cru [B, m, n]` where
/// `cru[b, j, k]` scores candidate `k` for slot `j`.
#[derive(Clone, Copy, Debug)]
pub struct GenLogits {
    pub pdu: NodeId,
    pub cru: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub model: ModelConfig,
    pub dims: Dims,
    pub num_candidates: usize,
    pub params: ParamSet,
}

impl Generator {
    pub fn new(model: &ModelConfig, dims: &Dims, num_candidates: usize, seed: u64) -> Result<Self> {
        model.validate()?;
        if num_candidates < dims.list_len {
            return Err(Error::PoolTooSmall);
        }
        let d = model.dim;
        let hg = model.gen_hidden;
        let mut rng = RngStream::new(seed).derive("generator-init", 0);
        let mut p = ParamSet::new();
        p.init_normal("gen.pe", &[dims.list_len, d], &mut rng);
        p.init_normal("gen.pdu.w0", &[(FIELDS + 3) * d, hg], &mut rng);
        p.init_zeros("gen.pdu.b0", &[hg]);
        p.init_normal("gen.pdu.w1", &[hg, 1], &mut rng);
        p.init_zeros("gen.pdu.b1", &[1]);
        p.init_normal("gen.mask.in", &[FIELDS * d, d], &mut rng);
        p.init_normal("gen.mask.token", &[1, d], &mut rng);
        for w in ["q", "k", "v"] {
            p.init_normal(&format!("gen.msa.{w}"), &[d, d], &mut rng);
        }
        p.init_normal("gen.cru.fc2.w", &[(FIELDS + 1) * d, d], &mut rng);
        p.init_zeros("gen.cru.fc2.b", &[d]);
        p.init_normal("gen.cru.slot", &[dims.list_len + 1, d], &mut rng);
        p.init_normal("gen.cru.held", &[FIELDS * d, d], &mut rng);
        p.init_normal("gen.cru.w0", &[5 * d, hg], &mut rng);
        p.init_zeros("gen.cru.b0", &[hg]);
        p.init_normal("gen.cru.w1", &[hg, 1], &mut rng);
        p.init_zeros("gen.cru.b1", &[1]);
        Ok(Self {
            model: model.clone(),
            dims: dims.clone(),
            num_candidates,
            params: p,
        })
    }

    pub fn from_params(model: &ModelConfig, dims: &Dims, num_candidates: usize, params: ParamSet) -> Result<Self> {
        let reference = Self::new(model, dims, num_candidates, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load generator",
                    lhs: t.shape().to_vec(),
                    rhs: got.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            model: model.clone(),
            dims: dims.clone(),
            num_candidates,
            params,
        })
    }

    pub fn edit_mode(&self) -> EditMode {
        EditMode::for_sizes(self.num_candidates, self.dims.list_len)
    }

    fn dim(&self) -> usize {
        self.model.dim
    }

    fn p(&self, g: &mut Graph, name: &str, mode: Bind) -> Result<NodeId> {
        bind(g, &self.params, name, mode)
    }

    /// Two-layer head `[.., in] -> [.., 1]` with a SiLU hidden layer.
    fn head(&self, g: &mut Graph, x: NodeId, prefix: &str, mode: Bind) -> Result<NodeId> {
        let w0 = self.p(g, &format!("{prefix}.w0"), mode)?;
        let b0 = self.p(g, &format!("{prefix}.b0"), mode)?;
        let h = g.affine(x, w0, b0)?;
        let h = g.silu(h);
        let w1 = self.p(g, &format!("{prefix}.w1"), mode)?;
        let b1 = self.p(g, &format!("{prefix}.b1"), mode)?;
        g.affine(h, w1, b1)
    }

    /// Position logits `[B, m]` from per-slot features `x_flat [B, m, F·D]`,
    /// list vectors `e_l [B, D]` and user vectors `e_u [B, D]`.
    pub fn pdu_logits(&self, g: &mut Graph, x_flat: NodeId, e_l: NodeId, e_u: NodeId, mode: Bind) -> Result<NodeId> {
        let (b, m) = (g.shape(x_flat)[0], self.dims.list_len);
        let e_l = g.expand(e_l, 1, m)?;
        let e_u = g.expand(e_u, 1, m)?;
        let pe = self.p(g, "gen.pe", mode)?;
        let pe = g.expand(pe, 0, b)?;
        let x = g.concat(&[x_flat, e_l, e_u, pe], 2)?;
        let h = self.head(g, x, "gen.pdu", mode)?;
        g.reshape(h, &[b, m])
    }

    /// Masked-list encodings `[B, m, D]`: row `j` encodes the list with slot
    /// `j` replaced by the learned mask token.
    pub fn mask_and_encode_all(&self, g: &mut Graph, x_flat: NodeId, mode: Bind) -> Result<NodeId> {
        let (b, m, d) = (g.shape(x_flat)[0], self.dims.list_len, self.dim());
        let w_in = self.p(g, "gen.mask.in", mode)?;
        let pe = self.p(g, "gen.pe", mode)?;
        let rows = g.matmul(x_flat, w_in)?;
        let pe_b = g.expand(pe, 0, b)?;
        let rows = g.add(rows, pe_b)?;
        let rows = g.expand(rows, 1, m)?;

        let token = self.p(g, "gen.mask.token", mode)?;
        let token = g.reshape(token, &[d])?;
        let token = g.expand(token, 0, m)?;
        let token = g.add(token, pe)?;
        let token = g.expand(token, 0, m)?;
        let token = g.expand(token, 0, b)?;

        let mut keep = vec![1.0; b * m * m * d];
        for bi in 0..b {
            for j in 0..m {
                let base = ((bi * m + j) * m + j) * d;
                keep[base..base + d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let drop: Vec<f64> = keep.iter().map(|v| 1.0 - v).collect();
        let keep = g.constant(Tensor::new(vec![b, m, m, d], keep)?);
        let drop = g.constant(Tensor::new(vec![b, m, m, d], drop)?);
        let kept = g.mul(rows, keep)?;
        let placed = g.mul(token, drop)?;
        let masked = g.add(kept, placed)?;
        let masked = g.reshape(masked, &[b * m, m, d])?;
        let pooled = self_attention_pool(g, &self.params, masked, "gen.msa", d, mode)?;
        g.reshape(pooled, &[b, m, d])
    }

    /// Masked-list encoding `[D]` of a single list with slot `j` masked.
    pub fn mask_and_encode(&self, g: &mut Graph, ev: &Evaluator, list: &[ItemFeatures], j: usize, mode: Bind) -> Result<NodeId> {
        let m = self.dims.list_len;
        if j >= m || list.len() != m {
            return Err(Error::Index {
                what: "mask position",
                id: j,
                size: m,
            });
        }
        let fields = ev.embed_fields(g, list, &[1, m], Bind::Frozen)?;
        let x_flat = g.concat(&fields, 2)?;
        let all = self.mask_and_encode_all(g, x_flat, mode)?;
        let all = g.reshape(all, &[m, self.dim()])?;
        let row = g.embed_lookup(all, &[j], &[1])?;
        g.reshape(row, &[self.dim()])
    }

    /// Candidate logits `[B, m, n]` from candidate features `c_flat [B, n, F·D]`,
    /// masked-list encodings `e_mask [B, m, D]`, the features of the item
    /// currently held at each slot `x_flat [B, m, F·D]` and user vectors
    /// `e_u [B, D]`. `slots[b·n + k]` is the slot candidate `k` currently
    /// occupies, or `m` when it is not shown.
    #[allow(clippy::too_many_arguments)]
    pub fn cru_logits(
        &self,
        g: &mut Graph,
        c_flat: NodeId,
        slots: &[usize],
        e_mask: NodeId,
        x_flat: NodeId,
        e_u: NodeId,
        mode: Bind,
    ) -> Result<NodeId> {
        let (b, n, m, d) = (g.shape(c_flat)[0], g.shape(c_flat)[1], self.dims.list_len, self.dim());
        let pe = self.p(g, "gen.pe", mode)?;
        let pe = g.expand(pe, 1, n)?;
        let pe = g.expand(pe, 0, b)?;
        let c = g.expand(c_flat, 1, m)?;
        let c = g.concat(&[c, pe], 3)?;
        let w2 = self.p(g, "gen.cru.fc2.w", mode)?;
        let b2 = self.p(g, "gen.cru.fc2.b", mode)?;
        let e_c = g.affine(c, w2, b2)?;
        let e_c = g.silu(e_c);
        let slot_table = self.p(g, "gen.cru.slot", mode)?;
        let slot = g.embed_lookup(slot_table, slots, &[b, n])?;
        let slot = g.expand(slot, 1, m)?;
        let e_c = g.add(e_c, slot)?;
        let w_held = self.p(g, "gen.cru.held", mode)?;
        let held = g.matmul(x_flat, w_held)?;
        let held = g.expand(held, 2, n)?;
        let e_mask = g.expand(e_mask, 2, n)?;
        let e_u = g.expand(e_u, 1, m)?;
        let e_u = g.expand(e_u, 2, n)?;
        let x = g.concat(&[e_c, e_mask, held, e_u, pe], 3)?;
        debug_assert_eq!(g.shape(x), &[b, m, n, 5 * d]);
        let h = self.head(g, x, "gen.cru", mode)?;
        g.reshape(h, &[b, m, n])
    }

    /// PDU and CRU logits for every slot of every list in the batch. List `b`
    /// holds indices into `candidates[b]` and belongs to user row `b` of `e_u`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ev: &Evaluator,
        lists: &[&[usize]],
        candidates: &[&[ItemFeatures]],
        e_u: NodeId,
        mode: Bind,
    ) -> Result<GenLogits> {
        let (b, m, n) = (lists.len(), self.dims.list_len, self.num_candidates);
        let mut flat = Vec::with_capacity(b * m);
        let mut cflat = Vec::with_capacity(b * n);
        let mut slots = Vec::with_capacity(b * n);
        for (l, c) in lists.iter().zip(candidates) {
            if c.len() != n {
                return Err(Error::Shape {
                    op: "generator candidates",
                    lhs: vec![n],
                    rhs: vec![c.len()],
                });
            }
            check_list(l, m, n)?;
            flat.extend(l.iter().map(|&i| c[i]));
            cflat.extend_from_slice(c);
            let mut pos = vec![m; n];
            for (slot, &i) in l.iter().enumerate() {
                pos[i] = slot;
            }
            slots.extend(pos);
        }
        let fields = ev.embed_fields(g, &flat, &[b, m], Bind::Frozen)?;
        let (_, e_l) = ev.d_attention(g, &fields, Bind::Frozen)?;
        let x_flat = g.concat(&fields, 2)?;
        let pdu = self.pdu_logits(g, x_flat, e_l, e_u, mode)?;
        let e_mask = self.mask_and_encode_all(g, x_flat, mode)?;
        let cfields = ev.embed_fields(g, &cflat, &[b, n], Bind::Frozen)?;
        let c_flat = g.concat(&cfields, 2)?;
        let cru = self.cru_logits(g, c_flat, &slots, e_mask, x_flat, e_u, mode)?;
        Ok(GenLogits { pdu, cru })
    }

    /// Additive CRU mask `[m, n]` for one list: `-inf` on candidates shown at
    /// another slot (replace mode only).
    pub fn candidate_mask(&self, list: &[usize]) -> Vec<f64> {
        let (m, n) = (self.dims.list_len, self.num_candidates);
        let mut mask = vec![0.0; m * n];
        if self.edit_mode() == EditMode::Replace {
            for j in 0..m {
                for (slot, &k) in list.iter().enumerate() {
                    if slot != j {
                        mask[j * n + k] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        mask
    }

    /// Iteratively edits `initial` (indices into `candidates`) until a stop
    /// condition fires. Deterministic when `cfg.noise` is off.
    pub fn generate(
        &self,
        ev: &Evaluator,
        initial: &[usize],
        candidates: &[ItemFeatures],
        sessions: &[Vec<ItemFeatures>],
        cfg: &GumbelConfig,
        mut rng: Option<&mut RngStream>,
    ) -> Result<(Vec<usize>, GenerationTrace)> {
        cfg.validate()?;
        let (m, n) = (self.dims.list_len, self.num_candidates);
        check_list(initial, m, n)?;
        let e_u = {
            let mut g = Graph::new();
            let node = ev.encode_sessions(&mut g, &[sessions], Bind::Frozen)?;
            g.value(node).clone()
        };
        let mut list = initial.to_vec();
        let mut trace = GenerationTrace::default();
        for step in 0..cfg.max_steps {
            let mut g = Graph::new();
            let e_u_node = g.constant(e_u.clone());
            let logits = self.forward(&mut g, ev, &[&list], &[candidates], e_u_node, Bind::Frozen)?;
            let z_p = g.value(logits.pdu).data().to_vec();
            let (rp, j) = gumbel_sample_values(&z_p, cfg.tau, rng.as_deref_mut().filter(|_| cfg.noise)).expect("finite position logits");
            let max_rp = rp[j];
            let mut entry = TraceStep {
                step,
                j,
                k: None,
                max_rp,
                max_rc: None,
                stop: None,
            };
            if max_rp < cfg.theta_p {
                entry.stop = Some(StopReason::LowConfidence);
                trace.steps.push(entry);
                break;
            }
            let mask = self.candidate_mask(&list);
            let z_c: Vec<f64> = g.value(logits.cru).data()[j * n..(j + 1) * n]
                .iter()
                .zip(&mask[j * n..(j + 1) * n])
                .map(|(z, mk)| z + mk)
                .collect();
            let Some((rc, k)) = gumbel_sample_values(&z_c, cfg.tau, rng.as_deref_mut().filter(|_| cfg.noise)) else {
                entry.stop = Some(StopReason::LowConfidence);
                trace.steps.push(entry);
                break;
            };
            entry.k = Some(k);
            entry.max_rc = Some(rc[k]);
            if rc[k] < cfg.theta_c {
                entry.stop = Some(StopReason::LowConfidence);
            } else if list[j] == k {
                entry.stop = Some(StopReason::SameItem);
            } else {
                apply_edit(&mut list, j, k);
                if step + 1 == cfg.max_steps {
                    entry.stop = Some(StopReason::MaxSteps);
                }
            }
            let done = entry.stop.is_some();
            trace.steps.push(entry);
            if done {
                break;
            }
        }
        Ok((list, trace))
    }
}

/// Puts candidate `k` at slot `j`. If `k` is already shown elsewhere the two
/// slots swap; otherwise the item at `j` leaves the list.
pub fn apply_edit(list: &mut [usize], j: usize, k: usize) {
    if let Some(pos) = list.iter().position(|&x| x == k) {
        list.swap(pos, j);
    } else {
        list[j] = k;
    }
}

/// Checks that `list` has `m` distinct candidate indices below `n`.
pub fn check_list(list: &[usize], m: usize, n: usize) -> Result<()> {
    if list.len() != m {
        return Err(Error::Shape {
            op: "list",
            lhs: vec![m],
            rhs: vec![list.len()],
        });
    }
    let mut seen = vec![false; n];
    for &i in list {
        if i >= n {
            return Err(Error::Index {
                what: "candidate",
                id: i,
                size: n,
            });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Invalid(format!("candidate {i} appears twice in the list")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(m: usize) -> Dims {
        Dims {
            list_len: m,
            history: 2,
            vocab: [12, 3, 4],
        }
    }

    fn feats(n: usize) -> Vec<ItemFeatures> {
        (0..n)
            .map(|i| ItemFeatures {
                item: i,
                cat: i % 3,
                brand: i % 4,
            })
            .collect()
    }

    fn sessions(m: usize) -> Vec<Vec<ItemFeatures>> {
        vec![feats(m), feats(m).into_iter().rev().collect()]
    }

    fn setup(m: usize, n: usize) -> (Evaluator, Generator) {
        let model = ModelConfig {
            dim: 4,
            mlp_hidden: vec![6],
            gen_hidden: 5,
        };
        let ev = Evaluator::new(&model, &dims(m), 1).unwrap();
        let gen = Generator::new(&model, &dims(m), n, 2).unwrap();
        (ev, gen)
    }

    #[test]
    fn gumbel_without_noise_is_softmax() {
        let (soft, hard) = gumbel_sample_values(&[0.0, 0.0], 1.0, None).unwrap();
        assert_eq!(soft, vec![0.5, 0.5]);
        assert_eq!(hard, 0);
        let (soft, hard) = gumbel_sample_values(&[0.2, 1.0, 0.5], 0.01, None).unwrap();
        assert_eq!(hard, 1);
        assert!(soft[1] > 1.0 - 1e-12);
        assert!(gumbel_sample_values(&[f64::NEG_INFINITY; 2], 1.0, None).is_none());
    }

    #[test]
    fn graph_gumbel_matches_values() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(&[&[0.1, -0.3, 0.7], &[1.0, 1.0, 0.0]]));
        let (soft, hard) = gumbel_sample(&mut g, z, 0.5, None).unwrap();
        assert_eq!(hard, vec![2, 0]);
        let (expect, _) = gumbel_sample_values(&[0.1, -0.3, 0.7], 0.5, None).unwrap();
        for (a, b) in g.value(soft).row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(gumbel_sample(&mut g, z, 0.0, None).is_err());
    }

    #[test]
    fn zero_pdu_head_gives_equal_logits() {
        let (ev, mut gen) = setup(3, 5);
        for name in ["gen.pdu.w1", "gen.pdu.b1"] {
            gen.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let c = feats(5);
        let mut g = Graph::new();
        let e_u = ev.encode_sessions(&mut g, &[&sessions(3)], Bind::Frozen).unwrap();
        let out = gen.forward(&mut g, &ev, &[&[0, 1, 2]], &[&c], e_u, Bind::Frozen).unwrap();
        assert_eq!(g.shape(out.pdu), &[1, 3]);
        assert_eq!(g.shape(out.cru), &[1, 3, 5]);
        assert!(g.value(out.pdu).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_hides_the_masked_item() {
        let (ev, gen) = setup(3, 5);
        let c = feats(5);
        let a = vec![c[0], c[1], c[2]];
        let b = vec![c[0], c[4], c[2]];
        let mut g = Graph::new();
        let ea = gen.mask_and_encode(&mut g, &ev, &a, 1, Bind::Frozen).unwrap();
        let eb = gen.mask_and_encode(&mut g, &ev, &b, 1, Bind::Frozen).unwrap();
        assert_eq!(g.value(ea), g.value(eb));
        let ec = gen.mask_and_encode(&mut g, &ev, &b, 0, Bind::Frozen).unwrap();
        assert_ne!(g.value(ea), g.value(ec));
    }

    #[test]
    fn duplicate_candidates_get_identical_logits() {
        let (ev, gen) = setup(2, 4);
        let mut c = feats(4);
        c[3] = c[1];
        let mut g = Graph::new();
        let e_u = ev.encode_sessions(&mut g, &[&sessions(2)], Bind::Frozen).unwrap();
        let out = gen.forward(&mut g, &ev, &[&[0, 2]], &[&c], e_u, Bind::Frozen).unwrap();
        let v = g.value(out.cru).data();
        for j in 0..2 {
            assert_eq!(v[j * 4 + 1], v[j * 4 + 3]);
        }
    }

    #[test]
    fn full_threshold_returns_input() {
        let (ev, gen) = setup(3, 5);
        let cfg = GumbelConfig {
            theta_p: 1.0,
            ..GumbelConfig::inference(3, 5)
        };
        let (out, trace) = gen.generate(&ev, &[4, 0, 2], &feats(5), &sessions(3), &cfg, None).unwrap();
        assert_eq!(out, vec![4, 0, 2]);
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.stop_reason(), Some(StopReason::LowConfidence));
    }

    #[test]
    fn generation_steps_are_single_edits() {
        let (ev, gen) = setup(3, 6);
        let cfg = GumbelConfig {
            theta_p: 0.01,
            theta_c: 0.01,
            noise: true,
            tau: 1.0,
            max_steps: 6,
        };
        let mut rng = RngStream::new(5);
        let c = feats(6);
        for _ in 0..20 {
            let (out, trace) = gen.generate(&ev, &[0, 1, 2], &c, &sessions(3), &cfg, Some(&mut rng)).unwrap();
            check_list(&out, 3, 6).unwrap();
            assert!(trace.stop_reason().is_some());
            let mut cur = vec![0, 1, 2];
            for s in &trace.steps {
                if let (Some(k), None | Some(StopReason::MaxSteps)) = (s.k, s.stop) {
                    let prev = cur.clone();
                    apply_edit(&mut cur, s.j, k);
                    let diff = prev.iter().zip(&cur).filter(|(a, b)| a != b).count();
                    assert_eq!(diff, 1);
                    check_list(&cur, 3, 6).unwrap();
                }
            }
            assert_eq!(cur, out);
        }
    }

    #[test]
    fn swap_mode_keeps_a_permutation() {
        let mut l = vec![3, 1, 0, 2];
        apply_edit(&mut l, 0, 2);
        assert_eq!(l, vec![2, 1, 0, 3]);
        assert_eq!(EditMode::for_sizes(5, 5), EditMode::Swap);
        assert_eq!(EditMode::for_sizes(12, 4), EditMode::Replace);
    }

    #[test]
    fn replace_mode_masks_other_slots() {
        let (_, gen) = setup(2, 4);
        let mask = gen.candidate_mask(&[3, 1]);
        // slot 0 may not take candidate 1, slot 1 may not take candidate 3
        assert_eq!(mask[1], f64::NEG_INFINITY);
        assert_eq!(mask[3], 0.0);
        assert_eq!(mask[4 + 3], f64::NEG_INFINITY);
        assert_eq!(mask[4 + 1], 0.0);
    }
}
