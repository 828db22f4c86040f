//! List-wise evaluator: decoupled per-field attention over the list, a
//! session encoder for the user history, and a tiled MLP with CTR and CVR
//! heads applied at every slot.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{InteractionRecord, ItemFeatures};
use crate::diffcore::{AdamState, Graph, NodeId, ParamSet, RngStream};
use crate::error::{Error, Result};
use crate::metrics;

/// Model-visible feature fields per item: id, category, brand.
pub const FIELDS: usize = 3;
const FIELD_NAMES: [&str; FIELDS] = ["item", "cat", "brand"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding size D.
    pub dim: usize,
    pub mlp_hidden: Vec<usize>,
    /// Hidden width of the generator's FC heads.
    pub gen_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            mlp_hidden: vec![64, 32],
            gen_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn paper_scale() -> Self {
        Self {
            mlp_hidden: vec![1024, 256, 128],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("model.dim", "must be positive"));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::config("model.mlp_hidden", "layer sizes must be positive"));
        }
        if self.gen_hidden == 0 {
            return Err(Error::config("model.gen_hidden", "must be positive"));
        }
        Ok(())
    }
}

/// Shapes fixed by the data: slate length, history depth and vocabularies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dims {
    pub list_len: usize,
    pub history: usize,
    pub vocab: [usize; FIELDS],
}

impl Dims {
    pub fn from_manifest(m: &crate::datagen::Manifest) -> Self {
        Self {
            list_len: m.list_len,
            history: m.history,
            vocab: [m.num_items, m.num_categories, m.num_brands],
        }
    }
}

/// Predicted per-slot click and conversion probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ListScores {
    pub pctr: Vec<f64>,
    pub pcvr: Vec<f64>,
}

/// Whether a forward pass tracks gradients for the parameters it reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Train,
    Frozen,
}

pub(crate) fn bind(g: &mut Graph, params: &ParamSet, name: &str, mode: Bind) -> Result<NodeId> {
    match mode {
        Bind::Train => g.param(params, name),
        Bind::Frozen => g.frozen(params, name),
    }
}

/// Field ids of `items` laid out for embedding lookup.
fn field_ids(items: &[ItemFeatures]) -> [Vec<usize>; FIELDS] {
    [
        items.iter().map(|f| f.item).collect(),
        items.iter().map(|f| f.cat).collect(),
        items.iter().map(|f| f.brand).collect(),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluator {
    pub model: ModelConfig,
    pub dims: Dims,
    pub params: ParamSet,
}

impl Evaluator {
    pub fn new(model: &ModelConfig, dims: &Dims, seed: u64) -> Result<Self> {
        model.validate()?;
        let d = model.dim;
        let mut rng = RngStream::new(seed).derive("evaluator-init", 0);
        let mut p = ParamSet::new();
        for (name, &v) in FIELD_NAMES.iter().zip(&dims.vocab) {
            p.init_normal(&format!("eval.emb.{name}"), &[v, d], &mut rng);
        }
        for i in 0..FIELDS {
            p.init_normal(&format!("eval.datt.q{i}"), &[d, d], &mut rng);
            p.init_normal(&format!("eval.datt.k{i}"), &[d, d], &mut rng);
        }
        p.init_normal("eval.datt.v", &[d, d], &mut rng);
        for w in ["q", "k", "v"] {
            p.init_normal(&format!("eval.sess.{w}"), &[d, d], &mut rng);
        }
        p.init_normal("eval.pe", &[dims.list_len, d], &mut rng);
        let mut width = (FIELDS + 3) * d;
        for (l, &h) in model.mlp_hidden.iter().enumerate() {
            p.init_normal(&format!("eval.mlp.w{l}"), &[width, h], &mut rng);
            p.init_zeros(&format!("eval.mlp.b{l}"), &[h]);
            width = h;
        }
        for head in ["ctr", "cvr"] {
            p.init_normal(&format!("eval.head.{head}.w"), &[width, 1], &mut rng);
            p.init_zeros(&format!("eval.head.{head}.b"), &[1]);
        }
        Ok(Self {
            model: model.clone(),
            dims: dims.clone(),
            params: p,
        })
    }

    /// Rebuilds an evaluator from a checkpointed parameter set.
    pub fn from_params(model: &ModelConfig, dims: &Dims, params: ParamSet) -> Result<Self> {
        let reference = Self::new(model, dims, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load evaluator",
                    lhs: t.shape().to_vec(),
                    rhs: got.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            model: model.clone(),
            dims: dims.clone(),
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.model.dim
    }

    /// Embeds `items` (laid out as `shape`) into one `shape ++ [D]` node per field.
    pub fn embed_fields(&self, g: &mut Graph, items: &[ItemFeatures], shape: &[usize], mode: Bind) -> Result<[NodeId; FIELDS]> {
        let ids = field_ids(items);
        let mut out = Vec::with_capacity(FIELDS);
        for (i, name) in FIELD_NAMES.iter().enumerate() {
            let table = bind(g, &self.params, &format!("eval.emb.{name}"), mode)?;
            out.push(g.embed_lookup(table, &ids[i], shape)?);
        }
        Ok(out.try_into().expect("one node per field"))
    }

    /// D-Attention over a batch of lists. `fields[i]` is `[B, m, D]`.
    /// Returns the field-averaged attention `[B, m, m]` and the list
    /// representation `[B, D]`.
    pub fn d_attention(&self, g: &mut Graph, fields: &[NodeId; FIELDS], mode: Bind) -> Result<(NodeId, NodeId)> {
        let inv_sqrt_d = 1.0 / (self.dim() as f64).sqrt();
        let mut att_sum: Option<NodeId> = None;
        for (i, &x) in fields.iter().enumerate() {
            let wq = bind(g, &self.params, &format!("eval.datt.q{i}"), mode)?;
            let wk = bind(g, &self.params, &format!("eval.datt.k{i}"), mode)?;
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let s = g.bmm(q, k, true)?;
            let s = g.scale(s, inv_sqrt_d);
            let att = g.softmax_rows(s)?;
            att_sum = Some(match att_sum {
                None => att,
                Some(acc) => g.add(acc, att)?,
            });
        }
        let att_all = g.scale(att_sum.expect("FIELDS > 0"), 1.0 / FIELDS as f64);
        let wv = bind(g, &self.params, "eval.datt.v", mode)?;
        let v = g.matmul(fields[0], wv)?;
        let mixed = g.bmm(att_all, v, false)?;
        let e_l = g.reduce_mean(mixed, 1)?;
        Ok((att_all, e_l))
    }

    /// User representations `[U, D]` from `sessions[u][h][slot]`.
    pub fn encode_sessions(&self, g: &mut Graph, sessions: &[&[Vec<ItemFeatures>]], mode: Bind) -> Result<NodeId> {
        let users = sessions.len();
        let h = self.dims.history;
        let m = self.dims.list_len;
        let mut flat = Vec::with_capacity(users * h * m);
        for s in sessions {
            if s.len() != h || s.iter().any(|l| l.len() != m) {
                return Err(Error::Shape {
                    op: "encode_sessions",
                    lhs: vec![h, m],
                    rhs: vec![s.len(), s.first().map_or(0, Vec::len)],
                });
            }
            flat.extend(s.iter().flatten().copied());
        }
        let fields = self.embed_fields(g, &flat, &[users * h, m], mode)?;
        let (_, e_s) = self.d_attention(g, &fields, mode)?;
        let e_s = g.reshape(e_s, &[users, h, self.dim()])?;
        self.self_attention_pool(g, e_s, "eval.sess", mode)
    }

    /// Single-head scaled dot-product self-attention over `[B, T, D]`,
    /// mean-pooled to `[B, D]`.
    pub(crate) fn self_attention_pool(&self, g: &mut Graph, x: NodeId, prefix: &str, mode: Bind) -> Result<NodeId> {
        self_attention_pool(g, &self.params, x, prefix, self.dim(), mode)
    }

    /// Per-slot pCTR and pCVR `[L, m]` for `lists`, where list `l` belongs to
    /// the user whose representation is row `users[l]` of `e_u`.
    pub fn forward(&self, g: &mut Graph, lists: &[&[ItemFeatures]], users: &[usize], e_u: NodeId, mode: Bind) -> Result<(NodeId, NodeId)> {
        let n_lists = lists.len();
        let m = self.dims.list_len;
        let d = self.dim();
        let mut flat = Vec::with_capacity(n_lists * m);
        for l in lists {
            if l.len() != m {
                return Err(Error::Shape {
                    op: "evaluator forward",
                    lhs: vec![m],
                    rhs: vec![l.len()],
                });
            }
            flat.extend_from_slice(l);
        }
        let fields = self.embed_fields(g, &flat, &[n_lists, m], mode)?;
        let (_, e_l) = self.d_attention(g, &fields, mode)?;
        let x_flat = g.concat(&fields, 2)?;
        let e_l = g.expand(e_l, 1, m)?;
        let e_u = g.embed_lookup(e_u, users, &[n_lists])?;
        let e_u = g.expand(e_u, 1, m)?;
        let pe = bind(g, &self.params, "eval.pe", mode)?;
        let pe = g.expand(pe, 0, n_lists)?;
        let mut h = g.concat(&[x_flat, e_l, e_u, pe], 2)?;
        debug_assert_eq!(g.shape(h), &[n_lists, m, (FIELDS + 3) * d]);
        for l in 0..self.model.mlp_hidden.len() {
            let w = bind(g, &self.params, &format!("eval.mlp.w{l}"), mode)?;
            let b = bind(g, &self.params, &format!("eval.mlp.b{l}"), mode)?;
            let z = g.affine(h, w, b)?;
            h = g.silu(z);
        }
        let mut heads = Vec::with_capacity(2);
        for head in ["ctr", "cvr"] {
            let w = bind(g, &self.params, &format!("eval.head.{head}.w"), mode)?;
            let b = bind(g, &self.params, &format!("eval.head.{head}.b"), mode)?;
            let z = g.affine(h, w, b)?;
            let z = g.reshape(z, &[n_lists, m])?;
            heads.push(g.sigmoid(z));
        }
        Ok((heads[0], heads[1]))
    }

    /// Scores lists belonging to several users in one pass.
    pub fn score_batch(&self, lists: &[&[ItemFeatures]], users: &[usize], sessions: &[&[Vec<ItemFeatures>]]) -> Result<Vec<ListScores>> {
        let mut g = Graph::new();
        let e_u = self.encode_sessions(&mut g, sessions, Bind::Frozen)?;
        let (ctr, cvr) = self.forward(&mut g, lists, users, e_u, Bind::Frozen)?;
        let m = self.dims.list_len;
        Ok((0..lists.len())
            .map(|l| ListScores {
                pctr: g.value(ctr).data()[l * m..(l + 1) * m].to_vec(),
                pcvr: g.value(cvr).data()[l * m..(l + 1) * m].to_vec(),
            })
            .collect())
    }

    /// Scores many lists for a single user, chunked to bound graph size.
    pub fn score_lists(&self, lists: &[Vec<ItemFeatures>], sessions: &[Vec<ItemFeatures>]) -> Result<Vec<ListScores>> {
        const CHUNK: usize = 1024;
        let mut out = Vec::with_capacity(lists.len());
        for chunk in lists.chunks(CHUNK) {
            let refs: Vec<&[ItemFeatures]> = chunk.iter().map(Vec::as_slice).collect();
            out.extend(self.score_batch(&refs, &vec![0; refs.len()], &[sessions])?);
        }
        Ok(out)
    }

    pub fn predict_list(&self, list: &[ItemFeatures], sessions: &[Vec<ItemFeatures>]) -> Result<ListScores> {
        Ok(self.score_batch(&[list], &[0], &[sessions])?.remove(0))
    }

    /// Scores the logged (exposed) list of every record.
    pub fn predict_records(&self, records: &[InteractionRecord]) -> Result<Vec<ListScores>> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(CHUNK) {
            let lists: Vec<Vec<ItemFeatures>> = chunk.iter().map(InteractionRecord::exposed_items).collect();
            let sessions: Vec<Vec<Vec<ItemFeatures>>> = chunk.iter().map(InteractionRecord::session_features).collect();
            let list_refs: Vec<&[ItemFeatures]> = lists.iter().map(Vec::as_slice).collect();
            let sess_refs: Vec<&[Vec<ItemFeatures>]> = sessions.iter().map(Vec::as_slice).collect();
            let users: Vec<usize> = (0..chunk.len()).collect();
            out.extend(self.score_batch(&list_refs, &users, &sess_refs)?);
        }
        Ok(out)
    }
}

pub(crate) fn self_attention_pool(g: &mut Graph, params: &ParamSet, x: NodeId, prefix: &str, dim: usize, mode: Bind) -> Result<NodeId> {
    let wq = bind(g, params, &format!("{prefix}.q"), mode)?;
    let wk = bind(g, params, &format!("{prefix}.k"), mode)?;
    let wv = bind(g, params, &format!("{prefix}.v"), mode)?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let s = g.bmm(q, k, true)?;
    let s = g.scale(s, 1.0 / (dim as f64).sqrt());
    let att = g.softmax_rows(s)?;
    let out = g.bmm(att, v, false)?;
    g.reduce_mean(out, 1)
}

/// `L^E` summed over slots and both heads. CVR terms only count clicked slots.
pub fn evaluator_loss(g: &mut Graph, pctr: NodeId, pcvr: NodeId, clicks: &[f64], convs: &[f64]) -> Result<NodeId> {
    let ones = vec![1.0; clicks.len()];
    let ctr = g.bce(pctr, clicks, &ones)?;
    let cvr = g.bce(pcvr, convs, clicks)?;
    g.add(ctr, cvr)
}

/// Plain-value form of [`evaluator_loss`] for a single list.
pub fn evaluator_loss_value(scores: &ListScores, clicks: &[u8], convs: &[u8]) -> f64 {
    use crate::diffcore::bce_term;
    let mut total = 0.0;
    for j in 0..clicks.len() {
        total += bce_term(scores.pctr[j], clicks[j] as f64);
        if clicks[j] == 1 {
            total += bce_term(scores.pcvr[j], convs[j] as f64);
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Training records scored each epoch for the `train` metric rows.
    pub train_metric_sample: usize,
}

impl Default for EvalTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 64,
            epochs: 8,
            train_metric_sample: 2000,
        }
    }
}

impl EvalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("evaluator.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("evaluator.batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("evaluator.epochs", "must be positive"));
        }
        Ok(())
    }
}

/// Metric row of the evaluator training history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub epoch: usize,
    pub split: String,
    pub auc: Option<f64>,
    pub logloss: f64,
    pub ndcg5: Option<f64>,
    pub ndcg10: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalHistory {
    pub rows: Vec<EvalMetrics>,
    /// Mean per-record training loss of each epoch.
    pub train_loss: Vec<f64>,
    pub best_epoch: usize,
}

impl EvalHistory {
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut out = String::from("epoch,split,auc,logloss,ndcg5,ndcg10\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{}\n",
                r.epoch,
                r.split,
                fmt(r.auc),
                r.logloss,
                fmt(r.ndcg5),
                fmt(r.ndcg10)
            ));
        }
        out
    }

    pub fn best_test_auc(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == "test")
            .filter_map(|r| r.auc)
            .fold(None, |acc, a| Some(acc.map_or(a, |b: f64| b.max(a))))
    }
}

/// Pooled CTR metrics of an evaluator on the exposed lists of `records`.
pub fn evaluate_records(ev: &Evaluator, records: &[InteractionRecord], epoch: usize, split: &str) -> Result<EvalMetrics> {
    let scores = ev.predict_records(records)?;
    let preds: Vec<f64> = scores.iter().flat_map(|s| s.pctr.iter().copied()).collect();
    let labels: Vec<u8> = records.iter().flat_map(|r| r.clicks.iter().copied()).collect();
    let rel: Vec<Vec<f64>> = records
        .iter()
        .map(|r| r.clicks.iter().map(|&c| c as f64).collect())
        .collect();
    let pairs = || scores.iter().zip(&rel).map(|(s, r)| (s.pctr.as_slice(), r.as_slice()));
    Ok(EvalMetrics {
        epoch,
        split: split.to_string(),
        auc: metrics::auc(&preds, &labels),
        logloss: metrics::logloss(&preds, &labels),
        ndcg5: metrics::mean_ndcg(pairs(), 5)?,
        ndcg10: metrics::mean_ndcg(pairs(), 10)?,
    })
}

/// Batch loss: mean over records of each record's `L^E`.
pub fn batch_loss(ev: &Evaluator, g: &mut Graph, batch: &[&InteractionRecord], mode: Bind) -> Result<NodeId> {
    let lists: Vec<Vec<ItemFeatures>> = batch.iter().map(|r| r.exposed_items()).collect();
    let sessions: Vec<Vec<Vec<ItemFeatures>>> = batch.iter().map(|r| r.session_features()).collect();
    let list_refs: Vec<&[ItemFeatures]> = lists.iter().map(Vec::as_slice).collect();
    let sess_refs: Vec<&[Vec<ItemFeatures>]> = sessions.iter().map(Vec::as_slice).collect();
    let users: Vec<usize> = (0..batch.len()).collect();
    let e_u = ev.encode_sessions(g, &sess_refs, mode)?;
    let (ctr, cvr) = ev.forward(g, &list_refs, &users, e_u, mode)?;
    let clicks: Vec<f64> = batch.iter().flat_map(|r| r.clicks.iter().map(|&c| c as f64)).collect();
    let convs: Vec<f64> = batch.iter().flat_map(|r| r.convs.iter().map(|&c| c as f64)).collect();
    let total = evaluator_loss(g, ctr, cvr, &clicks, &convs)?;
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Minibatch Adam training; keeps the parameters of the best test-AUC epoch.
pub fn train_evaluator(
    train: &[InteractionRecord],
    test: &[InteractionRecord],
    dims: &Dims,
    model: &ModelConfig,
    cfg: &EvalTrainConfig,
    seed: u64,
) -> Result<(Evaluator, EvalHistory)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Invalid("evaluator training needs nonempty train and test sets".into()));
    }
    cfg.validate()?;
    let mut ev = Evaluator::new(model, dims, seed)?;
    let mut adam = AdamState::default();
    let mut history = EvalHistory::default();
    let mut best: Option<(f64, ParamSet)> = None;
    let root = RngStream::new(seed);
    let train_sample = &train[..cfg.train_metric_sample.min(train.len())];

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut root.derive("evaluator-shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&InteractionRecord> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let loss = batch_loss(&ev, &mut g, &batch, Bind::Train)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: value,
                });
            }
            loss_sum += value * batch.len() as f64;
            g.backward(loss)?;
            adam.step(&mut ev.params, &g.param_grads(), cfg.lr)?;
        }
        history.train_loss.push(loss_sum / train.len() as f64);
        history.rows.push(evaluate_records(&ev, train_sample, epoch, "train")?);
        let test_row = evaluate_records(&ev, test, epoch, "test")?;
        let auc = test_row.auc.unwrap_or(0.5);
        log::info!(
            "evaluator epoch {epoch}: loss {:.5} test auc {auc:.4} logloss {:.4}",
            history.train_loss[epoch],
            test_row.logloss
        );
        history.rows.push(test_row);
        if best.as_ref().is_none_or(|(b, _)| auc > *b) {
            best = Some((auc, ev.params.clone()));
            history.best_epoch = epoch;
        }
    }
    if let Some((_, params)) = best {
        ev.params = params;
    }
    Ok((ev, history))
}
