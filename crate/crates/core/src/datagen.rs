//! Synthetic session logs with a hidden, context-dependent click model.
//!
//! Every record is a pure function of `(seed, record index)`, so datasets are
//! byte-identical across runs and thread counts.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, RngStream};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Catalog entry. `latent_quality` is known only to the simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub item_id: usize,
    pub category_id: usize,
    pub brand_id: usize,
    pub latent_quality: f64,
}

impl Item {
    pub fn features(&self) -> ItemFeatures {
        ItemFeatures {
            item: self.item_id,
            cat: self.category_id,
            brand: self.brand_id,
        }
    }
}

/// The model-visible feature fields of an item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemFeatures {
    pub item: usize,
    pub cat: usize,
    pub brand: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionItem {
    pub item: usize,
    pub cat: usize,
    pub brand: usize,
    pub click: u8,
    pub conv: u8,
}

impl SessionItem {
    pub fn features(&self) -> ItemFeatures {
        ItemFeatures {
            item: self.item,
            cat: self.cat,
            brand: self.brand,
        }
    }
}

/// One logged impression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionRecord {
    pub user_id: usize,
    pub sessions: Vec<Vec<SessionItem>>,
    pub candidates: Vec<ItemFeatures>,
    /// Indices into `candidates`, in display order.
    pub exposed: Vec<usize>,
    pub clicks: Vec<u8>,
    pub convs: Vec<u8>,
}

impl InteractionRecord {
    pub fn exposed_items(&self) -> Vec<ItemFeatures> {
        self.exposed.iter().map(|&i| self.candidates[i]).collect()
    }

    pub fn session_features(&self) -> Vec<Vec<ItemFeatures>> {
        self.sessions
            .iter()
            .map(|s| s.iter().map(SessionItem::features).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub num_items: usize,
    pub num_categories: usize,
    pub num_brands: usize,
    pub num_users: usize,
    /// Sessions per user history (H).
    pub history: usize,
    /// Displayed slate length (m).
    pub list_len: usize,
    /// Candidate pool size (n).
    pub num_candidates: usize,
    pub num_records: usize,
    pub test_fraction: f64,
    /// Same-category cannibalization penalty.
    pub gamma: f64,
    /// Position bias drop per slot: `p_j = -position_step · j`.
    pub position_step: f64,
    pub affinity_std: f64,
    /// How strongly history exposure follows category affinity.
    pub history_sharpness: f64,
    /// Noise of the logging ranker around latent quality.
    pub logging_noise: f64,
    pub conv_bias: f64,
    pub conv_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_items: 200,
            num_categories: 8,
            num_brands: 20,
            num_users: 2000,
            history: 3,
            list_len: 5,
            num_candidates: 5,
            num_records: 22_000,
            test_fraction: 0.1,
            gamma: 1.0,
            position_step: 0.5,
            affinity_std: 1.0,
            history_sharpness: 2.0,
            logging_noise: 0.5,
            conv_bias: -1.0,
            conv_scale: 1.0,
        }
    }
}

impl DataConfig {
    /// Slate of 5 from 5 candidates (120 permutations), 20k train and 2k
    /// test records.
    pub fn preset_5x5() -> Self {
        Self {
            num_records: 22_000,
            test_fraction: 1.0 / 11.0,
            ..Self::default()
        }
    }

    /// Slate of 4 from 12 candidates (11,880 permutations).
    pub fn preset_12x4() -> Self {
        Self {
            list_len: 4,
            num_candidates: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("data.{key}"), msg))
            }
        };
        check(self.num_categories >= 1, "num_categories", "must be at least 1")?;
        check(
            self.num_items >= self.num_categories,
            "num_items",
            "must be at least num_categories",
        )?;
        check(self.num_brands >= 1, "num_brands", "must be at least 1")?;
        check(self.num_users >= 1, "num_users", "must be at least 1")?;
        check(self.history >= 1, "history", "must be at least 1")?;
        check(self.list_len >= 1, "list_len", "must be at least 1")?;
        check(
            self.num_candidates >= self.list_len,
            "num_candidates",
            "must be at least list_len",
        )?;
        check(
            self.num_items >= self.num_candidates && self.num_items >= self.list_len,
            "num_items",
            "catalog smaller than a candidate pool",
        )?;
        check(
            self.test_fraction > 0.0 && self.test_fraction < 1.0,
            "test_fraction",
            "must lie in (0, 1)",
        )?;
        check(self.gamma >= 0.0, "gamma", "must be non-negative")?;
        check(self.position_step > 0.0, "position_step", "must be positive")?;
        check(self.logging_noise >= 0.0, "logging_noise", "must be non-negative")?;
        check(self.affinity_std >= 0.0, "affinity_std", "must be non-negative")?;
        Ok(())
    }

    pub fn train_records(&self) -> usize {
        self.num_records - (self.num_records as f64 * self.test_fraction).round() as usize
    }
}

pub fn gen_catalog(seed: u64, num_items: usize, num_categories: usize, num_brands: usize) -> Vec<Item> {
    let mut rng = RngStream::new(seed).derive("catalog", 0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..num_items)
        .map(|item_id| Item {
            item_id,
            category_id: rng.random_range(0..num_categories),
            brand_id: rng.random_range(0..num_brands.max(1)),
            latent_quality: normal.sample(&mut rng),
        })
        .collect()
}

/// Hidden oracle generating click and conversion labels.
#[derive(Clone, Debug)]
pub struct GroundTruthModel {
    /// Additive click logit per slot, strictly decreasing.
    pub position_bias: Vec<f64>,
    /// `affinity[user][category]`.
    pub affinity: Vec<Vec<f64>>,
    pub gamma: f64,
    pub conv_bias: f64,
    pub conv_scale: f64,
}

impl GroundTruthModel {
    pub fn from_config(cfg: &DataConfig) -> Self {
        let root = RngStream::new(cfg.seed);
        let normal = Normal::new(0.0, cfg.affinity_std).unwrap();
        let affinity = (0..cfg.num_users)
            .map(|u| {
                let mut rng = root.derive("affinity", u as u64);
                (0..cfg.num_categories).map(|_| normal.sample(&mut rng)).collect()
            })
            .collect();
        Self {
            position_bias: (0..cfg.list_len).map(|j| -cfg.position_step * j as f64).collect(),
            affinity,
            gamma: cfg.gamma,
            conv_bias: cfg.conv_bias,
            conv_scale: cfg.conv_scale,
        }
    }

    /// Click probability of the item in slot `j` (0-based) of `list`:
    /// `sigmoid(quality + affinity + p_j − γ·dup)` where `dup` counts
    /// earlier items of the same category.
    pub fn click_prob(&self, list: &[&Item], j: usize, user: usize) -> f64 {
        let item = list[j];
        let dup = list[..j]
            .iter()
            .filter(|other| other.category_id == item.category_id)
            .count() as f64;
        sigmoid(
            item.latent_quality + self.affinity[user][item.category_id] + self.position_bias[j]
                - self.gamma * dup,
        )
    }

    /// Conversion probability given a click.
    pub fn conv_prob(&self, item: &Item, user: usize) -> f64 {
        sigmoid(self.conv_bias + self.conv_scale * (item.latent_quality + self.affinity[user][item.category_id]))
    }

    pub fn expected_clicks(&self, list: &[&Item], user: usize) -> f64 {
        (0..list.len()).map(|j| self.click_prob(list, j, user)).sum()
    }
}

/// Draws `k` distinct catalog indices with probability proportional to
/// `weight(item)` (exponential-key sampling without replacement).
fn weighted_sample<R: Rng>(catalog: &[Item], k: usize, weight: impl Fn(&Item) -> f64, rng: &mut R) -> Vec<usize> {
    let mut keys: Vec<(f64, usize)> = catalog
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (-u.ln() / weight(it), i)
        })
        .collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keys.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Orders `items` by the logging policy (quality plus Gaussian noise).
fn logging_order<R: Rng>(catalog: &[Item], items: &[usize], noise: f64, rng: &mut R) -> Vec<usize> {
    let normal = Normal::new(0.0, noise.max(0.0)).unwrap();
    let mut scored: Vec<(f64, usize)> = items
        .iter()
        .enumerate()
        .map(|(pos, &i)| (catalog[i].latent_quality + normal.sample(rng), pos))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, pos)| pos).collect()
}

/// Simulator state shared across records.
pub struct Simulator {
    pub cfg: DataConfig,
    pub catalog: Vec<Item>,
    pub truth: GroundTruthModel,
}

impl Simulator {
    pub fn new(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            catalog: gen_catalog(cfg.seed, cfg.num_items, cfg.num_categories, cfg.num_brands),
            truth: GroundTruthModel::from_config(cfg),
            cfg: cfg.clone(),
        })
    }

    pub fn item(&self, f: &ItemFeatures) -> &Item {
        &self.catalog[f.item]
    }

    fn label_list<R: Rng>(&self, list: &[&Item], user: usize, rng: &mut R) -> (Vec<u8>, Vec<u8>) {
        let mut clicks = Vec::with_capacity(list.len());
        let mut convs = Vec::with_capacity(list.len());
        for j in 0..list.len() {
            let click = rng.random::<f64>() < self.truth.click_prob(list, j, user);
            let conv = click && rng.random::<f64>() < self.truth.conv_prob(list[j], user);
            clicks.push(click as u8);
            convs.push(conv as u8);
        }
        (clicks, convs)
    }

    pub fn gen_record(&self, index: usize) -> InteractionRecord {
        let cfg = &self.cfg;
        let mut rng = RngStream::new(cfg.seed).derive("record", index as u64);
        let user = rng.random_range(0..cfg.num_users);
        let aff = &self.truth.affinity[user];

        let sessions = (0..cfg.history)
            .map(|_| {
                let picked = weighted_sample(
                    &self.catalog,
                    cfg.list_len,
                    |it| (cfg.history_sharpness * aff[it.category_id]).exp(),
                    &mut rng,
                );
                let order = logging_order(&self.catalog, &picked, cfg.logging_noise, &mut rng);
                let list: Vec<&Item> = order.iter().map(|&p| &self.catalog[picked[p]]).collect();
                let (clicks, convs) = self.label_list(&list, user, &mut rng);
                list.iter()
                    .zip(clicks.iter().zip(&convs))
                    .map(|(it, (&click, &conv))| SessionItem {
                        item: it.item_id,
                        cat: it.category_id,
                        brand: it.brand_id,
                        click,
                        conv,
                    })
                    .collect()
            })
            .collect();

        let pool = weighted_sample(&self.catalog, cfg.num_candidates, |_| 1.0, &mut rng);
        let candidates: Vec<ItemFeatures> = pool.iter().map(|&i| self.catalog[i].features()).collect();
        let mut exposed = logging_order(&self.catalog, &pool, cfg.logging_noise, &mut rng);
        exposed.truncate(cfg.list_len);
        let list: Vec<&Item> = exposed.iter().map(|&p| &self.catalog[pool[p]]).collect();
        let (clicks, convs) = self.label_list(&list, user, &mut rng);

        InteractionRecord {
            user_id: user,
            sessions,
            candidates,
            exposed,
            clicks,
            convs,
        }
    }

    /// Mean click probability of the exposed slots of `records`.
    pub fn mean_click_prob(&self, records: &[InteractionRecord]) -> f64 {
        let (sum, count) = records.iter().fold((0.0, 0usize), |(s, c), r| {
            let items: Vec<&Item> = r.exposed_items().iter().map(|f| self.item(f)).collect();
            (s + self.truth.expected_clicks(&items, r.user_id), c + items.len())
        });
        sum / count.max(1) as f64
    }
}

/// Generates `cfg.num_records` records; the first `train_records()` form the
/// training split.
pub fn gen_logs(cfg: &DataConfig) -> Result<Dataset> {
    let sim = Simulator::new(cfg)?;
    let records: Vec<InteractionRecord> = (0..cfg.num_records).into_par_iter().map(|i| sim.gen_record(i)).collect();
    Ok(Dataset {
        manifest: Manifest::from_config(cfg),
        records,
    })
}

/// Sidecar metadata describing a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub num_records: usize,
    pub train_records: usize,
    pub history: usize,
    pub list_len: usize,
    pub num_candidates: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub num_brands: usize,
}

impl Manifest {
    pub fn from_config(cfg: &DataConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: cfg.seed,
            num_records: cfg.num_records,
            train_records: cfg.train_records(),
            history: cfg.history,
            list_len: cfg.list_len,
            num_candidates: cfg.num_candidates,
            num_items: cfg.num_items,
            num_categories: cfg.num_categories,
            num_brands: cfg.num_brands,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<InteractionRecord>,
}

impl Dataset {
    pub fn train(&self) -> &[InteractionRecord] {
        &self.records[..self.manifest.train_records.min(self.records.len())]
    }

    pub fn test(&self) -> &[InteractionRecord] {
        &self.records[self.manifest.train_records.min(self.records.len())..]
    }
}

/// `dataset.jsonl` → `dataset.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &dataset.records {
        let line = serde_json::to_string(r).expect("records serialize");
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let manifest = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    std::fs::write(&mpath, manifest + "\n").map_err(|e| Error::io(&mpath, e))
}

fn invariant(line: usize, field: &'static str, msg: impl Into<String>) -> Error {
    Error::Invariant {
        line,
        field,
        msg: msg.into(),
    }
}

/// Checks every structural invariant of a record against the manifest.
pub fn validate_record(r: &InteractionRecord, m: &Manifest, line: usize) -> Result<()> {
    let in_vocab = |f: &ItemFeatures| f.item < m.num_items && f.cat < m.num_categories && f.brand < m.num_brands;
    if r.sessions.len() != m.history {
        return Err(invariant(line, "sessions", format!("expected {} sessions, found {}", m.history, r.sessions.len())));
    }
    for s in &r.sessions {
        if s.len() != m.list_len {
            return Err(invariant(line, "sessions", format!("session length {} != {}", s.len(), m.list_len)));
        }
        for it in s {
            if it.click > 1 || it.conv > 1 {
                return Err(invariant(line, "sessions", "labels must be 0 or 1"));
            }
            if it.conv == 1 && it.click == 0 {
                return Err(invariant(line, "sessions", "conversion without click"));
            }
            if !in_vocab(&it.features()) {
                return Err(invariant(line, "sessions", "feature id out of vocabulary"));
            }
        }
    }
    if r.candidates.len() != m.num_candidates {
        return Err(invariant(line, "candidates", format!("expected {} candidates, found {}", m.num_candidates, r.candidates.len())));
    }
    if let Some(f) = r.candidates.iter().find(|f| !in_vocab(f)) {
        return Err(invariant(line, "candidates", format!("feature id out of vocabulary: {f:?}")));
    }
    for (i, a) in r.candidates.iter().enumerate() {
        if r.candidates[..i].iter().any(|b| b.item == a.item) {
            return Err(invariant(line, "candidates", format!("duplicate item {}", a.item)));
        }
    }
    if r.exposed.len() != m.list_len {
        return Err(invariant(line, "exposed", format!("expected {} slots, found {}", m.list_len, r.exposed.len())));
    }
    for (i, &e) in r.exposed.iter().enumerate() {
        if e >= r.candidates.len() {
            return Err(invariant(line, "exposed", format!("candidate index {e} out of range")));
        }
        if r.exposed[..i].contains(&e) {
            return Err(invariant(line, "exposed", format!("duplicate candidate index {e}")));
        }
    }
    if r.clicks.len() != m.list_len || r.clicks.iter().any(|&c| c > 1) {
        return Err(invariant(line, "clicks", "expected one 0/1 label per slot"));
    }
    if r.convs.len() != m.list_len || r.convs.iter().any(|&c| c > 1) {
        return Err(invariant(line, "convs", "expected one 0/1 label per slot"));
    }
    if let Some(j) = (0..m.list_len).find(|&j| r.convs[j] == 1 && r.clicks[j] == 0) {
        return Err(invariant(line, "convs", format!("conversion without click at slot {j}")));
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", mpath.display())))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "schema version {} not supported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

/// Reads and validates a dataset; any bad line fails the whole load.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(path)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: InteractionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        validate_record(&record, &manifest, line_no)?;
        records.push(record);
    }
    if records.len() != manifest.num_records {
        return Err(Error::Schema(format!(
            "manifest declares {} records, file holds {}",
            manifest.num_records,
            records.len()
        )));
    }
    Ok(Dataset { manifest, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(records: usize) -> DataConfig {
        DataConfig {
            num_records: records,
            test_fraction: 0.1,
            ..DataConfig::default()
        }
    }

    #[test]
    fn catalog_is_deterministic() {
        assert_eq!(gen_catalog(1, 10, 3, 4), gen_catalog(1, 10, 3, 4));
        assert_ne!(gen_catalog(1, 10, 3, 4), gen_catalog(2, 10, 3, 4));
    }

    #[test]
    fn single_category_catalog() {
        assert!(gen_catalog(5, 50, 1, 3).iter().all(|it| it.category_id == 0));
    }

    #[test]
    fn quality_mean_near_zero() {
        let cat = gen_catalog(11, 100_000, 10, 10);
        let mean = cat.iter().map(|it| it.latent_quality).sum::<f64>() / cat.len() as f64;
        assert!(mean.abs() <= 0.02, "{mean}");
    }

    fn model(gamma: f64) -> GroundTruthModel {
        GroundTruthModel {
            position_bias: vec![0.0, 0.0, 0.0],
            affinity: vec![vec![0.0; 2]],
            gamma,
            conv_bias: 0.0,
            conv_scale: 1.0,
        }
    }

    fn item(id: usize, cat: usize, q: f64) -> Item {
        Item {
            item_id: id,
            category_id: cat,
            brand_id: 0,
            latent_quality: q,
        }
    }

    #[test]
    fn click_prob_all_zero_is_half() {
        let m = model(1.0);
        let a = item(0, 0, 0.0);
        assert_eq!(m.click_prob(&[&a], 0, 0), 0.5);
    }

    #[test]
    fn cannibalization_lowers_second_same_category_item() {
        let m = model(1.5);
        let (a, b_same, b_diff) = (item(0, 0, 0.3), item(1, 0, 0.2), item(1, 1, 0.2));
        assert!(m.click_prob(&[&a, &b_same], 1, 0) < m.click_prob(&[&a, &b_diff], 1, 0));
    }

    #[test]
    fn click_prob_matches_direct_formula() {
        let m = GroundTruthModel {
            position_bias: vec![0.4, -0.1, -0.7],
            affinity: vec![vec![0.25, -0.5]],
            gamma: 1.3,
            conv_bias: 0.0,
            conv_scale: 1.0,
        };
        let (a, b, c) = (item(0, 1, 0.9), item(1, 0, -0.2), item(2, 1, 0.6));
        let logit: f64 = 0.6 + -0.5 + -0.7 - 1.3 * 1.0;
        let expected = 1.0 / (1.0 + (-logit).exp());
        assert!((m.click_prob(&[&a, &b, &c], 2, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let cfg = small(1000);
        let a = gen_logs(&cfg).unwrap();
        assert_eq!(a.train().len(), 900);
        assert_eq!(a.test().len(), 100);
        let b = gen_logs(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn records_satisfy_invariants() {
        for cfg in [small(300), DataConfig { num_records: 300, ..DataConfig::preset_12x4() }] {
            let ds = gen_logs(&cfg).unwrap();
            for (i, r) in ds.records.iter().enumerate() {
                validate_record(r, &ds.manifest, i + 1).unwrap();
            }
        }
    }

    #[test]
    fn empirical_ctr_tracks_click_model() {
        let cfg = small(4000);
        let sim = Simulator::new(&cfg).unwrap();
        let ds = gen_logs(&cfg).unwrap();
        let clicks: usize = ds.records.iter().flat_map(|r| &r.clicks).map(|&c| c as usize).sum();
        let ctr = clicks as f64 / (ds.records.len() * cfg.list_len) as f64;
        let expected = sim.mean_click_prob(&ds.records);
        assert!((ctr - expected).abs() < 0.02, "ctr {ctr} vs {expected}");
    }

    #[test]
    fn position_bias_strictly_decreasing() {
        let t = GroundTruthModel::from_config(&DataConfig::default());
        assert!(t.position_bias.windows(2).all(|w| w[0] > w[1]));
    }
}
