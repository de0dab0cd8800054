//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected.
//! [`RunConfig::to_text`] writes every key, defaults included, and parses
//! back to the same value.

use std::path::{Path, PathBuf};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{HeaderMode, IngestConfig};
use crate::meta::{Ablation, MetaConfig, ModelConfig};
use crate::metrics::Pooling;
use crate::tasks::TrainNodes;

use super::synth::SynthSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Event CSV; when unset the synthetic spec generates the graph.
    pub data: Option<PathBuf>,
    pub node_features: Option<PathBuf>,
    pub bipartite: bool,
    pub header: HeaderMode,
    pub synth: SynthSpec,
    pub split: [f64; 3],
    pub d: usize,
    pub d_t: usize,
    pub heads: usize,
    pub hops: usize,
    pub k: usize,
    pub d_h: usize,
    pub meta: MetaConfig,
    pub train_nodes: TrainNodes,
    /// Caps on task counts; 0 keeps all.
    pub max_train_tasks: usize,
    pub max_eval_tasks: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            node_features: None,
            bipartite: false,
            header: HeaderMode::Auto,
            synth: SynthSpec::default(),
            split: [0.6, 0.2, 0.2],
            d: 64,
            d_t: 16,
            heads: 2,
            hops: 2,
            k: 8,
            d_h: 64,
            meta: MetaConfig::default(),
            train_nodes: TrainNodes::All,
            max_train_tasks: 0,
            max_eval_tasks: 0,
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn ingest(&self, d_x: usize) -> IngestConfig {
        IngestConfig {
            header: self.header,
            sort: true,
            bipartite: self.bipartite,
            d_x,
            node_features: self.node_features.clone(),
        }
    }

    pub fn model(&self, d_x: usize, d_e: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_x,
                d_e,
                d: self.d,
                d_t: self.d_t,
                heads: self.heads,
                hops: self.hops,
                k: self.k,
            },
            d_h: self.d_h,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.meta;
        match key.trim() {
            "data" => self.data = opt_path(v),
            "node_features" => self.node_features = opt_path(v),
            "bipartite" => self.bipartite = parse_bool(key, v)?,
            "header" => {
                self.header = match v {
                    "auto" => HeaderMode::Auto,
                    "present" => HeaderMode::Present,
                    "absent" => HeaderMode::Absent,
                    _ => return Err(Error::Config(format!("header: expected auto, present or absent, got {v:?}"))),
                }
            }
            "synth.communities" => self.synth.communities = parse_num(key, v)?,
            "synth.nodes_per_community" => self.synth.nodes_per_community = parse_num(key, v)?,
            "synth.events_per_node" => self.synth.events_per_node = parse_num(key, v)?,
            "synth.new_fraction" => self.synth.new_fraction = parse_num(key, v)?,
            "synth.noise" => self.synth.noise = parse_num(key, v)?,
            "synth.horizon" => self.synth.horizon = parse_num(key, v)?,
            "synth.arrival_start" => self.synth.arrival[0] = parse_num(key, v)?,
            "synth.arrival_end" => self.synth.arrival[1] = parse_num(key, v)?,
            "synth.popularity" => self.synth.popularity = parse_num(key, v)?,
            "synth.seed" => self.synth.seed = parse_num(key, v)?,
            "split" => {
                let parts = v
                    .split(',')
                    .map(|s| parse_num::<f64>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.split = parts
                    .try_into()
                    .map_err(|_| Error::Config("split: expected three comma-separated ratios".into()))?;
            }
            "d" => self.d = parse_num(key, v)?,
            "d_t" => self.d_t = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "hops" => self.hops = parse_num(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "d_h" => self.d_h = parse_num(key, v)?,
            "lr1" => m.lr1 = parse_num(key, v)?,
            "lr2" => m.lr2 = parse_num(key, v)?,
            "lr3" => m.lr3 = parse_num(key, v)?,
            "inner_steps" => m.inner_steps = parse_num(key, v)?,
            "span_size" => m.span_size = parse_num(key, v)?,
            "n" => m.n = parse_num(key, v)?,
            "m" => m.m = parse_num(key, v)?,
            "batch_size" => m.batch_size = parse_num(key, v)?,
            "epochs" => m.epochs = parse_num(key, v)?,
            "no_meta" => m.ablation.no_meta = parse_bool(key, v)?,
            "no_span_adapt" => m.ablation.no_span_adapt = parse_bool(key, v)?,
            "no_node_adapt" => m.ablation.no_node_adapt = parse_bool(key, v)?,
            "persist_memory" => m.persist_memory = parse_bool(key, v)?,
            "pooling" => {
                m.pooling = match v {
                    "pooled" => Pooling::Pooled,
                    "per_task" => Pooling::PerTask,
                    _ => return Err(Error::Config(format!("pooling: expected pooled or per_task, got {v:?}"))),
                }
            }
            "train_nodes" => {
                self.train_nodes = match v {
                    "all" => TrainNodes::All,
                    "late_arrivals" => TrainNodes::LateArrivals,
                    _ => return Err(Error::Config(format!("train_nodes: expected all or late_arrivals, got {v:?}"))),
                }
            }
            "max_train_tasks" => self.max_train_tasks = parse_num(key, v)?,
            "max_eval_tasks" => self.max_eval_tasks = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {raw:?}"),
            })?;
            cfg.set(k, v).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let m = &self.meta;
        let s = &self.synth;
        vec![
            ("data", path(&self.data)),
            ("node_features", path(&self.node_features)),
            ("bipartite", self.bipartite.to_string()),
            (
                "header",
                match self.header {
                    HeaderMode::Auto => "auto",
                    HeaderMode::Present => "present",
                    HeaderMode::Absent => "absent",
                }
                .into(),
            ),
            ("synth.communities", s.communities.to_string()),
            ("synth.nodes_per_community", s.nodes_per_community.to_string()),
            ("synth.events_per_node", s.events_per_node.to_string()),
            ("synth.new_fraction", s.new_fraction.to_string()),
            ("synth.noise", s.noise.to_string()),
            ("synth.horizon", s.horizon.to_string()),
            ("synth.arrival_start", s.arrival[0].to_string()),
            ("synth.arrival_end", s.arrival[1].to_string()),
            ("synth.popularity", s.popularity.to_string()),
            ("synth.seed", s.seed.to_string()),
            ("split", format!("{},{},{}", self.split[0], self.split[1], self.split[2])),
            ("d", self.d.to_string()),
            ("d_t", self.d_t.to_string()),
            ("heads", self.heads.to_string()),
            ("hops", self.hops.to_string()),
            ("k", self.k.to_string()),
            ("d_h", self.d_h.to_string()),
            ("lr1", m.lr1.to_string()),
            ("lr2", m.lr2.to_string()),
            ("lr3", m.lr3.to_string()),
            ("inner_steps", m.inner_steps.to_string()),
            ("span_size", m.span_size.to_string()),
            ("n", m.n.to_string()),
            ("m", m.m.to_string()),
            ("batch_size", m.batch_size.to_string()),
            ("epochs", m.epochs.to_string()),
            ("no_meta", m.ablation.no_meta.to_string()),
            ("no_span_adapt", m.ablation.no_span_adapt.to_string()),
            ("no_node_adapt", m.ablation.no_node_adapt.to_string()),
            ("persist_memory", m.persist_memory.to_string()),
            (
                "pooling",
                match m.pooling {
                    Pooling::Pooled => "pooled",
                    Pooling::PerTask => "per_task",
                }
                .into(),
            ),
            (
                "train_nodes",
                match self.train_nodes {
                    TrainNodes::All => "all",
                    TrainNodes::LateArrivals => "late_arrivals",
                }
                .into(),
            ),
            ("max_train_tasks", self.max_train_tasks.to_string()),
            ("max_eval_tasks", self.max_eval_tasks.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.synth.validate()?;
        let total: f64 = self.split.iter().sum();
        if self.split.iter().any(|&r| !(r > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split {:?} must be positive and sum to 1", self.split)));
        }
        self.model(1, 0).encoder.validate()?;
        if self.d_h == 0 {
            return Err(Error::Config("d_h must be positive".into()));
        }
        Ok(())
    }

    /// Ablation flags of this config, by name.
    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        let mut c = self.clone();
        c.meta.ablation = ablation;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parses_comments_and_overrides() {
        let c = RunConfig::parse("# run\nd = 16  # small\n\nsplit = 0.7, 0.15, 0.15\nno_meta = true\ndata = /tmp/x.csv\n").unwrap();
        assert_eq!(c.d, 16);
        assert_eq!(c.split, [0.7, 0.15, 0.15]);
        assert!(c.meta.ablation.no_meta);
        assert_eq!(c.data, Some(PathBuf::from("/tmp/x.csv")));
        let mut c = c;
        c.apply_override("epochs=3").unwrap();
        assert_eq!(c.meta.epochs, 3);
        assert!(c.apply_override("epochs").is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::parse("colour = blue\n"), Err(Error::Parse { line: 1, .. })));
        assert!(RunConfig::parse("d = many\n").is_err());
        assert!(RunConfig::parse("no_meta = maybe\n").is_err());
        assert!(RunConfig::parse("split = 0.5,0.5\n").is_err());
        assert!(RunConfig::parse("just words\n").is_err());
        assert!(RunConfig::parse("split = 0.5,0.4,0.4\n").unwrap().validate().is_err());
        assert!(RunConfig::parse("heads = 3\n").unwrap().validate().is_err());
    }

    proptest! {
        #[test]
        fn config_roundtrip(d in 1usize..128, lr in 0.0f64..1.0, seed in any::<u64>(), flags in 0u8..8, noise in 0.0f64..0.99) {
            let mut c = RunConfig::default();
            c.d = d;
            c.meta.lr2 = lr;
            c.seed = seed;
            c.synth.noise = noise;
            c.meta.ablation.no_meta = flags & 1 == 1;
            c.meta.ablation.no_span_adapt = flags & 2 == 2;
            c.meta.pooling = if flags & 4 == 4 { Pooling::PerTask } else { Pooling::Pooled };
            prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
}
