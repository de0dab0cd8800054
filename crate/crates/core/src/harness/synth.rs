//! Planted-community temporal graphs.
//!
//! Every node belongs to one of `communities` groups and carries its one-hot
//! group id as features. Established nodes are present from time 0; a
//! `new_fraction` share of each community arrives uniformly inside
//! `arrival · horizon`. Each node initiates `events_per_node` events at
//! uniform times between its arrival and the horizon. The partner of an
//! event is drawn from nodes already present: with probability `1 − noise`
//! from the initiator's own community, otherwise from a uniformly chosen
//! other community. Within the chosen community partners are drawn in
//! proportion to a fixed popularity weight `rank^(−popularity)`, ranks being
//! a random permutation of the community's members.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{parse_csv, HeaderMode, IngestConfig, TemporalGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub communities: usize,
    pub nodes_per_community: usize,
    pub events_per_node: usize,
    pub new_fraction: f64,
    pub noise: f64,
    pub horizon: f64,
    /// New-node arrival window as fractions of the horizon.
    pub arrival: [f64; 2],
    pub popularity: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            communities: 4,
            nodes_per_community: 50,
            events_per_node: 20,
            new_fraction: 0.3,
            noise: 0.1,
            horizon: 1000.0,
            arrival: [0.6, 0.98],
            popularity: 2.0,
            seed: 7,
        }
    }
}

/// Generated files plus the ground truth needed by tests.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub events_csv: String,
    pub nodes_csv: String,
    pub community: Vec<usize>,
    pub arrival: Vec<f64>,
}

impl SynthSpec {
    pub fn num_nodes(&self) -> usize {
        self.communities * self.nodes_per_community
    }

    pub fn validate(&self) -> Result<()> {
        if self.communities < 2 {
            return Err(Error::Config("synth needs at least 2 communities".into()));
        }
        if self.nodes_per_community < 2 || self.events_per_node == 0 {
            return Err(Error::Config("synth needs 2+ nodes per community and 1+ events per node".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("synth noise {} outside [0, 1)", self.noise)));
        }
        if !(0.0..1.0).contains(&self.new_fraction) {
            return Err(Error::Config(format!("synth new_fraction {} outside [0, 1)", self.new_fraction)));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config("synth horizon must be positive".into()));
        }
        let [a, b] = self.arrival;
        if !(0.0 <= a && a < b && b < 1.0) {
            return Err(Error::Config(format!("synth arrival window [{a}, {b}] must satisfy 0 <= start < end < 1")));
        }
        if !(self.popularity >= 0.0) || !self.popularity.is_finite() {
            return Err(Error::Config("synth popularity must be non-negative".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SynthOutput> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (c, p) = (self.communities, self.nodes_per_community);
        let n = c * p;
        let community: Vec<usize> = (0..n).map(|u| u / p).collect();
        let new_per_community = (self.new_fraction * p as f64).round() as usize;
        let mut arrival = vec![0.0; n];
        let mut weight = vec![0.0; n];
        for g in 0..c {
            let members: Vec<usize> = (g * p..(g + 1) * p).collect();
            for &u in &members[p - new_per_community..] {
                arrival[u] = rng.gen_range(self.arrival[0] * self.horizon..self.arrival[1] * self.horizon);
            }
            let mut ranks: Vec<usize> = (1..=p).collect();
            ranks.shuffle(&mut rng);
            for (&u, &r) in members.iter().zip(&ranks) {
                weight[u] = (r as f64).powf(-self.popularity);
            }
        }

        let mut starts: Vec<(f64, usize)> = Vec::with_capacity(n * self.events_per_node);
        for u in 0..n {
            for _ in 0..self.events_per_node {
                starts.push((rng.gen_range(arrival[u]..self.horizon), u));
            }
        }
        starts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut events = String::new();
        let mut candidates: Vec<usize> = Vec::with_capacity(p);
        for &(t, u) in &starts {
            let own = community[u];
            let group = if rng.gen_bool(self.noise) {
                let other = rng.gen_range(0..c - 1);
                if other >= own {
                    other + 1
                } else {
                    other
                }
            } else {
                own
            };
            candidates.clear();
            candidates.extend((group * p..(group + 1) * p).filter(|&w| w != u && arrival[w] <= t));
            if candidates.is_empty() {
                candidates.extend((0..n).filter(|&w| w != u && arrival[w] <= t));
            }
            let total: f64 = candidates.iter().map(|&w| weight[w]).sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut partner = *candidates.last().expect("established nodes exist");
            for &w in &candidates {
                if pick < weight[w] {
                    partner = w;
                    break;
                }
                pick -= weight[w];
            }
            let _ = writeln!(events, "{u},{partner},{t},0");
        }

        let mut nodes = String::new();
        for u in 0..n {
            let _ = write!(nodes, "{u}");
            for g in 0..c {
                let _ = write!(nodes, ",{}", u8::from(community[u] == g));
            }
            nodes.push('\n');
        }
        Ok(SynthOutput {
            events_csv: format!("src,dst,timestamp,state_label\n{events}"),
            nodes_csv: nodes,
            community,
            arrival,
        })
    }

    pub fn graph(&self) -> Result<TemporalGraph> {
        let out = self.generate()?;
        let ingest = IngestConfig {
            header: HeaderMode::Present,
            d_x: self.communities,
            ..IngestConfig::default()
        };
        parse_csv(&out.events_csv, Some(&out.nodes_csv), &ingest)
    }
}
