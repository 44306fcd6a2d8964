//! Scenario files: everything a simulation run needs, in TOML or JSON.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Defense, MonitorPolicy};
use crate::id::ClientId;
use crate::server::{AdversaryStrategy, AttackKind, AttackScope, Coverage, CutMode, Partition, Withhold};
use crate::simnet::churn::ChurnModel;
use crate::simnet::clock::ClockConfig;
use crate::simnet::topology::{Topology, TopologyKind};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("simulation error: {0}")]
    Internal(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SimError> {
    Err(SimError::ConfigInvalid(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    pub n: usize,
    /// Edge probability for `random_gnp`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// Edge list for `explicit`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<[usize; 2]>,
}

impl TopologySpec {
    /// Builds the graph; random graphs are resampled until connected.
    pub fn build<R: rand::Rng>(&self, rng: &mut R) -> Result<Topology, SimError> {
        Ok(match self.kind {
            TopologyKind::Ring => Topology::ring(self.n),
            TopologyKind::Star => Topology::star(self.n),
            TopologyKind::Complete => Topology::complete(self.n),
            TopologyKind::Explicit => {
                let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
                Topology::explicit(self.n, &edges)
                    .map_err(|e| SimError::ConfigInvalid(format!("topology.edges: {e}")))?
            }
            TopologyKind::RandomGnp => {
                let p = self.p.unwrap_or(0.0);
                let all = vec![true; self.n];
                for _ in 0..10_000 {
                    let t = Topology::gnp(self.n, p, rng);
                    if t.components(&all).len() == 1 {
                        return Ok(t);
                    }
                }
                return invalid(format!(
                    "topology.p = {p} does not yield a connected graph on {} clients",
                    self.n
                ));
            }
        })
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return invalid("topology.n must be at least 1");
        }
        match self.kind {
            TopologyKind::RandomGnp => match self.p {
                Some(p) if p > 0.0 && p <= 1.0 => Ok(()),
                _ => invalid("topology.p must be in (0, 1] for random_gnp"),
            },
            TopologyKind::Explicit => {
                if let Some(e) = self.edges.iter().find(|e| e[0] >= self.n || e[1] >= self.n) {
                    return invalid(format!("topology.edges: [{}, {}] outside 0..{}", e[0], e[1], self.n));
                }
                Ok(())
            }
            _ if !self.edges.is_empty() => invalid("topology.edges is only valid for explicit graphs"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub mode: CutMode,
}

/// The adversary, with clients named by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySpec {
    pub kind: AttackKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peer: Option<usize>,
    pub scope: AttackScope,
    pub equivocate: bool,
    pub launch_epoch: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
    /// Milliseconds after the fake key is delivered before the real key is
    /// restored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub short_lived: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stealthy_update_rate: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<Coverage>,
    pub rotate_on_launch: bool,
    pub withhold: Withhold,
    pub oob_drop: bool,
    pub isolate: bool,
}

impl Default for AdversarySpec {
    fn default() -> Self {
        AdversarySpec {
            kind: AttackKind::Honest,
            target: None,
            peer: None,
            scope: AttackScope::ExistingConnections,
            equivocate: false,
            launch_epoch: 1,
            partition: None,
            short_lived: None,
            stealthy_update_rate: None,
            coverage: None,
            rotate_on_launch: false,
            withhold: Withhold::default(),
            oob_drop: false,
            isolate: false,
        }
    }
}

impl AdversarySpec {
    pub fn is_active(&self) -> bool {
        self.kind != AttackKind::Honest || self.withhold.any() || self.isolate || self.oob_drop
    }

    pub fn to_strategy(&self) -> AdversaryStrategy {
        AdversaryStrategy {
            kind: self.kind,
            target: self.target.map(ClientId::indexed),
            peer: self.peer.map(ClientId::indexed),
            scope: self.scope,
            equivocate: self.equivocate,
            launch_epoch: self.launch_epoch,
            partition: self.partition.as_ref().map(|p| Partition {
                groups: p
                    .groups
                    .iter()
                    .map(|g| g.iter().copied().map(ClientId::indexed).collect())
                    .collect(),
                mode: p.mode,
            }),
            short_lived: self.short_lived,
            stealthy_update_rate: self.stealthy_update_rate,
            coverage: self.coverage,
            rotate_on_launch: self.rotate_on_launch,
            withhold: self.withhold,
            oob_drop: self.oob_drop,
            isolate: self.isolate,
        }
    }

    fn validate(&self, n: usize, epochs: u64) -> Result<(), SimError> {
        for (field, v) in [("adversary.target", self.target), ("adversary.peer", self.peer)] {
            if let Some(i) = v.filter(|&i| i >= n) {
                return invalid(format!("{field} = {i} outside 0..{n}"));
            }
        }
        if self.is_active() && self.target.is_none() {
            return invalid("adversary.target is required for an attack");
        }
        if self.is_active() && self.launch_epoch >= epochs {
            return invalid(format!(
                "adversary.launch_epoch = {} must be below epochs = {epochs}",
                self.launch_epoch
            ));
        }
        if self.short_lived.is_some() && self.launch_epoch == 0 {
            return invalid("adversary.launch_epoch must be at least 1 for short-lived attacks");
        }
        if self.stealthy_update_rate == Some(0) {
            return invalid("adversary.stealthy_update_rate must be positive");
        }
        if let Some(p) = &self.partition {
            let mut seen = BTreeSet::new();
            for &c in p.groups.iter().flatten() {
                if c >= n {
                    return invalid(format!("adversary.partition.groups names client {c} outside 0..{n}"));
                }
                if !seen.insert(c) {
                    return invalid(format!("adversary.partition.groups lists client {c} twice"));
                }
            }
            if p.groups.len() < 2 {
                return invalid("adversary.partition.groups needs at least two groups");
            }
        }
        self.to_strategy()
            .validate()
            .map_err(|e| SimError::ConfigInvalid(format!("adversary: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewEdge {
    pub epoch: u64,
    pub a: usize,
    pub b: usize,
}

/// Honest background activity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    /// Probability that an online client rotates its key in an epoch.
    pub key_update_rate: f64,
    /// Probability per epoch that one random new contact pair forms.
    pub new_edge_prob: f64,
    /// Scripted contact pairs formed mid-epoch.
    pub new_edges: Vec<NewEdge>,
    /// Contacts share an out-of-band MAC key from the start.
    pub oob_channels: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayModel {
    /// Uniform on `(0, bound]`.
    #[default]
    Uniform,
    /// Every message takes exactly its bound.
    Fixed,
}

/// Constants for the closed-form traffic accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccountingConstants {
    #[serde(rename = "N_total")]
    pub n_total: u64,
    pub n_updates_per_epoch: u64,
    pub contacts: u64,
    pub akr_bytes: u64,
    /// Per-epoch KTACA download beyond the direct root and proof.
    pub ktaca_extra_bytes: u64,
    pub str_wire_bytes: u64,
    pub hash_bytes: u64,
    pub sig_bytes: u64,
    pub epochs_per_month: u64,
    pub new_contacts_per_month: u64,
    pub updates_per_month: u64,
}

impl Default for AccountingConstants {
    fn default() -> Self {
        AccountingConstants {
            n_total: 1 << 32,
            n_updates_per_epoch: 1 << 21,
            contacts: 100,
            akr_bytes: 32_000,
            ktaca_extra_bytes: 1_216,
            str_wire_bytes: 64,
            hash_bytes: 32,
            sig_bytes: 64,
            epochs_per_month: 30,
            new_contacts_per_month: 5,
            updates_per_month: 1,
        }
    }
}

impl AccountingConstants {
    fn validate(&self) -> Result<(), SimError> {
        for (f, v) in [
            ("accounting.N_total", self.n_total),
            ("accounting.n_updates_per_epoch", self.n_updates_per_epoch),
        ] {
            if !v.is_power_of_two() {
                return invalid(format!("{f} must be a power of two"));
            }
        }
        Ok(())
    }
}

/// Which detections an expectation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Who {
    #[default]
    Any,
    Owner,
    Victim,
}

/// A prediction the run is checked against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub metric: String,
    #[serde(default)]
    pub who: Who,
    /// Count only detections within this many attack-active epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub within_epochs: Option<u64>,
    /// A closed form from `predict`, with its parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formula: Option<String>,
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub params: toml::Table,
    /// A fixed expected value instead of a formula.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Absolute tolerance; without it a rate must have the expected value
    /// inside its 99% confidence interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default = "one")]
    pub seed: u64,
    pub defense: Defense,
    pub epochs: u64,
    #[serde(default = "one")]
    pub trials: u64,
    pub topology: TopologySpec,
    pub clock: ClockConfig,
    #[serde(default = "ChurnModel::none")]
    pub churn: ChurnModel,
    #[serde(default)]
    pub adversary: AdversarySpec,
    #[serde(default)]
    pub policy: MonitorPolicy,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub delay: DelayModel,
    #[serde(default)]
    pub accounting: AccountingConstants,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expect: Vec<Expectation>,
}

fn one() -> u64 {
    1
}

/// Command-line overrides applied after loading.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<u64>,
    pub epochs: Option<u64>,
}

impl Scenario {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let sc: Scenario = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| SimError::ConfigInvalid(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| SimError::ConfigInvalid(e.to_string().trim().to_string()))?
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Loads a bundled scenario by name, or a file by path.
    pub fn resolve(name_or_path: &str) -> Result<Self, SimError> {
        match bundled(name_or_path) {
            Some(text) => Self::parse(text),
            None => {
                let p = Path::new(name_or_path);
                if !p.exists() {
                    return invalid(format!("no bundled scenario or file named {name_or_path:?}"));
                }
                Self::load(p)
            }
        }
    }

    pub fn apply(&mut self, o: Overrides) -> Result<(), SimError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.trials {
            self.trials = t;
        }
        if let Some(e) = o.epochs {
            self.epochs = e;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.name.is_empty() {
            return invalid("name must not be empty");
        }
        if self.epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        if self.trials == 0 {
            return invalid("trials must be at least 1");
        }
        self.topology.validate()?;
        let n = self.topology.n;
        self.churn.validate(n).map_err(SimError::ConfigInvalid)?;
        self.policy.validate().map_err(SimError::ConfigInvalid)?;
        self.adversary.validate(n, self.epochs)?;
        self.accounting.validate()?;
        let w = &self.workload;
        for (f, v) in [
            ("workload.key_update_rate", w.key_update_rate),
            ("workload.new_edge_prob", w.new_edge_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{f} must be in [0, 1]"));
            }
        }
        if let Some(e) = w.new_edges.iter().find(|e| e.a >= n || e.b >= n || e.a == e.b) {
            return invalid(format!(
                "workload.new_edges: ({}, {}) is not a pair of distinct clients",
                e.a, e.b
            ));
        }
        if self.topology.kind != TopologyKind::RandomGnp {
            let t = self.topology.build(&mut rand::rngs::mock::StepRng::new(0, 0))?;
            self.clock
                .validate(t.max_component_diameter(&vec![true; n]))
                .map_err(SimError::ConfigInvalid)?;
        } else {
            self.clock.validate(1).map_err(SimError::ConfigInvalid)?;
        }
        for x in &self.expect {
            if x.formula.is_none() && x.value.is_none() {
                return invalid(format!("expect[{}]: needs a formula or a value", x.metric));
            }
        }
        Ok(())
    }

    pub fn is_attack(&self) -> bool {
        self.adversary.is_active()
    }

    /// Start of the attack's first full epoch.
    pub fn first_active_epoch(&self) -> u64 {
        self.adversary.launch_epoch + 1
    }
}

macro_rules! bundled_scenarios {
    ($($name:literal),* $(,)?) => {
        /// Names of the scenarios shipped with the crate.
        pub const BUNDLED: &[&str] = &[$($name),*];

        /// Text of a bundled scenario.
        pub fn bundled(name: &str) -> Option<&'static str> {
            match name {
                $($name => Some(include_str!(concat!("../scenarios/", $name, ".toml"))),)*
                _ => None,
            }
        }
    };
}

bundled_scenarios!(
    "accounting_reference",
    "akm_c1_m10",
    "akm_churn",
    "akm_general_f2_r2_m4",
    "honest_1000e",
    "honest_1000e_akm",
    "honest_1000e_ktaca",
    "isolation",
    "ktaca_n50",
    "ktca_gnp50",
    "ktca_ring10",
    "ktca_star101",
    "mass_update_naive",
    "mass_update_stealthy",
    "partition_ring10_cross",
    "partition_ring10_within",
    "prevention_oob",
    "short_lived_akm",
    "short_lived_ktaca",
    "short_lived_ktca",
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_scenario_parses() {
        for name in BUNDLED {
            Scenario::resolve(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_field_is_named() {
        let err = Scenario::parse(
            "name='x'\ndefense='ktca'\nepochs=2\nbogus=1\n[topology]\nkind='ring'\nn=4\n[clock]\nepoch_len=20000\ndelta=1000\nbig_delta=2000\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn clock_violation_is_named() {
        let err = Scenario::parse(
            "name='x'\ndefense='ktca'\nepochs=2\n[topology]\nkind='ring'\nn=10\n[clock]\nepoch_len=5000\ndelta=1000\nbig_delta=1100\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("clock.epoch_len"), "{err}");
    }

    #[test]
    fn json_form_is_accepted() {
        let sc = Scenario::resolve("ktca_ring10").unwrap();
        let json = serde_json::to_string(&sc).unwrap();
        assert_eq!(Scenario::parse(&json).unwrap(), sc);
    }
}
