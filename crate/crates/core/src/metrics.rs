//! Per-trial records and their aggregate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::Cause;
use crate::id::ClientId;
use crate::predict;
use crate::scenario::{Expectation, Scenario, SimError, Who};

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.5758;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hit {
    pub epoch: u64,
    pub time_ms: u64,
}

/// What one simulated trial produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub launch_ms: Option<u64>,
    /// First hard detection at or after the launch.
    pub detection: Option<Hit>,
    pub cause: Option<Cause>,
    pub detectors: Vec<ClientId>,
    pub owner_detection: Option<Hit>,
    pub victim_detection: Option<Hit>,
    pub pom: Option<Hit>,
    pub owner_pom: Option<Hit>,
    pub victim_pom: Option<Hit>,
    /// Hard detections with no attack under way.
    pub false_positives: BTreeMap<Cause, u64>,
    pub heuristic_events: BTreeMap<Cause, u64>,
    pub bound_ms: Option<u64>,
    pub max_pom_latency_ms: Option<u64>,
    pub within_bound: Option<bool>,
    pub short_lived_ok: Option<bool>,
    pub prevented: Option<bool>,
    pub prevention_latency_ms: Option<u64>,
    pub app_messages: u64,
    pub app_under_fake: u64,
    pub new_edge_ms: Option<u64>,
    pub pom_before_new_edge: Option<bool>,
    pub pom_after_new_edge: Option<bool>,
    pub online_client_epochs: u64,
    pub bytes: BTreeMap<String, u64>,
    pub new_connections: u64,
    pub new_connection_bytes: u64,
    pub history_bytes: u64,
    pub clients: u64,
    pub probes: u64,
}

impl TrialRecord {
    fn hit(&self, who: Who, pom: bool) -> Option<Hit> {
        match (who, pom) {
            (Who::Any, false) => self.detection,
            (Who::Owner, false) => self.owner_detection,
            (Who::Victim, false) => self.victim_detection,
            (Who::Any, true) => self.pom,
            (Who::Owner, true) => self.owner_pom,
            (Who::Victim, true) => self.victim_pom,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateStat {
    pub successes: u64,
    pub trials: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RateStat {
    pub fn new(successes: u64, trials: u64) -> Self {
        let (ci_low, ci_high) = wilson(successes, trials, Z99);
        RateStat {
            successes,
            trials,
            rate: if trials == 0 {
                0.0
            } else {
                successes as f64 / trials as f64
            },
            ci_low,
            ci_high,
        }
    }

    fn of<'a>(recs: impl Iterator<Item = &'a Option<bool>>) -> Option<Self> {
        let (mut s, mut t) = (0, 0);
        for r in recs.flatten() {
            t += 1;
            s += *r as u64;
        }
        (t > 0).then(|| RateStat::new(s, t))
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionCheck {
    pub metric: String,
    pub who: Who,
    pub within_epochs: Option<u64>,
    pub expected: f64,
    pub measured: f64,
    pub tolerance: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scenario: String,
    pub defense: crate::client::Defense,
    pub seed: u64,
    pub trials: u64,
    pub epochs: u64,
    pub detection_rate: RateStat,
    pub owner_detection_rate: RateStat,
    pub victim_detection_rate: RateStat,
    pub pom_rate: RateStat,
    pub victim_pom_rate: RateStat,
    /// Cumulative rate of detection within `k+1` attack-active epochs.
    pub detection_curve: BTreeMap<String, Vec<f64>>,
    pub mean_detection_delay_ms: Option<f64>,
    pub max_detection_delay_ms: Option<u64>,
    pub pom_within_bound_rate: Option<RateStat>,
    pub max_pom_latency_ms: Option<u64>,
    pub bound_ms: Option<u64>,
    pub short_lived_pom_rate: Option<RateStat>,
    pub prevented_rate: Option<RateStat>,
    pub max_prevention_latency_ms: Option<u64>,
    pub app_messages: u64,
    pub app_under_fake: u64,
    pub pom_before_new_edge_rate: Option<RateStat>,
    pub pom_after_new_edge_rate: Option<RateStat>,
    pub core_false_positives: u64,
    pub false_positives: BTreeMap<Cause, u64>,
    /// Heuristic events per online client-epoch.
    pub heuristic_rates: BTreeMap<Cause, f64>,
    pub bytes_per_client_epoch: BTreeMap<String, f64>,
    pub bytes_per_new_connection: Option<f64>,
    pub mean_history_bytes_per_client: f64,
    pub probes_per_client_epoch: f64,
    pub predictions: Vec<PredictionCheck>,
}

impl Metrics {
    pub fn aggregate(sc: &Scenario, recs: &[TrialRecord]) -> Result<Self, SimError> {
        let n = recs.len() as u64;
        let rate = |who, pom| RateStat::new(recs.iter().filter(|r| r.hit(who, pom).is_some()).count() as u64, n);
        let first = sc.first_active_epoch();
        let span = sc.epochs.saturating_sub(first).max(1);
        let mut curve = BTreeMap::new();
        for (label, who, pom) in [
            ("any", Who::Any, false),
            ("owner", Who::Owner, false),
            ("victim", Who::Victim, false),
            ("victim_pom", Who::Victim, true),
        ] {
            let v = (1..=span)
                .map(|k| count_within(recs, who, pom, first, Some(k)) as f64 / n.max(1) as f64)
                .collect();
            curve.insert(label.to_string(), v);
        }
        let delays: Vec<u64> = recs
            .iter()
            .filter_map(|r| Some(r.detection?.time_ms.saturating_sub(r.launch_ms?)))
            .collect();
        let online: u64 = recs.iter().map(|r| r.online_client_epochs).sum::<u64>().max(1);
        let mut fp = BTreeMap::new();
        let mut heur = BTreeMap::new();
        let mut bytes: BTreeMap<String, u64> = BTreeMap::new();
        for r in recs {
            for (c, k) in &r.false_positives {
                *fp.entry(*c).or_insert(0) += k;
            }
            for (c, k) in &r.heuristic_events {
                *heur.entry(*c).or_insert(0u64) += k;
            }
            for (c, b) in &r.bytes {
                *bytes.entry(c.clone()).or_default() += b;
            }
        }
        let new_conn: u64 = recs.iter().map(|r| r.new_connections).sum();
        let clients: u64 = recs.iter().map(|r| r.clients).sum::<u64>().max(1);
        let mut m = Metrics {
            scenario: sc.name.clone(),
            defense: sc.defense,
            seed: sc.seed,
            trials: n,
            epochs: sc.epochs,
            detection_rate: rate(Who::Any, false),
            owner_detection_rate: rate(Who::Owner, false),
            victim_detection_rate: rate(Who::Victim, false),
            pom_rate: rate(Who::Any, true),
            victim_pom_rate: rate(Who::Victim, true),
            detection_curve: curve,
            mean_detection_delay_ms: (!delays.is_empty())
                .then(|| delays.iter().sum::<u64>() as f64 / delays.len() as f64),
            max_detection_delay_ms: delays.iter().copied().max(),
            pom_within_bound_rate: RateStat::of(recs.iter().map(|r| &r.within_bound)),
            max_pom_latency_ms: recs.iter().filter_map(|r| r.max_pom_latency_ms).max(),
            bound_ms: recs.iter().filter_map(|r| r.bound_ms).max(),
            short_lived_pom_rate: RateStat::of(recs.iter().map(|r| &r.short_lived_ok)),
            prevented_rate: RateStat::of(recs.iter().map(|r| &r.prevented)),
            max_prevention_latency_ms: recs.iter().filter_map(|r| r.prevention_latency_ms).max(),
            app_messages: recs.iter().map(|r| r.app_messages).sum(),
            app_under_fake: recs.iter().map(|r| r.app_under_fake).sum(),
            pom_before_new_edge_rate: RateStat::of(recs.iter().map(|r| &r.pom_before_new_edge)),
            pom_after_new_edge_rate: RateStat::of(recs.iter().map(|r| &r.pom_after_new_edge)),
            core_false_positives: fp.values().sum(),
            false_positives: fp,
            heuristic_rates: heur.into_iter().map(|(c, k)| (c, k as f64 / online as f64)).collect(),
            bytes_per_client_epoch: bytes.into_iter().map(|(c, b)| (c, b as f64 / online as f64)).collect(),
            bytes_per_new_connection: (new_conn > 0)
                .then(|| recs.iter().map(|r| r.new_connection_bytes).sum::<u64>() as f64 / new_conn as f64),
            mean_history_bytes_per_client: recs.iter().map(|r| r.history_bytes).sum::<u64>() as f64 / clients as f64,
            probes_per_client_epoch: recs.iter().map(|r| r.probes).sum::<u64>() as f64 / online as f64,
            predictions: Vec::new(),
        };
        for x in &sc.expect {
            m.predictions.push(check(&m, sc, recs, x)?);
        }
        Ok(m)
    }

    /// True unless some declared prediction failed.
    pub fn predictions_met(&self) -> bool {
        self.predictions.iter().all(|p| p.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }

    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let pct = |r: &RateStat| {
            format!(
                "{:.4} [{:.4}, {:.4}] ({}/{})",
                r.rate, r.ci_low, r.ci_high, r.successes, r.trials
            )
        };
        let _ = writeln!(
            s,
            "scenario {} ({:?}), {} trials x {} epochs, seed {}",
            self.scenario, self.defense, self.trials, self.epochs, self.seed
        );
        let _ = writeln!(s, "  detection rate        {}", pct(&self.detection_rate));
        let _ = writeln!(s, "  owner detection rate  {}", pct(&self.owner_detection_rate));
        let _ = writeln!(s, "  victim detection rate {}", pct(&self.victim_detection_rate));
        let _ = writeln!(s, "  PoM rate              {}", pct(&self.pom_rate));
        if let Some(d) = self.mean_detection_delay_ms {
            let _ = writeln!(
                s,
                "  detection delay       mean {:.1} ms, max {} ms",
                d,
                self.max_detection_delay_ms.unwrap_or(0)
            );
        }
        for (label, r) in [
            ("PoM within bound", &self.pom_within_bound_rate),
            ("short-lived PoM", &self.short_lived_pom_rate),
            ("prevented", &self.prevented_rate),
            ("PoM before new edge", &self.pom_before_new_edge_rate),
            ("PoM after new edge", &self.pom_after_new_edge_rate),
        ] {
            if let Some(r) = r {
                let _ = writeln!(s, "  {label:<21} {}", pct(r));
            }
        }
        if let (Some(m), Some(b)) = (self.max_pom_latency_ms, self.bound_ms) {
            let _ = writeln!(s, "  max PoM latency       {m} ms (bound {b} ms)");
        }
        let _ = writeln!(s, "  hard false positives  {}", self.core_false_positives);
        for (c, r) in &self.heuristic_rates {
            let _ = writeln!(s, "  {c} rate {r:.6} per client-epoch");
        }
        for (c, b) in &self.bytes_per_client_epoch {
            let _ = writeln!(s, "  bytes/client/epoch {c:<16} {b:.1}");
        }
        for p in &self.predictions {
            let _ = writeln!(
                s,
                "  expect {}{}{}: expected {:.6}, measured {:.6} -> {}",
                p.metric,
                match p.who {
                    Who::Any => String::new(),
                    w => format!(" ({w:?})").to_lowercase(),
                },
                p.within_epochs
                    .map(|k| format!(" within {k} epochs"))
                    .unwrap_or_default(),
                p.expected,
                p.measured,
                if p.pass { "ok" } else { "VIOLATED" }
            );
        }
        s
    }
}

fn count_within(recs: &[TrialRecord], who: Who, pom: bool, first: u64, within: Option<u64>) -> u64 {
    recs.iter()
        .filter(|r| match (r.hit(who, pom), within) {
            (Some(h), Some(k)) => h.epoch < first + k,
            (Some(_), None) => true,
            (None, _) => false,
        })
        .count() as u64
}

fn check(m: &Metrics, sc: &Scenario, recs: &[TrialRecord], x: &Expectation) -> Result<PredictionCheck, SimError> {
    let expected = match (&x.formula, x.value) {
        (Some(f), _) => {
            predict::predict(f, &x.params)
                .map_err(|e| SimError::ConfigInvalid(format!("expect[{}]: {e}", x.metric)))?
                .value
        }
        (None, Some(v)) => v,
        (None, None) => {
            return Err(SimError::ConfigInvalid(format!(
                "expect[{}]: needs a formula or a value",
                x.metric
            )))
        }
    };
    let first = sc.first_active_epoch();
    let n = recs.len() as u64;
    let stat: Option<RateStat> = match x.metric.as_str() {
        "detection_rate" => Some(RateStat::new(
            count_within(recs, x.who, false, first, x.within_epochs),
            n,
        )),
        "pom_rate" => Some(RateStat::new(
            count_within(recs, x.who, true, first, x.within_epochs),
            n,
        )),
        "pom_within_bound_rate" => m.pom_within_bound_rate,
        "short_lived_pom_rate" => m.short_lived_pom_rate,
        "prevented_rate" => m.prevented_rate,
        "pom_before_new_edge_rate" => m.pom_before_new_edge_rate,
        "pom_after_new_edge_rate" => m.pom_after_new_edge_rate,
        _ => None,
    };
    let measured = match (&stat, x.metric.as_str()) {
        (Some(s), _) => s.rate,
        (None, "core_false_positives") => m.core_false_positives as f64,
        (None, "app_under_fake") => m.app_under_fake as f64,
        (None, "max_pom_latency_ms") => m.max_pom_latency_ms.unwrap_or(u64::MAX) as f64,
        (None, "max_prevention_latency_ms") => m.max_prevention_latency_ms.unwrap_or(u64::MAX) as f64,
        (None, other) => match other.strip_prefix("bytes_per_client_epoch.") {
            Some(class) => m.bytes_per_client_epoch.get(class).copied().unwrap_or(0.0),
            None => return Err(SimError::ConfigInvalid(format!("expect: unknown metric {other:?}"))),
        },
    };
    let pass = match (x.tolerance, &stat) {
        (Some(t), _) => (measured - expected).abs() <= t + 1e-12,
        (None, Some(s)) => s.ci_low <= expected + 1e-12 && expected <= s.ci_high + 1e-12,
        (None, None) => match x.metric.as_str() {
            "max_pom_latency_ms" | "max_prevention_latency_ms" => measured <= expected,
            _ => measured == expected,
        },
    };
    Ok(PredictionCheck {
        metric: x.metric.clone(),
        who: x.who,
        within_epochs: x.within_epochs,
        expected,
        measured,
        tolerance: x.tolerance,
        ci: stat.map(|s| (s.ci_low, s.ci_high)),
        pass,
    })
}

/// One CSV row per trial.
#[derive(Debug, Serialize)]
struct CsvRow {
    trial: u64,
    detected: bool,
    detection_epoch: Option<u64>,
    detection_time_ms: Option<u64>,
    cause: Option<&'static str>,
    detectors: String,
    pom_present: bool,
    owner_detection_epoch: Option<u64>,
    victim_detection_epoch: Option<u64>,
    victim_pom_epoch: Option<u64>,
    within_bound: Option<bool>,
    max_pom_latency_ms: Option<u64>,
    short_lived_ok: Option<bool>,
    prevented: Option<bool>,
    app_under_fake: u64,
    false_positives: u64,
    heuristic_events: u64,
}

/// Per-trial table; columns are documented in the README.
pub fn trials_csv(recs: &[TrialRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in recs {
        w.serialize(CsvRow {
            trial: r.trial,
            detected: r.detection.is_some(),
            detection_epoch: r.detection.map(|h| h.epoch),
            detection_time_ms: r.detection.map(|h| h.time_ms),
            cause: r.cause.map(Cause::name),
            detectors: r.detectors.iter().map(ClientId::as_str).collect::<Vec<_>>().join(";"),
            pom_present: r.pom.is_some(),
            owner_detection_epoch: r.owner_detection.map(|h| h.epoch),
            victim_detection_epoch: r.victim_detection.map(|h| h.epoch),
            victim_pom_epoch: r.victim_pom.map(|h| h.epoch),
            within_bound: r.within_bound,
            max_pom_latency_ms: r.max_pom_latency_ms,
            short_lived_ok: r.short_lived_ok,
            prevented: r.prevented,
            app_under_fake: r.app_under_fake,
            false_positives: r.false_positives.values().sum(),
            heuristic_events: r.heuristic_events.values().sum(),
        })
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
}
