// SPDX-License-Identifier: Apache-2.0

//! Scenario files: a topology, manifests, a strategy and the outcome the
//! run must produce. See `docs/scenario.md`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{run_attack, AttackError, AttackKind, Outcome};
use crate::ids::{PrincipalId, TenantId};
use crate::manifest::{parse_manifest, Manifest};
use crate::mgmt::Strategy;
use crate::protocol::AppOp;
use crate::samples::{self, SAMPLE_CODE};
use crate::topology::Topology;
use crate::world::World;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioOutcome {
    /// Honest run finished with every job completed and nothing flagged.
    Completed,
    Blocked,
    Detected,
    Harmless,
    #[serde(rename = "LEAK")]
    Leak,
    /// Honest run that did not complete.
    Failed,
}

impl From<Outcome> for ScenarioOutcome {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Blocked => ScenarioOutcome::Blocked,
            Outcome::Detected => ScenarioOutcome::Detected,
            Outcome::Harmless => ScenarioOutcome::Harmless,
            Outcome::Leak => ScenarioOutcome::Leak,
        }
    }
}

impl fmt::Display for ScenarioOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioOutcome::Leak => f.write_str("LEAK"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Topology(#[from] crate::topology::TopologyError),
    #[error("manifest {0}: {1}")]
    Manifest(PathBuf, crate::manifest::ManifestError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    World(#[from] crate::world::WorldError),
}

/// Either a path relative to the scenario file or the object itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ref<T> {
    Path(PathBuf),
    Inline(T),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    /// Placement behaviour for honest runs.
    #[serde(default)]
    pub placement: Strategy,
    /// Code loaded into each job's primary unit, as UTF-8.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    /// Echo round trips per job member in honest runs.
    #[serde(default = "one")]
    pub rounds: u32,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    /// Omitted: the strategy's own default world.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<Ref<Topology>>,
    /// Jobs of an honest run, submitted by tenants in turn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub manifests: Vec<PathBuf>,
    /// `honest` or the name of an attack.
    pub strategy: String,
    #[serde(default)]
    pub params: ScenarioParams,
    #[serde(default)]
    pub seed: u64,
    pub expected: ScenarioOutcome,
}

/// A scenario with its references resolved.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub topology: Option<Topology>,
    pub manifests: Vec<Manifest>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(path.into(), e))?;
        let config: ScenarioConfig = serde_json::from_str(&text).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Self::resolve(config, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(config: ScenarioConfig, base: &Path) -> Result<Self, ScenarioError> {
        if config.strategy != "honest" {
            config.strategy.parse::<AttackKind>()?;
        }
        let read = |p: &Path| {
            let p = base.join(p);
            std::fs::read(&p).map_err(|e| ScenarioError::Io(p, e))
        };
        let topology = match &config.topology {
            None => None,
            Some(Ref::Inline(t)) => {
                t.validate()?;
                Some(t.clone())
            }
            Some(Ref::Path(p)) => Some(Topology::parse(&String::from_utf8_lossy(&read(p)?))?),
        };
        let manifests = config
            .manifests
            .iter()
            .map(|p| read(p).and_then(|b| parse_manifest(&b).map_err(|e| ScenarioError::Manifest(p.clone(), e))))
            .collect::<Result<Vec<_>, _>>()?;
        if config.strategy == "honest" && manifests.is_empty() {
            return Err(ScenarioError::Invalid("an honest scenario needs at least one manifest".into()));
        }
        Ok(Self { config, topology, manifests })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub strategy: String,
    pub seed: u64,
    pub outcome: ScenarioOutcome,
    pub expected: ScenarioOutcome,
    pub notes: Vec<String>,
    pub findings: Vec<String>,
}

impl ScenarioReport {
    /// Whether the run met its expectation. In strict mode a harmless
    /// attack still counts as a failure.
    pub fn passed(&self, strict: bool) -> bool {
        self.outcome == self.expected && !(strict && self.outcome == ScenarioOutcome::Harmless)
    }
}

/// Runs `scenario`, with `seed` overriding the file's. Returns the report
/// and the world for trace output.
pub fn run(scenario: &Scenario, seed: Option<u64>) -> Result<(ScenarioReport, World), ScenarioError> {
    let c = &scenario.config;
    let seed = seed.unwrap_or(c.seed);
    let (outcome, notes, findings, world) = if c.strategy == "honest" {
        let topology = scenario.topology.clone().unwrap_or_else(samples::single_rack);
        let (outcome, notes, findings, w) = run_honest(&topology, &scenario.manifests, &c.params, seed)?;
        (outcome, notes, findings, w)
    } else {
        let kind: AttackKind = c.strategy.parse()?;
        let topology = scenario.topology.clone().unwrap_or_else(|| kind.default_topology());
        let (r, w) = run_attack(kind, &topology, seed)?;
        (r.outcome.into(), r.notes, r.findings, w)
    };
    let report = ScenarioReport {
        name: c.name.clone(),
        strategy: c.strategy.clone(),
        seed,
        outcome,
        expected: c.expected,
        notes,
        findings,
    };
    Ok((report, world))
}

type Honest = (ScenarioOutcome, Vec<String>, Vec<String>, World);

fn run_honest(topology: &Topology, manifests: &[Manifest], params: &ScenarioParams, seed: u64) -> Result<Honest, ScenarioError> {
    let mut w = World::new(topology, seed)?;
    w.mp.strategy = params.placement.clone();
    let code = params.code.as_deref().map_or(SAMPLE_CODE, str::as_bytes);
    let mut notes = Vec::new();
    let mut failed = false;
    let mut jobs = Vec::new();
    for (i, m) in manifests.iter().enumerate() {
        // Files carry the developer's signature over their own key; the
        // world's developer re-signs them.
        let m = w.sign_manifest(m.clone());
        let tenant = TenantId(i as u32 % topology.tenants.max(1));
        match w.launch(tenant, &m, code) {
            Ok(job) => {
                notes.push(format!("{} running as {job} for {tenant}", m.enclave_name));
                jobs.push(job);
            }
            Err(e) => {
                notes.push(format!("{} failed: {e}", m.enclave_name));
                failed = true;
            }
        }
    }
    for &job in &jobs {
        let s = w.session(job).expect("launched");
        let mut members: Vec<PrincipalId> = s.fdus().into_iter().map(PrincipalId::Fdu).collect();
        members.extend(s.nodes().into_iter().map(PrincipalId::Node));
        for round in 0..params.rounds {
            for &to in &members {
                let payload = format!("{job} round {round} to {to}").into_bytes();
                match w.exchange(job, to, AppOp::Echo(payload.clone())) {
                    Ok(got) if got == payload => {}
                    other => {
                        notes.push(format!("echo via {to}: {other:?}"));
                        failed = true;
                    }
                }
            }
        }
    }
    let mut findings = Vec::new();
    for &job in &jobs {
        if let Err(e) = w.terminate(job) {
            notes.push(format!("terminate {job}: {e}"));
            failed = true;
        }
        findings.extend(w.hygiene(job));
    }
    findings.extend(w.audit());
    let outcome = if !findings.is_empty() {
        ScenarioOutcome::Leak
    } else if failed {
        ScenarioOutcome::Failed
    } else {
        ScenarioOutcome::Completed
    };
    Ok((outcome, notes, findings, w))
}
