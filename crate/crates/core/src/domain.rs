//! The deployment domain: node registry with lease-based liveness, the
//! hierarchical naming service, the home finder, shared-entity reference
//! counts, and the portal facade the CLI and the assembly machinery talk to.
//!
//! The domain manager is one service; registry mutations are serialized
//! behind its lock, reads are consistent snapshots. Deployment coordination
//! issues node calls outside the lock.

use crate::assembly::{AssemblyModel, AssemblyRecord, AssemblyStatus};
use crate::canonical;
use crate::model::{is_valid_binding_name, EntityRef, NodeMetaInfo};
use crate::transport::{Client, Network, RpcError, WireError};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("node {0:?} is already registered and live")]
    DuplicateNode(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("name {0:?} is already bound")]
    AlreadyBound(String),
    #[error("name {0:?} is not bound")]
    NotBound(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("{0} is in use")]
    InUse(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("unknown assembly {0:?}")]
    UnknownAssembly(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("assembly {id} is {status:?}, expected {expected}")]
    InvalidStatus {
        id: String,
        status: AssemblyStatus,
        expected: &'static str,
    },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("state file corrupt: {0}")]
    CorruptState(String),
}

impl DomainError {
    pub fn code(&self) -> &'static str {
        match self {
            DomainError::DuplicateNode(_) => "duplicate_node",
            DomainError::UnknownNode(_) => "unknown_node",
            DomainError::AlreadyBound(_) => "already_bound",
            DomainError::NotBound(_) => "not_bound",
            DomainError::InvalidName(_) => "invalid_name",
            DomainError::InUse(_) => "in_use",
            DomainError::UnknownModel(_) => "unknown_model",
            DomainError::UnknownAssembly(_) => "unknown_assembly",
            DomainError::DuplicateId(_) => "duplicate_id",
            DomainError::InvalidStatus { .. } => "invalid_status",
            DomainError::Io(_) => "io_failure",
            DomainError::CorruptState(_) => "corrupt_state",
        }
    }

    pub fn to_wire(&self) -> WireError {
        WireError::new(self.code(), self.to_string())
    }
}

/// One registered node agent.
#[derive(Debug, Clone)]
pub struct NodeRecord {
    pub address: String,
    pub meta: NodeMetaInfo,
    /// Lease is fresh (or the node just registered).
    pub reachable: bool,
    pub last_ping: Instant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomeRecord {
    pub home_ref: EntityRef,
    pub home_type: String,
}

/// Lifecycle of a shared entity (server, container, or home) usable by
/// several assemblies at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedPhase {
    Creating,
    Ready,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedEntity {
    pub phase: SharedPhase,
    pub refs: BTreeSet<String>,
}

/// Outcome of claiming a shared entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Claim {
    /// This caller owns creation; it must call `mark_ready` or `abort_claim`.
    Create,
    /// The entity already exists; the ref count was bumped.
    Reuse,
}

#[derive(Debug, Default)]
pub struct DomainState {
    pub nodes: BTreeMap<String, NodeRecord>,
    pub name_tree: BTreeMap<String, EntityRef>,
    pub home_registry: BTreeMap<String, HomeRecord>,
    pub shared: BTreeMap<String, SharedEntity>,
    pub models: BTreeMap<String, AssemblyModel>,
    pub assemblies: BTreeMap<String, AssemblyRecord>,
}

/// Node entry as reported by `get_domain_info`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainNodeInfo {
    pub meta: NodeMetaInfo,
    pub address: String,
    pub reachable: bool,
}

#[derive(Serialize, Deserialize)]
struct PersistedNode {
    address: String,
    meta: NodeMetaInfo,
}

#[derive(Serialize, Deserialize)]
struct PersistedState {
    nodes: BTreeMap<String, PersistedNode>,
    name_tree: BTreeMap<String, EntityRef>,
    home_registry: BTreeMap<String, HomeRecord>,
    shared: BTreeMap<String, SharedEntity>,
    models: BTreeMap<String, AssemblyModel>,
    assemblies: BTreeMap<String, AssemblyRecord>,
}

/// Domain manager configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainConfig {
    pub listen_addr: String,
    #[serde(default)]
    pub state_file: Option<PathBuf>,
    /// Agents ping every this many milliseconds; three missed leases mark a
    /// node unreachable.
    #[serde(default = "default_lease_ms")]
    pub lease_ms: u64,
}

fn default_lease_ms() -> u64 {
    5000
}

pub struct DomainCore {
    state: Mutex<DomainState>,
    shared_cv: Condvar,
    pub network: Arc<dyn Network>,
    state_file: Option<PathBuf>,
    pub lease: Duration,
    agent_conns: Mutex<HashMap<String, Client>>,
}

impl DomainCore {
    pub fn new(config: &DomainConfig, network: Arc<dyn Network>) -> Result<Arc<Self>, DomainError> {
        let mut state = DomainState::default();
        if let Some(path) = &config.state_file {
            if path.exists() {
                let bytes = std::fs::read(path)?;
                let persisted: PersistedState = canonical::from_slice(&bytes)
                    .map_err(|e| DomainError::CorruptState(e.to_string()))?;
                let now = Instant::now();
                state.nodes = persisted
                    .nodes
                    .into_iter()
                    .map(|(id, n)| {
                        (
                            id,
                            NodeRecord {
                                address: n.address,
                                meta: n.meta,
                                // Await re-registration before trusting it.
                                reachable: false,
                                last_ping: now,
                            },
                        )
                    })
                    .collect();
                state.name_tree = persisted.name_tree;
                state.home_registry = persisted.home_registry;
                state.models = persisted.models;
                state.assemblies = persisted.assemblies;
                // A deploy or teardown interrupted by the crash cannot
                // resume; its assembly lands in Failed where teardown can
                // finish the cleanup.
                for record in state.assemblies.values_mut() {
                    if matches!(
                        record.status,
                        AssemblyStatus::Deploying | AssemblyStatus::TearingDown
                    ) {
                        record.status = AssemblyStatus::Failed;
                    }
                }
                state.shared = persisted
                    .shared
                    .into_iter()
                    .filter(|(_, e)| e.phase == SharedPhase::Ready)
                    .collect();
            }
        }
        Ok(Arc::new(DomainCore {
            state: Mutex::new(state),
            shared_cv: Condvar::new(),
            network,
            state_file: config.state_file.clone(),
            lease: Duration::from_millis(config.lease_ms.max(1)),
            agent_conns: Mutex::new(HashMap::new()),
        }))
    }

    pub fn lock(&self) -> MutexGuard<'_, DomainState> {
        self.state.lock().unwrap()
    }

    /// Snapshot the registries to the state file (write-temp-then-rename).
    pub fn persist(&self, state: &DomainState) {
        let Some(path) = &self.state_file else { return };
        let persisted = PersistedState {
            nodes: state
                .nodes
                .iter()
                .map(|(id, n)| {
                    (
                        id.clone(),
                        PersistedNode {
                            address: n.address.clone(),
                            meta: n.meta.clone(),
                        },
                    )
                })
                .collect(),
            name_tree: state.name_tree.clone(),
            home_registry: state.home_registry.clone(),
            shared: state.shared.clone(),
            models: state.models.clone(),
            assemblies: state.assemblies.clone(),
        };
        let Ok(bytes) = canonical::to_bytes(&persisted) else {
            return;
        };
        let tmp = path.with_extension("tmp");
        if std::fs::write(&tmp, &bytes).is_ok() {
            let _ = std::fs::rename(&tmp, path);
        }
    }

    /// Client connection to a registered node's agent, cached per node.
    pub fn agent_client(&self, node_id: &str) -> Result<Client, DomainError> {
        {
            let conns = self.agent_conns.lock().unwrap();
            if let Some(client) = conns.get(node_id) {
                if !client.is_closed() {
                    return Ok(client.clone());
                }
            }
        }
        let address = {
            let state = self.lock();
            state
                .nodes
                .get(node_id)
                .map(|n| n.address.clone())
                .ok_or_else(|| DomainError::UnknownNode(node_id.to_string()))?
        };
        let client = self
            .network
            .connect(&address)
            .map_err(|_| DomainError::UnknownNode(format!("{node_id} unreachable")))?;
        self.agent_conns
            .lock()
            .unwrap()
            .insert(node_id.to_string(), client.clone());
        Ok(client)
    }

    // -- node registry ------------------------------------------------------

    /// Register a node agent. At most one live agent per node id: while a
    /// registration is live (lease fresh), a second one is rejected. An
    /// unreachable registration may be replaced.
    pub fn register_node(
        &self,
        node_id: &str,
        address: &str,
        meta: NodeMetaInfo,
    ) -> Result<(), DomainError> {
        let mut state = self.lock();
        if let Some(existing) = state.nodes.get(node_id) {
            if existing.reachable {
                return Err(DomainError::DuplicateNode(node_id.to_string()));
            }
        }
        state.nodes.insert(
            node_id.to_string(),
            NodeRecord {
                address: address.to_string(),
                meta,
                reachable: true,
                last_ping: Instant::now(),
            },
        );
        self.agent_conns.lock().unwrap().remove(node_id);
        self.persist(&state);
        Ok(())
    }

    /// Graceful deregistration. Assemblies hosting entities on the departing
    /// node degrade rather than disappear.
    pub fn deregister_node(&self, node_id: &str) -> Result<(), DomainError> {
        let mut state = self.lock();
        if state.nodes.remove(node_id).is_none() {
            return Err(DomainError::UnknownNode(node_id.to_string()));
        }
        degrade_assemblies_on(&mut state, node_id);
        self.agent_conns.lock().unwrap().remove(node_id);
        self.persist(&state);
        Ok(())
    }

    /// Lease renewal.
    pub fn ping(&self, node_id: &str) -> Result<(), DomainError> {
        let mut state = self.lock();
        let node = state
            .nodes
            .get_mut(node_id)
            .ok_or_else(|| DomainError::UnknownNode(node_id.to_string()))?;
        node.last_ping = Instant::now();
        node.reachable = true;
        Ok(())
    }

    /// Mark nodes that missed three leases unreachable and degrade the
    /// assemblies they host. Called periodically by the lease sweeper.
    pub fn sweep_leases(&self) {
        let cutoff = self.lease * 3;
        let mut state = self.lock();
        let stale: Vec<String> = state
            .nodes
            .iter()
            .filter(|(_, n)| n.reachable && n.last_ping.elapsed() > cutoff)
            .map(|(id, _)| id.clone())
            .collect();
        if stale.is_empty() {
            return;
        }
        for node_id in &stale {
            if let Some(node) = state.nodes.get_mut(node_id) {
                node.reachable = false;
            }
            degrade_assemblies_on(&mut state, node_id);
        }
        self.persist(&state);
    }

    pub fn node_address(&self, node_id: &str) -> Result<String, DomainError> {
        let state = self.lock();
        state
            .nodes
            .get(node_id)
            .map(|n| n.address.clone())
            .ok_or_else(|| DomainError::UnknownNode(node_id.to_string()))
    }

    pub fn node_is_reachable(&self, node_id: &str) -> bool {
        self.lock()
            .nodes
            .get(node_id)
            .map(|n| n.reachable)
            .unwrap_or(false)
    }

    /// One snapshot per registered node, freshly queried from its agent.
    /// Unreachable agents are reported with their last-known meta and a
    /// cleared reachability flag; the call itself never fails.
    pub fn get_domain_info(&self) -> Vec<DomainNodeInfo> {
        let targets: Vec<(String, String, bool, NodeMetaInfo)> = {
            let state = self.lock();
            state
                .nodes
                .iter()
                .map(|(id, n)| (id.clone(), n.address.clone(), n.reachable, n.meta.clone()))
                .collect()
        };
        let mut out = Vec::new();
        for (node_id, address, reachable, cached) in targets {
            let fresh = if reachable {
                self.agent_client(&node_id)
                    .ok()
                    .and_then(|client| client.call("node.get_meta_info", json!({})).ok())
                    .and_then(|v| serde_json::from_value::<NodeMetaInfo>(v).ok())
            } else {
                None
            };
            match fresh {
                Some(meta) => {
                    let mut state = self.lock();
                    if let Some(node) = state.nodes.get_mut(&node_id) {
                        node.meta = meta.clone();
                    }
                    out.push(DomainNodeInfo {
                        meta,
                        address,
                        reachable: true,
                    });
                }
                None => out.push(DomainNodeInfo {
                    meta: cached,
                    address,
                    reachable: false,
                }),
            }
        }
        out
    }

    // -- naming -----------------------------------------------------------------

    pub fn bind_name(&self, path: &str, entity: EntityRef) -> Result<(), DomainError> {
        if !is_valid_binding_name(path) {
            return Err(DomainError::InvalidName(path.to_string()));
        }
        let mut state = self.lock();
        if state.name_tree.contains_key(path) {
            return Err(DomainError::AlreadyBound(path.to_string()));
        }
        state.name_tree.insert(path.to_string(), entity);
        self.persist(&state);
        Ok(())
    }

    pub fn resolve_name(&self, path: &str) -> Result<EntityRef, DomainError> {
        let state = self.lock();
        state
            .name_tree
            .get(path)
            .cloned()
            .ok_or_else(|| DomainError::NotBound(path.to_string()))
    }

    pub fn unbind_name(&self, path: &str) -> Result<(), DomainError> {
        let mut state = self.lock();
        if state.name_tree.remove(path).is_none() {
            return Err(DomainError::NotBound(path.to_string()));
        }
        self.persist(&state);
        Ok(())
    }

    /// Bound paths under a `/`-separated prefix, sorted. The empty prefix
    /// lists everything; intermediate contexts are implicit.
    pub fn list_names(&self, prefix: &str) -> Vec<String> {
        let state = self.lock();
        state
            .name_tree
            .keys()
            .filter(|path| {
                prefix.is_empty()
                    || path.as_str() == prefix
                    || path.starts_with(&format!("{prefix}/"))
            })
            .cloned()
            .collect()
    }

    // -- home finder ---------------------------------------------------------------

    pub fn register_home(
        &self,
        name: &str,
        home_ref: EntityRef,
        home_type: &str,
    ) -> Result<(), DomainError> {
        if !is_valid_binding_name(name) {
            return Err(DomainError::InvalidName(name.to_string()));
        }
        let mut state = self.lock();
        if state.home_registry.contains_key(name) {
            return Err(DomainError::AlreadyBound(name.to_string()));
        }
        state.home_registry.insert(
            name.to_string(),
            HomeRecord {
                home_ref,
                home_type: home_type.to_string(),
            },
        );
        self.persist(&state);
        Ok(())
    }

    pub fn find_home_by_name(&self, name: &str) -> Result<HomeRecord, DomainError> {
        let state = self.lock();
        state
            .home_registry
            .get(name)
            .cloned()
            .ok_or_else(|| DomainError::NotBound(name.to_string()))
    }

    /// All homes of one home type, sorted by registry name.
    pub fn find_home_by_type(&self, home_type: &str) -> Vec<(String, EntityRef)> {
        let state = self.lock();
        state
            .home_registry
            .iter()
            .filter(|(_, rec)| rec.home_type == home_type)
            .map(|(name, rec)| (name.clone(), rec.home_ref.clone()))
            .collect()
    }

    pub fn unregister_home(&self, name: &str) -> Result<(), DomainError> {
        let mut state = self.lock();
        if state.home_registry.remove(name).is_none() {
            return Err(DomainError::NotBound(name.to_string()));
        }
        self.persist(&state);
        Ok(())
    }

    // -- shared entity reference counts ------------------------------------------

    /// Claim a shared entity on behalf of an assembly. If the entity does
    /// not exist the caller becomes its creator and must `mark_ready` (or
    /// `abort_claim`) once the node call finishes; concurrent claimants wait
    /// for that outcome.
    pub fn claim_entity(&self, key: &str, assembly_id: &str) -> Claim {
        let mut state = self.lock();
        loop {
            match state.shared.get_mut(key) {
                None => {
                    let mut refs = BTreeSet::new();
                    refs.insert(assembly_id.to_string());
                    state.shared.insert(
                        key.to_string(),
                        SharedEntity {
                            phase: SharedPhase::Creating,
                            refs,
                        },
                    );
                    return Claim::Create;
                }
                Some(entity) if entity.phase == SharedPhase::Ready => {
                    entity.refs.insert(assembly_id.to_string());
                    self.persist(&state);
                    return Claim::Reuse;
                }
                Some(_) => {
                    state = self.shared_cv.wait(state).unwrap();
                }
            }
        }
    }

    /// Claim an entity that must already exist (home reuse via the finder).
    pub fn claim_existing(&self, key: &str, assembly_id: &str) -> Result<(), DomainError> {
        let mut state = self.lock();
        loop {
            match state.shared.get_mut(key) {
                None => return Err(DomainError::NotBound(key.to_string())),
                Some(entity) if entity.phase == SharedPhase::Ready => {
                    entity.refs.insert(assembly_id.to_string());
                    self.persist(&state);
                    return Ok(());
                }
                Some(_) => {
                    state = self.shared_cv.wait(state).unwrap();
                }
            }
        }
    }

    pub fn mark_ready(&self, key: &str) {
        let mut state = self.lock();
        if let Some(entity) = state.shared.get_mut(key) {
            entity.phase = SharedPhase::Ready;
        }
        self.persist(&state);
        self.shared_cv.notify_all();
    }

    /// Creation failed: drop the claim entirely so a waiter can retry.
    pub fn abort_claim(&self, key: &str) {
        let mut state = self.lock();
        state.shared.remove(key);
        self.persist(&state);
        self.shared_cv.notify_all();
    }

    /// Drop one assembly's reference. Returns true when that was the last
    /// reference and the caller must destroy the underlying entity.
    pub fn release_entity(&self, key: &str, assembly_id: &str) -> bool {
        let mut state = self.lock();
        let last = match state.shared.get_mut(key) {
            None => false,
            Some(entity) => {
                entity.refs.remove(assembly_id);
                entity.refs.is_empty()
            }
        };
        if last {
            state.shared.remove(key);
        }
        self.persist(&state);
        last
    }

    /// Current reference count of a shared entity (introspection for tests
    /// and sweeps).
    pub fn entity_refcount(&self, key: &str) -> usize {
        self.lock().shared.get(key).map(|e| e.refs.len()).unwrap_or(0)
    }
}

/// Deployed assemblies with entities on this node degrade; no other status
/// has a degrade edge.
fn degrade_assemblies_on(state: &mut DomainState, node_id: &str) {
    for record in state.assemblies.values_mut() {
        if record.status == AssemblyStatus::Deployed
            && record
                .placement_map
                .values()
                .any(|p| p.node_id == node_id)
        {
            record.status = AssemblyStatus::Degraded;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::LoopbackNetwork;
    use std::collections::BTreeMap;

    fn test_core() -> Arc<DomainCore> {
        let config = DomainConfig {
            listen_addr: "domain".to_string(),
            state_file: None,
            lease_ms: 5000,
        };
        DomainCore::new(&config, LoopbackNetwork::new()).unwrap()
    }

    fn meta(node_id: &str) -> NodeMetaInfo {
        NodeMetaInfo {
            node_id: node_id.to_string(),
            os: "linux".to_string(),
            arch: "x86_64".to_string(),
            cpu_count: 4,
            mem_bytes: 0,
            properties: BTreeMap::new(),
            installed_archives: vec![],
            instance_load: 0,
        }
    }

    #[test]
    fn register_and_list_nodes() {
        let core = test_core();
        core.register_node("n1", "addr1", meta("n1")).unwrap();
        core.register_node("n2", "addr2", meta("n2")).unwrap();
        let ids: Vec<String> = core.lock().nodes.keys().cloned().collect();
        assert_eq!(ids, vec!["n1", "n2"]);
    }

    #[test]
    fn duplicate_live_registration_rejected() {
        let core = test_core();
        core.register_node("n1", "addr1", meta("n1")).unwrap();
        assert!(matches!(
            core.register_node("n1", "addr1b", meta("n1")),
            Err(DomainError::DuplicateNode(_))
        ));
        // An unreachable node may be replaced.
        core.lock().nodes.get_mut("n1").unwrap().reachable = false;
        core.register_node("n1", "addr1c", meta("n1")).unwrap();
        assert_eq!(core.node_address("n1").unwrap(), "addr1c");
    }

    #[test]
    fn deregister_unknown_node_fails() {
        let core = test_core();
        assert!(matches!(
            core.deregister_node("ghost"),
            Err(DomainError::UnknownNode(_))
        ));
        core.register_node("n1", "a", meta("n1")).unwrap();
        core.deregister_node("n1").unwrap();
        assert!(core.lock().nodes.is_empty());
    }

    #[test]
    fn registration_symmetry_against_reference_map() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let core = test_core();
        let mut rng = StdRng::seed_from_u64(5);
        let mut model: BTreeSet<String> = BTreeSet::new();
        for _ in 0..200 {
            let id = format!("n{}", rng.gen_range(0..5));
            if rng.gen_bool(0.5) {
                match core.register_node(&id, "a", meta(&id)) {
                    Ok(()) => assert!(model.insert(id)),
                    Err(DomainError::DuplicateNode(_)) => assert!(model.contains(&id)),
                    Err(e) => panic!("{e}"),
                }
            } else {
                match core.deregister_node(&id) {
                    Ok(()) => assert!(model.remove(&id)),
                    Err(DomainError::UnknownNode(_)) => assert!(!model.contains(&id)),
                    Err(e) => panic!("{e}"),
                }
            }
            let live: BTreeSet<String> = core.lock().nodes.keys().cloned().collect();
            assert_eq!(live, model);
        }
    }

    #[test]
    fn naming_bind_resolve_unbind() {
        let core = test_core();
        let target = EntityRef::node("n1");
        core.bind_name("services/echo", target.clone()).unwrap();
        assert_eq!(core.resolve_name("services/echo").unwrap(), target);
        assert!(matches!(
            core.bind_name("services/echo", target.clone()),
            Err(DomainError::AlreadyBound(_))
        ));
        assert!(matches!(
            core.resolve_name("services/ghost"),
            Err(DomainError::NotBound(_))
        ));
        core.unbind_name("services/echo").unwrap();
        assert!(matches!(
            core.unbind_name("services/echo"),
            Err(DomainError::NotBound(_))
        ));
    }

    #[test]
    fn list_names_matches_reference_map() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let core = test_core();
        let mut rng = StdRng::seed_from_u64(9);
        let mut reference = BTreeSet::new();
        for _ in 0..100 {
            let depth = rng.gen_range(1..4);
            let path: Vec<String> = (0..depth)
                .map(|_| format!("seg{}", rng.gen_range(0..10)))
                .collect();
            let path = path.join("/");
            if core.bind_name(&path, EntityRef::node("n1")).is_ok() {
                reference.insert(path);
            }
        }
        let listed = core.list_names("");
        let expected: Vec<String> = reference.iter().cloned().collect();
        assert_eq!(listed, expected);
        // Prefix listing matches manual filtering.
        let listed = core.list_names("seg1");
        let expected: Vec<String> = reference
            .iter()
            .filter(|p| *p == "seg1" || p.starts_with("seg1/"))
            .cloned()
            .collect();
        assert_eq!(listed, expected);
    }

    #[test]
    fn home_registry_roundtrip() {
        let core = test_core();
        let h1 = EntityRef::home("n1", "s", "c", "h1");
        let h2 = EntityRef::home("n2", "s", "c", "h2");
        core.register_home("a/h1", h1.clone(), "EchoHome").unwrap();
        core.register_home("a/h2", h2.clone(), "EchoHome").unwrap();
        assert_eq!(core.find_home_by_name("a/h1").unwrap().home_ref, h1);
        let by_type = core.find_home_by_type("EchoHome");
        assert_eq!(
            by_type,
            vec![("a/h1".to_string(), h1), ("a/h2".to_string(), h2)]
        );
        core.unregister_home("a/h1").unwrap();
        assert!(matches!(
            core.find_home_by_name("a/h1"),
            Err(DomainError::NotBound(_))
        ));
    }

    #[test]
    fn shared_entity_claims_count_references() {
        let core = test_core();
        assert_eq!(core.claim_entity("server:n1/web", "a"), Claim::Create);
        core.mark_ready("server:n1/web");
        assert_eq!(core.claim_entity("server:n1/web", "b"), Claim::Reuse);
        assert_eq!(core.entity_refcount("server:n1/web"), 2);
        assert!(!core.release_entity("server:n1/web", "a"));
        assert!(core.release_entity("server:n1/web", "b"));
        assert_eq!(core.entity_refcount("server:n1/web"), 0);
    }

    #[test]
    fn concurrent_claim_waits_for_creator() {
        let core = test_core();
        assert_eq!(core.claim_entity("server:n1/web", "a"), Claim::Create);
        let core2 = Arc::clone(&core);
        let waiter = std::thread::spawn(move || core2.claim_entity("server:n1/web", "b"));
        std::thread::sleep(Duration::from_millis(50));
        core.mark_ready("server:n1/web");
        assert_eq!(waiter.join().unwrap(), Claim::Reuse);
        assert_eq!(core.entity_refcount("server:n1/web"), 2);
    }

    #[test]
    fn aborted_claim_lets_waiter_create() {
        let core = test_core();
        assert_eq!(core.claim_entity("server:n1/web", "a"), Claim::Create);
        let core2 = Arc::clone(&core);
        let waiter = std::thread::spawn(move || core2.claim_entity("server:n1/web", "b"));
        std::thread::sleep(Duration::from_millis(50));
        core.abort_claim("server:n1/web");
        assert_eq!(waiter.join().unwrap(), Claim::Create);
    }

    #[test]
    fn exactly_one_concurrent_registration_wins() {
        for _ in 0..100 {
            let core = test_core();
            let barrier = Arc::new(std::sync::Barrier::new(2));
            let results: Vec<Result<(), DomainError>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..2)
                    .map(|i| {
                        let core = Arc::clone(&core);
                        let barrier = Arc::clone(&barrier);
                        scope.spawn(move || {
                            barrier.wait();
                            core.register_node("n1", &format!("addr{i}"), meta("n1"))
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
            let wins = results.iter().filter(|r| r.is_ok()).count();
            assert_eq!(wins, 1);
        }
    }
}
