//! The per-machine runtime: node meta-info, the local archive store, and the
//! server / container / home / component-instance hierarchy with connectable
//! ports.
//!
//! Servers and containers are lightweight supervised entries inside the
//! agent process; the process boundary of a real application server sits
//! behind the same interface. Components are introspectable shells with one
//! of four built-in behaviors (null, echo, counter, relay).

use crate::archive::{ArchiveError, ArchiveStore, IndexEntry};
use crate::model::{
    check_port_compat, is_valid_identifier, AttrValue, Behavior, ComponentArchive, EntityKind,
    EntityRef, NodeMetaInfo, PortDecl, PortKind,
};
use crate::transport::{Client, Dispatcher, Network, OpDoc, RpcError, ServerHandle, WireError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex, Weak};
use std::thread;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("no such server {0:?}")]
    NoSuchServer(String),
    #[error("no such container {0:?}")]
    NoSuchContainer(String),
    #[error("archive {0:?} is not installed on this node")]
    ArchiveNotInstalled(String),
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("instance {0} is already configured")]
    AlreadyConfigured(String),
    #[error("port kind mismatch: {0}")]
    PortKindMismatch(String),
    #[error("simplex receptacle {0} is already connected")]
    AlreadyConnected(String),
    #[error("cannot resolve connection target: {0}")]
    UnresolvableTarget(String),
    #[error("port {0} is not connected")]
    NotConnected(String),
    #[error("unknown cookie {0:?}")]
    UnknownCookie(String),
    #[error("instance {0} is not active")]
    NotActive(String),
    #[error("no such port {0:?}")]
    NoSuchPort(String),
    #[error("relay receptacle of {0} is not connected")]
    RelayUnconnected(String),
    #[error("invalid identifier {0:?}")]
    InvalidId(String),
    #[error("{0} is in use")]
    InUse(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("remote error {code}: {detail}")]
    Remote { code: String, detail: String },
    #[error("transport failure: {0}")]
    Transport(String),
}

impl AgentError {
    pub fn code(&self) -> &str {
        match self {
            AgentError::NotFound(_) => "not_found",
            AgentError::DuplicateId(_) => "duplicate_id",
            AgentError::NoSuchServer(_) => "no_such_server",
            AgentError::NoSuchContainer(_) => "no_such_container",
            AgentError::ArchiveNotInstalled(_) => "archive_not_installed",
            AgentError::UnknownAttribute(_) => "unknown_attribute",
            AgentError::TypeMismatch(_) => "type_mismatch",
            AgentError::AlreadyConfigured(_) => "already_configured",
            AgentError::PortKindMismatch(_) => "port_kind_mismatch",
            AgentError::AlreadyConnected(_) => "already_connected",
            AgentError::UnresolvableTarget(_) => "unresolvable_target",
            AgentError::NotConnected(_) => "not_connected",
            AgentError::UnknownCookie(_) => "unknown_cookie",
            AgentError::NotActive(_) => "not_active",
            AgentError::NoSuchPort(_) => "no_such_port",
            AgentError::RelayUnconnected(_) => "relay_unconnected",
            AgentError::InvalidId(_) => "invalid_id",
            AgentError::InUse(_) => "in_use",
            AgentError::Archive(e) => e.code(),
            AgentError::Remote { code, .. } => code,
            AgentError::Transport(_) => "transport_failure",
        }
    }

    pub fn to_wire(&self) -> WireError {
        WireError::new(self.code(), self.to_string())
    }

    fn from_rpc(err: RpcError) -> Self {
        match err {
            RpcError::Remote { code, detail } => AgentError::Remote { code, detail },
            other => AgentError::Transport(other.to_string()),
        }
    }
}

/// Network address of one port on one instance, usable across nodes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PortAddress {
    pub node_id: String,
    /// Full entity-ref id of the instance.
    pub instance: String,
    pub port: String,
}

/// Connection records of one port. Receptacles and sources hold outbound
/// targets; facets and sinks hold inbound records for introspection only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortLinks {
    Simplex { target: Option<PortAddress> },
    Multiplex { targets: BTreeMap<String, PortAddress> },
    Source { targets: BTreeMap<String, PortAddress> },
    Inbound { sources: Vec<PortAddress> },
}

impl PortLinks {
    fn for_kind(kind: PortKind) -> PortLinks {
        match kind {
            PortKind::ReceptacleSimplex => PortLinks::Simplex { target: None },
            PortKind::ReceptacleMultiplex => PortLinks::Multiplex {
                targets: BTreeMap::new(),
            },
            PortKind::EventSource => PortLinks::Source {
                targets: BTreeMap::new(),
            },
            PortKind::Facet | PortKind::EventSink => PortLinks::Inbound { sources: Vec::new() },
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            PortLinks::Simplex { target } => target.is_none(),
            PortLinks::Multiplex { targets } | PortLinks::Source { targets } => targets.is_empty(),
            PortLinks::Inbound { sources } => sources.is_empty(),
        }
    }
}

#[derive(Debug)]
struct InstanceState {
    order: u64,
    attrs: BTreeMap<String, AttrValue>,
    configured: bool,
    ports: BTreeMap<String, PortLinks>,
    invocation_count: u64,
    sink_logs: BTreeMap<String, Vec<Vec<u8>>>,
}

#[derive(Debug)]
struct HomeState {
    order: u64,
    archive_id: String,
    manifest: crate::model::ArchiveManifest,
    home_attrs: BTreeMap<String, AttrValue>,
    instances: BTreeMap<String, InstanceState>,
}

#[derive(Debug, Default)]
struct ContainerState {
    order: u64,
    homes: BTreeMap<String, HomeState>,
}

#[derive(Debug, Default)]
struct ServerState {
    order: u64,
    containers: BTreeMap<String, ContainerState>,
}

#[derive(Debug, Default)]
struct AgentState {
    servers: BTreeMap<String, ServerState>,
    order_counter: u64,
}

impl AgentState {
    fn next_order(&mut self) -> u64 {
        self.order_counter += 1;
        self.order_counter
    }

    fn instance_load(&self) -> u64 {
        self.servers
            .values()
            .flat_map(|s| s.containers.values())
            .flat_map(|c| c.homes.values())
            .map(|h| h.instances.len() as u64)
            .sum()
    }

    fn live_homes_for(&self, archive_id: &str) -> usize {
        self.servers
            .values()
            .flat_map(|s| s.containers.values())
            .flat_map(|c| c.homes.values())
            .filter(|h| h.archive_id == archive_id)
            .count()
    }
}

/// Cookie-free view of an instance's ports, comparable across runs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortView {
    Simplex { target: Option<PortAddress> },
    Multiplex { targets: Vec<PortAddress> },
    Source { targets: Vec<PortAddress> },
    Inbound { sources: Vec<PortAddress> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSnapshot {
    pub attrs: BTreeMap<String, AttrValue>,
    pub configured: bool,
    pub ports: BTreeMap<String, PortView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomeSnapshot {
    pub archive_id: String,
    pub home_attrs: BTreeMap<String, AttrValue>,
    pub instances: BTreeMap<String, InstanceSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerSnapshot {
    pub homes: BTreeMap<String, HomeSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSnapshot {
    pub containers: BTreeMap<String, ContainerSnapshot>,
}

/// Full introspection of a node's entity hierarchy at one quiescent point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub node_id: String,
    pub servers: BTreeMap<String, ServerSnapshot>,
}

struct EventDelivery {
    targets: Vec<PortAddress>,
    payload: Vec<u8>,
}

/// Agent configuration, loadable from a canonical-JSON file and/or flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentConfig {
    pub node_id: String,
    pub domain_addr: String,
    pub listen_addr: String,
    pub store_root: PathBuf,
    #[serde(default)]
    pub properties: BTreeMap<String, String>,
    /// Lease ping interval in milliseconds.
    #[serde(default = "default_lease_ms")]
    pub lease_ms: u64,
}

fn default_lease_ms() -> u64 {
    5000
}

/// The per-node runtime service.
pub struct NodeAgent {
    node_id: String,
    properties: BTreeMap<String, String>,
    domain_addr: String,
    network: Arc<dyn Network>,
    store: Mutex<ArchiveStore>,
    state: Mutex<AgentState>,
    cookie_counter: AtomicU64,
    peers: Mutex<HashMap<String, Client>>,
    domain_conn: Mutex<Option<Client>>,
    events_tx: Mutex<Option<mpsc::Sender<EventDelivery>>>,
}

impl NodeAgent {
    pub fn new(config: &AgentConfig, network: Arc<dyn Network>) -> Result<Arc<Self>, AgentError> {
        if !is_valid_identifier(&config.node_id) {
            return Err(AgentError::InvalidId(config.node_id.clone()));
        }
        let store = ArchiveStore::open(&config.store_root)?;
        let agent = Arc::new(NodeAgent {
            node_id: config.node_id.clone(),
            properties: config.properties.clone(),
            domain_addr: config.domain_addr.clone(),
            network,
            store: Mutex::new(store),
            state: Mutex::new(AgentState::default()),
            cookie_counter: AtomicU64::new(1),
            peers: Mutex::new(HashMap::new()),
            domain_conn: Mutex::new(None),
            events_tx: Mutex::new(None),
        });
        agent.spawn_event_worker();
        Ok(agent)
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    fn spawn_event_worker(self: &Arc<Self>) {
        let (tx, rx) = mpsc::channel::<EventDelivery>();
        *self.events_tx.lock().unwrap() = Some(tx);
        let weak: Weak<NodeAgent> = Arc::downgrade(self);
        thread::spawn(move || {
            while let Ok(delivery) = rx.recv() {
                let Some(agent) = weak.upgrade() else { break };
                for target in &delivery.targets {
                    agent.deliver_one(target, &delivery.payload);
                }
            }
        });
    }

    fn deliver_one(&self, target: &PortAddress, payload: &[u8]) {
        if target.node_id == self.node_id {
            self.accept_event(&target.instance, &target.port, payload.to_vec());
            return;
        }
        if let Ok(peer) = self.peer(&target.node_id) {
            let args = json!({
                "instance": target.instance,
                "port": target.port,
                "payload": b64(payload),
            });
            // At-most-once: a failed send is dropped, never retried.
            let _ = peer.notify("node.deliver_event", args);
        }
    }

    /// Record an inbound event on a sink port. Unknown instances and ports
    /// are dropped silently; the emitter does not wait for delivery.
    fn accept_event(&self, instance_id: &str, port: &str, payload: Vec<u8>) {
        let mut state = self.state.lock().unwrap();
        if let Ok(inst) = resolve_instance(&mut state, &self.node_id, instance_id) {
            if let Some(log) = inst.sink_logs.get_mut(port) {
                log.push(payload);
            }
        }
    }

    fn peer(&self, node_id: &str) -> Result<Client, AgentError> {
        {
            let peers = self.peers.lock().unwrap();
            if let Some(client) = peers.get(node_id) {
                if !client.is_closed() {
                    return Ok(client.clone());
                }
            }
        }
        let domain = self.domain_client()?;
        let reply = domain
            .call("domain.node_address", json!({ "node_id": node_id }))
            .map_err(AgentError::from_rpc)?;
        let addr = reply
            .as_str()
            .ok_or_else(|| AgentError::UnresolvableTarget(format!("node {node_id:?}")))?
            .to_string();
        let client = self
            .network
            .connect(&addr)
            .map_err(|e| AgentError::UnresolvableTarget(format!("node {node_id:?}: {e}")))?;
        self.peers
            .lock()
            .unwrap()
            .insert(node_id.to_string(), client.clone());
        Ok(client)
    }

    fn domain_client(&self) -> Result<Client, AgentError> {
        {
            let conn = self.domain_conn.lock().unwrap();
            if let Some(client) = conn.as_ref() {
                if !client.is_closed() {
                    return Ok(client.clone());
                }
            }
        }
        let client = self
            .network
            .connect(&self.domain_addr)
            .map_err(|e| AgentError::Transport(e.to_string()))?;
        *self.domain_conn.lock().unwrap() = Some(client.clone());
        Ok(client)
    }

    // -- meta ---------------------------------------------------------------

    /// Fresh snapshot of this node's characteristics and load.
    pub fn get_meta_info(&self) -> NodeMetaInfo {
        let installed = self.store.lock().unwrap().list();
        let state = self.state.lock().unwrap();
        NodeMetaInfo {
            node_id: self.node_id.clone(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpu_count: thread::available_parallelism()
                .map(|n| n.get() as u32)
                .unwrap_or(1),
            mem_bytes: read_mem_total(),
            properties: self.properties.clone(),
            installed_archives: installed,
            instance_load: state.instance_load(),
        }
    }

    // -- archive facade -------------------------------------------------------

    pub fn install_archive(&self, id: &str, archive: &ComponentArchive) -> Result<(), AgentError> {
        Ok(self.store.lock().unwrap().install(id, archive)?)
    }

    pub fn install_archive_from_url(
        &self,
        id: &str,
        url: &str,
        expected_checksum: Option<&str>,
    ) -> Result<(), AgentError> {
        Ok(self
            .store
            .lock()
            .unwrap()
            .install_from_url(id, url, expected_checksum)?)
    }

    pub fn retrieve_archive(&self, id: &str) -> Result<ComponentArchive, AgentError> {
        Ok(self.store.lock().unwrap().retrieve(id)?)
    }

    pub fn list_archives(&self) -> Vec<String> {
        self.store.lock().unwrap().list()
    }

    pub fn archive_info(&self, id: &str) -> Option<IndexEntry> {
        self.store.lock().unwrap().entry(id).cloned()
    }

    /// Uninstall is rejected while any live home runs this archive.
    pub fn uninstall_archive(&self, id: &str) -> Result<(), AgentError> {
        let state = self.state.lock().unwrap();
        if state.live_homes_for(id) > 0 {
            return Err(AgentError::InUse(format!("archive {id:?}")));
        }
        let mut store = self.store.lock().unwrap();
        drop(state);
        Ok(store.uninstall(id)?)
    }

    /// Update is rejected while any live home runs this archive.
    pub fn update_archive(&self, id: &str, archive: &ComponentArchive) -> Result<(), AgentError> {
        let state = self.state.lock().unwrap();
        if state.live_homes_for(id) > 0 {
            return Err(AgentError::InUse(format!("archive {id:?}")));
        }
        let mut store = self.store.lock().unwrap();
        drop(state);
        Ok(store.update(id, archive)?)
    }

    // -- servers / containers -------------------------------------------------

    pub fn create_server(&self, server_id: &str) -> Result<EntityRef, AgentError> {
        if !is_valid_identifier(server_id) {
            return Err(AgentError::InvalidId(server_id.to_string()));
        }
        let mut state = self.state.lock().unwrap();
        if state.servers.contains_key(server_id) {
            return Err(AgentError::DuplicateId(server_id.to_string()));
        }
        let order = state.next_order();
        state.servers.insert(
            server_id.to_string(),
            ServerState {
                order,
                containers: BTreeMap::new(),
            },
        );
        Ok(EntityRef::server(&self.node_id, server_id))
    }

    /// Remove a server, cascading containers, homes, and instances in
    /// reverse creation order. Returns the destroyed entities in
    /// destruction order for the caller's trace.
    pub fn remove_server(&self, server_id: &str) -> Result<Vec<EntityRef>, AgentError> {
        let (removed, detaches) = {
            let mut state = self.state.lock().unwrap();
            let server = state
                .servers
                .remove(server_id)
                .ok_or_else(|| AgentError::NotFound(format!("server {server_id:?}")))?;
            let mut removed = Vec::new();
            let mut detaches = Vec::new();
            let server_ref = EntityRef::server(&self.node_id, server_id);
            cascade_server(
                &self.node_id,
                server_id,
                server,
                &mut removed,
                &mut detaches,
            );
            removed.push(server_ref);
            (removed, detaches)
        };
        self.send_detaches(detaches);
        Ok(removed)
    }

    pub fn list_servers(&self) -> Vec<EntityRef> {
        let state = self.state.lock().unwrap();
        state
            .servers
            .keys()
            .map(|id| EntityRef::server(&self.node_id, id))
            .collect()
    }

    pub fn create_container(
        &self,
        server_id: &str,
        container_id: &str,
    ) -> Result<EntityRef, AgentError> {
        if !is_valid_identifier(container_id) {
            return Err(AgentError::InvalidId(container_id.to_string()));
        }
        let mut state = self.state.lock().unwrap();
        let order = state.next_order();
        let server = state
            .servers
            .get_mut(server_id)
            .ok_or_else(|| AgentError::NoSuchServer(server_id.to_string()))?;
        if server.containers.contains_key(container_id) {
            return Err(AgentError::DuplicateId(container_id.to_string()));
        }
        server.containers.insert(
            container_id.to_string(),
            ContainerState {
                order,
                homes: BTreeMap::new(),
            },
        );
        Ok(EntityRef::container(&self.node_id, server_id, container_id))
    }

    pub fn remove_container(
        &self,
        server_id: &str,
        container_id: &str,
    ) -> Result<Vec<EntityRef>, AgentError> {
        let (removed, detaches) = {
            let mut state = self.state.lock().unwrap();
            let server = state
                .servers
                .get_mut(server_id)
                .ok_or_else(|| AgentError::NoSuchServer(server_id.to_string()))?;
            let container = server
                .containers
                .remove(container_id)
                .ok_or_else(|| AgentError::NotFound(format!("container {container_id:?}")))?;
            let mut removed = Vec::new();
            let mut detaches = Vec::new();
            cascade_container(
                &self.node_id,
                server_id,
                container_id,
                container,
                &mut removed,
                &mut detaches,
            );
            removed.push(EntityRef::container(&self.node_id, server_id, container_id));
            (removed, detaches)
        };
        self.send_detaches(detaches);
        Ok(removed)
    }

    pub fn list_containers(&self, server_id: &str) -> Result<Vec<EntityRef>, AgentError> {
        let state = self.state.lock().unwrap();
        let server = state
            .servers
            .get(server_id)
            .ok_or_else(|| AgentError::NoSuchServer(server_id.to_string()))?;
        Ok(server
            .containers
            .keys()
            .map(|id| EntityRef::container(&self.node_id, server_id, id))
            .collect())
    }

    // -- homes ----------------------------------------------------------------

    /// Install a home for an archive already present in this node's store.
    /// Home attributes start at their manifest defaults.
    pub fn install_home(
        &self,
        server_id: &str,
        container_id: &str,
        home_id: &str,
        archive_id: &str,
    ) -> Result<EntityRef, AgentError> {
        if !is_valid_identifier(home_id) {
            return Err(AgentError::InvalidId(home_id.to_string()));
        }
        let manifest = {
            let store = self.store.lock().unwrap();
            match store.entry(archive_id) {
                None => return Err(AgentError::ArchiveNotInstalled(archive_id.to_string())),
                Some(_) => store.retrieve(archive_id)?.manifest,
            }
        };
        let mut state = self.state.lock().unwrap();
        let order = state.next_order();
        let server = state
            .servers
            .get_mut(server_id)
            .ok_or_else(|| AgentError::NoSuchServer(server_id.to_string()))?;
        let container = server
            .containers
            .get_mut(container_id)
            .ok_or_else(|| AgentError::NoSuchContainer(container_id.to_string()))?;
        if container.homes.contains_key(home_id) {
            return Err(AgentError::DuplicateId(home_id.to_string()));
        }
        let home_attrs = manifest
            .home_attributes
            .iter()
            .filter_map(|a| a.default.clone().map(|d| (a.name.clone(), d)))
            .collect();
        container.homes.insert(
            home_id.to_string(),
            HomeState {
                order,
                archive_id: archive_id.to_string(),
                manifest,
                home_attrs,
                instances: BTreeMap::new(),
            },
        );
        Ok(EntityRef::home(
            &self.node_id,
            server_id,
            container_id,
            home_id,
        ))
    }

    pub fn remove_home(&self, home_ref: &EntityRef) -> Result<Vec<EntityRef>, AgentError> {
        let (removed, detaches) = {
            let mut state = self.state.lock().unwrap();
            let (server_id, container_id, home_id) = home_path(&self.node_id, home_ref)?;
            let server = state
                .servers
                .get_mut(&server_id)
                .ok_or_else(|| AgentError::NotFound(home_ref.id.clone()))?;
            let container = server
                .containers
                .get_mut(&container_id)
                .ok_or_else(|| AgentError::NotFound(home_ref.id.clone()))?;
            let home = container
                .homes
                .remove(&home_id)
                .ok_or_else(|| AgentError::NotFound(home_ref.id.clone()))?;
            let mut removed = Vec::new();
            let mut detaches = Vec::new();
            cascade_home(home_ref, home, &mut removed, &mut detaches);
            removed.push(home_ref.clone());
            (removed, detaches)
        };
        self.send_detaches(detaches);
        Ok(removed)
    }

    pub fn list_homes(
        &self,
        server_id: &str,
        container_id: &str,
    ) -> Result<Vec<EntityRef>, AgentError> {
        let state = self.state.lock().unwrap();
        let server = state
            .servers
            .get(server_id)
            .ok_or_else(|| AgentError::NoSuchServer(server_id.to_string()))?;
        let container = server
            .containers
            .get(container_id)
            .ok_or_else(|| AgentError::NoSuchContainer(container_id.to_string()))?;
        Ok(container
            .homes
            .keys()
            .map(|id| EntityRef::home(&self.node_id, server_id, container_id, id))
            .collect())
    }

    /// The manifest a live home was installed from.
    pub fn home_manifest(
        &self,
        home_ref: &EntityRef,
    ) -> Result<crate::model::ArchiveManifest, AgentError> {
        let mut state = self.state.lock().unwrap();
        let home = resolve_home(&mut state, &self.node_id, &home_ref.id)?;
        Ok(home.manifest.clone())
    }

    pub fn set_home_attr(
        &self,
        home_ref: &EntityRef,
        name: &str,
        value: &AttrValue,
    ) -> Result<(), AgentError> {
        let mut state = self.state.lock().unwrap();
        let home = resolve_home(&mut state, &self.node_id, &home_ref.id)?;
        let decl = home
            .manifest
            .home_attribute(name)
            .ok_or_else(|| AgentError::UnknownAttribute(name.to_string()))?;
        if decl.value_type != value.value_type() {
            return Err(AgentError::TypeMismatch(format!(
                "attribute {name:?} expects {:?}",
                decl.value_type
            )));
        }
        home.home_attrs.insert(name.to_string(), value.clone());
        Ok(())
    }

    pub fn get_home_attr(
        &self,
        home_ref: &EntityRef,
        name: &str,
    ) -> Result<Option<AttrValue>, AgentError> {
        let mut state = self.state.lock().unwrap();
        let home = resolve_home(&mut state, &self.node_id, &home_ref.id)?;
        Ok(home.home_attrs.get(name).cloned())
    }

    // -- instances --------------------------------------------------------------

    /// Create a component instance through a home. Attributes start at
    /// manifest defaults; the port table starts empty; `configured` is false.
    pub fn create_instance(
        &self,
        home_ref: &EntityRef,
        instance_id: &str,
    ) -> Result<EntityRef, AgentError> {
        if !is_valid_identifier(instance_id) {
            return Err(AgentError::InvalidId(instance_id.to_string()));
        }
        let mut state = self.state.lock().unwrap();
        let order = {
            let s: &mut AgentState = &mut state;
            s.next_order()
        };
        let home = resolve_home(&mut state, &self.node_id, &home_ref.id)?;
        if home.instances.contains_key(instance_id) {
            return Err(AgentError::DuplicateId(instance_id.to_string()));
        }
        let attrs = home
            .manifest
            .instance_attributes
            .iter()
            .filter_map(|a| a.default.clone().map(|d| (a.name.clone(), d)))
            .collect();
        let ports = home
            .manifest
            .ports
            .iter()
            .map(|p| (p.name.clone(), PortLinks::for_kind(p.kind)))
            .collect();
        let sink_logs = home
            .manifest
            .ports
            .iter()
            .filter(|p| p.kind == PortKind::EventSink)
            .map(|p| (p.name.clone(), Vec::new()))
            .collect();
        home.instances.insert(
            instance_id.to_string(),
            InstanceState {
                order,
                attrs,
                configured: false,
                ports,
                invocation_count: 0,
                sink_logs,
            },
        );
        Ok(EntityRef::instance(home_ref, instance_id))
    }

    pub fn remove_instance(&self, instance_ref: &EntityRef) -> Result<(), AgentError> {
        let detaches = {
            let mut state = self.state.lock().unwrap();
            let (home_id, instance_id) = split_instance_path(&self.node_id, instance_ref)?;
            let home = resolve_home(&mut state, &self.node_id, &home_id)?;
            let inst = home
                .instances
                .remove(&instance_id)
                .ok_or_else(|| AgentError::NotFound(instance_ref.id.clone()))?;
            collect_detaches(instance_ref, &inst)
        };
        self.send_detaches(detaches);
        Ok(())
    }

    pub fn list_instances(&self, home_ref: &EntityRef) -> Result<Vec<EntityRef>, AgentError> {
        let mut state = self.state.lock().unwrap();
        let home = resolve_home(&mut state, &self.node_id, &home_ref.id)?;
        Ok(home
            .instances
            .keys()
            .map(|id| EntityRef::instance(home_ref, id))
            .collect())
    }

    /// Instance attributes may only be set before `configuration_complete`.
    pub fn set_instance_attr(
        &self,
        instance_ref: &EntityRef,
        name: &str,
        value: &AttrValue,
    ) -> Result<(), AgentError> {
        let mut state = self.state.lock().unwrap();
        let (decl_type, inst) = {
            let (home_id, instance_id) = split_instance_path(&self.node_id, instance_ref)?;
            let home = resolve_home(&mut state, &self.node_id, &home_id)?;
            let decl = home
                .manifest
                .instance_attribute(name)
                .ok_or_else(|| AgentError::UnknownAttribute(name.to_string()))?
                .value_type;
            let inst = home
                .instances
                .get_mut(&instance_id)
                .ok_or_else(|| AgentError::NotFound(instance_ref.id.clone()))?;
            (decl, inst)
        };
        if inst.configured {
            return Err(AgentError::AlreadyConfigured(instance_ref.id.clone()));
        }
        if decl_type != value.value_type() {
            return Err(AgentError::TypeMismatch(format!(
                "attribute {name:?} expects {decl_type:?}"
            )));
        }
        inst.attrs.insert(name.to_string(), value.clone());
        Ok(())
    }

    pub fn get_instance_attr(
        &self,
        instance_ref: &EntityRef,
        name: &str,
    ) -> Result<Option<AttrValue>, AgentError> {
        let mut state = self.state.lock().unwrap();
        let inst = resolve_instance(&mut state, &self.node_id, &instance_ref.id)?;
        Ok(inst.attrs.get(name).cloned())
    }

    /// Freeze configuration and activate the instance's behavior. One-shot.
    pub fn configuration_complete(&self, instance_ref: &EntityRef) -> Result<(), AgentError> {
        let mut state = self.state.lock().unwrap();
        let inst = resolve_instance(&mut state, &self.node_id, &instance_ref.id)?;
        if inst.configured {
            return Err(AgentError::AlreadyConfigured(instance_ref.id.clone()));
        }
        inst.configured = true;
        inst.invocation_count = 0;
        Ok(())
    }

    // -- connections ----------------------------------------------------------

    /// Wire a receptacle or event source to a facet or sink, possibly on
    /// another node. Multiplex receptacles and sources return a fresh cookie
    /// per connection; simplex receptacles return none and reject a second
    /// connect.
    pub fn connect(
        &self,
        from_ref: &EntityRef,
        from_port: &str,
        to: &PortAddress,
    ) -> Result<Option<String>, AgentError> {
        // Validate the local end and capture the origin declaration.
        let from_decl: PortDecl = {
            let mut state = self.state.lock().unwrap();
            let (home_id, instance_id) = split_instance_path(&self.node_id, from_ref)?;
            let home = resolve_home(&mut state, &self.node_id, &home_id)?;
            let decl = home
                .manifest
                .port(from_port)
                .ok_or_else(|| AgentError::NoSuchPort(from_port.to_string()))?
                .clone();
            let inst = home
                .instances
                .get(&instance_id)
                .ok_or_else(|| AgentError::NotFound(from_ref.id.clone()))?;
            if !decl.kind.is_origin() {
                return Err(AgentError::PortKindMismatch(format!(
                    "{:?} port {from_port:?} cannot originate a connection",
                    decl.kind
                )));
            }
            if let Some(PortLinks::Simplex { target: Some(_) }) = inst.ports.get(from_port) {
                return Err(AgentError::AlreadyConnected(format!(
                    "{}:{from_port}",
                    from_ref.id
                )));
            }
            decl
        };

        let from_addr = PortAddress {
            node_id: self.node_id.clone(),
            instance: from_ref.id.clone(),
            port: from_port.to_string(),
        };

        // Validate and record the target end, locally or on its node.
        if to.node_id == self.node_id {
            self.attach_inbound_local(to, &from_addr, from_decl.kind, &from_decl.interface_type)?;
        } else {
            let peer = self
                .peer(&to.node_id)
                .map_err(|e| AgentError::UnresolvableTarget(e.to_string()))?;
            let args = json!({
                "instance": to.instance,
                "port": to.port,
                "from": from_addr,
                "from_kind": from_decl.kind,
                "from_interface": from_decl.interface_type,
            });
            peer.call("node.attach_inbound", args)
                .map_err(|e| match e {
                    RpcError::Remote { code, detail } => match code.as_str() {
                        "not_found" | "no_such_port" => AgentError::UnresolvableTarget(detail),
                        "type_mismatch" => AgentError::TypeMismatch(detail),
                        "port_kind_mismatch" => AgentError::PortKindMismatch(detail),
                        _ => AgentError::Remote { code, detail },
                    },
                    other => AgentError::UnresolvableTarget(other.to_string()),
                })?;
        }

        // Commit the outbound record, re-checking simplex exclusivity.
        let commit = {
            let mut state = self.state.lock().unwrap();
            let inst = resolve_instance(&mut state, &self.node_id, &from_ref.id)?;
            match inst.ports.get_mut(from_port) {
                Some(PortLinks::Simplex { target }) => {
                    if target.is_some() {
                        Err(AgentError::AlreadyConnected(format!(
                            "{}:{from_port}",
                            from_ref.id
                        )))
                    } else {
                        *target = Some(to.clone());
                        Ok(None)
                    }
                }
                Some(PortLinks::Multiplex { targets }) | Some(PortLinks::Source { targets }) => {
                    let cookie = format!("ck-{}", self.cookie_counter.fetch_add(1, Ordering::Relaxed));
                    targets.insert(cookie.clone(), to.clone());
                    Ok(Some(cookie))
                }
                _ => Err(AgentError::PortKindMismatch(from_port.to_string())),
            }
        };
        match commit {
            Ok(cookie) => Ok(cookie),
            Err(e) => {
                // Lost the race: roll the inbound record back, best-effort.
                self.send_detaches(vec![(to.clone(), from_addr)]);
                Err(e)
            }
        }
    }

    fn attach_inbound_local(
        &self,
        to: &PortAddress,
        from: &PortAddress,
        from_kind: PortKind,
        from_interface: &str,
    ) -> Result<(), AgentError> {
        let mut state = self.state.lock().unwrap();
        let to_decl: PortDecl = {
            let (home_id, instance_id) = split_instance_id(&self.node_id, &to.instance)?;
            let home = resolve_home(&mut state, &self.node_id, &home_id)?;
            if !home.instances.contains_key(&instance_id) {
                return Err(AgentError::NotFound(to.instance.clone()));
            }
            home.manifest
                .port(&to.port)
                .ok_or_else(|| AgentError::NoSuchPort(to.port.clone()))?
                .clone()
        };
        let from_decl = PortDecl {
            name: from.port.clone(),
            kind: from_kind,
            interface_type: from_interface.to_string(),
        };
        if !to_decl.kind.is_target() {
            return Err(AgentError::PortKindMismatch(format!(
                "{:?} port {:?} cannot accept a connection",
                to_decl.kind, to.port
            )));
        }
        if !check_port_compat(&from_decl, &to_decl) {
            if from_decl.interface_type != to_decl.interface_type {
                return Err(AgentError::TypeMismatch(format!(
                    "interface {:?} does not match {:?}",
                    from_decl.interface_type, to_decl.interface_type
                )));
            }
            return Err(AgentError::PortKindMismatch(format!(
                "{:?} cannot connect to {:?}",
                from_decl.kind, to_decl.kind
            )));
        }
        let inst = resolve_instance(&mut state, &self.node_id, &to.instance)?;
        if let Some(PortLinks::Inbound { sources }) = inst.ports.get_mut(&to.port) {
            if !sources.contains(from) {
                sources.push(from.clone());
            }
        }
        Ok(())
    }

    fn detach_inbound_local(&self, to: &PortAddress, from: &PortAddress) {
        let mut state = self.state.lock().unwrap();
        if let Ok(inst) = resolve_instance(&mut state, &self.node_id, &to.instance) {
            if let Some(PortLinks::Inbound { sources }) = inst.ports.get_mut(&to.port) {
                sources.retain(|s| s != from);
            }
        }
    }

    fn send_detaches(&self, detaches: Vec<(PortAddress, PortAddress)>) {
        for (to, from) in detaches {
            if to.node_id == self.node_id {
                self.detach_inbound_local(&to, &from);
            } else if let Ok(peer) = self.peer(&to.node_id) {
                let _ = peer.notify(
                    "node.detach_inbound",
                    json!({ "instance": to.instance, "port": to.port, "from": from }),
                );
            }
        }
    }

    pub fn disconnect(
        &self,
        instance_ref: &EntityRef,
        port: &str,
        cookie: Option<&str>,
    ) -> Result<(), AgentError> {
        let target = {
            let mut state = self.state.lock().unwrap();
            let inst = resolve_instance(&mut state, &self.node_id, &instance_ref.id)?;
            let links = inst
                .ports
                .get_mut(port)
                .ok_or_else(|| AgentError::NoSuchPort(port.to_string()))?;
            match links {
                PortLinks::Simplex { target } => {
                    if cookie.is_some() {
                        return Err(AgentError::UnknownCookie(
                            "simplex receptacles take no cookie".to_string(),
                        ));
                    }
                    target
                        .take()
                        .ok_or_else(|| AgentError::NotConnected(port.to_string()))?
                }
                PortLinks::Multiplex { targets } | PortLinks::Source { targets } => {
                    let cookie = cookie.ok_or_else(|| {
                        AgentError::UnknownCookie("cookie required".to_string())
                    })?;
                    targets
                        .remove(cookie)
                        .ok_or_else(|| AgentError::UnknownCookie(cookie.to_string()))?
                }
                PortLinks::Inbound { .. } => {
                    return Err(AgentError::PortKindMismatch(format!(
                        "{port:?} holds no outbound connections"
                    )))
                }
            }
        };
        let from = PortAddress {
            node_id: self.node_id.clone(),
            instance: instance_ref.id.clone(),
            port: port.to_string(),
        };
        self.send_detaches(vec![(target, from)]);
        Ok(())
    }

    // -- invocation and events --------------------------------------------------

    /// Invoke a facet on an active instance. The result is behavior-defined:
    /// null returns empty, echo returns the payload, counter returns its
    /// big-endian invocation count, relay forwards to the facet wired to its
    /// first simplex receptacle.
    pub fn invoke_facet(
        &self,
        instance_ref: &EntityRef,
        facet: &str,
        payload: &[u8],
    ) -> Result<Vec<u8>, AgentError> {
        enum Action {
            Immediate(Vec<u8>),
            Forward(PortAddress),
        }
        let action = {
            let mut state = self.state.lock().unwrap();
            let (home_id, instance_id) = split_instance_path(&self.node_id, instance_ref)?;
            let home = resolve_home(&mut state, &self.node_id, &home_id)?;
            let decl = home
                .manifest
                .port(facet)
                .ok_or_else(|| AgentError::NoSuchPort(facet.to_string()))?;
            if decl.kind != PortKind::Facet {
                return Err(AgentError::NoSuchPort(format!("{facet:?} is not a facet")));
            }
            let behavior = home.manifest.behavior;
            let relay_port = home
                .manifest
                .ports
                .iter()
                .find(|p| p.kind == PortKind::ReceptacleSimplex)
                .map(|p| p.name.clone());
            let inst = home
                .instances
                .get_mut(&instance_id)
                .ok_or_else(|| AgentError::NotFound(instance_ref.id.clone()))?;
            if !inst.configured {
                return Err(AgentError::NotActive(instance_ref.id.clone()));
            }
            match behavior {
                Behavior::Null => Action::Immediate(Vec::new()),
                Behavior::Echo => Action::Immediate(payload.to_vec()),
                Behavior::Counter => {
                    inst.invocation_count += 1;
                    Action::Immediate(inst.invocation_count.to_be_bytes().to_vec())
                }
                Behavior::Relay => {
                    let port_name = relay_port
                        .ok_or_else(|| AgentError::RelayUnconnected(instance_ref.id.clone()))?;
                    match inst.ports.get(&port_name) {
                        Some(PortLinks::Simplex { target: Some(addr) }) => {
                            Action::Forward(addr.clone())
                        }
                        _ => return Err(AgentError::RelayUnconnected(instance_ref.id.clone())),
                    }
                }
            }
        };
        match action {
            Action::Immediate(bytes) => Ok(bytes),
            Action::Forward(addr) => self.invoke_remote(&addr, payload),
        }
    }

    fn invoke_remote(&self, addr: &PortAddress, payload: &[u8]) -> Result<Vec<u8>, AgentError> {
        if addr.node_id == self.node_id {
            let target_ref = instance_ref_from_id(&self.node_id, &addr.instance);
            return self.invoke_facet(&target_ref, &addr.port, payload);
        }
        let peer = self.peer(&addr.node_id)?;
        let reply = peer
            .call(
                "node.invoke_facet",
                json!({ "instance": addr.instance, "facet": addr.port, "payload": b64(payload) }),
            )
            .map_err(AgentError::from_rpc)?;
        un_b64(reply["payload"].as_str().unwrap_or_default())
            .map_err(|e| AgentError::Transport(format!("bad payload encoding: {e}")))
    }

    /// Publish an event from a source port. Delivery is asynchronous,
    /// at-most-once per connected sink, FIFO per (source, sink) pair; the
    /// call returns without waiting. Zero connected sinks is a no-op.
    pub fn emit_event(
        &self,
        instance_ref: &EntityRef,
        source_port: &str,
        payload: &[u8],
    ) -> Result<(), AgentError> {
        let targets: Vec<PortAddress> = {
            let mut state = self.state.lock().unwrap();
            let (home_id, instance_id) = split_instance_path(&self.node_id, instance_ref)?;
            let home = resolve_home(&mut state, &self.node_id, &home_id)?;
            let decl = home
                .manifest
                .port(source_port)
                .ok_or_else(|| AgentError::NoSuchPort(source_port.to_string()))?;
            if decl.kind != PortKind::EventSource {
                return Err(AgentError::PortKindMismatch(format!(
                    "{source_port:?} is not an event source"
                )));
            }
            let inst = home
                .instances
                .get(&instance_id)
                .ok_or_else(|| AgentError::NotFound(instance_ref.id.clone()))?;
            if !inst.configured {
                return Err(AgentError::NotActive(instance_ref.id.clone()));
            }
            match inst.ports.get(source_port) {
                Some(PortLinks::Source { targets }) => targets.values().cloned().collect(),
                _ => Vec::new(),
            }
        };
        if targets.is_empty() {
            return Ok(());
        }
        if let Some(tx) = self.events_tx.lock().unwrap().as_ref() {
            let _ = tx.send(EventDelivery {
                targets,
                payload: payload.to_vec(),
            });
        }
        Ok(())
    }

    /// Events recorded by a sink port, in delivery order.
    pub fn read_sink(
        &self,
        instance_ref: &EntityRef,
        sink_port: &str,
    ) -> Result<Vec<Vec<u8>>, AgentError> {
        let mut state = self.state.lock().unwrap();
        let inst = resolve_instance(&mut state, &self.node_id, &instance_ref.id)?;
        inst.sink_logs
            .get(sink_port)
            .cloned()
            .ok_or_else(|| AgentError::NoSuchPort(sink_port.to_string()))
    }

    // -- introspection ----------------------------------------------------------

    pub fn snapshot(&self) -> NodeSnapshot {
        let state = self.state.lock().unwrap();
        NodeSnapshot {
            node_id: self.node_id.clone(),
            servers: state
                .servers
                .iter()
                .map(|(sid, server)| {
                    (
                        sid.clone(),
                        ServerSnapshot {
                            containers: server
                                .containers
                                .iter()
                                .map(|(cid, container)| {
                                    (
                                        cid.clone(),
                                        ContainerSnapshot {
                                            homes: container
                                                .homes
                                                .iter()
                                                .map(|(hid, home)| (hid.clone(), snapshot_home(home)))
                                                .collect(),
                                        },
                                    )
                                })
                                .collect(),
                        },
                    )
                })
                .collect(),
        }
    }
}

fn snapshot_home(home: &HomeState) -> HomeSnapshot {
    HomeSnapshot {
        archive_id: home.archive_id.clone(),
        home_attrs: home.home_attrs.clone(),
        instances: home
            .instances
            .iter()
            .map(|(iid, inst)| {
                (
                    iid.clone(),
                    InstanceSnapshot {
                        attrs: inst.attrs.clone(),
                        configured: inst.configured,
                        ports: inst
                            .ports
                            .iter()
                            .map(|(name, links)| (name.clone(), view_of(links)))
                            .collect(),
                    },
                )
            })
            .collect(),
    }
}

fn view_of(links: &PortLinks) -> PortView {
    match links {
        PortLinks::Simplex { target } => PortView::Simplex {
            target: target.clone(),
        },
        PortLinks::Multiplex { targets } => {
            let mut t: Vec<_> = targets.values().cloned().collect();
            t.sort();
            PortView::Multiplex { targets: t }
        }
        PortLinks::Source { targets } => {
            let mut t: Vec<_> = targets.values().cloned().collect();
            t.sort();
            PortView::Source { targets: t }
        }
        PortLinks::Inbound { sources } => {
            let mut s = sources.clone();
            s.sort();
            PortView::Inbound { sources: s }
        }
    }
}

// -- path resolution helpers ----------------------------------------------------

fn home_path(node_id: &str, home_ref: &EntityRef) -> Result<(String, String, String), AgentError> {
    if home_ref.kind != EntityKind::Home {
        return Err(AgentError::NotFound(home_ref.id.clone()));
    }
    let segments = home_ref.segments();
    match segments.as_slice() {
        [node, server, container, home] if *node == node_id => {
            Ok((server.to_string(), container.to_string(), home.to_string()))
        }
        _ => Err(AgentError::NotFound(home_ref.id.clone())),
    }
}

fn split_instance_path(
    node_id: &str,
    instance_ref: &EntityRef,
) -> Result<(String, String), AgentError> {
    if instance_ref.kind != EntityKind::Instance {
        return Err(AgentError::NotFound(instance_ref.id.clone()));
    }
    split_instance_id(node_id, &instance_ref.id)
}

/// Split `node/server/container/home/instance` into the home path and the
/// instance id.
fn split_instance_id(node_id: &str, id: &str) -> Result<(String, String), AgentError> {
    let segments: Vec<&str> = id.split('/').collect();
    match segments.as_slice() {
        [node, server, container, home, instance] if *node == node_id => Ok((
            format!("{node}/{server}/{container}/{home}"),
            instance.to_string(),
        )),
        _ => Err(AgentError::NotFound(id.to_string())),
    }
}

fn instance_ref_from_id(node_id: &str, id: &str) -> EntityRef {
    EntityRef {
        kind: EntityKind::Instance,
        id: id.to_string(),
        node_id: node_id.to_string(),
    }
}

fn resolve_home<'a>(
    state: &'a mut AgentState,
    node_id: &str,
    home_id: &str,
) -> Result<&'a mut HomeState, AgentError> {
    let segments: Vec<String> = home_id.split('/').map(str::to_string).collect();
    let [node, server, container, home] = segments.as_slice() else {
        return Err(AgentError::NotFound(home_id.to_string()));
    };
    if node != node_id {
        return Err(AgentError::NotFound(home_id.to_string()));
    }
    state
        .servers
        .get_mut(server)
        .and_then(|s| s.containers.get_mut(container))
        .and_then(|c| c.homes.get_mut(home))
        .ok_or_else(|| AgentError::NotFound(home_id.to_string()))
}

fn resolve_instance<'a>(
    state: &'a mut AgentState,
    node_id: &str,
    instance_id: &str,
) -> Result<&'a mut InstanceState, AgentError> {
    let (home_id, iid) = split_instance_id(node_id, instance_id)?;
    let home = resolve_home(state, node_id, &home_id)?;
    home.instances
        .get_mut(&iid)
        .ok_or_else(|| AgentError::NotFound(instance_id.to_string()))
}

// -- cascade helpers --------------------------------------------------------------

/// Outbound links of an instance being destroyed, as (target, from) pairs
/// whose inbound records must be cleared.
fn collect_detaches(
    instance_ref: &EntityRef,
    inst: &InstanceState,
) -> Vec<(PortAddress, PortAddress)> {
    let mut out = Vec::new();
    for (port, links) in &inst.ports {
        let from = PortAddress {
            node_id: instance_ref.node_id.clone(),
            instance: instance_ref.id.clone(),
            port: port.clone(),
        };
        match links {
            PortLinks::Simplex { target: Some(t) } => out.push((t.clone(), from)),
            PortLinks::Multiplex { targets } | PortLinks::Source { targets } => {
                for t in targets.values() {
                    out.push((t.clone(), from.clone()));
                }
            }
            _ => {}
        }
    }
    out
}

fn cascade_home(
    home_ref: &EntityRef,
    home: HomeState,
    removed: &mut Vec<EntityRef>,
    detaches: &mut Vec<(PortAddress, PortAddress)>,
) {
    let mut instances: Vec<_> = home.instances.into_iter().collect();
    instances.sort_by_key(|(_, inst)| std::cmp::Reverse(inst.order));
    for (iid, inst) in instances {
        let iref = EntityRef::instance(home_ref, &iid);
        detaches.extend(collect_detaches(&iref, &inst));
        removed.push(iref);
    }
}

fn cascade_container(
    node_id: &str,
    server_id: &str,
    container_id: &str,
    container: ContainerState,
    removed: &mut Vec<EntityRef>,
    detaches: &mut Vec<(PortAddress, PortAddress)>,
) {
    let mut homes: Vec<_> = container.homes.into_iter().collect();
    homes.sort_by_key(|(_, h)| std::cmp::Reverse(h.order));
    for (hid, home) in homes {
        let home_ref = EntityRef::home(node_id, server_id, container_id, &hid);
        cascade_home(&home_ref, home, removed, detaches);
        removed.push(home_ref);
    }
}

fn cascade_server(
    node_id: &str,
    server_id: &str,
    server: ServerState,
    removed: &mut Vec<EntityRef>,
    detaches: &mut Vec<(PortAddress, PortAddress)>,
) {
    let mut containers: Vec<_> = server.containers.into_iter().collect();
    containers.sort_by_key(|(_, c)| std::cmp::Reverse(c.order));
    for (cid, container) in containers {
        cascade_container(node_id, server_id, &cid, container, removed, detaches);
        removed.push(EntityRef::container(node_id, server_id, &cid));
    }
}

fn read_mem_total() -> u64 {
    let Ok(contents) = std::fs::read_to_string("/proc/meminfo") else {
        return 0;
    };
    for line in contents.lines() {
        if let Some(rest) = line.strip_prefix("MemTotal:") {
            let kb: u64 = rest
                .trim()
                .trim_end_matches("kB")
                .trim()
                .parse()
                .unwrap_or(0);
            return kb * 1024;
        }
    }
    0
}

fn b64(bytes: &[u8]) -> String {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    STANDARD.encode(bytes)
}

fn un_b64(s: &str) -> Result<Vec<u8>, base64::DecodeError> {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    STANDARD.decode(s.as_bytes())
}

// ---------------------------------------------------------------------------
// Wire surface
// ---------------------------------------------------------------------------

fn parse<T: serde::de::DeserializeOwned>(args: Value) -> Result<T, WireError> {
    serde_json::from_value(args).map_err(|e| WireError::new("bad_args", e.to_string()))
}

fn out<T: Serialize>(value: &T) -> Result<Value, WireError> {
    serde_json::to_value(value).map_err(|e| WireError::new("internal_error", e.to_string()))
}

macro_rules! wire {
    ($agent:ident, $args:ident: $ty:ty => $body:expr) => {{
        let $args: $ty = parse($args)?;
        let _ = &$args;
        $body
    }};
}

#[derive(Deserialize)]
struct EntityArgs {
    entity: EntityRef,
}

#[derive(Deserialize)]
struct SetAttrArgs {
    entity: EntityRef,
    name: String,
    value: AttrValue,
}

impl NodeAgent {
    /// Build the agent's request dispatcher (`node.*` ops).
    pub fn dispatcher(self: &Arc<Self>) -> Arc<Dispatcher> {
        let mut d = Dispatcher::new();
        let a = |agent: &Arc<Self>| Arc::clone(agent);

        let agent = a(self);
        d.register(
            "node.get_meta_info",
            OpDoc {
                args: "`{}`",
                reply: "`NodeMetaInfo`",
                summary: "fresh hardware/software/load snapshot",
            },
            move |_| out(&agent.get_meta_info()),
        );

        let agent = a(self);
        d.register(
            "node.snapshot",
            OpDoc {
                args: "`{}`",
                reply: "`NodeSnapshot`",
                summary: "full entity-hierarchy introspection",
            },
            move |_| out(&agent.snapshot()),
        );

        let agent = a(self);
        d.register(
            "node.create_server",
            OpDoc {
                args: "`{server_id}`",
                reply: "`EntityRef`",
                summary: "create an application server",
            },
            move |args| {
                wire!(agent, args: serde_json::Map<String, Value> => {
                    let id = args["server_id"].as_str().unwrap_or_default();
                    agent.create_server(id).map_err(|e| e.to_wire()).and_then(|r| out(&r))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.remove_server",
            OpDoc {
                args: "`{server_id}`",
                reply: "`[EntityRef]` destroyed, in order",
                summary: "remove a server, cascading its children",
            },
            move |args| {
                wire!(agent, args: serde_json::Map<String, Value> => {
                    let id = args["server_id"].as_str().unwrap_or_default();
                    agent.remove_server(id).map_err(|e| e.to_wire()).and_then(|r| out(&r))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.list_servers",
            OpDoc {
                args: "`{}`",
                reply: "`[EntityRef]`",
                summary: "list live servers",
            },
            move |_| out(&agent.list_servers()),
        );

        let agent = a(self);
        d.register(
            "node.create_container",
            OpDoc {
                args: "`{server_id, container_id}`",
                reply: "`EntityRef`",
                summary: "create a container in a server",
            },
            move |args| {
                wire!(agent, args: serde_json::Map<String, Value> => {
                    let server = args["server_id"].as_str().unwrap_or_default();
                    let container = args["container_id"].as_str().unwrap_or_default();
                    agent.create_container(server, container).map_err(|e| e.to_wire()).and_then(|r| out(&r))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.remove_container",
            OpDoc {
                args: "`{server_id, container_id}`",
                reply: "`[EntityRef]` destroyed, in order",
                summary: "remove a container, cascading its children",
            },
            move |args| {
                wire!(agent, args: serde_json::Map<String, Value> => {
                    let server = args["server_id"].as_str().unwrap_or_default();
                    let container = args["container_id"].as_str().unwrap_or_default();
                    agent.remove_container(server, container).map_err(|e| e.to_wire()).and_then(|r| out(&r))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.list_containers",
            OpDoc {
                args: "`{server_id}`",
                reply: "`[EntityRef]`",
                summary: "list containers of a server",
            },
            move |args| {
                wire!(agent, args: serde_json::Map<String, Value> => {
                    let server = args["server_id"].as_str().unwrap_or_default();
                    agent.list_containers(server).map_err(|e| e.to_wire()).and_then(|r| out(&r))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.install_home",
            OpDoc {
                args: "`{server_id, container_id, home_id, archive_id}`",
                reply: "`EntityRef`",
                summary: "install a component home from a locally stored archive",
            },
            move |args| {
                wire!(agent, args: serde_json::Map<String, Value> => {
                    let server = args["server_id"].as_str().unwrap_or_default();
                    let container = args["container_id"].as_str().unwrap_or_default();
                    let home = args["home_id"].as_str().unwrap_or_default();
                    let archive = args["archive_id"].as_str().unwrap_or_default();
                    agent.install_home(server, container, home, archive).map_err(|e| e.to_wire()).and_then(|r| out(&r))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.remove_home",
            OpDoc {
                args: "`{entity: EntityRef}`",
                reply: "`[EntityRef]` destroyed, in order",
                summary: "remove a home, cascading its instances",
            },
            move |args| {
                wire!(agent, args: EntityArgs => {
                    agent.remove_home(&args.entity).map_err(|e| e.to_wire()).and_then(|r| out(&r))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.list_homes",
            OpDoc {
                args: "`{server_id, container_id}`",
                reply: "`[EntityRef]`",
                summary: "list homes of a container",
            },
            move |args| {
                wire!(agent, args: serde_json::Map<String, Value> => {
                    let server = args["server_id"].as_str().unwrap_or_default();
                    let container = args["container_id"].as_str().unwrap_or_default();
                    agent.list_homes(server, container).map_err(|e| e.to_wire()).and_then(|r| out(&r))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.home_manifest",
            OpDoc {
                args: "`{entity: EntityRef}`",
                reply: "`ArchiveManifest`",
                summary: "manifest backing a live home",
            },
            move |args| {
                wire!(agent, args: EntityArgs => {
                    agent.home_manifest(&args.entity).map_err(|e| e.to_wire()).and_then(|r| out(&r))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.set_home_attr",
            OpDoc {
                args: "`{entity: EntityRef, name, value: AttrValue}`",
                reply: "`{}`",
                summary: "set a declared home attribute",
            },
            move |args| {
                wire!(agent, args: SetAttrArgs => {
                    agent.set_home_attr(&args.entity, &args.name, &args.value)
                        .map_err(|e| e.to_wire()).map(|_| json!({}))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.create_instance",
            OpDoc {
                args: "`{entity: EntityRef (home), instance_id}`",
                reply: "`EntityRef`",
                summary: "create a component instance through a home",
            },
            move |args| {
                #[derive(Deserialize)]
                struct Args {
                    entity: EntityRef,
                    instance_id: String,
                }
                wire!(agent, args: Args => {
                    agent.create_instance(&args.entity, &args.instance_id)
                        .map_err(|e| e.to_wire()).and_then(|r| out(&r))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.remove_instance",
            OpDoc {
                args: "`{entity: EntityRef}`",
                reply: "`{}`",
                summary: "destroy a component instance",
            },
            move |args| {
                wire!(agent, args: EntityArgs => {
                    agent.remove_instance(&args.entity).map_err(|e| e.to_wire()).map(|_| json!({}))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.list_instances",
            OpDoc {
                args: "`{entity: EntityRef (home)}`",
                reply: "`[EntityRef]`",
                summary: "list instances of a home",
            },
            move |args| {
                wire!(agent, args: EntityArgs => {
                    agent.list_instances(&args.entity).map_err(|e| e.to_wire()).and_then(|r| out(&r))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.set_instance_attr",
            OpDoc {
                args: "`{entity: EntityRef, name, value: AttrValue}`",
                reply: "`{}`",
                summary: "set a declared instance attribute (before configuration_complete)",
            },
            move |args| {
                wire!(agent, args: SetAttrArgs => {
                    agent.set_instance_attr(&args.entity, &args.name, &args.value)
                        .map_err(|e| e.to_wire()).map(|_| json!({}))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.configuration_complete",
            OpDoc {
                args: "`{entity: EntityRef}`",
                reply: "`{}`",
                summary: "freeze configuration and activate the instance",
            },
            move |args| {
                wire!(agent, args: EntityArgs => {
                    agent.configuration_complete(&args.entity).map_err(|e| e.to_wire()).map(|_| json!({}))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.connect",
            OpDoc {
                args: "`{entity: EntityRef, port, to: PortAddress}`",
                reply: "`{cookie: string|null}`",
                summary: "connect a receptacle or event source to a facet or sink",
            },
            move |args| {
                #[derive(Deserialize)]
                struct Args {
                    entity: EntityRef,
                    port: String,
                    to: PortAddress,
                }
                wire!(agent, args: Args => {
                    agent.connect(&args.entity, &args.port, &args.to)
                        .map_err(|e| e.to_wire())
                        .map(|cookie| json!({ "cookie": cookie }))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.disconnect",
            OpDoc {
                args: "`{entity: EntityRef, port, cookie: string|null}`",
                reply: "`{}`",
                summary: "remove one connection",
            },
            move |args| {
                #[derive(Deserialize)]
                struct Args {
                    entity: EntityRef,
                    port: String,
                    #[serde(default)]
                    cookie: Option<String>,
                }
                wire!(agent, args: Args => {
                    agent.disconnect(&args.entity, &args.port, args.cookie.as_deref())
                        .map_err(|e| e.to_wire()).map(|_| json!({}))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.invoke_facet",
            OpDoc {
                args: "`{instance: string (ref id), facet, payload: base64}`",
                reply: "`{payload: base64}`",
                summary: "invoke a facet on an active instance",
            },
            move |args| {
                #[derive(Deserialize)]
                struct Args {
                    instance: String,
                    facet: String,
                    payload: String,
                }
                wire!(agent, args: Args => {
                    let payload = un_b64(&args.payload)
                        .map_err(|e| WireError::new("bad_args", e.to_string()))?;
                    let target = instance_ref_from_id(agent.node_id(), &args.instance);
                    agent.invoke_facet(&target, &args.facet, &payload)
                        .map_err(|e| e.to_wire())
                        .map(|bytes| json!({ "payload": b64(&bytes) }))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.emit_event",
            OpDoc {
                args: "`{entity: EntityRef, port, payload: base64}`",
                reply: "`{}`",
                summary: "publish an event to every connected sink",
            },
            move |args| {
                #[derive(Deserialize)]
                struct Args {
                    entity: EntityRef,
                    port: String,
                    payload: String,
                }
                wire!(agent, args: Args => {
                    let payload = un_b64(&args.payload)
                        .map_err(|e| WireError::new("bad_args", e.to_string()))?;
                    agent.emit_event(&args.entity, &args.port, &payload)
                        .map_err(|e| e.to_wire()).map(|_| json!({}))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.read_sink",
            OpDoc {
                args: "`{entity: EntityRef, port}`",
                reply: "`{events: [base64]}`",
                summary: "read the delivery log of a sink port",
            },
            move |args| {
                #[derive(Deserialize)]
                struct Args {
                    entity: EntityRef,
                    port: String,
                }
                wire!(agent, args: Args => {
                    agent.read_sink(&args.entity, &args.port)
                        .map_err(|e| e.to_wire())
                        .map(|events| json!({
                            "events": events.iter().map(|e| b64(e)).collect::<Vec<_>>()
                        }))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.attach_inbound",
            OpDoc {
                args: "`{instance, port, from: PortAddress, from_kind, from_interface}`",
                reply: "`{}`",
                summary: "internal: validate and record an inbound connection",
            },
            move |args| {
                #[derive(Deserialize)]
                struct Args {
                    instance: String,
                    port: String,
                    from: PortAddress,
                    from_kind: PortKind,
                    from_interface: String,
                }
                wire!(agent, args: Args => {
                    let to = PortAddress {
                        node_id: agent.node_id().to_string(),
                        instance: args.instance,
                        port: args.port,
                    };
                    agent.attach_inbound_local(&to, &args.from, args.from_kind, &args.from_interface)
                        .map_err(|e| e.to_wire()).map(|_| json!({}))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.install_archive",
            OpDoc {
                args: "`{id, archive: ComponentArchive}`",
                reply: "`{}`",
                summary: "push-mode archive install",
            },
            move |args| {
                #[derive(Deserialize)]
                struct Args {
                    id: String,
                    archive: ComponentArchive,
                }
                wire!(agent, args: Args => {
                    agent.install_archive(&args.id, &args.archive)
                        .map_err(|e| e.to_wire()).map(|_| json!({}))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.install_archive_from_url",
            OpDoc {
                args: "`{id, url, expected_checksum: string|null}`",
                reply: "`{}`",
                summary: "pull-mode archive install from file:// or http://",
            },
            move |args| {
                #[derive(Deserialize)]
                struct Args {
                    id: String,
                    url: String,
                    #[serde(default)]
                    expected_checksum: Option<String>,
                }
                wire!(agent, args: Args => {
                    agent.install_archive_from_url(&args.id, &args.url, args.expected_checksum.as_deref())
                        .map_err(|e| e.to_wire()).map(|_| json!({}))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.retrieve_archive",
            OpDoc {
                args: "`{id}`",
                reply: "`ComponentArchive`",
                summary: "fetch a verified archive from the local store",
            },
            move |args| {
                wire!(agent, args: serde_json::Map<String, Value> => {
                    let id = args["id"].as_str().unwrap_or_default();
                    agent.retrieve_archive(id).map_err(|e| e.to_wire()).and_then(|r| out(&r))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.list_archives",
            OpDoc {
                args: "`{}`",
                reply: "`[string]` sorted",
                summary: "list installed archive ids",
            },
            move |_| out(&agent.list_archives()),
        );

        let agent = a(self);
        d.register(
            "node.archive_info",
            OpDoc {
                args: "`{id}`",
                reply: "`{checksum, byte_size}|null`",
                summary: "index entry for one archive, if installed",
            },
            move |args| {
                wire!(agent, args: serde_json::Map<String, Value> => {
                    let id = args["id"].as_str().unwrap_or_default();
                    out(&agent.archive_info(id))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.uninstall_archive",
            OpDoc {
                args: "`{id}`",
                reply: "`{}`",
                summary: "remove an archive with no live homes",
            },
            move |args| {
                wire!(agent, args: serde_json::Map<String, Value> => {
                    let id = args["id"].as_str().unwrap_or_default();
                    agent.uninstall_archive(id).map_err(|e| e.to_wire()).map(|_| json!({}))
                })
            },
        );

        let agent = a(self);
        d.register(
            "node.update_archive",
            OpDoc {
                args: "`{id, archive: ComponentArchive}`",
                reply: "`{}`",
                summary: "replace an archive with no live homes",
            },
            move |args| {
                #[derive(Deserialize)]
                struct Args {
                    id: String,
                    archive: ComponentArchive,
                }
                wire!(agent, args: Args => {
                    agent.update_archive(&args.id, &args.archive)
                        .map_err(|e| e.to_wire()).map(|_| json!({}))
                })
            },
        );

        let agent = a(self);
        d.register_event(
            "node.deliver_event",
            OpDoc {
                args: "`{instance, port, payload: base64}`",
                reply: "",
                summary: "internal: deliver one published event to a sink",
            },
            move |args| {
                let (Some(instance), Some(port), Some(payload)) = (
                    args["instance"].as_str(),
                    args["port"].as_str(),
                    args["payload"].as_str(),
                ) else {
                    return;
                };
                if let Ok(bytes) = un_b64(payload) {
                    agent.accept_event(instance, port, bytes);
                }
            },
        );

        let agent = a(self);
        d.register_event(
            "node.detach_inbound",
            OpDoc {
                args: "`{instance, port, from: PortAddress}`",
                reply: "",
                summary: "internal: clear an inbound connection record",
            },
            move |args| {
                let Ok(from) = serde_json::from_value::<PortAddress>(args["from"].clone()) else {
                    return;
                };
                let (Some(instance), Some(port)) = (args["instance"].as_str(), args["port"].as_str())
                else {
                    return;
                };
                let to = PortAddress {
                    node_id: agent.node_id().to_string(),
                    instance: instance.to_string(),
                    port: port.to_string(),
                };
                agent.detach_inbound_local(&to, &from);
            },
        );

        Arc::new(d)
    }
}

// ---------------------------------------------------------------------------
// Running the agent as a service
// ---------------------------------------------------------------------------

/// An agent serving its dispatcher, registered with the domain, and renewing
/// its lease in the background.
pub struct RunningAgent {
    pub agent: Arc<NodeAgent>,
    server: ServerHandle,
    stop: Arc<AtomicBool>,
}

impl RunningAgent {
    pub fn addr(&self) -> &str {
        self.server.addr()
    }

    /// Graceful shutdown: deregister from the domain, then stop serving.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::Release);
        if let Ok(domain) = self.agent.domain_client() {
            let _ = domain.call(
                "domain.deregister_node",
                json!({ "node_id": self.agent.node_id() }),
            );
        }
        self.server.shutdown();
    }

    /// Stop serving without deregistering, as a crash would.
    pub fn abandon(self) {
        self.stop.store(true, Ordering::Release);
        self.server.shutdown();
    }
}

impl NodeAgent {
    /// Listen, register with the domain, and start the lease ping loop.
    pub fn start(
        config: &AgentConfig,
        network: Arc<dyn Network>,
    ) -> Result<RunningAgent, AgentError> {
        let agent = NodeAgent::new(config, Arc::clone(&network))?;
        let dispatcher = agent.dispatcher();
        let server = network
            .listen(&config.listen_addr, dispatcher)
            .map_err(|e| AgentError::Transport(e.to_string()))?;
        let addr = server.addr().to_string();

        let domain = agent.domain_client()?;
        let meta = agent.get_meta_info();
        domain
            .call(
                "domain.register_node",
                json!({ "node_id": agent.node_id(), "address": addr, "meta": meta }),
            )
            .map_err(AgentError::from_rpc)?;

        let stop = Arc::new(AtomicBool::new(false));
        let ping_stop = Arc::clone(&stop);
        let ping_agent = Arc::clone(&agent);
        let ping_addr = addr.clone();
        let interval = Duration::from_millis(config.lease_ms.max(1));
        thread::spawn(move || loop {
            thread::sleep(interval);
            if ping_stop.load(Ordering::Acquire) {
                break;
            }
            let Ok(domain) = ping_agent.domain_client() else {
                continue;
            };
            let reply = domain.call(
                "domain.ping",
                json!({ "node_id": ping_agent.node_id() }),
            );
            if let Err(RpcError::Remote { code, .. }) = &reply {
                if code == "unknown_node" {
                    // Domain restarted: re-register with fresh meta.
                    let meta = ping_agent.get_meta_info();
                    let _ = domain.call(
                        "domain.register_node",
                        json!({
                            "node_id": ping_agent.node_id(),
                            "address": ping_addr,
                            "meta": meta,
                        }),
                    );
                }
            }
        });

        Ok(RunningAgent {
            agent,
            server,
            stop,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::pack;
    use crate::model::{ArchiveManifest, AttributeDecl, ValueType};
    use crate::transport::LoopbackNetwork;
    use tempfile::TempDir;

    fn echo_manifest() -> ArchiveManifest {
        ArchiveManifest {
            component_type: "EchoComp".to_string(),
            home_type: "EchoHome".to_string(),
            ports: vec![
                PortDecl {
                    name: "svc".to_string(),
                    kind: PortKind::Facet,
                    interface_type: "Svc".to_string(),
                },
                PortDecl {
                    name: "log".to_string(),
                    kind: PortKind::EventSink,
                    interface_type: "Evt".to_string(),
                },
            ],
            home_attributes: vec![AttributeDecl {
                name: "greeting".to_string(),
                value_type: ValueType::String,
                default: Some(AttrValue::String("hi".to_string())),
            }],
            instance_attributes: vec![AttributeDecl {
                name: "level".to_string(),
                value_type: ValueType::Int,
                default: None,
            }],
            behavior: Behavior::Echo,
        }
    }

    fn counter_manifest() -> ArchiveManifest {
        ArchiveManifest {
            component_type: "CounterComp".to_string(),
            home_type: "CounterHome".to_string(),
            ports: vec![
                PortDecl {
                    name: "svc".to_string(),
                    kind: PortKind::Facet,
                    interface_type: "Svc".to_string(),
                },
                PortDecl {
                    name: "peers".to_string(),
                    kind: PortKind::ReceptacleMultiplex,
                    interface_type: "Svc".to_string(),
                },
                PortDecl {
                    name: "events".to_string(),
                    kind: PortKind::EventSource,
                    interface_type: "Evt".to_string(),
                },
            ],
            home_attributes: vec![],
            instance_attributes: vec![],
            behavior: Behavior::Counter,
        }
    }

    fn relay_manifest() -> ArchiveManifest {
        ArchiveManifest {
            component_type: "RelayComp".to_string(),
            home_type: "RelayHome".to_string(),
            ports: vec![
                PortDecl {
                    name: "svc".to_string(),
                    kind: PortKind::Facet,
                    interface_type: "Svc".to_string(),
                },
                PortDecl {
                    name: "next".to_string(),
                    kind: PortKind::ReceptacleSimplex,
                    interface_type: "Svc".to_string(),
                },
            ],
            home_attributes: vec![],
            instance_attributes: vec![],
            behavior: Behavior::Relay,
        }
    }

    struct Fixture {
        agent: Arc<NodeAgent>,
        _dir: TempDir,
    }

    fn fixture(node_id: &str) -> Fixture {
        let dir = TempDir::new().unwrap();
        let config = AgentConfig {
            node_id: node_id.to_string(),
            domain_addr: "unused".to_string(),
            listen_addr: "unused".to_string(),
            store_root: dir.path().to_path_buf(),
            properties: BTreeMap::new(),
            lease_ms: 5000,
        };
        let agent = NodeAgent::new(&config, LoopbackNetwork::new()).unwrap();
        Fixture { agent, _dir: dir }
    }

    fn install(agent: &NodeAgent, id: &str, manifest: ArchiveManifest) {
        let archive = pack(manifest, vec![]).unwrap();
        agent.install_archive(id, &archive).unwrap();
    }

    /// server s1 / container c1 / home h-<archive> with one instance.
    fn spawn_instance(agent: &NodeAgent, archive_id: &str, instance_id: &str) -> EntityRef {
        if agent.list_servers().is_empty() {
            agent.create_server("s1").unwrap();
            agent.create_container("s1", "c1").unwrap();
        }
        let home_id = format!("h-{archive_id}");
        let home_ref = match agent.install_home("s1", "c1", &home_id, archive_id) {
            Ok(r) => r,
            Err(AgentError::DuplicateId(_)) => {
                EntityRef::home(agent.node_id(), "s1", "c1", &home_id)
            }
            Err(e) => panic!("{e}"),
        };
        agent.create_instance(&home_ref, instance_id).unwrap()
    }

    #[test]
    fn fresh_agent_meta() {
        let f = fixture("n1");
        let meta = f.agent.get_meta_info();
        assert_eq!(meta.node_id, "n1");
        assert_eq!(meta.instance_load, 0);
        assert!(meta.installed_archives.is_empty());
        assert!(meta.cpu_count >= 1);
    }

    #[test]
    fn meta_reflects_archives_and_load() {
        let f = fixture("n1");
        install(&f.agent, "echo", echo_manifest());
        install(&f.agent, "counter", counter_manifest());
        let meta = f.agent.get_meta_info();
        assert_eq!(meta.installed_archives, vec!["counter", "echo"]);
        spawn_instance(&f.agent, "echo", "i1");
        spawn_instance(&f.agent, "echo", "i2");
        assert_eq!(f.agent.get_meta_info().instance_load, 2);
    }

    #[test]
    fn server_lifecycle() {
        let f = fixture("n1");
        let r = f.agent.create_server("s1").unwrap();
        assert_eq!(r.id, "n1/s1");
        assert_eq!(f.agent.list_servers(), vec![r]);
        assert!(matches!(
            f.agent.create_server("s1"),
            Err(AgentError::DuplicateId(_))
        ));
        f.agent.remove_server("s1").unwrap();
        assert!(f.agent.list_servers().is_empty());
        assert!(matches!(
            f.agent.remove_server("s1"),
            Err(AgentError::NotFound(_))
        ));
    }

    #[test]
    fn remove_server_cascades_everything() {
        let f = fixture("n1");
        install(&f.agent, "echo", echo_manifest());
        spawn_instance(&f.agent, "echo", "i1");
        spawn_instance(&f.agent, "echo", "i2");
        assert_eq!(f.agent.get_meta_info().instance_load, 2);
        let removed = f.agent.remove_server("s1").unwrap();
        // Two instances, one home, one container, one server.
        assert_eq!(removed.len(), 5);
        assert_eq!(removed.last().unwrap().kind, EntityKind::Server);
        assert_eq!(f.agent.get_meta_info().instance_load, 0);
        assert!(f.agent.list_servers().is_empty());
    }

    #[test]
    fn container_requires_server() {
        let f = fixture("n1");
        assert!(matches!(
            f.agent.create_container("ghost", "c1"),
            Err(AgentError::NoSuchServer(_))
        ));
        f.agent.create_server("s1").unwrap();
        f.agent.create_container("s1", "c1").unwrap();
        assert!(matches!(
            f.agent.create_container("s1", "c1"),
            Err(AgentError::DuplicateId(_))
        ));
        assert_eq!(f.agent.list_containers("s1").unwrap().len(), 1);
    }

    #[test]
    fn install_home_requires_local_archive() {
        let f = fixture("n1");
        f.agent.create_server("s1").unwrap();
        f.agent.create_container("s1", "c1").unwrap();
        assert!(matches!(
            f.agent.install_home("s1", "c1", "h1", "missing"),
            Err(AgentError::ArchiveNotInstalled(_))
        ));
        assert!(f.agent.list_homes("s1", "c1").unwrap().is_empty());
        install(&f.agent, "echo", echo_manifest());
        let home = f.agent.install_home("s1", "c1", "h1", "echo").unwrap();
        assert_eq!(f.agent.list_homes("s1", "c1").unwrap(), vec![home.clone()]);
        // Home attributes initialized from manifest defaults.
        assert_eq!(
            f.agent.get_home_attr(&home, "greeting").unwrap(),
            Some(AttrValue::String("hi".to_string()))
        );
    }

    #[test]
    fn live_home_blocks_uninstall_and_update() {
        let f = fixture("n1");
        install(&f.agent, "echo", echo_manifest());
        f.agent.create_server("s1").unwrap();
        f.agent.create_container("s1", "c1").unwrap();
        f.agent.create_container("s1", "c2").unwrap();
        let h1 = f.agent.install_home("s1", "c1", "h1", "echo").unwrap();
        let h2 = f.agent.install_home("s1", "c2", "h2", "echo").unwrap();
        assert!(matches!(
            f.agent.uninstall_archive("echo"),
            Err(AgentError::InUse(_))
        ));
        let v2 = pack(echo_manifest(), b"v2".to_vec()).unwrap();
        assert!(matches!(
            f.agent.update_archive("echo", &v2),
            Err(AgentError::InUse(_))
        ));
        f.agent.remove_home(&h1).unwrap();
        assert!(matches!(
            f.agent.uninstall_archive("echo"),
            Err(AgentError::InUse(_))
        ));
        f.agent.remove_home(&h2).unwrap();
        f.agent.update_archive("echo", &v2).unwrap();
        f.agent.uninstall_archive("echo").unwrap();
        assert!(f.agent.list_archives().is_empty());
    }

    #[test]
    fn home_attr_type_checking() {
        let f = fixture("n1");
        install(&f.agent, "echo", echo_manifest());
        f.agent.create_server("s1").unwrap();
        f.agent.create_container("s1", "c1").unwrap();
        let home = f.agent.install_home("s1", "c1", "h1", "echo").unwrap();
        f.agent
            .set_home_attr(&home, "greeting", &AttrValue::String("hello".to_string()))
            .unwrap();
        assert!(matches!(
            f.agent.set_home_attr(&home, "greeting", &AttrValue::Int(1)),
            Err(AgentError::TypeMismatch(_))
        ));
        assert!(matches!(
            f.agent.set_home_attr(&home, "nope", &AttrValue::Int(1)),
            Err(AgentError::UnknownAttribute(_))
        ));
    }

    #[test]
    fn instance_attr_lifecycle() {
        let f = fixture("n1");
        install(&f.agent, "echo", echo_manifest());
        let inst = spawn_instance(&f.agent, "echo", "i1");
        f.agent
            .set_instance_attr(&inst, "level", &AttrValue::Int(5))
            .unwrap();
        assert_eq!(
            f.agent.get_instance_attr(&inst, "level").unwrap(),
            Some(AttrValue::Int(5))
        );
        assert!(matches!(
            f.agent
                .set_instance_attr(&inst, "level", &AttrValue::String("x".to_string())),
            Err(AgentError::TypeMismatch(_))
        ));
        f.agent.configuration_complete(&inst).unwrap();
        assert!(matches!(
            f.agent.set_instance_attr(&inst, "level", &AttrValue::Int(6)),
            Err(AgentError::AlreadyConfigured(_))
        ));
        assert!(matches!(
            f.agent.configuration_complete(&inst),
            Err(AgentError::AlreadyConfigured(_))
        ));
    }

    #[test]
    fn last_write_wins_on_attrs() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let f = fixture("n1");
        install(&f.agent, "echo", echo_manifest());
        let inst = spawn_instance(&f.agent, "echo", "i1");
        let mut rng = StdRng::seed_from_u64(3);
        let mut expected = None;
        for _ in 0..50 {
            let v = AttrValue::Int(rng.gen_range(-100..100));
            f.agent.set_instance_attr(&inst, "level", &v).unwrap();
            expected = Some(v);
        }
        assert_eq!(f.agent.get_instance_attr(&inst, "level").unwrap(), expected);
    }

    #[test]
    fn invoke_requires_activation() {
        let f = fixture("n1");
        install(&f.agent, "echo", echo_manifest());
        let inst = spawn_instance(&f.agent, "echo", "i1");
        assert!(matches!(
            f.agent.invoke_facet(&inst, "svc", b"x"),
            Err(AgentError::NotActive(_))
        ));
        f.agent.configuration_complete(&inst).unwrap();
        assert_eq!(f.agent.invoke_facet(&inst, "svc", b"abc").unwrap(), b"abc");
        assert!(matches!(
            f.agent.invoke_facet(&inst, "ghost", b"x"),
            Err(AgentError::NoSuchPort(_))
        ));
    }

    #[test]
    fn counter_counts() {
        let f = fixture("n1");
        install(&f.agent, "counter", counter_manifest());
        let inst = spawn_instance(&f.agent, "counter", "i1");
        f.agent.configuration_complete(&inst).unwrap();
        for expected in 1..=3u64 {
            let out = f.agent.invoke_facet(&inst, "svc", b"").unwrap();
            assert_eq!(out, expected.to_be_bytes().to_vec());
        }
    }

    #[test]
    fn simplex_connect_disconnect() {
        let f = fixture("n1");
        install(&f.agent, "relay", relay_manifest());
        install(&f.agent, "echo", echo_manifest());
        let relay = spawn_instance(&f.agent, "relay", "r1");
        let echo = spawn_instance(&f.agent, "echo", "e1");
        let to = PortAddress {
            node_id: "n1".to_string(),
            instance: echo.id.clone(),
            port: "svc".to_string(),
        };
        let cookie = f.agent.connect(&relay, "next", &to).unwrap();
        assert!(cookie.is_none());
        assert!(matches!(
            f.agent.connect(&relay, "next", &to),
            Err(AgentError::AlreadyConnected(_))
        ));
        f.agent.disconnect(&relay, "next", None).unwrap();
        assert!(matches!(
            f.agent.disconnect(&relay, "next", None),
            Err(AgentError::NotConnected(_))
        ));
    }

    #[test]
    fn multiplex_cookies() {
        let f = fixture("n1");
        install(&f.agent, "counter", counter_manifest());
        install(&f.agent, "echo", echo_manifest());
        let counter = spawn_instance(&f.agent, "counter", "c1");
        let e1 = spawn_instance(&f.agent, "echo", "e1");
        let e2 = spawn_instance(&f.agent, "echo", "e2");
        let mut cookies = Vec::new();
        for target in [&e1, &e2] {
            let to = PortAddress {
                node_id: "n1".to_string(),
                instance: target.id.clone(),
                port: "svc".to_string(),
            };
            cookies.push(f.agent.connect(&counter, "peers", &to).unwrap().unwrap());
        }
        assert_ne!(cookies[0], cookies[1]);
        let snap = f.agent.snapshot();
        let inst = &snap.servers["s1"].containers["c1"].homes["h-counter"].instances["c1"];
        match &inst.ports["peers"] {
            PortView::Multiplex { targets } => assert_eq!(targets.len(), 2),
            other => panic!("unexpected view {other:?}"),
        }
        // Inbound records appear on the facet side.
        match &snap.servers["s1"].containers["c1"].homes["h-echo"].instances["e1"].ports["svc"] {
            PortView::Inbound { sources } => assert_eq!(sources.len(), 1),
            other => panic!("unexpected view {other:?}"),
        }
        f.agent
            .disconnect(&counter, "peers", Some(&cookies[0]))
            .unwrap();
        assert!(matches!(
            f.agent.disconnect(&counter, "peers", Some(&cookies[0])),
            Err(AgentError::UnknownCookie(_))
        ));
        let snap = f.agent.snapshot();
        match &snap.servers["s1"].containers["c1"].homes["h-counter"].instances["c1"].ports["peers"]
        {
            PortView::Multiplex { targets } => assert_eq!(targets.len(), 1),
            other => panic!("unexpected view {other:?}"),
        }
    }

    #[test]
    fn connect_type_mismatch_rejected() {
        let f = fixture("n1");
        install(&f.agent, "counter", counter_manifest());
        let c1 = spawn_instance(&f.agent, "counter", "c1");
        let c2 = spawn_instance(&f.agent, "counter", "c2");
        // events (Evt) into svc facet (Svc): interface types differ.
        let to = PortAddress {
            node_id: "n1".to_string(),
            instance: c2.id.clone(),
            port: "svc".to_string(),
        };
        assert!(matches!(
            f.agent.connect(&c1, "events", &to),
            Err(AgentError::PortKindMismatch(_)) | Err(AgentError::TypeMismatch(_))
        ));
    }

    #[test]
    fn relay_chain_forwards_locally() {
        let f = fixture("n1");
        install(&f.agent, "relay", relay_manifest());
        install(&f.agent, "echo", echo_manifest());
        let r1 = spawn_instance(&f.agent, "relay", "r1");
        let r2 = spawn_instance(&f.agent, "relay", "r2");
        let echo = spawn_instance(&f.agent, "echo", "e1");
        let addr = |target: &EntityRef| PortAddress {
            node_id: "n1".to_string(),
            instance: target.id.clone(),
            port: "svc".to_string(),
        };
        f.agent.connect(&r1, "next", &addr(&r2)).unwrap();
        f.agent.connect(&r2, "next", &addr(&echo)).unwrap();
        for inst in [&r1, &r2, &echo] {
            f.agent.configuration_complete(inst).unwrap();
        }
        assert_eq!(f.agent.invoke_facet(&r1, "svc", b"x").unwrap(), b"x");
    }

    #[test]
    fn relay_without_connection_errors() {
        let f = fixture("n1");
        install(&f.agent, "relay", relay_manifest());
        let r1 = spawn_instance(&f.agent, "relay", "r1");
        f.agent.configuration_complete(&r1).unwrap();
        assert!(matches!(
            f.agent.invoke_facet(&r1, "svc", b"x"),
            Err(AgentError::RelayUnconnected(_))
        ));
    }

    #[test]
    fn events_fan_out_in_order() {
        let f = fixture("n1");
        install(&f.agent, "counter", counter_manifest());
        install(&f.agent, "echo", echo_manifest());
        let source = spawn_instance(&f.agent, "counter", "src");
        let s1 = spawn_instance(&f.agent, "echo", "sink1");
        let s2 = spawn_instance(&f.agent, "echo", "sink2");
        for sink in [&s1, &s2] {
            let to = PortAddress {
                node_id: "n1".to_string(),
                instance: sink.id.clone(),
                port: "log".to_string(),
            };
            f.agent.connect(&source, "events", &to).unwrap();
        }
        for inst in [&source, &s1, &s2] {
            f.agent.configuration_complete(inst).unwrap();
        }
        let events: Vec<Vec<u8>> = (1..=5u8).map(|i| vec![b'e', i]).collect();
        for e in &events {
            f.agent.emit_event(&source, "events", e).unwrap();
        }
        // Delivery is asynchronous.
        let deadline = std::time::Instant::now() + Duration::from_secs(2);
        loop {
            let l1 = f.agent.read_sink(&s1, "log").unwrap();
            let l2 = f.agent.read_sink(&s2, "log").unwrap();
            if l1.len() == 5 && l2.len() == 5 {
                assert_eq!(l1, events);
                assert_eq!(l2, events);
                break;
            }
            assert!(std::time::Instant::now() < deadline, "delivery timed out");
            thread::sleep(Duration::from_millis(5));
        }
    }

    #[test]
    fn emit_with_no_sinks_is_noop() {
        let f = fixture("n1");
        install(&f.agent, "counter", counter_manifest());
        let source = spawn_instance(&f.agent, "counter", "src");
        f.agent.configuration_complete(&source).unwrap();
        f.agent.emit_event(&source, "events", b"lost").unwrap();
    }

    #[test]
    fn emit_requires_activation_and_source_port() {
        let f = fixture("n1");
        install(&f.agent, "counter", counter_manifest());
        let source = spawn_instance(&f.agent, "counter", "src");
        assert!(matches!(
            f.agent.emit_event(&source, "events", b"x"),
            Err(AgentError::NotActive(_))
        ));
        f.agent.configuration_complete(&source).unwrap();
        assert!(matches!(
            f.agent.emit_event(&source, "svc", b"x"),
            Err(AgentError::PortKindMismatch(_))
        ));
        assert!(matches!(
            f.agent.emit_event(&source, "ghost", b"x"),
            Err(AgentError::NoSuchPort(_))
        ));
    }

    #[test]
    fn simplex_exclusive_under_concurrent_connects() {
        let f = fixture("n1");
        install(&f.agent, "relay", relay_manifest());
        install(&f.agent, "echo", echo_manifest());
        let relay = spawn_instance(&f.agent, "relay", "r1");
        let e1 = spawn_instance(&f.agent, "echo", "e1");
        let e2 = spawn_instance(&f.agent, "echo", "e2");
        for _ in 0..50 {
            // Reset.
            let _ = f.agent.disconnect(&relay, "next", None);
            let agent = &f.agent;
            let relay_ref = &relay;
            let results: Vec<Result<Option<String>, AgentError>> = thread::scope(|scope| {
                let handles: Vec<_> = [&e1, &e2]
                    .into_iter()
                    .map(|target| {
                        let to = PortAddress {
                            node_id: "n1".to_string(),
                            instance: target.id.clone(),
                            port: "svc".to_string(),
                        };
                        scope.spawn(move || agent.connect(relay_ref, "next", &to))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
            let successes = results.iter().filter(|r| r.is_ok()).count();
            assert_eq!(successes, 1, "exactly one concurrent connect must win");
            // The snapshot must never show two targets on a simplex port.
            let snap = f.agent.snapshot();
            match &snap.servers["s1"].containers["c1"].homes["h-relay"].instances["r1"].ports
                ["next"]
            {
                PortView::Simplex { target } => assert!(target.is_some()),
                other => panic!("unexpected view {other:?}"),
            }
        }
    }

    #[test]
    fn hierarchy_mirrors_random_op_sequences() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        use std::collections::BTreeSet;
        let f = fixture("n1");
        let mut rng = StdRng::seed_from_u64(11);
        let mut model: BTreeSet<String> = BTreeSet::new();
        for _ in 0..300 {
            let sid = format!("s{}", rng.gen_range(0..4));
            if rng.gen_bool(0.6) {
                match f.agent.create_server(&sid) {
                    Ok(_) => assert!(model.insert(sid)),
                    Err(AgentError::DuplicateId(_)) => assert!(model.contains(&sid)),
                    Err(e) => panic!("{e}"),
                }
            } else {
                match f.agent.remove_server(&sid) {
                    Ok(_) => assert!(model.remove(&sid)),
                    Err(AgentError::NotFound(_)) => assert!(!model.contains(&sid)),
                    Err(e) => panic!("{e}"),
                }
            }
            let live: BTreeSet<String> = f
                .agent
                .list_servers()
                .into_iter()
                .map(|r| r.segments().last().unwrap().to_string())
                .collect();
            assert_eq!(live, model);
        }
    }
}
