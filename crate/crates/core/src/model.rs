//! Shared data model: descriptors, manifests, the port taxonomy, entity
//! references, attribute values, and deployment traces.
//!
//! Everything here is an immutable value type; all operations are pure.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Identifiers name instances, archives, ports, attributes, nodes, servers,
/// containers, homes, and assemblies. The charset is restricted so that
/// identifiers compose safely into entity paths (`/`-joined) and connection
/// keys (`:`-joined).
pub fn is_valid_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// A binding name is a `/`-separated path of identifiers.
pub fn is_valid_binding_name(s: &str) -> bool {
    !s.is_empty() && s.split('/').all(is_valid_identifier)
}

/// The four CCM-style port kinds, with multiplex receptacles split out from
/// simplex ones because their connection arity differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortKind {
    Facet,
    ReceptacleSimplex,
    ReceptacleMultiplex,
    EventSource,
    EventSink,
}

impl PortKind {
    pub const ALL: [PortKind; 5] = [
        PortKind::Facet,
        PortKind::ReceptacleSimplex,
        PortKind::ReceptacleMultiplex,
        PortKind::EventSource,
        PortKind::EventSink,
    ];

    /// True for kinds that originate connections (receptacles and sources).
    pub fn is_origin(self) -> bool {
        matches!(
            self,
            PortKind::ReceptacleSimplex | PortKind::ReceptacleMultiplex | PortKind::EventSource
        )
    }

    /// True for kinds that accept connections (facets and sinks).
    pub fn is_target(self) -> bool {
        matches!(self, PortKind::Facet | PortKind::EventSink)
    }
}

/// A declared port on a component type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortDecl {
    pub name: String,
    pub kind: PortKind,
    /// Abstract interface-type name used for compatibility checks.
    pub interface_type: String,
}

/// The scalar type of a configurable attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    String,
    Int,
    Float,
    Bool,
}

/// A typed attribute value. Comparison is by tag then payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrValue {
    String(String),
    Int(i64),
    Float(f64),
    Bool(bool),
}

impl AttrValue {
    pub fn value_type(&self) -> ValueType {
        match self {
            AttrValue::String(_) => ValueType::String,
            AttrValue::Int(_) => ValueType::Int,
            AttrValue::Float(_) => ValueType::Float,
            AttrValue::Bool(_) => ValueType::Bool,
        }
    }

    /// Canonical JSON cannot carry NaN or infinities.
    pub fn is_encodable(&self) -> bool {
        match self {
            AttrValue::Float(f) => f.is_finite(),
            _ => true,
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::String(s) => write!(f, "{s:?}"),
            AttrValue::Int(i) => write!(f, "{i}"),
            AttrValue::Float(x) => write!(f, "{x}"),
            AttrValue::Bool(b) => write!(f, "{b}"),
        }
    }
}

/// A declared configurable attribute, with an optional default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDecl {
    pub name: String,
    pub value_type: ValueType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<AttrValue>,
}

/// Built-in component behaviors, enough to exercise wiring end to end
/// without a binary loader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Null,
    Echo,
    Counter,
    Relay,
}

/// The manifest packaged inside a component archive: the component type's
/// ports, attributes, and built-in behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub component_type: String,
    pub home_type: String,
    pub ports: Vec<PortDecl>,
    pub home_attributes: Vec<AttributeDecl>,
    pub instance_attributes: Vec<AttributeDecl>,
    pub behavior: Behavior,
}

impl ArchiveManifest {
    pub fn port(&self, name: &str) -> Option<&PortDecl> {
        self.ports.iter().find(|p| p.name == name)
    }

    pub fn home_attribute(&self, name: &str) -> Option<&AttributeDecl> {
        self.home_attributes.iter().find(|a| a.name == name)
    }

    pub fn instance_attribute(&self, name: &str) -> Option<&AttributeDecl> {
        self.instance_attributes.iter().find(|a| a.name == name)
    }
}

/// A packaged component type: manifest plus opaque payload, digested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentArchive {
    pub manifest: ArchiveManifest,
    #[serde(with = "crate::canonical::bytes_b64")]
    pub payload: Vec<u8>,
    /// 32 lowercase hex chars; digest of canonical manifest bytes ‖ payload.
    pub checksum: String,
}

/// The kind of runtime entity an [`EntityRef`] names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Node,
    Server,
    Container,
    Home,
    Instance,
    Assembly,
}

/// Typed handle naming a runtime entity across the wire.
///
/// Ids are hierarchical paths: a server on node `n1` created as `web` has id
/// `n1/web`; a home under it `n1/web/main/h`; and so on. Assembly refs carry
/// an empty `node_id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityRef {
    pub kind: EntityKind,
    pub id: String,
    pub node_id: String,
}

impl EntityRef {
    pub fn node(node_id: &str) -> Self {
        EntityRef {
            kind: EntityKind::Node,
            id: node_id.to_string(),
            node_id: node_id.to_string(),
        }
    }

    pub fn server(node_id: &str, server_id: &str) -> Self {
        EntityRef {
            kind: EntityKind::Server,
            id: format!("{node_id}/{server_id}"),
            node_id: node_id.to_string(),
        }
    }

    pub fn container(node_id: &str, server_id: &str, container_id: &str) -> Self {
        EntityRef {
            kind: EntityKind::Container,
            id: format!("{node_id}/{server_id}/{container_id}"),
            node_id: node_id.to_string(),
        }
    }

    pub fn home(node_id: &str, server_id: &str, container_id: &str, home_id: &str) -> Self {
        EntityRef {
            kind: EntityKind::Home,
            id: format!("{node_id}/{server_id}/{container_id}/{home_id}"),
            node_id: node_id.to_string(),
        }
    }

    pub fn instance(home: &EntityRef, instance_id: &str) -> Self {
        EntityRef {
            kind: EntityKind::Instance,
            id: format!("{}/{instance_id}", home.id),
            node_id: home.node_id.clone(),
        }
    }

    pub fn assembly(assembly_id: &str) -> Self {
        EntityRef {
            kind: EntityKind::Assembly,
            id: assembly_id.to_string(),
            node_id: String::new(),
        }
    }

    /// Path segments of the id.
    pub fn segments(&self) -> Vec<&str> {
        self.id.split('/').collect()
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            EntityKind::Node => "node",
            EntityKind::Server => "server",
            EntityKind::Container => "container",
            EntityKind::Home => "home",
            EntityKind::Instance => "instance",
            EntityKind::Assembly => "assembly",
        };
        write!(f, "{kind}:{}", self.id)
    }
}

/// Where an instance should run, either pinned to a node or filtered by
/// property constraints. Both empty means free placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub constraints: BTreeMap<String, String>,
    pub server_group: String,
    pub container_group: String,
}

/// One component instance to create: which archive, where, and how to
/// configure its home and itself. When `home_name` is set the instance is
/// created through an existing home resolved in the domain's home finder
/// instead of installing a fresh one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub instance_id: String,
    pub archive_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub home_name: Option<String>,
    pub placement: PlacementSpec,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub home_attr_values: BTreeMap<String, AttrValue>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub instance_attr_values: BTreeMap<String, AttrValue>,
}

/// One port connection between two declared instances.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConnectionSpec {
    pub from_instance: String,
    pub from_port: String,
    pub to_instance: String,
    pub to_port: String,
}

impl ConnectionSpec {
    /// Stable map key; identifiers cannot contain `:` or `>`.
    pub fn key(&self) -> String {
        format!(
            "{}:{}->{}:{}",
            self.from_instance, self.from_port, self.to_instance, self.to_port
        )
    }
}

/// What a registration entry binds into the domain name tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationTarget {
    Home,
    Instance,
}

/// A request to bind an instance's home or the instance itself under a
/// hierarchical name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationSpec {
    pub target: RegistrationTarget,
    pub instance_id: String,
    pub binding_name: String,
}

/// The parsed deployment plan interpreted by the assembly machinery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyDescriptor {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instances: Vec<InstanceSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub connections: Vec<ConnectionSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub registrations: Vec<RegistrationSpec>,
}

impl AssemblyDescriptor {
    pub fn instance(&self, id: &str) -> Option<&InstanceSpec> {
        self.instances.iter().find(|i| i.instance_id == id)
    }
}

/// Per-node hardware/software/capability document used for placement and
/// external inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetaInfo {
    pub node_id: String,
    pub os: String,
    pub arch: String,
    pub cpu_count: u32,
    pub mem_bytes: u64,
    pub properties: BTreeMap<String, String>,
    /// Sorted lexicographically.
    pub installed_archives: Vec<String>,
    /// Count of live component instances at snapshot time.
    pub instance_load: u64,
}

/// One elementary step of the deployment scenario or its reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStep {
    InstallArchive,
    CreateAssembly,
    CreateServer,
    CreateContainer,
    InstallHome,
    ConfigureHome,
    CreateInstance,
    ConfigureInstance,
    Connect,
    ConfigurationComplete,
    Register,
    TeardownStep,
    RollbackStep,
}

/// What a trace event acted on: a single entity or a connection endpoint
/// pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSubject {
    Entity(EntityRef),
    Connection {
        from: EntityRef,
        from_port: String,
        to: EntityRef,
        to_port: String,
    },
}

/// One recorded deployment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub step: TraceStep,
    pub subject: TraceSubject,
    pub node_id: String,
}

/// Ordered record of executed scenario steps; the primary verification
/// surface of a deployment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeploymentTrace {
    pub events: Vec<TraceEvent>,
}

impl DeploymentTrace {
    pub fn steps(&self) -> impl Iterator<Item = TraceStep> + '_ {
        self.events.iter().map(|e| e.step)
    }

    pub fn count(&self, step: TraceStep) -> usize {
        self.events.iter().filter(|e| e.step == step).count()
    }
}

/// A machine-readable validation finding: stable code plus the offending
/// path into the descriptor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ValidationError {
    pub code: String,
    pub path: String,
    pub detail: String,
}

impl ValidationError {
    fn new(code: &str, path: String, detail: String) -> Self {
        ValidationError {
            code: code.to_string(),
            path,
            detail,
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}: {}", self.code, self.path, self.detail)
    }
}

pub mod codes {
    //! Stable validation error codes.
    pub const INVALID_IDENTIFIER: &str = "invalid_identifier";
    pub const DUPLICATE_INSTANCE_ID: &str = "duplicate_instance_id";
    pub const UNKNOWN_ARCHIVE: &str = "unknown_archive";
    pub const DANGLING_REFERENCE: &str = "dangling_reference";
    pub const UNKNOWN_PORT: &str = "unknown_port";
    pub const PORT_KIND_MISMATCH: &str = "port_kind_mismatch";
    pub const TYPE_MISMATCH: &str = "type_mismatch";
    pub const UNKNOWN_ATTRIBUTE: &str = "unknown_attribute";
    pub const ATTRIBUTE_TYPE_MISMATCH: &str = "attribute_type_mismatch";
    pub const DUPLICATE_BINDING_NAME: &str = "duplicate_binding_name";
    pub const INVALID_BINDING_NAME: &str = "invalid_binding_name";
    pub const DUPLICATE_CONNECTION: &str = "duplicate_connection";
    pub const SIMPLEX_ARITY: &str = "simplex_arity";
    pub const SHARED_HOME_ATTRS: &str = "shared_home_attrs";
    pub const NON_FINITE_FLOAT: &str = "non_finite_float";
    pub const DUPLICATE_PORT: &str = "duplicate_port";
    pub const DUPLICATE_ATTRIBUTE: &str = "duplicate_attribute";
    pub const DEFAULT_TYPE_MISMATCH: &str = "default_type_mismatch";
}

/// True iff `from` may be connected to `to`: a receptacle (simplex or
/// multiplex) to a facet, or an event source to an event sink, with equal
/// interface types in both cases.
pub fn check_port_compat(from: &PortDecl, to: &PortDecl) -> bool {
    let kinds_ok = match from.kind {
        PortKind::ReceptacleSimplex | PortKind::ReceptacleMultiplex => to.kind == PortKind::Facet,
        PortKind::EventSource => to.kind == PortKind::EventSink,
        _ => false,
    };
    kinds_ok && from.interface_type == to.interface_type
}

/// Check manifest invariants. Empty result means valid.
pub fn validate_manifest(m: &ArchiveManifest) -> Vec<ValidationError> {
    let mut errs = Vec::new();
    let path = "manifest".to_string();
    if !is_valid_identifier(&m.component_type) {
        errs.push(ValidationError::new(
            codes::INVALID_IDENTIFIER,
            format!("{path}.component_type"),
            format!("invalid identifier {:?}", m.component_type),
        ));
    }
    if !is_valid_identifier(&m.home_type) {
        errs.push(ValidationError::new(
            codes::INVALID_IDENTIFIER,
            format!("{path}.home_type"),
            format!("invalid identifier {:?}", m.home_type),
        ));
    }
    let mut port_names = BTreeSet::new();
    for (i, p) in m.ports.iter().enumerate() {
        let ppath = format!("{path}.ports[{i}]");
        if !is_valid_identifier(&p.name) {
            errs.push(ValidationError::new(
                codes::INVALID_IDENTIFIER,
                ppath.clone(),
                format!("invalid port name {:?}", p.name),
            ));
        }
        if p.interface_type.is_empty() {
            errs.push(ValidationError::new(
                codes::INVALID_IDENTIFIER,
                ppath.clone(),
                "empty interface_type".to_string(),
            ));
        }
        if !port_names.insert(p.name.clone()) {
            errs.push(ValidationError::new(
                codes::DUPLICATE_PORT,
                ppath,
                format!("port {:?} declared twice", p.name),
            ));
        }
    }
    for (list, label) in [
        (&m.home_attributes, "home_attributes"),
        (&m.instance_attributes, "instance_attributes"),
    ] {
        let mut names = BTreeSet::new();
        for (i, a) in list.iter().enumerate() {
            let apath = format!("{path}.{label}[{i}]");
            if !is_valid_identifier(&a.name) {
                errs.push(ValidationError::new(
                    codes::INVALID_IDENTIFIER,
                    apath.clone(),
                    format!("invalid attribute name {:?}", a.name),
                ));
            }
            if !names.insert(a.name.clone()) {
                errs.push(ValidationError::new(
                    codes::DUPLICATE_ATTRIBUTE,
                    apath.clone(),
                    format!("attribute {:?} declared twice", a.name),
                ));
            }
            if let Some(d) = &a.default {
                if d.value_type() != a.value_type {
                    errs.push(ValidationError::new(
                        codes::DEFAULT_TYPE_MISMATCH,
                        apath.clone(),
                        format!("default {d} does not match declared type"),
                    ));
                }
                if !d.is_encodable() {
                    errs.push(ValidationError::new(
                        codes::NON_FINITE_FLOAT,
                        apath,
                        "default is not a finite float".to_string(),
                    ));
                }
            }
        }
    }
    errs.sort();
    errs
}

fn check_attr_values(
    values: &BTreeMap<String, AttrValue>,
    decls: &[AttributeDecl],
    path: &str,
    errs: &mut Vec<ValidationError>,
) {
    for (name, value) in values {
        let vpath = format!("{path}.{name}");
        match decls.iter().find(|d| d.name == *name) {
            None => errs.push(ValidationError::new(
                codes::UNKNOWN_ATTRIBUTE,
                vpath,
                format!("attribute {name:?} is not declared"),
            )),
            Some(decl) => {
                if value.value_type() != decl.value_type {
                    errs.push(ValidationError::new(
                        codes::ATTRIBUTE_TYPE_MISMATCH,
                        vpath.clone(),
                        format!("value {value} does not match declared type"),
                    ));
                }
                if !value.is_encodable() {
                    errs.push(ValidationError::new(
                        codes::NON_FINITE_FLOAT,
                        vpath,
                        "value is not a finite float".to_string(),
                    ));
                }
            }
        }
    }
}

/// Validate a descriptor against the manifests of the archives it references.
///
/// All findings are collected rather than failing fast, and the result is
/// order-normalized, so identical inputs always produce the identical list.
/// An empty result means the descriptor satisfies every invariant: distinct
/// instance ids, resolvable archive references, declared and type-correct
/// attribute settings, connection endpoints that exist and type-check with
/// legal arity, and well-formed, unique registration binding names.
pub fn validate_descriptor(
    desc: &AssemblyDescriptor,
    manifests: &BTreeMap<String, ArchiveManifest>,
) -> Vec<ValidationError> {
    let mut errs = Vec::new();

    if !is_valid_identifier(&desc.name) {
        errs.push(ValidationError::new(
            codes::INVALID_IDENTIFIER,
            "name".to_string(),
            format!("invalid assembly name {:?}", desc.name),
        ));
    }

    let mut seen = BTreeSet::new();
    for (i, inst) in desc.instances.iter().enumerate() {
        let ipath = format!("instances[{i}]");
        if !is_valid_identifier(&inst.instance_id) {
            errs.push(ValidationError::new(
                codes::INVALID_IDENTIFIER,
                ipath.clone(),
                format!("invalid instance id {:?}", inst.instance_id),
            ));
        }
        if !seen.insert(inst.instance_id.clone()) {
            errs.push(ValidationError::new(
                codes::DUPLICATE_INSTANCE_ID,
                ipath.clone(),
                format!("instance id {:?} declared twice", inst.instance_id),
            ));
        }
        let manifest = manifests.get(&inst.archive_ref);
        if manifest.is_none() {
            errs.push(ValidationError::new(
                codes::UNKNOWN_ARCHIVE,
                format!("{ipath}.archive_ref"),
                format!("no archive {:?} in the model", inst.archive_ref),
            ));
        }
        if !is_valid_identifier(&inst.placement.server_group) {
            errs.push(ValidationError::new(
                codes::INVALID_IDENTIFIER,
                format!("{ipath}.placement.server_group"),
                format!("invalid group {:?}", inst.placement.server_group),
            ));
        }
        if !is_valid_identifier(&inst.placement.container_group) {
            errs.push(ValidationError::new(
                codes::INVALID_IDENTIFIER,
                format!("{ipath}.placement.container_group"),
                format!("invalid group {:?}", inst.placement.container_group),
            ));
        }
        if inst.home_name.is_some() && !inst.home_attr_values.is_empty() {
            // A found home belongs to another assembly; reconfiguring it
            // from this descriptor would mutate shared state.
            errs.push(ValidationError::new(
                codes::SHARED_HOME_ATTRS,
                format!("{ipath}.home_attr_values"),
                "home_attr_values must be empty when home_name is set".to_string(),
            ));
        }
        if let Some(m) = manifest {
            check_attr_values(
                &inst.home_attr_values,
                &m.home_attributes,
                &format!("{ipath}.home_attr_values"),
                &mut errs,
            );
            check_attr_values(
                &inst.instance_attr_values,
                &m.instance_attributes,
                &format!("{ipath}.instance_attr_values"),
                &mut errs,
            );
        }
    }

    let port_of = |instance_id: &str, port: &str| -> Option<PortDecl> {
        let inst = desc.instance(instance_id)?;
        manifests.get(&inst.archive_ref)?.port(port).cloned()
    };

    let mut conn_keys = BTreeSet::new();
    let mut simplex_uses: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (i, conn) in desc.connections.iter().enumerate() {
        let cpath = format!("connections[{i}]");
        if !conn_keys.insert(conn.key()) {
            errs.push(ValidationError::new(
                codes::DUPLICATE_CONNECTION,
                cpath.clone(),
                format!("connection {} listed twice", conn.key()),
            ));
        }
        let mut endpoints_ok = true;
        for (inst_id, port, side) in [
            (&conn.from_instance, &conn.from_port, "from"),
            (&conn.to_instance, &conn.to_port, "to"),
        ] {
            if desc.instance(inst_id).is_none() {
                errs.push(ValidationError::new(
                    codes::DANGLING_REFERENCE,
                    format!("{cpath}.{side}_instance"),
                    format!("connection names undeclared instance {inst_id:?}"),
                ));
                endpoints_ok = false;
            } else if port_of(inst_id, port).is_none() {
                // Missing manifests are already reported as unknown_archive.
                if manifests.contains_key(&desc.instance(inst_id).unwrap().archive_ref) {
                    errs.push(ValidationError::new(
                        codes::UNKNOWN_PORT,
                        format!("{cpath}.{side}_port"),
                        format!("instance {inst_id:?} has no port {port:?}"),
                    ));
                }
                endpoints_ok = false;
            }
        }
        if !endpoints_ok {
            continue;
        }
        let from = port_of(&conn.from_instance, &conn.from_port).unwrap();
        let to = port_of(&conn.to_instance, &conn.to_port).unwrap();
        if !from.kind.is_origin() || !to.kind.is_target() {
            errs.push(ValidationError::new(
                codes::PORT_KIND_MISMATCH,
                cpath.clone(),
                format!("{:?} cannot connect to {:?}", from.kind, to.kind),
            ));
        } else if !check_port_compat(&from, &to) {
            if from.interface_type != to.interface_type {
                errs.push(ValidationError::new(
                    codes::TYPE_MISMATCH,
                    cpath.clone(),
                    format!(
                        "interface {:?} does not match {:?}",
                        from.interface_type, to.interface_type
                    ),
                ));
            } else {
                errs.push(ValidationError::new(
                    codes::PORT_KIND_MISMATCH,
                    cpath.clone(),
                    format!("{:?} cannot connect to {:?}", from.kind, to.kind),
                ));
            }
        }
        if from.kind == PortKind::ReceptacleSimplex {
            *simplex_uses
                .entry((conn.from_instance.clone(), conn.from_port.clone()))
                .or_default() += 1;
        }
    }
    for ((inst, port), uses) in simplex_uses {
        if uses > 1 {
            errs.push(ValidationError::new(
                codes::SIMPLEX_ARITY,
                format!("connections({inst}:{port})"),
                format!("simplex receptacle wired {uses} times"),
            ));
        }
    }

    let mut binding_names = BTreeSet::new();
    for (i, reg) in desc.registrations.iter().enumerate() {
        let rpath = format!("registrations[{i}]");
        if !is_valid_binding_name(&reg.binding_name) {
            errs.push(ValidationError::new(
                codes::INVALID_BINDING_NAME,
                rpath.clone(),
                format!("invalid binding name {:?}", reg.binding_name),
            ));
        }
        if !binding_names.insert(reg.binding_name.clone()) {
            errs.push(ValidationError::new(
                codes::DUPLICATE_BINDING_NAME,
                rpath.clone(),
                format!("binding name {:?} used twice", reg.binding_name),
            ));
        }
        if desc.instance(&reg.instance_id).is_none() {
            errs.push(ValidationError::new(
                codes::DANGLING_REFERENCE,
                rpath,
                format!("registration names undeclared instance {:?}", reg.instance_id),
            ));
        }
    }

    errs.sort();
    errs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical;
    use proptest::prelude::*;

    fn port(name: &str, kind: PortKind, ty: &str) -> PortDecl {
        PortDecl {
            name: name.to_string(),
            kind,
            interface_type: ty.to_string(),
        }
    }

    fn manifest_with_ports(ports: Vec<PortDecl>) -> ArchiveManifest {
        ArchiveManifest {
            component_type: "C".to_string(),
            home_type: "CHome".to_string(),
            ports,
            home_attributes: vec![],
            instance_attributes: vec![],
            behavior: Behavior::Null,
        }
    }

    #[test]
    fn compat_matching_receptacle_facet() {
        let from = port("log", PortKind::ReceptacleSimplex, "Log");
        let to = port("log", PortKind::Facet, "Log");
        assert!(check_port_compat(&from, &to));
    }

    #[test]
    fn compat_facet_is_never_an_origin() {
        let from = port("log", PortKind::Facet, "Log");
        let to = port("log", PortKind::Facet, "Log");
        assert!(!check_port_compat(&from, &to));
    }

    #[test]
    fn compat_full_kind_matrix() {
        // Exhaustive 5x5 enumeration with equal interface types: exactly the
        // three cells simplex->facet, multiplex->facet, source->sink hold.
        let mut truthy = Vec::new();
        for from_kind in PortKind::ALL {
            for to_kind in PortKind::ALL {
                let from = port("a", from_kind, "T");
                let to = port("b", to_kind, "T");
                if check_port_compat(&from, &to) {
                    truthy.push((from_kind, to_kind));
                }
            }
        }
        assert_eq!(
            truthy,
            vec![
                (PortKind::ReceptacleSimplex, PortKind::Facet),
                (PortKind::ReceptacleMultiplex, PortKind::Facet),
                (PortKind::EventSource, PortKind::EventSink),
            ]
        );
    }

    #[test]
    fn compat_kind_roles_are_antisymmetric() {
        for a in PortKind::ALL {
            for b in PortKind::ALL {
                if a == b {
                    continue;
                }
                let pa = port("a", a, "T");
                let pb = port("b", b, "T");
                if check_port_compat(&pa, &pb) {
                    assert!(!check_port_compat(&pb, &pa), "{a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn compat_requires_equal_interface_types() {
        let from = port("a", PortKind::ReceptacleSimplex, "A");
        let to = port("b", PortKind::Facet, "B");
        assert!(!check_port_compat(&from, &to));
    }

    #[test]
    fn empty_descriptor_is_valid() {
        let desc = AssemblyDescriptor {
            name: "empty".to_string(),
            instances: vec![],
            connections: vec![],
            registrations: vec![],
        };
        assert_eq!(validate_descriptor(&desc, &BTreeMap::new()), vec![]);
    }

    #[test]
    fn interface_type_mismatch_is_reported() {
        let mut manifests = BTreeMap::new();
        manifests.insert(
            "x".to_string(),
            manifest_with_ports(vec![
                port("req", PortKind::ReceptacleSimplex, "A"),
                port("svc", PortKind::Facet, "B"),
            ]),
        );
        let spec = |id: &str| InstanceSpec {
            instance_id: id.to_string(),
            archive_ref: "x".to_string(),
            home_name: None,
            placement: PlacementSpec {
                node: None,
                constraints: BTreeMap::new(),
                server_group: "g".to_string(),
                container_group: "c".to_string(),
            },
            home_attr_values: BTreeMap::new(),
            instance_attr_values: BTreeMap::new(),
        };
        let desc = AssemblyDescriptor {
            name: "d".to_string(),
            instances: vec![spec("i1"), spec("i2")],
            connections: vec![ConnectionSpec {
                from_instance: "i1".to_string(),
                from_port: "req".to_string(),
                to_instance: "i2".to_string(),
                to_port: "svc".to_string(),
            }],
            registrations: vec![],
        };
        let errs = validate_descriptor(&desc, &manifests);
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].code, codes::TYPE_MISMATCH);
        assert_eq!(errs[0].path, "connections[0]");
    }

    #[test]
    fn validation_is_deterministic() {
        let desc = AssemblyDescriptor {
            name: "bad name".to_string(),
            instances: vec![],
            connections: vec![ConnectionSpec {
                from_instance: "ghost".to_string(),
                from_port: "p".to_string(),
                to_instance: "ghost".to_string(),
                to_port: "q".to_string(),
            }],
            registrations: vec![],
        };
        let a = validate_descriptor(&desc, &BTreeMap::new());
        let b = validate_descriptor(&desc, &BTreeMap::new());
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn entity_ref_paths_compose() {
        let home = EntityRef::home("n1", "web", "main", "h1");
        assert_eq!(home.id, "n1/web/main/h1");
        let inst = EntityRef::instance(&home, "i1");
        assert_eq!(inst.id, "n1/web/main/h1/i1");
        assert_eq!(inst.node_id, "n1");
        assert_eq!(inst.kind, EntityKind::Instance);
    }

    fn attr_value_strategy() -> impl Strategy<Value = AttrValue> {
        prop_oneof![
            any::<String>().prop_map(AttrValue::String),
            any::<i64>().prop_map(AttrValue::Int),
            // JSON cannot carry NaN/inf; the model forbids them.
            any::<f64>()
                .prop_filter("finite", |f| f.is_finite())
                .prop_map(AttrValue::Float),
            any::<bool>().prop_map(AttrValue::Bool),
        ]
    }

    fn ident_strategy() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_-]{0,8}".prop_map(|s| s)
    }

    fn port_kind_strategy() -> impl Strategy<Value = PortKind> {
        prop_oneof![
            Just(PortKind::Facet),
            Just(PortKind::ReceptacleSimplex),
            Just(PortKind::ReceptacleMultiplex),
            Just(PortKind::EventSource),
            Just(PortKind::EventSink),
        ]
    }

    fn manifest_strategy() -> impl Strategy<Value = ArchiveManifest> {
        (
            ident_strategy(),
            ident_strategy(),
            prop::collection::vec(
                (ident_strategy(), port_kind_strategy(), ident_strategy()),
                0..4,
            ),
            prop::collection::vec(
                (ident_strategy(), attr_value_strategy()),
                0..3,
            ),
        )
            .prop_map(|(ct, ht, ports, attrs)| ArchiveManifest {
                component_type: ct,
                home_type: ht,
                ports: ports
                    .into_iter()
                    .map(|(name, kind, ty)| PortDecl {
                        name,
                        kind,
                        interface_type: ty,
                    })
                    .collect(),
                home_attributes: attrs
                    .iter()
                    .map(|(name, v)| AttributeDecl {
                        name: name.clone(),
                        value_type: v.value_type(),
                        default: Some(v.clone()),
                    })
                    .collect(),
                instance_attributes: vec![],
                behavior: Behavior::Echo,
            })
    }

    proptest! {
        #[test]
        fn attr_value_round_trips(v in attr_value_strategy()) {
            let enc = canonical::to_bytes(&v).unwrap();
            let back: AttrValue = canonical::from_slice(&enc).unwrap();
            prop_assert_eq!(v, back);
        }

        #[test]
        fn manifest_round_trips(m in manifest_strategy()) {
            let enc = canonical::to_bytes(&m).unwrap();
            let back: ArchiveManifest = canonical::from_slice(&enc).unwrap();
            prop_assert_eq!(m, back);
        }

        #[test]
        fn entity_ref_round_trips(
            kind in prop_oneof![
                Just(EntityKind::Node), Just(EntityKind::Server), Just(EntityKind::Container),
                Just(EntityKind::Home), Just(EntityKind::Instance), Just(EntityKind::Assembly)
            ],
            id in ident_strategy(),
            node in ident_strategy(),
        ) {
            let r = EntityRef { kind, id, node_id: node };
            let enc = canonical::to_bytes(&r).unwrap();
            let back: EntityRef = canonical::from_slice(&enc).unwrap();
            prop_assert_eq!(r, back);
        }

        #[test]
        fn trace_event_round_trips(
            seq in any::<u64>(),
            node in ident_strategy(),
            port_a in ident_strategy(),
            port_b in ident_strategy(),
        ) {
            let ev = TraceEvent {
                seq,
                step: TraceStep::Connect,
                subject: TraceSubject::Connection {
                    from: EntityRef::node(&node),
                    from_port: port_a,
                    to: EntityRef::node(&node),
                    to_port: port_b,
                },
                node_id: node,
            };
            let enc = canonical::to_bytes(&ev).unwrap();
            let back: TraceEvent = canonical::from_slice(&enc).unwrap();
            prop_assert_eq!(ev, back);
        }
    }

    #[test]
    fn enums_encode_as_lowercase_strings() {
        assert_eq!(
            canonical::to_string(&PortKind::ReceptacleMultiplex).unwrap(),
            "\"receptacle_multiplex\""
        );
        assert_eq!(canonical::to_string(&Behavior::Null).unwrap(), "\"null\"");
        assert_eq!(
            canonical::to_string(&TraceStep::ConfigurationComplete).unwrap(),
            "\"configuration_complete\""
        );
        assert_eq!(
            canonical::to_string(&AttrValue::Int(5)).unwrap(),
            "{\"int\":5}"
        );
    }
}
