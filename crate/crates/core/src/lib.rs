//! Deployment infrastructure for component-based distributed applications:
//! a domain manager with naming and home-finder registries, per-node agents
//! hosting a server/container/home/instance hierarchy, and an assembly
//! machine that interprets assembly descriptors, executes the standard
//! deployment scenario, and tears it back down.

pub mod archive;
pub mod canonical;
pub mod model;
pub mod node_agent;
pub mod transport;

pub use model::{
    ArchiveManifest, AssemblyDescriptor, AttrValue, AttributeDecl, Behavior, ComponentArchive,
    ConnectionSpec, DeploymentTrace, EntityKind, EntityRef, InstanceSpec, NodeMetaInfo,
    PlacementSpec, PortDecl, PortKind, RegistrationSpec, RegistrationTarget, TraceEvent,
    TraceStep, TraceSubject, ValidationError, ValueType,
};
