//! The host: extension and map registries, worker lanes, shared resources,
//! watchdog lifecycle.
//!
//! Loading and unloading serialize behind the registry guard and never run
//! concurrently with a dispatch of an affected extension: removal first
//! quarantines (no new dispatches), then quiesces (waits for in-flight
//! dispatches), then drops the entries. A panicked extension is
//! crash-stopped: it is removed together with its maps and, recursively,
//! every extension sharing any removed map.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, MutexGuard, RwLock};
use thiserror::Error;

use crate::config::{ConfigError, HostConfig};
use crate::dispatch::{run_dispatch, DispatchOutcome};
use crate::extension::{EntryFn, ExtensionHandle, ProgramKind};
use crate::loader::{classify_stack_mode, lint_manifest, LintReport, LoaderError, StackMode};
use crate::manifest::{ExtensionManifest, ManifestError};
use crate::map::SharedMap;
use crate::panic;
use crate::resource::{RefObject, SpinlockCell};
use crate::ringbuf::RingBuffer;
use crate::typed::DescriptorRegistry;
use crate::view::PacketBuf;
use crate::watchdog::{TickEvent, WatchdogSet};
use crate::worker::{WorkerLane, WorkerShared};

/// Why an extension failed to load or unload.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("rejected by the safe-subset lint: {0}")]
    LintRejected(LintReport),
    #[error(transparent)]
    Loader(#[from] LoaderError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("extension {0} is already loaded")]
    DuplicateId(String),
    #[error("map {map_id} redeclared with a different spec")]
    MapTypeMismatch { map_id: String },
    #[error("unknown extension {0}")]
    UnknownExtension(String),
}

/// Host-level operational errors.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum HostError {
    #[error("worker {0} is busy")]
    WorkerBusy(usize),
    #[error("no worker {0}")]
    UnknownWorker(usize),
    #[error("unknown extension {0}")]
    UnknownExtension(String),
    #[error("unknown static variable {0}")]
    UnknownVar(String),
    #[error("watchdogs already armed")]
    AlreadyArmed,
    #[error("watchdogs not armed")]
    NotArmed,
}

impl std::fmt::Display for LintReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let feats: Vec<&str> = self.violations.iter().map(|v| v.feature.as_str()).collect();
        write!(f, "forbidden features [{}]", feats.join(", "))
    }
}

/// A loaded, dispatchable extension.
pub(crate) struct LoadedExt {
    manifest: ExtensionManifest,
    stack_mode: StackMode,
    entry: EntryFn,
    attached: Vec<(String, Arc<SharedMap>)>,
    entry_frame_bytes: u64,
    quarantined: AtomicBool,
    active: AtomicUsize,
}

impl LoadedExt {
    pub(crate) fn extension_id(&self) -> &str {
        &self.manifest.extension_id
    }

    pub(crate) fn program_kind(&self) -> ProgramKind {
        self.manifest.program_kind
    }

    pub(crate) fn entry(&self) -> &EntryFn {
        &self.entry
    }

    pub(crate) fn entry_frame_bytes(&self) -> u64 {
        self.entry_frame_bytes
    }

    pub(crate) fn attached_map(&self, map_id: &str) -> Option<&Arc<SharedMap>> {
        self.attached
            .iter()
            .find(|(id, _)| id == map_id)
            .map(|(_, m)| m)
    }

    pub(crate) fn quarantine(&self) {
        self.quarantined.store(true, Ordering::Release);
    }

    fn is_quarantined(&self) -> bool {
        self.quarantined.load(Ordering::Acquire)
    }

    pub(crate) fn dispatch_done(&self) {
        self.active.fetch_sub(1, Ordering::AcqRel);
    }

    fn active(&self) -> usize {
        self.active.load(Ordering::Acquire)
    }
}

struct MapEntry {
    map: Arc<SharedMap>,
    users: BTreeSet<String>,
}

#[derive(Default)]
struct Registry {
    exts: BTreeMap<String, Arc<LoadedExt>>,
    maps: BTreeMap<String, MapEntry>,
}

struct WorkerSlot {
    shared: Arc<WorkerShared>,
    lane: Mutex<WorkerLane>,
}

/// The extension host. One per test or process; workers, maps and locks
/// live inside it.
pub struct Host {
    config: HostConfig,
    epoch: Instant,
    ring: RingBuffer,
    registry: RwLock<Registry>,
    workers: Vec<WorkerSlot>,
    locks: Mutex<HashMap<String, Arc<SpinlockCell>>>,
    statics: Mutex<HashMap<String, Arc<AtomicI64>>>,
    ref_objects: Mutex<HashMap<String, Arc<RefObject>>>,
    descriptors: DescriptorRegistry,
    watchdogs: Mutex<Option<WatchdogSet>>,
}

impl Host {
    pub fn new(config: HostConfig) -> Result<Host, ConfigError> {
        config.validate()?;
        panic::install_hook();
        let workers = (0..config.num_workers)
            .map(|id| {
                let shared = WorkerShared::new(id);
                WorkerSlot {
                    lane: Mutex::new(WorkerLane::new(Arc::clone(&shared))),
                    shared,
                }
            })
            .collect();
        Ok(Host {
            config,
            epoch: Instant::now(),
            ring: RingBuffer::new(),
            registry: RwLock::new(Registry::default()),
            workers,
            locks: Mutex::new(HashMap::new()),
            statics: Mutex::new(HashMap::new()),
            ref_objects: Mutex::new(HashMap::new()),
            descriptors: DescriptorRegistry::new(),
            watchdogs: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &HostConfig {
        &self.config
    }

    pub fn num_workers(&self) -> usize {
        self.workers.len()
    }

    /// Monotonic nanoseconds since host start; the only clock in the
    /// system.
    pub fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    pub fn ring(&self) -> &RingBuffer {
        &self.ring
    }

    pub fn descriptors(&self) -> &DescriptorRegistry {
        &self.descriptors
    }

    // ---- extension lifecycle ----

    /// Admits an extension: lint, stack classification, map registration
    /// (create on first declaration, bind afterwards), registry insert.
    pub fn load_extension(
        &self,
        manifest: ExtensionManifest,
        entry: EntryFn,
    ) -> Result<ExtensionHandle, LoadError> {
        manifest.validate()?;
        let lint = lint_manifest(&manifest);
        if !lint.accepted() {
            return Err(LoadError::LintRejected(lint));
        }
        let stack_mode =
            classify_stack_mode(&manifest.callgraph, &manifest.entry_symbol, &self.config)?;
        let entry_frame_bytes = manifest
            .callgraph
            .node(&manifest.entry_symbol)
            .map(|n| n.frame_bytes)
            .unwrap_or(0);

        let mut registry = self.registry.write();
        if registry.exts.contains_key(&manifest.extension_id) {
            return Err(LoadError::DuplicateId(manifest.extension_id));
        }
        // Check every declared map against existing specs before creating
        // anything, so a conflicting manifest has no partial effect.
        for spec in &manifest.declared_maps {
            if let Some(existing) = registry.maps.get(&spec.map_id) {
                if existing.map.spec() != spec {
                    return Err(LoadError::MapTypeMismatch {
                        map_id: spec.map_id.clone(),
                    });
                }
            }
        }
        let mut attached = Vec::with_capacity(manifest.declared_maps.len());
        for spec in &manifest.declared_maps {
            let entry = registry
                .maps
                .entry(spec.map_id.clone())
                .or_insert_with(|| MapEntry {
                    map: SharedMap::create(
                        spec.clone(),
                        self.config.num_workers,
                        self.config.map_hash_seed,
                    ),
                    users: BTreeSet::new(),
                });
            entry.users.insert(manifest.extension_id.clone());
            attached.push((spec.map_id.clone(), Arc::clone(&entry.map)));
        }
        let handle = ExtensionHandle {
            extension_id: manifest.extension_id.clone(),
            program_kind: manifest.program_kind,
            stack_mode,
            attached_maps: attached.iter().map(|(id, _)| id.clone()).collect(),
        };
        let loaded = Arc::new(LoadedExt {
            manifest,
            stack_mode,
            entry,
            attached,
            entry_frame_bytes,
            quarantined: AtomicBool::new(false),
            active: AtomicUsize::new(0),
        });
        registry
            .exts
            .insert(loaded.extension_id().to_string(), loaded);
        Ok(handle)
    }

    /// Removes an extension. With `cascade`, also removes its maps and,
    /// transitively, every extension sharing any removed map. Returns the
    /// removal set in removal order.
    pub fn unload_extension(
        &self,
        extension_id: &str,
        cascade: bool,
    ) -> Result<Vec<String>, LoadError> {
        let mut registry = self.registry.write();
        if !registry.exts.contains_key(extension_id) {
            return Err(LoadError::UnknownExtension(extension_id.to_string()));
        }
        let removal = if cascade {
            removal_component(&registry, extension_id)
        } else {
            vec![extension_id.to_string()]
        };

        // Quarantine first (no new dispatches can start: starting one needs
        // the registry read lock we hold), then wait out in-flight ones.
        let targets: Vec<Arc<LoadedExt>> = removal
            .iter()
            .map(|id| Arc::clone(&registry.exts[id]))
            .collect();
        for ext in &targets {
            ext.quarantine();
        }
        for ext in &targets {
            let mut spins = 0u32;
            while ext.active() > 0 {
                spins += 1;
                if spins % 64 == 0 {
                    std::thread::sleep(std::time::Duration::from_micros(50));
                } else {
                    std::thread::yield_now();
                }
            }
        }

        for id in &removal {
            let ext = registry.exts.remove(id).expect("ext in removal set");
            for (map_id, _) in &ext.attached {
                let drop_map = match registry.maps.get_mut(map_id) {
                    Some(entry) => {
                        entry.users.remove(id);
                        entry.users.is_empty()
                    }
                    None => false,
                };
                if drop_map {
                    registry.maps.remove(map_id);
                }
            }
        }
        Ok(removal)
    }

    /// Crash-stop after a panic: cascade-unload the extension, tolerating a
    /// concurrent removal by another worker's panic path.
    pub(crate) fn crash_stop(&self, extension_id: &str) {
        match self.unload_extension(extension_id, true) {
            Ok(removed) => {
                log::debug!("crash-stop removed {removed:?}");
            }
            Err(LoadError::UnknownExtension(_)) => {}
            Err(e) => log::warn!("crash-stop of {extension_id}: {e}"),
        }
    }

    /// Resolves an extension for dispatch and marks it active.
    pub(crate) fn dispatchable(&self, extension_id: &str) -> Result<Arc<LoadedExt>, HostError> {
        let registry = self.registry.read();
        let ext = registry
            .exts
            .get(extension_id)
            .ok_or_else(|| HostError::UnknownExtension(extension_id.to_string()))?;
        if ext.is_quarantined() {
            return Err(HostError::UnknownExtension(extension_id.to_string()));
        }
        ext.active.fetch_add(1, Ordering::AcqRel);
        Ok(Arc::clone(ext))
    }

    /// Loaded extension ids, sorted.
    pub fn extension_ids(&self) -> Vec<String> {
        self.registry.read().exts.keys().cloned().collect()
    }

    /// Registered map ids, sorted.
    pub fn map_ids(&self) -> Vec<String> {
        self.registry.read().maps.keys().cloned().collect()
    }

    pub fn extension_handle(&self, extension_id: &str) -> Option<ExtensionHandle> {
        let registry = self.registry.read();
        registry.exts.get(extension_id).map(|ext| ExtensionHandle {
            extension_id: ext.extension_id().to_string(),
            program_kind: ext.program_kind(),
            stack_mode: ext.stack_mode,
            attached_maps: ext.attached.iter().map(|(id, _)| id.clone()).collect(),
        })
    }

    /// Host-side handle to a registered map (harness use; extensions go
    /// through their context).
    pub fn map(&self, map_id: &str) -> Option<Arc<SharedMap>> {
        self.registry
            .read()
            .maps
            .get(map_id)
            .map(|e| Arc::clone(&e.map))
    }

    // ---- workers ----

    /// Checks out a worker lane for dispatching on the calling thread.
    pub fn worker(&self, worker_id: usize) -> Result<Worker<'_>, HostError> {
        let slot = self
            .workers
            .get(worker_id)
            .ok_or(HostError::UnknownWorker(worker_id))?;
        let lane = slot
            .lane
            .try_lock()
            .ok_or(HostError::WorkerBusy(worker_id))?;
        Ok(Worker { host: self, lane })
    }

    pub fn worker_shared(&self, worker_id: usize) -> Option<&Arc<WorkerShared>> {
        self.workers.get(worker_id).map(|s| &s.shared)
    }

    /// One-shot dispatch: checkout worker, dispatch, release.
    pub fn dispatch_on(
        &self,
        worker_id: usize,
        extension_id: &str,
        packet: Option<PacketBuf>,
    ) -> Result<DispatchOutcome, HostError> {
        self.worker(worker_id)?.dispatch(extension_id, packet)
    }

    // ---- shared resources ----

    /// Host spinlock by id, created on first use.
    pub fn spinlock(&self, lock_id: &str) -> Arc<SpinlockCell> {
        Arc::clone(
            self.locks
                .lock()
                .entry(lock_id.to_string())
                .or_insert_with(|| SpinlockCell::new(lock_id)),
        )
    }

    /// Snapshot of all spinlocks, for leak audits.
    pub fn spinlocks(&self) -> Vec<Arc<SpinlockCell>> {
        self.locks.lock().values().cloned().collect()
    }

    /// Refcounted demo object by id, created on first use.
    pub fn ref_object(&self, object_id: &str) -> Arc<RefObject> {
        Arc::clone(
            self.ref_objects
                .lock()
                .entry(object_id.to_string())
                .or_insert_with(|| RefObject::new(object_id)),
        )
    }

    /// Current refcounts of all demo objects.
    pub fn ref_snapshot(&self) -> BTreeMap<String, i64> {
        self.ref_objects
            .lock()
            .iter()
            .map(|(id, obj)| (id.clone(), obj.count()))
            .collect()
    }

    /// Registers (or fetches) a host-global atomic static.
    pub fn register_static(&self, var_id: &str) -> Arc<AtomicI64> {
        Arc::clone(
            self.statics
                .lock()
                .entry(var_id.to_string())
                .or_insert_with(|| Arc::new(AtomicI64::new(0))),
        )
    }

    /// A registered atomic static, or `UnknownVar`.
    pub fn atomic_static(&self, var_id: &str) -> Result<Arc<AtomicI64>, HostError> {
        self.statics
            .lock()
            .get(var_id)
            .cloned()
            .ok_or_else(|| HostError::UnknownVar(var_id.to_string()))
    }

    // ---- watchdogs ----

    /// Arms one periodic watchdog timer per worker.
    pub fn arm_watchdogs(&self) -> Result<(), HostError> {
        let mut watchdogs = self.watchdogs.lock();
        if watchdogs.is_some() {
            return Err(HostError::AlreadyArmed);
        }
        *watchdogs = Some(WatchdogSet::arm(
            &self.workers.iter().map(|s| Arc::clone(&s.shared)).collect::<Vec<_>>(),
            self.epoch,
            self.config.watchdog_period,
            self.config.termination_timeout,
        ));
        Ok(())
    }

    /// Disarms the timers, waiting for in-flight ticks; returns each
    /// worker's tick events.
    pub fn disarm_watchdogs(&self) -> Result<Vec<Vec<TickEvent>>, HostError> {
        let set = self.watchdogs.lock().take().ok_or(HostError::NotArmed)?;
        Ok(set.disarm())
    }

    pub fn watchdogs_armed(&self) -> bool {
        self.watchdogs.lock().is_some()
    }

    /// Tick events recorded so far for one worker (armed hosts only).
    pub fn watchdog_events(&self, worker_id: usize) -> Vec<TickEvent> {
        self.watchdogs
            .lock()
            .as_ref()
            .map(|set| set.events(worker_id))
            .unwrap_or_default()
    }

    /// All tick events so far, ordered by time.
    pub fn watchdog_events_all(&self) -> Vec<TickEvent> {
        self.watchdogs
            .lock()
            .as_ref()
            .map(|set| set.all_events())
            .unwrap_or_default()
    }

    /// When set, watchdog threads record `None` ticks too.
    pub fn set_watchdog_record_idle(&self, on: bool) {
        if let Some(set) = self.watchdogs.lock().as_ref() {
            set.set_record_idle(on);
        }
    }
}

impl Drop for Host {
    fn drop(&mut self) {
        if let Some(set) = self.watchdogs.lock().take() {
            set.disarm();
        }
    }
}

/// A checked-out worker lane. Holding it makes the caller the worker's
/// lane thread; dispatches run synchronously on it.
pub struct Worker<'h> {
    host: &'h Host,
    lane: MutexGuard<'h, WorkerLane>,
}

impl Worker<'_> {
    pub fn worker_id(&self) -> usize {
        self.lane.worker_id()
    }

    pub fn lane(&self) -> &WorkerLane {
        &self.lane
    }

    /// Dispatches one extension on this worker.
    pub fn dispatch(
        &mut self,
        extension_id: &str,
        packet: Option<PacketBuf>,
    ) -> Result<DispatchOutcome, HostError> {
        let ext = self.host.dispatchable(extension_id)?;
        Ok(run_dispatch(self.host, &self.lane, ext, packet))
    }
}

/// Removal order for a cascade unload: breadth-first over the
/// extension-map sharing graph, maps in declaration order, co-users in
/// lexicographic order.
fn removal_component(registry: &Registry, seed: &str) -> Vec<String> {
    let mut order = vec![seed.to_string()];
    let mut seen: BTreeSet<String> = BTreeSet::new();
    seen.insert(seed.to_string());
    let mut i = 0;
    while i < order.len() {
        let ext = &registry.exts[&order[i]];
        for (map_id, _) in &ext.attached {
            if let Some(entry) = registry.maps.get(map_id) {
                for user in &entry.users {
                    if seen.insert(user.clone()) {
                        order.push(user.clone());
                    }
                }
            }
        }
        i += 1;
    }
    order
}
