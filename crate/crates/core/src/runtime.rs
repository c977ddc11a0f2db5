//! Per-rank execution of the distributed matvec: one scheduling flow plus a
//! worker pool drain the four task lists, exchanging moment and local
//! payloads over the transport as dependencies complete.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::assembly::{assemble_block, NearfieldBlock, PairRules, QuadratureSpec};
use crate::fmm::{
    l2l_spacetime, l2l_temporal, l2t, m2l, m2m_spacetime, m2m_temporal, s2m, FmmSetup, M2lScratch,
    OpCounts,
};
use crate::mesh::SpaceTimeMesh;
use crate::schedule::{
    assign_clusters, build_let, build_task_lists, flow_flags, FlowFlags, Let, ListKind,
    RankAssignment, ScheduleError, TaskLists,
};
use crate::transport::{Message, MessageKind, Transport, TransportError};
use crate::trace::{EventCategory, TraceEvent};
use crate::tree::{ClusterTree, RefinementKind, TemporalTree};

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("rank {rank} stalled: {pending}")]
    Stalled { rank: usize, pending: String },
}

/// How eagerly the scheduling flow joins task execution: it executes pending
/// work items itself whenever more than `threshold` items are queued but not
/// yet started. `Infinite` reproduces a scheduler that never computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdPolicy {
    Default,
    Fixed(usize),
    Infinite,
}

#[derive(Debug, Clone)]
pub struct RankConfig {
    pub workers: usize,
    pub threshold: ThresholdPolicy,
    pub record_trace: bool,
    pub log_messages: bool,
    pub stall_timeout: Duration,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            workers: 1,
            threshold: ThresholdPolicy::Default,
            record_trace: false,
            log_messages: false,
            stall_timeout: Duration::from_secs(30),
        }
    }
}

impl RankConfig {
    fn threshold_value(&self) -> Option<usize> {
        match self.threshold {
            ThresholdPolicy::Default => Some(2 * self.workers.max(1)),
            ThresholdPolicy::Fixed(v) => Some(v),
            ThresholdPolicy::Infinite => None,
        }
    }
}

/// Problem state shared by all ranks of a run (built identically on each
/// process from the same mesh and parameters).
pub struct DistributedProblem {
    pub mesh: Arc<SpaceTimeMesh>,
    pub tree: Arc<ClusterTree>,
    pub tt: Arc<TemporalTree>,
    pub setup: Arc<FmmSetup>,
    pub assignment: Arc<RankAssignment>,
    pub flags: Arc<FlowFlags>,
    pub alpha: f64,
    /// Temporal owner of every space-time cluster.
    pub st_owner: Vec<usize>,
}

impl DistributedProblem {
    pub fn new(
        mesh: Arc<SpaceTimeMesh>,
        tree: Arc<ClusterTree>,
        tt: Arc<TemporalTree>,
        setup: Arc<FmmSetup>,
        alpha: f64,
        n_ranks: usize,
        slice_level: Option<usize>,
    ) -> Result<Self, ScheduleError> {
        let assignment = Arc::new(assign_clusters(&tt, n_ranks, slice_level)?);
        let flags = Arc::new(flow_flags(&tt));
        let mut st_owner = vec![0usize; tree.n_clusters()];
        for t in &tt.clusters {
            for &z in &t.st_clusters {
                st_owner[z] = assignment.owner[t.id];
            }
        }
        Ok(DistributedProblem { mesh, tree, tt, setup, assignment, flags, alpha, st_owner })
    }

    /// Global DOF indices owned by `rank` (elements of space-time leaves
    /// whose temporal cluster is assigned to it), ascending.
    pub fn owned_dofs(&self, rank: usize) -> Vec<usize> {
        let mut dofs = Vec::new();
        for z in self.tree.leaves() {
            if self.st_owner[z.id] == rank {
                for (kt, kx) in z.elements() {
                    dofs.push(self.mesh.dof0(kt, kx));
                }
            }
        }
        dofs.sort_unstable();
        dofs
    }
}

/// A record of one transported message, for flow audits.
#[derive(Debug, Clone)]
pub struct MessageRecord {
    pub sender: usize,
    pub dest: usize,
    pub kind: MessageKind,
    pub cluster: usize,
}

/// Result of one distributed matvec on one rank.
pub struct MatvecOutcome {
    /// Full-length vector with the rank's owned entries filled.
    pub f_owned: Vec<f64>,
    pub ops: OpCounts,
    pub trace: Vec<TraceEvent>,
    pub sent: Vec<MessageRecord>,
    pub received: Vec<MessageRecord>,
    pub span: Duration,
}

/// One rank's live state: LET, task lists, locally assembled nearfield
/// blocks, and its transport endpoint.
pub struct RankRuntime {
    pub rank: usize,
    pub problem: Arc<DistributedProblem>,
    pub let_: Let,
    pub lists: TaskLists,
    blocks_by_target: HashMap<usize, Vec<NearfieldBlock>>,
    transport: Box<dyn Transport>,
    pub cfg: RankConfig,
    epoch: u64,
    /// Vector segments that arrived ahead of the collective expecting them.
    pending_segments: Vec<Message>,
}

impl RankRuntime {
    /// Builds the rank's LET, task lists, and nearfield blocks (for owned
    /// leaf targets only).
    pub fn new(
        problem: Arc<DistributedProblem>,
        transport: Box<dyn Transport>,
        quad: &QuadratureSpec,
        cfg: RankConfig,
    ) -> Self {
        let rank = transport.rank();
        let let_ = build_let(rank, &problem.tt, &problem.assignment, &problem.flags);
        let lists = build_task_lists(&let_, &problem.tree, &problem.tt, &problem.assignment, &problem.flags);
        let rules = PairRules::new(quad);
        let mut blocks_by_target: HashMap<usize, Vec<NearfieldBlock>> = HashMap::new();
        for z in problem.tree.leaves() {
            if problem.st_owner[z.id] != rank {
                continue;
            }
            let blocks: Vec<NearfieldBlock> = z
                .nearfield
                .iter()
                .map(|&src| assemble_block(&problem.tree, &problem.mesh, problem.alpha, &rules, z.id, src))
                .collect();
            blocks_by_target.insert(z.id, blocks);
        }
        RankRuntime {
            rank,
            problem,
            let_,
            lists,
            blocks_by_target,
            transport,
            cfg,
            epoch: 0,
            pending_segments: Vec::new(),
        }
    }

    pub fn n_ranks(&self) -> usize {
        self.transport.n_ranks()
    }

    /// One distributed matvec: drains the task lists, exchanging moments and
    /// locals with the other ranks, and returns the owned segment of
    /// f = V_h w. `w` must hold valid values on the rank's owned DOFs and on
    /// the DOFs of temporal-nearfield neighbors; passing the full vector
    /// satisfies this trivially.
    pub fn matvec(&mut self, w: &[f64]) -> Result<MatvecOutcome, RuntimeError> {
        self.epoch += 1;
        let n_dofs = self.problem.mesh.n_dofs();
        assert_eq!(w.len(), n_dofs);
        let tensor_len = self.problem.setup.tensor_len();
        let n_clusters = self.problem.tree.n_clusters();

        let state = MatvecState {
            moments: (0..n_clusters).map(|_| Mutex::new(vec![0.0; tensor_len])).collect(),
            lambda_own: (0..n_clusters).map(|_| Mutex::new(vec![0.0; tensor_len])).collect(),
            lambda_inherit: (0..n_clusters).map(|_| Mutex::new(vec![0.0; tensor_len])).collect(),
            lambda_total: (0..n_clusters).map(|_| Mutex::new(vec![0.0; tensor_len])).collect(),
            f_far: Mutex::new(vec![0.0; n_dofs]),
            f_near: Mutex::new(vec![0.0; n_dofs]),
            deps: self
                .lists
                .tasks
                .iter()
                .map(|t| AtomicUsize::new(t.deps_local + t.expected.len()))
                .collect(),
            items_left: (0..self.lists.tasks.len()).map(|_| AtomicUsize::new(0)).collect(),
            lambda_parts: self
                .lists
                .lambda_parts
                .iter()
                .map(|(&t, &p)| (t, AtomicUsize::new(p)))
                .collect(),
            tasks_completed: AtomicUsize::new(0),
            progress: AtomicU64::new(0),
            ops: Default::default(),
            queue: Mutex::new(std::collections::VecDeque::new()),
            queue_cv: Condvar::new(),
            shutdown: AtomicUsize::new(0),
            traces: (0..self.cfg.workers + 1).map(|_| Mutex::new(Vec::new())).collect(),
            sent: Mutex::new(Vec::new()),
            received: Mutex::new(Vec::new()),
            error: Mutex::new(None),
            t0: Instant::now(),
        };

        // expected-message table: tag -> consumer tasks
        let mut expected: HashMap<(usize, MessageKind), ExpectedEntry> = HashMap::new();
        for (idx, task) in self.lists.tasks.iter().enumerate() {
            for &(cluster, kind) in &task.expected {
                expected
                    .entry((cluster, kind))
                    .or_insert_with(|| ExpectedEntry { consumers: Vec::new(), received: false })
                    .consumers
                    .push(idx);
            }
        }

        // local dependency edges
        let mut m_done_deps: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut lambda_part_deps: HashMap<usize, Vec<usize>> = HashMap::new();
        for (idx, task) in self.lists.tasks.iter().enumerate() {
            let t = self.problem.tt.cluster(task.temporal);
            match task.kind {
                ListKind::M => {
                    for &c in &t.children {
                        if self.problem.assignment.owner[c] == self.rank {
                            m_done_deps.entry(c).or_default().push(idx);
                        }
                    }
                }
                ListKind::M2l => {
                    for &src in &t.interaction {
                        if self.problem.assignment.owner[src] == self.rank {
                            m_done_deps.entry(src).or_default().push(idx);
                        }
                    }
                }
                ListKind::L => {
                    let p = t.parent.expect("L task has a parent");
                    if self.problem.assignment.owner[p] == self.rank {
                        lambda_part_deps.entry(p).or_default().push(idx);
                    }
                }
                ListKind::N => {}
            }
        }

        let ctx = MatvecCtx {
            rt: self,
            state: &state,
            w,
            m_done_deps: &m_done_deps,
            lambda_part_deps: &lambda_part_deps,
        };

        let workers = self.cfg.workers;
        std::thread::scope(|scope| {
            for lane in 1..=workers {
                let ctx_ref = &ctx;
                scope.spawn(move || ctx_ref.worker_loop(lane));
            }
            let result = ctx.scheduler_loop(expected);
            state.shutdown.store(1, Ordering::SeqCst);
            ctx.state.queue_cv.notify_all();
            result
        })?;

        if let Some(err) = state.error.lock().unwrap().take() {
            return Err(err);
        }

        // assemble the owned result: f = f_far + f_near on owned segments
        let f_far = state.f_far.into_inner().unwrap();
        let f_near = state.f_near.into_inner().unwrap();
        let mut f_owned = vec![0.0; n_dofs];
        for z in self.problem.tree.leaves() {
            if self.problem.st_owner[z.id] == self.rank {
                for (kt, kx) in z.elements() {
                    let d = self.problem.mesh.dof0(kt, kx);
                    f_owned[d] = f_far[d] + f_near[d];
                }
            }
        }

        // exactly-once bookkeeping must close out
        let completed = state.tasks_completed.load(Ordering::SeqCst);
        if completed != self.lists.tasks.len() {
            return Err(RuntimeError::Protocol(format!(
                "{} of {} tasks completed",
                completed,
                self.lists.tasks.len()
            )));
        }
        for (i, d) in state.deps.iter().enumerate() {
            let v = d.load(Ordering::SeqCst);
            if v != 0 {
                return Err(RuntimeError::Protocol(format!("task {i} ended with {v} dependencies")));
            }
        }

        let mut trace = Vec::new();
        for lane in state.traces {
            trace.extend(lane.into_inner().unwrap());
        }
        trace.sort_by_key(|e| (e.start_us, e.worker));
        Ok(MatvecOutcome {
            f_owned,
            ops: take_ops(&state.ops),
            trace,
            sent: state.sent.into_inner().unwrap(),
            received: state.received.into_inner().unwrap(),
            span: state.t0.elapsed(),
        })
    }

    /// Exchanges owned vector segments with all ranks so every rank ends up
    /// holding the full vector: the collective used between GMRES steps.
    /// Sequence-tagged so early arrivals from faster peers are buffered.
    pub fn allgather(&mut self, seq: u32, v_owned: &[f64], out: &mut [f64]) -> Result<(), RuntimeError> {
        let n_ranks = self.n_ranks();
        out.copy_from_slice(v_owned);
        if n_ranks == 1 {
            return Ok(());
        }
        let layouts: Vec<Vec<usize>> =
            (0..n_ranks).map(|r| self.problem.owned_dofs(r)).collect();
        let my_payload: Vec<f64> = layouts[self.rank].iter().map(|&d| v_owned[d]).collect();
        for dest in 0..n_ranks {
            if dest != self.rank {
                self.transport.send(Message {
                    sender: self.rank,
                    dest,
                    cluster: seq,
                    kind: MessageKind::VectorSegment,
                    payload: my_payload.clone(),
                })?;
            }
        }
        let mut have = vec![false; n_ranks];
        have[self.rank] = true;
        let mut n_have = 1;
        // consume buffered early arrivals first
        let mut stash = std::mem::take(&mut self.pending_segments);
        let deadline = Instant::now() + self.cfg.stall_timeout;
        loop {
            for msg in stash.drain(..) {
                if msg.cluster != seq {
                    return Err(RuntimeError::Protocol(format!(
                        "vector segment for sequence {} while collecting {}",
                        msg.cluster, seq
                    )));
                }
                let lay = &layouts[msg.sender];
                if lay.len() != msg.payload.len() {
                    return Err(RuntimeError::Protocol("segment length mismatch".into()));
                }
                for (d, v) in lay.iter().zip(&msg.payload) {
                    out[*d] = *v;
                }
                if !have[msg.sender] {
                    have[msg.sender] = true;
                    n_have += 1;
                }
            }
            if n_have == n_ranks {
                return Ok(());
            }
            for msg in self.transport.poll()? {
                if msg.kind == MessageKind::VectorSegment {
                    if msg.cluster == seq {
                        stash.push(msg);
                    } else {
                        self.pending_segments.push(msg);
                    }
                } else {
                    return Err(RuntimeError::Protocol(format!(
                        "unexpected {:?} during a vector collective",
                        msg.kind
                    )));
                }
            }
            if stash.is_empty() {
                if Instant::now() > deadline {
                    return Err(RuntimeError::Stalled {
                        rank: self.rank,
                        pending: format!("allgather seq {seq}: have {n_have}/{n_ranks}"),
                    });
                }
                std::thread::yield_now();
            }
        }
    }
}

struct ExpectedEntry {
    consumers: Vec<usize>,
    received: bool,
}

enum ItemKind {
    S2m,
    M2m,
    M2l,
    L2l,
    Nf,
}

struct WorkItem {
    task_idx: usize,
    kind: ItemKind,
    clusters: Vec<usize>,
}

struct MatvecState {
    moments: Vec<Mutex<Vec<f64>>>,
    lambda_own: Vec<Mutex<Vec<f64>>>,
    lambda_inherit: Vec<Mutex<Vec<f64>>>,
    lambda_total: Vec<Mutex<Vec<f64>>>,
    f_far: Mutex<Vec<f64>>,
    f_near: Mutex<Vec<f64>>,
    deps: Vec<AtomicUsize>,
    items_left: Vec<AtomicUsize>,
    lambda_parts: HashMap<usize, AtomicUsize>,
    tasks_completed: AtomicUsize,
    progress: AtomicU64,
    ops: OpCell,
    queue: Mutex<std::collections::VecDeque<WorkItem>>,
    queue_cv: Condvar,
    shutdown: AtomicUsize,
    traces: Vec<Mutex<Vec<TraceEvent>>>,
    sent: Mutex<Vec<MessageRecord>>,
    received: Mutex<Vec<MessageRecord>>,
    error: Mutex<Option<RuntimeError>>,
    t0: Instant,
}

#[derive(Default)]
struct OpCell {
    s2m: AtomicU64,
    m2m: AtomicU64,
    m2l: AtomicU64,
    l2l: AtomicU64,
    l2t: AtomicU64,
    nearfield: AtomicU64,
}

fn add_ops(cell: &OpCell, ops: &OpCounts) {
    cell.s2m.fetch_add(ops.s2m, Ordering::Relaxed);
    cell.m2m.fetch_add(ops.m2m, Ordering::Relaxed);
    cell.m2l.fetch_add(ops.m2l, Ordering::Relaxed);
    cell.l2l.fetch_add(ops.l2l, Ordering::Relaxed);
    cell.l2t.fetch_add(ops.l2t, Ordering::Relaxed);
    cell.nearfield.fetch_add(ops.nearfield, Ordering::Relaxed);
}

fn take_ops(cell: &OpCell) -> OpCounts {
    OpCounts {
        s2m: cell.s2m.load(Ordering::Relaxed),
        m2m: cell.m2m.load(Ordering::Relaxed),
        m2l: cell.m2l.load(Ordering::Relaxed),
        l2l: cell.l2l.load(Ordering::Relaxed),
        l2t: cell.l2t.load(Ordering::Relaxed),
        nearfield: cell.nearfield.load(Ordering::Relaxed),
    }
}

struct MatvecCtx<'a> {
    rt: &'a RankRuntime,
    state: &'a MatvecState,
    w: &'a [f64],
    m_done_deps: &'a HashMap<usize, Vec<usize>>,
    lambda_part_deps: &'a HashMap<usize, Vec<usize>>,
}

impl<'a> MatvecCtx<'a> {
    fn now_us(&self) -> u64 {
        self.state.t0.elapsed().as_micros() as u64
    }

    fn trace(&self, lane: usize, category: EventCategory, name: String, start_us: u64) {
        if !self.rt.cfg.record_trace {
            return;
        }
        let dur = self.now_us().saturating_sub(start_us);
        self.state.traces[lane].lock().unwrap().push(TraceEvent {
            name,
            category,
            rank: self.rt.rank,
            worker: lane,
            start_us,
            dur_us: dur,
        });
    }

    fn scheduler_loop(
        &self,
        mut expected: HashMap<(usize, MessageKind), ExpectedEntry>,
    ) -> Result<(), RuntimeError> {
        let n_tasks = self.rt.lists.tasks.len();
        let mut started = vec![false; n_tasks];
        let mut n_started = 0usize;
        let threshold = self.rt.cfg.threshold_value();
        let mut last_progress = self.state.progress.load(Ordering::SeqCst);
        let mut last_progress_at = Instant::now();

        let scan_order: Vec<usize> = {
            let mut order = Vec::with_capacity(n_tasks);
            for kind in [ListKind::M, ListKind::L, ListKind::M2l, ListKind::N] {
                order.extend_from_slice(self.rt.lists.list(kind));
            }
            order
        };

        loop {
            for msg in self.rt.transport.poll()? {
                self.handle_message(msg, &mut expected)?;
            }
            if let Some(err) = self.state.error.lock().unwrap().take() {
                return Err(err);
            }
            if self.state.tasks_completed.load(Ordering::SeqCst) == n_tasks {
                return Ok(());
            }

            // FindNextCluster: first ready task in M -> L -> M2L -> N order
            let mut issued_any = false;
            if n_started < n_tasks {
                for &idx in &scan_order {
                    if !started[idx] && self.state.deps[idx].load(Ordering::SeqCst) == 0 {
                        started[idx] = true;
                        n_started += 1;
                        self.issue_task(idx);
                        issued_any = true;
                        break;
                    }
                }
            }

            // scheduler participation: join execution while the backlog of
            // issued-but-unstarted items exceeds the threshold
            if let Some(th) = threshold {
                loop {
                    let item = {
                        let mut q = self.state.queue.lock().unwrap();
                        if q.len() > th {
                            q.pop_front()
                        } else {
                            None
                        }
                    };
                    match item {
                        Some(it) => self.execute_item(it, 0),
                        None => break,
                    }
                }
            }

            let progress = self.state.progress.load(Ordering::SeqCst);
            if progress != last_progress || issued_any {
                last_progress = progress;
                last_progress_at = Instant::now();
            } else {
                if last_progress_at.elapsed() > self.rt.cfg.stall_timeout {
                    let pending: Vec<String> = (0..n_tasks)
                        .filter(|&i| {
                            !started[i] || self.state.items_left[i].load(Ordering::SeqCst) > 0
                        })
                        .take(8)
                        .map(|i| {
                            let t = &self.rt.lists.tasks[i];
                            format!(
                                "{:?}(c{} deps={})",
                                t.kind,
                                t.temporal,
                                self.state.deps[i].load(Ordering::SeqCst)
                            )
                        })
                        .collect();
                    return Err(RuntimeError::Stalled {
                        rank: self.rt.rank,
                        pending: pending.join(", "),
                    });
                }
                std::thread::yield_now();
            }
        }
    }

    fn handle_message(
        &self,
        msg: Message,
        expected: &mut HashMap<(usize, MessageKind), ExpectedEntry>,
    ) -> Result<(), RuntimeError> {
        let stride = self.rt.problem.tt.clusters.len() as u64;
        if msg.kind == MessageKind::VectorSegment {
            return Err(RuntimeError::Protocol(
                "vector segment received during a matvec".into(),
            ));
        }
        let raw = msg.cluster as u64;
        let epoch = raw / stride + 1;
        let cluster = (raw % stride) as usize;
        if epoch != self.rt.epoch {
            return Err(RuntimeError::Protocol(format!(
                "message for epoch {epoch} during epoch {}",
                self.rt.epoch
            )));
        }
        let entry = expected.get_mut(&(cluster, msg.kind)).ok_or_else(|| {
            RuntimeError::Protocol(format!("unexpected message ({cluster}, {:?})", msg.kind))
        })?;
        if entry.received {
            return Err(RuntimeError::Protocol(format!(
                "duplicate tag ({cluster}, {:?})",
                msg.kind
            )));
        }
        entry.received = true;

        if self.rt.cfg.log_messages {
            self.state.received.lock().unwrap().push(MessageRecord {
                sender: msg.sender,
                dest: self.rt.rank,
                kind: msg.kind,
                cluster,
            });
        }
        let t_recv = self.now_us();
        self.trace(0, EventCategory::RECV, format!("recv c{cluster} from {}", msg.sender), t_recv);

        // unpack into ghost tensors: concatenated per space-time cluster,
        // ascending cluster id, each tensor a-major / graded-lex
        let tensor_len = self.rt.problem.setup.tensor_len();
        let st = &self.rt.problem.tt.cluster(cluster).st_clusters;
        if msg.payload.len() != st.len() * tensor_len {
            return Err(RuntimeError::Protocol(format!(
                "payload length {} != {} tensors of {tensor_len}",
                msg.payload.len(),
                st.len()
            )));
        }
        let target = match msg.kind {
            MessageKind::MomentsToParent | MessageKind::MomentsToInteraction => &self.state.moments,
            MessageKind::LocalsToChild => &self.state.lambda_total,
            MessageKind::VectorSegment => unreachable!(),
        };
        for (i, &z) in st.iter().enumerate() {
            let mut guard = target[z].lock().unwrap();
            guard.copy_from_slice(&msg.payload[i * tensor_len..(i + 1) * tensor_len]);
        }

        for &consumer in &expected[&(cluster, msg.kind)].consumers {
            self.state.deps[consumer].fetch_sub(1, Ordering::SeqCst);
        }
        self.state.progress.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    fn issue_task(&self, idx: usize) {
        let task = &self.rt.lists.tasks[idx];
        let tree = &self.rt.problem.tree;
        let st = &self.rt.problem.tt.cluster(task.temporal).st_clusters;
        let mut items: Vec<WorkItem> = Vec::new();
        match task.kind {
            ListKind::M => {
                let leaves: Vec<usize> = st.iter().copied().filter(|&z| tree.cluster(z).is_leaf).collect();
                let inner: Vec<usize> = st.iter().copied().filter(|&z| !tree.cluster(z).is_leaf).collect();
                for z in leaves {
                    items.push(WorkItem { task_idx: idx, kind: ItemKind::S2m, clusters: vec![z] });
                }
                for z in inner {
                    items.push(WorkItem { task_idx: idx, kind: ItemKind::M2m, clusters: vec![z] });
                }
            }
            ListKind::M2l => {
                for &z in st {
                    if !tree.cluster(z).interaction.is_empty() {
                        items.push(WorkItem { task_idx: idx, kind: ItemKind::M2l, clusters: vec![z] });
                    }
                }
            }
            ListKind::L => {
                for &z in st {
                    items.push(WorkItem { task_idx: idx, kind: ItemKind::L2l, clusters: vec![z] });
                }
            }
            ListKind::N => {
                for &z in st {
                    if tree.cluster(z).is_leaf {
                        items.push(WorkItem { task_idx: idx, kind: ItemKind::Nf, clusters: vec![z] });
                    }
                }
            }
        }
        if items.is_empty() {
            self.complete_task(idx, 0);
            return;
        }
        self.state.items_left[idx].store(items.len(), Ordering::SeqCst);
        let mut q = self.state.queue.lock().unwrap();
        for item in items {
            q.push_back(item);
        }
        drop(q);
        self.state.queue_cv.notify_all();
    }

    fn worker_loop(&self, lane: usize) {
        loop {
            let item = {
                let mut q = self.state.queue.lock().unwrap();
                loop {
                    if let Some(item) = q.pop_front() {
                        break Some(item);
                    }
                    if self.state.shutdown.load(Ordering::SeqCst) == 1 {
                        break None;
                    }
                    let (guard, _) = self
                        .state
                        .queue_cv
                        .wait_timeout(q, Duration::from_millis(1))
                        .unwrap();
                    q = guard;
                }
            };
            match item {
                Some(it) => self.execute_item(it, lane),
                None => return,
            }
        }
    }

    fn execute_item(&self, item: WorkItem, lane: usize) {
        let t0 = self.now_us();
        let setup = &self.rt.problem.setup;
        let tree = &self.rt.problem.tree;
        let mesh = &self.rt.problem.mesh;
        let mut ops = OpCounts::default();
        let (category, name) = match item.kind {
            ItemKind::S2m => (EventCategory::S2M, format!("S2M t{}", self.rt.lists.tasks[item.task_idx].temporal)),
            ItemKind::M2m => (EventCategory::M2M, format!("M2M t{}", self.rt.lists.tasks[item.task_idx].temporal)),
            ItemKind::M2l => (EventCategory::M2L, format!("M2L t{}", self.rt.lists.tasks[item.task_idx].temporal)),
            ItemKind::L2l => (EventCategory::L2L, format!("L2L t{}", self.rt.lists.tasks[item.task_idx].temporal)),
            ItemKind::Nf => (EventCategory::NF, format!("NF t{}", self.rt.lists.tasks[item.task_idx].temporal)),
        };

        for &z in &item.clusters {
            let c = tree.cluster(z);
            match item.kind {
                ItemKind::S2m => {
                    let w_seg: Vec<f64> = c.elements().map(|(kt, kx)| self.w[mesh.dof0(kt, kx)]).collect();
                    let mut mu = self.state.moments[z].lock().unwrap();
                    s2m(setup, tree, z, &w_seg, &mut mu, &mut ops);
                }
                ItemKind::M2m => {
                    // lock order: parent (smaller id) before each child
                    let mut mu = self.state.moments[z].lock().unwrap();
                    let kind = c.child_refinement.expect("non-leaf");
                    for &ch in &c.children {
                        let child = tree.cluster(ch);
                        let mu_c = self.state.moments[ch].lock().unwrap();
                        match kind {
                            RefinementKind::TemporalOnly => {
                                m2m_temporal(setup, c.interval, child.interval, &mu_c, &mut mu, &mut ops)
                            }
                            RefinementKind::SpaceTime => m2m_spacetime(
                                setup,
                                &c.box4(),
                                &child.box4(),
                                &mu_c,
                                &mut mu,
                                &mut ops,
                            ),
                        }
                    }
                }
                ItemKind::M2l => {
                    let mut scratch = M2lScratch::new(setup.orders.m_x);
                    let mut lam = self.state.lambda_own[z].lock().unwrap();
                    for &src in &c.interaction {
                        let coeffs = setup
                            .coeffs_for(tree, z, src)
                            .expect("interaction pair admissible");
                        let mu_s = self.state.moments[src].lock().unwrap();
                        m2l(setup, &coeffs, &mu_s, &mut lam, &mut scratch, &mut ops);
                    }
                }
                ItemKind::L2l => {
                    let p = c.parent.expect("L work on a non-root cluster");
                    let parent = tree.cluster(p);
                    let lam_p = self.state.lambda_total[p].lock().unwrap();
                    let mut inherit = self.state.lambda_inherit[z].lock().unwrap();
                    match parent.child_refinement.expect("parent refined") {
                        RefinementKind::TemporalOnly => l2l_temporal(
                            setup,
                            parent.interval,
                            c.interval,
                            &lam_p,
                            &mut inherit,
                            &mut ops,
                        ),
                        RefinementKind::SpaceTime => l2l_spacetime(
                            setup,
                            &parent.box4(),
                            &c.box4(),
                            &lam_p,
                            &mut inherit,
                            &mut ops,
                        ),
                    }
                }
                ItemKind::Nf => {
                    let blocks = &self.rt.blocks_by_target[&z];
                    let n_rows = c.n_elements();
                    let mut local = vec![0.0; n_rows];
                    for block in blocks {
                        let zs = tree.cluster(block.source);
                        let w_seg: Vec<f64> =
                            zs.elements().map(|(jt, jx)| self.w[mesh.dof0(jt, jx)]).collect();
                        for (row, acc) in local.iter_mut().enumerate() {
                            let r = &block.data[row * block.n_cols..(row + 1) * block.n_cols];
                            let mut s = 0.0;
                            for (a, b) in r.iter().zip(&w_seg) {
                                s += a * b;
                            }
                            *acc += s;
                        }
                        ops.nearfield += (block.n_rows * block.n_cols) as u64;
                    }
                    let mut f_near = self.state.f_near.lock().unwrap();
                    for (row, (kt, kx)) in c.elements().enumerate() {
                        f_near[mesh.dof0(kt, kx)] += local[row];
                    }
                }
            }
        }
        add_ops(&self.state.ops, &ops);
        self.trace(lane, category, name, t0);

        if self.state.items_left[item.task_idx].fetch_sub(1, Ordering::SeqCst) == 1 {
            self.complete_task(item.task_idx, lane);
        }
        self.state.progress.fetch_add(1, Ordering::SeqCst);
    }

    fn send_tensors(&self, lane: usize, temporal: usize, kind: MessageKind, dest: usize, source: &[Mutex<Vec<f64>>]) {
        let st = &self.rt.problem.tt.cluster(temporal).st_clusters;
        let tensor_len = self.rt.problem.setup.tensor_len();
        let mut payload = Vec::with_capacity(st.len() * tensor_len);
        for &z in st {
            payload.extend_from_slice(&source[z].lock().unwrap());
        }
        let stride = self.rt.problem.tt.clusters.len() as u64;
        let tagged = (self.rt.epoch - 1) * stride + temporal as u64;
        let msg = Message {
            sender: self.rt.rank,
            dest,
            cluster: tagged as u32,
            kind,
            payload,
        };
        let t0 = self.now_us();
        if let Err(e) = self.rt.transport.send(msg) {
            *self.state.error.lock().unwrap() = Some(e.into());
            return;
        }
        if self.rt.cfg.log_messages {
            self.state.sent.lock().unwrap().push(MessageRecord {
                sender: self.rt.rank,
                dest,
                kind,
                cluster: temporal,
            });
        }
        self.trace(lane, EventCategory::SEND, format!("send c{temporal} to {dest}"), t0);
    }

    /// Runs when the last work item of a task finishes: posts the sends the
    /// task owes, satisfies local dependents, and advances the lambda
    /// finalization of its cluster.
    fn complete_task(&self, idx: usize, lane: usize) {
        let task = &self.rt.lists.tasks[idx];
        let temporal = task.temporal;
        match task.kind {
            ListKind::M => {
                for plan in &task.sends {
                    self.send_tensors(lane, temporal, plan.kind, plan.dest, &self.state.moments);
                }
                if let Some(deps) = self.m_done_deps.get(&temporal) {
                    for &d in deps {
                        self.state.deps[d].fetch_sub(1, Ordering::SeqCst);
                    }
                }
            }
            ListKind::M2l | ListKind::L => {
                let parts = self
                    .state
                    .lambda_parts
                    .get(&temporal)
                    .expect("lambda-producing task has a parts counter");
                if parts.fetch_sub(1, Ordering::SeqCst) == 1 {
                    self.finalize_lambda(temporal, lane);
                }
            }
            ListKind::N => {}
        }
        self.state.tasks_completed.fetch_add(1, Ordering::SeqCst);
        self.state.progress.fetch_add(1, Ordering::SeqCst);
    }

    /// Both lambda-producing tasks of the cluster are done: combine the own
    /// and inherited parts, evaluate L2T at the cluster's space-time leaves,
    /// then release the downward dependencies (local children and remote
    /// owners of children).
    fn finalize_lambda(&self, temporal: usize, lane: usize) {
        let tree = &self.rt.problem.tree;
        let mesh = &self.rt.problem.mesh;
        let setup = &self.rt.problem.setup;
        let st = &self.rt.problem.tt.cluster(temporal).st_clusters;
        let mut ops = OpCounts::default();

        for &z in st {
            let own = self.state.lambda_own[z].lock().unwrap();
            let inherit = self.state.lambda_inherit[z].lock().unwrap();
            let mut total = self.state.lambda_total[z].lock().unwrap();
            for i in 0..total.len() {
                total[i] = inherit[i] + own[i];
            }
        }
        let t0 = self.now_us();
        let mut did_l2t = false;
        for &z in st {
            if tree.cluster(z).is_leaf {
                let total = self.state.lambda_total[z].lock().unwrap();
                let mut f_far = self.state.f_far.lock().unwrap();
                l2t(setup, tree, mesh, z, &total, &mut f_far, &mut ops);
                did_l2t = true;
            }
        }
        if did_l2t {
            self.trace(lane, EventCategory::L2T, format!("L2T t{temporal}"), t0);
        }
        add_ops(&self.state.ops, &ops);

        if let Some(dests) = self.rt.lists.lambda_sends.get(&temporal) {
            for &dest in dests {
                self.send_tensors(lane, temporal, MessageKind::LocalsToChild, dest, &self.state.lambda_total);
            }
        }
        if let Some(children) = self.rt.lists.lambda_local_children.get(&temporal) {
            for &_c in children {
                // the child L tasks registered themselves under this parent
            }
        }
        if let Some(deps) = self.lambda_part_deps.get(&temporal) {
            for &d in deps {
                self.state.deps[d].fetch_sub(1, Ordering::SeqCst);
            }
        }
        self.state.progress.fetch_add(1, Ordering::SeqCst);
    }
}
