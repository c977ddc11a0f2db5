//! Distribution of the temporal scheduling tree across ranks: rank
//! assignment, locally essential trees, task lists with dependency counters,
//! and the M2L effort model used to weigh the assignment.

use std::collections::{BTreeMap, BTreeSet};

use crate::tree::{ClusterTree, TemporalTree};

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("{leaves} temporal leaves cannot feed {ranks} ranks (parallelization is limited by the number of time-steps)")]
    TooFewLeaves { leaves: usize, ranks: usize },
    #[error("distribution level {level} holds {clusters} clusters, fewer than {ranks} ranks")]
    TooFewSlices { level: usize, clusters: usize, ranks: usize },
}

/// Ownership of every temporal cluster by a rank.
#[derive(Debug, Clone)]
pub struct RankAssignment {
    pub n_ranks: usize,
    /// Owner rank per temporal cluster id.
    pub owner: Vec<usize>,
    /// Distribution level: rule-1 block distribution applies from
    /// ceil(log2 n_ranks) down to this level; deeper clusters inherit their
    /// ancestor's owner.
    pub slice_level: usize,
}

impl RankAssignment {
    pub fn owned_by(&self, rank: usize) -> Vec<usize> {
        (0..self.owner.len()).filter(|&i| self.owner[i] == rank).collect()
    }

    pub fn counts_per_rank(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_ranks];
        for &o in &self.owner {
            counts[o] += 1;
        }
        counts
    }
}

fn block_owner(index: usize, count: usize, n_ranks: usize) -> usize {
    // contiguous blocks, sizes differing by at most one, larger blocks first
    let base = count / n_ranks;
    let rem = count % n_ranks;
    let cut = rem * (base + 1);
    if index < cut {
        index / (base + 1)
    } else if base > 0 {
        rem + (index - cut) / base
    } else {
        n_ranks - 1
    }
}

/// Distributes the temporal tree among `n_ranks` ranks:
/// - levels from ceil(log2 N) down to `slice_level`: clusters in ascending
///   order, as uniformly as possible, in contiguous blocks;
/// - levels below `slice_level`: a cluster inherits its ancestor's owner;
/// - level ceil(log2 N) - 1: a cluster goes to the owner of its left child;
/// - coarser levels: ranks split into 2^level ascending groups, each cluster
///   taken by its group's member with the fewest clusters so far (ties to
///   the lowest rank).
pub fn assign_clusters(
    tt: &TemporalTree,
    n_ranks: usize,
    slice_level: Option<usize>,
) -> Result<RankAssignment, ScheduleError> {
    assert!(n_ranks >= 1);
    let n_leaves = tt.n_leaves();
    if n_leaves < n_ranks {
        return Err(ScheduleError::TooFewLeaves { leaves: n_leaves, ranks: n_ranks });
    }
    let depth = tt.depth();
    let slice_level = slice_level.unwrap_or(depth).min(depth);
    let level_log = (n_ranks as f64).log2().ceil() as usize;
    if tt.levels[slice_level].len() < n_ranks {
        return Err(ScheduleError::TooFewSlices {
            level: slice_level,
            clusters: tt.levels[slice_level].len(),
            ranks: n_ranks,
        });
    }

    let mut owner = vec![usize::MAX; tt.clusters.len()];
    let mut counts = vec![0usize; n_ranks];

    // fine levels first: rule 1 on [level_log ..= slice_level]
    for level in (level_log.min(slice_level)..=slice_level).rev() {
        let ids = &tt.levels[level];
        for (pos, &id) in ids.iter().enumerate() {
            let r = block_owner(pos, ids.len(), n_ranks);
            owner[id] = r;
            counts[r] += 1;
        }
    }
    // coarse levels, finest to coarsest
    for level in (0..level_log.min(slice_level)).rev() {
        let ids = &tt.levels[level];
        let is_left_child_level = level + 1 == level_log;
        let n_groups = 1usize << level;
        for (pos, &id) in ids.iter().enumerate() {
            let t = tt.cluster(id);
            let r = if is_left_child_level && !t.children.is_empty() {
                owner[t.children[0]]
            } else if !is_left_child_level {
                // ascending rank groups, one per cluster slot of this level
                let g = pos.min(n_groups - 1);
                let lo = g * n_ranks / n_groups;
                let hi = ((g + 1) * n_ranks / n_groups).max(lo + 1);
                let mut best = lo;
                for r in lo..hi.min(n_ranks) {
                    if counts[r] < counts[best] {
                        best = r;
                    }
                }
                best
            } else {
                // leaf at a coarse level: fall back to the block rule
                block_owner(pos, ids.len(), n_ranks)
            };
            owner[id] = r;
            counts[r] += 1;
        }
    }
    // below the slice level: inherit
    for level in (slice_level + 1)..=depth {
        for &id in &tt.levels[level] {
            let p = tt.cluster(id).parent.expect("non-root has a parent");
            owner[id] = owner[p];
            counts[owner[id]] += 1;
        }
    }

    debug_assert!(owner.iter().all(|&o| o < n_ranks));
    Ok(RankAssignment { n_ranks, owner, slice_level })
}

/// Per-rank M2L effort: sum over owned clusters of the interaction-list
/// length weighted by a per-level cost.
pub fn m2l_efforts(
    tt: &TemporalTree,
    assignment: &RankAssignment,
    level_cost: &dyn Fn(usize) -> u64,
) -> Vec<u64> {
    let mut w = vec![0u64; assignment.n_ranks];
    for t in &tt.clusters {
        let r = assignment.owner[t.id];
        w[r] += t.interaction.len() as u64 * level_cost(t.level);
    }
    w
}

/// Moment-need and lambda flow flags of the temporal tree, identical on
/// every rank: a cluster's moments are needed when it is an interaction
/// source or its parent's moments are; its local contributions can be
/// nonzero when it has an interaction list or an ancestor does.
#[derive(Debug, Clone)]
pub struct FlowFlags {
    pub need_mu: Vec<bool>,
    pub lambda_nonzero: Vec<bool>,
    /// Reverse interaction map: for each source temporal cluster, the
    /// targets whose interaction lists contain it (ascending).
    pub targets_of: Vec<Vec<usize>>,
}

pub fn flow_flags(tt: &TemporalTree) -> FlowFlags {
    let n = tt.clusters.len();
    let mut need_mu = vec![false; n];
    let mut targets_of = vec![Vec::new(); n];
    for t in &tt.clusters {
        for &src in &t.interaction {
            need_mu[src] = true;
            targets_of[src].push(t.id);
        }
    }
    let mut lambda_nonzero = vec![false; n];
    for level in 0..tt.levels.len() {
        for &id in &tt.levels[level] {
            let t = tt.cluster(id);
            if let Some(p) = t.parent {
                need_mu[id] = need_mu[id] || need_mu[p];
                lambda_nonzero[id] = lambda_nonzero[p];
            }
            lambda_nonzero[id] = lambda_nonzero[id] || !t.interaction.is_empty();
        }
    }
    for v in &mut targets_of {
        v.sort_unstable();
    }
    FlowFlags { need_mu, lambda_nonzero, targets_of }
}

/// The locally essential tree of one rank: owned clusters plus the ghosts it
/// communicates with or needs for nearfield assembly, each with its owner.
#[derive(Debug, Clone)]
pub struct Let {
    pub rank: usize,
    pub owned: Vec<usize>,
    /// Ghost temporal clusters: (cluster id, owner rank), ascending by id.
    pub ghosts: Vec<(usize, usize)>,
}

impl Let {
    pub fn is_member(&self, id: usize) -> bool {
        self.owned.binary_search(&id).is_ok()
            || self.ghosts.binary_search_by_key(&id, |g| g.0).is_ok()
    }
}

/// Builds the LET of `rank`: owned clusters, their parents and children (the
/// M2M / L2L communication partners), interaction partners in both
/// directions, and the temporal nearfield of owned clusters (needed to
/// assemble nearfield blocks locally).
pub fn build_let(
    rank: usize,
    tt: &TemporalTree,
    assignment: &RankAssignment,
    flags: &FlowFlags,
) -> Let {
    let mut owned = Vec::new();
    let mut ghost_set: BTreeSet<usize> = BTreeSet::new();
    for t in &tt.clusters {
        if assignment.owner[t.id] == rank {
            owned.push(t.id);
        }
    }
    for &id in &owned {
        let t = tt.cluster(id);
        if let Some(p) = t.parent {
            ghost_set.insert(p);
        }
        for &c in &t.children {
            ghost_set.insert(c);
        }
        for &src in &t.interaction {
            ghost_set.insert(src);
        }
        for &tar in &flags.targets_of[id] {
            ghost_set.insert(tar);
        }
        for &nf in &t.nearfield {
            ghost_set.insert(nf);
        }
    }
    let ghosts: Vec<(usize, usize)> = ghost_set
        .into_iter()
        .filter(|id| assignment.owner[*id] != rank)
        .map(|id| (id, assignment.owner[id]))
        .collect();
    Let { rank, owned, ghosts }
}

/// The four task lists of one rank with their dependency skeleton. Tasks are
/// ordered by ascending (level, in-level index); within a matvec, FindNext
/// scans M, L, M2L, N in that priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ListKind {
    M,
    L,
    M2l,
    N,
}

/// What a completed task must send: the moment or local payload of the
/// task's temporal cluster to a remote rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendPlan {
    pub kind: crate::transport::MessageKind,
    pub dest: usize,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub temporal: usize,
    pub kind: ListKind,
    /// Number of dependencies satisfied locally.
    pub deps_local: usize,
    /// Expected remote messages (sender cluster, message kind).
    pub expected: Vec<(usize, crate::transport::MessageKind)>,
    /// Messages to post on completion (M tasks) or on lambda finalize.
    pub sends: Vec<SendPlan>,
}

#[derive(Debug, Clone)]
pub struct TaskLists {
    /// Task indices per list kind, in ascending (level, k) order.
    pub order: BTreeMap<&'static str, Vec<usize>>,
    pub tasks: Vec<Task>,
    /// lambda-producing task count per owned temporal cluster (M2L and L
    /// membership), driving the L2T / downward-send finalization.
    pub lambda_parts: BTreeMap<usize, usize>,
    /// Downward sends performed when a cluster's lambda finalizes.
    pub lambda_sends: BTreeMap<usize, Vec<usize>>,
    /// Local children whose L tasks depend on this cluster's finalize.
    pub lambda_local_children: BTreeMap<usize, Vec<usize>>,
}

impl TaskLists {
    pub fn list(&self, kind: ListKind) -> &[usize] {
        &self.order[Self::key(kind)]
    }

    fn key(kind: ListKind) -> &'static str {
        match kind {
            ListKind::M => "M",
            ListKind::L => "L",
            ListKind::M2l => "M2L",
            ListKind::N => "N",
        }
    }
}

/// Builds the task lists of one rank from its LET:
/// - M-list: owned clusters whose moments are needed (S2M or M2M, plus
///   sends to the parent's owner and to interaction targets' owners);
/// - M2L-list: owned clusters with a nonempty interaction list;
/// - L-list: owned clusters receiving L2L from a parent with nonzero lambda;
/// - N-list: owned clusters with space-time leaves (nearfield work).
/// Dependencies: M on the children's M tasks; M2L on the M tasks of
/// interaction partners; L on the parent's M2L and L tasks; N on nothing.
pub fn build_task_lists(
    let_: &Let,
    tree: &ClusterTree,
    tt: &TemporalTree,
    assignment: &RankAssignment,
    flags: &FlowFlags,
) -> TaskLists {
    use crate::transport::MessageKind;
    let rank = let_.rank;
    let mut tasks: Vec<Task> = Vec::new();
    let mut order: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
    for k in ["M", "L", "M2L", "N"] {
        order.insert(k, Vec::new());
    }
    let mut lambda_parts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut lambda_sends: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut lambda_local_children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();

    let mut sorted_owned = let_.owned.clone();
    sorted_owned.sort_by_key(|&id| (tt.cluster(id).level, tt.cluster(id).k));

    for &id in &sorted_owned {
        let t = tt.cluster(id);

        if flags.need_mu[id] {
            let mut deps_local = 0;
            let mut expected = Vec::new();
            for &c in &t.children {
                if assignment.owner[c] == rank {
                    deps_local += 1;
                } else {
                    expected.push((c, MessageKind::MomentsToParent));
                }
            }
            let mut sends = Vec::new();
            if let Some(p) = t.parent {
                if flags.need_mu[p] && assignment.owner[p] != rank {
                    sends.push(SendPlan { kind: MessageKind::MomentsToParent, dest: assignment.owner[p] });
                }
            }
            let mut dests: BTreeSet<usize> = BTreeSet::new();
            for &tar in &flags.targets_of[id] {
                if assignment.owner[tar] != rank {
                    dests.insert(assignment.owner[tar]);
                }
            }
            for d in dests {
                sends.push(SendPlan { kind: MessageKind::MomentsToInteraction, dest: d });
            }
            let idx = tasks.len();
            tasks.push(Task { temporal: id, kind: ListKind::M, deps_local, expected, sends });
            order.get_mut("M").unwrap().push(idx);
        }

        let in_m2l = !t.interaction.is_empty();
        if in_m2l {
            let mut deps_local = 0;
            let mut expected = Vec::new();
            for &src in &t.interaction {
                if assignment.owner[src] == rank {
                    deps_local += 1;
                } else {
                    expected.push((src, MessageKind::MomentsToInteraction));
                }
            }
            let idx = tasks.len();
            tasks.push(Task { temporal: id, kind: ListKind::M2l, deps_local, expected, sends: Vec::new() });
            order.get_mut("M2L").unwrap().push(idx);
        }

        let in_l = t.parent.map(|p| flags.lambda_nonzero[p]).unwrap_or(false);
        if in_l {
            let p = t.parent.unwrap();
            let (deps_local, expected) = if assignment.owner[p] == rank {
                let parent_parts = usize::from(!tt.cluster(p).interaction.is_empty())
                    + usize::from(tt.cluster(p).parent.map(|g| flags.lambda_nonzero[g]).unwrap_or(false));
                (parent_parts, Vec::new())
            } else {
                (0, vec![(p, MessageKind::LocalsToChild)])
            };
            let idx = tasks.len();
            tasks.push(Task { temporal: id, kind: ListKind::L, deps_local, expected, sends: Vec::new() });
            order.get_mut("L").unwrap().push(idx);
        }

        let parts = usize::from(in_m2l) + usize::from(in_l);
        if parts > 0 {
            lambda_parts.insert(id, parts);
            if flags.lambda_nonzero[id] {
                let mut dests: BTreeSet<usize> = BTreeSet::new();
                let mut local_children = Vec::new();
                for &c in &t.children {
                    if assignment.owner[c] == rank {
                        local_children.push(c);
                    } else {
                        dests.insert(assignment.owner[c]);
                    }
                }
                lambda_sends.insert(id, dests.into_iter().collect());
                lambda_local_children.insert(id, local_children);
            }
        }

        let has_st_leaf = t.st_clusters.iter().any(|&z| tree.cluster(z).is_leaf);
        if has_st_leaf {
            let idx = tasks.len();
            tasks.push(Task { temporal: id, kind: ListKind::N, deps_local: 0, expected: Vec::new(), sends: Vec::new() });
            order.get_mut("N").unwrap().push(idx);
        }
    }

    TaskLists { order, tasks, lambda_parts, lambda_sends, lambda_local_children }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_tensor_mesh, generate_cube_surface};
    use crate::tree::{build_full_tree, build_tree, extract_temporal_tree, pad_boxes, TreeParams};
    use crate::vec3::Vec3;

    /// A perfect temporal tree of the given depth (pure temporal splits).
    fn temporal_fixture(depth: usize) -> (ClusterTree, TemporalTree) {
        let mesh = build_tensor_mesh(
            generate_cube_surface(1, Vec3::ZERO, 0.5),
            1.0,
            1 << depth,
        );
        let mut params = TreeParams::new(1, 1e9, 1.0);
        params.oversize_factor = f64::INFINITY;
        let mut tree = build_tree(&mesh, params);
        pad_boxes(&mut tree, &mesh);
        let tt = extract_temporal_tree(&tree);
        assert_eq!(tt.depth(), depth);
        (tree, tt)
    }

    #[test]
    fn figure_assignment_16_leaves_8_ranks() {
        let (_tree, tt) = temporal_fixture(4);
        let a = assign_clusters(&tt, 8, None).unwrap();
        // level 4: two leaves per rank, ascending
        for k in 0..16 {
            let id = tt.lookup(4, k).unwrap();
            assert_eq!(a.owner[id], k / 2, "leaf {k}");
        }
        // level 3: one cluster per rank, ascending
        for k in 0..8 {
            let id = tt.lookup(3, k).unwrap();
            assert_eq!(a.owner[id], k, "level-3 cluster {k}");
        }
        // level 2: owner of the left child
        for k in 0..4 {
            let id = tt.lookup(2, k).unwrap();
            assert_eq!(a.owner[id], 2 * k, "level-2 cluster {k}");
        }
        // level 1: fewest-so-far in the two rank groups; ties to the lowest
        assert_eq!(a.owner[tt.lookup(1, 0).unwrap()], 1);
        assert_eq!(a.owner[tt.lookup(1, 1).unwrap()], 5);
        // root: fewest over all ranks (3 and 7 tie at three clusters)
        assert_eq!(a.owner[tt.lookup(0, 0).unwrap()], 3);
    }

    #[test]
    fn effort_model_reproduces_both_scenarios() {
        let (_tree, tt) = temporal_fixture(4);
        let a = assign_clusters(&tt, 8, None).unwrap();
        // scenario 1: temporal refinement 2->3, space-time 3->4
        let w1 = m2l_efforts(&tt, &a, &|level| match level {
            2 => 1,
            3 => 1,
            4 => 4,
            _ => 0,
        });
        assert_eq!(w1[6], 15);
        assert_eq!(w1[7], 14);
        // scenario 2: space-time refinement 2->3, temporal 3->4
        let w2 = m2l_efforts(&tt, &a, &|level| match level {
            2 => 1,
            3 => 4,
            4 => 4,
            _ => 0,
        });
        assert_eq!(w2[6], 18);
        assert_eq!(w2[7], 20);
        // rank 0 performs no M2L at all in this example
        assert_eq!(w1[0], 0);
    }

    #[test]
    fn single_rank_owns_everything() {
        let (_tree, tt) = temporal_fixture(3);
        let a = assign_clusters(&tt, 1, None).unwrap();
        assert!(a.owner.iter().all(|&o| o == 0));
    }

    #[test]
    fn too_few_leaves_is_error() {
        let (_tree, tt) = temporal_fixture(2);
        assert!(matches!(
            assign_clusters(&tt, 5, None),
            Err(ScheduleError::TooFewLeaves { .. })
        ));
    }

    #[test]
    fn leaf_slices_contiguous_per_rank() {
        let (tree, tt) = temporal_fixture(5);
        for n_ranks in [2usize, 3, 4, 8] {
            let a = assign_clusters(&tt, n_ranks, None).unwrap();
            let mut last_rank = 0usize;
            for k in 0..tt.levels[5].len() {
                let id = tt.lookup(5, k).unwrap();
                let r = a.owner[id];
                assert!(r >= last_rank, "leaf slices must ascend with time");
                last_rank = r;
            }
            let _ = &tree;
        }
    }

    #[test]
    fn slice_level_inheritance() {
        let (_tree, tt) = temporal_fixture(5);
        // distribute at level 3 (8 slices), deeper clusters inherit
        let a = assign_clusters(&tt, 4, Some(3)).unwrap();
        for level in 4..=5 {
            for k in 0..tt.levels[level].len() {
                let id = tt.lookup(level, k).unwrap();
                let t = tt.cluster(id);
                assert_eq!(a.owner[id], a.owner[t.parent.unwrap()]);
            }
        }
    }

    #[test]
    fn let_contains_partners_with_correct_owners() {
        let mesh = build_tensor_mesh(generate_cube_surface(2, Vec3::ZERO, 0.5), 1.0, 16);
        let (tree, tt) = build_full_tree(&mesh, TreeParams::new(20, 0.9, 1.0), 5);
        let flags = flow_flags(&tt);
        for n_ranks in [1usize, 2, 4] {
            let a = assign_clusters(&tt, n_ranks, None).unwrap();
            for rank in 0..n_ranks {
                let l = build_let(rank, &tt, &a, &flags);
                for &id in &l.owned {
                    assert_eq!(a.owner[id], rank);
                    let t = tt.cluster(id);
                    for &p in t.interaction.iter().chain(&t.nearfield).chain(&t.children) {
                        assert!(l.is_member(p), "rank {rank}: partner {p} of {id} missing from LET");
                    }
                    if let Some(p) = t.parent {
                        assert!(l.is_member(p));
                    }
                }
                for &(g, owner) in &l.ghosts {
                    assert_ne!(owner, rank, "ghost {g} owned by self");
                    assert_eq!(owner, a.owner[g]);
                }
                if n_ranks == 1 {
                    assert!(l.ghosts.is_empty());
                    assert_eq!(l.owned.len(), tt.clusters.len());
                }
            }
            let _ = &tree;
        }
    }

    #[test]
    fn task_lists_structure() {
        let mesh = build_tensor_mesh(generate_cube_surface(2, Vec3::ZERO, 0.5), 1.0, 16);
        let (tree, tt) = build_full_tree(&mesh, TreeParams::new(20, 0.9, 1.0), 5);
        let flags = flow_flags(&tt);
        let a = assign_clusters(&tt, 1, None).unwrap();
        let l = build_let(0, &tt, &a, &flags);
        let lists = build_task_lists(&l, &tree, &tt, &a, &flags);

        // no duplicates within a list
        for kind in [ListKind::M, ListKind::L, ListKind::M2l, ListKind::N] {
            let ids: Vec<usize> = lists.list(kind).iter().map(|&i| lists.tasks[i].temporal).collect();
            let set: BTreeSet<usize> = ids.iter().copied().collect();
            assert_eq!(ids.len(), set.len());
        }
        // clusters with k in {0, 1} never appear in the M2L list
        for &i in lists.list(ListKind::M2l) {
            assert!(tt.cluster(lists.tasks[i].temporal).k >= 2);
        }
        // single rank: no remote expectations anywhere
        for t in &lists.tasks {
            assert!(t.expected.is_empty());
            assert!(t.sends.is_empty());
        }
        // dependency counts match an independently built graph: an M task of
        // a non-leaf waits for all children; an L task for the parent's
        // lambda-producing tasks; an M2L task for its interaction partners
        for t in &lists.tasks {
            let tc = tt.cluster(t.temporal);
            match t.kind {
                ListKind::M => assert_eq!(t.deps_local, tc.children.len()),
                ListKind::M2l => assert_eq!(t.deps_local, tc.interaction.len()),
                ListKind::L => {
                    let p = tt.cluster(tc.parent.unwrap());
                    let expect = usize::from(!p.interaction.is_empty())
                        + usize::from(p.parent.map(|g| flags.lambda_nonzero[g]).unwrap_or(false));
                    assert_eq!(t.deps_local, expect);
                }
                ListKind::N => assert_eq!(t.deps_local, 0),
            }
        }
        // a leaf with an empty interaction list sits in M, L, N but not M2L
        let leaf_no_inter = tt
            .clusters
            .iter()
            .find(|t| t.is_leaf && t.interaction.is_empty() && flags.need_mu[t.id])
            .expect("early leaf exists");
        let in_list = |kind: ListKind, id: usize| {
            lists.list(kind).iter().any(|&i| lists.tasks[i].temporal == id)
        };
        assert!(in_list(ListKind::M, leaf_no_inter.id));
        assert!(in_list(ListKind::N, leaf_no_inter.id));
        assert!(!in_list(ListKind::M2l, leaf_no_inter.id));
    }

    #[test]
    fn moments_of_trailing_clusters_are_not_needed() {
        let (_tree, tt) = temporal_fixture(4);
        let flags = flow_flags(&tt);
        // per level, the last two clusters are never interaction sources and
        // their ancestors chain through the trailing clusters, so their
        // moments are never needed
        for level in 2..=4usize {
            let n = 1 << level;
            for k in 0..n {
                let id = tt.lookup(level, k).unwrap();
                let expect = k < n - 2;
                assert_eq!(flags.need_mu[id], expect, "level {level} k {k}");
            }
        }
    }
}
