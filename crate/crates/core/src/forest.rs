//! Branched conversation forests and the reward/advantage math over them.
//!
//! A forest holds every conversation tree sampled for one case. Each tree
//! starts with a doctor turn; every doctor turn is answered by exactly one
//! patient turn, and every patient turn before the final depth spawns
//! `branching` doctor continuations. Only doctor nodes carry rewards.
//!
//! Advantage computation runs in three passes:
//!
//! 1. [`Forest::propagate_rewards`]: each non-leaf doctor node receives the
//!    mean reward of all leaf doctor nodes below it.
//! 2. [`Forest::sibling_relative_rewards`]: each doctor node's reward minus
//!    the mean of its sibling group. Tree roots share a virtual case root.
//! 3. [`Forest::depthwise_normalize`]: relative rewards divided by the
//!    population standard deviation over all doctor nodes at the same depth.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default guard below which a standard deviation counts as zero.
pub const DEFAULT_NORMALIZATION_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("invalid forest configuration: {0}")]
    Config(String),
    #[error("incomplete grading: leaf doctor node {0} has no reward")]
    IncompleteGrading(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("reward {reward} for node {node} is outside [0, 1]")]
    RewardOutOfRange { node: NodeId, reward: f64 },
    #[error("node {0} is not a leaf doctor node")]
    NotALeaf(NodeId),
    #[error("advantage group must be nonempty")]
    EmptyGroup,
    #[error("malformed forest record at line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ForestError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl NodeId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Doctor,
    Patient,
}

/// Identifies the group a doctor node is compared against for its
/// sibling-relative reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "parent")]
pub enum SiblingGroup {
    /// Tree roots, siblings under the virtual case root.
    CaseRoot,
    /// Doctor nodes sharing this immediate doctor parent.
    Parent(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestNode {
    pub node_id: NodeId,
    pub parent_id: Option<NodeId>,
    /// Doctor-turn index starting at 1. A patient node shares the depth of
    /// the doctor turn it answers.
    pub depth: u32,
    pub role: Role,
    pub content: String,
    pub reward_raw: Option<f64>,
    pub reward_relative: Option<f64>,
    pub advantage: Option<f64>,
    #[serde(skip)]
    children: Vec<NodeId>,
}

impl ForestNode {
    pub fn children(&self) -> &[NodeId] {
        &self.children
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    /// Doctor continuations spawned after each non-final patient turn.
    pub branching: u32,
    pub trees_per_case: u32,
    /// Doctor turns per conversation.
    pub depth: u32,
    pub normalization_epsilon: f64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self::branched()
    }
}

impl ForestConfig {
    /// Four trees with four-way branching over two turns.
    pub fn branched() -> Self {
        Self {
            branching: 4,
            trees_per_case: 4,
            depth: 2,
            normalization_epsilon: DEFAULT_NORMALIZATION_EPSILON,
        }
    }

    /// Ten unbranched conversations over two turns.
    pub fn linear() -> Self {
        Self {
            branching: 1,
            trees_per_case: 10,
            depth: 2,
            normalization_epsilon: DEFAULT_NORMALIZATION_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(ForestError::Config("depth must be at least 1".into()));
        }
        if self.branching == 0 {
            return Err(ForestError::Config("branching must be at least 1".into()));
        }
        if self.trees_per_case == 0 {
            return Err(ForestError::Config("trees_per_case must be at least 1".into()));
        }
        if !(self.normalization_epsilon.is_finite() && self.normalization_epsilon > 0.0) {
            return Err(ForestError::Config(
                "normalization_epsilon must be a small positive number".into(),
            ));
        }
        Ok(())
    }

    /// Doctor completions per case: trees × Σ_{d=1..depth} branching^(d−1).
    pub fn doctor_completions(&self) -> u64 {
        let b = u64::from(self.branching);
        let per_tree: u64 = (0..self.depth).map(|d| b.pow(d)).sum();
        u64::from(self.trees_per_case) * per_tree
    }

    /// Leaf doctor nodes (graded conversations) per case.
    pub fn leaves(&self) -> u64 {
        u64::from(self.trees_per_case) * u64::from(self.branching).pow(self.depth - 1)
    }
}

/// Final per-completion advantage with the grouping that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageEntry {
    pub advantage: f64,
    pub depth: u32,
    pub sibling_group: SiblingGroup,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    pub entries: BTreeMap<NodeId, AdvantageEntry>,
}

impl AdvantageTable {
    pub fn get(&self, node: NodeId) -> Option<f64> {
        self.entries.get(&node).map(|e| e.advantage)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub forest_id: String,
    pub case_id: String,
    pub config: ForestConfig,
    roots: Vec<NodeId>,
    nodes: Vec<ForestNode>,
}

impl Forest {
    /// Builds a content-empty forest. Node ids are assigned in depth-first
    /// pre-order, tree by tree, so the layout is a pure function of `config`.
    pub fn build_skeleton(config: ForestConfig, case_id: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let case_id = case_id.into();
        let mut forest = Forest {
            forest_id: format!("{case_id}/b{}t{}d{}", config.branching, config.trees_per_case, config.depth),
            case_id,
            config,
            roots: Vec::with_capacity(config.trees_per_case as usize),
            nodes: Vec::new(),
        };
        for _ in 0..config.trees_per_case {
            let root = forest.grow(None, 1);
            forest.roots.push(root);
        }
        Ok(forest)
    }

    fn push(&mut self, parent: Option<NodeId>, depth: u32, role: Role) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(ForestNode {
            node_id: id,
            parent_id: parent,
            depth,
            role,
            content: String::new(),
            reward_raw: None,
            reward_relative: None,
            advantage: None,
            children: Vec::new(),
        });
        if let Some(p) = parent {
            self.nodes[p.index()].children.push(id);
        }
        id
    }

    fn grow(&mut self, parent: Option<NodeId>, depth: u32) -> NodeId {
        let doctor = self.push(parent, depth, Role::Doctor);
        let patient = self.push(Some(doctor), depth, Role::Patient);
        if depth < self.config.depth {
            for _ in 0..self.config.branching {
                self.grow(Some(patient), depth + 1);
            }
        }
        doctor
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn nodes(&self) -> &[ForestNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&ForestNode> {
        self.nodes.get(id.index()).ok_or(ForestError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut ForestNode> {
        self.nodes.get_mut(id.index()).ok_or(ForestError::UnknownNode(id))
    }

    pub fn doctor_nodes(&self) -> impl Iterator<Item = &ForestNode> {
        self.nodes.iter().filter(|n| n.role == Role::Doctor)
    }

    /// Doctor nodes at the configured final depth, in id order.
    pub fn leaf_doctors(&self) -> impl Iterator<Item = &ForestNode> {
        let depth = self.config.depth;
        self.doctor_nodes().filter(move |n| n.depth == depth)
    }

    /// Doctor nodes at `depth`, in id order.
    pub fn doctors_at(&self, depth: u32) -> impl Iterator<Item = &ForestNode> {
        self.doctor_nodes().filter(move |n| n.depth == depth)
    }

    /// The patient turn answering a doctor node.
    pub fn reply_of(&self, doctor: NodeId) -> Result<NodeId> {
        let node = self.node(doctor)?;
        match (node.role, node.children.first()) {
            (Role::Doctor, Some(&p)) => Ok(p),
            _ => Err(ForestError::UnknownNode(doctor)),
        }
    }

    /// The nearest doctor ancestor of a doctor node, if any.
    pub fn doctor_parent(&self, doctor: NodeId) -> Result<Option<NodeId>> {
        let node = self.node(doctor)?;
        match node.parent_id {
            None => Ok(None),
            Some(patient) => Ok(self.node(patient)?.parent_id),
        }
    }

    pub fn sibling_group(&self, doctor: NodeId) -> Result<SiblingGroup> {
        Ok(match self.doctor_parent(doctor)? {
            None => SiblingGroup::CaseRoot,
            Some(p) => SiblingGroup::Parent(p),
        })
    }

    /// Node ids from the root down to and including `id`.
    pub fn path_to(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let mut path = vec![id];
        let mut cur = self.node(id)?.parent_id;
        while let Some(p) = cur {
            path.push(p);
            cur = self.node(p)?.parent_id;
        }
        path.reverse();
        Ok(path)
    }

    /// Doctor-node children reached through a doctor node's patient reply.
    pub fn doctor_children(&self, doctor: NodeId) -> Result<Vec<NodeId>> {
        let node = self.node(doctor)?;
        let mut out = Vec::new();
        for &patient in &node.children {
            out.extend_from_slice(&self.node(patient)?.children);
        }
        Ok(out)
    }

    /// Leaf doctor nodes in the subtree rooted at a doctor node.
    pub fn descendant_leaves(&self, doctor: NodeId) -> Result<Vec<NodeId>> {
        let mut out = Vec::new();
        let mut stack = vec![doctor];
        while let Some(id) = stack.pop() {
            let node = self.node(id)?;
            if node.role == Role::Doctor && node.depth == self.config.depth {
                out.push(id);
            }
            stack.extend(node.children.iter().rev().copied());
        }
        Ok(out)
    }

    /// Records the grader's reward on a leaf doctor node.
    pub fn set_leaf_reward(&mut self, leaf: NodeId, reward: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&reward) {
            return Err(ForestError::RewardOutOfRange { node: leaf, reward });
        }
        let depth = self.config.depth;
        let node = self.node_mut(leaf)?;
        if node.role != Role::Doctor || node.depth != depth {
            return Err(ForestError::NotALeaf(leaf));
        }
        node.reward_raw = Some(reward);
        Ok(())
    }

    pub fn leaf_rewards(&self) -> Result<Vec<f64>> {
        self.leaf_doctors()
            .map(|n| n.reward_raw.ok_or(ForestError::IncompleteGrading(n.node_id)))
            .collect()
    }

    /// Sets every non-leaf doctor node's raw reward to the mean reward of
    /// all leaf doctor nodes in its subtree.
    pub fn propagate_rewards(&mut self) -> Result<()> {
        let rewards = self.leaf_rewards()?;
        debug_assert_eq!(rewards.len() as u64, self.config.leaves());
        let max_depth = self.config.depth;
        let parents: Vec<NodeId> = self
            .doctor_nodes()
            .filter(|n| n.depth < max_depth)
            .map(|n| n.node_id)
            .collect();
        for id in parents {
            let leaves = self.descendant_leaves(id)?;
            let sum: f64 = leaves
                .iter()
                .map(|&l| self.nodes[l.index()].reward_raw.unwrap_or_default())
                .sum();
            self.nodes[id.index()].reward_raw = Some(sum / leaves.len() as f64);
        }
        Ok(())
    }

    /// Doctor nodes grouped by sibling group, in id order within each group.
    pub fn sibling_groups(&self) -> Result<BTreeMap<SiblingGroup, Vec<NodeId>>> {
        let mut groups: BTreeMap<SiblingGroup, Vec<NodeId>> = BTreeMap::new();
        for node in self.doctor_nodes() {
            groups
                .entry(self.sibling_group(node.node_id)?)
                .or_default()
                .push(node.node_id);
        }
        Ok(groups)
    }

    /// Sets `reward_relative` = raw reward − mean raw reward of the sibling
    /// group. Singleton groups get 0.
    pub fn sibling_relative_rewards(&mut self) -> Result<()> {
        for (_, members) in self.sibling_groups()? {
            let raws = members
                .iter()
                .map(|&m| {
                    self.nodes[m.index()]
                        .reward_raw
                        .ok_or(ForestError::IncompleteGrading(m))
                })
                .collect::<Result<Vec<_>>>()?;
            let mean = raws.iter().sum::<f64>() / raws.len() as f64;
            for (&m, raw) in members.iter().zip(raws) {
                self.nodes[m.index()].reward_relative = Some(raw - mean);
            }
        }
        Ok(())
    }

    /// Divides relative rewards by the population standard deviation of
    /// relative rewards at the same depth. Levels whose deviation does not
    /// exceed `epsilon` get advantage 0 throughout.
    pub fn depthwise_normalize(&self, epsilon: f64) -> Result<AdvantageTable> {
        let mut table = AdvantageTable::default();
        for depth in 1..=self.config.depth {
            let level = self
                .doctors_at(depth)
                .map(|n| {
                    n.reward_relative
                        .map(|r| (n.node_id, r))
                        .ok_or(ForestError::IncompleteGrading(n.node_id))
                })
                .collect::<Result<Vec<_>>>()?;
            let values: Vec<f64> = level.iter().map(|&(_, r)| r).collect();
            let std = population_std(&values);
            for (id, rel) in level {
                let advantage = if std > epsilon { rel / std } else { 0.0 };
                table.entries.insert(
                    id,
                    AdvantageEntry { advantage, depth, sibling_group: self.sibling_group(id)? },
                );
            }
        }
        Ok(table)
    }

    /// Runs the full branched pipeline and writes the results onto the nodes.
    pub fn compute_advantages(&mut self) -> Result<AdvantageTable> {
        self.propagate_rewards()?;
        self.sibling_relative_rewards()?;
        let table = self.depthwise_normalize(self.config.normalization_epsilon)?;
        self.apply_advantages(&table)?;
        Ok(table)
    }

    /// Linear-mode advantages: the roots' conversations form one group and
    /// each conversation's advantage is applied to every doctor turn in it.
    pub fn compute_linear_advantages(&mut self) -> Result<AdvantageTable> {
        let epsilon = self.config.normalization_epsilon;
        let mut per_tree = Vec::with_capacity(self.roots.len());
        for &root in &self.roots {
            let leaves = self.descendant_leaves(root)?;
            let mut sum = 0.0;
            for &l in &leaves {
                sum += self.node(l)?.reward_raw.ok_or(ForestError::IncompleteGrading(l))?;
            }
            per_tree.push(sum / leaves.len() as f64);
        }
        let advantages = linear_group_advantages(&per_tree, epsilon)?;
        let mut table = AdvantageTable::default();
        for (&root, &adv) in self.roots.iter().zip(&advantages) {
            let mut stack = vec![root];
            while let Some(id) = stack.pop() {
                let node = self.node(id)?;
                if node.role == Role::Doctor {
                    table.entries.insert(
                        id,
                        AdvantageEntry {
                            advantage: adv,
                            depth: node.depth,
                            sibling_group: self.sibling_group(id)?,
                        },
                    );
                }
                stack.extend(node.children.iter().copied());
            }
        }
        self.apply_advantages(&table)?;
        Ok(table)
    }

    pub fn apply_advantages(&mut self, table: &AdvantageTable) -> Result<()> {
        for (&id, entry) in &table.entries {
            self.node_mut(id)?.advantage = Some(entry.advantage);
        }
        Ok(())
    }

    /// True when every leaf reward is identical, so the case carries no
    /// learning signal.
    pub fn should_skip(&self) -> Result<bool> {
        let rewards = self.leaf_rewards()?;
        Ok(rewards.windows(2).all(|w| w[0] == w[1]))
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for node in &self.nodes {
            let record = NodeRecord::from_node(self, node);
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a single forest written by [`Forest::write_jsonl`].
    pub fn read_jsonl<R: BufRead>(input: R, config: ForestConfig) -> Result<Self> {
        let mut forest_id = None;
        let mut case_id = None;
        let mut nodes: Vec<ForestNode> = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: NodeRecord = serde_json::from_str(&line)
                .map_err(|e| ForestError::Record { line: line_no, reason: e.to_string() })?;
            if rec.node_id.index() != nodes.len() {
                return Err(ForestError::Record {
                    line: line_no,
                    reason: format!("expected node id {}, found {}", nodes.len(), rec.node_id.0),
                });
            }
            match (&forest_id, &case_id) {
                (None, None) => {
                    forest_id = Some(rec.forest_id.clone());
                    case_id = Some(rec.case_id.clone());
                }
                (Some(f), Some(c)) if *f == rec.forest_id && *c == rec.case_id => {}
                _ => {
                    return Err(ForestError::Record {
                        line: line_no,
                        reason: "records from more than one forest".into(),
                    })
                }
            }
            nodes.push(ForestNode {
                node_id: rec.node_id,
                parent_id: rec.parent_id,
                depth: rec.depth,
                role: rec.role,
                content: rec.content,
                reward_raw: rec.reward_raw,
                reward_relative: rec.reward_relative,
                advantage: rec.advantage,
                children: Vec::new(),
            });
        }
        let case_id = case_id.unwrap_or_default();
        let mut forest = Forest::build_skeleton(config, case_id)?;
        if let Some(f) = forest_id {
            forest.forest_id = f;
        }
        if forest.nodes.len() != nodes.len() {
            return Err(ForestError::Record {
                line: nodes.len(),
                reason: format!(
                    "forest has {} nodes but configuration implies {}",
                    nodes.len(),
                    forest.nodes.len()
                ),
            });
        }
        for (slot, mut read) in forest.nodes.iter_mut().zip(nodes) {
            if slot.parent_id != read.parent_id || slot.role != read.role || slot.depth != read.depth {
                return Err(ForestError::Record {
                    line: read.node_id.index() + 1,
                    reason: "node layout does not match the configuration".into(),
                });
            }
            read.children = std::mem::take(&mut slot.children);
            *slot = read;
        }
        Ok(forest)
    }
}

/// One line of the forest JSON-lines format. Field order is part of the
/// format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub forest_id: String,
    pub case_id: String,
    pub node_id: NodeId,
    pub parent_id: Option<NodeId>,
    pub depth: u32,
    pub role: Role,
    pub content: String,
    pub reward_raw: Option<f64>,
    pub reward_relative: Option<f64>,
    pub advantage: Option<f64>,
}

impl NodeRecord {
    fn from_node(forest: &Forest, node: &ForestNode) -> Self {
        Self {
            forest_id: forest.forest_id.clone(),
            case_id: forest.case_id.clone(),
            node_id: node.node_id,
            parent_id: node.parent_id,
            depth: node.depth,
            role: node.role,
            content: node.content.clone(),
            reward_raw: node.reward_raw,
            reward_relative: node.reward_relative,
            advantage: node.advantage,
        }
    }
}

pub(crate) fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Plain group-relative advantages: (r − mean) / population std, or all
/// zeros when the std does not exceed `epsilon`.
pub fn linear_group_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(ForestError::EmptyGroup);
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let std = population_std(rewards);
    if std <= epsilon {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}
