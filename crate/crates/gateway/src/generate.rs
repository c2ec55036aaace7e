//! Forest generation against role backends.
//!
//! Levels are generated in order: all doctor turns at a depth, then all the
//! patient replies to them, then the next depth. Calls within one step run
//! concurrently up to the configured parallelism. Siblings only start once
//! their shared parent reply exists.

use std::collections::BTreeMap;

use scf_core::casebank::CaseRecord;
use scf_core::forest::{Forest, ForestConfig, NodeId, Role};

use crate::backend::CompletionBackend;
use crate::config::GatewayConfig;
use crate::grade::grade_via_backend;
use crate::prompt::{render_role_prompt, Speaker, Turn};
use crate::Result;

#[derive(Clone, Copy)]
pub struct RoleBackends<'a> {
    pub doctor: &'a dyn CompletionBackend,
    pub patient: &'a dyn CompletionBackend,
    pub diagnostician: &'a dyn CompletionBackend,
    pub grader: &'a dyn CompletionBackend,
}

impl<'a> RoleBackends<'a> {
    /// One backend serving every role.
    pub fn single(backend: &'a dyn CompletionBackend) -> Self {
        Self { doctor: backend, patient: backend, diagnostician: backend, grader: backend }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedForest {
    /// Leaf rewards are set; advantages are not yet computed.
    pub forest: Forest,
    /// The diagnostician's answer for each leaf doctor node.
    pub predictions: BTreeMap<NodeId, String>,
}

fn par_map<T, R, F>(items: &[T], parallelism: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = items.len().div_ceil(parallelism.max(1));
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("generation worker panicked")?);
        }
        Ok(out)
    })
}

/// Conversation turns on the path to `id`, inclusive.
fn transcript(forest: &Forest, id: NodeId) -> Result<Vec<Turn>> {
    forest
        .path_to(id)?
        .into_iter()
        .map(|n| {
            let node = forest.node(n)?;
            let speaker = match node.role {
                Role::Doctor => Speaker::Doctor,
                Role::Patient => Speaker::Patient,
            };
            Ok(Turn::new(speaker, node.content.clone()))
        })
        .collect()
}

/// Position of a doctor node among its siblings.
fn sibling_index(forest: &Forest, id: NodeId) -> Result<u32> {
    let siblings = match forest.node(id)?.parent_id {
        None => forest.roots(),
        Some(p) => forest.node(p)?.children(),
    };
    Ok(siblings.iter().position(|&s| s == id).unwrap_or(0) as u32)
}

pub fn generate_forest(
    backends: RoleBackends<'_>,
    config: &GatewayConfig,
    case: &CaseRecord,
    forest_config: ForestConfig,
) -> Result<GeneratedForest> {
    let mut forest = Forest::build_skeleton(forest_config, case.case_id.clone())?;
    let par = config.parallelism;

    for depth in 1..=forest_config.depth {
        let doctors: Vec<NodeId> = forest.doctors_at(depth).map(|n| n.node_id).collect();
        let jobs = doctors
            .iter()
            .map(|&d| {
                let mut t = transcript(&forest, d)?;
                t.pop();
                Ok((d, t, sibling_index(&forest, d)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let questions = par_map(&jobs, par, |(_, t, sample)| {
            let msgs = render_role_prompt(&config.doctor, case, t)?;
            Ok(backends.doctor.complete(&config.doctor, &msgs, *sample)?.trim().to_owned())
        })?;
        for ((d, _, _), q) in jobs.iter().zip(questions) {
            forest.node_mut(*d)?.content = q;
        }

        let jobs = doctors
            .iter()
            .map(|&d| Ok((forest.reply_of(d)?, transcript(&forest, d)?)))
            .collect::<Result<Vec<_>>>()?;
        let replies = par_map(&jobs, par, |(_, t)| {
            let msgs = render_role_prompt(&config.patient, case, t)?;
            Ok(backends.patient.complete(&config.patient, &msgs, 0)?.trim().to_owned())
        })?;
        for ((p, _), r) in jobs.iter().zip(replies) {
            forest.node_mut(*p)?.content = r;
        }
    }

    let leaves: Vec<NodeId> = forest.leaf_doctors().map(|n| n.node_id).collect();
    let jobs = leaves
        .iter()
        .map(|&l| Ok((l, transcript(&forest, forest.reply_of(l)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let graded = par_map(&jobs, par, |(_, t)| {
        let msgs = render_role_prompt(&config.diagnostician, case, t)?;
        let predicted = backends.diagnostician.complete(&config.diagnostician, &msgs, 0)?.trim().to_owned();
        let mut full = t.clone();
        full.push(Turn::new(Speaker::Diagnostician, predicted.clone()));
        // Rendering through the full transcript keeps the alternation check.
        render_role_prompt(&config.grader, case, &full)?;
        let score = grade_via_backend(backends.grader, &config.grader, &predicted, &case.diagnosis)?;
        Ok((predicted, score))
    })?;
    let mut predictions = BTreeMap::new();
    for ((leaf, _), (predicted, score)) in jobs.iter().zip(graded) {
        forest.set_leaf_reward(*leaf, score)?;
        predictions.insert(*leaf, predicted);
    }
    Ok(GeneratedForest { forest, predictions })
}
