//! Offline assignment of operation tasks to shared instances, minimizing
//! the number of instances used.
//!
//! The capacity rule sums the bandwidth of every task placed on an
//! instance whose window fits inside the instance's window, whether or not
//! the tasks overlap in time. Ties are broken lexicographically by id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_EXACT_MAX_TASKS: usize = 20;
pub const ORACLE_MAX_TASKS: usize = 8;
pub const ORACLE_MAX_INSTANCES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    /// Requested start, seconds.
    pub start: u64,
    /// Requested end, seconds.
    pub end: u64,
    /// Requested bandwidth units.
    pub bw: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub id: String,
    pub start: u64,
    pub end: u64,
    /// Free bandwidth units.
    pub cap: u64,
}

impl InstanceSpec {
    fn covers(&self, t: &TaskSpec) -> bool {
        t.start >= self.start && t.end <= self.end
    }

    fn admits(&self, t: &TaskSpec) -> bool {
        self.covers(t) && t.bw <= self.cap
    }
}

/// Input file of `skyrelay sched solve`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub tasks: Vec<TaskSpec>,
    pub instances: Vec<InstanceSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// task id → instance id.
    pub assignment: BTreeMap<String, String>,
    pub used_count: usize,
}

impl Assignment {
    pub fn from_map(assignment: BTreeMap<String, String>) -> Self {
        let used_count = assignment.values().collect::<BTreeSet<_>>().len();
        Assignment { assignment, used_count }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedError {
    #[error("no feasible assignment; unplaceable tasks: {unplaceable:?}")]
    Infeasible { unplaceable: Vec<String> },
    #[error("oracle limited to {ORACLE_MAX_TASKS} tasks and {ORACLE_MAX_INSTANCES} instances, got {tasks} and {instances}")]
    OracleTooLarge { tasks: usize, instances: usize },
    #[error("exact solver limited to {cap} tasks, got {tasks}")]
    TooLarge { tasks: usize, cap: usize },
    #[error("invalid task `{0}`: start must precede end and bandwidth must be positive")]
    InvalidTask(String),
    #[error("invalid instance `{0}`: start must precede end and capacity must be positive")]
    InvalidInstance(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    Unassigned { task: String },
    UnknownTask { task: String },
    UnknownInstance { task: String, instance: String },
    Window { task: String, instance: String },
    Capacity { instance: String, load: u64, cap: u64 },
    UsedCount { claimed: usize, actual: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Unassigned { task } => write!(f, "task {task} is not assigned"),
            Violation::UnknownTask { task } => write!(f, "assignment names unknown task {task}"),
            Violation::UnknownInstance { task, instance } => write!(f, "task {task} assigned to unknown instance {instance}"),
            Violation::Window { task, instance } => write!(f, "task {task} window exceeds instance {instance} window"),
            Violation::Capacity { instance, load, cap } => write!(f, "instance {instance} load {load} exceeds capacity {cap}"),
            Violation::UsedCount { claimed, actual } => write!(f, "used_count {claimed} but {actual} instances used"),
        }
    }
}

/// Checks total assignment, the per-instance capacity sum, windows, and
/// the reported instance count.
pub fn verify_assignment(tasks: &[TaskSpec], instances: &[InstanceSpec], a: &Assignment) -> Result<(), Vec<Violation>> {
    let by_id: BTreeMap<&str, &InstanceSpec> = instances.iter().map(|c| (c.id.as_str(), c)).collect();
    let task_ids: BTreeSet<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
    let mut v = Vec::new();
    let mut load: BTreeMap<&str, u64> = BTreeMap::new();

    for t in tasks {
        let Some(inst_id) = a.assignment.get(&t.id) else {
            v.push(Violation::Unassigned { task: t.id.clone() });
            continue;
        };
        let Some(c) = by_id.get(inst_id.as_str()) else {
            v.push(Violation::UnknownInstance { task: t.id.clone(), instance: inst_id.clone() });
            continue;
        };
        if c.covers(t) {
            *load.entry(c.id.as_str()).or_default() += t.bw;
        } else {
            v.push(Violation::Window { task: t.id.clone(), instance: c.id.clone() });
        }
    }
    for task in a.assignment.keys() {
        if !task_ids.contains(task.as_str()) {
            v.push(Violation::UnknownTask { task: task.clone() });
        }
    }
    for (id, l) in load {
        let cap = by_id[id].cap;
        if l > cap {
            v.push(Violation::Capacity { instance: id.to_string(), load: l, cap });
        }
    }
    let actual = a.assignment.values().collect::<BTreeSet<_>>().len();
    if actual != a.used_count {
        v.push(Violation::UsedCount { claimed: a.used_count, actual });
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

fn validate(tasks: &[TaskSpec], instances: &[InstanceSpec]) -> Result<(), SchedError> {
    let mut seen = BTreeSet::new();
    for t in tasks {
        if t.start >= t.end || t.bw == 0 {
            return Err(SchedError::InvalidTask(t.id.clone()));
        }
        if !seen.insert(&t.id) {
            return Err(SchedError::DuplicateId(t.id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    for c in instances {
        if c.start >= c.end || c.cap == 0 {
            return Err(SchedError::InvalidInstance(c.id.clone()));
        }
        if !seen.insert(&c.id) {
            return Err(SchedError::DuplicateId(c.id.clone()));
        }
    }
    Ok(())
}

/// Tasks that fit no instance on their own, or every task when the set is
/// only jointly infeasible.
fn infeasible(tasks: &[TaskSpec], instances: &[InstanceSpec]) -> SchedError {
    let mut alone: Vec<String> = tasks
        .iter()
        .filter(|t| !instances.iter().any(|c| c.admits(t)))
        .map(|t| t.id.clone())
        .collect();
    if alone.is_empty() {
        alone = tasks.iter().map(|t| t.id.clone()).collect();
    }
    alone.sort();
    SchedError::Infeasible { unplaceable: alone }
}

fn sorted_by_id<T, F: Fn(&T) -> &str>(items: &[T], id: F) -> Vec<&T> {
    let mut v: Vec<&T> = items.iter().collect();
    v.sort_by(|a, b| id(a).cmp(id(b)));
    v
}

/// Exhaustive enumeration of all |C|^|K| assignments. Test oracle.
pub fn brute_force_optimum(tasks: &[TaskSpec], instances: &[InstanceSpec]) -> Result<usize, SchedError> {
    if tasks.len() > ORACLE_MAX_TASKS || instances.len() > ORACLE_MAX_INSTANCES {
        return Err(SchedError::OracleTooLarge { tasks: tasks.len(), instances: instances.len() });
    }
    validate(tasks, instances)?;
    if tasks.is_empty() {
        return Ok(0);
    }
    let m = instances.len();
    if m == 0 {
        return Err(infeasible(tasks, instances));
    }
    let total = m.pow(tasks.len() as u32);
    let mut best: Option<usize> = None;
    let mut choice = vec![0usize; tasks.len()];
    for code in 0..total {
        let mut rest = code;
        for c in choice.iter_mut() {
            *c = rest % m;
            rest /= m;
        }
        let mut map = BTreeMap::new();
        for (t, &c) in tasks.iter().zip(&choice) {
            map.insert(t.id.clone(), instances[c].id.clone());
        }
        let a = Assignment::from_map(map);
        if verify_assignment(tasks, instances, &a).is_ok() {
            best = Some(best.map_or(a.used_count, |b| b.min(a.used_count)));
        }
    }
    best.ok_or_else(|| infeasible(tasks, instances))
}

/// First-fit decreasing: tasks by bandwidth descending, instances by
/// capacity descending; an already-open instance is preferred over a
/// fresh one.
pub fn solve_greedy(tasks: &[TaskSpec], instances: &[InstanceSpec]) -> Result<Assignment, SchedError> {
    validate(tasks, instances)?;
    let mut order: Vec<&TaskSpec> = tasks.iter().collect();
    order.sort_by(|a, b| b.bw.cmp(&a.bw).then_with(|| a.id.cmp(&b.id)));
    let mut insts: Vec<&InstanceSpec> = instances.iter().collect();
    insts.sort_by(|a, b| b.cap.cmp(&a.cap).then_with(|| a.id.cmp(&b.id)));

    let mut load = vec![0u64; insts.len()];
    let mut open = vec![false; insts.len()];
    let mut map = BTreeMap::new();
    let mut stuck = Vec::new();
    for t in order {
        let fits = |i: usize| insts[i].covers(t) && load[i] + t.bw <= insts[i].cap;
        let pick = (0..insts.len()).find(|&i| open[i] && fits(i)).or_else(|| (0..insts.len()).find(|&i| !open[i] && fits(i)));
        match pick {
            Some(i) => {
                open[i] = true;
                load[i] += t.bw;
                map.insert(t.id.clone(), insts[i].id.clone());
            }
            None => stuck.push(t.id.clone()),
        }
    }
    if !stuck.is_empty() {
        stuck.sort();
        return Err(SchedError::Infeasible { unplaceable: stuck });
    }
    Ok(Assignment::from_map(map))
}

struct Search<'a> {
    tasks: Vec<&'a TaskSpec>,
    insts: Vec<&'a InstanceSpec>,
    /// Remaining demand from task i onward.
    suffix_demand: Vec<u64>,
    load: Vec<u64>,
    used: Vec<bool>,
    used_count: usize,
    choice: Vec<usize>,
    best: usize,
    best_choice: Option<Vec<usize>>,
}

impl Search<'_> {
    fn lower_bound_extra(&self, i: usize) -> Option<usize> {
        let remaining = self.suffix_demand[i];
        let spare: u64 = (0..self.insts.len()).filter(|&c| self.used[c]).map(|c| self.insts[c].cap - self.load[c]).sum();
        if remaining <= spare {
            return Some(0);
        }
        let max_cap = (0..self.insts.len()).filter(|&c| !self.used[c]).map(|c| self.insts[c].cap).max()?;
        Some((remaining - spare).div_ceil(max_cap) as usize)
    }

    fn run(&mut self, i: usize) {
        if i == self.tasks.len() {
            if self.used_count < self.best {
                self.best = self.used_count;
                self.best_choice = Some(self.choice.clone());
            }
            return;
        }
        match self.lower_bound_extra(i) {
            Some(extra) if self.used_count + extra < self.best => {}
            _ => return,
        }
        let t = self.tasks[i];
        // Open instances first, then fresh ones; fresh instances identical
        // in window and capacity are interchangeable, so only the first is tried.
        let mut tried_fresh: Vec<(u64, u64, u64)> = Vec::new();
        for pass_open in [true, false] {
            for c in 0..self.insts.len() {
                if self.used[c] != pass_open {
                    continue;
                }
                let inst = self.insts[c];
                if !inst.covers(t) || self.load[c] + t.bw > inst.cap {
                    continue;
                }
                if !pass_open {
                    let sig = (inst.start, inst.end, inst.cap);
                    if tried_fresh.contains(&sig) {
                        continue;
                    }
                    tried_fresh.push(sig);
                    if self.used_count + 1 >= self.best {
                        continue;
                    }
                }
                self.load[c] += t.bw;
                self.choice[i] = c;
                let opened = !self.used[c];
                if opened {
                    self.used[c] = true;
                    self.used_count += 1;
                }
                self.run(i + 1);
                if opened {
                    self.used[c] = false;
                    self.used_count -= 1;
                }
                self.load[c] -= t.bw;
            }
        }
    }
}

/// Branch-and-bound over task → instance choices. The incumbent starts
/// from the greedy solution when one exists.
pub fn solve_exact(tasks: &[TaskSpec], instances: &[InstanceSpec]) -> Result<Assignment, SchedError> {
    solve_exact_capped(tasks, instances, DEFAULT_EXACT_MAX_TASKS)
}

pub fn solve_exact_capped(tasks: &[TaskSpec], instances: &[InstanceSpec], max_tasks: usize) -> Result<Assignment, SchedError> {
    if tasks.len() > max_tasks {
        return Err(SchedError::TooLarge { tasks: tasks.len(), cap: max_tasks });
    }
    validate(tasks, instances)?;
    if tasks.is_empty() {
        return Ok(Assignment::default());
    }
    let mut order = sorted_by_id(tasks, |t| &t.id);
    order.sort_by_key(|t| std::cmp::Reverse(t.bw));
    let insts = sorted_by_id(instances, |c| &c.id);
    if order.iter().any(|t| !insts.iter().any(|c| c.admits(t))) {
        return Err(infeasible(tasks, instances));
    }
    let mut suffix_demand = vec![0u64; order.len() + 1];
    for i in (0..order.len()).rev() {
        suffix_demand[i] = suffix_demand[i + 1] + order[i].bw;
    }
    let incumbent = solve_greedy(tasks, instances).ok();
    let mut search = Search {
        suffix_demand,
        load: vec![0; insts.len()],
        used: vec![false; insts.len()],
        used_count: 0,
        choice: vec![0; order.len()],
        best: incumbent.as_ref().map_or(insts.len() + 1, |a| a.used_count),
        best_choice: None,
        tasks: order,
        insts,
    };
    search.run(0);
    match search.best_choice {
        Some(choice) => {
            let map = search.tasks.iter().zip(choice).map(|(t, c)| (t.id.clone(), search.insts[c].id.clone())).collect();
            Ok(Assignment::from_map(map))
        }
        None => incumbent.ok_or_else(|| infeasible(tasks, instances)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Greedy,
    Oracle,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Method::Exact),
            "greedy" => Ok(Method::Greedy),
            "oracle" => Ok(Method::Oracle),
            other => Err(format!("unknown method `{other}` (expected exact, greedy or oracle)")),
        }
    }
}

/// Output of `skyrelay sched solve`. The oracle reports only the count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Solution {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assignment: Option<BTreeMap<String, String>>,
    pub used_count: usize,
}

pub fn solve(problem: &Problem, method: Method) -> Result<Solution, SchedError> {
    let (assignment, used_count) = match method {
        Method::Exact => {
            let a = solve_exact(&problem.tasks, &problem.instances)?;
            (Some(a.assignment), a.used_count)
        }
        Method::Greedy => {
            let a = solve_greedy(&problem.tasks, &problem.instances)?;
            (Some(a.assignment), a.used_count)
        }
        Method::Oracle => (None, brute_force_optimum(&problem.tasks, &problem.instances)?),
    };
    Ok(Solution { method, assignment, used_count })
}
